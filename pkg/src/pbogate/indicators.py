"""Technical indicator implementations over single-asset OHLCV arrays.

Each function returns ``(values, warmup)`` where ``values`` is a float64
array of the input length and ``warmup`` counts the leading entries that
are not yet reliable (window not filled, or recursive filter still
settling). Entries before the first computable value are NaN; everything
at or after index ``warmup`` is finite for finite inputs.

Conventions (standard industry definitions, all periods configurable):

* RSI, DX use Wilder smoothing.
* MACD is the 12/26 EMA difference; the 9-period signal line and the
  histogram are selectable outputs.
* CCI uses the 0.015 scaling constant and mean absolute deviation from
  the rolling mean of the typical price.
* ULTOSC combines 7/14/28 buying-pressure averages with 4/2/1 weights.
* OBV is cumulative with OBV_0 = 0.
* The dominant-cycle estimator is the Ehlers smoothed Hilbert-transform
  recursion over the bar midpoint (high+low)/2, clamped to [6, 50] bars.

Degenerate cases are pinned so no NaN/inf can leak past the warmup
region: RSI is 100 with zero average loss, 0 with zero average gain and
50 when both vanish; WILLR is -50 on a flat window; CCI and DX are 0
when their denominators vanish.
"""

from __future__ import annotations

import math

import numpy as np

__all__ = [
    "rsi",
    "macd",
    "cci",
    "dx",
    "roc",
    "ultosc",
    "willr",
    "obv",
    "ht_dcperiod",
    "INDICATOR_INPUTS",
    "INDICATOR_DEFAULTS",
    "CANONICAL_FEATURE_ORDER",
]

# Number of bars the Ehlers recursion is given to settle before values
# are trusted (twice the conventional 32-bar unstable period, rounded).
HT_WARMUP = 63


def _as_float_array(x, name: str) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be 1-dimensional, got shape {arr.shape}")
    return arr


def _check_period(period: int, n: int, name: str = "period") -> None:
    if period < 1:
        raise ValueError(f"{name} must be >= 1, got {period}")
    if period > n:
        raise ValueError(f"{name}={period} exceeds series length {n}")


def rsi(close, period: int = 14) -> tuple[np.ndarray, int]:
    """Relative Strength Index with Wilder smoothing."""
    close = _as_float_array(close, "close")
    n = close.size
    _check_period(period, n - 1 if n > 1 else n)
    out = np.full(n, np.nan)
    delta = np.diff(close)
    gain = np.maximum(delta, 0.0)
    loss = np.maximum(-delta, 0.0)
    avg_gain = gain[:period].mean()
    avg_loss = loss[:period].mean()
    out[period] = _rsi_value(avg_gain, avg_loss)
    for t in range(period + 1, n):
        avg_gain = (avg_gain * (period - 1) + gain[t - 1]) / period
        avg_loss = (avg_loss * (period - 1) + loss[t - 1]) / period
        out[t] = _rsi_value(avg_gain, avg_loss)
    return out, period


def _rsi_value(avg_gain: float, avg_loss: float) -> float:
    if avg_loss == 0.0 and avg_gain == 0.0:
        return 50.0
    if avg_loss == 0.0:
        return 100.0
    if avg_gain == 0.0:
        return 0.0
    rs = avg_gain / avg_loss
    return 100.0 - 100.0 / (1.0 + rs)


def _ema(x: np.ndarray, span: int) -> np.ndarray:
    """Recursive EMA seeded with the first value (pandas adjust=False)."""
    alpha = 2.0 / (span + 1.0)
    out = np.empty_like(x)
    out[0] = x[0]
    for t in range(1, x.size):
        out[t] = alpha * x[t] + (1.0 - alpha) * out[t - 1]
    return out


def macd(
    close,
    fast: int = 12,
    slow: int = 26,
    signal: int = 9,
    output: str = "line",
) -> tuple[np.ndarray, int]:
    """Moving Average Convergence Divergence.

    ``output`` selects the series: "line" (fast EMA - slow EMA, the
    default feature), "signal" (EMA of the line) or "hist" (line minus
    signal).
    """
    close = _as_float_array(close, "close")
    n = close.size
    if fast >= slow:
        raise ValueError(f"fast period {fast} must be < slow period {slow}")
    _check_period(fast, n, "fast")
    _check_period(slow, n, "slow")
    _check_period(signal, n, "signal")
    line = _ema(close, fast) - _ema(close, slow)
    warmup = min(slow + signal, n)
    if output == "line":
        values = line
    elif output == "signal":
        values = _ema(line, signal)
    elif output == "hist":
        values = line - _ema(line, signal)
    else:
        raise ValueError(f"unknown MACD output {output!r}")
    return values.copy(), warmup


def cci(high, low, close, period: int = 20) -> tuple[np.ndarray, int]:
    """Commodity Channel Index over the typical price."""
    high = _as_float_array(high, "high")
    low = _as_float_array(low, "low")
    close = _as_float_array(close, "close")
    n = close.size
    _check_period(period, n)
    tp = (high + low + close) / 3.0
    out = np.full(n, np.nan)
    for t in range(period - 1, n):
        window = tp[t - period + 1 : t + 1]
        sma = window.mean()
        md = np.abs(window - sma).mean()
        out[t] = 0.0 if md == 0.0 else (tp[t] - sma) / (0.015 * md)
    return out, period - 1


def dx(high, low, close, period: int = 14) -> tuple[np.ndarray, int]:
    """Directional Index from Wilder-smoothed +DM / -DM / TR."""
    high = _as_float_array(high, "high")
    low = _as_float_array(low, "low")
    close = _as_float_array(close, "close")
    n = close.size
    _check_period(period, n - 1 if n > 1 else n)
    up = high[1:] - high[:-1]
    down = low[:-1] - low[1:]
    plus_dm = np.where((up > down) & (up > 0), up, 0.0)
    minus_dm = np.where((down > up) & (down > 0), down, 0.0)
    tr = np.maximum.reduce(
        [
            high[1:] - low[1:],
            np.abs(high[1:] - close[:-1]),
            np.abs(low[1:] - close[:-1]),
        ]
    )
    out = np.full(n, np.nan)
    s_plus = plus_dm[:period].sum()
    s_minus = minus_dm[:period].sum()
    s_tr = tr[:period].sum()
    out[period] = _dx_value(s_plus, s_minus, s_tr)
    for t in range(period + 1, n):
        # Wilder sum-smoothing: drop 1/period of the running sum, add new.
        s_plus += plus_dm[t - 1] - s_plus / period
        s_minus += minus_dm[t - 1] - s_minus / period
        s_tr += tr[t - 1] - s_tr / period
        out[t] = _dx_value(s_plus, s_minus, s_tr)
    return out, period


def _dx_value(s_plus: float, s_minus: float, s_tr: float) -> float:
    if s_tr == 0.0:
        return 0.0
    plus_di = 100.0 * s_plus / s_tr
    minus_di = 100.0 * s_minus / s_tr
    den = plus_di + minus_di
    return 0.0 if den == 0.0 else 100.0 * abs(plus_di - minus_di) / den


def roc(close, period: int = 10) -> tuple[np.ndarray, int]:
    """Rate of change, in percent of the price ``period`` bars back."""
    close = _as_float_array(close, "close")
    n = close.size
    _check_period(period, n - 1 if n > 1 else n)
    out = np.full(n, np.nan)
    out[period:] = 100.0 * (close[period:] / close[:-period] - 1.0)
    return out, period


def ultosc(
    high, low, close, fast: int = 7, mid: int = 14, slow: int = 28
) -> tuple[np.ndarray, int]:
    """Ultimate Oscillator: weighted buying-pressure over three horizons."""
    high = _as_float_array(high, "high")
    low = _as_float_array(low, "low")
    close = _as_float_array(close, "close")
    n = close.size
    if not fast < mid < slow:
        raise ValueError(f"periods must satisfy fast < mid < slow, got {fast},{mid},{slow}")
    _check_period(slow, n - 1 if n > 1 else n, "slow")
    true_low = np.minimum(low[1:], close[:-1])
    bp = close[1:] - true_low
    tr = np.maximum(high[1:], close[:-1]) - true_low
    out = np.full(n, np.nan)
    for t in range(slow, n):
        terms = []
        for k, weight in ((fast, 4.0), (mid, 2.0), (slow, 1.0)):
            bp_sum = bp[t - k : t].sum()
            tr_sum = tr[t - k : t].sum()
            terms.append(weight * (bp_sum / tr_sum if tr_sum > 0.0 else 0.0))
        out[t] = 100.0 * sum(terms) / 7.0
    return out, slow


def willr(high, low, close, period: int = 14) -> tuple[np.ndarray, int]:
    """Williams %R in [-100, 0]; -50 on a flat window."""
    high = _as_float_array(high, "high")
    low = _as_float_array(low, "low")
    close = _as_float_array(close, "close")
    n = close.size
    _check_period(period, n)
    out = np.full(n, np.nan)
    for t in range(period - 1, n):
        hh = high[t - period + 1 : t + 1].max()
        ll = low[t - period + 1 : t + 1].min()
        rng = hh - ll
        out[t] = -50.0 if rng == 0.0 else -100.0 * (hh - close[t]) / rng
    return out, period - 1


def obv(close, volume) -> tuple[np.ndarray, int]:
    """On Balance Volume, cumulative with OBV_0 = 0."""
    close = _as_float_array(close, "close")
    volume = _as_float_array(volume, "volume")
    if close.size != volume.size:
        raise ValueError("close and volume must have equal length")
    direction = np.sign(np.diff(close))
    out = np.empty(close.size)
    out[0] = 0.0
    out[1:] = np.cumsum(direction * volume[1:])
    return out, 0


def ht_dcperiod(high, low) -> tuple[np.ndarray, int]:
    """Dominant cycle period via the Ehlers smoothed Hilbert transform.

    Runs the in-phase/quadrature recursion over the bar midpoint and
    returns the smoothed period estimate, clamped per Ehlers to change
    at most 50%/33% per bar and to stay within [6, 50] bars.
    """
    high = _as_float_array(high, "high")
    low = _as_float_array(low, "low")
    if high.size != low.size:
        raise ValueError("high and low must have equal length")
    x = (high + low) / 2.0
    n = x.size
    smooth = np.zeros(n)
    det = np.zeros(n)
    q1 = np.zeros(n)
    i1 = np.zeros(n)
    i2 = np.zeros(n)
    q2 = np.zeros(n)
    re = np.zeros(n)
    im = np.zeros(n)
    out = np.full(n, np.nan)

    def past(arr: np.ndarray, t: int, lag: int) -> float:
        idx = t - lag
        return arr[idx] if idx >= 0 else 0.0

    def hilbert(arr: np.ndarray, t: int, adj: float) -> float:
        return (
            0.0962 * past(arr, t, 0)
            + 0.5769 * past(arr, t, 2)
            - 0.5769 * past(arr, t, 4)
            - 0.0962 * past(arr, t, 6)
        ) * adj

    period = 0.0
    smooth_period = 0.0
    for t in range(n):
        smooth[t] = (
            4.0 * x[t] + 3.0 * past(x, t, 1) + 2.0 * past(x, t, 2) + past(x, t, 3)
        ) / 10.0
        adj = 0.075 * period + 0.54
        det[t] = hilbert(smooth, t, adj)
        q1[t] = hilbert(det, t, adj)
        i1[t] = past(det, t, 3)
        ji = hilbert(i1, t, adj)
        jq = hilbert(q1, t, adj)
        i2[t] = 0.2 * (i1[t] - jq) + 0.8 * past(i2, t, 1)
        q2[t] = 0.2 * (q1[t] + ji) + 0.8 * past(q2, t, 1)
        re[t] = 0.2 * (i2[t] * past(i2, t, 1) + q2[t] * past(q2, t, 1)) + 0.8 * past(re, t, 1)
        im[t] = 0.2 * (i2[t] * past(q2, t, 1) - q2[t] * past(i2, t, 1)) + 0.8 * past(im, t, 1)
        if im[t] != 0.0 and re[t] != 0.0:
            candidate = 2.0 * math.pi / math.atan(im[t] / re[t])
        else:
            candidate = period
        candidate = min(candidate, 1.5 * period) if period > 0.0 else candidate
        candidate = max(candidate, 0.67 * period)
        candidate = min(max(candidate, 6.0), 50.0)
        period = 0.2 * candidate + 0.8 * period
        smooth_period = 0.33 * period + 0.67 * smooth_period
        out[t] = smooth_period
    warmup = min(HT_WARMUP, n)
    out[:warmup] = np.nan
    return out, warmup


# Which OHLCV columns each indicator consumes, keyed by the canonical
# lowercase name used in feature lists and CLI configs.
INDICATOR_INPUTS: dict[str, tuple[str, ...]] = {
    "rsi": ("close",),
    "macd": ("close",),
    "cci": ("high", "low", "close"),
    "dx": ("high", "low", "close"),
    "roc": ("close",),
    "ultosc": ("high", "low", "close"),
    "willr": ("high", "low", "close"),
    "obv": ("close", "volume"),
    "ht": ("high", "low"),
}

INDICATOR_DEFAULTS: dict[str, dict[str, int]] = {
    "rsi": {"period": 14},
    "macd": {"fast": 12, "slow": 26, "signal": 9},
    "cci": {"period": 20},
    "dx": {"period": 14},
    "roc": {"period": 10},
    "ultosc": {"fast": 7, "mid": 14, "slow": 28},
    "willr": {"period": 14},
    "obv": {},
    "ht": {},
}

_FUNCTIONS = {
    "rsi": rsi,
    "macd": macd,
    "cci": cci,
    "dx": dx,
    "roc": roc,
    "ultosc": ultosc,
    "willr": willr,
    "obv": obv,
    "ht": ht_dcperiod,
}

# Raw volume first, then the indicators: the order the correlation
# filter scans when deciding which of a correlated pair to drop.
CANONICAL_FEATURE_ORDER: tuple[str, ...] = (
    "volume",
    "rsi",
    "macd",
    "cci",
    "dx",
    "roc",
    "ultosc",
    "willr",
    "obv",
    "ht",
)


def compute(name: str, inputs: dict[str, np.ndarray], **params) -> tuple[np.ndarray, int]:
    """Dispatch an indicator by name over named OHLCV arrays."""
    key = name.lower()
    if key not in _FUNCTIONS:
        raise ValueError(f"unknown indicator {name!r}; known: {sorted(_FUNCTIONS)}")
    args = [inputs[col] for col in INDICATOR_INPUTS[key]]
    merged = {**INDICATOR_DEFAULTS[key], **params}
    return _FUNCTIONS[key](*args, **merged)
