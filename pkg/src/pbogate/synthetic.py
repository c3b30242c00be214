"""Deterministic synthetic market data for tests and demos.

Prices follow per-asset geometric random walks with configurable drift
and volatility; bars are built so the OHLC invariants hold by
construction. The volatility index series is a smoothed positive
process with optional spike windows pushed above a given threshold, for
exercising the circuit breaker. Everything is a pure function of the
seed.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .market_data import AssetSeries, Panel

__all__ = [
    "synthetic_series",
    "synthetic_panel",
    "synthetic_cvix",
    "write_panel_csvs",
    "write_cvix_csv",
]

BAR_INTERVAL = 300  # 5-minute bars
START_TS = 1_577_836_800  # 2020-01-01T00:00:00Z


def synthetic_series(
    asset: str,
    n_bars: int,
    seed: int,
    drift: float = 0.0001,
    vol: float = 0.01,
    start_price: float = 100.0,
    start_ts: int = START_TS,
    interval: int = BAR_INTERVAL,
) -> AssetSeries:
    """One asset's OHLCV random walk."""
    rng = np.random.default_rng(seed)
    steps = rng.normal(drift, vol, size=n_bars)
    close = start_price * np.exp(np.cumsum(steps))
    open_ = np.concatenate(([start_price], close[:-1]))
    span = np.abs(rng.normal(0.0, vol / 2.0, size=n_bars))
    high = np.maximum(open_, close) * (1.0 + span)
    low = np.minimum(open_, close) * (1.0 - span)
    volume = 1_000.0 * (1.0 + np.abs(steps) / vol) * rng.uniform(0.5, 1.5, size=n_bars)
    ts = start_ts + interval * np.arange(n_bars, dtype=np.int64)
    return AssetSeries(
        asset=asset,
        timestamps=ts,
        open=open_,
        high=high,
        low=low,
        close=close,
        volume=volume,
    )


def synthetic_panel(
    n_assets: int,
    n_bars: int,
    seed: int,
    drift: float = 0.0001,
    vol: float = 0.01,
    start_ts: int = START_TS,
    interval: int = BAR_INTERVAL,
) -> Panel:
    """D assets on a shared grid; per-asset streams split from one seed."""
    root = np.random.default_rng(seed)
    child_seeds = root.integers(0, 2**63 - 1, size=n_assets)
    series = [
        synthetic_series(
            f"asset{d:02d}",
            n_bars,
            seed=int(child_seeds[d]),
            drift=drift * (1.0 + 0.5 * d / max(n_assets - 1, 1)),
            vol=vol * (1.0 + 0.3 * d / max(n_assets - 1, 1)),
            start_price=50.0 + 25.0 * d,
            start_ts=start_ts,
            interval=interval,
        )
        for d in range(n_assets)
    ]
    fields = {
        k: np.stack([getattr(s, k) for s in series])
        for k in ("open", "high", "low", "close", "volume")
    }
    return Panel(
        assets=tuple(s.asset for s in series),
        timestamps=series[0].timestamps,
        bar_interval=interval,
        **fields,
    )


def synthetic_cvix(
    n_bars: int,
    seed: int,
    base: float = 60.0,
    vol: float = 2.0,
    spikes: tuple[tuple[int, int], ...] = (),
    spike_level: float = 95.0,
) -> np.ndarray:
    """A smooth positive index; ``spikes`` are [start, end) windows held
    above ``spike_level``."""
    rng = np.random.default_rng(seed)
    noise = rng.normal(0.0, vol, size=n_bars)
    smooth = np.convolve(noise, np.ones(5) / 5.0, mode="same")
    series = np.maximum(base + smooth, 1.0)
    for lo, hi in spikes:
        window = slice(max(lo, 0), min(hi, n_bars))
        series[window] = spike_level + np.abs(rng.normal(0.0, 1.0, len(range(*window.indices(n_bars)))))
    return series


def write_panel_csvs(panel: Panel, directory) -> list[Path]:
    """One OHLCV CSV per asset, the shape ``load_csv`` expects."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for d, asset in enumerate(panel.assets):
        path = directory / f"{asset}.csv"
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["timestamp", "open", "high", "low", "close", "volume"])
            for t in range(panel.n_timestamps):
                writer.writerow(
                    [
                        int(panel.timestamps[t]),
                        repr(float(panel.open[d, t])),
                        repr(float(panel.high[d, t])),
                        repr(float(panel.low[d, t])),
                        repr(float(panel.close[d, t])),
                        repr(float(panel.volume[d, t])),
                    ]
                )
        paths.append(path)
    return paths


def write_cvix_csv(timestamps: np.ndarray, values: np.ndarray, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["timestamp", "value"])
        for t, v in zip(timestamps, values):
            writer.writerow([int(t), repr(float(v))])
    return path
