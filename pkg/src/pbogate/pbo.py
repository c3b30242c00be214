"""Probability-of-backtest-overfitting estimation and the accept/reject gate.

Pipeline: stack per-trial validation returns into a matrix M (rows =
timestamps, columns = trials) -> cut M into S contiguous row blocks ->
for every choice of S/2 blocks as in-sample (IS), score each trial on
the IS rows and on the complementary out-of-sample (OOS) rows, rank
both sides ascending, and record the relative OOS rank of the best IS
trial as omega = rank/(H+1) with logit lambda = ln(omega/(1-omega)).
A negative logit means the in-sample winner landed in the bottom half
out of sample. The overfit probability p is the fraction of
combinations with lambda < 0 (lambda = 0 counts half), and the gate
rejects the strategy family when p >= alpha.

Scoring inside a combination uses the matrix entries directly
(currency returns per bar): "sharpe" is their mean/std, "cumret" their
sum. A zero-variance column cannot produce NaN: its rank key is a
(class, value) pair placing positive-mean constants above every finite
Sharpe and negative-mean constants below. Rank ties break toward the
lower trial index. All block and combination statistics are computed
blockwise (per-block count/sum/sumsq, then combined), so the single
public combination evaluator and the full estimator share bit-identical
arithmetic.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from itertools import combinations

import numpy as np
from sklearn.base import BaseEstimator

from .errors import ConfigError, DataError
from .splits import SplitPlan

__all__ = [
    "TrialMatrix",
    "CombinationSample",
    "PboResult",
    "ACCEPT",
    "REJECT",
    "build_trial_matrix",
    "partition_rows",
    "evaluate_combination",
    "estimate_pbo",
    "gate",
    "matrix_to_csv",
    "matrix_from_csv",
    "PboGate",
]

ACCEPT = "ACCEPT"
REJECT = "REJECT"

METRICS = ("sharpe", "cumret")

DEFAULT_S = 14
DEFAULT_ALPHA = 0.10
DEFAULT_BINS = 21
MAX_EXHAUSTIVE = 1_000_000


@dataclass(frozen=True)
class TrialMatrix:
    """Per-timestamp validation returns, one column per trial."""

    values: np.ndarray  # (T_rows, H) float64, finite
    trial_ids: tuple[str, ...]
    row_timestamps: np.ndarray  # (T_rows,) int64, increasing

    def __post_init__(self):
        t, h = self.values.shape
        if h < 2:
            raise ConfigError(f"trial matrix needs H >= 2 trials, got {h}")
        if len(self.trial_ids) != h or self.row_timestamps.size != t:
            raise ConfigError("trial matrix labels do not match the value grid")
        if not np.all(np.isfinite(self.values)):
            r, c = np.argwhere(~np.isfinite(self.values))[0]
            raise DataError(
                f"non-finite return at timestamp {int(self.row_timestamps[r])},"
                f" trial {self.trial_ids[c]}"
            )

    @property
    def n_rows(self) -> int:
        return int(self.values.shape[0])

    @property
    def n_trials(self) -> int:
        return int(self.values.shape[1])


@dataclass(frozen=True)
class CombinationSample:
    """One IS/OOS choice: per-trial scores, ranks of the IS winner."""

    is_blocks: tuple[int, ...]
    oos_blocks: tuple[int, ...]
    is_perf: np.ndarray  # +-inf marks zero-variance Sharpe surrogates
    oos_perf: np.ndarray
    epsilon: int  # trial index with the top IS rank
    omega: float
    lam: float

    def __post_init__(self):
        h = self.is_perf.size
        lo, hi = 1.0 / (h + 1), h / (h + 1.0)
        if not lo - 1e-15 <= self.omega <= hi + 1e-15:
            raise AssertionError(f"omega {self.omega} outside [{lo}, {hi}]")
        if not math.isfinite(self.lam):
            raise AssertionError(f"non-finite logit {self.lam}")


@dataclass(frozen=True)
class PboResult:
    p: float
    lambdas: np.ndarray
    S: int
    combination_count: int  # C(S, S/2), the full space
    n_evaluated: int  # == combination_count in exhaustive mode
    histogram_edges: np.ndarray
    histogram_counts: np.ndarray
    verdict: str
    alpha: float
    metric: str
    mode: str

    def as_dict(self) -> dict:
        return {
            "p": self.p,
            "alpha": self.alpha,
            "verdict": self.verdict,
            "S": self.S,
            "combination_count": self.combination_count,
            "n_evaluated": self.n_evaluated,
            "metric": self.metric,
            "mode": self.mode,
            "histogram": {
                "edges": self.histogram_edges.tolist(),
                "counts": self.histogram_counts.tolist(),
            },
        }


def build_trial_matrix(trials, plan: SplitPlan) -> TrialMatrix:
    """Average each trial's validation returns per timestamp across splits.

    ``trials`` is a list of objects with a ``trial_id`` and a ``series``
    mapping split index -> (timestamps, returns) over that split's
    validation rows (the shape ``import_external_trials`` returns and
    the harness produces). A timestamp validated by several splits is
    averaged over them; under the combinatorial scheme every kept
    timestamp appears in exactly C(N-1, k-1) splits. Row order is
    chronological.

    Under WF or KFOLD plans the rows cover only the timestamps those
    schemes validate at least once (for WF, the tail groups).
    """
    if not trials:
        raise ConfigError("build_trial_matrix needs at least one trial")
    n_splits = plan.n_splits
    reference: dict[int, np.ndarray] = {}
    first = trials[0]
    for trial in trials:
        missing = set(range(n_splits)) - set(trial.series.keys())
        if missing:
            raise DataError(
                f"trial {trial.trial_id} missing split {sorted(missing)[0]}"
            )
        for split_id, (ts, vals) in trial.series.items():
            if split_id not in range(n_splits):
                raise DataError(
                    f"trial {trial.trial_id} has unknown split {split_id}"
                )
            if len(ts) != len(vals):
                raise DataError(
                    f"trial {trial.trial_id} split {split_id}: length mismatch"
                )
            if split_id in reference:
                if not np.array_equal(reference[split_id], ts):
                    raise DataError(
                        f"trial {trial.trial_id} split {split_id}: timestamps differ"
                        f" from trial {first.trial_id}"
                    )
            else:
                reference[split_id] = np.asarray(ts, dtype=np.int64)

    all_ts = np.unique(np.concatenate(list(reference.values())))
    pos = {int(t): i for i, t in enumerate(all_ts)}
    h = len(trials)
    sums = np.zeros((all_ts.size, h))
    counts = np.zeros(all_ts.size)
    for j, trial in enumerate(trials):
        for split_id in range(n_splits):
            ts, vals = trial.series[split_id]
            idx = np.fromiter((pos[int(t)] for t in ts), dtype=np.intp, count=len(ts))
            np.add.at(sums[:, j], idx, np.asarray(vals, dtype=np.float64))
            if j == 0:
                np.add.at(counts, idx, 1.0)
    values = sums / counts[:, None]
    return TrialMatrix(
        values=values,
        trial_ids=tuple(str(t.trial_id) for t in trials),
        row_timestamps=all_ts,
    )


def partition_rows(matrix: TrialMatrix, s: int = DEFAULT_S) -> list[np.ndarray]:
    """Cut M into S contiguous chronological blocks of equal row count.

    Rows beyond S * floor(T_rows/S) are dropped from the tail. S must
    be even so the IS/OOS halves are the same size.
    """
    if s % 2 != 0 or s < 2:
        raise ConfigError(f"S must be an even integer >= 2, got {s}")
    t_rows = matrix.n_rows
    if s > t_rows:
        raise ConfigError(f"S={s} exceeds the {t_rows} matrix rows")
    size = t_rows // s
    return [matrix.values[b * size : (b + 1) * size] for b in range(s)]


class _BlockStats:
    """Per-block count/sum/sumsq, the sufficient statistics for scoring."""

    def __init__(self, blocks: list[np.ndarray]):
        self.n_blocks = len(blocks)
        self.n_trials = blocks[0].shape[1]
        self.counts = np.array([b.shape[0] for b in blocks], dtype=np.float64)
        self.sums = np.stack([b.sum(axis=0) for b in blocks])
        self.sumsqs = np.stack([(b * b).sum(axis=0) for b in blocks])

    def side_keys(self, chosen: tuple[int, ...], metric: str):
        """(class, value) rank keys and display scores for one side."""
        idx = list(chosen)
        n = self.counts[idx].sum()
        s = self.sums[idx].sum(axis=0)
        if metric == "cumret":
            return [(0, float(v)) for v in s], s.copy()
        q = self.sumsqs[idx].sum(axis=0)
        mean = s / n
        var = np.maximum(q / n - mean * mean, 0.0)
        keys = []
        display = np.empty(self.n_trials)
        for i in range(self.n_trials):
            m, v = float(mean[i]), float(var[i])
            if v > 0.0:
                sharpe = m / math.sqrt(v)
                keys.append((0, sharpe))
                display[i] = sharpe
            elif m > 0.0:
                keys.append((1, m))  # constant growth: above any finite Sharpe
                display[i] = math.inf
            elif m < 0.0:
                keys.append((-1, m))  # constant decline: below any finite Sharpe
                display[i] = -math.inf
            else:
                keys.append((0, 0.0))
                display[i] = 0.0
        return keys, display


def _ranks(keys) -> np.ndarray:
    """Ascending ranks 1..H; ties give the lower trial index the lower rank."""
    order = sorted(range(len(keys)), key=lambda i: (*keys[i], i))
    ranks = np.empty(len(keys), dtype=np.intp)
    for pos, trial in enumerate(order):
        ranks[trial] = pos + 1
    return ranks


def _sample_from_stats(
    stats: _BlockStats, is_blocks: tuple[int, ...], metric: str
) -> CombinationSample:
    oos_blocks = tuple(b for b in range(stats.n_blocks) if b not in is_blocks)
    is_keys, is_perf = stats.side_keys(is_blocks, metric)
    oos_keys, oos_perf = stats.side_keys(oos_blocks, metric)
    h = stats.n_trials
    epsilon = int(np.argmax(_ranks(is_keys)))
    omega = float(_ranks(oos_keys)[epsilon]) / (h + 1)
    return CombinationSample(
        is_blocks=tuple(is_blocks),
        oos_blocks=oos_blocks,
        is_perf=is_perf,
        oos_perf=oos_perf,
        epsilon=epsilon,
        omega=omega,
        lam=math.log(omega / (1.0 - omega)),
    )


def evaluate_combination(
    blocks: list[np.ndarray], is_blocks: tuple[int, ...], metric: str = "sharpe"
) -> CombinationSample:
    """Score one IS/OOS block choice against the partitioned matrix."""
    if metric not in METRICS:
        raise ConfigError(f"metric must be one of {METRICS}, got {metric!r}")
    s = len(blocks)
    chosen = tuple(sorted(int(b) for b in is_blocks))
    if len(set(chosen)) != len(chosen) or not chosen:
        raise ConfigError(f"invalid IS block choice {is_blocks}")
    if chosen[0] < 0 or chosen[-1] >= s:
        raise ConfigError(f"IS block index outside [0, {s}) in {is_blocks}")
    return _sample_from_stats(_BlockStats(blocks), chosen, metric)


def _unrank_combination(rank: int, n: int, m: int) -> tuple[int, ...]:
    """The rank-th subset (lexicographic) of size m from range(n)."""
    out = []
    x = 0
    for i in range(m):
        while math.comb(n - x - 1, m - i - 1) <= rank:
            rank -= math.comb(n - x - 1, m - i - 1)
            x += 1
        out.append(x)
        x += 1
    return tuple(out)


def estimate_pbo(
    matrix: TrialMatrix,
    s: int = DEFAULT_S,
    metric: str = "sharpe",
    alpha: float = DEFAULT_ALPHA,
    mode: str = "exhaustive",
    n_samples: int | None = None,
    seed: int | None = None,
    max_exhaustive: int = MAX_EXHAUSTIVE,
    n_bins: int = DEFAULT_BINS,
) -> PboResult:
    """Estimate the probability of backtest overfitting.

    Exhaustive mode walks all C(S, S/2) IS choices in lexicographic
    order (refused above ``max_exhaustive``); sampled mode evaluates
    ``n_samples`` distinct combinations drawn uniformly without
    replacement with ``seed``. Sampling n = C(S, S/2) therefore
    reproduces the exhaustive result exactly.

    p counts lambda < 0 fully and lambda = 0 half, over the evaluated
    combinations. The histogram spans [-ln H, ln H], the attainable
    logit range.
    """
    if metric not in METRICS:
        raise ConfigError(f"metric must be one of {METRICS}, got {metric!r}")
    if not 0.0 < alpha < 1.0:
        raise ConfigError(f"alpha must be in (0, 1), got {alpha}")
    blocks = partition_rows(matrix, s)
    stats = _BlockStats(blocks)
    total = math.comb(s, s // 2)

    if mode == "exhaustive":
        if total > max_exhaustive:
            raise ConfigError(
                f"C({s},{s//2}) = {total} exceeds the exhaustive cap"
                f" {max_exhaustive}; use sampled mode"
            )
        chosen_iter = combinations(range(s), s // 2)
    elif mode == "sampled":
        n = total if n_samples is None else int(n_samples)
        if not 1 <= n <= total:
            raise ConfigError(f"n_samples must be in [1, {total}], got {n}")
        rng = np.random.default_rng(seed)
        if n == total:
            picks = np.arange(total)
        else:
            picks = np.sort(rng.choice(total, size=n, replace=False))
        chosen_iter = (_unrank_combination(int(r), s, s // 2) for r in picks)
    else:
        raise ConfigError(f"mode must be 'exhaustive' or 'sampled', got {mode!r}")

    lambdas = []
    below = at_zero = 0
    for chosen in chosen_iter:
        sample = _sample_from_stats(stats, chosen, metric)
        lambdas.append(sample.lam)
        if sample.lam < 0.0:
            below += 1
        elif sample.lam == 0.0:
            at_zero += 1
    lam_arr = np.asarray(lambdas)
    p = (below + 0.5 * at_zero) / lam_arr.size

    h = matrix.n_trials
    edges = np.linspace(-math.log(h), math.log(h), n_bins + 1)
    # log(w) - log(1-w) can land one ulp outside the attainable range;
    # that float dust belongs in the edge bins, not outside the histogram
    hist, _ = np.histogram(np.clip(lam_arr, edges[0], edges[-1]), bins=edges)
    return PboResult(
        p=float(p),
        lambdas=lam_arr,
        S=s,
        combination_count=total,
        n_evaluated=lam_arr.size,
        histogram_edges=edges,
        histogram_counts=hist,
        verdict=gate(float(p), alpha),
        alpha=alpha,
        metric=metric,
        mode=mode,
    )


def gate(p: float, alpha: float = DEFAULT_ALPHA) -> str:
    """REJECT the strategy family iff p >= alpha (boundary rejects)."""
    if not 0.0 <= p <= 1.0:
        raise ConfigError(f"p must be in [0, 1], got {p}")
    if not 0.0 < alpha < 1.0:
        raise ConfigError(f"alpha must be in (0, 1), got {alpha}")
    return REJECT if p >= alpha else ACCEPT


def matrix_to_csv(matrix: TrialMatrix, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["timestamp", *matrix.trial_ids])
        for r in range(matrix.n_rows):
            writer.writerow(
                [int(matrix.row_timestamps[r]), *(repr(float(v)) for v in matrix.values[r])]
            )


def matrix_from_csv(path) -> TrialMatrix:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0] != "timestamp" or len(header) < 3:
            raise DataError(f"{path}: expected header 'timestamp,<trial>,<trial>,...'")
        rows = list(reader)
    if not rows:
        raise DataError(f"{path}: no data rows")
    try:
        ts = np.asarray([int(r[0]) for r in rows], dtype=np.int64)
        values = np.asarray([[float(v) for v in r[1:]] for r in rows])
    except (IndexError, ValueError) as exc:
        raise DataError(f"{path}: malformed row: {exc}") from None
    if values.shape[1] != len(header) - 1:
        raise DataError(f"{path}: ragged rows")
    return TrialMatrix(values=values, trial_ids=tuple(header[1:]), row_timestamps=ts)


def _as_matrix(X) -> TrialMatrix:
    """Coerce estimator input: a TrialMatrix passes through, a 2-D
    array gets synthetic ids and row numbers (ranks never read them)."""
    if isinstance(X, TrialMatrix):
        return X
    values = np.asarray(X, dtype=np.float64)
    if values.ndim != 2:
        raise ConfigError(f"X must be 2-dimensional, got shape {values.shape}")
    return TrialMatrix(
        values=values,
        trial_ids=tuple(f"{j:03d}" for j in range(values.shape[1])),
        row_timestamps=np.arange(values.shape[0], dtype=np.int64),
    )


class PboGate(BaseEstimator):
    """Estimator-shaped wrapper: fit(M) computes p, logits, and verdict.

    Parameters mirror ``estimate_pbo``; ``X`` is a TrialMatrix or a
    plain (T, H) array. After fit the result lives in ``result_`` with
    the headline numbers mirrored as ``p_``, ``lambdas_`` and
    ``verdict_``. ``predict`` maps matrices to their verdict string.
    """

    def __init__(
        self,
        s: int = DEFAULT_S,
        metric: str = "sharpe",
        alpha: float = DEFAULT_ALPHA,
        mode: str = "exhaustive",
        n_samples: int | None = None,
        seed: int | None = None,
        n_bins: int = DEFAULT_BINS,
    ):
        self.s = s
        self.metric = metric
        self.alpha = alpha
        self.mode = mode
        self.n_samples = n_samples
        self.seed = seed
        self.n_bins = n_bins

    def fit(self, X, y=None):
        result = estimate_pbo(
            _as_matrix(X),
            s=self.s,
            metric=self.metric,
            alpha=self.alpha,
            mode=self.mode,
            n_samples=self.n_samples,
            seed=self.seed,
            n_bins=self.n_bins,
        )
        self.result_ = result
        self.p_ = result.p
        self.lambdas_ = result.lambdas
        self.verdict_ = result.verdict
        return self

    def predict(self, X) -> str:
        return self.fit(X).verdict_
