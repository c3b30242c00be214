"""Trading strategies, performance metrics, and external trial import.

Strategies implement ``act(state) -> action vector`` (units to trade;
positive buys, negative sells) and optionally ``begin_episode(state)``
which ``run_episode`` calls at reset. Benchmarks are stateless or carry
trivial per-episode state; the one trainable strategy is a
cross-entropy-method search over a linear-softmax allocation policy,
exposed sklearn-style (fit / predict / get_params).

Hyperparameters of the trainable strategy deliberately mirror the
conventional DRL tuning knobs so a hyperparameter grid over it is
meaningful: step_size scales the CEM elite fraction, batch_size is the
population size, gamma discounts rollout rewards, net_dimension is the
width of a fixed random tanh feature expansion, target_step caps the
rollout horizon, and break_step is the total environment-step budget.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .env import EpisodeResult, MarketReplayEnv, MarketState, run_episode
from .errors import ConfigError, DataError

__all__ = [
    "DEFAULT_GRID",
    "PerfMetrics",
    "EvalResult",
    "DoNothingAgent",
    "EqualWeightAgent",
    "BuyHoldAgent",
    "MomentumAgent",
    "RandomAgent",
    "CemTradingPolicy",
    "metrics_from_equities",
    "evaluate",
    "ExternalTrial",
    "import_external_trials",
]

logger = logging.getLogger(__name__)

# One value per knob is drawn per trial; the full grid has
# 5*4*5*3*3*3 = 2700 cells.
DEFAULT_GRID: dict[str, tuple] = {
    "step_size": (3e-2, 2.3e-2, 1.5e-2, 7.5e-3, 5e-6),
    "batch_size": (512, 1280, 2048, 3080),
    "gamma": (0.95, 0.96, 0.97, 0.98, 0.99),
    "net_dimension": (2**9, 2**10, 2**11),
    "target_step": (2500, 3750, 5000),
    "break_step": (30000, 45000, 60000),
}


@dataclass(frozen=True)
class PerfMetrics:
    """Episode-level performance summary.

    ``cumulative_return`` is (v_end - v_start)/v_start compounded over
    all episodes; ``volatility`` is the population std of the per-bar
    simple returns; ``sharpe`` is their mean/std without annualization,
    None when the std is zero (constant growth has no defined Sharpe).
    """

    cumulative_return: float
    volatility: float
    sharpe: float | None

    def as_dict(self) -> dict:
        return {
            "cumulative_return": self.cumulative_return,
            "volatility": self.volatility,
            "sharpe": self.sharpe,
        }


def _simple_returns(equity: np.ndarray) -> np.ndarray:
    return np.diff(equity) / equity[:-1]


def metrics_from_equities(equities: list[np.ndarray]) -> PerfMetrics:
    """Metrics over one or more episode equity curves.

    Episodes compound: R = prod(v_end/v_start) - 1, identical to
    compounding the pooled per-bar simple returns. Volatility and
    Sharpe use the pooled simple returns (episode boundaries contribute
    no return).
    """
    if not equities:
        raise ValueError("metrics need at least one equity curve")
    rets = np.concatenate([_simple_returns(np.asarray(e, dtype=np.float64)) for e in equities])
    if rets.size == 0:
        raise ValueError("metrics need at least one return (2 equity points)")
    growth = math.prod(float(e[-1]) / float(e[0]) for e in equities)
    mean = float(rets.mean())
    std = float(rets.std())
    sharpe = mean / std if std > 0.0 else None
    return PerfMetrics(cumulative_return=growth - 1.0, volatility=std, sharpe=sharpe)


class DoNothingAgent:
    """Holds cash forever; the zero baseline."""

    def act(self, state: MarketState) -> np.ndarray:
        return np.zeros(state.holdings.size)


class EqualWeightAgent:
    """Splits the starting cash equally across assets at t=0, then holds.

    The per-asset order is sized so cost including fee equals the cash
    share: q = (b_0/D) / (p * (1 + fee_rate)).
    """

    def __init__(self, fee_rate: float = 0.003):
        self.fee_rate = fee_rate
        self._placed = False

    def begin_episode(self, state: MarketState) -> None:
        self._placed = False

    def act(self, state: MarketState) -> np.ndarray:
        if self._placed:
            return np.zeros(state.holdings.size)
        self._placed = True
        d = state.holdings.size
        share = state.cash / d
        return share / (state.prices * (1.0 + self.fee_rate))


class BuyHoldAgent:
    """All-in on fixed weights at t=0, then zero action forever.

    Default weights put everything in the first asset; pass explicit
    weights for other static allocations.
    """

    def __init__(self, weights: np.ndarray | None = None, fee_rate: float = 0.003):
        self.weights = weights
        self.fee_rate = fee_rate
        self._placed = False

    def begin_episode(self, state: MarketState) -> None:
        self._placed = False

    def act(self, state: MarketState) -> np.ndarray:
        if self._placed:
            return np.zeros(state.holdings.size)
        self._placed = True
        d = state.holdings.size
        if self.weights is None:
            w = np.zeros(d)
            w[0] = 1.0
        else:
            w = np.asarray(self.weights, dtype=np.float64)
            if w.shape != (d,) or w.min() < 0 or w.sum() <= 0:
                raise ConfigError("weights must be a non-negative vector over the assets")
            w = w / w.sum()
        return state.cash * w / (state.prices * (1.0 + self.fee_rate))


class MomentumAgent:
    """Chases last-bar winners: sell fallers, spread cash over risers."""

    def __init__(self, fee_rate: float = 0.003):
        self.fee_rate = fee_rate
        self._prev: np.ndarray | None = None

    def begin_episode(self, state: MarketState) -> None:
        self._prev = None

    def act(self, state: MarketState) -> np.ndarray:
        prices = state.prices
        if self._prev is None:
            self._prev = prices.copy()
            return np.zeros(prices.size)
        rising = prices > self._prev
        action = np.where(~rising, -state.holdings, 0.0)
        cash_after = state.cash + float(
            (prices * -action) @ np.ones(prices.size)
        ) * (1.0 - self.fee_rate)
        n_rising = int(rising.sum())
        if n_rising:
            budget = cash_after / n_rising
            buys = budget / (prices * (1.0 + self.fee_rate)) - state.holdings
            action = np.where(rising & (buys > 0), buys, action)
        self._prev = prices.copy()
        return action


class RandomAgent:
    """Seeded noise trader; identical action sequence on every replay."""

    def __init__(self, seed: int, scale: float = 0.1):
        self.seed = int(seed)
        self.scale = scale
        self._rng = np.random.default_rng(self.seed)

    def begin_episode(self, state: MarketState) -> None:
        self._rng = np.random.default_rng(self.seed)

    def act(self, state: MarketState) -> np.ndarray:
        d = state.holdings.size
        unit = self.scale * state.value / d / state.prices
        return self._rng.normal(0.0, 1.0, size=d) * unit


def _softmax(u: np.ndarray) -> np.ndarray:
    z = u - u.max()
    e = np.exp(z)
    return e / e.sum()


class CemTradingPolicy(BaseEstimator):
    """Cross-entropy-method search over a linear-softmax allocation.

    The policy maps the state through a fixed random tanh expansion of
    width ``net_dimension`` and a linear head into D+1 softmax scores:
    target portfolio weights for each asset plus cash. The action is
    the rebalance toward those targets. fit() runs CEM on the flat
    parameter vector: sample a population, roll each candidate out on
    the training window, move the sampling distribution toward the
    elites, and stop when the total environment-step budget
    (``break_step``) is spent. break_step=0 returns the deterministic
    zero initialization unchanged.

    Everything is driven by ``seed``: the expansion, the population
    draws, and the rollout start offsets. Same seed, same data, same
    hyperparameters -> identical parameters.
    """

    # CEM constants: distribution smoothing and exploration noise floor
    _SMOOTHING = 0.7
    _SIGMA_FLOOR = 1e-3

    def __init__(
        self,
        step_size: float = 1.5e-2,
        batch_size: int = 32,
        gamma: float = 0.97,
        net_dimension: int = 16,
        target_step: int = 256,
        break_step: int = 4096,
        seed: int = 0,
    ):
        self.step_size = step_size
        self.batch_size = batch_size
        self.gamma = gamma
        self.net_dimension = net_dimension
        self.target_step = target_step
        self.break_step = break_step
        self.seed = seed

    def _check_hyperparams(self) -> None:
        if self.step_size <= 0:
            raise ConfigError(f"step_size must be positive, got {self.step_size}")
        if self.batch_size < 2:
            raise ConfigError(f"batch_size must be >= 2, got {self.batch_size}")
        if not 0 < self.gamma <= 1:
            raise ConfigError(f"gamma must be in (0, 1], got {self.gamma}")
        if self.net_dimension < 1 or self.target_step < 1:
            raise ConfigError("net_dimension and target_step must be >= 1")
        if self.break_step < 0:
            raise ConfigError(f"break_step must be >= 0, got {self.break_step}")

    def _input_vector(self, state: MarketState) -> np.ndarray:
        v = state.value
        pos = state.prices * state.holdings / v
        feats = np.clip(
            (state.features - self._feat_mean) / self._feat_std, -10.0, 10.0
        )
        return np.concatenate(([state.cash / v], pos, feats))

    def _basis(self, state: MarketState) -> np.ndarray:
        x = self._input_vector(state)
        return np.concatenate(([1.0], np.tanh(self._projection @ x)))

    def _weights(self, theta: np.ndarray, state: MarketState) -> np.ndarray:
        w = theta.reshape(self._n_targets, self.net_dimension + 1)
        return _softmax(w @ self._basis(state))

    def _action_for(self, theta: np.ndarray, state: MarketState) -> np.ndarray:
        weights = self._weights(theta, state)  # D asset weights + trailing cash
        target_units = weights[:-1] * state.value / state.prices
        return target_units - state.holdings

    def fit(self, env: MarketReplayEnv, train_ranges: list[tuple[int, int]]):
        """Search policy parameters on the given contiguous index ranges."""
        self._check_hyperparams()
        ranges = [(int(lo), int(hi)) for lo, hi in train_ranges if hi - lo >= 2]
        if not ranges:
            raise ConfigError("no training range with at least 2 timestamps")

        rng = np.random.default_rng(int(self.seed))
        d = env.n_assets
        self._n_targets = d + 1
        # policy input: cash fraction, D position weights, I*D features
        # (prices enter through the position weights, not raw)
        n_in = 1 + d + env.features.values.shape[1]
        # feature normalization from the training rows only
        rows = np.concatenate([env.features.values[lo:hi] for lo, hi in ranges])
        self._feat_mean = rows.mean(axis=0)
        self._feat_std = np.where(rows.std(axis=0) > 0, rows.std(axis=0), 1.0)
        self._projection = rng.normal(0.0, 1.0 / math.sqrt(n_in), (self.net_dimension, n_in))

        n_params = self._n_targets * (self.net_dimension + 1)
        mean = np.zeros(n_params)
        sigma = np.ones(n_params)
        elite_frac = min(max(10.0 * self.step_size, 1.0 / self.batch_size), 0.5)
        n_elite = max(int(round(elite_frac * self.batch_size)), 1)

        steps_used = 0
        generations = 0
        while steps_used < self.break_step:
            pop = mean + sigma * rng.normal(0.0, 1.0, (self.batch_size, n_params))
            scores = np.empty(self.batch_size)
            for i in range(self.batch_size):
                score, used = self._rollout(env, pop[i], ranges, rng)
                scores[i] = score
                steps_used += used
            elite_idx = np.argsort(scores, kind="stable")[-n_elite:]
            elites = pop[elite_idx]
            mean = (1 - self._SMOOTHING) * mean + self._SMOOTHING * elites.mean(axis=0)
            spread = elites.std(axis=0) if n_elite > 1 else np.zeros(n_params)
            sigma = np.maximum(
                (1 - self._SMOOTHING) * sigma + self._SMOOTHING * spread,
                self._SIGMA_FLOOR,
            )
            generations += 1
        self.theta_ = mean
        self.n_generations_ = generations
        self.env_steps_ = steps_used
        logger.debug(
            "CEM finished: %d generations, %d env steps", generations, steps_used
        )
        return self

    def _rollout(
        self,
        env: MarketReplayEnv,
        theta: np.ndarray,
        ranges: list[tuple[int, int]],
        rng: np.random.Generator,
    ) -> tuple[float, int]:
        lo, hi = ranges[rng.integers(len(ranges))]
        span = hi - lo
        horizon = min(self.target_step, span - 1)
        start = lo if span - 1 == horizon else lo + int(rng.integers(span - horizon))
        state = env.reset((start, start + horizon + 1))
        total = 0.0
        discount = 1.0
        steps = 0
        while not state.done:
            result = env.step(self._action_for(theta, state))
            total += discount * result.reward
            discount *= self.gamma
            state = result.next_state
            steps += 1
        return total, steps

    def act(self, state: MarketState) -> np.ndarray:
        check_is_fitted(self, "theta_")
        return self._action_for(self.theta_, state)

    def predict(self, state: MarketState) -> np.ndarray:
        return self.act(state)

    def params_to_dict(self) -> dict:
        """Serializable trained parameters, enough to replay decisions."""
        check_is_fitted(self, "theta_")
        return {
            "theta": self.theta_.tolist(),
            "projection": self._projection.tolist(),
            "feat_mean": self._feat_mean.tolist(),
            "feat_std": self._feat_std.tolist(),
            "n_targets": self._n_targets,
        }


@dataclass(frozen=True)
class EvalResult:
    """Validation outcome of one agent over one or more episodes.

    ``currency_returns`` aligns with ``timestamps``: v_t - v_{t-1} in
    quote currency, with 0.0 at the first bar of each episode (no
    previous bar inside the episode).
    """

    timestamps: np.ndarray
    currency_returns: np.ndarray
    metrics: PerfMetrics
    equities: tuple[np.ndarray, ...] = field(repr=False, default=())


def evaluate(agent, env: MarketReplayEnv, validation_ranges) -> EvalResult:
    """Run one fresh-cash episode per contiguous validation range."""
    ranges = [(int(lo), int(hi)) for lo, hi in validation_ranges]
    if not ranges:
        raise ConfigError("evaluate needs at least one validation range")
    ts_parts, ret_parts, equities = [], [], []
    for lo, hi in ranges:
        ep: EpisodeResult = run_episode(env, agent, (lo, hi))
        ts_parts.append(ep.timestamps)
        ret_parts.append(np.concatenate(([0.0], np.diff(ep.equity))))
        equities.append(ep.equity)
    return EvalResult(
        timestamps=np.concatenate(ts_parts),
        currency_returns=np.concatenate(ret_parts),
        metrics=metrics_from_equities(equities),
        equities=tuple(equities),
    )


@dataclass(frozen=True)
class ExternalTrial:
    """Validation returns of one externally trained strategy."""

    trial_id: str
    series: dict[int, tuple[np.ndarray, np.ndarray]]  # split -> (timestamps, returns)


def import_external_trials(path) -> list[ExternalTrial]:
    """Load per-trial, per-split validation returns from CSV.

    Expected columns: trial_id, split_id, timestamp, return. Every
    trial must cover exactly the same (split_id, timestamp) cells;
    gaps and duplicates are rejected with the offending cell named.
    """
    cells: dict[str, dict[tuple[int, int], float]] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        need = {"trial_id", "split_id", "timestamp", "return"}
        have = set(reader.fieldnames or [])
        if not need <= have:
            raise DataError(f"{path}: missing columns {sorted(need - have)}")
        for i, row in enumerate(reader):
            lineno = i + 2
            try:
                trial = row["trial_id"].strip()
                key = (int(row["split_id"]), int(row["timestamp"]))
                value = float(row["return"])
            except (TypeError, ValueError):
                raise DataError(f"{path}: row {lineno}: cannot parse {row}") from None
            if not math.isfinite(value):
                raise DataError(f"{path}: row {lineno}: non-finite return")
            per_trial = cells.setdefault(trial, {})
            if key in per_trial:
                raise DataError(
                    f"{path}: duplicate cell trial={trial} split={key[0]} timestamp={key[1]}"
                )
            per_trial[key] = value
    if not cells:
        raise DataError(f"{path}: no data rows")

    ids = sorted(cells, key=lambda s: (len(s), s))
    reference = sorted(cells[ids[0]])
    for trial in ids[1:]:
        got = sorted(cells[trial])
        if got != reference:
            ref_set, got_set = set(reference), set(got)
            diff = sorted(ref_set ^ got_set)[0]
            raise DataError(
                f"{path}: ragged coverage: trial={trial} vs trial={ids[0]}"
                f" differ at split={diff[0]} timestamp={diff[1]}"
            )

    out = []
    for trial in ids:
        series: dict[int, tuple[np.ndarray, np.ndarray]] = {}
        by_split: dict[int, list[tuple[int, float]]] = {}
        for (split, ts), val in cells[trial].items():
            by_split.setdefault(split, []).append((ts, val))
        for split, pairs in sorted(by_split.items()):
            pairs.sort()
            series[split] = (
                np.asarray([p[0] for p in pairs], dtype=np.int64),
                np.asarray([p[1] for p in pairs]),
            )
        out.append(ExternalTrial(trial_id=trial, series=series))
    return out
