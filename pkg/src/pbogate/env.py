"""Episodic market-replay environment.

An episode replays a half-open window [t_start, t_end) of a Panel. The
state at time t is [cash, holdings, prices, features]; an action is a
per-asset quantity vector (positive buys, negative sells) executed at
the close p_t; the reward is the portfolio-value change v_{t+1} - v_t.

Execution rules, applied in order inside ``step``:

1. If the risk halt is active (CVIX above threshold at time t), buys
   are suppressed and all holdings are liquidated this step.
2. Sells execute first, clipped elementwise to the current holdings
   (no shorting).
3. Buys execute in ascending asset index; a buy whose cost including
   its own fee exceeds the cash on hand is skipped whole.
4. Fees are fee_rate * price * |quantity|, deducted from cash at
   execution, so the equity curve is fee-true.

Cash and holdings therefore stay non-negative constructively; no
clipping back from negative values is ever needed beyond float dust.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError
from .market_data import FeatureMatrix, Panel

__all__ = [
    "EnvConfig",
    "MarketState",
    "StepResult",
    "Trade",
    "EpisodeResult",
    "MarketReplayEnv",
    "risk_control",
    "run_episode",
]

# Relative slack on the buy affordability check so a buy sized exactly
# to the available cash is not rejected by one rounding ulp.
_AFFORD_SLACK = 1e-9


@dataclass(frozen=True)
class EnvConfig:
    """Episode economics and risk-control settings."""

    initial_cash: float = 1_000_000.0
    fee_rate: float = 0.003
    cvix_threshold: float = 90.1
    cvix_series: np.ndarray | None = None  # aligned to the panel timestamps
    max_position_per_step: float | None = None  # units, elementwise clamp

    def __post_init__(self):
        if not self.initial_cash > 0:
            raise ConfigError(f"initial_cash must be positive, got {self.initial_cash}")
        if not 0 <= self.fee_rate < 1:
            raise ConfigError(f"fee_rate must be in [0, 1), got {self.fee_rate}")
        if self.max_position_per_step is not None and self.max_position_per_step <= 0:
            raise ConfigError("max_position_per_step must be positive when set")


@dataclass
class MarketState:
    """Snapshot at one replay step."""

    t: int  # index into the panel timestamp grid
    cash: float
    holdings: np.ndarray  # (D,), units, >= 0
    prices: np.ndarray  # (D,), close at t
    features: np.ndarray  # (I*D,)
    risk_halt: bool = False
    done: bool = False

    @property
    def value(self) -> float:
        """Portfolio value v_t = b_t + p_t . h_t."""
        return self.cash + float(self.prices @ self.holdings)

    def flatten(self) -> np.ndarray:
        """[b, h, p, f] vector of length 1 + (I+2)*D."""
        return np.concatenate(([self.cash], self.holdings, self.prices, self.features))


@dataclass(frozen=True)
class Trade:
    timestamp: int
    asset: str
    qty: float  # signed; positive = buy
    price: float
    fee: float


@dataclass(frozen=True)
class StepResult:
    next_state: MarketState
    reward: float
    executed_action: np.ndarray
    fee_paid: float
    done: bool
    trades: tuple[Trade, ...] = ()


@dataclass(frozen=True)
class EpisodeResult:
    """Everything an episode produced, enough to audit every number."""

    timestamps: np.ndarray  # window timestamps, length L
    equity: np.ndarray  # v_t, length L
    rewards: np.ndarray  # v_{t+1} - v_t, length L-1
    trades: tuple[Trade, ...]
    fees_total: float

    @property
    def final_value(self) -> float:
        return float(self.equity[-1])


def risk_control(cvix_value: float, threshold: float) -> bool:
    """Halt flag for one timestamp: True while CVIX is above threshold."""
    if not np.isfinite(cvix_value):
        raise DataError(f"CVIX value is not finite: {cvix_value}")
    return bool(cvix_value > threshold)


class MarketReplayEnv:
    """Replays one Panel window at a time; gym-style reset/step."""

    def __init__(self, panel: Panel, features: FeatureMatrix, config: EnvConfig):
        if features.timestamps.size != panel.n_timestamps or not np.array_equal(
            features.timestamps, panel.timestamps
        ):
            raise DataError("feature matrix timestamps do not match the panel")
        if features.assets != panel.assets:
            raise DataError("feature matrix assets do not match the panel")
        if config.cvix_series is not None:
            cvix = np.asarray(config.cvix_series, dtype=np.float64)
            if cvix.shape != (panel.n_timestamps,):
                raise DataError(
                    f"cvix_series length {cvix.shape} does not match the panel"
                    f" ({panel.n_timestamps} timestamps)"
                )
        self.panel = panel
        self.features = features
        self.config = config
        self._state: MarketState | None = None
        self._t_end = 0

    @property
    def n_assets(self) -> int:
        return self.panel.n_assets

    @property
    def state_dim(self) -> int:
        return 1 + (self.features.n_features + 2) * self.panel.n_assets

    def _halt_at(self, t: int) -> bool:
        if self.config.cvix_series is None:
            return False
        return risk_control(float(self.config.cvix_series[t]), self.config.cvix_threshold)

    def _state_at(self, t: int, cash: float, holdings: np.ndarray) -> MarketState:
        return MarketState(
            t=t,
            cash=cash,
            holdings=holdings,
            prices=self.panel.close[:, t].copy(),
            features=self.features.row(t).copy(),
            risk_halt=self._halt_at(t),
            done=(t == self._t_end - 1),
        )

    def reset(self, window: tuple[int, int]) -> MarketState:
        """Start an episode over [t_start, t_end) with fresh cash.

        The window must lie inside the panel, start at or after the
        feature warm-up, and contain at least 2 timestamps.
        """
        t_start, t_end = int(window[0]), int(window[1])
        t = self.panel.n_timestamps
        if not (0 <= t_start < t_end <= t):
            raise ConfigError(f"window [{t_start}, {t_end}) outside panel bounds [0, {t})")
        if t_start < self.features.warmup:
            raise ConfigError(
                f"window starts at {t_start}, inside the feature warm-up"
                f" ({self.features.warmup} rows)"
            )
        if t_end - t_start < 2:
            raise ConfigError(f"window [{t_start}, {t_end}) has fewer than 2 timestamps")
        self._t_end = t_end
        self._state = self._state_at(
            t_start, float(self.config.initial_cash), np.zeros(self.panel.n_assets)
        )
        return self._state

    def step(self, action: np.ndarray) -> StepResult:
        """Execute one action at the current step and advance one bar."""
        state = self._state
        if state is None:
            raise RuntimeError("step() before reset()")
        if state.done:
            raise RuntimeError(f"episode already done at t={state.t}")
        action = np.asarray(action, dtype=np.float64)
        if action.shape != (self.n_assets,):
            raise ValueError(f"action shape {action.shape}, want ({self.n_assets},)")
        if not np.all(np.isfinite(action)):
            raise ValueError("action contains non-finite entries")

        cap = self.config.max_position_per_step
        if cap is not None:
            action = np.clip(action, -cap, cap)

        prices = state.prices
        fee_rate = self.config.fee_rate
        holdings = state.holdings.copy()
        cash = state.cash
        executed = np.zeros_like(action)

        if state.risk_halt:
            # Breaker active: no buys, dump everything at the current close.
            sells = -holdings
        else:
            sells = np.where(action < 0, np.maximum(action, -holdings), 0.0)
        for d in np.flatnonzero(sells != 0.0):
            qty = sells[d]
            cash += prices[d] * (-qty) * (1.0 - fee_rate)
            holdings[d] += qty
            executed[d] = qty
        holdings[holdings < 0] = 0.0  # float dust from the clip arithmetic

        if not state.risk_halt:
            buys = np.where(action > 0, action, 0.0)
            for d in np.flatnonzero(buys > 0.0):
                qty = buys[d]
                cost = prices[d] * qty * (1.0 + fee_rate)
                if cost > cash * (1.0 + _AFFORD_SLACK):
                    continue  # unaffordable orders are skipped whole
                cash = max(cash - cost, 0.0)
                holdings[d] += qty
                executed[d] += qty

        fee_paid = fee_rate * float(prices @ np.abs(executed))
        ts = int(self.panel.timestamps[state.t])
        trades = tuple(
            Trade(
                timestamp=ts,
                asset=self.panel.assets[d],
                qty=float(executed[d]),
                price=float(prices[d]),
                fee=fee_rate * float(prices[d]) * abs(float(executed[d])),
            )
            for d in np.flatnonzero(executed != 0.0)
        )

        next_state = self._state_at(state.t + 1, cash, holdings)
        reward = next_state.value - state.value
        self._state = next_state
        return StepResult(
            next_state=next_state,
            reward=reward,
            executed_action=executed,
            fee_paid=fee_paid,
            done=next_state.done,
            trades=trades,
        )


def run_episode(env: MarketReplayEnv, agent, window: tuple[int, int]) -> EpisodeResult:
    """Replay one window with an agent, collecting the full audit trail.

    The agent only needs an ``act(state) -> action vector`` method. The
    telescoping identity sum(rewards) = v_end - v_0 holds by
    construction (rewards are defined as consecutive value differences).
    """
    state = env.reset(window)
    begin = getattr(agent, "begin_episode", None)
    if begin is not None:
        begin(state)  # stateful agents must not leak across episodes
    equity = [state.value]
    rewards: list[float] = []
    trades: list[Trade] = []
    fees = 0.0
    while not state.done:
        result = env.step(agent.act(state))
        equity.append(result.next_state.value)
        rewards.append(result.reward)
        trades.extend(result.trades)
        fees += result.fee_paid
        state = result.next_state
    return EpisodeResult(
        timestamps=env.panel.timestamps[window[0] : window[1]].copy(),
        equity=np.asarray(equity),
        rewards=np.asarray(rewards),
        trades=tuple(trades),
        fees_total=fees,
    )
