import numpy as np
import pytest

from pbogate.agents import DoNothingAgent, RandomAgent
from pbogate.env import (
    EnvConfig,
    MarketReplayEnv,
    risk_control,
    run_episode,
)
from pbogate.errors import ConfigError, DataError
from pbogate.market_data import FeatureMatrix, Panel
from pbogate.synthetic import synthetic_cvix, synthetic_panel


def price_panel(closes, volumes=None):
    """Panel with flat bars (open=high=low=close) at the given closes."""
    closes = np.atleast_2d(np.asarray(closes, dtype=np.float64))
    d, t = closes.shape
    volume = (
        np.atleast_2d(np.asarray(volumes, dtype=np.float64))
        if volumes is not None
        else np.full((d, t), 100.0)
    )
    ts = np.arange(t, dtype=np.int64) * 300
    panel = Panel(
        assets=tuple(f"a{i}" for i in range(d)),
        timestamps=ts,
        open=closes.copy(),
        high=closes.copy(),
        low=closes.copy(),
        close=closes.copy(),
        volume=volume,
        bar_interval=300,
    )
    features = FeatureMatrix(
        feature_names=("volume",),
        assets=panel.assets,
        timestamps=ts,
        values=volume.T.copy(),
        warmup=0,
    )
    return panel, features


def make_env(closes, cash=1000.0, fee=0.003, cvix=None, **kw):
    panel, features = price_panel(closes)
    config = EnvConfig(initial_cash=cash, fee_rate=fee, cvix_series=cvix, **kw)
    return MarketReplayEnv(panel, features, config)


class TestReset:
    def test_initial_state(self):
        env = make_env([[100.0, 110.0, 121.0]])
        s = env.reset((0, 3))
        assert s.cash == 1000.0
        assert s.holdings.tolist() == [0.0]
        assert s.value == 1000.0
        assert s.t == 0 and not s.done

    def test_window_validation(self):
        env = make_env([[100.0, 110.0, 121.0]])
        with pytest.raises(ConfigError, match="outside panel bounds"):
            env.reset((0, 4))
        with pytest.raises(ConfigError, match="fewer than 2"):
            env.reset((1, 2))
        with pytest.raises(ConfigError, match="outside panel bounds"):
            env.reset((-1, 2))

    def test_warmup_enforced(self, panel, features, env):
        with pytest.raises(ConfigError, match="warm-up"):
            env.reset((features.warmup - 1, features.warmup + 10))
        s = env.reset((features.warmup, features.warmup + 10))
        assert s.t == features.warmup

    def test_step_before_reset(self):
        env = make_env([[100.0, 110.0]])
        with pytest.raises(RuntimeError, match="before reset"):
            env.step(np.zeros(1))


class TestStateVector:
    def test_flatten_layout_and_length(self):
        env = make_env([[100.0, 110.0], [50.0, 55.0]])
        s = env.reset((0, 2))
        flat = s.flatten()
        # [b, h(2), p(2), f(2)] = 1 + (1+2)*2
        assert flat.shape == (7,)
        assert env.state_dim == 7
        assert flat[0] == 1000.0
        assert flat[1:3].tolist() == [0.0, 0.0]
        assert flat[3:5].tolist() == [100.0, 50.0]

    def test_81_dims_for_10_assets_6_features(self):
        rng = np.random.default_rng(0)
        closes = 100 + rng.random((10, 5))
        panel, _ = price_panel(closes)
        values = rng.random((5, 60))
        features = FeatureMatrix(
            feature_names=tuple(f"f{i}" for i in range(6)),
            assets=panel.assets,
            timestamps=panel.timestamps,
            values=values,
            warmup=0,
        )
        env = MarketReplayEnv(panel, features, EnvConfig())
        assert env.state_dim == 81
        assert env.reset((0, 5)).flatten().shape == (81,)


class TestStepMechanics:
    def test_no_trade_reward_is_price_move_times_holdings(self):
        env = make_env([[100.0, 110.0, 121.0]], fee=0.0)
        env.reset((0, 3))
        env.step(np.array([1.0]))  # buy 1 unit at 100
        result = env.step(np.zeros(1))
        assert result.reward == pytest.approx(11.0)  # 1 unit * (121 - 110)

    def test_buy_fee_and_cash(self):
        env = make_env([[100.0, 101.0]], fee=0.003)
        env.reset((0, 2))
        result = env.step(np.array([2.0]))
        # cost = 100*2*1.003 = 200.6 of which fee 0.6
        assert result.fee_paid == pytest.approx(0.6)
        assert result.next_state.cash == pytest.approx(1000.0 - 200.6)
        assert result.next_state.holdings.tolist() == [2.0]
        assert result.executed_action.tolist() == [2.0]

    def test_unaffordable_buy_skipped_whole(self):
        env = make_env([[100.0, 101.0]], cash=100.0, fee=0.003)
        env.reset((0, 2))
        result = env.step(np.array([2.0]))  # cost 200.6 > 100
        assert result.executed_action.tolist() == [0.0]
        assert result.next_state.cash == 100.0
        assert result.trades == ()

    def test_exact_affordability_boundary(self):
        # cash covers the order plus its own fee exactly
        env = make_env([[100.0, 101.0]], cash=100.3, fee=0.003)
        env.reset((0, 2))
        result = env.step(np.array([1.0]))
        assert result.executed_action.tolist() == [1.0]
        assert result.next_state.cash == pytest.approx(0.0, abs=1e-9)
        assert result.next_state.cash >= 0.0

    def test_sell_clipped_to_holdings(self):
        env = make_env([[100.0, 101.0, 102.0]], fee=0.0)
        env.reset((0, 3))
        env.step(np.array([3.0]))
        result = env.step(np.array([-5.0]))
        assert result.executed_action.tolist() == [-3.0]
        assert result.next_state.holdings.tolist() == [0.0]
        assert result.next_state.cash == pytest.approx(1000.0 - 300.0 + 3 * 101.0)

    def test_sell_fee_reduces_proceeds(self):
        env = make_env([[100.0, 100.0]], fee=0.01)
        state = env.reset((0, 2))
        state.holdings[:] = 2.0  # seed a position directly
        state.cash = 0.0
        result = env.step(np.array([-2.0]))
        assert result.next_state.cash == pytest.approx(200.0 * 0.99)
        assert result.fee_paid == pytest.approx(2.0)

    def test_sells_fund_buys_same_step(self):
        env = make_env([[100.0, 50.0], [100.0, 50.0]], cash=0.0 + 1e-12, fee=0.0)
        state = env.reset((0, 2))
        state.holdings[:] = np.array([1.0, 0.0])
        result = env.step(np.array([-1.0, 1.0]))  # rotate asset 0 into asset 1
        assert result.executed_action.tolist() == [-1.0, 1.0]
        assert result.next_state.holdings.tolist() == [0.0, 1.0]

    def test_buys_fill_in_ascending_index(self):
        # cash affords either order alone but only the first in sequence
        env = make_env([[100.0, 101.0], [100.0, 101.0]], cash=110.0, fee=0.0)
        env.reset((0, 2))
        result = env.step(np.array([1.0, 1.0]))
        assert result.executed_action.tolist() == [1.0, 0.0]

    def test_buy_hold_equity_curve(self):
        env = make_env([[100.0, 110.0, 121.0]], fee=0.0)
        env.reset((0, 3))
        r1 = env.step(np.array([10.0]))  # all cash into 10 units
        r2 = env.step(np.zeros(1))
        assert r1.next_state.value == pytest.approx(1100.0)
        assert r2.next_state.value == pytest.approx(1210.0)

    def test_max_position_clamp(self):
        env = make_env([[10.0, 11.0]], max_position_per_step=1.5)
        env.reset((0, 2))
        result = env.step(np.array([4.0]))
        assert result.executed_action.tolist() == [1.5]

    def test_bad_actions_rejected(self):
        env = make_env([[100.0, 110.0]])
        env.reset((0, 2))
        with pytest.raises(ValueError, match="non-finite"):
            env.step(np.array([np.nan]))
        with pytest.raises(ValueError, match="action shape"):
            env.step(np.zeros(2))

    def test_step_after_done(self):
        env = make_env([[100.0, 110.0]])
        env.reset((0, 2))
        result = env.step(np.zeros(1))
        assert result.done
        with pytest.raises(RuntimeError, match="already done"):
            env.step(np.zeros(1))

    def test_mismatched_features_rejected(self):
        panel, _ = price_panel([[1.0, 2.0]])
        bad = FeatureMatrix(
            feature_names=("volume",),
            assets=("other",),
            timestamps=panel.timestamps,
            values=np.ones((2, 1)),
            warmup=0,
        )
        with pytest.raises(DataError, match="assets"):
            MarketReplayEnv(panel, bad, EnvConfig())


class TestRiskControl:
    def test_threshold_is_strict(self):
        assert not risk_control(90.1, 90.1)
        assert risk_control(90.10001, 90.1)
        assert not risk_control(12.0, 90.1)
        with pytest.raises(DataError):
            risk_control(float("nan"), 90.1)

    def test_halt_liquidates_and_blocks_buys(self):
        closes = [[100.0, 100.0, 100.0, 100.0, 100.0]]
        cvix = np.array([50.0, 95.0, 95.0, 50.0, 50.0])
        env = make_env(closes, fee=0.0, cvix=cvix)
        env.reset((0, 5))
        r0 = env.step(np.array([5.0]))  # calm: buy fills
        assert r0.next_state.holdings.tolist() == [5.0]
        assert r0.next_state.risk_halt
        r1 = env.step(np.array([3.0]))  # halted: buy suppressed, position dumped
        assert r1.executed_action.tolist() == [-5.0]
        assert r1.next_state.holdings.tolist() == [0.0]
        r2 = env.step(np.array([2.0]))  # still halted: nothing fills
        assert r2.executed_action.tolist() == [0.0]
        r3 = env.step(np.array([2.0]))  # resumed: buys fill again
        assert r3.executed_action.tolist() == [2.0]

    def test_halt_overrides_sell_requests(self):
        cvix = np.array([95.0, 95.0])
        env = make_env([[100.0, 100.0]], fee=0.0, cvix=cvix)
        state = env.reset((0, 2))
        state.holdings[:] = 4.0
        result = env.step(np.array([-1.0]))  # liquidation ignores the partial sell
        assert result.executed_action.tolist() == [-4.0]

    def test_no_cvix_never_halts(self):
        env = make_env([[100.0, 100.0]])
        assert not env.reset((0, 2)).risk_halt

    def test_cvix_length_checked(self):
        panel, features = price_panel([[1.0, 2.0, 3.0]])
        with pytest.raises(DataError, match="cvix_series length"):
            MarketReplayEnv(
                panel, features, EnvConfig(cvix_series=np.array([50.0, 50.0]))
            )


class TestEpisodeInvariants:
    def test_telescoping_and_accounting(self):
        rng_panel = synthetic_panel(n_assets=3, n_bars=80, seed=21)
        for seed in range(30):
            panel, features = price_panel(
                np.exp(np.cumsum(np.random.default_rng(seed).normal(0, 0.01, (3, 40)), axis=1))
                * 100.0
            )
            env = MarketReplayEnv(panel, features, EnvConfig(initial_cash=5_000.0))
            agent = RandomAgent(seed=seed)
            result = run_episode(env, agent, (0, 40))
            assert result.equity[0] == pytest.approx(5_000.0)
            assert np.sum(result.rewards) == pytest.approx(
                result.final_value - 5_000.0, abs=1e-6 * 5_000.0
            )
            assert result.fees_total == pytest.approx(
                sum(t.fee for t in result.trades), rel=1e-9, abs=1e-12
            )
            assert result.fees_total >= 0.0
        assert rng_panel.n_assets == 3  # fixture-style panel is also usable

    def test_do_nothing_keeps_cash(self):
        env = make_env([[100.0, 90.0, 80.0]])
        result = run_episode(env, DoNothingAgent(), (0, 3))
        assert result.equity.tolist() == [1000.0, 1000.0, 1000.0]
        assert result.trades == ()
        assert result.fees_total == 0.0

    def test_determinism(self, panel, features):
        env = MarketReplayEnv(panel, features, EnvConfig(initial_cash=10_000.0))
        w = (features.warmup, features.warmup + 30)
        a = run_episode(env, RandomAgent(seed=5), w)
        b = run_episode(env, RandomAgent(seed=5), w)
        assert np.array_equal(a.equity, b.equity)
        assert a.trades == b.trades

    def test_episode_on_synthetic_panel_with_cvix(self):
        panel = synthetic_panel(n_assets=2, n_bars=120, seed=3)
        from pbogate.market_data import compute_features

        features = compute_features(panel, feature_names=("volume",))
        cvix = synthetic_cvix(120, seed=3, spikes=((40, 50),))
        env = MarketReplayEnv(
            panel, features, EnvConfig(initial_cash=1000.0, cvix_series=cvix)
        )
        agent = RandomAgent(seed=1)
        state = env.reset((0, 120))
        agent.begin_episode(state)
        while not state.done:
            result = env.step(np.abs(agent.act(state)) + 0.001)  # always tries to buy
            state = result.next_state
            if cvix[state.t - 1] > 90.1:
                # holdings were dumped at the halted close and no buy filled
                assert np.all(state.holdings == 0.0)
            assert state.cash >= 0.0
        assert np.any(cvix[:119] > 90.1)
