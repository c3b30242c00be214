import numpy as np
import pytest

from pbogate.env import EnvConfig, MarketReplayEnv
from pbogate.market_data import compute_features
from pbogate.pbo import TrialMatrix
from pbogate.synthetic import synthetic_panel


def make_matrix(values) -> TrialMatrix:
    """TrialMatrix from any 2-d array-like, labels generated."""
    vals = np.asarray(values, dtype=np.float64)
    return TrialMatrix(
        values=vals,
        trial_ids=tuple(f"{j:03d}" for j in range(vals.shape[1])),
        row_timestamps=np.arange(vals.shape[0], dtype=np.int64),
    )


@pytest.fixture(scope="session")
def panel():
    return synthetic_panel(n_assets=3, n_bars=400, seed=7, drift=2e-4, vol=0.01)


@pytest.fixture(scope="session")
def features(panel):
    return compute_features(panel)


@pytest.fixture()
def env(panel, features):
    return MarketReplayEnv(panel, features, EnvConfig(initial_cash=10_000.0))
