"""Backtest-overfitting detection for trading strategies.

The package replays a market as an episodic environment, runs
hyperparameter trials under walk-forward / k-fold / combinatorial
cross-validation, stacks the validation returns into a trial matrix,
estimates the probability of backtest overfitting from all in-sample /
out-of-sample block combinations, and accepts or rejects the strategy
family with a hypothesis-test gate.

Typical flow::

    panel, _ = market_data.align([market_data.load_csv(p) for p in paths])
    pipeline = market_data.TechnicalFeatures().fit(panel, fit_rows=train_rows)
    features = pipeline.transform(panel)
    env = MarketReplayEnv(panel, features, EnvConfig())
    ...
    result = estimate_pbo(matrix, s=14)
    verdict = gate(result.p, alpha=0.10)

or drive everything from a config file with ``harness.run_experiment``
(the ``pbogate`` command line wraps it).
"""

from . import agents, env, harness, indicators, market_data, pbo, reporting, splits, synthetic
from .agents import CemTradingPolicy, EqualWeightAgent, PerfMetrics, import_external_trials
from .env import EnvConfig, MarketReplayEnv, run_episode
from .errors import ConfigError, DataError, PbogateError
from .harness import ExperimentConfig, load_config, run_experiment, sample_trials
from .market_data import FeatureMatrix, Panel, TechnicalFeatures, align, load_csv
from .pbo import (
    ACCEPT,
    REJECT,
    PboGate,
    PboResult,
    TrialMatrix,
    build_trial_matrix,
    estimate_pbo,
    evaluate_combination,
    gate,
    partition_rows,
)
from .splits import make_combinatorial, make_kfold, make_walk_forward, materialize

__version__ = "0.1.0"

__all__ = [
    "agents",
    "env",
    "harness",
    "indicators",
    "market_data",
    "pbo",
    "reporting",
    "splits",
    "synthetic",
    "CemTradingPolicy",
    "EqualWeightAgent",
    "PerfMetrics",
    "import_external_trials",
    "EnvConfig",
    "MarketReplayEnv",
    "run_episode",
    "ConfigError",
    "DataError",
    "PbogateError",
    "ExperimentConfig",
    "load_config",
    "run_experiment",
    "sample_trials",
    "FeatureMatrix",
    "Panel",
    "TechnicalFeatures",
    "align",
    "load_csv",
    "ACCEPT",
    "REJECT",
    "PboGate",
    "PboResult",
    "TrialMatrix",
    "build_trial_matrix",
    "estimate_pbo",
    "evaluate_combination",
    "gate",
    "partition_rows",
    "make_combinatorial",
    "make_kfold",
    "make_walk_forward",
    "materialize",
    "__version__",
]
