"""Experiment orchestration: config -> trials -> matrix -> gate -> report.

One config file drives the whole protocol:

1. load and align the per-asset CSVs, compute features on the training
   window, and select the uncorrelated subset;
2. sample H hyperparameter sets, train one policy per (trial, split)
   on the split's training rows, and evaluate it on the split's
   validation rows (or import externally produced trial returns);
3. stack the validation returns into the trial matrix, estimate the
   probability of backtest overfitting, and apply the gate;
4. retrain the winning trial on the whole training window, backtest it
   and the benchmarks on the held-out test window;
5. emit a fully deterministic report directory.

Determinism contract: every number in the report is a pure function of
(config, master_seed). Per-trial seeds are derived by hashing, trials
are reduced in index order regardless of the worker count, and no
wall-clock or filesystem-order value is ever recorded.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from itertools import product
from pathlib import Path

import numpy as np
from joblib import Parallel, delayed

from . import pbo as pbo_mod
from . import splits as splits_mod
from .agents import (
    DEFAULT_GRID,
    CemTradingPolicy,
    EqualWeightAgent,
    EvalResult,
    PerfMetrics,
    evaluate,
    import_external_trials,
    metrics_from_equities,
)
from .env import EnvConfig, EpisodeResult, MarketReplayEnv, run_episode
from .errors import ConfigError, DataError
from .market_data import TechnicalFeatures, align, load_csv
from .reporting import (
    canonical_json,
    content_hash,
    file_manifest,
    logit_histogram_svg,
    write_equity_csv,
    write_json,
    write_logits_csv,
    write_trades_csv,
)

__all__ = [
    "ExperimentConfig",
    "load_config",
    "sample_trials",
    "derive_trial_seed",
    "run_experiment",
    "emit_report",
    "RunResult",
]

logger = logging.getLogger(__name__)

# Below this many trials the grid is unlikely to contain a spuriously
# good cell: 1 - 0.95^50 ~= 0.923 >= 0.9 chance for 50 trials.
RECOMMENDED_MIN_TRIALS = 50

SCHEMES = ("combinatorial", "wf", "kfold")
SAMPLERS = ("grid", "random")


def _require(cond: bool, message: str) -> None:
    if not cond:
        raise ConfigError(message)


@dataclass(frozen=True)
class ExperimentConfig:
    """Validated experiment settings; one instance per run."""

    asset_csvs: tuple[str, ...]
    train_window: tuple[int, int]  # [start, end) epoch seconds
    test_window: tuple[int, int]
    cvix_csv: str | None = None
    external_trials_csv: str | None = None
    min_bars: int = 100
    csv_schema: dict = field(default_factory=dict)
    # env
    initial_cash: float = 1_000_000.0
    fee_rate: float = 0.003
    cvix_threshold: float = 90.1
    max_position_per_step: float | None = None
    # features
    corr_threshold: float = 0.6
    feature_params: dict = field(default_factory=dict)
    # splits
    scheme: str = "combinatorial"
    n_groups: int = 5
    k: int = 2
    embargo: int = 0
    # trials
    n_trials: int = 50
    sampler: str = "random"
    master_seed: int = 0
    grid: dict = field(default_factory=dict)
    selection_metric: str = "sharpe"
    # pbo
    pbo_s: int = 14
    pbo_metric: str = "sharpe"
    alpha: float = 0.10
    pbo_mode: str = "exhaustive"
    pbo_samples: int | None = None
    # output
    output_dir: str = "run_output"

    def __post_init__(self):
        _require(len(self.asset_csvs) >= 1, "data.asset_csvs must list at least one file")
        tr, te = self.train_window, self.test_window
        _require(tr[0] < tr[1], f"train window {tr} is empty")
        _require(te[0] < te[1], f"test window {te} is empty")
        _require(te[0] >= tr[1], f"test window {te} must start at or after train end {tr[1]}")
        _require(self.scheme in SCHEMES, f"splits.scheme must be one of {SCHEMES}")
        _require(self.sampler in SAMPLERS, f"trials.sampler must be one of {SAMPLERS}")
        _require(self.n_trials >= 2, f"trials.h must be >= 2, got {self.n_trials}")
        _require(
            self.selection_metric in pbo_mod.METRICS,
            f"trials.selection_metric must be one of {pbo_mod.METRICS}",
        )
        _require(self.n_groups >= 2, "splits.n_groups must be >= 2")
        _require(1 <= self.k <= self.n_groups - 1, "splits.k must be in [1, n_groups-1]")

    @property
    def effective_grid(self) -> dict[str, tuple]:
        full = dict(DEFAULT_GRID)
        for key, values in self.grid.items():
            _require(key in full, f"unknown hyperparameter {key!r} in trials.grid")
            _require(len(values) >= 1, f"trials.grid.{key} is empty")
            full[key] = tuple(values)
        return full

    def to_dict(self) -> dict:
        return {
            "data": {
                "asset_csvs": list(self.asset_csvs),
                "cvix_csv": self.cvix_csv,
                "external_trials_csv": self.external_trials_csv,
                "min_bars": self.min_bars,
                "csv_schema": dict(self.csv_schema),
            },
            "windows": {"train": list(self.train_window), "test": list(self.test_window)},
            "env": {
                "initial_cash": self.initial_cash,
                "fee_rate": self.fee_rate,
                "cvix_threshold": self.cvix_threshold,
                "max_position_per_step": self.max_position_per_step,
            },
            "features": {
                "corr_threshold": self.corr_threshold,
                "params": dict(self.feature_params),
            },
            "splits": {
                "scheme": self.scheme,
                "n_groups": self.n_groups,
                "k": self.k,
                "embargo": self.embargo,
            },
            "trials": {
                "h": self.n_trials,
                "sampler": self.sampler,
                "master_seed": self.master_seed,
                "grid": {k: list(v) for k, v in sorted(self.grid.items())},
                "selection_metric": self.selection_metric,
            },
            "pbo": {
                "s": self.pbo_s,
                "metric": self.pbo_metric,
                "alpha": self.alpha,
                "mode": self.pbo_mode,
                "n_samples": self.pbo_samples,
            },
            "output": {"directory": self.output_dir},
        }

    def content_hash(self) -> str:
        """Hash of everything that determines results (output dir excluded)."""
        payload = self.to_dict()
        payload.pop("output")
        return content_hash(payload)


def _parse_toml(path: Path) -> dict:
    try:
        import tomllib  # py311+
    except ModuleNotFoundError:
        import tomli as tomllib
    with open(path, "rb") as fh:
        return tomllib.load(fh)


def load_config(path, overrides: dict | None = None) -> ExperimentConfig:
    """Read a TOML (canonical) or JSON experiment config file.

    ``overrides`` maps dotted keys (e.g. "trials.master_seed",
    "output.directory") onto replacement values; the CLI uses it for
    --seed and --out.
    """
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        if path.suffix.lower() == ".json":
            raw = json.loads(path.read_text())
        else:
            raw = _parse_toml(path)
    except (json.JSONDecodeError, ValueError) as exc:
        raise ConfigError(f"{path}: cannot parse config: {exc}") from None

    for dotted, value in (overrides or {}).items():
        section, key = dotted.split(".", 1)
        raw.setdefault(section, {})[key] = value

    def section(name: str) -> dict:
        part = raw.get(name, {})
        _require(isinstance(part, dict), f"config section [{name}] must be a table")
        return part

    data, windows = section("data"), section("windows")
    env_s, feat = section("env"), section("features")
    spl, tri, pb, out = section("splits"), section("trials"), section("pbo"), section("output")
    _require("asset_csvs" in data, "config needs data.asset_csvs")
    _require("train" in windows and "test" in windows, "config needs windows.train and windows.test")

    base = path.parent

    def resolve(p):
        return str((base / p) if not Path(p).is_absolute() else Path(p))

    try:
        return ExperimentConfig(
            asset_csvs=tuple(resolve(p) for p in data["asset_csvs"]),
            cvix_csv=resolve(data["cvix_csv"]) if data.get("cvix_csv") else None,
            external_trials_csv=(
                resolve(data["external_trials_csv"]) if data.get("external_trials_csv") else None
            ),
            min_bars=int(data.get("min_bars", 100)),
            csv_schema=dict(data.get("csv_schema", {})),
            train_window=(int(windows["train"][0]), int(windows["train"][1])),
            test_window=(int(windows["test"][0]), int(windows["test"][1])),
            initial_cash=float(env_s.get("initial_cash", 1_000_000.0)),
            fee_rate=float(env_s.get("fee_rate", 0.003)),
            cvix_threshold=float(env_s.get("cvix_threshold", 90.1)),
            max_position_per_step=(
                float(env_s["max_position_per_step"])
                if env_s.get("max_position_per_step") is not None
                else None
            ),
            corr_threshold=float(feat.get("corr_threshold", 0.6)),
            feature_params=dict(feat.get("params", {})),
            scheme=str(spl.get("scheme", "combinatorial")).lower(),
            n_groups=int(spl.get("n_groups", 5)),
            k=int(spl.get("k", 2)),
            embargo=int(spl.get("embargo", 0)),
            n_trials=int(tri.get("h", 50)),
            sampler=str(tri.get("sampler", "random")).lower(),
            master_seed=int(tri.get("master_seed", 0)),
            grid=dict(tri.get("grid", {})),
            selection_metric=str(tri.get("selection_metric", "sharpe")).lower(),
            pbo_s=int(pb.get("s", 14)),
            pbo_metric=str(pb.get("metric", "sharpe")).lower(),
            alpha=float(pb.get("alpha", 0.10)),
            pbo_mode=str(pb.get("mode", "exhaustive")).lower(),
            pbo_samples=int(pb["n_samples"]) if pb.get("n_samples") is not None else None,
            output_dir=str(out.get("directory", "run_output")),
        )
    except (KeyError, TypeError, IndexError) as exc:
        raise ConfigError(f"{path}: malformed config value: {exc!r}") from None


def derive_trial_seed(master_seed: int, trial_index: int) -> int:
    """Stable 63-bit per-trial seed; a pure function of its inputs."""
    digest = hashlib.sha256(f"{master_seed}:{trial_index}".encode()).digest()
    return int.from_bytes(digest[:8], "big") >> 1


def sample_trials(
    grid: dict[str, tuple], n_trials: int, sampler: str, master_seed: int
) -> list[dict]:
    """Pick ``n_trials`` hyperparameter sets from the grid.

    "random" draws uniformly without replacement, seeded. "grid" takes
    evenly strided cells of the lexicographic enumeration (stride =
    cardinality // n), so small n still spans the whole grid. Emits a
    warning (never an error) below the recommended 50 trials.
    """
    _require(sampler in SAMPLERS, f"sampler must be one of {SAMPLERS}")
    names = list(grid.keys())
    sizes = [len(grid[n]) for n in names]
    cardinality = math.prod(sizes)
    _require(cardinality >= 1, "hyperparameter grid is empty")
    if n_trials > cardinality:
        raise ConfigError(
            f"h={n_trials} exceeds the grid cardinality {cardinality};"
            " draws are without replacement"
        )
    if n_trials < RECOMMENDED_MIN_TRIALS:
        logger.warning(
            "h=%d is below the recommended %d trials (50 trials give a"
            " 1-0.95^50 ~= 0.923 chance of catching a lucky configuration)",
            n_trials,
            RECOMMENDED_MIN_TRIALS,
        )
    if sampler == "random":
        rng = np.random.default_rng(master_seed)
        picks = np.sort(rng.choice(cardinality, size=n_trials, replace=False))
    else:
        stride = cardinality // n_trials
        picks = np.arange(n_trials) * stride
    out = []
    for flat in picks:
        cell = {}
        rem = int(flat)
        for name, size in zip(reversed(names), reversed(sizes)):
            cell[name] = grid[name][rem % size]
            rem //= size
        out.append({n: cell[n] for n in names})
    return out


@dataclass
class TrialOutcome:
    """One hyperparameter trial across all splits, ready for the matrix."""

    index: int
    seed: int
    hyperparameters: dict
    series: dict[int, tuple[np.ndarray, np.ndarray]]  # split -> (ts, currency returns)
    split_metrics: list[PerfMetrics]
    mean_metric: float

    @property
    def trial_id(self) -> str:
        return f"{self.index:03d}"


def _selection_value(metrics: PerfMetrics, which: str) -> float:
    if which == "cumret":
        return metrics.cumulative_return
    # flat equity has no Sharpe; score it as zero skill
    return metrics.sharpe if metrics.sharpe is not None else 0.0


def _run_trial(
    panel,
    features,
    env_config: EnvConfig,
    split_ranges: list[tuple[tuple, tuple]],
    index: int,
    hyperparameters: dict,
    seed: int,
    selection_metric: str,
) -> TrialOutcome:
    """Train and validate one trial on every split. Worker-safe: builds
    its own environment, touches nothing shared."""
    env = MarketReplayEnv(panel, features, env_config)
    series: dict[int, tuple[np.ndarray, np.ndarray]] = {}
    split_metrics: list[PerfMetrics] = []
    values = []
    for split_id, (train_ranges, val_ranges) in enumerate(split_ranges):
        policy = CemTradingPolicy(**hyperparameters, seed=seed)
        policy.fit(env, list(train_ranges))
        result: EvalResult = evaluate(policy, env, list(val_ranges))
        series[split_id] = (result.timestamps, result.currency_returns)
        split_metrics.append(result.metrics)
        values.append(_selection_value(result.metrics, selection_metric))
    return TrialOutcome(
        index=index,
        seed=seed,
        hyperparameters=dict(hyperparameters),
        series=series,
        split_metrics=split_metrics,
        mean_metric=float(np.mean(values)),
    )


def _load_cvix(path: str, timestamps: np.ndarray) -> np.ndarray:
    table: dict[int, float] = {}
    import csv as _csv

    with open(path, newline="") as fh:
        reader = _csv.DictReader(fh)
        need = {"timestamp", "value"}
        if not need <= set(reader.fieldnames or []):
            raise DataError(f"{path}: CVIX CSV needs columns timestamp,value")
        for i, row in enumerate(reader):
            try:
                table[int(row["timestamp"])] = float(row["value"])
            except (TypeError, ValueError):
                raise DataError(f"{path}: row {i + 2}: cannot parse CVIX row") from None
    missing = [int(t) for t in timestamps if int(t) not in table]
    if missing:
        raise DataError(f"{path}: CVIX value missing at timestamp {missing[0]}")
    return np.asarray([table[int(t)] for t in timestamps])


def _window_indices(timestamps: np.ndarray, window: tuple[int, int], label: str) -> tuple[int, int]:
    lo = int(np.searchsorted(timestamps, window[0], side="left"))
    hi = int(np.searchsorted(timestamps, window[1], side="left"))
    if hi - lo < 2:
        raise ConfigError(
            f"{label} window [{window[0]}, {window[1]}) covers {hi - lo} bars; need >= 2"
        )
    return lo, hi


def _make_plan(config: ExperimentConfig) -> splits_mod.SplitPlan:
    if config.scheme == "combinatorial":
        return splits_mod.make_combinatorial(config.n_groups, config.k)
    if config.scheme == "kfold":
        return splits_mod.make_kfold(config.n_groups)
    return splits_mod.make_walk_forward(
        config.n_groups, (config.n_groups - config.k) / config.n_groups
    )


@dataclass
class RunResult:
    """Everything ``run_experiment`` produced, pre-serialization."""

    report: dict
    matrix: pbo_mod.TrialMatrix
    pbo_result: pbo_mod.PboResult
    plan: splits_mod.SplitPlan
    equities: dict[str, tuple[np.ndarray, np.ndarray]]  # name -> (ts, v_t)
    trades: dict[str, tuple]

    @property
    def verdict(self) -> str:
        return self.pbo_result.verdict


def run_experiment(config: ExperimentConfig, n_jobs: int = 1) -> RunResult:
    """Execute the full protocol for one config. See the module docstring."""
    series = [
        load_csv(p, schema=config.csv_schema or None) for p in config.asset_csvs
    ]
    panel, dropped = align(series, min_bars=config.min_bars)
    cvix = _load_cvix(config.cvix_csv, panel.timestamps) if config.cvix_csv else None
    env_config = EnvConfig(
        initial_cash=config.initial_cash,
        fee_rate=config.fee_rate,
        cvix_threshold=config.cvix_threshold,
        cvix_series=cvix,
        max_position_per_step=config.max_position_per_step,
    )

    t0, t1 = _window_indices(panel.timestamps, config.train_window, "train")
    j0, j1 = _window_indices(panel.timestamps, config.test_window, "test")

    # feature selection sees training rows only
    pipeline = TechnicalFeatures(corr_threshold=config.corr_threshold, params=config.feature_params or None)
    pipeline.fit(panel, fit_rows=np.arange(t0, t1))
    features = pipeline.transform(panel)
    if t0 < features.warmup:
        logger.info(
            "train window starts inside the %d-row feature warm-up; advancing"
            " from row %d to %d",
            features.warmup,
            t0,
            features.warmup,
        )
        t0 = features.warmup
        if t1 - t0 < config.n_groups:
            raise ConfigError("train window too short after the feature warm-up")

    partition = splits_mod.GroupPartition.from_length(t1 - t0, config.n_groups, offset=t0)
    plan = _make_plan(config)
    materialized = splits_mod.materialize(plan, partition, embargo=config.embargo)
    split_ranges = [(m.train_ranges, m.validation_ranges) for m in materialized]

    if config.external_trials_csv:
        trials_in = import_external_trials(config.external_trials_csv)
        for trial in trials_in:
            missing = set(range(plan.n_splits)) - set(trial.series)
            if missing:
                raise DataError(
                    f"external trial {trial.trial_id} missing split {sorted(missing)[0]}"
                )
        matrix = pbo_mod.build_trial_matrix(trials_in, plan)
        trial_records = [
            {
                "trial": t.trial_id,
                "seed": None,
                "hyperparameters": None,
                "splits": None,
                "mean_metric": None,
            }
            for t in trials_in
        ]
        selected = None
        outcomes = None
    else:
        hyper_sets = sample_trials(
            config.effective_grid, config.n_trials, config.sampler, config.master_seed
        )
        seeds = [derive_trial_seed(config.master_seed, i) for i in range(len(hyper_sets))]
        outcomes: list[TrialOutcome] = Parallel(n_jobs=n_jobs)(
            delayed(_run_trial)(
                panel,
                features,
                env_config,
                split_ranges,
                i,
                hyper_sets[i],
                seeds[i],
                config.selection_metric,
            )
            for i in range(len(hyper_sets))
        )
        matrix = pbo_mod.build_trial_matrix(outcomes, plan)
        trial_records = [
            {
                "trial": o.trial_id,
                "seed": o.seed,
                "hyperparameters": o.hyperparameters,
                "splits": [m.as_dict() for m in o.split_metrics],
                "mean_metric": o.mean_metric,
            }
            for o in outcomes
        ]
        best = max(range(len(outcomes)), key=lambda i: (outcomes[i].mean_metric, -i))
        selected = outcomes[best]

    pbo_result = pbo_mod.estimate_pbo(
        matrix,
        s=config.pbo_s,
        metric=config.pbo_metric,
        alpha=config.alpha,
        mode=config.pbo_mode,
        n_samples=config.pbo_samples,
        seed=config.master_seed,
    )

    # held-out backtests: benchmarks always, the winner when trained here
    equities: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    trades: dict[str, tuple] = {}
    backtests: dict[str, dict] = {}
    env = MarketReplayEnv(panel, features, env_config)

    def _backtest(name: str, agent) -> None:
        ep: EpisodeResult = run_episode(env, agent, (j0, j1))
        metrics = metrics_from_equities([ep.equity])
        equities[name] = (ep.timestamps, ep.equity)
        trades[name] = ep.trades
        backtests[name] = metrics.as_dict()

    _backtest("equal_weight", EqualWeightAgent(fee_rate=config.fee_rate))
    if selected is not None:
        final = CemTradingPolicy(**selected.hyperparameters, seed=selected.seed)
        final.fit(env, [(t0, partition.boundaries[-1])])
        _backtest("selected", final)

    # echo without the output section, so report bytes are identical no
    # matter where the run lands
    config_echo = config.to_dict()
    config_echo.pop("output")
    report = {
        "config": config_echo,
        "config_hash": config.content_hash(),
        "mode": "external" if config.external_trials_csv else "internal",
        "universe": {
            "assets": list(panel.assets),
            "n_timestamps": panel.n_timestamps,
            "bar_interval": panel.bar_interval,
            "dropped_rows": dropped,
            "feature_warmup": features.warmup,
            "kept_features": list(features.feature_names),
            "dropped_features": dict(pipeline.report_.dropped),
            "state_dim": 1 + (features.n_features + 2) * panel.n_assets,
        },
        "windows": {
            "train_rows": [t0, t1],
            "test_rows": [j0, j1],
            "train_rows_used": [partition.boundaries[0], partition.boundaries[-1]],
        },
        "splits": {
            "scheme": plan.scheme,
            "n_groups": plan.n_groups,
            "k": plan.k,
            "n_splits": plan.n_splits,
            "embargo": config.embargo,
            "group_size": partition.group_size,
        },
        "trials": trial_records,
        "selected_trial": None if selected is None else selected.trial_id,
        "pbo": pbo_result.as_dict(),
        "verdict": pbo_result.verdict,
        "backtest": backtests,
        "reproducibility_note": (
            "metrics reflect the supplied dataset only; published absolute"
            " figures require the original market data and are not reproduced"
        ),
    }
    return RunResult(
        report=report,
        matrix=matrix,
        pbo_result=pbo_result,
        plan=plan,
        equities=equities,
        trades=trades,
    )


def emit_report(result: RunResult, directory) -> list[Path]:
    """Write the report directory; returns every file written.

    Emits report.json, matrix.csv, splits.json, logits.csv,
    logit_hist.svg, per-strategy equity/trade CSVs, and manifest.json
    (sha256 per file). Re-emitting an unchanged result reproduces every
    byte.
    """
    if result.pbo_result.lambdas.size == 0:
        raise RuntimeError("internal error: empty logit list cannot be reported")
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = [
        write_json(result.report, directory / "report.json"),
        write_logits_csv(result.pbo_result.lambdas, directory / "logits.csv"),
        directory / "logit_hist.svg",
        directory / "matrix.csv",
        directory / "splits.json",
    ]
    (directory / "logit_hist.svg").write_text(logit_histogram_svg(result.pbo_result))
    pbo_mod.matrix_to_csv(result.matrix, directory / "matrix.csv")
    (directory / "splits.json").write_text(splits_mod.plan_to_json(result.plan) + "\n")
    for name, (ts, equity) in sorted(result.equities.items()):
        paths.append(write_equity_csv(ts, equity, directory / f"equity_{name}.csv"))
        paths.append(write_trades_csv(result.trades[name], directory / f"trades_{name}.csv"))
    manifest = {
        "files": file_manifest(paths, directory),
        "config_hash": result.report["config_hash"],
        "report_hash": content_hash((directory / "report.json").read_bytes()),
    }
    paths.append(write_json(manifest, directory / "manifest.json"))
    return paths
