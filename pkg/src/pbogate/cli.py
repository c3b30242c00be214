"""Command-line interface.

Subcommands cover the pipeline stages individually (ingest, features,
splits, trials, pbo, gate, backtest, report) plus ``run`` for the whole
experiment. Exit codes are scriptable: 0 success, 1 usage or config
error, 2 data error, 3 analysis succeeded but the gate said REJECT, so
``pbogate run ... && deploy`` does the right thing.

``backtest`` runs the benchmark strategies over the configured test
window; the tuned strategy's test backtest comes out of ``run``, which
is the only command that trains.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import harness, pbo as pbo_mod, reporting, splits as splits_mod
from .agents import EqualWeightAgent, metrics_from_equities
from .env import EnvConfig, MarketReplayEnv, run_episode
from .errors import ConfigError, DataError
from .market_data import TechnicalFeatures, align, features_to_csv, load_csv

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_DATA = 2
EXIT_REJECT = 3


class _Parser(argparse.ArgumentParser):
    """argparse, but usage errors exit with the config error code."""

    def error(self, message):
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _emit(payload) -> None:
    print(json.dumps(payload, indent=2, sort_keys=True))


def _load(args) -> harness.ExperimentConfig:
    if not args.config:
        raise ConfigError("this command needs --config")
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["trials.master_seed"] = args.seed
    if getattr(args, "out", None):
        overrides["output.directory"] = args.out
    return harness.load_config(args.config, overrides=overrides)


def _panel_from(config: harness.ExperimentConfig):
    series = [load_csv(p, schema=config.csv_schema or None) for p in config.asset_csvs]
    return align(series, min_bars=config.min_bars)


def _cmd_ingest(args) -> int:
    config = _load(args)
    panel, dropped = _panel_from(config)
    _emit(
        {
            "assets": list(panel.assets),
            "n_timestamps": panel.n_timestamps,
            "bar_interval": panel.bar_interval,
            "first_timestamp": int(panel.timestamps[0]),
            "last_timestamp": int(panel.timestamps[-1]),
            "dropped_rows": dropped,
        }
    )
    return EXIT_OK


def _cmd_features(args) -> int:
    config = _load(args)
    panel, _ = _panel_from(config)
    t0, t1 = harness._window_indices(panel.timestamps, config.train_window, "train")
    pipeline = TechnicalFeatures(
        corr_threshold=config.corr_threshold, params=config.feature_params or None
    )
    pipeline.fit(panel, fit_rows=np.arange(t0, t1))
    features = pipeline.transform(panel)
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    features_to_csv(features, out / "features.csv")
    report = pipeline.report_
    reporting.write_json(
        {
            "feature_names": list(report.feature_names),
            "matrix": report.matrix.tolist(),
            "threshold": report.threshold,
            "kept": list(report.kept),
            "dropped": report.dropped,
            "warmup": features.warmup,
        },
        out / "correlation.json",
    )
    _emit({"kept": list(report.kept), "dropped": report.dropped, "warmup": features.warmup})
    return EXIT_OK


def _cmd_splits(args) -> int:
    config = _load(args)
    plan = harness._make_plan(config)
    text = splits_mod.plan_to_json(plan)
    if args.out:
        out = Path(config.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "splits.json").write_text(text + "\n")
        print(str(out / "splits.json"))
    else:
        print(text)
    return EXIT_OK


def _cmd_trials(args) -> int:
    config = _load(args)
    sets = harness.sample_trials(
        config.effective_grid, config.n_trials, config.sampler, config.master_seed
    )
    _emit(
        [
            {
                "trial": f"{i:03d}",
                "seed": harness.derive_trial_seed(config.master_seed, i),
                "hyperparameters": s,
            }
            for i, s in enumerate(sets)
        ]
    )
    return EXIT_OK


def _cmd_pbo(args) -> int:
    config = _load(args) if args.config else None
    if args.matrix:
        matrix = pbo_mod.matrix_from_csv(args.matrix)
    elif config and config.external_trials_csv:
        from .agents import import_external_trials

        plan = harness._make_plan(config)
        matrix = pbo_mod.build_trial_matrix(
            import_external_trials(config.external_trials_csv), plan
        )
    else:
        raise ConfigError("pbo needs --matrix FILE or an external-trials config")
    kwargs = dict(s=14, metric="sharpe", alpha=0.10, mode="exhaustive", n_samples=None)
    if config:
        kwargs = dict(
            s=config.pbo_s,
            metric=config.pbo_metric,
            alpha=config.alpha,
            mode=config.pbo_mode,
            n_samples=config.pbo_samples,
        )
    result = pbo_mod.estimate_pbo(matrix, seed=config.master_seed if config else 0, **kwargs)
    if args.out or config:
        out = Path(args.out or config.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        reporting.write_logits_csv(result.lambdas, out / "logits.csv")
        (out / "logit_hist.svg").write_text(reporting.logit_histogram_svg(result))
        reporting.write_json(result.as_dict(), out / "pbo.json")
    _emit(result.as_dict())
    return EXIT_REJECT if result.verdict == pbo_mod.REJECT else EXIT_OK


def _cmd_gate(args) -> int:
    alpha = args.alpha
    if alpha is None and args.config:
        alpha = _load(args).alpha
    verdict = pbo_mod.gate(args.p, alpha if alpha is not None else pbo_mod.DEFAULT_ALPHA)
    _emit({"p": args.p, "alpha": alpha if alpha is not None else pbo_mod.DEFAULT_ALPHA, "verdict": verdict})
    return EXIT_REJECT if verdict == pbo_mod.REJECT else EXIT_OK


def _cmd_backtest(args) -> int:
    config = _load(args)
    panel, _ = _panel_from(config)
    t0, t1 = harness._window_indices(panel.timestamps, config.train_window, "train")
    j0, j1 = harness._window_indices(panel.timestamps, config.test_window, "test")
    pipeline = TechnicalFeatures(
        corr_threshold=config.corr_threshold, params=config.feature_params or None
    )
    pipeline.fit(panel, fit_rows=np.arange(t0, t1))
    features = pipeline.transform(panel)
    cvix = (
        harness._load_cvix(config.cvix_csv, panel.timestamps) if config.cvix_csv else None
    )
    env = MarketReplayEnv(
        panel,
        features,
        EnvConfig(
            initial_cash=config.initial_cash,
            fee_rate=config.fee_rate,
            cvix_threshold=config.cvix_threshold,
            cvix_series=cvix,
            max_position_per_step=config.max_position_per_step,
        ),
    )
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    summary = {}
    for name, agent in (("equal_weight", EqualWeightAgent(fee_rate=config.fee_rate)),):
        episode = run_episode(env, agent, (j0, j1))
        reporting.write_equity_csv(episode.timestamps, episode.equity, out / f"equity_{name}.csv")
        reporting.write_trades_csv(episode.trades, out / f"trades_{name}.csv")
        summary[name] = metrics_from_equities([episode.equity]).as_dict()
    _emit(summary)
    return EXIT_OK


def _cmd_report(args) -> int:
    config = _load(args) if args.config else None
    run_dir = Path(args.run_dir or (config.output_dir if config else ""))
    if not run_dir or not (run_dir / "report.json").exists():
        raise ConfigError(f"no report.json found in {run_dir or '(unset)'}; pass --run-dir")
    report = json.loads((run_dir / "report.json").read_text())
    matrix = pbo_mod.matrix_from_csv(run_dir / "matrix.csv")
    pb = report["config"]["pbo"]
    result = pbo_mod.estimate_pbo(
        matrix,
        s=int(pb["s"]),
        metric=pb["metric"],
        alpha=float(pb["alpha"]),
        mode=pb["mode"],
        n_samples=pb.get("n_samples"),
        seed=int(report["config"]["trials"]["master_seed"]),
    )
    reporting.write_logits_csv(result.lambdas, run_dir / "logits.csv")
    (run_dir / "logit_hist.svg").write_text(reporting.logit_histogram_svg(result))
    files = sorted(
        p for p in run_dir.iterdir() if p.is_file() and p.name != "manifest.json"
    )
    manifest = {
        "files": reporting.file_manifest(files, run_dir),
        "config_hash": report["config_hash"],
        "report_hash": reporting.content_hash((run_dir / "report.json").read_bytes()),
    }
    reporting.write_json(manifest, run_dir / "manifest.json")
    _emit(manifest)
    return EXIT_OK


def _cmd_run(args) -> int:
    config = _load(args)
    result = harness.run_experiment(config, n_jobs=args.jobs)
    paths = harness.emit_report(result, config.output_dir)
    manifest = json.loads((Path(config.output_dir) / "manifest.json").read_text())
    _emit(
        {
            "p": result.pbo_result.p,
            "alpha": result.pbo_result.alpha,
            "verdict": result.verdict,
            "selected_trial": result.report["selected_trial"],
            "output_dir": str(config.output_dir),
            "n_files": len(paths),
            "report_hash": manifest["report_hash"],
        }
    )
    return EXIT_REJECT if result.verdict == pbo_mod.REJECT else EXIT_OK


def build_parser() -> _Parser:
    parser = _Parser(
        prog="pbogate",
        description=(
            "Detect backtest overfitting: replay a market, run hyperparameter"
            " trials under combinatorial cross-validation, estimate the"
            " probability of backtest overfitting, and gate the strategy."
        ),
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name: str, fn, help_: str, needs_jobs=False, extra=()):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="experiment config file (TOML or JSON)")
        p.add_argument("--seed", type=int, help="override trials.master_seed")
        p.add_argument("--out", help="override output.directory")
        if needs_jobs:
            p.add_argument("--jobs", type=int, default=1, help="worker count (default 1)")
        for args_, kwargs in extra:
            p.add_argument(*args_, **kwargs)
        p.set_defaults(fn=fn)
        return p

    add("ingest", _cmd_ingest, "load and align the asset CSVs, print a summary")
    add("features", _cmd_features, "compute indicators and the correlation filter")
    add(
        "splits",
        _cmd_splits,
        "print or write the split plan JSON for the configured scheme",
    )
    add("trials", _cmd_trials, "sample the hyperparameter trial list")
    add(
        "pbo",
        _cmd_pbo,
        "estimate overfitting probability from a trial matrix CSV",
        extra=((("--matrix",), {"help": "trial matrix CSV (timestamp + one column per trial)"}),),
    )
    add(
        "gate",
        _cmd_gate,
        "apply the accept/reject rule to a probability",
        extra=(
            (("--p",), {"type": float, "required": True, "help": "overfit probability"}),
            (("--alpha",), {"type": float, "help": "significance level (default 0.10)"}),
        ),
    )
    add("backtest", _cmd_backtest, "run the benchmark strategies on the test window")
    add(
        "report",
        _cmd_report,
        "re-emit derived artifacts and the manifest for an existing run",
        extra=((("--run-dir",), {"help": "existing run directory (default: config output)"}),),
    )
    add("run", _cmd_run, "full pipeline: trials, matrix, gate, backtest, report", needs_jobs=True)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(
        level=logging.INFO, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr
    )
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"pbogate: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"pbogate: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"pbogate: i/o error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
