"""OHLCV ingestion, cross-asset alignment, and feature construction.

The pipeline here is: ``load_csv`` per asset -> ``align`` into a Panel
over the common timestamps -> ``compute_features`` into a FeatureMatrix
(raw volume plus the technical indicators) -> ``pearson_matrix`` +
``correlation_filter`` to pick the uncorrelated feature subset. The
``TechnicalFeatures`` estimator wraps the last three steps behind the
usual fit/transform interface.

No interpolation anywhere: alignment keeps only timestamps present in
every series, and indicator warm-up rows are flagged, not back-filled.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from datetime import datetime, timezone
from functools import reduce

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import indicators
from .errors import DataError
from .indicators import CANONICAL_FEATURE_ORDER

__all__ = [
    "AssetSeries",
    "Panel",
    "FeatureMatrix",
    "CorrelationReport",
    "load_csv",
    "align",
    "compute_indicator",
    "compute_features",
    "pearson_matrix",
    "correlation_filter",
    "features_to_csv",
    "TechnicalFeatures",
]

logger = logging.getLogger(__name__)

_CSV_COLUMNS = ("timestamp", "open", "high", "low", "close", "volume")


@dataclass(frozen=True)
class AssetSeries:
    """Sorted OHLCV history for a single asset."""

    asset: str
    timestamps: np.ndarray  # int64 epoch seconds, strictly increasing
    open: np.ndarray
    high: np.ndarray
    low: np.ndarray
    close: np.ndarray
    volume: np.ndarray

    def __post_init__(self):
        n = self.timestamps.size
        for name in ("open", "high", "low", "close", "volume"):
            if getattr(self, name).size != n:
                raise DataError(f"{self.asset}: column {name} length mismatch")
        if n >= 2 and not np.all(np.diff(self.timestamps) > 0):
            raise DataError(f"{self.asset}: timestamps not strictly increasing")

    def __len__(self) -> int:
        return int(self.timestamps.size)


@dataclass(frozen=True)
class Panel:
    """D assets over a shared timestamp grid, no missing cells."""

    assets: tuple[str, ...]
    timestamps: np.ndarray  # int64, length T
    open: np.ndarray  # each (D, T) float64
    high: np.ndarray
    low: np.ndarray
    close: np.ndarray
    volume: np.ndarray
    bar_interval: int = 0  # seconds; 0 when not inferable

    def __post_init__(self):
        d, t = self.n_assets, self.n_timestamps
        if d < 1:
            raise DataError("Panel needs at least one asset")
        if t < 2:
            raise DataError("Panel needs at least two timestamps")
        for name in ("open", "high", "low", "close", "volume"):
            arr = getattr(self, name)
            if arr.shape != (d, t):
                raise DataError(f"Panel field {name} has shape {arr.shape}, want {(d, t)}")

    @property
    def n_assets(self) -> int:
        return len(self.assets)

    @property
    def n_timestamps(self) -> int:
        return int(self.timestamps.size)

    def asset_arrays(self, index: int) -> dict[str, np.ndarray]:
        """OHLCV columns of one asset, keyed for the indicator dispatcher."""
        return {
            "open": self.open[index],
            "high": self.high[index],
            "low": self.low[index],
            "close": self.close[index],
            "volume": self.volume[index],
        }


@dataclass(frozen=True)
class FeatureMatrix:
    """Per-timestamp feature values for every asset.

    Columns are asset-major: all features of assets[0] first, in
    ``feature_names`` order, then assets[1], and so on. The first
    ``warmup`` rows may contain NaN and must be excluded from any
    training or validation window.
    """

    feature_names: tuple[str, ...]  # per-asset names, length I
    assets: tuple[str, ...]
    timestamps: np.ndarray
    values: np.ndarray  # (T, I*D) float64
    warmup: int

    def __post_init__(self):
        t = self.timestamps.size
        want = (t, len(self.feature_names) * len(self.assets))
        if self.values.shape != want:
            raise DataError(f"feature values shape {self.values.shape}, want {want}")
        if not (0 <= self.warmup <= t):
            raise DataError(f"warmup {self.warmup} outside [0, {t}]")
        tail = self.values[self.warmup :]
        if tail.size and not np.all(np.isfinite(tail)):
            bad = np.argwhere(~np.isfinite(tail))[0]
            raise DataError(
                f"non-finite feature value outside warm-up at row {self.warmup + bad[0]},"
                f" column {self.columns()[bad[1]]}"
            )

    @property
    def n_features(self) -> int:
        return len(self.feature_names)

    def columns(self) -> list[str]:
        return [f"{a}.{f}" for a in self.assets for f in self.feature_names]

    def asset_block(self, index: int) -> np.ndarray:
        """The (T, I) slice belonging to one asset."""
        i = self.n_features
        return self.values[:, index * i : (index + 1) * i]

    def row(self, t: int) -> np.ndarray:
        return self.values[t]


@dataclass(frozen=True)
class CorrelationReport:
    """Averaged cross-asset Pearson matrix plus the filter outcome."""

    feature_names: tuple[str, ...]
    matrix: np.ndarray  # (I, I), symmetric, unit diagonal
    threshold: float = 0.6
    kept: tuple[str, ...] = ()
    dropped: dict[str, str] = field(default_factory=dict)  # dropped -> kept partner


def _parse_timestamp(raw: str) -> int:
    """Epoch seconds from an integer/float/ISO-8601 string."""
    text = raw.strip()
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return int(float(text))
    except ValueError:
        pass
    try:
        dt = datetime.fromisoformat(text.replace("Z", "+00:00"))
    except ValueError as exc:
        raise ValueError(str(exc)) from None
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return int(dt.timestamp())


def load_csv(path, schema: dict[str, str] | None = None, asset: str | None = None) -> AssetSeries:
    """Load one asset's OHLCV history from a headered CSV.

    Parameters
    ----------
    path : str or Path
        CSV file with a header row.
    schema : dict, optional
        Maps the canonical names (timestamp, open, high, low, close,
        volume) to the file's column names. Identity by default.
    asset : str, optional
        Asset identifier; defaults to the file's stem.

    Returns
    -------
    AssetSeries
        Bars sorted by timestamp.

    Raises
    ------
    DataError
        On unresolvable columns, unparseable cells (row and column are
        named), duplicate timestamps, non-positive prices, negative
        volume, or OHLC range violations.
    """
    path = str(path)
    name = asset if asset is not None else path.rsplit("/", 1)[-1].rsplit(".", 1)[0]
    schema = schema or {}
    colmap = {canon: schema.get(canon, canon) for canon in _CSV_COLUMNS}

    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [colmap[c] for c in _CSV_COLUMNS if colmap[c] not in header]
        if missing:
            raise DataError(f"{path}: missing columns {missing}; header is {header}")
        rows = list(reader)
    if not rows:
        raise DataError(f"{path}: no data rows")

    parsed: dict[str, list[float]] = {c: [] for c in _CSV_COLUMNS}
    for i, row in enumerate(rows):
        lineno = i + 2  # header is line 1
        for canon in _CSV_COLUMNS:
            raw = row[colmap[canon]]
            try:
                value = _parse_timestamp(raw) if canon == "timestamp" else float(raw)
            except (TypeError, ValueError):
                raise DataError(
                    f"{path}: row {lineno}, column {colmap[canon]!r}: cannot parse {raw!r}"
                ) from None
            parsed[canon].append(value)
        for canon in ("open", "high", "low", "close"):
            if parsed[canon][-1] <= 0:
                raise DataError(
                    f"{path}: row {lineno}, column {colmap[canon]!r}: price must be positive"
                )
        if parsed["volume"][-1] < 0:
            raise DataError(
                f"{path}: row {lineno}, column {colmap['volume']!r}: volume must be non-negative"
            )
        o, h, lo, c = (parsed[k][-1] for k in ("open", "high", "low", "close"))
        if lo > min(o, c) or h < max(o, c):
            raise DataError(f"{path}: row {lineno}: OHLC range violated (low {lo}, high {h})")

    ts = np.asarray(parsed["timestamp"], dtype=np.int64)
    order = np.argsort(ts, kind="stable")
    ts = ts[order]
    dup = np.flatnonzero(np.diff(ts) == 0)
    if dup.size:
        raise DataError(f"{path}: duplicate timestamp {int(ts[dup[0]])}")
    return AssetSeries(
        asset=name,
        timestamps=ts,
        open=np.asarray(parsed["open"])[order],
        high=np.asarray(parsed["high"])[order],
        low=np.asarray(parsed["low"])[order],
        close=np.asarray(parsed["close"])[order],
        volume=np.asarray(parsed["volume"])[order],
    )


def align(series_list: list[AssetSeries], min_bars: int = 100) -> tuple[Panel, dict[str, int]]:
    """Intersect timestamps across assets into a Panel.

    Returns the panel and a per-asset count of rows dropped because
    their timestamp was missing from at least one other series.

    Raises
    ------
    DataError
        If the intersection is empty or shorter than ``min_bars``.
    """
    if not series_list:
        raise DataError("align requires at least one series")
    names = [s.asset for s in series_list]
    if len(set(names)) != len(names):
        raise DataError(f"duplicate asset names in {names}")
    common = reduce(np.intersect1d, (s.timestamps for s in series_list))
    if common.size == 0:
        raise DataError("timestamp intersection across assets is empty")
    if common.size < min_bars:
        raise DataError(
            f"timestamp intersection has {common.size} bars, below the minimum {min_bars}"
        )
    d, t = len(series_list), common.size
    fields = {k: np.empty((d, t)) for k in ("open", "high", "low", "close", "volume")}
    dropped: dict[str, int] = {}
    for i, s in enumerate(series_list):
        idx = np.searchsorted(s.timestamps, common)
        dropped[s.asset] = len(s) - t
        for k in fields:
            fields[k][i] = getattr(s, k)[idx]
    diffs = np.diff(common)
    interval = int(np.bincount(diffs.astype(np.int64)).argmax()) if diffs.size else 0
    panel = Panel(
        assets=tuple(names), timestamps=common, bar_interval=interval, **fields
    )
    if any(dropped.values()):
        logger.info("alignment dropped rows: %s", {k: v for k, v in dropped.items() if v})
    return panel, dropped


def compute_indicator(panel: Panel, name: str, **params) -> tuple[np.ndarray, int]:
    """One indicator across every asset of a panel.

    Returns a (D, T) array and the warm-up length (identical per asset
    since all assets share the timestamp grid).
    """
    out = np.empty((panel.n_assets, panel.n_timestamps))
    warmup = 0
    for d in range(panel.n_assets):
        out[d], warmup = indicators.compute(name, panel.asset_arrays(d), **params)
    return out, warmup


def compute_features(
    panel: Panel,
    feature_names: tuple[str, ...] = CANONICAL_FEATURE_ORDER,
    params: dict[str, dict] | None = None,
) -> FeatureMatrix:
    """Stack the named features for every asset into a FeatureMatrix.

    ``params`` optionally overrides indicator periods per feature name,
    e.g. ``{"rsi": {"period": 7}}``. "volume" passes the raw series
    through with zero warm-up.
    """
    params = params or {}
    unknown = [f for f in feature_names if f != "volume" and f.lower() not in indicators.INDICATOR_INPUTS]
    if unknown:
        raise ValueError(f"unknown features {unknown}")
    t = panel.n_timestamps
    columns = []
    warmup = 0
    for d in range(panel.n_assets):
        arrays = panel.asset_arrays(d)
        for feat in feature_names:
            if feat == "volume":
                columns.append(arrays["volume"].astype(np.float64))
            else:
                vals, w = indicators.compute(feat, arrays, **params.get(feat, {}))
                columns.append(vals)
                warmup = max(warmup, w)
    values = np.column_stack(columns) if columns else np.empty((t, 0))
    return FeatureMatrix(
        feature_names=tuple(feature_names),
        assets=panel.assets,
        timestamps=panel.timestamps,
        values=values,
        warmup=warmup,
    )


def pearson_matrix(features: FeatureMatrix, rows: np.ndarray | None = None) -> CorrelationReport:
    """Sample Pearson correlations between features, averaged over assets.

    Coefficients are computed per asset over the non-warm-up rows (or
    the supplied row subset, intersected with the non-warm-up region)
    and then averaged elementwise across assets, so one matrix
    summarizes all D assets.

    Raises
    ------
    DataError
        If fewer than 2 usable rows remain or any column is constant
        (its correlation is undefined); the feature is named.
    """
    if rows is None:
        row_idx = np.arange(features.warmup, features.timestamps.size)
    else:
        row_idx = np.asarray(rows, dtype=np.intp)
        row_idx = row_idx[row_idx >= features.warmup]
    if row_idx.size < 2:
        raise DataError("pearson_matrix needs at least 2 rows outside the warm-up region")
    i = features.n_features
    acc = np.zeros((i, i))
    for d in range(len(features.assets)):
        block = features.asset_block(d)[row_idx]
        stds = block.std(axis=0)
        flat = np.flatnonzero(stds == 0)
        if flat.size:
            raise DataError(
                f"feature {features.feature_names[flat[0]]!r} is constant for asset"
                f" {features.assets[d]!r}; correlation undefined"
            )
        acc += np.corrcoef(block, rowvar=False)
    matrix = acc / len(features.assets)
    matrix = np.clip((matrix + matrix.T) / 2.0, -1.0, 1.0)
    np.fill_diagonal(matrix, 1.0)
    return CorrelationReport(feature_names=features.feature_names, matrix=matrix)


def correlation_filter(report: CorrelationReport, threshold: float = 0.6) -> CorrelationReport:
    """Greedy feature selection: drop anything too correlated with a keeper.

    Features are scanned in their listed order (the canonical order when
    the matrix came from ``compute_features``). A feature is dropped iff
    |rho| > threshold against any feature already kept, and the keeper
    that triggered the drop is recorded. Pinned rule: of a correlated
    pair, the later feature goes.
    """
    if not 0 < threshold <= 1:
        raise ValueError(f"threshold must be in (0, 1], got {threshold}")
    names = report.feature_names
    kept: list[int] = []
    dropped: dict[str, str] = {}
    for j, name in enumerate(names):
        partner = next((k for k in kept if abs(report.matrix[j, k]) > threshold), None)
        if partner is None:
            kept.append(j)
        else:
            dropped[name] = names[partner]
    return CorrelationReport(
        feature_names=names,
        matrix=report.matrix,
        threshold=threshold,
        kept=tuple(names[j] for j in kept),
        dropped=dropped,
    )


def features_to_csv(features: FeatureMatrix, path) -> None:
    """Write the matrix as timestamp + one column per asset.feature."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["timestamp", *features.columns()])
        for t in range(features.timestamps.size):
            writer.writerow(
                [int(features.timestamps[t]), *(repr(float(v)) for v in features.values[t])]
            )


class TechnicalFeatures(BaseEstimator, TransformerMixin):
    """Feature pipeline: indicators -> correlation filter -> FeatureMatrix.

    fit() computes every candidate feature over the training panel,
    builds the averaged Pearson matrix on the non-warm-up rows (further
    restricted to ``fit_rows`` when given), and selects the kept subset.
    transform() recomputes features over any panel of the same assets
    and returns only the kept columns, so validation/test data never
    influences selection.

    Parameters
    ----------
    features : tuple of str
        Candidate features in priority order for the greedy filter.
    params : dict, optional
        Per-feature indicator parameter overrides.
    corr_threshold : float
        |rho| above this drops the later feature of a pair.
    apply_filter : bool
        When False, keep every candidate (the report is still built).
    """

    def __init__(
        self,
        features: tuple[str, ...] = CANONICAL_FEATURE_ORDER,
        params: dict | None = None,
        corr_threshold: float = 0.6,
        apply_filter: bool = True,
    ):
        self.features = features
        self.params = params
        self.corr_threshold = corr_threshold
        self.apply_filter = apply_filter

    def fit(self, X: Panel, y=None, fit_rows: np.ndarray | None = None):
        full = compute_features(X, tuple(self.features), self.params)
        report = pearson_matrix(full, rows=fit_rows)
        report = correlation_filter(report, self.corr_threshold)
        self.report_ = report
        self.kept_features_ = report.kept if self.apply_filter else tuple(self.features)
        self.warmup_ = full.warmup
        self.n_features_out_ = len(self.kept_features_) * len(X.assets)
        return self

    def transform(self, X: Panel) -> FeatureMatrix:
        check_is_fitted(self, "kept_features_")
        return compute_features(X, self.kept_features_, self.params)
