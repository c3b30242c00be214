"""Artifact emission: canonical JSON, content hashes, CSVs, SVG plots.

Every writer here is deterministic byte-for-byte for equal inputs, so
report manifests can promise "same config + seed -> same hashes". JSON
is canonicalized (sorted keys, fixed separators, NaN refused); the
histogram SVG is assembled from formatted strings with no library
dependencies, time stamps, or random ids.
"""

from __future__ import annotations

import csv
import hashlib
import json
from pathlib import Path

import numpy as np

from .env import Trade
from .pbo import PboResult

__all__ = [
    "canonical_json",
    "content_hash",
    "write_json",
    "write_equity_csv",
    "write_trades_csv",
    "write_logits_csv",
    "logit_histogram_svg",
    "file_manifest",
]


def canonical_json(payload) -> str:
    """Stable JSON text: sorted keys, no whitespace drift, no NaN."""
    return json.dumps(payload, sort_keys=True, separators=(",", ":"), allow_nan=False)


def content_hash(payload) -> str:
    """sha256 over canonical JSON (or raw bytes/str as given)."""
    if isinstance(payload, bytes):
        data = payload
    elif isinstance(payload, str):
        data = payload.encode()
    else:
        data = canonical_json(payload).encode()
    return hashlib.sha256(data).hexdigest()


def write_json(payload, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(payload, sort_keys=True, indent=2, allow_nan=False) + "\n")
    return path


def write_equity_csv(timestamps: np.ndarray, equity: np.ndarray, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["timestamp", "value"])
        for t, v in zip(timestamps, equity):
            writer.writerow([int(t), repr(float(v))])
    return path


def write_trades_csv(trades: tuple[Trade, ...], path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["timestamp", "asset", "qty", "price", "fee"])
        for tr in trades:
            writer.writerow(
                [tr.timestamp, tr.asset, repr(tr.qty), repr(tr.price), repr(tr.fee)]
            )
    return path


def write_logits_csv(lambdas: np.ndarray, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["combination", "lambda"])
        for i, lam in enumerate(lambdas):
            writer.writerow([i, repr(float(lam))])
    return path


def _fmt(x: float) -> str:
    return f"{x:.4f}".rstrip("0").rstrip(".")


def logit_histogram_svg(result: PboResult, title: str = "logit distribution") -> str:
    """A small self-contained SVG of the lambda histogram.

    Bars left of zero (the overfit mass that p counts) are drawn darker;
    the zero line and the p/verdict annotation make the plot readable
    without the JSON next to it.
    """
    width, height = 640, 360
    margin_l, margin_r, margin_t, margin_b = 60, 20, 40, 50
    plot_w = width - margin_l - margin_r
    plot_h = height - margin_t - margin_b

    edges = result.histogram_edges
    counts = result.histogram_counts
    x_min, x_max = float(edges[0]), float(edges[-1])
    y_max = max(int(counts.max()), 1)

    def sx(x: float) -> float:
        return margin_l + (x - x_min) / (x_max - x_min) * plot_w

    def sy(c: float) -> float:
        return margin_t + plot_h * (1.0 - c / y_max)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}"'
        f' viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2}" y="24" text-anchor="middle" font-family="sans-serif"'
        f' font-size="15">{title}</text>',
    ]
    for b in range(counts.size):
        c = int(counts[b])
        if c == 0:
            continue
        x0, x1 = sx(float(edges[b])), sx(float(edges[b + 1]))
        y = sy(c)
        fill = "#7a3030" if edges[b + 1] <= 0 else "#4a6a8a"
        parts.append(
            f'<rect x="{_fmt(x0)}" y="{_fmt(y)}" width="{_fmt(max(x1 - x0 - 1, 1))}"'
            f' height="{_fmt(margin_t + plot_h - y)}" fill="{fill}"/>'
        )
    zero_x = _fmt(sx(0.0))
    parts += [
        f'<line x1="{zero_x}" y1="{margin_t}" x2="{zero_x}" y2="{margin_t + plot_h}"'
        f' stroke="black" stroke-dasharray="4,3"/>',
        f'<line x1="{margin_l}" y1="{margin_t + plot_h}" x2="{width - margin_r}"'
        f' y2="{margin_t + plot_h}" stroke="black"/>',
        f'<line x1="{margin_l}" y1="{margin_t}" x2="{margin_l}"'
        f' y2="{margin_t + plot_h}" stroke="black"/>',
    ]
    for x in (x_min, 0.0, x_max):
        parts.append(
            f'<text x="{_fmt(sx(x))}" y="{margin_t + plot_h + 18}" text-anchor="middle"'
            f' font-family="sans-serif" font-size="12">{_fmt(x)}</text>'
        )
    parts += [
        f'<text x="{margin_l - 8}" y="{margin_t + 4}" text-anchor="end"'
        f' font-family="sans-serif" font-size="12">{y_max}</text>',
        f'<text x="{width / 2}" y="{height - 12}" text-anchor="middle"'
        f' font-family="sans-serif" font-size="13">lambda (p = {result.p:.4f},'
        f" {result.verdict} at alpha = {_fmt(result.alpha)})</text>",
        "</svg>",
    ]
    return "\n".join(parts) + "\n"


def file_manifest(paths: list[Path], base: Path) -> dict[str, str]:
    """Relative path -> sha256 of file bytes, sorted by path."""
    out = {}
    for p in sorted(paths):
        out[str(Path(p).relative_to(base))] = content_hash(Path(p).read_bytes())
    return out
