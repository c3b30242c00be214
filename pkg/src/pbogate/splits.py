"""Training/validation split plans over a contiguous training window.

The window's T timestamps are cut into N equal contiguous groups of
floor(T/N) rows (the remainder at the tail is dropped). A plan then
assigns whole groups to the train or validation side:

* walk-forward: one split, leading groups train, trailing validate;
* k-fold: N splits, each holding out one group;
* combinatorial: every C(N, k) choice of k validation groups.

Plans are pure group-index combinatorics; ``materialize`` turns them
into concrete row indices against a partition, optionally trimming an
embargo of E rows from the training side of each validation boundary.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from itertools import combinations

import numpy as np

from .errors import ConfigError

__all__ = [
    "GroupPartition",
    "Split",
    "SplitPlan",
    "MaterializedSplit",
    "make_combinatorial",
    "make_walk_forward",
    "make_kfold",
    "materialize",
    "plan_to_json",
    "plan_from_json",
]

WF = "WF"
KFOLD = "KFOLD"
COMBINATORIAL = "COMBINATORIAL"


@dataclass(frozen=True)
class GroupPartition:
    """N equal contiguous groups over a window of T rows."""

    n_groups: int
    boundaries: tuple[int, ...]  # N+1 ascending indices; group g is [b[g], b[g+1])

    @staticmethod
    def from_length(n_rows: int, n_groups: int, offset: int = 0) -> "GroupPartition":
        """Cut [offset, offset+n_rows) into equal groups, dropping the tail.

        ``offset`` shifts all boundaries, so partitions can live inside
        a larger index space (e.g. after a warm-up region).
        """
        if n_groups < 2:
            raise ConfigError(f"need at least 2 groups, got {n_groups}")
        size = n_rows // n_groups
        if size < 1:
            raise ConfigError(f"{n_rows} rows cannot form {n_groups} non-empty groups")
        bounds = tuple(offset + g * size for g in range(n_groups + 1))
        return GroupPartition(n_groups=n_groups, boundaries=bounds)

    @property
    def group_size(self) -> int:
        return self.boundaries[1] - self.boundaries[0]

    @property
    def n_used_rows(self) -> int:
        return self.boundaries[-1] - self.boundaries[0]

    def group_range(self, g: int) -> tuple[int, int]:
        return self.boundaries[g], self.boundaries[g + 1]

    def group_indices(self, g: int) -> np.ndarray:
        lo, hi = self.group_range(g)
        return np.arange(lo, hi)


@dataclass(frozen=True)
class Split:
    train_groups: tuple[int, ...]
    validation_groups: tuple[int, ...]


@dataclass(frozen=True)
class SplitPlan:
    scheme: str
    n_groups: int
    k: int  # validation groups per split
    splits: tuple[Split, ...]

    @property
    def n_splits(self) -> int:
        return len(self.splits)

    def __post_init__(self):
        every = frozenset(range(self.n_groups))
        for s in self.splits:
            tr, va = frozenset(s.train_groups), frozenset(s.validation_groups)
            if tr & va:
                raise ConfigError(f"split has overlapping sides: {s}")
            if tr | va != every:
                raise ConfigError(f"split does not cover all groups: {s}")

    # sklearn-style aliases so the plan drops into CV tooling
    def get_n_splits(self, X=None, y=None, groups=None) -> int:
        return self.n_splits

    def split_indices(self, partition: GroupPartition, embargo: int = 0):
        for m in materialize(self, partition, embargo=embargo):
            yield m.train_indices, m.validation_indices


def make_combinatorial(n_groups: int, k: int) -> SplitPlan:
    """All C(N, k) choices of k validation groups, lexicographic order."""
    if n_groups < 2:
        raise ConfigError(f"need at least 2 groups, got {n_groups}")
    if not 1 <= k <= n_groups - 1:
        raise ConfigError(f"k must be in [1, {n_groups - 1}], got {k}")
    every = tuple(range(n_groups))
    splits = tuple(
        Split(
            train_groups=tuple(g for g in every if g not in val),
            validation_groups=val,
        )
        for val in combinations(every, k)
    )
    assert len(splits) == math.comb(n_groups, k)
    return SplitPlan(scheme=COMBINATORIAL, n_groups=n_groups, k=k, splits=splits)


def make_walk_forward(n_groups: int, train_fraction: float) -> SplitPlan:
    """Single chronological split; rounding never empties either side."""
    if n_groups < 2:
        raise ConfigError(f"need at least 2 groups, got {n_groups}")
    if not 0.0 < train_fraction < 1.0:
        raise ConfigError(f"train_fraction must be in (0, 1), got {train_fraction}")
    n_train = min(max(round(n_groups * train_fraction), 1), n_groups - 1)
    split = Split(
        train_groups=tuple(range(n_train)),
        validation_groups=tuple(range(n_train, n_groups)),
    )
    return SplitPlan(scheme=WF, n_groups=n_groups, k=n_groups - n_train, splits=(split,))


def make_kfold(n_groups: int) -> SplitPlan:
    """N splits, each holding out one group as validation."""
    if n_groups < 2:
        raise ConfigError(f"need at least 2 groups, got {n_groups}")
    every = tuple(range(n_groups))
    splits = tuple(
        Split(train_groups=tuple(g for g in every if g != v), validation_groups=(v,))
        for v in every
    )
    return SplitPlan(scheme=KFOLD, n_groups=n_groups, k=1, splits=splits)


@dataclass(frozen=True)
class MaterializedSplit:
    """Concrete row indices for one split."""

    split: Split
    train_indices: np.ndarray
    validation_indices: np.ndarray
    train_ranges: tuple[tuple[int, int], ...]
    validation_ranges: tuple[tuple[int, int], ...]  # one range per group


def _merge_adjacent(ranges: list[tuple[int, int]]) -> tuple[tuple[int, int], ...]:
    merged: list[tuple[int, int]] = []
    for lo, hi in ranges:
        if merged and merged[-1][1] == lo:
            merged[-1] = (merged[-1][0], hi)
        else:
            merged.append((lo, hi))
    return tuple(merged)


def materialize(
    plan: SplitPlan, partition: GroupPartition, embargo: int = 0
) -> list[MaterializedSplit]:
    """Turn group-level splits into row index sets.

    With ``embargo`` E > 0, any training rows within E of a validation
    group boundary are removed from the training side (the validation
    rows are untouched). E=0 reproduces the plain group assignment.
    """
    if plan.n_groups != partition.n_groups:
        raise ConfigError(
            f"plan has {plan.n_groups} groups, partition has {partition.n_groups}"
        )
    if embargo < 0:
        raise ConfigError(f"embargo must be >= 0, got {embargo}")
    out = []
    for s in plan.splits:
        val_ranges = tuple(partition.group_range(g) for g in s.validation_groups)
        train_ranges = _merge_adjacent([partition.group_range(g) for g in s.train_groups])
        if embargo:
            trimmed = []
            for lo, hi in train_ranges:
                for vlo, vhi in val_ranges:
                    # trim the training edge that touches this validation block
                    if hi == vlo:
                        hi = max(hi - embargo, lo)
                    if lo == vhi:
                        lo = min(lo + embargo, hi)
                if lo < hi:
                    trimmed.append((lo, hi))
            train_ranges = tuple(trimmed)
        train_idx = (
            np.concatenate([np.arange(lo, hi) for lo, hi in train_ranges])
            if train_ranges
            else np.empty(0, dtype=np.intp)
        )
        val_idx = np.concatenate([np.arange(lo, hi) for lo, hi in val_ranges])
        out.append(
            MaterializedSplit(
                split=s,
                train_indices=train_idx,
                validation_indices=val_idx,
                train_ranges=train_ranges,
                validation_ranges=val_ranges,
            )
        )
    return out


def plan_to_json(plan: SplitPlan) -> str:
    payload = {
        "scheme": plan.scheme,
        "n_groups": plan.n_groups,
        "k": plan.k,
        "splits": [
            {"train": list(s.train_groups), "validation": list(s.validation_groups)}
            for s in plan.splits
        ],
    }
    return json.dumps(payload, indent=2, sort_keys=True)


def plan_from_json(text: str) -> SplitPlan:
    payload = json.loads(text)
    try:
        splits = tuple(
            Split(
                train_groups=tuple(int(g) for g in s["train"]),
                validation_groups=tuple(int(g) for g in s["validation"]),
            )
            for s in payload["splits"]
        )
        return SplitPlan(
            scheme=str(payload["scheme"]),
            n_groups=int(payload["n_groups"]),
            k=int(payload["k"]),
            splits=splits,
        )
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"malformed split-plan JSON: {exc}") from None
