"""Design-phase machinery: common support, subclassification, feasibility.

Nothing in this module looks at outcomes.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import Dataset
from .errors import EmptySupport
from .models import OrdinalFit, fit_ordered_logit, linear_predictor

logger = logging.getLogger(__name__)


class EliminationRule(str, enum.Enum):
    """Common-support rule applied before subclassification."""

    E1 = "E1"  # keep everyone
    E2 = "E2"  # drop units whose linear predictor is outside the overlap of level ranges
    E3 = "E3"  # continuous-covariate overlap first, refit, then E2


LP_OUTSIDE = "lp_outside_overlap"
COVARIATE_OUTSIDE = "covariate_outside_overlap"


@dataclass(frozen=True, eq=False)
class SupportReport:
    rule: EliminationRule
    dropped_ids: tuple[int, ...]
    reasons: dict[int, str]
    retained_n: int
    original_n: int
    refit: OrdinalFit
    passes: int = 1

    def to_dict(self) -> dict:
        return {
            "rule": self.rule.value,
            "original_n": self.original_n,
            "retained_n": self.retained_n,
            "dropped_n": len(self.dropped_ids),
            "dropped_ids": [int(i) for i in self.dropped_ids],
            "reasons": {str(int(k)): v for k, v in sorted(self.reasons.items())},
            "refit_passes": self.passes,
            "refit": {
                "beta": self.refit.beta.tolist(),
                "theta": self.refit.theta.tolist(),
                "loglik": self.refit.loglik,
                "converged": self.refit.converged,
                "columns": list(self.refit.column_names),
            },
        }


def _overlap(values: np.ndarray, t: np.ndarray, Z: int) -> tuple[float, float]:
    lo = max(values[t == z].min() for z in range(1, Z + 1))
    hi = min(values[t == z].max() for z in range(1, Z + 1))
    return lo, hi


def _check_levels(data: Dataset, keep: np.ndarray, what: str) -> None:
    kept = np.bincount(data.t[keep], minlength=data.Z + 1)[1:]
    empty = [z for z in range(1, data.Z + 1) if kept[z - 1] == 0]
    if empty:
        raise EmptySupport(f"{what} leaves no units at level(s) {empty}")


def _lp_trim(data: Dataset, fit: OrdinalFit) -> np.ndarray:
    lp = linear_predictor(fit, data)
    lo, hi = _overlap(lp, data.t, data.Z)
    if lo > hi:
        raise EmptySupport(f"linear-predictor ranges of the levels do not overlap ({lo:.4g} > {hi:.4g})")
    return (lp >= lo) & (lp <= hi)


def trim_common_support(
    data: Dataset,
    fit: OrdinalFit,
    rule: EliminationRule | str,
    continuous_columns: Sequence[int | str] | None = None,
) -> tuple[Dataset, SupportReport]:
    """Apply an elimination rule and refit the ordered logit on the retained units.

    ``fit`` must have been estimated on ``data``; its covariate selection is
    reused for the refit. ``continuous_columns`` (E3 only) defaults to every
    numeric column of the dataset.
    """
    rule = EliminationRule(rule)
    data.require_all_levels()
    cols = list(fit.columns) if len(fit.columns) == fit.p else None
    if rule is EliminationRule.E1:
        return data, SupportReport(rule, (), {}, data.n, data.n, fit, passes=0)

    reasons: dict[int, str] = {}
    current, current_fit = data, fit
    passes = 0
    if rule is EliminationRule.E3:
        ccols = data.resolve(continuous_columns) if continuous_columns is not None else data.continuous_columns()
        keep = np.ones(data.n, dtype=bool)
        for j in ccols:
            lo, hi = _overlap(data.x[:, j], data.t, data.Z)
            keep &= (data.x[:, j] >= lo) & (data.x[:, j] <= hi)
        _check_levels(data, keep, "continuous-covariate overlap")
        for i in data.ids[~keep]:
            reasons[int(i)] = COVARIATE_OUTSIDE
        current = data.subset(keep)
        current_fit = fit_ordered_logit(current, cols)
        passes += 1

    keep = _lp_trim(current, current_fit)
    _check_levels(current, keep, "linear-predictor overlap")
    for i in current.ids[~keep]:
        reasons[int(i)] = LP_OUTSIDE
    retained = current.subset(keep)
    refit = fit_ordered_logit(retained, cols)
    passes += 1
    dropped = tuple(sorted(reasons))
    logger.info("%s dropped %d of %d units", rule.value, len(dropped), data.n)
    return retained, SupportReport(rule, dropped, reasons, retained.n, data.n, refit, passes=passes)


# --------------------------------------------------------------------------- #
# Subclassification
# --------------------------------------------------------------------------- #


@dataclass(frozen=True, eq=False)
class SubclassPartition:
    """Equal-frequency split of units on a scalar score.

    ``assignment[i]`` is the subclass (1..K) of the unit at position ``i`` of
    the scores passed to :func:`subclassify`; ``ids`` carries the matching
    unit ids.
    """

    K: int
    ids: np.ndarray
    assignment: np.ndarray
    boundaries: np.ndarray
    n_k: np.ndarray
    cell_counts: np.ndarray | None = None

    @property
    def n(self) -> int:
        return int(self.n_k.sum())

    @property
    def w_k(self) -> np.ndarray:
        return self.n_k / self.n_k.sum()

    def members(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == k)

    def assignment_map(self) -> dict[int, int]:
        return {int(i): int(k) for i, k in zip(self.ids, self.assignment)}

    def to_dict(self, include_assignment: bool = False) -> dict:
        out = {
            "K": self.K,
            "boundaries": self.boundaries.tolist(),
            "n_k": self.n_k.tolist(),
            "w_k": self.w_k.tolist(),
        }
        if self.cell_counts is not None:
            out["cell_counts"] = self.cell_counts.tolist()
        if include_assignment:
            out["assignment"] = {str(k): v for k, v in self.assignment_map().items()}
        return out


def subclassify(
    scores: np.ndarray,
    K: int,
    *,
    ids: np.ndarray | None = None,
    treatment: np.ndarray | None = None,
    n_levels: int | None = None,
) -> SubclassPartition:
    """Split units into ``K`` contiguous blocks of near-equal size by score.

    Units are ordered by score with ties broken by ascending id; block sizes
    differ by at most one and the larger blocks come first (lowest scores).
    Boundaries are midpoints between neighbouring blocks' extreme scores.
    """
    scores = np.asarray(scores, dtype=float)
    n = scores.size
    if K < 1:
        raise ValueError("K must be at least 1")
    if n < K:
        raise ValueError(f"cannot split {n} units into {K} subclasses")
    ids = np.arange(n) if ids is None else np.asarray(ids)
    order = np.lexsort((ids, scores))
    q, r = divmod(n, K)
    sizes = np.full(K, q)
    sizes[:r] += 1
    labels_sorted = np.repeat(np.arange(1, K + 1), sizes)
    assignment = np.empty(n, dtype=np.int64)
    assignment[order] = labels_sorted
    ends = np.cumsum(sizes)
    sorted_scores = scores[order]
    boundaries = np.array([(sorted_scores[e - 1] + sorted_scores[e]) / 2 for e in ends[:-1]])
    cells = None
    if treatment is not None:
        treatment = np.asarray(treatment)
        Z = int(n_levels if n_levels is not None else treatment.max())
        cells = np.zeros((K, Z), dtype=np.int64)
        np.add.at(cells, (assignment - 1, treatment - 1), 1)
    return SubclassPartition(K, ids.copy(), assignment, boundaries, sizes, cells)


def subclassify_dataset(data: Dataset, fit: OrdinalFit, K: int) -> SubclassPartition:
    """Subclassify the units of ``data`` on the fitted linear predictor."""
    return subclassify(
        linear_predictor(fit, data), K, ids=data.ids, treatment=data.t, n_levels=data.Z
    )


@dataclass(frozen=True)
class PartitionCheck:
    """Feasibility of a partition: every cell has at least ``3+Z`` units and every ``n_k > p+Z``."""

    ok: bool
    cells_ok: bool
    sizes_ok: bool
    min_cell: int
    min_cell_required: int
    min_subclass_required: int
    violating_cells: list[tuple[int, int, int]] = field(default_factory=list)
    small_subclasses: list[tuple[int, int]] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "ok": self.ok,
            "cells_ok": self.cells_ok,
            "sizes_ok": self.sizes_ok,
            "min_cell": self.min_cell,
            "min_cell_required": self.min_cell_required,
            "min_subclass_exclusive": self.min_subclass_required,
            "violating_cells": [list(v) for v in self.violating_cells],
            "small_subclasses": [list(v) for v in self.small_subclasses],
        }


def validate_partition(partition: SubclassPartition, Z: int, p: int) -> PartitionCheck:
    if partition.cell_counts is None:
        raise ValueError("partition has no cell counts; build it with treatment levels")
    need_cell = 3 + Z
    cells = partition.cell_counts
    bad_cells = [
        (k + 1, z + 1, int(cells[k, z]))
        for k in range(cells.shape[0])
        for z in range(cells.shape[1])
        if cells[k, z] < need_cell
    ]
    small = [(k + 1, int(nk)) for k, nk in enumerate(partition.n_k) if nk <= p + Z]
    return PartitionCheck(
        ok=not bad_cells and not small,
        cells_ok=not bad_cells,
        sizes_ok=not small,
        min_cell=int(cells.min()),
        min_cell_required=need_cell,
        min_subclass_required=p + Z,
        violating_cells=bad_cells,
        small_subclasses=small,
    )


def max_feasible_K(data: Dataset, scores: np.ndarray, Z: int, p: int, K_max: int) -> int:
    """Largest ``K <= K_max`` whose equal-frequency partition passes validation; 0 if none."""
    if K_max < 1:
        raise ValueError("K_max must be at least 1")
    for K in range(min(K_max, data.n), 0, -1):
        part = subclassify(scores, K, ids=data.ids, treatment=data.t, n_levels=Z)
        if validate_partition(part, Z, p).ok:
            return K
    return 0
