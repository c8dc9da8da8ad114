"""Covariate balance audit built on Kendall's tau-b.

For each covariate the audit reports tau-b against treatment in the full
retained sample and inside every subclass, plus the subclass-size weighted
average of the within-subclass values. Cells where either vector is constant
carry no information; they are flagged and left out of the weighted average,
with the remaining weights renormalized.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.stats import norm

from .data import Dataset
from .design import SubclassPartition
from .errors import ConstantVector
from .models import OrdinalFit, linear_predictor


@dataclass(frozen=True)
class TauResult:
    tau: float
    z: float
    p_value: float
    n: int
    S: int

    def to_dict(self) -> dict:
        return {"tau": self.tau, "z": self.z, "p_value": self.p_value, "n": self.n, "S": self.S}


def _count_inversions(r: np.ndarray) -> int:
    """Pairs ``i < j`` with ``r[i] > r[j]`` for non-negative integer ``r``.

    Bottom-up merge sort; each level merges all adjacent block pairs at once
    by offsetting values with their pair index.
    """
    n = r.size
    if n < 2:
        return 0
    m = int(r.max()) + 1
    vals = r.astype(np.int64)
    pos = np.arange(n)
    total = 0
    width = 1
    while width < n:
        blk = pos // width
        pair = blk // 2
        right = (blk % 2).astype(bool)
        keys = pair * m + vals
        left_keys = keys[~right]
        rk = keys[right]
        rp = pair[right]
        # left elements of the same pair that are strictly larger
        end = np.searchsorted(left_keys, (rp + 1) * m, side="left")
        total += int(np.sum(end - np.searchsorted(left_keys, rk, side="right")))
        vals = vals[np.argsort(keys, kind="stable")]
        width *= 2
    return total


def _tie_sums(counts: np.ndarray) -> tuple[int, int, int, int]:
    c = counts.astype(np.int64)
    pairs = int(np.sum(c * (c - 1) // 2))
    v0 = int(np.sum(c * (c - 1) * (2 * c + 5)))
    v1 = int(np.sum(c * (c - 1)))
    v2 = int(np.sum(c * (c - 1) * (c - 2)))
    return pairs, v0, v1, v2


def kendall_tau_b(a: Sequence[float], b: Sequence[float]) -> TauResult:
    """Tie-corrected Kendall tau-b with a normal-theory test of independence.

    ``z`` is the S statistic over the square root of its exact null variance
    in the presence of ties (no continuity correction).
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("kendall_tau_b needs two 1-d vectors of equal length")
    n = a.size
    if n < 2:
        raise ValueError("need at least two observations")
    ua, ra = np.unique(a, return_inverse=True)
    ub, rb = np.unique(b, return_inverse=True)
    if ua.size == 1 or ub.size == 1:
        raise ConstantVector("tau-b is undefined when either vector is constant")
    ra = ra.ravel()
    rb = rb.ravel()
    order = np.lexsort((rb, ra))
    n_disc = _count_inversions(rb[order])

    n1, va0, va1, va2 = _tie_sums(np.bincount(ra))
    n2, vb0, vb1, vb2 = _tie_sums(np.bincount(rb))
    _, joint = np.unique(ra.astype(np.int64) * ub.size + rb, return_counts=True)
    n3 = int(np.sum(joint * (joint - 1) // 2))
    n0 = n * (n - 1) // 2
    S = n0 - n1 - n2 + n3 - 2 * n_disc

    tau = S / np.sqrt(float(n0 - n1) * float(n0 - n2))
    var_s = (n * (n - 1) * (2 * n + 5) - va0 - vb0) / 18.0
    var_s += va1 * vb1 / (2.0 * n * (n - 1))
    if n > 2:
        var_s += va2 * vb2 / (9.0 * n * (n - 1) * (n - 2))
    z = S / np.sqrt(var_s)
    return TauResult(
        tau=float(np.clip(tau, -1.0, 1.0)),
        z=float(z),
        p_value=float(2 * norm.sf(abs(z))),
        n=int(n),
        S=int(S),
    )


# --------------------------------------------------------------------------- #
# Audit
# --------------------------------------------------------------------------- #


@dataclass(frozen=True, eq=False)
class BalanceMatrix:
    """Per-covariate (rows) by per-subclass (columns) tau-b results.

    ``flagged`` marks cells where tau-b was undefined; their entries are NaN.
    """

    columns: tuple[str, ...]
    kinds: tuple[str, ...]
    tau: np.ndarray
    z: np.ndarray
    p_value: np.ndarray
    n: np.ndarray
    flagged: np.ndarray
    w_k: np.ndarray
    tau_bar: np.ndarray
    tau_raw: np.ndarray
    z_raw: np.ndarray
    p_raw: np.ndarray

    @property
    def K(self) -> int:
        return self.tau.shape[1]

    def cell(self, j: int, k: int) -> TauResult | None:
        """Result for covariate row ``j`` and subclass ``k`` (1-based), ``None`` if flagged."""
        if self.flagged[j, k - 1]:
            return None
        return TauResult(
            float(self.tau[j, k - 1]),
            float(self.z[j, k - 1]),
            float(self.p_value[j, k - 1]),
            int(self.n[j, k - 1]),
            0,
        )

    def z_statistics(self) -> np.ndarray:
        return self.z[~self.flagged]

    def to_dict(self) -> dict:
        def clean(a):
            return [[None if np.isnan(v) else float(v) for v in row] for row in a]

        return {
            "columns": list(self.columns),
            "K": self.K,
            "w_k": self.w_k.tolist(),
            "tau_raw": [None if np.isnan(v) else float(v) for v in self.tau_raw],
            "p_raw": [None if np.isnan(v) else float(v) for v in self.p_raw],
            "tau_bar": [None if np.isnan(v) else float(v) for v in self.tau_bar],
            "tau": clean(self.tau),
            "z": clean(self.z),
            "p_value": clean(self.p_value),
            "flagged": self.flagged.tolist(),
        }


def _aligned(data: Dataset, partition: SubclassPartition) -> None:
    if partition.ids.shape != data.ids.shape or not np.array_equal(partition.ids, data.ids):
        raise ValueError("partition does not cover the dataset row for row")


def balance_audit(
    data: Dataset,
    partition: SubclassPartition,
    columns: Sequence[int | str] | None = None,
) -> BalanceMatrix:
    _aligned(data, partition)
    idx = data.resolve(columns)
    K = partition.K
    p = len(idx)
    tau = np.full((p, K), np.nan)
    z = np.full((p, K), np.nan)
    pv = np.full((p, K), np.nan)
    nn = np.zeros((p, K), dtype=np.int64)
    flagged = np.zeros((p, K), dtype=bool)
    tau_raw = np.full(p, np.nan)
    z_raw = np.full(p, np.nan)
    p_raw = np.full(p, np.nan)
    members = [partition.members(k) for k in range(1, K + 1)]

    for r, j in enumerate(idx):
        col = data.x[:, j]
        try:
            res = kendall_tau_b(col, data.t)
            tau_raw[r], z_raw[r], p_raw[r] = res.tau, res.z, res.p_value
        except ConstantVector:
            pass
        for k, rows in enumerate(members):
            nn[r, k] = rows.size
            try:
                res = kendall_tau_b(col[rows], data.t[rows])
            except (ConstantVector, ValueError):
                flagged[r, k] = True
                continue
            tau[r, k], z[r, k], pv[r, k] = res.tau, res.z, res.p_value

    w = partition.w_k
    wm = np.where(flagged, 0.0, w[None, :])
    with np.errstate(invalid="ignore"):
        tau_bar = np.nansum(np.where(flagged, 0.0, tau) * wm, axis=1) / wm.sum(axis=1)
    return BalanceMatrix(
        columns=tuple(data.columns[j] for j in idx),
        kinds=tuple(data.kinds[j] for j in idx),
        tau=tau,
        z=z,
        p_value=pv,
        n=nn,
        flagged=flagged,
        w_k=w,
        tau_bar=tau_bar,
        tau_raw=tau_raw,
        z_raw=z_raw,
        p_raw=p_raw,
    )


def significant_proportion(matrix: BalanceMatrix, alpha: float) -> float:
    """Share of non-flagged within-subclass tests with p-value below ``alpha``."""
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    p = matrix.p_value[~matrix.flagged]
    if p.size == 0:
        return float("nan")
    return float(np.mean(p < alpha))


# --------------------------------------------------------------------------- #
# Plot-ready data
# --------------------------------------------------------------------------- #


def five_number_summary(values: np.ndarray) -> dict:
    """Boxplot statistics with Tukey 1.5 IQR whiskers."""
    v = np.sort(np.asarray(values, dtype=float))
    if v.size == 0:
        return {"n": 0, "min": None, "q1": None, "median": None, "q3": None, "max": None,
                "whisker_low": None, "whisker_high": None, "outliers": []}
    q1, med, q3 = np.percentile(v, [25, 50, 75])
    iqr = q3 - q1
    lo_f, hi_f = q1 - 1.5 * iqr, q3 + 1.5 * iqr
    inside = v[(v >= lo_f) & (v <= hi_f)]
    return {
        "n": int(v.size),
        "min": float(v[0]),
        "q1": float(q1),
        "median": float(med),
        "q3": float(q3),
        "max": float(v[-1]),
        "whisker_low": float(inside.min()),
        "whisker_high": float(inside.max()),
        "outliers": [float(x) for x in v[(v < lo_f) | (v > hi_f)]],
    }


def _cell_boxes(values, data, partition):
    boxes = []
    for k in range(1, partition.K + 1):
        in_k = partition.assignment == k
        for z in range(1, data.Z + 1):
            stats = five_number_summary(values[in_k & (data.t == z)])
            boxes.append({"subclass": k, "level": z, **stats})
    return boxes


def emit_plot_data(
    data: Dataset,
    partition: SubclassPartition,
    fit: OrdinalFit,
    columns: Sequence[int | str] | None = None,
    *,
    matrix: BalanceMatrix | None = None,
) -> dict:
    """Data behind the diagnostic figures; no rendering happens here.

    * ``boxplots``: per (subclass, level) boxplot statistics of the linear
      predictor and each numeric covariate;
    * ``love``: raw versus subclass-averaged tau for every audited covariate;
    * ``z_hist``: every non-flagged within-subclass z statistic for this K,
      with a standard normal density grid for the overlay.
    """
    _aligned(data, partition)
    idx = data.resolve(columns)
    if matrix is None:
        matrix = balance_audit(data, partition, idx)
    lp = linear_predictor(fit, data)
    boxplots = {"linear_predictor": _cell_boxes(lp, data, partition)}
    for j in idx:
        if data.kinds[j] == "numeric":
            boxplots[data.columns[j]] = _cell_boxes(data.x[:, j], data, partition)
    love = [
        {
            "covariate": name,
            "tau_raw": None if np.isnan(tr) else float(tr),
            "tau_bar": None if np.isnan(tb) else float(tb),
        }
        for name, tr, tb in zip(matrix.columns, matrix.tau_raw, matrix.tau_bar)
    ]
    grid = np.round(np.linspace(-4, 4, 81), 10)
    return {
        "K": partition.K,
        "boxplots": boxplots,
        "love": love,
        "z_hist": {
            "K": partition.K,
            "z": [float(v) for v in matrix.z_statistics()],
            "normal_grid": grid.tolist(),
            "normal_density": norm.pdf(grid).tolist(),
        },
    }
