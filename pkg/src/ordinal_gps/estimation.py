"""Outcome-phase estimators of pairwise average treatment effects.

Every estimator returns an :class:`EffectTable` holding all ``Z(Z-1)/2``
pairwise contrasts. Estimators that work from a vector of (adjusted) level
means build every contrast from that one vector, so the table is exactly
antisymmetric and transitive up to floating-point rounding.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import stats

from .data import Dataset
from .design import SubclassPartition
from .errors import EmptyCell, EmptyLevel, ModelError, NonConvergence, OrdinalGPSError, ZeroProbability
from .models import OrdinalFit, fit_ols, fit_ordered_logit, predict_category_probs

logger = logging.getLogger(__name__)

Z95 = 1.96
MAX_RESAMPLE_RETRIES = 10


def pair_order(Z: int) -> list[tuple[int, int]]:
    """Pairs ``(t, s)`` with ``t > s``, grouped by the reference level ``s``."""
    return [(t, s) for s in range(1, Z) for t in range(s + 1, Z + 1)]


@dataclass(frozen=True, eq=False)
class EffectTable:
    """Pairwise effect estimates; ``estimates[t-1, s-1]`` estimates ``E[Y(t) - Y(s)]``."""

    estimator: str
    estimates: np.ndarray
    ses: np.ndarray
    metadata: dict = field(default_factory=dict)
    level_labels: tuple[str, ...] = ()

    @property
    def Z(self) -> int:
        return self.estimates.shape[0]

    def estimate(self, t: int, s: int) -> float:
        return float(self.estimates[t - 1, s - 1])

    def se(self, t: int, s: int) -> float:
        return float(self.ses[t - 1, s - 1])

    def ci95(self, t: int, s: int) -> tuple[float, float]:
        e, h = self.estimate(t, s), Z95 * self.se(t, s)
        return e - h, e + h

    def significant(self, t: int, s: int) -> bool:
        lo, hi = self.ci95(t, s)
        return not (lo <= 0.0 <= hi)

    def pairs(self) -> list[tuple[int, int]]:
        return pair_order(self.Z)

    def to_dict(self) -> dict:
        labels = self.level_labels or tuple(str(z) for z in range(1, self.Z + 1))
        rows = []
        for t, s in self.pairs():
            lo, hi = self.ci95(t, s)
            rows.append(
                {
                    "t": t,
                    "s": s,
                    "label": f"{labels[t - 1]} v {labels[s - 1]}",
                    "estimate": self.estimate(t, s),
                    "se": self.se(t, s),
                    "ci95": [lo, hi],
                    "significant": self.significant(t, s),
                }
            )
        return {"estimator": self.estimator, "metadata": self.metadata, "pairs": rows}


def _table_from_means(name, means, cov, metadata, labels) -> EffectTable:
    """Contrasts ``m_t - m_s`` with variance ``c V c'``."""
    Z = means.size
    est = np.zeros((Z, Z))
    se = np.zeros((Z, Z))
    for t, s in pair_order(Z):
        d = means[t - 1] - means[s - 1]
        v = cov[t - 1, t - 1] + cov[s - 1, s - 1] - 2 * cov[t - 1, s - 1]
        est[t - 1, s - 1], est[s - 1, t - 1] = d, -d
        se[t - 1, s - 1] = se[s - 1, t - 1] = np.sqrt(max(v, 0.0)) if np.isfinite(v) else np.nan
    return EffectTable(name, est, se, metadata, labels)


def _require_outcome(data: Dataset) -> np.ndarray:
    if data.y is None:
        raise OrdinalGPSError("outcome is required for effect estimation")
    return data.y


def _indicators(t: np.ndarray, Z: int) -> np.ndarray:
    D = np.zeros((t.size, Z))
    D[np.arange(t.size), t - 1] = 1.0
    return D


def _check_partition(data: Dataset, partition: SubclassPartition) -> None:
    if not np.array_equal(partition.ids, data.ids):
        raise ValueError("partition does not cover the dataset row for row")


# --------------------------------------------------------------------------- #
# Global test
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class GlobalTest:
    statistic: float
    df: tuple[int, int]
    p_value: float
    adjustment: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {
            "statistic": self.statistic,
            "df": list(self.df),
            "p_value": self.p_value,
            "adjustment": list(self.adjustment),
        }


def global_test(
    data: Dataset,
    partition: SubclassPartition,
    adjustment: Sequence[int | str] | None = None,
) -> GlobalTest:
    """F test of no exposure effect in a randomized-block model with subclasses as blocks.

    With no adjustment this is the block ANOVA; with covariates it is the
    block ANCOVA. Full model: block + exposure (+ covariates); reduced model
    drops the exposure indicators.
    """
    _check_partition(data, partition)
    y = _require_outcome(data)
    adj = data.resolve(adjustment) if adjustment else []
    blocks = _indicators(partition.assignment, partition.K)
    expo = _indicators(data.t, data.Z)[:, 1:]
    cov = data.x[:, adj]
    k_block = blocks.shape[1]
    full = fit_ols(y, np.column_stack([blocks, expo, cov]),
                   protected=range(k_block, k_block + data.Z - 1))
    reduced = fit_ols(y, np.column_stack([blocks, cov]))
    df1 = full.rank - reduced.rank
    df2 = full.dof
    if full.rss == 0:
        F, p = np.inf, 0.0
    else:
        F = max((reduced.rss - full.rss) / df1, 0.0) / (full.rss / df2)
        p = float(stats.f.sf(F, df1, df2))
    return GlobalTest(float(F), (int(df1), int(df2)), p, tuple(data.columns[j] for j in adj))


# --------------------------------------------------------------------------- #
# Subclass estimators
# --------------------------------------------------------------------------- #


def estimate_subclass_means(data: Dataset, partition: SubclassPartition) -> EffectTable:
    """Subclass-weighted differences of level means.

    The standard error aggregates within-cell sample variances with squared
    subclass weights, mirroring the regression-adjusted estimator.
    """
    _check_partition(data, partition)
    y = _require_outcome(data)
    Z, K = data.Z, partition.K
    w = partition.w_k
    means = np.zeros((K, Z))
    var_mean = np.zeros((K, Z))
    for k in range(1, K + 1):
        in_k = partition.assignment == k
        for z in range(1, Z + 1):
            cell = y[in_k & (data.t == z)]
            if cell.size == 0:
                raise EmptyCell(z, k)
            means[k - 1, z - 1] = cell.mean()
            var_mean[k - 1, z - 1] = cell.var(ddof=1) / cell.size if cell.size > 1 else np.nan
    agg = w @ means
    cov = np.diag((w**2) @ var_mean)
    return _table_from_means(
        "subclass_means", agg, cov, {"K": K}, data.level_labels
    )


@dataclass(frozen=True, eq=False)
class SubclassEffect:
    k: int
    n_k: int
    w_k: float
    alpha_hat: np.ndarray
    sigma_k: np.ndarray
    dropped_covariates: tuple[str, ...] = ()

    def pair_effect(self, t: int, s: int) -> float:
        return float(self.alpha_hat[t - 1] - self.alpha_hat[s - 1])

    def pair_variance(self, t: int, s: int) -> float:
        c = np.zeros(self.alpha_hat.size)
        c[t - 1], c[s - 1] = 1.0, -1.0
        return float(c @ self.sigma_k @ c)

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "n_k": self.n_k,
            "w_k": self.w_k,
            "alpha_hat": self.alpha_hat.tolist(),
            "sigma_k": self.sigma_k.tolist(),
            "dropped_covariates": list(self.dropped_covariates),
        }


def estimate_subclass_regression(
    data: Dataset,
    partition: SubclassPartition,
    adjustment: Sequence[int | str] | None = None,
) -> tuple[EffectTable, list[SubclassEffect]]:
    """Within-subclass regression adjustment aggregated over subclasses.

    In each subclass ``Y`` is regressed on the ``Z`` level indicators (no
    intercept) plus the adjustment covariates; the indicator coefficients are
    covariate-adjusted level means. Pair effects and their variances are
    combined with weights ``w_k`` and ``w_k**2``. Covariates that are
    constant or collinear inside a subclass are dropped there and recorded.
    """
    _check_partition(data, partition)
    y = _require_outcome(data)
    Z, K = data.Z, partition.K
    adj = data.resolve(adjustment) if adjustment else []
    w = partition.w_k
    effects = []
    agg = np.zeros(Z)
    cov = np.zeros((Z, Z))
    for k in range(1, K + 1):
        rows = partition.members(k)
        counts = np.bincount(data.t[rows], minlength=Z + 1)[1:]
        for z in range(1, Z + 1):
            if counts[z - 1] == 0:
                raise EmptyCell(z, k)
        design = np.column_stack([_indicators(data.t[rows], Z), data.x[np.ix_(rows, adj)]])
        try:
            ols = fit_ols(y[rows], design, protected=range(Z))
        except ModelError as exc:
            exc.args = (f"subclass {k}: {exc.args[0]}",)
            raise
        alpha = ols.coef[:Z].copy()
        sigma = ols.vcov[:Z, :Z].copy()
        dropped = tuple(data.columns[adj[j - Z]] for j in ols.dropped_columns if j >= Z)
        effects.append(SubclassEffect(k, int(rows.size), float(w[k - 1]), alpha, sigma, dropped))
        agg += w[k - 1] * alpha
        cov += w[k - 1] ** 2 * sigma
    meta = {"K": K, "adjustment": [data.columns[j] for j in adj]}
    table = _table_from_means("subclass_regression", agg, cov, meta, data.level_labels)
    return table, effects


# --------------------------------------------------------------------------- #
# Weighting
# --------------------------------------------------------------------------- #


def _iptw_means(y, t, r_obs, Z) -> np.ndarray:
    w = 1.0 / r_obs
    sw = np.bincount(t, weights=w, minlength=Z + 1)[1:]
    swy = np.bincount(t, weights=w * y, minlength=Z + 1)[1:]
    return swy / sw


def iptw_normalized_weights(data: Dataset, fit: OrdinalFit) -> np.ndarray:
    """Per-unit weights ``(1/r) / sum(1/r)`` within each observed level."""
    r = predict_category_probs(fit, data)[np.arange(data.n), data.t - 1]
    w = 1.0 / r
    return w / np.bincount(data.t, weights=w, minlength=data.Z + 1)[data.t]


def _observed_gps(fit: OrdinalFit, data: Dataset) -> np.ndarray:
    r = predict_category_probs(fit, data)[np.arange(data.n), data.t - 1]
    if np.any(r <= 0):
        raise ZeroProbability(f"{int(np.sum(r <= 0))} unit(s) have zero estimated probability of their level")
    return r


def estimate_iptw(
    data: Dataset,
    fit: OrdinalFit,
    bootstrap_B: int = 1000,
    seed: int | np.random.SeedSequence | None = 0,
) -> EffectTable:
    """Normalized inverse-probability weighting with bootstrap standard errors.

    Each bootstrap resample refits the ordered logit (warm-started from
    ``fit``). A resample that lacks a level or whose refit fails is redrawn
    from the same resample stream, at most ten times; resample streams are
    spawned per index from ``seed``, so results do not depend on order of
    execution.
    """
    y = _require_outcome(data)
    Z = data.Z
    r_obs = _observed_gps(fit, data)
    means = _iptw_means(y, data.t, r_obs, Z)
    weights = 1.0 / r_obs

    ses = np.zeros((Z, Z))
    retries = 0
    if bootstrap_B > 1:
        ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
        boot = np.empty((bootstrap_B, Z))
        cols = list(fit.columns) if len(fit.columns) == fit.p else None
        for b, child in enumerate(ss.spawn(bootstrap_B)):
            rng = np.random.default_rng(child)
            for attempt in range(MAX_RESAMPLE_RETRIES + 1):
                idx = rng.integers(0, data.n, data.n)
                sample = data.resample(idx)
                try:
                    refit = fit_ordered_logit(sample, cols, start=fit)
                    if not refit.converged:
                        raise NonConvergence("bootstrap refit did not converge")
                    boot[b] = _iptw_means(sample.y, sample.t, _observed_gps(refit, sample), Z)
                    break
                except (ModelError, EmptyLevel, ZeroProbability):
                    retries += 1
            else:
                raise NonConvergence(f"bootstrap resample {b} failed {MAX_RESAMPLE_RETRIES + 1} times")
        diffs = boot[:, :, None] - boot[:, None, :]
        ses = diffs.std(axis=0, ddof=1)
    else:
        ses = np.full((Z, Z), np.nan)
        np.fill_diagonal(ses, 0.0)

    est = means[:, None] - means[None, :]
    meta = {
        "bootstrap_B": int(bootstrap_B),
        "bootstrap_redraws": retries,
        "n_weights_gt_10": int(np.sum(weights > 10)),
        "max_weight": float(weights.max()),
        "level_means": means.tolist(),
    }
    return EffectTable("iptw", est, ses, meta, data.level_labels)


# --------------------------------------------------------------------------- #
# Comparators
# --------------------------------------------------------------------------- #


def estimate_naive(data: Dataset) -> EffectTable:
    y = _require_outcome(data)
    Z = data.Z
    means = np.zeros(Z)
    var_mean = np.zeros(Z)
    for z in range(1, Z + 1):
        g = y[data.t == z]
        if g.size == 0:
            raise EmptyLevel(z)
        means[z - 1] = g.mean()
        var_mean[z - 1] = g.var(ddof=1) / g.size if g.size > 1 else np.nan
    return _table_from_means("naive", means, np.diag(var_mean), {}, data.level_labels)


def estimate_standard_regression(
    data: Dataset, adjustment: Sequence[int | str] | None = None
) -> EffectTable:
    """One global OLS of ``Y`` on level indicators (no intercept) plus covariates."""
    y = _require_outcome(data)
    Z = data.Z
    for z, c in enumerate(data.level_counts(), start=1):
        if c == 0:
            raise EmptyLevel(z)
    adj = data.resolve(adjustment) if adjustment else []
    design = np.column_stack([_indicators(data.t, Z), data.x[:, adj]])
    ols = fit_ols(y, design, protected=range(Z))
    meta = {"adjustment": [data.columns[j] for j in adj]}
    return _table_from_means("standard_regression", ols.coef[:Z], ols.vcov[:Z, :Z], meta, data.level_labels)
