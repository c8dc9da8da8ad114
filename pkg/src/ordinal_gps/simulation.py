"""Monte Carlo comparison of effect estimators on full potential-outcome data.

A full dataset fixes every unit's potential outcome under every level, so the
true pairwise effects are known. Each replication re-assigns treatment from a
multinomial logit fitted on a random covariate subset, reveals the matching
potential outcome, and runs every estimator on the result.

Randomness is derived from ``SeedSequence(seed)`` with spawn key
``(m, attempt)`` per replication, so a study gives identical results for a
given seed whatever the worker count.
"""

from __future__ import annotations

import logging
import re
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence, Union

import numpy as np

from .data import Dataset
from .design import EliminationRule, SubclassPartition, subclassify_dataset, trim_common_support
from .errors import EmptyLevel, ModelError, NonConvergence, OrdinalGPSError
from .estimation import (
    EffectTable,
    Z95,
    estimate_iptw,
    estimate_naive,
    estimate_standard_regression,
    estimate_subclass_means,
    estimate_subclass_regression,
    pair_order,
)
from .models import OrdinalFit, fit_multinomial_logit, fit_ordered_logit, predict_category_probs

logger = logging.getLogger(__name__)

MAX_REDRAWS = 10


# --------------------------------------------------------------------------- #
# Full potential-outcome data
# --------------------------------------------------------------------------- #


@dataclass(frozen=True, eq=False)
class FullPotentialData:
    """Base data plus an n x Z matrix of potential outcomes; column ``t-1`` is ``Y(t)``."""

    base: Dataset
    po: np.ndarray
    true_pate: np.ndarray
    kind: str = "set1"
    pc1: np.ndarray | None = None

    @property
    def Z(self) -> int:
        return self.po.shape[1]

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "n": self.base.n,
            "true_pate": self.true_pate.tolist(),
            "true_vs_first": [float(self.true_pate[t, 0]) for t in range(1, self.Z)],
        }


def _pate_matrix(po: np.ndarray) -> np.ndarray:
    Z = po.shape[1]
    out = np.zeros((Z, Z))
    for t, s in pair_order(Z):
        d = float(np.mean(po[:, t - 1] - po[:, s - 1]))
        out[t - 1, s - 1], out[s - 1, t - 1] = d, -d
    return out


def impute_set1(data: Dataset) -> FullPotentialData:
    """Null build: every potential outcome equals the observed outcome."""
    if data.y is None:
        raise OrdinalGPSError("outcome is required")
    po = np.repeat(data.y[:, None], data.Z, axis=1)
    return FullPotentialData(data, po, np.zeros((data.Z, data.Z)), "set1")


def first_principal_component(X: np.ndarray, *, standardize: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Scores on, and loadings of, the leading eigenvector.

    With ``standardize`` the correlation matrix is decomposed, otherwise the
    covariance matrix. The eigenvector sign is fixed so that its
    largest-magnitude loading is positive.
    """
    Xc = X - X.mean(axis=0)
    if standardize:
        sd = X.std(axis=0)
        if np.any(sd == 0):
            raise ModelError("constant column in principal-component input")
        Xc = Xc / sd
    C = Xc.T @ Xc / X.shape[0]
    vals, vecs = np.linalg.eigh(C)
    v1 = vecs[:, np.argmax(vals)]
    if v1[np.argmax(np.abs(v1))] < 0:
        v1 = -v1
    return Xc @ v1, v1


def nearest_donors(score: np.ndarray, t: np.ndarray, ids: np.ndarray, level: int) -> np.ndarray:
    """Row index of the level-``level`` unit closest in ``score`` to each unit.

    Ties in distance go to the donor with the lowest unit id.
    """
    donors = np.flatnonzero(t == level)
    if donors.size == 0:
        raise EmptyLevel(level)
    order = donors[np.lexsort((ids[donors], score[donors]))]
    vals = score[order]
    uniq, first = np.unique(vals, return_index=True)
    # lowest id among donors sharing one score value
    best_row = np.array([order[a:b][np.argmin(ids[order[a:b]])]
                         for a, b in zip(first, np.append(first[1:], order.size))])
    j = np.searchsorted(uniq, score)
    left = np.clip(j - 1, 0, uniq.size - 1)
    right = np.clip(j, 0, uniq.size - 1)
    dl = np.abs(score - uniq[left])
    dr = np.abs(uniq[right] - score)
    cand_l, cand_r = best_row[left], best_row[right]
    pick = np.where(dl < dr, cand_l, np.where(dr < dl, cand_r,
                    np.where(ids[cand_l] <= ids[cand_r], cand_l, cand_r)))
    return pick


def impute_set2(
    data: Dataset,
    pca_columns: Sequence[int | str] | None = None,
    *,
    standardize: bool = True,
) -> FullPotentialData:
    """Non-null build from nearest neighbours on the first principal component.

    A unit keeps its observed outcome at its own level; for every other level
    it takes the outcome of the closest unit (by PC1 score) observed at that
    level.
    """
    if data.y is None:
        raise OrdinalGPSError("outcome is required")
    cols = data.resolve(pca_columns)
    pc1, _ = first_principal_component(data.x[:, cols], standardize=standardize)
    po = np.empty((data.n, data.Z))
    for z in range(1, data.Z + 1):
        donor = nearest_donors(pc1, data.t, data.ids, z)
        po[:, z - 1] = data.y[donor]
        own = data.t == z
        po[own, z - 1] = data.y[own]
    return FullPotentialData(data, po, _pate_matrix(po), "set2", pc1)


# --------------------------------------------------------------------------- #
# Replication
# --------------------------------------------------------------------------- #


def _seed_seq(seed) -> np.random.SeedSequence:
    return seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)


def _child(ss: np.random.SeedSequence, *key: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(ss.entropy, spawn_key=tuple(ss.spawn_key) + key)


def draw_levels(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One categorical draw per row of ``probs`` by inverse CDF."""
    cdf = np.cumsum(probs, axis=1)[:, :-1]
    u = rng.random(probs.shape[0])
    return 1 + np.sum(u[:, None] >= cdf, axis=1)


def simulate_replication(
    full: FullPotentialData,
    n_covariates: int = 15,
    seed=0,
    *,
    candidate_columns: Sequence[int | str] | None = None,
) -> Dataset:
    """One simulated observational dataset drawn from ``full``.

    Picks ``n_covariates`` covariates at random, fits a multinomial logit of
    the observed treatment on them, draws a new treatment per unit from the
    fitted probabilities and reveals that level's potential outcome. Failed
    fits or draws missing a level are redrawn with a derived seed, at most ten
    times.
    """
    base = full.base
    pool = base.resolve(candidate_columns)
    if n_covariates > len(pool):
        raise ValueError(f"n_covariates={n_covariates} exceeds the {len(pool)} candidate covariates")
    ss = _seed_seq(seed)
    for attempt in range(MAX_REDRAWS + 1):
        rng = np.random.default_rng(_child(ss, attempt))
        chosen = sorted(rng.choice(pool, size=n_covariates, replace=False).tolist())
        try:
            mfit = fit_multinomial_logit(base, chosen)
            if not mfit.converged:
                raise NonConvergence("multinomial logit did not converge")
        except ModelError as exc:
            logger.debug("replication redraw %d: %s", attempt, exc)
            continue
        t_sim = draw_levels(predict_category_probs(mfit, base), rng)
        if np.bincount(t_sim, minlength=base.Z + 1)[1:].min() == 0:
            continue
        y_sim = full.po[np.arange(base.n), t_sim - 1]
        return base.replace(t=t_sim, y=y_sim)
    raise NonConvergence(f"no usable replication after {MAX_REDRAWS + 1} attempts")


# --------------------------------------------------------------------------- #
# Study
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class StudyConfig:
    """Design settings shared by every replication of a study.

    ``gps_columns`` feed the ordered-logit balancing score, ``adjustment`` the
    regression-based estimators (``None`` means every covariate), and
    ``assignment_columns`` is the pool the random covariate subset of the
    re-assignment model is drawn from.
    """

    n_covariates: int = 15
    elimination: str = "E1"
    gps_columns: tuple | None = None
    adjustment: tuple | None = None
    assignment_columns: tuple | None = None
    continuous_columns: tuple | None = None
    bootstrap_B: int = 200

    def to_dict(self) -> dict:
        def lst(v):
            return None if v is None else list(v)

        return {
            "n_covariates": self.n_covariates,
            "elimination": self.elimination,
            "gps_columns": lst(self.gps_columns),
            "adjustment": lst(self.adjustment),
            "assignment_columns": lst(self.assignment_columns),
            "continuous_columns": lst(self.continuous_columns),
            "bootstrap_B": self.bootstrap_B,
        }


@dataclass
class ReplicationContext:
    """What an estimator sees in one replication."""

    data: Dataset
    fit: OrdinalFit
    full: FullPotentialData
    config: StudyConfig
    seed: np.random.SeedSequence
    _partitions: dict = field(default_factory=dict)

    def partition(self, K: int) -> SubclassPartition:
        if K not in self._partitions:
            self._partitions[K] = subclassify_dataset(self.data, self.fit, K)
        return self._partitions[K]

    @property
    def adjustment(self):
        return None if self.config.adjustment is None else list(self.config.adjustment)

    def adjustment_columns(self) -> list[int]:
        return self.data.resolve(self.adjustment)


Estimator = Callable[[ReplicationContext], EffectTable]
EstimatorSpec = Union[str, tuple]

_SUBCLASS = re.compile(r"^subclass(_regression)?_K(\d+)$")


def resolve_estimator(spec: EstimatorSpec) -> tuple[str, Estimator]:
    """Map an estimator name (or a ``(name, callable)`` pair) to a callable.

    Built-in names: ``subclass_K<k>``, ``subclass_regression_K<k>``,
    ``naive``, ``standard_regression``, ``iptw``.
    """
    if isinstance(spec, tuple):
        return spec[0], spec[1]
    m = _SUBCLASS.match(spec)
    if m:
        K = int(m.group(2))
        if m.group(1):
            return spec, lambda ctx: estimate_subclass_regression(
                ctx.data, ctx.partition(K), ctx.adjustment_columns()
            )[0]
        return spec, lambda ctx: estimate_subclass_means(ctx.data, ctx.partition(K))
    if spec == "naive":
        return spec, lambda ctx: estimate_naive(ctx.data)
    if spec == "standard_regression":
        return spec, lambda ctx: estimate_standard_regression(ctx.data, ctx.adjustment_columns())
    if spec == "iptw":
        return spec, lambda ctx: estimate_iptw(ctx.data, ctx.fit, ctx.config.bootstrap_B, ctx.seed)
    raise ValueError(f"unknown estimator {spec!r}")


DEFAULT_ESTIMATORS = (
    "subclass_K5",
    "subclass_regression_K5",
    "subclass_K15",
    "subclass_regression_K15",
    "naive",
    "standard_regression",
    "iptw",
)


@dataclass(frozen=True, eq=False)
class ReplicationResult:
    m: int
    estimates: dict[str, np.ndarray]
    ses: dict[str, np.ndarray]
    attempts: int
    failed: bool = False
    error: str = ""

    def bias(self, name: str, truth: np.ndarray) -> np.ndarray:
        return self.estimates[name] - truth

    def coverage(self, name: str, truth: np.ndarray) -> np.ndarray:
        return np.abs(self.estimates[name] - truth) <= Z95 * self.ses[name]

    def allcoverage(self, name: str, truth: np.ndarray) -> bool:
        cov = self.coverage(name, truth)
        return bool(all(cov[t - 1, s - 1] for t, s in pair_order(truth.shape[0])))


def run_replication(
    full: FullPotentialData,
    m: int,
    estimators: Sequence[EstimatorSpec],
    config: StudyConfig,
    seed,
) -> ReplicationResult:
    """Replication ``m``; any estimator failure redraws the whole replication."""
    named = [resolve_estimator(e) for e in estimators]
    root = _seed_seq(seed)
    last_error = ""
    for attempt in range(MAX_REDRAWS + 1):
        ss = _child(root, m, attempt)
        data_seed, est_seed = ss.spawn(2)
        try:
            data = simulate_replication(
                full, config.n_covariates, data_seed, candidate_columns=config.assignment_columns
            )
            gps_cols = None if config.gps_columns is None else list(config.gps_columns)
            fit = fit_ordered_logit(data, gps_cols)
            if not fit.converged:
                raise NonConvergence("balancing-score model did not converge")
            cont = None if config.continuous_columns is None else list(config.continuous_columns)
            data, support = trim_common_support(data, fit, config.elimination, cont)
            ctx = ReplicationContext(data, support.refit, full, config, est_seed)
            est, ses = {}, {}
            for name, fn in named:
                table = fn(ctx)
                if not (np.all(np.isfinite(table.estimates)) and np.all(np.isfinite(table.ses))):
                    raise ModelError(f"{name} produced non-finite output")
                est[name], ses[name] = table.estimates, table.ses
            return ReplicationResult(m, est, ses, attempt + 1)
        except OrdinalGPSError as exc:
            last_error = f"{type(exc).__name__}: {exc}"
            logger.debug("replication %d attempt %d failed: %s", m, attempt, last_error)
    return ReplicationResult(m, {}, {}, MAX_REDRAWS + 1, failed=True, error=last_error)


@dataclass(frozen=True, eq=False)
class EstimatorSummary:
    name: str
    mean_bias: np.ndarray
    sd_bias: np.ndarray
    coverage: np.ndarray
    average: float
    complete: float

    def to_dict(self) -> dict:
        Z = self.mean_bias.shape[0]
        return {
            "average": self.average,
            "complete": self.complete,
            "pairs": [
                {
                    "t": t,
                    "s": s,
                    "mean_bias": float(self.mean_bias[t - 1, s - 1]),
                    "sd_bias": float(self.sd_bias[t - 1, s - 1]),
                    "coverage": float(self.coverage[t - 1, s - 1]),
                }
                for t, s in pair_order(Z)
            ],
        }


@dataclass(frozen=True, eq=False)
class SimulationSummary:
    M: int
    completed: int
    failed: int
    redraws: int
    true_pate: np.ndarray
    estimators: dict[str, EstimatorSummary]
    kind: str = ""
    config: dict = field(default_factory=dict)

    def __getitem__(self, name: str) -> EstimatorSummary:
        return self.estimators[name]

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "M": self.M,
            "completed": self.completed,
            "failed": self.failed,
            "redraws": self.redraws,
            "config": self.config,
            "true_pate": self.true_pate.tolist(),
            "estimators": {k: v.to_dict() for k, v in self.estimators.items()},
        }


def summarize(
    results: Sequence[ReplicationResult], truth: np.ndarray, names: Sequence[str]
) -> dict[str, EstimatorSummary]:
    ok = [r for r in sorted(results, key=lambda r: r.m) if not r.failed]
    Z = truth.shape[0]
    pairs = pair_order(Z)
    rows = np.array([t - 1 for t, _ in pairs])
    cols = np.array([s - 1 for _, s in pairs])
    out = {}
    for name in names:
        if not ok:
            nan = np.full((Z, Z), np.nan)
            out[name] = EstimatorSummary(name, nan, nan, nan, float("nan"), float("nan"))
            continue
        bias = np.stack([r.bias(name, truth) for r in ok])
        cov = np.stack([r.coverage(name, truth) for r in ok]).astype(float)
        sd = bias.std(axis=0, ddof=1) if len(ok) > 1 else np.zeros((Z, Z))
        pair_cov = cov[:, rows, cols]
        out[name] = EstimatorSummary(
            name=name,
            mean_bias=bias.mean(axis=0),
            sd_bias=sd,
            coverage=cov.mean(axis=0),
            average=float(pair_cov.mean()),
            complete=float(np.mean(np.all(pair_cov == 1.0, axis=1))),
        )
    return out


def _replication_job(args):
    return run_replication(*args)


def run_study(
    full: FullPotentialData,
    estimators: Sequence[EstimatorSpec] = DEFAULT_ESTIMATORS,
    M: int = 500,
    config: StudyConfig | None = None,
    seed=0,
    *,
    workers: int = 1,
) -> SimulationSummary:
    """Run ``M`` replications and summarise bias and interval coverage.

    Replications that fail after every redraw are excluded from the
    summaries and counted in ``failed``. ``workers > 1`` distributes
    replications over processes (built-in estimator names only).
    """
    if M < 1:
        raise ValueError("M must be at least 1")
    config = config or StudyConfig()
    names = [resolve_estimator(e)[0] for e in estimators]
    jobs = [(full, m, list(estimators), config, seed) for m in range(M)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_replication_job, jobs, chunksize=max(1, M // (4 * workers))))
    else:
        results = [_replication_job(j) for j in jobs]
    failed = sum(r.failed for r in results)
    if failed:
        logger.warning("%d of %d replications failed and were excluded", failed, M)
    redraws = sum(r.attempts - 1 for r in results if not r.failed)
    return SimulationSummary(
        M=M,
        completed=M - failed,
        failed=failed,
        redraws=redraws,
        true_pate=full.true_pate,
        estimators=summarize(results, full.true_pate, names),
        kind=full.kind,
        config=config.to_dict(),
    )
