"""Synthetic data generators used by the test suite, the demo config and the simulation harness."""

from __future__ import annotations

import numpy as np
from scipy.special import expit, softmax

from .data import Dataset


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def sample_ordered_logit(lp: np.ndarray, theta: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Draw levels 1..Z from ``P(T <= t) = expit(theta_t - lp)`` by inverse CDF."""
    cdf = expit(np.asarray(theta)[None, :] - lp[:, None])
    u = rng.random(lp.size)
    return 1 + np.sum(u[:, None] >= cdf, axis=1)


def ordered_logit_data(
    n: int,
    beta: np.ndarray,
    theta: np.ndarray,
    seed=0,
    *,
    outcome: np.ndarray | None = None,
) -> Dataset:
    """Standard-normal covariates with treatment from a proportional-odds model."""
    rng = _rng(seed)
    beta = np.asarray(beta, dtype=float)
    x = rng.standard_normal((n, beta.size))
    t = sample_ordered_logit(x @ beta, theta, rng)
    return Dataset(ids=np.arange(n), x=x, t=t, y=outcome, n_levels=len(theta) + 1)


def linear_outcome_data(
    n: int,
    alpha: np.ndarray,
    gamma: np.ndarray,
    beta: np.ndarray,
    theta: np.ndarray,
    seed=0,
    *,
    noise: float = 1.0,
) -> Dataset:
    """Confounded ordinal assignment with ``y = alpha_T + gamma'x + noise``.

    Assignment follows a proportional-odds model in ``x`` with slopes
    ``beta``; with ``gamma`` aligned to ``beta`` the naive contrast is biased.
    """
    rng = _rng(seed)
    alpha = np.asarray(alpha, dtype=float)
    gamma = np.asarray(gamma, dtype=float)
    x = rng.standard_normal((n, gamma.size))
    t = sample_ordered_logit(x @ np.asarray(beta, dtype=float), theta, rng)
    y = alpha[t - 1] + x @ gamma + noise * rng.standard_normal(n)
    return Dataset(ids=np.arange(n), x=x, t=t, y=y, n_levels=alpha.size)


def randomized_data(
    n: int,
    p: int,
    Z: int,
    seed=0,
    *,
    effect_step: float = 0.0,
    probs: np.ndarray | None = None,
) -> Dataset:
    """Treatment independent of covariates; adjacent levels differ by ``effect_step``."""
    rng = _rng(seed)
    x = rng.standard_normal((n, p))
    probs = np.full(Z, 1.0 / Z) if probs is None else np.asarray(probs, dtype=float)
    t = 1 + rng.choice(Z, size=n, p=probs)
    y = effect_step * (t - 1) + x.sum(axis=1) * 0.5 + rng.standard_normal(n)
    return Dataset(ids=np.arange(n), x=x, t=t, y=y, n_levels=Z)


BASE_COLUMNS = (
    "age", "income", "prior_bmi", "activity", "calories", "sleep", "waist", "stress",
    "female", "smoker", "married", "insured",
    "education", "health_rating", "diet_score", "alcohol",
)
BASE_KINDS = ("numeric",) * 8 + ("binary",) * 4 + ("ordinal",) * 4


def base_study_data(n: int = 1000, seed=0, *, Z: int = 5, confounding: float = 0.15) -> Dataset:
    """Observational base data with mixed covariates and non-proportional assignment.

    Sixteen covariates (eight continuous, four binary, four ordinal). The
    observed treatment follows a multinomial logit with level-specific slopes,
    so a proportional-odds balancing score is misspecified for it. The
    outcome depends on covariates nonlinearly and on treatment modestly.
    """
    rng = _rng(seed)
    L = rng.standard_normal((n, 2))
    cont = 0.6 * L[:, [0, 0, 1, 1, 0, 1, 0, 1]] + 0.8 * rng.standard_normal((n, 8))
    binary = (rng.random((n, 4)) < expit(0.8 * L[:, [0, 1, 0, 1]])).astype(float)
    ordinal = np.clip(np.round(1.5 + 0.7 * L[:, [1, 0, 1, 0]] + rng.standard_normal((n, 4))), 0, 3)
    x = np.column_stack([cont, binary, ordinal])

    levels = np.arange(Z)
    slope = np.array([0.9, -0.5, 0.7, 0.3, -0.4, 0.2, 0.5, -0.3, 0.4, -0.4, 0.3, 0.2, 0.3, -0.2, 0.3, 0.2])
    logits = np.outer(x @ slope, levels - levels.mean()) * confounding
    # pulls toward the middle levels: not representable by a proportional-odds model
    logits -= np.outer(cont[:, 0] + 0.7 * cont[:, 2], np.abs(levels - (Z - 1) / 2) - 1) * 1.5 * confounding
    logits += np.log(np.linspace(1.2, 0.8, Z))[None, :]
    p = softmax(logits, axis=1)
    u = rng.random(n)
    t = 1 + np.sum(u[:, None] >= np.cumsum(p, axis=1)[:, :-1], axis=1)

    y = (
        27.0
        + 2.0 * cont[:, 2]
        + 1.2 * cont[:, 0]
        + 0.8 * cont[:, 0] ** 2
        - 0.9 * cont[:, 3]
        + 0.7 * cont[:, 6] * binary[:, 0]
        + 0.6 * binary[:, 1]
        - 0.5 * ordinal[:, 0]
        + 0.4 * ordinal[:, 2]
        + 0.3 * (t - 1) * (1 + 0.5 * cont[:, 2])
        + 1.5 * rng.standard_normal(n)
    )
    labels = tuple(f"level{z}" for z in range(1, Z + 1))
    return Dataset(
        ids=np.arange(n),
        x=x,
        t=t,
        y=y,
        n_levels=Z,
        columns=BASE_COLUMNS,
        kinds=BASE_KINDS,
        level_labels=labels,
    )
