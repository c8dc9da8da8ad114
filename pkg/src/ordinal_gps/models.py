"""Maximum-likelihood treatment models and least squares.

Three engines live here:

* the proportional-odds (ordered logit) model
  ``log(P(T <= t) / P(T > t)) = theta_t - beta'x``, so a larger linear
  predictor ``beta'x`` means a stochastically larger treatment level;
* the baseline-category multinomial logit
  ``log(P(T = t) / P(T = Z)) = c_t + gamma_t'x``;
* ordinary least squares with in-order rank filtering.

Both likelihoods are maximised by damped Newton-Raphson with step halving on
standardized covariates; coefficients are reported on the original scale.
Thresholds are optimised as ``theta_1`` plus log-increments so they stay
strictly increasing.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy import linalg
from scipy.special import expit, logit

from .data import Dataset
from .errors import InsufficientRows, RankDeficientDesign, SeparationDetected

logger = logging.getLogger(__name__)

SEPARATION_LIMIT = 50.0
MAX_HALVINGS = 30
RANK_TOL = 1e-10
EPS = np.finfo(float).eps


# --------------------------------------------------------------------------- #
# Fitted model containers
# --------------------------------------------------------------------------- #


@dataclass(frozen=True, eq=False)
class OrdinalFit:
    """Fitted proportional-odds model.

    ``vcov`` is the inverse observed information, ordered ``(beta, theta)``.
    ``columns`` are the covariate indices of the dataset the model was fit on.
    """

    theta: np.ndarray
    beta: np.ndarray
    loglik: float
    grad_norm: float
    iterations: int
    converged: bool
    vcov: np.ndarray
    columns: tuple[int, ...] = ()
    column_names: tuple[str, ...] = ()
    n: int = 0

    @property
    def Z(self) -> int:
        return self.theta.size + 1

    @property
    def p(self) -> int:
        return self.beta.size

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.diag(self.vcov))

    @property
    def params(self) -> np.ndarray:
        """Parameters in the optimisation parameterization ``(beta, theta_1, log increments)``."""
        return np.concatenate([self.beta, self.theta[:1], np.log(np.diff(self.theta))])


@dataclass(frozen=True, eq=False)
class MultinomialFit:
    """Baseline-category logit; level Z is the reference.

    ``gamma`` is the (Z-1) x p slope matrix and ``intercept`` the (Z-1) level
    intercepts. ``vcov`` is ordered level by level as ``(intercept, slopes)``.
    """

    intercept: np.ndarray
    gamma: np.ndarray
    loglik: float
    grad_norm: float
    iterations: int
    converged: bool
    vcov: np.ndarray
    columns: tuple[int, ...] = ()
    column_names: tuple[str, ...] = ()
    n: int = 0

    @property
    def Z(self) -> int:
        return self.intercept.size + 1

    @property
    def p(self) -> int:
        return self.gamma.shape[1]

    @property
    def coef(self) -> np.ndarray:
        return np.column_stack([self.intercept, self.gamma])

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.diag(self.vcov)).reshape(self.Z - 1, self.p + 1)


@dataclass(frozen=True, eq=False)
class OlsFit:
    """Least-squares fit. Dropped (aliased) columns carry NaN in ``coef`` and ``vcov``."""

    coef: np.ndarray
    vcov: np.ndarray
    sigma2: float
    dof: int
    dropped_columns: tuple[int, ...]
    rss: float
    residuals: np.ndarray

    @property
    def retained(self) -> np.ndarray:
        return np.flatnonzero(~np.isnan(self.coef))

    @property
    def rank(self) -> int:
        return int(self.retained.size)


# --------------------------------------------------------------------------- #
# Shared numerics
# --------------------------------------------------------------------------- #


def _solve_pd(neg_hess: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """Solve ``neg_hess @ step = grad`` with diagonal equilibration.

    Falls back to a growing ridge when the matrix is not numerically positive
    definite (flat directions at the start of a separated fit, for instance).
    """
    d = np.sqrt(np.clip(np.diag(neg_hess), 1e-300, None))
    scaled = neg_hess / d[:, None] / d[None, :]
    rhs = grad / d
    ridge = 0.0
    for _ in range(20):
        try:
            c = linalg.cho_factor(scaled + ridge * np.eye(len(d)), check_finite=False)
            return linalg.cho_solve(c, rhs, check_finite=False) / d
        except linalg.LinAlgError:
            ridge = 1e-10 if ridge == 0.0 else ridge * 100
    return rhs / d


def _newton(
    fun: Callable[[np.ndarray], tuple[float, np.ndarray, np.ndarray]],
    start: np.ndarray,
    *,
    tol: float,
    max_iter: int,
    guard: Callable[[np.ndarray], None] | None = None,
) -> tuple[np.ndarray, float, np.ndarray, int]:
    """Maximise ``fun`` (returning loglik, gradient, negative Hessian).

    A candidate is accepted only if it does not lower the log-likelihood
    beyond rounding error, so accepted iterates are monotone. Returns the
    last accepted point, its loglik and gradient, and the number of Newton
    iterations taken.
    """
    phi = np.asarray(start, dtype=float).copy()
    ll, grad, neg_hess = fun(phi)
    if not np.isfinite(ll):
        raise ValueError("log-likelihood is not finite at the starting values")
    it = 0
    while it < max_iter and np.max(np.abs(grad), initial=0.0) >= tol:
        it += 1
        step = _solve_pd(neg_hess, grad)
        scale = 1.0
        for _ in range(MAX_HALVINGS + 1):
            cand = phi + scale * step
            with np.errstate(all="ignore"):
                ll_c, g_c, h_c = fun(cand)
            if np.isfinite(ll_c) and np.all(np.isfinite(g_c)):
                if ll_c >= ll:
                    break
                # near the optimum the true gain is below the rounding of ll;
                # fall back to requiring a smaller gradient
                if ll - ll_c <= 64 * EPS * abs(ll) and np.max(np.abs(g_c)) < np.max(np.abs(grad)):
                    break
            scale *= 0.5
        else:
            logger.debug("step halving exhausted after %d iterations", it)
            break
        phi, ll, grad, neg_hess = cand, ll_c, g_c, h_c
        if guard is not None:
            guard(phi)
    return phi, ll, grad, it


def _standardize(X: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    mu = X.mean(axis=0)
    sd = X.std(axis=0)
    if np.any(sd == 0):
        bad = np.flatnonzero(sd == 0).tolist()
        raise RankDeficientDesign(f"constant covariate column(s) {bad}")
    Xs = (X - mu) / sd
    if np.linalg.matrix_rank(Xs, tol=RANK_TOL * np.sqrt(X.shape[0]) * max(1.0, np.abs(Xs).max())) < X.shape[1]:
        raise RankDeficientDesign("covariate columns are linearly dependent")
    return Xs, mu, sd


def _design_from(data: Dataset, columns) -> tuple[np.ndarray, list[int]]:
    idx = data.resolve(columns)
    return data.x[:, idx], idx


# --------------------------------------------------------------------------- #
# Ordered logit
# --------------------------------------------------------------------------- #


def _ordinal_derivs(beta, theta, X, t, Z, *, hessian=True):
    """Log-likelihood, gradient and Hessian in the natural ``(beta, theta)`` parameterization."""
    n, p = X.shape
    eta = X @ beta
    upper = np.append(theta, np.inf)[t - 1]
    lower = np.insert(theta, 0, -np.inf)[t - 1]
    a = upper - eta
    b = lower - eta
    with np.errstate(invalid="ignore"):
        prob = np.where(b > 0, expit(-b) - expit(-a), expit(a) - expit(b))
    with np.errstate(divide="ignore"):
        ll = float(np.sum(np.log(prob)))
    if not np.isfinite(ll):
        return ll, None, None

    Fa, Fb = expit(a), expit(b)
    fa = Fa * expit(-a)
    fb = Fb * expit(-b)
    la = fa / prob
    lb = -fb / prob

    # d a / d(beta, theta) and d b / d(beta, theta)
    q = p + Z - 1
    A = np.zeros((n, q))
    B = np.zeros((n, q))
    A[:, :p] = -X
    B[:, :p] = -X
    rows = np.arange(n)
    up = t < Z
    A[rows[up], p + t[up] - 1] = 1.0
    lo = t > 1
    B[rows[lo], p + t[lo] - 2] = 1.0

    grad = A.T @ la + B.T @ lb
    if not hessian:
        return ll, grad, None
    laa = fa * (1 - 2 * Fa) / prob - la**2
    lbb = -fb * (1 - 2 * Fb) / prob - lb**2
    lab = -la * lb
    cross = A.T @ (lab[:, None] * B)
    hess = A.T @ (laa[:, None] * A) + cross + cross.T + B.T @ (lbb[:, None] * B)
    return ll, grad, hess


def _increments_to_theta(phi_theta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Map ``(theta_1, log increments)`` to thresholds and the Jacobian d theta / d phi."""
    m = phi_theta.size
    inc = np.exp(phi_theta[1:])
    theta = phi_theta[0] + np.concatenate([[0.0], np.cumsum(inc)])
    jac = np.zeros((m, m))
    jac[:, 0] = 1.0
    for j in range(1, m):
        jac[j:, j] = inc[j - 1]
    return theta, jac


def _ordinal_objective(X, t, Z):
    p = X.shape[1]

    def fun(phi):
        beta = phi[:p]
        theta, jt = _increments_to_theta(phi[p:])
        ll, g, h = _ordinal_derivs(beta, theta, X, t, Z)
        if g is None:
            return ll, None, None
        jac = linalg.block_diag(np.eye(p), jt)
        # Newton matrix omits the O(gradient) curvature term of the reparameterization:
        # it keeps the matrix positive definite and vanishes at the optimum.
        return ll, jac.T @ g, jac.T @ (-h) @ jac

    return fun


def ordered_logit_negloglik_grad(
    params: np.ndarray, data: Dataset, columns: Sequence[int | str] | None = None
) -> tuple[float, np.ndarray]:
    """Negative log-likelihood and its exact gradient.

    ``params`` is ``(beta, theta_1, log(theta_2 - theta_1), ...)`` of length
    ``p + Z - 1``.
    """
    X, _ = _design_from(data, columns)
    p, Z = X.shape[1], data.Z
    params = np.asarray(params, dtype=float)
    if params.shape != (p + Z - 1,):
        raise ValueError(f"expected {p + Z - 1} parameters, got {params.shape}")
    theta, jt = _increments_to_theta(params[p:])
    ll, g, _ = _ordinal_derivs(params[:p], theta, X, data.t, Z, hessian=False)
    if g is None:
        return np.inf, np.full(params.shape, np.nan)
    grad = np.concatenate([g[:p], jt.T @ g[p:]])
    return -ll, -grad


def fit_ordered_logit(
    data: Dataset,
    columns: Sequence[int | str] | None = None,
    *,
    start: OrdinalFit | None = None,
    tol: float = 1e-8,
    max_iter: int = 100,
) -> OrdinalFit:
    """Maximum-likelihood proportional-odds fit of ``data.t`` on the selected covariates.

    ``tol`` applies to the gradient max-norm of the standardized problem. A
    fit that does not reach it within ``max_iter`` iterations is returned with
    ``converged=False``; callers decide whether that is fatal.
    ``start`` warm-starts from an earlier fit (bootstrap refits use this).
    """
    X, idx = _design_from(data, columns)
    n, p = X.shape
    Z = data.Z
    t = data.t
    if n < p + Z:
        raise RankDeficientDesign(f"n={n} < p+Z={p + Z}: model is not identified")
    data.require_all_levels()
    Xs, mu, sd = _standardize(X)

    if start is not None:
        beta0 = start.beta * sd
        theta0 = start.theta - mu @ start.beta
        if np.any(np.diff(theta0) <= 0):
            start = None
    if start is None:
        cum = np.cumsum(data.level_counts())[:-1] / n
        theta0 = logit(cum)
        beta0 = np.zeros(p)
    phi0 = np.concatenate([beta0, theta0[:1], np.log(np.diff(theta0))])

    def guard(phi):
        if np.any(np.abs(phi[:p]) > SEPARATION_LIMIT):
            j = int(np.argmax(np.abs(phi[:p])))
            name = data.columns[idx[j]]
            raise SeparationDetected(
                f"standardized coefficient of {name!r} exceeds {SEPARATION_LIMIT:g}: "
                "treatment is (quasi-)separated by the covariates"
            )

    phi, ll, grad, iters = _newton(
        _ordinal_objective(Xs, t, Z), phi0, tol=tol, max_iter=max_iter, guard=guard
    )
    # convergence is judged on the standardized problem, which is scale free
    grad_norm = float(np.max(np.abs(grad)))
    converged = grad_norm < tol
    if not converged:
        logger.warning("ordered logit did not converge (max|grad|=%.3g after %d iterations)", grad_norm, iters)

    beta = phi[:p] / sd
    theta_std, _ = _increments_to_theta(phi[p:])
    theta = theta_std + mu @ beta

    _, _, hess = _ordinal_derivs(beta, theta, X, t, Z)
    try:
        vcov = linalg.inv(-hess)
    except linalg.LinAlgError:
        vcov = np.full(hess.shape, np.nan)
    vcov = (vcov + vcov.T) / 2
    return OrdinalFit(
        theta=theta,
        beta=beta,
        loglik=float(ll),
        grad_norm=grad_norm,
        iterations=iters,
        converged=bool(converged),
        vcov=vcov,
        columns=tuple(idx),
        column_names=tuple(data.columns[j] for j in idx),
        n=n,
    )


# --------------------------------------------------------------------------- #
# Multinomial logit
# --------------------------------------------------------------------------- #


def _softmax_ref(U: np.ndarray) -> np.ndarray:
    """Probabilities for logits of levels 1..Z-1 against a reference logit of 0."""
    full = np.column_stack([U, np.zeros(U.shape[0])])
    full -= full.max(axis=1, keepdims=True)
    e = np.exp(full)
    return e / e.sum(axis=1, keepdims=True)


def _multinomial_derivs(G, Xt, t, Z, *, hessian=True):
    """Derivatives w.r.t. ``G`` ((Z-1) x (p+1)); ``Xt`` already carries the intercept column."""
    n = Xt.shape[0]
    P = _softmax_ref(Xt @ G.T)
    with np.errstate(divide="ignore"):
        ll = float(np.sum(np.log(P[np.arange(n), t - 1])))
    if not np.isfinite(ll):
        return ll, None, None
    Y = np.zeros((n, Z))
    Y[np.arange(n), t - 1] = 1.0
    grad = ((Y - P)[:, : Z - 1]).T @ Xt
    if not hessian:
        return ll, grad.ravel(), None
    Pm = P[:, : Z - 1]
    W = Pm[:, :, None] * (np.eye(Z - 1)[None] - Pm[:, None, :])
    q = Xt.shape[1]
    H = np.einsum("itu,ij,ik->tjuk", W, Xt, Xt).reshape((Z - 1) * q, (Z - 1) * q)
    return ll, grad.ravel(), H


def _multinomial_objective(Xt, t, Z):
    q = Xt.shape[1]

    def fun(phi):
        ll, g, h = _multinomial_derivs(phi.reshape(Z - 1, q), Xt, t, Z)
        return ll, g, h

    return fun


def multinomial_negloglik_grad(
    params: np.ndarray, data: Dataset, columns: Sequence[int | str] | None = None
) -> tuple[float, np.ndarray]:
    """Negative log-likelihood and gradient; ``params`` is the flattened ``(intercept, gamma)`` matrix."""
    X, _ = _design_from(data, columns)
    Z = data.Z
    Xt = np.column_stack([np.ones(X.shape[0]), X])
    q = Xt.shape[1]
    params = np.asarray(params, dtype=float)
    if params.shape != ((Z - 1) * q,):
        raise ValueError(f"expected {(Z - 1) * q} parameters, got {params.shape}")
    ll, g, _ = _multinomial_derivs(params.reshape(Z - 1, q), Xt, data.t, Z, hessian=False)
    return -ll, -g


def fit_multinomial_logit(
    data: Dataset,
    columns: Sequence[int | str] | None = None,
    *,
    tol: float = 1e-6,
    max_iter: int = 200,
) -> MultinomialFit:
    X, idx = _design_from(data, columns)
    n, p = X.shape
    Z = data.Z
    t = data.t
    if n < (p + 1) + Z - 1:
        raise RankDeficientDesign(f"n={n} too small for {p} covariates and {Z} levels")
    data.require_all_levels()
    if p:
        Xs, mu, sd = _standardize(X)
    else:
        Xs, mu, sd = X, np.zeros(0), np.ones(0)
    q = p + 1
    counts = data.level_counts()
    G0 = np.zeros((Z - 1, q))
    G0[:, 0] = np.log(counts[:-1] / counts[-1])

    def guard(phi):
        slopes = phi.reshape(Z - 1, q)[:, 1:]
        if slopes.size and np.max(np.abs(slopes)) > SEPARATION_LIMIT:
            raise SeparationDetected(
                f"standardized multinomial coefficient exceeds {SEPARATION_LIMIT:g}"
            )

    Xst = np.column_stack([np.ones(n), Xs])
    phi, ll, grad, iters = _newton(
        _multinomial_objective(Xst, t, Z), G0.ravel(), tol=tol, max_iter=max_iter, guard=guard
    )
    grad_norm = float(np.max(np.abs(grad)))
    converged = grad_norm < tol
    if not converged:
        logger.warning("multinomial logit did not converge (max|grad|=%.3g)", grad_norm)
    G = phi.reshape(Z - 1, q)
    slopes = G[:, 1:] / sd
    intercept = G[:, 0] - slopes @ mu
    G_orig = np.column_stack([intercept, slopes])

    Xt = np.column_stack([np.ones(n), X])
    obj = _multinomial_objective(Xt, t, Z)
    _, _, neg_h = obj(G_orig.ravel())
    try:
        vcov = linalg.inv(neg_h)
    except linalg.LinAlgError:
        vcov = np.full(neg_h.shape, np.nan)
    vcov = (vcov + vcov.T) / 2
    return MultinomialFit(
        intercept=G_orig[:, 0].copy(),
        gamma=G_orig[:, 1:].copy(),
        loglik=float(ll),
        grad_norm=grad_norm,
        iterations=iters,
        converged=bool(converged),
        vcov=vcov,
        columns=tuple(idx),
        column_names=tuple(data.columns[j] for j in idx),
        n=n,
    )


# --------------------------------------------------------------------------- #
# Prediction
# --------------------------------------------------------------------------- #


def _covariates_for(fit, x) -> np.ndarray:
    if isinstance(x, Dataset):
        return x.x[:, list(fit.columns)] if len(fit.columns) == fit.p else x.x
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != fit.p:
        raise ValueError(f"covariate arity {x.shape[-1]} does not match model arity {fit.p}")
    return x


def linear_predictor(fit: OrdinalFit, x) -> np.ndarray | float:
    """Balancing score ``beta'x`` for one unit (vector) or many (matrix / Dataset)."""
    X = _covariates_for(fit, x)
    out = X @ fit.beta
    return float(out) if np.ndim(out) == 0 else out


def predict_category_probs(fit: OrdinalFit | MultinomialFit, x) -> np.ndarray:
    """Per-level assignment probabilities ``r(t, x)``; rows sum to one."""
    X = _covariates_for(fit, x)
    single = X.ndim == 1
    X = np.atleast_2d(X)
    if isinstance(fit, OrdinalFit):
        eta = X @ fit.beta
        cdf = expit(fit.theta[None, :] - eta[:, None])
        bounds = np.column_stack([np.zeros(len(eta)), cdf, np.ones(len(eta))])
        # difference of upper tails where the CDF is close to one keeps precision
        tails = expit(eta[:, None] - fit.theta[None, :])
        upper_t = np.column_stack([np.ones(len(eta)), tails, np.zeros(len(eta))])
        diff_cdf = np.diff(bounds, axis=1)
        diff_tail = -np.diff(upper_t, axis=1)
        use_tail = bounds[:, :-1] > 0.5
        P = np.where(use_tail, diff_tail, diff_cdf)
        P /= P.sum(axis=1, keepdims=True)
    else:
        P = _softmax_ref(fit.intercept[None, :] + X @ fit.gamma.T)
    return P[0] if single else P


# --------------------------------------------------------------------------- #
# Least squares
# --------------------------------------------------------------------------- #


def fit_ols(
    y: np.ndarray,
    design: np.ndarray,
    *,
    protected: Sequence[int] = (),
    tol: float = RANK_TOL,
) -> OlsFit:
    """Least squares via QR with in-order rank filtering.

    Columns are scanned left to right; a column whose QR pivot is below
    ``tol`` times its own norm is linearly dependent on the columns before it
    and is dropped. Dropping any column listed in ``protected`` raises
    :class:`RankDeficientDesign`, since those coefficients carry the estimand.
    """
    y = np.asarray(y, dtype=float)
    X = np.asarray(design, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    n, k = X.shape
    norms = np.linalg.norm(X, axis=0)
    keep = [j for j in range(k) if norms[j] > 0]
    while True:
        if not keep:
            break
        R = linalg.qr(X[:, keep], mode="r", check_finite=False)[0]
        diag = np.abs(np.diag(R[: len(keep), : len(keep)]))
        bad = np.flatnonzero(diag <= tol * norms[keep])
        if bad.size == 0:
            break
        keep.pop(int(bad[0]))
    dropped = tuple(j for j in range(k) if j not in keep)
    lost = [j for j in dropped if j in set(protected)]
    if lost:
        raise RankDeficientDesign(f"estimand column(s) {lost} are aliased or empty")
    r = len(keep)
    if n <= r:
        raise InsufficientRows(f"{n} rows for {r} retained columns")

    Q, R = linalg.qr(X[:, keep], mode="economic", check_finite=False)
    beta_r = linalg.solve_triangular(R, Q.T @ y, check_finite=False)
    resid = y - X[:, keep] @ beta_r
    rss = float(resid @ resid)
    dof = n - r
    sigma2 = rss / dof
    Rinv = linalg.solve_triangular(R, np.eye(r), check_finite=False)
    vcov_r = sigma2 * (Rinv @ Rinv.T)

    coef = np.full(k, np.nan)
    coef[keep] = beta_r
    vcov = np.full((k, k), np.nan)
    vcov[np.ix_(keep, keep)] = (vcov_r + vcov_r.T) / 2
    return OlsFit(
        coef=coef,
        vcov=vcov,
        sigma2=sigma2,
        dof=dof,
        dropped_columns=dropped,
        rss=rss,
        residuals=resid,
    )
