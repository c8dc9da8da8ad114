import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.special import expit, logit

from ordinal_gps import (
    Dataset,
    InsufficientRows,
    MultinomialFit,
    OrdinalFit,
    RankDeficientDesign,
    SeparationDetected,
    fit_multinomial_logit,
    fit_ols,
    fit_ordered_logit,
    linear_predictor,
    multinomial_negloglik_grad,
    ordered_logit_negloglik_grad,
    predict_category_probs,
)
from ordinal_gps.synthetic import ordered_logit_data


def make_fit(beta, theta):
    beta = np.asarray(beta, float)
    theta = np.asarray(theta, float)
    q = beta.size + theta.size
    return OrdinalFit(theta, beta, 0.0, 0.0, 0, True, np.eye(q))


def central_difference(f, x, h=1e-6):
    g = np.zeros_like(x)
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = h
        g[j] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def rel_error(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1.0)


# --------------------------------------------------------------------------- #
# ordered logit
# --------------------------------------------------------------------------- #


def test_covariate_independent_assignment_gives_zero_slope(rng):
    n = 4000
    x = rng.standard_normal((n, 1))
    t = 1 + rng.choice(3, size=n, p=[0.25, 0.25, 0.5])
    fit = fit_ordered_logit(Dataset(np.arange(n), x, t, None, 3))
    assert fit.converged
    assert abs(fit.beta[0]) < 3 * fit.se[0]
    cum = np.cumsum(np.bincount(t)[1:])[:-1] / n
    # with no covariate signal the thresholds sit at the logits of the cumulative shares
    assert np.allclose(fit.theta, logit(cum), atol=3 * fit.se[1:].max())
    assert np.allclose(fit.theta, logit([0.25, 0.5]), atol=0.15)


def test_parameter_recovery():
    beta = np.array([1.0, -0.5, 0.25])
    data = ordered_logit_data(5000, beta, [-2, -1, 0, 1], seed=7)
    fit = fit_ordered_logit(data)
    assert fit.converged
    assert np.all(np.abs(fit.beta - beta) < 0.1)
    assert np.all(np.abs(fit.theta - [-2, -1, 0, 1]) < 0.15)


def test_underdetermined_fit_is_rejected(rng):
    n, p, Z = 6, 3, 4
    data = Dataset(np.arange(n), rng.standard_normal((n, p)), np.array([1, 2, 3, 4, 1, 2]), None, Z)
    with pytest.raises(RankDeficientDesign):
        fit_ordered_logit(data)


def test_collinear_covariates_are_rejected(rng):
    x = rng.standard_normal((200, 1))
    data = Dataset(np.arange(200), np.hstack([x, 2 * x]), 1 + rng.integers(0, 3, 200), None, 3)
    with pytest.raises(RankDeficientDesign):
        fit_ordered_logit(data)


def test_separation_is_detected():
    x = np.linspace(-3, 3, 300)[:, None]
    t = np.where(x[:, 0] < -1, 1, np.where(x[:, 0] < 1, 2, 3))
    with pytest.raises(SeparationDetected):
        fit_ordered_logit(Dataset(np.arange(300), x, t, None, 3))


def test_ordered_gradient_matches_finite_differences(rng):
    data = ordered_logit_data(300, [0.8, -0.4, 0.3], [-1.5, 0, 1], seed=3)
    worst = 0.0
    for _ in range(20):
        params = np.concatenate([rng.normal(0, 0.7, 3), [rng.normal(-1.5, 0.3)], rng.normal(0, 0.4, 2)])
        _, g = ordered_logit_negloglik_grad(params, data)
        fd = central_difference(lambda v: ordered_logit_negloglik_grad(v, data)[0], params)
        worst = max(worst, rel_error(g, fd))
    assert worst < 1e-6


def test_duplicated_rows_double_the_objective(rng):
    data = ordered_logit_data(150, [0.5, -1.0], [-1, 0.5], seed=11)
    doubled = Dataset(
        np.arange(300), np.vstack([data.x, data.x]), np.concatenate([data.t, data.t]), None, 3
    )
    params = np.array([0.3, -0.2, -0.8, np.log(1.2)])
    f1, g1 = ordered_logit_negloglik_grad(params, data)
    f2, g2 = ordered_logit_negloglik_grad(params, doubled)
    assert f2 == pytest.approx(2 * f1, rel=1e-13)
    assert np.allclose(g2, 2 * g1, rtol=1e-12, atol=1e-12)


def test_gradient_vanishes_at_mle():
    data = ordered_logit_data(2000, [0.6, -0.3], [-1, 0, 1.2], seed=5)
    fit = fit_ordered_logit(data)
    _, g = ordered_logit_negloglik_grad(fit.params, data)
    assert np.max(np.abs(g)) < 1e-8


def test_loglik_never_decreases_across_iterations():
    data = ordered_logit_data(800, [1.5, -1.0, 0.5], [-2, 0, 2], seed=2)
    lls = [fit_ordered_logit(data, max_iter=k).loglik for k in range(0, 8)]
    for a, b in zip(lls, lls[1:]):
        assert b >= a - 1e-12 * abs(a)


def test_matches_statsmodels_ordered_model():
    from statsmodels.miscmodels.ordinal_model import OrderedModel

    data = ordered_logit_data(1500, [0.7, -0.4], [-1, 0.3, 1.5], seed=9)
    fit = fit_ordered_logit(data)
    res = OrderedModel(data.t, data.x, distr="logit").fit(method="bfgs", disp=False, gtol=1e-10, maxiter=2000)
    assert np.allclose(fit.beta, res.params[:2], atol=1e-5)
    thr = res.model.transform_threshold_params(res.params)[1:-1]
    assert np.allclose(fit.theta, thr, atol=1e-5)
    assert np.allclose(fit.se[:2], res.bse[:2], rtol=1e-3)


def test_warm_start_reaches_same_optimum():
    data = ordered_logit_data(1000, [0.5, 0.2], [-0.5, 0.5], seed=4)
    cold = fit_ordered_logit(data)
    warm = fit_ordered_logit(data, start=cold)
    assert warm.iterations <= 1
    assert np.allclose(warm.beta, cold.beta, atol=1e-9)


@given(st.integers(0, 10_000))
def test_thresholds_strictly_increasing(seed):
    rng = np.random.default_rng(seed)
    Z = int(rng.integers(2, 6))
    theta = np.sort(rng.normal(0, 1.5, Z - 1)) + np.arange(Z - 1) * 0.3
    data = ordered_logit_data(400, rng.normal(0, 0.5, 2), theta, seed=rng)
    if np.any(data.level_counts() == 0):
        return
    fit = fit_ordered_logit(data)
    assert np.all(np.diff(fit.theta) > 0)


# --------------------------------------------------------------------------- #
# prediction
# --------------------------------------------------------------------------- #


def test_linear_predictor_is_a_dot_product():
    assert linear_predictor(make_fit([1, 2], [0.0]), [3, -1]) == pytest.approx(1.0)
    assert linear_predictor(make_fit([0, 0], [0.0]), [5, 7]) == 0.0


def test_linear_predictor_translation(rng):
    fit = make_fit([0.4, -1.3, 2.0], [0.0, 1.0])
    X = rng.standard_normal((50, 3))
    shifted = X.copy()
    shifted[:, 1] += 2.5
    assert np.allclose(linear_predictor(fit, shifted) - linear_predictor(fit, X), -1.3 * 2.5)


def test_category_probabilities_closed_form():
    assert np.allclose(predict_category_probs(make_fit([0.0], [0.0]), [1.0]), [0.5, 0.5])
    p = predict_category_probs(make_fit([0.0], [-1.386, 1.386]), [0.0])
    assert np.allclose(p, [expit(-1.386), 1 - 2 * expit(-1.386), expit(-1.386)])
    assert np.allclose(p, [0.2, 0.6, 0.2], atol=1e-3)


def test_probabilities_sum_to_one(rng):
    for _ in range(1000):
        Z = int(rng.integers(2, 7))
        p = int(rng.integers(1, 4))
        theta = np.cumsum(np.abs(rng.normal(0, 2, Z - 1))) - 2
        x = rng.normal(0, 3, p)
        ordinal = predict_category_probs(make_fit(rng.normal(0, 2, p), theta), x)
        mfit = MultinomialFit(rng.normal(0, 2, Z - 1), rng.normal(0, 2, (Z - 1, p)), 0, 0, 0, True, np.eye(1))
        multi = predict_category_probs(mfit, x)
        for probs in (ordinal, multi):
            assert np.all(probs > 0)
            assert abs(probs.sum() - 1) < 1e-12


# --------------------------------------------------------------------------- #
# multinomial logit
# --------------------------------------------------------------------------- #


def test_multinomial_intercepts_match_log_odds(rng):
    n = 3000
    t = 1 + rng.choice(3, size=n, p=[0.2, 0.3, 0.5])
    data = Dataset(np.arange(n), rng.standard_normal((n, 1)), t, None, 3)
    fit = fit_multinomial_logit(data, [])
    se = fit.se[:, 0]
    assert np.all(np.abs(fit.intercept - np.log([0.2 / 0.5, 0.3 / 0.5])) < 3 * se)
    counts = np.bincount(t)[1:]
    assert np.allclose(fit.intercept, np.log(counts[:2] / counts[2]), atol=1e-8)


def test_two_level_multinomial_equals_logistic_regression(rng):
    import statsmodels.api as sm

    n = 800
    x = rng.standard_normal((n, 2))
    t = np.where(rng.random(n) < expit(0.3 + x @ [0.8, -0.5]), 1, 2)
    fit = fit_multinomial_logit(Dataset(np.arange(n), x, t, None, 2))
    ref = sm.Logit((t == 1).astype(float), sm.add_constant(x)).fit(disp=False, tol=1e-12)
    assert np.allclose(fit.coef[0], ref.params, atol=1e-6)
    assert np.allclose(fit.se[0], ref.bse, rtol=1e-5)


def test_multinomial_gradient_matches_finite_differences(rng):
    n = 300
    x = rng.standard_normal((n, 2))
    data = Dataset(np.arange(n), x, 1 + rng.integers(0, 4, n), None, 4)
    worst = 0.0
    for _ in range(20):
        params = rng.normal(0, 0.6, 3 * 3)
        _, g = multinomial_negloglik_grad(params, data)
        fd = central_difference(lambda v: multinomial_negloglik_grad(v, data)[0], params)
        worst = max(worst, rel_error(g, fd))
    assert worst < 1e-6


def test_multinomial_gradient_vanishes_at_mle(rng):
    n = 600
    x = rng.standard_normal((n, 3))
    data = Dataset(np.arange(n), x, 1 + rng.integers(0, 3, n), None, 3)
    fit = fit_multinomial_logit(data)
    assert fit.converged
    _, g = multinomial_negloglik_grad(fit.coef.ravel(), data)
    assert np.max(np.abs(g)) < 1e-6


# --------------------------------------------------------------------------- #
# least squares
# --------------------------------------------------------------------------- #


def test_ols_exact_fit(rng):
    x = rng.standard_normal(20)
    fit = fit_ols(2 * x, x[:, None])
    assert fit.coef[0] == pytest.approx(2.0)
    assert fit.sigma2 == pytest.approx(0.0, abs=1e-25)
    assert fit.dof == 19


def test_ols_drops_duplicate_column(rng):
    X = rng.standard_normal((40, 2))
    y = X @ [1.0, -2.0] + rng.standard_normal(40)
    fit = fit_ols(y, np.column_stack([X, X[:, 1]]))
    single = fit_ols(y, X)
    assert fit.dropped_columns == (2,)
    assert np.allclose(fit.coef[:2], single.coef, atol=1e-12)
    assert np.isnan(fit.coef[2])


def test_ols_matches_normal_equations(rng):
    X = rng.standard_normal((50, 4))
    y = rng.standard_normal(50)
    fit = fit_ols(y, X)
    beta = np.linalg.inv(X.T @ X) @ X.T @ y
    assert np.allclose(fit.coef, beta, atol=1e-8)
    s2 = np.sum((y - X @ beta) ** 2) / 46
    assert np.allclose(fit.vcov, s2 * np.linalg.inv(X.T @ X), atol=1e-10)


def test_ols_residuals_orthogonal_to_design(rng):
    X = rng.standard_normal((60, 5))
    y = rng.standard_normal(60) * 10
    fit = fit_ols(y, X)
    assert np.max(np.abs(X.T @ fit.residuals)) < 1e-8 * np.linalg.norm(y)


def test_ols_vcov_is_symmetric_psd(rng):
    X = np.column_stack([np.ones(30), rng.standard_normal((30, 3))])
    fit = fit_ols(rng.standard_normal(30), X)
    assert np.allclose(fit.vcov, fit.vcov.T)
    assert np.linalg.eigvalsh(fit.vcov).min() >= -1e-14


def test_ols_protected_column_cannot_be_dropped(rng):
    x = rng.standard_normal(30)
    with pytest.raises(RankDeficientDesign):
        fit_ols(rng.standard_normal(30), np.column_stack([x, x]), protected=[1])


def test_ols_needs_spare_rows(rng):
    with pytest.raises(InsufficientRows):
        fit_ols(rng.standard_normal(3), rng.standard_normal((3, 3)))
