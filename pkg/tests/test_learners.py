"""First-step learner contracts: exact-fit cases, oracle comparisons,
determinism, probability clipping, and fit-report flags."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lrgmm.learners import (
    LearnerSpec,
    fit_conditional_density,
    fit_kernel_regression,
    fit_learner,
    fit_logit_lasso,
    fit_series_regression,
    fit_tree_ensemble,
    log_loss,
    silverman_bandwidth,
    tensor_exponents,
)


# ---------------------------------------------------------------------------
# spec validation


def test_spec_rejects_unknown_kind():
    with pytest.raises(ValueError):
        LearnerSpec("spline", {}).validate()


def test_spec_rejects_bad_hyperparameters():
    with pytest.raises(ValueError):
        LearnerSpec.kernel(bandwidth_scale=-1.0).validate()
    with pytest.raises(ValueError):
        LearnerSpec.series(degree=-1).validate()
    with pytest.raises(ValueError):
        LearnerSpec.logit_lasso(penalties=(-0.5,)).validate()
    with pytest.raises(ValueError):
        LearnerSpec.forest(n_trees=0).validate()


def test_spec_rejects_unknown_parameter_name():
    with pytest.raises(ValueError):
        LearnerSpec("kernel", {"bandwith": 2.0}).validate()


# ---------------------------------------------------------------------------
# kernel regression


def test_nw_constant_outcome_is_exact():
    rng = np.random.default_rng(0)
    x = rng.normal(size=40)
    fit = fit_kernel_regression(x, np.full(40, 3.0))
    grid = np.linspace(-2, 2, 9)
    assert np.allclose(fit(grid), 3.0, atol=1e-12)


def test_ll_reproduces_exact_line():
    x = np.array([0.0, 1.0, 2.0])
    y = np.array([0.0, 1.0, 2.0])
    for h in (0.3, 1.0, 5.0):
        fit = fit_kernel_regression(x, y, variant="ll", bandwidth=h)
        assert abs(float(fit(np.array([1.0]))[0]) - 1.0) < 1e-8
        assert abs(float(fit.grad(np.array([1.0]))[0, 0]) - 1.0) < 1e-8


def _loo_nw_mse(x, y, h):
    # leave-one-out NW predictions for a scalar bandwidth
    d = (x[:, None] - x[None, :]) / h
    k = np.exp(-0.5 * d * d)
    np.fill_diagonal(k, 0.0)
    denom = k.sum(axis=1)
    pred = np.where(denom > 0, (k @ y) / np.maximum(denom, 1e-300), y.mean())
    return float(np.mean((y - pred) ** 2))


def test_nw_silverman_within_2x_of_loo_oracle():
    rng = np.random.default_rng(3)
    n = 500
    x = rng.uniform(0.0, np.pi, n)
    y = np.sin(x) + rng.normal(scale=0.1, size=n)
    hs = np.geomspace(0.01, 1.0, 25)
    h_star = hs[int(np.argmin([_loo_nw_mse(x, y, h) for h in hs]))]
    xh = rng.uniform(0.0, np.pi, 1000)
    yh = np.sin(xh) + rng.normal(scale=0.1, size=1000)

    def mspe(fit):
        return float(np.mean((yh - fit(xh)) ** 2))

    mse_oracle = mspe(fit_kernel_regression(x, y, bandwidth=h_star))
    mse_silverman = mspe(fit_kernel_regression(x, y))
    assert mse_silverman <= 2.0 * mse_oracle


def test_ll_grad_matches_finite_differences():
    rng = np.random.default_rng(5)
    x = rng.uniform(-2, 2, 300)
    y = np.tanh(x) + rng.normal(scale=0.05, size=300)
    fit = fit_kernel_regression(x, y, variant="ll")
    pts = np.array([-1.2, -0.3, 0.4, 1.1])
    eps = 1e-5
    fd = (fit(pts + eps) - fit(pts - eps)) / (2 * eps)
    an = fit.grad(pts)[:, 0]
    assert np.all(np.abs(an - fd) <= 1e-3 * (1.0 + np.abs(fd)))


def test_nw_far_eval_falls_back_and_flags():
    # beyond the kernel window every weight underflows; the fit must
    # still answer (nearest neighbour) and count the event
    x = np.linspace(0.0, 1.0, 50)
    y = x.copy()
    fit = fit_kernel_regression(x, y, bandwidth=0.01, window=5.0)
    val = float(fit(np.array([50.0]))[0])
    assert np.isfinite(val)
    assert abs(val - 1.0) < 1e-8
    assert fit.report["empty_window"] >= 1


# ---------------------------------------------------------------------------
# series regression


def test_series_exact_linear_coefficients():
    x = np.array([0.0, 1.0, 2.0, 3.0, 4.0, 5.0])
    y = 2.0 + 3.0 * x
    fit = fit_series_regression(x, y, degree=1)
    assert np.allclose(fit.coeffs()[1], [2.0, 3.0], atol=1e-10)


def test_series_degree_zero_is_mean():
    rng = np.random.default_rng(1)
    y = rng.normal(size=30)
    fit = fit_series_regression(rng.normal(size=30), y, degree=0)
    assert abs(float(fit(np.array([9.9]))[0]) - y.mean()) < 1e-12


def test_series_exact_quadratic():
    x = np.array([-2.0, -1.0, 0.0, 1.0, 2.0])
    fit = fit_series_regression(x, x**2, degree=2)
    assert np.allclose(fit.coeffs()[1], [0.0, 0.0, 1.0], atol=1e-10)
    assert abs(float(fit(np.array([1.5]))[0]) - 2.25) < 1e-10


def test_series_drops_collinear_columns():
    rng = np.random.default_rng(2)
    x1 = rng.normal(size=60)
    x = np.column_stack([x1, 2.0 * x1])  # second column redundant
    y = 1.0 + x1
    fit = fit_series_regression(x, y, degree=1)
    assert fit.report["dropped_collinear"] >= 1
    assert np.allclose(fit(x), y, atol=1e-8)


def test_series_basis_too_rich_rejected():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(12, 3))
    with pytest.raises(ValueError, match="basis too rich"):
        fit_series_regression(x, rng.normal(size=12), degree=3)


def test_series_residuals_orthogonal_to_basis():
    rng = np.random.default_rng(6)
    x = rng.normal(size=(400, 2))
    y = np.sin(x[:, 0]) + rng.normal(size=400)
    fit = fit_series_regression(x, y, degree=3)
    from lrgmm.learners import _monomials

    B = _monomials(x, tensor_exponents(2, 3))
    resid = y - fit(x)
    assert float(np.abs(B.T @ resid / 400).max()) < 1e-8


def test_series_grad_matches_finite_differences():
    rng = np.random.default_rng(7)
    x = rng.normal(size=(200, 2))
    y = x[:, 0] ** 2 - x[:, 1] + 0.5 * x[:, 0] * x[:, 1]
    fit = fit_series_regression(x, y, degree=2)
    pts = rng.normal(size=(5, 2))
    eps = 1e-6
    for j in range(2):
        hi = pts.copy()
        lo = pts.copy()
        hi[:, j] += eps
        lo[:, j] -= eps
        fd = (fit(hi) - fit(lo)) / (2 * eps)
        assert np.all(np.abs(fit.grad(pts)[:, j] - fd) <= 1e-4 * (1.0 + np.abs(fd)))


# ---------------------------------------------------------------------------
# logit lasso


def test_logit_symmetric_data_gives_half():
    x = np.tile([-1.0, 1.0], 100)
    y = np.tile([0.0, 1.0], 100)
    fit = fit_logit_lasso(x, y, penalties=(0.0,), cv_folds=0)
    _, coef = fit.coeffs()
    assert abs(float(fit(np.array([0.0]))[0]) - 0.5) < 1e-6
    assert coef[1] > 0
    assert abs(coef[0]) < 1e-6


def test_logit_full_shrinkage_leaves_intercept_only():
    rng = np.random.default_rng(8)
    x = rng.normal(size=200)
    y = (rng.random(200) < 0.3).astype(float)
    fit = fit_logit_lasso(x, y, penalties=(1e6,), cv_folds=0)
    _, coef = fit.coeffs()
    assert np.all(coef[1:] == 0.0)
    assert abs(float(fit(np.array([2.0]))[0]) - y.mean()) < 1e-8


def test_logit_cv_recovers_sparse_signal():
    rng = np.random.default_rng(9)
    n = 1000
    X = rng.normal(size=(n, 11))
    p = 1.0 / (1.0 + np.exp(-0.5 * X[:, 0]))
    y = (rng.random(n) < p).astype(float)
    Xh = rng.normal(size=(500, 11))
    ph = 1.0 / (1.0 + np.exp(-0.5 * Xh[:, 0]))
    yh = (rng.random(500) < ph).astype(float)

    fit = fit_logit_lasso(X, y, seed=0)
    assert fit.report["n_nonzero"] <= 3

    oracle = fit_logit_lasso(X[:, :1], y, penalties=(0.0,), cv_folds=0)
    loss_fit = log_loss(yh, fit(Xh))
    loss_oracle = log_loss(yh, oracle(Xh[:, :1]))
    assert loss_fit <= 1.05 * loss_oracle


def test_logit_objective_nonincreasing_each_sweep():
    rng = np.random.default_rng(10)
    x = rng.normal(size=(300, 4))
    eta = 0.8 * x[:, 0] - 0.5 * x[:, 2]
    y = (rng.random(300) < 1.0 / (1.0 + np.exp(-eta))).astype(float)
    fit = fit_logit_lasso(x, y, penalties=(0.02,), cv_folds=0)
    for seg in fit.report["cd_segments"]:
        seg = np.asarray(seg)
        assert np.all(np.diff(seg) <= 1e-10)


def test_logit_separable_data_capped_and_flagged():
    x = np.concatenate([np.full(30, -2.0), np.full(30, 2.0)])
    y = np.concatenate([np.zeros(30), np.ones(30)])
    fit = fit_logit_lasso(x, y, penalties=(0.0,), cv_folds=0)
    assert fit.report["separation"]
    _, coef = fit.coeffs()
    assert np.all(np.abs(coef) <= 30.0 + 1e-9)


def test_logit_rejects_nonbinary_target():
    with pytest.raises(ValueError):
        fit_logit_lasso(np.arange(6.0), np.array([0.0, 1.0, 2.0, 0.0, 1.0, 2.0]))


# ---------------------------------------------------------------------------
# tree ensembles


def test_forest_constant_target():
    rng = np.random.default_rng(11)
    x = rng.normal(size=(40, 2))
    fit = fit_tree_ensemble(x, np.full(40, 7.0), mode="forest", n_trees=5)
    assert np.allclose(fit(x), 7.0, atol=1e-12)


def test_single_stump_perfect_split():
    x = np.concatenate([np.linspace(-2, -0.1, 20), np.linspace(0.1, 2, 20)])
    y = (x > 0).astype(float)
    fit = fit_tree_ensemble(x, y, mode="forest", n_trees=1, max_depth=1, min_leaf=5)
    assert float(fit(np.array([-1.0]))[0]) == 0.0
    assert float(fit(np.array([1.0]))[0]) == 1.0


def test_forest_classification_beats_noise_floor():
    rng = np.random.default_rng(12)
    n = 2000
    X = rng.normal(size=(n, 2))
    y = (X[:, 0] + X[:, 1] > 0).astype(float)
    flip = rng.random(n) < 0.05
    y[flip] = 1.0 - y[flip]
    Xh = rng.normal(size=(1000, 2))
    yh = (Xh[:, 0] + Xh[:, 1] > 0).astype(float)
    fit = fit_tree_ensemble(X, y, mode="forest", task="classification", seed=0)
    miss = float(np.mean((fit(Xh) > 0.5) != (yh > 0.5)))
    assert miss < 0.10


def test_boosted_loss_trace_nonincreasing():
    rng = np.random.default_rng(13)
    x = rng.normal(size=(400, 3))
    y_reg = x[:, 0] ** 2 + rng.normal(scale=0.1, size=400)
    fit = fit_tree_ensemble(x, y_reg, mode="boosted", n_trees=50, seed=1)
    trace = np.asarray(fit.report["loss_trace"])
    assert np.all(np.diff(trace) <= 1e-10)

    y_cls = (x[:, 0] > 0).astype(float)
    fit2 = fit_tree_ensemble(
        x, y_cls, mode="boosted", task="classification", n_trees=50, seed=1
    )
    trace2 = np.asarray(fit2.report["loss_trace"])
    assert np.all(np.diff(trace2) <= 1e-8)


# ---------------------------------------------------------------------------
# conditional density


def test_cond_density_standard_normal_level():
    rng = np.random.default_rng(14)
    t = rng.normal(size=5000)
    c = rng.normal(size=5000)  # independent of t
    fit = fit_conditional_density(t, c)
    val = float(fit(np.array([0.0]), np.array([[0.3]]))[0])
    assert abs(val - 0.3989422804014327) < 0.05


def test_cond_density_constant_conditioner_matches_unconditional():
    rng = np.random.default_rng(15)
    t = rng.normal(size=400)
    cond = fit_conditional_density(t, np.full(400, 2.0))
    unc = fit_conditional_density(t)
    grid = np.linspace(-2, 2, 21)
    assert np.allclose(cond(grid, np.full((21, 1), 2.0)), unc(grid), atol=1e-12)


def test_cond_density_floor_and_trim_flag():
    rng = np.random.default_rng(16)
    t = rng.normal(size=200)
    fit = fit_conditional_density(t, floor=1e-4)
    far = float(fit(np.array([60.0]))[0])
    assert far == 1e-4
    assert fit.report["floored"] >= 1


def test_cond_density_degenerate_target_flagged():
    fit = fit_conditional_density(np.full(50, 1.0))
    assert fit.report["degenerate_target"]
    assert float(fit(np.array([1.0]))[0]) == fit.floor
    assert fit.report["floored"] >= 1


def test_cond_density_needs_ten_rows():
    with pytest.raises(ValueError):
        fit_conditional_density(np.arange(5.0))


# ---------------------------------------------------------------------------
# cross-cutting invariants


MENU = [
    LearnerSpec.kernel(),
    LearnerSpec.kernel(variant="ll"),
    LearnerSpec.series(degree=2),
    LearnerSpec.logit_lasso(penalties=(0.01,), cv_folds=0),
    LearnerSpec.forest(n_trees=20),
    LearnerSpec.boosted(n_trees=20),
]


@pytest.mark.parametrize("spec", MENU, ids=lambda s: s.kind + str(s.params.get("variant", "")))
def test_refit_is_bit_identical(spec):
    rng = np.random.default_rng(17)
    x = rng.normal(size=(250, 2))
    y = (x[:, 0] > 0.2).astype(float)
    grid = rng.normal(size=(50, 2))
    a = fit_learner(spec, x, y, seed=3)(grid)
    b = fit_learner(spec, x, y, seed=3)(grid)
    assert np.array_equal(a, b)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_probability_outputs_stay_clipped(seed):
    rng = np.random.default_rng(seed)
    n = 80
    x = rng.normal(size=n)
    y = (rng.random(n) < 0.5).astype(float)
    pts = rng.normal(scale=3.0, size=12)
    for spec in (
        LearnerSpec.logit_lasso(penalties=(0.0,), cv_folds=0),
        LearnerSpec.forest(n_trees=10, task="classification"),
        LearnerSpec.boosted(n_trees=10, task="classification"),
    ):
        p = fit_learner(spec, x, y, seed=0)(pts)
        assert np.all(p >= 1e-6) and np.all(p <= 1.0 - 1e-6)


def test_silverman_bandwidth_positive_and_scales():
    rng = np.random.default_rng(18)
    x = rng.normal(size=(100, 3))
    h1 = silverman_bandwidth(x)
    h2 = silverman_bandwidth(x, 2.0)
    assert np.all(h1 > 0)
    assert np.allclose(h2, 2.0 * h1)


def test_weighted_series_refit_matches_manual_normal_equations():
    # signed weights route through the normal equations; verify against a
    # direct solve, since the influence machinery differentiates through this
    rng = np.random.default_rng(19)
    x = rng.normal(size=(120, 1))
    y = x[:, 0] + rng.normal(size=120)
    w = rng.normal(size=120)  # signed
    fit = fit_series_regression(x, y, degree=1, weights=w, allow_signed=True)
    B = np.column_stack([np.ones(120), x[:, 0]])
    manual = np.linalg.solve(B.T @ (w[:, None] * B) + 1e-12 * np.eye(2), B.T @ (w * y))
    assert np.allclose(fit.coeffs()[1], manual, atol=1e-8)
