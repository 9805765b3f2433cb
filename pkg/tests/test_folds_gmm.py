"""Fold plans and the cross-fit GMM engine: partition contracts, moment
assembly, the Gauss-Newton solve, sandwich algebra, and the remainder
diagnostics."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lrgmm.catalog import MissingDataMean
from lrgmm.data import Dataset
from lrgmm.folds import FoldPlan, make_blocked_fold_plan, make_fold_plan
from lrgmm.gmm import (
    EstimationError,
    FoldNuisances,
    MomentModel,
    NuisanceSpec,
    crossfit_nuisances,
    gmm_estimate,
    remainder_diagnostics,
    sample_moments,
)
from lrgmm.learners import LearnerSpec


# ---------------------------------------------------------------------------
# fold plans


def test_even_partition_sizes():
    plan = make_fold_plan(10, 5, seed=0)
    assert [len(f) for f in plan.folds] == [2, 2, 2, 2, 2]
    assert np.array_equal(np.sort(np.concatenate(plan.folds)), np.arange(10))


def test_uneven_partition_sizes():
    plan = make_fold_plan(7, 3, seed=1)
    assert sorted(len(f) for f in plan.folds) == [2, 2, 3]


def test_plan_deterministic_in_seed():
    a = make_fold_plan(50, 5, seed=9)
    b = make_fold_plan(50, 5, seed=9)
    c = make_fold_plan(50, 5, seed=10)
    assert all(np.array_equal(x, y) for x, y in zip(a.folds, b.folds))
    assert any(not np.array_equal(x, y) for x, y in zip(a.folds, c.folds))


def test_plan_bounds():
    with pytest.raises(ValueError):
        make_fold_plan(5, 6)
    with pytest.raises(ValueError):
        make_fold_plan(5, 0)


def test_single_fold_is_full_sample():
    plan = make_fold_plan(8, 1, seed=0)
    assert np.array_equal(plan.folds[0], np.arange(8))
    assert np.array_equal(plan.train[0], np.arange(8))


def test_aux_split_disjointness():
    plan = make_fold_plan(100, 5, seed=3, aux_split=True)
    for ell in range(5):
        g = plan.train_for(ell, "gamma")
        l = plan.train_for(ell, "lambda")
        assert np.intersect1d(g, l).size == 0
        assert np.intersect1d(g, plan.folds[ell]).size == 0
        assert np.intersect1d(l, plan.folds[ell]).size == 0
        both = np.sort(np.concatenate([g, l]))
        assert np.array_equal(both, np.sort(plan.train[ell]))


def test_blocked_plan_contiguous():
    plan = make_blocked_fold_plan(17, 4)
    flat = np.concatenate(plan.folds)
    assert np.array_equal(flat, np.arange(17))
    for f in plan.folds:
        assert np.array_equal(f, np.arange(f[0], f[-1] + 1))


@settings(max_examples=40, deadline=None)
@given(
    st.integers(4, 200),
    st.integers(2, 8),
    st.integers(0, 2**32 - 1),
    st.booleans(),
)
def test_plan_partition_property(n, L, seed, aux):
    if L > n // 2:
        L = max(2, n // 2)
    plan = make_fold_plan(n, L, seed=seed, aux_split=aux)
    assert np.array_equal(np.sort(np.concatenate(plan.folds)), np.arange(n))
    sizes = [len(f) for f in plan.folds]
    assert max(sizes) - min(sizes) <= 1
    for ell in range(L):
        assert np.array_equal(
            np.sort(np.concatenate([plan.folds[ell], plan.train[ell]])), np.arange(n)
        )


# ---------------------------------------------------------------------------
# helpers for hand-built models


def _iv_dataset(n, seed, p=1):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, p))
    y = x @ np.arange(1.0, p + 1.0) + rng.normal(size=n)
    cols = {"y": y}
    roles = {"y": "outcome"}
    for j in range(p):
        cols[f"x{j}"] = x[:, j]
        roles[f"x{j}"] = "regressor"
    return Dataset.from_columns(cols, roles)


def _iv_model(p=1):
    def m_fn(data, beta, nuis):
        x = np.column_stack([data.col(f"x{j}") for j in range(p)])
        resid = data.col("y") - x @ beta
        return x * resid[:, None]

    return MomentModel(
        name="iv", r=p, beta_dim=p, m=m_fn, phi=None, nuisances=(),
        beta_space=np.tile([[-10.0, 10.0]], (p, 1)),
    )


# ---------------------------------------------------------------------------
# crossfit structure


def test_crossfit_trains_on_complement():
    seen = {}

    def fit_probe(spec, data, seed, beta):
        seen.setdefault(spec.role, []).append(np.sort(data.col("tag")).astype(int))
        return lambda u: np.zeros(np.asarray(u).shape[0])

    n = 100
    ds = Dataset.from_columns(
        {"tag": np.arange(n, dtype=float), "y": np.zeros(n)},
        {"tag": "regressor", "y": "outcome"},
    )
    model = MomentModel(
        name="probe", r=1, beta_dim=1,
        m=lambda data, beta, nuis: np.zeros((data.n, 1)),
        phi=None,
        nuisances=(NuisanceSpec("g", None, fit_probe),),
        beta_space=np.array([[-1.0, 1.0]]),
    )
    plan = make_fold_plan(n, 2, seed=0)
    crossfit_nuisances(ds, plan, model)
    for ell in range(2):
        got = seen["g"][ell]
        assert len(got) == 50
        assert np.intersect1d(got, plan.folds[ell]).size == 0


def test_crossfit_aux_split_trains_disjoint():
    seen = {}

    def probe(role):
        def fit(spec, data, seed, beta):
            seen.setdefault(role, []).append(np.sort(data.col("tag")).astype(int))
            return lambda u: np.zeros(np.asarray(u).shape[0])

        return fit

    n = 60
    ds = Dataset.from_columns(
        {"tag": np.arange(n, dtype=float), "y": np.zeros(n)},
        {"tag": "regressor", "y": "outcome"},
    )
    model = MomentModel(
        name="probe2", r=1, beta_dim=1,
        m=lambda data, beta, nuis: np.zeros((data.n, 1)),
        phi=None,
        nuisances=(
            NuisanceSpec("g", None, probe("g"), group="gamma"),
            NuisanceSpec("l", None, probe("l"), group="lambda"),
        ),
        beta_space=np.array([[-1.0, 1.0]]),
    )
    plan = make_fold_plan(n, 3, seed=2, aux_split=True)
    crossfit_nuisances(ds, plan, model)
    for ell in range(3):
        assert np.intersect1d(seen["g"][ell], seen["l"][ell]).size == 0


def test_crossfit_fold_coefficients_differ_from_full_sample():
    rng = np.random.default_rng(4)
    design = MissingDataMean()
    ds = design.sample(300, rng)
    model = design.model()
    plan = make_fold_plan(300, 5, seed=0)
    nuis = crossfit_nuisances(ds, plan, model, seed=0)
    u = np.linspace(0.1, 0.9, 7)
    preds = np.stack([nuis[ell]["reg"](u) for ell in range(5)])
    assert np.ptp(preds, axis=0).max() > 1e-6  # noisy data, folds disagree


def test_crossfit_error_names_fold_and_learner():
    rng = np.random.default_rng(5)
    n = 12
    ds = Dataset.from_columns(
        {"u": rng.normal(size=n), "y": rng.normal(size=n)},
        {"u": "regressor", "y": "outcome"},
    )

    def fit_dens(spec, data, seed, beta):
        from lrgmm.learners import fit_conditional_density

        return fit_conditional_density(data.col("u"))  # needs >= 10 rows

    model = MomentModel(
        name="tiny", r=1, beta_dim=1,
        m=lambda data, beta, nuis: np.zeros((data.n, 1)),
        phi=None,
        nuisances=(NuisanceSpec("dens", None, fit_dens),),
        beta_space=np.array([[-1.0, 1.0]]),
    )
    plan = make_fold_plan(n, 2, seed=0)
    with pytest.raises(EstimationError, match=r"'dens'.*fold [01]"):
        crossfit_nuisances(ds, plan, model)


# ---------------------------------------------------------------------------
# sample moments


def test_moments_without_phi_average_m():
    ds = _iv_dataset(40, seed=6)
    model = _iv_model()
    plan = make_fold_plan(40, 4, seed=0)
    nuis = crossfit_nuisances(ds, plan, model)
    sm = sample_moments(ds, plan, nuis, model, np.array([0.5]))
    x = ds.col("x0")
    manual = np.mean(x * (ds.col("y") - 0.5 * x))
    assert abs(float(sm.psi_bar[0]) - manual) < 1e-12
    assert np.all(sm.phi_rows == 0.0)


def test_moment_additive_decomposition():
    rng = np.random.default_rng(7)
    design = MissingDataMean()
    ds = design.sample(500, rng)
    model = design.model()
    plan = make_fold_plan(500, 5, seed=1)
    nuis = crossfit_nuisances(ds, plan, model, seed=1)
    beta = np.array([1.5])
    full = sample_moments(ds, plan, nuis, model, beta, True)
    plug = sample_moments(ds, plan, nuis, model, beta, False)
    assert np.array_equal(full.m_rows, plug.m_rows)
    assert np.allclose(full.psi_bar, plug.m_bar + full.phi_bar, atol=1e-15)


def test_moments_at_truth_near_zero():
    rng = np.random.default_rng(8)
    design = MissingDataMean()
    n = 10_000
    ds = design.sample(n, rng)
    model = design.model()
    plan = make_fold_plan(n, 5, seed=0)
    truth = design.true_nuisances()
    nuis = FoldNuisances(model, plan, 0, [dict(truth) for _ in range(5)], None)
    sm = sample_moments(ds, plan, nuis, model, design.beta0)
    sd = sm.psi_rows.std(axis=0, ddof=1)
    assert np.all(np.abs(sm.psi_bar) < 3.0 * sd / np.sqrt(n))


def test_duplicated_dataset_leaves_moments_unchanged():
    rng = np.random.default_rng(9)
    design = MissingDataMean()
    n = 120
    ds = design.sample(n, rng)
    model = design.model()  # series reg, known weight: duplication-invariant fits
    plan = make_fold_plan(n, 3, seed=4)

    cols = {name: np.concatenate([ds.col(name), ds.col(name)]) for name in ("a", "u", "y")}
    ds2 = Dataset.from_columns(cols, {"a": "indicator", "u": "regressor", "y": "outcome"})
    folds2 = tuple(np.sort(np.concatenate([f, f + n])) for f in plan.folds)
    train2 = tuple(np.setdiff1d(np.arange(2 * n), f) for f in folds2)
    plan2 = FoldPlan(2 * n, 3, 0, False, folds2, train2, (), ())

    beta = np.array([1.2])
    sm1 = sample_moments(ds, plan, crossfit_nuisances(ds, plan, model), model, beta)
    sm2 = sample_moments(ds2, plan2, crossfit_nuisances(ds2, plan2, model), model, beta)
    assert abs(float(sm1.psi_bar[0]) - float(sm2.psi_bar[0])) < 1e-10


def test_fold_label_exchange_is_bitwise_invariant():
    rng = np.random.default_rng(10)
    design = MissingDataMean()
    ds = design.sample(200, rng)
    model = design.model()
    plan = make_fold_plan(200, 4, seed=5)
    perm = [2, 0, 3, 1]
    plan2 = FoldPlan(
        200, 4, plan.seed, False,
        tuple(plan.folds[j] for j in perm),
        tuple(plan.train[j] for j in perm),
        (), (),
    )
    beta = np.array([1.8])
    sm1 = sample_moments(ds, plan, crossfit_nuisances(ds, plan, model), model, beta)
    sm2 = sample_moments(ds2 := ds, plan2, crossfit_nuisances(ds2, plan2, model), model, beta)
    assert np.array_equal(sm1.psi_rows, sm2.psi_rows)


def test_nonfinite_moment_error_names_row_and_term():
    ds = _iv_dataset(20, seed=11)

    def bad_m(data, beta, nuis):
        out = np.ones((data.n, 1))
        tag = data.col("x0")
        out[np.argmax(tag)] = np.nan
        return out

    model = MomentModel(
        name="bad", r=1, beta_dim=1, m=bad_m, phi=None, nuisances=(),
        beta_space=np.array([[-1.0, 1.0]]),
    )
    plan = make_fold_plan(20, 2, seed=0)
    nuis = crossfit_nuisances(ds, plan, model)
    with pytest.raises(EstimationError, match=r"non-finite m contribution at row \d+"):
        sample_moments(ds, plan, nuis, model, np.array([0.0]))

    model2 = MomentModel(
        name="bad2", r=1, beta_dim=1,
        m=lambda data, beta, nuis: np.zeros((data.n, 1)),
        phi=lambda data, beta, nuis: np.full((data.n, 1), np.inf),
        nuisances=(), beta_space=np.array([[-1.0, 1.0]]),
    )
    with pytest.raises(EstimationError, match="non-finite phi contribution"):
        sample_moments(ds, plan, nuis, model2, np.array([0.0]))


# ---------------------------------------------------------------------------
# gmm solve


def test_linear_iv_matches_closed_form():
    ds = _iv_dataset(300, seed=12)
    model = _iv_model()
    plan = make_fold_plan(300, 5, seed=0)
    res = gmm_estimate(ds, plan, model, seed=0)
    x, y = ds.col("x0"), ds.col("y")
    closed = float(np.sum(x * y) / np.sum(x * x))
    assert abs(float(res.beta_hat[0]) - closed) < 1e-8
    assert res.converged


def test_exact_identification_ignores_weighting():
    ds = _iv_dataset(250, seed=13, p=2)
    model = _iv_model(p=2)
    plan = make_fold_plan(250, 5, seed=0)
    res_i = gmm_estimate(ds, plan, model, seed=0)
    W = np.array([[2.0, 0.3], [0.3, 1.0]])
    res_w = gmm_estimate(ds, plan, model, seed=0, weighting="given", W=W)
    assert np.allclose(res_i.beta_hat, res_w.beta_hat, atol=1e-8)


def test_exactly_identified_solves_moments_to_zero():
    ds = _iv_dataset(300, seed=14, p=2)
    model = _iv_model(p=2)
    plan = make_fold_plan(300, 5, seed=0)
    res = gmm_estimate(ds, plan, model, seed=0)
    nuis = crossfit_nuisances(ds, plan, model)
    sm = sample_moments(ds, plan, nuis, model, res.beta_hat)
    assert np.all(np.abs(sm.psi_bar) < 1e-6)


def test_gmm_result_invariants():
    rng = np.random.default_rng(15)
    design = MissingDataMean()
    ds = design.sample(2000, rng)
    plan = make_fold_plan(2000, 5, seed=0)
    res = gmm_estimate(ds, plan, design.model(), seed=0)
    eig_omega = np.linalg.eigvalsh(res.Omega_hat)
    eig_v = np.linalg.eigvalsh(res.vcov)
    assert np.all(eig_omega >= -1e-10)
    assert np.all(eig_v >= -1e-10)
    assert np.allclose(res.se, np.sqrt(np.diag(res.vcov) / res.n))
    assert np.allclose(res.ci[:, 0], res.beta_hat - 1.959964 * res.se)
    assert np.allclose(res.ci[:, 1], res.beta_hat + 1.959964 * res.se)


def test_missing_data_mean_calibrated_over_seeds():
    design = MissingDataMean()
    hits = 0
    n_seeds = 30
    for seed in range(n_seeds):
        rng = np.random.default_rng(1000 + seed)
        ds = design.sample(4000, rng)
        plan = make_fold_plan(4000, 5, seed=seed)
        res = gmm_estimate(ds, plan, design.model(), seed=seed)
        if abs(float(res.beta_hat[0]) - 11.0 / 6.0) < 3.0 * float(res.se[0]):
            hits += 1
    assert hits >= int(0.93 * n_seeds)


def test_variance_shrinks_like_one_over_n():
    design = MissingDataMean()

    def med_v(n):
        vs = []
        for seed in range(50):
            rng = np.random.default_rng(2000 + seed)
            ds = design.sample(n, rng)
            plan = make_fold_plan(n, 5, seed=seed)
            res = gmm_estimate(ds, plan, design.model(), seed=seed)
            vs.append(float(res.vcov[0, 0]))
        return float(np.median(vs))

    ratio = med_v(1000) / med_v(2000)
    assert 0.75 <= ratio <= 1.25  # V itself is n-free; se^2 halves via /n


def test_optimal_weighting_collapses_sandwich():
    # overidentified: two instruments for one slope
    rng = np.random.default_rng(16)
    n = 800
    z1 = rng.normal(size=n)
    z2 = rng.normal(size=n) + 0.5 * z1
    x = z1 + 0.3 * z2 + 0.2 * rng.normal(size=n)
    y = 2.0 * x + rng.normal(size=n)
    ds = Dataset.from_columns(
        {"y": y, "x": x, "z1": z1, "z2": z2},
        {"y": "outcome", "x": "regressor", "z1": "instrument", "z2": "instrument"},
    )

    def m_fn(data, beta, nuis):
        resid = data.col("y") - beta[0] * data.col("x")
        return np.column_stack([data.col("z1") * resid, data.col("z2") * resid])

    model = MomentModel(
        name="iv2", r=2, beta_dim=1, m=m_fn, phi=None, nuisances=(),
        beta_space=np.array([[-10.0, 10.0]]),
    )
    plan = make_fold_plan(n, 5, seed=0)
    res = gmm_estimate(ds, plan, model, seed=0, weighting="two-step-optimal")

    # formula identity on the reported matrices, at machine precision
    A = res.M_hat.T @ res.W @ res.M_hat
    bread = np.linalg.inv(A) @ res.M_hat.T @ res.W
    assert np.allclose(res.vcov, bread @ res.Omega_hat @ bread.T, atol=1e-12)

    # iterate W -> Omega^{-1} to its fixed point: sandwich collapses
    W = res.W
    for _ in range(4):
        res = gmm_estimate(ds, plan, model, seed=0, weighting="given", W=W)
        W = np.linalg.inv(res.Omega_hat)
    collapsed = np.linalg.inv(res.M_hat.T @ np.linalg.inv(res.Omega_hat) @ res.M_hat)
    assert np.allclose(res.vcov, collapsed, rtol=1e-5)


def test_constant_moment_is_rank_deficient():
    ds = _iv_dataset(50, seed=17)
    model = MomentModel(
        name="flat", r=1, beta_dim=1,
        m=lambda data, beta, nuis: (data.col("y") - 99.0)[:, None],
        phi=None, nuisances=(), beta_space=np.array([[-1.0, 1.0]]),
    )
    plan = make_fold_plan(50, 2, seed=0)
    with pytest.raises(EstimationError, match="Jacobian rank deficient"):
        gmm_estimate(ds, plan, model, seed=0)


def test_iteration_cap_returns_best_iterate():
    ds = _iv_dataset(100, seed=18)
    res = gmm_estimate(ds, make_fold_plan(100, 2, seed=0), _iv_model(), seed=0, max_iter=0)
    assert not res.converged
    assert res.n_iter == 0
    assert np.isfinite(res.beta_hat).all()


def test_result_serialization_round_trip():
    ds = _iv_dataset(120, seed=19)
    res = gmm_estimate(ds, make_fold_plan(120, 3, seed=0), _iv_model(), seed=0)
    from lrgmm.gmm import GmmResult

    back = GmmResult.from_dict(res.to_dict())
    assert np.allclose(back.beta_hat, res.beta_hat)
    assert np.allclose(back.vcov, res.vcov)
    assert len(res.csv_row()) == len(res.csv_header())


# ---------------------------------------------------------------------------
# remainder diagnostics


def test_remainders_vanish_at_truth():
    rng = np.random.default_rng(20)
    design = MissingDataMean()
    ds = design.sample(400, rng)
    model = design.model()
    plan = make_fold_plan(400, 4, seed=0)
    truth = design.true_nuisances()
    nuis = FoldNuisances(model, plan, 0, [dict(truth) for _ in range(4)], None)
    out = remainder_diagnostics(ds, plan, nuis, model, design, n_eval=5000, seed=0)
    for key in ("R1", "R2", "R3", "R4"):
        assert np.all(np.asarray(out[key]) == 0.0), key


def test_dr_design_remainders_r3_r4_noise_level():
    rng = np.random.default_rng(21)
    design = MissingDataMean()
    n = 2000
    ds = design.sample(n, rng)
    model = design.model()
    plan = make_fold_plan(n, 5, seed=1)
    nuis = crossfit_nuisances(ds, plan, model, seed=1)
    out = remainder_diagnostics(ds, plan, nuis, model, design, n_eval=100_000, seed=1)
    assert np.all(np.abs(out["R3"]) <= 3.0 * np.asarray(out["R3_eval_se"]))
    assert np.all(np.abs(out["R4"]) <= 3.0 * np.asarray(out["R4_eval_se"]))
