"""Cross-fit GMM on adjusted moments.

A moment model supplies an identifying function m and an influence
adjustment phi, both vectorized over rows, plus declarative nuisance
specs. Estimation cross-fits the nuisances over a fold plan, solves the
sample moments by Gauss-Newton with numerical Jacobians, and reports a
sandwich variance. Nuisances whose construction depends on beta are
refit on a schedule until the anchor matches the minimizer.

Remainder diagnostics decompose the estimation error of the adjusted
moment into named terms (R1: stochastic equicontinuity; R2: the
gamma-lambda cross term; R3/R4: mean-square remainders that vanish for
doubly robust moments; R5: the plug-in drift phi alone picks up). They
require a simulation design that can produce fresh draws and true
nuisance functions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import Dataset
from .folds import FoldPlan
from .seeds import STREAM_EVAL, STREAM_LEARNER, child_rng, derive_seed

Z975 = 1.959964


class EstimationError(RuntimeError):
    pass


@dataclass
class NuisanceSpec:
    """One first-step function: a role name, the learner to use, a fit
    closure ``fit(spec, data, seed, beta) -> handle``, whether the fit
    depends on beta, and which aux-split group it trains on."""

    role: str
    learner: object
    fit: object
    depends_on_beta: bool = False
    group: str = "gamma"


@dataclass
class MomentModel:
    """Moment functions and nuisance catalog for one estimation problem.

    ``m(data, beta, nuis) -> (n, r)`` is the identifying moment;
    ``phi(data, beta, nuis) -> (n, r)`` the influence adjustment (None
    for plug-in-only models). ``beta_space`` is a (p, 2) box."""

    name: str
    r: int
    beta_dim: int
    m: object
    phi: object
    nuisances: tuple
    beta_space: np.ndarray

    def __post_init__(self):
        self.beta_space = np.asarray(self.beta_space, dtype=np.float64).reshape(self.beta_dim, 2)
        roles = [s.role for s in self.nuisances]
        if len(set(roles)) != len(roles):
            raise ValueError("duplicate nuisance roles")


class FoldNuisances:
    """Per-fold fitted nuisance handles, with beta-dependent refits."""

    def __init__(self, model, plan, seed, per_fold, beta_anchor):
        self.model = model
        self.plan = plan
        self.seed = seed
        self.per_fold = per_fold
        self.beta_anchor = None if beta_anchor is None else np.asarray(beta_anchor, float).copy()

    def __getitem__(self, fold):
        return self.per_fold[fold]

    def refit_beta(self, data: Dataset, beta) -> None:
        beta = np.asarray(beta, dtype=np.float64)
        for ell in range(self.plan.L):
            for k, spec in enumerate(self.model.nuisances):
                if not spec.depends_on_beta:
                    continue
                idx = self.plan.train_for(ell, spec.group)
                seed = derive_seed(self.seed, STREAM_LEARNER, ell, k)
                self.per_fold[ell][spec.role] = spec.fit(spec, data.take(idx), seed, beta)
        self.beta_anchor = beta.copy()

    def needs_beta(self) -> bool:
        return any(s.depends_on_beta for s in self.model.nuisances)


def crossfit_nuisances(data: Dataset, plan: FoldPlan, model: MomentModel, seed=0, beta=None) -> FoldNuisances:
    """Train every nuisance on each fold complement (aux halves when the
    plan splits them), deterministically seeded per (fold, role)."""
    if plan.n != data.n:
        raise ValueError("fold plan size does not match the dataset")
    beta_arr = None if beta is None else np.asarray(beta, dtype=np.float64)
    per_fold = []
    for ell in range(plan.L):
        handles = {}
        for k, spec in enumerate(model.nuisances):
            if spec.depends_on_beta and beta_arr is None:
                raise ValueError(f"nuisance {spec.role!r} needs a beta to fit")
            idx = plan.train_for(ell, spec.group)
            seed_k = derive_seed(seed, STREAM_LEARNER, ell, k)
            try:
                handles[spec.role] = spec.fit(spec, data.take(idx), seed_k, beta_arr)
            except ValueError as exc:
                raise EstimationError(
                    f"nuisance {spec.role!r} failed on fold {ell}: {exc}"
                ) from exc
        per_fold.append(handles)
    return FoldNuisances(model, plan, seed, per_fold, beta_arr)


@dataclass
class SampleMoments:
    """Cross-fit moment rows in original row order."""

    m_rows: np.ndarray
    phi_rows: np.ndarray

    @property
    def psi_rows(self):
        return self.m_rows + self.phi_rows

    @property
    def m_bar(self):
        return self.m_rows.mean(axis=0)

    @property
    def phi_bar(self):
        return self.phi_rows.mean(axis=0)

    @property
    def psi_bar(self):
        return self.psi_rows.mean(axis=0)


def sample_moments(
    data: Dataset, plan: FoldPlan, nuis: FoldNuisances, model: MomentModel,
    beta, include_adjustment=True,
) -> SampleMoments:
    """Evaluate m and phi with fold-matched nuisances. Row order is the
    dataset's, so sums reduce in a fixed deterministic order."""
    beta = np.asarray(beta, dtype=np.float64)
    n = data.n
    m_rows = np.zeros((n, model.r))
    phi_rows = np.zeros((n, model.r))
    for ell, idx in enumerate(plan.folds):
        sub = data.take(idx)
        vals = np.asarray(model.m(sub, beta, nuis[ell]), dtype=np.float64)
        if not np.isfinite(vals).all():
            row = int(idx[np.argwhere(~np.isfinite(vals))[0][0]])
            raise EstimationError(f"non-finite m contribution at row {row}")
        m_rows[idx] = vals
        if include_adjustment and model.phi is not None:
            adj = np.asarray(model.phi(sub, beta, nuis[ell]), dtype=np.float64)
            if not np.isfinite(adj).all():
                row = int(idx[np.argwhere(~np.isfinite(adj))[0][0]])
                raise EstimationError(f"non-finite phi contribution at row {row}")
            phi_rows[idx] = adj
    return SampleMoments(m_rows, phi_rows)


@dataclass
class GmmResult:
    beta_hat: np.ndarray
    se: np.ndarray
    ci: np.ndarray
    vcov: np.ndarray
    M_hat: np.ndarray
    Omega_hat: np.ndarray
    W: np.ndarray
    objective: float
    n: int
    L: int
    converged: bool
    n_iter: int
    fit_flags: dict = field(default_factory=dict)
    remainders: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "beta_hat": self.beta_hat.tolist(),
            "se": self.se.tolist(),
            "ci": self.ci.tolist(),
            "vcov": self.vcov.tolist(),
            "M_hat": self.M_hat.tolist(),
            "Omega_hat": self.Omega_hat.tolist(),
            "W": self.W.tolist(),
            "objective": self.objective,
            "n": self.n,
            "L": self.L,
            "converged": self.converged,
            "n_iter": self.n_iter,
            "fit_flags": self.fit_flags,
            "remainders": self.remainders,
        }

    @classmethod
    def from_dict(cls, d) -> "GmmResult":
        return cls(
            beta_hat=np.asarray(d["beta_hat"], float),
            se=np.asarray(d["se"], float),
            ci=np.asarray(d["ci"], float),
            vcov=np.asarray(d["vcov"], float),
            M_hat=np.asarray(d["M_hat"], float),
            Omega_hat=np.asarray(d["Omega_hat"], float),
            W=np.asarray(d["W"], float),
            objective=float(d["objective"]),
            n=int(d["n"]),
            L=int(d["L"]),
            converged=bool(d["converged"]),
            n_iter=int(d["n_iter"]),
            fit_flags=dict(d.get("fit_flags", {})),
            remainders=dict(d.get("remainders", {})),
        )

    def csv_header(self):
        p = self.beta_hat.shape[0]
        cols = []
        for j in range(p):
            cols += [f"beta_{j}", f"se_{j}", f"ci_lo_{j}", f"ci_hi_{j}"]
        cols += ["objective", "n", "L", "converged", "n_iter"]
        return cols

    def csv_row(self):
        row = []
        for j in range(self.beta_hat.shape[0]):
            row += [
                repr(float(self.beta_hat[j])), repr(float(self.se[j])),
                repr(float(self.ci[j, 0])), repr(float(self.ci[j, 1])),
            ]
        row += [repr(float(self.objective)), str(self.n), str(self.L),
                str(int(self.converged)), str(self.n_iter)]
        return row


def _jacobian(fun, beta, rel_step=1e-5):
    p = beta.shape[0]
    f0 = fun(beta)
    J = np.zeros((f0.shape[0], p))
    for j in range(p):
        h = rel_step * (1.0 + abs(beta[j]))
        bp = beta.copy()
        bm = beta.copy()
        bp[j] += h
        bm[j] -= h
        J[:, j] = (fun(bp) - fun(bm)) / (2.0 * h)
    return J


def _clip_box(beta, box):
    return np.minimum(np.maximum(beta, box[:, 0]), box[:, 1])


def gmm_estimate(
    data: Dataset, plan: FoldPlan, model: MomentModel, *,
    seed=0, beta0=None, weighting="identity", W=None,
    include_adjustment=True, refit_damping=0.5, max_iter=200,
    step_tol=1e-8, grad_tol=1e-10, anchor_tol=1e-6, nuis=None,
) -> GmmResult:
    """Gauss-Newton GMM solve of the cross-fit (adjusted) moments.

    ``weighting``: 'identity', 'two-step-optimal' (W = inverse of the
    moment outer product from an identity-weighted first pass), or
    'given' with an explicit W. Returns the sandwich-variance result.
    """
    p = model.beta_dim
    if beta0 is None:
        beta0 = model.beta_space.mean(axis=1)
    beta = _clip_box(np.asarray(beta0, dtype=np.float64).copy(), model.beta_space)

    if weighting == "two-step-optimal":
        first = gmm_estimate(
            data, plan, model, seed=seed, beta0=beta0, weighting="identity",
            include_adjustment=include_adjustment, refit_damping=refit_damping,
            max_iter=max_iter, nuis=nuis,
        )
        Wmat = np.linalg.pinv(first.Omega_hat)
        return gmm_estimate(
            data, plan, model, seed=seed, beta0=first.beta_hat, weighting="given",
            W=Wmat, include_adjustment=include_adjustment,
            refit_damping=refit_damping, max_iter=max_iter, nuis=nuis,
        )
    if weighting == "given":
        Wmat = np.asarray(W, dtype=np.float64)
    elif weighting == "identity":
        Wmat = np.eye(model.r)
    else:
        raise ValueError(f"unknown weighting {weighting!r}")

    if nuis is None:
        nuis = crossfit_nuisances(data, plan, model, seed=seed, beta=beta)
    refit = nuis.needs_beta()

    def psi_bar(b):
        return sample_moments(data, plan, nuis, model, b, include_adjustment).psi_bar

    def objective(b):
        v = psi_bar(b)
        return float(v @ Wmat @ v)

    converged = False
    stalled = False
    it = 0
    outer = 0
    while True:
        inner_converged = False
        inner_start = it
        while it < max_iter and it - inner_start < 8:
            it += 1
            pb = psi_bar(beta)
            J = _jacobian(psi_bar, beta)
            A = J.T @ Wmat @ J
            cond = np.linalg.cond(A)
            if not np.isfinite(cond) or cond > 1e12:
                # With beta-anchored nuisances a stale anchor can leave the
                # moment surface with a flat valley; break to a refit and
                # let the final sandwich decide whether the converged
                # system is genuinely rank deficient.
                if not refit:
                    raise EstimationError("Jacobian rank deficient")
                break
            grad = 2.0 * J.T @ Wmat @ pb
            if np.linalg.norm(grad) < grad_tol:
                inner_converged = True
                break
            step = -np.linalg.solve(A, J.T @ Wmat @ pb)
            q0 = float(pb @ Wmat @ pb)
            scale = 1.0
            accepted = False
            for _ in range(30):
                cand = _clip_box(beta + scale * step, model.beta_space)
                if objective(cand) < q0:
                    accepted = True
                    break
                scale *= 0.5
            if not accepted:
                stalled = True
                inner_converged = True
                break
            moved = cand - beta
            beta = cand
            if float(np.abs(moved).max()) < step_tol:
                inner_converged = True
                break
        if not refit:
            converged = inner_converged and not stalled
            break
        gap = float(np.abs(beta - nuis.beta_anchor).max())
        if gap < anchor_tol:
            converged = inner_converged and not stalled
            break
        outer += 1
        if outer > 50 or it >= max_iter:
            break
        # The alternating solve-then-refit map oscillates around its fixed
        # point here, so move the refit anchor only part way toward the new
        # solution; partial steps turn the oscillation into a contraction.
        anchor = nuis.beta_anchor + refit_damping * (beta - nuis.beta_anchor)
        nuis.refit_beta(data, anchor)
        stalled = False

    sm = sample_moments(data, plan, nuis, model, beta, include_adjustment)
    psi = sm.psi_rows
    if not include_adjustment and model.phi is not None:
        # Plug-in solve: the estimating equations drop the adjustment, but
        # the asymptotic variance of the resulting estimator still carries
        # the first-step term, so the reported sandwich keeps it.
        psi = sample_moments(data, plan, nuis, model, beta, True).psi_rows
    n = data.n
    Omega = psi.T @ psi / n
    M_fun = psi_bar
    if include_adjustment and model.phi is not None:
        # The adjustment rows have mean zero in beta at the true nuisances,
        # so the population Jacobian equals the base-moment derivative; the
        # base rows estimate it without the adjustment's clipped
        # denominators, whose sample derivative is noisy.
        def M_fun(b):
            return sample_moments(data, plan, nuis, model, b, False).psi_bar
    M = _jacobian(M_fun, beta)
    A = M.T @ Wmat @ M
    cond = np.linalg.cond(A)
    if not np.isfinite(cond) or cond > 1e12:
        raise EstimationError("Jacobian rank deficient")
    bread = np.linalg.inv(A) @ M.T @ Wmat
    V = bread @ Omega @ bread.T
    se = np.sqrt(np.diag(V) / n)
    ci = np.column_stack([beta - Z975 * se, beta + Z975 * se])
    pb = sm.psi_bar
    flags = {"stalled": stalled, "adjusted": bool(include_adjustment and model.phi is not None)}
    return GmmResult(
        beta_hat=beta, se=se, ci=ci, vcov=V, M_hat=M, Omega_hat=Omega, W=Wmat,
        objective=float(pb @ Wmat @ pb), n=n, L=plan.L,
        converged=converged, n_iter=it, fit_flags=flags,
    )


def remainder_diagnostics(
    data: Dataset, plan: FoldPlan, nuis: FoldNuisances, model: MomentModel,
    dgp, *, beta=None, n_eval=100_000, seed=0,
) -> dict:
    """Decompose the adjusted-moment estimation error at the truth.

    ``dgp`` must provide ``sample(n, rng) -> Dataset``, ``beta0``, and
    ``true_nuisances() -> dict``. Population means of perturbed-nuisance
    moments are estimated on a fresh evaluation sample in difference form
    (value at fitted nuisances minus value at the truth, same draws), so
    every term is exactly zero when the fitted nuisances are the truth.
    """
    beta0 = np.asarray(dgp.beta0 if beta is None else beta, dtype=np.float64)
    truth = dgp.true_nuisances()
    rng = child_rng(seed, STREAM_EVAL, 0)
    ev = dgp.sample(n_eval, rng)
    n = data.n
    rootn = np.sqrt(n)

    def mixed(handles, roles_from_truth):
        out = dict(handles)
        for role in roles_from_truth:
            out[role] = truth[role]
        return out

    gamma_roles = [s.role for s in model.nuisances if s.group == "gamma"]
    lambda_roles = [s.role for s in model.nuisances if s.group == "lambda"]

    # per-observation pieces on the estimation sample, fold-matched
    def rows(include_adj, gamma_true, lambda_true):
        m_rows = np.zeros((n, model.r))
        phi_rows = np.zeros((n, model.r))
        for ell, idx in enumerate(plan.folds):
            sub = data.take(idx)
            handles = dict(nuis[ell])
            if gamma_true:
                handles = mixed(handles, gamma_roles)
            if lambda_true:
                handles = mixed(handles, lambda_roles)
            m_rows[idx] = model.m(sub, beta0, handles)
            if include_adj and model.phi is not None:
                phi_rows[idx] = model.phi(sub, beta0, handles)
        return m_rows, phi_rows

    m_hh, phi_hh = rows(True, False, False)   # fitted gamma, fitted lambda
    m_h0, phi_h0 = rows(True, False, True)    # fitted gamma, true lambda
    m_0h, phi_0h = rows(True, True, False)    # true gamma, fitted lambda
    m_00, phi_00 = rows(True, True, True)     # both true

    # population means per fold via the evaluation sample, difference form
    truth_all = dict(truth)
    m_ev0 = model.m(ev, beta0, truth_all)
    phi_ev0 = (
        model.phi(ev, beta0, truth_all) if model.phi is not None else np.zeros_like(m_ev0)
    )
    mbar = np.zeros((plan.L, model.r))
    phibar_hl0 = np.zeros((plan.L, model.r))
    phibar_0lh = np.zeros((plan.L, model.r))
    var3 = np.zeros(plan.L)
    var4 = np.zeros(plan.L)
    for ell in range(plan.L):
        gam_hat = dict(truth_all)
        gam_hat.update({r: nuis[ell][r] for r in gamma_roles})
        lam_hat = dict(truth_all)
        lam_hat.update({r: nuis[ell][r] for r in lambda_roles})
        m_ev = model.m(ev, beta0, gam_hat)
        mbar[ell] = (m_ev - m_ev0).mean(axis=0)
        if model.phi is not None:
            p_ev_h0 = model.phi(ev, beta0, gam_hat)
            p_ev_0h = model.phi(ev, beta0, lam_hat)
            phibar_hl0[ell] = (p_ev_h0 - phi_ev0).mean(axis=0)
            phibar_0lh[ell] = (p_ev_0h - phi_ev0).mean(axis=0)
            d3 = (m_ev - m_ev0 + p_ev_h0 - phi_ev0).sum(axis=1)
            var3[ell] = d3.var()
            var4[ell] = (p_ev_0h - phi_ev0).sum(axis=1).var()
        else:
            var3[ell] = (m_ev - m_ev0).sum(axis=1).var()

    sizes = np.array([len(f) for f in plan.folds], dtype=np.float64)
    fold_of = np.zeros(n, dtype=np.int64)
    for ell, idx in enumerate(plan.folds):
        fold_of[idx] = ell

    r1 = (
        (m_hh - m_00 - mbar[fold_of]).sum(axis=0)
        + (phi_h0 - phi_00 - phibar_hl0[fold_of]).sum(axis=0)
        + (phi_0h - phi_00 - phibar_0lh[fold_of]).sum(axis=0)
    ) / rootn
    r2 = (phi_hh - phi_h0 - phi_0h + phi_00).sum(axis=0) / rootn
    r3 = (sizes[:, None] * (mbar + phibar_hl0)).sum(axis=0) / rootn
    r4 = (sizes[:, None] * phibar_0lh).sum(axis=0) / rootn
    r5 = phi_hh.sum(axis=0) / rootn
    se3 = float((sizes * np.sqrt(var3 / n_eval)).sum() / rootn)
    se4 = float((sizes * np.sqrt(var4 / n_eval)).sum() / rootn)
    return {
        "R1": r1.tolist(),
        "R2": r2.tolist(),
        "R3": r3.tolist(),
        "R4": r4.tolist(),
        "R5": r5.tolist(),
        "R3_eval_se": se3,
        "R4_eval_se": se4,
        "n_eval": int(n_eval),
    }
