"""Numerical influence adjustments and orthogonality checks.

Four numeric routes to the adjustment term phi and two property
checkers:

* ``series_adjustment``: parametric-style correction for first steps
  solving a K-dimensional sample moment (series/sieve fits), built from
  numerical Jacobians of the identifying and first-step moments.
* ``kernel_perturbation_adjustment``: differentiates the complement
  average of the identifying moment with respect to an added-weight
  perturbation of a kernel-type local first step.
* ``point_mass_influence``: Gateaux derivative of a plug-in functional
  along a mixture toward a smoothed point mass, by weighted refits.
* ``lr_check`` / ``dr_check``: Monte Carlo verification that adjusted
  moments have zero first-step derivative and remain centered under
  one-sided misspecification.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import Dataset
from .learners import as_matrix
from .seeds import STREAM_EVAL, child_rng


class InfluenceError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# handle arithmetic (used by the checkers to move nuisances along paths)


class AffineHandle:
    """w0*h0 + w1*h1 pointwise, forwarding any call signature.

    Exposes ``grad`` when both parts do, so derivative-consuming moment
    functions keep working along perturbation paths.
    """

    def __init__(self, h0, h1, w0, w1):
        self.h0 = h0
        self.h1 = h1
        self.w0 = float(w0)
        self.w1 = float(w1)

    def __call__(self, *args, **kwargs):
        return self.w0 * np.asarray(self.h0(*args, **kwargs)) + self.w1 * np.asarray(
            self.h1(*args, **kwargs)
        )

    def grad(self, *args, **kwargs):
        return self.w0 * np.asarray(self.h0.grad(*args, **kwargs)) + self.w1 * np.asarray(
            self.h1.grad(*args, **kwargs)
        )


def shift_handles(base: dict, direction: dict, tau: float) -> dict:
    """base + tau*direction for the roles named in ``direction``."""
    out = dict(base)
    for role, delta in direction.items():
        if delta is None:
            continue
        out[role] = AffineHandle(base[role], delta, 1.0, tau)
    return out


def blend_handles(base: dict, other: dict, tau: float) -> dict:
    """(1-tau)*base + tau*other for the roles named in ``other``."""
    out = dict(base)
    for role, h1 in other.items():
        out[role] = AffineHandle(base[role], h1, 1.0 - tau, tau)
    return out


# ---------------------------------------------------------------------------
# series (sieve) adjustment


@dataclass
class SeriesAdjustment:
    phi: np.ndarray            # (n, r) adjustment rows
    psi_matrices: list         # per-fold (r, K) sensitivity matrices
    flags: list                # per-fold dicts

    @property
    def any_flagged(self):
        return any(f["ridged"] or f["first_step_unsolved"] for f in self.flags)


def _zeta_jacobian(fun, zeta, rel_step):
    # central differences of a vector-valued function of zeta
    K = zeta.shape[0]
    cols = []
    for k in range(K):
        h = rel_step * (1.0 + abs(zeta[k]))
        zp = zeta.copy()
        zm = zeta.copy()
        zp[k] += h
        zm[k] -= h
        cols.append((fun(zp) - fun(zm)) / (2.0 * h))
    return np.column_stack(cols)


def series_adjustment(
    m_of_zeta, h_of_zeta, zeta_hat, plan, data: Dataset, beta, *,
    rel_step=1e-6, ridge=1e-10,
) -> SeriesAdjustment:
    """Adjustment rows for first steps that solve sample moments h = 0.

    ``m_of_zeta(data, beta, zeta) -> (n, r)`` and ``h_of_zeta(data,
    zeta) -> (n, K)`` are vectorized over rows. ``zeta_hat`` is one
    K-vector per fold (or a single vector with ``plan=None``, which
    treats the full sample as both training and evaluation set). Per
    fold, the sensitivity is

        Psi = -[sum_train dm/dzeta][sum_train dh/dzeta]^{-1}

    with central-difference derivatives, and phi_i = Psi h(z_i, zeta)
    on the held-out fold. A singular first-step Jacobian is ridged and
    flagged; a training mean of h away from zero is flagged as an
    unsolved first step.
    """
    beta = np.asarray(beta, dtype=np.float64)
    if plan is None:
        fold_sets = [np.arange(data.n)]
        train_sets = [np.arange(data.n)]
        zetas = [np.asarray(zeta_hat, dtype=np.float64)]
    else:
        fold_sets = list(plan.folds)
        train_sets = [plan.train[ell] for ell in range(plan.L)]
        zetas = [np.asarray(z, dtype=np.float64) for z in zeta_hat]
        if len(zetas) != plan.L:
            raise ValueError("need one zeta per fold")

    phi = None
    mats = []
    flags = []
    for ell, (fidx, tidx) in enumerate(zip(fold_sets, train_sets)):
        tr = data.take(tidx)
        zeta = zetas[ell]
        h_tr = h_of_zeta(tr, zeta)
        mean_h = float(np.abs(h_tr.mean(axis=0)).max())
        dm = _zeta_jacobian(lambda z: m_of_zeta(tr, beta, z).sum(axis=0), zeta, rel_step)
        dh = _zeta_jacobian(lambda z: h_of_zeta(tr, z).sum(axis=0), zeta, rel_step)
        ridged = False
        cond = np.linalg.cond(dh)
        if not np.isfinite(cond) or cond > 1e12:
            scale = max(float(np.abs(np.diag(dh)).max()), 1.0)
            dh = dh + ridge * scale * np.eye(dh.shape[0])
            ridged = True
        psi_mat = -np.linalg.solve(dh.T, dm.T).T
        h_fold = h_of_zeta(data.take(fidx), zeta)
        rows = h_fold @ psi_mat.T
        if phi is None:
            phi = np.zeros((data.n, rows.shape[1]))
        phi[fidx] = rows
        mats.append(psi_mat)
        flags.append({
            "ridged": ridged,
            "first_step_unsolved": mean_h > 1e-6,
            "mean_h_norm": mean_h,
        })
    return SeriesAdjustment(phi, mats, flags)


# ---------------------------------------------------------------------------
# kernel perturbation adjustment


def _affine_probe(h_kernel, rows, X, q):
    # recover the affine map c -> mean_j h(z_j, x, c) at each eval point
    m = X.shape[0]
    H0 = h_kernel(rows, X, np.zeros((m, q)))
    A = np.zeros((m, q, q))
    for k in range(q):
        C = np.zeros((m, q))
        C[:, k] = 1.0
        A[:, :, k] = h_kernel(rows, X, C) - H0
    return H0, A


class _PerturbedSolution:
    """gamma^xi(.): solves mean_train h + xi * h_i = 0 pointwise.

    ``h_kernel(rows, X, C) -> (m, q)`` must be affine in the local
    coordinates C; component 0 of the solution is the function value and
    the remaining components (locally linear fits) feed ``grad``.
    """

    def __init__(self, h_kernel, train, unit, xi, q):
        self.h_kernel = h_kernel
        self.train = train
        self.unit = unit
        self.xi = float(xi)
        self.q = q

    def _solve(self, X):
        X = as_matrix(X)
        H0, A = _affine_probe(self.h_kernel, self.train, X, self.q)
        if self.xi != 0.0:
            H0u, Au = _affine_probe(self.h_kernel, self.unit, X, self.q)
            H0 = H0 + self.xi * H0u
            A = A + self.xi * Au
        sol = np.linalg.solve(A, -H0[:, :, None])[:, :, 0]
        return sol

    def __call__(self, X):
        return self._solve(X)[:, 0]

    def grad(self, X):
        if self.q < 2:
            raise NotImplementedError("grad needs a locally linear first step")
        return self._solve(X)[:, 1:]


def kernel_perturbation_adjustment(
    m, h_kernel, data: Dataset, plan, row_i: int, beta, xi_step=1e-4, *,
    max_retry=3,
) -> np.ndarray:
    """Adjustment estimate for one observation via added-weight
    perturbation of a kernel-type first step.

    ``m(rows, beta, gamma) -> (n, r)`` consumes the first step as a
    callable. ``h_kernel(rows, X, C) -> (m, q)`` is the local first-step
    moment averaged over ``rows``, affine in the local coordinates C
    (attribute ``q`` gives the local dimension, default 1). The first
    step trains on the fold complement of ``row_i`` (all rows when
    ``plan`` is None) and the returned vector is the central difference
    in the added weight xi of the complement average of m. Non-finite
    solves shrink xi by 10, up to ``max_retry`` times.
    """
    beta = np.asarray(beta, dtype=np.float64)
    q = getattr(h_kernel, "q", 1)
    if plan is None:
        tidx = np.arange(data.n)
    else:
        tidx = None
        for ell, fidx in enumerate(plan.folds):
            if row_i in set(fidx.tolist()):
                tidx = plan.train[ell]
                break
        if tidx is None:
            raise ValueError(f"row {row_i} is in no fold")
    train = data.take(tidx)
    unit = data.take(np.array([row_i]))
    xi = float(xi_step)
    last_err = None
    for _ in range(max_retry + 1):
        try:
            up = m(train, beta, _PerturbedSolution(h_kernel, train, unit, +xi, q))
            dn = m(train, beta, _PerturbedSolution(h_kernel, train, unit, -xi, q))
            val = (up.mean(axis=0) - dn.mean(axis=0)) / (2.0 * xi)
            if np.isfinite(val).all():
                return val
            last_err = "non-finite difference quotient"
        except np.linalg.LinAlgError as e:  # singular perturbed solve
            last_err = str(e)
        xi /= 10.0
    raise InfluenceError(
        f"perturbation failed for row {row_i} after {max_retry + 1} tries: {last_err}"
    )


def _kernel_weights(xt, X, h):
    # unnormalized Gaussian product kernel, (m, n) over eval x train
    u = (X[:, None, :] - xt[None, :, :]) / h[None, None, :]
    return np.exp(-0.5 * np.einsum("mnd,mnd->mn", u, u))


def nw_local_moment(xcols, ycol, h):
    """Local moment whose root is the Nadaraya-Watson fit of y on x."""
    h = np.atleast_1d(np.asarray(h, dtype=np.float64))

    def h_kernel(rows, X, C):
        xt = np.column_stack([rows.col(c) for c in xcols])
        y = rows.col(ycol)
        K = _kernel_weights(xt, as_matrix(X), h)
        return (K @ y / xt.shape[0])[:, None] - C * K.mean(axis=1)[:, None]

    h_kernel.q = 1
    return h_kernel


def ll_local_moment(xcols, ycol, h):
    """Local moment whose root is the locally linear fit (value, slopes)."""
    h = np.atleast_1d(np.asarray(h, dtype=np.float64))

    def h_kernel(rows, X, C):
        X = as_matrix(X)
        xt = np.column_stack([rows.col(c) for c in xcols])
        y = rows.col(ycol)
        K = _kernel_weights(xt, X, h)
        dx = xt[None, :, :] - X[:, None, :]
        basis = np.concatenate([np.ones((X.shape[0], xt.shape[0], 1)), dx], axis=2)
        resid = y[None, :, None] - np.einsum("mnq,mq->mn", basis, C)[:, :, None]
        return np.einsum("mn,mnq->mq", K, basis * resid / xt.shape[0])

    h_kernel.q = 1 + len(xcols)
    return h_kernel


def kde_local_moment(xcols, h):
    """Local moment whose root is the kernel density estimate."""
    h = np.atleast_1d(np.asarray(h, dtype=np.float64))
    norm = float(np.prod(h) * (2.0 * np.pi) ** (len(h) / 2.0))

    def h_kernel(rows, X, C):
        xt = np.column_stack([rows.col(c) for c in xcols])
        K = _kernel_weights(xt, as_matrix(X), h) / norm
        return K.mean(axis=1)[:, None] - C

    h_kernel.q = 1
    return h_kernel


# ---------------------------------------------------------------------------
# point-mass Gateaux derivative


@dataclass(frozen=True)
class MixtureSpec:
    """Contamination recipe for mixture paths (1-tau)*F0 + tau*G.

    ``tau_grid`` holds the positive step sizes used in the central
    difference; ``h_grid`` the smoothing-scale multipliers (decreasing)
    for a point-mass G; ``n_nodes`` the Gauss-Hermite resolution per
    continuous coordinate.
    """

    tau_grid: tuple = (1e-3,)
    h_grid: tuple = (0.4, 0.2, 0.1)
    n_nodes: int = 8

    def __post_init__(self):
        taus = tuple(float(t) for t in self.tau_grid)
        if len(set(taus)) != len(taus):
            raise ValueError("tau values must be distinct")
        if any(t < 0.0 or t > 0.5 for t in taus):
            raise ValueError("tau values must lie in [0, 0.5]")
        hs = tuple(float(h) for h in self.h_grid)
        if any(h <= 0 for h in hs):
            raise ValueError("smoothing scales must be positive")
        if any(a <= b for a, b in zip(hs, hs[1:])):
            raise ValueError("smoothing scales must decrease")
        object.__setattr__(self, "tau_grid", taus)
        object.__setattr__(self, "h_grid", hs)


def _gh_atoms(z, names, cont, scales, h, n_nodes):
    # tensor Gauss-Hermite contamination atoms around z
    nodes, wts = np.polynomial.hermite_e.hermegauss(n_nodes)
    wts = wts / wts.sum()
    cols = {c: np.array([float(z[c])]) for c in names}
    weights = np.array([1.0])
    for c in cont:
        k = len(weights)
        newcols = {}
        for name in names:
            base = np.repeat(cols[name], n_nodes)
            if name == c:
                base = base + h * scales[name] * np.tile(nodes, k)
            newcols[name] = base
        cols = newcols
        weights = np.repeat(weights, n_nodes) * np.tile(wts, k)
    atoms = np.column_stack([cols[c] for c in names])
    return atoms, weights


def point_mass_influence(
    mu_of_F, data: Dataset, z: dict, spec: MixtureSpec = MixtureSpec(), *,
    discrete=(), scales=None,
) -> dict:
    """Gateaux derivative of a plug-in functional toward a smoothed
    point mass at z.

    ``mu_of_F(aug_data, weights) -> float`` refits its first step on the
    weighted sample; the first ``data.n`` rows of ``aug_data`` are the
    original sample (for functionals that keep their outer expectation
    on it). ``z`` maps column names to values; columns in ``discrete``
    are not smoothed. Per smoothing scale h (times the per-column data
    scale) the derivative is a central difference in tau over weighted
    refits; the return carries each (h, tau) estimate and the h -> 0
    polynomial-in-h^2 extrapolation at the smallest tau.
    """
    names = data.names
    if set(z) != set(names):
        raise ValueError("z must provide every column")
    cont = [c for c in names if c not in discrete]
    if scales is None:
        scales = {c: float(np.std(data.col(c))) or 1.0 for c in names}
    n = data.n
    base_vals = data.values

    by_h = {}
    for h in spec.h_grid:
        atoms, g = _gh_atoms(z, names, cont, scales, h, spec.n_nodes)
        aug = Dataset(names, data.roles, np.vstack([base_vals, atoms]))
        per_tau = {}
        for tau in spec.tau_grid:
            w_plus = np.concatenate([np.full(n, (1.0 - tau) / n), tau * g])
            w_minus = np.concatenate([np.full(n, (1.0 + tau) / n), -tau * g])
            try:
                up = float(mu_of_F(aug, w_plus))
                dn = float(mu_of_F(aug, w_minus))
            except Exception as e:
                raise InfluenceError(f"weighted refit failed at h={h}, tau={tau}: {e}")
            per_tau[tau] = (up - dn) / (2.0 * tau)
        by_h[h] = per_tau

    tau_min = min(spec.tau_grid)
    hs = np.array(spec.h_grid)
    vals = np.array([by_h[h][tau_min] for h in spec.h_grid])
    if len(hs) >= 2:
        coef = np.polynomial.polynomial.polyfit(hs ** 2, vals, len(hs) - 1)
        extrapolated = float(coef[0])
    else:
        extrapolated = float(vals[0])
    return {
        "by_h": {h: dict(t) for h, t in by_h.items()},
        "extrapolated": extrapolated,
        "tau_used": tau_min,
        "n_atoms": int(spec.n_nodes ** len(cont)),
    }


# ---------------------------------------------------------------------------
# LR / DR checkers


def _quadratic_fit(taus, means, rows, n_eval):
    # means: (T, r); rows: per-tau list of (n_eval, r) for the se of the
    # linear coefficient via the same per-draw linear combination
    T = np.column_stack([np.ones(len(taus)), taus, np.asarray(taus) ** 2])
    pinv = np.linalg.pinv(T)
    coefs = pinv @ means                      # (3, r)
    wlin = pinv[1]
    combo = sum(w * rw for w, rw in zip(wlin, rows))
    se = combo.std(axis=0, ddof=1) / np.sqrt(n_eval)
    return coefs[1], coefs[2], se


def _psi_rows(model, ev, beta0, handles, adjusted=True):
    rows = model.m(ev, beta0, handles)
    if adjusted and model.phi is not None:
        rows = rows + model.phi(ev, beta0, handles)
    return rows


def lr_check(
    model, dgp, directions=None, tau_grid=(-0.1, -0.05, 0.0, 0.05, 0.1), *,
    n_eval=100_000, seed=0,
) -> dict:
    """Gateaux-derivative check of the adjusted moment at the truth.

    For each direction (a dict role -> delta handle) the population mean
    of psi along gamma0 + tau*delta is estimated on one fixed evaluation
    sample per tau; a quadratic in tau is fit and the linear coefficient
    should vanish for a locally robust moment. The same coefficient for
    the identifying moment alone is reported as the plug-in contrast.
    """
    taus = [float(t) for t in tau_grid]
    if len(taus) < 3:
        raise ValueError("tau_grid needs at least 3 points")
    if directions is None:
        directions = dgp.direction_library()
    beta0 = np.asarray(dgp.beta0, dtype=np.float64)
    rng = child_rng(seed, STREAM_EVAL, 0)
    ev = dgp.sample(int(n_eval), rng)
    perturb = getattr(dgp, "perturbed_nuisances", None)
    truth = dgp.true_nuisances()

    out = []
    for name, direction in directions:
        means_adj, rows_adj = [], []
        means_plg, rows_plg = [], []
        for tau in taus:
            if perturb is not None:
                handles = perturb(direction, tau)
            else:
                handles = shift_handles(truth, direction, tau)
            r_adj = _psi_rows(model, ev, beta0, handles, adjusted=True)
            r_plg = _psi_rows(model, ev, beta0, handles, adjusted=False)
            means_adj.append(r_adj.mean(axis=0))
            means_plg.append(r_plg.mean(axis=0))
            rows_adj.append(r_adj)
            rows_plg.append(r_plg)
        lin, quad, se = _quadratic_fit(taus, np.array(means_adj), rows_adj, ev.n)
        lin_p, _, se_p = _quadratic_fit(taus, np.array(means_plg), rows_plg, ev.n)
        zmax = float(np.max(np.abs(lin) / np.maximum(se, 1e-300)))
        out.append({
            "direction": name,
            "linear_coef": lin.tolist(),
            "linear_se": se.tolist(),
            "quad_coef": quad.tolist(),
            "plugin_linear_coef": lin_p.tolist(),
            "plugin_linear_se": se_p.tolist(),
            "max_abs_z": zmax,
            "verdict": bool(zmax <= 3.0),
        })
    return {
        "directions": out,
        "n_eval": int(n_eval),
        "passed": all(d["verdict"] for d in out),
    }


def dr_check(
    model, dgp, gamma_wrong: dict, lambda_wrong: dict, *,
    n_eval=100_000, seed=0,
) -> dict:
    """Double robustness check: the adjusted moment stays centered when
    either nuisance group is replaced by a wrong function, and the mean
    is affine along the misspecification path.
    """
    beta0 = np.asarray(dgp.beta0, dtype=np.float64)
    rng = child_rng(seed, STREAM_EVAL, 0)
    ev = dgp.sample(int(n_eval), rng)
    truth = dgp.true_nuisances()
    blend = getattr(dgp, "blend_nuisances", None)

    def blended(wrong, tau):
        if blend is not None:
            return blend(wrong, tau)
        return blend_handles(truth, wrong, tau)

    def mean_se(handles, adjusted=True):
        rows = _psi_rows(model, ev, beta0, handles, adjusted)
        return rows, rows.mean(axis=0), rows.std(axis=0, ddof=1) / np.sqrt(ev.n)

    _, mg, sg = mean_se(blended(gamma_wrong, 1.0))
    _, ml, sl = mean_se(blended(lambda_wrong, 1.0))
    _, mp, sp = mean_se(blended(gamma_wrong, 1.0), adjusted=False)

    taus = [0.0, 0.5, 1.0]
    rows_path, means_path = [], []
    for tau in taus:
        rows, mean, _ = mean_se(blended(gamma_wrong, tau))
        rows_path.append(rows)
        means_path.append(mean)
    _, quad, quad_se = _quadratic_fit(taus, np.array(means_path), rows_path, ev.n)

    zg = float(np.max(np.abs(mg) / np.maximum(sg, 1e-300)))
    zl = float(np.max(np.abs(ml) / np.maximum(sl, 1e-300)))
    return {
        "gamma_wrong_mean": mg.tolist(),
        "gamma_wrong_se": sg.tolist(),
        "lambda_wrong_mean": ml.tolist(),
        "lambda_wrong_se": sl.tolist(),
        "plugin_mean": mp.tolist(),
        "plugin_se": sp.tolist(),
        "affine_quad_coef": quad.tolist(),
        "affine_quad_se": quad_se.tolist(),
        "max_abs_z_gamma": zg,
        "max_abs_z_lambda": zl,
        "n_eval": int(n_eval),
        "passed": bool(zg <= 3.0 and zl <= 3.0),
    }
