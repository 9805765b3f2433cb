"""First-step learners, implemented in-package on the selected backend.

The catalog: Nadaraya-Watson and locally linear kernel regression,
tensor-product polynomial series regression, L1-penalized logistic
regression (IRLS + cyclic coordinate descent with cross-validated
penalty), bagged and boosted CART ensembles, and kernel conditional
density estimation. Everything is deterministic given its inputs and
seed; learner randomness is derived through :mod:`lrgmm.seeds`.

Fitted objects are callables mapping an (m, d) array (1-D accepted for
d = 1) to predictions, expose ``report`` with fit diagnostics and flag
counters, and, where meaningful, ``grad`` and ``coeffs``.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from ._backend import impl
from .seeds import STREAM_LEARNER, child_rng

KINDS = ("kernel", "series", "logit-lasso", "forest", "boosted", "cond-density")

_DEFAULTS = {
    "kernel": dict(variant="nw", bandwidth_scale=1.0, bandwidth=None, ridge=1e-8, window=5.0),
    "series": dict(degree=2),
    "logit-lasso": dict(
        penalties=None, n_penalties=20, cv_folds=5, max_sweeps=2000,
        tol=1e-8, clip=1e-6, coef_bound=30.0, degree=1,
    ),
    "forest": dict(n_trees=200, min_leaf=5, max_depth=None, task="auto"),
    "boosted": dict(n_trees=200, depth=4, learning_rate=0.1, min_leaf=5, task="auto"),
    "cond-density": dict(bandwidth_scale=1.0, bandwidth=None, floor=1e-4),
}


@dataclass
class LearnerSpec:
    """Declarative learner configuration: a kind plus hyperparameters."""

    kind: str
    params: dict = field(default_factory=dict)

    def validate(self) -> "LearnerSpec":
        if self.kind not in KINDS:
            raise ValueError(f"unknown learner kind {self.kind!r}; valid: {KINDS}")
        allowed = _DEFAULTS[self.kind]
        for key in self.params:
            if key not in allowed:
                raise ValueError(f"unknown parameter {key!r} for learner {self.kind!r}")
        merged = dict(allowed)
        merged.update(self.params)
        if self.kind == "kernel" and merged["variant"] not in ("nw", "ll"):
            raise ValueError("kernel variant must be 'nw' or 'll'")
        for key in ("bandwidth_scale", "ridge", "window"):
            if key in merged and merged[key] is not None and merged[key] <= 0:
                raise ValueError(f"{key} must be positive")
        if self.kind == "series" and (int(merged["degree"]) < 0):
            raise ValueError("series degree must be >= 0")
        if self.kind == "logit-lasso":
            if int(merged["degree"]) < 0:
                raise ValueError("logit-lasso degree must be >= 0")
            pens = merged["penalties"]
            if pens is not None and any(p < 0 for p in pens):
                raise ValueError("penalties must be >= 0")
        if self.kind in ("forest", "boosted"):
            if int(merged["n_trees"]) < 1 or int(merged["min_leaf"]) < 1:
                raise ValueError("n_trees and min_leaf must be >= 1")
            if merged["task"] not in ("auto", "regression", "classification"):
                raise ValueError("task must be auto, regression, or classification")
        return self

    def resolved(self) -> dict:
        self.validate()
        merged = dict(_DEFAULTS[self.kind])
        merged.update(self.params)
        return merged

    @classmethod
    def kernel(cls, **kw):
        return cls("kernel", kw).validate()

    @classmethod
    def series(cls, **kw):
        return cls("series", kw).validate()

    @classmethod
    def logit_lasso(cls, **kw):
        return cls("logit-lasso", kw).validate()

    @classmethod
    def forest(cls, **kw):
        return cls("forest", kw).validate()

    @classmethod
    def boosted(cls, **kw):
        return cls("boosted", kw).validate()

    @classmethod
    def cond_density(cls, **kw):
        return cls("cond-density", kw).validate()


def as_matrix(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2:
        raise ValueError("regressors must be 1-D or 2-D")
    return np.ascontiguousarray(x)


def _check_training(x, y, weights, allow_signed=False):
    if not np.isfinite(x).all() or not np.isfinite(y).all():
        raise ValueError("training data must be finite")
    if x.shape[0] != y.shape[0]:
        raise ValueError("x and y row counts differ")
    if x.shape[0] < 2:
        raise ValueError("need at least two training rows")
    if weights is None:
        w = np.ones(x.shape[0])
    else:
        w = np.asarray(weights, dtype=np.float64)
        if w.shape != (x.shape[0],) or not np.isfinite(w).all():
            raise ValueError("weights must be a finite vector matching x")
        if not allow_signed and (w < 0).any():
            raise ValueError("weights must be nonnegative")
        if w.sum() <= 0:
            raise ValueError("weights sum to zero or less")
    return w


def silverman_bandwidth(x, scale=1.0) -> np.ndarray:
    """Rule-of-thumb per-dimension Gaussian bandwidths, times ``scale``.

    Uses min(sd, IQR/1.349) per dimension with the multivariate reference
    exponent n**(-1/(d+4)); zero-spread dimensions fall back to 1.0.
    """
    x = as_matrix(x)
    n, d = x.shape
    sd = x.std(axis=0, ddof=1)
    q75, q25 = np.percentile(x, [75.0, 25.0], axis=0)
    iqr = (q75 - q25) / 1.349
    sig = np.minimum(sd, np.where(iqr > 0, iqr, np.inf))
    sig = np.where((sig > 0) & np.isfinite(sig), sig, 1.0)
    factor = (4.0 / (d + 2.0)) ** (1.0 / (d + 4.0))
    return scale * sig * factor * n ** (-1.0 / (d + 4.0))


class FittedFn:
    """Base class for fitted learners: callable, with a fit report."""

    kind = "base"

    def __init__(self):
        self.report = {}

    def __call__(self, x):
        raise NotImplementedError

    def grad(self, x):
        raise NotImplementedError(f"{self.kind} does not expose a gradient")

    @property
    def coeffs(self):
        return None


# ---------------------------------------------------------------------------
# kernel regression


class KernelRegression(FittedFn):
    kind = "kernel"

    def __init__(self, x, y, variant, h, wt, ridge, window):
        super().__init__()
        self.x = x
        self.y = y
        self.variant = variant
        self.h = h
        self.wt = wt
        self.ridge = ridge
        self.window = window
        self.report = {
            "variant": variant,
            "bandwidth": h.tolist(),
            "n_train": int(x.shape[0]),
            "empty_window": 0,
            "ridged": 0,
        }

    def _ll(self, xe):
        yhat, grad, empty, ridged = impl.ll_eval(
            self.x, self.y, self.wt, as_matrix(xe), self.h, self.ridge, self.window
        )
        self.report["empty_window"] += int(empty.sum())
        self.report["ridged"] += int(ridged.sum())
        return yhat, grad

    def __call__(self, xe):
        if self.variant == "nw":
            yhat, empty = impl.nw_eval(
                self.x, self.y, self.wt, as_matrix(xe), self.h, self.window
            )
            self.report["empty_window"] += int(empty.sum())
            return yhat
        return self._ll(xe)[0]

    def grad(self, xe):
        if self.variant != "ll":
            raise NotImplementedError("grad is available for the 'll' variant only")
        return self._ll(xe)[1]


def fit_kernel_regression(
    x, y, *, variant="nw", bandwidth_scale=1.0, bandwidth=None,
    weights=None, ridge=1e-8, window=5.0, allow_signed=False,
) -> KernelRegression:
    """Nadaraya-Watson ('nw') or locally linear ('ll') regression with a
    Gaussian product kernel and rule-of-thumb bandwidths.

    ``allow_signed`` admits signed row weights (mixture differencing);
    bandwidths are then computed from the unweighted design.
    """
    if variant not in ("nw", "ll"):
        raise ValueError("variant must be 'nw' or 'll'")
    x = as_matrix(x)
    y = np.asarray(y, dtype=np.float64)
    wt = _check_training(x, y, weights, allow_signed=allow_signed)
    if bandwidth is not None:
        h = np.asarray(bandwidth, dtype=np.float64) * np.ones(x.shape[1])
        if (h <= 0).any():
            raise ValueError("bandwidth must be positive")
    else:
        h = silverman_bandwidth(x, bandwidth_scale)
    return KernelRegression(x.copy(), y.copy(), variant, h, wt, ridge, window)


# ---------------------------------------------------------------------------
# polynomial series regression


def tensor_exponents(d, degree):
    """Exponent tuples of the degree-``degree`` tensor-product basis
    (each coordinate's exponent at most ``degree``), in a fixed order:
    sorted by total degree, then lexicographically."""
    exps = list(itertools.product(range(degree + 1), repeat=d))
    exps.sort(key=lambda e: (sum(e), e))
    return np.asarray(exps, dtype=np.int64)


def _monomials(x, exps):
    n = x.shape[0]
    out = np.ones((n, exps.shape[0]))
    for j, e in enumerate(exps):
        for k, p in enumerate(e):
            if p:
                out[:, j] *= x[:, k] ** p
    return out


def _pivoted_keep(gram, tol=1e-10):
    # greedy pivoted Cholesky on the Gram matrix: returns the kept columns
    K = gram.shape[0]
    work = gram.copy()
    diag = np.diag(work).copy()
    thresh = tol * max(diag.max(), 1e-300)
    kept = []
    L = np.zeros((K, K))
    for step in range(K):
        j = int(np.argmax(diag))
        if diag[j] <= thresh:
            break
        kept.append(j)
        ell = (work[:, j] - L[:, :step] @ L[j, :step]) / math.sqrt(diag[j])
        L[:, step] = ell
        diag = diag - ell * ell
        diag[j] = -np.inf
    return sorted(kept)


class SeriesRegression(FittedFn):
    kind = "series"

    def __init__(self, exps, beta, report):
        super().__init__()
        self.exps = exps
        self.beta = beta
        self.report = report

    def __call__(self, xe):
        return _monomials(as_matrix(xe), self.exps) @ self.beta

    def grad(self, xe):
        xe = as_matrix(xe)
        m, d = xe.shape
        out = np.zeros((m, d))
        for k in range(d):
            dexp = self.exps.copy()
            fac = dexp[:, k].astype(np.float64)
            dexp[:, k] = np.maximum(dexp[:, k] - 1, 0)
            out[:, k] = _monomials(xe, dexp) @ (self.beta * fac)
        return out

    @property
    def coeffs(self):
        return self.beta


def fit_series_regression(
    x, y, *, degree=2, weights=None, allow_signed=False
) -> SeriesRegression:
    """OLS on the tensor-product polynomial basis; collinear columns are
    dropped by pivoted elimination (flagged), and a basis richer than n/2
    terms is rejected.  Signed weights (``allow_signed``) switch the solver
    to the normal equations."""
    x = as_matrix(x)
    y = np.asarray(y, dtype=np.float64)
    wt = _check_training(x, y, weights, allow_signed=allow_signed)
    exps = tensor_exponents(x.shape[1], int(degree))
    K = exps.shape[0]
    if K > x.shape[0] / 2:
        raise ValueError(f"basis too rich: {K} terms for {x.shape[0]} rows")
    B = _monomials(x, exps)
    beta = np.zeros(K)
    if (wt < 0).any():
        gram = B.T @ (wt[:, None] * B)
        rhs = B.T @ (wt * y)
        # signed Gram may be indefinite; select columns on the unsigned one
        kept = _pivoted_keep(B.T @ B)
        dropped = K - len(kept)
        sol = np.linalg.solve(
            gram[np.ix_(kept, kept)] + 1e-12 * np.eye(len(kept)), rhs[kept]
        )
        beta[kept] = sol
    else:
        sw = np.sqrt(wt)
        Bw = B * sw[:, None]
        yw = y * sw
        gram = Bw.T @ Bw
        kept = _pivoted_keep(gram)
        dropped = K - len(kept)
        sol, *_ = np.linalg.lstsq(Bw[:, kept], yw, rcond=None)
        beta[kept] = sol
    report = {
        "degree": int(degree),
        "n_terms": K,
        "dropped_collinear": dropped,
        "exponents": exps.tolist(),
    }
    return SeriesRegression(exps, beta, report)


# ---------------------------------------------------------------------------
# logit lasso


def _sigmoid(eta):
    out = np.empty_like(eta)
    posm = eta >= 0
    out[posm] = 1.0 / (1.0 + np.exp(-eta[posm]))
    ex = np.exp(eta[~posm])
    out[~posm] = ex / (1.0 + ex)
    return out


def log_loss(y, p, clip=1e-6):
    p = np.clip(p, clip, 1.0 - clip)
    return float(np.mean(-y * np.log(p) - (1.0 - y) * np.log(1.0 - p)))


class LogitLasso(FittedFn):
    kind = "logit-lasso"

    def __init__(self, mu, sd, b, clip, exps, report):
        super().__init__()
        self.mu = mu
        self.sd = sd
        self.b = b  # standardized scale, b[0] = intercept
        self.clip = clip
        self.exps = exps
        self.report = report

    def _design(self, xe):
        z = _monomials(as_matrix(xe), self.exps)
        return (z - self.mu[None, :]) / self.sd[None, :]

    def __call__(self, xe):
        eta = self.b[0] + self._design(xe) @ self.b[1:]
        return np.clip(_sigmoid(eta), self.clip, 1.0 - self.clip)

    @property
    def coeffs(self):
        # intercept and slopes on the original (unstandardized) basis
        slopes = self.b[1:] / self.sd
        b0 = self.b[0] - float(self.mu @ slopes)
        return np.concatenate([[b0], slopes])


def _lasso_irls(X, y, lam, b, max_sweeps, tol, coef_bound, clip):
    """IRLS with a coordinate-descent inner solver; returns the updated
    coefficient vector, the per-sweep objective segments, and a separation
    flag. ``X`` includes the intercept column and ``b`` is warm-started."""
    n, k = X.shape
    pen = np.ones(k)
    pen[0] = 0.0
    segments = []
    sep = False
    for _ in range(60):
        eta = X @ b
        p = np.clip(_sigmoid(eta), clip, 1.0 - clip)
        w = np.maximum(p * (1.0 - p), 1e-6)
        z = eta + (y - p) / w
        aj = (w @ (X * X)) / n
        b_old = b.copy()
        _, trace = impl.wls_cd(X, z, w, lam, pen, b, aj, max_sweeps, tol)
        segments.append(np.asarray(trace))
        if np.abs(b[1:]).max(initial=0.0) > coef_bound:
            sep = True
            break
        if np.abs(b - b_old).max() < 1e-8:
            break
    return b, segments, sep


def fit_logit_lasso(
    x, y, *, penalties=None, n_penalties=20, cv_folds=5, seed=0,
    max_sweeps=2000, tol=1e-8, clip=1e-6, coef_bound=30.0, degree=1,
) -> LogitLasso:
    """L1-penalized logistic regression on a polynomial expansion of x
    (``degree=1`` keeps raw columns). The penalty is chosen by K-fold
    cross-validated log-loss over a descending grid with warm starts;
    ties prefer the heavier penalty. ``cv_folds=0`` takes the first
    penalty as given."""
    x = as_matrix(x)
    y = np.asarray(y, dtype=np.float64)
    _check_training(x, y, None)
    if not np.isin(y, (0.0, 1.0)).all():
        raise ValueError("logit-lasso expects 0/1 targets")
    exps = tensor_exponents(x.shape[1], int(degree))
    exps = exps[1:]  # drop the constant: the intercept is explicit
    Z = _monomials(x, exps)
    n, k = Z.shape
    mu = Z.mean(axis=0)
    sd = Z.std(axis=0, ddof=0)
    sd = np.where(sd > 0, sd, 1.0)
    Zs = (Z - mu[None, :]) / sd[None, :]
    X = np.column_stack([np.ones(n), Zs])

    ybar = y.mean()
    if penalties is None:
        lam_max = max(float(np.abs(Zs.T @ (y - ybar)).max()) / n, 1e-8)
        grid = np.geomspace(lam_max, lam_max * 1e-3, int(n_penalties))
    else:
        grid = np.sort(np.asarray(penalties, dtype=np.float64))[::-1]
    b0_init = math.log(max(ybar, clip) / max(1.0 - ybar, clip))

    def path(Xt, yt, lams):
        b = np.zeros(Xt.shape[1])
        b[0] = b0_init
        out = []
        sep_at = None
        for i, lam in enumerate(lams):
            b, _, sep = _lasso_irls(Xt, yt, lam, b, max_sweeps, tol, coef_bound, clip)
            if sep:
                sep_at = i
                break
            out.append(b.copy())
        return out, sep_at

    chosen = 0
    cv_losses = None
    if cv_folds and len(grid) > 1:
        rng = child_rng(seed, STREAM_LEARNER, 0)
        perm = rng.permutation(n)
        losses = np.full((cv_folds, len(grid)), np.inf)
        bounds = np.linspace(0, n, cv_folds + 1).astype(int)
        for f in range(cv_folds):
            test = perm[bounds[f]:bounds[f + 1]]
            train = np.setdiff1d(perm, test)
            coefs, _ = path(X[train], y[train], grid)
            for i, bvec in enumerate(coefs):
                p = np.clip(_sigmoid(X[test] @ bvec), clip, 1.0 - clip)
                losses[f, i] = log_loss(y[test], p, clip)
        cv_losses = losses.mean(axis=0)
        chosen = int(np.argmin(cv_losses))
    coefs, sep_at = path(X, y, grid[: chosen + 1])
    if not coefs:
        b = np.zeros(X.shape[1])
        b[0] = b0_init
        sep_flag = True
        lam_used = float(grid[0])
    else:
        use = min(chosen, len(coefs) - 1)
        b = coefs[use]
        sep_flag = sep_at is not None
        lam_used = float(grid[use])
    # refit trace at the final penalty for the objective-monotonicity report
    b_trace = b.copy()
    _, segments, _ = _lasso_irls(X, y, lam_used, b_trace, max_sweeps, tol, coef_bound, clip)
    report = {
        "lambda_grid": grid.tolist(),
        "cv_logloss": None if cv_losses is None else cv_losses.tolist(),
        "lambda": lam_used,
        "n_nonzero": int(np.count_nonzero(b[1:])),
        "separation": bool(sep_flag),
        "cd_segments": [s.tolist() for s in segments],
        "degree": int(degree),
    }
    return LogitLasso(mu, sd, b_trace, clip, exps, report)


# ---------------------------------------------------------------------------
# tree ensembles


def _resolve_task(task, y):
    if task == "auto":
        return "classification" if np.isin(y, (0.0, 1.0)).all() else "regression"
    return task


class TreeEnsemble(FittedFn):
    def __init__(self, trees, task, clip):
        super().__init__()
        self.trees = trees
        self.task = task
        self.clip = clip

    def _tree_values(self, xe, tree):
        feature, thr, left, right, value = tree
        return value[impl.apply_tree(feature, thr, left, right, xe)]


class Forest(TreeEnsemble):
    kind = "forest"

    def __call__(self, xe):
        xe = as_matrix(xe)
        acc = np.zeros(xe.shape[0])
        for tree in self.trees:
            acc += self._tree_values(xe, tree)
        acc /= len(self.trees)
        if self.task == "classification":
            return np.clip(acc, self.clip, 1.0 - self.clip)
        return acc


class Boosted(TreeEnsemble):
    kind = "boosted"

    def __init__(self, trees, task, clip, f0, rate):
        super().__init__(trees, task, clip)
        self.f0 = f0
        self.rate = rate

    def __call__(self, xe):
        xe = as_matrix(xe)
        f = np.full(xe.shape[0], self.f0)
        for tree in self.trees:
            f += self.rate * self._tree_values(xe, tree)
        if self.task == "classification":
            return np.clip(_sigmoid(f), self.clip, 1.0 - self.clip)
        return f


def _feature_table(rng, cap, p, mtry):
    if mtry >= p:
        return np.arange(p, dtype=np.int64)[None, :]
    tiled = np.tile(np.arange(p, dtype=np.int64), (cap, 1))
    return rng.permuted(tiled, axis=1)


def fit_tree_ensemble(
    x, y, *, mode="forest", task="auto", n_trees=200, min_leaf=5,
    max_depth=None, learning_rate=0.1, seed=0, clip=1e-6, depth=4,
) -> TreeEnsemble:
    """Bagged CART forest (per-node feature subsampling, sqrt(p) rounded
    up) or gradient boosting (depth-limited trees, shrinkage, squared
    error for regression / log-loss with Newton leaf values for 0/1
    targets). Deterministic given the seed."""
    x = as_matrix(x)
    y = np.asarray(y, dtype=np.float64)
    _check_training(x, y, None)
    n, p = x.shape
    task = _resolve_task(task, y)
    if task == "classification" and not np.isin(y, (0.0, 1.0)).all():
        raise ValueError("classification needs 0/1 targets")
    sorted_idx = np.argsort(x, axis=0, kind="stable").T.copy()
    cap = 2 * int(n / min_leaf + 1.0) + 3

    if mode == "forest":
        mtry = int(math.ceil(math.sqrt(p)))
        md = -1 if max_depth is None else int(max_depth)
        trees = []
        for t in range(int(n_trees)):
            rng = child_rng(seed, STREAM_LEARNER, t)
            cnt = np.bincount(rng.integers(0, n, n), minlength=n).astype(np.float64)
            table = _feature_table(rng, cap, p, mtry)
            trees.append(impl.build_tree(x, y, cnt, sorted_idx, table, mtry, md, float(min_leaf)))
        fit = Forest(trees, task, clip)
        fit.report = {"mode": mode, "task": task, "n_trees": len(trees), "mtry": mtry}
        return fit

    if mode != "boosted":
        raise ValueError("mode must be 'forest' or 'boosted'")
    cnt = np.ones(n)
    table = np.arange(p, dtype=np.int64)[None, :]
    rate = float(learning_rate)
    md = int(depth)
    trees = []
    loss_trace = []
    if task == "classification":
        pbar = min(max(y.mean(), clip), 1.0 - clip)
        f0 = math.log(pbar / (1.0 - pbar))
        f = np.full(n, f0)
        for t in range(int(n_trees)):
            prob = _sigmoid(f)
            resid = y - prob
            feature, thr, left, right, value = impl.build_tree(
                x, resid, cnt, sorted_idx, table, p, md, float(min_leaf)
            )
            leaf = impl.apply_tree(feature, thr, left, right, x)
            num = np.bincount(leaf, weights=resid, minlength=value.shape[0])
            den = np.bincount(leaf, weights=prob * (1.0 - prob), minlength=value.shape[0])
            value = np.where(den > 1e-12, num / np.maximum(den, 1e-12), 0.0)
            value = np.clip(value, -4.0, 4.0)
            trees.append((feature, thr, left, right, value))
            f += rate * value[leaf]
            loss_trace.append(log_loss(y, _sigmoid(f), clip))
    else:
        f0 = float(y.mean())
        f = np.full(n, f0)
        for t in range(int(n_trees)):
            resid = y - f
            tree = impl.build_tree(x, resid, cnt, sorted_idx, table, p, md, float(min_leaf))
            trees.append(tree)
            leaf = impl.apply_tree(tree[0], tree[1], tree[2], tree[3], x)
            f += rate * tree[4][leaf]
            loss_trace.append(float(np.mean((y - f) ** 2)))
    fit = Boosted(trees, task, clip, f0, rate)
    fit.report = {
        "mode": mode, "task": task, "n_trees": len(trees),
        "depth": md, "learning_rate": rate, "loss_trace": loss_trace,
    }
    return fit


# ---------------------------------------------------------------------------
# kernel (conditional) density


class CondDensity(FittedFn):
    kind = "cond-density"

    def __init__(self, t, c, wt, ht, hc, floor, degenerate):
        super().__init__()
        self.t = t
        self.c = c  # None for the unconditional case
        self.wt = wt
        self.ht = ht
        self.hc = hc
        self.floor = floor
        self.report = {
            "bandwidth_target": None if ht is None else ht.tolist(),
            "bandwidth_cond": None if hc is None else hc.tolist(),
            "floored": 0,
            "degenerate_target": bool(degenerate),
        }

    def __call__(self, te, ce=None):
        te = as_matrix(te)
        m = te.shape[0]
        if self.report["degenerate_target"]:
            self.report["floored"] += m
            return np.full(m, self.floor)
        coef = self.wt / self.wt.sum()
        if self.c is None:
            dens = impl.gauss_sum(self.t, coef, te, self.ht)
        else:
            if ce is None:
                raise ValueError("conditioning values required")
            ce = as_matrix(ce)
            joint = impl.gauss_sum(
                np.column_stack([self.t, self.c]), coef,
                np.column_stack([te, ce]), np.concatenate([self.ht, self.hc]),
            )
            marg = impl.gauss_sum(self.c, coef, ce, self.hc)
            dens = joint / np.maximum(marg, 1e-300)
        flo = dens < self.floor
        self.report["floored"] += int(flo.sum())
        return np.maximum(dens, self.floor)

    def grad(self, te, ce=None):
        # gradient in the target coordinates (unconditional case only)
        if self.c is not None:
            raise NotImplementedError("grad implemented for the unconditional density")
        if self.report["degenerate_target"]:
            te = as_matrix(te)
            return np.zeros((te.shape[0], self.t.shape[1]))
        coef = self.wt / self.wt.sum()
        _, g = impl.gauss_sum_grad(self.t, coef, as_matrix(te), self.ht)
        return g


def fit_conditional_density(
    t, c=None, *, bandwidth_scale=1.0, bandwidth=None, floor=1e-4, weights=None,
    allow_signed=False,
) -> CondDensity:
    """Kernel estimate of f(t | c) as a ratio of joint to marginal Gaussian
    product KDEs sharing the conditioning bandwidths; ``c=None`` gives the
    unconditional density. Zero-variance conditioning dimensions are
    dropped (recovering the unconditional fit exactly); a zero-variance
    target makes every evaluation return the floor, flagged."""
    t = as_matrix(t)
    if t.shape[0] < 10:
        raise ValueError("conditional density needs at least 10 rows")
    wt = _check_training(t, np.zeros(t.shape[0]), weights, allow_signed=allow_signed)
    degenerate = bool((t.std(axis=0) <= 0).any())
    cmat = None
    hc = None
    if c is not None:
        cfull = as_matrix(c)
        if cfull.shape[0] != t.shape[0]:
            raise ValueError("t and c row counts differ")
        keep = cfull.std(axis=0) > 0
        if keep.any():
            cmat = np.ascontiguousarray(cfull[:, keep])
    joint = t if cmat is None else np.column_stack([t, cmat])
    if bandwidth is not None:
        h = np.asarray(bandwidth, dtype=np.float64) * np.ones(joint.shape[1])
        if (h <= 0).any():
            raise ValueError("bandwidth must be positive")
    elif degenerate:
        h = np.ones(joint.shape[1])
    else:
        h = silverman_bandwidth(joint, bandwidth_scale)
    ht = h[: t.shape[1]]
    if cmat is not None:
        hc = h[t.shape[1]:]
    return CondDensity(t.copy(), cmat, wt, ht, hc, floor, degenerate)


# ---------------------------------------------------------------------------
# dispatch


def fit_learner(
    spec: LearnerSpec, x, y, *, seed=0, weights=None, allow_signed=False
) -> FittedFn:
    """Fit any learner from its spec. Weight support: kernel, series, and
    cond-density (the refit-based influence routines need it)."""
    params = spec.resolved()
    if spec.kind == "kernel":
        return fit_kernel_regression(
            x, y, weights=weights, allow_signed=allow_signed, **params
        )
    if spec.kind == "series":
        return fit_series_regression(
            x, y, weights=weights, allow_signed=allow_signed, **params
        )
    if spec.kind == "logit-lasso":
        if weights is not None:
            raise ValueError("logit-lasso does not support weights")
        return fit_logit_lasso(x, y, seed=seed, **params)
    if spec.kind in ("forest", "boosted"):
        if weights is not None:
            raise ValueError("tree ensembles do not support weights")
        return fit_tree_ensemble(x, y, mode=spec.kind, seed=seed, **params)
    if spec.kind == "cond-density":
        return fit_conditional_density(
            x, c=y, weights=weights, allow_signed=allow_signed, **params
        )
    raise ValueError(f"unknown learner kind {spec.kind!r}")
