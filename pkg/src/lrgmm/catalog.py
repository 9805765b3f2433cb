"""Doubly robust estimation designs with known truths.

Each design bundles a simulation DGP (sampler, true parameter, exact
nuisance functions), a MomentModel whose adjusted moment is doubly
robust, a library of nuisance perturbation directions for the Gateaux
checker, and deliberately wrong nuisances for the robustness checker.

Designs:

* ``MissingDataMean``: mean of an outcome observed at random given a
  covariate; gamma is the observed-outcome regression, lambda the
  inverse-propensity weight.
* ``IntegratedSquaredDensity``: integral of the squared density of x;
  gamma and lambda are both that density.
* ``DensityWeightedDerivative``: minus twice the mean of y times the
  density gradient; lambda is twice the gradient of the kernel-smoothed
  product of the regression and the density.
* ``SurplusBound``: exponentially weighted integral of a conditional
  expectation over the first price coordinate; lambda is the weight
  over the conditional density.
"""

from __future__ import annotations

import math

import numpy as np

from .data import Dataset
from .gmm import MomentModel, NuisanceSpec
from .influence import shift_handles
from .learners import LearnerSpec, fit_learner

SQRT2PI = math.sqrt(2.0 * math.pi)


def gaussian_pdf(x, mu=0.0, sd=1.0):
    x = np.asarray(x, dtype=np.float64)
    u = (x - mu) / sd
    return np.exp(-0.5 * u * u) / (sd * SQRT2PI)


def gaussian_pdf_grad(x, mu=0.0, sd=1.0):
    x = np.asarray(x, dtype=np.float64)
    return -((x - mu) / sd ** 2) * gaussian_pdf(x, mu, sd)


class FnHandle:
    """Nuisance handle wrapping plain callables (optional gradient)."""

    def __init__(self, fn, grad_fn=None):
        self.fn = fn
        self.grad_fn = grad_fn

    def __call__(self, *args, **kwargs):
        return self.fn(*args, **kwargs)

    def grad(self, *args, **kwargs):
        if self.grad_fn is None:
            raise NotImplementedError("no gradient for this handle")
        return self.grad_fn(*args, **kwargs)


class Design:
    """Base: default perturbation path is additive in each named role."""

    name = "design"
    beta0 = None

    def true_nuisances(self) -> dict:
        raise NotImplementedError

    def sample(self, n, rng) -> Dataset:
        raise NotImplementedError

    def perturbed_nuisances(self, direction: dict, tau: float) -> dict:
        return shift_handles(self.true_nuisances(), direction, tau)


# ---------------------------------------------------------------------------
# missing-data mean


def _mdm_pi0(u):
    return 1.0 / (1.0 + np.exp(-(0.2 + u)))


def _mdm_gamma0(u):
    return 1.0 + u + u * u


class MissingDataMean(Design):
    """E[y*] when y* is seen only where a=1, with P(a=1|u) bounded away
    from zero. Truth: u ~ U(0,1), y* = 1 + u + u^2 + N(0,1)."""

    name = "missing-data-mean"
    beta0 = np.array([11.0 / 6.0])

    def sample(self, n, rng) -> Dataset:
        u = rng.uniform(0.0, 1.0, n)
        a = (rng.uniform(0.0, 1.0, n) < _mdm_pi0(u)).astype(np.float64)
        y = a * (_mdm_gamma0(u) + rng.standard_normal(n))
        return Dataset.from_columns(
            {"a": a, "u": u, "y": y},
            {"a": "indicator", "u": "regressor", "y": "outcome"},
        )

    def true_nuisances(self) -> dict:
        return {
            "reg": FnHandle(lambda u: _mdm_gamma0(np.asarray(u, float).ravel())),
            "weight": FnHandle(
                lambda a, u: np.asarray(a, float).ravel()
                / _mdm_pi0(np.asarray(u, float).ravel())
            ),
        }

    def direction_library(self):
        ind = lambda a: np.asarray(a, float).ravel()
        uu = lambda u: np.asarray(u, float).ravel()
        return [
            ("reg-const", {"reg": FnHandle(lambda u: np.ones_like(uu(u)))}),
            ("reg-linear", {"reg": FnHandle(lambda u: uu(u) - 0.5)}),
            ("reg-oscillatory", {"reg": FnHandle(lambda u: np.cos(3.0 * np.pi * uu(u)))}),
            ("weight-const", {"weight": FnHandle(lambda a, u: ind(a))}),
            ("weight-linear", {"weight": FnHandle(lambda a, u: ind(a) * (uu(u) - 0.5))}),
        ]

    def wrong_gamma(self) -> dict:
        return {"reg": FnHandle(lambda u: _mdm_gamma0(np.asarray(u, float).ravel()) + 1.0)}

    def wrong_lambda(self) -> dict:
        # wrong propensity, but still supported on a=1
        return {
            "weight": FnHandle(
                lambda a, u: np.asarray(a, float).ravel()
                / (0.4 + 0.2 * np.asarray(u, float).ravel())
            )
        }

    def model(
        self,
        gamma_learner: LearnerSpec = LearnerSpec.series(degree=2),
        prop_learner: LearnerSpec | None = None,
        trim: float = 0.05,
    ) -> MomentModel:
        """prop_learner None uses the known propensity."""

        def fit_reg(spec, data, seed, beta):
            keep = data.col("a") > 0.5
            fn = fit_learner(spec.learner, data.col("u")[keep], data.col("y")[keep], seed=seed)
            return FnHandle(lambda u: fn(np.asarray(u, float).reshape(-1, 1)))

        def fit_weight(spec, data, seed, beta):
            if spec.learner is None:
                return self.true_nuisances()["weight"]
            fn = fit_learner(spec.learner, data.col("u"), data.col("a"), seed=seed)

            def lam(a, u):
                pi = np.clip(fn(np.asarray(u, float).reshape(-1, 1)), trim, 1.0)
                return np.asarray(a, float).ravel() / pi

            return FnHandle(lam)

        def m_fn(data, beta, nuis):
            return (nuis["reg"](data.col("u")) - beta[0])[:, None]

        def phi_fn(data, beta, nuis):
            lam = nuis["weight"](data.col("a"), data.col("u"))
            resid = data.col("y") - nuis["reg"](data.col("u"))
            return (lam * resid)[:, None]

        return MomentModel(
            name=self.name, r=1, beta_dim=1, m=m_fn, phi=phi_fn,
            nuisances=(
                NuisanceSpec("reg", gamma_learner, fit_reg, group="gamma"),
                NuisanceSpec("weight", prop_learner, fit_weight, group="lambda"),
            ),
            beta_space=np.array([[-10.0, 10.0]]),
        )


# ---------------------------------------------------------------------------
# integrated squared density


def _trapz_weights(grid):
    w = np.full(grid.shape[0], grid[1] - grid[0])
    w[0] *= 0.5
    w[-1] *= 0.5
    return w


class IntegratedSquaredDensity(Design):
    """beta0 = integral of the squared density of x; x ~ N(0,1)."""

    name = "integrated-squared-density"
    beta0 = np.array([1.0 / (2.0 * math.sqrt(math.pi))])

    def __init__(self, grid=(-8.0, 8.0, 2048)):
        lo, hi, m = grid
        self.grid = np.linspace(lo, hi, int(m))
        self._gw = _trapz_weights(self.grid)

    def sample(self, n, rng) -> Dataset:
        return Dataset.from_columns(
            {"x": rng.standard_normal(n)}, {"x": "regressor"}
        )

    def true_nuisances(self) -> dict:
        return {
            "dens": FnHandle(gaussian_pdf),
            "dens_adj": FnHandle(gaussian_pdf),
        }

    def direction_library(self):
        d1 = FnHandle(lambda x: 0.5 * (np.asarray(x, float).ravel() ** 2 - 1.0) * gaussian_pdf(x))
        d2 = FnHandle(lambda x: np.asarray(x, float).ravel() * gaussian_pdf(x))
        d3 = FnHandle(lambda x: gaussian_pdf(x, 0.5, 1.2) - gaussian_pdf(x, -0.5, 0.8))
        return [
            ("dens-hermite2", {"dens": d1}),
            ("dens-odd", {"dens": d2}),
            ("adj-shifted", {"dens_adj": d3}),
            ("adj-hermite2", {"dens_adj": d1}),
            ("joint", {"dens": d2, "dens_adj": d3}),
        ]

    def wrong_gamma(self) -> dict:
        return {"dens": FnHandle(lambda x: gaussian_pdf(x, 0.3, 1.3))}

    def wrong_lambda(self) -> dict:
        return {"dens_adj": FnHandle(lambda x: gaussian_pdf(x, -0.2, 0.8))}

    def model(self, learner: LearnerSpec = LearnerSpec.cond_density()) -> MomentModel:
        grid = self.grid
        gw = self._gw

        def fit_dens(spec, data, seed, beta):
            fn = fit_learner(spec.learner, data.col("x"), None, seed=seed)
            return fn

        def m_fn(data, beta, nuis):
            return (nuis["dens"](data.col("x")) - beta[0])[:, None]

        def phi_fn(data, beta, nuis):
            lam_grid = nuis["dens_adj"](grid)
            gam_grid = nuis["dens"](grid)
            cross = float(gw @ (lam_grid * gam_grid))
            return (nuis["dens_adj"](data.col("x")) - cross)[:, None]

        return MomentModel(
            name=self.name, r=1, beta_dim=1, m=m_fn, phi=phi_fn,
            nuisances=(
                NuisanceSpec("dens", learner, fit_dens, group="gamma"),
                NuisanceSpec("dens_adj", learner, fit_dens, group="lambda"),
            ),
            beta_space=np.array([[-5.0, 5.0]]),
        )


# ---------------------------------------------------------------------------
# density-weighted average derivative


class DensityWeightedDerivative(Design):
    """beta0 = -2 E[y * d(density)/dx]; x ~ N(0,1), y = x + noise."""

    name = "density-weighted-derivative"
    beta0 = np.array([1.0 / (2.0 * math.sqrt(math.pi))])

    def __init__(self, grid=(-8.0, 8.0, 2048), noise_sd=0.5):
        lo, hi, m = grid
        self.grid = np.linspace(lo, hi, int(m))
        self._gw = _trapz_weights(self.grid)
        self.noise_sd = float(noise_sd)

    def sample(self, n, rng) -> Dataset:
        x = rng.standard_normal(n)
        y = x + self.noise_sd * rng.standard_normal(n)
        return Dataset.from_columns(
            {"x": x, "y": y}, {"x": "regressor", "y": "outcome"}
        )

    @staticmethod
    def _lam0(x):
        x = np.asarray(x, float).ravel()
        # 2 d/dx [x * pdf(x)] = 2 pdf(x) (1 - x^2)
        return 2.0 * gaussian_pdf(x) * (1.0 - x * x)

    def true_nuisances(self) -> dict:
        dens = FnHandle(
            gaussian_pdf,
            lambda x: gaussian_pdf_grad(np.asarray(x, float).ravel()).reshape(-1, 1),
        )
        return {"dens": dens, "deriv": FnHandle(self._lam0)}

    def direction_library(self):
        xv = lambda x: np.asarray(x, float).ravel()
        d1 = FnHandle(
            lambda x: 0.5 * (xv(x) ** 2 - 1.0) * gaussian_pdf(x),
            lambda x: (0.5 * xv(x) * (3.0 - xv(x) ** 2) * gaussian_pdf(x)).reshape(-1, 1),
        )
        d2 = FnHandle(
            lambda x: xv(x) * gaussian_pdf(x),
            lambda x: ((1.0 - xv(x) ** 2) * gaussian_pdf(x)).reshape(-1, 1),
        )
        d3 = FnHandle(
            lambda x: gaussian_pdf(x, 0.5, 1.2) - gaussian_pdf(x, -0.5, 0.8),
            lambda x: (
                gaussian_pdf_grad(xv(x), 0.5, 1.2) - gaussian_pdf_grad(xv(x), -0.5, 0.8)
            ).reshape(-1, 1),
        )
        lam1 = FnHandle(lambda x: np.cos(xv(x)) * np.exp(-0.25 * xv(x) ** 2))
        lam2 = FnHandle(lambda x: xv(x) * np.exp(-0.25 * xv(x) ** 2))
        return [
            ("dens-hermite2", {"dens": d1}),
            ("dens-odd", {"dens": d2}),
            ("dens-shifted", {"dens": d3}),
            ("deriv-damped-cos", {"deriv": lam1}),
            ("deriv-damped-odd", {"deriv": lam2}),
        ]

    def wrong_gamma(self) -> dict:
        return {
            "dens": FnHandle(
                lambda x: gaussian_pdf(x, 0.2, 1.2),
                lambda x: gaussian_pdf_grad(np.asarray(x, float).ravel(), 0.2, 1.2).reshape(-1, 1),
            )
        }

    def wrong_lambda(self) -> dict:
        return {
            "deriv": FnHandle(
                lambda x: np.cos(np.asarray(x, float).ravel())
                * np.exp(-0.25 * np.asarray(x, float).ravel() ** 2)
            )
        }

    def model(self, learner: LearnerSpec = LearnerSpec.cond_density()) -> MomentModel:
        grid = self.grid
        gw = self._gw

        def fit_dens(spec, data, seed, beta):
            return fit_learner(spec.learner, data.col("x"), None, seed=seed)

        def fit_deriv(spec, data, seed, beta):
            # lambda-hat = 2 d/dx of the kernel smooth of y against x
            from ._backend import impl
            from .learners import silverman_bandwidth

            xt = data.col("x").reshape(-1, 1)
            coef = data.col("y") / data.n
            h = silverman_bandwidth(xt)

            def lam(x):
                xe = np.asarray(x, float).reshape(-1, 1)
                _, g = impl.gauss_sum_grad(xt, coef, xe, h)
                return 2.0 * g[:, 0]

            return FnHandle(lam)

        def m_fn(data, beta, nuis):
            dgam = nuis["dens"].grad(data.col("x"))[:, 0]
            return (-2.0 * data.col("y") * dgam - beta[0])[:, None]

        def phi_fn(data, beta, nuis):
            lam_grid = nuis["deriv"](grid)
            gam_grid = nuis["dens"](grid)
            cross = float(gw @ (lam_grid * gam_grid))
            return (nuis["deriv"](data.col("x")) - cross)[:, None]

        return MomentModel(
            name=self.name, r=1, beta_dim=1, m=m_fn, phi=phi_fn,
            nuisances=(
                NuisanceSpec("dens", learner, fit_dens, group="gamma"),
                NuisanceSpec("deriv", None, fit_deriv, group="lambda"),
            ),
            beta_space=np.array([[-5.0, 5.0]]),
        )


# ---------------------------------------------------------------------------
# surplus bound


def surplus_weight(p1, y, B=1.0, p_lo=1.2, p_hi=1.8, w_of_y=None):
    """w(y) 1(p_lo <= p1 <= p_hi) exp(-B (p1 - p_lo))."""
    p1 = np.asarray(p1, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    wy = np.ones_like(y) if w_of_y is None else w_of_y(y)
    inside = (p1 >= p_lo) & (p1 <= p_hi)
    return wy * inside * np.exp(-B * (p1 - p_lo))


class SurplusBound(Design):
    """Exponentially weighted average of E[q | p1, p2, y] over p1.

    q = (1+p1)^{-1} + 0.5 y + noise; p1 ~ U[1,2] independent of (p2, y),
    so the true conditional density of p1 is 1 and lambda0 equals the
    weight itself.
    """

    name = "surplus-bound"

    def __init__(self, B=1.0, p_lo=1.2, p_hi=1.8, noise_sd=0.1, n_nodes=80):
        self.B = float(B)
        self.p_lo = float(p_lo)
        self.p_hi = float(p_hi)
        self.noise_sd = float(noise_sd)
        x, w = np.polynomial.legendre.leggauss(int(n_nodes))
        self.nodes = 0.5 * (p_hi - p_lo) * x + 0.5 * (p_lo + p_hi)
        self.node_w = 0.5 * (p_hi - p_lo) * w
        # beta0 = int ell(t) (1+t)^{-1} dt + 0.5 E[y] int ell(t) dt
        i1 = float(self.node_w @ (np.exp(-self.B * (self.nodes - p_lo)) / (1.0 + self.nodes)))
        if self.B != 0:
            i2 = (1.0 - math.exp(-self.B * (p_hi - p_lo))) / self.B
        else:
            i2 = p_hi - p_lo
        self.beta0 = np.array([i1 + 0.25 * i2])

    def weight(self, p1, y):
        return surplus_weight(p1, y, self.B, self.p_lo, self.p_hi)

    def sample(self, n, rng) -> Dataset:
        p1 = rng.uniform(1.0, 2.0, n)
        p2 = rng.uniform(0.0, 1.0, n)
        y = rng.uniform(0.0, 1.0, n)
        q = 1.0 / (1.0 + p1) + 0.5 * y + self.noise_sd * rng.standard_normal(n)
        return Dataset.from_columns(
            {"q": q, "p1": p1, "p2": p2, "y": y},
            {"q": "outcome", "p1": "regressor", "p2": "regressor", "y": "regressor"},
        )

    @staticmethod
    def _gamma0(X):
        X = np.asarray(X, dtype=np.float64)
        return 1.0 / (1.0 + X[:, 0]) + 0.5 * X[:, 2]

    def true_nuisances(self) -> dict:
        return {
            "reg": FnHandle(self._gamma0),
            "weight": FnHandle(lambda X: self.weight(X[:, 0], X[:, 2])),
        }

    def direction_library(self):
        return [
            ("reg-const", {"reg": FnHandle(lambda X: np.ones(X.shape[0]))}),
            ("reg-price-wave", {"reg": FnHandle(lambda X: np.sin(2.0 * X[:, 0]))}),
            ("reg-cross", {"reg": FnHandle(lambda X: (X[:, 1] - 0.5) * (X[:, 2] - 0.5))}),
            ("weight-const", {"weight": FnHandle(lambda X: np.ones(X.shape[0]))}),
            ("weight-wave", {"weight": FnHandle(lambda X: np.sin(3.0 * X[:, 0]) * np.cos(2.0 * X[:, 1]))}),
        ]

    def wrong_gamma(self) -> dict:
        return {"reg": FnHandle(lambda X: self._gamma0(X) + 0.5 * np.sin(3.0 * X[:, 0]))}

    def wrong_lambda(self) -> dict:
        # as if the conditional density were 0.5 everywhere
        return {"weight": FnHandle(lambda X: 2.0 * self.weight(X[:, 0], X[:, 2]))}

    def _x_matrix(self, data):
        return np.column_stack([data.col("p1"), data.col("p2"), data.col("y")])

    def model(
        self,
        gamma_learner: LearnerSpec = LearnerSpec.series(degree=2),
        density_learner: LearnerSpec | None = None,
        floor=1e-4,
    ) -> MomentModel:
        """density_learner None uses the known uniform density (lambda0)."""
        nodes = self.nodes
        node_w = self.node_w
        design = self

        def fit_reg(spec, data, seed, beta):
            fn = fit_learner(spec.learner, design._x_matrix(data), data.col("q"), seed=seed)
            return FnHandle(lambda X: fn(np.asarray(X, float)))

        def fit_weight(spec, data, seed, beta):
            if spec.learner is None:
                return design.true_nuisances()["weight"]
            fn = fit_learner(
                spec.learner, data.col("p1"),
                np.column_stack([data.col("p2"), data.col("y")]), seed=seed,
            )

            def lam(X):
                X = np.asarray(X, dtype=np.float64)
                dens = np.maximum(fn(X[:, 0], X[:, 1:3]), floor)
                return design.weight(X[:, 0], X[:, 2]) / dens

            return FnHandle(lam)

        def m_fn(data, beta, nuis):
            p2 = data.col("p2")
            y = data.col("y")
            acc = np.zeros(data.n)
            for t, w in zip(nodes, node_w):
                Xt = np.column_stack([np.full(data.n, t), p2, y])
                acc += w * design.weight(np.full(data.n, t), y) * nuis["reg"](Xt)
            return (acc - beta[0])[:, None]

        def phi_fn(data, beta, nuis):
            X = design._x_matrix(data)
            lam = nuis["weight"](X)
            resid = data.col("q") - nuis["reg"](X)
            return (lam * resid)[:, None]

        return MomentModel(
            name=self.name, r=1, beta_dim=1, m=m_fn, phi=phi_fn,
            nuisances=(
                NuisanceSpec("reg", gamma_learner, fit_reg, group="gamma"),
                NuisanceSpec("weight", density_learner, fit_weight, group="lambda"),
            ),
            beta_space=np.array([[-5.0, 5.0]]),
        )


ALL_DESIGNS = {
    "missing-data-mean": MissingDataMean,
    "integrated-squared-density": IntegratedSquaredDensity,
    "density-weighted-derivative": DensityWeightedDerivative,
    "surplus-bound": SurplusBound,
}
