"""Cross-fitting fold plans.

A plan partitions row indices into L evaluation folds with complements
as training sets. With ``aux_split`` each complement is further halved
into disjoint training sets for the identifying-moment nuisances
("gamma" group) and the adjustment-term nuisances ("lambda" group).
``make_blocked_fold_plan`` keeps folds contiguous for time series.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .seeds import STREAM_FOLDS, child_rng


@dataclass(frozen=True)
class FoldPlan:
    n: int
    L: int
    seed: int
    aux_split: bool
    folds: tuple
    train: tuple
    aux_gamma: tuple
    aux_lambda: tuple

    def __post_init__(self):
        cover = np.sort(np.concatenate(self.folds))
        if not np.array_equal(cover, np.arange(self.n)):
            raise ValueError("folds must partition the row indices")
        sizes = [len(f) for f in self.folds]
        if max(sizes) - min(sizes) > 1:
            raise ValueError("fold sizes may differ by at most one")
        if self.L > 1:
            # L=1 is the diagnostic full-sample plan: training and
            # evaluation rows coincide there by design.
            for f, t in zip(self.folds, self.train):
                if np.intersect1d(f, t).size:
                    raise ValueError("a fold overlaps its training complement")
        if self.aux_split:
            for t, g, l in zip(self.train, self.aux_gamma, self.aux_lambda):
                if np.intersect1d(g, l).size:
                    raise ValueError("aux halves overlap")
                both = np.sort(np.concatenate([g, l]))
                if not np.array_equal(both, np.sort(t)):
                    raise ValueError("aux halves must cover the training complement")

    def train_for(self, fold: int, group: str = "gamma") -> np.ndarray:
        if not self.aux_split:
            return self.train[fold]
        if group == "gamma":
            return self.aux_gamma[fold]
        if group == "lambda":
            return self.aux_lambda[fold]
        raise ValueError(f"unknown nuisance group {group!r}")


def _finalize(n, L, seed, aux_split, folds):
    folds = tuple(np.sort(f) for f in folds)
    if L == 1:
        train = (np.arange(n),)
    else:
        train = tuple(np.setdiff1d(np.arange(n), f) for f in folds)
    aux_g, aux_l = (), ()
    if aux_split:
        gs, ls = [], []
        for t in train:
            half = len(t) // 2
            gs.append(t[:half])
            ls.append(t[half:])
        aux_g, aux_l = tuple(gs), tuple(ls)
    return FoldPlan(n, L, seed, aux_split, folds, train, aux_g, aux_l)


def _check_nl(n, L):
    # L=1 disables cross-fitting (full-sample nuisances, diagnostics only)
    if L < 1:
        raise ValueError("need at least one fold")
    if L > n:
        raise ValueError(f"too many folds: L={L} for n={n}")


def make_fold_plan(n, L=5, seed=0, aux_split=False) -> FoldPlan:
    """Uniform random partition into L folds of sizes differing by at
    most one; deterministic given the seed."""
    _check_nl(n, L)
    rng = child_rng(seed, STREAM_FOLDS)
    perm = rng.permutation(n)
    bounds = np.linspace(0, n, L + 1).astype(int)
    folds = [perm[bounds[i]:bounds[i + 1]] for i in range(L)]
    return _finalize(n, L, seed, aux_split, folds)


def make_blocked_fold_plan(n, L=5, aux_split=False) -> FoldPlan:
    """Contiguous blocks in row order, for serially dependent samples."""
    _check_nl(n, L)
    bounds = np.linspace(0, n, L + 1).astype(int)
    folds = [np.arange(bounds[i], bounds[i + 1]) for i in range(L)]
    return _finalize(n, L, 0, aux_split, folds)
