"""Deterministic RNG derivation.

Every random object in the package is a ``numpy.random.Generator`` derived
from a master integer seed through ``SeedSequence(master, spawn_key=key)``.
The spawn key is a documented constant per purpose so that streams never
collide and adding replications never perturbs earlier ones:

* ``(STREAM_MC, i)``: Monte Carlo replication ``i``
* ``(STREAM_FOLDS,)``: fold-plan shuffling
* ``(STREAM_EVAL, j)``: fresh evaluation samples for diagnostics
* ``(STREAM_LEARNER, t)``: learner-internal randomness (tree ``t``, CV splits)
"""

from __future__ import annotations

import numpy as np

STREAM_MC = 1
STREAM_FOLDS = 2
STREAM_EVAL = 3
STREAM_LEARNER = 4


def child_rng(master_seed: int, *key: int) -> np.random.Generator:
    """Generator for stream ``key`` under ``master_seed``; reproducible and
    independent across distinct keys."""
    ss = np.random.SeedSequence(int(master_seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.PCG64(ss))


def derive_seed(master_seed: int, *key: int) -> int:
    """Deterministic integer seed for stream ``key``, for APIs that take a
    plain seed rather than a Generator."""
    ss = np.random.SeedSequence(int(master_seed), spawn_key=tuple(int(k) for k in key))
    return int(ss.generate_state(1, np.uint64)[0])
