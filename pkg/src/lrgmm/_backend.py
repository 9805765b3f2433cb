"""Backend selection for the hot numeric kernels.

Two interchangeable implementations exist: ``_impl_numba`` (loop kernels
compiled with ``numba.njit``) and ``_impl_numpy`` (vectorized fallback).
The environment variable ``LRGMM_BACKEND`` picks one:

* ``auto`` (default): numba when importable, else numpy
* ``numba``: require the compiled path, raise if unavailable
* ``numpy``: force the pure-numpy path

Both backends implement the same function set and agree to float precision
on well-posed inputs; ``benchmarks/bench_backends.py`` times them side by
side. The selected name is exported as ``BACKEND`` so run manifests can
record it.
"""

from __future__ import annotations

import os

ENV_FLAG = "LRGMM_BACKEND"
_VALID = ("auto", "numba", "numpy")


def _resolve():
    choice = os.environ.get(ENV_FLAG, "auto").strip().lower()
    if choice not in _VALID:
        raise ValueError(f"{ENV_FLAG} must be one of {_VALID}, got {choice!r}")
    if choice in ("auto", "numba"):
        try:
            from . import _impl_numba as impl

            return impl, "numba"
        except ImportError:
            if choice == "numba":
                raise
    from . import _impl_numpy as impl

    return impl, "numpy"


impl, BACKEND = _resolve()
