"""Backend selection for the hot path kernels.

The compiled extension is preferred when importable; the NumPy fallback is
always available.  Set ``SQRTMC_BACKEND=python`` or ``=cython`` to force a
choice (forcing ``cython`` raises if the extension is missing).  Both
backends draw identical random streams, so switching backends changes
timings, not statistics.
"""

from __future__ import annotations

import os

from . import _kernels_py

_FORCED = os.environ.get("SQRTMC_BACKEND", "").strip().lower()

try:
    from . import _kernels_c
except ImportError:
    _kernels_c = None

if _FORCED == "python":
    _impl = _kernels_py
elif _FORCED == "cython":
    if _kernels_c is None:
        raise ImportError("SQRTMC_BACKEND=cython but the compiled extension is unavailable")
    _impl = _kernels_c
else:
    _impl = _kernels_c if _kernels_c is not None else _kernels_py

STOP_HORIZON = _kernels_py.STOP_HORIZON
STOP_HIT = _kernels_py.STOP_HIT
STOP_EXIT = _kernels_py.STOP_EXIT

euler_marginal = _impl.euler_marginal
euler_stopped = _impl.euler_stopped


def backend_name() -> str:
    return _impl.BACKEND


def available_backends() -> dict:
    """Name -> kernel module, for benchmarks and cross-checks."""
    out = {"python": _kernels_py}
    if _kernels_c is not None:
        out["cython"] = _kernels_c
    return out
