"""Kernel backend selection.

The hot inner loops (softmax rows, rotary rotation) exist twice: a
numba-jitted version and a pure-numpy fallback. The ATTNEDIT_BACKEND
environment variable picks one at import time:

    ATTNEDIT_BACKEND=numba   force numba (error if unavailable)
    ATTNEDIT_BACKEND=numpy   force the numpy fallback
    unset                    numba when importable, else numpy

Matrix products are not dispatched here; numpy's BLAS already wins there.
Run benchmarks/bench_kernels.py to compare the two paths.
"""

import os

from .errors import ConfigError

_requested = os.environ.get("ATTNEDIT_BACKEND", "").strip().lower()
if _requested not in ("", "numba", "numpy"):
    raise ConfigError(
        f"ATTNEDIT_BACKEND must be 'numba' or 'numpy', got {_requested!r}"
    )

if _requested == "numpy":
    from . import kernels_numpy as _impl

    _name = "numpy"
elif _requested == "numba":
    from . import kernels_numba as _impl

    _name = "numba"
else:
    try:
        from . import kernels_numba as _impl

        _name = "numba"
    except ImportError:
        from . import kernels_numpy as _impl

        _name = "numpy"

softmax_rows = _impl.softmax_rows
softmax_rows_grad = _impl.softmax_rows_grad
log_softmax_rows = _impl.log_softmax_rows
log_softmax_rows_grad = _impl.log_softmax_rows_grad
rope_rotate = _impl.rope_rotate


def active_backend() -> str:
    """Name of the kernel backend selected at import time."""
    return _name
