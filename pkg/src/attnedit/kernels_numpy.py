"""Pure-numpy reference implementations of the hot kernels.

Every function here has a numba twin in kernels_numba.py with identical
signature and semantics; backend.py picks one at import time. Keep the
two files in sync.
"""

import numpy as np


def softmax_rows(x):
    """Row-wise softmax of a 2-d array, max-subtracted for stability."""
    m = x.max(axis=1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=1, keepdims=True)


def softmax_rows_grad(y, dy):
    """Backward of softmax_rows given its output y and upstream grad dy."""
    inner = (y * dy).sum(axis=1, keepdims=True)
    return y * (dy - inner)


def log_softmax_rows(x):
    """Row-wise log-softmax of a 2-d array."""
    m = x.max(axis=1, keepdims=True)
    s = x - m
    lse = np.log(np.exp(s).sum(axis=1, keepdims=True))
    return s - lse


def log_softmax_rows_grad(y, dy):
    """Backward of log_softmax_rows given its output y and upstream grad dy."""
    p = np.exp(y)
    return dy - p * dy.sum(axis=1, keepdims=True)


def rope_rotate(x, cos, sin):
    """Rotate interleaved pairs of the last axis of x [h, t, d].

    cos/sin are [t, d//2] tables; pair i of row t is rotated by the angle
    whose cosine/sine they hold. Used for both forward (tables built from
    +angles) and backward (tables from -angles).
    """
    x0 = x[:, :, 0::2]
    x1 = x[:, :, 1::2]
    out = np.empty_like(x)
    out[:, :, 0::2] = x0 * cos - x1 * sin
    out[:, :, 1::2] = x0 * sin + x1 * cos
    return out
