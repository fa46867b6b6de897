"""Numba-jitted implementations of the hot kernels.

Single-threaded on purpose: serial loops keep per-row summation order
fixed, so results are reproducible run to run. Signatures mirror
kernels_numpy.py exactly.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def softmax_rows(x):
    n, m = x.shape
    out = np.empty_like(x)
    for i in range(n):
        mx = x[i, 0]
        for j in range(1, m):
            if x[i, j] > mx:
                mx = x[i, j]
        s = 0.0
        for j in range(m):
            e = np.exp(x[i, j] - mx)
            out[i, j] = e
            s += e
        inv = 1.0 / s
        for j in range(m):
            out[i, j] *= inv
    return out


@njit(cache=True)
def softmax_rows_grad(y, dy):
    n, m = y.shape
    out = np.empty_like(y)
    for i in range(n):
        inner = 0.0
        for j in range(m):
            inner += y[i, j] * dy[i, j]
        for j in range(m):
            out[i, j] = y[i, j] * (dy[i, j] - inner)
    return out


@njit(cache=True)
def log_softmax_rows(x):
    n, m = x.shape
    out = np.empty_like(x)
    for i in range(n):
        mx = x[i, 0]
        for j in range(1, m):
            if x[i, j] > mx:
                mx = x[i, j]
        s = 0.0
        for j in range(m):
            s += np.exp(x[i, j] - mx)
        lse = np.log(s)
        for j in range(m):
            out[i, j] = x[i, j] - mx - lse
    return out


@njit(cache=True)
def log_softmax_rows_grad(y, dy):
    n, m = y.shape
    out = np.empty_like(y)
    for i in range(n):
        s = 0.0
        for j in range(m):
            s += dy[i, j]
        for j in range(m):
            out[i, j] = dy[i, j] - np.exp(y[i, j]) * s
    return out


@njit(cache=True)
def rope_rotate(x, cos, sin):
    h, t, d = x.shape
    half = d // 2
    out = np.empty_like(x)
    for a in range(h):
        for i in range(t):
            for p in range(half):
                x0 = x[a, i, 2 * p]
                x1 = x[a, i, 2 * p + 1]
                c = cos[i, p]
                s = sin[i, p]
                out[a, i, 2 * p] = x0 * c - x1 * s
                out[a, i, 2 * p + 1] = x0 * s + x1 * c
    return out
