"""Dense tensors with reverse-mode automatic differentiation.

Row-major numpy storage, float32 by default, float64 for oracles and
gradient checks. Each differentiable op appends a node to a global tape;
backward() walks the tape in reverse, so traversal order matches
execution order and every node is visited once. The tape is rebuilt per
forward pass and discarded after backward.

Broadcasting is deliberately restricted to bias-style adds and scalar
ops; attention code uses explicit reshapes/transposes.
"""

from __future__ import annotations

import math
import os
from contextlib import contextmanager

import numpy as np

from . import backend
from .errors import ContractError, DimensionError, NumericError

_CHECK_FINITE = os.environ.get("ATTNEDIT_CHECK_FINITE", "1") != "0"

# Tape of (output, inputs, backward_fn) in execution order. None while
# gradient recording is suspended.
_tape: list | None = []


@contextmanager
def no_grad():
    """Suspend graph recording; ops inside produce constant tensors."""
    global _tape
    saved = _tape
    _tape = None
    try:
        yield
    finally:
        _tape = saved


def grad_enabled() -> bool:
    return _tape is not None


def clear_tape():
    """Drop any recorded graph without running backward."""
    global _tape
    if _tape is not None:
        _tape = []


class Tensor:
    """A dense array plus optional gradient and graph linkage."""

    __slots__ = ("data", "requires_grad", "grad", "_is_leaf")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32 if dtype is None else dtype)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._is_leaf = True
        if _CHECK_FINITE:
            _assert_finite(self.data, "tensor init")

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(())[()])

    def detach(self) -> "Tensor":
        """Constant view of the same values, cut from the graph."""
        return Tensor(self.data, requires_grad=False)

    def copy(self) -> "Tensor":
        t = Tensor(self.data.copy(), requires_grad=self.requires_grad)
        return t

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if g.shape != self.data.shape:
            raise DimensionError(
                f"gradient shape {g.shape} != value shape {self.data.shape}"
            )
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad += g

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, grad={self.requires_grad})"


def _assert_finite(arr, where: str):
    if not np.isfinite(arr).all():
        raise NumericError(f"non-finite values produced in {where}")


def _make(data, inputs, backward_fn, op: str) -> Tensor:
    """Create an op output and record it on the tape when needed."""
    if _CHECK_FINITE:
        _assert_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._is_leaf = False
    needs = _tape is not None and any(t.requires_grad for t in inputs)
    out.requires_grad = needs
    if needs:
        _tape.append((out, inputs, backward_fn))
    return out


def _same_dtype(*ts: Tensor):
    d0 = ts[0].data.dtype
    for t in ts[1:]:
        if t.data.dtype != d0:
            raise DimensionError(f"dtype mismatch: {d0} vs {t.data.dtype}")
    return d0


# ---------------------------------------------------------------------------
# elementwise and structural ops
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_dtype(a, b)
    if a.shape != b.shape:
        raise DimensionError(f"add: {a.shape} vs {b.shape}")

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(g)

    return _make(a.data + b.data, (a, b), bwd, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_dtype(a, b)
    if a.shape != b.shape:
        raise DimensionError(f"sub: {a.shape} vs {b.shape}")

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(-g)

    return _make(a.data - b.data, (a, b), bwd, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_dtype(a, b)
    if a.shape != b.shape:
        raise DimensionError(f"mul: {a.shape} vs {b.shape}")

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g * b.data)
        if b.requires_grad:
            b._accumulate(g * a.data)

    return _make(a.data * b.data, (a, b), bwd, "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    _same_dtype(a, b)
    if a.shape != b.shape:
        raise DimensionError(f"div: {a.shape} vs {b.shape}")
    out = a.data / b.data

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g / b.data)
        if b.requires_grad:
            b._accumulate(-g * out / b.data)

    return _make(out, (a, b), bwd, "div")


def mul_scalar(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g * c)

    return _make(a.data * np.asarray(c, dtype=a.data.dtype), (a,), bwd, "mul_scalar")


def add_scalar(a: Tensor, c: float) -> Tensor:
    def bwd(g):
        if a.requires_grad:
            a._accumulate(g)

    return _make(a.data + np.asarray(float(c), dtype=a.data.dtype), (a,), bwd, "add_scalar")


def add_const(a: Tensor, arr: np.ndarray) -> Tensor:
    """Add a constant numpy array, broadcast against a; no grad to arr."""
    out = a.data + arr.astype(a.data.dtype, copy=False)
    if out.shape != a.shape:
        raise DimensionError(f"add_const broadcast changed shape: {a.shape} -> {out.shape}")

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g)

    return _make(out, (a,), bwd, "add_const")


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """x[..., d] + b[d], broadcast over leading axes."""
    _same_dtype(x, b)
    if b.data.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise DimensionError(f"add_bias: {x.shape} + {b.shape}")

    def bwd(g):
        if x.requires_grad:
            x._accumulate(g)
        if b.requires_grad:
            b._accumulate(g.reshape(-1, b.shape[0]).sum(axis=0))

    return _make(x.data + b.data, (x, b), bwd, "add_bias")


def neg(a: Tensor) -> Tensor:
    return mul_scalar(a, -1.0)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g.reshape(a.data.shape))

    return _make(a.data.reshape(shape), (a,), bwd, "reshape")


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bwd(g):
        if a.requires_grad:
            a._accumulate(np.ascontiguousarray(g.transpose(inv)))

    return _make(np.ascontiguousarray(a.data.transpose(axes)), (a,), bwd, "transpose")


def concat_last(parts) -> Tensor:
    parts = list(parts)
    _same_dtype(*parts)
    widths = [p.shape[-1] for p in parts]
    base = parts[0].shape[:-1]
    for p in parts:
        if p.shape[:-1] != base:
            raise DimensionError("concat_last: leading shapes differ")

    def bwd(g):
        off = 0
        for p, w in zip(parts, widths):
            if p.requires_grad:
                p._accumulate(np.ascontiguousarray(g[..., off : off + w]))
            off += w

    return _make(
        np.concatenate([p.data for p in parts], axis=-1), tuple(parts), bwd, "concat_last"
    )


def slice_last(a: Tensor, start: int, stop: int) -> Tensor:
    if not (0 <= start <= stop <= a.shape[-1]):
        raise DimensionError(f"slice_last [{start}:{stop}] on width {a.shape[-1]}")

    def bwd(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[..., start:stop] = g
            a._accumulate(full)

    return _make(np.ascontiguousarray(a.data[..., start:stop]), (a,), bwd, "slice_last")


def repeat_axis0(a: Tensor, reps: int) -> Tensor:
    """Tile along axis 0: out[i] = a[i // reps]. Grad sums over repeats."""
    if reps < 1:
        raise DimensionError("repeat_axis0: reps must be >= 1")
    g0 = a.shape[0]

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g.reshape((g0, reps) + a.data.shape[1:]).sum(axis=1))

    return _make(np.repeat(a.data, reps, axis=0), (a,), bwd, "repeat_axis0")


# ---------------------------------------------------------------------------
# reductions and nonlinearities
# ---------------------------------------------------------------------------


def sum_all(a: Tensor) -> Tensor:
    def bwd(g):
        if a.requires_grad:
            a._accumulate(np.full_like(a.data, g))

    return _make(a.data.sum(dtype=a.data.dtype), (a,), bwd, "sum_all")


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size

    def bwd(g):
        if a.requires_grad:
            a._accumulate(np.full_like(a.data, g / n))

    return _make(a.data.mean(dtype=a.data.dtype), (a,), bwd, "mean_all")


def sum_last(a: Tensor) -> Tensor:
    """Sum over the last axis, dropping it."""

    def bwd(g):
        if a.requires_grad:
            a._accumulate(np.broadcast_to(g[..., None], a.data.shape).astype(a.data.dtype))

    return _make(a.data.sum(axis=-1), (a,), bwd, "sum_last")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g / (2.0 * out))

    return _make(out, (a,), bwd, "sqrt")


def sigmoid(a: Tensor) -> Tensor:
    # Split by sign to avoid overflow in exp.
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g * out * (1.0 - out))

    return _make(out, (a,), bwd, "sigmoid")


def silu(a: Tensor) -> Tensor:
    x = a.data
    s = np.empty_like(x)
    pos = x >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    s[~pos] = e / (1.0 + e)
    out = x * s

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g * (s + x * s * (1.0 - s)))

    return _make(out, (a,), bwd, "silu")


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _same_dtype(a, b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(f"matmul expects 2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dims: {a.shape} @ {b.shape}")

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return _make(a.data @ b.data, (a, b), bwd, "matmul")


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matmul over matching leading axis: [n,m,k] @ [n,k,p]."""
    _same_dtype(a, b)
    if a.data.ndim != 3 or b.data.ndim != 3:
        raise DimensionError(f"bmm expects 3-d operands, got {a.shape} @ {b.shape}")
    if a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise DimensionError(f"bmm shapes: {a.shape} @ {b.shape}")

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.swapaxes(1, 2))
        if b.requires_grad:
            b._accumulate(a.data.swapaxes(1, 2) @ g)

    return _make(a.data @ b.data, (a, b), bwd, "bmm")


# ---------------------------------------------------------------------------
# softmax family (kernel-dispatched)
# ---------------------------------------------------------------------------


def softmax_last(x: Tensor) -> Tensor:
    if x.shape[-1] < 1:
        raise DimensionError("softmax over empty last dim")
    flat = np.ascontiguousarray(x.data.reshape(-1, x.shape[-1]))
    y = backend.softmax_rows(flat)

    def bwd(g):
        if x.requires_grad:
            gflat = np.ascontiguousarray(g.reshape(y.shape))
            x._accumulate(backend.softmax_rows_grad(y, gflat).reshape(x.data.shape))

    return _make(y.reshape(x.data.shape), (x,), bwd, "softmax_last")


def log_softmax_last(x: Tensor) -> Tensor:
    if x.shape[-1] < 1:
        raise DimensionError("log_softmax over empty last dim")
    flat = np.ascontiguousarray(x.data.reshape(-1, x.shape[-1]))
    y = backend.log_softmax_rows(flat)

    def bwd(g):
        if x.requires_grad:
            gflat = np.ascontiguousarray(g.reshape(y.shape))
            x._accumulate(backend.log_softmax_rows_grad(y, gflat).reshape(x.data.shape))

    return _make(y.reshape(x.data.shape), (x,), bwd, "log_softmax_last")


# ---------------------------------------------------------------------------
# fused network ops
# ---------------------------------------------------------------------------


def rms_norm(x: Tensor, gain: Tensor, eps: float) -> Tensor:
    """Root-mean-square normalization over the last axis, scaled by gain."""
    _same_dtype(x, gain)
    d = x.shape[-1]
    if gain.shape != (d,):
        raise DimensionError(f"rms_norm gain shape {gain.shape} != ({d},)")
    ms = (x.data * x.data).mean(axis=-1, keepdims=True)
    r = np.sqrt(ms + np.asarray(eps, dtype=x.data.dtype))
    xn = x.data / r
    out = xn * gain.data

    def bwd(g):
        if gain.requires_grad:
            gain._accumulate((g * xn).reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            gg = g * gain.data
            inner = (gg * x.data).sum(axis=-1, keepdims=True)
            x._accumulate(gg / r - x.data * inner / (d * r**3))

    return _make(out, (x, gain), bwd, "rms_norm")


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1:
        raise DimensionError("embedding expects a 1-d id sequence")
    if ids.min(initial=0) < 0 or (ids.size and ids.max() >= table.shape[0]):
        raise DimensionError("token id out of vocabulary range")

    def bwd(g):
        if table.requires_grad:
            full = np.zeros_like(table.data)
            np.add.at(full, ids, g)
            table._accumulate(full)

    return _make(table.data[ids].copy(), (table,), bwd, "embedding")


def _rope_tables(positions, half: int, theta: float, dtype):
    pos = np.asarray(positions, dtype=np.float64)
    inv_freq = theta ** (-2.0 * np.arange(half, dtype=np.float64) / (2 * half))
    ang = pos[:, None] * inv_freq[None, :]
    return np.cos(ang).astype(dtype), np.sin(ang).astype(dtype)


def rope(x: Tensor, positions, theta: float) -> Tensor:
    """Rotary position encoding on interleaved pairs of the last axis.

    x is [h, t, d] with d even; positions is the length-t list of absolute
    token indices. Pair i at position p is rotated by p * theta^(-2i/d).
    """
    if x.data.ndim != 3:
        raise DimensionError(f"rope expects [h, t, d], got {x.shape}")
    h, t, d = x.shape
    if d % 2 != 0:
        raise DimensionError(f"rope pair dim must be even, got {d}")
    if len(positions) != t:
        raise DimensionError("rope: positions length != sequence length")
    cos, sin = _rope_tables(positions, d // 2, theta, x.data.dtype)
    y = backend.rope_rotate(np.ascontiguousarray(x.data), cos, sin)

    def bwd(g):
        if x.requires_grad:
            # Inverse rotation: transpose of an orthogonal map.
            x._accumulate(backend.rope_rotate(np.ascontiguousarray(g), cos, -sin))

    return _make(y, (x,), bwd, "rope")


def cross_entropy(logits: Tensor, targets, mask=None) -> Tensor:
    """Mean negative log-likelihood over unmasked positions.

    logits [t, v], targets length-t int array, mask optional 0/1 per
    position (1 = counted).
    """
    targets = np.asarray(targets, dtype=np.int64)
    t, v = logits.shape
    if targets.shape != (t,):
        raise DimensionError("cross_entropy: targets length mismatch")
    m = np.ones(t, dtype=logits.data.dtype) if mask is None else np.asarray(
        mask, dtype=logits.data.dtype
    )
    n_valid = float(m.sum())
    if n_valid <= 0:
        raise ContractError("cross_entropy: all positions masked")
    logp = backend.log_softmax_rows(np.ascontiguousarray(logits.data))
    nll = -(logp[np.arange(t), targets] * m).sum(dtype=logits.data.dtype) / np.asarray(
        n_valid, dtype=logits.data.dtype
    )

    def bwd(g):
        if logits.requires_grad:
            p = np.exp(logp)
            p[np.arange(t), targets] -= 1.0
            logits._accumulate(p * (g * m / n_valid)[:, None])

    return _make(np.asarray(nll, dtype=logits.data.dtype), (logits,), bwd, "cross_entropy")


# ---------------------------------------------------------------------------
# backward driver
# ---------------------------------------------------------------------------


def backward(loss: Tensor):
    """Populate .grad on every requires_grad tensor reachable from loss."""
    global _tape
    if loss.data.shape != ():
        raise ContractError(f"backward expects a scalar loss, got shape {loss.shape}")
    if _tape is None or not _tape:
        raise ContractError("backward: no recorded graph")
    if not loss.requires_grad:
        raise ContractError("backward: loss does not require grad")
    loss.grad = np.ones((), dtype=loss.data.dtype)
    for out, _inputs, fn in reversed(_tape):
        if out.grad is not None:
            fn(out.grad)
            if not out._is_leaf:
                out.grad = None  # free intermediate grads eagerly
    _tape = []


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


def grad_check(f, params, step: float, n_samples: int = 200, seed: int = 0) -> float:
    """Compare analytic gradients of scalar f() against central differences.

    params is a list of leaf tensors f depends on. Returns the max over
    sampled coordinates of |analytic - numeric| / (|analytic| + |numeric|
    + 1e-12). f must be deterministic; float64 params recommended.
    """
    if step <= 0:
        raise ContractError("grad_check: step must be positive")
    params = list(params)
    for p in params:
        p.zero_grad()
    clear_tape()
    loss = f()
    if not np.isfinite(loss.data):
        raise NumericError("grad_check: non-finite loss")
    backward(loss)
    analytic = [
        p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params
    ]

    sizes = np.array([p.data.size for p in params])
    total = int(sizes.sum())
    rng = np.random.default_rng(seed)
    n = min(n_samples, total)
    flat_idx = rng.choice(total, size=n, replace=False)
    bounds = np.cumsum(sizes)

    worst = 0.0
    for fi in flat_idx:
        pi = int(np.searchsorted(bounds, fi, side="right"))
        ci = int(fi - (bounds[pi - 1] if pi > 0 else 0))
        flat = params[pi].data.reshape(-1)
        orig = flat[ci]
        with no_grad():
            flat[ci] = orig + step
            f_plus = float(f().data)
            flat[ci] = orig - step
            f_minus = float(f().data)
        flat[ci] = orig
        if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
            raise NumericError("grad_check: non-finite perturbed loss")
        numeric = (f_plus - f_minus) / (2.0 * step)
        a = float(analytic[pi].reshape(-1)[ci])
        rel = abs(a - numeric) / (abs(a) + abs(numeric) + 1e-12)
        worst = max(worst, rel)
    return worst
