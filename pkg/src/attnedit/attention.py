"""Attention variants: GQA (teacher), MLA, and gated sliding-window.

Each variant has a graph-building forward used for training (full
sequence, causal) and a numpy decode path driven by a per-layer cache.
Decode is inference-only and records no gradients; the training path and
the decode path are independent implementations, which is what the
cache/recompute equivalence tests lean on.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import backend
from . import tensor as T
from .cache import FullKV, LatentKV, RollingKV
from .errors import ConfigError, ContractError, DimensionError
from .tensor import Tensor

VARIANTS = ("gqa", "mla", "swa_full", "swa_local")

_MASK_NEG = -1.0e30  # large-but-finite additive mask; exp underflows to 0


@dataclass
class MLAConfig:
    """Latent-attention dimensions: shared KV latent plus decoupled rotary key."""

    d_c: int
    d_r: int
    d_nope: int
    d_v: int

    def validate(self):
        if self.d_c < 1:
            raise ConfigError("MLA latent dim d_c must be >= 1")
        if self.d_r < 0 or self.d_r % 2 != 0:
            raise ConfigError("MLA rotary dim d_r must be even and >= 0")
        if self.d_nope < 0:
            raise ConfigError("MLA d_nope must be >= 0")
        if self.d_nope + self.d_r < 1:
            raise ConfigError("MLA per-head key width must be >= 1")

    @property
    def cached_width(self) -> int:
        """Floats cached per token per layer."""
        return self.d_c + self.d_r


@dataclass
class AttentionConfig:
    variant: str
    d_model: int
    n_h: int
    n_g: int
    d_h: int
    window: int = 0
    gated: bool = False
    mla: MLAConfig | None = None
    rope_theta: float = 10000.0
    use_rope: bool = True

    def validate(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown attention variant {self.variant!r}")
        if self.variant == "mla":
            if self.mla is None:
                raise ConfigError("mla variant requires an MLAConfig")
            self.mla.validate()
        else:
            if self.n_g < 1 or self.n_h % self.n_g != 0:
                raise ConfigError(
                    f"n_h={self.n_h} must be a multiple of n_g={self.n_g}"
                )
        if self.variant == "swa_local" and self.window < 1:
            raise ConfigError("sliding-window variant requires window >= 1")
        if self.gated and self.n_h * self.d_h != self.d_model:
            raise ConfigError(
                "output gate requires concat head width == d_model "
                f"({self.n_h}*{self.d_h} != {self.d_model})"
            )
        if self.use_rope:
            if self.variant == "mla":
                pass  # rotary width is d_r, validated above
            elif self.d_h % 2 != 0:
                raise ConfigError("rotary embedding needs even per-head dim")

    def o_proj_in_width(self) -> int:
        """Rows of the output projection this variant feeds."""
        if self.variant == "mla":
            return self.n_h * self.mla.d_v
        return self.n_h * self.d_h


def weight_shapes(cfg: AttentionConfig) -> dict:
    """Canonical weight name -> shape for one attention module."""
    d = cfg.d_model
    if cfg.variant == "mla":
        m = cfg.mla
        shapes = {
            "w_q": (d, cfg.n_h * (m.d_nope + m.d_r)),
            "w_dkv": (d, m.d_c),
            "w_uk": (m.d_c, cfg.n_h * m.d_nope),
            "w_uv": (m.d_c, cfg.n_h * m.d_v),
            "w_kr": (d, m.d_r),
            "w_o": (cfg.n_h * m.d_v, d),
        }
    else:
        shapes = {
            "w_q": (d, cfg.n_h * cfg.d_h),
            "w_k": (d, cfg.n_g * cfg.d_h),
            "w_v": (d, cfg.n_g * cfg.d_h),
            "w_o": (cfg.n_h * cfg.d_h, d),
        }
    if cfg.gated:
        shapes["w_g"] = (d, d)
    return shapes


class AttentionWeights:
    """Bag of named projection tensors for one attention module."""

    FIELDS = ("w_q", "w_k", "w_v", "w_o", "w_dkv", "w_uk", "w_uv", "w_kr", "w_g")

    def __init__(self, **tensors):
        for f in self.FIELDS:
            setattr(self, f, tensors.pop(f, None))
        if tensors:
            raise ConfigError(f"unknown attention weights: {sorted(tensors)}")

    @classmethod
    def init_random(cls, cfg: AttentionConfig, rng: np.random.Generator, dtype=np.float32):
        ws = {}
        for name, shape in weight_shapes(cfg).items():
            ws[name] = Tensor(_fan_in_uniform(rng, shape, dtype), requires_grad=True)
        return cls(**ws)

    def as_dict(self) -> dict:
        return {
            f: getattr(self, f) for f in self.FIELDS if getattr(self, f) is not None
        }


def _fan_in_uniform(rng: np.random.Generator, shape, dtype):
    """Uniform init with Var = 1/fan_in (fan_in = input rows)."""
    bound = math.sqrt(3.0 / shape[0])
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


@dataclass
class AttentionState:
    """Detached per-call snapshots for inspection and tests."""

    q: np.ndarray | None = None
    k: np.ndarray | None = None
    v: np.ndarray | None = None
    alpha: object = None  # [n_h, t, t] array, or list of per-step rows in decode
    o: np.ndarray | None = None
    g: np.ndarray | None = None
    u: np.ndarray | None = None


# ---------------------------------------------------------------------------
# masks
# ---------------------------------------------------------------------------

_mask_cache: dict = {}


def causal_mask(t: int, window: int = 0) -> np.ndarray:
    """Additive float64 mask: 0 where visible, -1e30 elsewhere.

    window=0 means plain causal; window=w restricts row i to columns
    max(0, i-w+1)..i.
    """
    key = (t, window)
    m = _mask_cache.get(key)
    if m is None:
        i = np.arange(t)[:, None]
        j = np.arange(t)[None, :]
        visible = j <= i
        if window > 0:
            visible &= j >= i - window + 1
        m = np.where(visible, 0.0, _MASK_NEG)
        _mask_cache[key] = m
    return m


# ---------------------------------------------------------------------------
# graph-building (training) paths
# ---------------------------------------------------------------------------


def _split_heads(x: Tensor, t: int, n: int, dh: int) -> Tensor:
    return T.transpose(T.reshape(x, (t, n, dh)), (1, 0, 2))


def _merge_heads(x: Tensor, t: int, n: int, dh: int) -> Tensor:
    return T.reshape(T.transpose(x, (1, 0, 2)), (t, n * dh))


def gated_output(w_g: Tensor, h_prev: Tensor, o_sdpa: Tensor) -> Tensor:
    """Element-wise sigmoid gate on the SDPA output: sigmoid(h W_g) * o."""
    if h_prev.shape != o_sdpa.shape:
        raise DimensionError(
            f"gate input {h_prev.shape} vs SDPA output {o_sdpa.shape}"
        )
    if w_g.shape != (h_prev.shape[-1], o_sdpa.shape[-1]):
        raise DimensionError(f"gate weight shape {w_g.shape}")
    return T.mul(T.sigmoid(T.matmul(h_prev, w_g)), o_sdpa)


def _sdpa_full(qh, kh, vh, scale, mask):
    scores = T.mul_scalar(T.bmm(qh, T.transpose(kh, (0, 2, 1))), scale)
    scores = T.add_const(scores, mask)
    alpha = T.softmax_last(scores)
    ctx = T.bmm(alpha, vh)
    return alpha, ctx


def _grouped_full_forward(cfg, weights, h, gate_h, window):
    """Shared full-sequence path for gqa / swa_full / swa_local."""
    t = h.shape[0]
    positions = range(t)
    q = T.matmul(h, weights.w_q)
    k = T.matmul(h, weights.w_k)
    v = T.matmul(h, weights.w_v)
    qh = _split_heads(q, t, cfg.n_h, cfg.d_h)
    kh = _split_heads(k, t, cfg.n_g, cfg.d_h)
    vh = _split_heads(v, t, cfg.n_g, cfg.d_h)
    if cfg.use_rope:
        qh = T.rope(qh, positions, cfg.rope_theta)
        kh = T.rope(kh, positions, cfg.rope_theta)
    rep = cfg.n_h // cfg.n_g
    k_all = T.repeat_axis0(kh, rep) if rep > 1 else kh
    v_all = T.repeat_axis0(vh, rep) if rep > 1 else vh
    mask = causal_mask(t, window)
    alpha, ctx = _sdpa_full(qh, k_all, v_all, 1.0 / math.sqrt(cfg.d_h), mask)
    o = _merge_heads(ctx, t, cfg.n_h, cfg.d_h)
    g = None
    if cfg.gated:
        gh = gate_h if gate_h is not None else h
        g = T.sigmoid(T.matmul(gh, weights.w_g))
        o = T.mul(g, o)
    u = T.matmul(o, weights.w_o)
    state = AttentionState(
        q=qh.data.copy(),
        k=kh.data.copy(),
        v=vh.data.copy(),
        alpha=alpha.data.copy(),
        o=o.data.copy(),
        g=None if g is None else g.data.copy(),
        u=u.data.copy(),
    )
    return u, state


def _mla_full_forward(cfg, weights, h, gate_h):
    m = cfg.mla
    t = h.shape[0]
    positions = range(t)
    dq = m.d_nope + m.d_r
    qh = _split_heads(T.matmul(h, weights.w_q), t, cfg.n_h, dq)
    q_nope = T.slice_last(qh, 0, m.d_nope)
    q_rope = T.slice_last(qh, m.d_nope, dq)
    if m.d_r > 0 and cfg.use_rope:
        q_rope = T.rope(q_rope, positions, cfg.rope_theta)
    q_full = T.concat_last([q_nope, q_rope]) if m.d_r > 0 else q_nope

    c = T.matmul(h, weights.w_dkv)
    kc = _split_heads(T.matmul(c, weights.w_uk), t, cfg.n_h, m.d_nope)
    if m.d_r > 0:
        kr = T.reshape(T.matmul(h, weights.w_kr), (1, t, m.d_r))
        if cfg.use_rope:
            kr = T.rope(kr, positions, cfg.rope_theta)
        k_full = T.concat_last([kc, T.repeat_axis0(kr, cfg.n_h)])
    else:
        k_full = kc
    vh = _split_heads(T.matmul(c, weights.w_uv), t, cfg.n_h, m.d_v)
    mask = causal_mask(t, 0)
    alpha, ctx = _sdpa_full(q_full, k_full, vh, 1.0 / math.sqrt(m.d_nope + m.d_r), mask)
    o = _merge_heads(ctx, t, cfg.n_h, m.d_v)
    g = None
    if cfg.gated:
        gh = gate_h if gate_h is not None else h
        g = T.sigmoid(T.matmul(gh, weights.w_g))
        o = T.mul(g, o)
    u = T.matmul(o, weights.w_o)
    state = AttentionState(
        q=q_full.data.copy(),
        k=k_full.data.copy(),
        v=vh.data.copy(),
        alpha=alpha.data.copy(),
        o=o.data.copy(),
        g=None if g is None else g.data.copy(),
        u=u.data.copy(),
    )
    return u, state


# ---------------------------------------------------------------------------
# numpy decode paths (inference only)
# ---------------------------------------------------------------------------


def _np_sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _np_rope_vec(x, pos: int, theta: float):
    """Rotate one token's heads [n, d] at absolute position pos."""
    n, d = x.shape
    cos, sin = T._rope_tables([pos], d // 2, theta, x.dtype)
    return backend.rope_rotate(
        np.ascontiguousarray(x.reshape(n, 1, d)), cos, sin
    ).reshape(n, d)


def _grouped_decode_step(cfg, w, h_t, cache, gate_h_t):
    """One decode step for gqa / swa_full / swa_local; h_t is [d]."""
    pos = cache.t if isinstance(cache, RollingKV) else len(cache)
    q = (h_t @ w.w_q.data).reshape(cfg.n_h, cfg.d_h)
    k = (h_t @ w.w_k.data).reshape(cfg.n_g, cfg.d_h)
    v = (h_t @ w.w_v.data).reshape(cfg.n_g, cfg.d_h)
    if cfg.use_rope:
        q = _np_rope_vec(q, pos, cfg.rope_theta)
        k = _np_rope_vec(k, pos, cfg.rope_theta)
    cache.append(k, v)
    k_all, v_all = cache.view()  # [n_vis, n_g, d_h]
    rep = cfg.n_h // cfg.n_g
    k_heads = np.repeat(k_all.transpose(1, 0, 2), rep, axis=0)
    v_heads = np.repeat(v_all.transpose(1, 0, 2), rep, axis=0)
    scores = np.einsum("hd,hjd->hj", q, k_heads) / math.sqrt(cfg.d_h)
    alpha = backend.softmax_rows(np.ascontiguousarray(scores))
    ctx = np.einsum("hj,hjd->hd", alpha, v_heads)
    o = ctx.reshape(cfg.n_h * cfg.d_h)
    g = None
    if cfg.gated:
        g = _np_sigmoid(gate_h_t @ w.w_g.data)
        o = g * o
    u = o @ w.w_o.data
    return u, alpha, g


def _mla_decode_step(cfg, w, h_t, cache, gate_h_t, absorbed: bool):
    m = cfg.mla
    pos = len(cache)
    c_t = h_t @ w.w_dkv.data
    if m.d_r > 0:
        kr_t = h_t @ w.w_kr.data
        if cfg.use_rope:
            kr_t = _np_rope_vec(kr_t.reshape(1, m.d_r), pos, cfg.rope_theta).reshape(
                m.d_r
            )
    else:
        kr_t = np.zeros(0, dtype=c_t.dtype)
    cache.append(c_t, kr_t)
    c_all, kr_all = cache.view()  # [t, d_c], [t, d_r]

    dq = m.d_nope + m.d_r
    q = (h_t @ w.w_q.data).reshape(cfg.n_h, dq)
    q_nope, q_rope = q[:, : m.d_nope], q[:, m.d_nope :]
    if m.d_r > 0 and cfg.use_rope:
        q_rope = _np_rope_vec(q_rope, pos, cfg.rope_theta)
    scale = 1.0 / math.sqrt(m.d_nope + m.d_r)

    if absorbed:
        # MQA-style: one shared KV "head" of key width d_c + d_r, value
        # width d_c; queries absorbed through the key up-projection.
        uk = w.w_uk.data.reshape(m.d_c, cfg.n_h, m.d_nope)
        q_lat = np.einsum("chn,hn->hc", uk, q_nope)  # [n_h, d_c]
        scores = (q_lat @ c_all.T + q_rope @ kr_all.T) * scale
        alpha = backend.softmax_rows(np.ascontiguousarray(scores))
        ctx_lat = alpha @ c_all  # [n_h, d_c]
        uv = w.w_uv.data.reshape(m.d_c, cfg.n_h, m.d_v)
        o = np.einsum("hc,chv->hv", ctx_lat, uv).reshape(cfg.n_h * m.d_v)
    else:
        k_c = (c_all @ w.w_uk.data).reshape(-1, cfg.n_h, m.d_nope)
        v_all = (c_all @ w.w_uv.data).reshape(-1, cfg.n_h, m.d_v)
        scores = (
            np.einsum("hn,jhn->hj", q_nope, k_c) + q_rope @ kr_all.T
        ) * scale
        alpha = backend.softmax_rows(np.ascontiguousarray(scores))
        o = np.einsum("hj,jhv->hv", alpha, v_all).reshape(cfg.n_h * m.d_v)
    g = None
    if cfg.gated:
        g = _np_sigmoid(gate_h_t @ w.w_g.data)
        o = g * o
    u = o @ w.w_o.data
    return u, alpha, g


def _expected_cache(cfg) -> type:
    return {"gqa": FullKV, "swa_full": FullKV, "swa_local": RollingKV, "mla": LatentKV}[
        cfg.variant
    ]


def make_cache(cfg: AttentionConfig, dtype=np.float32):
    """Fresh decode cache of the variant-appropriate kind."""
    if cfg.variant == "mla":
        return LatentKV(cfg.mla.d_c, cfg.mla.d_r, dtype)
    if cfg.variant == "swa_local":
        return RollingKV(cfg.window, cfg.n_g, cfg.d_h, dtype)
    return FullKV(cfg.n_g, cfg.d_h, dtype)


def _decode(cfg, weights, h: Tensor, cache, gate_h):
    if not isinstance(cache, _expected_cache(cfg)):
        raise ContractError(
            f"cache kind {type(cache).__name__} does not match variant {cfg.variant}"
        )
    hd = h.data
    gh = hd if gate_h is None else gate_h.data
    rows, alphas, gates = [], [], []
    for i in range(hd.shape[0]):
        if cfg.variant == "mla":
            u, a, g = _mla_decode_step(cfg, weights, hd[i], cache, gh[i], absorbed=False)
        else:
            u, a, g = _grouped_decode_step(cfg, weights, hd[i], cache, gh[i])
        rows.append(u)
        alphas.append(a)
        if g is not None:
            gates.append(g)
    u = Tensor(np.stack(rows))
    state = AttentionState(
        alpha=alphas, g=np.stack(gates) if gates else None, u=u.data.copy()
    )
    return u, state


# ---------------------------------------------------------------------------
# public entry points
# ---------------------------------------------------------------------------


def attention_forward(cfg, weights, h: Tensor, cache=None, gate_h: Tensor | None = None):
    """Dispatch on variant; cache=None is the full training path."""
    cfg.validate()
    if h.data.ndim != 2 or h.shape[1] != cfg.d_model:
        raise DimensionError(f"attention input shape {h.shape}, want [t, {cfg.d_model}]")
    if cache is not None:
        return _decode(cfg, weights, h, cache, gate_h)
    if cfg.variant == "mla":
        return _mla_full_forward(cfg, weights, h, gate_h)
    window = cfg.window if cfg.variant == "swa_local" else 0
    return _grouped_full_forward(cfg, weights, h, gate_h, window)


def gqa_forward(cfg, weights, h: Tensor, cache=None, gate_h=None):
    if cfg.variant != "gqa":
        raise ContractError(f"gqa_forward called with variant {cfg.variant!r}")
    if cache is not None and not isinstance(cache, FullKV):
        raise ContractError("gqa_forward requires a FullKV cache")
    return attention_forward(cfg, weights, h, cache, gate_h)


def swa_forward(cfg, weights, h: Tensor, cache=None, gate_h=None):
    if cfg.variant != "swa_local":
        raise ContractError(f"swa_forward called with variant {cfg.variant!r}")
    if cfg.window < 1:
        raise ConfigError("swa_forward requires window >= 1")
    if cache is not None and not isinstance(cache, RollingKV):
        raise ContractError("swa_forward requires a RollingKV cache")
    return attention_forward(cfg, weights, h, cache, gate_h)


def mla_forward(cfg, weights, h: Tensor, cache=None, gate_h=None):
    if cfg.variant != "mla":
        raise ContractError(f"mla_forward called with variant {cfg.variant!r}")
    if cfg.mla is None:
        raise ConfigError("mla_forward requires an MLAConfig")
    if cache is not None and not isinstance(cache, LatentKV):
        raise ContractError("mla_forward requires a LatentKV cache")
    return attention_forward(cfg, weights, h, cache, gate_h)


def mla_decode_absorbed(cfg, weights, h_t: Tensor, cache) -> Tensor:
    """Single-token MLA decode in latent space (MQA-style absorbed form).

    Appends this token's latent to the cache, then attends with key width
    d_c + d_r and value width d_c. Mathematically identical to the
    non-absorbed decode step.
    """
    if cfg.variant != "mla":
        raise ContractError("mla_decode_absorbed requires the mla variant")
    if not isinstance(cache, LatentKV):
        raise ContractError("mla_decode_absorbed requires a LatentKV cache")
    hd = h_t.data if isinstance(h_t, Tensor) else np.asarray(h_t)
    hd = hd.reshape(-1)
    if hd.shape[0] != cfg.d_model:
        raise DimensionError("mla_decode_absorbed expects a single token vector")
    u, _, _ = _mla_decode_step(cfg, weights, hd, cache, hd, absorbed=True)
    return Tensor(u.reshape(1, -1))


def scaled_mla_dims(d_model: int, d_h: int) -> MLAConfig:
    """Desk-scale MLA dims: the reference 512/64/64 scaled by d_model/4096.

    Rounded to even (rotary pairs) with a floor of 4; value width is
    pinned to d_h so the inherited output projection fits exactly.
    """
    s = d_model / 4096.0

    def even(x: int) -> int:
        return x + (x % 2)

    d_c = max(4, int(round(512 * s)))
    d_r = max(4, even(int(round(64 * s))))
    d_nope = max(4, even(int(round(64 * s))))
    return MLAConfig(d_c=d_c, d_r=d_r, d_nope=d_nope, d_v=d_h)
