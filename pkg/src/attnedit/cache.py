"""Decode-time KV caches with exact float accounting.

Three variants: FullKV grows with the prefix (GQA / full attention),
LatentKV stores the shared low-rank latent plus rotary key (MLA),
RollingKV keeps only the last `window` entries (local sliding-window
attention). Each instance belongs to a single decode stream.

float_count() reports floats currently stored; floats_read counts floats
touched by attention reads, for comparing decode bandwidth across
variants.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError


class FullKV:
    """Per-layer growing key/value store: [t, n_g, d_h] each."""

    kind = "full"

    def __init__(self, n_g: int, d_h: int, dtype=np.float32):
        self.n_g = n_g
        self.d_h = d_h
        self.k = np.zeros((0, n_g, d_h), dtype=dtype)
        self.v = np.zeros((0, n_g, d_h), dtype=dtype)
        self.floats_read = 0

    def __len__(self) -> int:
        return self.k.shape[0]

    def append(self, k_t: np.ndarray, v_t: np.ndarray):
        self.k = np.concatenate([self.k, k_t.reshape(-1, self.n_g, self.d_h)], axis=0)
        self.v = np.concatenate([self.v, v_t.reshape(-1, self.n_g, self.d_h)], axis=0)

    def view(self):
        """(keys, values) over the whole prefix, oldest first."""
        self.floats_read += self.k.size + self.v.size
        return self.k, self.v

    def float_count(self) -> int:
        return self.k.size + self.v.size


class LatentKV:
    """Per-layer latent store: c [t, d_c] plus shared rotary key [t, d_r]."""

    kind = "latent"

    def __init__(self, d_c: int, d_r: int, dtype=np.float32):
        self.d_c = d_c
        self.d_r = d_r
        self.c = np.zeros((0, d_c), dtype=dtype)
        self.kr = np.zeros((0, d_r), dtype=dtype)
        self.floats_read = 0

    def __len__(self) -> int:
        return self.c.shape[0]

    def append(self, c_t: np.ndarray, kr_t: np.ndarray):
        self.c = np.concatenate([self.c, c_t.reshape(-1, self.d_c)], axis=0)
        self.kr = np.concatenate([self.kr, kr_t.reshape(-1, self.d_r)], axis=0)

    def view(self):
        self.floats_read += self.c.size + self.kr.size
        return self.c, self.kr

    def float_count(self) -> int:
        return self.c.size + self.kr.size


class RollingKV:
    """Circular buffer of the last `window` key/value entries per layer."""

    kind = "rolling"

    def __init__(self, window: int, n_g: int, d_h: int, dtype=np.float32):
        if window < 1:
            raise ContractError("rolling cache window must be >= 1")
        self.window = window
        self.n_g = n_g
        self.d_h = d_h
        self.k = np.zeros((window, n_g, d_h), dtype=dtype)
        self.v = np.zeros((window, n_g, d_h), dtype=dtype)
        self.t = 0  # absolute number of tokens seen
        self.floats_read = 0

    def __len__(self) -> int:
        return min(self.t, self.window)

    def append(self, k_t: np.ndarray, v_t: np.ndarray):
        slot = self.t % self.window
        self.k[slot] = k_t.reshape(self.n_g, self.d_h)
        self.v[slot] = v_t.reshape(self.n_g, self.d_h)
        self.t += 1

    def view(self):
        """Visible entries in chronological order, oldest first."""
        n = len(self)
        if self.t <= self.window:
            k, v = self.k[:n], self.v[:n]
        else:
            start = self.t % self.window
            idx = (np.arange(n) + start) % self.window
            k, v = self.k[idx], self.v[idx]
        self.floats_read += k.size + v.size
        return k, v

    def float_count(self) -> int:
        return 2 * len(self) * self.n_g * self.d_h
