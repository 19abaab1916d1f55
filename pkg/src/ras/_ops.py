"""Elementwise math and positional-encoding helpers shared by both forward paths.

The selective (cache-aware) path and the dense reference path must agree
bit-for-bit when every token is active, so anything elementwise lives here and
is called from both. All functions preserve the input dtype.
"""

from __future__ import annotations

import numpy as np

TIME_EMBED_DIM = 256
TIME_FREQ_BASE = 10000.0
# sigma lives in [0, 1]; the sinusoid sees 1000*sigma so that more than a
# handful of frequency channels actually vary over the sampling range.
TIME_INPUT_SCALE = 1000.0


def silu(x: np.ndarray) -> np.ndarray:
    sig = 1.0 / (1.0 + np.exp(-x))
    return (x * sig).astype(x.dtype, copy=False)


def silu_grad(x: np.ndarray) -> np.ndarray:
    sig = (1.0 / (1.0 + np.exp(-x))).astype(x.dtype, copy=False)
    one = x.dtype.type(1)
    return sig * (one + x * (one - sig))


_GELU_C = 0.7978845608028654  # sqrt(2/pi)
_GELU_A = 0.044715


def gelu(x: np.ndarray) -> np.ndarray:
    dt = x.dtype.type
    inner = dt(_GELU_C) * (x + dt(_GELU_A) * x * x * x)
    return dt(0.5) * x * (dt(1) + np.tanh(inner))


def gelu_fwd(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """GELU value plus the tanh term, which the backward pass reuses."""
    dt = x.dtype.type
    inner = dt(_GELU_C) * (x + dt(_GELU_A) * x * x * x)
    t = np.tanh(inner)
    return dt(0.5) * x * (dt(1) + t), t


def gelu_grad(x: np.ndarray, t: np.ndarray | None = None) -> np.ndarray:
    dt = x.dtype.type
    if t is None:
        inner = dt(_GELU_C) * (x + dt(_GELU_A) * x * x * x)
        t = np.tanh(inner)
    sech2 = dt(1) - t * t
    return dt(0.5) * (dt(1) + t) + dt(0.5) * x * sech2 * dt(_GELU_C) * (dt(1) + dt(3 * _GELU_A) * x * x)


def time_features(sigma, dtype=np.float32) -> np.ndarray:
    """Sinusoidal features of the noise level, shape (batch, TIME_EMBED_DIM).

    ``sigma`` may be a scalar or a 1-D batch of noise levels in [0, 1].
    """
    sig = np.atleast_1d(np.asarray(sigma, dtype=np.float64))
    half = TIME_EMBED_DIM // 2
    freqs = np.exp(-np.log(TIME_FREQ_BASE) * np.arange(half, dtype=np.float64) / half)
    ang = (TIME_INPUT_SCALE * sig)[:, None] * freqs[None, :]
    feats = np.concatenate([np.cos(ang), np.sin(ang)], axis=1)
    return feats.astype(dtype)


class RopeTable:
    """Precomputed 2-D rotary tables for every patch position in the grid.

    The head dimension is split into consecutive (even, odd) pairs; the first
    half of the pairs rotates with the patch's row coordinate, the rest with
    its column coordinate. Per-axis frequencies follow the usual
    ``base**(-i / pairs_axis)`` progression. Tables are built once per model
    in float64 and rounded to the working dtype, so every forward path indexes
    the exact same cos/sin values.
    """

    def __init__(self, grid_h: int, grid_w: int, head_dim: int, dtype=np.float32, base: float = 10000.0):
        if head_dim % 2 != 0:
            raise ValueError("head_dim must be even for rotary pairs")
        pairs = head_dim // 2
        row_pairs = pairs - pairs // 2
        col_pairs = pairs // 2

        rows = (np.arange(grid_h * grid_w) // grid_w).astype(np.float64)
        cols = (np.arange(grid_h * grid_w) % grid_w).astype(np.float64)

        ang = np.empty((grid_h * grid_w, pairs), dtype=np.float64)
        if row_pairs:
            fr = base ** (-np.arange(row_pairs, dtype=np.float64) / row_pairs)
            ang[:, :row_pairs] = rows[:, None] * fr[None, :]
        if col_pairs:
            fc = base ** (-np.arange(col_pairs, dtype=np.float64) / col_pairs)
            ang[:, row_pairs:] = cols[:, None] * fc[None, :]

        self.cos = np.cos(ang).astype(dtype)
        self.sin = np.sin(ang).astype(dtype)
        self.pairs = pairs

    def apply(self, x: np.ndarray, patch_indices: np.ndarray, inverse: bool = False) -> np.ndarray:
        """Rotate ``x`` (..., tokens, head_dim) by its tokens' grid positions.

        ``patch_indices`` maps each token to its flat patch position. The
        inverse rotation is the exact adjoint, used by the backward pass.
        """
        cos = self.cos[patch_indices]
        sin = self.sin[patch_indices]
        if inverse:
            sin = -sin
        even = x[..., 0::2]
        odd = x[..., 1::2]
        out = np.empty_like(x)
        out[..., 0::2] = even * cos - odd * sin
        out[..., 1::2] = even * sin + odd * cos
        return out
