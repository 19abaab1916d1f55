"""Toy diffusion transformer that can run a forward pass on any subset of tokens.

The architecture is patchify -> 2-D rotary-positioned tokens -> L blocks of
(RMS-norm, adaLN modulation, attention, MLP) -> modulated final projection back
to patch pixels. Conditioning (noise level + optional class) enters through
adaLN-zero modulation. Per-layer key/value caches hold full-length K/V so that
a forward pass over a token subset can still attend against every position:
active rows are refreshed in place through the scatter-epilogue GeMM and stale
rows keep whatever the last covering step wrote.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from . import _kernels_nb as _nb
from ._ops import RopeTable, silu, gelu, time_features, TIME_EMBED_DIM
from .errors import IndexSetError, NonFiniteError, ShapeError, StateError
from .flops import FlopCounter

RMS_EPS = 1e-6


@dataclass(frozen=True)
class ModelConfig:
    image_h: int = 32
    image_w: int = 32
    channels: int = 1
    patch_size: int = 2
    hidden_dim: int = 128
    layers: int = 6
    heads: int = 4
    mlp_ratio: int = 4
    num_classes: int = 4

    def __post_init__(self):
        if self.image_h % self.patch_size or self.image_w % self.patch_size:
            raise ShapeError("image sides must be divisible by patch_size")
        if self.hidden_dim % self.heads:
            raise ShapeError("hidden_dim must be divisible by heads")
        if (self.hidden_dim // self.heads) % 2:
            raise ShapeError("head dim must be even for rotary pairs")

    @property
    def grid_h(self) -> int:
        return self.image_h // self.patch_size

    @property
    def grid_w(self) -> int:
        return self.image_w // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid_h * self.grid_w

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.heads

    def to_dict(self) -> dict:
        return {
            "image_h": self.image_h, "image_w": self.image_w, "channels": self.channels,
            "patch_size": self.patch_size, "hidden_dim": self.hidden_dim, "layers": self.layers,
            "heads": self.heads, "mlp_ratio": self.mlp_ratio, "num_classes": self.num_classes,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{k: int(v) for k, v in d.items()})


@dataclass
class DitModel:
    cfg: ModelConfig
    params: dict[str, np.ndarray]
    _rope: RopeTable | None = field(default=None, repr=False)
    _wsplit: dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    @property
    def dtype(self):
        return self.params["patch_embed.w"].dtype

    @property
    def rope(self) -> RopeTable:
        if self._rope is None:
            c = self.cfg
            self._rope = RopeTable(c.grid_h, c.grid_w, c.head_dim, dtype=self.dtype)
        return self._rope

    def weight(self, name: str) -> np.ndarray:
        return self.params[name]

    def qkv_slice(self, layer: int, which: str) -> np.ndarray:
        """Contiguous copy of the Q/K/V column block of a layer's qkv weight."""
        key = f"{layer}.{which}"
        if key not in self._wsplit:
            d = self.cfg.hidden_dim
            off = {"q": 0, "k": 1, "v": 2}[which] * d
            self._wsplit[key] = np.ascontiguousarray(self.params[f"blocks.{layer}.qkv.w"][:, off:off + d])
        return self._wsplit[key]

    def invalidate_derived(self) -> None:
        """Drop cached weight slices after params are mutated (training)."""
        self._wsplit.clear()


def param_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    d, f, r = cfg.hidden_dim, cfg.patch_dim, cfg.mlp_ratio
    shapes = {
        "patch_embed.w": (f, d), "patch_embed.b": (d,),
        "time_mlp.w1": (TIME_EMBED_DIM, d), "time_mlp.b1": (d,),
        "time_mlp.w2": (d, d), "time_mlp.b2": (d,),
        "final.mod.w": (d, 2 * d), "final.mod.b": (2 * d,),
        "final.out.w": (d, f), "final.out.b": (f,),
    }
    if cfg.num_classes:
        shapes["class_embed.table"] = (cfg.num_classes, d)
    for l in range(cfg.layers):
        shapes[f"blocks.{l}.mod.w"] = (d, 6 * d)
        shapes[f"blocks.{l}.mod.b"] = (6 * d,)
        shapes[f"blocks.{l}.qkv.w"] = (d, 3 * d)
        shapes[f"blocks.{l}.qkv.b"] = (3 * d,)
        shapes[f"blocks.{l}.out.w"] = (d, d)
        shapes[f"blocks.{l}.out.b"] = (d,)
        shapes[f"blocks.{l}.mlp.w1"] = (d, r * d)
        shapes[f"blocks.{l}.mlp.b1"] = (r * d,)
        shapes[f"blocks.{l}.mlp.w2"] = (r * d, d)
        shapes[f"blocks.{l}.mlp.b2"] = (d,)
    return shapes


def init_model(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> DitModel:
    """Seeded init: small normal weights, zero biases, adaLN-zero modulation.

    Modulation matrices and the final output projection start at zero so every
    block is the identity at step 0, which keeps early training stable.
    """
    gen = np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), 0xD17])))
    params: dict[str, np.ndarray] = {}
    for name, shape in param_shapes(cfg).items():
        if ".b" in name or name.endswith(".b1") or name.endswith(".b2"):
            params[name] = np.zeros(shape, dtype=dtype)
        elif "mod." in name or name == "final.out.w":
            params[name] = np.zeros(shape, dtype=dtype)
        else:
            params[name] = (gen.standard_normal(shape) * 0.02).astype(dtype)
    return DitModel(cfg=cfg, params=params)


class KVCache:
    """Per-layer full-length key/value buffers for attention recovery.

    ``valid`` flips on after the first forward that wrote every row; until
    then a recovery forward over a strict subset is rejected. Rows at active
    indices always hold this step's K/V; every other row holds the most recent
    step that computed it.
    """

    def __init__(self, cfg: ModelConfig, dtype=np.float32):
        p, d = cfg.num_patches, cfg.hidden_dim
        self.k = [np.zeros((p, d), dtype=dtype) for _ in range(cfg.layers)]
        self.v = [np.zeros((p, d), dtype=dtype) for _ in range(cfg.layers)]
        self.valid = False
        self.last_full_step: int | None = None

    def invalidate(self) -> None:
        self.valid = False
        self.last_full_step = None


@dataclass
class TokenSequence:
    """Embedded tokens for an arbitrary subset of the patch grid.

    ``active`` keeps the caller's ordering (it need not be sorted); positions
    are the tokens' true 2-D grid coordinates, which is what keeps rotary
    geometry intact under subset inference.
    """

    tokens: np.ndarray        # (A, hidden_dim)
    active: np.ndarray        # (A,) flat patch indices, caller order
    positions: np.ndarray     # (A, 2) grid (row, col)

    @property
    def count(self) -> int:
        return int(self.active.shape[0])


def _check_active(cfg: ModelConfig, active) -> np.ndarray:
    idx = np.asarray(active, dtype=np.int64).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= cfg.num_patches):
        raise IndexSetError(f"patch index out of range for grid of {cfg.num_patches}")
    if np.unique(idx).size != idx.size:
        raise IndexSetError("duplicate patch indices")
    return idx


def image_to_patches(cfg: ModelConfig, image: np.ndarray) -> np.ndarray:
    """Flatten an image (C, H, W) into the full (num_patches, patch_dim) matrix.

    Patch r = gi * grid_w + gj covers pixels [gi*p:(gi+1)*p, gj*p:(gj+1)*p];
    within a patch features run (channel, row, col).
    """
    c = cfg
    if image.shape != (c.channels, c.image_h, c.image_w):
        raise ShapeError(f"image shape {image.shape} does not match config")
    p = c.patch_size
    return image.reshape(c.channels, c.grid_h, p, c.grid_w, p).transpose(1, 3, 0, 2, 4).reshape(
        c.num_patches, c.patch_dim)


def patches_to_image(cfg: ModelConfig, mat: np.ndarray) -> np.ndarray:
    c = cfg
    p = c.patch_size
    return mat.reshape(c.grid_h, c.grid_w, c.channels, p, p).transpose(2, 0, 3, 1, 4).reshape(
        c.channels, c.image_h, c.image_w)


def patchify(model: DitModel, sample: np.ndarray, active, flops: FlopCounter | None = None) -> TokenSequence:
    """Embed the active patches of ``sample`` into tokens.

    The row gather is fused into the embedding GeMM: inactive patches are
    never copied or multiplied.
    """
    cfg = model.cfg
    idx = _check_active(cfg, active)
    raw = image_to_patches(cfg, np.ascontiguousarray(sample, dtype=model.dtype))
    order = np.argsort(idx, kind="stable")
    emb_sorted = kernels.gather_gemm(raw, idx[order], model.params["patch_embed.w"])
    emb = np.empty_like(emb_sorted)
    emb[order] = emb_sorted
    emb += model.params["patch_embed.b"]
    if flops is not None:
        flops.add("token_linear", 2 * idx.size * cfg.patch_dim * cfg.hidden_dim)
    positions = np.stack([idx // cfg.grid_w, idx % cfg.grid_w], axis=1)
    return TokenSequence(tokens=emb, active=idx, positions=positions)


def unpatchify(cfg: ModelConfig, noise_tokens: np.ndarray, active, dest: np.ndarray) -> None:
    """Write per-patch predictions back into ``dest`` at active locations only."""
    idx = _check_active(cfg, active)
    if noise_tokens.shape != (idx.size, cfg.patch_dim):
        raise ShapeError(f"expected {(idx.size, cfg.patch_dim)} tokens, got {noise_tokens.shape}")
    if dest.shape != (cfg.channels, cfg.image_h, cfg.image_w):
        raise ShapeError(f"dest shape {dest.shape} does not match config")
    p = cfg.patch_size
    for r in range(idx.size):
        gi, gj = divmod(int(idx[r]), cfg.grid_w)
        dest[:, gi * p:(gi + 1) * p, gj * p:(gj + 1) * p] = noise_tokens[r].reshape(cfg.channels, p, p)


def cond_vector(model: DitModel, sigmas: np.ndarray, class_ids: np.ndarray | None,
                flops: FlopCounter | None = None) -> np.ndarray:
    """Conditioning vectors (batch, d): time-embedding MLP plus class embedding."""
    p = model.params
    feats = time_features(sigmas, dtype=model.dtype)
    h = kernels.gemm(feats, p["time_mlp.w1"]) + p["time_mlp.b1"]
    temb = kernels.gemm(silu(h), p["time_mlp.w2"]) + p["time_mlp.b2"]
    if flops is not None:
        b, d = feats.shape[0], model.cfg.hidden_dim
        flops.add("cond", 2 * b * TIME_EMBED_DIM * d + 2 * b * d * d)
    if model.cfg.num_classes:
        if class_ids is None:
            raise ShapeError("class_id required for a class-conditional model")
        ids = np.atleast_1d(np.asarray(class_ids, dtype=np.int64))
        if ids.min() < 0 or ids.max() >= model.cfg.num_classes:
            raise ShapeError("class id out of range")
        temb = temb + p["class_embed.table"][ids]
    return temb


def attention_core(q3: np.ndarray, k_rows: np.ndarray, v_rows: np.ndarray, cfg: ModelConfig,
                   flops: FlopCounter | None = None) -> np.ndarray:
    """Multi-head attention of roped queries against full-length key/value rows.

    Args:
        q3: (heads, A, head_dim) roped queries.
        k_rows: (key_len, d) roped keys, usually a whole KV-cache buffer.
        v_rows: (key_len, d) values.

    Returns:
        (A, d) concatenated per-head outputs, before the output projection.
    """
    h, a, hd = q3.shape
    key_len = k_rows.shape[0]
    scale = np.dtype(q3.dtype).type(1.0 / np.sqrt(float(hd)))
    k3 = k_rows.reshape(key_len, h, hd)
    v3 = v_rows.reshape(key_len, h, hd)
    out = np.empty((a, h, hd), dtype=q3.dtype)
    for hh in range(h):
        scores = np.zeros((a, key_len), dtype=q3.dtype)
        _nb.gemm_acc(q3[hh], np.ascontiguousarray(k3[:, hh, :].T), scores)
        scores *= scale
        probs = kernels.softmax_rows(scores)
        o = np.zeros((a, hd), dtype=q3.dtype)
        _nb.gemm_acc(probs, np.ascontiguousarray(v3[:, hh, :]), o)
        out[:, hh, :] = o
    if flops is not None:
        d = h * hd
        flops.add("attention", 2 * a * key_len * d * 2)
    return out.reshape(a, h * hd)


def forward(model: DitModel, x: TokenSequence, sigma: float, class_id: int | None = None,
            cache: KVCache | None = None, use_recovery: bool = True,
            flops: FlopCounter | None = None) -> np.ndarray:
    """Selective forward pass: velocity prediction for the active tokens only.

    Per layer, Q/K/V are computed for active tokens only; K and V land in the
    cache rows for those patches via the scatter-epilogue GeMM. With
    ``use_recovery`` the queries attend against the full cached K/V (stale
    rows stand in for inactive tokens); without it they attend against the
    active rows alone, which is the ablation mode.

    Returns:
        (A, patch_dim) per-patch velocity predictions, aligned with
        ``x.active`` order.
    """
    cfg = model.cfg
    p = model.params
    a = x.count
    full = a == cfg.num_patches
    if cache is None:
        raise StateError("forward requires a KVCache (one sampling run owns one cache)")
    if use_recovery and not full and not cache.valid:
        raise StateError("attention recovery requested but the KV cache was never fully written")

    sort_order = np.argsort(x.active, kind="stable")
    scatter_idx = np.ascontiguousarray(x.active[sort_order])

    cond = cond_vector(model, np.asarray([sigma], dtype=np.float64), None if class_id is None else [class_id],
                       flops=flops)
    cond_act = silu(cond)

    d = cfg.hidden_dim
    one = model.dtype.type(1)
    h = x.tokens
    if h.shape != (a, d):
        raise ShapeError(f"token matrix shape {h.shape} inconsistent with active set")

    for l in range(cfg.layers):
        mod = kernels.gemm(cond_act, p[f"blocks.{l}.mod.w"]) + p[f"blocks.{l}.mod.b"]
        if flops is not None:
            flops.add("cond", 2 * d * 6 * d)
        sh1, sc1, g1, sh2, sc2, g2 = [mod[:, i * d:(i + 1) * d] for i in range(6)]

        n1, _ = kernels.rmsnorm_rows(h, RMS_EPS)
        h1 = n1 * (sc1 + one) + sh1

        q = kernels.gemm(h1, model.qkv_slice(l, "q")) + p[f"blocks.{l}.qkv.b"][:d]
        q3 = np.ascontiguousarray(q.reshape(a, cfg.heads, cfg.head_dim).transpose(1, 0, 2))
        q3 = model.rope.apply(q3, x.active)

        # K/V projections land straight in the cache rows (scatter epilogue);
        # bias and rotary are then applied to exactly those rows in place.
        h1_sorted = np.ascontiguousarray(h1[sort_order])
        kernels.gemm_scatter(h1_sorted, model.qkv_slice(l, "k"), scatter_idx, cache.k[l])
        kernels.gemm_scatter(h1_sorted, model.qkv_slice(l, "v"), scatter_idx, cache.v[l])
        cache.k[l][scatter_idx] += p[f"blocks.{l}.qkv.b"][d:2 * d]
        cache.v[l][scatter_idx] += p[f"blocks.{l}.qkv.b"][2 * d:]
        krows = cache.k[l][scatter_idx].reshape(-1, cfg.heads, cfg.head_dim).transpose(1, 0, 2)
        krows = model.rope.apply(np.ascontiguousarray(krows), scatter_idx)
        cache.k[l][scatter_idx] = krows.transpose(1, 0, 2).reshape(-1, d)
        if flops is not None:
            flops.add("token_linear", 3 * 2 * a * d * d)

        if use_recovery:
            k_rows, v_rows = cache.k[l], cache.v[l]
        else:
            k_rows = np.ascontiguousarray(cache.k[l][scatter_idx])
            v_rows = np.ascontiguousarray(cache.v[l][scatter_idx])
        attn = attention_core(q3, k_rows, v_rows, cfg, flops=flops)
        o = kernels.gemm(attn, p[f"blocks.{l}.out.w"]) + p[f"blocks.{l}.out.b"]
        if flops is not None:
            flops.add("token_linear", 2 * a * d * d)
        h = h + g1 * o

        n2, _ = kernels.rmsnorm_rows(h, RMS_EPS)
        h2 = n2 * (sc2 + one) + sh2
        f1 = gelu(kernels.gemm(h2, p[f"blocks.{l}.mlp.w1"]) + p[f"blocks.{l}.mlp.b1"])
        mlp = kernels.gemm(f1, p[f"blocks.{l}.mlp.w2"]) + p[f"blocks.{l}.mlp.b2"]
        if flops is not None:
            flops.add("token_linear", 2 * 2 * a * d * cfg.mlp_ratio * d)
        h = h + g2 * mlp

        if not np.isfinite(h).all():
            raise NonFiniteError(f"non-finite activations after layer {l}")

    if full:
        cache.valid = True

    fmod = kernels.gemm(cond_act, p["final.mod.w"]) + p["final.mod.b"]
    fsh, fsc = fmod[:, :d], fmod[:, d:]
    nf, _ = kernels.rmsnorm_rows(h, RMS_EPS)
    hf = nf * (fsc + one) + fsh
    out = kernels.gemm(hf, p["final.out.w"]) + p["final.out.b"]
    if flops is not None:
        flops.add("cond", 2 * d * 2 * d)
        flops.add("token_linear", 2 * a * d * cfg.patch_dim)
    return out
