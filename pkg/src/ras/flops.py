"""Matmul FLOP accounting for forward passes.

Convention: only matrix-multiply work is counted, at 2*m*n*k FLOPs per GeMM
(multiply + add). Elementwise work (norms, activations, rotary) is ignored;
it is a vanishing fraction at every scale this package runs at.

Categories:
  * ``token_linear`` — work proportional to the number of tokens fed through
    the network: patch embedding, Q/K/V and output projections, the MLP, and
    the final pixel projection. With A of P patches active this scales by
    exactly A/P.
  * ``attention`` — score and value contractions. Queries scale with A; the
    key length is the full patch count under attention recovery and A in the
    active-only ablation.
  * ``cond`` — per-forward conditioning work (time-embedding MLP, adaLN
    modulations), independent of the active count.

Closed form per forward pass with A active of P patches, hidden size d,
L layers, mlp ratio r, patch dim F, key length KL:

  token_linear = A * (2*F*d + L*(2*d*3d + 2*d*d + 4*r*d*d) + 2*d*F)
  attention    = L * 4 * A * KL * d
  cond         = 2*256*d + 2*d*d + L*2*d*6d + 2*d*2d

The instrumented counters in the forward paths add exactly these terms at the
call sites, so counter and formula agree to the FLOP.
"""

from __future__ import annotations

from ._ops import TIME_EMBED_DIM
from .errors import ShapeError


class FlopCounter:
    """Accumulates FLOPs by category; used by the forward paths when supplied."""

    CATEGORIES = ("token_linear", "attention", "cond")

    def __init__(self):
        self.counts = {c: 0 for c in self.CATEGORIES}

    def add(self, category: str, flops: int) -> None:
        if category not in self.counts:
            raise ShapeError(f"unknown flop category {category!r}")
        self.counts[category] += int(flops)

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    def as_dict(self) -> dict[str, int]:
        return dict(self.counts)

    def merge(self, other: "FlopCounter") -> None:
        for c, v in other.counts.items():
            self.counts[c] += v


def per_token_linear(cfg) -> int:
    """token_linear FLOPs contributed by one active token in one forward."""
    d, f, r = cfg.hidden_dim, cfg.patch_dim, cfg.mlp_ratio
    per_layer = 2 * d * 3 * d + 2 * d * d + 2 * 2 * d * r * d
    return 2 * f * d + cfg.layers * per_layer + 2 * d * f


def cond_flops(cfg) -> int:
    d = cfg.hidden_dim
    return 2 * TIME_EMBED_DIM * d + 2 * d * d + cfg.layers * 2 * d * 6 * d + 2 * d * 2 * d


def attention_flops(cfg, active: int, key_len: int) -> int:
    return cfg.layers * 4 * active * key_len * cfg.hidden_dim


def forward_flops(cfg, active: int, key_len: int | None = None) -> dict[str, int]:
    """Analytic per-forward FLOPs; ``key_len`` defaults to full recovery length."""
    kl = cfg.num_patches if key_len is None else key_len
    return {
        "token_linear": active * per_token_linear(cfg),
        "attention": attention_flops(cfg, active, kl),
        "cond": cond_flops(cfg),
    }
