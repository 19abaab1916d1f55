"""Diagnostics: ranking continuity (NDCG), drop-count maps, quality vs dense.

NDCG convention (recorded in every report this module writes): rankings order
patch indices by cache score ascending, relevance of patch p is
``P - position_t(p)`` (linear gains), the discount is ``1 / log2(i + 2)``, and
the ideal ordering is the previous step's own ranking. Linear gains are used
because exponential gains overflow for large patch counts; curves are
comparable only within this convention.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError, StateError
from .flops import FlopCounter
from .model import DitModel, ModelConfig
from .sampler import RasConfig, RunTrace, SigmaSchedule, sample_dense, sample_ras

NDCG_CONVENTION = "rank ascending by score; rel(p) = P - pos_t(p); discount 1/log2(i+2); IDCG from rank_t"
PSNR_PEAK = 2.0  # sample range is [-1, 1]


def _check_permutation(rank: np.ndarray) -> np.ndarray:
    rank = np.asarray(rank, dtype=np.int64)
    p = rank.shape[0]
    if rank.ndim != 1 or not np.array_equal(np.sort(rank), np.arange(p)):
        raise ShapeError("ranking must be a permutation of 0..P-1")
    return rank


def ndcg_adjacent(rank_t: np.ndarray, rank_next: np.ndarray) -> float:
    """Similarity in [0, 1] between two adjacent patch rankings; 1 iff identical."""
    rank_t = _check_permutation(rank_t)
    rank_next = _check_permutation(rank_next)
    p = rank_t.shape[0]
    if rank_next.shape[0] != p:
        raise ShapeError("rankings have different lengths")
    pos_t = np.empty(p, dtype=np.int64)
    pos_t[rank_t] = np.arange(p)
    rel = p - pos_t
    discount = 1.0 / np.log2(np.arange(p, dtype=np.float64) + 2.0)
    dcg = float(np.sum(rel[rank_next] * discount))
    idcg = float(np.sum((p - np.arange(p)) * discount))
    return dcg / idcg


def random_ndcg_baseline(num_patches: int) -> float:
    """Expected NDCG of a uniformly random next ranking (linear gains)."""
    p = num_patches
    discount = 1.0 / np.log2(np.arange(p, dtype=np.float64) + 2.0)
    mean_rel = (p + 1) / 2.0
    idcg = float(np.sum((p - np.arange(p)) * discount))
    return mean_rel * float(np.sum(discount)) / idcg


def score_ranking(scores: np.ndarray) -> np.ndarray:
    """Patch indices ordered by cache score ascending, ties by patch index."""
    return np.argsort(np.asarray(scores), kind="stable").astype(np.int64)


def continuity_curve(trace: RunTrace) -> np.ndarray:
    """NDCG for each adjacent pair of scored steps in a trace."""
    scored = [rec for rec in trace.records if rec.scores is not None]
    if len(scored) < 2:
        raise StateError("trace needs at least two scored steps for a continuity curve")
    values = []
    for a, b in zip(scored[:-1], scored[1:]):
        values.append(ndcg_adjacent(score_ranking(a.scores), score_ranking(b.scores)))
    return np.asarray(values, dtype=np.float64)


def drop_count_map(trace: RunTrace) -> np.ndarray:
    """Per-patch activation counts as a (grid_h, grid_w) array."""
    cfg = ModelConfig.from_dict(trace.meta["model"])
    return trace.activation_counts().reshape(cfg.grid_h, cfg.grid_w)


def foreground_patches(image: np.ndarray, patch_size: int, pixel_threshold: float = -0.5,
                       min_fraction: float = 0.25) -> np.ndarray:
    """Boolean grid marking patches that contain figure pixels.

    With data in [-1, 1] and background at -1, any pixel above -0.5 is clearly
    non-background (the dimmest figure interior sits at 0). A patch counts as
    foreground when at least ``min_fraction`` of its pixels clear that bar,
    which keeps thin shapes (rings, triangle tips) in the foreground set.
    """
    c, h, w = image.shape
    gh, gw = h // patch_size, w // patch_size
    lit = (image > pixel_threshold).reshape(c, gh, patch_size, gw, patch_size)
    frac = lit.mean(axis=(0, 2, 4))
    return frac >= min_fraction


@dataclass
class QualityRow:
    total_steps: int
    average_ratio: float
    num_seeds: int
    mse_mean: float
    psnr_db: float
    flops_token_linear: int
    flops_attention: int
    flops_cond: int
    flops_total: int
    wall_s: float

    def as_dict(self) -> dict:
        return {
            "total_steps": self.total_steps, "average_ratio": self.average_ratio,
            "num_seeds": self.num_seeds, "mse_mean": self.mse_mean, "psnr_db": self.psnr_db,
            "flops_token_linear": self.flops_token_linear, "flops_attention": self.flops_attention,
            "flops_cond": self.flops_cond, "flops_total": self.flops_total, "wall_s": self.wall_s,
        }


@dataclass
class QualityReport:
    reference_steps: int
    rows: list[QualityRow] = field(default_factory=list)
    per_seed_mse: dict[tuple, list[float]] = field(default_factory=dict)

    def header_lines(self) -> list[str]:
        return [
            f"# reference: dense {self.reference_steps}-step sampler, shared seeds",
            f"# psnr peak {PSNR_PEAK}; ndcg convention: {NDCG_CONVENTION}",
        ]


def psnr(mse: float) -> float:
    if mse <= 0:
        return float("inf")
    return 10.0 * math.log10(PSNR_PEAK * PSNR_PEAK / mse)


def trace_flops(trace: RunTrace) -> FlopCounter:
    total = FlopCounter()
    for rec in trace.records:
        for cat, v in rec.flops.items():
            total.add(cat, v)
    return total


def quality_vs_dense(model: DitModel, configs: list[tuple[int, float]], seeds,
                     reference_steps: int = 30, class_for_seed=None,
                     ras_template: RasConfig | None = None) -> QualityReport:
    """Compare sampler configurations against the dense reference at shared seeds.

    Args:
        configs: (total_steps, average_ratio) pairs; ratio 1.0 means dense.
        seeds: iterable of seeds; each seed is shared across all configs.
        class_for_seed: optional callable seed -> class id (defaults to
            seed % num_classes for conditional models).
        ras_template: defaults (warmup, resets, curve, k, metric) for the RAS
            runs; step counts and ratios come from ``configs``.
    """
    cfg = model.cfg
    template = ras_template or RasConfig()
    if class_for_seed is None:
        class_for_seed = (lambda s: s % cfg.num_classes) if cfg.num_classes else (lambda s: None)
    seeds = list(seeds)

    refs = {}
    ref_schedule = SigmaSchedule.linear(reference_steps, shift=template.sigma_shift)
    for s in seeds:
        refs[s], _ = sample_dense(model, ref_schedule, s, class_for_seed(s))

    report = QualityReport(reference_steps=reference_steps)
    for total_steps, ratio in configs:
        sched = SigmaSchedule.linear(total_steps, shift=template.sigma_shift)
        mses = []
        flops = FlopCounter()
        t0 = time.perf_counter()
        for s in seeds:
            if ratio >= 1.0:
                img, trace = sample_dense(model, sched, s, class_for_seed(s))
            else:
                rc = RasConfig(
                    total_steps=total_steps, warmup_steps=template.warmup_steps,
                    dense_reset_steps=tuple(t for t in template.dense_reset_steps if t < total_steps),
                    average_ratio=ratio, ratio_curve=template.ratio_curve,
                    starvation_scale=template.starvation_scale, metric_kind=template.metric_kind,
                    sigma_shift=template.sigma_shift)
                img, trace = sample_ras(model, sched, rc, s, class_for_seed(s))
            mses.append(float(np.mean((img.astype(np.float64) - refs[s].astype(np.float64)) ** 2)))
            flops.merge(trace_flops(trace))
        wall = time.perf_counter() - t0
        mse_mean = float(np.mean(mses))
        report.rows.append(QualityRow(
            total_steps=total_steps, average_ratio=ratio, num_seeds=len(seeds),
            mse_mean=mse_mean, psnr_db=psnr(mse_mean),
            flops_token_linear=flops.counts["token_linear"] // len(seeds),
            flops_attention=flops.counts["attention"] // len(seeds),
            flops_cond=flops.counts["cond"] // len(seeds),
            flops_total=flops.total // len(seeds), wall_s=wall))
        report.per_seed_mse[(total_steps, ratio)] = mses
    return report
