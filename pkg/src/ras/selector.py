"""Region selection: per-patch cacheability scores, drop counts, ratio schedules.

Score semantics: higher score = more cacheable = more likely to be dropped
this step. The active ("fast-update") set is the patches with the LOWEST
scores. The base statistic per patch is either

  * ``std``    — mean over the patch's tokens of the per-token standard
                 deviation across channels (the subject of a trained model
                 shows visibly lower dispersion than the background, so high
                 dispersion marks cacheable background), or
  * ``l2norm`` — reciprocal of the mean per-token L2 norm, so that large-norm
                 regions (the ones the network is still working on) rank as
                 fast-update, or
  * ``random`` — i.i.d. uniform scores, the ablation baseline.

Starvation prevention multiplies the statistic by exp(-k) once per recorded
drop. The factor is applied by iterated multiplication, not by exponentiating
k*D, so the decay identity s(D+1) == exp(-k) * s(D) holds exactly in floating
point, not just analytically.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NonFiniteError, ShapeError

L2_EPS = 1e-8
METRIC_KINDS = ("std", "l2norm", "random")
RATIO_CURVES = ("linear", "flat")
# half-width of the default linear ratio ramp around the configured average
LINEAR_SPAN = 0.25


@dataclass
class PatchMask:
    """Boolean per-patch activity flags; True marks a fast-update patch."""

    flags: np.ndarray

    @property
    def num_patches(self) -> int:
        return int(self.flags.shape[0])

    @property
    def count(self) -> int:
        return int(np.count_nonzero(self.flags))

    def active_indices(self) -> np.ndarray:
        return np.flatnonzero(self.flags).astype(np.int64)

    @classmethod
    def full(cls, num_patches: int) -> "PatchMask":
        return cls(flags=np.ones(num_patches, dtype=bool))


def image_patch_layout(image: np.ndarray, patch_size: int) -> np.ndarray:
    """Reshape an image-shaped field (C, H, W) to (patches, tokens, channels).

    For multi-channel fields each pixel of a patch is a token with C channel
    values, matching latent-space usage. A single-channel field would make the
    per-token channel statistic degenerate (std of one value is always zero),
    so in that case the whole patch becomes one token whose "channels" are its
    pixel values; the statistic then measures dispersion across the patch.
    """
    if image.ndim != 3:
        raise ShapeError(f"expected (C, H, W) field, got shape {image.shape}")
    c, h, w = image.shape
    if h % patch_size or w % patch_size:
        raise ShapeError("field sides must be divisible by patch_size")
    gh, gw = h // patch_size, w // patch_size
    p = patch_size
    blocks = image.reshape(c, gh, p, gw, p).transpose(1, 3, 0, 2, 4).reshape(gh * gw, c, p * p)
    if c > 1:
        return np.ascontiguousarray(blocks.transpose(0, 2, 1))  # tokens = pixels, channels = C
    return blocks.reshape(gh * gw, 1, p * p)                    # one token per patch


def compute_cache_scores(noise, drops: np.ndarray, k: float, metric_kind: str = "std",
                         patch_size: int | None = None,
                         rng: np.random.Generator | None = None) -> np.ndarray:
    """Per-patch cacheability scores from a noise field and drop counts.

    Args:
        noise: (patches, tokens, channels) layout, or an image-shaped (C, H, W)
            field when ``patch_size`` is given.
        drops: per-patch drop counts.
        k: starvation scale, >= 0; each recorded drop multiplies a patch's
            score by exp(-k).
        metric_kind: "std", "l2norm" or "random".
        rng: required for the random metric, ignored otherwise.

    Returns:
        float32 scores, shape (patches,); lowest scores mark fast-update patches.
    """
    if metric_kind not in METRIC_KINDS:
        raise ConfigError(f"unknown metric kind {metric_kind!r}")
    if k < 0:
        raise ConfigError("starvation scale k must be >= 0")
    noise = np.asarray(noise)
    if patch_size is not None:
        noise = image_patch_layout(noise, patch_size)
    if noise.ndim != 3:
        raise ShapeError(f"expected (patches, tokens, channels), got shape {noise.shape}")
    if not np.isfinite(noise).all():
        raise NonFiniteError("noise field contains non-finite values")
    num_patches = noise.shape[0]
    drops = np.asarray(drops, dtype=np.int64)
    if drops.shape != (num_patches,):
        raise ShapeError(f"drop counts shape {drops.shape} != ({num_patches},)")

    if metric_kind == "random":
        if rng is None:
            raise ConfigError("random metric requires an rng")
        stat = rng.random(num_patches, dtype=np.float32)
    elif metric_kind == "std":
        per_token = noise.astype(np.float32).std(axis=2)       # population std across channels
        stat = per_token.mean(axis=1).astype(np.float32)
    else:
        per_token = np.sqrt((noise.astype(np.float32) ** 2).sum(axis=2))
        mean_norm = per_token.mean(axis=1)
        stat = (np.float32(1.0) / (mean_norm + np.float32(L2_EPS))).astype(np.float32)

    # iterated damping: one multiply per drop keeps s(D+1) == f * s(D) exact
    f = np.float32(math.exp(-k))
    scores = stat.copy()
    max_drops = int(drops.max()) if drops.size else 0
    for level in range(1, max_drops + 1):
        scores[drops >= level] *= f
    return scores


def select_active(scores: np.ndarray, ratio: float) -> PatchMask:
    """Pick the ceil(ratio * P) lowest-scoring patches; ties break by index."""
    if not (0.0 < ratio <= 1.0):
        raise ConfigError(f"ratio must be in (0, 1], got {ratio}")
    scores = np.asarray(scores)
    p = scores.shape[0]
    count = _ceil_count(ratio, p)
    order = np.argsort(scores, kind="stable")
    flags = np.zeros(p, dtype=bool)
    flags[order[:count]] = True
    return PatchMask(flags=flags)


def _ceil_count(ratio: float, p: int) -> int:
    # guard against 1-ulp float drift when ratio was stored as count/p
    raw = ratio * p
    nearest = round(raw)
    if abs(raw - nearest) < 1e-9:
        return min(p, max(1, int(nearest)))
    return min(p, max(1, math.ceil(raw)))


def update_drops(drops: np.ndarray, mask: PatchMask) -> np.ndarray:
    """Return drop counts incremented on every patch the mask left inactive."""
    drops = np.asarray(drops, dtype=np.int64)
    if drops.shape != mask.flags.shape:
        raise ShapeError("drop counts and mask shapes differ")
    out = drops.copy()
    out[~mask.flags] += 1
    return out


@dataclass(frozen=True)
class RatioSchedule:
    """Per-step sampling ratios with warmup and dense error-reset steps."""

    total_steps: int
    warmup_steps: int
    dense_reset_steps: tuple[int, ...]
    ratio_curve: np.ndarray = field(repr=False)
    starvation_scale: float = 0.3
    metric_kind: str = "std"

    def to_dict(self) -> dict:
        return {
            "total_steps": self.total_steps,
            "warmup_steps": self.warmup_steps,
            "dense_reset_steps": list(self.dense_reset_steps),
            "ratio_curve": [float(r) for r in self.ratio_curve],
            "starvation_scale": self.starvation_scale,
            "metric_kind": self.metric_kind,
        }


def ratio_for_step(schedule: RatioSchedule, t: int) -> float:
    if not (0 <= t < schedule.total_steps):
        raise ConfigError(f"step {t} outside schedule of {schedule.total_steps}")
    return float(schedule.ratio_curve[t])


def selective_steps(schedule: RatioSchedule) -> list[int]:
    return [t for t in range(schedule.total_steps) if schedule.ratio_curve[t] < 1.0]


def build_ratio_schedule(total_steps: int, warmup_steps: int, dense_reset_steps,
                         average_ratio: float, num_patches: int, curve: str = "linear",
                         starvation_scale: float = 0.3, metric_kind: str = "std") -> RatioSchedule:
    """Construct the per-step ratio curve for a run.

    Warmup steps and dense-reset steps run at ratio 1. Selective steps follow
    either a flat curve at the configured average or a decreasing linear ramp
    across the selective steps whose mean equals the average. Selective ratios
    are quantized to whole active-token counts (ratio = count / num_patches),
    which keeps the realized mean and FLOP ratios exact rather than subject to
    per-step ceil() drift.
    """
    if total_steps < 1:
        raise ConfigError("total_steps must be >= 1")
    if not (1 <= warmup_steps <= total_steps):
        raise ConfigError("warmup_steps must be in [1, total_steps]")
    if not (0.0 < average_ratio <= 1.0):
        raise ConfigError(f"average ratio must be in (0, 1], got {average_ratio}")
    if curve not in RATIO_CURVES:
        raise ConfigError(f"unknown ratio curve {curve!r}")
    if metric_kind not in METRIC_KINDS:
        raise ConfigError(f"unknown metric kind {metric_kind!r}")
    if starvation_scale < 0:
        raise ConfigError("starvation scale k must be >= 0")
    resets = tuple(sorted(set(int(t) for t in dense_reset_steps)))
    for t in resets:
        if t < warmup_steps:
            raise ConfigError(f"dense reset step {t} precedes warmup end {warmup_steps}")
        if t >= total_steps:
            raise ConfigError(f"dense reset step {t} outside run of {total_steps} steps")

    ratios = np.ones(total_steps, dtype=np.float64)
    sel = [t for t in range(total_steps) if t >= warmup_steps and t not in resets]
    if sel and average_ratio < 1.0:
        if num_patches < 2:
            raise ConfigError("selective sampling needs at least 2 patches")
        n = len(sel)
        if curve == "flat":
            ideal = np.full(n, average_ratio)
        else:
            span = min(LINEAR_SPAN, average_ratio / 2.0, (1.0 - average_ratio) / 2.0)
            ideal = np.linspace(average_ratio + span, average_ratio - span, n)
        counts = _quantize_counts(ideal, num_patches, average_ratio)
        for i, t in enumerate(sel):
            ratios[t] = counts[i] / num_patches
    return RatioSchedule(total_steps=total_steps, warmup_steps=warmup_steps,
                         dense_reset_steps=resets, ratio_curve=ratios,
                         starvation_scale=starvation_scale, metric_kind=metric_kind)


def _quantize_counts(ideal: np.ndarray, num_patches: int, average_ratio: float) -> np.ndarray:
    """Integer active counts per selective step, summing to the exact average."""
    target = int(round(average_ratio * num_patches * ideal.size))
    raw = ideal * num_patches
    counts = np.floor(raw).astype(np.int64)
    counts = np.clip(counts, 1, num_patches - 1)
    deficit = target - int(counts.sum())
    frac_order = np.argsort(-(raw - np.floor(raw)), kind="stable")
    i = 0
    guard = 0
    while deficit != 0 and guard < 4 * ideal.size:
        t = frac_order[i % ideal.size]
        if deficit > 0 and counts[t] < num_patches - 1:
            counts[t] += 1
            deficit -= 1
        elif deficit < 0 and counts[t] > 1:
            counts[t] -= 1
            deficit += 1
        i += 1
        guard += 1
    if deficit != 0:
        raise ConfigError("ratio schedule cannot be quantized within [1, P-1] counts")
    return counts
