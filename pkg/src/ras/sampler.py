"""Flow-matching Euler sampler with region-adaptive token updates.

Each step runs the model on the current fast-update patches only, merges the
fresh predictions with the cached noise of the slow-update patches, takes one
Euler step on the full image, then scores all patches from the merged noise
field and selects the next mask. Warmup steps and dense error-reset steps run
every patch, which also refreshes the KV caches and the whole noise cache.

The dense reference sampler (`sample_dense`) walks the same sigma schedule
through the batched engine path with none of the masking machinery, and is the
oracle the RAS pipeline must reproduce when every ratio is 1.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from . import selector
from .engine import forward_batch
from .errors import ConfigError, NonFiniteError, ShapeError, StateError
from .flops import FlopCounter
from .model import DitModel, KVCache, forward, patchify, unpatchify
from .selector import PatchMask, RatioSchedule, build_ratio_schedule


@dataclass(frozen=True)
class SigmaSchedule:
    """Strictly decreasing noise levels from 1 to 0, optionally time-shifted."""

    sigmas: np.ndarray  # (T + 1,) float64, sigmas[0] = 1, sigmas[-1] = 0

    def __post_init__(self):
        s = self.sigmas
        if s.ndim != 1 or s.size < 2 or s[0] != 1.0 or s[-1] != 0.0:
            raise ConfigError("sigma schedule must run from 1 to 0")
        if np.any(np.diff(s) >= 0):
            raise ConfigError("sigma schedule must be strictly decreasing")

    @property
    def steps(self) -> int:
        return self.sigmas.size - 1

    @classmethod
    def linear(cls, steps: int, shift: float = 1.0) -> "SigmaSchedule":
        """Uniform grid sigma_i = 1 - i/T, through mu*s / (1 + (mu-1)*s) when shifted."""
        if steps < 1:
            raise ConfigError("steps must be >= 1")
        if shift <= 0:
            raise ConfigError("shift must be positive")
        s = 1.0 - np.arange(steps + 1, dtype=np.float64) / steps
        if shift != 1.0:
            s = shift * s / (1.0 + (shift - 1.0) * s)
        s[0], s[-1] = 1.0, 0.0
        return cls(sigmas=s)


@dataclass(frozen=True)
class RasConfig:
    """All region-adaptive sampling knobs for one run."""

    total_steps: int = 30
    warmup_steps: int = 4
    dense_reset_steps: tuple[int, ...] = (12, 20)
    average_ratio: float = 0.5
    ratio_curve: str = "linear"
    starvation_scale: float = 0.3
    metric_kind: str = "std"
    sigma_shift: float = 1.0

    def to_dict(self) -> dict:
        return {
            "total_steps": self.total_steps, "warmup_steps": self.warmup_steps,
            "dense_reset_steps": list(self.dense_reset_steps),
            "average_ratio": self.average_ratio, "ratio_curve": self.ratio_curve,
            "starvation_scale": self.starvation_scale, "metric_kind": self.metric_kind,
            "sigma_shift": self.sigma_shift,
        }

    def build_schedule(self, num_patches: int) -> RatioSchedule:
        return build_ratio_schedule(
            self.total_steps, self.warmup_steps, self.dense_reset_steps,
            self.average_ratio, num_patches, curve=self.ratio_curve,
            starvation_scale=self.starvation_scale, metric_kind=self.metric_kind)


@dataclass
class RasState:
    """Mutable per-run state owned by a single sampling loop."""

    sample: np.ndarray
    cached_noise: np.ndarray | None
    drops: np.ndarray
    step: int
    mask: PatchMask


@dataclass
class StepRecord:
    step: int
    sigma: float
    ratio: float
    active: np.ndarray
    flops: dict[str, int]
    wall_ms: float
    scores: np.ndarray | None

    def to_json(self) -> str:
        return json.dumps({
            "step": self.step,
            "sigma": self.sigma,
            "ratio": self.ratio,
            "active": [int(i) for i in self.active],
            "flops": self.flops,
            "wall_ms": self.wall_ms,
            "scores": None if self.scores is None else [float(s) for s in self.scores],
        }, sort_keys=True)


@dataclass
class RunTrace:
    """Per-step record of one sampling run, serializable to JSON lines."""

    meta: dict
    records: list[StepRecord] = field(default_factory=list)
    debug: dict = field(default_factory=dict, repr=False)

    @property
    def num_patches(self) -> int:
        return int(self.meta["num_patches"])

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(json.dumps({"meta": self.meta}, sort_keys=True) + "\n")
            for rec in self.records:
                fh.write(rec.to_json() + "\n")

    @classmethod
    def load(cls, path) -> "RunTrace":
        with open(path, "r", encoding="utf-8") as fh:
            header = json.loads(fh.readline())
            trace = cls(meta=header["meta"])
            for line in fh:
                if not line.strip():
                    continue
                d = json.loads(line)
                trace.records.append(StepRecord(
                    step=d["step"], sigma=d["sigma"], ratio=d["ratio"],
                    active=np.asarray(d["active"], dtype=np.int64),
                    flops=d["flops"], wall_ms=d["wall_ms"],
                    scores=None if d["scores"] is None else np.asarray(d["scores"], dtype=np.float32)))
        return trace

    def activation_counts(self) -> np.ndarray:
        counts = np.zeros(self.num_patches, dtype=np.int64)
        for rec in self.records:
            counts[rec.active] += 1
        return counts


def merge_noise(cached: np.ndarray | None, fresh: np.ndarray, mask: PatchMask,
                patch_size: int) -> np.ndarray:
    """Combine fresh predictions (active patches) with cached noise elsewhere."""
    if cached is None:
        raise StateError("noise cache is uninitialized; a warmup/dense step must run first")
    if cached.shape != fresh.shape:
        raise ShapeError(f"cached {cached.shape} vs fresh {fresh.shape}")
    c, h, w = cached.shape
    gh, gw = h // patch_size, w // patch_size
    if mask.num_patches != gh * gw:
        raise ShapeError("mask size does not match the patch grid")
    pixel_mask = np.repeat(np.repeat(mask.flags.reshape(gh, gw), patch_size, 0), patch_size, 1)
    return np.where(pixel_mask[None], fresh, cached)


def euler_step(sample: np.ndarray, noise: np.ndarray, sigma_t: float, sigma_next: float) -> np.ndarray:
    """One explicit Euler step S' = S + (sigma_next - sigma_t) * N."""
    if sigma_next >= sigma_t:
        raise ConfigError(f"sigma must decrease: {sigma_t} -> {sigma_next}")
    ds = sample.dtype.type(sigma_next - sigma_t)
    out = sample + ds * noise
    if not np.isfinite(out).all():
        raise NonFiniteError("euler step produced non-finite values")
    return out


def initial_noise(model: DitModel, seed: int) -> np.ndarray:
    """The shared x_T draw: one seeded Philox stream in fixed C order."""
    cfg = model.cfg
    gen = np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), 0x1A17])))
    return gen.standard_normal((cfg.channels, cfg.image_h, cfg.image_w), dtype=np.float32)


def _metric_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), 0xA3, int(step)])))


def sample_ras(model: DitModel, sigma_schedule: SigmaSchedule, ras: RasConfig, seed: int,
               class_id: int | None = None, record_debug: bool = False) -> tuple[np.ndarray, RunTrace]:
    """Run the region-adaptive sampler; returns the final image and its trace.

    Per step: pick this step's ratio; run the model densely (ratio 1, which
    refreshes KV caches and the noise cache) or selectively on the current
    mask; restore the full-length noise by merging with the cache; take the
    Euler update; score patches from the merged noise; bump drop counts for
    the patches this step skipped; select the next mask.
    """
    cfg = model.cfg
    if sigma_schedule.steps != ras.total_steps:
        raise ConfigError("sigma schedule and RAS schedule disagree on step count")
    schedule = ras.build_schedule(cfg.num_patches)
    trace = RunTrace(meta={
        "kind": "ras", "seed": int(seed), "class_id": class_id,
        "num_patches": cfg.num_patches, "model": cfg.to_dict(), "ras": ras.to_dict(),
        "schedule": schedule.to_dict(),
        "sigmas": [float(s) for s in sigma_schedule.sigmas],
    })
    cache = KVCache(cfg, dtype=model.dtype)
    state = RasState(
        sample=initial_noise(model, seed).astype(model.dtype),
        cached_noise=None,
        drops=np.zeros(cfg.num_patches, dtype=np.int64),
        step=0,
        mask=PatchMask.full(cfg.num_patches),
    )
    if record_debug:
        trace.debug = {"samples": [], "merged_noise": [], "fresh": [], "masks": []}

    all_patches = np.arange(cfg.num_patches, dtype=np.int64)
    for t in range(ras.total_steps):
        t0 = time.perf_counter()
        flops = FlopCounter()
        state.step = t
        ratio = selector.ratio_for_step(schedule, t)
        dense_step = ratio >= 1.0
        active = all_patches if dense_step else state.mask.active_indices()
        mask = PatchMask.full(cfg.num_patches) if dense_step else state.mask

        tokens = patchify(model, state.sample, active, flops=flops)
        try:
            pred = forward(model, tokens, float(sigma_schedule.sigmas[t]), class_id,
                           cache=cache, use_recovery=True, flops=flops)
        except NonFiniteError as e:
            raise NonFiniteError(f"step {t}: {e}") from e

        fresh = np.zeros_like(state.sample)
        unpatchify(cfg, pred, active, fresh)
        if dense_step:
            merged = fresh
            cache.last_full_step = t
        else:
            merged = merge_noise(state.cached_noise, fresh, mask, cfg.patch_size)
        state.cached_noise = merged

        try:
            state.sample = euler_step(state.sample, merged,
                                      float(sigma_schedule.sigmas[t]), float(sigma_schedule.sigmas[t + 1]))
        except NonFiniteError as e:
            raise NonFiniteError(f"step {t}: {e}") from e

        scores = selector.compute_cache_scores(
            merged, state.drops, schedule.starvation_scale, schedule.metric_kind,
            patch_size=cfg.patch_size,
            rng=_metric_rng(seed, t) if schedule.metric_kind == "random" else None)
        state.drops = selector.update_drops(state.drops, mask)
        if t + 1 < ras.total_steps:
            state.mask = selector.select_active(scores, selector.ratio_for_step(schedule, t + 1))

        wall_ms = (time.perf_counter() - t0) * 1e3
        trace.records.append(StepRecord(
            step=t, sigma=float(sigma_schedule.sigmas[t]), ratio=ratio,
            active=np.asarray(active, dtype=np.int64), flops=flops.as_dict(),
            wall_ms=wall_ms, scores=scores))
        if record_debug:
            trace.debug["samples"].append(state.sample.copy())
            trace.debug["merged_noise"].append(merged.copy())
            trace.debug["fresh"].append((fresh.copy(), np.asarray(active, dtype=np.int64)))
            trace.debug["masks"].append(mask.flags.copy())
    return state.sample, trace


def sample_dense(model: DitModel, sigma_schedule: SigmaSchedule, seed: int,
                 class_id: int | None = None, record_debug: bool = False) -> tuple[np.ndarray, RunTrace]:
    """Plain Euler sampler through the dense engine path (no masking machinery)."""
    cfg = model.cfg
    trace = RunTrace(meta={
        "kind": "dense", "seed": int(seed), "class_id": class_id,
        "num_patches": cfg.num_patches, "model": cfg.to_dict(),
        "sigmas": [float(s) for s in sigma_schedule.sigmas],
    })
    sample = initial_noise(model, seed).astype(model.dtype)
    ids = None if class_id is None else np.asarray([class_id], dtype=np.int64)
    if record_debug:
        trace.debug = {"samples": []}
    for t in range(sigma_schedule.steps):
        t0 = time.perf_counter()
        flops = FlopCounter()
        pred = forward_batch(model, sample[None], [float(sigma_schedule.sigmas[t])], ids,
                             flops=flops)[0]
        sample = euler_step(sample, pred, float(sigma_schedule.sigmas[t]),
                            float(sigma_schedule.sigmas[t + 1]))
        trace.records.append(StepRecord(
            step=t, sigma=float(sigma_schedule.sigmas[t]), ratio=1.0,
            active=np.arange(cfg.num_patches, dtype=np.int64), flops=flops.as_dict(),
            wall_ms=(time.perf_counter() - t0) * 1e3, scores=None))
        if record_debug:
            trace.debug["samples"].append(sample.copy())
    return sample, trace
