"""Flow-matching trainer for the toy transformer.

Targets are straight-path velocities: draw x1 ~ N(0, I) and sigma ~ U(0, 1),
interpolate x_sigma = (1 - sigma) * x0 + sigma * x1, and regress the model
output against v* = x1 - x0 with mean squared error. The optimizer is AdamW
(decoupled weight decay) with linear warmup, plus an optional EMA of the
weights that replaces them when training ends.

Everything is driven by counter-based Philox streams keyed off the run seed,
so two runs with the same config produce bit-identical checkpoints.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dataset import ShapesDataset
from .engine import backward_batch, forward_batch
from .errors import NonFiniteError, TrainingDivergedError
from .model import DitModel

DIVERGENCE_FACTOR = 10.0


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 20000
    batch_size: int = 64
    lr: float = 1e-3
    warmup_steps: int = 500
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    ema_decay: float = 0.999
    seed: int = 0

    def to_dict(self) -> dict:
        return {
            "steps": self.steps, "batch_size": self.batch_size, "lr": self.lr,
            "warmup_steps": self.warmup_steps, "beta1": self.beta1, "beta2": self.beta2,
            "eps": self.eps, "weight_decay": self.weight_decay,
            "ema_decay": self.ema_decay, "seed": self.seed,
        }


class AdamW:
    """Plain AdamW on a parameter dict, float32 state, deterministic updates."""

    def __init__(self, params: dict[str, np.ndarray], cfg: TrainConfig):
        self.cfg = cfg
        self.step_count = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def _lr(self) -> float:
        c = self.cfg
        if c.warmup_steps and self.step_count <= c.warmup_steps:
            return c.lr * self.step_count / c.warmup_steps
        return c.lr

    def update(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        c = self.cfg
        self.step_count += 1
        lr = np.float32(self._lr())
        b1, b2 = np.float32(c.beta1), np.float32(c.beta2)
        eps = np.float32(c.eps)
        wd = np.float32(c.weight_decay)
        bc1 = np.float32(1.0 - c.beta1 ** self.step_count)
        bc2 = np.float32(1.0 - c.beta2 ** self.step_count)
        for k, p in params.items():
            g = grads[k]
            m = self.m[k]
            v = self.v[k]
            m *= b1
            m += (np.float32(1) - b1) * g
            v *= b2
            v += (np.float32(1) - b2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + eps)
            p -= lr * (update + wd * p)


def flow_matching_loss(model: DitModel, x0: np.ndarray, class_ids: np.ndarray,
                       rng: np.random.Generator) -> tuple[float, dict[str, np.ndarray]]:
    """One flow-matching loss evaluation with gradients for a clean-data batch."""
    dt = model.dtype
    x1 = rng.standard_normal(x0.shape, dtype=np.float32).astype(dt, copy=False)
    sig = rng.random(x0.shape[0], dtype=np.float32).astype(dt, copy=False)
    sb = sig[:, None, None, None]
    x0 = x0.astype(dt, copy=False)
    x_sig = (dt.type(1) - sb) * x0 + sb * x1
    target = x1 - x0
    pred, tape = forward_batch(model, x_sig, sig, class_ids, want_tape=True)
    diff = pred - target
    loss = float(np.mean(diff.astype(np.float64) ** 2))
    if not np.isfinite(loss):
        raise NonFiniteError("flow-matching loss is non-finite")
    dpred = (diff * dt.type(2.0 / diff.size)).astype(dt)
    grads = backward_batch(model, tape, dpred)
    return loss, grads


@dataclass
class TrainResult:
    model: DitModel
    losses: np.ndarray = field(repr=False)
    final_loss: float = float("nan")


def train(model: DitModel, dataset: ShapesDataset, cfg: TrainConfig,
          progress_every: int = 0) -> TrainResult:
    """Train in place and return the model plus the per-step loss curve.

    Data order is fixed: step t consumes dataset indices [t*B, (t+1)*B). The
    noise/sigma stream is a separate Philox generator keyed off the run seed.
    With ``ema_decay > 0`` an exponential moving average shadows the weights
    and is swapped in at the end, as is usual for diffusion models.
    """
    noise_rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([cfg.seed, 0x5EED])))
    ema = {k: v.copy() for k, v in model.params.items()} if cfg.ema_decay > 0 else None
    decay = np.float32(cfg.ema_decay)
    opt = AdamW(model.params, cfg)
    losses = np.zeros(cfg.steps, dtype=np.float64)
    initial = None
    for step in range(cfg.steps):
        imgs, labels = dataset.batch(step * cfg.batch_size, cfg.batch_size)
        loss, grads = flow_matching_loss(model, imgs, labels, noise_rng)
        opt.update(model.params, grads)
        model.invalidate_derived()
        if ema is not None:
            for k, p in model.params.items():
                ema[k] *= decay
                ema[k] += (np.float32(1) - decay) * p
        losses[step] = loss
        if initial is None:
            initial = loss
        elif loss > DIVERGENCE_FACTOR * initial:
            raise TrainingDivergedError(f"loss {loss:.4g} exceeded 10x initial {initial:.4g} at step {step}")
        if progress_every and (step + 1) % progress_every == 0:
            window = losses[max(0, step - 99):step + 1]
            print(f"step {step + 1}/{cfg.steps}  loss {loss:.4f}  avg100 {window.mean():.4f}", flush=True)
    if ema is not None and cfg.steps > 0:
        model.params = ema
        model.invalidate_derived()
    final = float(losses[-1]) if cfg.steps else float("nan")
    return TrainResult(model=model, losses=losses, final_loss=final)


def moving_average(x: np.ndarray, window: int) -> np.ndarray:
    if window <= 0 or window > x.size:
        raise ValueError("window must be in [1, len(x)]")
    c = np.cumsum(np.concatenate([[0.0], x]))
    return (c[window:] - c[:-window]) / window
