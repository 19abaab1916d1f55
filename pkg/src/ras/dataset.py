"""Procedural shapes dataset: class-conditioned antialiased figures.

Every sample is fully determined by ``(seed, index)`` through a counter-based
Philox stream, so the dataset needs no storage and is reproducible across
platforms and across any iteration order. Background is 0, the figure interior
carries a per-sample intensity in [0.5, 1.0], and edges get one pixel of
signed-distance antialiasing. Images are returned in [-1, 1] (2*v - 1), which
puts the background at -1.

The strong foreground/background contrast is deliberate: it gives the trained
model's velocity predictions the low-dispersion-subject / high-dispersion-
background structure that region selection keys on.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

CLASSES = ("circle", "square", "triangle", "ring")


def _sdf(kind: str, size: int, cx: float, cy: float, radius: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    px = xx - cx
    py = yy - cy
    if kind == "circle":
        return np.hypot(px, py) - radius
    if kind == "square":
        return np.maximum(np.abs(px), np.abs(py)) - radius
    if kind == "ring":
        return np.abs(np.hypot(px, py) - radius) - 0.4 * radius
    if kind == "triangle":
        # upward equilateral triangle: max of three half-plane distances
        verts = [(cx + radius * np.cos(a), cy - radius * np.sin(a))
                 for a in (np.pi / 2, np.pi / 2 + 2 * np.pi / 3, np.pi / 2 + 4 * np.pi / 3)]
        dist = np.full((size, size), -np.inf)
        for i in range(3):
            x0, y0 = verts[i]
            x1, y1 = verts[(i + 1) % 3]
            ex, ey = x1 - x0, y1 - y0
            norm = np.hypot(ex, ey)
            nx, ny = -ey / norm, ex / norm  # outward for this vertex order
            dist = np.maximum(dist, (xx - x0) * nx + (yy - y0) * ny)
        return dist
    raise ValueError(f"unknown shape kind {kind!r}")


@dataclass(frozen=True)
class ShapesDataset:
    image_size: int = 16
    seed: int = 0
    num_classes: int = 4

    def class_of(self, index: int) -> int:
        return index % self.num_classes

    def sample(self, index: int) -> tuple[np.ndarray, int]:
        """Return ``(image, class_id)``; image is (1, S, S) float32 in [-1, 1]."""
        cls = self.class_of(index)
        gen = np.random.Generator(np.random.Philox(np.random.SeedSequence([self.seed, int(index)])))
        s = self.image_size
        jitter = s / 8.0
        cx = s / 2.0 - 0.5 + gen.uniform(-jitter, jitter)
        cy = s / 2.0 - 0.5 + gen.uniform(-jitter, jitter)
        radius = gen.uniform(s / 5.0, s / 3.2)
        intensity = gen.uniform(0.5, 1.0)
        dist = _sdf(CLASSES[cls], s, cx, cy, radius)
        coverage = np.clip(0.5 - dist, 0.0, 1.0)
        img01 = (coverage * intensity).astype(np.float32)
        return (2.0 * img01 - 1.0)[None].astype(np.float32), cls

    def batch(self, start: int, count: int) -> tuple[np.ndarray, np.ndarray]:
        imgs = np.empty((count, 1, self.image_size, self.image_size), dtype=np.float32)
        labels = np.empty(count, dtype=np.int64)
        for j in range(count):
            imgs[j], labels[j] = self.sample(start + j)
        return imgs, labels


def class_templates(dataset: ShapesDataset, per_class: int = 64) -> np.ndarray:
    """Mean image per class over the first ``per_class`` samples of each class."""
    s = dataset.image_size
    sums = np.zeros((dataset.num_classes, 1, s, s), dtype=np.float64)
    counts = np.zeros(dataset.num_classes, dtype=np.int64)
    index = 0
    while counts.min() < per_class:
        img, cls = dataset.sample(index)
        if counts[cls] < per_class:
            sums[cls] += img
            counts[cls] += 1
        index += 1
    return (sums / counts[:, None, None, None]).astype(np.float32)


def classify_by_template(image: np.ndarray, templates: np.ndarray) -> int:
    """Nearest-template classification by normalized correlation."""
    x = image.astype(np.float64).ravel()
    x = x - x.mean()
    xn = np.linalg.norm(x) + 1e-12
    best, best_score = 0, -np.inf
    for c in range(templates.shape[0]):
        t = templates[c].astype(np.float64).ravel()
        t = t - t.mean()
        score = float(np.dot(x, t) / (xn * (np.linalg.norm(t) + 1e-12)))
        if score > best_score:
            best, best_score = c, score
    return best
