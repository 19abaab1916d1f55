"""PGM/PNG export for samples and heatmaps.

PGM (binary P5, maxval 255) is the canonical artifact format: trivially
bit-exact and diffable. PNG is written alongside as a viewing convenience.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError


def to_uint8(image: np.ndarray, lo: float = -1.0, hi: float = 1.0) -> np.ndarray:
    """Map a (C, H, W) or (H, W) array from [lo, hi] to uint8 grayscale."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 3:
        if arr.shape[0] != 1:
            raise ShapeError("only single-channel images can be exported")
        arr = arr[0]
    if arr.ndim != 2:
        raise ShapeError(f"expected 2-D image, got shape {arr.shape}")
    scaled = (arr - lo) / (hi - lo)
    return np.clip(np.rint(scaled * 255.0), 0, 255).astype(np.uint8)


def write_pgm(path, gray: np.ndarray) -> None:
    if gray.dtype != np.uint8 or gray.ndim != 2:
        raise ShapeError("write_pgm expects a 2-D uint8 array")
    h, w = gray.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(gray.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    parts = data.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ShapeError("not a binary PGM file")
    w, h = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3][:w * h], dtype=np.uint8).reshape(h, w)


def write_png(path, gray: np.ndarray, upscale: int = 1) -> None:
    """Optional PNG companion (needs Pillow; silently skipped if unavailable)."""
    try:
        from PIL import Image
    except ImportError:
        return
    if upscale > 1:
        gray = np.repeat(np.repeat(gray, upscale, 0), upscale, 1)
    Image.fromarray(gray, mode="L").save(path)


def heatmap_to_uint8(grid: np.ndarray, vmax: float | None = None) -> np.ndarray:
    """Scale a nonnegative count grid to uint8, darkest = 0, brightest = max."""
    arr = np.asarray(grid, dtype=np.float64)
    top = float(arr.max()) if vmax is None else float(vmax)
    if top <= 0:
        return np.zeros(arr.shape, dtype=np.uint8)
    return np.clip(np.rint(arr / top * 255.0), 0, 255).astype(np.uint8)
