"""Rendered toy scenes: colored rectangles of a few classes on a textured background."""
from __future__ import annotations

import numpy as np

from . import rng as rngmod
from .boxes import GroundTruthBox

# class palette (RGB); objects get a small per-instance color jitter
PALETTE = np.array([
    [0.90, 0.25, 0.20],
    [0.20, 0.45, 0.95],
    [0.25, 0.85, 0.30],
    [0.95, 0.85, 0.20],
])


def render_scene(hw, seed: int, num_classes: int = 2, max_objects: int = 3,
                 size_range=(10, 28)) -> tuple[np.ndarray, list[GroundTruthBox]]:
    """CHW float32 image in [0, 1] and its boxes; object centers fall in distinct stride-4 cells."""
    if num_classes > len(PALETTE):
        raise ValueError(f"at most {len(PALETTE)} classes supported")
    h, w = hw
    r = rngmod.stream(seed, "scene")
    base = r.uniform(0.3, 0.5)
    img = np.full((3, h, w), base) + 0.03 * r.standard_normal((3, h, w))
    yy, xx = np.mgrid[0:h, 0:w]
    img += 0.05 * np.sin(xx / r.uniform(3, 8) + r.uniform(0, 6)) * np.cos(yy / r.uniform(3, 8))
    boxes: list[GroundTruthBox] = []
    cells = set()
    n = int(r.integers(1, max_objects + 1))
    for _ in range(50 * n):
        if len(boxes) == n:
            break
        bw, bh = r.integers(size_range[0], size_range[1] + 1, size=2)
        x0 = int(r.integers(0, w - bw + 1))
        y0 = int(r.integers(0, h - bh + 1))
        cell = ((2 * x0 + bw) // 8, (2 * y0 + bh) // 8)
        if cell in cells or any(_overlap((x0, y0, x0 + bw, y0 + bh), b.box) > 0.0 for b in boxes):
            continue
        cls = int(r.integers(0, num_classes))
        color = np.clip(PALETTE[cls] + 0.05 * r.standard_normal(3), 0, 1)
        img[:, y0:y0 + bh, x0:x0 + bw] = color[:, None, None]
        cells.add(cell)
        boxes.append(GroundTruthBox(cls, float(x0), float(y0), float(x0 + bw), float(y0 + bh)))
    return np.clip(img, 0, 1).astype(np.float32), boxes


def _overlap(a, b) -> float:
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    return iw * ih / min((a[2] - a[0]) * (a[3] - a[1]), (b[2] - b[0]) * (b[3] - b[1]))


def render_dataset(n: int, hw=(64, 64), seed: int = 0, num_classes: int = 2, max_objects: int = 3):
    return [render_scene(hw, rngmod.derive_seed(seed, "image", i), num_classes, max_objects)
            for i in range(n)]
