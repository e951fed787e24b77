"""Axis-aligned boxes in input-pixel coordinates (x_min, y_min, x_max, y_max)."""
from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class GroundTruthBox:
    class_id: int
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if not (self.x_max > self.x_min and self.y_max > self.y_min):
            raise ValueError(f"degenerate box {self.box}")

    @property
    def box(self) -> tuple:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    @property
    def area(self) -> float:
        return box_area(self.box)


@dataclass(frozen=True)
class Detection:
    class_id: int
    box: tuple
    score: float
    image_id: int = 0

    @property
    def area(self) -> float:
        return box_area(self.box)


def box_area(b) -> float:
    return max(0.0, b[2] - b[0]) * max(0.0, b[3] - b[1])


def iou(a, b) -> float:
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = box_area(a) + box_area(b) - inter
    return inter / union if union > 0 else 0.0


def clip_box(b, width: float, height: float) -> tuple:
    return (min(max(b[0], 0.0), width), min(max(b[1], 0.0), height),
            min(max(b[2], 0.0), width), min(max(b[3], 0.0), height))


def hflip_box(b, width: float) -> tuple:
    return (width - b[2], b[1], width - b[0], b[3])
