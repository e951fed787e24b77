"""Keypoint supervision: Gaussian center heatmaps, size and offset maps, and the inverse decode."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .boxes import Detection, clip_box

STRIDE = 4


@dataclass
class TargetMaps:
    hm_t: np.ndarray  # (C, H/4, W/4) in [0, 1]
    wh_t: np.ndarray  # (2, H/4, W/4): box (w, h) in output cells
    reg_t: np.ndarray  # (2, H/4, W/4): sub-cell center offset (x, y)
    pos_mask: np.ndarray  # (H/4, W/4) bool, object-center cells
    skipped: int = 0

    @property
    def num_pos(self) -> int:
        return int(self.pos_mask.sum())


def gaussian_radius(box_hw, min_overlap: float = 0.7) -> float:
    """Largest corner jitter r keeping IoU >= min_overlap, over three perturbation modes.

    Modes: both corners shifted the same way, box shrunk by r per side, box
    grown by r per side.  Each yields a quadratic in r; the binding root is
    the smallest positive one.
    """
    h, w = float(box_hw[0]), float(box_hw[1])
    m = float(min_overlap)
    if h <= 0 or w <= 0:
        return 0.0
    s, p = h + w, h * w
    # shifted: r^2 - (h+w) r + hw (1-m)/(1+m) >= 0, smaller root
    c1 = p * (1 - m) / (1 + m)
    r1 = (s - math.sqrt(max(s * s - 4 * c1, 0.0))) / 2
    # shrunk: 4r^2 - 2(h+w) r + (1-m) hw >= 0, smaller root
    r2 = (2 * s - math.sqrt(max(4 * s * s - 16 * (1 - m) * p, 0.0))) / 8
    # grown: 4m r^2 + 2m(h+w) r - (1-m) hw <= 0, positive root
    r3 = (-2 * m * s + math.sqrt(4 * m * m * s * s + 16 * m * (1 - m) * p)) / (8 * m)
    return max(0.0, min(r1, r2, r3))


def draw_gaussian(hm: np.ndarray, cx: int, cy: int, radius: float) -> None:
    """Max-splat exp(-d^2 / 2 sigma^2), sigma = radius / 3, onto the (H, W) map in place."""
    h, w = hm.shape
    r = int(radius)
    sigma = radius / 3.0
    ys = np.arange(max(0, cy - r), min(h, cy + r + 1))
    xs = np.arange(max(0, cx - r), min(w, cx + r + 1))
    d2 = (ys[:, None] - cy) ** 2 + (xs[None, :] - cx) ** 2
    if sigma > 0:
        g = np.exp(-d2 / (2 * sigma * sigma))
    else:
        g = (d2 == 0).astype(np.float64)
    region = hm[ys[0]:ys[-1] + 1, xs[0]:xs[-1] + 1]
    np.maximum(region, g.astype(hm.dtype), out=region)


def encode_targets(boxes, num_classes: int, input_hw, min_overlap: float = 0.7,
                   dtype=np.float32) -> TargetMaps:
    """Rasterize boxes into quarter-resolution target maps.

    Boxes are clipped to the image; boxes with nothing left are skipped and
    counted.  Two boxes sharing a center cell: the later one owns wh/reg there.
    """
    H, W = input_hw
    ho, wo = H // STRIDE, W // STRIDE
    hm = np.zeros((num_classes, ho, wo), dtype=np.float64)
    wh = np.zeros((2, ho, wo), dtype=dtype)
    reg = np.zeros((2, ho, wo), dtype=dtype)
    pos = np.zeros((ho, wo), dtype=bool)
    skipped = 0
    for b in boxes:
        if not 0 <= b.class_id < num_classes:
            raise ValueError(f"class_id {b.class_id} outside [0, {num_classes})")
        x0, y0, x1, y1 = clip_box(b.box, W, H)
        if x1 <= x0 or y1 <= y0:
            skipped += 1
            continue
        bw, bh = (x1 - x0) / STRIDE, (y1 - y0) / STRIDE
        cx = min((x0 + x1) / 2 / STRIDE, np.nextafter(wo, 0))
        cy = min((y0 + y1) / 2 / STRIDE, np.nextafter(ho, 0))
        ix, iy = int(cx), int(cy)
        draw_gaussian(hm[b.class_id], ix, iy, gaussian_radius((bh, bw), min_overlap))
        wh[:, iy, ix] = (bw, bh)
        reg[:, iy, ix] = (cx - ix, cy - iy)
        pos[iy, ix] = True
    return TargetMaps(hm.astype(dtype), wh, reg, pos, skipped)


def stack_targets(maps) -> TargetMaps:
    """Batch per-image targets along a new leading axis."""
    maps = list(maps)
    return TargetMaps(
        np.stack([m.hm_t for m in maps]),
        np.stack([m.wh_t for m in maps]),
        np.stack([m.reg_t for m in maps]),
        np.stack([m.pos_mask for m in maps]),
        sum(m.skipped for m in maps),
    )


def _as_array(x) -> np.ndarray:
    return np.asarray(getattr(x, "data", x), dtype=np.float64)


def local_peaks(hm: np.ndarray) -> np.ndarray:
    """Boolean map of cells equal to the max of their 3x3 neighbourhood."""
    padded = np.pad(hm, ((0, 0), (1, 1), (1, 1)), constant_values=-np.inf)
    h, w = hm.shape[1:]
    pooled = np.max([padded[:, i:i + h, j:j + w] for i in range(3) for j in range(3)], axis=0)
    return hm == pooled


def decode_detections(out, k_max: int = 100, score_thresh: float = 0.1,
                      image_id: int = 0) -> list[Detection]:
    """Peaks of one image's (hm, wh, reg) maps, each shaped (C|2, H/4, W/4), to boxes.

    Sorted by descending score; ties keep the flat (class, y, x) index order.
    """
    hm, wh, reg = (_as_array(t) for t in (out[0], out[1], out[2]))
    if hm.ndim == 4:
        if hm.shape[0] != 1:
            raise ValueError("decode_detections handles one image at a time")
        hm, wh, reg = hm[0], wh[0], reg[0]
    c, h, w = hm.shape
    keep = local_peaks(hm) & (hm > score_thresh)
    flat = np.flatnonzero(keep)
    order = flat[np.argsort(-hm.reshape(-1)[flat], kind="stable")][:k_max]
    img_w, img_h = w * STRIDE, h * STRIDE
    dets = []
    for idx in order:
        cls, rem = divmod(int(idx), h * w)
        y, x = divmod(rem, w)
        cx = STRIDE * (x + reg[0, y, x])
        cy = STRIDE * (y + reg[1, y, x])
        bw, bh = STRIDE * wh[0, y, x], STRIDE * wh[1, y, x]
        box = clip_box((cx - bw / 2, cy - bh / 2, cx + bw / 2, cy + bh / 2), img_w, img_h)
        dets.append(Detection(cls, tuple(float(v) for v in box), float(hm[cls, y, x]), image_id))
    return dets


def decode_batch(det_outputs, k_max: int = 100, score_thresh: float = 0.1,
                 image_ids=None) -> list[list[Detection]]:
    hm, wh, reg = (_as_array(t) for t in det_outputs)
    ids = range(len(hm)) if image_ids is None else image_ids
    return [decode_detections((hm[i], wh[i], reg[i]), k_max, score_thresh, image_id)
            for i, image_id in enumerate(ids)]
