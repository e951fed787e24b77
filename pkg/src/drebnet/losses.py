"""Detection and restoration losses on engine tensors, and their weighted total."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .engine import ops
from .engine.tensor import EngineError, Tensor, no_grad
from .model import Phase

PROB_CLAMP = 1e-7
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03


@dataclass
class LossWeights:
    w_hm: float = 1.0
    w_wh: float = 0.1
    w_off: float = 1.0
    w_mse: float = 1.0
    w_ssim: float = 0.5
    gamma: float = 2.0
    beta: float = 4.0

    def __post_init__(self):
        for name in ("w_hm", "w_wh", "w_off", "w_mse", "w_ssim"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be >= 0")


def _const(a, like: Tensor) -> Tensor:
    return Tensor(np.asarray(a, dtype=like.dtype))


def focal_loss(hm_pred: Tensor, hm_t, pos_mask=None, gamma: float = 2.0, beta: float = 4.0) -> Tensor:
    """Penalty-reduced focal loss, normalized by the number of positives (at least 1).

    Positives default to cells where the target heatmap is exactly 1.
    """
    hm_t = np.asarray(hm_t)
    if hm_pred.shape != hm_t.shape:
        raise EngineError(f"focal_loss shape mismatch: {hm_pred.shape} vs {hm_t.shape}")
    pos = (hm_t >= 1.0) if pos_mask is None else np.broadcast_to(np.asarray(pos_mask, bool), hm_t.shape)
    n_pos = max(int(pos.sum()), 1)
    p = ops.clamp(hm_pred, PROB_CLAMP, 1.0 - PROB_CLAMP)
    pos_term = ops.pow(1.0 - p, gamma) * ops.log(p) * _const(pos, p)
    neg_w = np.where(pos, 0.0, (1.0 - hm_t) ** beta)
    neg_term = ops.pow(p, gamma) * ops.log(1.0 - p) * _const(neg_w, p)
    return ops.sum(pos_term + neg_term) * (-1.0 / n_pos)


def _masked_l1(pred: Tensor, target, pos_mask) -> Tensor:
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise EngineError(f"regression shape mismatch: {pred.shape} vs {target.shape}")
    mask = np.asarray(pos_mask, bool)
    # (N, H, W) or (H, W) mask broadcast over the 2 channels
    mask = np.expand_dims(mask, -3)
    m = max(int(mask.sum()), 1)
    diff = ops.abs(pred - _const(target, pred)) * _const(mask, pred)
    return ops.sum(diff) * (1.0 / m)


def wh_loss(wh_pred: Tensor, wh_t, pos_mask) -> Tensor:
    return _masked_l1(wh_pred, wh_t, pos_mask)


def offset_loss(reg_pred: Tensor, reg_t, pos_mask) -> Tensor:
    return _masked_l1(reg_pred, reg_t, pos_mask)


def mse_loss(restored: Tensor, sharp) -> Tensor:
    sharp = sharp if isinstance(sharp, Tensor) else _const(sharp, restored)
    if restored.shape != sharp.shape:
        raise EngineError(f"mse_loss shape mismatch: {restored.shape} vs {sharp.shape}")
    d = restored - sharp
    return ops.mean(d * d)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-x * x / (2 * sigma * sigma))
    return g / g.sum()


def _blur(x: Tensor, g: np.ndarray) -> Tensor:
    k = len(g)
    gv = _const(g.reshape(1, 1, k, 1), x)
    gh = _const(g.reshape(1, 1, 1, k), x)
    return ops.conv2d(ops.conv2d(x, gv), gh)


def ssim_map(a: Tensor, b: Tensor, data_range: float = 1.0) -> Tensor:
    """Per-window SSIM over each channel separately; valid windows only, stride 1."""
    if a.shape != b.shape:
        raise EngineError(f"ssim shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim == 3:
        a, b = ops.reshape(a, (1,) + a.shape), ops.reshape(b, (1,) + b.shape)
    n, c, h, w = a.shape
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise EngineError(f"image {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    a = ops.reshape(a, (n * c, 1, h, w))
    b = ops.reshape(b, (n * c, 1, h, w))
    g = gaussian_window()
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_a, mu_b = _blur(a, g), _blur(b, g)
    mu_ab = mu_a * mu_b
    mu_aa, mu_bb = mu_a * mu_a, mu_b * mu_b
    s_aa = _blur(a * a, g) - mu_aa
    s_bb = _blur(b * b, g) - mu_bb
    s_ab = _blur(a * b, g) - mu_ab
    num = (2.0 * mu_ab + c1) * (2.0 * s_ab + c2)
    den = (mu_aa + mu_bb + c1) * (s_aa + s_bb + c2)
    return num / den


def ssim(a, b, data_range: float = 1.0) -> float:
    """Mean SSIM of two images (arrays or tensors, CHW or NCHW), in float64."""
    with no_grad():
        ta = Tensor(np.asarray(getattr(a, "data", a), dtype=np.float64))
        tb = Tensor(np.asarray(getattr(b, "data", b), dtype=np.float64))
        return float(ssim_map(ta, tb, data_range).data.mean())


def ssim_loss(restored: Tensor, sharp, data_range: float = 1.0) -> Tensor:
    sharp = sharp if isinstance(sharp, Tensor) else _const(sharp, restored)
    return 1.0 - ops.mean(ssim_map(restored, sharp, data_range))


DET_PARTS = ("hm", "wh", "off")
RESTORE_PARTS = ("mse", "ssim")


def total_loss(parts: dict, w: LossWeights, phase: Phase = Phase.JOINT):
    """Weighted sum; restoration terms count only in the joint phase."""
    if phase is Phase.INFERENCE:
        raise ValueError("no loss in the inference phase")
    missing = [k for k in DET_PARTS if k not in parts]
    if phase is Phase.JOINT:
        missing += [k for k in RESTORE_PARTS if parts.get(k) is None]
    if missing:
        raise ValueError(f"total_loss missing parts for {phase.value}: {missing}")
    names = DET_PARTS + (RESTORE_PARTS if phase is Phase.JOINT else ())
    total = 0.0
    for name in names:
        total = total + getattr(w, "w_" + name) * parts[name]
    return total


def detection_losses(det, targets, w: LossWeights) -> dict:
    """hm/wh/off parts for a batch of DetOutputs against stacked TargetMaps."""
    return {
        "hm": focal_loss(det.hm, targets.hm_t, gamma=w.gamma, beta=w.beta),
        "wh": wh_loss(det.wh, targets.wh_t, targets.pos_mask),
        "off": offset_loss(det.reg, targets.reg_t, targets.pos_mask),
    }


def restoration_losses(restored: Tensor, sharp) -> dict:
    return {"mse": mse_loss(restored, sharp), "ssim": ssim_loss(restored, sharp)}
