"""Attention-gated two-stage feature fusion (MAGFF) and learnable amplitude modulation (LFAMM)."""
from __future__ import annotations

import numpy as np

from .engine import ops
from .engine.nn import BatchNorm2d, Conv2d, Module, parameter
from .engine.tensor import EngineError, Tensor


class AttentionBranch(Module):
    """conv1x1 (C -> C/r) -> BN -> ReLU -> conv1x1 (C/r -> C) -> BN."""

    def __init__(self, channels: int, reduction: int, rng: np.random.Generator):
        hidden = channels // reduction
        self.conv1 = Conv2d(channels, hidden, 1, rng, bias=False)
        self.bn1 = BatchNorm2d(hidden)
        self.conv2 = Conv2d(hidden, channels, 1, rng, bias=False)
        self.bn2 = BatchNorm2d(channels)

    def forward(self, x: Tensor) -> Tensor:
        return self.bn2(self.conv2(ops.relu(self.bn1(self.conv1(x)))))


class MagffStageParams(Module):
    def __init__(self, channels: int, reduction: int, rng: np.random.Generator):
        if reduction < 1 or channels % reduction:
            raise ValueError(f"reduction ratio {reduction} must divide channel count {channels}")
        self.channels = channels
        self.reduction = reduction
        self.local = AttentionBranch(channels, reduction, rng)
        self.global_ = AttentionBranch(channels, reduction, rng)


class MagffParams(Module):
    """Two independently parameterized attention stages."""

    def __init__(self, channels: int, rng: np.random.Generator, reduction: int = 4):
        self.stage1 = MagffStageParams(channels, reduction, rng)
        self.stage2 = MagffStageParams(channels, reduction, rng)

    def forward(self, x1: Tensor, x2: Tensor) -> Tensor:
        return magff_fuse(x1, x2, self)


def _check_channels(x: Tensor, p: MagffStageParams) -> None:
    if x.ndim != 4 or x.shape[1] != p.channels:
        raise EngineError(f"expected NCHW input with {p.channels} channels, got {x.shape}")


def local_attention(x: Tensor, p: MagffStageParams) -> Tensor:
    _check_channels(x, p)
    return p.local(x)


def global_attention(x: Tensor, p: MagffStageParams) -> Tensor:
    _check_channels(x, p)
    return p.global_(ops.adaptive_avg_pool(x))


def stage_gate(x: Tensor, p: MagffStageParams) -> Tensor:
    """sigmoid(local + global), the global map broadcast over H x W."""
    return ops.sigmoid(local_attention(x, p) + global_attention(x, p))


def magff_fuse(x1: Tensor, x2: Tensor, p: MagffParams) -> Tensor:
    """Fuse detection features ``x1`` with restoration features ``x2``.

    Stage 1 gates between x1 and x2 with weights computed from x1; stage 2
    recomputes the gate on the stage-1 result and mixes it with x2 again.
    """
    if x1.shape != x2.shape:
        raise EngineError(f"magff_fuse shape mismatch: {x1.shape} vs {x2.shape}")
    # w*a + (1-w)*b written as b + w*(a-b): same value, and exact when a == b
    w1 = stage_gate(x1, p.stage1)
    x_out = x2 + w1 * (x1 - x2)
    w2 = stage_gate(x_out, p.stage2)
    return x2 + w2 * (x_out - x2)


class LfammFilter(Module):
    """Learnable real filter over the half spectrum, shape (C, H, W//2 + 1), initialized to 1."""

    def __init__(self, channels: int, height: int, width: int, init: float = 1.0):
        self.height = height
        self.width = width
        self.weights = parameter(np.full((channels, height, width // 2 + 1), init))

    def forward(self, x: Tensor) -> Tensor:
        return lfamm_apply(x, self)


def lfamm_apply(x: Tensor, f: LfammFilter) -> Tensor:
    """Scale spectral amplitudes of ``x`` by the filter while keeping phases.

    ``x`` is CHW or NCHW.  At a spatial size other than the one the filter was
    built for, the filter is bilinearly resampled to the new half-spectrum grid.
    """
    c, h, w = x.shape[-3:]
    weights = f.weights
    if weights.shape[0] != c:
        raise EngineError(f"LFAMM filter has {weights.shape[0]} channels, input has {c}")
    if (h, w // 2 + 1) != weights.shape[1:]:
        weights = ops.resize_bilinear(weights, (h, w // 2 + 1))
    spec = ops.rfft2(x)
    amplitude = ops.complex_abs(spec.real, spec.imag) * weights
    phase = ops.complex_angle(spec.real, spec.imag)
    shaped = ops.ComplexGrid(amplitude * ops.cos(phase), amplitude * ops.sin(phase))
    return ops.irfft2(shaped, w)
