"""Dual-stream detector: keypoint detection branch plus a U-Net restoration branch.

Shallow features from both branches meet at the configured stride (4 by
default); the detection branch continues from the fused map, the restoration
branch's deep half (rest of the encoder and the whole decoder) only runs in
the joint training phase and is dropped for inference.
"""
from __future__ import annotations

import enum
from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np

from . import rng as rngmod
from .engine import ops
from .engine.flops import FlopCounter, count_flops
from .engine.nn import (
    BatchNorm2d,
    Conv2d,
    ConvBNReLU,
    ConvTranspose2d,
    Module,
    SqueezeExcite,
)
from .engine.tensor import EngineError, Tensor, no_grad
from .fusion import LfammFilter, MagffParams, lfamm_apply, magff_fuse

HM_PRIOR_BIAS = -2.19
N_STAGES = 5
BRAB_LEVELS = 4
UP_WIDTHS = (8, 4, 4)
LOGIT_CLAMP = 1e-3
HEAD_WIDTH = 4


class Phase(enum.Enum):
    JOINT = "joint"
    DETACHED_BRAB = "detached_brab"
    INFERENCE = "inference"


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    in_channels: int = 3
    base_channels: int = 16
    num_classes: int = 2
    input_hw: tuple = (64, 64)
    variant: str = "full"
    enable_brab: bool = True
    enable_magff: bool = True
    enable_lfamm: bool = True
    shallow_stage: int = 2
    magff_reduction: int = 4
    head_channels: int = 0  # 0 -> HEAD_WIDTH * base_channels

    def validate(self) -> None:
        problems = []
        h, w = self.input_hw
        if h % 32 or w % 32 or h <= 0 or w <= 0:
            problems.append(f"input_hw {self.input_hw} must be positive multiples of 32")
        if self.variant not in ("full", "tiny"):
            problems.append(f"variant must be 'full' or 'tiny', got {self.variant!r}")
        if not 1 <= self.shallow_stage < BRAB_LEVELS:
            problems.append(f"shallow_stage must be in [1, {BRAB_LEVELS - 1}]")
        if self.base_channels < 1 or self.num_classes < 1 or self.in_channels < 1:
            problems.append("channel and class counts must be positive")
        elif stage_channels(self.base_channels, self.shallow_stage) % self.magff_reduction:
            problems.append("magff_reduction must divide the shallow feature channel count")
        if problems:
            raise ConfigError("; ".join(problems))

    @property
    def fuses_with_magff(self) -> bool:
        # without the restoration branch there is nothing to fuse: identity
        return self.enable_brab and self.enable_magff

    def to_dict(self) -> dict:
        return asdict(self)


def stage_channels(base: int, i: int) -> int:
    # stem and stage 1 keep base width; doubling from stage 2, capped at 8x
    return min(base * 2 ** max(i - 1, 0), 8 * base)


class DetOutputs(NamedTuple):
    hm: Tensor
    wh: Tensor
    reg: Tensor


class BrabOutputs(NamedTuple):
    restored: Tensor


class DetConv(Module):
    """Two conv3x3-BN-ReLU layers (the first strided) and an optional squeeze-excite."""

    def __init__(self, cin, cout, stride, se: bool, rng):
        self.conv1 = ConvBNReLU(cin, cout, 3, rng, stride=stride)
        self.conv2 = ConvBNReLU(cout, cout, 3, rng)
        self.se = SqueezeExcite(cout, rng) if se else None

    def forward(self, x):
        x = self.conv2(self.conv1(x))
        return self.se(x) if self.se is not None else x


class Deconv(Module):
    def __init__(self, cin, cout, rng):
        self.up = ConvTranspose2d(cin, cout, rng)
        self.bn = BatchNorm2d(cout)

    def forward(self, x):
        return ops.relu(self.bn(self.up(x)))


class Head(Module):
    def __init__(self, cin, hidden, cout, rng, bias_init=0.0):
        self.conv1 = Conv2d(cin, hidden, 3, rng)
        self.conv2 = Conv2d(hidden, cout, 1, rng)
        self.conv2.weight.data *= 0.1
        self.conv2.bias.data[:] = bias_init

    def forward(self, x):
        return self.conv2(ops.relu(self.conv1(x)))


class BrabShallow(Module):
    """Restoration encoder levels 0..shallow_stage; returns the last map and all skips."""

    def __init__(self, cfg: ModelConfig, rng):
        b = cfg.base_channels
        self.levels = [ConvBNReLU(cfg.in_channels, b, 3, rng)]
        for i in range(1, cfg.shallow_stage + 1):
            self.levels.append(ConvBNReLU(stage_channels(b, i - 1), stage_channels(b, i), 3, rng, stride=2))

    def forward(self, x):
        skips = []
        for level in self.levels:
            x = level(x)
            skips.append(x)
        return x, skips


class DecoderLevel(Module):
    """1x1 reduce at low resolution, nearest 2x upsample, skip concat, 1x1 aggregate, 3x3 refine."""

    def __init__(self, cin, cout, rng):
        self.reduce = ConvBNReLU(cin, cout, 1, rng)
        self.aggregate = ConvBNReLU(2 * cout, cout, 1, rng)
        self.refine = ConvBNReLU(cout, cout, 3, rng)

    def forward(self, x, skip):
        x = ops.upsample2x(self.reduce(x), "nearest")
        return self.refine(self.aggregate(ops.concat([x, skip], axis=1)))


class BrabDeep(Module):
    def __init__(self, cfg: ModelConfig, rng):
        b = cfg.base_channels
        self.encoders = [
            ConvBNReLU(stage_channels(b, i - 1), stage_channels(b, i), 3, rng, stride=2)
            for i in range(cfg.shallow_stage + 1, BRAB_LEVELS)
        ]
        self.decoders = [
            DecoderLevel(stage_channels(b, i + 1), stage_channels(b, i), rng)
            for i in reversed(range(BRAB_LEVELS - 1))
        ]
        self.out = Conv2d(b, cfg.in_channels, 3, rng)
        self.out.weight.data *= 0.1

    def forward(self, x, skips, image):
        skips = list(skips) + [x]
        for enc in self.encoders:
            x = enc(x)
            skips.append(x)
        x = skips[-1]
        for dec, skip in zip(self.decoders, reversed(skips[:-1])):
            x = dec(x, skip)
        # global skip in logit space: a zero residual reproduces the input image
        base = np.clip(image.data, LOGIT_CLAMP, 1 - LOGIT_CLAMP)
        return ops.sigmoid(self.out(x) + Tensor(np.log(base / (1 - base)), dtype=base.dtype))


class DrebNet(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        self.seed = seed
        self.pruned = False
        rng = rngmod.stream(seed, "init")
        b, s = cfg.base_channels, cfg.shallow_stage
        se = cfg.variant == "full"
        self.det_stem = ConvBNReLU(cfg.in_channels, b, 3, rng)
        self.det_stages = [
            DetConv(stage_channels(b, i - 1), stage_channels(b, i), 2, se, rng)
            for i in range(1, N_STAGES + 1)
        ]
        up = [stage_channels(b, N_STAGES)] + [w * b for w in UP_WIDTHS]
        self.det_deconvs = [Deconv(up[i], up[i + 1], rng) for i in range(3)]
        head_c = cfg.head_channels or HEAD_WIDTH * b
        self.hm_head = Head(up[-1], head_c, cfg.num_classes, rng, bias_init=HM_PRIOR_BIAS)
        self.wh_head = Head(up[-1], head_c, 2, rng)
        self.reg_head = Head(up[-1], head_c, 2, rng)
        self.shallow_channels = stage_channels(b, s)
        h, w = cfg.input_hw
        self.lfamm = LfammFilter(self.shallow_channels, h >> s, w >> s) if cfg.enable_lfamm else None
        self.brab_shallow = BrabShallow(cfg, rng) if cfg.enable_brab else None
        self.brab_deep = BrabDeep(cfg, rng) if cfg.enable_brab else None
        self.magff = MagffParams(self.shallow_channels, rng, cfg.magff_reduction) if cfg.fuses_with_magff else None

    # ------------------------------------------------------------ pieces
    def _check_input(self, x: Tensor, strict: bool) -> None:
        if x.ndim != 4 or x.shape[1] != self.cfg.in_channels:
            raise EngineError(f"expected N x {self.cfg.in_channels} x H x W image batch, got {x.shape}")
        if strict and tuple(x.shape[2:]) != tuple(self.cfg.input_hw):
            raise EngineError(f"image size {x.shape[2:]} != configured {tuple(self.cfg.input_hw)}")
        if x.shape[2] % 32 or x.shape[3] % 32:
            raise EngineError("image height and width must be multiples of 32")

    def det_shallow(self, x: Tensor) -> Tensor:
        x = self.det_stem(x)
        for stage in self.det_stages[: self.cfg.shallow_stage]:
            x = stage(x)
        return x

    def brab_shallow_features(self, x: Tensor):
        if self.brab_shallow is None:
            raise EngineError("restoration branch disabled")
        return self.brab_shallow(x)

    def det_deep(self, fused: Tensor) -> DetOutputs:
        x = fused
        for stage in self.det_stages[self.cfg.shallow_stage:]:
            x = stage(x)
        for deconv in self.det_deconvs:
            x = deconv(x)
        return DetOutputs(ops.sigmoid(self.hm_head(x)), self.wh_head(x), self.reg_head(x))

    def _fuse(self, x: Tensor):
        s_det = self.det_shallow(x)
        if self.lfamm is not None:
            s_det = lfamm_apply(s_det, self.lfamm)
        if self.brab_shallow is None:
            return s_det, None
        s_brab, skips = self.brab_shallow(x)
        if self.magff is not None:
            fused = magff_fuse(s_det, s_brab, self.magff)
        else:
            fused = s_det + s_brab
        return fused, skips

    # --------------------------------------------------------- forwards
    def forward_train(self, x: Tensor, phase: Phase = Phase.JOINT):
        if phase is Phase.INFERENCE:
            raise EngineError("use forward_infer for the inference phase")
        self._check_input(x, strict=True)
        fused, skips = self._fuse(x)
        det = self.det_deep(fused)
        brab = None
        if phase is Phase.JOINT and self.pruned:
            raise EngineError("restoration decoder was pruned; joint phase unavailable")
        if phase is Phase.JOINT and self.brab_deep is not None:
            brab = BrabOutputs(self.brab_deep(skips[-1], skips[:-1], x))
        return det, brab

    def forward_infer(self, x: Tensor) -> DetOutputs:
        self._check_input(x, strict=False)
        fused, _ = self._fuse(x)
        return self.det_deep(fused)

    forward = forward_infer

    def restore(self, x: Tensor) -> Tensor:
        """Full-resolution restoration estimate from the auxiliary branch."""
        if self.brab_deep is None or self.pruned:
            raise EngineError("restoration branch not available")
        s, skips = self.brab_shallow(x)
        return self.brab_deep(s, skips[:-1], x)

    # ------------------------------------------------------- bookkeeping
    def prune(self) -> "DrebNet":
        """Drop the restoration branch's deep half (inference graph)."""
        self.brab_deep = None
        self.pruned = True
        return self

    def params_for_phase(self, phase: Phase) -> dict[str, Tensor]:
        named = dict(self.named_parameters())
        if phase is Phase.JOINT:
            return named
        return {k: v for k, v in named.items() if not k.startswith("brab_deep.")}

    def param_count(self, mode: str = "train") -> int:
        if mode == "train":
            return self.num_parameters()
        if mode == "infer":
            return int(sum(p.size for p in self.params_for_phase(Phase.INFERENCE).values()))
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")


def build_model(cfg: ModelConfig, seed: int = 0) -> DrebNet:
    return DrebNet(cfg, seed)


def flop_breakdown(model: DrebNet, mode: str = "infer") -> FlopCounter:
    """Per-category operation counts for one image at the configured size."""
    h, w = model.cfg.input_hw
    x = Tensor(np.zeros((1, model.cfg.in_channels, h, w), dtype=model.det_stem.conv.weight.dtype))
    was_training = model.training
    model.eval()
    try:
        with no_grad(), count_flops() as counter:
            if mode == "train":
                model.forward_train(x, Phase.JOINT)
            elif mode == "infer":
                model.forward_infer(x)
            else:
                raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    finally:
        model.train(was_training)
    return counter


def count_flops_params(model: DrebNet, mode: str = "infer") -> tuple[int, int]:
    """(FLOPs for one image, parameter count) of the training or inference graph."""
    return flop_breakdown(model, mode).total, model.param_count(mode)


def format_param_split(model: DrebNet) -> str:
    """"val/total" parameter figure in MB of float32, as a table cell."""
    infer, total = model.param_count("infer"), model.param_count("train")
    mb = lambda n: n * 4 / 2 ** 20
    if infer == total:
        return f"{mb(total):.2f}"
    return f"{mb(infer):.2f} / {mb(total):.2f}"
