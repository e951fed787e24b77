"""Two-phase training loop: joint detection + restoration, then detection with the restoration decoder detached."""
from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import rng as rngmod
from .blur import make_blur_pair
from .boxes import GroundTruthBox, hflip_box
from .config import RunConfig, format_config
from .engine import OptimState, Tensor, backward, optimizer_step, reset_tape
from .engine import dump
from .losses import detection_losses, restoration_losses, total_loss
from .model import DrebNet, Phase, build_model
from .synthetic import render_dataset
from .targets import encode_targets, stack_targets

log = logging.getLogger("drebnet")


def configure_logging() -> None:
    """Level from DREB_LOG (error|info|debug), default info."""
    level = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}.get(
        os.environ.get("DREB_LOG", "info").lower(), logging.INFO)
    if not log.handlers:
        h = logging.StreamHandler()
        h.setFormatter(logging.Formatter("%(levelname)s %(message)s"))
        log.addHandler(h)
    log.setLevel(level)


class TrainingError(RuntimeError):
    pass


@dataclass
class Sample:
    blurred: np.ndarray  # CHW in [0, 1]
    sharp: np.ndarray
    boxes: list
    image_id: int = 0


def blur_samples(images, cfg: RunConfig, tag: str = "train") -> list[Sample]:
    """Pair each (sharp image, boxes) with its seed-determined blurred copy."""
    params = cfg.blur.trajectory_params()
    out = []
    for i, (img, boxes) in enumerate(images):
        seed = rngmod.derive_seed(cfg.seed, "blur", tag, i)
        pair = make_blur_pair(img, seed, params, cfg.blur.k_psf)
        out.append(Sample(pair.blurred.astype(np.float32), np.asarray(img, np.float32), list(boxes), i))
    return out


def synthetic_samples(cfg: RunConfig, n: int, tag: str = "train") -> list[Sample]:
    seed = rngmod.derive_seed(cfg.seed, "scenes", tag)
    images = render_dataset(n, cfg.model.input_hw, seed, cfg.model.num_classes)
    return blur_samples(images, cfg, tag)


def augment(s: Sample, r: np.random.Generator, hflip_prob: float, jitter: float) -> Sample:
    """Horizontal flip (boxes remapped) and brightness/contrast jitter, applied alike to both images."""
    blurred, sharp, boxes = s.blurred, s.sharp, s.boxes
    if hflip_prob > 0 and r.random() < hflip_prob:
        w = blurred.shape[-1]
        blurred, sharp = blurred[..., ::-1], sharp[..., ::-1]
        boxes = [GroundTruthBox(b.class_id, *hflip_box(b.box, w)) for b in boxes]
    if jitter > 0:
        bright = r.uniform(1 - jitter, 1 + jitter)
        contrast = r.uniform(1 - jitter, 1 + jitter)

        def jit(x):
            m = x.mean()
            return np.clip((x - m) * contrast + m, 0, 1) * bright

        blurred, sharp = np.clip(jit(blurred), 0, 1), np.clip(jit(sharp), 0, 1)
    return Sample(np.ascontiguousarray(blurred, np.float32), np.ascontiguousarray(sharp, np.float32),
                  boxes, s.image_id)


def make_batch(samples, num_classes: int, input_hw):
    x = Tensor(np.stack([s.blurred for s in samples]).astype(np.float32))
    sharp = np.stack([s.sharp for s in samples]).astype(np.float32)
    targets = stack_targets(encode_targets(s.boxes, num_classes, input_hw) for s in samples)
    return x, sharp, targets


@dataclass
class EpochRecord:
    epoch: int
    phase: Phase
    steps: int
    losses: dict  # name -> mean over the epoch; restoration parts absent after the switch
    lr: float

    def line(self) -> str:
        parts = [f"epoch={self.epoch}", f"phase={self.phase.value}", f"steps={self.steps}",
                 f"lr={self.lr:.6g}"]
        for name in ("hm", "wh", "off", "mse", "ssim", "total"):
            v = self.losses.get(name)
            parts.append(f"{name}={'-' if v is None else f'{v:.6f}'}")
        return " ".join(parts)


@dataclass
class Trainer:
    cfg: RunConfig
    samples: list
    model: DrebNet = None
    state: OptimState = None
    history: list = field(default_factory=list)
    step_losses: list = field(default_factory=list)
    epoch: int = 0

    def __post_init__(self):
        self.cfg.validate()
        if not self.samples:
            raise TrainingError("no training samples")
        if len(self.samples) < 2 and self.cfg.model.fuses_with_magff:
            raise TrainingError("MAGFF fusion needs at least 2 training images")
        if self.model is None:
            self.model = build_model(self.cfg.model, self.cfg.seed)
        if self.state is None:
            o = self.cfg.optim
            self.state = OptimState(learning_rate=o.lr0, schedule=o.schedule, rule=o.rule,
                                    total_steps=o.total_epochs * self.steps_per_epoch)

    def batches(self, order) -> list:
        """Consecutive chunks of batch_size; a trailing single image joins the previous chunk
        because batch statistics are undefined for one sample."""
        bs = self.cfg.optim.batch_size
        chunks = [list(order[i:i + bs]) for i in range(0, len(order), bs)]
        if bs > 1 and len(chunks) > 1 and len(chunks[-1]) == 1:
            chunks[-2].extend(chunks.pop())
        return chunks

    @property
    def steps_per_epoch(self) -> int:
        return len(self.batches(range(len(self.samples))))

    def phase_for(self, epoch: int) -> Phase:
        return Phase.JOINT if epoch <= self.cfg.switch_epoch else Phase.DETACHED_BRAB

    def train_step(self, batch, phase: Phase, batch_seed: int) -> dict:
        cfg = self.cfg
        x, sharp, targets = make_batch(batch, cfg.model.num_classes, cfg.model.input_hw)
        reset_tape()
        self.model.train()
        det, brab = self.model.forward_train(x, phase)
        parts = detection_losses(det, targets, cfg.loss)
        if phase is Phase.JOINT and brab is not None:
            parts.update(restoration_losses(brab.restored, sharp))
        loss_phase = phase if brab is not None else Phase.DETACHED_BRAB
        loss = total_loss(parts, cfg.loss, loss_phase)
        values = {k: float(v.data) for k, v in parts.items()}
        values["total"] = float(loss.data)
        if not all(math.isfinite(v) for v in values.values()):
            path = Path(cfg.out_dir) / f"nan_batch_{batch_seed}.drbt"
            path.parent.mkdir(parents=True, exist_ok=True)
            dump.save(path, x.data)
            raise TrainingError(f"non-finite loss {values} at epoch {self.epoch}, batch seed {batch_seed}; "
                                f"inputs dumped to {path}")
        backward(loss)
        optimizer_step(self.model.params_for_phase(phase), self.state)
        return values

    def run_epoch(self) -> EpochRecord:
        self.epoch += 1
        phase = self.phase_for(self.epoch)
        r = rngmod.stream(self.cfg.seed, "epoch", self.epoch)
        order = r.permutation(len(self.samples))
        lr = self.state.effective_lr()
        sums: dict[str, float] = {}
        steps = 0
        for idx in self.batches(order):
            batch_seed = int(r.integers(0, 2**31 - 1))
            br = rngmod.stream(batch_seed, "augment")
            batch = [augment(self.samples[i], br, self.cfg.augment.hflip_prob,
                             self.cfg.augment.color_jitter_strength) for i in idx]
            values = self.train_step(batch, phase, batch_seed)
            self.step_losses.append(values["total"])
            for k, v in values.items():
                sums[k] = sums.get(k, 0.0) + v
            steps += 1
        rec = EpochRecord(self.epoch, phase, steps, {k: v / steps for k, v in sums.items()}, lr)
        self.history.append(rec)
        log.info(rec.line())
        return rec

    def fit(self, epochs: Optional[int] = None,
            callback: Optional[Callable[["Trainer", EpochRecord], bool]] = None) -> list:
        """Run up to ``epochs`` (default: the configured total); stop early when callback returns True."""
        total = self.cfg.optim.total_epochs if epochs is None else epochs
        while self.epoch < total:
            rec = self.run_epoch()
            if callback is not None and callback(self, rec):
                break
        return self.history


def load_training_samples(cfg: RunConfig, split: str = "train") -> list[Sample]:
    from .data import load_samples

    d = cfg.data
    n_syn = d.synthetic_images if split == "train" else d.synthetic_val_images
    if n_syn > 0:
        return synthetic_samples(cfg, n_syn, split)
    index = d.train_index if split == "train" else d.val_index
    if not index:
        raise TrainingError(f"no {split} data configured (data.{split}_index or data.synthetic_*)")
    return load_samples(index, d.image_dir, cfg, split)


def train(cfg: RunConfig, callback=None) -> tuple[Path, Path]:
    """Full two-phase run; writes train.drbc, infer.drbc and train.log into cfg.out_dir."""
    from .checkpoint import save_checkpoint

    configure_logging()
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    samples = load_training_samples(cfg, "train")
    trainer = Trainer(cfg, samples)
    log.info("training %d images, %d epochs, joint phase through epoch %d",
             len(samples), cfg.optim.total_epochs, cfg.switch_epoch)
    with open(out / "train.log", "w", encoding="utf-8") as fh:
        def cb(t, rec):
            fh.write(rec.line() + "\n")
            fh.flush()
            return bool(callback and callback(t, rec))

        trainer.fit(callback=cb)
    train_path, infer_path = out / "train.drbc", out / "infer.drbc"
    save_checkpoint(train_path, trainer.model, cfg, "train", trainer.state)
    save_checkpoint(infer_path, trainer.model, cfg, "infer")
    (out / "config.cfg").write_text(format_config(cfg), encoding="utf-8")
    return train_path, infer_path
