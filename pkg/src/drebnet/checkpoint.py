"""Binary checkpoints.

Layout (little-endian): ``DRBC`` | u32 version | u8 mode (0 train, 1 infer) |
32-byte sha256 of the config text | u32 length + config text (UTF-8) |
u32 tensor count, then per tensor: u32 name length + name, u32 rank, u32
dims, f32 payload | train mode only: u32 optimizer step, u32 moment count,
then per moment: name, first-moment tensor, second-moment tensor.
"""
from __future__ import annotations

import hashlib
import io
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .config import RunConfig, config_digest, format_config, parse_config
from .engine import OptimState
from .model import DrebNet, build_model

MAGIC = b"DRBC"
VERSION = 1
MODES = {"train": 0, "infer": 1}
DEEP_PREFIX = "brab_deep."


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    mode: str
    config: RunConfig
    config_text: str
    model: DrebNet
    state: Optional[OptimState] = None


def _w_str(buf: io.BytesIO, s: str) -> None:
    b = s.encode("utf-8")
    buf.write(struct.pack("<I", len(b)))
    buf.write(b)


def _w_array(buf: io.BytesIO, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    buf.write(struct.pack("<I", arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("truncated checkpoint")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def string(self) -> str:
        return self.take(self.u32()).decode("utf-8")

    def array(self) -> np.ndarray:
        rank = self.u32()
        shape = struct.unpack(f"<{rank}I", self.take(4 * rank)) if rank else ()
        n = int(np.prod(shape)) if rank else 1
        return np.frombuffer(self.take(4 * n), dtype="<f4").reshape(shape).copy()


def checkpoint_tensors(model: DrebNet, mode: str) -> dict[str, np.ndarray]:
    state = model.state_dict()
    if mode == "infer":
        state = {k: v for k, v in state.items() if not k.startswith(DEEP_PREFIX)}
    return state


def dumps_checkpoint(model: DrebNet, cfg: RunConfig, mode: str = "train",
                     state: Optional[OptimState] = None) -> bytes:
    if mode not in MODES:
        raise CheckpointError(f"mode must be train or infer, got {mode!r}")
    text = format_config(cfg)
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<IB", VERSION, MODES[mode]))
    buf.write(bytes.fromhex(config_digest(text)))
    _w_str(buf, text)
    tensors = checkpoint_tensors(model, mode)
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        _w_str(buf, name)
        _w_array(buf, arr)
    if mode == "train":
        step = state.step if state is not None else 0
        moments = sorted((state.moments if state is not None else {}).items(), key=lambda kv: str(kv[0]))
        buf.write(struct.pack("<II", step, len(moments)))
        for name, (m, v) in moments:
            _w_str(buf, str(name))
            _w_array(buf, m)
            _w_array(buf, v)
    return buf.getvalue()


def save_checkpoint(path, model: DrebNet, cfg: RunConfig, mode: str = "train",
                    state: Optional[OptimState] = None) -> None:
    Path(path).write_bytes(dumps_checkpoint(model, cfg, mode, state))


def loads_checkpoint(data: bytes, expected: Optional[RunConfig] = None) -> Checkpoint:
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise CheckpointError("not a DRBC checkpoint")
    version, mode_code = struct.unpack("<IB", r.take(5))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    mode = {v: k for k, v in MODES.items()}.get(mode_code)
    if mode is None:
        raise CheckpointError(f"unknown checkpoint mode code {mode_code}")
    digest = r.take(32)
    text = r.string()
    if hashlib.sha256(text.encode("utf-8")).digest() != digest:
        raise CheckpointError("config digest mismatch: checkpoint header does not match its config")
    if expected is not None and config_digest(expected) != digest.hex():
        raise CheckpointError("checkpoint was written for a different configuration")
    cfg = parse_config(text)
    model = build_model(cfg.model, cfg.seed)
    if mode == "infer":
        model.prune()
    tensors = {}
    for _ in range(r.u32()):
        name = r.string()
        tensors[name] = r.array()
    if mode == "infer" and any(k.startswith(DEEP_PREFIX) for k in tensors):
        raise CheckpointError("inference checkpoint contains restoration-decoder tensors")
    model.load_state_dict(tensors, strict=True)
    if mode == "infer":
        model.eval()
    state = None
    if mode == "train":
        o = cfg.optim
        step = r.u32()
        state = OptimState(learning_rate=o.lr0, schedule=o.schedule, rule=o.rule, step=step)
        for _ in range(r.u32()):
            name = r.string()
            state.moments[name] = (r.array(), r.array())
    if r.pos != len(data):
        raise CheckpointError("trailing bytes after checkpoint payload")
    return Checkpoint(mode, cfg, text, model, state)


def load_checkpoint(path, expected: Optional[RunConfig] = None) -> Checkpoint:
    return loads_checkpoint(Path(path).read_bytes(), expected)
