"""Dense tensor with a global append-only tape for reverse-mode differentiation."""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

_DEFAULT_DTYPE = np.float32


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype.type


def get_default_dtype():
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def default_dtype(dtype):
    old = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


class EngineError(RuntimeError):
    """Invariant violation inside the tensor engine."""


@dataclass
class Node:
    op: str
    inputs: tuple
    output: "Tensor"
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]
    index: int
    tape: "Tape"


@dataclass
class Tape:
    nodes: list = field(default_factory=list)
    consumed: bool = False

    def append(self, op, inputs, output, backward) -> Node:
        node = Node(op, tuple(inputs), output, backward, len(self.nodes), self)
        self.nodes.append(node)
        return node


_TAPE = Tape()
_GRAD_ENABLED = True


def current_tape() -> Tape:
    global _TAPE
    if _TAPE.consumed:
        _TAPE = Tape()
    return _TAPE


def reset_tape() -> None:
    """Drop every recorded node (and the activations they hold)."""
    global _TAPE
    _TAPE = Tape()


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    old = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = old


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node", "name", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            arr = np.asarray(data)
            dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else _DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.node: Optional[Node] = None
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def node_id(self) -> Optional[int]:
        return None if self.node is None else self.node.index

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operator sugar (implementations live in ops) ---------------------
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __rtruediv__(self, other):
        from . import ops
        return ops.div(other, self)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __pow__(self, exponent):
        from . import ops
        return ops.pow(self, exponent)

    def sum(self, axis=None, keepdims=False):
        from . import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def backward(self) -> None:
        backward(self)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is None:
        dtype = _DEFAULT_DTYPE
    return Tensor(np.asarray(x, dtype=dtype), dtype=dtype)


def record(op: str, out_data: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    """Wrap ``out_data`` in a Tensor and put it on the tape if any input needs grad."""
    out = Tensor(out_data, dtype=out_data.dtype)
    if _GRAD_ENABLED and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = current_tape().append(op, inputs, out, backward_fn)
    return out


def backward(loss: Tensor) -> None:
    """Fill ``.grad`` of every leaf reachable from the scalar ``loss``.

    Nodes are visited in strict reverse append order; leaf gradients add up
    across uses.  The tape is consumed afterwards.
    """
    if loss.data.size != 1:
        raise EngineError(f"backward needs a scalar loss, got shape {loss.shape}")
    seed = np.ones_like(loss.data)
    if loss.node is None:
        if not loss.requires_grad:
            raise EngineError("loss does not depend on any tensor requiring grad")
        loss.grad = seed if loss.grad is None else loss.grad + seed
        return
    tape = loss.node.tape
    if tape.consumed or tape is not _TAPE:
        raise EngineError("loss is not on the current tape (backward already ran or tape was reset)")
    grads: dict[int, np.ndarray] = {loss.node.index: seed}
    for node in reversed(tape.nodes):
        g = grads.pop(node.index, None)
        if g is None:
            continue
        in_grads = node.backward(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            if gi.shape != t.shape:
                raise EngineError(f"{node.op}: gradient shape {gi.shape} != input shape {t.shape}")
            if t.node is not None and t.node.tape is tape:
                k = t.node.index
                if k in grads:
                    grads[k] = grads[k] + gi
                else:
                    grads[k] = gi
            else:
                t.grad = gi.astype(t.dtype, copy=True) if t.grad is None else t.grad + gi
    tape.consumed = True
    tape.nodes.clear()
