from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import EngineError


@dataclass
class OptimState:
    """Learning-rate schedule plus per-parameter moment buffers.

    ``schedule="linear"`` decays the rate as lr0 * (1 - t / total_steps),
    clamped at zero.
    """

    learning_rate: float = 1e-3
    schedule: str = "constant"
    total_steps: int = 1
    rule: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    moments: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.schedule not in ("constant", "linear"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.rule not in ("adam", "sgd"):
            raise ValueError(f"unknown update rule {self.rule!r}")

    def effective_lr(self, t: int | None = None) -> float:
        t = self.step if t is None else t
        if self.schedule == "constant":
            return self.learning_rate
        return self.learning_rate * max(0.0, 1.0 - t / max(self.total_steps, 1))


def optimizer_step(params, state: OptimState) -> None:
    """Update ``params`` in place from their ``.grad`` and clear the gradients.

    ``params`` is either a list of tensors or a name -> tensor mapping; names
    key the Adam moment buffers (list positions are used otherwise).
    """
    items = list(params.items()) if isinstance(params, dict) else list(enumerate(params))
    for key, p in items:
        if p.grad is None:
            raise EngineError(f"parameter {key!r} has no gradient")
    lr = state.effective_lr()
    t = state.step + 1
    for key, p in items:
        g = p.grad
        if state.rule == "sgd":
            p.data -= (lr * g).astype(p.dtype)
        else:
            m, v = state.moments.get(key, (None, None))
            if m is None:
                m = np.zeros_like(p.data)
                v = np.zeros_like(p.data)
            m = state.beta1 * m + (1 - state.beta1) * g
            v = state.beta2 * v + (1 - state.beta2) * g * g
            state.moments[key] = (m, v)
            mhat = m / (1 - state.beta1 ** t)
            vhat = v / (1 - state.beta2 ** t)
            p.data -= (lr * mhat / (np.sqrt(vhat) + state.eps)).astype(p.dtype)
        p.grad = None
    state.step = t


def sgd_state(lr: float, **kw) -> OptimState:
    return OptimState(learning_rate=lr, rule="sgd", **kw)
