"""SGD with momentum and Adam over ModelParams.

Updates are functional: ``step`` returns a new ModelParams and leaves the
input untouched.  Parameters outside ``trainable`` are copied through
unchanged and their moment buffers are never touched.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .nn import ModelParams


class NonFiniteGradient(FloatingPointError):
    pass


def _check_finite(grads: dict[str, np.ndarray]) -> None:
    for name in sorted(grads):
        g = grads[name]
        if not np.all(np.isfinite(g)):
            bad = int(np.size(g) - np.count_nonzero(np.isfinite(g)))
            raise NonFiniteGradient(f"gradient for {name!r} has {bad} non-finite entries")


@dataclass
class SGD:
    lr: float
    momentum: float = 0.9
    weight_decay: float = 0.0
    buffers: dict[str, np.ndarray] = field(default_factory=dict)

    kind = "sgd-momentum"

    def step(self, params: ModelParams, grads: dict[str, np.ndarray], trainable: Iterable[str] | None = None) -> ModelParams:
        names = params.names() if trainable is None else sorted(trainable)
        _check_finite({n: grads[n] for n in names})
        updated = {}
        for n in names:
            w = params[n].data
            g = grads[n]
            if g.shape != w.shape:
                raise ValueError(f"{n}: grad shape {g.shape} != param shape {w.shape}")
            if self.weight_decay:
                g = g + self.weight_decay * w
            if self.momentum:
                buf = self.buffers.get(n)
                buf = g.copy() if buf is None else self.momentum * buf + g
                self.buffers[n] = buf
                g = buf
            updated[n] = w - self.lr * g
        return params.replace(updated)


@dataclass
class Adam:
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    kind = "adam"

    def step(self, params: ModelParams, grads: dict[str, np.ndarray], trainable: Iterable[str] | None = None) -> ModelParams:
        names = params.names() if trainable is None else sorted(trainable)
        _check_finite({n: grads[n] for n in names})
        b1, b2 = self.betas
        self.t += 1
        updated = {}
        for n in names:
            w = params[n].data
            g = grads[n]
            if g.shape != w.shape:
                raise ValueError(f"{n}: grad shape {g.shape} != param shape {w.shape}")
            if self.weight_decay:
                g = g + self.weight_decay * w
            m = b1 * self.m.get(n, np.zeros_like(w)) + (1 - b1) * g
            v = b2 * self.v.get(n, np.zeros_like(w)) + (1 - b2) * g * g
            self.m[n], self.v[n] = m, v
            m_hat = m / (1 - b1**self.t)
            v_hat = v / (1 - b2**self.t)
            updated[n] = w - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return params.replace(updated)


def make_optimizer(kind: str, lr: float, momentum: float = 0.9, weight_decay: float = 0.0):
    if kind in ("sgd", "sgd-momentum"):
        return SGD(lr=lr, momentum=momentum, weight_decay=weight_decay)
    if kind == "adam":
        return Adam(lr=lr, weight_decay=weight_decay)
    raise ValueError(f"unknown optimizer {kind!r}")


def milestone_lr(base_lr: float, epoch: int, milestones: Iterable[int], factor: float = 0.1) -> float:
    """Step decay: multiply by ``factor`` once per milestone already reached."""
    return base_lr * factor ** sum(1 for m in milestones if epoch >= m)
