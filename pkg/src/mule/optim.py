"""Adam with bias correction and a per-epoch exponential learning-rate decay."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .autodiff import Node
from .errors import TrainingDiverged


def decayed_lr(lr0: float, gamma: float, epoch: int) -> float:
    return lr0 * gamma**epoch


@dataclass
class OptimizerState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


class Adam:
    """One optimizer over named parameters.

    ``step`` updates only the parameters named in ``grads``; moments for the
    others are left alone, which is how the two disjoint parameter sets share
    one instance.
    """

    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.state = OptimizerState()

    def step(self, params: Mapping[str, Node], grads: Mapping[str, np.ndarray], lr: float):
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise TrainingDiverged(f"non-finite gradient for {name} at step {self.state.t + 1}")
        self.state.t += 1
        t = self.state.t
        b1, b2 = self.beta1, self.beta2
        for name, g in grads.items():
            p = params[name]
            m = self.state.m.get(name)
            if m is None:
                m = np.zeros_like(p.value)
                v = np.zeros_like(p.value)
            else:
                v = self.state.v[name]
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            m_hat = m / (1 - b1**t)
            v_hat = v / (1 - b2**t)
            p.value -= (lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.dtype)
            self.state.m[name] = m.astype(p.dtype)
            self.state.v[name] = v.astype(p.dtype)
