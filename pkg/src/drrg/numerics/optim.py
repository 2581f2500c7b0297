from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from drrg.errors import ContractError
from drrg.numerics.tensor import Tensor

# The paper fixes only the learning rate; these are the usual Adam defaults.
BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8


@dataclass
class OptimizerState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    beta1: float = BETA1
    beta2: float = BETA2
    eps: float = EPS


def adam_step(params: list[Tensor], lr: float, state: OptimizerState) -> None:
    """One bias-corrected Adam update in place, then clear the gradients."""
    for i, p in enumerate(params):
        if p.grad is None:
            raise ContractError(f"parameter {p.name or i} has no gradient; run backward() first")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for i, p in enumerate(params):
        g = p.grad
        m = state.m.get(i)
        v = state.v.get(i)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[i] = m
        state.v[i] = v
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.grad = None


class Adam:
    """Stateful wrapper so training loops can just call ``opt.step()``."""

    def __init__(self, params: list[Tensor], lr: float, betas=(BETA1, BETA2), eps: float = EPS):
        self.params = list(params)
        self.lr = lr
        self.state = OptimizerState(beta1=betas[0], beta2=betas[1], eps=eps)

    def step(self) -> None:
        adam_step(self.params, self.lr, self.state)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
