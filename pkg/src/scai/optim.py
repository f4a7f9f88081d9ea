"""Adam optimizer operating in place on parameter tensors."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from scai.tensor import Tensor


@dataclass
class AdamState:
    """First/second moment estimates plus hyperparameters for one parameter list."""

    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def init_adam(params: Sequence[Tensor], lr: float = 0.001, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)
    state.m = [np.zeros_like(p.data) for p in params]
    state.v = [np.zeros_like(p.data) for p in params]
    return state


def adam_step(params: Sequence[Tensor], state: AdamState) -> None:
    """One Adam update with bias correction, reading gradients from ``p.grad``.

    Parameters whose gradient is ``None`` (never touched by the graph)
    are skipped entirely, so unused parameters stay frozen.
    """
    if len(params) != len(state.m):
        raise ValueError(
            f"adam_step: state tracks {len(state.m)} parameters, got {len(params)}"
        )
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for i, p in enumerate(params):
        g = p.grad
        if g is None:
            continue
        m = state.m[i]
        v = state.v[i]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.data -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


def zero_grads(params: Sequence[Tensor]) -> None:
    for p in params:
        p.grad = None
