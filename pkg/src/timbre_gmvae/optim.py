"""Adam and Xavier-uniform initialisation."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .tensor import ContractError, Tensor, default_dtype


def fans(shape: Sequence[int]) -> tuple[int, int]:
    """(fan_in, fan_out) for a dense (out, in) or conv (out, in, k) weight."""
    shape = tuple(int(s) for s in shape)
    if len(shape) == 1:
        return shape[0], shape[0]
    receptive = int(np.prod(shape[2:])) if len(shape) > 2 else 1
    return shape[1] * receptive, shape[0] * receptive


def xavier_init(shape: Sequence[int], rng: np.random.Generator, dtype=None) -> np.ndarray:
    fan_in, fan_out = fans(shape)
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=tuple(shape)).astype(dtype or default_dtype())


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: AdamState,
              lr_scale: Sequence[float] | None = None) -> None:
    """One bias-corrected Adam update, applied to ``params`` in place.

    ``lr_scale`` optionally multiplies the step size per parameter.
    """
    if len(params) != len(grads):
        raise ContractError("params and grads differ in length")
    if lr_scale is None:
        lr_scale = [1.0] * len(params)
    elif len(lr_scale) != len(params):
        raise ContractError("lr_scale and params differ in length")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if len(state.m) != len(params):
        raise ContractError("optimizer state was built for a different parameter list")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, g, m, v, k in zip(params, grads, state.m, state.v, lr_scale):
        if g.shape != p.shape:
            raise ContractError(f"grad shape {g.shape} != param shape {p.shape}")
        g = g.astype(p.dtype, copy=False)
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        update = k * state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data -= update.astype(p.dtype, copy=False)


class Adam:
    """Adam over a fixed, ordered parameter list."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)

    def step(self, grads: Mapping[Tensor, np.ndarray]) -> None:
        g = [grads[p] if p in grads else np.zeros_like(p.data) for p in self.params]
        adam_step(self.params, g, self.state)
