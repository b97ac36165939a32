"""SGD and Adam on lists of tensors.

The functional forms (`sgd_step`, `adam_step`) take params, grads and an
OptimizerState and mutate both params and state; the thin class wrappers
just remember the param list and read gradients from `.grad`, treating a
missing gradient as zero. One call to a step function advances the shared
step counter `t` by exactly one, whatever the number of params.

Update rules, per parameter p with gradient g:

  sgd   p <- p - lr * (g + weight_decay * p)          (coupled decay)
  adam  m <- b1 m + (1-b1) g;   v <- b2 v + (1-b2) g^2
        p <- p - lr * mhat / (sqrt(vhat) + eps) - lr * weight_decay * p
                                                       (decoupled decay)

with mhat = m / (1 - b1^t), vhat = v / (1 - b2^t).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DimensionError
from .tensor import Tensor


@dataclass
class OptimizerState:
    kind: str
    learning_rate: float
    weight_decay: float = 0.0
    momentum: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    t: int = 0
    slots: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ContractError(f"unknown optimizer kind {self.kind!r}")
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise ContractError("learning_rate and weight_decay must be non-negative")


def _check(params, grads, state: OptimizerState, kind: str):
    if state.kind != kind:
        raise ContractError(f"state is for {state.kind!r}, called {kind}_step")
    if len(params) != len(grads):
        raise DimensionError(f"{len(params)} params but {len(grads)} grads")
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is not None and g.shape != p.data.shape:
            raise DimensionError(f"param {i}: grad shape {g.shape} != param shape {p.data.shape}")


def sgd_step(params: list[Tensor], grads: list, state: OptimizerState) -> None:
    _check(params, grads, state, "sgd")
    state.t += 1
    lr = state.learning_rate
    wd = state.weight_decay
    mom = state.momentum
    for i, (p, g) in enumerate(zip(params, grads)):
        g = np.zeros_like(p.data) if g is None else g
        step = g + wd * p.data if wd else g
        if mom:
            buf = state.slots.get(i)
            if buf is None:
                buf = np.zeros_like(p.data)
            buf = mom * buf + step
            state.slots[i] = buf
            step = buf
        p.data = p.data - (lr * step).astype(p.data.dtype, copy=False)


def adam_step(params: list[Tensor], grads: list, state: OptimizerState) -> None:
    _check(params, grads, state, "adam")
    state.t += 1
    t = state.t
    lr, wd = state.learning_rate, state.weight_decay
    b1, b2, eps = state.beta1, state.beta2, state.epsilon
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for i, (p, g) in enumerate(zip(params, grads)):
        g = np.zeros_like(p.data) if g is None else g.astype(p.data.dtype, copy=False)
        slot = state.slots.get(i)
        if slot is None:
            slot = {"m": np.zeros_like(p.data), "v": np.zeros_like(p.data)}
            state.slots[i] = slot
        slot["m"] = b1 * slot["m"] + (1.0 - b1) * g
        slot["v"] = b2 * slot["v"] + (1.0 - b2) * (g * g)
        update = lr * (slot["m"] / c1) / (np.sqrt(slot["v"] / c2) + eps)
        if wd:
            update = update + lr * wd * p.data
        p.data = p.data - update.astype(p.data.dtype, copy=False)


class _Optimizer:
    def __init__(self, params: list[Tensor], state: OptimizerState):
        self.params = list(params)
        self.state = state

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def _grads(self):
        return [p.grad for p in self.params]


class Sgd(_Optimizer):
    def __init__(self, params, learning_rate: float, weight_decay: float = 0.0, momentum: float = 0.0):
        super().__init__(params, OptimizerState("sgd", learning_rate, weight_decay, momentum))

    def step(self) -> None:
        sgd_step(self.params, self._grads(), self.state)


class Adam(_Optimizer):
    def __init__(self, params, learning_rate: float, weight_decay: float = 0.0,
                 beta1: float = 0.9, beta2: float = 0.999, epsilon: float = 1e-8):
        super().__init__(params, OptimizerState("adam", learning_rate, weight_decay,
                                                beta1=beta1, beta2=beta2, epsilon=epsilon))

    def step(self) -> None:
        adam_step(self.params, self._grads(), self.state)
