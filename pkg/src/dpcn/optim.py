"""SGD with momentum and coupled weight decay, plus a step-decay schedule."""

from __future__ import annotations

from typing import Dict, List, Sequence

import numpy as np

from .autograd import Tensor


class SGD:
    """Heavy-ball SGD.

    Per parameter::

        v <- momentum * v + (grad + weight_decay * param)
        param <- param - lr * v

    Parameters whose ``grad`` is ``None`` are skipped (velocity untouched).
    """

    def __init__(self, params: Sequence[Tensor], lr: float = 0.1, momentum: float = 0.9,
                 weight_decay: float = 5e-4):
        if lr < 0:
            raise ValueError(f"invalid learning rate {lr}")
        if not 0.0 <= momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {momentum}")
        if weight_decay < 0:
            raise ValueError(f"invalid weight decay {weight_decay}")
        self.params: List[Tensor] = list(params)
        self.lr = float(lr)
        self.momentum = float(momentum)
        self.weight_decay = float(weight_decay)
        self.velocity: List[np.ndarray] = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            p.data, self.velocity[i] = sgd_step(
                p.data, p.grad, self.velocity[i], self.lr, self.momentum, self.weight_decay)

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {f"velocity.{i}": v for i, v in enumerate(self.velocity)}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        for i, p in enumerate(self.params):
            v = np.asarray(state[f"velocity.{i}"])
            if v.shape != p.shape:
                raise ValueError(f"velocity {i} has shape {v.shape}, parameter has {p.shape}")
            self.velocity[i] = v.astype(p.dtype, copy=True)


def sgd_step(param: np.ndarray, grad: np.ndarray, velocity: np.ndarray, lr: float,
             momentum: float = 0.0, weight_decay: float = 0.0):
    """Pure update rule; returns ``(new_param, new_velocity)``."""
    param = np.asarray(param)
    grad = np.asarray(grad)
    velocity = np.asarray(velocity)
    if not (param.shape == grad.shape == velocity.shape):
        raise ValueError(
            f"shape mismatch: param {param.shape}, grad {grad.shape}, velocity {velocity.shape}")
    if lr < 0:
        raise ValueError(f"invalid learning rate {lr}")
    dt = param.dtype
    v = velocity * dt.type(momentum) + (grad + dt.type(weight_decay) * param)
    return (param - dt.type(lr) * v).astype(dt, copy=False), v.astype(dt, copy=False)


def step_decay(base_lr: float, epoch: int, total_epochs: int,
               milestones=(0.5, 0.75), factor: float = 0.1) -> float:
    """Learning rate for ``epoch`` (0-based) decayed by ``factor`` at each milestone fraction."""
    lr = base_lr
    for m in milestones:
        if epoch >= int(round(m * total_epochs)) and total_epochs > 1:
            lr *= factor
    return lr
