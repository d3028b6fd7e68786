"""SGD with momentum, Adam and a milestone learning-rate schedule."""
from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

from .tensor import FrozenParameterError, Parameter


class MissingGradientError(RuntimeError):
    pass


class Optimizer:
    kind = "base"

    def __init__(self, params: Iterable[Parameter], lr: float):
        self.params = list(params)
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        for p in self.params:
            if getattr(p, "frozen", False):
                raise FrozenParameterError(f"cannot register frozen parameter {p.name!r}")
        if len({id(p) for p in self.params}) != len(self.params):
            raise ValueError("parameter registered twice")
        self.lr = lr
        self.step_count = 0
        self.state: dict[int, dict[str, np.ndarray]] = {}

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def _check(self):
        for p in self.params:
            if getattr(p, "frozen", False):
                raise FrozenParameterError(f"parameter {p.name!r} was frozen after registration")
            if p.grad is None:
                raise MissingGradientError(f"no gradient for parameter {p.name!r}")

    def step(self):
        self._check()
        for p in self.params:
            p.data = self._update(p, p.grad).astype(p.data.dtype, copy=False)
        self.step_count += 1

    def _update(self, p: Parameter, g: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class SGD(Optimizer):
    """v <- momentum * v + (g + wd * w);  w <- w - lr * v"""

    kind = "sgd-momentum"

    def __init__(self, params, lr: float, momentum: float = 0.0, weight_decay: float = 0.0):
        super().__init__(params, lr)
        if not 0.0 <= momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if weight_decay < 0:
            raise ValueError("weight_decay must be nonnegative")
        self.momentum = momentum
        self.weight_decay = weight_decay
        for p in self.params:
            self.state[id(p)] = {"velocity": np.zeros_like(p.data)}

    def _update(self, p, g):
        buf = self.state[id(p)]
        d = g + self.weight_decay * p.data if self.weight_decay else g
        buf["velocity"] = self.momentum * buf["velocity"] + d
        return p.data - self.lr * buf["velocity"]


class Adam(Optimizer):
    kind = "adam"

    def __init__(self, params, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                 epsilon: float = 1e-8, weight_decay: float = 0.0):
        super().__init__(params, lr)
        self.beta1, self.beta2, self.epsilon = beta1, beta2, epsilon
        self.weight_decay = weight_decay
        for p in self.params:
            self.state[id(p)] = {"m": np.zeros_like(p.data), "v": np.zeros_like(p.data)}

    def _update(self, p, g):
        buf = self.state[id(p)]
        if self.weight_decay:
            g = g + self.weight_decay * p.data
        t = self.step_count + 1
        buf["m"] = self.beta1 * buf["m"] + (1 - self.beta1) * g
        buf["v"] = self.beta2 * buf["v"] + (1 - self.beta2) * g * g
        m_hat = buf["m"] / (1 - self.beta1 ** t)
        v_hat = buf["v"] / (1 - self.beta2 ** t)
        return p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.epsilon)


class MultiStepLR:
    """Multiply the optimizer's lr by ``gamma`` each time ``step()`` reaches a milestone."""

    def __init__(self, optimizer: Optimizer, milestones: Sequence[int], gamma: float = 0.1):
        self.optimizer = optimizer
        self.milestones = sorted(int(m) for m in milestones)
        self.gamma = gamma
        self.base_lr = optimizer.lr
        self.epoch = 0

    def step(self):
        self.epoch += 1
        passed = sum(1 for m in self.milestones if self.epoch >= m)
        self.optimizer.lr = self.base_lr * self.gamma ** passed
        return self.optimizer.lr
