"""SGD with momentum, coupled weight decay, and step learning-rate decay."""

from __future__ import annotations

from typing import Dict, Iterable, Sequence

import numpy as np

from .errors import ConfigurationError
from .tensor import Tensor


class SGD:
    """Momentum SGD over a named parameter dict.

    Update rule (decay is coupled, i.e. folded into the gradient):

        v <- momentum * v + grad + weight_decay * param
        param <- param - lr * v

    One zero-initialized velocity buffer is kept per parameter.  ``lr`` is a
    plain attribute so a schedule can reassign it between steps.
    """

    def __init__(self, params: Dict[str, Tensor], lr: float,
                 momentum: float = 0.0, weight_decay: float = 0.0):
        if lr <= 0:
            raise ConfigurationError(f"learning rate must be positive, got {lr}")
        self.params = dict(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {name: np.zeros_like(p.data)
                         for name, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        for name, p in self.params.items():
            grad = p.grad
            if grad is None:
                grad = np.zeros_like(p.data)
            v = self.velocity[name]
            v *= self.momentum
            v += grad
            if self.weight_decay:
                v += self.weight_decay * p.data
            p.data -= self.lr * v


def step_lr(base_lr: float, iteration: int, total_iterations: int,
            decay_points: Sequence[float] = (0.4, 0.8),
            factor: float = 10.0) -> float:
    """Learning rate for ``iteration`` (0-based) under step decay.

    The rate is divided by ``factor`` once the iteration reaches each
    fraction in ``decay_points`` of the total budget.
    """
    passed = sum(1 for f in decay_points
                 if iteration >= int(f * total_iterations))
    return base_lr / (factor ** passed)
