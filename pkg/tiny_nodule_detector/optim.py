"""SGD with momentum: v <- momentum·v + g, p <- p - lr·v."""
import logging
from typing import List, Optional, Sequence

import numpy as np

from .tensor import Parameter

logger = logging.getLogger(__name__)


def sgd_step(
    params: Sequence[np.ndarray],
    grads: Sequence[Optional[np.ndarray]],
    state: List[np.ndarray],
    lr: float,
    momentum: float,
):
    """
    Update `params` and the velocity buffers in `state` in place.

    A missing gradient counts as zero, so the velocity alone still moves the parameter.
    """
    if not state:
        state.extend(np.zeros_like(p) for p in params)
    for p, g, v in zip(params, grads, state):
        v *= momentum
        if g is not None:
            v += g
        p -= lr * v


class SGD:
    def __init__(self, params: Sequence[Parameter], lr: float = 0.01, momentum: float = 0.937):
        if lr < 0:
            raise ValueError(f"Learning rate must be non-negative, got {lr}")
        if not 0.0 <= momentum < 1.0:
            raise ValueError(f"Momentum must lie in [0, 1), got {momentum}")
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.velocity: List[np.ndarray] = []

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        if self.lr == 0:
            return
        sgd_step([p.data for p in self.params], [p.grad for p in self.params], self.velocity, self.lr, self.momentum)
