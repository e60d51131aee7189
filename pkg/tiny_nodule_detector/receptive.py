"""
Receptive-field expansion block: parallel dilated 3×3 branches, a 1×1 branch and an
identity path, summed and activated once.
"""
import logging
from typing import Optional, Sequence

import numpy as np

from . import Activation
from .exceptions import ShapeMismatchError
from .functional import effective_kernel
from .nn import BatchNorm2d, Conv2d, Module, activate
from .tensor import Tensor

logger = logging.getLogger(__name__)


def effective_rf(r: int, k: int) -> int:
    """Equivalent receptive field of a k×k kernel at dilation r: (r-1)(k-1)+k."""
    return effective_kernel(k, r)


class ConvBranch(Module):
    """conv -> batchnorm, padded so the spatial size is preserved."""

    def __init__(self, channels: int, kernel: int, dilation: int, rng: Optional[np.random.Generator] = None):
        super().__init__()
        padding = dilation * (kernel - 1) // 2
        self.conv = Conv2d(channels, channels, kernel, padding=padding, dilation=dilation, bias=False, rng=rng)
        self.bn = BatchNorm2d(channels)

    def forward(self, x: Tensor) -> Tensor:
        return self.bn(self.conv(x))


class ReceptiveFieldBlock(Module):
    def __init__(
        self,
        channels: int,
        dilations: Sequence[int] = (1, 3, 5),
        kernel: int = 3,
        identity: bool = True,
        activation: Activation = Activation.SILU,
        rng: Optional[np.random.Generator] = None,
    ):
        super().__init__()
        if kernel % 2 == 0:
            raise ValueError(f"Branch kernel must be odd to preserve shape, got {kernel}")
        self.dilations = tuple(int(r) for r in dilations)
        self.kernel = kernel
        self.branches = [ConvBranch(channels, kernel, r, rng=rng) for r in self.dilations]
        self.pointwise = ConvBranch(channels, 1, 1, rng=rng)
        self.identity = identity
        self.channels = channels
        self.activation = Activation(activation)

    def branch_receptive_fields(self):
        return [effective_rf(r, self.kernel) for r in self.dilations] + [1] + ([1] if self.identity else [])

    def forward(self, x: Tensor) -> Tensor:
        if self.identity and x.shape[-3] != self.channels:
            raise ShapeMismatchError(
                f"Identity branch needs {self.channels} input channels, got input of shape {x.shape}"
            )
        # fixed summation order: dilated branches by rate, then 1×1, then identity
        total = None
        for branch in self.branches:
            y = branch(x)
            total = y if total is None else total + y
        total = total + self.pointwise(x)
        if self.identity:
            total = total + x
        return activate(total, self.activation)
