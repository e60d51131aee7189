"""Composite layers: convolution-batchnorm-activation and spatial pyramid pooling."""
import logging
from typing import Optional, Sequence

import numpy as np

from . import Activation
from .exceptions import ShapeMismatchError
from .functional import concat_channels, maxpool2d
from .nn import BatchNorm2d, Conv2d, Module, activate
from .tensor import Tensor

logger = logging.getLogger(__name__)


class CBSBlock(Module):
    """conv (no bias) -> batchnorm -> activation"""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel: int = 1,
        stride: int = 1,
        padding: Optional[int] = None,
        dilation: int = 1,
        activation: Activation = Activation.SILU,
        rng: Optional[np.random.Generator] = None,
    ):
        super().__init__()
        if padding is None:
            padding = dilation * (kernel - 1) // 2
        self.conv = Conv2d(in_channels, out_channels, kernel, stride, padding, dilation, bias=False, rng=rng)
        self.bn = BatchNorm2d(out_channels)
        self.activation = Activation(activation)

    @property
    def out_channels(self) -> int:
        return self.conv.out_channels

    def forward(self, x: Tensor) -> Tensor:
        return activate(self.bn(self.conv(x)), self.activation)


class SPPBlock(Module):
    """
    Spatial pyramid pooling.

    An entry CBS halves the channels, three stride-1 same-padded max pools run on its
    output, and an exit CBS fuses the four-way concatenation. Spatial size is preserved.
    """

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        pools: Sequence[int] = (5, 9, 13),
        hidden_channels: Optional[int] = None,
        activation: Activation = Activation.SILU,
        rng: Optional[np.random.Generator] = None,
    ):
        super().__init__()
        pools = tuple(int(k) for k in pools)
        if len(pools) != 3 or any(k < 1 or k % 2 == 0 for k in pools):
            raise ValueError(f"SPP needs three odd pool sizes, got {pools}")
        hidden = hidden_channels or max(1, in_channels // 2)
        self.entry = CBSBlock(in_channels, hidden, 1, activation=activation, rng=rng)
        self.exit = CBSBlock(4 * hidden, out_channels, 1, activation=activation, rng=rng)
        self.pools = pools

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim not in (3, 4):
            raise ShapeMismatchError(f"SPP expects a spatial tensor, got shape {x.shape}")
        y = self.entry(x)
        branches = [y] + [maxpool2d(y, k, stride=1, padding=(k - 1) // 2) for k in self.pools]
        return self.exit(concat_channels(branches))
