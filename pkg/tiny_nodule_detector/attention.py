"""
Position and channel self-attention with learned residual scales.

Position attention correlates the N = H·W spatial positions through 1×1 projections
R, S, T of the input Q; channel attention correlates the C channels of Q directly.
Both scales start at zero, so each branch initially returns its input unchanged.
"""
import logging
from typing import Optional, Tuple

import numpy as np

from . import AttentionFusion
from .nn import Conv2d, Module
from .tensor import Parameter, Tensor, matmul, softmax_rows

logger = logging.getLogger(__name__)


def _flatten_spatial(x: Tensor) -> Tuple[Tensor, Tuple[int, ...]]:
    """C×H×W -> 1×C×N (or N_b×C×H×W -> N_b×C×N), returning the original shape."""
    shape = x.shape
    if x.ndim == 3:
        return x.reshape(1, shape[0], shape[1] * shape[2]), shape
    return x.reshape(shape[0], shape[1], shape[2] * shape[3]), shape


def _swap(x: Tensor) -> Tensor:
    return x.transpose(0, 2, 1)


class PositionAttention(Module):
    def __init__(self, channels: int, reduction: int = 8, rng: Optional[np.random.Generator] = None):
        super().__init__()
        hidden = max(1, channels // reduction)
        self.query = Conv2d(channels, hidden, 1, rng=rng)  # R
        self.key = Conv2d(channels, hidden, 1, rng=rng)  # S
        self.value = Conv2d(channels, channels, 1, rng=rng)  # T
        self.beta = Parameter(np.zeros(1))

    def attention_map(self, q: Tensor) -> Tensor:
        """U with rows indexed by output position j and columns by input position i."""
        r, _ = _flatten_spatial(self.query(q))
        s, _ = _flatten_spatial(self.key(q))
        return softmax_rows(matmul(_swap(s), r))

    def forward(self, q: Tensor) -> Tensor:
        u = self.attention_map(q)
        t, shape = _flatten_spatial(self.value(q))
        aggregated = matmul(t, _swap(u)).reshape(shape)
        return self.beta * aggregated + q


class ChannelAttention(Module):
    def __init__(self):
        super().__init__()
        self.gamma = Parameter(np.zeros(1))

    def attention_map(self, q: Tensor) -> Tensor:
        """Z with rows indexed by output channel j and columns by input channel i."""
        flat, _ = _flatten_spatial(q)
        return softmax_rows(matmul(flat, _swap(flat)))

    def forward(self, q: Tensor) -> Tensor:
        flat, shape = _flatten_spatial(q)
        z = softmax_rows(matmul(flat, _swap(flat)))
        aggregated = matmul(z, flat).reshape(shape)
        return self.gamma * aggregated + q


class PositionChannelAttention(Module):
    """Sum (default) or sequential composition of position and channel attention."""

    def __init__(
        self,
        channels: int,
        reduction: int = 8,
        fusion: AttentionFusion = AttentionFusion.SUM,
        rng: Optional[np.random.Generator] = None,
    ):
        super().__init__()
        self.position = PositionAttention(channels, reduction, rng=rng)
        self.channel = ChannelAttention()
        self.fusion = AttentionFusion(fusion)

    @property
    def beta(self) -> Parameter:
        return self.position.beta

    @property
    def gamma(self) -> Parameter:
        return self.channel.gamma

    def named_parameters(self, prefix: str = ""):
        # beta and gamma are stored under the block's own name in checkpoints
        yield prefix + "beta", self.position.beta
        yield prefix + "gamma", self.channel.gamma
        for name, p in self.position.named_parameters(prefix + "position."):
            if p is not self.position.beta:
                yield name, p

    def forward(self, x: Tensor) -> Tensor:
        if self.fusion == AttentionFusion.SEQUENTIAL:
            return self.channel(self.position(x))
        return self.position(x) + self.channel(x)
