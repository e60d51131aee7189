"""Parameter containers: a minimal module tree with named parameters and buffers."""
import logging
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from . import Activation, app_settings
from .exceptions import CheckpointFormatError
from .functional import batchnorm2d, conv2d
from .tensor import Parameter, Tensor, leaky_relu, silu

logger = logging.getLogger(__name__)


class Module:
    """
    Base class for layers.

    Parameters, buffers and sub-modules are discovered from instance attributes in
    assignment order; lists and tuples of modules are named by their index.
    """

    _buffer_names: Tuple[str, ...] = ()

    def __init__(self):
        self.training = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def _children(self) -> Iterator[Tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for index, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{index}", item

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + name, value
        for name, child in self._children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        for name in self._buffer_names:
            yield prefix + name, getattr(self, name)
        for name, child in self._children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, child in self._children():
            yield from child.modules()

    def train(self, mode: bool = True) -> "Module":
        for module in self.modules():
            module.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]):
        """Copy values into the existing parameters and buffers; names and shapes must match."""
        own = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        expected = set(own) | set(buffers)
        missing, unexpected = expected - set(state), set(state) - expected
        if missing or unexpected:
            raise CheckpointFormatError(
                f"State does not match the model (missing: {sorted(missing)}, unexpected: {sorted(unexpected)})"
            )
        for name, value in state.items():
            target = own[name].data if name in own else buffers[name]
            if target.shape != np.shape(value):
                raise CheckpointFormatError(f"Shape mismatch for {name}: {np.shape(value)} vs {target.shape}")
            target[...] = value


def activate(x: Tensor, activation: Activation) -> Tensor:
    if activation == Activation.SILU:
        return silu(x)
    if activation == Activation.LEAKY_RELU:
        return leaky_relu(x)
    return x


class Conv2d(Module):
    """Dilated 2-D convolution with uniform fan-in initialization."""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel: int,
        stride: int = 1,
        padding: int = 0,
        dilation: int = 1,
        bias: bool = True,
        rng: Optional[np.random.Generator] = None,
    ):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        bound = 1.0 / np.sqrt(in_channels * kernel * kernel)
        self.weight = Parameter(rng.uniform(-bound, bound, size=(out_channels, in_channels, kernel, kernel)))
        self.bias = Parameter(rng.uniform(-bound, bound, size=out_channels)) if bias else None
        self.stride = stride
        self.padding = padding
        self.dilation = dilation

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.stride, self.padding, self.dilation)


class BatchNorm2d(Module):
    _buffer_names = ("running_mean", "running_var")

    def __init__(self, channels: int, momentum: float = app_settings.BN_MOMENTUM, eps: float = app_settings.BN_EPS):
        super().__init__()
        self.weight = Parameter(np.ones(channels))
        self.bias = Parameter(np.zeros(channels))
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.momentum = momentum
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return batchnorm2d(
            x,
            self.weight,
            self.bias,
            self.running_mean,
            self.running_var,
            training=self.training,
            momentum=self.momentum,
            eps=self.eps,
        )
