"""
Spatial operations on C×H×W or N×C×H×W tensors: dilated convolution, max pooling,
nearest-neighbour upsampling, channel concatenation and batch normalization.
"""
import logging
from typing import Optional, Sequence

import numpy as np

from . import app_settings
from .exceptions import ShapeMismatchError
from .tensor import Tensor, make_result

logger = logging.getLogger(__name__)


def effective_kernel(k: int, dilation: int) -> int:
    """Extent covered by a k-tap kernel with the given dilation rate: (r-1)(k-1)+k."""
    if k < 1 or dilation < 1:
        raise ValueError(f"Kernel size and dilation must be >= 1, got k={k}, r={dilation}")
    return (dilation - 1) * (k - 1) + k


def conv_output_size(h: int, k: int, stride: int = 1, padding: int = 0, dilation: int = 1) -> int:
    """floor((h + 2p - RF) / s) + 1, which may be < 1 for illegal configurations."""
    return (h + 2 * padding - effective_kernel(k, dilation)) // stride + 1


def _as_batch(x: Tensor):
    if x.ndim == 3:
        return x.data[None], True
    if x.ndim == 4:
        return x.data, False
    raise ShapeMismatchError(f"Expected a C×H×W or N×C×H×W tensor, got shape {x.shape}")


def _window(start: int, count: int, stride: int) -> slice:
    return slice(start, start + stride * (count - 1) + 1, stride)


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
    dilation: int = 1,
) -> Tensor:
    """
    Zero-padded dilated cross-correlation.

    y[o, m, n] = sum over c, i, j of x[c, s*m + r*i - p, s*n + r*j - p] * w[o, c, i, j] (+ bias[o])
    """
    xd, squeezed = _as_batch(x)
    if weight.ndim != 4:
        raise ShapeMismatchError(f"conv2d weight must be C_out×C_in×M×N, got shape {weight.shape}")
    if stride < 1 or padding < 0 or dilation < 1:
        raise ValueError(f"Invalid conv2d geometry: stride={stride}, padding={padding}, dilation={dilation}")
    n, c, h, w = xd.shape
    c_out, c_in, kh, kw = weight.shape
    if c_in != c:
        raise ShapeMismatchError(f"conv2d channel mismatch: input {x.shape} vs weight {weight.shape}")
    if bias is not None and bias.shape != (c_out,):
        raise ShapeMismatchError(f"conv2d bias must have shape ({c_out},), got {bias.shape}")
    ho = conv_output_size(h, kh, stride, padding, dilation)
    wo = conv_output_size(w, kw, stride, padding, dilation)
    if ho < 1 or wo < 1:
        raise ShapeMismatchError(
            f"conv2d output size {ho}x{wo} is not positive for input {x.shape}, kernel {kh}x{kw}, "
            f"stride {stride}, padding {padding}, dilation {dilation}"
        )

    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = np.empty((c, kh, kw, n, ho, wo))
    for i in range(kh):
        for j in range(kw):
            rows, columns = _window(i * dilation, ho, stride), _window(j * dilation, wo, stride)
            cols[:, i, j] = xp[:, :, rows, columns].transpose(1, 0, 2, 3)
    # taps accumulate one at a time in (channel, row, column) order, so r=1 output
    # is bit-identical to the direct nested-loop convolution
    out = np.zeros((n, c_out, ho, wo))
    if bias is not None:
        out += bias.data.reshape(1, c_out, 1, 1)
    for ch in range(c):
        for i in range(kh):
            for j in range(kw):
                out += cols[ch, i, j][:, None] * weight.data[:, ch, i, j].reshape(1, c_out, 1, 1)
    cols = cols.reshape(c * kh * kw, n * ho * wo)
    w2 = weight.data.reshape(c_out, -1)

    def backward(g):
        g4 = g[None] if squeezed else g
        g2 = g4.transpose(1, 0, 2, 3).reshape(c_out, -1)
        grad_w = (g2 @ cols.T).reshape(weight.shape)
        grad_cols = (w2.T @ g2).reshape(c, kh, kw, n, ho, wo)
        grad_xp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                rows, columns = _window(i * dilation, ho, stride), _window(j * dilation, wo, stride)
                grad_xp[:, :, rows, columns] += grad_cols[:, i, j].transpose(1, 0, 2, 3)
        grad_x = grad_xp[:, :, padding : padding + h, padding : padding + w]
        grads = [grad_x[0] if squeezed else grad_x, grad_w]
        if bias is not None:
            grads.append(g4.sum(axis=(0, 2, 3)))
        return grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out[0] if squeezed else out, parents, backward)


def maxpool2d(x: Tensor, kernel: int, stride: Optional[int] = None, padding: int = 0) -> Tensor:
    """
    Max pooling with implicit -inf padding.

    The gradient of each window goes to its first maximal element in row-major order.
    """
    stride = kernel if stride is None else stride
    if kernel < 1 or stride < 1 or padding < 0 or padding > kernel // 2:
        raise ValueError(f"Invalid maxpool geometry: kernel={kernel}, stride={stride}, padding={padding}")
    xd, squeezed = _as_batch(x)
    n, c, h, w = xd.shape
    ho = conv_output_size(h, kernel, stride, padding)
    wo = conv_output_size(w, kernel, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeMismatchError(f"maxpool kernel {kernel} with padding {padding} does not fit input {x.shape}")

    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)), constant_values=-np.inf)
    taps = [(i, j) for i in range(kernel) for j in range(kernel)]
    windows = np.stack([xp[:, :, _window(i, ho, stride), _window(j, wo, stride)] for i, j in taps])
    arg = windows.argmax(axis=0)
    out = np.take_along_axis(windows, arg[None], axis=0)[0]

    def backward(g):
        g4 = g[None] if squeezed else g
        grad_xp = np.zeros_like(xp)
        for t, (i, j) in enumerate(taps):
            grad_xp[:, :, _window(i, ho, stride), _window(j, wo, stride)] += np.where(arg == t, g4, 0.0)
        grad_x = grad_xp[:, :, padding : padding + h, padding : padding + w]
        return (grad_x[0] if squeezed else grad_x,)

    return make_result(out[0] if squeezed else out, (x,), backward)


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    """Repeat every pixel factor×factor times."""
    if not isinstance(factor, (int, np.integer)) or factor < 1:
        raise ValueError(f"Upsample factor must be a positive integer, got {factor!r}")
    if x.ndim < 3:
        raise ShapeMismatchError(f"upsample_nearest needs a spatial tensor, got shape {x.shape}")
    h, w = x.shape[-2:]
    out = x.data.repeat(factor, axis=-2).repeat(factor, axis=-1)

    def backward(g):
        return (g.reshape(g.shape[:-2] + (h, factor, w, factor)).sum(axis=(-3, -1)),)

    return make_result(out, (x,), backward)


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    """Stack tensors along the channel axis (axis -3)."""
    xs = tuple(xs)
    if not xs:
        raise ValueError("concat_channels needs at least one tensor")
    reference = xs[0].shape[:-3] + xs[0].shape[-2:]
    for t in xs:
        if t.ndim != xs[0].ndim or t.shape[:-3] + t.shape[-2:] != reference:
            raise ShapeMismatchError(f"Cannot concatenate {xs[0].shape} with {t.shape} along channels")
    splits = np.cumsum([t.shape[-3] for t in xs])[:-1]
    return make_result(
        np.concatenate([t.data for t in xs], axis=-3),
        xs,
        lambda g: np.split(g, splits, axis=-3),
    )


def batchnorm2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool = True,
    momentum: float = app_settings.BN_MOMENTUM,
    eps: float = app_settings.BN_EPS,
) -> Tensor:
    """
    Per-channel normalization followed by an affine map.

    Training mode normalizes with the batch statistics and updates `running_mean` /
    `running_var` in place; inference mode normalizes with the running statistics.
    """
    xd, squeezed = _as_batch(x)
    c = xd.shape[1]
    if weight.shape != (c,) or bias.shape != (c,):
        raise ShapeMismatchError(f"batchnorm parameters must have shape ({c},) for input {x.shape}")
    axes = (0, 2, 3)
    shape = (1, c, 1, 1)
    count = xd.shape[0] * xd.shape[2] * xd.shape[3]
    gamma = weight.data.reshape(shape)

    if training:
        mean = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        unbiased = var * count / (count - 1) if count > 1 else var
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
    else:
        mean, var = running_mean, running_var

    inv_std = 1.0 / np.sqrt(var + eps).reshape(shape)
    x_hat = (xd - mean.reshape(shape)) * inv_std
    out = gamma * x_hat + bias.data.reshape(shape)

    def backward(g):
        g4 = g[None] if squeezed else g
        grad_gamma = (g4 * x_hat).sum(axis=axes)
        grad_beta = g4.sum(axis=axes)
        d_hat = g4 * gamma
        if training:
            grad_x = (
                inv_std
                / count
                * (
                    count * d_hat
                    - d_hat.sum(axis=axes, keepdims=True)
                    - x_hat * (d_hat * x_hat).sum(axis=axes, keepdims=True)
                )
            )
        else:
            grad_x = d_hat * inv_std
        return (grad_x[0] if squeezed else grad_x, grad_gamma, grad_beta)

    return make_result(out[0] if squeezed else out, (x, weight, bias), backward)
