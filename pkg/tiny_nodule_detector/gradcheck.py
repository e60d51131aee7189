"""
Finite-difference verification of reverse-mode gradients.

`gradcheck` compares the autodiff gradient of `sum(f(*inputs))` against central
differences. `REGISTRY` holds the named checks run by `gradcheck --all`.
"""
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from . import app_settings
from .exceptions import GradcheckError
from .tensor import Parameter, Tensor, no_grad

logger = logging.getLogger(__name__)


@dataclass
class GradcheckReport:
    max_rel_error: float
    tol: float
    checked: int
    per_input: List[float] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol


def _total(value: Tensor) -> float:
    total = float(np.sum(value.data))
    if not np.isfinite(total):
        raise GradcheckError(f"Function produced a non-finite value ({total})")
    return total


def gradcheck(
    f: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    step: float = app_settings.GRADCHECK_STEP,
    tol: float = app_settings.GRADCHECK_TOL,
    samples: Optional[int] = None,
    seed: int = 0,
    floor: float = 1e-3,
) -> GradcheckReport:
    """
    Compare autodiff and central-difference gradients of `sum(f(*inputs))`.

    The error of each coordinate is |a - n| / max(|a|, |n|, floor). When `samples` is
    given only that many randomly chosen coordinates per input are perturbed.
    """
    inputs = list(inputs)
    for t in inputs:
        if not np.all(np.isfinite(t.data)):
            raise GradcheckError("Inputs must be finite")
        t.zero_grad()

    out = f(*inputs)
    _total(out)
    if not out.requires_grad:
        raise GradcheckError("Function output does not depend on any input that requires grad")
    out.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    rng = np.random.default_rng(seed)
    per_input = []
    checked = 0
    with no_grad():
        for t, grad in zip(inputs, analytic):
            flat = t.data.reshape(-1)
            if not np.shares_memory(flat, t.data):
                raise GradcheckError("Input data must be contiguous to be perturbed in place")
            coords = np.arange(flat.size)
            if samples is not None and samples < flat.size:
                coords = np.sort(rng.choice(flat.size, size=samples, replace=False))
            worst = 0.0
            for k in coords:
                original = flat[k]
                flat[k] = original + step
                plus = _total(f(*inputs))
                flat[k] = original - step
                minus = _total(f(*inputs))
                flat[k] = original
                numeric = (plus - minus) / (2.0 * step)
                a = grad.reshape(-1)[k]
                error = abs(a - numeric) / max(abs(a), abs(numeric), floor)
                worst = max(worst, error)
            checked += len(coords)
            per_input.append(worst)

    report = GradcheckReport(max(per_input, default=0.0), tol, checked, per_input)
    logger.debug(f"gradcheck: {checked} coordinates, max relative error {report.max_rel_error:.3e}")
    return report


REGISTRY: Dict[str, Callable[[], GradcheckReport]] = {}


def register(name: str):
    def decorator(fn):
        REGISTRY[name] = fn
        return fn

    return decorator


def _weights(rng: np.random.Generator, shape) -> np.ndarray:
    # a random projection keeps checks sensitive where sum(out) would be flat
    return rng.uniform(0.5, 1.5, size=shape)


def _leaf(rng: np.random.Generator, *shape) -> Parameter:
    return Parameter(rng.standard_normal(shape))


def run_all(names: Optional[Sequence[str]] = None) -> Dict[str, GradcheckReport]:
    selected = list(REGISTRY) if not names else list(names)
    unknown = [n for n in selected if n not in REGISTRY]
    if unknown:
        raise KeyError(f"Unknown gradient checks: {', '.join(unknown)}")
    results = {}
    for name in selected:
        report = REGISTRY[name]()
        logger.info(f"{name}: max rel error {report.max_rel_error:.2e} ({'ok' if report.passed else 'FAILED'})")
        results[name] = report
    return results


def _check_conv(dilation: int) -> GradcheckReport:
    from .functional import conv2d

    rng = np.random.default_rng(10 + dilation)
    x, w, b = _leaf(rng, 2, 9, 9), _leaf(rng, 3, 2, 3, 3), _leaf(rng, 3)
    proj = _weights(rng, (3, 9, 9))
    return gradcheck(lambda x, w, b: conv2d(x, w, b, padding=dilation, dilation=dilation) * proj, [x, w, b])


for _r in (1, 2, 3, 5):
    register(f"conv2d_r{_r}")(lambda r=_r: _check_conv(r))


@register("conv2d_stride2")
def _check_conv_stride() -> GradcheckReport:
    from .functional import conv2d

    rng = np.random.default_rng(3)
    x, w = _leaf(rng, 2, 2, 8, 8), _leaf(rng, 2, 2, 3, 3)
    proj = _weights(rng, (2, 2, 4, 4))
    return gradcheck(lambda x, w: conv2d(x, w, stride=2, padding=1) * proj, [x, w])


@register("maxpool2d")
def _check_maxpool() -> GradcheckReport:
    from .functional import maxpool2d

    rng = np.random.default_rng(4)
    x = _leaf(rng, 2, 6, 6)
    proj = _weights(rng, (2, 3, 3))
    return gradcheck(lambda x: maxpool2d(x, 3, stride=2, padding=1) * proj, [x])


@register("upsample_nearest")
def _check_upsample() -> GradcheckReport:
    from .functional import upsample_nearest

    rng = np.random.default_rng(5)
    x = _leaf(rng, 2, 3, 3)
    proj = _weights(rng, (2, 6, 6))
    return gradcheck(lambda x: upsample_nearest(x, 2) * proj, [x])


@register("batchnorm2d")
def _check_batchnorm() -> GradcheckReport:
    from .functional import batchnorm2d

    rng = np.random.default_rng(6)
    x, gamma, beta = _leaf(rng, 3, 2, 4, 4), _leaf(rng, 2), _leaf(rng, 2)
    mean, var = np.zeros(2), np.ones(2)
    proj = _weights(rng, (3, 2, 4, 4))
    return gradcheck(lambda x, g, b: batchnorm2d(x, g, b, mean, var, training=True) * proj, [x, gamma, beta])


@register("batchnorm2d_eval")
def _check_batchnorm_eval() -> GradcheckReport:
    from .functional import batchnorm2d

    rng = np.random.default_rng(7)
    x, gamma, beta = _leaf(rng, 2, 4, 4), _leaf(rng, 2), _leaf(rng, 2)
    mean, var = rng.standard_normal(2), rng.uniform(0.5, 2.0, 2)
    proj = _weights(rng, (2, 4, 4))
    return gradcheck(lambda x, g, b: batchnorm2d(x, g, b, mean, var, training=False) * proj, [x, gamma, beta])


@register("softmax_rows")
def _check_softmax() -> GradcheckReport:
    from .tensor import softmax_rows

    rng = np.random.default_rng(8)
    x = _leaf(rng, 3, 5)
    proj = _weights(rng, (3, 5))
    return gradcheck(lambda x: softmax_rows(x) * proj, [x])


@register("matmul")
def _check_matmul() -> GradcheckReport:
    rng = np.random.default_rng(9)
    a, b = _leaf(rng, 3, 4), _leaf(rng, 4, 2)
    return gradcheck(lambda a, b: a @ b, [a, b])


@register("elementwise")
def _check_elementwise() -> GradcheckReport:
    from .tensor import leaky_relu

    rng = np.random.default_rng(11)
    a, b = _leaf(rng, 2, 3), _leaf(rng, 2, 3)
    return gradcheck(lambda a, b: (a * b).silu() + leaky_relu(a - b) * b.sigmoid(), [a, b])


def _attention_check(kind: str) -> GradcheckReport:
    from .attention import ChannelAttention, PositionAttention, PositionChannelAttention

    rng = np.random.default_rng(12)
    channels = 8
    module = {
        "position": lambda: PositionAttention(channels, rng=rng),
        "channel": lambda: ChannelAttention(),
        "pcam": lambda: PositionChannelAttention(channels, rng=rng),
    }[kind]()
    for p in module.parameters():
        if p.size == 1:
            p.data[...] = rng.uniform(0.3, 0.8)
    x = Parameter(0.5 * rng.standard_normal((channels, 3, 3)))
    proj = _weights(rng, (channels, 3, 3))
    params = module.parameters()
    return gradcheck(lambda x, *ps: module(x) * proj, [x, *params])


register("position_attention")(lambda: _attention_check("position"))
register("channel_attention")(lambda: _attention_check("channel"))
register("pcam")(lambda: _attention_check("pcam"))


@register("todb")
def _check_todb() -> GradcheckReport:
    from .detector import TinyObjectFusion

    rng = np.random.default_rng(13)
    block = TinyObjectFusion(4, 3, 6, kernel=3, rng=rng)
    f1, f2 = _leaf(rng, 2, 4, 3, 3), _leaf(rng, 2, 3, 6, 6)
    proj = _weights(rng, (2, 6, 6, 6))
    return gradcheck(lambda a, b, *ps: block(a, b) * proj, [f1, f2, *block.parameters()])


@register("erd")
def _check_erd() -> GradcheckReport:
    from .receptive import ReceptiveFieldBlock

    rng = np.random.default_rng(14)
    block = ReceptiveFieldBlock(3, rng=rng)
    x = _leaf(rng, 2, 3, 11, 11)
    proj = _weights(rng, (2, 3, 11, 11))
    return gradcheck(lambda x, *ps: block(x) * proj, [x, *block.parameters()], samples=40)


@register("cbs_stack")
def _check_cbs() -> GradcheckReport:
    from .blocks import CBSBlock

    rng = np.random.default_rng(15)
    first, second = CBSBlock(2, 3, 3, stride=2, padding=1, rng=rng), CBSBlock(3, 2, 3, padding=1, rng=rng)
    x = _leaf(rng, 2, 2, 6, 6)
    proj = _weights(rng, (2, 2, 3, 3))
    params = first.parameters() + second.parameters()
    return gradcheck(lambda x, *ps: second(first(x)) * proj, [x, *params])


@register("spp")
def _check_spp() -> GradcheckReport:
    from .blocks import SPPBlock

    rng = np.random.default_rng(16)
    block = SPPBlock(4, 4, pools=(3, 5, 7), rng=rng)
    x = _leaf(rng, 2, 4, 5, 5)
    proj = _weights(rng, (2, 4, 5, 5))
    return gradcheck(lambda x, *ps: block(x) * proj, [x, *block.parameters()], samples=30)


@register("detection_loss")
def _check_loss() -> GradcheckReport:
    from .detector import RawPrediction
    from .loss import HeadTargets, LossConfig, detection_loss

    rng = np.random.default_rng(17)
    raw = _leaf(rng, 1, 6, 1, 1)
    anchors = np.array([[8.0, 8.0]])
    targets = HeadTargets.empty(batch=1, anchors=1, grid=1)
    targets.add(0, 0, 0, 0, np.array([2.3, 1.9, 5.0, 6.0]))
    cfg = LossConfig()
    return gradcheck(
        lambda r: detection_loss([RawPrediction(r, stride=4, anchors=anchors)], [targets], cfg).total,
        [raw],
    )


@register("desk_model_loss")
def _check_model_loss() -> GradcheckReport:
    from .boxes import GroundTruth
    from .detector import ModelConfig, NoduleDetector
    from .loss import LossConfig, assign_targets, detection_loss

    rng = np.random.default_rng(18)
    model = NoduleDetector(ModelConfig.desk(), seed=18)
    image = Parameter(rng.uniform(0.0, 1.0, size=(2, 3, 32, 32)))
    truths = [
        [GroundTruth(0, 0.40, 0.45, 0.20, 0.22)],
        [GroundTruth(0, 0.70, 0.30, 0.15, 0.15), GroundTruth(0, 0.25, 0.75, 0.30, 0.25)],
    ]
    targets = assign_targets(truths, model.head_specs(32), image_size=32)
    cfg = LossConfig(balance=model.config.balance_for(model.strides))
    params = model.parameters()
    return gradcheck(
        lambda x, *ps: detection_loss(model(x), targets, cfg).total,
        [image, *params],
        samples=2,
    )
