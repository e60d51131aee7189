"""
The detector network, its configuration, and the grid box parameterization.

Backbone: two stride-2 CBS stem layers (giving F2 at stride 4), a stride-8 stage and
a stride-16 stage, each a stride-2 CBS followed by receptive-field blocks, with SPP
closing the stride-16 stage and position/channel attention after both stages. The
stride-8 output is F1. The tiny-object fusion branch reduces F1 with a 1×1 conv,
upsamples it ×2, adds F2 and fuses the sum into F4, which feeds the stride-4 head.

Each head is a 1×1 conv producing A·(5+K) channels per cell: per anchor the box
offsets tx, ty, tw, th, the objectness logit and K class logits.
"""
import logging
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import Activation, AttentionFusion, Profile, Variant, app_settings
from .attention import PositionChannelAttention
from .blocks import CBSBlock, SPPBlock
from .boxes import BBox, Detection
from .exceptions import ConfigError, EncodeError, ShapeMismatchError
from .functional import upsample_nearest
from .nn import Conv2d, Module, activate
from .receptive import ReceptiveFieldBlock
from .tensor import Tensor, _sigmoid, as_tensor

logger = logging.getLogger(__name__)

HEAD_STRIDES = (4, 8, 16)


@dataclass(frozen=True)
class ModelConfig:
    """
    Widths are the channel counts at strides 2, 4, 8 and 16.

    `objectness_balance` weighs the objectness loss of the stride 4, 8 and 16 heads.
    """

    name: str = "desk"
    widths: Tuple[int, int, int, int] = (8, 16, 32, 64)
    in_channels: int = 3
    erd_depth: int = 2
    dilations: Tuple[int, ...] = (1, 3, 5)
    spp_pools: Tuple[int, int, int] = (5, 9, 13)
    num_classes: int = 1
    anchor_scales: Tuple[float, ...] = (0.5, 1.0, 2.0)
    anchor_base: float = 4.0
    use_todb: bool = True
    use_erd: bool = True
    use_pcam: bool = True
    pcam_fusion: AttentionFusion = AttentionFusion.SUM
    pcam_reduction: int = 8
    activation: Activation = Activation.SILU
    objectness_balance: Tuple[float, float, float] = (4.0, 1.0, 0.4)

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        object.__setattr__(self, "pcam_fusion", AttentionFusion(self.pcam_fusion))
        object.__setattr__(self, "activation", Activation(self.activation))
        if len(self.widths) != 4 or any(w < 1 for w in self.widths):
            raise ConfigError(f"widths needs four positive channel counts, got {self.widths}")
        if self.erd_depth < 1:
            raise ConfigError("erd_depth must be at least 1")
        if self.num_classes < 1 or not self.anchor_scales:
            raise ConfigError("Need at least one class and one anchor")
        if len(self.objectness_balance) != len(HEAD_STRIDES):
            raise ConfigError(f"objectness_balance needs one weight per stride {HEAD_STRIDES}")

    @classmethod
    def desk(cls) -> "ModelConfig":
        return cls()

    @classmethod
    def paper_640(cls) -> "ModelConfig":
        return cls(name=Profile.PAPER_640.value, widths=(32, 64, 128, 256))

    @classmethod
    def tiny(cls) -> "ModelConfig":
        """Smallest complete network, for fast whole-model tests."""
        return cls(name="tiny", widths=(2, 4, 8, 8), erd_depth=1)

    @classmethod
    def for_profile(cls, profile: Union[Profile, str]) -> "ModelConfig":
        try:
            profile = Profile(profile)
        except ValueError:
            raise ConfigError(f"Unknown profile {profile!r}, expected one of {[p.value for p in Profile]}") from None
        return cls.paper_640() if profile == Profile.PAPER_640 else cls.desk()

    def with_variant(self, variant: Union[Variant, str]) -> "ModelConfig":
        try:
            variant = Variant(variant)
        except ValueError:
            raise ConfigError(f"Unknown variant {variant!r}, expected one of {[v.value for v in Variant]}") from None
        return replace(
            self,
            use_todb=variant not in (Variant.NO_TODB, Variant.BASELINE),
            use_erd=variant not in (Variant.NO_ERD, Variant.BASELINE),
            use_pcam=variant not in (Variant.NO_PCAM, Variant.BASELINE),
        )

    @property
    def num_anchors(self) -> int:
        return len(self.anchor_scales)

    @property
    def num_outputs(self) -> int:
        return 5 + self.num_classes

    @property
    def head_channels(self) -> int:
        return self.num_anchors * self.num_outputs

    @property
    def strides(self) -> Tuple[int, ...]:
        return HEAD_STRIDES if self.use_todb else HEAD_STRIDES[1:]

    def anchors_for(self, stride: int) -> np.ndarray:
        """(A, 2) square anchors of scale × anchor_base × stride pixels."""
        sides = np.array(self.anchor_scales, dtype=np.float64) * self.anchor_base * stride
        return np.stack([sides, sides], axis=1)

    def balance_for(self, strides: Sequence[int]) -> Tuple[float, ...]:
        weights = dict(zip(HEAD_STRIDES, self.objectness_balance))
        return tuple(weights[s] for s in strides)


@dataclass
class HeadSpec:
    stride: int
    grid: int
    anchors: np.ndarray


@dataclass
class RawPrediction:
    """
    One head's output as an N×A×(5+K)×G×G tensor.

    A flat N×(A·(5+K))×G×G or unbatched tensor is reshaped on construction.
    """

    tensor: Tensor
    stride: int
    anchors: np.ndarray

    def __post_init__(self):
        self.anchors = np.asarray(self.anchors, dtype=np.float64).reshape(-1, 2)
        a = len(self.anchors)
        t = as_tensor(self.tensor)
        if t.ndim == 3:
            t = t.reshape(1, *t.shape)
        if t.ndim == 4:
            if t.shape[1] % a:
                raise ShapeMismatchError(f"{t.shape[1]} head channels do not split over {a} anchors")
            t = t.reshape(t.shape[0], a, t.shape[1] // a, t.shape[2], t.shape[3])
        if t.ndim != 5 or t.shape[1] != a or t.shape[2] < 5 or t.shape[3] != t.shape[4]:
            raise ShapeMismatchError(f"Head output of shape {t.shape} is not N×{a}×(5+K)×G×G")
        self.tensor = t

    @property
    def batch(self) -> int:
        return self.tensor.shape[0]

    @property
    def grid(self) -> int:
        return self.tensor.shape[-1]

    @property
    def num_classes(self) -> int:
        return self.tensor.shape[2] - 5

    @property
    def image_size(self) -> int:
        return self.grid * self.stride


class TinyObjectFusion(Module):
    """
    F1' = σ(W1 * F1), F3 = up2(F1') + F2, F4 = σ(W2 * F3)

    W1 is 1×1 and maps F1 to the channel count of F2; W2 is kernel×kernel and
    same-padded.
    """

    def __init__(
        self,
        in_channels: int,
        f2_channels: int,
        out_channels: int,
        kernel: int = 3,
        activation: Activation = Activation.SILU,
        rng: Optional[np.random.Generator] = None,
    ):
        super().__init__()
        self.reduce = Conv2d(in_channels, f2_channels, 1, rng=rng)
        self.fuse = Conv2d(f2_channels, out_channels, kernel, padding=kernel // 2, rng=rng)
        self.activation = Activation(activation)

    def stages(self, f1: Tensor, f2: Tensor) -> Tuple[Tensor, Tensor, Tensor]:
        """(F1', F3, F4)"""
        reduced = activate(self.reduce(f1), self.activation)
        upsampled = upsample_nearest(reduced, 2)
        if upsampled.shape != f2.shape:
            raise ShapeMismatchError(f"Cannot add upsampled F1' of shape {upsampled.shape} to F2 of shape {f2.shape}")
        merged = upsampled + f2
        return reduced, merged, activate(self.fuse(merged), self.activation)

    def forward(self, f1: Tensor, f2: Tensor) -> Tensor:
        return self.stages(f1, f2)[-1]


class NoduleDetector(Module):
    def __init__(self, config: Optional[ModelConfig] = None, seed: int = 0):
        super().__init__()
        self.config = config or ModelConfig.desk()
        cfg = self.config
        rng = np.random.default_rng(seed)
        c2, c4, c8, c16 = cfg.widths
        act = cfg.activation

        self.stem = [
            CBSBlock(cfg.in_channels, c2, 3, stride=2, activation=act, rng=rng),
            CBSBlock(c2, c4, 3, stride=2, activation=act, rng=rng),
        ]
        self.down8 = CBSBlock(c4, c8, 3, stride=2, activation=act, rng=rng)
        self.stage8 = [self._stage_block(c8, rng) for _ in range(cfg.erd_depth)]
        self.down16 = CBSBlock(c8, c16, 3, stride=2, activation=act, rng=rng)
        self.stage16 = [self._stage_block(c16, rng) for _ in range(cfg.erd_depth)]
        self.spp = SPPBlock(c16, c16, cfg.spp_pools, activation=act, rng=rng)
        self.pcam = (
            [
                PositionChannelAttention(c, cfg.pcam_reduction, cfg.pcam_fusion, rng=rng)
                for c in (c8, c16)
            ]
            if cfg.use_pcam
            else []
        )
        self.todb = (
            TinyObjectFusion(c8, c4, cfg.head_channels, kernel=3, activation=act, rng=rng) if cfg.use_todb else None
        )
        head_inputs = {4: cfg.head_channels, 8: c8, 16: c16}
        self.heads = [Conv2d(head_inputs[s], cfg.head_channels, 1, rng=rng) for s in cfg.strides]
        self._init_objectness()
        logger.debug(f"Built {cfg.name} detector with {sum(p.size for p in self.parameters())} parameters")

    def _stage_block(self, channels: int, rng: np.random.Generator) -> Module:
        cfg = self.config
        if cfg.use_erd:
            return ReceptiveFieldBlock(channels, cfg.dilations, activation=cfg.activation, rng=rng)
        return CBSBlock(channels, channels, 3, activation=cfg.activation, rng=rng)

    def _init_objectness(self):
        prior = app_settings.OBJECTNESS_PRIOR
        logit = np.log(prior / (1.0 - prior))
        outputs = self.config.num_outputs
        for head in self.heads:
            head.bias.data[4::outputs] = logit

    @property
    def strides(self) -> Tuple[int, ...]:
        return self.config.strides

    def head_specs(self, size: int) -> List[HeadSpec]:
        self._check_size(size, size)
        return [HeadSpec(s, size // s, self.config.anchors_for(s)) for s in self.strides]

    def _check_size(self, height: int, width: int):
        largest = max(HEAD_STRIDES)
        if height != width or height % largest:
            raise ShapeMismatchError(f"Input must be square with a side divisible by {largest}, got {height}x{width}")

    def forward_features(self, images: Union[Tensor, np.ndarray]) -> Dict[str, Tensor]:
        """Named intermediate maps: F2, F1, P16 and, with the fusion branch, F1', F3, F4."""
        x = as_tensor(images)
        if x.ndim == 3:
            x = x.reshape(1, *x.shape)
        if x.ndim != 4 or x.shape[1] != self.config.in_channels:
            raise ShapeMismatchError(f"Expected N×{self.config.in_channels}×S×S images, got shape {x.shape}")
        self._check_size(x.shape[2], x.shape[3])

        features = {}
        f2 = self.stem[1](self.stem[0](x))
        features["F2"] = f2
        f1 = self.down8(f2)
        for block in self.stage8:
            f1 = block(f1)
        if self.pcam:
            f1 = self.pcam[0](f1)
        features["F1"] = f1
        p16 = self.down16(f1)
        for block in self.stage16:
            p16 = block(p16)
        p16 = self.spp(p16)
        if self.pcam:
            p16 = self.pcam[1](p16)
        features["P16"] = p16
        if self.todb is not None:
            features["F1'"], features["F3"], features["F4"] = self.todb.stages(f1, f2)
        return features

    def forward(self, images: Union[Tensor, np.ndarray]) -> List[RawPrediction]:
        features = self.forward_features(images)
        inputs = {4: features.get("F4"), 8: features["F1"], 16: features["P16"]}
        return [
            RawPrediction(head(inputs[s]), stride=s, anchors=self.config.anchors_for(s))
            for s, head in zip(self.strides, self.heads)
        ]


def decode_batch(preds: Sequence[RawPrediction], conf_threshold: float = 0.25) -> List[List[Detection]]:
    """
    Detections per image, in head, anchor, row, column order.

    center = (2σ(t_xy) - 0.5 + cell)·stride, size = anchor·(2σ(t_wh))², confidence
    σ(obj) for a single class and σ(obj)·max σ(cls) otherwise.
    """
    if not 0.0 <= conf_threshold <= 1.0:
        raise ValueError(f"conf_threshold must lie in [0, 1], got {conf_threshold}")
    if not preds:
        return []
    batch = preds[0].batch
    results: List[List[Detection]] = [[] for _ in range(batch)]
    for pred in preds:
        size = float(pred.image_size)
        s = _sigmoid(pred.tensor.data)
        cells = np.arange(pred.grid, dtype=np.float64)
        cx = (2.0 * s[:, :, 0] - 0.5 + cells[None, None, None, :]) * pred.stride
        cy = (2.0 * s[:, :, 1] - 0.5 + cells[None, None, :, None]) * pred.stride
        w = (2.0 * s[:, :, 2]) ** 2 * pred.anchors[None, :, 0, None, None]
        h = (2.0 * s[:, :, 3]) ** 2 * pred.anchors[None, :, 1, None, None]
        if pred.num_classes > 1:
            classes = s[:, :, 5:].argmax(axis=2)
            conf = s[:, :, 4] * s[:, :, 5:].max(axis=2)
        else:
            classes = np.zeros(s[:, :, 4].shape, dtype=int)
            conf = s[:, :, 4]
        for n, a, gy, gx in zip(*np.nonzero(conf >= conf_threshold)):
            idx = (n, a, gy, gx)
            box = BBox(cx[idx] / size, cy[idx] / size, w[idx] / size, h[idx] / size).clamped()
            results[n].append(Detection(box, float(conf[idx]), int(classes[idx])))
    return results


def decode(preds: Sequence[RawPrediction], conf_threshold: float = 0.25, image: int = 0) -> List[Detection]:
    """Detections of one image of the batch."""
    decoded = decode_batch(preds, conf_threshold)
    return decoded[image] if decoded else []


def _logit(p: np.ndarray) -> np.ndarray:
    return np.log(p / (1.0 - p))


def encode(box: Sequence[float], stride: int, anchor: Sequence[float], cell: Tuple[int, int]) -> np.ndarray:
    """
    Inverse of the decode parameterization: the (tx, ty, tw, th) logits that reproduce
    the pixel box (cx, cy, w, h) from anchor (w, h) at grid cell (gx, gy).
    """
    cx, cy, w, h = (float(v) for v in box)
    gx, gy = cell
    offsets = np.array([cx / stride - gx, cy / stride - gy])
    scales = np.sqrt(np.array([w / anchor[0], h / anchor[1]]))
    probs = np.concatenate([(offsets + 0.5) / 2.0, scales / 2.0])
    if not np.all((probs > 0.0) & (probs < 1.0)):
        raise EncodeError(
            f"Box {tuple(box)} is out of reach of cell {tuple(cell)} at stride {stride} with anchor {tuple(anchor)}"
        )
    return _logit(probs)

