"""
Static receptive-field and shape analysis of convolutional pipelines.

An ArchConfig is an ordered list of LayerSpecs (conv, pool, upsample) plus named
taps. `compose_rf` walks it once, tracking for every layer the output resolution,
the layer's own receptive field, the composed receptive field in input pixels and
the jump (cumulative stride). Nothing is allocated; `trace_shapes` reports the tap
shapes that the live network produces.
"""
import csv
import logging
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, TextIO, Tuple, Union

from . import LayerKind
from .config import build_dataclass, read_toml
from .detector import ModelConfig
from .exceptions import ConfigError, ShapeMismatchError
from .functional import conv_output_size, effective_kernel

logger = logging.getLogger(__name__)

REPORT_COLUMNS = ("idx", "kind", "k", "s", "p", "r", "H", "rf_layer", "rf_composed", "jump")


@dataclass(frozen=True)
class LayerSpec:
    """
    One layer of a pipeline.

    `branches` turns a layer into a multi-branch block of same-padded stride-1 paths:
    dilation rates for conv, kernel sizes for pool. `source` names the input layer
    (default: the previous one) and `add_from` a layer whose output is added to this one.
    """

    kind: LayerKind
    k: int = 1
    s: int = 1
    p: int = 0
    r: int = 1
    f: int = 1
    channels: Optional[int] = None
    source: Optional[int] = None
    add_from: Optional[int] = None
    branches: Tuple[int, ...] = ()
    name: str = ""

    def __post_init__(self):
        try:
            object.__setattr__(self, "kind", LayerKind(self.kind))
        except ValueError:
            raise ConfigError(f"Unknown layer kind {self.kind!r}") from None
        object.__setattr__(self, "branches", tuple(int(b) for b in self.branches))
        label = self.name or self.kind.value
        if self.k < 1 or self.s < 1 or self.p < 0 or self.r < 1 or self.f < 1:
            raise ConfigError(f"{label}: need k, s, r, f >= 1 and p >= 0")
        if self.channels is not None and self.channels < 1:
            raise ConfigError(f"{label}: channels must be positive")
        if self.kind == LayerKind.UPSAMPLE:
            if (self.k, self.s, self.p, self.r) != (1, 1, 0, 1) or self.branches:
                raise ConfigError(f"{label}: upsample layers only take a factor f")
            return
        if self.f != 1:
            raise ConfigError(f"{label}: only upsample layers take a factor f")
        if self.kind == LayerKind.POOL and self.r != 1:
            raise ConfigError(f"{label}: pool layers have no dilation")
        if self.branches:
            if (self.s, self.p, self.r) != (1, 0, 1):
                raise ConfigError(f"{label}: multi-branch layers are stride-1 and same-padded, set only k and branches")
            if any(b < 1 for b in self.branches):
                raise ConfigError(f"{label}: branch values must be >= 1")
            if self.kind == LayerKind.CONV and self.k % 2 == 0:
                raise ConfigError(f"{label}: same-padded branches need an odd kernel")
            if self.kind == LayerKind.POOL and any(b % 2 == 0 for b in self.branches):
                raise ConfigError(f"{label}: same-padded pool branches need odd kernels")

    def branch_geometry(self) -> List[Tuple[int, int, int]]:
        """(kernel, dilation, padding) for every path of the layer."""
        if not self.branches:
            return [(self.k, self.r, self.p)]
        if self.kind == LayerKind.CONV:
            return [(self.k, b, b * (self.k - 1) // 2) for b in self.branches]
        return [(b, 1, (b - 1) // 2) for b in self.branches]

    def branch_rfs(self) -> List[int]:
        if self.kind == LayerKind.UPSAMPLE:
            return [1]
        return [effective_kernel(k, r) for k, r, _ in self.branch_geometry()]

    def geometry(self) -> Tuple[int, int, int]:
        """Geometry of the largest-RF path, which stands for the whole layer."""
        if self.kind == LayerKind.UPSAMPLE:
            return (1, 1, 0)
        rfs = self.branch_rfs()
        return self.branch_geometry()[rfs.index(max(rfs))]

    @property
    def rf(self) -> int:
        return max(self.branch_rfs())


@dataclass
class ArchConfig:
    input_size: int
    layers: Tuple[LayerSpec, ...] = ()
    taps: Dict[str, int] = field(default_factory=dict)
    in_channels: int = 3
    target_sizes: Tuple[float, ...] = ()
    name: str = ""

    def __post_init__(self):
        self.layers = tuple(self.layers)
        self.target_sizes = tuple(float(t) for t in self.target_sizes)
        if self.input_size < 1 or self.in_channels < 1:
            raise ConfigError("input_size and in_channels must be positive")
        for tap, index in self.taps.items():
            if not 0 <= index < len(self.layers):
                raise ConfigError(f"Tap '{tap}' references layer {index}, but there are {len(self.layers)} layers")
        for index, spec in enumerate(self.layers):
            for ref in (spec.source, spec.add_from):
                if ref is not None and not 0 <= ref < index:
                    raise ConfigError(f"Layer {index} references layer {ref}, which does not precede it")


@dataclass
class LayerReport:
    idx: int
    kind: LayerKind
    k: int
    s: int
    p: int
    r: int
    H: int
    rf_layer: int
    rf_composed: int
    jump: Fraction
    channels: int
    name: str = ""
    branch_rfs: List[int] = field(default_factory=list)

    def as_row(self) -> Dict[str, Union[int, str]]:
        return {
            "idx": self.idx,
            "kind": self.kind.value,
            "k": self.k,
            "s": self.s,
            "p": self.p,
            "r": self.r,
            "H": self.H,
            "rf_layer": self.rf_layer,
            "rf_composed": self.rf_composed,
            "jump": str(self.jump),
        }


@dataclass
class RFReport:
    input_size: int
    layers: List[LayerReport] = field(default_factory=list)
    warnings: List[str] = field(default_factory=list)


@dataclass(frozen=True)
class TapShape:
    name: str
    layer: int
    height: int
    width: int
    channels: int
    jump: Fraction

    def __str__(self):
        return f"{self.height}x{self.width}x{self.channels}"


@dataclass
class ShapeTable:
    input: TapShape
    taps: List[TapShape] = field(default_factory=list)
    output: Optional[TapShape] = None

    def __getitem__(self, name: str) -> TapShape:
        for tap in [self.input, *self.taps]:
            if tap.name == name:
                return tap
        raise KeyError(name)


def layer_resolution(h: int, spec: LayerSpec) -> int:
    """Output side length of one layer, floor((h + 2p - RF) / s) + 1, or h·f for upsampling."""
    if spec.kind == LayerKind.UPSAMPLE:
        return h * spec.f
    k, r, p = spec.geometry()
    out = conv_output_size(h, k, spec.s, p, r)
    if out < 1:
        raise ShapeMismatchError(
            f"{spec.name or spec.kind.value}: input {h} with k={k}, s={spec.s}, p={p}, r={r} "
            f"(RF {effective_kernel(k, r)}) gives output size {out}"
        )
    return out


@dataclass
class _State:
    h: int
    rf: int
    jump: Fraction
    channels: int


def _walk(config: ArchConfig, warnings: Optional[List[str]] = None) -> Iterator[Tuple[int, LayerSpec, _State, _State]]:
    """Yield (index, spec, input state, output state) per layer."""
    states: List[_State] = []
    current = _State(config.input_size, 1, Fraction(1), config.in_channels)
    for index, spec in enumerate(config.layers):
        before = states[spec.source] if spec.source is not None else current
        h = layer_resolution(before.h, spec)
        channels = spec.channels or before.channels
        if spec.kind == LayerKind.UPSAMPLE:
            after = _State(h, before.rf, before.jump / spec.f, channels)
        else:
            k, r, p = spec.geometry()
            after = _State(h, before.rf + (effective_kernel(k, r) - 1) * before.jump, before.jump * spec.s, channels)
            remainder = (before.h + 2 * p - effective_kernel(k, r)) % spec.s
            if remainder and warnings is not None:
                warnings.append(
                    f"layer {index}: ({before.h} + 2*{p} - {effective_kernel(k, r)}) / {spec.s} is not an integer, "
                    f"{remainder} border pixel(s) dropped"
                )
        if spec.add_from is not None:
            other = states[spec.add_from]
            if (other.h, other.channels) != (after.h, after.channels):
                raise ShapeMismatchError(
                    f"layer {index}: cannot add {other.h}x{other.h}x{other.channels} (layer {spec.add_from}) "
                    f"to {after.h}x{after.h}x{after.channels}"
                )
            if other.jump != after.jump and warnings is not None:
                warnings.append(f"layer {index}: merging jumps {after.jump} and {other.jump}")
            after = _State(after.h, max(after.rf, other.rf), min(after.jump, other.jump), after.channels)
        states.append(after)
        current = after
        yield index, spec, before, after


def compose_rf(config: ArchConfig) -> RFReport:
    """Per-layer resolution, receptive field and jump, with tiny-target collapse warnings."""
    report = RFReport(config.input_size)
    collapsed = set()
    for index, spec, before, after in _walk(config, report.warnings):
        k, r, p = spec.geometry()
        report.layers.append(
            LayerReport(
                idx=index,
                kind=spec.kind,
                k=k,
                s=spec.s,
                p=p,
                r=r,
                H=after.h,
                rf_layer=spec.rf,
                rf_composed=after.rf,
                jump=after.jump,
                channels=after.channels,
                name=spec.name,
                branch_rfs=spec.branch_rfs(),
            )
        )
        for target in config.target_sizes:
            if target not in collapsed and target / after.jump < 1:
                collapsed.add(target)
                report.warnings.append(
                    f"layer {index}: a {target:g}px target collapses below one cell (jump {after.jump})"
                )
    for message in report.warnings:
        logger.warning(message)
    return report


def trace_shapes(config: ArchConfig) -> ShapeTable:
    """Symbolic spatial and channel sizes at every tap."""
    c = config.input_size
    table = ShapeTable(TapShape("input", -1, c, c, config.in_channels, Fraction(1)))
    by_layer = {index: name for name, index in config.taps.items()}
    outputs = {}
    for index, spec, _, after in _walk(config):
        outputs[index] = TapShape(by_layer.get(index, spec.name), index, after.h, after.h, after.channels, after.jump)
    for name, index in config.taps.items():
        shape = outputs[index]
        table.taps.append(TapShape(name, index, shape.height, shape.width, shape.channels, shape.jump))
    table.output = outputs[len(config.layers) - 1] if config.layers else table.input
    return table


def describe_architecture(model_cfg: ModelConfig, size: int, target_sizes: Sequence[float] = ()) -> ArchConfig:
    """The ArchConfig of the detector built from `model_cfg`, as seen by an input of side `size`."""
    c2, c4, c8, c16 = model_cfg.widths
    heads = model_cfg.head_channels
    layers: List[LayerSpec] = []
    taps: Dict[str, int] = {}

    def add(spec: LayerSpec, tap: Optional[str] = None) -> int:
        layers.append(spec)
        if tap:
            taps[tap] = len(layers) - 1
        return len(layers) - 1

    def stage(channels: int, prefix: str):
        for i in range(model_cfg.erd_depth):
            if model_cfg.use_erd:
                add(LayerSpec("conv", k=3, branches=model_cfg.dilations, channels=channels, name=f"{prefix}.{i}"))
            else:
                add(LayerSpec("conv", k=3, p=1, channels=channels, name=f"{prefix}.{i}"))

    add(LayerSpec("conv", k=3, s=2, p=1, channels=c2, name="stem.0"))
    f2 = add(LayerSpec("conv", k=3, s=2, p=1, channels=c4, name="stem.1"), "F2")
    add(LayerSpec("conv", k=3, s=2, p=1, channels=c8, name="down8"))
    stage(c8, "stage8")
    f1 = len(layers) - 1
    taps["F1"] = f1
    add(LayerSpec("conv", k=3, s=2, p=1, channels=c16, name="down16"))
    stage(c16, "stage16")
    p16 = add(LayerSpec("pool", branches=model_cfg.spp_pools, channels=c16, name="spp"), "P16")
    if model_cfg.use_todb:
        add(LayerSpec("conv", k=1, channels=c4, source=f1, name="todb.reduce"), "F1'")
        add(LayerSpec("upsample", f=2, add_from=f2, name="todb.upsample"), "F3")
        add(LayerSpec("conv", k=3, p=1, channels=heads, name="todb.fuse"), "F4")
        add(LayerSpec("conv", k=1, channels=heads, name="heads.4"), "head4")
    add(LayerSpec("conv", k=1, channels=heads, source=f1, name="heads.8"), "head8")
    add(LayerSpec("conv", k=1, channels=heads, source=p16, name="heads.16"), "head16")
    return ArchConfig(size, tuple(layers), taps, model_cfg.in_channels, tuple(target_sizes), model_cfg.name)


def arch_from_mapping(data: dict) -> ArchConfig:
    data = dict(data)
    layers = [build_dataclass(LayerSpec, spec, "layer") for spec in data.pop("layer", [])]
    taps = {}
    for tap in data.pop("tap", []):
        if set(tap) != {"name", "layer"}:
            raise ConfigError(f"[[tap]] entries need exactly 'name' and 'layer', got {sorted(tap)}")
        taps[str(tap["name"])] = int(tap["layer"])
    return build_dataclass(ArchConfig, dict(data, layers=layers, taps=taps), "arch")


def load_arch(path: Union[str, Path]) -> ArchConfig:
    config = arch_from_mapping(read_toml(path))
    logger.debug(f"Loaded {len(config.layers)} layers and {len(config.taps)} taps from {path}")
    return config


def write_report_csv(report: RFReport, stream: TextIO):
    writer = csv.DictWriter(stream, fieldnames=REPORT_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for layer in report.layers:
        writer.writerow(layer.as_row())


def format_report_table(report: RFReport) -> str:
    rows = [REPORT_COLUMNS] + [tuple(str(v) for v in layer.as_row().values()) for layer in report.layers]
    widths = [max(len(row[i]) for row in rows) for i in range(len(REPORT_COLUMNS))]
    lines = ["  ".join(value.rjust(width) for value, width in zip(row, widths)) for row in rows]
    lines.extend(f"warning: {message}" for message in report.warnings)
    return "\n".join(lines)


def format_shape_table(table: ShapeTable) -> str:
    taps = [table.input, *table.taps]
    name_width = max(len(tap.name) for tap in taps)
    lines = [f"{'tap'.ljust(name_width)}  layer  shape        stride"]
    for tap in taps:
        lines.append(f"{tap.name.ljust(name_width)}  {tap.layer:>5}  {str(tap):<11}  {tap.jump}")
    return "\n".join(lines)
