"""
Synthetic CT-like scenes, the preprocessing chain, augmentation and dataset files.

A scene is a body ellipse of soft tissue around one lung ellipse of parenchyma,
crossed by vessels, with bright disk nodules drawn on top and Gaussian noise added.
Preprocessing clips Hounsfield units to [-1200, 600], maps them linearly onto 0-255
and keeps only the lung region found by morphological masking.
"""
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage

from .boxes import GroundTruth
from .exceptions import ConfigError, EmptyMaskError, ImageFormatError, LabelParseError, SceneGenerationError

logger = logging.getLogger(__name__)

HU_MIN = -1200
HU_MAX = 600
# HU window some pipelines retain before clipping
HU_WINDOW = (-1000, 400)
# -400 HU on the 8-bit scale separates air-filled lung from soft tissue
AIR_THRESHOLD = 113
# pixels of parenchyma kept between the lung boundary and any vessel or nodule
VESSEL_MARGIN = 4
NODULE_MARGIN = 5

SQUARE = np.ones((3, 3), dtype=bool)
CROSS = ndimage.generate_binary_structure(2, 1)

PathLike = Union[str, Path]


@dataclass(frozen=True)
class SceneSpec:
    """Synthetic scene parameters; ranges are inclusive (low, high) pairs and intensities are in HU."""

    size: int = 96
    nodules: Tuple[int, int] = (1, 3)
    radius: Tuple[float, float] = (2.0, 6.0)
    vessels: Tuple[int, int] = (2, 5)
    vessel_width: Tuple[float, float] = (0.8, 1.8)
    occlusion: float = 0.5
    lung_hu: Tuple[float, float] = (-920.0, -820.0)
    tissue_hu: Tuple[float, float] = (10.0, 60.0)
    vessel_hu: Tuple[float, float] = (-320.0, -120.0)
    nodule_hu: Tuple[float, float] = (-20.0, 120.0)
    outside_hu: float = -1000.0
    noise: float = 15.0
    seed: int = 0
    max_retries: int = 200

    def __post_init__(self):
        for name in ("nodules", "radius", "vessels", "vessel_width", "lung_hu", "tissue_hu", "vessel_hu", "nodule_hu"):
            low, high = getattr(self, name)
            if low > high:
                raise ConfigError(f"SceneSpec.{name} range is reversed: {(low, high)}")
        if self.size < 16:
            raise ConfigError(f"Scene size must be at least 16, got {self.size}")
        if self.radius[0] < 1:
            raise ConfigError(f"Nodule radius must be at least 1 px, got {self.radius[0]}")
        if self.nodules[0] < 0 or self.vessels[0] < 0:
            raise ConfigError("Nodule and vessel counts must be non-negative")
        if not 0.0 <= self.occlusion <= 1.0:
            raise ConfigError(f"occlusion is a probability, got {self.occlusion}")


@dataclass(eq=False)
class Sample:
    raw: np.ndarray  # int16 HU plane
    image: np.ndarray  # uint8 preprocessed plane
    truths: List[GroundTruth] = field(default_factory=list)


def _ellipse(shape: Tuple[int, int], center: Tuple[float, float], axes: Tuple[float, float]) -> np.ndarray:
    yy, xx = np.mgrid[0 : shape[0], 0 : shape[1]] + 0.5
    return ((xx - center[0]) / axes[0]) ** 2 + ((yy - center[1]) / axes[1]) ** 2 <= 1.0


def _segment(shape: Tuple[int, int], start: np.ndarray, end: np.ndarray, width: float) -> np.ndarray:
    yy, xx = np.mgrid[0 : shape[0], 0 : shape[1]] + 0.5
    d = end - start
    t = np.clip(((xx - start[0]) * d[0] + (yy - start[1]) * d[1]) / max(float(d @ d), 1e-12), 0.0, 1.0)
    return np.hypot(xx - (start[0] + t * d[0]), yy - (start[1] + t * d[1])) <= width


def _uniform(rng: np.random.Generator, bounds: Tuple[float, float]) -> float:
    return float(rng.uniform(bounds[0], bounds[1])) if bounds[1] > bounds[0] else float(bounds[0])


def generate_scene(spec: SceneSpec) -> Sample:
    """A pure function of `spec`: the seed fixes every draw."""
    rng = np.random.default_rng(spec.seed)
    s = spec.size
    shape = (s, s)
    center = (s / 2.0, s / 2.0)
    body_axes = (0.47 * s, 0.42 * s)
    lung_axes = (0.36 * s, 0.30 * s)

    plane = np.full(shape, spec.outside_hu)
    plane[_ellipse(shape, center, body_axes)] = _uniform(rng, spec.tissue_hu)
    lung = _ellipse(shape, center, lung_axes)
    plane[lung] = _uniform(rng, spec.lung_hu)
    # vessels stay clear of the lung boundary so they never split the lung region
    interior = ndimage.binary_erosion(lung, structure=SQUARE, iterations=VESSEL_MARGIN)

    count = int(rng.integers(spec.nodules[0], spec.nodules[1] + 1))
    placed: List[Tuple[float, float, float]] = []
    for _ in range(count):
        r = _uniform(rng, spec.radius)
        for _ in range(spec.max_retries):
            cx, cy = rng.uniform(center[0] - lung_axes[0], center[0] + lung_axes[0], size=2)
            reach = r + NODULE_MARGIN
            inside = ((cx - center[0]) / (lung_axes[0] - reach)) ** 2 + ((cy - center[1]) / (lung_axes[1] - reach)) ** 2
            apart = all(np.hypot(cx - x, cy - y) > r + q + 2 for x, y, q in placed)
            if lung_axes[1] > reach and inside <= 1.0 and apart:
                placed.append((float(cx), float(cy), r))
                break
        else:
            raise SceneGenerationError(
                f"Could not place nodule {len(placed) + 1} of radius {r:.2f} after {spec.max_retries} attempts"
            )

    vessel_count = int(rng.integers(spec.vessels[0], spec.vessels[1] + 1))
    for _ in range(vessel_count):
        angle = rng.uniform(0.0, 2.0 * np.pi, size=2)
        rho = np.sqrt(rng.random(2))
        ends = np.stack([np.cos(angle), np.sin(angle)], axis=1) * rho[:, None] * np.array(lung_axes) + np.array(center)
        mask = _segment(shape, ends[0], ends[1], _uniform(rng, spec.vessel_width)) & interior
        plane[mask] = np.maximum(plane[mask], _uniform(rng, spec.vessel_hu))
    for cx, cy, r in placed:
        if rng.random() < spec.occlusion:
            angle = rng.uniform(0.0, np.pi)
            direction = np.array([np.cos(angle), np.sin(angle)]) * 3.0 * r
            mask = _segment(shape, np.array([cx, cy]) - direction, np.array([cx, cy]) + direction, 0.8) & interior
            plane[mask] = np.maximum(plane[mask], _uniform(rng, spec.vessel_hu))

    truths = []
    for cx, cy, r in placed:
        disk = _ellipse(shape, (cx, cy), (r, r))
        plane[disk] = np.maximum(plane[disk], _uniform(rng, spec.nodule_hu))
        truths.append(GroundTruth(0, *(round(v / s, 6) for v in (cx, cy, 2 * r, 2 * r))))

    plane = plane + rng.normal(0.0, spec.noise, size=shape)
    raw = np.clip(np.rint(plane), np.iinfo(np.int16).min, np.iinfo(np.int16).max).astype(np.int16)
    return Sample(raw, preprocess(raw), truths)


# preprocessing


def hu_clip(x: np.ndarray, low: int = HU_MIN, high: int = HU_MAX) -> np.ndarray:
    return np.clip(x, low, high)


def normalize_255(x: np.ndarray) -> np.ndarray:
    """Affine map of [-1200, 600] onto [0, 255], rounding halves away from zero."""
    x = np.asarray(x, dtype=np.float64)
    if x.size and (x.min() < HU_MIN or x.max() > HU_MAX):
        raise ValueError(f"normalize_255 expects values in [{HU_MIN}, {HU_MAX}], clip first")
    scaled = (x - HU_MIN) * 255.0 / (HU_MAX - HU_MIN)
    return np.floor(scaled + 0.5).astype(np.uint8)


def erode(mask: np.ndarray, iterations: int = 1) -> np.ndarray:
    """3×3 erosion; pixels beyond the border count as background."""
    if iterations < 1:
        return mask.astype(bool)
    return ndimage.binary_erosion(mask, structure=SQUARE, iterations=iterations, border_value=0)


def dilate(mask: np.ndarray, iterations: int = 1) -> np.ndarray:
    if iterations < 1:
        return mask.astype(bool)
    return ndimage.binary_dilation(mask, structure=SQUARE, iterations=iterations)


def clear_border(mask: np.ndarray) -> np.ndarray:
    """Drop 4-connected components touching the image border."""
    labels, _ = ndimage.label(mask, structure=CROSS)
    edge = np.unique(np.concatenate([labels[0], labels[-1], labels[:, 0], labels[:, -1]]))
    return mask.astype(bool) & ~np.isin(labels, edge[edge > 0])


def largest_component(mask: np.ndarray) -> np.ndarray:
    """The largest 4-connected component (lowest label on ties)."""
    labels, count = ndimage.label(mask, structure=CROSS)
    if count == 0:
        raise EmptyMaskError()
    sizes = np.bincount(labels.ravel())[1:]
    return labels == int(np.argmax(sizes)) + 1


def lung_mask(
    plane: np.ndarray,
    threshold: int = AIR_THRESHOLD,
    erosions: int = 1,
    dilations: int = 2,
    refine: int = 0,
) -> np.ndarray:
    """
    threshold -> erode -> clear border -> largest component -> fill holes -> dilate
    -> optional refining erosions
    """
    foreground = erode(np.asarray(plane) < threshold, erosions)
    inside = clear_border(foreground)
    if not inside.any():
        raise EmptyMaskError(f"No air region below {threshold} away from the image border")
    mask = ndimage.binary_fill_holes(largest_component(inside))
    mask = dilate(mask, dilations)
    return erode(mask, refine) if refine else mask


def preprocess(raw: np.ndarray, hu_window: Optional[Tuple[int, int]] = None, **mask_options) -> np.ndarray:
    """Clip, normalize to 8 bits and zero everything outside the lung mask."""
    x = np.asarray(raw)
    if hu_window is not None:
        x = np.clip(x, *hu_window)
    plane = normalize_255(hu_clip(x))
    return np.where(lung_mask(plane, **mask_options), plane, 0).astype(np.uint8)


def to_input(plane: np.ndarray, channels: int = 3) -> np.ndarray:
    """8-bit plane -> channels×H×W float64 in [0, 1]."""
    x = np.asarray(plane, dtype=np.float64) / 255.0
    return np.repeat(x[None], channels, axis=0)


# augmentation


@dataclass(frozen=True)
class AugmentConfig:
    """Probabilities of each geometric transform and jitter amplitudes."""

    hflip: float = 0.5
    vflip: float = 0.5
    rot90: float = 0.5
    brightness: float = 0.1
    contrast: float = 0.1
    salt_pepper: float = 0.005


def augment(
    plane: np.ndarray, truths: Sequence[GroundTruth], cfg: AugmentConfig, rng: np.random.Generator
) -> Tuple[np.ndarray, List[GroundTruth]]:
    """
    Flips, quarter-turn rotation, brightness/contrast jitter and salt-and-pepper noise.

    Every random number is drawn whether or not the transform applies, so the stream
    consumed per sample is fixed.
    """
    image = np.asarray(plane)
    boxes = [(gt.cls, gt.cx, gt.cy, gt.w, gt.h) for gt in truths]
    do_h, do_v, do_rot = rng.random(3) < (cfg.hflip, cfg.vflip, cfg.rot90)
    turns = int(rng.integers(1, 4))
    brightness = rng.uniform(-cfg.brightness, cfg.brightness) * 255.0
    contrast = 1.0 + rng.uniform(-cfg.contrast, cfg.contrast)
    noise = rng.random(image.shape)
    salt = rng.random(image.shape) < 0.5

    if do_h:
        image = image[:, ::-1]
        boxes = [(c, 1.0 - x, y, w, h) for c, x, y, w, h in boxes]
    if do_v:
        image = image[::-1]
        boxes = [(c, x, 1.0 - y, w, h) for c, x, y, w, h in boxes]
    if do_rot:
        for _ in range(turns):
            image = np.rot90(image)
            boxes = [(c, y, 1.0 - x, h, w) for c, x, y, w, h in boxes]

    values = (image.astype(np.float64) - 127.5) * contrast + 127.5 + brightness
    values = np.clip(np.floor(values + 0.5), 0, 255)
    if cfg.salt_pepper > 0:
        hit = noise < cfg.salt_pepper
        values[hit] = np.where(salt[hit], 255.0, 0.0)
    return values.astype(np.uint8), [GroundTruth(c, x, y, w, h) for c, x, y, w, h in boxes]


# files


def write_raw(path: PathLike, plane: np.ndarray):
    plane = np.asarray(plane)
    if plane.ndim != 2:
        raise ImageFormatError(f"Raw planes are 2-D, got shape {plane.shape}")
    h, w = plane.shape
    Path(path).write_bytes(f"{w} {h}\n".encode("ascii") + plane.astype("<i2").tobytes())


def read_raw(path: PathLike) -> np.ndarray:
    data = Path(path).read_bytes()
    end = data.find(b"\n")
    if end < 0:
        raise ImageFormatError("Missing 'W H' header line", offset=0)
    try:
        w, h = (int(v) for v in data[:end].decode("ascii").split())
    except ValueError:
        raise ImageFormatError(f"Header {data[:end]!r} is not 'W H'", offset=0) from None
    if w < 1 or h < 1:
        raise ImageFormatError(f"Header declares a {w}x{h} image", offset=0)
    payload = data[end + 1 :]
    if len(payload) != 2 * w * h:
        raise ImageFormatError(f"Expected {2 * w * h} payload bytes, found {len(payload)}", offset=end + 1)
    return np.frombuffer(payload, dtype="<i2").reshape(h, w).astype(np.int16)


def write_pgm(path: PathLike, plane: np.ndarray):
    plane = np.asarray(plane)
    if plane.ndim != 2 or plane.dtype != np.uint8:
        raise ImageFormatError(f"PGM planes are 2-D uint8, got {plane.dtype} of shape {plane.shape}")
    h, w = plane.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + plane.tobytes())


def read_pgm(path: PathLike) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens: List[int] = []
    if not data.startswith(b"P5"):
        raise ImageFormatError("Not a binary PGM (missing P5 magic)", offset=0)
    pos = 2
    while len(tokens) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            pos = data.find(b"\n", pos)
            if pos < 0:
                raise ImageFormatError("Header ends inside a comment", offset=len(data))
            continue
        start = pos
        while pos < len(data) and data[pos : pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise ImageFormatError("Expected a number in the PGM header", offset=pos)
        tokens.append(int(data[start:pos]))
    w, h, maxval = tokens
    if maxval != 255 or w < 1 or h < 1:
        raise ImageFormatError(f"Unsupported PGM geometry {w}x{h} with maxval {maxval}", offset=pos)
    payload = data[pos + 1 :]
    if len(payload) != w * h:
        raise ImageFormatError(f"Expected {w * h} pixel bytes, found {len(payload)}", offset=pos + 1)
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w).copy()


def format_labels(truths: Sequence[GroundTruth]) -> str:
    return "".join(f"{gt.cls} {gt.cx:.6f} {gt.cy:.6f} {gt.w:.6f} {gt.h:.6f}\n" for gt in truths)


def parse_labels(text: str) -> List[GroundTruth]:
    truths = []
    for number, line in enumerate(text.splitlines(), start=1):
        fields = line.split()
        if not fields:
            continue
        if len(fields) != 5:
            raise LabelParseError(f"expected 'class cx cy w h', got {line!r}", line=number)
        try:
            cls = int(fields[0])
            cx, cy, w, h = (float(v) for v in fields[1:])
        except ValueError:
            raise LabelParseError(f"non-numeric field in {line!r}", line=number) from None
        if cls < 0:
            raise LabelParseError(f"negative class {cls}", line=number)
        if not all(np.isfinite(v) for v in (cx, cy, w, h)):
            raise LabelParseError(f"non-finite value in {line!r}", line=number)
        if not (0.0 <= cx <= 1.0 and 0.0 <= cy <= 1.0):
            raise LabelParseError(f"center ({cx}, {cy}) outside [0, 1]", line=number)
        if not (0.0 < w <= 1.0 and 0.0 < h <= 1.0):
            raise LabelParseError(f"width and height must lie in (0, 1], got {w}, {h}", line=number)
        truths.append(GroundTruth(cls, cx, cy, w, h))
    return truths


def write_labels(path: PathLike, truths: Sequence[GroundTruth]):
    Path(path).write_text(format_labels(truths), encoding="ascii")


def read_labels(path: PathLike) -> List[GroundTruth]:
    return parse_labels(Path(path).read_text(encoding="ascii"))


def write_sample(directory: PathLike, stem: str, sample: Sample) -> Tuple[Path, Path, Path]:
    """Write <stem>.raw, <stem>.pgm and <stem>.txt; returns the three paths."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = (directory / f"{stem}.raw", directory / f"{stem}.pgm", directory / f"{stem}.txt")
    write_raw(paths[0], sample.raw)
    write_pgm(paths[1], sample.image)
    write_labels(paths[2], sample.truths)
    return paths


def read_sample(directory: PathLike, stem: str) -> Sample:
    directory = Path(directory)
    return Sample(
        read_raw(directory / f"{stem}.raw"),
        read_pgm(directory / f"{stem}.pgm"),
        read_labels(directory / f"{stem}.txt"),
    )


def write_manifest(path: PathLike, entries: Sequence[Tuple[PathLike, PathLike]]):
    """One 'image<TAB>label' line per sample, paths relative to the manifest's directory."""
    path = Path(path)
    base = path.parent.resolve()
    lines = []
    for image, label in entries:
        lines.append("\t".join(str(Path(p).resolve().relative_to(base).as_posix()) for p in (image, label)))
    path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def read_manifest(path: PathLike) -> List[Tuple[Path, Path]]:
    path = Path(path)
    entries = []
    for number, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise ConfigError(f"{path}:{number}: expected 'image<TAB>label'")
        entries.append((path.parent / parts[0], path.parent / parts[1]))
    return entries


def scene_seeds(seed: int, count: int) -> List[int]:
    return [int(s) for s in np.random.SeedSequence(seed).generate_state(count)]


def generate_dataset(
    out_dir: PathLike, spec: SceneSpec, count: int, val_fraction: float = 0.2
) -> Tuple[List[Tuple[Path, Path]], List[Tuple[Path, Path]]]:
    """
    Write `count` scenes under out_dir/images and train/val manifests.

    The last round(count·val_fraction) scenes form the validation split.
    """
    if count < 1:
        raise ConfigError(f"Need at least one scene, got {count}")
    if not 0.0 <= val_fraction < 1.0:
        raise ConfigError(f"val_fraction must lie in [0, 1), got {val_fraction}")
    out_dir = Path(out_dir)
    entries = []
    for index, seed in enumerate(scene_seeds(spec.seed, count)):
        sample = generate_scene(replace(spec, seed=seed))
        _, pgm, labels = write_sample(out_dir / "images", f"scene_{index:04d}", sample)
        entries.append((pgm, labels))
    n_val = int(round(count * val_fraction))
    train, val = entries[: count - n_val], entries[count - n_val :]
    write_manifest(out_dir / "train.txt", train)
    write_manifest(out_dir / "val.txt", val)
    logger.info(f"Wrote {len(train)} training and {len(val)} validation scenes to {out_dir}")
    return train, val


def load_dataset(manifest: PathLike) -> List[Tuple[np.ndarray, List[GroundTruth]]]:
    """(8-bit plane, ground truths) for every manifest entry."""
    return [(read_pgm(image), read_labels(label)) for image, label in read_manifest(manifest)]
