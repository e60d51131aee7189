"""
Training loop, batched inference and dataset evaluation.

Training is deterministic given `TrainConfig.seed`: the shuffle order and the
augmentation draws come from a single generator seeded with it, and the model
is initialized from the same seed by the caller.
"""
import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from . import app_settings
from .boxes import Detection, GroundTruth
from .checkpoint import save_checkpoint
from .data import AugmentConfig, augment, to_input
from .detector import NoduleDetector, decode_batch
from .exceptions import ConfigError, NonFiniteError, TrainingDivergedError
from .loss import LossConfig, LossResult, assign_targets, detection_loss
from .metrics import COCO_THRESHOLDS, Metrics, evaluate, nms, write_metrics_csv
from .optim import SGD
from .tensor import no_grad

logger = logging.getLogger(__name__)

Dataset = Sequence[Tuple[np.ndarray, Sequence[GroundTruth]]]

LOG_COLUMNS = ("epoch", "loss_box", "loss_obj", "precision", "recall", "map50")
CHECKPOINT_NAME = "last.msdt"


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.01
    momentum: float = 0.937
    batch_size: int = 8
    epochs: int = 40
    box_weight: float = 5.0
    obj_weight: float = 1.0
    # IoU at which a validation detection counts as a hit in the epoch log
    iou_match: float = 0.5
    seed: int = 0
    augment: bool = True

    def __post_init__(self):
        if self.lr < 0:
            raise ConfigError(f"lr must be non-negative, got {self.lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("batch_size and epochs must be positive")
        if not 0.0 < self.iou_match <= 1.0:
            raise ConfigError(f"iou_match must lie in (0, 1], got {self.iou_match}")

    def loss_config(self, model: NoduleDetector) -> LossConfig:
        return LossConfig(
            box_weight=self.box_weight,
            obj_weight=self.obj_weight,
            balance=model.config.balance_for(model.strides),
        )


@dataclass(frozen=True)
class EvalConfig:
    conf_threshold: float = 0.001
    iou_nms: float = 0.45
    score_threshold: float = 0.25
    iou_thresholds: Tuple[float, ...] = COCO_THRESHOLDS
    max_detections: int = app_settings.MAX_DETECTIONS
    batch_size: int = 8

    def __post_init__(self):
        for name in ("conf_threshold", "iou_nms", "score_threshold"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {value}")
        if not self.iou_thresholds or not all(0.0 < t <= 1.0 for t in self.iou_thresholds):
            raise ConfigError(f"iou_thresholds must be non-empty values in (0, 1], got {self.iou_thresholds}")
        if self.max_detections < 1 or self.batch_size < 1:
            raise ConfigError("max_detections and batch_size must be positive")


@dataclass
class EpochLog:
    epoch: int
    loss_box: float
    loss_obj: float
    precision: float
    recall: float
    map50: float

    def as_row(self) -> List[str]:
        return [str(self.epoch)] + [
            f"{v:.6f}" for v in (self.loss_box, self.loss_obj, self.precision, self.recall, self.map50)
        ]


@dataclass
class TrainResult:
    checkpoint: Path
    metrics: Metrics
    history: List[EpochLog] = field(default_factory=list)


def stack_images(planes: Sequence[np.ndarray], channels: int) -> np.ndarray:
    return np.stack([to_input(p, channels) for p in planes])


def make_batch(
    dataset: Dataset,
    indices: Sequence[int],
    channels: int,
    augment_cfg: Optional[AugmentConfig] = None,
    rng: Optional[np.random.Generator] = None,
) -> Tuple[np.ndarray, List[List[GroundTruth]]]:
    """N×C×H×W inputs and truths for `indices`, augmented in index order when a config is given."""
    planes, truths = [], []
    for i in indices:
        plane, image_truths = dataset[i]
        if augment_cfg is not None:
            plane, image_truths = augment(plane, image_truths, augment_cfg, rng)
        planes.append(plane)
        truths.append(list(image_truths))
    return stack_images(planes, channels), truths


def train_step(
    model: NoduleDetector,
    optimizer: SGD,
    images: np.ndarray,
    truths: Sequence[Sequence[GroundTruth]],
    loss_cfg: LossConfig,
) -> LossResult:
    model.train()
    preds = model(images)
    targets = assign_targets(truths, model.head_specs(images.shape[-1]), images.shape[-1])
    result = detection_loss(preds, targets, loss_cfg)
    optimizer.zero_grad()
    result.total.backward()
    optimizer.step()
    return result


def _suppress(dets: List[Detection], cfg: EvalConfig) -> List[Detection]:
    return nms(dets, cfg.iou_nms, app_settings.NMS_MAX_CANDIDATES)[: cfg.max_detections]


def predict(model: NoduleDetector, images: np.ndarray, cfg: EvalConfig = EvalConfig()) -> List[List[Detection]]:
    """Post-NMS detections per image for an N×C×H×W batch."""
    model.eval()
    with no_grad():
        preds = model(images)
    return [_suppress(dets, cfg) for dets in decode_batch(preds, cfg.conf_threshold)]


def predict_dataset(model: NoduleDetector, dataset: Dataset, cfg: EvalConfig = EvalConfig()) -> List[List[Detection]]:
    detections = []
    for start in range(0, len(dataset), cfg.batch_size):
        indices = range(start, min(start + cfg.batch_size, len(dataset)))
        images, _ = make_batch(dataset, indices, model.config.in_channels)
        detections.extend(predict(model, images, cfg))
    return detections


def evaluate_model(model: NoduleDetector, dataset: Dataset, cfg: EvalConfig = EvalConfig()) -> Metrics:
    detections = predict_dataset(model, dataset, cfg)
    return evaluate(detections, [truths for _, truths in dataset], cfg.iou_thresholds, cfg.score_threshold)


def write_train_log(path: Union[str, Path], history: Sequence[EpochLog]):
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(LOG_COLUMNS)
        for entry in history:
            writer.writerow(entry.as_row())


def train(
    model: NoduleDetector,
    train_set: Dataset,
    val_set: Dataset,
    cfg: TrainConfig,
    out_dir: Union[str, Path],
    augment_cfg: AugmentConfig = AugmentConfig(),
    eval_cfg: EvalConfig = EvalConfig(),
) -> TrainResult:
    """
    Run `cfg.epochs` epochs of SGD, writing last.msdt, train_log.csv and metrics.csv
    under `out_dir`.

    The checkpoint is replaced only after an epoch completes, so a diverging run
    leaves the last good one behind.
    """
    if not train_set:
        raise ConfigError("Training set is empty")
    if not val_set:
        logger.warning("Validation split is empty, evaluating on the training set")
        val_set = train_set
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    checkpoint = out_dir / CHECKPOINT_NAME

    rng = np.random.default_rng(cfg.seed)
    optimizer = SGD(model.parameters(), lr=cfg.lr, momentum=cfg.momentum)
    loss_cfg = cfg.loss_config(model)
    epoch_eval = EvalConfig(
        conf_threshold=eval_cfg.conf_threshold,
        iou_nms=eval_cfg.iou_nms,
        score_threshold=eval_cfg.score_threshold,
        iou_thresholds=(cfg.iou_match,),
        max_detections=eval_cfg.max_detections,
        batch_size=eval_cfg.batch_size,
    )
    history: List[EpochLog] = []
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(train_set))
        box_losses, obj_losses = [], []
        for step, start in enumerate(range(0, len(order), cfg.batch_size)):
            images, truths = make_batch(
                train_set,
                order[start : start + cfg.batch_size],
                model.config.in_channels,
                augment_cfg if cfg.augment else None,
                rng,
            )
            try:
                result = train_step(model, optimizer, images, truths, loss_cfg)
            except NonFiniteError as error:
                kept = checkpoint if checkpoint.exists() else None
                raise TrainingDivergedError(
                    f"Loss diverged at epoch {epoch}, step {step}: {error.message}; last good checkpoint: {kept}"
                ) from error
            box_losses.append(result.box)
            obj_losses.append(result.obj)

        save_checkpoint(checkpoint, model)
        metrics = evaluate_model(model, val_set, epoch_eval)
        entry = EpochLog(
            epoch,
            float(np.mean(box_losses)),
            float(np.mean(obj_losses)),
            metrics.precision,
            metrics.recall,
            metrics.ap[cfg.iou_match],
        )
        history.append(entry)
        write_train_log(out_dir / "train_log.csv", history)
        logger.info(
            f"Epoch {epoch}/{cfg.epochs}: box {entry.loss_box:.4f}, obj {entry.loss_obj:.4f}, "
            f"P {entry.precision:.3f}, R {entry.recall:.3f}, mAP@{cfg.iou_match} {entry.map50:.3f}"
        )

    metrics = evaluate_model(model, val_set, eval_cfg)
    with open(out_dir / "metrics.csv", "w", newline="") as handle:
        write_metrics_csv(metrics, handle)
    logger.info(f"Finished training: mAP@0.5 {metrics.map50:.3f}, mAP {metrics.map:.3f}")
    return TrainResult(checkpoint, metrics, history)
