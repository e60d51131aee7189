"""
Target assignment and the composite detection loss.

Each ground truth is assigned, on every head where some anchor is within a 4× side
ratio of it, to the anchor of best shape IoU at the cell holding its center. A box
that fits no head this way goes to the best anchor over all heads.

loss = λ_box · mean over positives (1 - IoU(decoded, truth))
     + λ_obj · Σ_heads balance_h · mean BCE(objectness, assigned)
     + λ_cls · mean over positives BCE(class logits, one-hot)   (K > 1 only)
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .boxes import GroundTruth, shape_iou
from .detector import HeadSpec, RawPrediction
from .exceptions import NonFiniteError, ShapeMismatchError
from .tensor import Tensor, bce_with_logits, maximum, minimum, relu

logger = logging.getLogger(__name__)

ANCHOR_RATIO = 4.0

Slot = Tuple[int, int, int, int]


@dataclass
class HeadTargets:
    """Positive slots (image, anchor, row, column) of one head with their pixel boxes and classes."""

    batch: int
    anchors: int
    grid: int
    slots: Dict[Slot, Tuple[np.ndarray, int]] = field(default_factory=dict)

    @classmethod
    def empty(cls, batch: int, anchors: int, grid: int) -> "HeadTargets":
        return cls(batch, anchors, grid)

    def add(self, n: int, a: int, gy: int, gx: int, box: np.ndarray, cls: int = 0):
        """Mark a slot positive; a later truth on the same slot replaces the earlier one."""
        if not (0 <= n < self.batch and 0 <= a < self.anchors and 0 <= gy < self.grid and 0 <= gx < self.grid):
            raise ShapeMismatchError(f"Slot {(n, a, gy, gx)} is outside a {self.batch}×{self.anchors}×{self.grid}² head")
        self.slots[(n, a, gy, gx)] = (np.asarray(box, dtype=np.float64).reshape(4), int(cls))

    @property
    def num_positives(self) -> int:
        return len(self.slots)

    def objectness(self) -> np.ndarray:
        target = np.zeros((self.batch, self.anchors, self.grid, self.grid))
        for slot in self.slots:
            target[slot] = 1.0
        return target

    def indices(self) -> Tuple[np.ndarray, ...]:
        slots = np.array(list(self.slots), dtype=int).reshape(-1, 4)
        return tuple(slots[:, i] for i in range(4))

    def boxes(self) -> np.ndarray:
        return np.array([box for box, _ in self.slots.values()]).reshape(-1, 4)

    def classes(self) -> np.ndarray:
        return np.array([cls for _, cls in self.slots.values()], dtype=int)


@dataclass(frozen=True)
class LossConfig:
    box_weight: float = 5.0
    obj_weight: float = 1.0
    cls_weight: float = 0.5
    # per-head objectness weights; None weighs every head 1
    balance: Optional[Tuple[float, ...]] = None


@dataclass
class LossResult:
    total: Tensor
    box: float
    obj: float
    cls: float = 0.0


def _ratio_ok(wh: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    ratio = np.maximum(wh[None, :] / anchors, anchors / wh[None, :]).max(axis=1)
    return ratio <= ANCHOR_RATIO


def assign_targets(
    truths: Sequence[Sequence[GroundTruth]], head_specs: Sequence[HeadSpec], image_size: int
) -> List[HeadTargets]:
    """Per-head targets for a batch of images; no ground truth is ever dropped."""
    targets = [HeadTargets.empty(len(truths), len(spec.anchors), spec.grid) for spec in head_specs]
    for n, image_truths in enumerate(truths):
        for gt in image_truths:
            box = np.array([gt.cx, gt.cy, gt.w, gt.h]) * image_size
            wh = box[2:]
            assigned = False
            for head, spec in zip(targets, head_specs):
                admissible = _ratio_ok(wh, spec.anchors)
                if not admissible.any():
                    continue
                scores = np.where(admissible, shape_iou(wh, spec.anchors), -1.0)
                _place(head, spec, n, int(np.argmax(scores)), box, gt.cls)
                assigned = True
            if not assigned:
                best = [(shape_iou(wh, spec.anchors).max(), h) for h, spec in enumerate(head_specs)]
                _, h = max(best, key=lambda item: (item[0], -item[1]))
                spec = head_specs[h]
                _place(targets[h], spec, n, int(np.argmax(shape_iou(wh, spec.anchors))), box, gt.cls)
                logger.debug(f"Box {box.round(2)} fits no anchor within ratio {ANCHOR_RATIO}, using stride {spec.stride}")
    return targets


def _place(head: HeadTargets, spec: HeadSpec, n: int, a: int, box: np.ndarray, cls: int):
    gx = min(int(box[0] // spec.stride), spec.grid - 1)
    gy = min(int(box[1] // spec.stride), spec.grid - 1)
    head.add(n, a, gy, gx, box, cls)


def box_iou(pred: Sequence[Tensor], truth: np.ndarray) -> Tensor:
    """Differentiable IoU of predicted (cx, cy, w, h) columns against fixed (P, 4) pixel boxes."""
    cx, cy, w, h = pred
    tx1, ty1 = truth[:, 0] - truth[:, 2] / 2.0, truth[:, 1] - truth[:, 3] / 2.0
    tx2, ty2 = truth[:, 0] + truth[:, 2] / 2.0, truth[:, 1] + truth[:, 3] / 2.0
    inter_w = relu(minimum(cx + w * 0.5, tx2) - maximum(cx - w * 0.5, tx1))
    inter_h = relu(minimum(cy + h * 0.5, ty2) - maximum(cy - h * 0.5, ty1))
    inter = inter_w * inter_h
    union = w * h + truth[:, 2] * truth[:, 3] - inter
    return inter / union


def _decoded_positives(pred: RawPrediction, targets: HeadTargets) -> Tuple[Tensor, Sequence[Tensor]]:
    n, a, gy, gx = targets.indices()
    rows = pred.tensor[n, a, :, gy, gx]  # (P, 5+K)
    s = rows.sigmoid()
    cx = (s[:, 0] * 2.0 - 0.5 + gx.astype(np.float64)) * pred.stride
    cy = (s[:, 1] * 2.0 - 0.5 + gy.astype(np.float64)) * pred.stride
    w = (s[:, 2] * 2.0) * (s[:, 2] * 2.0) * pred.anchors[a, 0]
    h = (s[:, 3] * 2.0) * (s[:, 3] * 2.0) * pred.anchors[a, 1]
    return rows, (cx, cy, w, h)


def detection_loss(preds: Sequence[RawPrediction], targets: Sequence[HeadTargets], cfg: LossConfig) -> LossResult:
    if len(preds) != len(targets):
        raise ShapeMismatchError(f"{len(preds)} heads but {len(targets)} target sets")
    balance = cfg.balance or (1.0,) * len(preds)
    if len(balance) != len(preds):
        raise ShapeMismatchError(f"{len(balance)} balance weights for {len(preds)} heads")

    obj_total: Optional[Tensor] = None
    box_terms: List[Tensor] = []
    cls_terms: List[Tensor] = []
    positives = 0
    for pred, target, weight in zip(preds, targets, balance):
        expected = (pred.batch, len(pred.anchors), pred.grid)
        if (target.batch, target.anchors, target.grid) != expected:
            raise ShapeMismatchError(f"Targets {target.batch}×{target.anchors}×{target.grid} vs head {expected}")
        obj_logits = pred.tensor[:, :, 4]
        term = bce_with_logits(obj_logits, target.objectness()).mean() * weight
        obj_total = term if obj_total is None else obj_total + term
        if not target.num_positives:
            continue
        positives += target.num_positives
        rows, decoded = _decoded_positives(pred, target)
        box_terms.append((1.0 - box_iou(decoded, target.boxes())).sum())
        if pred.num_classes > 1:
            onehot = np.eye(pred.num_classes)[target.classes()]
            cls_terms.append(bce_with_logits(rows[:, 5:], onehot).mean(axis=1).sum())

    obj_loss = obj_total * cfg.obj_weight
    total = obj_loss
    box_value = cls_value = 0.0
    if box_terms:
        box_loss = _sum(box_terms) * (cfg.box_weight / positives)
        box_value = box_loss.item()
        total = total + box_loss
    if cls_terms:
        cls_loss = _sum(cls_terms) * (cfg.cls_weight / positives)
        cls_value = cls_loss.item()
        total = total + cls_loss
    if not np.isfinite(total.data).all():
        raise NonFiniteError(f"Detection loss is not finite (box {box_value}, obj {obj_loss.item()})")
    return LossResult(total, box_value, obj_loss.item(), cls_value)


def _sum(terms: Sequence[Tensor]) -> Tensor:
    total = terms[0]
    for term in terms[1:]:
        total = total + term
    return total
