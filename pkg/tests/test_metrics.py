import io
import logging
import math

import numpy as np
import pytest

from tiny_nodule_detector.boxes import BBox, Detection, GroundTruth, iou, iou_matrix
from tiny_nodule_detector.metrics import (
    COCO_THRESHOLDS,
    average_precision,
    evaluate,
    format_metrics_table,
    nms,
    write_metrics_csv,
)


def _det(cx, cy, w, h, conf, cls=0):
    return Detection(BBox(cx, cy, w, h), conf, cls)


def _gt(cx, cy, w, h, cls=0):
    return GroundTruth(cls, cx, cy, w, h)


def _random_box(rng):
    w, h = rng.uniform(0.05, 0.4, size=2)
    cx, cy = rng.uniform(0.0, 1.0, size=2)
    return float(cx), float(cy), float(w), float(h)


def nms_oracle(dets, threshold):
    kept = []
    for i in sorted(range(len(dets)), key=lambda i: (-dets[i].confidence, i)):
        if all(iou(dets[i].box, k.box) <= threshold for k in kept if k.cls == dets[i].cls):
            kept.append(dets[i])
    return kept


def ap_oracle(dets, truths, threshold):
    """Walk the ranked list, match greedily, and sum precision envelopes at every true positive."""
    ranked = sorted(
        ((d.confidence, image, index, d) for image, ds in enumerate(dets) for index, d in enumerate(ds)),
        key=lambda item: (-item[0], item[1], item[2]),
    )
    matched = set()
    hits = []
    for _, image, _, d in ranked:
        best, best_iou = None, threshold
        for j, gt in enumerate(truths[image]):
            value = iou(d.box, gt.box)
            if (image, j) not in matched and value >= best_iou and (best is None or value > best_iou):
                best, best_iou = j, value
        if best is not None:
            matched.add((image, best))
        hits.append(best is not None)
    n_truth = sum(len(ts) for ts in truths)
    precisions = [sum(hits[: k + 1]) / (k + 1) for k in range(len(hits))]
    return sum(max(precisions[k:]) for k in range(len(hits)) if hits[k]) / n_truth


def test_iou_examples():
    box = BBox(0.3, 0.4, 0.2, 0.1)
    assert iou(box, box) == pytest.approx(1.0)
    assert iou(box, BBox(0.8, 0.8, 0.1, 0.1)) == 0.0
    assert iou(BBox(0.5, 0.5, 0.2, 0.2), BBox(0.6, 0.5, 0.2, 0.2)) == pytest.approx(1.0 / 3.0)
    matrix = iou_matrix(np.array([[0.5, 0.5, 0.2, 0.2]]), np.array([[0.6, 0.5, 0.2, 0.2], [0.5, 0.5, 0.2, 0.2]]))
    np.testing.assert_allclose(matrix, [[1.0 / 3.0, 1.0]])


def test_nms_keeps_the_more_confident_of_an_overlapping_pair():
    low, high = _det(0.55, 0.5, 0.2, 0.2, 0.6), _det(0.5, 0.5, 0.2, 0.2, 0.9)
    assert iou(low.box, high.box) == pytest.approx(0.6)
    assert nms([low, high], 0.5) == [high]
    assert nms([low, high], 0.7) == [high, low]


def test_nms_keeps_disjoint_detections_in_confidence_order():
    dets = [_det(0.1, 0.1, 0.1, 0.1, 0.3), _det(0.5, 0.5, 0.1, 0.1, 0.8), _det(0.9, 0.9, 0.1, 0.1, 0.5)]
    assert nms(dets, 0.45) == [dets[1], dets[2], dets[0]]
    assert nms(dets, 0.45, max_candidates=2) == [dets[1], dets[2]]


def test_nms_is_per_class_and_breaks_ties_by_position():
    a, b = _det(0.5, 0.5, 0.2, 0.2, 0.7, cls=0), _det(0.5, 0.5, 0.2, 0.2, 0.7, cls=1)
    assert nms([a, b], 0.45) == [a, b]
    c = _det(0.5, 0.5, 0.2, 0.2, 0.7, cls=0)
    assert nms([c, a], 0.45)[0] is c
    assert nms([], 0.45) == []
    with pytest.raises(ValueError):
        nms([a], 1.5)


def test_nms_matches_exhaustive_oracle(rng):
    for _ in range(200):
        dets = [_det(*_random_box(rng), float(rng.uniform()), int(rng.integers(0, 2))) for _ in range(20)]
        threshold = float(rng.choice([0.3, 0.45, 0.6]))
        kept = nms(dets, threshold)
        assert kept == nms_oracle(dets, threshold)
        shuffled = [dets[i] for i in rng.permutation(len(dets))]
        assert nms(shuffled, threshold) == kept


@pytest.mark.parametrize(
    "flags, n_truth, expected",
    [
        ([True], 1, 1.0),
        ([False, True], 1, 0.5),
        ([True, False, True], 2, 1.0 * 0.5 + 2.0 / 3.0 * 0.5),
        ([False, False], 2, 0.0),
        ([], 3, 0.0),
        ([], 0, 1.0),
        ([False], 0, 0.0),
    ],
)
def test_average_precision_examples(flags, n_truth, expected):
    assert average_precision(flags, n_truth) == pytest.approx(expected)


def test_single_true_positive_is_perfect():
    metrics = evaluate([[_det(0.5, 0.5, 0.1, 0.1, 0.9)]], [[_gt(0.5, 0.5, 0.1, 0.1)]])
    assert (metrics.precision, metrics.recall, metrics.f1, metrics.ap[0.5]) == (1.0, 1.0, 1.0, 1.0)
    assert metrics.map50 == metrics.map == 1.0


def test_false_positive_ranked_first_halves_ap():
    dets = [[_det(0.1, 0.1, 0.1, 0.1, 0.9), _det(0.5, 0.5, 0.1, 0.1, 0.8)]]
    metrics = evaluate(dets, [[_gt(0.5, 0.5, 0.1, 0.1)]])
    assert metrics.ap[0.5] == pytest.approx(0.5)
    assert metrics.precision == pytest.approx(0.5)
    assert metrics.recall == 1.0
    assert metrics.f1 == pytest.approx(2.0 / 3.0)


def test_score_threshold_sets_the_operating_point():
    dets = [[_det(0.5, 0.5, 0.1, 0.1, 0.2)]]
    metrics = evaluate(dets, [[_gt(0.5, 0.5, 0.1, 0.1)]], score_threshold=0.25)
    assert (metrics.precision, metrics.recall, metrics.f1) == (0.0, 0.0, 0.0)
    assert metrics.ap[0.5] == 1.0


def test_ap_matches_ranked_list_oracle(rng):
    checked = 0
    while checked < 200:
        truths, dets = [], []
        for _ in range(int(rng.integers(1, 6))):
            image_truths = [_gt(*_random_box(rng)) for _ in range(int(rng.integers(0, 7)))]
            image_dets = []
            for gt in image_truths:
                if rng.uniform() < 0.7:
                    jitter = rng.normal(0.0, 0.02, size=2)
                    image_dets.append(_det(gt.cx + jitter[0], gt.cy + jitter[1], gt.w, gt.h, float(rng.uniform())))
            image_dets += [_det(*_random_box(rng), float(rng.uniform())) for _ in range(int(rng.integers(0, 3)))]
            truths.append(image_truths)
            dets.append(image_dets)
        if not any(truths):
            continue
        for threshold in (0.5, 0.75):
            got = evaluate(dets, truths, iou_thresholds=(threshold,)).ap[threshold]
            assert got == pytest.approx(ap_oracle(dets, truths, threshold), abs=1e-12)
        checked += 1


def test_evaluate_is_invariant_to_image_and_detection_order(rng):
    truths = [[_gt(*_random_box(rng)) for _ in range(3)] for _ in range(4)]
    dets = [[_det(gt.cx, gt.cy, gt.w * 1.1, gt.h, float(rng.uniform())) for gt in image] for image in truths]
    dets[0].append(_det(0.5, 0.5, 0.3, 0.3, 0.95))
    reference = evaluate(dets, truths, COCO_THRESHOLDS)
    order = rng.permutation(4)
    permuted = evaluate([dets[i][::-1] for i in order], [truths[i] for i in order], COCO_THRESHOLDS)
    assert permuted.ap == pytest.approx(reference.ap)
    assert (permuted.precision, permuted.recall) == (reference.precision, reference.recall)


def test_true_positive_above_all_false_positives_never_lowers_ap():
    truths = [[_gt(0.2, 0.2, 0.1, 0.1), _gt(0.7, 0.7, 0.1, 0.1)]]
    dets = [[_det(0.5, 0.2, 0.1, 0.1, 0.6), _det(0.2, 0.2, 0.1, 0.1, 0.5)]]
    before = evaluate(dets, truths).ap[0.5]
    after = evaluate([dets[0] + [_det(0.7, 0.7, 0.1, 0.1, 0.7)]], truths).ap[0.5]
    assert after >= before
    assert after == pytest.approx(0.5 + 0.5 * 2.0 / 3.0)


def test_zero_ground_truth_conventions():
    empty = evaluate([[], []], [[], []])
    assert (empty.precision, empty.recall, empty.f1, empty.map) == (1.0, 1.0, 1.0, 1.0)
    spurious = evaluate([[_det(0.5, 0.5, 0.1, 0.1, 0.9)]], [[]])
    assert (spurious.precision, spurious.recall, spurious.map) == (0.0, 1.0, 0.0)


def test_coco_thresholds_average_into_map():
    truths = [[_gt(0.5, 0.5, 0.2, 0.2)]]
    # IoU 5/6: a hit up to the 0.8 threshold, a miss above
    dets = [[_det(0.5, 0.5, 0.2, 0.24, 0.9)]]
    metrics = evaluate(dets, truths, COCO_THRESHOLDS)
    assert COCO_THRESHOLDS == (0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95)
    assert [metrics.ap[t] for t in COCO_THRESHOLDS] == [1.0] * 7 + [0.0] * 3
    assert metrics.map == pytest.approx(0.7)
    assert metrics.map50 == 1.0


def test_size_buckets_split_truth_areas_into_terciles():
    truths = [[_gt(0.2, 0.2, 0.05, 0.05)], [_gt(0.5, 0.5, 0.1, 0.1)], [_gt(0.7, 0.7, 0.2, 0.2)]]
    found_large = [[], [], [_det(0.7, 0.7, 0.2, 0.2, 0.9)]]
    metrics = evaluate(found_large, truths)
    assert (metrics.ap_small, metrics.ap_medium, metrics.ap_large) == (0.0, 0.0, 1.0)
    everything = evaluate([[_det(gt.cx, gt.cy, gt.w, gt.h, 0.9) for gt in image] for image in truths], truths)
    assert (everything.ap_small, everything.ap_medium, everything.ap_large) == (1.0, 1.0, 1.0)


def test_unmatched_detection_outside_a_bucket_is_ignored():
    truths = [[_gt(0.2, 0.2, 0.05, 0.05)], [_gt(0.5, 0.5, 0.1, 0.1)], [_gt(0.7, 0.7, 0.2, 0.2)]]
    dets = [[_det(0.2, 0.2, 0.05, 0.05, 0.5), _det(0.8, 0.2, 0.3, 0.3, 0.9)], [], []]
    metrics = evaluate(dets, truths)
    assert metrics.ap_small == 1.0
    assert metrics.ap[0.5] < 1.0


def test_evaluate_validates_inputs():
    with pytest.raises(ValueError):
        evaluate([[]], [[], []])
    with pytest.raises(ValueError):
        evaluate([[]], [[_gt(0.5, 0.5, 0.1, 0.1)]], iou_thresholds=())


def test_metrics_report_formats():
    metrics = evaluate([[_det(0.5, 0.5, 0.1, 0.1, 0.9)]], [[_gt(0.5, 0.5, 0.1, 0.1)]])
    stream = io.StringIO()
    write_metrics_csv(metrics, stream)
    lines = stream.getvalue().splitlines()
    assert lines[:2] == ["metric,value", "precision,1.000000"]
    assert "ap@0.50,1.000000" in lines
    table = format_metrics_table(metrics)
    assert table.splitlines()[0].startswith("precision")
    assert not math.isnan(metrics.ap_small)


def test_nms_keeps_every_disjoint_detection_beyond_the_candidate_cap(rng, caplog):
    side = 60
    dets = [
        _det((col + 0.5) / side, (row + 0.5) / side, 0.01, 0.01, float(rng.uniform()))
        for row in range(side)
        for col in range(side)
    ]
    with caplog.at_level(logging.WARNING, logger="tiny_nodule_detector.metrics"):
        kept = nms(dets, 0.45)
    assert len(kept) == side * side
    assert "candidates" not in caplog.text
    assert len(nms(dets, 0.45, max_candidates=3000)) == 3000
