import numpy as np
import pytest

from tiny_nodule_detector import Variant, app_settings
from tiny_nodule_detector.boxes import BBox
from tiny_nodule_detector.detector import (
    ModelConfig,
    NoduleDetector,
    RawPrediction,
    TinyObjectFusion,
    decode,
    decode_batch,
    encode,
)
from tiny_nodule_detector.exceptions import ConfigError, EncodeError, ShapeMismatchError
from tiny_nodule_detector.tensor import Tensor


def test_desk_model_feature_shapes(rng):
    model = NoduleDetector(ModelConfig.desk(), seed=0)
    features = model.forward_features(rng.uniform(size=(1, 3, 64, 64)))
    assert features["F2"].shape == (1, 16, 16, 16)
    assert features["F1"].shape == (1, 32, 8, 8)
    assert features["P16"].shape == (1, 64, 4, 4)
    assert features["F1'"].shape == (1, 16, 8, 8)
    assert features["F3"].shape == (1, 16, 16, 16)
    assert features["F4"].shape == (1, 18, 16, 16)


def test_heads_follow_strides(tiny_model, rng):
    preds = tiny_model(rng.uniform(size=(2, 3, 32, 32)))
    assert [p.stride for p in preds] == [4, 8, 16]
    assert [p.tensor.shape for p in preds] == [(2, 3, 6, 8, 8), (2, 3, 6, 4, 4), (2, 3, 6, 2, 2)]
    assert all(p.image_size == 32 for p in preds)


def test_objectness_bias_starts_at_prior(tiny_model):
    prior = app_settings.OBJECTNESS_PRIOR
    for head in tiny_model.heads:
        np.testing.assert_allclose(head.bias.data[4::6], np.log(prior / (1 - prior)))


def test_rejects_bad_input_sizes(tiny_model):
    with pytest.raises(ShapeMismatchError):
        tiny_model(np.zeros((1, 3, 40, 40)))
    with pytest.raises(ShapeMismatchError):
        tiny_model(np.zeros((1, 1, 32, 32)))
    with pytest.raises(ShapeMismatchError):
        tiny_model(np.zeros((1, 3, 32, 48)))


@pytest.mark.parametrize(
    "variant, strides, pcam, erd",
    [
        (Variant.FULL, (4, 8, 16), 2, True),
        (Variant.NO_TODB, (8, 16), 2, True),
        (Variant.NO_ERD, (4, 8, 16), 2, False),
        (Variant.NO_PCAM, (4, 8, 16), 0, True),
        (Variant.BASELINE, (8, 16), 0, False),
    ],
)
def test_variants(variant, strides, pcam, erd, rng):
    config = ModelConfig.tiny().with_variant(variant)
    model = NoduleDetector(config, seed=1)
    assert model.strides == strides
    assert len(model.pcam) == pcam
    assert (model.todb is not None) == (4 in strides)
    assert all(hasattr(block, "branches") == erd for block in model.stage8 + model.stage16)
    preds = model(rng.uniform(size=(1, 3, 32, 32)))
    assert [p.stride for p in preds] == list(strides)


def test_unknown_variant_and_profile():
    with pytest.raises(ConfigError):
        ModelConfig().with_variant("no-spp")
    with pytest.raises(ConfigError):
        ModelConfig.for_profile("huge")
    assert ModelConfig.for_profile("paper-640").widths == (32, 64, 128, 256)


def test_seeded_construction_is_deterministic():
    a = NoduleDetector(ModelConfig.tiny(), seed=9).state_dict()
    b = NoduleDetector(ModelConfig.tiny(), seed=9).state_dict()
    assert a.keys() == b.keys()
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert "pcam.0.beta" in a and "pcam.1.gamma" in a


def test_tiny_object_fusion_stages(rng):
    block = TinyObjectFusion(4, 3, 6, rng=rng)
    f1, f2 = Tensor(rng.standard_normal((4, 5, 5))), Tensor(rng.standard_normal((3, 10, 10)))
    reduced, merged, fused = block.stages(f1, f2)
    assert (reduced.shape, merged.shape, fused.shape) == ((3, 5, 5), (3, 10, 10), (6, 10, 10))
    np.testing.assert_allclose(merged.data - f2.data, reduced.data.repeat(2, axis=1).repeat(2, axis=2), atol=1e-12)
    with pytest.raises(ShapeMismatchError, match="F2"):
        block(f1, Tensor(rng.standard_normal((3, 12, 12))))


def test_raw_prediction_reshapes_flat_heads():
    pred = RawPrediction(Tensor(np.zeros((1, 12, 2, 2))), stride=8, anchors=[[4, 4], [8, 8]])
    assert pred.tensor.shape == (1, 2, 6, 2, 2)
    assert pred.num_classes == 1
    with pytest.raises(ShapeMismatchError):
        RawPrediction(Tensor(np.zeros((1, 7, 2, 2))), stride=8, anchors=[[4, 4], [8, 8]])


def _single_head(logits, stride=8, anchor=(16.0, 16.0), grid=2):
    raw = np.full((1, 1, 6, grid, grid), -20.0)
    raw[0, 0, :, 1, 0] = logits
    return [RawPrediction(Tensor(raw), stride=stride, anchors=[anchor])]


def test_decode_inverts_encode():
    box = (5.0, 11.0, 8.0, 6.0)
    t = encode(box, stride=8, anchor=(16.0, 16.0), cell=(0, 1))
    dets = decode(_single_head(list(t) + [10.0, 0.0]), conf_threshold=0.5)
    assert len(dets) == 1
    got = dets[0].box
    np.testing.assert_allclose([got.cx, got.cy, got.w, got.h], np.array(box) / 16.0, atol=1e-9)
    assert dets[0].confidence == pytest.approx(1.0 / (1.0 + np.exp(-10.0)))


def test_encode_rejects_unreachable_boxes():
    with pytest.raises(EncodeError):
        encode((40.0, 4.0, 8.0, 8.0), stride=8, anchor=(8.0, 8.0), cell=(0, 0))
    with pytest.raises(EncodeError):
        encode((4.0, 4.0, 40.0, 8.0), stride=8, anchor=(8.0, 8.0), cell=(0, 0))


def test_decode_threshold_and_clamping():
    preds = _single_head([0.0, 0.0, 5.0, 5.0, 0.0, 0.0], grid=2)
    assert decode(preds, conf_threshold=0.6) == []
    (det,) = decode(preds, conf_threshold=0.5)
    x1, y1, x2, y2 = det.box.corners()
    assert min(x1, y1) >= -1e-12 and max(x2, y2) <= 1.0 + 1e-12
    with pytest.raises(ValueError):
        decode_batch(preds, conf_threshold=1.5)


def test_multiclass_confidence_uses_best_class():
    raw = np.full((1, 1, 7, 1, 1), 0.0)
    raw[0, 0, 5:, 0, 0] = [-2.0, 1.0]
    (det,) = decode([RawPrediction(Tensor(raw), stride=16, anchors=[[16.0, 16.0]])], conf_threshold=0.0)
    assert det.cls == 1
    assert det.confidence == pytest.approx(0.5 / (1.0 + np.exp(-1.0)))


def test_bbox_validation():
    with pytest.raises(ValueError):
        BBox(0.5, 0.5, 0.0, 0.1)
    assert BBox(0.5, 0.5, 0.2, 0.2).clamped() == BBox(0.5, 0.5, 0.2, 0.2)


def test_decode_inverts_encode_on_random_boxes(rng):
    checked = 0
    while checked < 300:
        stride = int(rng.choice([4, 8, 16]))
        grid = 4
        anchor = tuple(rng.uniform(4.0, 32.0, size=2))
        gx, gy = (int(v) for v in rng.integers(0, grid, size=2))
        offsets = rng.uniform(-0.4, 1.4, size=2)
        scales = rng.uniform(0.1, 1.9, size=2)
        center = (np.array([gx, gy]) + offsets) * stride
        extent = np.array(anchor) * scales**2
        size = grid * stride
        if np.any(center - extent / 2 < 0) or np.any(center + extent / 2 > size):
            continue
        box = (*center, *extent)
        raw = np.full((1, 1, 6, grid, grid), -20.0)
        raw[0, 0, :4, gy, gx] = encode(box, stride=stride, anchor=anchor, cell=(gx, gy))
        raw[0, 0, 4, gy, gx] = 10.0
        (det,) = decode([RawPrediction(Tensor(raw), stride=stride, anchors=[anchor])], conf_threshold=0.5)
        np.testing.assert_allclose([det.box.cx, det.box.cy, det.box.w, det.box.h], np.array(box) / size, atol=1e-9)
        checked += 1


def test_raising_objectness_never_removes_a_detection(rng):
    anchors = [[8.0, 8.0], [16.0, 12.0]]
    for _ in range(200):
        raw = rng.normal(scale=2.0, size=(1, 2, 6, 3, 3))
        a, gy, gx = (int(v) for v in rng.integers(0, (2, 3, 3)))
        raised = raw.copy()
        raised[0, a, 4, gy, gx] += rng.uniform(0.0, 5.0)
        before = decode([RawPrediction(Tensor(raw), stride=8, anchors=anchors)], conf_threshold=0.4)
        after = decode([RawPrediction(Tensor(raised), stride=8, anchors=anchors)], conf_threshold=0.4)
        kept = [det.box for det in after]
        assert all(det.box in kept for det in before)
        assert len(after) >= len(before)


def test_stride4_head_reads_out_the_fused_map(tiny_model, rng):
    tiny_model.eval()
    images = rng.uniform(size=(1, 3, 32, 32))
    f4 = tiny_model.forward_features(images)["F4"]
    head = tiny_model.heads[0]
    channels = tiny_model.config.head_channels
    assert head.weight.shape == (channels, channels, 1, 1)
    pred = tiny_model(images)[0]
    expected = RawPrediction(head(f4), stride=4, anchors=tiny_model.config.anchors_for(4))
    np.testing.assert_array_equal(pred.tensor.data, expected.tensor.data)
    # F4 leaves a SiLU, so it is bounded below near -0.2785
    assert f4.data.min() >= -0.2785
