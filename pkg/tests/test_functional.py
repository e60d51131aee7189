import numpy as np
import pytest

from tiny_nodule_detector.exceptions import ShapeMismatchError
from tiny_nodule_detector.functional import (
    batchnorm2d,
    concat_channels,
    conv2d,
    conv_output_size,
    effective_kernel,
    maxpool2d,
    upsample_nearest,
)
from tiny_nodule_detector.tensor import Parameter, Tensor


def conv_oracle(x, w, b, stride, padding, dilation):
    c, h, wd = x.shape
    co, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - dilation * (kh - 1) - 1) // stride + 1
    wo = (wd + 2 * padding - dilation * (kw - 1) - 1) // stride + 1
    out = np.zeros((co, ho, wo))
    for o in range(co):
        for m in range(ho):
            for n in range(wo):
                total = b[o] if b is not None else 0.0
                for ch in range(c):
                    for i in range(kh):
                        for j in range(kw):
                            total += xp[ch, stride * m + dilation * i, stride * n + dilation * j] * w[o, ch, i, j]
                out[o, m, n] = total
    return out


def test_conv2d_matches_loop_oracle_on_random_instances(rng):
    checked = 0
    while checked < 200:
        k = int(rng.choice([1, 3]))
        r = int(rng.choice([1, 2, 3, 5]))
        s = int(rng.choice([1, 2]))
        h, w = (int(v) for v in rng.integers(4, 10, size=2))
        p = int(rng.integers(0, r * (k - 1) // 2 + 2))
        if min(h, w) + 2 * p < effective_kernel(k, r):
            continue
        x = rng.standard_normal((2, h, w))
        weight = rng.standard_normal((2, 2, k, k))
        bias = rng.standard_normal(2) if checked % 2 else None
        out = conv2d(Tensor(x), Tensor(weight), None if bias is None else Tensor(bias), s, p, r)
        assert np.array_equal(out.data, conv_oracle(x, weight, bias, s, p, r))
        checked += 1


def test_undilated_conv2d_is_bit_identical_to_direct_convolution(rng):
    for _ in range(50):
        x = rng.standard_normal((3, 8, 8))
        weight = rng.standard_normal((2, 3, 3, 3))
        bias = rng.standard_normal(2)
        out = conv2d(Tensor(x), Tensor(weight), Tensor(bias), padding=1)
        assert np.array_equal(out.data, conv_oracle(x, weight, bias, 1, 1, 1))


def test_conv2d_batched_equals_per_sample(rng):
    x = rng.standard_normal((3, 2, 7, 7))
    w = Tensor(rng.standard_normal((4, 2, 3, 3)))
    batched = conv2d(Tensor(x), w, padding=2, dilation=2).data
    for n in range(3):
        np.testing.assert_allclose(batched[n], conv2d(Tensor(x[n]), w, padding=2, dilation=2).data, atol=1e-12)


def test_conv2d_rejects_empty_output_and_channel_mismatch():
    with pytest.raises(ShapeMismatchError):
        conv2d(Tensor(np.ones((1, 4, 4))), Tensor(np.ones((1, 1, 3, 3))), dilation=3)
    with pytest.raises(ShapeMismatchError):
        conv2d(Tensor(np.ones((2, 4, 4))), Tensor(np.ones((1, 3, 1, 1))))


@pytest.mark.parametrize("r, rf", [(1, 3), (2, 5), (3, 7), (5, 11)])
def test_effective_kernel(r, rf):
    assert effective_kernel(3, r) == rf


def test_conv_output_size():
    assert conv_output_size(640, 3, stride=2, padding=1) == 320
    assert conv_output_size(9, 3, padding=3, dilation=3) == 9
    assert conv_output_size(4, 3, dilation=3) < 1


def test_impulse_footprint_equals_effective_kernel():
    # gradient of the centre output w.r.t. the input covers exactly RF×RF pixels
    for r in (1, 2, 3, 5):
        x = Parameter(np.ones((1, 15, 15)))
        out = conv2d(x, Tensor(np.ones((1, 1, 3, 3))), padding=r, dilation=r)
        seed = np.zeros(out.shape)
        seed[0, 7, 7] = 1.0
        out.backward(seed)
        rows, cols = np.nonzero(x.grad[0])
        assert rows.max() - rows.min() + 1 == effective_kernel(3, r)
        assert cols.max() - cols.min() + 1 == effective_kernel(3, r)


def test_maxpool_values_and_first_index_ties():
    x = Parameter(np.ones((1, 2, 2)))
    out = maxpool2d(x, 2)
    assert out.data.reshape(-1).tolist() == [1.0]
    out.backward()
    np.testing.assert_array_equal(x.grad[0], [[1.0, 0.0], [0.0, 0.0]])


def test_maxpool_pads_with_negative_infinity():
    x = Tensor(-np.ones((1, 3, 3)))
    out = maxpool2d(x, 3, stride=1, padding=1)
    np.testing.assert_array_equal(out.data, -np.ones((1, 3, 3)))


def test_maxpool_rejects_padding_beyond_half_kernel():
    with pytest.raises(ValueError):
        maxpool2d(Tensor(np.ones((1, 4, 4))), 3, padding=2)


def test_upsample_repeats_and_sums_gradient():
    x = Parameter(np.arange(4.0).reshape(1, 2, 2))
    out = upsample_nearest(x, 3)
    assert out.shape == (1, 6, 6)
    np.testing.assert_array_equal(out.data[0, :3, :3], np.zeros((3, 3)))
    np.testing.assert_array_equal(out.data[0, 3:, 3:], np.full((3, 3), 3.0))
    out.backward()
    np.testing.assert_array_equal(x.grad, np.full((1, 2, 2), 9.0))
    with pytest.raises(ValueError):
        upsample_nearest(x, 0)


def test_concat_channels_splits_gradient():
    a, b = Parameter(np.ones((2, 3, 3))), Parameter(np.ones((1, 3, 3)))
    out = concat_channels([a, b])
    assert out.shape == (3, 3, 3)
    (out * Tensor(np.arange(3.0).reshape(3, 1, 1))).sum().backward()
    np.testing.assert_array_equal(b.grad, np.full((1, 3, 3), 2.0))
    with pytest.raises(ShapeMismatchError):
        concat_channels([a, Tensor(np.ones((1, 2, 3)))])


def test_batchnorm_training_normalizes_and_updates_running_stats(rng):
    x = rng.normal(3.0, 2.0, size=(4, 2, 5, 5))
    mean, var = np.zeros(2), np.ones(2)
    out = batchnorm2d(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), mean, var, training=True)
    np.testing.assert_allclose(out.data.mean(axis=(0, 2, 3)), 0.0, atol=1e-10)
    np.testing.assert_allclose(out.data.var(axis=(0, 2, 3)), 1.0, atol=1e-3)
    np.testing.assert_allclose(mean, 0.1 * x.mean(axis=(0, 2, 3)))
    np.testing.assert_allclose(var, 0.9 + 0.1 * x.var(axis=(0, 2, 3), ddof=1))


def test_batchnorm_eval_uses_running_stats(rng):
    x = rng.standard_normal((2, 3, 3))
    mean, var = np.array([0.5, -1.0]), np.array([4.0, 0.25])
    out = batchnorm2d(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), mean.copy(), var.copy(), training=False)
    expected = (x - mean[:, None, None]) / np.sqrt(var[:, None, None] + 1e-5)
    np.testing.assert_allclose(out.data, expected)
