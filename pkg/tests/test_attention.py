import numpy as np
import pytest

from tiny_nodule_detector import AttentionFusion
from tiny_nodule_detector.attention import ChannelAttention, PositionAttention, PositionChannelAttention
from tiny_nodule_detector.tensor import Tensor, matmul


def test_zero_scales_return_input_bit_exactly(rng):
    position = PositionAttention(8, rng=rng)
    channel = ChannelAttention()
    for _ in range(100):
        shape = (8, *rng.integers(1, 6, size=2))
        x = Tensor(rng.standard_normal(shape) * 10.0)
        assert np.array_equal(position(x).data, x.data)
        assert np.array_equal(channel(x).data, x.data)


def test_attention_maps_are_row_stochastic(rng):
    x = Tensor(rng.standard_normal((4, 3, 5)))
    u = PositionAttention(4, reduction=2, rng=rng).attention_map(x)
    z = ChannelAttention().attention_map(x)
    assert u.shape == (1, 15, 15)
    assert z.shape == (1, 4, 4)
    np.testing.assert_allclose(u.data.sum(axis=-1), 1.0)
    np.testing.assert_allclose(z.data.sum(axis=-1), 1.0)


def test_channel_attention_matches_direct_formula(rng):
    x = rng.standard_normal((3, 2, 2))
    module = ChannelAttention()
    module.gamma.data[...] = 0.7
    flat = x.reshape(3, 4)
    logits = flat @ flat.T
    z = np.exp(logits - logits.max(axis=1, keepdims=True))
    z /= z.sum(axis=1, keepdims=True)
    expected = 0.7 * (z @ flat).reshape(x.shape) + x
    np.testing.assert_allclose(module(Tensor(x)).data, expected, atol=1e-12)


def test_position_attention_matches_direct_formula(rng):
    x = rng.standard_normal((4, 2, 3))
    module = PositionAttention(4, reduction=2, rng=rng)
    module.beta.data[...] = -0.4
    flat = x.reshape(4, 6)

    def project(conv):
        return conv.weight.data.reshape(conv.weight.shape[0], -1) @ flat + conv.bias.data[:, None]

    r, s, t = project(module.query), project(module.key), project(module.value)
    logits = s.T @ r
    u = np.exp(logits - logits.max(axis=1, keepdims=True))
    u /= u.sum(axis=1, keepdims=True)
    expected = -0.4 * (t @ u.T).reshape(x.shape) + x
    np.testing.assert_allclose(module(Tensor(x)).data, expected, atol=1e-12)


def test_batched_input_matches_per_sample(rng):
    module = PositionChannelAttention(4, reduction=2, rng=rng)
    module.beta.data[...] = 0.3
    module.gamma.data[...] = 0.2
    x = rng.standard_normal((2, 4, 3, 3))
    batched = module(Tensor(x)).data
    for n in range(2):
        np.testing.assert_allclose(batched[n], module(Tensor(x[n])).data, atol=1e-12)


@pytest.mark.parametrize("fusion", list(AttentionFusion))
def test_fusion_modes(rng, fusion):
    module = PositionChannelAttention(4, reduction=2, fusion=fusion, rng=rng)
    x = Tensor(rng.standard_normal((4, 3, 3)))
    out = module(x).data
    # with zero scales the sum doubles the input and the sequential form is the identity
    expected = 2.0 * x.data if fusion == AttentionFusion.SUM else x.data
    np.testing.assert_allclose(out, expected)


def test_scale_parameters_are_named_for_checkpoints(rng):
    names = [name for name, _ in PositionChannelAttention(8, rng=rng).named_parameters("pcam.0.")]
    assert names[:2] == ["pcam.0.beta", "pcam.0.gamma"]
    assert len(names) == len(set(names)) == 8


def test_scales_receive_gradients(rng):
    module = PositionChannelAttention(4, reduction=2, rng=rng)
    x = Tensor(rng.standard_normal((4, 3, 3)))
    module(x).sum().backward()
    assert module.beta.grad is not None and module.gamma.grad is not None
    assert module.beta.grad[0] != 0.0


def test_beta_gradient_at_zero_is_the_attention_aggregate(rng):
    module = PositionAttention(8, reduction=4, rng=rng)
    q = Tensor(rng.standard_normal((8, 4, 5)))
    seed = rng.standard_normal((8, 4, 5))
    module(q).backward(seed)

    u = module.attention_map(q)
    t = module.value(q).reshape(1, 8, 20)
    aggregate = matmul(t, u.transpose(0, 2, 1)).reshape(8, 4, 5).data
    expected = np.sum(seed * aggregate)
    np.testing.assert_allclose(module.beta.grad[0], expected, rtol=1e-10)

    step = 1e-5
    totals = []
    for beta in (step, -step):
        module.beta.data[...] = beta
        totals.append(np.sum(seed * module(q).data))
    module.beta.data[...] = 0.0
    np.testing.assert_allclose((totals[0] - totals[1]) / (2 * step), expected, rtol=1e-6)


def test_position_map_ignores_consistent_channel_order_of_query_and_key(rng):
    module = PositionAttention(16, reduction=4, rng=rng)
    q = Tensor(rng.standard_normal((16, 3, 4)))
    before = module.attention_map(q).data
    perm = rng.permutation(module.query.weight.shape[0])
    for conv in (module.query, module.key):
        conv.weight.data[...] = conv.weight.data[perm]
        if conv.bias is not None:
            conv.bias.data[...] = conv.bias.data[perm]
    np.testing.assert_allclose(module.attention_map(q).data, before, rtol=1e-12, atol=1e-15)
