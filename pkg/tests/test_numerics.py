import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from fprog.analyzer import layer_stats
from fprog.fabric import lower_layer
from fprog.model import LayerSpec, build_model, dense, output
from fprog.numerics import (
    PruneStats,
    TensorData,
    conv_backward,
    conv_forward,
    conv_macs,
    dense_backward,
    dense_forward,
    dropout,
    dropout_mask,
    fc_backward,
    fc_forward,
    fc_forward_lowered,
    filter_prune_mask,
    init_params,
    maxpool_forward,
    max_rel_error,
    prune,
    softmax,
)
from fprog.systolic import SystolicSimulator

from gradcheck import CHECKS
from netgen import random_batch, random_model


def conv_oracle(x, k, b, s, pad):
    h, w, c = x.shape
    f = k.shape[0]
    if pad == "same":
        ho, wo = -(-h // s), -(-w // s)
        top = max((ho - 1) * s + f - h, 0) // 2
        left = max((wo - 1) * s + f - w, 0) // 2
    else:
        ho, wo, top, left = (h - f) // s + 1, (w - f) // s + 1, 0, 0
    out = np.zeros((ho, wo, k.shape[3]))
    for oy in range(ho):
        for ox in range(wo):
            for co in range(k.shape[3]):
                acc = b[co]
                for dy in range(f):
                    for dx in range(f):
                        y, xx = oy * s - top + dy, ox * s - left + dx
                        if 0 <= y < h and 0 <= xx < w:
                            for ci in range(c):
                                acc += x[y, xx, ci] * k[dy, dx, ci, co]
                out[oy, ox, co] = acc
    return out


def test_tensor_data():
    t = TensorData.from_array(np.arange(12.0).reshape(2, 3, 2))
    assert t.shape == (2, 3, 2) and t.array()[1, 2, 1] == 11.0
    with pytest.raises(ValueError):
        TensorData((2, 2, 2), np.zeros(7))


def test_conv_identity_1x1():
    x = np.array([[[3.5]]])
    assert conv_forward(x, np.ones((1, 1, 1, 1)), np.zeros(1))[0, 0, 0] == 3.5


def test_conv_vgg_conv1_shape_and_macs():
    assert conv_macs((224, 224, 3), 3, 1, "same", 64) == 86_704_128
    x = np.zeros((224, 224, 3))
    assert conv_forward(x, np.zeros((3, 3, 3, 64))).shape == (224, 224, 64)


@pytest.mark.parametrize("seed", range(4))
@pytest.mark.parametrize("pad", ["same", "valid"])
def test_conv_matches_loop_oracle(seed, pad):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((6, 6, 2))
    k = rng.standard_normal((3, 3, 2, 3))
    b = rng.standard_normal(3)
    for s in (1, 2):
        np.testing.assert_allclose(conv_forward(x, k, b, s, pad), conv_oracle(x, k, b, s, pad), rtol=0, atol=1e-12)


def test_conv_shape_mismatch():
    with pytest.raises(ValueError):
        conv_forward(np.zeros((4, 4, 2)), np.zeros((3, 3, 3, 1)))
    with pytest.raises(ValueError):
        conv_backward(np.zeros((1, 3, 3, 1)), np.zeros((1, 4, 4, 1)), np.zeros((3, 3, 1, 1)))


def test_conv_backward_zero_upstream():
    rng = np.random.default_rng(0)
    x, k = rng.standard_normal((1, 5, 5, 2)), rng.standard_normal((3, 3, 2, 4))
    dx, dk, db = conv_backward(np.zeros((1, 5, 5, 4)), x, k)
    assert not dx.any() and not dk.any() and not db.any()


def test_conv_1x1_backward_is_matmul():
    rng = np.random.default_rng(1)
    x, k = rng.standard_normal((2, 3, 4, 5)), rng.standard_normal((1, 1, 5, 3))
    dz = rng.standard_normal((2, 3, 4, 3))
    dx, dk, db = conv_backward(dz, x, k, 1, "same")
    xf, dzf = x.reshape(-1, 5), dz.reshape(-1, 3)
    np.testing.assert_allclose(dx.reshape(-1, 5), dzf @ k[0, 0].T, rtol=1e-12)
    np.testing.assert_allclose(dk[0, 0], xf.T @ dzf, rtol=1e-12)
    np.testing.assert_allclose(db, dzf.sum(axis=0), rtol=1e-12)


@pytest.mark.parametrize("name", sorted(CHECKS))
def test_finite_difference(name):
    rng = np.random.default_rng(2024)
    worst = max(CHECKS[name](rng) for _ in range(10))
    assert worst < 1e-6


def test_softmax_uniform_and_maxpool_constant():
    np.testing.assert_allclose(softmax(np.full(7, 2.5)), np.full(7, 1 / 7), rtol=1e-15)
    np.testing.assert_array_equal(maxpool_forward(np.full((4, 6, 3), 1.25)), np.full((2, 3, 3), 1.25))


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 12)), elements=st.floats(-50, 50)))
def test_softmax_properties(z):
    p = softmax(z)
    assert np.all((p >= 0) & (p <= 1))
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, rtol=0, atol=1e-12)


@pytest.mark.parametrize("shape, n", [((3, 3, 4), 8), ((1, 1, 5), 3), ((2, 5, 1), 4), ((7, 7, 16), 32)])
def test_fc_lowered_equals_dense(shape, n):
    rng = np.random.default_rng(sum(shape) + n)
    x = rng.standard_normal((2, *shape))
    w = rng.standard_normal((int(np.prod(shape)), n))
    b = rng.standard_normal(n)
    desc = lower_layer(dense(n), shape)
    assert (desc.kh, desc.kw, desc.padding, desc.out_shape) == (shape[0], shape[1], "valid", (1, 1, n))
    direct = fc_forward(x, w, b)
    lowered = fc_forward_lowered(x, w, b)
    assert max_rel_error(lowered, direct) <= 1e-12


def test_fc_backward_shapes():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 3, 3, 2))
    dx, dw, db = fc_backward(np.ones((2, 4)), x, rng.standard_normal((18, 4)))
    assert dx.shape == x.shape and dw.shape == (18, 4) and db.tolist() == [2.0] * 4


def test_prune_examples():
    stats = PruneStats.empty((3,), epsilon=1e-3)
    for _ in range(10):
        stats.observe(np.array([0.0, 5.0, 0.0005]))
    assert prune(stats, 0.9).tolist() == [0.0, 1.0, 0.0]
    with pytest.raises(ValueError):
        prune(PruneStats.empty((3,), 0.1), 0.5)


def test_prune_engineered_validation_set():
    """Hidden layer where exactly units 1, 4 and 7 never fire on the validation set."""
    model = build_model((1, 1, 4), [LayerSpec("Input"), dense(10), output(3)])
    params = init_params(model, 0)
    dead = [1, 4, 7]
    params[1]["w"][:, dead] = -np.abs(params[1]["w"][:, dead]) - 0.1
    params[1]["b"][dead] = -1.0
    rng = np.random.default_rng(5)
    x = np.abs(rng.standard_normal((200, 1, 1, 4)))
    stats = PruneStats.empty((10,), epsilon=0.0)
    stats.observe(dense_forward(model, params, x).outputs[1].reshape(200, 10))
    mask = prune(stats, 0.95)
    assert np.flatnonzero(mask == 0).tolist() == dead
    assert stats.zero_counts.max() <= stats.passes


def test_filter_prune_mask():
    m = np.ones((2, 2, 3))
    m[..., 1] = 0.0
    m[0, 0, 2] = 0.0
    assert filter_prune_mask(m).tolist() == [1.0, 0.0, 1.0]


def test_pruned_nodes_contribute_zero_both_paths():
    rng = np.random.default_rng(11)
    model = build_model((2, 2, 2), [LayerSpec("Input"), dense(6), dense(5), output(3)])
    params = init_params(model, 3)
    x, y = random_batch(rng, model, 4)
    masks = [None, np.array([1, 0, 1, 1, 0, 1.0]), None, None]
    cache = dense_forward(model, params, x, masks)
    # perturbing a pruned node's incoming weights changes nothing downstream
    bumped = [None if p is None else {k: v.copy() for k, v in p.items()} for p in params]
    bumped[1]["w"][:, [1, 4]] += 10.0
    np.testing.assert_array_equal(dense_forward(model, bumped, x, masks).outputs[-1], cache.outputs[-1])
    sim = SystolicSimulator(model, params)
    out = sim.forward(x, masks)
    assert max_rel_error(out, cache.outputs[-1].reshape(4, -1)) <= 1e-9
    assert all(sim.layers[1].nodes[i].pruned for i in (1, 4))
    sums = sim.backward(y)
    ref = dense_backward(model, params, cache, y, masks)
    assert max_rel_error(sums[1], ref.activation_grads[1].reshape(4, -1)) <= 1e-9


def test_dropout_identity_cases():
    a = np.arange(10.0)
    np.testing.assert_array_equal(dropout(a, 0.0, 1), a)
    np.testing.assert_array_equal(dropout(a, 0.7, 1, training=False), a)
    with pytest.raises(ValueError):
        dropout(a, 1.0, 1)
    with pytest.raises(ValueError):
        dropout_mask((3,), -0.1, 0)


def test_dropout_keep_rate_and_scaling():
    a = np.full(100_000, 3.0)
    out = dropout(a, 0.5, seed=42)
    kept = out != 0
    assert abs(kept.mean() - 0.5) <= 0.02
    assert np.all(out[kept] == 6.0)
    np.testing.assert_array_equal(out, dropout(a, 0.5, seed=42))


def test_dropout_expectation():
    rng = np.random.default_rng(0)
    a = rng.random(20)
    trials = np.stack([dropout(a, 0.3, seed=s) for s in range(10_000)])
    np.testing.assert_allclose(trials.mean(axis=0), a, rtol=0.02)


def test_random_networks_dense_shapes():
    rng = np.random.default_rng(0)
    for _ in range(10):
        model = random_model(rng)
        params = init_params(model, 0)
        x, _ = random_batch(rng, model, 2)
        cache = dense_forward(model, params, x)
        stats = layer_stats(model)
        for out, s in zip(cache.outputs, stats):
            assert out.shape[1:] == s.shape
