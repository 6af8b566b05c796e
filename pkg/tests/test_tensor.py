import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mtscene import functional as F
from mtscene.tensor import (NonFiniteError, Tensor, concat, log, no_grad, precision, relu, sigmoid, split,
                            tsum)


def bn_params(c, gamma=1.0, beta=0.0):
    return F.BNParams(Tensor(np.full(c, gamma)), Tensor(np.full(c, beta)), Tensor(np.zeros(c)), Tensor(np.ones(c)))


# --- conv2d --------------------------------------------------------------------


def test_conv_all_ones_valid():
    out = F.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))))
    assert out.shape == (1, 1, 1, 1)
    assert out.data.item() == 9.0


def test_conv_all_ones_padded():
    out = F.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))), padding=1).data[0, 0]
    np.testing.assert_array_equal(out, [[4, 6, 4], [6, 9, 6], [4, 6, 4]])


def test_conv_identity_kernel():
    x = np.random.default_rng(0).normal(size=(2, 1, 5, 4))
    out = F.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))))
    np.testing.assert_array_equal(out.data, x.astype(np.float32))


def test_conv_is_cross_correlation():
    x = np.arange(9, dtype=float).reshape(1, 1, 3, 3)
    w = np.zeros((1, 1, 3, 3))
    w[0, 0, 0, 0] = 1.0  # top-left tap reads the top-left pixel
    assert F.conv2d(Tensor(x), Tensor(w)).data.item() == 0.0


def test_conv_rejects_bad_shapes():
    with pytest.raises(ValueError):
        F.conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))))
    with pytest.raises(ValueError):
        F.conv2d(Tensor(np.ones((1, 1, 4, 4))), Tensor(np.ones((1, 1, 3, 3))), stride=2)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(-3, 3).filter(lambda a: abs(a) > 1e-3))
def test_conv_linearity(seed, a):
    rng = np.random.default_rng(seed)
    with precision("double"):
        x = rng.normal(size=(1, 3, 6, 5))
        w = Tensor(rng.normal(size=(2, 3, 3, 3)))
        lhs = F.conv2d(Tensor(a * x), w, padding=1).data
        rhs = a * F.conv2d(Tensor(x), w, padding=1).data
    np.testing.assert_allclose(lhs, rhs, rtol=1e-12, atol=1e-12)


# --- batch norm ------------------------------------------------------------------


def test_bn_constant_input_is_zero():
    out = F.batch_norm(Tensor(np.full((2, 3, 4, 4), 5.0)), bn_params(3), training=True)
    assert np.abs(out.data).max() < 1e-6


def test_bn_plus_minus_one():
    with precision("double"):
        x = np.array([-1.0, 1.0]).reshape(2, 1, 1, 1)
        p = bn_params(1)
        p.epsilon = 1e-12
        np.testing.assert_allclose(F.batch_norm(Tensor(x), p, True).data.ravel(), [-1, 1], atol=1e-9)
        p = bn_params(1, gamma=2.0, beta=1.0)
        p.epsilon = 1e-12
        np.testing.assert_allclose(F.batch_norm(Tensor(x), p, True).data.ravel(), [-1, 3], atol=1e-9)


def test_bn_running_stats_and_eval_mode():
    with precision("double"):
        x = np.random.default_rng(1).normal(2.0, 3.0, size=(4, 2, 3, 3))
        p = bn_params(2)
        F.batch_norm(Tensor(x), p, True)
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3), ddof=1)
        np.testing.assert_allclose(p.running_mean.data, 0.1 * mean, rtol=1e-12)
        np.testing.assert_allclose(p.running_var.data, 0.9 + 0.1 * var, rtol=1e-12)
        out = F.batch_norm(Tensor(x), p, False).data
        expect = (x - p.running_mean.data[None, :, None, None]) / np.sqrt(p.running_var.data[None, :, None, None] + 1e-5)
        np.testing.assert_allclose(out, expect, rtol=1e-12)


def test_bn_channel_mismatch():
    with pytest.raises(ValueError):
        F.batch_norm(Tensor(np.ones((1, 2, 2, 2))), bn_params(3), True)


# --- pooling and upsampling ---------------------------------------------------------


def test_adaptive_pool_ones():
    assert F.adaptive_avg_pool(Tensor(np.ones((1, 1, 4, 4))), 1, 1).data.item() == 1.0


def test_adaptive_pool_hand_oracle():
    x = np.arange(1, 17, dtype=float).reshape(1, 1, 4, 4)
    out = F.adaptive_avg_pool(Tensor(x), 2, 2).data[0, 0]
    np.testing.assert_array_equal(out, [[3.5, 5.5], [11.5, 13.5]])


def test_adaptive_pool_identity():
    x = np.random.default_rng(2).normal(size=(1, 2, 3, 5)).astype(np.float32)
    np.testing.assert_array_equal(F.adaptive_avg_pool(Tensor(x), 3, 5).data, x)


def test_adaptive_pool_rejects_zero_extent():
    with pytest.raises(ValueError):
        F.adaptive_avg_pool(Tensor(np.ones((1, 1, 4, 4))), 0, 2)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 3), st.integers(1, 3), st.integers(0, 1000))
def test_adaptive_pool_preserves_mean_on_partition(oh, ow, kh, kw, seed):
    with precision("double"):
        x = np.random.default_rng(seed).normal(size=(1, 2, oh * kh, ow * kw))
        out = F.adaptive_avg_pool(Tensor(x), oh, ow).data
    np.testing.assert_allclose(out.mean(axis=(2, 3)), x.mean(axis=(2, 3)), rtol=1e-12, atol=1e-12)


def test_bilinear_half_pixel_row():
    out = F.bilinear_upsample(Tensor(np.array([[[[0.0, 1.0]]]])), 1, 4).data.ravel()
    np.testing.assert_allclose(out, [0, 0.25, 0.75, 1])


def test_bilinear_identity():
    x = np.random.default_rng(3).normal(size=(1, 1, 3, 4)).astype(np.float32)
    np.testing.assert_array_equal(F.bilinear_upsample(Tensor(x), 3, 4).data, x)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 5), st.integers(1, 5), st.integers(1, 4), st.integers(1, 4), st.integers(0, 1000))
def test_bilinear_bounds_and_constants(h, w, fh, fw, seed):
    with precision("double"):
        x = np.random.default_rng(seed).normal(size=(1, 1, h, w))
        out = F.bilinear_upsample(Tensor(x), h * fh, w * fw).data
        const = F.bilinear_upsample(Tensor(np.full((1, 1, h, w), 2.5)), h * fh, w * fw).data
    assert out.min() >= x.min() - 1e-12 and out.max() <= x.max() + 1e-12
    np.testing.assert_allclose(const, 2.5, rtol=1e-14)


# --- primitives ------------------------------------------------------------------------


def test_primitive_examples():
    assert sigmoid(Tensor([0.0])).data.item() == 0.5
    np.testing.assert_allclose(F.softmax(Tensor(np.zeros((1, 3))), axis=1).data, [[1 / 3] * 3], rtol=1e-6)
    x = np.random.default_rng(4).normal(size=(2, 3)).astype(np.float32)
    out = F.linear(Tensor(x), Tensor(np.eye(3)), Tensor(np.zeros(3)))
    np.testing.assert_array_equal(out.data, x)
    assert F.global_avg_pool(Tensor(np.arange(8.0).reshape(1, 2, 2, 2))).data.tolist() == [[1.5, 5.5]]


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_softmax_rows_sum_to_one(seed):
    x = np.random.default_rng(seed).normal(0, 5, size=(3, 7))
    np.testing.assert_allclose(F.softmax(Tensor(x), axis=1).data.sum(axis=1), 1.0, atol=1e-6)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(1, 4), min_size=1, max_size=4), st.integers(0, 1000))
def test_concat_split_round_trip(sizes, seed):
    rng = np.random.default_rng(seed)
    parts = [Tensor(rng.normal(size=(2, c, 3, 3))) for c in sizes]
    back = split(concat(parts, axis=1), sizes, axis=1)
    for a, b in zip(parts, back):
        assert np.array_equal(a.data, b.data)


def test_backward_accumulates_through_shared_input():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    tsum(x * x + x).backward()
    np.testing.assert_array_equal(x.grad, [3.0, 5.0])


def test_no_grad_builds_no_graph():
    x = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        y = relu(x) * 2.0
    assert not y.requires_grad


def test_non_finite_is_an_error():
    with pytest.raises(NonFiniteError):
        log(Tensor(np.array([0.0])))


def test_zero_extent_rejected():
    with pytest.raises(ValueError):
        Tensor(np.zeros((0, 3)))


def test_precision_modes():
    assert Tensor([1.0]).dtype == np.float32
    with precision("double"):
        assert Tensor([1.0]).dtype == np.float64
    with pytest.raises(ValueError):
        with precision("half"):
            pass
