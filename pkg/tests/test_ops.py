import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from plsnet import ops
from plsnet.ops import ConvGeometry
from plsnet.tensor import ShapeMismatchError

from conftest import numeric_grad, rel_error


def naive_conv3d(x, w, stride=1, dilation=1, padding=0):
    """Direct transcription of the sum, one output element at a time."""
    k, _, _, m, n = w.shape
    xp = np.pad(x, [(padding, padding)] * 3 + [(0, 0)])
    span = dilation * (k - 1) + 1
    out = [(s - span) // stride + 1 for s in xp.shape[:3]]
    y = np.zeros((*out, n))
    for h in range(out[0]):
        for ww in range(out[1]):
            for d in range(out[2]):
                for i in range(k):
                    for j in range(k):
                        for l in range(k):
                            v = xp[h * stride + i * dilation, ww * stride + j * dilation,
                                   d * stride + l * dilation]
                            y[h, ww, d] += v @ w[i, j, l]
    return y


# --- conv3d -------------------------------------------------------------------------


def test_conv3d_ones_sum_to_27():
    y = ops.conv3d(np.ones((3, 3, 3, 1)), np.ones((3, 3, 3, 1, 1)))
    assert y.shape == (1, 1, 1, 1)
    assert y[0, 0, 0, 0] == 27


def test_conv3d_identity_kernel(rng):
    x = rng.normal(size=(5, 4, 6, 3))
    w = np.eye(3).reshape(1, 1, 1, 3, 3)
    assert np.array_equal(ops.conv3d(x, w), x)
    assert np.array_equal(ops.conv3d(x, w, ConvGeometry(dilation=3, padding=0)), x)


def test_conv3d_dilated_delta_footprint(rng):
    x = np.zeros((5, 5, 5, 1))
    x[2, 2, 2, 0] = 1
    w = rng.uniform(0.5, 1.5, size=(3, 3, 3, 1, 1))
    y = ops.conv3d(x, w, ConvGeometry(dilation=2, padding=2))[..., 0]
    nz = {tuple(int(v) - 2 for v in idx) for idx in np.argwhere(y != 0)}
    expected = {(a, b, c) for a in (-2, 0, 2) for b in (-2, 0, 2) for c in (-2, 0, 2)}
    assert nz == expected


@pytest.mark.parametrize("stride,dilation,padding", [(1, 1, 0), (1, 2, 2), (2, 1, 1), (2, 3, 1)])
def test_conv3d_matches_naive_loop(rng, stride, dilation, padding):
    x = rng.normal(size=(7, 6, 8, 2))
    w = rng.normal(size=(3, 3, 3, 2, 3))
    got = ops.conv3d(x, w, ConvGeometry(stride, dilation, padding))
    np.testing.assert_allclose(got, naive_conv3d(x, w, stride, dilation, padding), atol=1e-12)


def test_dilation_one_is_plain_convolution(rng):
    x = rng.normal(size=(6, 6, 6, 2)).astype(np.float32)
    w = rng.normal(size=(3, 3, 3, 2, 2)).astype(np.float32)
    a = ops.conv3d(x, w, ConvGeometry(padding=1))
    b = ops.conv3d(x, w, ConvGeometry(dilation=1, padding=1))
    assert np.array_equal(a, b)


def test_conv3d_linearity(rng):
    x, y = rng.normal(size=(2, 5, 5, 5, 2))
    w = rng.normal(size=(3, 3, 3, 2, 3))
    g = ConvGeometry(padding=1)
    lhs = ops.conv3d(2.5 * x - 0.75 * y, w, g)
    rhs = 2.5 * ops.conv3d(x, w, g) - 0.75 * ops.conv3d(y, w, g)
    assert np.max(np.abs(lhs - rhs)) < 1e-6


def test_conv3d_errors(rng):
    with pytest.raises(ShapeMismatchError):
        ops.conv3d(np.ones((4, 4, 4, 2)), np.ones((3, 3, 3, 3, 1)))
    with pytest.raises(ShapeMismatchError):
        ops.conv3d(np.ones((2, 2, 2, 1)), np.ones((3, 3, 3, 1, 1)))


def test_geometry_out_extent():
    g = ConvGeometry(stride=2, dilation=1, padding=1)
    assert g.out_extent(64, 3) == 32
    assert ConvGeometry.same(3, 4).out_extent(10, 3) == 10


# --- depthwise / pointwise / factorisation -----------------------------------------


def test_depthwise_per_channel_linearity(rng):
    base = rng.normal(size=(6, 6, 6, 1))
    x = np.concatenate([base, 2 * base], axis=3)
    k = rng.normal(size=(3, 3, 3, 1))
    d = np.concatenate([k, k], axis=3)
    y = ops.depthwise_conv3d(x, d, ConvGeometry(padding=1))
    np.testing.assert_allclose(y[..., 1], 2 * y[..., 0], rtol=1e-12, atol=1e-12)


def test_depthwise_zero_kernel(rng):
    y = ops.depthwise_conv3d(rng.normal(size=(5, 5, 5, 2)), np.zeros((3, 3, 3, 2)))
    assert not y.any()


def test_depthwise_equals_slicewise_conv(rng):
    x = rng.normal(size=(6, 6, 6, 3))
    d = rng.normal(size=(3, 3, 3, 3))
    g = ConvGeometry(stride=1, dilation=2, padding=2)
    y = ops.depthwise_conv3d(x, d, g)
    for c in range(3):
        ref = ops.conv3d(x[..., c:c + 1], d[..., c].reshape(3, 3, 3, 1, 1), g)
        np.testing.assert_allclose(y[..., c:c + 1], ref, atol=1e-12)


def test_pointwise_sum_weights():
    a = np.full((2, 2, 2, 1), 3.0)
    b = np.full((2, 2, 2, 1), 4.0)
    y = ops.pointwise_conv3d(np.concatenate([a, b], axis=3), np.array([[1.0], [1.0]]))
    assert np.all(y == 7.0)


def test_pointwise_identity_and_k1_equivalence(rng):
    x = rng.normal(size=(4, 5, 3, 4))
    assert np.array_equal(ops.pointwise_conv3d(x, np.eye(4)), x)
    p = rng.normal(size=(4, 2))
    np.testing.assert_allclose(ops.pointwise_conv3d(x, p), ops.conv3d(x, p.reshape(1, 1, 1, 4, 2)),
                               atol=1e-12)


def test_compose_trivial_cases():
    d, p = np.ones((3, 3, 3, 2)), np.ones((2, 4))
    assert np.all(ops.compose_factorised_kernel(d, p) == 1)
    assert not ops.compose_factorised_kernel(d, np.zeros((2, 4))).any()
    with pytest.raises(ShapeMismatchError):
        ops.compose_factorised_kernel(d, np.ones((3, 4)))


@pytest.mark.parametrize("stride,dilation", [(1, 1), (1, 3), (2, 1)])
def test_factorisation_equivalence(rng, stride, dilation):
    x = rng.normal(size=(8, 8, 8, 3)).astype(np.float32)
    d = rng.normal(size=(3, 3, 3, 3)).astype(np.float32)
    p = rng.normal(size=(3, 5)).astype(np.float32)
    g = ConvGeometry.same(3, dilation, stride)
    full = ops.conv3d(x, ops.compose_factorised_kernel(d, p), g)
    ds = ops.pointwise_conv3d(ops.depthwise_conv3d(x, d, g), p)
    assert np.max(np.abs(full - ds)) < 1e-5


# --- batch norm ------------------------------------------------------------------------


def test_bn_constant_channels_give_beta():
    x = np.ones((4, 4, 4, 2)) * np.array([3.0, -1.0])
    bn = ops.BatchNormParams.fresh(2, np.float64)
    bn.beta[:] = [0.5, -2.0]
    y = ops.batch_norm(x, bn, train=True)
    assert np.allclose(y[..., 0], 0.5) and np.allclose(y[..., 1], -2.0)


def test_bn_train_normalises(rng):
    x = rng.normal(3.0, 2.0, size=(6, 6, 6, 3))
    y = ops.batch_norm(x, ops.BatchNormParams.fresh(3, np.float64), train=True)
    assert np.all(np.abs(y.mean(axis=(0, 1, 2))) < 1e-4)
    assert np.all(np.abs(y.var(axis=(0, 1, 2)) - 1) < 1e-4)


def test_bn_infer_identity_up_to_eps(rng):
    x = rng.normal(size=(3, 3, 3, 2))
    bn = ops.BatchNormParams.fresh(2, np.float64)
    y = ops.batch_norm(x, bn, train=False)
    np.testing.assert_allclose(y, x / math.sqrt(1 + 1e-5), rtol=1e-12)


def test_bn_running_stats_update_only_in_train(rng):
    x = rng.normal(2.0, 3.0, size=(4, 4, 4, 1))
    bn = ops.BatchNormParams.fresh(1, np.float64)
    ops.batch_norm(x, bn, train=False)
    assert bn.running_mean[0] == 0 and bn.running_var[0] == 1
    ops.batch_norm(x, bn, train=True, track=False)
    assert bn.running_mean[0] == 0
    ops.batch_norm(x, bn, train=True)
    assert bn.running_mean[0] == pytest.approx(0.1 * x.mean())
    assert bn.running_var[0] == pytest.approx(0.9 + 0.1 * x.var(ddof=1))


def test_bn_channel_mismatch():
    with pytest.raises(ShapeMismatchError):
        ops.batch_norm(np.ones((2, 2, 2, 3)), ops.BatchNormParams.fresh(2), train=True)


# --- activations, loss ------------------------------------------------------------------


def test_relu_examples(rng):
    x = np.array([-1.0, 0.0, 2.0]).reshape(1, 1, 1, 3)
    assert ops.relu(x).ravel().tolist() == [0, 0, 2]
    pos = np.abs(rng.normal(size=(2, 2, 2, 2)))
    assert np.array_equal(ops.relu(pos), pos)
    r = rng.normal(size=(3, 3, 3, 2))
    assert np.array_equal(ops.relu(ops.relu(r)), ops.relu(r))
    g = ops.relu_backward(np.ones((1, 1, 1, 2)), np.array([2.0, -1.0]).reshape(1, 1, 1, 2))
    assert g.ravel().tolist() == [1, 0]


def test_softmax_examples(rng):
    y = ops.softmax_channels(np.zeros((2, 2, 2, 6)))
    assert np.allclose(y, 1 / 6)
    logits = np.zeros((1, 1, 1, 6))
    logits[..., 0] = 10
    assert ops.softmax_channels(logits)[0, 0, 0, 0] > 0.999
    x = rng.normal(size=(3, 3, 3, 4))
    shift = rng.normal(size=(3, 3, 3, 1)) * 50
    np.testing.assert_allclose(ops.softmax_channels(x + shift), ops.softmax_channels(x), atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 8), st.floats(-500, 500))
def test_softmax_sums_to_one(channels, scale):
    x = np.random.default_rng(channels).normal(size=(2, 3, 2, channels)) * scale
    s = ops.softmax_channels(x.astype(np.float32)).sum(axis=3)
    assert np.all(np.abs(s - 1) < 1e-6)


def test_cross_entropy_uniform_is_ln6(rng):
    pred = np.full((3, 3, 3, 6), 1 / 6)
    labels = rng.integers(0, 6, size=(3, 3, 3))
    assert ops.cross_entropy_loss(pred, labels) == pytest.approx(math.log(6), abs=1e-12)


def test_cross_entropy_one_hot_and_permutation(rng):
    labels = rng.integers(0, 4, size=(3, 4, 2))
    onehot = np.eye(4)[labels]
    assert ops.cross_entropy_loss(onehot, labels) == pytest.approx(0.0, abs=1e-12)
    pred = ops.softmax_channels(rng.normal(size=(3, 4, 2, 4)))
    perm = rng.permutation(24)
    p2 = pred.reshape(-1, 4)[perm].reshape(2, 3, 4, 4)
    l2 = labels.ravel()[perm].reshape(2, 3, 4)
    assert ops.cross_entropy_loss(p2, l2) == pytest.approx(ops.cross_entropy_loss(pred, labels))


def test_cross_entropy_label_range():
    with pytest.raises(ValueError):
        ops.cross_entropy_loss(np.full((1, 1, 1, 3), 1 / 3), np.array([[[3]]]))


def test_softmax_cross_entropy_combined_gradient(rng):
    logits = rng.normal(size=(3, 2, 2, 5))
    labels = rng.integers(0, 5, size=(3, 2, 2))
    probs = ops.softmax_channels(logits)
    combined = ops.softmax_cross_entropy_backward(probs, labels)
    expected = (probs - np.eye(5)[labels]) / labels.size
    np.testing.assert_allclose(combined, expected, atol=1e-15)
    chained = ops.softmax_channels_backward(ops.cross_entropy_backward(probs, labels), logits)
    np.testing.assert_allclose(chained, expected, atol=1e-12)


# --- trilinear resampling --------------------------------------------------------------


def test_resample_constant_and_shape(rng):
    x = np.full((4, 4, 4, 2), 3.25)
    y = ops.trilinear_resample(x, factor=2)
    assert y.shape == (8, 8, 8, 2)
    assert np.allclose(y, 3.25)
    assert np.allclose(ops.trilinear_resample(x, size=(3, 7, 5)), 3.25)


def test_resample_linear_ramp():
    n = 6
    centres = np.arange(n) + 0.5
    x = np.broadcast_to(centres[:, None, None, None], (n, 3, 3, 1)).copy()
    y = ops.trilinear_resample(x, factor=2)
    new_centres = (np.arange(2 * n) + 0.5) / 2
    interior = slice(1, 2 * n - 1)  # first/last output voxel fall outside and are clamped
    np.testing.assert_allclose(y[interior, 1, 1, 0], new_centres[interior], atol=1e-6)


def test_resample_downsample_averages_pairs(rng):
    x = rng.normal(size=(8, 8, 8, 1))
    y = ops.trilinear_resample(x, factor=0.5)
    ref = x.reshape(4, 2, 4, 2, 4, 2, 1).mean(axis=(1, 3, 5))
    np.testing.assert_allclose(y, ref, atol=1e-12)


# --- gradients -------------------------------------------------------------------------


def _check(forward, backward_grads, tensors, tol=1e-3):
    """Project the output onto a random direction and compare analytic
    gradients against central differences."""
    for t, g in zip(tensors, backward_grads):
        num = numeric_grad(forward, t)
        assert rel_error(g, num) < tol


@pytest.mark.parametrize("stride,dilation,padding", [(1, 1, 1), (1, 2, 2), (2, 1, 1)])
def test_conv3d_gradient(rng, stride, dilation, padding):
    x = rng.uniform(-1, 1, size=(5, 4, 5, 3))
    w = rng.uniform(-1, 1, size=(3, 3, 3, 3, 2))
    g = ConvGeometry(stride, dilation, padding)
    up = rng.uniform(-1, 1, size=ops.conv3d(x, w, g).shape)
    gx, gw = ops.conv3d_backward(up, x, w, g)
    _check(lambda: np.sum(ops.conv3d(x, w, g) * up), (gx, gw), (x, w))


def test_conv3d_weight_gradient_4cube(rng):
    x = rng.uniform(-1, 1, size=(4, 4, 4, 2))
    w = rng.uniform(-1, 1, size=(3, 3, 3, 2, 2))
    g = ConvGeometry(padding=1)
    up = rng.uniform(-1, 1, size=(4, 4, 4, 2))
    _, gw = ops.conv3d_backward(up, x, w, g)
    num = numeric_grad(lambda: np.sum(ops.conv3d(x, w, g) * up), w, eps=1e-4)
    assert rel_error(gw, num) < 1e-3


@pytest.mark.parametrize("stride,dilation", [(1, 1), (1, 2), (2, 1)])
def test_depthwise_gradient(rng, stride, dilation):
    x = rng.uniform(-1, 1, size=(5, 5, 4, 4))
    d = rng.uniform(-1, 1, size=(3, 3, 3, 4))
    g = ConvGeometry.same(3, dilation, stride)
    up = rng.uniform(-1, 1, size=ops.depthwise_conv3d(x, d, g).shape)
    gx, gd = ops.depthwise_conv3d_backward(up, x, d, g)
    _check(lambda: np.sum(ops.depthwise_conv3d(x, d, g) * up), (gx, gd), (x, d))


def test_pointwise_gradient(rng):
    x = rng.uniform(-1, 1, size=(4, 3, 5, 4))
    p = rng.uniform(-1, 1, size=(4, 3))
    up = rng.uniform(-1, 1, size=(4, 3, 5, 3))
    gx, gp = ops.pointwise_conv3d_backward(up, x, p)
    _check(lambda: np.sum(ops.pointwise_conv3d(x, p) * up), (gx, gp), (x, p))


@pytest.mark.parametrize("train", [True, False])
def test_batch_norm_gradient(rng, train):
    x = rng.uniform(-1, 1, size=(4, 5, 3, 3))
    bn = ops.BatchNormParams(rng.uniform(0.5, 1.5, 3), rng.uniform(-1, 1, 3),
                             rng.uniform(-0.2, 0.2, 3), rng.uniform(0.5, 2, 3))
    up = rng.uniform(-1, 1, size=x.shape)
    gx, gg, gb = ops.batch_norm_backward(up, x, bn, train)
    f = lambda: np.sum(ops.batch_norm(x, bn, train, track=False) * up)
    _check(f, (gx, gg, gb), (x, bn.gamma, bn.beta))


def test_relu_gradient(rng):
    x = rng.uniform(-1, 1, size=(4, 4, 4, 2))
    x[np.abs(x) < 1e-3] = 0.5  # keep away from the kink
    up = rng.uniform(-1, 1, size=x.shape)
    _check(lambda: np.sum(ops.relu(x) * up), (ops.relu_backward(up, x),), (x,))


def test_softmax_gradient(rng):
    x = rng.uniform(-1, 1, size=(3, 4, 3, 4))
    up = rng.uniform(-1, 1, size=x.shape)
    _check(lambda: np.sum(ops.softmax_channels(x) * up),
           (ops.softmax_channels_backward(up, x),), (x,))


def test_cross_entropy_gradient(rng):
    pred = rng.uniform(0.05, 1, size=(3, 3, 3, 4))
    labels = rng.integers(0, 4, size=(3, 3, 3))
    _check(lambda: ops.cross_entropy_loss(pred, labels),
           (ops.cross_entropy_backward(pred, labels),), (pred,))


@pytest.mark.parametrize("size", [(8, 6, 5), (2, 3, 4), (4, 4, 4)])
def test_trilinear_gradient(rng, size):
    x = rng.uniform(-1, 1, size=(4, 3, 5, 2))
    up = rng.uniform(-1, 1, size=(*size, 2))
    g = ops.trilinear_resample_backward(up, x.shape)
    _check(lambda: np.sum(ops.trilinear_resample(x, size=size) * up), (g,), (x,))


def test_gradient_dispatch_and_shape_check(rng):
    x = rng.normal(size=(3, 3, 3, 1))
    assert np.array_equal(ops.gradient(ops.relu, np.ones_like(x), x), (x > 0).astype(float))
    with pytest.raises(ShapeMismatchError):
        ops.gradient(ops.relu, np.ones((2, 2, 2, 1)), x)
    with pytest.raises(ShapeMismatchError):
        ops.conv3d_backward(np.ones((2, 2, 2, 1)), x, np.ones((3, 3, 3, 1, 1)))
