import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from lcnet import ops
from lcnet.errors import DegenerateBatchError, ShapeMismatchError
from lcnet.ops import BatchNormParams, ConvDesc, SEParams


def random_conv_case(rng):
    """Draw a random (input, weight, bias, desc) covering every conv kind."""
    k = int(rng.choice([1, 3, 5]))
    s = int(rng.choice([1, 2]))
    depthwise = bool(rng.random() < 0.5)
    cin = int(rng.integers(1, 9))
    cout = cin if depthwise else int(rng.integers(1, 9))
    n = int(rng.integers(1, 3))
    h, w = (int(v) for v in rng.integers(max(k - 2, 1), 12, 2))
    desc = ConvDesc(cin, cout, k, s, depthwise, has_bias=bool(rng.random() < 0.5))
    x = rng.standard_normal((n, cin, h, w)).astype(np.float32)
    wt = rng.standard_normal(desc.weight_shape).astype(np.float32)
    b = rng.standard_normal(cout).astype(np.float32) if desc.has_bias else None
    return x, wt, b, desc


# -- convolution -------------------------------------------------------------

def test_naive_all_ones_3x3():
    x = np.ones((1, 1, 3, 3), np.float32)
    w = np.ones((1, 1, 3, 3), np.float32)
    out = ops.conv2d_naive(x, w, None, ConvDesc(1, 1, 3))
    np.testing.assert_array_equal(out[0, 0], [[4, 6, 4], [6, 9, 6], [4, 6, 4]])


@pytest.mark.parametrize("conv", [ops.conv2d_naive, ops.conv2d_fast])
def test_identity_pointwise(conv):
    x = np.random.default_rng(0).standard_normal((2, 5, 4, 6)).astype(np.float32)
    w = np.eye(5, dtype=np.float32)[:, :, None, None]
    np.testing.assert_allclose(conv(x, w, None, ConvDesc(5, 5, 1)), x, rtol=1e-6)


def test_stem_shape():
    x = np.zeros((1, 3, 224, 224), np.float32)
    w = np.zeros((16, 3, 3, 3), np.float32)
    assert ops.conv2d_fast(x, w, None, ConvDesc(3, 16, 3, 2)).shape == (1, 16, 112, 112)
    assert ConvDesc(3, 16, 3, 2).output_hw(224, 224) == (112, 112)


def test_naive_matches_hand_loop_with_bias_and_stride():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((1, 2, 5, 5))
    w = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    out = ops.conv2d_naive(x, w, b, ConvDesc(2, 3, 3, 2, has_bias=True))
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    for o in range(3):
        for i in range(3):
            for j in range(3):
                ref = (xp[0, :, 2 * i:2 * i + 3, 2 * j:2 * j + 3] * w[o]).sum() + b[o]
                assert out[0, o, i, j] == pytest.approx(ref, rel=1e-12)


def test_conv_fast_matches_naive_randomized():
    rng = np.random.default_rng(1234)
    for _ in range(200):
        x, w, b, desc = random_conv_case(rng)
        np.testing.assert_allclose(
            ops.conv2d_fast(x, w, b, desc), ops.conv2d_naive(x, w, b, desc), rtol=1e-4, atol=1e-5
        )


@pytest.mark.parametrize("depthwise", [False, True])
def test_conv_fast_worker_invariant(depthwise):
    rng = np.random.default_rng(5)
    c = 64 if depthwise else 8
    desc = ConvDesc(c, 64, 3, 1, depthwise)
    x = rng.standard_normal((2, c, 56, 56)).astype(np.float32)
    w = rng.standard_normal(desc.weight_shape).astype(np.float32)
    ref = ops.conv2d_fast(x, w, None, desc, workers=1)
    for workers in (2, 3, 8):
        assert np.array_equal(ops.conv2d_fast(x, w, None, desc, workers=workers), ref)


def test_conv_preserves_dtype():
    x, w, b, desc = random_conv_case(np.random.default_rng(0))
    assert ops.conv2d_fast(x, w, b, desc).dtype == np.float32
    assert ops.conv2d_fast(x.astype(np.float64), w.astype(np.float64), b, desc).dtype == np.float64


@pytest.mark.parametrize(
    "make",
    [
        lambda: ConvDesc(3, 4, 2),
        lambda: ConvDesc(3, 4, 3, stride=3),
        lambda: ConvDesc(3, 4, 3, depthwise=True),
        lambda: ConvDesc(3, 4, 3, padding=0),
    ],
)
def test_conv_desc_validation(make):
    with pytest.raises(ShapeMismatchError):
        make()


def test_conv_shape_mismatch():
    desc = ConvDesc(3, 4, 3)
    with pytest.raises(ShapeMismatchError):
        ops.conv2d_fast(np.zeros((1, 2, 8, 8), np.float32), np.zeros(desc.weight_shape, np.float32), None, desc)
    with pytest.raises(ShapeMismatchError):
        ops.conv2d_naive(np.zeros((1, 3, 8, 8), np.float32), np.zeros((4, 3, 1, 1), np.float32), None, desc)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_conv_equivalence_property(seed):
    x, w, b, desc = random_conv_case(np.random.default_rng(seed))
    np.testing.assert_allclose(ops.conv2d_fast(x, w, b, desc), ops.conv2d_naive(x, w, b, desc), rtol=1e-4, atol=1e-5)


def test_im2col_col2im_adjoint():
    # <im2col(x), y> == <x, col2im(y)> for the scatter-add adjoint
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 3, 7, 6))
    cols = ops.im2col(x, 3, 2, 1)
    y = rng.standard_normal(cols.shape)
    assert np.vdot(cols, y) == pytest.approx(np.vdot(x, ops.col2im(y, x.shape, 3, 2, 1)), rel=1e-12)


# -- batch norm --------------------------------------------------------------

def _bn(c, gamma=1.0, beta=0.0, mean=0.0, var=1.0, eps=0.0):
    full = lambda v: np.full(c, v, np.float32)  # noqa: E731
    return BatchNormParams(full(gamma), full(beta), full(mean), full(var), eps)


def test_bn_infer_identity_and_affine():
    x = np.random.default_rng(0).standard_normal((2, 3, 4, 4)).astype(np.float32)
    np.testing.assert_array_equal(ops.batchnorm_infer(x, _bn(3)), x)
    out = ops.batchnorm_infer(np.full((1, 1, 1, 1), 3, np.float32), _bn(1, gamma=2, beta=1))
    assert out.item() == 7


def test_bn_infer_channel_mismatch():
    with pytest.raises(ShapeMismatchError):
        ops.batchnorm_infer(np.zeros((1, 2, 2, 2), np.float32), _bn(3))


def test_bn_train_examples():
    x = np.full((2, 2, 3, 3), 5.0, np.float32)
    res = ops.batchnorm_train(x, np.ones(2, np.float32), np.array([0.5, -1], np.float32))
    np.testing.assert_array_equal(res.out[:, 0], 0.5)
    np.testing.assert_array_equal(res.out[:, 1], -1)

    x = np.array([-1.0, 1.0]).reshape(2, 1, 1, 1)
    res = ops.batchnorm_train(x, np.ones(1), np.zeros(1), eps=0.0)
    np.testing.assert_array_equal(res.out.ravel(), [-1, 1])
    assert res.mean.item() == 0 and res.var.item() == 1


def test_bn_train_momentum_one_copies_batch_stats():
    x = np.random.default_rng(1).standard_normal((4, 3, 2, 2))
    res = ops.batchnorm_train(x, np.ones(3), np.zeros(3), momentum=1.0,
                              running_mean=np.full(3, 7.0), running_var=np.full(3, 9.0))
    np.testing.assert_array_equal(res.running_mean, res.mean)
    np.testing.assert_array_equal(res.running_var, res.var)
    np.testing.assert_allclose(res.var, x.var(axis=(0, 2, 3)))


def test_bn_train_default_momentum():
    x = np.random.default_rng(2).standard_normal((4, 2, 3, 3))
    res = ops.batchnorm_train(x, np.ones(2), np.zeros(2))
    np.testing.assert_allclose(res.running_mean, 0.1 * x.mean(axis=(0, 2, 3)))
    np.testing.assert_allclose(res.running_var, 0.9 + 0.1 * x.var(axis=(0, 2, 3)))


def test_bn_train_degenerate_batch():
    with pytest.raises(DegenerateBatchError):
        ops.batchnorm_train(np.zeros((1, 2, 1, 1)), np.ones(2), np.zeros(2))


def test_bn_fold_examples():
    rng = np.random.default_rng(0)
    w = rng.standard_normal((4, 2, 3, 3)).astype(np.float32)
    fw, fb = ops.bn_fold(w, None, _bn(4))
    np.testing.assert_array_equal(fw, w)
    np.testing.assert_array_equal(fb, 0)
    fw, fb = ops.bn_fold(w, None, _bn(4, gamma=0, beta=0.25, mean=3))
    assert not fw.any()
    np.testing.assert_array_equal(fb, 0.25)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.booleans())
def test_bn_fold_matches_two_step(seed, depthwise):
    rng = np.random.default_rng(seed)
    desc = ConvDesc(4, 4, 3, depthwise=depthwise, has_bias=True)
    x = rng.standard_normal((1, 4, 8, 8))
    w = rng.standard_normal(desc.weight_shape)
    b = rng.standard_normal(4)
    bn = BatchNormParams(rng.uniform(0.5, 2, 4), rng.standard_normal(4), rng.standard_normal(4), rng.uniform(0.5, 2, 4))
    two_step = ops.batchnorm_infer(ops.conv2d_fast(x, w, b, desc), bn)
    fw, fb = ops.bn_fold(w, b, bn)
    np.testing.assert_allclose(ops.conv2d_fast(x, fw, fb, desc), two_step, rtol=1e-5, atol=1e-9)


# -- activations -------------------------------------------------------------

def test_activation_examples():
    assert ops.hswish(np.array([0.0, 3.0, -3.0])).tolist() == [0.0, 3.0, 0.0]
    assert ops.hswish(np.array(1.0)) == pytest.approx(4 / 6, rel=1e-15)
    assert ops.hsigmoid(np.array([0.0, 3.0, -3.0, 1.5])).tolist() == [0.5, 1.0, 0.0, 0.75]
    assert ops.relu(np.array([0.0, -2.0, 2.5])).tolist() == [0.0, 0.0, 2.5]


finite = st.floats(-1e6, 1e6, allow_nan=False, width=32)


@given(hnp.arrays(np.float32, st.integers(1, 50), elements=finite))
def test_hswish_is_x_times_hsigmoid(x):
    assert np.array_equal(ops.hswish(x), x * ops.hsigmoid(x))
    h = ops.hsigmoid(x)
    assert np.all((h >= 0) & (h <= 1))


# -- squeeze-and-excitation --------------------------------------------------

def _se(c, rng=None, scale=1.0, bias2=0.0):
    h = c // 4
    if rng is None:
        return SEParams(np.zeros((h, c)), np.zeros(h), np.zeros((c, h)), np.full(c, bias2))
    return SEParams(scale * rng.standard_normal((h, c)), rng.standard_normal(h),
                    scale * rng.standard_normal((c, h)), rng.standard_normal(c) + bias2)


def test_se_zero_weights_halves_input():
    x = np.random.default_rng(0).standard_normal((2, 8, 3, 3))
    np.testing.assert_array_equal(ops.se_apply(x, _se(8)), 0.5 * x)


def test_se_saturated_gate_is_identity():
    x = np.random.default_rng(0).standard_normal((2, 8, 3, 3))
    np.testing.assert_array_equal(ops.se_apply(x, _se(8, bias2=3.0)), x)


def test_se_zero_input():
    se = _se(8, np.random.default_rng(1))
    assert not ops.se_apply(np.zeros((1, 8, 4, 4)), se).any()


def test_se_channel_mismatch():
    with pytest.raises(ShapeMismatchError):
        ops.se_apply(np.zeros((1, 4, 2, 2)), _se(8))
    with pytest.raises(ShapeMismatchError):
        SEParams(np.zeros((2, 8)), np.zeros(2), np.zeros((8, 3)), np.zeros(8))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_se_output_bounded_by_input(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 8, 3, 3)) * 5
    out = ops.se_apply(x, _se(8, rng, scale=3.0))
    assert np.all(np.abs(out) <= np.abs(x))
    assert np.all(out * x >= 0)


# -- head --------------------------------------------------------------------

def test_gap_examples():
    x = np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 1, 2, 2)
    assert ops.global_avg_pool(x).item() == 2.5
    assert ops.global_avg_pool(np.full((1, 2, 3, 3), 7.0)).ravel().tolist() == [7.0, 7.0]
    assert ops.global_avg_pool(np.zeros((1, 512, 7, 7), np.float32)).shape == (1, 512, 1, 1)


def test_fully_connected_examples():
    x = np.random.default_rng(0).standard_normal((3, 4))
    np.testing.assert_array_equal(ops.fully_connected(x, np.eye(4), np.zeros(4)), x)
    out = ops.fully_connected(np.array([[1.0, 2.0]]), np.array([[1.0, 1.0], [1.0, -1.0]]), np.zeros(2))
    assert out.tolist() == [[3.0, -1.0]]
    with pytest.raises(ShapeMismatchError):
        ops.fully_connected(np.zeros((1, 3)), np.zeros((2, 2)), np.zeros(2))


def test_softmax_examples():
    assert ops.softmax(np.array([[0.0, 0.0]])).tolist() == [[0.5, 0.5]]
    p = ops.softmax(np.array([[1000.0, 0.0]]))
    assert np.all(np.isfinite(p)) and p[0, 0] == 1.0 and p[0, 1] == pytest.approx(0.0, abs=1e-300)
    np.testing.assert_allclose(ops.softmax(np.array([[math.log(2), 0.0]])), [[2 / 3, 1 / 3]], rtol=1e-15)


@given(
    hnp.arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 20)), elements=st.floats(-50, 50)),
    st.floats(-100, 100),
)
def test_softmax_properties(z, shift):
    p = ops.softmax(z)
    np.testing.assert_allclose(p.sum(axis=1), 1, atol=1e-6)
    np.testing.assert_allclose(ops.softmax(z + shift), p, rtol=1e-9, atol=1e-12)
    np.testing.assert_allclose(np.exp(ops.log_softmax(z)), p, rtol=1e-9, atol=1e-12)


def test_dropout_examples():
    x = np.random.default_rng(0).standard_normal((4, 5)).astype(np.float32)
    np.testing.assert_array_equal(ops.dropout(x, 0.7, "infer"), x)
    np.testing.assert_array_equal(ops.dropout(x, 0.0, "train", seed=3), x)
    out = ops.dropout(np.ones(10**6, np.float32), 0.5, "train", seed=7)
    assert abs(out.mean() - 1) < 0.01
    assert abs((out == 0).mean() - 0.5) < 0.01
    np.testing.assert_array_equal(out, ops.dropout(np.ones(10**6, np.float32), 0.5, "train", seed=7))


@pytest.mark.parametrize("rate", [-0.1, 1.0, 1.5])
def test_dropout_rejects_bad_rate(rate):
    with pytest.raises(ValueError):
        ops.dropout(np.ones(3), rate, "train")
