import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from saunet import tensor as T
from saunet.tensor import Tensor

from oracles import conv2d_loop, pool_loop, transpose_conv2d_loop, upsample_loop


def leaf(a, dtype=np.float64):
    return Tensor(np.asarray(a, dtype=dtype), requires_grad=True)


def grad_of(fn, *xs):
    tape = T.Tape()
    with T.recording(tape):
        out = fn()
    tape.backward(out, leaves=xs)
    return [x.grad for x in xs]


# -- elementwise -------------------------------------------------------------

def test_mul_small_example():
    out = T.mul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[2.0, 2.0], [2.0, 2.0]]))
    np.testing.assert_array_equal(out.data, [[2, 4], [6, 8]])


def test_add_zero_is_identity(rng):
    x = Tensor(rng.standard_normal((2, 3)))
    np.testing.assert_array_equal(T.add(x, 0).data, x.data)


def test_mul_matches_elementwise_loop(rng):
    a, b = rng.standard_normal((2, 3, 4, 4)), rng.standard_normal((2, 3, 4, 4))
    ref = np.empty_like(a)
    for idx in np.ndindex(a.shape):
        ref[idx] = a[idx] * b[idx]
    np.testing.assert_array_equal(T.mul(Tensor(a), Tensor(b)).data, ref)


def test_single_channel_map_broadcasts_over_channels(rng):
    x, m = rng.standard_normal((2, 3, 4, 4)), rng.standard_normal((2, 1, 4, 4))
    a, b = leaf(x), leaf(m)
    ga, gb = grad_of(lambda: T.sum(T.mul(a, b)), a, b)
    np.testing.assert_allclose(ga, np.broadcast_to(m, x.shape))
    np.testing.assert_allclose(gb, x.sum(axis=1, keepdims=True))


def test_shape_mismatch_names_both_shapes():
    with pytest.raises(ValueError, match=r"\(2, 3\).*\(4,\)"):
        T.add(Tensor(np.ones((2, 3))), Tensor(np.ones(4)))


def test_ewise_dispatch_and_unknown_op():
    x = Tensor(np.array([-2.0, 0.5, 3.0]))
    np.testing.assert_array_equal(T.ewise("clamp", x, (-1.0, 1.0)).data, [-1, 0.5, 1])
    np.testing.assert_array_equal(T.ewise("scale", x, 2.0).data, [-4, 1, 6])
    with pytest.raises(ValueError):
        T.ewise("pow", x, 2)


# -- concat -----------------------------------------------------------------

def test_concat_shapes_and_identity(rng):
    a, b = Tensor(rng.standard_normal((1, 2, 4, 4))), Tensor(rng.standard_normal((1, 3, 4, 4)))
    assert T.concat_channels([a, b]).shape == (1, 5, 4, 4)
    assert T.concat_channels([a]) is a or np.array_equal(T.concat_channels([a]).data, a.data)


def test_concat_spatial_mismatch():
    with pytest.raises(ValueError):
        T.concat_channels([Tensor(np.ones((1, 1, 4, 4))), Tensor(np.ones((1, 1, 4, 3)))])


def test_concat_routes_gradient_slices(rng):
    a, b = leaf(rng.standard_normal((1, 2, 3, 3))), leaf(rng.standard_normal((1, 3, 3, 3)))
    w = rng.standard_normal((1, 5, 3, 3))
    ga, gb = grad_of(lambda: T.sum(T.mul(T.concat_channels([a, b]), Tensor(w))), a, b)
    np.testing.assert_array_equal(ga, w[:, :2])
    np.testing.assert_array_equal(gb, w[:, 2:])


# -- conv -------------------------------------------------------------------

def test_conv_sum_of_ones():
    out = T.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 2, 2))))
    np.testing.assert_array_equal(out.data, np.full((1, 1, 2, 2), 4.0))


def test_conv_scalar_kernel_doubles(rng):
    x = rng.standard_normal((2, 1, 4, 5)).astype(np.float32)
    out = T.conv2d(Tensor(x), Tensor(np.full((1, 1, 1, 1), 2.0, np.float32)))
    np.testing.assert_array_equal(out.data, 2 * x)


def test_conv_vs_loop_f32(rng):
    x = rng.standard_normal((1, 2, 5, 5)).astype(np.float32)
    # weights at He-init scale keep outputs O(1), where an absolute 1e-6 is meaningful in f32
    w = (rng.standard_normal((3, 2, 3, 3)) * np.sqrt(2 / 18)).astype(np.float32)
    b = rng.standard_normal(3).astype(np.float32)
    out = T.conv2d(Tensor(x), Tensor(w), Tensor(b))
    ref = conv2d_loop(x.astype(np.float64), w.astype(np.float64), b.astype(np.float64))
    assert np.abs(out.data - ref).max() < 1e-6


@given(
    n=st.integers(1, 2), cin=st.integers(1, 4), cout=st.integers(1, 3),
    h=st.integers(3, 8), w=st.integers(3, 8), k=st.sampled_from([1, 2, 3]),
    stride=st.integers(1, 2), pad=st.integers(0, 1), seed=st.integers(0, 10**6),
)
def test_conv_equals_loop_exactly_on_integer_data(n, cin, cout, h, w, k, stride, pad, seed):
    r = np.random.default_rng(seed)
    x = r.integers(-8, 9, (n, cin, h, w)).astype(np.float64)
    wt = r.integers(-8, 9, (cout, cin, k, k)).astype(np.float64)
    b = r.integers(-8, 9, cout).astype(np.float64)
    out = T.conv2d(Tensor(x), Tensor(wt), Tensor(b), stride=stride, pad=pad)
    np.testing.assert_array_equal(out.data, conv2d_loop(x, wt, b, stride, pad))


def test_conv_channel_mismatch():
    with pytest.raises(ValueError, match="channels"):
        T.conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))))


# -- transpose conv -----------------------------------------------------------

def test_transpose_conv_single_tap():
    out = T.transpose_conv2d(Tensor(np.full((1, 1, 1, 1), 3.0)), Tensor(np.ones((1, 1, 2, 2))), stride=2)
    np.testing.assert_array_equal(out.data, np.full((1, 1, 2, 2), 3.0))


def test_transpose_conv_zero_input():
    out = T.transpose_conv2d(Tensor(np.zeros((1, 2, 3, 3))), Tensor(np.ones((2, 4, 2, 2))))
    assert out.shape == (1, 4, 6, 6) and not out.data.any()


def test_transpose_conv_is_conv_input_adjoint(rng):
    # transpose_conv(y, w) == d/dx <conv(x, w), y>
    w = rng.standard_normal((3, 2, 2, 2))  # conv layout (Cout=3, Cin=2)
    y = rng.standard_normal((2, 3, 4, 4))
    x = leaf(np.zeros((2, 2, 8, 8)))
    (gx,) = grad_of(lambda: T.sum(T.mul(T.conv2d(x, Tensor(w), stride=2), Tensor(y))), x)
    out = T.transpose_conv2d(Tensor(y), Tensor(w), stride=2)  # (Cin=3, Cout=2) layout
    np.testing.assert_allclose(out.data, gx, atol=1e-12)
    np.testing.assert_allclose(out.data, transpose_conv2d_loop(y, w), atol=1e-12)


def test_transpose_conv_rejects_stride3():
    with pytest.raises(ValueError, match="stride"):
        T.transpose_conv2d(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 1, 2, 2))), stride=3)


# -- pooling ------------------------------------------------------------------

def test_maxpool_examples():
    np.testing.assert_array_equal(T.maxpool2d(Tensor(np.array([[[[1.0, 2], [3, 4]]]]))).data, [[[[4]]]])
    x = np.arange(1, 17, dtype=np.float64).reshape(1, 1, 4, 4)
    np.testing.assert_array_equal(T.maxpool2d(Tensor(x)).data[0, 0], [[6, 8], [14, 16]])


def test_maxpool_gradient_one_per_window(rng):
    x = leaf(rng.permutation(64).reshape(1, 1, 8, 8).astype(np.float64))
    (g,) = grad_of(lambda: T.sum(T.maxpool2d(x)), x)
    windows = g.reshape(4, 2, 4, 2).transpose(0, 2, 1, 3).reshape(16, 4)
    assert ((windows != 0).sum(axis=1) == 1).all()


def test_avgpool_examples():
    np.testing.assert_array_equal(T.avgpool2d(Tensor(np.array([[[[1.0, 2], [3, 4]]]]))).data, [[[[2.5]]]])
    np.testing.assert_array_equal(T.avgpool2d(Tensor(np.full((1, 2, 4, 6), 7.0))).data, np.full((1, 2, 2, 3), 7.0))


def test_avgpool_gradient_quarter(rng):
    x = leaf(rng.standard_normal((1, 1, 4, 4)))
    (g,) = grad_of(lambda: T.sum(T.avgpool2d(x)), x)
    np.testing.assert_array_equal(g, np.full((1, 1, 4, 4), 0.25))


def test_odd_sizes_pad_right_bottom():
    x = np.arange(1, 10, dtype=np.float64).reshape(1, 1, 3, 3)
    np.testing.assert_array_equal(T.maxpool2d(Tensor(x)).data[0, 0], [[5, 6], [8, 9]])
    # true window sizes at the ragged edge
    np.testing.assert_array_equal(T.avgpool2d(Tensor(x)).data[0, 0], [[3, 4.5], [7.5, 9]])


@given(n=st.integers(1, 2), c=st.integers(1, 4), h=st.integers(1, 8), w=st.integers(1, 8), seed=st.integers(0, 10**6))
def test_pooling_equals_loop_exactly(n, c, h, w, seed):
    r = np.random.default_rng(seed)
    x = r.integers(-50, 50, (n, c, h, w)).astype(np.float64)
    np.testing.assert_array_equal(T.maxpool2d(Tensor(x)).data, pool_loop(x, 2, "max"))
    np.testing.assert_array_equal(T.avgpool2d(Tensor(x)).data, pool_loop(x, 2, "avg"))


def test_global_avg_pool(rng):
    assert T.global_avg_pool(Tensor(np.full((1, 2, 3, 3), 5.0))).data.tolist() == [[5.0, 5.0]]
    x = rng.standard_normal((2, 3, 1, 1))
    np.testing.assert_array_equal(T.global_avg_pool(Tensor(x)).data, x[:, :, 0, 0])
    y = rng.integers(-9, 9, (2, 3, 4, 4)).astype(np.float64)
    ref = np.array([[sum(y[a, c].ravel()) / 16 for c in range(3)] for a in range(2)])
    np.testing.assert_array_equal(T.global_avg_pool(Tensor(y)).data, ref)


# -- upsampling -------------------------------------------------------------

def test_upsample_hand_evaluated():
    out = T.bilinear_upsample(Tensor(np.array([[[[0.0, 1.0]]]])), 1, 4)
    np.testing.assert_allclose(out.data[0, 0, 0], [0, 1 / 3, 2 / 3, 1], atol=1e-15)


def test_upsample_constant_and_identity(rng):
    np.testing.assert_allclose(T.bilinear_upsample(Tensor(np.full((1, 1, 3, 3), 2.5)), 7, 5).data, 2.5)
    x = Tensor(rng.standard_normal((1, 2, 4, 4)))
    np.testing.assert_array_equal(T.bilinear_upsample(x, 4, 4).data, x.data)


def test_upsample_rejects_downscale():
    with pytest.raises(ValueError):
        T.bilinear_upsample(Tensor(np.ones((1, 1, 4, 4))), 2, 4)


@given(h=st.integers(1, 4), w=st.integers(1, 4), fy=st.integers(1, 2), fx=st.integers(1, 2), seed=st.integers(0, 10**6))
def test_upsample_equals_loop_exactly_on_dyadic_grids(h, w, fy, fx, seed):
    # sizes n -> 2n-1 put every sample on a half-pixel, so the weights are exact in binary
    oh, ow = (2 * h - 1 if fy == 2 and h > 1 else h), (2 * w - 1 if fx == 2 and w > 1 else w)
    x = np.random.default_rng(seed).integers(-64, 64, (2, 2, h, w)).astype(np.float64)
    np.testing.assert_array_equal(T.bilinear_upsample(Tensor(x), oh, ow).data, upsample_loop(x, oh, ow))


@given(h=st.integers(2, 4), w=st.integers(2, 4), oh=st.integers(4, 8), ow=st.integers(4, 8), seed=st.integers(0, 10**6))
def test_upsample_equals_loop_on_general_grids(h, w, oh, ow, seed):
    x = np.random.default_rng(seed).standard_normal((2, 2, h, w))
    np.testing.assert_array_equal(T.bilinear_upsample(Tensor(x), oh, ow).data, upsample_loop(x, oh, ow))


# -- batchnorm ---------------------------------------------------------------

def _stats(c, dtype=np.float64, count=0):
    return T.RunningStats(Tensor(np.zeros(c, dtype)), Tensor(np.ones(c, dtype)), Tensor(np.full(1, count, dtype)))


def test_batchnorm_constant_channel_gives_beta():
    x = Tensor(np.broadcast_to(np.array([3.0, -1.0])[None, :, None, None], (2, 2, 3, 3)).copy())
    out = T.batchnorm2d(x, Tensor(np.array([2.0, 5.0])), Tensor(np.array([0.5, -0.25])), _stats(2))
    np.testing.assert_allclose(out.data[:, 0], 0.5)
    np.testing.assert_allclose(out.data[:, 1], -0.25)


def test_batchnorm_train_output_is_standardized(rng):
    x = Tensor(rng.standard_normal((4, 3, 5, 5)) * 3 + 2)
    out = T.batchnorm2d(x, Tensor(np.ones(3)), Tensor(np.zeros(3)), _stats(3)).data
    assert np.abs(out.mean(axis=(0, 2, 3))).max() < 1e-5
    assert np.abs(out.var(axis=(0, 2, 3)) - 1).max() < 1e-5 * 10  # eps shrinks variance slightly


def test_batchnorm_running_stats_recurrence(rng):
    x = rng.standard_normal((2, 1, 3, 3)) + 4.0
    stats = _stats(1)
    m = 0.1
    T.batchnorm2d(Tensor(x), Tensor(np.ones(1)), Tensor(np.zeros(1)), stats, momentum=m)
    vals = x.ravel()
    mean = sum(vals) / len(vals)
    var_unbiased = sum((v - mean) ** 2 for v in vals) / (len(vals) - 1)
    assert stats.mean.data[0] == pytest.approx((1 - m) * 0 + m * mean, abs=1e-12)
    assert stats.var.data[0] == pytest.approx((1 - m) * 1 + m * var_unbiased, abs=1e-12)
    assert stats.count.data[0] == 1


def test_batchnorm_eval_before_update_raises():
    with pytest.raises(RuntimeError):
        T.batchnorm2d(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones(1)), Tensor(np.zeros(1)), _stats(1), training=False)


def test_batchnorm_train_needs_two_values():
    with pytest.raises(ValueError):
        T.batchnorm2d(Tensor(np.ones((1, 1, 1, 1))), Tensor(np.ones(1)), Tensor(np.zeros(1)), _stats(1))


# -- activations -------------------------------------------------------------

def test_activation_examples():
    assert T.activation("sigmoid", Tensor(np.zeros(1))).data[0] == 0.5
    sm = T.activation("softmax_channels", Tensor(np.zeros((1, 4, 2, 2)))).data
    np.testing.assert_allclose(sm, 0.25)
    x = leaf(np.zeros((1, 1, 1, 1)))
    (g,) = grad_of(lambda: T.sum(T.sigmoid(x)), x)
    assert g.item() == pytest.approx(0.25)
    h = 1e-5
    fd = (1 / (1 + np.exp(-h)) - 1 / (1 + np.exp(h))) / (2 * h)
    assert fd == pytest.approx(0.25, rel=1e-8)


@given(seed=st.integers(0, 10**6), k=st.integers(2, 6), scale=st.floats(0.1, 30.0))
def test_softmax_sums_to_one_and_sigmoid_in_open_interval(seed, k, scale):
    x = np.random.default_rng(seed).standard_normal((2, k, 3, 3)) * scale
    p = T.softmax_channels(Tensor(x)).data
    assert np.abs(p.sum(axis=1) - 1).max() < 1e-6
    s = T.sigmoid(Tensor(np.random.default_rng(seed).standard_normal(20) * 5)).data
    assert ((s > 0) & (s < 1)).all()


# -- linear ------------------------------------------------------------------

def test_linear_examples(rng):
    x = rng.standard_normal((3, 4))
    np.testing.assert_array_equal(T.linear(Tensor(x), Tensor(np.eye(4)), Tensor(np.zeros(4))).data, x)
    b = rng.standard_normal(2)
    np.testing.assert_array_equal(T.linear(Tensor(x), Tensor(np.zeros((2, 4))), Tensor(b)).data, np.tile(b, (3, 1)))
    w = rng.standard_normal((2, 4))
    ref = np.array([[sum(x[i, k] * w[o, k] for k in range(4)) + b[o] for o in range(2)] for i in range(3)])
    np.testing.assert_allclose(T.linear(Tensor(x), Tensor(w), Tensor(b)).data, ref, atol=1e-12)


def test_linear_dim_mismatch():
    with pytest.raises(ValueError):
        T.linear(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 4))))


# -- backward ----------------------------------------------------------------

def test_backward_examples():
    x = leaf(np.array([[1.0, 2.0]]))
    (g,) = grad_of(lambda: T.sum(x), x)
    np.testing.assert_array_equal(g, [[1, 1]])
    x = leaf(np.array([[1.0, 2.0]]))
    (g,) = grad_of(lambda: T.sum(T.mul(x, x)), x)
    np.testing.assert_array_equal(g, [[2, 4]])


def test_backward_non_scalar_raises():
    x = leaf(np.ones(3))
    tape = T.Tape()
    with T.recording(tape):
        y = T.scale(x, 2.0)
    with pytest.raises(ValueError, match="scalar"):
        tape.backward(y)


def test_non_participating_leaf_gets_zero_grad():
    x, unused = leaf(np.ones(3)), leaf(np.ones(2))
    _, gu = grad_of(lambda: T.sum(x), x, unused)
    np.testing.assert_array_equal(gu, 0)


def test_cleared_tape_frees_nodes():
    x = leaf(np.ones(3))
    tape = T.Tape()
    with T.recording(tape):
        y = T.sum(T.mul(x, x))
    assert len(tape) == 2
    tape.backward(y)
    assert len(tape) == 0 and y._node is None


def test_backward_visits_each_node_once():
    x = leaf(np.ones((1, 1, 2, 2)))
    tape = T.Tape()
    with T.recording(tape):
        y = T.sum(T.relu(T.scale(x, 3.0)))
    n = len(tape)
    visited = tape.backward(y)
    assert visited == ["sum", "relu", "scale"] and len(visited) == n


def test_composite_graph_vs_finite_differences(rng):
    from saunet.gradcheck import grad_check

    x = Tensor(rng.standard_normal((2, 2, 4, 4)))
    w = Tensor(rng.standard_normal((3, 2, 3, 3)))
    g, b = Tensor(rng.uniform(0.5, 1.5, 3)), Tensor(rng.standard_normal(3))
    proj = rng.standard_normal((2, 3, 4, 4))

    def f():
        st_ = _stats(3)
        y = T.relu(T.batchnorm2d(T.conv2d(x, w, pad=1), g, b, st_))
        return T.sum(T.mul(y, Tensor(proj)))

    assert grad_check(f, [x, w, g, b]).max_rel_err < 1e-4


def test_no_grad_records_nothing():
    x = leaf(np.ones(3))
    tape = T.Tape()
    with T.recording(tape), T.no_grad():
        T.sum(T.mul(x, x))
    assert len(tape) == 0


def test_dtype_guard():
    with pytest.raises(TypeError):
        Tensor(np.ones(2, dtype=np.float16), dtype=np.float16)
