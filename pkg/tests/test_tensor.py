import io
import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from tripse import tensor as T
from tripse.tensor import (
    BatchNormState,
    ConvParams,
    DegenerateBatchError,
    GraphError,
    LinearParams,
    Normal,
    ShapeError,
    Tensor,
)


def rand(rng, shape, dtype=np.float64, requires_grad=False):
    return Tensor(rng.standard_normal(shape).astype(dtype), requires_grad=requires_grad)


# ---------------------------------------------------------------------------
# construction


def test_tensor_new_fills():
    assert np.array_equal(T.tensor_new((2, 2), "zeros").data, np.zeros((2, 2)))
    assert np.array_equal(T.tensor_new((3,), 1.5).data, [1.5, 1.5, 1.5])
    a = T.tensor_new((4,), Normal(0, 1, seed=7)).data
    b = T.tensor_new((4,), Normal(0, 1, seed=7)).data
    assert a.tobytes() == b.tobytes()
    assert a.dtype == np.float32


@pytest.mark.parametrize("shape", [(0,), (2, 0, 3), ()])
def test_invalid_shapes(shape):
    with pytest.raises(ShapeError):
        T.tensor_new(shape)


def test_overflowing_shape():
    with pytest.raises(ShapeError):
        T.check_shape((2**40, 2**40))


# ---------------------------------------------------------------------------
# permute


def test_permute_identity_is_bitwise():
    x = rand(np.random.default_rng(0), (2, 3, 4, 5), np.float32)
    assert T.permute(x, (0, 1, 2, 3)).data.tobytes() == x.data.tobytes()


def test_permute_shape_and_inverse():
    x = rand(np.random.default_rng(1), (2, 3, 4))
    y = T.permute(x, (2, 0, 1))
    assert y.shape == (4, 2, 3)
    back = T.permute(y, T.inverse_permutation((2, 0, 1)))
    assert back.data.tobytes() == x.data.tobytes()


def test_permute_single_element():
    x3 = Tensor(np.arange(2 * 3 * 4, dtype=np.float32).reshape(2, 3, 4))
    y = T.permute(x3, (2, 0, 1))
    # element at old index (1, 2, 3) lands at (3, 1, 2)
    assert y.data[3, 1, 2] == x3.data[1, 2, 3]
    assert np.array_equal(y.data, oracles.permute(x3.data, (2, 0, 1)))


def test_permute_rejects_bad_order():
    x = rand(np.random.default_rng(0), (2, 3))
    with pytest.raises(ValueError):
        T.permute(x, (0, 0))


@settings(max_examples=40, deadline=None)
@given(order=st.permutations([0, 1, 2, 3]), seed=st.integers(0, 2**16))
def test_permute_roundtrip_property(order, seed):
    x = rand(np.random.default_rng(seed), (2, 3, 4, 5), np.float32)
    back = T.permute(T.permute(x, order), T.inverse_permutation(order))
    assert back.data.tobytes() == x.data.tobytes()


# ---------------------------------------------------------------------------
# conv2d


def test_conv_identity_kernel():
    p = ConvParams(1, 1, 1, bias=True)
    p.weight.data[...] = 1
    x = rand(np.random.default_rng(0), (2, 1, 4, 5), np.float32)
    assert np.array_equal(T.conv2d(x, p).data, x.data)


def test_conv_ones_kernel_border_values():
    p = ConvParams(1, 1, 3, padding=1, bias=False)
    p.weight.data[...] = 1
    out = T.conv2d(Tensor(np.ones((1, 1, 5, 5))), p).data[0, 0]
    assert out[2, 2] == 9
    assert out[0, 0] == out[0, 4] == out[4, 0] == out[4, 4] == 4
    assert out[0, 2] == 6


def test_conv_channel_mismatch():
    p = ConvParams(3, 2, 3)
    with pytest.raises(ShapeError):
        T.conv2d(Tensor(np.zeros((1, 2, 5, 5))), p)


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1)])
def test_conv_matches_oracle(stride, pad):
    rng = np.random.default_rng(stride * 10 + pad)
    p = ConvParams(3, 2, 3, stride, pad, rng=rng)
    p.bias.data[...] = rng.standard_normal(2)
    x = rand(rng, (2, 3, 6, 7), np.float32)
    ref = oracles.conv2d(x.data, p.weight.data, p.bias.data, stride, pad)
    np.testing.assert_allclose(T.conv2d(x, p).data, ref, atol=1e-5)


def test_conv_weight_gradient_finite_difference():
    rng = np.random.default_rng(3)
    p = ConvParams(2, 3, 3, 1, 1, rng=rng).astype(np.float64)
    x = rand(rng, (2, 2, 5, 5), requires_grad=True)
    err = T.finite_diff_check(lambda: T.conv2d(x, p).sum(), [x, p.weight, p.bias])
    assert err < 1e-4


# ---------------------------------------------------------------------------
# batch norm


def test_batchnorm_eval_identity():
    s = BatchNormState(3).eval()
    x = rand(np.random.default_rng(0), (2, 3, 4, 4), np.float32)
    np.testing.assert_allclose(T.batchnorm2d(x, s).data, x.data / np.sqrt(1 + 1e-5), rtol=1e-6)
    np.testing.assert_allclose(T.batchnorm2d(x, s).data, x.data, atol=1e-4)


def test_batchnorm_constant_input_gives_beta():
    s = BatchNormState(2)
    s.beta.data[...] = [0.25, -1.5]
    out = T.batchnorm2d(Tensor(np.full((2, 2, 3, 3), 4.0, dtype=np.float32)), s).data
    np.testing.assert_array_equal(out[:, 0], 0.25)
    np.testing.assert_array_equal(out[:, 1], -1.5)


def test_batchnorm_training_statistics():
    s = BatchNormState(4)
    x = Tensor(np.random.default_rng(5).normal(3.0, 2.0, (8, 4, 5, 5)).astype(np.float32))
    out = T.batchnorm2d(x, s).data.astype(np.float64)
    assert np.all(np.abs(out.mean(axis=(0, 2, 3))) < 1e-5)
    assert np.all(np.abs(out.var(axis=(0, 2, 3)) - 1) < 1e-4)
    # running stats moved 10% of the way toward the batch statistics
    mu = x.data.astype(np.float64).mean(axis=(0, 2, 3))
    np.testing.assert_allclose(s.running_mean, 0.1 * mu, rtol=1e-5)
    assert np.all(s.running_var >= 0)


def test_batchnorm_degenerate_batch():
    with pytest.raises(DegenerateBatchError):
        T.batchnorm2d(Tensor(np.ones((1, 2, 1, 1))), BatchNormState(2))


def test_batchnorm_training_gradient():
    rng = np.random.default_rng(2)
    s = BatchNormState(3).astype(np.float64)
    s.gamma.data[...] = rng.uniform(0.5, 1.5, 3)
    x = rand(rng, (2, 3, 3, 3), requires_grad=True)
    w = Tensor(rng.standard_normal((2, 3, 3, 3)))
    # training mode updates running stats, which the loss never reads
    err = T.finite_diff_check(lambda: (T.batchnorm2d(x, s) * w).sum(), [x, s.gamma, s.beta])
    assert err < 1e-4


# ---------------------------------------------------------------------------
# reductions, pooling, linear, activations


def test_reduce_two_elements():
    x = Tensor(np.array([[1.0, 3.0]]))
    assert T.reduce_over_axis(x, 1, "max").data.tolist() == [3.0]
    assert T.reduce_over_axis(x, 1, "mean").data.tolist() == [2.0]


def test_reduce_constant():
    x = Tensor(np.full((2, 3, 4), 2.5))
    for mode in ("max", "mean"):
        np.testing.assert_array_equal(T.reduce_over_axis(x, 1, mode).data, 2.5)


def test_reduce_matches_oracle():
    x = rand(np.random.default_rng(4), (2, 3, 4))
    for mode in ("max", "mean"):
        np.testing.assert_allclose(T.reduce_over_axis(x, 1, mode).data, oracles.reduce_axis(x.data, 1, mode),
                                   atol=1e-12)


def test_reduce_max_gradient_first_occurrence():
    x = Tensor(np.array([[2.0, 5.0, 5.0, 1.0]]), requires_grad=True)
    T.reduce_over_axis(x, 1, "max").sum().backward()
    assert x.grad.tolist() == [[0.0, 1.0, 0.0, 0.0]]


def test_reduce_keepdims_and_bad_axis():
    x = rand(np.random.default_rng(0), (2, 3, 4))
    assert T.reduce_over_axis(x, 1, "mean", keepdims=True).shape == (2, 1, 4)
    with pytest.raises(ShapeError):
        T.reduce_over_axis(x, 3, "max")


def test_mean_times_extent_equals_sum():
    x = rand(np.random.default_rng(8), (3, 5, 4))
    for axis in range(3):
        m = T.reduce_over_axis(x, axis, "mean").data * x.shape[axis]
        np.testing.assert_allclose(m, oracles.sum_axis(x.data, axis), atol=1e-6)


def test_global_avg_pool():
    assert np.array_equal(T.global_avg_pool(Tensor(np.ones((2, 3, 4, 4)))).data, np.ones((2, 3)))
    x = rand(np.random.default_rng(0), (2, 3, 1, 1))
    assert np.array_equal(T.global_avg_pool(x).data, x.data[:, :, 0, 0])
    y = rand(np.random.default_rng(1), (2, 3, 5, 4), np.float32)
    np.testing.assert_allclose(T.global_avg_pool(y).data, oracles.global_avg_pool(y.data), atol=1e-6)


def test_linear_identity_and_bias():
    p = LinearParams(3, 3)
    p.weight.data[...] = np.eye(3)
    x = rand(np.random.default_rng(0), (4, 3), np.float32)
    np.testing.assert_array_equal(T.linear(x, p).data, x.data)
    p.weight.data[...] = 0
    p.bias.data[...] = [1, 2, 3]
    np.testing.assert_array_equal(T.linear(x, p).data, np.tile([1, 2, 3], (4, 1)))


def test_linear_gradcheck():
    rng = np.random.default_rng(6)
    p = LinearParams(4, 3, rng).astype(np.float64)
    x = rand(rng, (5, 4), requires_grad=True)
    w = Tensor(rng.standard_normal((5, 3)))
    assert T.finite_diff_check(lambda: (T.linear(x, p) * w).sum(), [x, p.weight, p.bias]) < 1e-4


def test_linear_shape_mismatch():
    with pytest.raises(ShapeError):
        T.linear(Tensor(np.zeros((2, 5))), LinearParams(4, 3))


def test_activations():
    assert T.sigmoid(Tensor(np.zeros(1))).item() == 0.5
    assert T.relu(Tensor(np.array([-2.0, 3.0]))).data.tolist() == [0.0, 3.0]
    for dt in (np.float32, np.float64):
        s = T.sigmoid(Tensor(np.array([-40.0, 40.0], dtype=dt))).data
        assert np.all(np.isfinite(s))
        # strictly inside (0, 1) is not representable at +40; see the closed bound
        assert 0 < s[0] < 1 and 0 < s[1] <= 1
    v = np.linspace(-15, 15, 61)
    s = T.sigmoid(Tensor(v)).data
    assert np.all((s > 0) & (s < 1))


# ---------------------------------------------------------------------------
# elementwise and concat


def test_ew_identities():
    x = rand(np.random.default_rng(0), (2, 3, 4), np.float32)
    assert np.array_equal((x + Tensor(np.zeros((2, 3, 4)))).data, x.data)
    assert np.array_equal((x * Tensor(np.ones((2, 3, 4)))).data, x.data)


def test_ew_broadcast_matches_loop():
    rng = np.random.default_rng(1)
    x, y = rand(rng, (2, 3, 4)), rand(rng, (2, 1, 1))
    out = T.ew(x, y, "mul").data
    for i, j, k in itertools.product(range(2), range(3), range(4)):
        assert out[i, j, k] == x.data[i, j, k] * y.data[i, 0, 0]


def test_ew_broadcast_gradient():
    rng = np.random.default_rng(2)
    x, y = rand(rng, (2, 3, 4)), rand(rng, (2, 1, 1), requires_grad=True)
    (x * y).sum().backward()
    np.testing.assert_allclose(y.grad[:, 0, 0], x.data.sum(axis=(1, 2)))
    num = oracles.central_difference(lambda v: float((x.data * v).sum()), y.data)
    np.testing.assert_allclose(y.grad, num, rtol=1e-6)


def test_ew_rejects_incompatible():
    with pytest.raises(ShapeError):
        T.ew(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 4))), "add")


def test_concat():
    x = rand(np.random.default_rng(0), (1, 3, 3))
    assert T.concat([x], 0).data.tobytes() == x.data.tobytes()
    y = rand(np.random.default_rng(1), (1, 3, 3))
    z = T.concat([x, y], 0)
    assert z.shape == (2, 3, 3)
    assert z.data[:1].tobytes() == x.data.tobytes() and z.data[1:].tobytes() == y.data.tobytes()
    with pytest.raises(ShapeError):
        T.concat([x, rand(np.random.default_rng(2), (1, 2, 3))], 0)


def test_concat_gradient_slices():
    rng = np.random.default_rng(3)
    a, b = rand(rng, (2, 1, 3), requires_grad=True), rand(rng, (2, 2, 3), requires_grad=True)
    w = rng.standard_normal((2, 3, 3))
    (T.concat([a, b], 1) * Tensor(w)).sum().backward()
    np.testing.assert_array_equal(a.grad, w[:, :1])
    np.testing.assert_array_equal(b.grad, w[:, 1:])


# ---------------------------------------------------------------------------
# backward engine


def test_backward_sum_and_square():
    x = rand(np.random.default_rng(0), (3, 4), requires_grad=True)
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, np.ones((3, 4)))
    x.zero_grad()
    (x * x).sum().backward()
    np.testing.assert_allclose(x.grad, 2 * x.data)


def test_backward_accumulates_fan_out():
    x = rand(np.random.default_rng(1), (3,), requires_grad=True)
    y = x + x * 3.0
    y.sum().backward()
    np.testing.assert_allclose(x.grad, 4.0)


def test_backward_accumulates_across_calls_until_reset():
    x = rand(np.random.default_rng(1), (3,), requires_grad=True)
    x.sum().backward()
    x.sum().backward()
    np.testing.assert_allclose(x.grad, 2.0)


def test_backward_errors():
    x = rand(np.random.default_rng(0), (3,), requires_grad=True)
    with pytest.raises(GraphError):
        (x * 2.0).backward()
    root = x.sum()
    root.backward()
    with pytest.raises(GraphError):
        root.backward()
    with pytest.raises(GraphError):
        Tensor(np.ones(1)).backward()


def test_no_grad_skips_tape():
    x = rand(np.random.default_rng(0), (3,), requires_grad=True)
    with T.no_grad():
        y = (x * 2.0).sum()
    assert y.node is None


# ---------------------------------------------------------------------------
# finite_diff_check itself


def test_finite_diff_linear_is_exact():
    rng = np.random.default_rng(0)
    x = rand(rng, (6,), requires_grad=True)
    w = Tensor(rng.standard_normal(6))
    assert T.finite_diff_check(lambda: (x * w).sum(), x, 1e-3) < 1e-9


def test_finite_diff_sigmoid_sum():
    x = rand(np.random.default_rng(1), (10,), requires_grad=True)
    assert T.finite_diff_check(lambda: T.sigmoid(x).sum(), x, 1e-5) < 1e-6


def test_finite_diff_conv_bn_sigmoid_composite():
    rng = np.random.default_rng(2)
    p = ConvParams(2, 3, 3, 1, 1, rng=rng).astype(np.float64)
    s = BatchNormState(3).astype(np.float64).eval()
    s.running_mean[...] = [0.1, -0.2, 0.05]
    s.running_var[...] = [0.8, 1.2, 1.0]
    x = rand(rng, (2, 2, 4, 4), requires_grad=True)
    w = Tensor(rng.standard_normal((2, 3, 4, 4)))
    f = lambda: (T.sigmoid(T.batchnorm2d(T.conv2d(x, p), s)) * w).sum()
    assert T.finite_diff_check(f, [x, p.weight, p.bias, s.gamma, s.beta]) < 1e-4


def test_finite_diff_detects_corruption():
    x = rand(np.random.default_rng(3), (5,), requires_grad=True)
    with T.corrupted_backward():
        assert T.finite_diff_check(lambda: T.sigmoid(x).sum(), x, 1e-5) > 1e-3


def test_every_primitive_gradchecks():
    """Autodiff vs central differences for each op on shapes up to (2, 4, 6, 6)."""
    rng = np.random.default_rng(9)
    x = rand(rng, (2, 4, 6, 6), requires_grad=True)
    w = Tensor(rng.standard_normal((2, 4, 6, 6)))
    cases = {
        "permute": lambda: (T.permute(x, (0, 3, 1, 2)) * T.permute(w, (0, 3, 1, 2))).sum(),
        "relu": lambda: (T.relu(x) * w).sum(),
        "sigmoid": lambda: (T.sigmoid(x) * w).sum(),
        "max": lambda: (T.reduce_over_axis(x, 1, "max") * Tensor(w.data[:, 0])).sum(),
        "mean": lambda: (T.reduce_over_axis(x, 2, "mean") * Tensor(w.data[:, :, 0])).sum(),
        "gap": lambda: (T.global_avg_pool(x) * Tensor(w.data[:, :, 0, 0])).sum(),
        "concat": lambda: (T.concat([x, x * 2.0], 1) * Tensor(np.concatenate([w.data, w.data], 1))).sum(),
        "reshape": lambda: (T.reshape(x, (2, 4, 36)) * Tensor(w.data.reshape(2, 4, 36))).sum(),
        "mean_all": lambda: (x * w).mean(),
    }
    for name, f in cases.items():
        assert T.finite_diff_check(f, x) < 1e-4, name


def test_forward_outputs_finite():
    rng = np.random.default_rng(10)
    x = Tensor((rng.standard_normal((2, 3, 5, 5)) * 50).astype(np.float32))
    p = ConvParams(3, 4, 3, 1, 1, rng=rng)
    s = BatchNormState(4)
    outs = [T.sigmoid(x), T.relu(x), T.conv2d(x, p), T.batchnorm2d(T.conv2d(x, p), s), T.global_avg_pool(x)]
    assert all(np.all(np.isfinite(o.data)) for o in outs)


# ---------------------------------------------------------------------------
# serialization


def test_tensor_serialization_roundtrip():
    x = np.random.default_rng(0).standard_normal((2, 3, 4)).astype(np.float32)
    raw = T.tensor_to_bytes(x)
    assert raw[:4] == b"TSR1"
    assert int.from_bytes(raw[4:8], "little") == 3
    assert [int.from_bytes(raw[8 + 4 * i:12 + 4 * i], "little") for i in range(3)] == [2, 3, 4]
    assert len(raw) == 4 + 4 + 12 + 4 * 24
    assert T.tensor_from_bytes(raw).tobytes() == x.tobytes()
    with pytest.raises(T.FormatError):
        T.tensor_from_bytes(raw[:-3])
    with pytest.raises(T.FormatError):
        T.read_tensor(io.BytesIO(b"XXXX" + raw[4:]))


def test_module_astype_shadow_copy():
    p = ConvParams(2, 3, 3)
    q = p.astype(np.float64)
    assert q.weight.dtype == np.float64 and p.weight.dtype == np.float32
    np.testing.assert_array_equal(q.weight.data, p.weight.data)
