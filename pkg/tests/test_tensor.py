import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from kvq import tensor as T
from kvq.errors import ContractError, DimensionError
from kvq.gradcheck import grad_check
from kvq.tensor import Tensor


def leaf(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


finite = st.floats(-3, 3, allow_nan=False, allow_infinity=False)


class TestForwardValues:
    """Forward results against plain numpy."""

    def test_elementwise(self, rng):
        a, b = rng.normal(size=(3, 4)), rng.uniform(0.5, 2.0, size=(3, 4))
        ta, tb = Tensor(a), Tensor(b)
        np.testing.assert_allclose((ta + tb).data, a + b)
        np.testing.assert_allclose((ta - tb).data, a - b)
        np.testing.assert_allclose((ta * tb).data, a * b)
        np.testing.assert_allclose((ta / tb).data, a / b)
        np.testing.assert_allclose(T.exp(ta).data, np.exp(a))
        np.testing.assert_allclose(T.log(tb).data, np.log(b))
        np.testing.assert_allclose(T.sqrt(tb).data, np.sqrt(b))
        np.testing.assert_allclose(T.tanh(ta).data, np.tanh(a))
        np.testing.assert_allclose(T.relu(ta).data, np.maximum(a, 0))
        np.testing.assert_allclose(T.power(tb, 1.5).data, b ** 1.5)

    def test_gelu_tanh_form(self):
        x = np.linspace(-4, 4, 33)
        expected = 0.5 * x * (1 + np.tanh(np.sqrt(2 / np.pi) * (x + 0.044715 * x ** 3)))
        np.testing.assert_allclose(T.gelu(Tensor(x)).data, expected, rtol=1e-12, atol=1e-14)

    def test_reductions_and_shapes(self, rng):
        a = rng.normal(size=(2, 3, 4))
        t = Tensor(a)
        np.testing.assert_allclose(T.sum(t, axis=1).data, a.sum(axis=1))
        np.testing.assert_allclose(T.mean(t, axis=(0, 2), keepdims=True).data, a.mean(axis=(0, 2), keepdims=True))
        np.testing.assert_array_equal(T.transpose(t, (2, 0, 1)).data, a.transpose(2, 0, 1))
        np.testing.assert_array_equal(T.swapaxes(t, 0, 2).data, np.swapaxes(a, 0, 2))
        np.testing.assert_array_equal(T.reshape(t, (6, 4)).data, a.reshape(6, 4))
        np.testing.assert_array_equal(T.concat([t, t], axis=1).data, np.concatenate([a, a], axis=1))
        np.testing.assert_array_equal(T.stack([t, t], axis=0).data, np.stack([a, a]))
        np.testing.assert_array_equal(T.gather(t, np.array([[2, 0]]), axis=2).data, np.take(a, [[2, 0]], axis=2))

    def test_matmul_linear(self, rng):
        a, b, w, bias = rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 4, 5)), rng.normal(size=(4, 6)), rng.normal(size=6)
        np.testing.assert_allclose(T.matmul(Tensor(a), Tensor(b)).data, a @ b)
        np.testing.assert_allclose(T.linear(Tensor(a), Tensor(w), Tensor(bias)).data, a @ w + bias)

    def test_layer_norm(self, rng):
        x = rng.normal(2.0, 3.0, size=(5, 8))
        g, b = rng.normal(size=8), rng.normal(size=8)
        mu = x.mean(-1, keepdims=True)
        var = x.var(-1, keepdims=True)
        expected = (x - mu) / np.sqrt(var + 1e-5) * g + b
        np.testing.assert_allclose(T.layer_norm(Tensor(x), Tensor(g), Tensor(b)).data, expected, rtol=1e-12)

    def test_avgpool(self, rng):
        x = rng.normal(size=(2, 4, 6))
        out = T.avgpool(Tensor(x), (2, 3), (1, 2)).data
        expected = x.reshape(2, 2, 2, 2, 3).mean(axis=(2, 4))
        np.testing.assert_allclose(out, expected)

    def test_resample_linear_ramp(self):
        # align-corners resampling reproduces a linear ramp exactly
        ramp = np.arange(4.0)[None, None, :] * np.ones((1, 3, 4))
        out = T.resample3d(Tensor(ramp), (1, 3, 7)).data
        np.testing.assert_allclose(out[0, 0], np.linspace(0, 3, 7), atol=1e-12)

    def test_resample_identity(self, rng):
        x = rng.normal(size=(2, 3, 4, 5))
        np.testing.assert_array_equal(T.resample3d(Tensor(x), (3, 4, 5)).data, x)


class TestBroadcastRule:
    def test_scalar_operand_allowed(self):
        out = Tensor(np.ones((2, 3))) * 2.0
        np.testing.assert_array_equal(out.data, 2 * np.ones((2, 3)))

    def test_shape_mismatch_rejected(self):
        with pytest.raises(DimensionError):
            Tensor(np.ones((2, 3))) + Tensor(np.ones(3))

    def test_matmul_batch_mismatch(self):
        with pytest.raises(DimensionError):
            T.matmul(Tensor(np.ones((2, 3, 4))), Tensor(np.ones((3, 4, 5))))


class TestGraph:
    def test_shared_node_accumulates(self):
        x = leaf([1.5, -2.0])
        y = x * x + x
        (g,) = T.grad(T.sum(y), [x])
        np.testing.assert_allclose(g, 2 * x.data + 1)

    def test_diamond_visits_once(self):
        x = leaf(3.0)
        a = T.exp(x)
        b = a * a
        c = a + b
        (g,) = T.grad(c, [x])
        e = np.exp(3.0)
        np.testing.assert_allclose(g, e + 2 * e * e)

    def test_unreached_leaf_gets_zero(self):
        x, y = leaf([1.0, 2.0]), leaf([3.0])
        gx, gy = T.grad(T.sum(x * 2.0), [x, y])
        np.testing.assert_array_equal(gy, np.zeros(1))
        np.testing.assert_array_equal(gx, [2.0, 2.0])

    def test_non_scalar_loss_rejected(self):
        x = leaf([1.0, 2.0])
        with pytest.raises(ContractError):
            T.grad(x * 2.0, [x])

    def test_no_grad_records_nothing(self):
        x = leaf([1.0])
        with T.no_grad():
            y = x * 3.0
        assert not y.requires_grad
        assert T.is_grad_enabled()

    def test_gather_backward_zero_elsewhere(self):
        x = leaf(np.arange(5.0))
        (g,) = T.grad(T.sum(T.gather(x, np.array([1, 1, 3]))), [x])
        np.testing.assert_array_equal(g, [0, 2, 0, 1, 0])

    def test_gather_rejects_out_of_range(self):
        with pytest.raises(ContractError):
            T.gather(Tensor(np.ones(3)), np.array([3]))

    def test_default_dtype_context(self):
        with T.default_dtype(np.float32):
            assert Tensor([1.0]).dtype == np.float32
        assert Tensor([1.0]).dtype == np.float64


class TestGradients:
    """Small spot checks; the full seeded sweep lives in the check suite."""

    @pytest.mark.parametrize("op", [T.exp, T.tanh, T.gelu, lambda x: T.softmax(x, -1), lambda x: x * x])
    def test_unary(self, rng, op):
        x = leaf(rng.normal(size=(3, 4)))
        w = rng.normal(size=(3, 4))
        assert grad_check(lambda v: T.sum(op(v) * w), [x])

    def test_layer_norm_all_inputs(self, rng):
        x, g, b = leaf(rng.normal(size=(4, 6))), leaf(rng.normal(size=6)), leaf(rng.normal(size=6))
        w = rng.normal(size=(4, 6))
        assert grad_check(lambda *a: T.sum(T.layer_norm(*a) * w), [x, g, b])

    def test_resample(self, rng):
        x = leaf(rng.normal(size=(2, 3, 4)))
        w = rng.normal(size=(5, 2, 7))
        assert grad_check(lambda v: T.sum(T.resample3d(v, (5, 2, 7)) * w), [x])


class TestProperties:
    @given(arrays(np.float64, (3, 5), elements=st.floats(-50, 50)))
    def test_softmax_rows_sum_to_one(self, x):
        s = T.softmax(Tensor(x), axis=-1).data
        np.testing.assert_allclose(s.sum(-1), 1.0, atol=1e-12)
        assert np.all(s >= 0)

    @given(arrays(np.float64, (4, 6), elements=finite), st.floats(0.1, 10))
    def test_layer_norm_scale_invariant(self, x, scale):
        ones, zeros = Tensor(np.ones(6)), Tensor(np.zeros(6))
        assume(np.all(x.var(axis=-1) > 1e-3))
        a = T.layer_norm(Tensor(x), ones, zeros, eps=0.0).data
        b = T.layer_norm(Tensor(x * scale), ones, zeros, eps=0.0).data
        np.testing.assert_allclose(a, b, atol=1e-6)

    @given(arrays(np.float64, (2, 3), elements=finite), arrays(np.float64, (2, 3), elements=finite))
    def test_grad_of_sum_is_linear(self, a, b):
        x = leaf(a)
        (g,) = T.grad(T.sum(x * b), [x])
        np.testing.assert_allclose(g, b)
