"""Tape autodiff: forward values against loop oracles, gradients against finite differences."""
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fdcheck import numeric_grad, rel_error
from oracles import loop_matmul
from flowcast import core
from flowcast.core import NonFiniteError, ShapeError, Tape, TapeError, Tensor


def check_op_grads(build, *arrays_in, tol=1e-6):
    """Compare tape gradients of sum(w * build(...)) with finite differences."""
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays_in]
    probe_shape = build(*[Tensor(a) for a in arrays_in]).shape
    w = np.random.default_rng(99).normal(size=probe_shape)

    def value():
        return float(np.sum(w * build(*tensors).data))

    with Tape() as tape:
        loss = core.sum_all(core.mul(build(*tensors), Tensor(w)))
    tape.backward(loss)
    for t in tensors:
        analytic = t.grad.copy()
        numeric = numeric_grad(value, t.data)
        assert rel_error(analytic, numeric) < tol


finite = st.floats(-3, 3, allow_nan=False, allow_infinity=False)


class TestTensor:
    def test_promotes_to_2d(self):
        assert Tensor(1.5).shape == (1, 1)
        assert Tensor([1.0, 2.0, 3.0]).shape == (1, 3)

    def test_rejects_3d(self):
        with pytest.raises(ShapeError):
            Tensor(np.zeros((2, 2, 2)))

    def test_float64(self):
        assert Tensor(np.arange(3, dtype=np.int32)).data.dtype == np.float64

    def test_item_needs_scalar(self):
        with pytest.raises(ShapeError):
            Tensor([1.0, 2.0]).item()


class TestForwardValues:
    def test_matmul_matches_triple_loop(self):
        rng = np.random.default_rng(0)
        a, b = rng.normal(size=(4, 7)), rng.normal(size=(7, 3))
        np.testing.assert_allclose(core.matmul(Tensor(a), Tensor(b)).data, loop_matmul(a, b),
                                   rtol=1e-13, atol=1e-13)

    def test_linear_matches_loop(self):
        rng = np.random.default_rng(1)
        x, w, b = rng.normal(size=(5, 3)), rng.normal(size=(4, 3)), rng.normal(size=(4, 1))
        want = loop_matmul(x, w.T) + b.T
        np.testing.assert_allclose(core.linear(Tensor(x), Tensor(w), Tensor(b)).data, want,
                                   rtol=1e-13, atol=1e-13)

    def test_sigmoid_and_tanh_scalar_formulas(self):
        v = np.array([[-30.0, -1.0, 0.0, 0.5, 30.0]])
        sig = [1.0 / (1.0 + math.exp(-u)) for u in v[0]]
        np.testing.assert_allclose(core.sigmoid(Tensor(v)).data[0], sig, rtol=1e-15)
        np.testing.assert_allclose(core.tanh(Tensor(v)).data[0], [math.tanh(u) for u in v[0]],
                                   rtol=1e-15)

    def test_leaky_relu(self):
        v = Tensor([[-2.0, 0.0, 3.0]])
        np.testing.assert_array_equal(core.leaky_relu(v, 0.1).data, [[-0.2, 0.0, 3.0]])
        np.testing.assert_array_equal(core.relu(v).data, [[0.0, 0.0, 3.0]])

    def test_softmax_matches_definition(self):
        v = np.array([[0.1, -2.0, 3.0], [5.0, 5.0, 5.0]])
        e = np.exp(v)
        np.testing.assert_allclose(core.softmax_row(Tensor(v)).data,
                                   e / e.sum(axis=1, keepdims=True), rtol=1e-14)

    def test_softmax_large_scores_stay_finite(self):
        p = core.softmax_row(Tensor([[1000.0, 999.0, -1000.0]])).data
        assert np.all(np.isfinite(p))
        assert abs(p.sum() - 1.0) < 1e-15

    @settings(max_examples=100, deadline=None)
    @given(arrays(np.float64, (3, 6), elements=st.floats(-50, 50)), st.floats(-100, 100))
    def test_softmax_shift_invariance(self, v, c):
        p = core.softmax_row(Tensor(v)).data
        q = core.softmax_row(Tensor(v + c)).data
        np.testing.assert_allclose(p, q, rtol=1e-12, atol=1e-15)
        assert np.all(p >= 0)
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)

    def test_elementwise_dispatch(self):
        a, b = Tensor([[1.0, -2.0]]), Tensor([[3.0, 4.0]])
        np.testing.assert_array_equal(core.elementwise(a, "mul", b).data, [[3.0, -8.0]])
        np.testing.assert_array_equal(core.elementwise(a, "relu").data, [[1.0, 0.0]])
        with pytest.raises(ValueError):
            core.elementwise(a, "softplus")
        with pytest.raises(ShapeError):
            core.elementwise(a, "add")

    def test_shape_errors(self):
        with pytest.raises(ShapeError):
            core.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))
        with pytest.raises(ShapeError):
            core.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 2))))
        with pytest.raises(ShapeError):
            core.reshape(Tensor(np.zeros((2, 3))), 4, 2)
        with pytest.raises(ShapeError):
            core.slice_rows(Tensor(np.zeros((2, 3))), 1, 5)


class TestGradients:
    rng = np.random.default_rng(7)

    def r(self, *shape):
        return self.rng.normal(size=shape)

    def test_matmul(self):
        check_op_grads(core.matmul, self.r(3, 4), self.r(4, 2))

    def test_linear(self):
        check_op_grads(core.linear, self.r(3, 4), self.r(2, 4), self.r(2, 1))

    def test_structural(self):
        check_op_grads(core.transpose, self.r(3, 4))
        check_op_grads(lambda a: core.reshape(a, 6, 2), self.r(3, 4))
        check_op_grads(core.concat_cols, self.r(3, 2), self.r(3, 4))
        check_op_grads(lambda a, b: core.concat_rows([a, b, a]), self.r(2, 3), self.r(1, 3))
        check_op_grads(lambda a: core.slice_rows(a, 1, 3), self.r(4, 2))
        check_op_grads(lambda a: core.slice_cols(a, 0, 2), self.r(4, 3))
        check_op_grads(lambda a: core.tile_rows(a, 3), self.r(2, 3))

    def test_reductions_and_broadcasts(self):
        check_op_grads(core.add_bias, self.r(3, 4), self.r(4, 1))
        check_op_grads(core.mul_col, self.r(3, 4), self.r(3, 1))
        check_op_grads(core.sum_rows, self.r(3, 4))
        check_op_grads(core.sum_all, self.r(3, 4))
        check_op_grads(core.mean_all, self.r(3, 4))
        check_op_grads(lambda a: core.scale(a, -2.5), self.r(3, 4))

    def test_elementwise(self):
        for op in (core.add, core.sub, core.mul):
            check_op_grads(op, self.r(2, 3), self.r(2, 3))
        check_op_grads(core.square, self.r(2, 3))
        check_op_grads(core.tanh, self.r(2, 3))
        check_op_grads(core.sigmoid, self.r(2, 3))

    def test_piecewise_linear_away_from_kink(self):
        a = self.r(3, 5)
        a[np.abs(a) < 0.05] = 0.5
        check_op_grads(core.relu, a)
        check_op_grads(lambda t: core.leaky_relu(t, 0.2), a)

    def test_softmax(self):
        check_op_grads(core.softmax_row, self.r(3, 5))

    def test_shared_input_accumulates(self):
        a = Tensor([[2.0, -1.0]], requires_grad=True)
        with Tape() as tape:
            loss = core.sum_all(core.add(core.mul(a, a), a))
        tape.backward(loss)
        np.testing.assert_array_equal(a.grad, [[5.0, -1.0]])

    def test_constant_inputs_get_no_grad(self):
        a, c = Tensor([[1.0, 2.0]], requires_grad=True), Tensor([[3.0, 4.0]])
        with Tape() as tape:
            loss = core.sum_all(core.mul(a, c))
        tape.backward(loss)
        assert c.grad is None
        np.testing.assert_array_equal(a.grad, [[3.0, 4.0]])

    def test_untouched_branch_is_skipped(self):
        a = Tensor([[1.0]], requires_grad=True)
        b = Tensor([[2.0]], requires_grad=True)
        with Tape() as tape:
            core.tanh(b)
            loss = core.square(a)
        tape.backward(loss)
        assert b.grad is None
        assert tape.visited == [1]


class TestTapePolicy:
    def test_tape_is_single_use(self):
        a = Tensor([[1.0]], requires_grad=True)
        with Tape() as tape:
            loss = core.square(a)
        tape.backward(loss)
        with pytest.raises(TapeError):
            tape.backward(loss)

    def test_loss_must_be_scalar(self):
        a = Tensor([[1.0, 2.0]], requires_grad=True)
        with Tape() as tape:
            out = core.square(a)
        with pytest.raises(TapeError):
            tape.backward(out)

    def test_no_recording_without_tape(self):
        a = Tensor([[1.0]], requires_grad=True)
        core.square(a)
        assert core.active_tape() is None

    def test_stale_grads_reset(self):
        a = Tensor([[3.0]], requires_grad=True)
        for _ in range(2):
            with Tape() as tape:
                loss = core.square(a)
            tape.backward(loss)
        np.testing.assert_array_equal(a.grad, [[6.0]])

    def test_nan_in_forward_raises(self):
        with pytest.raises(NonFiniteError):
            core.add(Tensor([[np.nan]]), Tensor([[1.0]]))

    def test_overflow_in_forward_raises(self):
        with np.errstate(over="ignore"), pytest.raises(NonFiniteError):
            core.square(Tensor([[1e200]]))

    def test_non_finite_gradient_raises(self):
        a = Tensor([[1e-200]], requires_grad=True)
        with Tape() as tape:
            loss = core.sum_all(core.scale(core.scale(a, 1e200), 1e200))
        with np.errstate(over="ignore"), pytest.raises(NonFiniteError):
            tape.backward(loss)

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, (2, 3), elements=finite), arrays(np.float64, (3, 2), elements=finite))
    def test_matmul_gradient_identity(self, a, b):
        """For L = sum(A B), dL/dA = 1 B^T and dL/dB = A^T 1."""
        ta, tb = Tensor(a, requires_grad=True), Tensor(b, requires_grad=True)
        with Tape() as tape:
            loss = core.sum_all(core.matmul(ta, tb))
        tape.backward(loss)
        np.testing.assert_allclose(ta.grad, np.ones((2, 2)) @ b.T, atol=1e-12)
        np.testing.assert_allclose(tb.grad, a.T @ np.ones((2, 2)), atol=1e-12)
