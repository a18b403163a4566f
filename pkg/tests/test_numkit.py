import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from amdnet import numkit as nk
from amdnet.numkit import AdamState, Parameter, Tensor

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


def matrices(rows=st.integers(1, 5), cols=st.integers(1, 6)):
    return st.tuples(rows, cols).flatmap(lambda s: arrays(np.float64, s, elements=finite))


# frozen from a pure-python oracle (math.exp / math.sqrt, no numpy)
SOFTMAX_012 = [0.09003057317038046, 0.24472847105479764, 0.6652409557748219]
LN_123 = [-1.2247356859083902, 0.0, 1.2247356859083902]
ADAM_FIRST_STEP = -0.00029999999700000004


def naive_matmul(a, b):
    out = [[0.0] * len(b[0]) for _ in a]
    for i in range(len(a)):
        for j in range(len(b[0])):
            s = 0.0
            for k in range(len(b)):
                s += a[i][k] * b[k][j]
            out[i][j] = s
    return out


class TestMatmul:
    def test_identity_and_zero(self):
        A = np.arange(4.0).reshape(2, 2)
        assert np.array_equal(nk.matmul(Tensor(np.eye(2)), Tensor(A)).data, A)
        assert np.array_equal(nk.matmul(Tensor(A), Tensor(np.zeros((2, 3)))).data, np.zeros((2, 3)))

    def test_matches_triple_loop(self):
        rng = np.random.default_rng(3)
        a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
        got = nk.matmul(Tensor(a), Tensor(b)).data
        assert np.allclose(got, naive_matmul(a.tolist(), b.tolist()), rtol=0, atol=1e-15)

    def test_shape_error_reports_both_shapes(self):
        with pytest.raises(ValueError) as err:
            nk.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))
        assert "(2, 3)" in str(err.value) and "(4, 5)" in str(err.value)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10_000))
    def test_associativity(self, seed):
        rng = np.random.default_rng(seed)
        a, b, c = rng.normal(size=(3, 4)), rng.normal(size=(4, 5)), rng.normal(size=(5, 2))
        A, B, C = Tensor(a), Tensor(b), Tensor(c)
        left = nk.matmul(nk.matmul(A, B), C).data
        right = nk.matmul(A, nk.matmul(B, C)).data
        assert np.allclose(left, right, rtol=1e-5, atol=1e-12)


class TestSoftmax:
    def test_uniform_row(self):
        assert np.allclose(nk.softmax_rows(Tensor(np.full((1, 4), 3.0))).data, 0.25)

    def test_known_row(self):
        assert np.allclose(nk.softmax_rows(Tensor(np.array([[0.0, 1.0, 2.0]]))).data, [SOFTMAX_012], atol=1e-12)

    def test_large_inputs_stay_finite(self):
        out = nk.softmax_rows(Tensor(np.array([[1000.0, 999.0, -1000.0]]))).data
        assert np.isfinite(out).all() and abs(out.sum() - 1) < 1e-12

    @settings(max_examples=100, deadline=None)
    @given(matrices())
    def test_rows_sum_to_one(self, x):
        out = nk.softmax_rows(Tensor(x)).data
        assert (out >= 0).all()
        assert np.allclose(out.sum(axis=-1), 1.0, atol=1e-6)

    @settings(max_examples=50, deadline=None)
    @given(matrices(), finite)
    def test_shift_invariance(self, x, c):
        assert np.allclose(nk.softmax_rows(Tensor(x + c)).data, nk.softmax_rows(Tensor(x)).data, atol=1e-9)


class TestLayerNorm:
    def _ln(self, x, eps=1e-5):
        n = x.shape[-1]
        return nk.layer_norm_rows(Tensor(x), Tensor(np.ones(n)), Tensor(np.zeros(n)), eps).data

    def test_constant_row_is_zero(self):
        assert np.array_equal(self._ln(np.full((1, 5), 7.0)), np.zeros((1, 5)))

    def test_hand_row(self):
        assert np.allclose(self._ln(np.array([[1.0, 2.0, 3.0]])), [LN_123], atol=1e-3)
        assert np.allclose(self._ln(np.array([[1.0, 2.0, 3.0]])), [LN_123], atol=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(matrices(cols=st.integers(2, 8)))
    def test_zero_mean(self, x):
        assert np.all(np.abs(self._ln(x).mean(axis=-1)) < 1e-6)

    def test_rejects_single_column(self):
        with pytest.raises(ValueError):
            self._ln(np.ones((2, 1)))


class TestAdam:
    def test_defaults(self):
        state = AdamState()
        assert state.lr == 3e-4 and state.beta1 == 0.9 and state.beta2 == 0.999

    def test_zero_grad_is_identity(self):
        p = Parameter(np.array([[1.0, -2.0]]), name="p")
        state = AdamState.for_params([p])
        nk.zero_grad([p])
        nk.adam_step([p], state)
        assert np.array_equal(p.data, [[1.0, -2.0]])
        assert state.step == 1

    def test_first_step_size(self):
        p = Parameter(np.array(0.5), name="s")
        state = AdamState.for_params([p], lr=3e-4)
        p.grad = np.array(1.0)
        nk.adam_step([p], state)
        assert abs((p.data - 0.5) - ADAM_FIRST_STEP) < 1e-7
        assert np.array_equal(p.grad, 1.0)  # caller zeroes

    def test_step_counter_increases(self):
        p = Parameter(np.ones(3), name="p")
        state = AdamState.for_params([p])
        p.grad = np.ones(3)
        for i in range(1, 4):
            nk.adam_step([p], state)
            assert state.step == i

    def test_uninitialized_state_rejected(self):
        p = Parameter(np.ones(2), name="p")
        p.grad = np.ones(2)
        with pytest.raises(ValueError):
            nk.adam_step([p], AdamState())

    def test_zero_grad_clears(self):
        p = Parameter(np.ones((2, 2)), name="p")
        (nk.sum(p * p)).backward()
        assert p.grad.shape == p.data.shape and p.grad.any()
        nk.zero_grad([p])
        assert not p.grad.any()


class TestGradCheck:
    def test_quadratic(self):
        x = Parameter(np.array(3.0), name="x")
        rep = nk.finite_diff_grad_check(lambda: x * x, [x], h=1e-4)
        assert rep.max_rel_error < 1e-6 and rep.passed

    def test_quadratic_form(self):
        rng = np.random.default_rng(0)
        A = rng.normal(size=(4, 4))
        A = A + A.T
        x = Parameter(rng.normal(size=(4, 1)), name="x")
        f = lambda: nk.sum(nk.matmul(x.T, nk.matmul(Tensor(A), x)))
        nk.zero_grad([x])
        f().backward()
        assert np.allclose(x.grad, 2 * A @ x.data, atol=1e-12)
        assert nk.finite_diff_grad_check(f, [x]).passed

    def test_constant(self):
        x = Parameter(np.ones(3), name="x")
        rep = nk.finite_diff_grad_check(lambda: nk.sum(x * 0.0) + 5.0, [x])
        assert rep.passed and rep.max_rel_error == 0.0

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_is_probe_failure(self):
        x = Parameter(np.array([1e-7]), name="x")
        rep = nk.finite_diff_grad_check(lambda: nk.sum(nk.log(x)), [x], h=1e-3)
        assert rep.probe_failures and not rep.passed

    @pytest.mark.parametrize(
        "name, fn",
        [
            ("add", lambda a, b: a + b),
            ("sub", lambda a, b: a - b),
            ("mul", lambda a, b: a * b),
            ("div", lambda a, b: a / (nk.exp(b) + 1.0)),
            ("relu", lambda a, b: nk.relu(a) * b),
            ("sigmoid", lambda a, b: nk.sigmoid(a) + b),
            ("exp", lambda a, b: nk.exp(a * 0.3) * b),
            ("log", lambda a, b: nk.log(nk.square(a) + 1.0) + b),
            ("abs", lambda a, b: nk.absolute(a + 0.05) * b),
            ("max", lambda a, b: nk.max(a * b, axis=-1, keepdims=True) * b),
            ("mean", lambda a, b: nk.mean(a, axis=0, keepdims=True) * b),
            ("matmul", lambda a, b: nk.matmul(a, b.T)),
            ("softmax", lambda a, b: nk.softmax_rows(a) * b),
            ("layer_norm", lambda a, b: nk.layer_norm_rows(a, b[0], b[1])),
            ("l2_normalize", lambda a, b: nk.l2_normalize(a) * b),
            ("reshape_T", lambda a, b: nk.reshape(a, (b.shape[1], b.shape[0])).T * b),
            ("concat", lambda a, b: nk.concat([a, b], axis=0)),
            ("take", lambda a, b: a[np.array([0, 0, 2])] * b[np.array([1, 1, 2])]),
            ("swapaxes", lambda a, b: nk.swapaxes(nk.reshape(a, (1, *a.shape)), 1, 2) * 1.0),
        ],
    )
    def test_every_kernel(self, name, fn):
        rng = np.random.default_rng(zlib.crc32(name.encode()))
        a = Parameter(rng.normal(size=(3, 4)), name="a")
        b = Parameter(rng.normal(size=(3, 4)), name="b")
        w = rng.normal(size=fn(a, b).shape)
        rep = nk.finite_diff_grad_check(lambda: nk.sum(fn(a, b) * w), [a, b], n_coords=200)
        assert rep.max_rel_error <= 1e-4, (name, rep.worst)


class TestTensor:
    def test_dtype_switch(self):
        prev = nk.get_default_dtype()
        try:
            nk.set_default_dtype("f32")
            assert Tensor([1.0, 2.0]).dtype == np.float32
            nk.set_default_dtype("f64")
            assert Tensor([1.0, 2.0]).dtype == np.float64
        finally:
            nk.set_default_dtype(prev)

    def test_shared_subexpression_accumulates(self):
        x = Parameter(np.array([2.0]), name="x")
        y = x * x + x * 3.0
        nk.sum(y).backward()
        assert np.allclose(x.grad, [7.0])

    @settings(max_examples=30, deadline=None)
    @given(matrices())
    def test_ops_stay_finite(self, x):
        t = Tensor(x)
        for out in (nk.sigmoid(t), nk.relu(t), nk.softmax_rows(t), nk.l2_normalize(t)):
            assert np.isfinite(out.data).all()


def test_relu_propagates_nan():
    out = nk.relu(nk.Tensor(np.array([np.nan, -1.0, 2.0]))).data
    assert np.isnan(out[0]) and out[1:].tolist() == [0.0, 2.0]
