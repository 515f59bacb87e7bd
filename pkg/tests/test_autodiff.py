import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from implicit_sent import autodiff as ad
from implicit_sent.autodiff import Tape, Variable
from implicit_sent.errors import ContractError, NumericError, ShapeError, TapeReuseError


def naive_matmul(a, b):
    return [[sum(a[i][k] * b[k][j] for k in range(len(b))) for j in range(len(b[0]))] for i in range(len(a))]


class TestMatmul:
    def test_identity(self):
        m = [[1.0, 2.0], [3.0, 4.0]]
        out = ad.matmul(np.eye(2), m)
        np.testing.assert_array_equal(out.value, m)

    def test_hand_product(self):
        a, b = [[1, 2], [3, 4]], [[5], [6]]
        expected = naive_matmul(a, b)
        assert expected == [[17], [39]]
        np.testing.assert_array_equal(ad.matmul(a, b).value, expected)

    def test_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            ad.matmul(np.ones((2, 3)), np.ones((2, 3)))

    def test_gradient_rules(self):
        rng = np.random.default_rng(0)
        a = Variable(rng.normal(size=(3, 4)), True)
        b = Variable(rng.normal(size=(4, 2)), True)
        g = rng.normal(size=(3, 2))
        ad.backward(ad.sum(ad.mul(ad.matmul(a, b), g)))
        np.testing.assert_allclose(a.grad, g @ b.value.T, atol=1e-14)
        np.testing.assert_allclose(b.grad, a.value.T @ g, atol=1e-14)


class TestElementwise:
    def test_tanh_at_zero(self):
        x = Variable([0.0], True)
        y = ad.elementwise("tanh", x)
        assert y.value[0] == 0.0
        ad.backward(ad.sum(y))
        assert x.grad[0] == 1.0

    def test_sigmoid_at_zero(self):
        assert ad.elementwise("sigmoid", [0.0]).value[0] == 0.5

    def test_sigmoid_extremes_are_finite(self):
        y = ad.sigmoid([-1000.0, 1000.0]).value
        assert np.all(np.isfinite(y))
        assert y[0] == 0.0 and y[1] == 1.0

    def test_exp(self):
        np.testing.assert_allclose(ad.elementwise("exp", [0.0, math.log(2)]).value, [1.0, 2.0], rtol=1e-15)

    def test_scale_and_relu(self):
        np.testing.assert_array_equal(ad.elementwise("scale", [1.0, -2.0], factor=3.0).value, [3.0, -6.0])
        np.testing.assert_array_equal(ad.elementwise("relu", [1.0, -2.0]).value, [1.0, 0.0])

    def test_bias_broadcast_over_last_axis(self):
        x = Variable(np.zeros((2, 3)), True)
        b = Variable([1.0, 2.0, 3.0], True)
        y = ad.elementwise("add", x, b)
        np.testing.assert_array_equal(y.value, [[1, 2, 3], [1, 2, 3]])
        ad.backward(ad.sum(y))
        np.testing.assert_array_equal(b.grad, [2.0, 2.0, 2.0])

    def test_richer_broadcast_rejected(self):
        with pytest.raises(ShapeError):
            ad.add(np.ones((2, 3)), np.ones((2, 1)))
        with pytest.raises(ShapeError):
            ad.mul(np.ones((2, 3)), np.ones(2))

    def test_unknown_op(self):
        with pytest.raises(ValueError):
            ad.elementwise("cosh", [1.0])


class TestSoftmax:
    def test_uniform_row(self):
        np.testing.assert_allclose(ad.softmax_rows([[0.0, 0.0, 0.0]]).value, [[1 / 3] * 3], rtol=1e-15)

    def test_hand_values(self):
        e = [math.exp(v) for v in (1, 2, 3)]
        expected = [v / sum(e) for v in e]
        np.testing.assert_allclose(expected, [0.0900, 0.2447, 0.6652], atol=1e-4)
        np.testing.assert_allclose(ad.softmax_rows([[1.0, 2.0, 3.0]]).value[0], expected, atol=1e-4)

    def test_masked_entry_is_exact_zero(self):
        y = ad.softmax_rows([[0.0, -np.inf]]).value
        assert y[0, 0] == 1.0 and y[0, 1] == 0.0

    def test_nan_rejected(self):
        with pytest.raises(NumericError):
            ad.softmax_rows([[0.0, np.nan]])

    def test_large_logits_stable(self):
        y = ad.softmax_rows([[1000.0, 1000.0]]).value
        np.testing.assert_allclose(y, [[0.5, 0.5]])

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 8), st.integers(1, 8), st.integers(0, 2**31), st.floats(-50, 50))
    def test_rows_sum_to_one_and_shift_invariant(self, m, n, seed, shift):
        x = np.random.default_rng(seed).normal(scale=5, size=(m, n))
        y = ad.softmax_rows(x).value
        np.testing.assert_allclose(y.sum(axis=1), 1.0, atol=1e-9)
        np.testing.assert_allclose(ad.softmax_rows(x + shift).value, y, atol=1e-12)


class TestReduce:
    def test_sum(self):
        assert ad.reduce("sum", [1.0, 2.0, 3.0]).value == 6.0

    def test_max_over_axis(self):
        np.testing.assert_array_equal(ad.reduce("max_over_axis", [[1.0, 5.0], [7.0, 2.0]], axis=0).value, [7.0, 5.0])

    def test_mean_constant(self):
        assert ad.reduce("mean", np.full((3, 4), 2.5)).value == 2.5

    def test_axis_out_of_range(self):
        with pytest.raises(ShapeError):
            ad.reduce("sum", np.ones((2, 2)), axis=2)

    def test_max_tie_routes_to_first(self):
        x = Variable([[3.0], [3.0]], True)
        ad.backward(ad.sum(ad.max(x, axis=0)))
        np.testing.assert_array_equal(x.grad, [[1.0], [0.0]])


class TestBackward:
    def test_square(self):
        x = Variable([1.0, 2.0, 3.0], True)
        ad.backward(ad.sum(ad.mul(x, x)))
        np.testing.assert_array_equal(x.grad, [2.0, 4.0, 6.0])

    def test_constant_loss(self):
        x = Variable([1.0, 2.0], True)
        loss = Variable(3.0)
        ad.backward(loss)
        np.testing.assert_array_equal(x.grad, [0.0, 0.0])
        assert loss.grad == 1.0

    def test_fan_out_accumulates(self):
        x = Variable([1.5], True)
        ad.backward(ad.sum(ad.add(x, x)))
        assert x.grad[0] == 2.0

    def test_loss_grad_is_one(self):
        x = Variable([1.0, 2.0], True)
        loss = ad.sum(ad.tanh(x))
        ad.backward(loss)
        assert loss.grad == 1.0

    def test_non_scalar_loss(self):
        x = Variable([1.0, 2.0], True)
        with pytest.raises(ContractError):
            ad.backward(ad.tanh(x))

    def test_tape_reuse(self):
        x = Variable([1.0, 2.0], True)
        with Tape() as tape:
            loss = ad.sum(ad.mul(x, x))
        tape.backward(loss)
        with pytest.raises(TapeReuseError):
            tape.backward(loss)

    def test_consumed_intermediate_cannot_be_reused(self):
        x = Variable([1.0, 2.0], True)
        with Tape() as tape:
            y = ad.tanh(x)
            loss = ad.sum(y)
        tape.backward(loss)
        with pytest.raises(TapeReuseError):
            ad.sum(y)

    def test_reverse_order(self):
        visited = []
        x = Variable([1.0], True)
        with Tape() as tape:
            a = ad.scale(x, 2.0)
            b = ad.scale(a, 3.0)
            loss = ad.sum(b)
        for i, (out, inputs, fn) in enumerate(tape.records):
            tape.records[i] = (out, inputs, lambda g, fn=fn, i=i: (visited.append(i), fn(g))[1])
        tape.backward(loss)
        assert visited == [2, 1, 0]
        assert x.grad[0] == 6.0

    def test_no_grad_records_nothing(self):
        x = Variable([1.0], True)
        with Tape() as tape, ad.no_grad():
            y = ad.tanh(x)
        assert len(tape) == 0 and not y.requires_grad

    def test_linearity_of_accumulation(self):
        rng = np.random.default_rng(3)
        x = Variable(rng.normal(size=4), True)
        f1 = lambda: ad.sum(ad.tanh(x))
        f2 = lambda: ad.sum(ad.mul(x, ad.sigmoid(x)))
        ad.backward(ad.add(f1(), f2()))
        joint = x.grad.copy()
        x.zero_grad()
        ad.backward(f1())
        ad.backward(f2())
        np.testing.assert_allclose(x.grad, joint, atol=1e-14)

    def test_tapes_are_thread_local(self):
        import threading

        results = {}

        def work(k):
            x = Variable([float(k)], True)
            with Tape() as tape:
                loss = ad.sum(ad.mul(x, x))
            tape.backward(loss)
            results[k] = x.grad[0]

        threads = [threading.Thread(target=work, args=(k,)) for k in range(1, 5)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert results == {k: 2.0 * k for k in range(1, 5)}


class TestShapes:
    def test_reshape_preserves_order(self):
        x = np.arange(24.0).reshape(2, 3, 4)
        y = ad.reshape(x, (6, 4)).value
        np.testing.assert_array_equal(y.reshape(-1), x.reshape(-1))

    def test_reshape_bad_count(self):
        with pytest.raises(ShapeError):
            ad.reshape(np.ones(6), (4, 2))

    def test_where_prefix_mask(self):
        a, b = np.ones((2, 3)), np.zeros((2, 3))
        y = ad.where(np.array([True, False]), a, b).value
        np.testing.assert_array_equal(y, [[1, 1, 1], [0, 0, 0]])

    def test_gather_rows_range_check(self):
        with pytest.raises(IndexError):
            ad.gather_rows(np.zeros((3, 2)), [[3]])


class TestGradCheck:
    def test_quadratic(self):
        x = Variable(np.random.default_rng(0).normal(size=5), True)
        assert ad.grad_check(lambda: ad.sum(ad.mul(x, x)), [x]) < 1e-7

    def test_softmax_cross_entropy(self):
        rng = np.random.default_rng(1)
        logits = Variable(rng.normal(size=(4, 3)), True)
        labels = rng.integers(0, 3, 4)

        def f():
            p = ad.pick(ad.softmax_rows(logits), labels)
            return ad.scale(ad.mean(ad.log(p)), -1.0)

        assert ad.grad_check(f, [logits]) < 1e-5

    def test_reports_broken_backward(self):
        x = Variable([0.3, -0.2], True)

        def wrong_square(v):
            return ad._result(v.value**2, (v,), lambda g: (g * v.value,))  # missing factor 2

        assert ad.grad_check(lambda: ad.sum(wrong_square(x)), [x]) > 0.1

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_never_throws_on_nan(self):
        x = Variable([1.0], True)
        assert ad.grad_check(lambda: ad.sum(ad.log(ad.scale(x, -1.0))), [x]) == np.inf


OPS = {
    "tanh": lambda a, b: ad.tanh(a),
    "sigmoid": lambda a, b: ad.sigmoid(a),
    "exp": lambda a, b: ad.exp(ad.scale(a, 0.3)),
    "mul": lambda a, b: ad.mul(a, b),
    "add": lambda a, b: ad.add(a, b),
    "sub": lambda a, b: ad.sub(a, b),
    "softmax": lambda a, b: ad.softmax_rows(a),
    "matmul": lambda a, b: ad.matmul(a, ad.reshape(b, (b.shape[1], b.shape[0]))),
    "sum_axis": lambda a, b: ad.sum(a, axis=0),
    "mean_axis": lambda a, b: ad.mean(a, axis=1),
    "max_axis": lambda a, b: ad.max(a, axis=1),
    "concat": lambda a, b: ad.concat([a, b], axis=0),
    "slice": lambda a, b: ad.slice_axis(a, 1, 0, max(1, a.shape[1] // 2)),
    "stack": lambda a, b: ad.stack([a, b], axis=1),
}


@settings(max_examples=60, deadline=None)
@given(st.sampled_from(sorted(OPS)), st.integers(1, 8), st.integers(1, 8), st.integers(0, 2**31))
def test_op_gradients_match_finite_differences(op, m, n, seed):
    rng = np.random.default_rng(seed)
    a = Variable(rng.normal(size=(m, n)), True, "a")
    b = Variable(rng.normal(size=(m, n)), True, "b")
    w = rng.normal(size=OPS[op](a, b).shape)
    f = lambda: ad.sum(ad.mul(OPS[op](a, b), w))
    assert ad.grad_check(f, [a, b]) < 1e-4


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.integers(1, 8), st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**31))
def test_sequence_op_gradients(B, L, C, width, seed):
    rng = np.random.default_rng(seed)
    width = min(width, L)
    x = Variable(rng.normal(size=(B, L, C)), True, "x")
    order = np.stack([rng.permutation(L) for _ in range(B)])
    weights = Variable(rng.normal(size=(B, L)), True, "w")
    outs = [
        lambda: ad.unfold(x, width),
        lambda: ad.pad_time(x, 1, 2),
        lambda: ad.permute_time(x, order),
        lambda: ad.weighted_sum(weights, x),
        lambda: ad.take(x, L - 1, axis=1),
    ]
    for make in outs:
        proj = rng.normal(size=make().shape)
        assert ad.grad_check(lambda: ad.sum(ad.mul(make(), proj)), [x, weights]) < 1e-4
