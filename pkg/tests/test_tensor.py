import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dan import tensor as T
from dan.params import ParamStore, grad_check
from dan.tensor import DimensionError, EmptySupportError, Tape, Tensor

from . import oracles


def leaf(x):
    t = Tensor(x, requires_grad=True)
    t.zero_grad()
    return t


def grad_of(f, *inputs):
    for x in inputs:
        x.zero_grad()
    with Tape() as tape:
        out = f(*inputs)
    tape.backward(out)
    return [x.grad for x in inputs]


def central_diff(f, x: np.ndarray, h=1e-5):
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        orig = x[i]
        x[i] = orig + h
        up = f(x)
        x[i] = orig - h
        down = f(x)
        x[i] = orig
        g[i] = (up - down) / (2 * h)
    return g


def rel_err(a, b, floor=1e-8):
    return np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor))


class TestAffine:
    def test_identity(self):
        y = T.affine(Tensor([3.0, 4.0]), Tensor(np.eye(2)), Tensor(np.zeros(2)))
        np.testing.assert_array_equal(y.data, [3.0, 4.0])

    def test_zero_weight_gives_bias(self):
        y = T.affine(Tensor([7.0, -1.0, 2.0]), Tensor(np.zeros((2, 3))), Tensor([1.0, 2.0]))
        np.testing.assert_array_equal(y.data, [1.0, 2.0])

    def test_against_loop(self):
        rng = np.random.default_rng(3)
        W, x, b = rng.normal(size=(3, 2)), rng.normal(size=2), rng.normal(size=3)
        y = T.affine(Tensor(x), Tensor(W), Tensor(b))
        np.testing.assert_allclose(y.data, oracles.matvec(W, x) + b, rtol=1e-14, atol=1e-15)

    def test_batched_rows_match_single(self):
        rng = np.random.default_rng(4)
        W, X, b = rng.normal(size=(3, 5)), rng.normal(size=(2, 4, 5)), rng.normal(size=3)
        Y = T.affine(Tensor(X), Tensor(W), Tensor(b)).data
        for i in np.ndindex(2, 4):
            np.testing.assert_allclose(Y[i], oracles.matvec(W, X[i]) + b, rtol=1e-13)

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4,\)"):
            T.affine(Tensor(np.zeros(4)), Tensor(np.zeros((2, 3))), Tensor(np.zeros(2)))

    def test_gradients(self):
        rng = np.random.default_rng(5)
        x, W, b = leaf(rng.normal(size=(3, 4))), leaf(rng.normal(size=(2, 4))), leaf(rng.normal(size=2))
        c = rng.normal(size=(3, 2))
        f = lambda x, W, b: T.sum_all(T.mul(T.affine(x, W, b), Tensor(c)))
        gx, gW, gb = grad_of(f, x, W, b)
        num = lambda arr, which: central_diff(
            lambda v: float(((x.data if which != "x" else v) @ (W.data if which != "W" else v).T
                             + (b.data if which != "b" else v)) .ravel() @ c.ravel()), arr.copy())
        assert rel_err(gx, num(x.data, "x")) < 1e-6
        assert rel_err(gW, num(W.data, "W")) < 1e-6
        assert rel_err(gb, num(b.data, "b")) < 1e-6


class TestTanh:
    def test_zero(self):
        assert T.tanh(Tensor(0.0)).data == 0.0

    def test_grad_at_zero_is_one(self):
        (g,) = grad_of(lambda x: T.sum_all(T.tanh(x)), leaf(0.0))
        assert g == 1.0

    def test_grad_matches_finite_difference(self):
        (g,) = grad_of(lambda x: T.sum_all(T.tanh(x)), leaf(0.7))
        fd = (math.tanh(0.7 + 1e-5) - math.tanh(0.7 - 1e-5)) / 2e-5
        assert abs(g - fd) < 1e-6


class TestMul:
    def test_identity_and_zero(self):
        a = np.array([1.5, -2.0, 3.0])
        np.testing.assert_array_equal(T.mul(Tensor(a), Tensor(np.ones(3))).data, a)
        np.testing.assert_array_equal(T.mul(Tensor(a), Tensor(np.zeros(3))).data, 0.0)

    def test_grad_is_upstream_times_other(self):
        rng = np.random.default_rng(0)
        a, b, up = leaf(rng.normal(size=4)), leaf(rng.normal(size=4)), rng.normal(size=4)
        ga, _ = grad_of(lambda a, b: T.sum_all(T.mul(T.mul(a, b), Tensor(up))), a, b)
        np.testing.assert_array_equal(ga, up * b.data)
        fd = central_diff(lambda v: float(np.sum(v * b.data * up)), a.data.copy())
        assert rel_err(ga, fd) < 1e-6

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            T.mul(Tensor(np.zeros(3)), Tensor(np.zeros(4)))


class TestSoftmaxMasked:
    def test_uniform(self):
        np.testing.assert_allclose(T.softmax_masked(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, rtol=1e-15)

    def test_closed_form(self):
        y = T.softmax_masked(Tensor([math.log(2.0), 0.0])).data
        np.testing.assert_allclose(y, [2 / 3, 1 / 3], rtol=1e-15)

    def test_mask_and_symmetry(self):
        y = T.softmax_masked(Tensor([5.0, 9.0, 5.0]), np.array([True, False, True])).data
        assert y[1] == 0.0
        np.testing.assert_allclose(y, [0.5, 0.0, 0.5], rtol=1e-15)

    def test_all_masked_raises(self):
        with pytest.raises(EmptySupportError):
            T.softmax_masked(Tensor([1.0, 2.0]), np.array([False, False]))

    def test_large_scores_do_not_overflow(self):
        y = T.softmax_masked(Tensor([1000.0, 999.0])).data
        assert np.isfinite(y).all()

    @settings(max_examples=200, deadline=None)
    @given(
        scores=arrays(np.float64, st.integers(1, 12), elements=st.floats(-50, 50)),
        data=st.data(),
    )
    def test_simplex_and_shift_invariance(self, scores, data):
        mask = np.array(data.draw(st.lists(st.booleans(), min_size=len(scores), max_size=len(scores))))
        mask[data.draw(st.integers(0, len(scores) - 1))] = True
        shift = data.draw(st.floats(-100, 100))
        y = T.softmax_masked(Tensor(scores), mask).data
        assert (y >= 0).all()
        assert (y[~mask] == 0.0).all()
        assert abs(y.sum() - 1.0) <= 1e-12
        y2 = T.softmax_masked(Tensor(scores + shift), mask).data
        assert np.max(np.abs(y - y2)) < 1e-12

    def test_gradient(self):
        rng = np.random.default_rng(1)
        s, c = leaf(rng.normal(size=5)), rng.normal(size=5)
        mask = np.array([True, True, False, True, True])
        (g,) = grad_of(lambda s: T.dot(T.softmax_masked(s, mask), Tensor(c)), s)

        def f(v):
            e = np.where(mask, np.exp(v - v[mask].max()), 0.0)
            return float((e / e.sum()) @ c)

        fd = central_diff(f, s.data.copy())
        assert rel_err(g, fd, floor=1e-6) < 1e-6
        assert g[2] == 0.0


class TestWeightedSum:
    def test_one_hot_selects(self):
        rows = np.arange(12.0).reshape(4, 3)
        y = T.weighted_sum(Tensor([0.0, 0.0, 1.0, 0.0]), Tensor(rows)).data
        np.testing.assert_array_equal(y, rows[2])

    def test_uniform_is_mean(self):
        rows = np.random.default_rng(0).normal(size=(4, 3))
        y = T.weighted_sum(Tensor(np.full(4, 0.25)), Tensor(rows)).data
        np.testing.assert_allclose(y, rows.mean(axis=0), rtol=1e-14)

    def test_against_accumulation(self):
        rng = np.random.default_rng(2)
        w, rows = rng.random(4), rng.normal(size=(4, 3))
        acc = np.zeros(3)
        for n in range(4):
            for j in range(3):
                acc[j] += w[n] * rows[n, j]
        np.testing.assert_allclose(T.weighted_sum(Tensor(w), Tensor(rows)).data, acc, rtol=1e-14)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            T.weighted_sum(Tensor(np.ones(3)), Tensor(np.ones((4, 2))))


class TestDot:
    def test_orthogonal(self):
        assert T.dot(Tensor([1.0, 0.0]), Tensor([0.0, 1.0])).item() == 0.0

    def test_squared_norm(self):
        assert T.dot(Tensor([3.0, 4.0]), Tensor([3.0, 4.0])).item() == 25.0

    def test_against_kahan(self):
        rng = np.random.default_rng(9)
        a, b = rng.normal(size=512), rng.normal(size=512)
        ref = oracles.kahan_dot(a, b)
        assert abs(T.dot(Tensor(a), Tensor(b)).item() - ref) <= 1e-10 * abs(ref)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            T.dot(Tensor(np.ones(3)), Tensor(np.ones(2)))


class TestConcat:
    def test_order(self):
        np.testing.assert_array_equal(T.concat([Tensor([1.0, 2.0]), Tensor([3.0])]).data, [1.0, 2.0, 3.0])

    def test_single_part(self):
        np.testing.assert_array_equal(T.concat([Tensor([4.0, 5.0])]).data, [4.0, 5.0])

    def test_empty(self):
        with pytest.raises(ValueError):
            T.concat([])

    def test_dot_decomposition(self):
        rng = np.random.default_rng(11)
        for _ in range(20):
            a, c = rng.normal(size=5), rng.normal(size=5)
            b, d = rng.normal(size=3), rng.normal(size=3)
            lhs = T.dot(T.concat([Tensor(a), Tensor(b)]), T.concat([Tensor(c), Tensor(d)])).item()
            rhs = T.dot(Tensor(a), Tensor(c)).item() + T.dot(Tensor(b), Tensor(d)).item()
            assert abs(lhs - rhs) <= 1e-12 * max(1.0, abs(lhs))

    def test_backward_splits(self):
        a, b = leaf([1.0, 2.0]), leaf([3.0])
        ga, gb = grad_of(lambda a, b: T.dot(T.concat([a, b]), Tensor([10.0, 20.0, 30.0])), a, b)
        np.testing.assert_array_equal(ga, [10.0, 20.0])
        np.testing.assert_array_equal(gb, [30.0])


class TestBackward:
    def test_dot_self(self):
        x = leaf([1.0, 2.0])
        (g,) = grad_of(lambda x: T.dot(x, x), x)
        np.testing.assert_array_equal(g, [2.0, 4.0])

    def test_constant_loss(self):
        x, y = leaf([1.0, 2.0]), leaf([3.0, 4.0])
        gx, _ = grad_of(lambda x, y: T.dot(y, y), x, y)
        np.testing.assert_array_equal(gx, 0.0)

    def test_non_scalar_loss(self):
        x = leaf([1.0, 2.0])
        with Tape() as tape:
            y = T.tanh(x)
        with pytest.raises(DimensionError):
            tape.backward(y)

    def test_reverse_order(self):
        seen = []
        x = leaf(1.0)
        with Tape() as tape:
            a = T.primitive(x.data * 2, (x,), lambda g: (seen.append("a") or g * 2,))
            b = T.primitive(a.data + 1, (a,), lambda g: (seen.append("b") or g,))
        tape.backward(b)
        assert seen == ["b", "a"]
        assert x.grad == 2.0

    def test_no_tape_records_nothing(self):
        x = leaf([1.0])
        y = T.tanh(x)
        assert not y.requires_grad

    def test_deterministic_replay(self):
        rng = np.random.default_rng(0)
        W = rng.normal(size=(4, 4))

        def run():
            x = leaf(W)
            with Tape() as tape:
                out = T.sum_all(T.tanh(T.affine(Tensor(np.ones((3, 4))), x)))
            tape.backward(out)
            return out.data.tobytes(), x.grad.tobytes()

        assert run() == run()

    def test_gather_accumulates_repeats(self):
        x = leaf([[1.0, 2.0], [3.0, 4.0]])
        (g,) = grad_of(lambda x: T.sum_all(T.take(x, [1, 1, 0], axis=0)), x)
        np.testing.assert_array_equal(g, [[1.0, 1.0], [2.0, 2.0]])

    def test_cross_entropy_uniform(self):
        assert abs(T.cross_entropy(Tensor(np.zeros(5)), 3).item() - math.log(5)) < 1e-15

    def test_cross_entropy_gradient(self):
        rng = np.random.default_rng(2)
        z = leaf(rng.normal(size=6))
        (g,) = grad_of(lambda z: T.cross_entropy(z, 4), z)
        p = np.exp(z.data) / np.exp(z.data).sum()
        np.testing.assert_allclose(g, p - np.eye(6)[4], atol=1e-15)
        fd = central_diff(lambda v: float(np.log(np.exp(v).sum()) - v[4]), z.data.copy())
        assert rel_err(g, fd) < 1e-6

    def test_hinge_subgradient_zero_at_kink(self):
        x = leaf([-1.0, 0.0, 2.0])
        (g,) = grad_of(lambda x: T.sum_all(T.hinge(x)), x)
        np.testing.assert_array_equal(g, [0.0, 0.0, 1.0])


PRIMITIVE_CASES = {
    "tanh": lambda x: T.tanh(x),
    "sigmoid": lambda x: T.sigmoid(x),
    "mul": lambda x: T.mul(x, T.tanh(x)),
    "softmax": lambda x: T.softmax_masked(x),
    "self_weighted_sum": lambda x: T.weighted_sum(T.softmax_masked(x), T.reshape(x, (3, 1))),
    "dot": lambda x: T.dot(x, T.sigmoid(x)),
    "concat": lambda x: T.concat([x, T.tanh(x)]),
    "stack_select": lambda x: T.select(T.stack([x, T.scale(x, 2.0)]), 1),
    "sub_add": lambda x: T.add(T.sub(x, T.tanh(x)), x),
    "cross_entropy": lambda x: T.cross_entropy(x, 1),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVE_CASES))
def test_primitive_gradients_random_points(name):
    rng = np.random.default_rng(abs(hash(name)) % 2**32)
    op = PRIMITIVE_CASES[name]
    for _ in range(5):
        x0 = rng.normal(size=3)
        c = rng.normal(size=op(Tensor(x0)).shape)
        f = lambda x: T.sum_all(T.mul(op(x), Tensor(c)))
        (g,) = grad_of(f, leaf(x0))
        fd = central_diff(lambda v: f(Tensor(v)).item(), x0.copy())
        assert rel_err(g, fd, floor=1e-5) < 1e-4


class TestGradCheck:
    def test_linear_passes_tight(self):
        ps = ParamStore()
        ps.add("w", np.random.default_rng(0).normal(size=(3, 4)))
        x = Tensor(np.random.default_rng(1).normal(size=4))
        report = grad_check(lambda: T.sum_all(T.affine(x, ps["w"])), ps, tol=1e-6)
        assert report.passed, str(report)

    def test_tanh_moderate(self):
        ps = ParamStore()
        ps.add("w", np.random.default_rng(0).normal(size=(3, 4)))
        x = Tensor(np.random.default_rng(1).normal(size=4))
        report = grad_check(lambda: T.sum_all(T.tanh(T.affine(x, ps["w"]))), ps, tol=1e-4)
        assert report.passed, str(report)

    def test_corrupted_rule_is_caught_and_named(self):
        ps = ParamStore()
        ps.add("good", np.array([0.3, -0.2]))
        ps.add("bad", np.array([0.5, 0.1]))

        def bad_square(x):
            return T.primitive(x.data**2, (x,), lambda g: (g * 3.0 * x.data,))  # should be 2x

        f = lambda: T.add(T.sum_all(T.tanh(ps["good"])), T.sum_all(bad_square(ps["bad"])))
        report = grad_check(f, ps)
        assert not report.passed
        assert report.failures == ["bad"]
