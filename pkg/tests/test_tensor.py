import numpy as np
import pytest

from leona import tensor as T
from leona.tensor import (
    NonFiniteError,
    ShapeError,
    Tape,
    TapeError,
    Tensor,
    concat,
    dropout,
    elementwise,
    matmul,
    max_over_axis,
    narrow,
    softmax,
    tsum,
)

from conftest import max_rel_err, numerical_grad


class TestElementwise:
    def test_mul_annihilator(self):
        out = elementwise("mul", Tensor([1.0, 2.0, 3.0]), Tensor([0.0, 0.0, 0.0]))
        np.testing.assert_array_equal(out.data, [0.0, 0.0, 0.0])

    def test_relu_definition(self):
        out = elementwise("relu", Tensor([-1.5, 0.0, 2.0]))
        np.testing.assert_array_equal(out.data, [0.0, 0.0, 2.0])

    def test_sigmoid_grad_at_zero(self):
        a = Tensor(np.zeros(1), requires_grad=True)
        with Tape() as tape:
            loss = tsum(elementwise("sigmoid", a))
        g = tape.backward(loss)[a]
        assert abs(g[0] - 0.25) < 1e-12
        fd = numerical_grad(lambda x: 1.0 / (1.0 + np.exp(-x[0])), np.zeros(1))
        assert abs(g[0] - fd[0]) < 1e-6

    def test_broadcast_add(self):
        out = elementwise("add", Tensor(np.ones((3, 1))), Tensor(np.ones((1, 4))))
        assert out.shape == (3, 4)

    def test_shape_mismatch_reports_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2,\).*\(3,\)"):
            elementwise("add", Tensor([1.0, 2.0]), Tensor([1.0, 2.0, 3.0]))

    def test_unknown_kind(self):
        with pytest.raises(ValueError, match="unknown elementwise kind"):
            elementwise("pow", Tensor([1.0]), Tensor([1.0]))

    def test_unary_rejects_second_operand(self):
        with pytest.raises(ValueError):
            elementwise("tanh", Tensor([1.0]), Tensor([1.0]))


class TestMatmul:
    def test_identity(self, rng):
        m = rng.normal(size=(3, 3))
        out = matmul(Tensor(np.eye(3)), Tensor(m))
        np.testing.assert_allclose(out.data, m)

    def test_hand_product(self):
        out = matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]]))
        np.testing.assert_array_equal(out.data, [[3.0], [7.0]])

    def test_inner_dim_mismatch(self):
        with pytest.raises(ShapeError):
            matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_grad_matches_finite_differences(self, rng):
        a0 = rng.uniform(-2, 2, size=(3, 4))
        b0 = rng.uniform(-2, 2, size=(4, 2))
        a = Tensor(a0.copy(), requires_grad=True)
        with Tape() as tape:
            loss = tsum(matmul(a, Tensor(b0)))
        g = tape.backward(loss)[a]
        fd = numerical_grad(lambda x: (x @ b0).sum(), a0)
        assert max_rel_err(g, fd) < 1e-4


class TestConcat:
    def test_single_input(self, rng):
        x = rng.normal(size=(2, 3))
        out = concat([Tensor(x)], axis=0)
        np.testing.assert_array_equal(out.data, x)

    def test_stacked_encoder_similarity_widths(self):
        j = 7
        out = concat([Tensor(np.zeros((600, j))), Tensor(np.zeros((1200, j)))], axis=0)
        assert out.shape == (1800, j)

    def test_round_trip_with_narrow(self, rng):
        a = rng.normal(size=(2, 5))
        b = rng.normal(size=(3, 5))
        cat = concat([Tensor(a), Tensor(b)], axis=0)
        np.testing.assert_array_equal(narrow(cat, 0, 0, 2).data, a)
        np.testing.assert_array_equal(narrow(cat, 0, 2, 3).data, b)

    def test_incompatible_shapes(self):
        with pytest.raises(ShapeError):
            concat([Tensor(np.ones((2, 3))), Tensor(np.ones((2, 4)))], axis=0)

    def test_backward_splits_gradient(self, rng):
        a = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
        b = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
        with Tape() as tape:
            loss = tsum(concat([a, b], axis=0) * Tensor(np.arange(18.0).reshape(6, 3)))
        g = tape.backward(loss)
        np.testing.assert_array_equal(g[a], np.arange(6.0).reshape(2, 3))
        np.testing.assert_array_equal(g[b], np.arange(6.0, 18.0).reshape(4, 3))


class TestSoftmax:
    def test_symmetry(self):
        out = softmax(Tensor([0.0, 0.0]), axis=0)
        np.testing.assert_allclose(out.data, [0.5, 0.5])

    def test_large_inputs_do_not_overflow(self):
        out = softmax(Tensor([1000.0, 0.0]), axis=0)
        assert abs(out.data[0] - 1.0) < 1e-12
        assert out.data[1] < 1e-12

    def test_rows_sum_to_one(self, rng):
        x = rng.uniform(-5, 5, size=(6, 9))
        out = softmax(Tensor(x), axis=1)
        np.testing.assert_allclose(out.data.sum(axis=1), 1.0, atol=1e-9)


class TestMaxOverAxis:
    def test_definition(self):
        out = max_over_axis(Tensor([[1.0, 5.0], [3.0, 2.0]]), axis=1)
        np.testing.assert_array_equal(out.data, [5.0, 3.0])

    def test_tie_routes_gradient_to_lowest_index(self):
        a = Tensor([[2.0, 2.0, 1.0]], requires_grad=True)
        with Tape() as tape:
            loss = tsum(max_over_axis(a, axis=1))
        g = tape.backward(loss)[a]
        np.testing.assert_array_equal(g, [[1.0, 0.0, 0.0]])

    def test_grad_matches_finite_differences(self, rng):
        x0 = rng.uniform(-2, 2, size=(4, 3))
        a = Tensor(x0.copy(), requires_grad=True)
        with Tape() as tape:
            loss = tsum(max_over_axis(a, axis=1) * Tensor([1.0, -2.0, 3.0, 0.5]))
        g = tape.backward(loss)[a]
        fd = numerical_grad(lambda x: (x.max(axis=1) * np.array([1.0, -2.0, 3.0, 0.5])).sum(), x0)
        assert max_rel_err(g, fd) < 1e-4


class TestDropout:
    def test_rate_zero_is_identity(self, rng):
        x = Tensor(rng.normal(size=(3, 3)))
        assert dropout(x, 0.0, training=True, rng=7) is x

    def test_eval_mode_is_identity(self, rng):
        x = Tensor(rng.normal(size=(3, 3)))
        assert dropout(x, 0.9, training=False, rng=7) is x

    def test_same_seed_same_mask(self, rng):
        x = Tensor(rng.normal(size=(8, 8)))
        a = dropout(x, 0.4, training=True, rng=123)
        b = dropout(x, 0.4, training=True, rng=123)
        np.testing.assert_array_equal(a.data, b.data)

    def test_survivors_scaled(self, rng):
        x = Tensor(np.ones((50, 50)))
        out = dropout(x, 0.3, training=True, rng=5)
        kept = out.data[out.data != 0.0]
        np.testing.assert_allclose(kept, 1.0 / 0.7)

    def test_invalid_rate(self):
        with pytest.raises(ValueError):
            dropout(Tensor([1.0]), 1.0, training=True, rng=0)


class TestBackward:
    def test_sum_gradient_is_ones(self, rng):
        p = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
        with Tape() as tape:
            loss = tsum(p)
        np.testing.assert_array_equal(tape.backward(loss)[p], np.ones((3, 2)))

    def test_two_layer_composition(self, rng):
        w1_0 = rng.uniform(-1, 1, size=(4, 3))
        w2_0 = rng.uniform(-1, 1, size=(2, 4))
        x0 = rng.uniform(-2, 2, size=(3, 5))
        w1 = Tensor(w1_0.copy(), requires_grad=True)
        w2 = Tensor(w2_0.copy(), requires_grad=True)
        with Tape() as tape:
            h = T.tanh(matmul(w1, Tensor(x0)))
            loss = tsum(matmul(w2, h))
        g = tape.backward(loss)

        def f_w1(w):
            return (w2_0 @ np.tanh(w @ x0)).sum()

        def f_w2(w):
            return (w @ np.tanh(w1_0 @ x0)).sum()

        assert max_rel_err(g[w1], numerical_grad(f_w1, w1_0)) < 1e-4
        assert max_rel_err(g[w2], numerical_grad(f_w2, w2_0)) < 1e-4

    def test_double_backward_errors(self):
        p = Tensor([1.0], requires_grad=True)
        with Tape() as tape:
            loss = tsum(p)
        tape.backward(loss)
        with pytest.raises(TapeError, match="reset"):
            tape.backward(loss)
        tape.reset()
        tape.backward(loss)

    def test_non_scalar_loss_rejected(self):
        p = Tensor([1.0, 2.0], requires_grad=True)
        with Tape() as tape:
            out = p * Tensor([2.0, 2.0])
        with pytest.raises(ShapeError):
            tape.backward(out)

    def test_unvisited_watched_param_gets_zeros(self, rng):
        used = Tensor(rng.normal(size=2), requires_grad=True)
        unused = Tensor(rng.normal(size=(2, 2)), requires_grad=True)
        with Tape() as tape:
            tape.watch(used, unused)
            loss = tsum(used)
        g = tape.backward(loss)
        np.testing.assert_array_equal(g[unused], np.zeros((2, 2)))

    def test_module_level_backward(self):
        p = Tensor([3.0], requires_grad=True)
        with Tape():
            loss = tsum(p * p)
        g = T.backward(loss)
        np.testing.assert_allclose(g[p], [6.0])


OPS = {
    "add": (lambda a, b: (a + b), lambda a, b: a + b, 2),
    "sub": (lambda a, b: (a - b), lambda a, b: a - b, 2),
    "mul": (lambda a, b: (a * b), lambda a, b: a * b, 2),
    "matmul": (lambda a, b: matmul(a, b), lambda a, b: a @ b, 2),
    "sigmoid": (lambda a: T.sigmoid(a), lambda a: 1 / (1 + np.exp(-a)), 1),
    "tanh": (lambda a: T.tanh(a), np.tanh, 1),
    "relu": (lambda a: T.relu(a), lambda a: np.maximum(a, 0), 1),
    "transpose": (lambda a: T.transpose(a), lambda a: a.T, 1),
    "reshape": (lambda a: T.reshape(a, (1, 12)), lambda a: a.reshape(1, 12), 1),
    "narrow": (lambda a: narrow(a, 0, 1, 2), lambda a: a[1:3], 1),
    "softmax_rows": (
        lambda a: softmax(a, axis=1),
        lambda a: np.exp(a - a.max(1, keepdims=True))
        / np.exp(a - a.max(1, keepdims=True)).sum(1, keepdims=True),
        1,
    ),
    "logsumexp_rows": (
        lambda a: T.logsumexp(a, axis=1),
        lambda a: np.log(np.exp(a).sum(axis=1)),
        1,
    ),
    "logsumexp_all": (
        lambda a: T.logsumexp(a),
        lambda a: np.log(np.exp(a).sum()),
        1,
    ),
    "sum_rows": (lambda a: tsum(a, axis=0), lambda a: a.sum(axis=0), 1),
    "max_rows": (lambda a: max_over_axis(a, axis=1), lambda a: a.max(axis=1), 1),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients_match_finite_differences(name, rng):
    """1e-4 relative agreement with central differences, inputs in [-2, 2]."""
    op, ref, arity = OPS[name]
    a0 = rng.uniform(-2, 2, size=(4, 3))
    b0 = rng.uniform(-2, 2, size=(3, 4) if name == "matmul" else (4, 3))
    weight = rng.normal(size=op(Tensor(a0), Tensor(b0)).shape if arity == 2 else op(Tensor(a0)).shape)

    a = Tensor(a0.copy(), requires_grad=True)
    b = Tensor(b0.copy(), requires_grad=True)
    with Tape() as tape:
        out = op(a, b) if arity == 2 else op(a)
        loss = tsum(out * Tensor(weight))
    g = tape.backward(loss)

    if arity == 2:
        fd_a = numerical_grad(lambda x: (ref(x, b0) * weight).sum(), a0)
        fd_b = numerical_grad(lambda x: (ref(a0, x) * weight).sum(), b0)
        assert max_rel_err(g[a], fd_a) < 1e-4, name
        assert max_rel_err(g[b], fd_b) < 1e-4, name
    else:
        fd_a = numerical_grad(lambda x: (ref(x) * weight).sum(), a0)
        assert max_rel_err(g[a], fd_a) < 1e-4, name


class TestInvariants:
    def test_non_finite_result_raises(self):
        big = Tensor(np.full((2, 2), 1e308))
        with np.errstate(over="ignore"), pytest.raises(NonFiniteError):
            matmul(big, big)

    def test_forward_bit_identical_given_seed(self, rng):
        x = rng.normal(size=(6, 6))

        def run():
            t = Tensor(x.copy())
            out = T.sigmoid(matmul(t, t) * Tensor(0.1))
            return dropout(out, 0.2, training=True, rng=99).data

        assert np.array_equal(run(), run())

    def test_product_shape_equals_data_length(self, rng):
        t = Tensor(rng.normal(size=(3, 4, 2)))
        assert int(np.prod(t.shape)) == t.data.size
