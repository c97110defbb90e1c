import numpy as np
import pytest

from latentdialog import tensor as T
from latentdialog.tensor import NonFiniteError, ShapeError, Tensor, check_finite, no_grad

from conftest import check_op


def test_add_sub_mul_div_gradients(rng):
    a = rng.standard_normal((3, 4))
    b = rng.standard_normal((3, 4))
    check_op(lambda x, y: x + y, a, b)
    check_op(lambda x, y: x - y, a, b)
    check_op(lambda x, y: x * y, a, b)
    check_op(lambda x, y: x / y, a, b + 3.0 * np.sign(b))


def test_trailing_suffix_broadcast_gradients(rng):
    a = rng.standard_normal((2, 3, 4))
    bias = rng.standard_normal(4)
    check_op(lambda x, y: x + y, a, bias)
    check_op(lambda x, y: x * y, a, bias)


def test_scalar_operand(rng):
    a = rng.standard_normal((2, 3))
    check_op(lambda x: x * 2.5 + 1.0, a)
    check_op(lambda x: 1.0 - x, a)


def test_incompatible_broadcast_raises():
    a = Tensor(np.ones((3, 4)))
    with pytest.raises(ShapeError):
        a + Tensor(np.ones((3, 1)))
    with pytest.raises(ShapeError):
        a * Tensor(np.ones(3))


def test_unary_gradients(rng):
    a = rng.standard_normal((3, 5))
    check_op(T.exp, a)
    check_op(T.tanh, a)
    check_op(T.gelu, a)


def test_reductions_and_shapes(rng):
    a = rng.standard_normal((2, 3, 4))
    check_op(lambda x: T.sum_(x, axis=1), a)
    check_op(lambda x: T.mean(x, axis=-1, keepdims=True), a)
    check_op(lambda x: T.mean(x), a)
    check_op(lambda x: x.reshape(6, 4), a)
    check_op(lambda x: x.transpose(2, 0, 1), a)
    check_op(lambda x: x[:, 1], a)
    check_op(lambda x: x[np.array([0, 0, 1])], a)


def test_concat_gradient(rng):
    a = rng.standard_normal((2, 3))
    b = rng.standard_normal((2, 5))
    check_op(lambda x, y: T.concat([x, y], axis=1), a, b)


def test_matmul_gradients(rng):
    check_op(lambda x, y: x @ y, rng.standard_normal((3, 4)), rng.standard_normal((4, 2)))
    check_op(lambda x, y: x @ y, rng.standard_normal((2, 3, 4)), rng.standard_normal((4, 5)))
    check_op(lambda x, y: x @ y, rng.standard_normal((2, 2, 3, 4)), rng.standard_normal((2, 2, 4, 3)))


def test_matmul_shape_mismatch():
    with pytest.raises(ShapeError):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((4, 2)))


def test_embedding_gradient_accumulates_repeats(rng):
    w = rng.standard_normal((6, 3))
    ids = np.array([[1, 2, 1], [5, 1, 0]])
    check_op(lambda x: T.embedding(x, ids), w)
    t = Tensor(np.zeros((6, 3)), requires_grad=True)
    T.embedding(t, ids).sum().backward()
    np.testing.assert_array_equal(t.grad[:, 0], [1, 3, 1, 0, 0, 1])


def test_embedding_out_of_range():
    with pytest.raises(IndexError):
        T.embedding(Tensor(np.zeros((4, 2))), np.array([4]))


def test_softmax_and_log_softmax_gradients(rng):
    a = rng.standard_normal((3, 6))
    check_op(T.softmax, a)
    check_op(T.log_softmax, a)
    check_op(lambda x: T.softmax(x, axis=0), a)


def test_softmax_properties(rng):
    x = rng.standard_normal((4, 7)) * 10
    p = T.softmax(Tensor(x)).data
    np.testing.assert_allclose(p.sum(-1), 1.0, atol=1e-12)
    assert np.all(p > 0)
    # shift invariance
    np.testing.assert_allclose(T.softmax(Tensor(x + 100.0)).data, p, atol=1e-12)
    np.testing.assert_allclose(np.exp(T.log_softmax(Tensor(x)).data), p, atol=1e-12)


def test_softmax_extreme_values_are_finite():
    x = np.array([[1e4, -1e4, 0.0]])
    assert np.all(np.isfinite(T.log_softmax(Tensor(x)).data))


def test_layer_norm_gradient(rng):
    x = rng.standard_normal((2, 3, 8))
    g = rng.standard_normal(8)
    b = rng.standard_normal(8)
    check_op(lambda x, g, b: T.layer_norm(x, g, b), x, g, b)


def test_masked_fill_and_scale_by_mask(rng):
    a = rng.standard_normal((2, 4))
    mask = np.array([[True, False, True, False], [False, False, True, True]])
    check_op(lambda x: T.masked_fill(x, mask, -5.0), a)
    out = T.masked_fill(Tensor(a), mask, -5.0).data
    assert np.all(out[mask] == -5.0)
    check_op(lambda x: T.scale_by_mask(x, mask), a)


def test_cross_entropy_gradient_and_ignore(rng):
    logits = rng.standard_normal((5, 7))
    targets = np.array([1, 3, -100, 6, 0])
    check_op(lambda x: T.cross_entropy_logits(x, targets), logits)
    got = T.cross_entropy_logits(Tensor(logits), targets).data
    lp = logits - np.log(np.exp(logits).sum(-1, keepdims=True))
    keep = targets != -100
    want = -lp[keep, targets[keep]].mean()
    assert abs(got - want) < 1e-12


def test_cross_entropy_all_ignored_is_zero():
    x = Tensor(np.ones((2, 3)), requires_grad=True)
    loss = T.cross_entropy_logits(x, np.array([-100, -100]))
    assert float(loss.data) == 0.0
    loss.backward()
    assert np.all(x.grad == 0)


def test_cross_entropy_target_out_of_range():
    with pytest.raises(IndexError):
        T.cross_entropy_logits(Tensor(np.zeros((1, 3))), np.array([3]))


def test_gradient_linearity(rng):
    a = rng.standard_normal((3, 3))

    def grad_of(scale):
        x = Tensor(a.copy(), requires_grad=True)
        (T.tanh(x).sum() * scale).backward()
        return x.grad

    np.testing.assert_allclose(grad_of(3.0), 3.0 * grad_of(1.0), rtol=1e-12)


def test_shared_subexpression_accumulates():
    x = Tensor(np.array([2.0]), requires_grad=True)
    y = x * x
    (y + y).sum().backward()
    np.testing.assert_allclose(x.grad, [8.0])


def test_backward_twice_raises():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    loss = (x * x).sum()
    loss.backward()
    with pytest.raises(RuntimeError):
        loss.backward()


def test_backward_needs_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        (x * 2.0).backward()


def test_no_grad_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        y = x * 2.0
    assert not y.requires_grad


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_check_finite_raises_on_nan():
    x = Tensor(np.array([0.0, 1.0]))
    with check_finite():
        with pytest.raises(NonFiniteError):
            x / Tensor(np.array([0.0, 1.0]))
