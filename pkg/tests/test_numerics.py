import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nodealign import numerics as nx
from nodealign.numerics import Tensor


def leaf(a):
    return Tensor(a, requires_grad=True)


def test_matmul_identity_and_dot():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(nx.matmul(Tensor(np.eye(2)), a).data, a.data)
    assert nx.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]


def test_matmul_shape_error():
    with pytest.raises(nx.ShapeError):
        nx.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_sum_gradient_is_replicated_column_sums(rng):
    a, b = leaf(rng.normal(size=(3, 3))), leaf(rng.normal(size=(3, 3)))
    nx.sum_(nx.matmul(a, b)).backward()
    expected = np.tile(b.data.sum(axis=1), (3, 1))
    np.testing.assert_allclose(a.grad, expected, rtol=1e-12)
    fd = nx.numerical_gradient(lambda: nx.sum_(nx.matmul(a, b)), a, h=1e-4)
    assert nx.relative_error(a.grad, fd) < 1e-6


def test_matmul_associativity(rng):
    for _ in range(20):
        a, b, c = (Tensor(rng.normal(size=(4, 4))) for _ in range(3))
        lhs = nx.matmul(nx.matmul(a, b), c).data
        rhs = nx.matmul(a, nx.matmul(b, c)).data
        assert np.abs(lhs - rhs).max() < 1e-9


def test_softmax_examples():
    np.testing.assert_allclose(nx.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])
    x = np.array([1.0, 2.0, 3.0])
    direct = np.exp(x) / np.exp(x).sum()
    assert np.abs(nx.softmax(Tensor(x)).data - direct).max() < 1e-12


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=2, max_size=8), st.floats(-100, 100))
def test_softmax_shift_invariance_and_rows(values, c):
    x = np.array(values)
    p = nx.softmax(Tensor(x)).data
    q = nx.softmax(Tensor(x + c)).data
    np.testing.assert_allclose(p, q, atol=1e-12)
    assert abs(p.sum() - 1.0) < 1e-12
    assert np.all(p >= 0) and np.all(p <= 1)


def test_softmax_rows_strictly_inside_unit_interval(rng):
    p = nx.softmax(Tensor(rng.normal(size=(6, 5))), axis=1).data
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
    assert np.all((p > 0) & (p < 1))


def test_layer_norm_two_point_and_scale_invariance(rng):
    out = nx.layer_norm(Tensor([[1.0, 3.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=0.0)
    np.testing.assert_allclose(out.data, [[-1.0, 1.0]])
    x = rng.normal(size=(3, 5))
    g, b = Tensor(np.ones(5)), Tensor(np.zeros(5))
    np.testing.assert_allclose(nx.layer_norm(Tensor(4.0 * x), g, b, 0.0).data,
                               nx.layer_norm(Tensor(x), g, b, 0.0).data, atol=1e-12)


def test_layer_norm_gradient(rng):
    x, g, b = leaf(rng.normal(size=(4, 8))), leaf(rng.normal(size=8)), leaf(rng.normal(size=8))
    w = Tensor(rng.normal(size=(4, 8)))
    fn = lambda: nx.sum_(nx.layer_norm(x, g, b) * w)
    assert nx.check_gradients(fn, [x, g, b]) < 1e-5


def test_cosine_examples():
    u = Tensor([1.0, 2.0])
    assert nx.cosine_similarity(u, u).item() == pytest.approx(1.0)
    assert nx.cosine_similarity(Tensor([1.0, 0.0]), Tensor([0.0, 1.0])).item() == 0.0
    assert nx.cosine_similarity(u, Tensor([2.0, 1.0])).item() == pytest.approx(0.8, abs=1e-15)
    with pytest.raises(nx.DegenerateInputError):
        nx.cosine_similarity(u, Tensor([0.0, 0.0]))


def test_stop_gradient_deposits_exact_zero(rng):
    a = leaf(rng.normal(size=3))
    out = nx.sum_(nx.stop_gradient(a) * Tensor([1.0, 2.0, 3.0]))
    out.backward()
    assert np.array_equal(a.grad, np.zeros(3))
    np.testing.assert_array_equal(nx.stop_gradient(a).data, a.data)


def test_stop_gradient_on_one_of_two_paths(rng):
    a = leaf(rng.normal(size=3))
    (nx.sum_(a * a) + nx.sum_(nx.stop_gradient(a) * 5.0)).backward()
    np.testing.assert_allclose(a.grad, 2 * a.data)


def _op_cases(rng):
    m = rng.normal(size=(3, 4))
    mw = rng.normal(size=(3, 3))
    yield "matmul", lambda x: nx.sum_(nx.matmul(x, Tensor(m.T)) * Tensor(mw)), (3, 4)
    w = rng.normal(size=(3, 4))
    yield "softmax", lambda x: nx.sum_(nx.softmax(x, axis=1) * Tensor(w)), (3, 4)
    yield "log_softmax", lambda x: nx.sum_(nx.log_softmax(x, axis=1) * Tensor(w)), (3, 4)
    g, b = Tensor(rng.normal(size=4)), Tensor(rng.normal(size=4))
    yield "layer_norm", lambda x: nx.sum_(nx.layer_norm(x, g, b) * Tensor(w)), (3, 4)
    v = Tensor(rng.normal(size=5))
    yield "cosine", lambda x: nx.cosine_similarity(x, v), (5,)
    yield "relu", lambda x: nx.sum_(nx.relu(x) * Tensor(w)), (3, 4)
    yield "exp_log", lambda x: nx.sum_(nx.log(nx.exp(x) + 1.0) * Tensor(w)), (3, 4)
    yield "mean_T", lambda x: nx.sum_(nx.mean(nx.transpose(x), axis=0) * Tensor(w[:, 0])), (3, 4)


@pytest.mark.parametrize("seed", range(20))
def test_every_op_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    for name, fn, shape in _op_cases(rng):
        x = leaf(rng.normal(size=shape))
        err = nx.check_gradients(lambda: fn(x), [x])
        assert err < 1e-4, (name, err)


def test_take_rows_and_concat_gradients(rng):
    a, b = leaf(rng.normal(size=(3, 2))), leaf(rng.normal(size=(2, 2)))
    w = Tensor(rng.normal(size=(4, 2)))
    fn = lambda: nx.sum_(nx.take_rows(nx.concat([a, b]), [0, 4, 4, 1]) * w)
    assert nx.check_gradients(fn, [a, b]) < 1e-8


def test_forward_results_finite(rng):
    x = Tensor(rng.normal(size=(5, 4)) * 100)
    for out in (nx.softmax(x), nx.log_softmax(x),
                nx.layer_norm(x, Tensor(np.ones(4)), Tensor(np.zeros(4)))):
        assert np.all(np.isfinite(out.data))
