import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mstream import autograd as ag
from oracles import matmul_oracle


def test_matmul_identity():
    out = ag.matmul(ag.Tensor([[1.0, 0.0], [0.0, 1.0]]), ag.Tensor([[2.0], [3.0]]))
    assert out.data.tolist() == [[2.0], [3.0]]


def test_matmul_small():
    out = ag.matmul(ag.Tensor([[1.0, 2.0]]), ag.Tensor([[3.0], [4.0]]))
    assert out.data.tolist() == [[11.0]]


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(4, 2))
    out = ag.matmul(ag.Tensor(a), ag.Tensor(b)).data
    np.testing.assert_allclose(out, matmul_oracle(a, b), atol=1e-12)


def test_matmul_shape_mismatch_names_both_shapes():
    with pytest.raises(ag.ShapeMismatch) as err:
        ag.matmul(ag.Tensor(np.zeros((2, 3))), ag.Tensor(np.zeros((4, 2))))
    assert "(2, 3)" in str(err.value) and "(4, 2)" in str(err.value)


def test_softmax_symmetry():
    np.testing.assert_allclose(ag.softmax(ag.Tensor([0.0, 0.0])).data, [0.5, 0.5])


def test_softmax_analytic():
    out = ag.softmax(ag.Tensor([math.log(3.0), 0.0])).data
    np.testing.assert_allclose(out, [0.75, 0.25], atol=1e-15)


def test_softmax_no_overflow():
    out = ag.softmax(ag.Tensor([1000.0, 0.0])).data
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out, [1.0, 0.0], atol=1e-300)


def test_softmax_empty_rejected():
    with pytest.raises(ValueError):
        ag.softmax(ag.Tensor(np.zeros(0)))


@given(st.lists(st.floats(-50, 50), min_size=1, max_size=8), st.randoms())
@settings(max_examples=60, deadline=None)
def test_softmax_simplex_and_permutation(vals, rnd):
    out = ag.softmax(ag.Tensor(vals)).data
    assert abs(out.sum() - 1.0) < 1e-12
    assert np.all(out > 0)
    perm = list(range(len(vals)))
    rnd.shuffle(perm)
    out_p = ag.softmax(ag.Tensor([vals[i] for i in perm])).data
    np.testing.assert_allclose(out_p, out[perm], atol=1e-12)


def test_logsumexp_analytic():
    out = ag.logsumexp(ag.Tensor([math.log(2.0), math.log(3.0)]))
    assert abs(float(out.data) - math.log(5.0)) < 1e-12


def test_logsumexp_neg_inf_identity():
    out = ag.logsumexp(ag.Tensor([-np.inf, 1.25]))
    assert float(out.data) == 1.25
    assert float(ag.logsumexp(ag.Tensor([-np.inf, -np.inf])).data) == -np.inf


def test_logsumexp_uniform():
    out = ag.logsumexp(ag.Tensor([0.0, 0.0, 0.0, 0.0]))
    assert abs(float(out.data) - math.log(4.0)) < 1e-12


@given(st.lists(st.floats(-100, 100), min_size=1, max_size=10))
@settings(max_examples=60, deadline=None)
def test_logsumexp_bounds(vals):
    out = float(ag.logsumexp(ag.Tensor(vals)).data)
    assert out >= max(vals) - 1e-12
    assert out <= max(vals) + math.log(len(vals)) + 1e-12


def test_backward_quadratic():
    w = ag.Tensor([1.0, 2.0], requires_grad=True)
    ag.backward(ag.tensor_sum(ag.mul(w, w)))
    np.testing.assert_allclose(w.grad, [2.0, 4.0])


def test_backward_constant_loss_leaves_zero_grads():
    w = ag.Tensor([1.0, 2.0], requires_grad=True)
    loss = ag.tensor_sum(ag.Tensor([3.0]))
    ag.backward(loss)
    grads = ag.collect_grads({"w": w})
    np.testing.assert_array_equal(grads["w"], np.zeros(2))


def test_backward_requires_scalar():
    w = ag.Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ValueError):
        ag.backward(ag.mul(w, w))


def test_backward_accumulates_across_calls():
    w = ag.Tensor([1.0, 2.0], requires_grad=True)
    for _ in range(2):
        ag.backward(ag.tensor_sum(ag.mul(w, w)))
    np.testing.assert_allclose(w.grad, [4.0, 8.0])


def test_gradient_check_quadratic_is_tight():
    w = {"w": ag.Tensor([0.7, -1.3, 2.0], requires_grad=True)}
    err = ag.gradient_check(lambda: ag.tensor_sum(ag.mul(w["w"], w["w"])), w)
    assert err < 1e-9


def test_gradient_check_rejects_bad_eps():
    w = {"w": ag.Tensor([1.0], requires_grad=True)}
    with pytest.raises(ValueError):
        ag.gradient_check(lambda: ag.tensor_sum(w["w"]), w, eps=0.0)


def _random_composite(rng):
    """A composite loss touching most differentiable ops."""
    p = {
        "a": ag.Tensor(rng.normal(size=(3, 4)), requires_grad=True),
        "b": ag.Tensor(rng.normal(size=(4, 4)), requires_grad=True),
        "v": ag.Tensor(rng.normal(size=6), requires_grad=True),
        "w": ag.Tensor(rng.normal(size=(2, 8)), requires_grad=True),
    }

    def f():
        m = ag.tanh(ag.matmul(p["a"], p["b"]))
        s = ag.softmax(p["v"][:3])
        ctx = ag.matmul(s, ag.add(m, ag.Tensor(np.full(4, 0.1))))
        h, c = ag.lstm_step(ag.concat([ctx, p["v"][2:]]), ag.Tensor(np.zeros(2)),
                            ag.Tensor(np.zeros(2)), p["w"])
        lse = ag.logsumexp(ag.concat([h, ag.sigmoid(c)]))
        row = ag.log_softmax(ag.stack([h, c]), axis=-1)
        gathered = ag.take(ag.reshape(row, (4,)), np.array([0, 3, 1]))
        pair = ag.logaddexp(gathered, ag.Tensor([-np.inf, 0.0, -2.0]))
        return ag.add(ag.tensor_sum(pair), ag.mul(lse, lse))

    return f, p


@pytest.mark.parametrize("seed", range(4))
def test_composite_graphs_match_finite_differences(seed):
    f, params = _random_composite(np.random.default_rng(seed))
    assert ag.gradient_check(f, params) < 1e-4


@pytest.mark.parametrize("seed", [100, 101, 103])
def test_conv_and_pool_match_finite_differences(seed):
    # seeds chosen away from max-pool ties, where finite differences
    # straddle the argmax switch and stop approximating the gradient
    rng = np.random.default_rng(seed)
    p = {
        "x": ag.Tensor(rng.normal(size=(2, 6, 5)), requires_grad=True),
        "k": ag.Tensor(rng.normal(size=(3, 2, 3, 3)) * 0.4, requires_grad=True),
        "b": ag.Tensor(rng.normal(size=3) * 0.1, requires_grad=True),
    }

    def f():
        y = ag.maxpool2x2(ag.relu(ag.conv2d(p["x"], p["k"], p["b"])))
        return ag.tensor_sum(ag.mul(y, y))

    assert ag.gradient_check(f, p, eps=1e-6) < 1e-4


def test_no_grad_builds_no_graph():
    w = ag.Tensor([1.0, 2.0], requires_grad=True)
    with ag.no_grad():
        out = ag.tensor_sum(ag.mul(w, w))
    assert out._bwd is None and not out.requires_grad


def test_all_inputs_finite_after_forward_ops():
    rng = np.random.default_rng(5)
    v = ag.Tensor(rng.normal(size=6) * 100)
    for out in (ag.softmax(v), ag.tanh(v), ag.sigmoid(v), ag.log_softmax(v)):
        assert np.all(np.isfinite(out.data))
