import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from airtime import numerics as nx
from airtime.numerics import AdamState, Parameter, ShapeError, Tensor, UsageError

from helpers import central_difference, relative_error

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


def test_softmax_of_zeros_is_uniform():
    np.testing.assert_allclose(nx.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])


def test_logsumexp_of_zeros_is_ln2():
    assert nx.logsumexp(Tensor([0.0, 0.0])).item() == pytest.approx(0.693147, abs=1e-6)


def test_matmul_identity():
    a = np.random.default_rng(0).normal(size=(3, 5))
    np.testing.assert_array_equal(nx.matmul(Tensor(np.eye(3)), Tensor(a)).data, a)


def test_shape_errors_name_the_operation():
    with pytest.raises(ShapeError, match="matmul"):
        nx.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ShapeError, match="add"):
        nx.add(Tensor(np.ones(3)), Tensor(np.ones(4)))
    with pytest.raises(ShapeError, match="concatenate"):
        nx.concatenate([Tensor(np.ones((2, 2))), Tensor(np.ones((3, 3)))], axis=0)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 5), elements=finite), finite)
def test_softmax_rows_sum_to_one_and_shift_invariant(x, c):
    p = nx.softmax(Tensor(x)).data
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-12)
    np.testing.assert_allclose(nx.softmax(Tensor(x + c)).data, p, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (6,), elements=finite), finite)
def test_logsumexp_bounds_and_shift(x, c):
    v = nx.logsumexp(Tensor(x)).item()
    assert v >= x.max()
    assert nx.logsumexp(Tensor(x + c)).item() == pytest.approx(v + c, abs=1e-9)


def test_logsumexp_is_stable_for_large_inputs():
    assert nx.logsumexp(Tensor([1000.0, 1000.0])).item() == pytest.approx(1000 + np.log(2))


def test_backward_of_sum_is_ones():
    p = Tensor(np.arange(4.0), requires_grad=True)
    nx.backward(p.sum())
    np.testing.assert_array_equal(p.grad, np.ones(4))


def test_backward_of_sum_of_squares():
    p = Tensor([1.0, 2.0], requires_grad=True)
    nx.backward((p * p).sum())
    np.testing.assert_array_equal(p.grad, [2.0, 4.0])


def test_backward_rejects_non_scalar():
    p = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(UsageError):
        nx.backward(p * 2.0)


def test_shared_subexpression_accumulates():
    p = Tensor([3.0], requires_grad=True)
    q = p * p
    nx.backward((q + q).sum())
    np.testing.assert_allclose(p.grad, [12.0])


def _gradcheck(build, inputs, tol=1e-6, n=None):
    """Compare analytic gradients of scalar ``build(*inputs)`` with central differences."""
    tensors = [Tensor(x, requires_grad=True) for x in inputs]
    nx.backward(build(*tensors))
    for t in tensors:
        flat = list(np.ndindex(t.shape))
        for idx in flat[: n or len(flat)]:
            num = central_difference(lambda: build(*[Tensor(s.data) for s in tensors]).item(), t.data, idx)
            assert relative_error(t.grad[idx], num, floor=1e-6) <= tol, (idx, t.grad[idx], num)


rng = np.random.default_rng(42)
W = rng.normal(size=(4, 3))


@pytest.mark.parametrize(
    "name, build, shapes",
    [
        ("add", lambda a, b: (nx.add(a, b) * W[0, :3]).sum(), [(2, 3), (3,)]),
        ("sub", lambda a, b: (nx.sub(a, b) * W[1, :3]).sum(), [(2, 3), (1, 3)]),
        ("mul", lambda a, b: nx.mul(a, b).sum(), [(2, 3), (2, 1)]),
        ("div", lambda a, b: nx.div(a, nx.add(nx.mul(b, b), 1.0)).sum(), [(2, 3), (2, 3)]),
        ("matmul", lambda a, b: (nx.matmul(a, b) * W[:2, :2].T[:1]).sum(), [(2, 3, 4), (4, 2)]),
        ("batched matmul", lambda a, b: nx.tanh(nx.matmul(a, b)).sum(), [(2, 3, 4), (2, 4, 2)]),
        ("tanh", lambda a: (nx.tanh(a) * W[:2]).sum(), [(2, 3)]),
        ("relu", lambda a: (nx.relu(a) * W[:2]).sum(), [(2, 3)]),
        ("exp", lambda a: nx.exp(a).sum(), [(2, 3)]),
        ("softmax", lambda a: (nx.softmax(a) * W[:2]).sum(), [(2, 3)]),
        ("log_softmax", lambda a: (nx.log_softmax(a) * W[:2]).sum(), [(2, 3)]),
        ("logsumexp", lambda a: (nx.logsumexp(a, axis=0) * W[0]).sum(), [(4, 3)]),
        ("layer_norm", lambda a, g, b: (nx.layer_norm(a, g, b) * W[:2]).sum(), [(2, 3), (3,), (3,)]),
        ("mean", lambda a: (nx.mean(a, axis=1) * W[0, :2]).sum() + nx.mean(a), [(2, 3)]),
        ("reshape+transpose", lambda a: (a.reshape(3, 2).transpose(1, 0) * W[:2]).sum(), [(2, 3)]),
        ("getitem", lambda a: (a[:, 1:] * W[:2, :2]).sum() + a[np.array([0, 0]), np.array([2, 2])].sum(), [(2, 3)]),
        ("concatenate", lambda a, b: (nx.concatenate([a, b], axis=0) * W[:3]).sum(), [(2, 3), (1, 3)]),
    ],
)
def test_op_gradients_match_finite_differences(name, build, shapes):
    r = np.random.default_rng(7)
    inputs = [r.normal(size=s) for s in shapes]
    if name == "relu":
        inputs[0][np.abs(inputs[0]) < 1e-3] = 0.5
    _gradcheck(build, inputs)


def test_three_layer_composite_gradient():
    r = np.random.default_rng(3)
    x = r.normal(size=(5, 4))
    target = r.normal(size=(5, 2))

    def build(w1, w2, w3):
        h = nx.tanh(nx.matmul(Tensor(x), w1))
        h = nx.tanh(nx.matmul(h, w2))
        out = nx.matmul(h, w3)
        d = out - target
        return (d * d).sum()

    _gradcheck(build, [r.normal(size=(4, 6)), r.normal(size=(6, 6)), r.normal(size=(6, 2))])


def _params(values, grads):
    ps = []
    for i, (v, g) in enumerate(zip(values, grads)):
        t = Tensor(np.array(v, dtype=float), requires_grad=True)
        t.grad = None if g is None else np.array(g, dtype=float)
        ps.append(Parameter(f"p{i}", t))
    return ps


def test_adam_first_step_moves_by_lr_times_sign():
    (p,) = _params([[1.0, -2.0, 0.5]], [[0.3, -4.0, 1e-3]])
    state = AdamState(lr=0.01)
    nx.adam_step(state, [p])
    np.testing.assert_allclose(p.data, [1.0 - 0.01, -2.0 + 0.01, 0.5 - 0.01], atol=1e-6)


def test_adam_zero_gradient_leaves_parameters():
    (p,) = _params([[1.0, 2.0]], [[0.0, 0.0]])
    state = AdamState(lr=0.1)
    nx.adam_step(state, [p])
    np.testing.assert_array_equal(p.data, [1.0, 2.0])
    assert state.step == 1


def test_adam_two_steps_by_hand():
    g, lr, b1, b2, eps = 0.5, 0.1, 0.9, 0.999, 1e-8
    x = 2.0
    m = v = 0.0
    for t in (1, 2):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x -= lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
    (p,) = _params([[2.0]], [[g]])
    state = AdamState(lr=lr)
    for _ in range(2):
        p.tensor.grad = np.array([g])
        nx.adam_step(state, [p])
    assert abs(p.data[0] - x) <= 1e-12
    assert abs(state.m["p0"][0] - m) <= 1e-12
    assert abs(state.v["p0"][0] - v) <= 1e-12


def test_adam_requires_gradients():
    (p,) = _params([[1.0]], [None])
    with pytest.raises(UsageError):
        nx.adam_step(AdamState(), [p])


def test_make_rng_is_reproducible_and_stream_separated():
    a = nx.make_rng(5, 1).random(4)
    np.testing.assert_array_equal(a, nx.make_rng(5, 1).random(4))
    assert not np.array_equal(a, nx.make_rng(5, 2).random(4))
    assert isinstance(nx.make_rng(0).bit_generator, np.random.Philox)
