import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from quantbench import numcore as nc
from quantbench.errors import ContractError, DimensionError, InvalidRangeError

from oracles import central_diff, conv2d_loops, rel_err

RNG = np.random.default_rng(1234)


def grad_of(fn, *arrays):
    params = [nc.Parameter(a.copy(), f"p{i}") for i, a in enumerate(arrays)]
    loss = fn(*params)
    nc.backward(loss)
    return [p.grad for p in params]


def check_op(fn, *arrays, tol=1e-5):
    grads = grad_of(fn, *arrays)
    for i, a in enumerate(arrays):
        def f(x, i=i):
            args = [nc.const(b) for b in arrays]
            args[i] = nc.const(x)
            return float(fn(*args).value)
        assert rel_err(grads[i], central_diff(f, a)) < tol


def weighted(node, seed=0):
    """Scalar loss with non-uniform weights so every output element matters."""
    w = np.random.default_rng(seed).normal(size=node.shape)
    return nc.sum_(node * w)


UNARY = {
    "neg": lambda a: nc.neg(a),
    "square": nc.square,
    "exp": nc.exp,
    "log": lambda a: nc.log(nc.exp(a) + 1.0),
    "relu": nc.relu,
    "pow2": nc.pow2,
    "softmax": lambda a: nc.softmax(a, axis=-1),
    "transpose": nc.transpose,
    "reshape": lambda a: nc.reshape(a, (-1,)),
    "sum_axis": lambda a: nc.sum_(a, axis=0),
    "mean_axis": lambda a: nc.mean(a, axis=1, keepdims=True),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_gradients(name):
    x = RNG.normal(size=(3, 4))
    if name == "relu":
        x = np.where(np.abs(x) < 0.05, 0.3, x)  # keep away from the kink
    check_op(lambda a: weighted(UNARY[name](a)), x)


BINARY = {
    "add": nc.add, "sub": nc.sub, "mul": nc.mul,
    "div": lambda a, b: nc.div(a, nc.exp(b)),
    "matmul": lambda a, b: nc.matmul(a, nc.transpose(b)),
}


@pytest.mark.parametrize("name", sorted(BINARY))
def test_binary_gradients(name):
    check_op(lambda a, b: weighted(BINARY[name](a, b)), RNG.normal(size=(3, 4)), RNG.normal(size=(3, 4)))


@pytest.mark.parametrize("shape_b", [(), (1, 4), (3, 1)])
def test_broadcast_gradients(shape_b):
    b = RNG.normal(size=shape_b) if shape_b else np.array(RNG.normal())
    check_op(lambda x, y: weighted(nc.mul(x, y) + y), RNG.normal(size=(3, 4)), b)


def test_stack_gradient():
    check_op(lambda a, b: weighted(nc.stack([a, b])), RNG.normal(size=(2, 3)), RNG.normal(size=(2, 3)))


@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1)])
def test_conv2d_matches_loops_and_gradient(stride, padding):
    x = RNG.normal(size=(2, 3, 6, 6))
    w = RNG.normal(size=(4, 3, 3, 3))
    out = nc.conv2d(nc.const(x), nc.const(w), stride, padding).value
    np.testing.assert_allclose(out, conv2d_loops(x, w, stride, padding), rtol=1e-12, atol=1e-12)
    check_op(lambda a, b: weighted(nc.conv2d(a, b, stride, padding)), x, w)


def test_cross_entropy_gradient_and_value():
    logits = RNG.normal(size=(5, 3))
    labels = np.array([0, 2, 1, 1, 0])
    check_op(lambda a: nc.cross_entropy(a, labels), logits)
    p = np.exp(logits) / np.exp(logits).sum(1, keepdims=True)
    expected = -np.mean(np.log(p[np.arange(5), labels]))
    assert nc.cross_entropy(nc.const(logits), labels).value == pytest.approx(expected, rel=1e-12)


def test_clamp_gradient_all_three_inputs():
    x = RNG.normal(size=(4, 5)) * 2
    lo, hi = np.array(-0.7), np.array(0.9)
    x = np.where(np.abs(np.abs(x) - 0.8) < 0.15, 0.0, x)
    check_op(lambda a, l, h: weighted(nc.clamp(a, l, h)), x, lo, hi)


def test_clamp_rejects_inverted_bounds():
    with pytest.raises(InvalidRangeError):
        nc.clamp(nc.const(np.zeros(3)), 1.0, -1.0)


def test_ste_identity_backward_and_rounding_forward():
    x = nc.Parameter(np.array([0.5, -0.5, 1.49, -2.5, 2.4]), "x")
    y = nc.round_ste(x)
    np.testing.assert_array_equal(y.value, [1.0, -1.0, 1.0, -3.0, 2.0])
    nc.backward(nc.sum_(y * np.arange(1.0, 6.0)))
    np.testing.assert_array_equal(x.grad, np.arange(1.0, 6.0))


def test_floor_ste():
    x = nc.Parameter(np.array([1.7, -1.2]), "x")
    y = nc.floor_ste(x)
    np.testing.assert_array_equal(y.value, [1.0, -2.0])
    nc.backward(nc.sum_(y))
    np.testing.assert_array_equal(x.grad, [1.0, 1.0])


def test_rounding_as_identity_makes_ste_paths_smooth():
    x = RNG.normal(size=(3, 3)) * 3

    def fn(a):
        return weighted(nc.round_ste(a * 2.0) * nc.exp(a * 0.1))

    with nc.rounding_as_identity():
        check_op(fn, x, tol=1e-4)
    assert not np.array_equal(nc.round_ste(nc.const(x)).value, x)


def test_broadcast_rule_is_narrow():
    with pytest.raises(DimensionError):
        nc.add(nc.const(np.zeros((3, 4))), nc.const(np.zeros((4, 3))))
    with pytest.raises(DimensionError):
        nc.mul(nc.const(np.zeros((2, 3, 4))), nc.const(np.zeros((2, 4))))


def test_backward_requires_scalar():
    with pytest.raises(ContractError):
        nc.backward(nc.Parameter(np.ones(3), "v") * 2.0)


def test_gradients_accumulate_across_uses():
    x = nc.Parameter(np.array(3.0), "x")
    nc.backward(x * x + x)
    assert float(x.grad) == pytest.approx(7.0)


def test_no_grad_records_nothing():
    x = nc.Parameter(np.ones(2), "x")
    with nc.no_grad():
        y = nc.sum_(x * 2.0)
    assert not y.requires_grad


def test_deep_chain_does_not_recurse():
    x = nc.Parameter(np.array(1.0), "x")
    y = x
    for _ in range(5000):
        y = y * 1.0
    nc.backward(y)
    assert float(x.grad) == 1.0


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (4,), elements=st.floats(-50, 50, allow_nan=False)))
def test_round_half_away_matches_definition(x):
    r = nc.round_half_away(x)
    expected = np.sign(x) * np.floor(np.abs(x) + 0.5)
    np.testing.assert_array_equal(r, expected)
