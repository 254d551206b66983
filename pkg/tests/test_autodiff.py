import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from adgm import autodiff as ad
from adgm.autodiff import NonDeterministicError, NonFiniteError, Tape, backward, grad_check


def leaf(data, name="x", tape=None):
    tape = tape or Tape()
    return tape, tape.watch(np.asarray(data, dtype=np.float64), name)


# --------------------------------------------------------------------------- forward examples


@pytest.mark.parametrize(
    "a, b, expected",
    [
        ([[1, 2], [3, 4]], np.eye(2), [[1, 2], [3, 4]]),
        ([[1, 0], [0, 1]], [[5], [7]], [[5], [7]]),
        ([[1, 2]], [[3], [4]], [[11]]),
    ],
)
def test_matmul_examples(a, b, expected):
    out = ad.matmul(ad.Tensor(np.array(a, float)), ad.Tensor(np.array(b, float)))
    np.testing.assert_array_equal(out.data, expected)


def test_matmul_shape_mismatch():
    with pytest.raises(ValueError):
        ad.matmul(ad.Tensor(np.ones((2, 3))), ad.Tensor(np.ones((2, 3))))


def test_relu_examples():
    np.testing.assert_array_equal(ad.relu(ad.Tensor(np.array([-1.0, 0.0, 2.0]))).data, [0, 0, 2])
    x = ad.Tensor(np.array([-3.0, 5.0]))
    np.testing.assert_array_equal(ad.relu(ad.relu(x)).data, [0, 5])


def test_relu_gradient_and_zero_subgradient():
    tape, x = leaf([-1.0, 2.0])
    np.testing.assert_array_equal(backward(tape, ad.sum(ad.relu(x)))["x"], [0, 1])
    tape, x = leaf([0.0])
    assert backward(tape, ad.sum(ad.relu(x)))["x"][0] == 0.0


def test_log_sum_exp_examples():
    assert ad.log_sum_exp(ad.Tensor(np.zeros(2))).item() == pytest.approx(math.log(2), abs=1e-12)
    for c in (-7.5, 0.0, 3.25):
        assert ad.log_sum_exp(ad.Tensor(np.array([c]))).item() == c
    big = ad.log_sum_exp(ad.Tensor(np.array([1000.0, 1000.0]))).item()
    assert big == pytest.approx(1000 + math.log(2), abs=1e-10)


def test_log_sum_exp_empty_axis():
    with pytest.raises(ValueError):
        ad.log_sum_exp(ad.Tensor(np.zeros((3, 0))), axis=1)


# --------------------------------------------------------------------------- backward examples


def test_backward_square_sum():
    tape, x = leaf([1.0, 2.0, 3.0])
    np.testing.assert_array_equal(backward(tape, ad.sum(ad.mul(x, x)))["x"], [2, 4, 6])


def test_backward_constant_output_gives_zero():
    tape, x = leaf([1.0, 2.0])
    g = backward(tape, ad.Tensor(np.array(3.0)))
    np.testing.assert_array_equal(g["x"], [0, 0])


def test_gradient_accumulates_over_uses():
    tape, x = leaf([1.5])
    np.testing.assert_array_equal(backward(tape, ad.sum(ad.add(x, x)))["x"], [2.0])


def test_backward_rejects_non_scalar():
    tape, x = leaf([1.0, 2.0])
    with pytest.raises(ValueError, match="scalar"):
        backward(tape, ad.mul(x, 2.0))


def test_backward_detects_cycle():
    tape, x = leaf([1.0])
    y = ad.mul(x, 2.0)
    # rewire the first op to consume a node created later
    z = ad.exp(y)
    op = tape._ops[0]
    tape._ops[0] = ad._Op(op.name, op.out, (z.node,), op.vjp)
    with pytest.raises(RuntimeError, match="cycle"):
        backward(tape, ad.sum(z))


def test_shared_parameter_leaf():
    tape = Tape({"w": np.array([2.0])})
    assert tape.param("w") is tape.param("w")
    out = ad.sum(ad.mul(tape.param("w"), tape.param("w")))
    assert backward(tape, out)["w"][0] == 4.0


def test_non_finite_raises():
    with pytest.raises(NonFiniteError):
        ad.log(ad.Tensor(np.array([-1.0])))


def test_broadcast_rules():
    a = ad.Tensor(np.ones((4, 3)))
    ad.add(a, ad.Tensor(np.ones(3)))
    ad.add(a, 2.0)
    with pytest.raises(ValueError):
        ad.add(a, ad.Tensor(np.ones(4)))


def test_replay_is_deterministic(rng):
    w = rng.standard_normal((3, 2))
    x = rng.standard_normal((5, 3))

    def run():
        t = Tape({"w": w})
        return ad.sum(ad.softplus(ad.matmul(t.constant(x), t.param("w")))).data

    assert run().tobytes() == run().tobytes()


def test_requires_grad_false_records_nothing():
    t = Tape({"w": np.ones(2)}, requires_grad=False)
    out = ad.sum(ad.exp(t.param("w")))
    assert len(t) == 0
    assert out.item() == pytest.approx(2 * math.e)


# --------------------------------------------------------------------------- primitive gradient oracles

UNARY = {
    "exp": ad.exp,
    "square": ad.square,
    "softplus": ad.softplus,
    "sigmoid": ad.sigmoid,
    "neg": ad.neg,
    "relu": ad.relu,
    "log": lambda x: ad.log(ad.add(ad.square(x), 0.5)),
    "clip": lambda x: ad.clip(x, -1.0, 1.0),
    "lse_rows": lambda x: ad.log_sum_exp(x, axis=1),
    "lse_cols_keep": lambda x: ad.log_sum_exp(x, axis=0, keepdims=True),
    "sum_axis": lambda x: ad.sum(x, axis=0),
    "mean": lambda x: ad.mean(x, axis=1),
    "reshape": lambda x: ad.reshape(x, (-1,)),
    "transpose": ad.transpose,
    "take_rows": lambda x: ad.take_rows(x, np.array([2, 0, 2])),
}


def _check(fn, shapes, seed):
    r = np.random.default_rng(seed)
    params = {f"p{i}": r.uniform(-2, 2, s) for i, s in enumerate(shapes)}
    weights = None

    def f(tape):
        nonlocal weights
        out = fn(*[tape.param(k) for k in params])
        if weights is None:
            weights = np.random.default_rng(seed + 1).standard_normal(out.shape)
        return ad.sum(ad.mul(out, weights))

    return grad_check(f, params)


@pytest.mark.parametrize("name", sorted(UNARY))
@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_unary_primitive_gradients(name, seed):
    report = _check(UNARY[name], [(3, 4)], seed)
    assert report.passed, report.errors


BINARY = {
    "add": (ad.add, [(3, 4), (3, 4)]),
    "add_bcast_row": (ad.add, [(3, 4), (4,)]),
    "add_bcast_col": (ad.add, [(3, 4), (3, 1)]),
    "sub": (ad.sub, [(3, 4), (4,)]),
    "mul": (ad.mul, [(3, 4), (3, 4)]),
    "mul_bcast": (ad.mul, [(3, 4), (3, 1)]),
    "matmul": (ad.matmul, [(3, 4), (4, 2)]),
    "concat": (lambda a, b: ad.concat([a, b], axis=-1), [(3, 4), (3, 2)]),
    "concat0": (lambda a, b: ad.concat([a, b], axis=0), [(3, 4), (2, 4)]),
}


@pytest.mark.parametrize("name", sorted(BINARY))
@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_binary_primitive_gradients(name, seed):
    fn, shapes = BINARY[name]
    report = _check(fn, shapes, seed)
    assert report.passed, report.errors


@settings(max_examples=50, deadline=None)
@given(
    x=hnp.arrays(np.float64, st.integers(1, 6), elements=st.floats(-50, 50)),
    c=st.floats(-100, 100),
)
def test_log_sum_exp_shift(x, c):
    a = ad.log_sum_exp(ad.Tensor(x + c)).item()
    b = ad.log_sum_exp(ad.Tensor(x)).item() + c
    assert a == pytest.approx(b, abs=1e-10)


# --------------------------------------------------------------------------- grad_check


def test_grad_check_linear_layer(rng):
    params = {"W": rng.standard_normal((4, 3)), "b": rng.standard_normal(3)}
    x = rng.standard_normal((5, 4))

    def f(t):
        h = ad.add(ad.matmul(t.constant(x), t.param("W")), t.param("b"))
        return ad.sum(ad.square(h))

    rep = grad_check(f, params)
    assert rep.passed and rep.max_error < 1e-6


def test_grad_check_flags_corrupted_gradient(rng):
    params = {"W": rng.standard_normal((2, 2))}

    def f(t):
        return ad.sum(ad.square(t.param("W")))

    tape = Tape(params)
    good = backward(tape, f(tape))
    bad = {"W": good["W"].copy()}
    bad["W"][0, 1] += 1.0
    rep = grad_check(f, params, analytic=bad)
    assert not rep.passed
    assert rep.failures() == ["W"]


def test_grad_check_rejects_non_deterministic():
    r = np.random.default_rng(0)

    def f(t):
        return ad.sum(ad.mul(t.param("w"), float(r.standard_normal())))

    with pytest.raises(NonDeterministicError):
        grad_check(f, {"w": np.ones(2)})


def test_relative_error_floor():
    assert ad.relative_error(np.array([0.0]), np.array([1e-9])) == pytest.approx(1e-3)
    assert ad.relative_error(np.array([2.0]), np.array([1.0])) == pytest.approx(0.5)
