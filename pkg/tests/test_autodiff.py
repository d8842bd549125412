import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from zeroshot_od import autodiff as ad


def grad_of(build, *values):
    """Analytic gradients of ``build(*nodes)`` (a scalar) for 64-bit inputs."""
    nodes = [ad.parameter(np.array(v, dtype=np.float64)) for v in values]
    ad.backward(build(*nodes))
    return [n.grad for n in nodes]


def numeric(build, values, i):
    def f(x):
        args = [ad.constant(v) for v in values]
        args[i] = ad.constant(x)
        return float(build(*args).value)
    return ad.finite_diff_grad(f, values[i], 1e-6)


def rel_err(a, b):
    return float(np.max(np.abs(a - b)) / max(1e-8, np.max(np.abs(b))))


RNG = np.random.default_rng(0)
PROJ = RNG.normal(size=(3, 4))
PROJ5 = RNG.normal(size=(5, 4))

CASES = {
    "add": (lambda a, b: ad.sum_all(ad.mul(ad.add(a, b), ad.constant(PROJ))), [(3, 4), (3, 4)]),
    "add_bias": (lambda a, b: ad.sum_all(ad.mul(ad.add(a, b), ad.constant(PROJ))), [(3, 4), (4,)]),
    "sub": (lambda a, b: ad.sum_all(ad.mul(ad.sub(a, b), ad.sub(a, b))), [(3, 4), (3, 4)]),
    "mul": (lambda a, b: ad.sum_all(ad.mul(a, b)), [(3, 4), (3, 4)]),
    "scale": (lambda a: ad.sum_all(ad.mul(ad.scale(a, 2.5), a)), [(3, 4)]),
    "matmul": (lambda a, b: ad.sum_all(ad.mul(ad.matmul(a, b), ad.constant(PROJ))), [(3, 5), (5, 4)]),
    "batched_matmul": (lambda a, b: ad.sum_all(ad.mul(ad.matmul(a, b), ad.matmul(a, b))),
                       [(2, 3, 5), (5, 4)]),
    "transpose": (lambda a: ad.sum_all(ad.mul(ad.transpose(a), ad.constant(PROJ.T))), [(3, 4)]),
    "reshape": (lambda a: ad.sum_all(ad.mul(ad.reshape(a, (4, 3)), ad.constant(PROJ.reshape(4, 3)))),
                [(3, 4)]),
    "concat": (lambda a, b: ad.sum_all(ad.mul(ad.concat([a, b]), ad.constant(PROJ5))),
               [(3, 4), (2, 4)]),
    "take_rows": (lambda a: ad.sum_all(ad.mul(ad.take_rows(a, np.array([2, 0, 2])), ad.constant(PROJ))),
                  [(3, 4)]),
    "softmax": (lambda a: ad.sum_all(ad.mul(ad.softmax_rows(a), ad.constant(PROJ))), [(3, 4)]),
    "gelu": (lambda a: ad.sum_all(ad.mul(ad.gelu(a), ad.constant(PROJ))), [(3, 4)]),
    "layer_norm": (lambda a, g, b: ad.sum_all(ad.mul(ad.layer_norm(a, g, b), ad.constant(PROJ))),
                   [(3, 4), (4,), (4,)]),
    "cross_entropy": (lambda a: ad.cross_entropy_mean(a, np.array([0, 1, 1, 0, 1])), [(5, 2)]),
    "mean_all": (lambda a: ad.mean_all(ad.mul(a, a)), [(3, 4)]),
}


@pytest.mark.parametrize("name", sorted(CASES))
def test_primitive_gradients(name):
    build, shapes = CASES[name]
    rng = np.random.default_rng(abs(hash(name)) % 2**32)
    values = [rng.normal(size=s) for s in shapes]
    analytic = grad_of(build, *values)
    for i in range(len(values)):
        assert rel_err(analytic[i], numeric(build, values, i)) < 1e-5, (name, i)


def test_softmax_examples():
    out = ad.softmax_rows(ad.constant(np.array([[0.0, math.log(3.0)], [2.0, 2.0]]))).value
    assert np.allclose(out, [[0.25, 0.75], [0.5, 0.5]])
    assert np.array_equal(ad.softmax_rows(ad.constant(np.ones((3, 1)))).value, np.ones((3, 1)))


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 8)),
              elements=st.floats(-500, 500)))
def test_softmax_rows_sum_to_one(x):
    out = ad.softmax_rows(ad.constant(x)).value
    assert np.all(np.abs(out.sum(axis=1) - 1) < 1e-6)
    assert np.all(out >= 0)


def test_layer_norm_examples():
    g, b = ad.constant(np.ones(4)), ad.constant(np.zeros(4))
    row = np.array([[-1.0, 1.0, -1.0, 1.0]])
    assert np.allclose(ad.layer_norm(ad.constant(row), g, b).value, row, atol=1e-5)
    assert np.allclose(ad.layer_norm(ad.constant(np.full((2, 4), 3.0)), g, b).value, 0.0)


def test_cross_entropy_examples():
    ce = lambda z, y: float(ad.cross_entropy_mean(ad.constant(np.array(z, dtype=float)), np.array(y)).value)
    assert ce([[0, 0], [0, 0]], [0, 1]) == pytest.approx(math.log(2))
    assert ce([[20, -20]], [0]) < 1e-8
    assert ce([[1, 0]], [1]) == pytest.approx(math.log(1 + math.e), abs=1e-6)
    with pytest.raises(ValueError):
        ce([[0, 0]], [2])


def test_backward_simple_and_doubling():
    x = ad.parameter(np.array([1.0, -2.0, 3.0]))
    loss = ad.scale(ad.sum_all(ad.mul(x, x)), 0.5)
    ad.backward(loss)
    assert np.allclose(x.grad, x.value)
    ad.backward(loss)
    assert np.allclose(x.grad, 2 * x.value)
    ad.zero_grad([x])
    ad.backward(ad.sum_all(x))
    assert np.array_equal(x.grad, np.ones(3))


def test_shared_subexpression_accumulates():
    x = ad.parameter(np.array([2.0]))
    y = ad.mul(x, x)
    ad.backward(ad.sum_all(ad.add(y, y)))
    assert np.allclose(x.grad, [8.0])


def test_non_finite_is_an_error():
    with pytest.raises(ad.NonFiniteError), np.errstate(over="ignore"):
        ad.mul(ad.constant(np.array([1e200])), ad.constant(np.array([1e200])))
    with pytest.raises(ArithmeticError):
        ad.parameter(np.array([np.nan]))


def test_no_grad_records_nothing():
    x = ad.parameter(np.ones(2))
    with ad.no_grad():
        y = ad.mul(x, x)
    assert y.parents == () and not y.requires_grad


def test_adam_first_step_and_lr_check():
    p = {"w": ad.parameter(np.array([1.0, -1.0]))}
    p["w"].grad = np.array([0.3, -4.0])
    state = ad.AdamState(p)
    ad.adam_step(p, state, lr=0.1)
    # Bias correction makes the first step lr * sign(g).
    assert np.allclose(p["w"].value, [0.9, -0.9], atol=1e-6)
    with pytest.raises(ValueError):
        ad.adam_step(p, state, lr=0.0)


def test_adam_matches_reference_recurrence():
    rng = np.random.default_rng(3)
    w = rng.normal(size=5)
    p = {"w": ad.parameter(w.copy())}
    state = ad.AdamState(p)
    m = np.zeros(5)
    v = np.zeros(5)
    for t in range(1, 11):
        g = rng.normal(size=5)
        p["w"].grad = g.copy()
        ad.adam_step(p, state, 1e-2, 0.9, 0.999, 1e-8)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        w = w - 1e-2 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    assert np.allclose(p["w"].value, w, rtol=1e-12)
