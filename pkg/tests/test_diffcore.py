import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from swotflow import diffcore as dc
from swotflow.diffcore import NonFiniteError, ParamStore, Tape, Tensor


def grad_of(fn, *arrays_in):
    leaves = [Tensor(a, requires_grad=True, name=f"a{i}") for i, a in enumerate(arrays_in)]
    with Tape() as tape:
        out = fn(*leaves)
    dc.backward(tape, out)
    return [leaf.grad for leaf in leaves]


def numeric_grad(fn, *arrays_in, step=1e-5):
    grads = []
    for i, a in enumerate(arrays_in):
        g = np.zeros_like(a)
        for j in range(a.size):
            args_hi = [x.copy() for x in arrays_in]
            args_lo = [x.copy() for x in arrays_in]
            args_hi[i].reshape(-1)[j] += step
            args_lo[i].reshape(-1)[j] -= step
            hi = fn(*map(Tensor, args_hi)).value
            lo = fn(*map(Tensor, args_lo)).value
            g.reshape(-1)[j] = (hi - lo) / (2 * step)
        grads.append(g)
    return grads


def rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)


def test_primitive_values():
    assert dc.tanh(Tensor(0.0)).item() == 0.0
    assert dc.exp(Tensor(0.0)).item() == 1.0
    x = np.arange(6.0).reshape(3, 2)
    np.testing.assert_array_equal(dc.affine(Tensor(x), np.eye(2), np.zeros(2)).value, x)


def test_backward_simple_gradients():
    params = ParamStore()
    p = params.add("p", [1.0, 2.0])
    with Tape() as tape:
        root = dc.sum(p)
    grads = dc.backward(tape, root, params)
    np.testing.assert_array_equal(grads["p"], [1.0, 1.0])
    with Tape() as tape:
        root = dc.sum(dc.square(p))
    grads = dc.backward(tape, root, params)
    np.testing.assert_array_equal(grads["p"], [2.0, 4.0])


def test_backward_rejects_bad_roots():
    p = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        v = dc.mul(p, 2.0)
    with pytest.raises(ValueError, match="scalar"):
        dc.backward(tape, v)
    with pytest.raises(ValueError, match="not produced"):
        dc.backward(tape, dc.sum(p))


def test_untouched_params_get_zero_grad_and_constants_stay_clean():
    params = ParamStore()
    a = params.add("a", [1.0])
    params.add("b", [5.0, 6.0])
    c = Tensor([3.0])
    with Tape() as tape:
        root = dc.sum(dc.mul(a, c))
    grads = dc.backward(tape, root, params)
    np.testing.assert_array_equal(grads["b"], [0.0, 0.0])
    assert c.grad is None


def test_nonfinite_names_op():
    with pytest.raises(NonFiniteError) as err:
        dc.exp(Tensor([1000.0]))
    assert err.value.op == "exp"


def test_param_store_rejects_duplicates_and_keeps_order():
    params = ParamStore()
    for name in ["z", "a", "m"]:
        params.add(name, [0.0])
    assert list(params.names()) == ["z", "a", "m"]
    with pytest.raises(KeyError):
        params.add("a", [1.0])


OPS = {
    "tanh": (lambda a: dc.sum(dc.mul(dc.tanh(a), [[1.0, -2.0, 0.5]])), 1),
    "exp": (lambda a: dc.sum(dc.mul(dc.exp(a), [[0.3, 1.0, -1.0]])), 1),
    "square": (lambda a: dc.sum(dc.mul(dc.square(a), [[1.0, 2.0, 3.0]])), 1),
    "mul": (lambda a, b: dc.sum(dc.mul(a, b)), 2),
    "add_sub": (lambda a, b: dc.sum(dc.square(dc.sub(dc.add(a, b), dc.mul(a, a)))), 2),
    "mean": (lambda a: dc.mean(dc.mul(a, [[1.0, 4.0, 9.0]])), 1),
    "power": (lambda a: dc.sum(dc.power(dc.add(dc.square(a), 1.0), 1.5)), 1),
    "concat_take": (
        lambda a, b: dc.sum(dc.mul(dc.take(dc.concat([a, b], axis=1), [5, 0, 2], axis=1), [[1.0, 2.0, 3.0]])),
        2,
    ),
    "permute": (
        lambda a: dc.sum(dc.mul(dc.permute(a, np.array([[1, 0, 1], [0, 1, 0]]), axis=0), [[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])),
        1,
    ),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_vjp_matches_finite_differences(name):
    fn, arity = OPS[name]
    rng = np.random.default_rng(7)
    inputs = [rng.uniform(-2, 2, size=(2, 3)) for _ in range(arity)]
    for a, n in zip(grad_of(fn, *inputs), numeric_grad(fn, *inputs)):
        assert rel_err(a, n) <= 1e-6


def test_affine_and_matmul_vjp():
    rng = np.random.default_rng(3)
    x, W, b = rng.uniform(-2, 2, (4, 3)), rng.uniform(-2, 2, (2, 3)), rng.uniform(-2, 2, 2)
    weights = rng.uniform(-1, 1, (4, 2))

    def f(x, W, b):
        return dc.sum(dc.mul(dc.tanh(dc.affine(x, W, b)), weights))

    for a, n in zip(grad_of(f, x, W, b), numeric_grad(f, x, W, b)):
        assert rel_err(a, n) <= 1e-6

    def g(x, M):
        return dc.sum(dc.square(dc.matmul(x, M)))

    M = rng.uniform(-2, 2, (3, 5))
    for a, n in zip(grad_of(g, x, M), numeric_grad(g, x, M)):
        assert rel_err(a, n) <= 1e-6


def test_backward_is_linear_in_root():
    rng = np.random.default_rng(11)
    x = rng.uniform(-2, 2, (3, 2))

    def f(a):
        return dc.sum(dc.tanh(a))

    def g(a):
        return dc.sum(dc.square(dc.exp(dc.mul(a, 0.5))))

    (gf,) = grad_of(f, x)
    (gg,) = grad_of(g, x)
    (gc,) = grad_of(lambda a: dc.add(dc.mul(f(a), 2.5), dc.mul(g(a), -0.7)), x)
    np.testing.assert_allclose(gc, 2.5 * gf - 0.7 * gg, rtol=1e-12, atol=1e-12)


def test_replaying_tape_is_bitwise_identical():
    params = ParamStore()
    p = params.add("p", np.random.default_rng(0).uniform(-2, 2, (4, 3)))
    with Tape() as tape:
        root = dc.sum(dc.mul(dc.tanh(dc.affine(p, np.ones((2, 3)), np.zeros(2))), 3.0))
    first = {k: v.copy() for k, v in dc.backward(tape, root, params).items()}
    second = dc.backward(tape, root, params)
    assert all(np.array_equal(first[k], second[k]) for k in first)


def test_finite_diff_check_quadratic_and_fault():
    params = ParamStore()
    p = params.add("p", [1.0, -2.0, 0.5])

    def f():
        return dc.sum(dc.square(p))

    err, _ = dc.finite_diff_check(f, params)
    assert err <= 1e-8
    doubled = {"p": 2 * 2 * p.value}
    err, _ = dc.finite_diff_check(f, params, analytic=doubled)
    assert err == pytest.approx(0.5, abs=1e-6)


def test_finite_diff_check_rejects_nonpositive_step():
    params = ParamStore()
    p = params.add("p", [1.0])
    with pytest.raises(ValueError):
        dc.finite_diff_check(lambda: dc.sum(p), params, step=0.0)


def test_jvp_examples():
    v = np.array([[0.3, -1.2]])
    np.testing.assert_array_equal(dc.jvp(lambda a: a, np.zeros((1, 2)), v).value, v)
    assert dc.jvp(dc.exp, np.zeros(1), np.ones(1)).value[0] == 1.0
    with pytest.raises(ValueError):
        dc.jvp(dc.exp, np.zeros(2), np.ones(3))


def test_jvp_result_is_differentiable():
    # d/dw of sum(J_f(x) v) where f(x) = tanh(w x): J v = w (1 - tanh^2(w x)) v
    params = ParamStore()
    w = params.add("w", [0.7])
    x, v = np.array([0.4, -1.1]), np.array([1.0, 2.0])

    def f():
        return dc.sum(dc.jvp(lambda a: dc.tanh(dc.mul(a, w)), x, v))

    err, _ = dc.finite_diff_check(f, params)
    assert err <= 1e-7


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (3, 2), elements=st.floats(-2, 2)))
def test_sum_square_gradient_is_twice_input(a):
    (g,) = grad_of(lambda t: dc.sum(dc.square(t)), a)
    np.testing.assert_allclose(g, 2 * a, rtol=0, atol=0)
