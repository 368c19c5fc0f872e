import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from _util import rel_err
from nhode import ad
from nhode.ad import finite_difference_gradient
from nhode.nn import MlpParams, mlp_forward, mlp_input_gradient, mlp_input_gradient_graph


def test_affine_tanh_sum_values():
    tape = ad.Tape()
    x = tape.constant([[3.0]])
    assert ad.affine(x, tape.constant([[2.0]]), tape.constant([1.0])).value[0, 0] == 7.0
    assert ad.tanh(tape.constant([0.0])).value[0] == 0.0
    assert ad.sum(ad.square(tape.constant([3.0, 4.0]))).value == 25.0


def test_backward_worked_examples():
    tape = ad.Tape()
    x = tape.variable([3.0, 4.0])
    tape.backward(ad.sum(ad.square(x)), seed=1.0)
    np.testing.assert_array_equal(x.grad, [6.0, 8.0])

    tape = ad.Tape()
    x = tape.variable([0.0])
    tape.backward(ad.tanh(x), seed=[1.0])
    np.testing.assert_array_equal(x.grad, [1.0])

    tape = ad.Tape()
    w, x = tape.variable([2.0, 5.0]), tape.variable([1.0, 1.0])
    tape.backward(ad.sum(ad.mul(w, x)))
    np.testing.assert_array_equal(w.grad, [1.0, 1.0])
    np.testing.assert_array_equal(x.grad, [2.0, 5.0])


def test_finite_difference_examples():
    assert abs(finite_difference_gradient(lambda x: float(x[0] ** 2), [3.0])[0] - 6.0) < 1e-9
    assert abs(finite_difference_gradient(lambda x: float(np.sin(x[0])), [0.0])[0] - 1.0) < 1e-9
    with pytest.raises(ValueError):
        finite_difference_gradient(lambda x: 0.0, [1.0], step=0.0)


def test_backward_errors():
    tape = ad.Tape()
    x = tape.variable([1.0, 2.0])
    y = ad.square(x)
    with pytest.raises(ad.GraphError):
        tape.backward(y, seed=[1.0])
    with pytest.raises(ad.GraphError):
        tape.backward(ad.square(tape.constant([1.0])))
    with pytest.raises(ad.GraphError):
        ad.Tape().backward(y)
    with pytest.raises(ad.NonFiniteError):
        tape.constant([np.nan])
    with pytest.raises(ad.GraphError):
        ad.add(x, tape.constant([1.0, 2.0, 3.0]))
    with pytest.raises(ad.GraphError):
        ad.add(x, ad.Tape().constant([1.0, 2.0]))


def test_unused_variable_gets_zero_adjoint():
    tape = ad.Tape()
    x, unused = tape.variable([1.0]), tape.variable([[1.0, 2.0]])
    tape.backward(ad.sum(ad.square(x)))
    np.testing.assert_array_equal(unused.grad, np.zeros((1, 2)))


def test_sqrt_floor_has_zero_derivative():
    tape = ad.Tape()
    x = tape.variable([0.0, 4.0])
    tape.backward(ad.sum(ad.sqrt(x, floor=1e-12)))
    np.testing.assert_array_equal(x.grad, [0.0, 0.25])


def test_gather_with_repeated_indices_accumulates():
    tape = ad.Tape()
    x = tape.variable([[1.0, 2.0, 3.0]])
    tape.backward(ad.sum(ad.gather(x, [0, 0, 2])))
    np.testing.assert_array_equal(x.grad, [[2.0, 0.0, 1.0]])


UNARY = ("tanh", "square", "scale", "neg", "sqrt", "reciprocal", "mul_self", "add_w", "sub_w",
         "affine", "concat_gather", "lincomb", "matmul")


def _apply(op, h, tape, rng_consts):
    w = rng_consts
    if op == "tanh":
        return ad.tanh(h)
    if op == "square":
        return ad.scale(ad.square(h), 0.5)
    if op == "scale":
        return ad.scale(h, w["vec"])
    if op == "neg":
        return ad.neg(h)
    if op == "sqrt":
        return ad.sqrt(ad.add(ad.square(h), tape.constant(np.ones(h.shape))), floor=1e-12)
    if op == "reciprocal":
        return ad.reciprocal(ad.add(ad.square(h), tape.constant(np.full(h.shape, 2.0))))
    if op == "mul_self":
        return ad.mul(h, ad.tanh(h))
    if op == "add_w":
        return ad.add(h, w["var"])
    if op == "sub_w":
        return ad.sub(w["var"], h)
    if op == "affine":
        return ad.affine(h, w["W"], w["b"])
    if op == "concat_gather":
        return ad.gather(ad.concat([h, ad.tanh(h)]), [5, 0, 3])
    if op == "lincomb":
        return ad.lincomb([h, ad.tanh(h), w["var"]], [0.3, -1.2, 0.0])
    if op == "matmul":
        return ad.matmul(h, w["M"], transpose_b=True)
    raise AssertionError(op)


@settings(max_examples=100, deadline=None)
@given(ops=st.lists(st.sampled_from(UNARY), min_size=1, max_size=6),
       seed=st.integers(0, 2**32 - 1))
def test_random_graph_gradients_match_finite_differences(ops, seed):
    rng = np.random.default_rng(seed)
    x0 = rng.normal(size=(2, 3))
    consts = dict(vec=rng.normal(size=3), var=rng.normal(size=(2, 3)), W=rng.normal(size=(3, 3)) / 2,
                  b=rng.normal(size=3), M=rng.normal(size=(3, 3)) / 2)

    def build(x_val, var_val, record):
        tape = ad.Tape(record=record)
        x = tape.variable(x_val)
        c = dict(consts)
        c["var"] = tape.variable(var_val)
        c["W"], c["b"], c["M"] = tape.variable(consts["W"]), tape.constant(consts["b"]), tape.constant(consts["M"])
        h = x
        for op in ops:
            h = _apply(op, h, tape, c)
        return tape, x, c["var"], c["W"], ad.sum(ad.square(h))

    tape, x, var, W, root = build(x0, consts["var"], True)
    tape.backward(root)
    fd_x = finite_difference_gradient(lambda v: build(v, consts["var"], False)[-1].value, x0)
    fd_var = finite_difference_gradient(lambda v: build(x0, v, False)[-1].value, consts["var"])
    for got, want in ((x.grad, fd_x), (var.grad, fd_var)):
        if np.linalg.norm(want) > 1e-6:
            assert rel_err(got, want) < 1e-6
        else:
            assert np.abs(got - want).max() < 1e-8


def test_backward_is_deterministic():
    rng = np.random.default_rng(3)
    p = MlpParams.init([4, 16, 16, 1], rng)
    z = rng.normal(size=(5, 4))

    def grads():
        tape = ad.Tape()
        net = p.bind(tape)
        g = mlp_input_gradient_graph(net, tape.constant(z))
        tape.backward(ad.sum(ad.square(g)))
        return [a.copy() for a in net.grads()]

    for a, b in zip(grads(), grads()):
        assert a.tobytes() == b.tobytes()


def test_input_gradient_linear_and_tanh_cases():
    lin = MlpParams([np.array([[2.0], [-1.0]])], [np.array([0.5])])
    for z in ([0.0, 0.0], [3.0, -7.0]):
        np.testing.assert_array_equal(mlp_input_gradient(lin, np.array(z)), [[2.0, -1.0]])
    one = MlpParams([np.eye(1), np.ones((1, 1))], [np.zeros(1), np.zeros(1)])
    np.testing.assert_array_equal(mlp_input_gradient(one, np.array([0.0])), [[1.0]])


def test_input_gradient_needs_scalar_output():
    p = MlpParams.init([3, 4, 2], np.random.default_rng(0))
    with pytest.raises(ad.GraphError):
        mlp_input_gradient(p, np.zeros(3))


@pytest.mark.parametrize("seed", range(5))
def test_input_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    p = MlpParams.init([4, 8, 8, 1], rng)
    z = rng.normal(size=4)
    fd = finite_difference_gradient(lambda v: mlp_forward(p, v[None])[0, 0], z)
    assert rel_err(mlp_input_gradient(p, z)[0], fd) < 1e-7


@pytest.mark.parametrize("seed", range(3))
def test_second_order_parameter_gradient(seed):
    """Parameter gradient of |grad_z MLP(z)|^2, i.e. a derivative through the input gradient."""
    rng = np.random.default_rng(seed)
    p = MlpParams.init([3, 6, 5, 1], rng)
    z = rng.normal(size=(2, 3))

    def g_of(arrays):
        q = MlpParams.from_arrays(arrays)
        return float(np.sum(mlp_input_gradient(q, z) ** 2))

    tape = ad.Tape()
    net = p.bind(tape)
    tape.backward(ad.sum(ad.square(mlp_input_gradient_graph(net, tape.constant(z)))))
    arrays = p.arrays()
    for k, grad in enumerate(net.grads()):
        def f(v, k=k):
            a = list(arrays)
            a[k] = v
            return g_of(a)
        fd = finite_difference_gradient(f, arrays[k])
        assert rel_err(grad, fd) < 1e-5
