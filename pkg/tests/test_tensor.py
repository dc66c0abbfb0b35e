import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from migate import tensor as T
from migate.gradcheck import grad_check, relative_error
from migate.tensor import NonFiniteError, ShapeError


def check(f, *params, tol=1e-6):
    rep = grad_check(f, list(params))
    assert rep.max_rel_error < tol, str(rep)
    return rep


# hadamard ------------------------------------------------------------------

def test_hadamard_values():
    out = T.hadamard(T.constant([1.0, 2, 3]), T.constant([4.0, 5, 6]))
    np.testing.assert_array_equal(out.data, [4, 10, 18])


def test_hadamard_with_ones_is_identity(rng):
    a = rng.normal(size=(3, 4))
    np.testing.assert_array_equal(T.hadamard(T.constant(a), T.constant(np.ones((3, 4)))).data, a)


def test_hadamard_shape_error_names_shapes():
    with pytest.raises(ShapeError, match=r"\(2,\).*\(3,\)"):
        T.hadamard(T.constant([1.0, 2]), T.constant([1.0, 2, 3]))


def test_hadamard_gradient(rng):
    a = T.parameter(rng.normal(size=(3, 3)), "a")
    b = T.parameter(rng.normal(size=(3, 3)), "b")
    r = rng.normal(size=(3, 3))
    check(lambda: T.total(T.hadamard(T.hadamard(a, b), T.constant(r))), a, b)


# affine --------------------------------------------------------------------

def test_affine_identity():
    out = T.affine(T.constant([3.0, 7.0]), T.constant(np.eye(2)), T.constant(np.zeros(2)))
    np.testing.assert_array_equal(out.data, [3, 7])


def test_affine_scalar_arithmetic():
    out = T.affine(T.constant([1.0, 1.0]), T.constant([[2.0], [3.0]]), T.constant([1.0]))
    np.testing.assert_array_equal(out.data, [6])


def test_affine_gradient(rng):
    x = T.parameter(rng.normal(size=4), "x")
    W = T.parameter(rng.normal(size=(4, 3)), "W")
    b = T.parameter(rng.normal(size=3), "b")
    r = rng.normal(size=3)
    check(lambda: T.total(T.hadamard(T.affine(x, W, b), T.constant(r))), x, W, b)


def test_affine_dimension_mismatch():
    with pytest.raises(ShapeError):
        T.affine(T.constant(np.ones(3)), T.constant(np.ones((4, 2))))


# sigmoid / relu / softplus -------------------------------------------------

def test_sigmoid_at_zero():
    assert T.sigmoid(T.constant([0.0])).data[0] == 0.5


@given(st.floats(-30, 30))
def test_sigmoid_symmetry(x):
    with T.precision("f64"):
        s = T.sigmoid(T.constant([x, -x])).data
    assert abs(s.sum() - 1.0) < 1e-12


def test_sigmoid_gradient(rng):
    x = T.parameter(rng.normal(size=5), "x")
    r = rng.normal(size=5)
    check(lambda: T.total(T.hadamard(T.sigmoid(x), T.constant(r))), x)


def test_sigmoid_saturates_without_overflow():
    s = T.sigmoid(T.constant([-1e4, 1e4])).data
    np.testing.assert_array_equal(s, [0.0, 1.0])


def test_relu_values():
    np.testing.assert_array_equal(T.relu(T.constant([-1.0, 0.0, 2.0])).data, [0, 0, 2])


def test_relu_idempotent(rng):
    x = T.constant(rng.normal(size=20))
    np.testing.assert_array_equal(T.relu(T.relu(x)).data, T.relu(x).data)


def test_relu_subgradient_at_zero_is_zero():
    x = T.parameter([0.0, 1.0])
    T.total(T.relu(x)).backward()
    np.testing.assert_array_equal(x.grad, [0.0, 1.0])


def test_relu_gradient_away_from_kink(rng):
    v = rng.uniform(0.1, 1, size=8) * rng.choice([-1, 1], size=8)
    x = T.parameter(v, "x")
    r = rng.normal(size=8)
    check(lambda: T.total(T.hadamard(T.relu(x), T.constant(r))), x)


@settings(max_examples=50, deadline=None)
@given(st.floats(-1e4, 1e4))
def test_softplus_bounds(z):
    with T.precision("f64"):
        sp = T.softplus(T.constant([z])).data[0]
    assert np.isfinite(sp)
    assert sp >= max(z, 0.0)
    assert sp - max(z, 0.0) <= np.log(2) + 1e-12


# engine --------------------------------------------------------------------

def test_non_finite_is_an_error():
    with pytest.raises(NonFiniteError, match="sigmoid"):
        T.sigmoid(T.constant([0.0, np.nan]))
    with pytest.raises(NonFiniteError, match="scale"), np.errstate(over="ignore"):
        T.scale(T.constant([1e308]), 1e10)


def test_backward_visits_shared_nodes_once(rng):
    # y = a*a + a*a through one shared node; gradient 4a
    a = T.parameter(rng.normal(size=3), "a")
    sq = T.hadamard(a, a)
    T.total(T.add(sq, sq)).backward()
    np.testing.assert_allclose(a.grad, 4 * a.data)


def test_gradient_accumulation_is_linear(rng):
    a = T.parameter(rng.normal(size=4), "a")
    r1, r2 = rng.normal(size=4), rng.normal(size=4)
    f1 = lambda: T.total(T.hadamard(T.sigmoid(a), T.constant(r1)))
    f2 = lambda: T.total(T.hadamard(T.softplus(a), T.constant(r2)))
    f1().backward()
    g1 = a.grad.copy()
    a.zero_grad()
    f2().backward()
    g2 = a.grad.copy()
    a.zero_grad()
    T.add(f1(), f2()).backward()
    np.testing.assert_allclose(a.grad, g1 + g2, rtol=1e-14)


def test_forward_is_deterministic(rng):
    x = rng.normal(size=(2, 5, 5, 3))
    W = rng.normal(size=(3, 3, 3, 4))
    a = T.conv2d(T.constant(x), T.constant(W), T.constant(np.zeros(4)), stride=2).data
    b = T.conv2d(T.constant(x), T.constant(W), T.constant(np.zeros(4)), stride=2).data
    assert a.tobytes() == b.tobytes()


def test_no_grad_builds_no_graph(rng):
    a = T.parameter(rng.normal(size=3))
    with T.no_grad():
        out = T.sigmoid(a)
    assert not out.requires_grad


def test_precision_switch():
    with T.precision("f32"):
        assert T.constant([1.0]).data.dtype == np.float32
    assert T.constant([1.0]).data.dtype == np.float64
    with pytest.raises(ValueError):
        T.set_precision("f16")


@pytest.mark.parametrize("op", ["conv", "irnn", "binmax", "unpool", "mean", "scatter", "take", "l2", "matmul"])
def test_kernel_gradients(op, rng):
    x = T.parameter(rng.uniform(-1, 1, size=(2, 4, 4, 3)), "x")
    params = [x]
    if op == "conv":
        W = T.parameter(rng.normal(size=(3, 3, 3, 2)), "W")
        b = T.parameter(rng.normal(size=2), "b")
        params += [W, b]
        f = lambda: T.conv2d(x, W, b, stride=2)
    elif op == "irnn":
        x.data[...] = rng.uniform(0.1, 1, size=x.shape)
        W = T.parameter(np.eye(3) + 0.1 * rng.normal(size=(3, 3)), "W_hh")
        params.append(W)
        f = lambda: T.add(T.irnn_sweep(x, W, "left_to_right"), T.irnn_sweep(x, W, "bottom_to_top"))
    elif op == "binmax":
        f = lambda: T.bin_max(x, 2)
    elif op == "unpool":
        f = lambda: T.bin_unpool(T.bin_max(x, 2), 4)
    elif op == "mean":
        f = lambda: T.spatial_mean_tile(x)
    elif op == "scatter":
        rows, cols = np.triu_indices(3)
        f = lambda: T.symmetric_scatter(T.take(T.reshape(x, (96,)), np.arange(6)), rows, cols, 3)
    elif op == "take":
        f = lambda: T.take(x, np.array([1, 0, 1]))
    elif op == "l2":
        f = lambda: T.l2_normalize(T.reshape(x, (2, 48)))[0]
    else:
        f = lambda: T.matmul_t(T.reshape(x, (4, 24)), T.reshape(T.sigmoid(x), (4, 24)))
    probe = None

    def loss():
        nonlocal probe
        out = f()
        if probe is None:
            probe = np.random.default_rng(5).normal(size=out.shape)
        return T.total(T.hadamard(out, T.constant(probe)))

    check(loss, *params, tol=1e-6)


# grad_check ----------------------------------------------------------------

def test_grad_check_quadratic():
    x = T.parameter([1.0, 2.0], "x")
    rep = grad_check(lambda: T.total(T.hadamard(x, x)), [x], tol=1e-6)
    assert rep.passed
    x.zero_grad()
    T.total(T.hadamard(x, x)).backward()
    np.testing.assert_allclose(x.grad, [2, 4])


def test_grad_check_constant_function():
    x = T.parameter([1.0, -2.0], "x")
    rep = grad_check(lambda: T.total(T.scale(T.constant([1.0, 2.0]), 3.0)), [x])
    assert rep.passed and rep.max_rel_error == 0.0


def test_grad_check_detects_wrong_gradient(monkeypatch, rng):
    real = T.sigmoid

    def bad_sigmoid(x):
        out = real(x)
        s = out.data
        return T._result(s.copy(), [x], lambda g: [-g * s * (1 - s)], "bad_sigmoid")

    monkeypatch.setattr(T, "sigmoid", bad_sigmoid)
    x = T.parameter(rng.normal(size=3), "x")
    rep = grad_check(lambda: T.total(T.sigmoid(x)), [x])
    assert not rep.passed
    assert rep.worst[0] == "x"


def test_grad_check_reports_non_finite_loss():
    x = T.parameter([1.0, 1.0], "x")

    def f():
        # finite at the evaluation point, overflows once x[1] is nudged up
        if x.data[1] > 1.0:
            return T.total(T.scale(T.constant([1e308, 1e308]), 10.0))
        return T.total(x)

    with pytest.raises(NonFiniteError, match=r"x\[1\]"), np.errstate(over="ignore"):
        grad_check(f, {"x": x})


def test_grad_check_requires_f64():
    x = T.parameter([1.0])
    with T.precision("f32"):
        x32 = T.parameter([1.0])
        with pytest.raises(RuntimeError):
            grad_check(lambda: T.total(x32), [x32])


def test_relative_error_floor():
    err = relative_error(np.array([1e-9]), np.array([2e-9]))
    assert err[0] == pytest.approx(1e-9 / 1e-6)
