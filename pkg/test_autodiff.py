"""
Tests of the recording tape: first derivatives, nested sweeps, Hessian-vector
products, mixed contractions and network input derivatives.
"""
import numpy as np
import pytest

from bilevel_pinn import autodiff as ad
from bilevel_pinn.autodiff import Tape, Var, grad, grad2_contract, hvp, spatial_derivs
from bilevel_pinn.errors import NumericFailure, TapeError, UnsupportedOrderError
from bilevel_pinn.nets import Mlp, mlp_constant, mlp_forward, mlp_init


def central_difference(f, x, eps=1e-5):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e.flat[i] = eps
        out.flat[i] = (f(x + e) - f(x - e)) / (2 * eps)
    return out


# ===== grad =====

def test_grad_polynomial():
    assert float(grad(lambda x: x * x, 3.0)) == pytest.approx(6.0)


def test_grad_sum_sin_at_zero():
    np.testing.assert_allclose(grad(lambda x: ad.sin(x).sum(), np.zeros(2)), [1.0, 1.0])


def test_grad_network_matches_finite_differences():
    net = mlp_init((2, 6, 6, 1), seed=11)
    X = np.random.default_rng(0).uniform(-1, 1, size=(5, 2))
    g = grad(lambda p: mlp_forward(net, X, p).sum(), net.params)
    fd = central_difference(lambda p: float(mlp_forward(net, X, p).sum()), net.params)
    assert np.linalg.norm(g - fd) / np.linalg.norm(fd) < 1e-6


COEF = np.array([0.7, -1.3, 2.1])
MAT = np.array([[0.5, -1.0, 2.0], [1.5, 0.3, -0.7]])

OPS = {
    'add': lambda x: ((x + COEF) ** 2).sum(),
    'sub': lambda x: ((COEF - x) ** 2).sum(),
    'mul': lambda x: (x * x * COEF).sum(),
    'div': lambda x: (COEF / (x + 3.0)).sum(),
    'neg': lambda x: (-(x ** 3)).sum(),
    'power': lambda x: ((x + 2.0) ** 2.5).sum(),
    'tanh': lambda x: ad.tanh(x * COEF).sum(),
    'sin': lambda x: ad.sin(x * COEF).sum(),
    'cos': lambda x: ad.cos(x * COEF).sum(),
    'exp': lambda x: ad.exp(x * COEF).sum(),
    'matmul': lambda x: ad.tanh(MAT @ x.reshape(3, 1)).sum(),
    'transpose': lambda x: (x.reshape(3, 1).T @ (x * COEF).reshape(3, 1)).sum(),
    'dot': lambda x: ad.dot(x, x * x),
    'getitem': lambda x: (x[1:] * x[:-1]).sum(),
    'mean': lambda x: (ad.sin(x) * x).mean(),
    'broadcast': lambda x: (ad.broadcast_to(x, (2, 3)) ** 2 * COEF).sum(),
}


@pytest.mark.parametrize('op', sorted(OPS))
def test_op_gradients_match_finite_differences_on_random_inputs(op):
    f = OPS[op]
    rng = np.random.default_rng(sorted(OPS).index(op))
    for _ in range(100):
        x = rng.uniform(-1.0, 1.0, size=3)
        g = grad(f, x)
        fd = central_difference(lambda v: float(f(Var(v)).value), x)
        assert np.linalg.norm(g - fd) <= 1e-6 * max(np.linalg.norm(fd), 1e-8)


def test_random_networks_match_finite_differences():
    rng = np.random.default_rng(5)
    for k in range(100):
        widths = (int(rng.integers(1, 4)), int(rng.integers(2, 7)), int(rng.integers(2, 7)), 1)
        net = mlp_init(widths, seed=k)
        X = rng.uniform(-1.0, 1.0, size=(4, widths[0]))
        g = grad(lambda p: mlp_forward(net, X, p).sum(), net.params)
        fd = central_difference(lambda p: float(mlp_forward(net, X, p).sum()), net.params)
        assert np.linalg.norm(g - fd) / np.linalg.norm(fd) < 1e-6


def test_derivatives_are_bit_identical_across_runs():
    def derivatives():
        net = mlp_init((2, 8, 8, 1), seed=21)
        X = np.random.default_rng(9).uniform(-1.0, 1.0, size=(16, 2))
        loss = lambda p: (mlp_forward(net, X, p) ** 2).sum()
        v = np.random.default_rng(10).normal(size=net.num_params)
        u_x, u_xx = spatial_derivs(net, X, [(1, 0), (2, 0)])
        return grad(loss, net.params), hvp(loss, net.params, v), u_x.value, u_xx.value

    for a, b in zip(derivatives(), derivatives()):
        np.testing.assert_array_equal(a, b)


def test_grad_of_unused_input_is_zero():
    tape = Tape()
    x, y = tape.var([1.0, 2.0]), tape.var(3.0)
    gx, gy = tape.gradient((x * x).sum(), [x, y])
    np.testing.assert_allclose(gx.value, [2.0, 4.0])
    assert gy.value == 0.0


def test_broadcast_gradients_reduce_to_operand_shape():
    tape = Tape()
    a = tape.var(np.ones((3, 2)))
    b = tape.var([1.0, 2.0])
    (gb,) = tape.gradient((a * b).sum(), [b])
    np.testing.assert_allclose(gb.value, [3.0, 3.0])


def test_matmul_gradients():
    rng = np.random.default_rng(1)
    A, B = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    tape = Tape()
    av, bv = tape.var(A), tape.var(B)
    ga, gb = tape.gradient((av @ bv).sum(), [av, bv])
    np.testing.assert_allclose(ga.value, np.ones((3, 2)) @ B.T)
    np.testing.assert_allclose(gb.value, A.T @ np.ones((3, 2)))


# ===== Nested sweeps =====

def test_fourth_derivative_through_four_recorded_sweeps():
    x = np.linspace(-0.5, 0.5, 4)
    tape = Tape()
    xv = tape.var(x)
    g = ad.exp(xv * 2.0).sum()
    for _ in range(3):
        (g,) = tape.gradient(g.sum() if g.ndim else g, [xv], create_graph=True)
    (g4,) = tape.gradient(g.sum(), [xv])
    np.testing.assert_allclose(g4.value, 16.0 * np.exp(2.0 * x), rtol=1e-12)
    assert tape.depth >= 3


def test_gradient_inside_gradient_of_a_function():
    # d/dx (d/dx sin(x)^2) = 2 cos(2x)
    x = 0.7
    inner = lambda v: grad(lambda u: (ad.sin(u) * ad.sin(u)).sum(), v).sum()
    assert float(grad(inner, x)) == pytest.approx(2.0 * np.cos(2.0 * x))


def test_non_create_graph_results_are_constants():
    tape = Tape()
    x = tape.var(2.0)
    (g,) = tape.gradient(x * x * x, [x])
    assert g.tape is None
    assert float(g.value) == pytest.approx(12.0)


# ===== hvp =====

def test_hvp_quadratic():
    A = np.array([[2.0, 1.0], [1.0, 3.0]])
    out = hvp(lambda x: 0.5 * (x @ (A @ x)), np.array([0.3, -0.4]), np.array([1.0, 0.0]))
    np.testing.assert_allclose(out, [2.0, 1.0])


def test_hvp_half_square_norm_is_identity():
    v = np.array([0.5, -2.0, 3.0])
    np.testing.assert_allclose(hvp(lambda x: 0.5 * (x * x).sum(), np.ones(3), v), v)


def test_hvp_network_loss_matches_gradient_differences():
    net = mlp_init((1, 5, 1), seed=4)
    X = np.linspace(0, 1, 7).reshape(-1, 1)
    y = np.sin(3 * X)
    loss = lambda p: ((mlp_forward(net, X, p) - y) ** 2).sum()
    v = np.random.default_rng(2).normal(size=net.num_params)
    eps = 1e-4
    fd = (grad(loss, net.params + eps * v) - grad(loss, net.params - eps * v)) / (2 * eps)
    out = hvp(loss, net.params, v)
    assert np.linalg.norm(out - fd) / np.linalg.norm(fd) < 1e-4


def test_hvp_direction_shape_is_checked():
    with pytest.raises(TapeError):
        hvp(lambda x: (x * x).sum(), np.ones(3), np.ones(2))


# ===== grad2_contract =====

def test_grad2_contract_bilinear_is_identity():
    out = grad2_contract(lambda w, t: ad.dot(w, t), np.array([0.2, 0.7]), np.array([1.5, -1.0]),
                         np.array([1.0, 2.0]))
    np.testing.assert_allclose(out, [1.0, 2.0])


def test_grad2_contract_without_theta_dependence_is_zero():
    out = grad2_contract(lambda w, t: 0.5 * (w * w).sum(), np.ones(2), np.ones(3), np.array([1.0, 1.0]))
    np.testing.assert_array_equal(out, np.zeros(3))


def test_grad2_contract_product_square():
    f = lambda w, t: (w[0] * t[0]) ** 2
    out = grad2_contract(f, np.array([1.0, 2.0]), np.array([1.0, 3.0]), np.array([1.0, 0.0]))
    np.testing.assert_allclose(out, [4.0, 0.0])


# ===== spatial derivatives =====

def test_single_unit_network_derivatives_match_closed_form():
    # u = a tanh(w x + b) + c
    w, b, a, c = 1.3, -0.2, 0.8, 0.1
    net = Mlp((1, 1, 1), np.array([w, b, a, c]))
    x = np.array([[-0.5], [0.0], [0.9]])
    u, u_x, u_xx = spatial_derivs(net, x, [(0,), (1,), (2,)])
    t = np.tanh(w * x[:, 0] + b)
    np.testing.assert_allclose(u.value, a * t + c)
    np.testing.assert_allclose(u_x.value, a * w * (1 - t ** 2))
    np.testing.assert_allclose(u_xx.value, -2.0 * a * w ** 2 * t * (1 - t ** 2))


def test_constant_network_has_zero_derivatives():
    net = mlp_constant((2, 8, 1), 0.7, seed=1)
    pts = np.random.default_rng(0).uniform(size=(6, 2))
    for d in spatial_derivs(net, pts, [(1, 0), (0, 1), (2, 0), (1, 1), (0, 2)]):
        np.testing.assert_allclose(d.value, 0.0, atol=1e-14)


def test_mixed_and_time_derivatives_match_finite_differences():
    net = mlp_init((2, 8, 8, 1), seed=5)
    pts = np.array([[0.3, 0.6], [-0.4, 0.1]])
    u_x, u_y, u_xy = spatial_derivs(net, pts, [(1, 0), (0, 1), (1, 1)])
    h = 1e-4
    f = lambda p: mlp_forward(net, p)[:, 0]
    ex, ey = np.array([h, 0.0]), np.array([0.0, h])
    np.testing.assert_allclose(u_x.value, (f(pts + ex) - f(pts - ex)) / (2 * h), atol=1e-7)
    np.testing.assert_allclose(u_y.value, (f(pts + ey) - f(pts - ey)) / (2 * h), atol=1e-7)
    fd_xy = (f(pts + ex + ey) - f(pts + ex - ey) - f(pts - ex + ey) + f(pts - ex - ey)) / (4 * h * h)
    np.testing.assert_allclose(u_xy.value, fd_xy, atol=1e-5)


def test_input_derivatives_stay_differentiable_in_weights():
    net = mlp_init((1, 4, 1), seed=6)
    pts = np.array([[0.2], [0.5]])

    def loss(p):
        (u_xx,) = spatial_derivs(net, pts, [(2,)], p)
        return (u_xx * u_xx).sum()

    fd = central_difference(lambda p: float(loss(Tape().var(p)).value), net.params)
    np.testing.assert_allclose(grad(loss, net.params), fd, rtol=1e-5, atol=1e-8)


def test_third_order_is_rejected():
    net = mlp_init((1, 4, 1), seed=0)
    with pytest.raises(UnsupportedOrderError):
        spatial_derivs(net, np.zeros((2, 1)), [(3,)])


def test_multi_index_length_is_checked():
    net = mlp_init((2, 4, 1), seed=0)
    with pytest.raises(UnsupportedOrderError):
        spatial_derivs(net, np.zeros((2, 2)), [(1,)])


# ===== Error trapping =====

def test_cross_tape_arithmetic_is_rejected():
    a, b = Tape().var(1.0), Tape().var(2.0)
    with pytest.raises(TapeError):
        a + b


def test_non_scalar_target_is_rejected():
    tape = Tape()
    x = tape.var([1.0, 2.0])
    with pytest.raises(TapeError):
        tape.gradient(x * x, [x])


def test_non_finite_value_names_node_and_op():
    tape = Tape()
    x = tape.var([0.0, 1.0])
    y = (1.0 / x).sum()
    with pytest.raises(NumericFailure) as info:
        tape.gradient(y, [x])
    assert info.value.op == 'div'
    assert info.value.node_id == 1


def test_numpy_operands_defer_to_var():
    tape = Tape()
    x = tape.var([1.0, 2.0])
    y = np.array([3.0, 4.0]) * x
    assert isinstance(y, Var)
    (g,) = tape.gradient(y.sum(), [x])
    np.testing.assert_allclose(g.value, [3.0, 4.0])
