"""
Tests for the IFT residual, the Broyden solver, baseline hypergradients and
the dense oracle.

Most checks use a quadratic inner problem

    E(w, theta) = 1/2 w^T A w - w^T B theta,   J(w, theta) = 1/2 |w - c|^2 + 1/2 |theta|^2

whose hypergradient is theta + B^T A^{-1} (w* - c).
"""
import numpy as np
import pytest
from scipy import stats

from bilevel_pinn import autodiff as ad
from bilevel_pinn.bilevel import inner_train
from bilevel_pinn.config import SamplingSettings
from bilevel_pinn.errors import (DegenerateVectorError, EmptyHistoryError, NumericFailure, OracleError,
                                 SolverDivergence, StepSizeError)
from bilevel_pinn.hypergrad import (HypergradResult, Linearization, assemble_hypergrad, broyden_ift,
                                    broyden_solve, cg_solve, compute_hypergrad, cosine_similarity,
                                    ift_residual, linearize, neumann_solve, oracle_hypergrad,
                                    t1t2_hypergrad, trmd_hypergrad)
from bilevel_pinn.nets import mlp_init
from bilevel_pinn.problems import ControlParams, exact_hypergrad_toy, get_problem, sample_collocation


def quadratic(A, B, c):
    energy = lambda w, t: 0.5 * (w @ (A @ w)) - w @ (B @ t)
    objective = lambda w, t: 0.5 * ((w - c) @ (w - c)) + 0.5 * (t @ t)
    return energy, objective


def quadratic_linearization(A, B, c, theta):
    w_star = np.linalg.solve(A, B @ theta)
    energy, objective = quadratic(A, B, c)
    exact = theta + B.T @ np.linalg.solve(A, w_star - c)
    return Linearization(energy, objective, w_star, theta), exact


def linear_system(H, b):
    """Linearization whose IFT system is H z = b."""
    energy = lambda w, t: 0.5 * (w @ (H @ w)) + 0.0 * t.sum()
    objective = lambda w, t: 0.5 * ((w + b) @ (w + b))
    return Linearization(energy, objective, np.zeros(len(b)), np.zeros(1))


def random_spd(m, seed=0):
    rng = np.random.default_rng(seed)
    M = rng.uniform(-1.0, 1.0, size=(m, m))
    return M.T @ M / m + np.eye(m), rng.normal(size=m)


def toy_linearization(widths=(1, 3, 1), seed=0, n=64):
    problem = get_problem('poisson1d')
    net = mlp_init(widths, seed)
    points = sample_collocation(problem, n, 1, seed=seed)
    return linearize(problem, net, ControlParams(np.array([0.5, 0.5])), points)


def dense_hessian(lin):
    return np.column_stack([lin.hvp(e) for e in np.eye(lin.num_w)])


# ===== IFT residual =====

def test_residual_at_zero_is_negative_objective_gradient():
    lin, _ = quadratic_linearization(np.diag([1.0, 2.0]), np.eye(2), np.ones(2), np.array([0.3, 0.1]))
    np.testing.assert_allclose(ift_residual(lin, np.zeros(2)), -lin.grad_w_J)


def test_residual_with_identity_hessian():
    b = np.array([1.0, -2.0, 0.5])
    lin = Linearization(lambda w, t: 0.5 * (w @ w) + 0.0 * t.sum(), lambda w, t: ad.dot(w, b),
                        np.ones(3), np.zeros(1))
    z = np.array([0.2, 0.4, 0.6])
    np.testing.assert_allclose(ift_residual(lin, z), z - b)
    np.testing.assert_allclose(ift_residual(lin, b), 0.0, atol=1e-15)


def test_residual_matches_finite_difference_hessian_on_network():
    lin = toy_linearization((1, 6, 1))
    eps = 1e-5
    H = np.column_stack([(lin.grad_w_energy_at(lin.w + eps * e) - lin.grad_w_energy_at(lin.w - eps * e)) / (2 * eps)
                         for e in np.eye(lin.num_w)])
    z = np.random.default_rng(3).normal(size=lin.num_w)
    expected = H @ z - lin.grad_w_J
    out = ift_residual(lin, z)
    assert np.linalg.norm(out - expected) / np.linalg.norm(expected) < 1e-4


def test_linearization_counts_products():
    lin = linear_system(np.eye(2), np.ones(2))
    lin.hvp(np.ones(2))
    lin.mixed(np.ones(2))
    lin.hvp(np.zeros(2))
    assert lin.hvp_calls == 2 and lin.mixed_calls == 1


# ===== Broyden =====

def test_broyden_identity_system():
    b = np.ones(6)
    state = broyden_solve(lambda z: z - b, np.zeros(6), tol=1e-14)
    assert state.converged
    np.testing.assert_allclose(state.z, b)
    assert np.linalg.norm(state.g) < 1e-10


def test_broyden_diagonal_system():
    H = np.diag([1.0, 2.0, 4.0])
    state = broyden_solve(lambda z: H @ z - np.ones(3), np.zeros(3), max_iters=30, rank=30,
                          tol=1e-12)
    np.testing.assert_allclose(state.z, [1.0, 0.5, 0.25], atol=1e-8)


def test_broyden_spd_system_tail_accelerates():
    H, b = random_spd(50)
    state = broyden_solve(lambda z: H @ z - b, np.zeros(50), max_iters=50, rank=50,
                          tol=1e-12, b0='plus-identity')
    exact = np.linalg.solve(H, b)
    assert np.linalg.norm(state.z - exact) / np.linalg.norm(exact) < 1e-6
    r = np.asarray(state.residual_history)
    ratios = r[1:] / r[:-1]
    head = np.exp(np.mean(np.log(ratios[:5])))
    tail = np.exp(np.mean(np.log(ratios[-5:])))
    assert tail < head


def test_broyden_takes_full_step_when_no_trial_reduces_residual():
    # minus-identity start on an SPD system: every trial step goes uphill
    b = np.array([1.0, -2.0, 0.5])
    state = broyden_solve(lambda z: z - b, np.zeros(3), tol=1e-14)
    assert state.line_search_failures == 1
    assert state.residual_history[1] == pytest.approx(2.0 * np.linalg.norm(b))
    assert state.iterations == 2
    np.testing.assert_allclose(state.z, b)


def test_broyden_minus_identity_solves_spd_system():
    H, b = random_spd(12, seed=3)
    state = broyden_solve(lambda z: H @ z - b, np.zeros(12), max_iters=60, rank=60, tol=1e-10)
    assert state.converged
    np.testing.assert_allclose(state.z, np.linalg.solve(H, b), rtol=1e-6, atol=1e-8)


def test_broyden_affine_residual_costs_one_evaluation_per_iteration():
    H, b = random_spd(10, seed=1)
    calls = []
    state = broyden_solve(lambda z: calls.append(1) or H @ z - b, np.zeros(10), max_iters=15, rank=15,
                          b0='plus-identity')
    assert state.residual_calls == len(calls) == state.iterations + 1
    assert state.hvp_calls == state.residual_calls


def test_broyden_rank_is_bounded():
    H = np.diag(np.arange(1.0, 11.0))
    state = broyden_solve(lambda z: H @ z - np.ones(10), np.zeros(10), max_iters=6, rank=3, tol=0.0,
                          b0='plus-identity')
    assert state.stored_rank == 3
    assert len(state.us) == len(state.vs) == 3


def test_broyden_rank_zero_keeps_no_factors():
    state = broyden_solve(lambda z: z - 1.0, np.zeros(4), max_iters=5, rank=0, b0='plus-identity')
    assert state.stored_rank == 0
    np.testing.assert_allclose(state.z, 1.0)


def test_broyden_skips_degenerate_updates():
    b = np.array([1.0, 2.0])
    state = broyden_solve(lambda z: -b, np.zeros(2), max_iters=4, rank=4)
    assert state.skipped_updates == 4
    assert state.stored_rank == 0
    assert not state.converged


def test_broyden_divergence_after_five_increases():
    counter = iter(range(1, 1000))
    growing = lambda z: np.full(2, 2.0 ** next(counter))
    with pytest.raises(SolverDivergence) as info:
        broyden_solve(growing, np.zeros(2), max_iters=50, line_search=False, affine=False)
    assert info.value.method == 'broyden'


def test_broyden_non_finite_residual():
    with pytest.raises(SolverDivergence):
        broyden_solve(lambda z: np.full(2, np.nan), np.zeros(2))


def test_broyden_rejects_unknown_options():
    with pytest.raises(ValueError):
        broyden_solve(lambda z: z, np.zeros(2), b0='zero')
    with pytest.raises(ValueError):
        broyden_solve(lambda z: z, np.zeros(2), v_form='inverse')


def test_broyden_ift_on_quadratic_matches_exact_hypergradient():
    H, _ = random_spd(8, seed=2)
    B = np.random.default_rng(4).normal(size=(8, 3))
    lin, exact = quadratic_linearization(H, B, np.ones(8), np.array([0.2, -0.5, 1.0]))
    solve = broyden_ift(lin, max_iters=40, rank=40, tol=1e-12, b0='plus-identity')
    result = assemble_hypergrad(lin, solve.z, 'broyden', solve)
    np.testing.assert_allclose(result.grad, exact, rtol=1e-7, atol=1e-9)
    assert result.diagnostics['converged'] == 1.0


# ===== Neumann =====

def test_neumann_identity_hessian():
    b = np.array([1.0, -1.0, 2.0])
    solve = neumann_solve(linear_system(np.eye(3), b), alpha=1.0, terms=7)
    np.testing.assert_allclose(solve.z, b)


def test_neumann_diagonal_limit():
    solve = neumann_solve(linear_system(np.diag([1.0, 2.0]), np.ones(2)), alpha=0.25, terms=200)
    np.testing.assert_allclose(solve.z, [1.0, 0.5], atol=1e-10)
    assert solve.hvp_calls == 201


def test_neumann_zero_terms():
    b = np.array([2.0, 4.0])
    np.testing.assert_allclose(neumann_solve(linear_system(np.diag([3.0, 5.0]), b), alpha=0.1, terms=0).z, 0.1 * b)


def test_neumann_convergence_follows_residual():
    exact = neumann_solve(linear_system(np.eye(3), np.ones(3)), alpha=1.0, terms=3)
    assert exact.converged and exact.residual_norm == pytest.approx(0.0, abs=1e-14)
    short = neumann_solve(linear_system(np.diag([3.0, 5.0]), np.ones(2)), alpha=0.1, terms=2)
    assert not short.converged
    assert short.residual_norm > 1e-3 * np.sqrt(2.0)


def test_neumann_growth_raises_step_size_error():
    with pytest.raises(StepSizeError):
        neumann_solve(linear_system(np.diag([3.0]), np.ones(1)), alpha=1.0, terms=20)


# ===== CG =====

def test_cg_identity_one_iteration():
    solve = cg_solve(linear_system(np.eye(4), np.arange(1.0, 5.0)))
    assert solve.iterations == 1 and solve.converged
    np.testing.assert_allclose(solve.z, np.arange(1.0, 5.0))


def test_cg_finite_termination():
    solve = cg_solve(linear_system(np.diag([1.0, 2.0, 4.0]), np.ones(3)), tol=1e-12)
    assert solve.iterations <= 3
    np.testing.assert_allclose(solve.z, [1.0, 0.5, 0.25], atol=1e-10)


def test_cg_spd_system():
    H, b = random_spd(50, seed=5)
    solve = cg_solve(linear_system(H, b), iters=50, tol=1e-12)
    np.testing.assert_allclose(solve.z, np.linalg.solve(H, b), atol=1e-8)


def test_cg_zero_right_hand_side():
    solve = cg_solve(linear_system(np.eye(2), np.zeros(2)))
    assert solve.iterations == 0 and solve.residual_norm == 0.0


# ===== Hypergradient baselines =====

def test_t1t2_exact_for_identity_hessian():
    B = np.array([[1.0, 0.5], [-0.3, 2.0], [0.0, 1.0]])
    lin, exact = quadratic_linearization(np.eye(3), B, np.array([1.0, 0.0, -1.0]), np.array([0.4, 0.2]))
    result = t1t2_hypergrad(lin)
    np.testing.assert_allclose(result.grad, exact, atol=1e-12)
    assert np.isnan(result.residual_norm) and result.hvp_calls == 0


def test_t1t2_when_objective_ignores_state():
    lin = Linearization(lambda w, t: 0.5 * (w @ w) + ad.dot(w, t), lambda w, t: 0.5 * (t @ t),
                        np.zeros(2), np.array([0.3, -0.7]))
    np.testing.assert_allclose(t1t2_hypergrad(lin).grad, [0.3, -0.7])


def test_trmd_without_steps_is_partial_derivative():
    energy, objective = quadratic(np.eye(2), np.eye(2), np.zeros(2))
    theta = np.array([0.5, 1.5])
    result = trmd_hypergrad(energy, objective, [np.ones(2)], theta, lr=0.1)
    np.testing.assert_allclose(result.grad, theta)
    assert result.iterations == 0


def test_trmd_single_step_matches_chain_rule():
    a, b, c, lr = 2.0, 0.7, 0.3, 0.1
    energy = lambda w, t: 0.5 * a * (w * w).sum() - b * (w * t).sum()
    objective = lambda w, t: 0.5 * ((w - c) * (w - c)).sum()
    w0, theta = np.array([0.4]), np.array([1.2])
    w1 = w0 - lr * (a * w0 - b * theta)
    result = trmd_hypergrad(energy, objective, [w0, w1], theta, lr)
    np.testing.assert_allclose(result.grad, (w1 - c) * lr * b, rtol=1e-12)


def test_trmd_long_horizon_approaches_ift():
    rng = np.random.default_rng(6)
    S = rng.normal(size=(10, 10))
    A = np.eye(10) + 0.05 * (S + S.T)
    B = rng.normal(size=(10, 2))
    c = rng.normal(size=10)
    theta = np.array([0.3, -0.2])
    lin, exact = quadratic_linearization(A, B, c, theta)
    energy, objective = quadratic(A, B, c)
    result = trmd_hypergrad(energy, objective, [lin.w] * 101, theta, lr=0.5)
    np.testing.assert_allclose(result.grad, exact, atol=1e-3)


def test_trmd_empty_history():
    energy, objective = quadratic(np.eye(2), np.eye(2), np.zeros(2))
    with pytest.raises(EmptyHistoryError):
        trmd_hypergrad(energy, objective, [], np.zeros(2), lr=0.1)


def test_assemble_with_zero_vector_is_partial_derivative():
    lin, _ = quadratic_linearization(np.eye(2), np.eye(2), np.zeros(2), np.array([1.0, 2.0]))
    np.testing.assert_allclose(assemble_hypergrad(lin, np.zeros(2)).grad, lin.grad_theta_J)


def test_hypergradient_without_mixed_term():
    b, c = np.array([1.0, 2.0]), np.array([-0.5, 0.25, 4.0])
    lin = Linearization(lambda w, t: 0.5 * (w @ w) + 0.0 * t.sum(),
                        lambda w, t: ad.dot(w, b) + ad.dot(t, c), np.zeros(2), np.zeros(3))
    for method in ('broyden', 'cg', 't1t2'):
        np.testing.assert_allclose(compute_hypergrad(lin, method).grad, c, atol=1e-10)


def test_bilinear_coupling_closed_form():
    M = np.array([[1.0, 2.0], [0.5, -1.0], [3.0, 0.0]])
    b = np.array([0.2, -0.4, 1.0])
    lin = Linearization(lambda w, t: 0.5 * (w @ w) + w @ (M @ t), lambda w, t: ad.dot(w, b),
                        np.zeros(3), np.zeros(2))
    expected = -M.T @ b
    np.testing.assert_allclose(compute_hypergrad(lin, 'cg').grad, expected, atol=1e-10)
    np.testing.assert_allclose(oracle_hypergrad(lin).grad, expected, rtol=1e-6)


def test_non_finite_hypergradient_is_rejected():
    with pytest.raises(NumericFailure):
        HypergradResult(np.array([np.inf]), 'cg', 0.0, 1)


def test_unknown_method():
    with pytest.raises(ValueError):
        compute_hypergrad(linear_system(np.eye(1), np.ones(1)), 'newton')


# ===== Dense oracle =====

def test_oracle_matches_dense_solve_on_network():
    lin = toy_linearization((1, 3, 1))
    H = dense_hessian(lin)
    z = np.linalg.solve(0.5 * (H + H.T), lin.grad_w_J)
    expected = assemble_hypergrad(lin, z).grad
    result = oracle_hypergrad(lin)
    assert np.linalg.norm(result.grad - expected) / np.linalg.norm(expected) < 1e-3
    assert result.diagnostics['condition_number'] >= 1.0
    assert result.diagnostics['smallest_singular_value'] > 0.0


def test_oracle_parameter_limit():
    lin = toy_linearization((1, 4, 1))
    with pytest.raises(OracleError):
        oracle_hypergrad(lin, max_params=5)


def test_oracle_singular_hessian_reports_smallest_singular_value():
    mask = np.array([1.0, 0.0])
    lin = Linearization(lambda w, t: 0.5 * (w * w * mask).sum() + 0.0 * t.sum(), lambda w, t: w.sum(),
                        np.zeros(2), np.zeros(1))
    with pytest.raises(OracleError) as info:
        oracle_hypergrad(lin)
    assert info.value.smallest_singular_value == pytest.approx(0.0, abs=1e-8)


@pytest.mark.slow
def test_solvers_match_dense_solve_on_trained_toy_net():
    points = sample_collocation(get_problem('poisson1d'), 64, 1, seed=0)
    lin = trained_toy((1, 4, 1), 3000, points)
    H = dense_hessian(lin)
    z_dense = np.linalg.solve(0.5 * (H + H.T), lin.grad_w_J)
    oracle = oracle_hypergrad(lin).grad
    broyden = broyden_ift(lin, max_iters=200, rank=200, tol=1e-10)
    cg = cg_solve(lin, iters=200, tol=1e-12)
    for solve in (broyden, cg):
        assert np.linalg.norm(solve.z - z_dense) / np.linalg.norm(z_dense) < 1e-3
        grad = assemble_hypergrad(lin, solve.z).grad
        assert np.linalg.norm(grad - oracle) / np.linalg.norm(oracle) < 1e-3


@pytest.mark.slow
def test_toy_broyden_hypergradient_aligns_with_closed_form():
    problem = get_problem('poisson1d')
    control = ControlParams(np.array([0.5, 0.5]))
    net, _ = inner_train(problem, mlp_init((1, 16, 16, 1), seed=0), control, epochs=4000, lr=1e-3,
                         seed=1, sampling=SamplingSettings(n_interior=128, n_boundary=1))
    lin = linearize(problem, net, control, sample_collocation(problem, 256, 1, seed=2))
    result = compute_hypergrad(lin, 'broyden')
    assert cosine_similarity(result.grad, exact_hypergrad_toy(control.values)) >= 0.99


# ===== Cosine similarity =====

def test_cosine_similarity():
    assert cosine_similarity([1.0, 0.0], [1.0, 0.0]) == pytest.approx(1.0)
    assert cosine_similarity([1.0, 0.0], [0.0, 1.0]) == pytest.approx(0.0)
    assert cosine_similarity([1.0, 1.0], [-1.0, -1.0]) == pytest.approx(-1.0)


def test_cosine_similarity_zero_vector():
    with pytest.raises(DegenerateVectorError):
        cosine_similarity([0.0, 0.0], [1.0, 2.0])


# ===== Error trends =====

def trained_toy(widths, epochs, points):
    problem = get_problem('poisson1d')
    control = ControlParams(np.array([0.5, 0.5]))
    net, _ = inner_train(problem, mlp_init(widths, seed=0), control, epochs=epochs, lr=1e-2,
                         fixed_points=points)
    return linearize(problem, net, control, points)


@pytest.mark.slow
def test_error_falls_with_broyden_iterations():
    points = sample_collocation(get_problem('poisson1d'), 64, 1, seed=0)
    lin = trained_toy((1, 6, 1), 3000, points)
    reference = oracle_hypergrad(lin).grad
    iters = [2, 4, 8, 16, 32]
    errors = []
    for k in iters:
        solve = broyden_ift(lin, max_iters=k, rank=k, tol=0.0)
        errors.append(np.linalg.norm(assemble_hypergrad(lin, solve.z).grad - reference))
    assert stats.spearmanr(iters, errors)[0] <= -0.8


@pytest.mark.slow
def test_error_falls_with_inner_training():
    points = sample_collocation(get_problem('poisson1d'), 64, 1, seed=0)
    exact = exact_hypergrad_toy([0.5, 0.5])
    epochs = [250, 500, 1000, 2000, 4000]
    errors = []
    for n in epochs:
        lin = trained_toy((1, 8, 8, 1), n, points)
        errors.append(np.linalg.norm(compute_hypergrad(lin, 'broyden').grad - exact))
    assert stats.spearmanr(epochs, errors)[0] <= -0.8
