"""
Outer-loop hypergradients through the implicit function theorem.

The hypergradient of J(w*(theta), theta) is

    dJ/dtheta = dJ/dtheta|_w - z . d2E/dw dtheta^T,   with  H z = dJ/dw,

where H is the Hessian of the inner loss E in w. The linear system is solved
matrix-free (Broyden, conjugate gradient, truncated Neumann series) using
Hessian-vector products; a dense finite-difference oracle is kept for
verification on small networks.
"""
import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import opt_einsum as oe
from scipy import linalg

from . import autodiff as ad
from .autodiff import Tape, Var
from .config import BroydenSettings, CgSettings, NeumannSettings
from .errors import (DegenerateVectorError, EmptyHistoryError, NumericFailure, OracleError,
                     SolverDivergence, StepSizeError)
from .problems import FieldContext, objective_var, pde_loss_var

log = logging.getLogger(__name__)

EnergyFn = Callable[[Var, Var], Var]

ORACLE_MAX_PARAMS = 500
DIVERGENCE_WINDOW = 5


# ===== Recorded linearization =====

class Linearization:
    """
    E and J recorded once at (w*, theta).

    The differentiable gradient of E in w is kept on the tape so every
    Hessian-vector product and mixed contraction is one reverse sweep.
    """

    def __init__(self, energy_fn: EnergyFn, objective_fn: Optional[EnergyFn], w, theta):
        self.energy_fn = energy_fn
        self.objective_fn = objective_fn
        self.w = np.array(w, dtype=np.float64)
        self.theta = np.array(theta, dtype=np.float64)
        self.tape = Tape()
        self._w = self.tape.var(self.w)
        self._theta = self.tape.var(self.theta)
        self.energy = energy_fn(self._w, self._theta)
        (self._grad_w_E,) = self.tape.gradient(self.energy, [self._w], create_graph=True)
        self.grad_w_E = self._grad_w_E.value.copy()
        if objective_fn is not None:
            self.objective = objective_fn(self._w, self._theta)
            g_w, g_theta = self.tape.gradient(self.objective, [self._w, self._theta])
            self.grad_w_J = g_w.value.copy()
            self.grad_theta_J = g_theta.value.copy()
        else:
            self.objective = None
            self.grad_w_J = np.zeros_like(self.w)
            self.grad_theta_J = np.zeros_like(self.theta)
        self.hvp_calls = 0
        self.mixed_calls = 0

    @property
    def num_w(self) -> int:
        return self.w.size

    @property
    def num_theta(self) -> int:
        return self.theta.size

    @property
    def energy_value(self) -> float:
        return float(self.energy.value)

    @property
    def objective_value(self) -> float:
        return float(self.objective.value) if self.objective is not None else 0.0

    def _contract(self, v, target: Var) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64)
        if v.shape != self.w.shape:
            raise ValueError(f"vector shape {v.shape} != w shape {self.w.shape}")
        (out,) = self.tape.gradient(ad.dot(self._grad_w_E, v), [target])
        return out.value

    def hvp(self, v) -> np.ndarray:
        """H v with H the Hessian of E in w."""
        self.hvp_calls += 1
        return self._contract(v, self._w)

    def mixed(self, z) -> np.ndarray:
        """z . d2E/dw dtheta^T, shaped like theta."""
        self.mixed_calls += 1
        return self._contract(z, self._theta)

    def grad_w_energy_at(self, w, theta=None) -> np.ndarray:
        """Fresh evaluation of the gradient of E in w at another point."""
        theta = self.theta if theta is None else theta
        tape = Tape()
        wv, tv = tape.var(w), tape.var(theta)
        (g,) = tape.gradient(self.energy_fn(wv, tv), [wv])
        return g.value


def loss_functions(problem, state_net, control, points, interior_weight: float = 1.0,
                   boundary_weight: float = 1.0):
    """E(w, theta) and J(w, theta) of a problem on fixed collocation points."""
    def energy_fn(w, theta):
        ctx = FieldContext(state_net, control, w, theta)
        return pde_loss_var(problem, ctx, points, interior_weight, boundary_weight)

    def objective_fn(w, theta):
        return objective_var(problem, FieldContext(state_net, control, w, theta), points)

    return energy_fn, objective_fn


def linearize(problem, state_net, control, points, interior_weight: float = 1.0,
              boundary_weight: float = 1.0) -> Linearization:
    """
    Record E and J of a problem at the current state weights and control.

    Args:
        problem: PdeProblem
        state_net: Trained state network (its params are w*)
        control: ControlParams (its values are theta)
        points: CollocationSet used for both E and J
    """
    energy_fn, objective_fn = loss_functions(problem, state_net, control, points,
                                             interior_weight, boundary_weight)
    return Linearization(energy_fn, objective_fn, state_net.params, control.values)


def ift_residual(lin: Linearization, z) -> np.ndarray:
    """g(z) = H z - dJ/dw: one Hessian-vector product, no Hessian."""
    return lin.hvp(z) - lin.grad_w_J


# ===== Results =====

@dataclass
class LinearSolve:
    """Approximate solution of H z = dJ/dw with diagnostics."""
    z: np.ndarray
    method: str
    residual_norm: float
    iterations: int
    hvp_calls: int
    converged: bool
    residual_history: List[float] = field(default_factory=list)
    extra: Dict[str, float] = field(default_factory=dict)


@dataclass
class HypergradResult:
    """dJ/dtheta and the diagnostics of the solve that produced it."""
    grad: np.ndarray
    method: str
    residual_norm: float
    iterations: int
    hvp_calls: int = 0
    diagnostics: Dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        self.grad = np.asarray(self.grad, dtype=np.float64)
        if not np.all(np.isfinite(self.grad)):
            raise NumericFailure(-1, self.method, "non-finite hypergradient")

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.grad))


# ===== Broyden =====

@dataclass
class BroydenState:
    """
    Iterate and low-rank inverse approximation B = b0 * I + sum_k u_k v_k^T.

    Factors are kept in bounded deques; the oldest pair is dropped once the
    rank limit is reached. The dense matrix is never formed.
    """
    z: np.ndarray
    max_rank: int
    b0_sign: float = -1.0
    iterations: int = 0
    residual_history: List[float] = field(default_factory=list)
    skipped_updates: int = 0
    line_search_failures: int = 0
    residual_calls: int = 0
    converged: bool = False
    g: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        self.us = deque(maxlen=self.max_rank)
        self.vs = deque(maxlen=self.max_rank)

    @property
    def stored_rank(self) -> int:
        return len(self.us)

    @property
    def hvp_calls(self) -> int:
        return self.residual_calls

    @property
    def residual_norm(self) -> float:
        return self.residual_history[-1] if self.residual_history else float('nan')

    def apply(self, q: np.ndarray) -> np.ndarray:
        """B q through the factors."""
        out = self.b0_sign * q
        for u, v in zip(self.us, self.vs):
            out = out + u * np.dot(v, q)
        return out

    def apply_transpose(self, q: np.ndarray) -> np.ndarray:
        """B^T q through the factors."""
        out = self.b0_sign * q
        for u, v in zip(self.us, self.vs):
            out = out + v * np.dot(u, q)
        return out

    def push(self, u: np.ndarray, v: np.ndarray):
        if self.max_rank <= 0:
            return
        self.us.append(u)
        self.vs.append(v)


def broyden_solve(residual_fn: Callable[[np.ndarray], np.ndarray], z0, max_iters: int = 32,
                  rank: int = 16, alpha: float = 1.0, tol: float = 1e-6,
                  b0: str = 'minus-identity', v_form: str = 'transpose', line_search: bool = True,
                  max_backtracks: int = 8, affine: bool = True) -> BroydenState:
    """
    Low-rank Broyden root finding for g(z) = 0.

    Each step moves z by -a B g(z). The step a starts at alpha and, with line
    search, is halved until the residual norm drops, at most max_backtracks
    times. When no trial step reduces the norm, the full alpha step is taken
    and the secant update still applies. For an affine residual
    the trial residuals are extrapolated from one evaluation at z + d, so the
    line search costs no extra residual evaluations.

    Args:
        residual_fn: g, evaluated at flat arrays
        z0: Initial iterate
        max_iters: Iteration limit
        rank: Maximum number of stored factor pairs
        alpha: Initial step size
        tol: Stop when |g(z)| <= tol * |g(z0)|
        b0: 'minus-identity' or 'plus-identity'
        v_form: 'transpose' (v = B^T dz) or 'direct' (v = B dz)
        line_search: Backtrack on the residual norm
        max_backtracks: Halvings per step
        affine: Residual is affine in z

    Returns:
        Final BroydenState

    Raises:
        SolverDivergence: residual norm increased DIVERGENCE_WINDOW steps in a row
    """
    if b0 not in ('minus-identity', 'plus-identity'):
        raise ValueError(f"unknown b0 '{b0}'")
    if v_form not in ('transpose', 'direct'):
        raise ValueError(f"unknown v_form '{v_form}'")
    state = BroydenState(np.array(z0, dtype=np.float64), rank, -1.0 if b0 == 'minus-identity' else 1.0)

    def evaluate(z):
        state.residual_calls += 1
        g = np.asarray(residual_fn(z), dtype=np.float64)
        if not np.all(np.isfinite(g)):
            raise SolverDivergence('broyden', "non-finite residual")
        return g

    g = evaluate(state.z)
    g0_norm = float(np.linalg.norm(g))
    state.residual_history.append(g0_norm)
    increases = 0

    while True:
        g_norm = state.residual_history[-1]
        if g_norm <= tol * g0_norm or g_norm == 0.0:
            state.converged = True
            break
        if state.iterations >= max_iters:
            break

        d = -state.apply(g)
        if affine:
            Hd = evaluate(state.z + d) - g
            trial = lambda a: g + a * Hd
        else:
            trial = lambda a: evaluate(state.z + a * d)
        a = alpha
        g_new = trial(a)
        if line_search and np.linalg.norm(g_new) >= g_norm:
            g_full = g_new
            for _ in range(max_backtracks):
                a *= 0.5
                g_new = trial(a)
                if np.linalg.norm(g_new) < g_norm:
                    break
            else:
                # no trial step reduced |g|: plain Broyden step
                state.line_search_failures += 1
                a, g_new = alpha, g_full

        dz = a * d
        dg = g_new - g
        B_dg = state.apply(dg)
        denom = float(np.dot(dz, B_dg))
        scale = float(np.linalg.norm(dz) * np.linalg.norm(B_dg))
        if scale == 0.0 or abs(denom) < 1e-12 * scale:
            state.skipped_updates += 1
            log.debug(f"[BROYDEN] iter {state.iterations}: skipped rank-one update (denominator {denom:.3e})")
        else:
            u = (dz - B_dg) / denom
            v = state.apply_transpose(dz) if v_form == 'transpose' else state.apply(dz)
            state.push(u, v)

        state.z = state.z + dz
        g = g_new
        new_norm = float(np.linalg.norm(g))
        state.residual_history.append(new_norm)
        state.iterations += 1
        log.debug(f"[BROYDEN] iter {state.iterations}: |g| = {new_norm:.3e} step = {a:.3g} rank = {state.stored_rank}")

        increases = increases + 1 if new_norm > g_norm else 0
        if increases >= DIVERGENCE_WINDOW:
            raise SolverDivergence(
                'broyden', f"residual increased {DIVERGENCE_WINDOW} consecutive steps "
                           f"(|g| = {new_norm:.3e}); retry with the cg solver")

    state.g = g
    if state.skipped_updates:
        log.warning(f"[BROYDEN] {state.skipped_updates} rank-one updates skipped")
    return state


def broyden_ift(lin: Linearization, max_iters: int = 32, rank: int = 16, alpha: float = 1.0,
                tol: float = 1e-6, b0: str = 'minus-identity', v_form: str = 'transpose',
                line_search: bool = True, max_backtracks: int = 8) -> LinearSolve:
    """Solve H z = dJ/dw by Broyden iterations on the IFT residual."""
    state = broyden_solve(lambda z: ift_residual(lin, z), np.zeros(lin.num_w), max_iters, rank,
                          alpha, tol, b0, v_form, line_search, max_backtracks, affine=True)
    return LinearSolve(state.z, 'broyden', state.residual_norm, state.iterations, state.hvp_calls,
                       state.converged, state.residual_history,
                       {'skipped_updates': state.skipped_updates, 'rank': state.stored_rank,
                        'line_search_failures': state.line_search_failures})


# ===== Baseline solvers =====

def neumann_solve(lin: Linearization, alpha: float = 1e-2, terms: int = 16,
                  tol: float = 1e-3) -> LinearSolve:
    """
    Truncated Neumann series z = alpha * sum_{k=0}^{L} (I - alpha H)^k dJ/dw.

    Uses L Hessian-vector products for the series and one more for the final
    residual. The solve counts as converged when |H z - dJ/dw| <= tol * |dJ/dw|.

    Raises:
        StepSizeError: the partial sums grew tenfold over DIVERGENCE_WINDOW terms
    """
    if alpha <= 0:
        raise ValueError("Neumann step size must be positive")
    if terms < 0:
        raise ValueError("Neumann term count must be non-negative")
    calls0 = lin.hvp_calls
    p = lin.grad_w_J.copy()
    total = p.copy()
    norms = [float(np.linalg.norm(total))]
    for k in range(1, terms + 1):
        p = p - alpha * lin.hvp(p)
        total = total + p
        norms.append(float(np.linalg.norm(total)))
        if not np.isfinite(norms[-1]):
            raise StepSizeError('neumann', f"non-finite partial sum at term {k}")
        if k >= DIVERGENCE_WINDOW and norms[-1] > 10.0 * norms[-1 - DIVERGENCE_WINDOW]:
            raise StepSizeError('neumann', f"partial sums grew tenfold by term {k}; reduce alpha")
    z = alpha * total
    resid = float(np.linalg.norm(ift_residual(lin, z)))
    converged = resid <= tol * float(np.linalg.norm(lin.grad_w_J))
    return LinearSolve(z, 'neumann', resid, terms, lin.hvp_calls - calls0,
                       converged, norms)


def cg_solve(lin: Linearization, iters: int = 50, tol: float = 1e-6) -> LinearSolve:
    """
    Conjugate gradient for H z = dJ/dw using Hessian-vector products only.

    Raises:
        SolverDivergence: a non-finite step length
    """
    calls0 = lin.hvp_calls
    b = lin.grad_w_J
    z = np.zeros_like(b)
    r = b.copy()
    b_norm = float(np.linalg.norm(b))
    history = [b_norm]
    if b_norm == 0.0:
        return LinearSolve(z, 'cg', 0.0, 0, 0, True, history)
    p = r.copy()
    rr = float(np.dot(r, r))
    converged = False
    stagnant = 0
    it = 0
    for it in range(1, iters + 1):
        Hp = lin.hvp(p)
        pHp = float(np.dot(p, Hp))
        step = rr / pHp if pHp != 0.0 else float('inf')
        if not np.isfinite(step):
            raise SolverDivergence('cg', f"non-finite step length at iteration {it} (p.Hp = {pHp:.3e})")
        z = z + step * p
        r = r - step * Hp
        rr_new = float(np.dot(r, r))
        history.append(float(np.sqrt(rr_new)))
        if history[-1] >= history[-2]:
            stagnant += 1
        if history[-1] <= tol * b_norm:
            converged = True
            break
        p = r + (rr_new / rr) * p
        rr = rr_new
    if stagnant:
        log.debug(f"[CG] residual failed to decrease on {stagnant} iterations")
    return LinearSolve(z, 'cg', history[-1], it, lin.hvp_calls - calls0, converged, history,
                       {'stagnant_iterations': stagnant})


# ===== Hypergradients =====

def assemble_hypergrad(lin: Linearization, z, method: str = 'given',
                       solve: Optional[LinearSolve] = None) -> HypergradResult:
    """dJ/dtheta = dJ/dtheta|_w - z . d2E/dw dtheta^T."""
    grad = lin.grad_theta_J - lin.mixed(z)
    if solve is None:
        return HypergradResult(grad, method, float('nan'), 0, 0)
    diagnostics = dict(solve.extra)
    diagnostics['converged'] = float(solve.converged)
    return HypergradResult(grad, method, solve.residual_norm, solve.iterations, solve.hvp_calls, diagnostics)


def t1t2_hypergrad(lin: Linearization) -> HypergradResult:
    """Hypergradient with the inverse Hessian replaced by the identity."""
    return HypergradResult(lin.grad_theta_J - lin.mixed(lin.grad_w_J), 't1t2', float('nan'), 0, 0)


def trmd_hypergrad(energy_fn: EnergyFn, objective_fn: EnergyFn, history: Sequence[np.ndarray],
                   theta, lr: float) -> HypergradResult:
    """
    Truncated reverse-mode differentiation through plain gradient-descent steps.

    Args:
        energy_fn: E(w, theta) on recorded Vars
        objective_fn: J(w, theta) on recorded Vars
        history: States w_{T-L}, ..., w_T of w_{i+1} = w_i - lr dE/dw(w_i)
        theta: Control parameters
        lr: Step size of the unrolled steps

    Returns:
        HypergradResult with iterations = L

    Raises:
        EmptyHistoryError: no states given
    """
    if len(history) == 0:
        raise EmptyHistoryError("truncated unrolling needs at least the final state")
    final = Linearization(energy_fn, objective_fn, history[-1], theta)
    adjoint = final.grad_w_J.copy()
    grad = final.grad_theta_J.copy()
    hvp_calls = 0
    for w_i in reversed(history[:-1]):
        lin_i = Linearization(energy_fn, None, w_i, theta)
        grad = grad - lr * lin_i.mixed(adjoint)
        adjoint = adjoint - lr * lin_i.hvp(adjoint)
        hvp_calls += 1
    steps = len(history) - 1
    return HypergradResult(grad, 'trmd', float('nan'), steps, hvp_calls)


def oracle_hypergrad(lin: Linearization, eps: float = 1e-5,
                     max_params: int = ORACLE_MAX_PARAMS) -> HypergradResult:
    """
    Dense reference hypergradient.

    H and d2E/dw dtheta^T are built column by column from central differences
    of the gradient of E in w, then H z = dJ/dw is solved directly.

    Raises:
        OracleError: too many parameters, or H numerically singular
    """
    m, n = lin.num_w, lin.num_theta
    if m > max_params:
        raise OracleError(f"dense oracle limited to {max_params} state parameters, got {m}")
    H = np.empty((m, m))
    for j in range(m):
        e = np.zeros(m)
        e[j] = eps
        H[:, j] = (lin.grad_w_energy_at(lin.w + e) - lin.grad_w_energy_at(lin.w - e)) / (2.0 * eps)
    M = np.empty((m, n))
    for j in range(n):
        e = np.zeros(n)
        e[j] = eps
        M[:, j] = (lin.grad_w_energy_at(lin.w, lin.theta + e)
                   - lin.grad_w_energy_at(lin.w, lin.theta - e)) / (2.0 * eps)
    H = 0.5 * (H + H.T)
    sv = linalg.svdvals(H)
    smax, smin = float(sv[0]), float(sv[-1])
    if smin <= 1e-12 * max(smax, 1e-300):
        raise OracleError(f"Hessian is numerically singular (smallest singular value {smin:.3e})", smin)
    z = linalg.solve(H, lin.grad_w_J, assume_a='sym')
    grad = lin.grad_theta_J - oe.contract('i,ij->j', z, M)
    resid = float(np.linalg.norm(H @ z - lin.grad_w_J))
    return HypergradResult(grad, 'oracle', resid, 0, 0,
                           {'condition_number': smax / smin, 'smallest_singular_value': smin})


def cosine_similarity(a, b) -> float:
    """a . b / (|a| |b|), clipped to [-1, 1]."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise DegenerateVectorError("cosine similarity of a zero-norm vector")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


SOLVERS = ('broyden', 'neumann', 'cg', 't1t2')


def compute_hypergrad(lin: Linearization, method: str, broyden=None, neumann=None, cg=None) -> HypergradResult:
    """
    Hypergradient by a named matrix-free method.

    Args:
        lin: Recorded linearization at (w*, theta)
        method: 'broyden', 'neumann', 'cg' or 't1t2'
        broyden, neumann, cg: Solver settings objects (defaults when None)
    """
    if method == 't1t2':
        return t1t2_hypergrad(lin)
    if method == 'broyden':
        s = broyden or BroydenSettings()
        solve = broyden_ift(lin, s.max_iters, s.rank, s.alpha, s.tol, s.b0, s.v_form,
                            s.line_search, s.max_backtracks)
    elif method == 'neumann':
        s = neumann or NeumannSettings()
        solve = neumann_solve(lin, s.alpha, s.terms, s.tol)
    elif method == 'cg':
        s = cg or CgSettings()
        solve = cg_solve(lin, s.iters, s.tol)
    else:
        raise ValueError(f"unknown hypergradient method '{method}'; expected one of {SOLVERS}")
    return assemble_hypergrad(lin, solve.z, method, solve)
