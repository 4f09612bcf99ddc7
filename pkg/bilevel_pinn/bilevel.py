"""
Bilevel driver: warmup, then alternating hypergradient steps on the control
and finetuning of the state network; plus the penalty baseline and the
hypergradient fidelity study.
"""
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .autodiff import Tape
from .config import BilevelConfig, SamplingSettings
from .errors import (DegenerateVectorError, NumericFailure, SolverDivergence,
                     TrainingAborted)
from .hypergrad import (HypergradResult, Linearization, compute_hypergrad, cosine_similarity,
                        linearize, loss_functions, trmd_hypergrad)
from .io_utils import write_csv
from .nets import Mlp, mlp_init, save_checkpoint
from .optim import Adam, GradientDescent
from .problems import (CollocationSet, ControlParams, FieldContext, PdeProblem, derive_seed,
                       exact_hypergrad_toy, export_control_grid, objective, objective_var, pde_loss,
                       pde_loss_var, reference_evaluate, sample_collocation)
from .reference import write_control_csv

log = logging.getLogger(__name__)

RUN_COLUMNS = ('outer_iter', 'inner_epochs_total', 'J_mc', 'J_ref', 'E_pde', 'hypergrad_norm',
               'solver_resid', 'solver_iters', 'wall_s')
FIDELITY_COLUMNS = ('outer_iter', 'method', 'cosine_sim', 'residual_norm', 'iters_used', 'hvp_calls')

# Seed streams derived from the run seed
SEED_STATE, SEED_CONTROL, SEED_EVAL, SEED_WARMUP, SEED_FINETUNE, SEED_OUTER = range(6)


# ===== Records =====

@dataclass
class RunRow:
    outer_iter: int
    inner_epochs_total: int
    J_mc: float
    J_ref: Optional[float]
    E_pde: float
    hypergrad_norm: float
    solver_resid: float
    solver_iters: int
    wall_s: float
    method: str
    final: bool = False

    def values(self) -> list:
        return [self.outer_iter, self.inner_epochs_total, self.J_mc, self.J_ref, self.E_pde,
                self.hypergrad_norm, self.solver_resid, self.solver_iters, self.wall_s]


@dataclass
class RunRecord:
    """Per-outer-iteration trace of one run; the final row is the reported result."""
    problem: str
    method: str
    rows: List[RunRow] = field(default_factory=list)
    control: Optional[ControlParams] = None
    state_net: Optional[Mlp] = None
    converged: bool = False
    cg_fallbacks: int = 0

    @property
    def final_row(self) -> RunRow:
        return self.rows[-1]

    @property
    def final_J_ref(self) -> float:
        return self.final_row.J_ref

    @property
    def best_J_ref(self) -> float:
        values = [r.J_ref for r in self.rows if r.J_ref is not None and np.isfinite(r.J_ref)]
        return min(values) if values else float('nan')

    def numeric_columns(self) -> np.ndarray:
        """All numeric columns except wall time, for reproducibility checks."""
        return np.array([[np.nan if v is None else v for v in r.values()[:-1]] for r in self.rows],
                        dtype=np.float64)

    def to_csv(self, path: Union[str, Path]) -> Path:
        columns = list(RUN_COLUMNS) + ['method', 'final']
        rows = [r.values() + [r.method, r.final] for r in self.rows]
        return write_csv(path, columns, rows)


# ===== Inner loop =====

def _energy_gradient(problem, state_net, control, params, points, sampling) -> Tuple[float, np.ndarray]:
    tape = Tape()
    wv = tape.var(params)
    ctx = FieldContext(state_net, control, wv, None)
    E = pde_loss_var(problem, ctx, points, sampling.interior_weight, sampling.boundary_weight)
    (g,) = tape.gradient(E, [wv])
    return float(E.value), g.value


def inner_train(problem: PdeProblem, state_net: Mlp, control: ControlParams, epochs: int,
                lr: float = 1e-3, seed: int = 0, sampling=None, optimizer: Optional[Adam] = None,
                fixed_points: Optional[CollocationSet] = None) -> Tuple[Mlp, List[float]]:
    """
    Train the state network on the inner loss only.

    Args:
        problem: Problem definition
        state_net: Starting network
        control: Fixed control
        epochs: Optimizer steps
        lr: Adam learning rate (ignored when optimizer is given)
        seed: Seed for the per-epoch collocation batches
        sampling: SamplingSettings
        optimizer: Adam instance to continue with
        fixed_points: Use this batch every epoch instead of resampling

    Returns:
        (trained network, loss per epoch)

    Raises:
        TrainingAborted: a non-finite loss or gradient; carries the last finite network
    """
    sampling = sampling or SamplingSettings()
    if epochs <= 0:
        return state_net, []
    optimizer = optimizer or Adam(lr=lr)
    params = state_net.params.copy()
    losses = []
    points = fixed_points
    if points is None and not sampling.resample:
        points = sample_collocation(problem, sampling.n_interior, sampling.n_boundary, seed,
                                    sampling.n_objective)
    for epoch in range(epochs):
        batch = points if points is not None else sample_collocation(
            problem, sampling.n_interior, sampling.n_boundary, derive_seed(seed, epoch), sampling.n_objective)
        try:
            loss, grad = _energy_gradient(problem, state_net, control, params, batch, sampling)
        except NumericFailure as exc:
            log.error(f"[INNER] epoch {epoch}: {exc}")
            raise TrainingAborted(f"inner training failed at epoch {epoch}: {exc}",
                                  state_net.with_params(params)) from exc
        new_params = optimizer.step(params, grad)
        if not np.all(np.isfinite(new_params)):
            raise TrainingAborted(f"non-finite weights after epoch {epoch}", state_net.with_params(params))
        params = new_params
        losses.append(loss)
        if (epoch + 1) % 500 == 0:
            log.debug(f"[INNER] epoch {epoch + 1}/{epochs}: E = {loss:.4e}")
    return state_net.with_params(params), losses


def gradient_descent_history(problem: PdeProblem, state_net: Mlp, control: ControlParams,
                             points: CollocationSet, steps: int, lr: float,
                             sampling=None) -> List[np.ndarray]:
    """States w_0, ..., w_L of plain gradient descent on a fixed batch."""
    sampling = sampling or SamplingSettings()
    stepper = GradientDescent(lr)
    history = [state_net.params.copy()]
    for _ in range(steps):
        _, grad = _energy_gradient(problem, state_net, control, history[-1], points, sampling)
        history.append(stepper.step(history[-1], grad))
    return history


# ===== Bilevel driver =====

Observer = Callable[[int, Linearization, HypergradResult, ControlParams], None]


class BilevelRun:
    """State of one bilevel optimization run."""

    def __init__(self, problem: PdeProblem, config: BilevelConfig,
                 state_widths: Optional[Sequence[int]] = None,
                 control: Optional[ControlParams] = None,
                 control_widths: Optional[Sequence[int]] = None,
                 output_dir: Optional[Union[str, Path]] = None,
                 observer: Optional[Observer] = None):
        self.problem = problem
        self.config = config
        self.output_dir = Path(output_dir) if output_dir is not None else None
        self.observer = observer
        seed = config.seed
        widths = tuple(state_widths) if state_widths else problem.default_state_widths
        self.state_net = mlp_init(widths, derive_seed(seed, SEED_STATE))
        self.control = control or problem.initial_control(derive_seed(seed, SEED_CONTROL), control_widths)
        s = config.sampling
        self.eval_points = sample_collocation(problem, s.n_interior, s.n_boundary,
                                              derive_seed(seed, SEED_EVAL), s.n_objective)
        self.adam = Adam(lr=config.inner_lr)
        self.outer_lr = config.resolved_outer_lr(self.control.kind)
        self.epochs_total = 0
        self.record = RunRecord(problem.name, config.method)
        self._t0 = time.perf_counter()

    def _train(self, epochs: int, seed: int):
        self.state_net, _ = inner_train(self.problem, self.state_net, self.control, epochs,
                                        seed=seed, sampling=self.config.sampling, optimizer=self.adam)
        self.epochs_total += epochs

    def _outer_points(self, i: int) -> CollocationSet:
        s = self.config.sampling
        if not s.resample:
            return self.eval_points
        return sample_collocation(self.problem, s.n_interior, s.n_boundary,
                                  derive_seed(self.config.seed, SEED_OUTER, i), s.n_objective)

    def reference(self) -> float:
        try:
            return reference_evaluate(self.problem, self.control)
        except SolverDivergence as exc:
            log.warning(f"[REF] reference evaluation failed: {exc}")
            return float('nan')

    def _row(self, i: int, result: Optional[HypergradResult], method: str, validate: bool) -> RunRow:
        s = self.config.sampling
        J_mc = objective(self.problem, self.state_net, self.control, self.eval_points)
        E = pde_loss(self.problem, self.state_net, self.control, self.eval_points,
                     interior_weight=s.interior_weight, boundary_weight=s.boundary_weight)
        row = RunRow(
            outer_iter=i,
            inner_epochs_total=self.epochs_total,
            J_mc=J_mc,
            J_ref=self.reference() if validate else None,
            E_pde=E,
            hypergrad_norm=result.norm if result else float('nan'),
            solver_resid=result.residual_norm if result else float('nan'),
            solver_iters=result.iterations if result else 0,
            wall_s=time.perf_counter() - self._t0,
            method=method,
        )
        self.record.rows.append(row)
        if validate and self.output_dir is not None and self.config.checkpoints:
            self.checkpoint(f"{i:05d}")
        return row

    def checkpoint(self, tag: str):
        ckpt = self.output_dir / 'checkpoints'
        save_checkpoint(self.state_net, ckpt / f"state_{tag}.ckpt")
        if self.control.net is not None:
            save_checkpoint(self.control.net.with_params(self.control.values), ckpt / f"control_{tag}.ckpt")
        write_control_csv(export_control_grid(self.problem, self.control), ckpt / f"control_{tag}.csv")

    def hypergradient(self, i: int, points: CollocationSet, method: str) -> HypergradResult:
        s = self.config.sampling
        if method == 'trmd':
            history = gradient_descent_history(self.problem, self.state_net, self.control, points,
                                               self.config.trmd.steps, self.config.trmd.lr, s)
            energy_fn, objective_fn = loss_functions(self.problem, self.state_net, self.control, points,
                                                     s.interior_weight, s.boundary_weight)
            result = trmd_hypergrad(energy_fn, objective_fn, history, self.control.values, self.config.trmd.lr)
            self.state_net = self.state_net.with_params(history[-1])
            return result
        lin = linearize(self.problem, self.state_net, self.control, points,
                        s.interior_weight, s.boundary_weight)
        result = compute_hypergrad(lin, method, self.config.broyden, self.config.neumann, self.config.cg)
        if self.observer is not None:
            self.observer(i, lin, result, self.control)
        return result

    def _hypergradient_with_fallback(self, i: int) -> HypergradResult:
        points = self._outer_points(i)
        method = self.config.method
        try:
            return self.hypergradient(i, points, method)
        except SolverDivergence as exc:
            if method == 'cg':
                raise
            log.warning(f"[OUTER] iter {i}: {exc}; retrying with cg")
        self.record.cg_fallbacks += 1
        return self.hypergradient(i, points, 'cg')

    def _converged(self) -> bool:
        w = self.config.convergence_window
        J = [r.J_mc for r in self.record.rows[1:]]
        if len(J) < 2 * w:
            return False
        now, before = np.mean(J[-w:]), np.mean(J[-2 * w:-w])
        return abs(now - before) <= self.config.convergence_tol * max(abs(before), 1e-12)

    def run(self) -> RunRecord:
        try:
            return self._run()
        except TrainingAborted as exc:
            log.error(f"[OUTER] aborting: {exc}")
            if exc.last_good is not None:
                self.state_net = exc.last_good
            self._finish()
            raise

    def _run(self) -> RunRecord:
        cfg = self.config
        log.info(f"[OUTER] {self.problem.name}: warmup {cfg.warmup_epochs} epochs, method {cfg.method}")
        self._train(cfg.warmup_epochs, derive_seed(cfg.seed, SEED_WARMUP))
        self._row(0, None, cfg.method, validate=True)

        for i in range(1, cfg.max_outer_iters + 1):
            try:
                result = self._hypergradient_with_fallback(i)
            except SolverDivergence as exc:
                log.error(f"[OUTER] iter {i}: aborting after cg fallback: {exc}")
                self._finish()
                raise
            self.control = self.control.with_values(self.control.values - self.outer_lr * result.grad)
            self._train(cfg.finetune_epochs, derive_seed(cfg.seed, SEED_FINETUNE, i))
            row = self._row(i, result, result.method, validate=(i % cfg.validate_every == 0))
            log.info(f"[OUTER] iter {i}: J_mc = {row.J_mc:.4e} E = {row.E_pde:.3e} "
                     f"|grad| = {row.hypergrad_norm:.3e} resid = {row.solver_resid:.2e}")
            if self._converged():
                log.info(f"[OUTER] converged at iter {i}")
                self.record.converged = True
                break
        return self._finish()

    def _finish(self) -> RunRecord:
        if self.record.cg_fallbacks:
            log.warning(f"[OUTER] {self.record.cg_fallbacks} of {len(self.record.rows) - 1} hypergradients "
                        f"fell back to cg")
        final = self.record.rows[-1] if self.record.rows else None
        if final is not None:
            if final.J_ref is None:
                final.J_ref = self.reference()
            final.final = True
        self.record.control = self.control
        self.record.state_net = self.state_net
        if self.output_dir is not None:
            self.record.to_csv(self.output_dir / 'run_record.csv')
            if self.config.checkpoints:
                self.checkpoint('final')
        return self.record


def run_bpn(problem: PdeProblem, config: BilevelConfig, state_widths: Optional[Sequence[int]] = None,
            control: Optional[ControlParams] = None, control_widths: Optional[Sequence[int]] = None,
            output_dir: Optional[Union[str, Path]] = None, observer: Optional[Observer] = None) -> RunRecord:
    """
    Bilevel optimization of a problem's control.

    Warmup trains the state network for warmup_epochs. Each outer iteration
    computes the hypergradient with the configured method, takes a plain
    gradient step on the control and finetunes the state network. A diverging
    solver is retried once with conjugate gradient.

    Args:
        problem: Problem definition
        config: BilevelConfig
        state_widths: State network widths (problem default when None)
        control: Initial control (problem's initial guess when None)
        control_widths: Control network widths for the initial guess
        output_dir: Where to write run_record.csv and checkpoints
        observer: Called with (iter, linearization, result, control) after each hypergradient

    Returns:
        RunRecord whose last row is flagged final

    Raises:
        SolverDivergence: the cg fallback diverged as well
        TrainingAborted: inner training hit a numeric failure
    """
    return BilevelRun(problem, config, state_widths, control, control_widths, output_dir, observer).run()


# ===== Penalty baseline =====

def penalty_weight(stage: int, init_weight: float = 1e-3, ratio: float = 2.0,
                   max_weight: float = 1e3) -> float:
    """Residual weight at a stage: init * ratio^stage, capped."""
    return float(min(init_weight * ratio ** stage, max_weight))


def penalty_schedule(stages: int, init_weight: float = 1e-3, ratio: float = 2.0,
                     max_weight: float = 1e3) -> List[float]:
    return [penalty_weight(k, init_weight, ratio, max_weight) for k in range(stages)]


def run_penalty_baseline(problem: PdeProblem, config: BilevelConfig,
                         state_widths: Optional[Sequence[int]] = None,
                         control: Optional[ControlParams] = None,
                         control_widths: Optional[Sequence[int]] = None,
                         output_dir: Optional[Union[str, Path]] = None) -> RunRecord:
    """
    Joint minimization of J + lambda * E over (w, theta).

    The epoch budget matches the bilevel driver (warmup plus finetune epochs
    per outer iteration), split into stages; lambda grows by the configured
    ratio each stage up to its cap. One record row per stage.
    """
    p = config.penalty
    s = config.sampling
    run = BilevelRun(problem, config, state_widths, control, control_widths, output_dir)
    budget = config.warmup_epochs + config.max_outer_iters * config.finetune_epochs
    stages = max(1, -(-budget // p.stage_epochs))
    m = run.state_net.num_params
    params = np.concatenate([run.state_net.params, run.control.values])
    adam = Adam(lr=config.inner_lr)
    seed = derive_seed(config.seed, SEED_FINETUNE)
    run.record.method = 'penalty'
    epoch = 0
    log.info(f"[PENALTY] {problem.name}: {budget} epochs in {stages} stages")

    for stage in range(stages):
        weight = penalty_weight(stage, p.init_weight, p.ratio, p.max_weight)
        theta_grad = np.zeros(run.control.dim)
        for _ in range(min(p.stage_epochs, budget - epoch)):
            batch = run.eval_points if not s.resample else sample_collocation(
                problem, s.n_interior, s.n_boundary, derive_seed(seed, epoch), s.n_objective)
            tape = Tape()
            wv, tv = tape.var(params[:m]), tape.var(params[m:])
            ctx = FieldContext(run.state_net, run.control, wv, tv)
            try:
                loss = objective_var(problem, ctx, batch) + weight * pde_loss_var(
                    problem, ctx, batch, s.interior_weight, s.boundary_weight)
                gw, gt = tape.gradient(loss, [wv, tv])
            except NumericFailure as exc:
                log.error(f"[PENALTY] epoch {epoch}: {exc}")
                run.state_net = run.state_net.with_params(params[:m])
                run.control = run.control.with_values(params[m:])
                run._finish()
                raise TrainingAborted(f"penalty training failed at epoch {epoch}: {exc}",
                                      run.state_net) from exc
            grad = np.concatenate([gw.value, gt.value])
            theta_grad = gt.value
            params = adam.step(params, grad)
            epoch += 1
        run.state_net = run.state_net.with_params(params[:m])
        run.control = run.control.with_values(params[m:])
        run.epochs_total = epoch
        validate = (stage + 1) % config.validate_every == 0
        row = run._row(stage + 1, None, 'penalty', validate)
        row.hypergrad_norm = float(np.linalg.norm(theta_grad))
        log.info(f"[PENALTY] stage {stage + 1}/{stages}: lambda = {weight:.3g} J_mc = {row.J_mc:.4e} "
                 f"E = {row.E_pde:.3e}")
    return run._finish()


# ===== Hypergradient fidelity =====

@dataclass
class FidelityReport:
    """
    Cosine similarity of each method's hypergradient to the analytic one, per outer step.

    Every attempt has a row. A solve that diverged or returned a zero
    gradient has cosine NaN and scores FAILED_SCORE in the medians.
    """
    rows: List[tuple] = field(default_factory=list)

    FAILED_SCORE = 0.0

    def medians(self) -> Dict[str, float]:
        by_method: Dict[str, List[float]] = {}
        for _, method, cos, *_ in self.rows:
            by_method.setdefault(method, []).append(cos if np.isfinite(cos) else self.FAILED_SCORE)
        return {m: float(np.median(v)) for m, v in by_method.items()}

    def failures(self) -> Dict[str, int]:
        counts = {m: 0 for m in self.methods()}
        for _, method, cos, *_ in self.rows:
            if not np.isfinite(cos):
                counts[method] += 1
        return counts

    def methods(self) -> List[str]:
        return sorted({r[1] for r in self.rows})

    def to_csv(self, path: Union[str, Path]) -> Path:
        return write_csv(path, FIDELITY_COLUMNS, self.rows)


def run_fidelity_study(problem: PdeProblem, config: BilevelConfig,
                       methods: Sequence[str] = ('broyden', 'neumann', 't1t2'),
                       broyden_iters: Sequence[int] = (2, 4, 8, 16, 32),
                       state_widths: Optional[Sequence[int]] = None,
                       output_dir: Optional[Union[str, Path]] = None) -> Tuple[FidelityReport, RunRecord]:
    """
    Compare hypergradient methods against the analytic toy gradient.

    The outer loop is driven by config.method; at every outer step each
    listed method (and Broyden at every listed iteration count, tagged
    'broyden-<k>') is evaluated on the same linearization. Diverged
    solves are kept as rows with cosine NaN.

    Raises:
        ValueError: the problem has no analytic hypergradient
    """
    if problem.control_kind != 'vector' or problem.name != 'poisson1d':
        raise ValueError(f"fidelity study needs the analytic-gradient problem, not '{problem.name}'")
    report = FidelityReport()

    def record(i, tag, result, exact):
        try:
            cos = cosine_similarity(result.grad, exact)
        except DegenerateVectorError:
            cos = float('nan')
        report.rows.append((i, tag, cos, result.residual_norm, result.iterations, result.hvp_calls))

    def attempt(i, lin, tag, method, exact, settings):
        calls0 = lin.hvp_calls
        try:
            result = compute_hypergrad(lin, method, settings, config.neumann, config.cg)
        except SolverDivergence as exc:
            log.warning(f"[FIDELITY] iter {i} {tag}: {exc}")
            report.rows.append((i, tag, float('nan'), float('nan'), 0, lin.hvp_calls - calls0))
            return
        record(i, tag, result, exact)

    def observer(i, lin, result, control):
        exact = exact_hypergrad_toy(control.values)
        for method in methods:
            if method != 'broyden':
                attempt(i, lin, method, method, exact, config.broyden)
        if 'broyden' in methods:
            for k in broyden_iters:
                settings = config.broyden.model_copy(update={'max_iters': int(k)})
                attempt(i, lin, f"broyden-{k}", 'broyden', exact, settings)

    run = run_bpn(problem, config, state_widths=state_widths, output_dir=output_dir, observer=observer)
    if output_dir is not None:
        report.to_csv(Path(output_dir) / 'fidelity.csv')
    return report, run
