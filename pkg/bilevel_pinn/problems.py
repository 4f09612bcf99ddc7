"""
PDE-constrained optimization problems.

Each PdeProblem bundles the interior residual, the tagged boundary and
initial residuals, the objective functional, deterministic samplers for
collocation points, and a handle to an independent finite-difference
reference evaluator.
"""
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import autodiff as ad
from . import reference
from .autodiff import Tape, Var
from .errors import ControlFormatError, NumericFailure, ShapeMismatchError, TapeError
from .nets import Mlp, mlp_constant
from .reference import ControlGrid, GridAxis

log = logging.getLogger(__name__)

Sampler = Callable[[int, np.random.Generator], np.ndarray]

TOY_THETA0 = (0.5, 0.5)
HEAT_NU = 0.001
BURGERS_NU = 0.01
POISSON_HALF_WIDTH = 4.0
POISSON_CIRCLES = ((2.4, 2.4), (2.4, -2.4), (-2.4, 2.4), (-2.4, -2.4))
POISSON_CIRCLE_RADIUS = 0.8
POISSON_SOURCE_RADIUS = 1.6
POISSON_AREA = 64.0 - 4.0 * np.pi * POISSON_CIRCLE_RADIUS ** 2


# ===== Controls =====

@dataclass(frozen=True, eq=False)
class ControlParams:
    """A raw control vector, or the flat parameters of a control network."""
    values: np.ndarray
    net: Optional[Mlp] = None

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64).ravel()
        if self.net is not None and values.size != self.net.num_params:
            raise ShapeMismatchError(f"control length {values.size} != {self.net.num_params}")
        values.setflags(write=False)
        object.__setattr__(self, 'values', values)

    @property
    def kind(self) -> str:
        return 'mlp' if self.net is not None else 'vector'

    @property
    def dim(self) -> int:
        return self.values.size

    def with_values(self, values) -> 'ControlParams':
        return ControlParams(values, self.net)

    def field(self, s, theta=None):
        """Evaluate a network-valued control at coordinates s, shape (N,)."""
        if self.net is None:
            raise TypeError("a vector control has no field to evaluate")
        theta = self.values if theta is None else theta
        out = self.net.forward(s, theta)
        return ad.reshape(out, (-1,)) if isinstance(out, Var) else out.reshape(-1)


class FieldContext:
    """
    Evaluation context for residuals: the state network with weights w and
    the control with parameters theta, all recorded on one tape.
    """

    def __init__(self, state_net: Mlp, control: ControlParams, w=None, theta=None):
        self.state_net = state_net
        self.control = control
        self.w = state_net.params if w is None else w
        self.theta = control.values if theta is None else theta
        tapes = {id(v.tape): v.tape for v in (self.w, self.theta)
                 if isinstance(v, Var) and v.tape is not None}
        if len(tapes) > 1:
            raise TapeError("state and control parameters are recorded on different tapes")
        self.tape = next(iter(tapes.values())) if tapes else Tape()

    @property
    def recorded(self) -> bool:
        return isinstance(self.w, Var) or isinstance(self.theta, Var)

    def coords(self, pts: np.ndarray) -> Var:
        return self.tape.var(pts)

    def state(self, pts: np.ndarray) -> Var:
        return ad.reshape(self.state_net.forward(self.coords(pts), self.w), (-1,))

    def derivs(self, pts: np.ndarray, orders: Sequence[Sequence[int]]) -> List[Var]:
        return ad.spatial_derivs(self.state_net, self.coords(pts), orders, self.w)

    def control_field(self, s: np.ndarray) -> Var:
        return ad.as_var(self.control.field(s, self.theta))

    def theta_entry(self, i: int) -> Var:
        return ad.as_var(self.theta)[i]


# ===== Problem description =====

@dataclass(frozen=True)
class BoundaryTerm:
    """A boundary or initial residual tagged with the subset it applies to."""
    name: str
    sampler: Sampler
    residual: Callable[[FieldContext, np.ndarray], Var]


@dataclass(frozen=True)
class PdeProblem:
    """Residual operators, objective, samplers and reference evaluator of one problem."""
    name: str
    input_dim: int
    interior_sampler: Sampler
    interior_residual: Callable[[FieldContext, np.ndarray], Var]
    boundaries: Tuple[BoundaryTerm, ...]
    objective_sampler: Sampler
    objective_fn: Callable[[FieldContext, np.ndarray], Var]
    control_kind: str
    grid_axes: Tuple[GridAxis, ...]
    default_state_widths: Tuple[int, ...]
    default_control_widths: Optional[Tuple[int, ...]]
    initial_value: float
    reference_fn: Callable[[ControlGrid], float]
    contains: Callable[[np.ndarray], np.ndarray]
    metadata: Dict[str, object] = field(default_factory=dict)

    @property
    def grid_spec(self) -> str:
        return reference.format_grid_spec(self.grid_axes)

    def initial_control(self, seed: int = 0, widths: Optional[Sequence[int]] = None) -> ControlParams:
        """
        The documented initial guess.

        Args:
            seed: Seed for the hidden layers of a control network
            widths: Control network widths (defaults per problem)
        """
        if self.control_kind == 'vector':
            return ControlParams(np.array(self.metadata.get('theta0', TOY_THETA0), dtype=np.float64))
        widths = tuple(widths) if widths is not None else self.default_control_widths
        net = mlp_constant(widths, self.initial_value, seed)
        return ControlParams(net.params, net)

    def boundary(self, name: str) -> BoundaryTerm:
        for b in self.boundaries:
            if b.name == name:
                return b
        raise KeyError(name)


@dataclass(frozen=True)
class CollocationSet:
    """Collocation points for one evaluation of the losses."""
    interior: np.ndarray
    boundary: Dict[str, np.ndarray]
    objective: np.ndarray

    @property
    def total(self) -> int:
        return self.interior.shape[0] + sum(v.shape[0] for v in self.boundary.values())


def derive_seed(seed: int, *keys: int) -> int:
    """Independent child seed from a run seed and integer keys."""
    return int(np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in keys)).generate_state(1)[0])


def sample_collocation(problem: PdeProblem, n_interior: int, n_boundary: int, seed: int,
                       n_objective: Optional[int] = None) -> CollocationSet:
    """
    Draw uniform collocation points; deterministic in seed.

    Args:
        problem: Problem to sample for
        n_interior: Interior point count
        n_boundary: Point count per boundary segment
        seed: Seed; each subset gets its own derived stream
        n_objective: Objective point count (defaults to n_interior)

    Returns:
        CollocationSet
    """
    if n_interior <= 0 or n_boundary <= 0:
        raise ValueError("collocation counts must be positive")
    n_objective = n_interior if n_objective is None else n_objective
    interior = problem.interior_sampler(n_interior, np.random.default_rng(derive_seed(seed, 0)))
    boundary = {
        b.name: b.sampler(n_boundary, np.random.default_rng(derive_seed(seed, 1, k)))
        for k, b in enumerate(problem.boundaries)
    }
    objective = problem.objective_sampler(n_objective, np.random.default_rng(derive_seed(seed, 2)))
    return CollocationSet(interior, boundary, objective)


# ===== Losses =====

def _check_finite(value: Var, what: str):
    if np.all(np.isfinite(value.value)):
        return
    if value.tape is not None and value.index is not None:
        value.tape._raise_first_nonfinite(value.index)
    raise NumericFailure(-1, what, f"non-finite {what}")


def _mean_square(r: Var) -> Var:
    return ad.vsum(r * r) * (1.0 / r.size)


def pde_loss_var(problem: PdeProblem, ctx: FieldContext, points: CollocationSet,
                 interior_weight: float = 1.0, boundary_weight: float = 1.0) -> Var:
    """Recorded inner loss: weighted mean squared interior and boundary residuals."""
    total = Var(0.0)
    if points.interior.shape[0] > 0:
        total = total + interior_weight * _mean_square(problem.interior_residual(ctx, points.interior))
    for b in problem.boundaries:
        pts = points.boundary.get(b.name)
        if pts is None or pts.shape[0] == 0:
            continue
        total = total + boundary_weight * _mean_square(b.residual(ctx, pts))
    _check_finite(total, 'pde_loss')
    return total


def objective_var(problem: PdeProblem, ctx: FieldContext, points: CollocationSet) -> Var:
    """Recorded Monte-Carlo estimate of the objective functional."""
    if points.objective.shape[0] == 0:
        return Var(0.0)
    value = problem.objective_fn(ctx, points.objective)
    _check_finite(value, 'objective')
    return value


def _unwrap(value: Var, ctx: FieldContext):
    return value if ctx.recorded else float(value.value)


def pde_loss(problem: PdeProblem, state_net: Mlp, control: ControlParams, points: CollocationSet,
             w=None, theta=None, interior_weight: float = 1.0, boundary_weight: float = 1.0):
    """
    Inner loss E = mean |F|^2 + sum over boundary terms of mean |B|^2.

    Args:
        problem: Problem definition
        state_net: State network (architecture, and weights when w is None)
        control: Control parameters
        points: Collocation points
        w: Optional state weights, an array or a recorded Var
        theta: Optional control parameters, an array or a recorded Var
        interior_weight: Weight of the interior term
        boundary_weight: Weight of every boundary term

    Returns:
        float, or a recorded scalar Var when w or theta is a Var
    """
    ctx = FieldContext(state_net, control, w, theta)
    return _unwrap(pde_loss_var(problem, ctx, points, interior_weight, boundary_weight), ctx)


def objective(problem: PdeProblem, state_net: Mlp, control: ControlParams, points: CollocationSet,
              w=None, theta=None):
    """Discretized objective J; float, or a recorded Var when w or theta is a Var."""
    ctx = FieldContext(state_net, control, w, theta)
    return _unwrap(objective_var(problem, ctx, points), ctx)


# ===== Poisson 1d toy =====

def toy_exact_state(theta, x) -> np.ndarray:
    theta = np.asarray(theta, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    return x ** 2 + (theta[1] - theta[0] - 1.0) * x + theta[0]


def toy_exact_objective(theta) -> float:
    t0, t1 = np.asarray(theta, dtype=np.float64)
    return float((t0 ** 2 + t1 ** 2 + t1 * t0 - 2.0 * t1 - t0 + 1.0) / 3.0)


def exact_hypergrad_toy(theta) -> np.ndarray:
    """Analytic gradient of the toy objective with respect to the boundary values."""
    t0, t1 = np.asarray(theta, dtype=np.float64)
    return np.array([2.0 * t0 + t1 - 1.0, t0 + 2.0 * t1 - 2.0]) / 3.0


def _unit_interval(n, rng):
    return rng.uniform(0.0, 1.0, size=(n, 1))


def _toy_interior(ctx, pts):
    (u_xx,) = ctx.derivs(pts, [(2,)])
    return u_xx - 2.0


def _toy_point(x0):
    def sampler(n, rng):
        return np.full((1, 1), x0)
    return sampler


def _toy_left(ctx, pts):
    return ctx.state(pts) - ctx.theta_entry(0)


def _toy_right(ctx, pts):
    return ctx.state(pts) - ctx.theta_entry(1)


def _toy_objective(ctx, pts):
    r = ctx.state(pts) - pts[:, 0] ** 2
    return _mean_square(r)


def _toy_reference(grid: ControlGrid) -> float:
    return toy_exact_objective(grid.values)


def make_poisson1d_toy(theta0: Sequence[float] = TOY_THETA0) -> PdeProblem:
    """u'' = 2 on (0, 1) with u(0) = theta_0, u(1) = theta_1; J = int (u - x^2)^2."""
    return PdeProblem(
        name='poisson1d',
        input_dim=1,
        interior_sampler=_unit_interval,
        interior_residual=_toy_interior,
        boundaries=(
            BoundaryTerm('left', _toy_point(0.0), _toy_left),
            BoundaryTerm('right', _toy_point(1.0), _toy_right),
        ),
        objective_sampler=_unit_interval,
        objective_fn=_toy_objective,
        control_kind='vector',
        grid_axes=(GridAxis('theta', 0.0, 1.0, 2),),
        default_state_widths=(1, 16, 16, 1),
        default_control_widths=None,
        initial_value=0.0,
        reference_fn=_toy_reference,
        contains=lambda p: (p[:, 0] >= 0.0) & (p[:, 0] <= 1.0),
        metadata={'theta0': tuple(float(t) for t in theta0)},
    )


# ===== Poisson 2d on a complex geometry =====

def poisson_in_domain(p: np.ndarray) -> np.ndarray:
    inside_square = np.all(np.abs(p) <= POISSON_HALF_WIDTH, axis=1)
    outside_circles = np.ones(p.shape[0], dtype=bool)
    for cx, cy in POISSON_CIRCLES:
        d2 = (p[:, 0] - cx) ** 2 + (p[:, 1] - cy) ** 2
        outside_circles &= d2 > POISSON_CIRCLE_RADIUS ** 2
    return inside_square & outside_circles


def poisson_source_indicator(p: np.ndarray) -> np.ndarray:
    return (p[:, 0] ** 2 + p[:, 1] ** 2 <= POISSON_SOURCE_RADIUS ** 2).astype(np.float64)


def _poisson_interior_points(n, rng):
    out = np.empty((0, 2))
    while out.shape[0] < n:
        batch = rng.uniform(-POISSON_HALF_WIDTH, POISSON_HALF_WIDTH, size=(2 * n, 2))
        out = np.concatenate([out, batch[poisson_in_domain(batch)]])
    return out[:n]


def _poisson_outer_points(n, rng):
    side = rng.integers(0, 4, size=n)
    s = rng.uniform(-POISSON_HALF_WIDTH, POISSON_HALF_WIDTH, size=n)
    h = POISSON_HALF_WIDTH
    x = np.select([side == 0, side == 1, side == 2], [np.full(n, -h), np.full(n, h), s], s)
    y = np.select([side == 0, side == 1, side == 2], [s, s, np.full(n, -h)], np.full(n, h))
    return np.stack([x, y], axis=1)


def _poisson_circle_points(n, rng):
    centers = np.array(POISSON_CIRCLES)[rng.integers(0, len(POISSON_CIRCLES), size=n)]
    angle = rng.uniform(0.0, 2.0 * np.pi, size=n)
    return centers + POISSON_CIRCLE_RADIUS * np.stack([np.cos(angle), np.sin(angle)], axis=1)


def _poisson_interior(ctx, pts):
    u_xx, u_yy = ctx.derivs(pts, [(2, 0), (0, 2)])
    source = ctx.control_field(pts) * poisson_source_indicator(pts)
    return u_xx + u_yy + source


def _poisson_outer(ctx, pts):
    return ctx.state(pts) - 1.0


def _poisson_circles(ctx, pts):
    return ctx.state(pts)


def _poisson_objective(ctx, pts):
    return _mean_square(ctx.state(pts) - 1.0)


def _poisson_reference(grid: ControlGrid) -> float:
    return reference.solve_poisson2d_cg(grid.interpolator())


def make_poisson2d_cg(initial_source: float = 0.0) -> PdeProblem:
    """Laplace(u) = -f 1{|x| <= 1.6} on [-4, 4]^2 minus four discs; J = mean |u - 1|^2."""
    r = POISSON_SOURCE_RADIUS
    return PdeProblem(
        name='poisson2d_cg',
        input_dim=2,
        interior_sampler=_poisson_interior_points,
        interior_residual=_poisson_interior,
        boundaries=(
            BoundaryTerm('outer', _poisson_outer_points, _poisson_outer),
            BoundaryTerm('circles', _poisson_circle_points, _poisson_circles),
        ),
        objective_sampler=_poisson_interior_points,
        objective_fn=_poisson_objective,
        control_kind='mlp',
        grid_axes=(GridAxis('x', -r, r, 65), GridAxis('y', -r, r, 65)),
        default_state_widths=(2, 32, 32, 32, 1),
        default_control_widths=(2, 16, 16, 1),
        initial_value=initial_source,
        reference_fn=_poisson_reference,
        contains=poisson_in_domain,
    )


# ===== Heat 2d with a time-distributed source =====

def heat2d_target(x, y, t):
    return 32.0 * x * (1.0 - x) * y * (1.0 - y) * np.sin(np.pi * t)


def _heat_interior_points(n, rng):
    return np.column_stack([rng.uniform(0.0, 1.0, size=(n, 2)), rng.uniform(0.0, 2.0, size=n)])


def _heat_wall_points(n, rng):
    side = rng.integers(0, 4, size=n)
    s = rng.uniform(0.0, 1.0, size=n)
    fixed = (side % 2).astype(np.float64)
    x = np.where(side < 2, fixed, s)
    y = np.where(side < 2, s, fixed)
    return np.column_stack([x, y, rng.uniform(0.0, 2.0, size=n)])


def _heat_initial_points(n, rng):
    return np.column_stack([rng.uniform(0.0, 1.0, size=(n, 2)), np.zeros(n)])


def make_heat2d(target: Optional[Callable] = None, nu: float = HEAT_NU,
                initial_forcing: float = 0.1) -> PdeProblem:
    """
    u_t - nu Laplace(u) = f(t) on [0, 1]^2 x [0, 2] with zero boundary and
    initial data; J = 1/2 int |u - target|^2.

    Args:
        target: Replacement target field target(x, y, t)
        nu: Diffusion coefficient
        initial_forcing: Constant value of the initial control
    """
    target = heat2d_target if target is None else target

    def interior(ctx, pts):
        u_xx, u_yy, u_t = ctx.derivs(pts, [(2, 0, 0), (0, 2, 0), (0, 0, 1)])
        return u_t - nu * (u_xx + u_yy) - ctx.control_field(pts[:, 2:3])

    def zero(ctx, pts):
        return ctx.state(pts)

    def objective_fn(ctx, pts):
        # 1/2 * |[0,1]^2 x [0,2]| = 1
        return _mean_square(ctx.state(pts) - target(pts[:, 0], pts[:, 1], pts[:, 2]))

    def reference_fn(grid):
        return reference.solve_heat2d(grid.interpolator(), target, nu=nu)

    return PdeProblem(
        name='heat2d',
        input_dim=3,
        interior_sampler=_heat_interior_points,
        interior_residual=interior,
        boundaries=(
            BoundaryTerm('walls', _heat_wall_points, zero),
            BoundaryTerm('initial', _heat_initial_points, zero),
        ),
        objective_sampler=_heat_interior_points,
        objective_fn=objective_fn,
        control_kind='mlp',
        grid_axes=(GridAxis('t', 0.0, 2.0, 201),),
        default_state_widths=(3, 32, 32, 32, 1),
        default_control_widths=(1, 16, 16, 1),
        initial_value=initial_forcing,
        reference_fn=reference_fn,
        contains=lambda p: np.all((p[:, :2] >= 0) & (p[:, :2] <= 1), axis=1) & (p[:, 2] >= 0) & (p[:, 2] <= 2),
        metadata={'target': target, 'nu': nu},
    )


# ===== Burgers 1d with a time-distributed source =====

def burgers_initial(x):
    return np.sin(np.pi * x) * np.exp(-2.0 * x ** 2)


def burgers_target(x):
    return np.exp(-(x - 0.5) ** 2) - np.exp(-(x + 0.5) ** 2)


def _burgers_interior_points(n, rng):
    return np.column_stack([rng.uniform(-1.0, 1.0, size=n), rng.uniform(0.0, 1.0, size=n)])


def _burgers_wall_points(n, rng):
    return np.column_stack([rng.choice([-1.0, 1.0], size=n), rng.uniform(0.0, 1.0, size=n)])


def _burgers_initial_points(n, rng):
    return np.column_stack([rng.uniform(-1.0, 1.0, size=n), np.zeros(n)])


def _burgers_final_points(n, rng):
    return np.column_stack([rng.uniform(-1.0, 1.0, size=n), np.ones(n)])


def make_burgers1d(nu: float = BURGERS_NU, initial_forcing: float = 0.0) -> PdeProblem:
    """u_t + u u_x - nu u_xx = f(t) on [-1, 1] x [0, 1]; J = int |u(x, 1) - target|^2 dx."""

    def interior(ctx, pts):
        u, u_x, u_xx, u_t = ctx.derivs(pts, [(0, 0), (1, 0), (2, 0), (0, 1)])
        return u_t + u * u_x - nu * u_xx - ctx.control_field(pts[:, 1:2])

    def walls(ctx, pts):
        return ctx.state(pts)

    def initial(ctx, pts):
        return ctx.state(pts) - burgers_initial(pts[:, 0])

    def objective_fn(ctx, pts):
        # |[-1, 1]| = 2
        return 2.0 * _mean_square(ctx.state(pts) - burgers_target(pts[:, 0]))

    def reference_fn(grid):
        return reference.solve_burgers1d(grid.interpolator(), burgers_initial, burgers_target, nu=nu)

    return PdeProblem(
        name='burgers1d',
        input_dim=2,
        interior_sampler=_burgers_interior_points,
        interior_residual=interior,
        boundaries=(
            BoundaryTerm('walls', _burgers_wall_points, walls),
            BoundaryTerm('initial', _burgers_initial_points, initial),
        ),
        objective_sampler=_burgers_final_points,
        objective_fn=objective_fn,
        control_kind='mlp',
        grid_axes=(GridAxis('t', 0.0, 1.0, 201),),
        default_state_widths=(2, 32, 32, 32, 1),
        default_control_widths=(1, 16, 16, 1),
        initial_value=initial_forcing,
        reference_fn=reference_fn,
        contains=lambda p: (np.abs(p[:, 0]) <= 1) & (p[:, 1] >= 0) & (p[:, 1] <= 1),
        metadata={'nu': nu},
    )


PROBLEMS: Dict[str, Callable[[], PdeProblem]] = {
    'poisson1d': make_poisson1d_toy,
    'poisson2d_cg': make_poisson2d_cg,
    'heat2d': make_heat2d,
    'burgers1d': make_burgers1d,
}


def get_problem(name: str) -> PdeProblem:
    """Build a problem by name."""
    if name not in PROBLEMS:
        raise ValueError(f"unknown problem '{name}'; expected one of {sorted(PROBLEMS)}")
    return PROBLEMS[name]()


# ===== Control export and reference evaluation =====

def export_control_grid(problem: PdeProblem, control: ControlParams) -> ControlGrid:
    """
    Sample the control on the problem's documented uniform grid.

    Vector controls are exported as-is; network controls are evaluated at
    every grid node (C order over the listed axes).
    """
    if control.kind == 'vector':
        if control.dim != problem.grid_axes[0].count:
            raise ControlFormatError(
                f"{problem.name} expects {problem.grid_axes[0].count} control values, got {control.dim}")
        return ControlGrid(problem.name, problem.grid_axes, control.values.copy())
    nodes = reference.grid_nodes(problem.grid_axes)
    return ControlGrid(problem.name, problem.grid_axes, control.field(nodes))


def reference_evaluate(problem: PdeProblem, control: Union[ControlParams, ControlGrid]) -> float:
    """
    Objective of a control computed by the problem's independent reference solver.

    Args:
        problem: Problem definition
        control: Control parameters, or a control grid read from CSV

    Returns:
        Reference objective value
    """
    grid = control if isinstance(control, ControlGrid) else export_control_grid(problem, control)
    if grid.problem != problem.name:
        raise ControlFormatError(f"control grid is for '{grid.problem}', not '{problem.name}'")
    if reference.format_grid_spec(grid.axes) != problem.grid_spec:
        raise ControlFormatError(
            f"grid '{reference.format_grid_spec(grid.axes)}' does not match '{problem.grid_spec}'")
    value = problem.reference_fn(grid)
    log.debug(f"[REF] {problem.name}: J_ref = {value:.6g}")
    return value


def heat2d_objective_conventions(problem: PdeProblem, control: Union[ControlParams, ControlGrid]) -> Dict[str, float]:
    """Heat 2d reference objective with and without the 1/2 factor."""
    if problem.name != 'heat2d':
        raise ValueError("objective conventions are only reported for heat2d")
    half = reference_evaluate(problem, control)
    return {'half': half, 'full': 2.0 * half}
