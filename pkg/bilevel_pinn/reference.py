"""
Independent finite-difference reference evaluators and the control-grid format.

The solvers never see a state network: they consume the control sampled on
a uniform grid (piecewise-linear in between) and return the objective.
"""
import csv
import logging
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence, Tuple, Union

import numpy as np
from scipy import sparse
from scipy.integrate import trapezoid
from scipy.interpolate import RegularGridInterpolator
from scipy.sparse.linalg import spsolve, splu

from .errors import ControlFormatError, SolverDivergence
from .io_utils import write_csv

log = logging.getLogger(__name__)

HEADER_RE = re.compile(r'^#\s*problem=(\S+)\s+grid=(\S+)\s*$')


# ===== Control grids =====

@dataclass(frozen=True)
class GridAxis:
    """One axis of a uniform control grid; the 'theta' axis indexes a raw vector."""
    name: str
    lo: float
    hi: float
    count: int

    def nodes(self) -> np.ndarray:
        if self.name == 'theta':
            return np.arange(self.count, dtype=np.float64)
        return np.linspace(self.lo, self.hi, self.count)

    def spec(self) -> str:
        if self.name == 'theta':
            return f"theta:{self.count}"
        return f"{self.name}:{self.lo:g}:{self.hi:g}:{self.count}"


def format_grid_spec(axes: Sequence[GridAxis]) -> str:
    return ','.join(a.spec() for a in axes)


def parse_grid_spec(spec: str) -> Tuple[GridAxis, ...]:
    """Parse 'name:lo:hi:count[,...]' or 'theta:count'."""
    axes = []
    for part in spec.split(','):
        fields = part.split(':')
        try:
            if len(fields) == 2 and fields[0] == 'theta':
                axes.append(GridAxis('theta', 0.0, 1.0, int(fields[1])))
            elif len(fields) == 4:
                axes.append(GridAxis(fields[0], float(fields[1]), float(fields[2]), int(fields[3])))
            else:
                raise ValueError(part)
        except ValueError:
            raise ControlFormatError(f"malformed grid spec '{spec}'") from None
        if axes[-1].count < 2 and axes[-1].name != 'theta':
            raise ControlFormatError(f"grid axis '{axes[-1].name}' needs at least 2 nodes")
    return tuple(axes)


def grid_nodes(axes: Sequence[GridAxis]) -> np.ndarray:
    """All grid nodes in C order, shape (N, len(axes))."""
    mesh = np.meshgrid(*[a.nodes() for a in axes], indexing='ij')
    return np.stack([m.ravel() for m in mesh], axis=1)


@dataclass(frozen=True, eq=False)
class ControlGrid:
    """Control values sampled on a uniform grid."""
    problem: str
    axes: Tuple[GridAxis, ...]
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64).ravel()
        expected = int(np.prod([a.count for a in self.axes]))
        if values.size != expected:
            raise ControlFormatError(f"grid has {expected} nodes but {values.size} values")
        object.__setattr__(self, 'axes', tuple(self.axes))
        object.__setattr__(self, 'values', values)

    @property
    def spec(self) -> str:
        return format_grid_spec(self.axes)

    def interpolator(self) -> Callable:
        """
        Piecewise-linear interpolant of the grid values.

        One axis: f(t) for scalar or array t (constant extension beyond the
        ends). Two axes: f(points) for points of shape (N, 2), zero outside.
        """
        if len(self.axes) == 1:
            nodes = self.axes[0].nodes()
            values = self.values
            return lambda t: np.interp(t, nodes, values)
        rgi = RegularGridInterpolator(
            tuple(a.nodes() for a in self.axes),
            self.values.reshape([a.count for a in self.axes]),
            method='linear', bounds_error=False, fill_value=0.0)
        return lambda pts: rgi(np.asarray(pts, dtype=np.float64))


def write_control_csv(grid: ControlGrid, path: Union[str, Path]) -> Path:
    """Write a control grid as CSV with a '# problem=<name> grid=<spec>' header."""
    nodes = grid_nodes(grid.axes)
    columns = [a.name for a in grid.axes] + ['value']
    rows = ([*map(float, node), float(v)] for node, v in zip(nodes, grid.values))
    return write_csv(path, columns, rows, preamble=[f"problem={grid.problem} grid={grid.spec}"])


def read_control_csv(path: Union[str, Path]) -> ControlGrid:
    """Parse a control-grid CSV; any deviation from the format raises ControlFormatError."""
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise ControlFormatError(f"{path}: empty control file")
    m = HEADER_RE.match(lines[0])
    if not m:
        raise ControlFormatError(f"{path}: malformed header '{lines[0]}'")
    problem, spec = m.group(1), m.group(2)
    axes = parse_grid_spec(spec)
    reader = csv.reader(lines[1:])
    try:
        columns = next(reader)
    except StopIteration:
        raise ControlFormatError(f"{path}: missing column header") from None
    expected_columns = [a.name for a in axes] + ['value']
    if [c.strip() for c in columns] != expected_columns:
        raise ControlFormatError(f"{path}: columns {columns} != {expected_columns}")
    nodes = grid_nodes(axes)
    values = []
    for row_no, row in enumerate(reader, start=3):
        if not row:
            continue
        if len(row) != len(expected_columns):
            raise ControlFormatError(f"{path}: line {row_no}: expected {len(expected_columns)} fields")
        try:
            numbers = [float(v) for v in row]
        except ValueError:
            raise ControlFormatError(f"{path}: line {row_no}: non-numeric field") from None
        k = len(values)
        if k >= len(nodes) or not np.allclose(numbers[:-1], nodes[k], atol=1e-9):
            raise ControlFormatError(f"{path}: line {row_no}: coordinates do not match grid '{spec}'")
        if not np.isfinite(numbers[-1]):
            raise ControlFormatError(f"{path}: line {row_no}: non-finite value")
        values.append(numbers[-1])
    if len(values) != len(nodes):
        raise ControlFormatError(f"{path}: {len(values)} rows for a grid of {len(nodes)} nodes")
    return ControlGrid(problem, axes, np.array(values))


# ===== Heat 2d: Crank-Nicolson =====

def laplacian_1d(m: int, h: float) -> sparse.csr_matrix:
    """Second-difference matrix on m interior nodes with homogeneous Dirichlet ends."""
    return sparse.diags([1.0, -2.0, 1.0], [-1, 0, 1], shape=(m, m), format='csr') / h ** 2


def solve_heat2d(forcing: Callable, target: Callable, nu: float = 0.001, n: int = 64,
                 steps: int = 400, t_final: float = 2.0) -> float:
    """
    Crank-Nicolson solve of u_t - nu Laplace(u) = f(t) on the unit square.

    Args:
        forcing: f(t)
        target: Target field target(x, y, t)
        nu: Diffusion coefficient
        n: Grid intervals per side
        steps: Time steps
        t_final: End time

    Returns:
        1/2 of the space-time integral of (u - target)^2
    """
    h = 1.0 / n
    m = n - 1
    xs = np.arange(1, n) * h
    X, Y = (a.ravel() for a in np.meshgrid(xs, xs, indexing='ij'))
    L1 = laplacian_1d(m, h)
    I1 = sparse.identity(m, format='csr')
    L = sparse.kron(I1, L1) + sparse.kron(L1, I1)
    I = sparse.identity(m * m, format='csr')
    dt = t_final / steps
    lhs = splu((I - 0.5 * dt * nu * L).tocsc())
    rhs_op = (I + 0.5 * dt * nu * L).tocsr()

    u = np.zeros(m * m)
    errors = np.empty(steps + 1)
    errors[0] = np.sum((u - target(X, Y, 0.0)) ** 2) * h * h
    for k in range(1, steps + 1):
        t0, t1 = (k - 1) * dt, k * dt
        u = lhs.solve(rhs_op @ u + dt * 0.5 * (float(forcing(t0)) + float(forcing(t1))))
        errors[k] = np.sum((u - target(X, Y, t1)) ** 2) * h * h
    if not np.all(np.isfinite(errors)):
        raise SolverDivergence('heat2d', "non-finite state")
    value = 0.5 * float(trapezoid(errors, dx=dt))
    log.debug(f"[REF] heat2d n={n} steps={steps}: J = {value:.6g}")
    return value


# ===== Burgers 1d: explicit advection, implicit diffusion =====

def solve_burgers1d(forcing: Callable, initial: Callable, target: Callable, nu: float = 0.01,
                    nodes: int = 512, steps: int = 2000, t_final: float = 1.0) -> float:
    """
    Semi-implicit solve of u_t + (u^2/2)_x - nu u_xx = f(t) on [-1, 1] with zero ends.

    Advection uses central differences of the flux, explicit in time; diffusion
    is backward Euler.

    Returns:
        Integral over x of (u(x, t_final) - target(x))^2
    """
    x = np.linspace(-1.0, 1.0, nodes)
    dx = x[1] - x[0]
    dt = t_final / steps
    m = nodes - 2
    lhs = splu((sparse.identity(m, format='csc') - dt * nu * laplacian_1d(m, dx)).tocsc())

    u = np.asarray(initial(x), dtype=np.float64).copy()
    u[0] = u[-1] = 0.0
    for k in range(1, steps + 1):
        peak = np.max(np.abs(u))
        if not np.isfinite(peak):
            raise SolverDivergence('burgers1d', f"non-finite state at step {k}")
        if peak * dt / dx > 1.0:
            raise SolverDivergence('burgers1d', f"CFL number {peak * dt / dx:.3g} > 1 at step {k}")
        flux = 0.5 * u * u
        advection = (flux[2:] - flux[:-2]) / (2.0 * dx)
        rhs = u[1:-1] - dt * advection + dt * float(forcing(k * dt))
        u[1:-1] = lhs.solve(rhs)
    value = float(trapezoid((u - target(x)) ** 2, x))
    log.debug(f"[REF] burgers1d nodes={nodes} steps={steps}: J = {value:.6g}")
    return value


# ===== Poisson 2d on a masked grid =====

def solve_poisson2d_cg(source: Callable, n: int = 256, half_width: float = 4.0,
                       circles: Sequence[Tuple[float, float]] = ((2.4, 2.4), (2.4, -2.4), (-2.4, 2.4), (-2.4, -2.4)),
                       radius: float = 0.8, source_radius: float = 1.6) -> float:
    """
    Five-point solve of Laplace(u) = -f 1{|x| <= source_radius} on a square minus discs.

    Nodes inside a disc are held at 0 and nodes on the square's edge at 1.

    Args:
        source: f(points) for points of shape (N, 2)
        n: Grid nodes per side

    Returns:
        (1/|Omega|) * integral of (u - 1)^2 with |Omega| computed analytically
    """
    xs = np.linspace(-half_width, half_width, n)
    h = xs[1] - xs[0]
    X, Y = np.meshgrid(xs, xs, indexing='ij')
    in_disc = np.zeros_like(X, dtype=bool)
    for cx, cy in circles:
        in_disc |= (X - cx) ** 2 + (Y - cy) ** 2 <= radius ** 2
    edge = np.zeros_like(in_disc)
    edge[0, :] = edge[-1, :] = edge[:, 0] = edge[:, -1] = True
    unknown = ~in_disc & ~edge

    fixed = np.where(edge, 1.0, 0.0)
    index = -np.ones(X.shape, dtype=np.int64)
    index[unknown] = np.arange(np.count_nonzero(unknown))
    ui, uj = np.nonzero(unknown)
    centre = index[ui, uj]

    pts = np.column_stack([X[unknown], Y[unknown]])
    chi = (pts[:, 0] ** 2 + pts[:, 1] ** 2 <= source_radius ** 2)
    rhs = np.zeros(centre.size)
    if np.any(chi):
        rhs[chi] = h * h * np.asarray(source(pts[chi]), dtype=np.float64)

    rows, cols, vals = [centre], [centre], [np.full(centre.size, 4.0)]
    for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1)):
        ni, nj = ui + di, uj + dj
        neighbour = index[ni, nj]
        inner = neighbour >= 0
        rows.append(centre[inner])
        cols.append(neighbour[inner])
        vals.append(np.full(np.count_nonzero(inner), -1.0))
        rhs[~inner] += fixed[ni[~inner], nj[~inner]]
    A = sparse.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                          shape=(centre.size, centre.size)).tocsr()
    u = spsolve(A, rhs)
    if not np.all(np.isfinite(u)):
        raise SolverDivergence('poisson2d_cg', "non-finite solution")
    area = (2.0 * half_width) ** 2 - len(circles) * np.pi * radius ** 2
    # Edge nodes sit at u = 1 and contribute nothing.
    value = float(np.sum((u - 1.0) ** 2) * h * h / area)
    log.debug(f"[REF] poisson2d_cg n={n}: J = {value:.6g}")
    return value
