"""
Reverse-mode automatic differentiation with differentiable derivatives.

Operations on Var objects are recorded on a Tape. A backward sweep over the
tape can itself be recorded (``create_graph=True``), which is how gradients
of gradients, Hessian-vector products and mixed second derivatives are
obtained. Nodes carry a ``level``: primal operations are level 0 and every
recorded backward sweep adds one.
"""
import logging
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import opt_einsum as oe

from .errors import NumericFailure, TapeError, UnsupportedOrderError

log = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, float, int]


@dataclass
class Node:
    """One recorded operation."""
    op: str
    parents: Tuple['Var', ...]
    vjp: Optional[Callable[['Var', int], 'Var']]
    level: int


class Tape:
    """Topologically ordered record of operations."""

    def __init__(self):
        self.nodes: List[Node] = []
        self.recording = True
        self._level = 0

    @property
    def depth(self) -> int:
        """Highest derivative level recorded so far."""
        return max((node.level for node in self.nodes), default=0)

    def __len__(self) -> int:
        return len(self.nodes)

    def var(self, value: ArrayLike) -> 'Var':
        """Create a leaf variable on this tape."""
        return self._push('leaf', np.array(value, dtype=np.float64), (), None)

    def _push(self, op, value, parents, vjp) -> 'Var':
        self.nodes.append(Node(op, tuple(parents), vjp, self._level))
        return Var(value, self, len(self.nodes) - 1)

    @contextmanager
    def paused(self):
        """Evaluate operations without recording them."""
        previous = self.recording
        self.recording = False
        try:
            yield self
        finally:
            self.recording = previous

    @contextmanager
    def _sweep_level(self, level: int):
        previous = self._level
        self._level = level
        try:
            yield self
        finally:
            self._level = previous

    def gradient(self, output: 'Var', inputs: Sequence['Var'],
                 create_graph: bool = False) -> List['Var']:
        """
        Differentiate a scalar output with respect to leaf or interior variables.

        Args:
            output: Scalar variable recorded on this tape
            inputs: Variables to differentiate against
            create_graph: Record the sweep so the results are differentiable

        Returns:
            One Var per input, shaped like the input
        """
        output = as_var(output)
        if output.size != 1:
            raise TapeError(f"gradient target must be scalar, got shape {output.shape}")
        for v in (output, *inputs):
            if v.tape is not None and v.tape is not self:
                raise TapeError("variable belongs to a different tape")

        results: Dict[int, Var] = {}
        zeros = [Var(np.zeros_like(v.value)) for v in inputs]
        if output.index is None:
            return zeros

        if not np.all(np.isfinite(output.value)):
            self._raise_first_nonfinite(output.index)

        wanted = {v.index for v in inputs if v.index is not None}
        end = output.index + 1
        relevant = np.zeros(end, dtype=bool)
        max_level = 0
        for i in range(end):
            node = self.nodes[i]
            max_level = max(max_level, node.level)
            if i in wanted:
                relevant[i] = True
                continue
            for p in node.parents:
                if p.index is not None and p.index < end and relevant[p.index]:
                    relevant[i] = True
                    break

        cotangents: Dict[int, Var] = {output.index: Var(np.ones_like(output.value))}
        context = self._sweep_level(max_level + 1) if create_graph else self.paused()
        with context:
            for i in range(output.index, -1, -1):
                g = cotangents.pop(i, None)
                if g is None:
                    continue
                node = self.nodes[i]
                if not np.all(np.isfinite(g.value)):
                    raise NumericFailure(i, node.op, "non-finite cotangent")
                if i in wanted:
                    results[i] = g
                for k, parent in enumerate(node.parents):
                    if parent.index is None or not relevant[parent.index]:
                        continue
                    contribution = node.vjp(g, k)
                    previous = cotangents.get(parent.index)
                    cotangents[parent.index] = contribution if previous is None else previous + contribution

        out = []
        for v, zero in zip(inputs, zeros):
            g = results.get(v.index) if v.index is not None else None
            out.append(zero if g is None else g)
        return out

    def _raise_first_nonfinite(self, end: int):
        # Leaf values are unknown here, so scan the recorded parents.
        for i in range(end + 1):
            node = self.nodes[i]
            for p in node.parents:
                if p.index is not None and not np.all(np.isfinite(p.value)):
                    raise NumericFailure(p.index, self.nodes[p.index].op)
        raise NumericFailure(end, self.nodes[end].op)


class Var:
    """Differentiable array value, optionally recorded on a Tape."""

    __array_ufunc__ = None

    def __init__(self, value: ArrayLike, tape: Optional[Tape] = None, index: Optional[int] = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.tape = tape
        self.index = index

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def size(self) -> int:
        return self.value.size

    @property
    def T(self) -> 'Var':
        return transpose(self)

    def __repr__(self):
        where = f"node {self.index}" if self.index is not None else "constant"
        return f"Var(shape={self.shape}, {where})"

    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return neg(self)
    def __pow__(self, p): return power(self, p)
    def __matmul__(self, other): return matmul(self, other)
    def __rmatmul__(self, other): return matmul(other, self)
    def __getitem__(self, idx): return getitem(self, idx)

    def sum(self, axis=None, keepdims=False) -> 'Var':
        return vsum(self, axis, keepdims)

    def mean(self, axis=None) -> 'Var':
        count = self.size if axis is None else self.shape[axis]
        return vsum(self, axis) * (1.0 / max(count, 1))

    def reshape(self, *shape) -> 'Var':
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def tanh(self) -> 'Var':
        return tanh(self)


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def _record(op: str, value: np.ndarray, parents: Sequence[Var], vjp) -> Var:
    tape = None
    for p in parents:
        if p.tape is None:
            continue
        if tape is None:
            tape = p.tape
        elif p.tape is not tape:
            raise TapeError(f"cross-tape arithmetic in '{op}'")
    if tape is None or not tape.recording:
        return Var(value)
    return tape._push(op, value, parents, vjp)


def _unbroadcast(g: Var, shape: Tuple[int, ...]) -> Var:
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = vsum(g, tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = vsum(g, axes, keepdims=True)
    return g


# ===== Elementwise =====

def add(a, b) -> Var:
    a, b = as_var(a), as_var(b)

    def vjp(g, k):
        return _unbroadcast(g, (a if k == 0 else b).shape)
    return _record('add', a.value + b.value, (a, b), vjp)


def sub(a, b) -> Var:
    a, b = as_var(a), as_var(b)

    def vjp(g, k):
        return _unbroadcast(g, a.shape) if k == 0 else _unbroadcast(neg(g), b.shape)
    return _record('sub', a.value - b.value, (a, b), vjp)


def mul(a, b) -> Var:
    a, b = as_var(a), as_var(b)

    def vjp(g, k):
        return _unbroadcast(g * b, a.shape) if k == 0 else _unbroadcast(g * a, b.shape)
    return _record('mul', a.value * b.value, (a, b), vjp)


def div(a, b) -> Var:
    a, b = as_var(a), as_var(b)

    def vjp(g, k):
        if k == 0:
            return _unbroadcast(g / b, a.shape)
        return _unbroadcast(neg(g * a) / (b * b), b.shape)
    with np.errstate(divide='ignore', invalid='ignore'):
        value = a.value / b.value
    return _record('div', value, (a, b), vjp)


def neg(a) -> Var:
    a = as_var(a)
    return _record('neg', -a.value, (a,), lambda g, k: neg(g))


def power(a, p: float) -> Var:
    """Elementwise power with a constant exponent."""
    a = as_var(a)
    if isinstance(p, Var):
        raise TapeError("power only supports constant exponents")
    p = float(p)
    if p == 1.0:
        return a

    def vjp(g, k):
        return g * (p * power(a, p - 1.0))
    with np.errstate(divide='ignore', invalid='ignore'):
        value = a.value ** p
    return _record('pow', value, (a,), vjp)


def tanh(a) -> Var:
    a = as_var(a)
    y_value = np.tanh(a.value)
    out: List[Var] = []

    def vjp(g, k):
        y = out[0]
        return g * (1.0 - y * y)
    y = _record('tanh', y_value, (a,), vjp)
    out.append(y)
    return y


def sin(a) -> Var:
    a = as_var(a)
    return _record('sin', np.sin(a.value), (a,), lambda g, k: g * cos(a))


def cos(a) -> Var:
    a = as_var(a)
    return _record('cos', np.cos(a.value), (a,), lambda g, k: neg(g * sin(a)))


def exp(a) -> Var:
    a = as_var(a)
    out: List[Var] = []

    def vjp(g, k):
        return g * out[0]
    y = _record('exp', np.exp(a.value), (a,), vjp)
    out.append(y)
    return y


# ===== Shape and reduction =====

def vsum(a, axis=None, keepdims: bool = False) -> Var:
    """Sum over the given axes."""
    a = as_var(a)
    in_shape = a.shape
    if axis is None:
        axes = range(len(in_shape))
    else:
        axes = [ax % len(in_shape) for ax in (axis if isinstance(axis, (tuple, list)) else (axis,))]
    kept_shape = tuple(1 if i in axes else s for i, s in enumerate(in_shape))

    def vjp(g, k):
        return broadcast_to(reshape(g, kept_shape), in_shape)
    return _record('sum', np.sum(a.value, axis=axis, keepdims=keepdims), (a,), vjp)


def reshape(a, shape) -> Var:
    a = as_var(a)
    in_shape = a.shape
    return _record('reshape', a.value.reshape(shape), (a,), lambda g, k: reshape(g, in_shape))


def broadcast_to(a, shape) -> Var:
    a = as_var(a)
    in_shape = a.shape
    value = np.broadcast_to(a.value, shape)
    return _record('broadcast', value, (a,), lambda g, k: _unbroadcast(g, in_shape))


def transpose(a) -> Var:
    a = as_var(a)
    return _record('transpose', a.value.T, (a,), lambda g, k: transpose(g))


def getitem(a, idx) -> Var:
    """Basic (slice/integer) indexing."""
    a = as_var(a)
    in_shape = a.shape
    return _record('getitem', a.value[idx], (a,), lambda g, k: scatter(g, idx, in_shape))


def scatter(g, idx, shape) -> Var:
    """Place g into a zero array of the given shape at a basic index."""
    g = as_var(g)
    value = np.zeros(shape, dtype=np.float64)
    value[idx] = g.value
    return _record('scatter', value, (g,), lambda c, k: getitem(c, idx))


def matmul(a, b) -> Var:
    """Matrix product of 2-d operands; 1-d operands are treated as vectors."""
    a, b = as_var(a), as_var(b)
    if b.ndim == 1:
        return reshape(matmul(a, reshape(b, (-1, 1))), a.shape[:-1])
    if a.ndim == 1:
        return reshape(matmul(reshape(a, (1, -1)), b), b.shape[1:])
    if a.ndim != 2 or b.ndim != 2:
        raise TapeError(f"matmul expects 2-d operands, got {a.shape} and {b.shape}")

    def vjp(g, k):
        return matmul(g, transpose(b)) if k == 0 else matmul(transpose(a), g)
    return _record('matmul', oe.contract('ij,jk->ik', a.value, b.value), (a, b), vjp)


def dot(a, b) -> Var:
    """Inner product of two flat vectors."""
    return vsum(mul(a, b))


# ===== Functional front end =====

def _leaf_for(x) -> Tuple[Tape, Var, bool]:
    if isinstance(x, Var) and x.tape is not None:
        return x.tape, x, True
    tape = Tape()
    return tape, tape.var(x.value if isinstance(x, Var) else x), False


def grad(f: Callable[[Var], Var], x, create_graph: bool = False):
    """
    Gradient of a scalar function.

    Args:
        f: Function mapping a Var to a scalar Var
        x: Point (array, or a Var already recorded on an enclosing tape)
        create_graph: Keep the result differentiable

    Returns:
        np.ndarray of x's shape, or a recorded Var when x lives on a tape
        or create_graph is set
    """
    tape, xv, nested = _leaf_for(x)
    y = as_var(f(xv))
    (g,) = tape.gradient(y, [xv], create_graph=nested or create_graph)
    return g if (nested or create_graph) else g.value


def hvp(f: Callable[[Var], Var], x, v):
    """Hessian-vector product via the gradient of <grad f(x), v>."""
    tape, xv, nested = _leaf_for(x)
    v_value = v.value if isinstance(v, Var) else np.asarray(v, dtype=np.float64)
    if v_value.shape != xv.shape:
        raise TapeError(f"hvp direction shape {v_value.shape} != point shape {xv.shape}")
    y = as_var(f(xv))
    (g,) = tape.gradient(y, [xv], create_graph=True)
    (hv,) = tape.gradient(dot(g, v), [xv], create_graph=nested)
    return hv if nested else hv.value


def grad2_contract(f: Callable[[Var, Var], Var], w, theta, z) -> np.ndarray:
    """
    Mixed second-derivative contraction z . d2f/dw dtheta^T.

    Computed as the theta-gradient of <z, grad_w f(w, theta)> with z constant.
    """
    tape = Tape()
    wv, tv = tape.var(w), tape.var(theta)
    z = np.asarray(z, dtype=np.float64)
    if z.shape != wv.shape:
        raise TapeError(f"contraction vector shape {z.shape} != w shape {wv.shape}")
    y = as_var(f(wv, tv))
    (gw,) = tape.gradient(y, [wv], create_graph=True)
    (out,) = tape.gradient(dot(gw, z), [tv])
    return out.value


def spatial_derivs(net, x, orders: Sequence[Sequence[int]], params: Optional[Var] = None) -> List[Var]:
    """
    Derivatives of a network's scalar output with respect to its inputs.

    Args:
        net: Object with ``forward(x, params)`` returning an (N, 1) output
        x: Coordinates, shape (N, d)
        orders: Multi-indices, one entry per input dimension, total order <= 2
        params: Flat parameter Var the results must stay differentiable in

    Returns:
        One (N,) Var per requested multi-index
    """
    orders = [tuple(int(k) for k in o) for o in orders]
    x_value = x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)
    if x_value.ndim == 1:
        x_value = x_value.reshape(-1, 1)
    dim = x_value.shape[1]
    for o in orders:
        if len(o) != dim or min(o, default=0) < 0:
            raise UnsupportedOrderError(f"multi-index {o} does not match input dimension {dim}")
        if sum(o) > 2:
            raise UnsupportedOrderError(f"derivative order {sum(o)} > 2 is not supported")

    if isinstance(params, Var) and params.tape is not None:
        tape = params.tape
    elif isinstance(x, Var) and x.tape is not None:
        tape = x.tape
    else:
        tape = Tape()
    xv = x if isinstance(x, Var) and x.tape is tape else tape.var(x_value)
    u = reshape(net.forward(xv, params), (-1,))

    first: Optional[Var] = None
    second: Dict[int, Var] = {}
    results = []
    for o in orders:
        axes = [i for i, k in enumerate(o) for _ in range(k)]
        if not axes:
            results.append(u)
            continue
        if first is None:
            (first,) = tape.gradient(vsum(u), [xv], create_graph=True)
        i = axes[0]
        if len(axes) == 1:
            results.append(first[:, i])
            continue
        if i not in second:
            (second[i],) = tape.gradient(vsum(first[:, i]), [xv], create_graph=True)
        results.append(second[i][:, axes[1]])
    return results
