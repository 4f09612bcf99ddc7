"""
Multilayer perceptrons for the state field and the control function.

Parameters live in one flat float64 array, laid out layer by layer as the
weight matrix (fan_in x fan_out, row-major) followed by the bias vector.
"""
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Tuple, Union

import numpy as np

from . import autodiff as ad
from .autodiff import Var
from .errors import ShapeMismatchError
from .io_utils import atomic_write_bytes

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = "BPNCKPT"
CHECKPOINT_VERSION = "v1"
ACTIVATIONS = ('tanh',)


def param_count(widths: Sequence[int]) -> int:
    """Number of weights and biases for the given layer widths."""
    return sum(a * b + b for a, b in zip(widths[:-1], widths[1:]))


def _validate_widths(widths: Sequence[int]) -> Tuple[int, ...]:
    widths = tuple(int(w) for w in widths)
    if len(widths) < 2:
        raise ShapeMismatchError(f"an Mlp needs at least 2 widths, got {widths}")
    if min(widths) <= 0:
        raise ShapeMismatchError(f"layer widths must be positive, got {widths}")
    return widths


@dataclass(frozen=True, eq=False)
class Mlp:
    """Fully connected tanh network with a flat parameter view."""
    widths: Tuple[int, ...]
    params: np.ndarray = field(repr=False)
    activation: str = 'tanh'

    def __post_init__(self):
        widths = _validate_widths(self.widths)
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unsupported activation '{self.activation}'")
        params = np.array(self.params, dtype=np.float64).ravel()
        if params.size != param_count(widths):
            raise ShapeMismatchError(
                f"parameter length {params.size} != {param_count(widths)} for widths {widths}")
        params.setflags(write=False)
        object.__setattr__(self, 'widths', widths)
        object.__setattr__(self, 'params', params)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Mlp):
            return NotImplemented
        return (self.widths == other.widths and self.activation == other.activation
                and np.array_equal(self.params.view(np.uint64), other.params.view(np.uint64)))

    __hash__ = None

    @property
    def input_dim(self) -> int:
        return self.widths[0]

    @property
    def num_params(self) -> int:
        return self.params.size

    def layer_slices(self):
        """Yield (fan_in, fan_out, weight slice, bias slice) per layer."""
        offset = 0
        for fan_in, fan_out in zip(self.widths[:-1], self.widths[1:]):
            w = slice(offset, offset + fan_in * fan_out)
            offset += fan_in * fan_out
            b = slice(offset, offset + fan_out)
            offset += fan_out
            yield fan_in, fan_out, w, b

    def forward(self, x, params=None):
        """Evaluate the network; see mlp_forward."""
        return mlp_forward(self, x, params)

    def with_params(self, params) -> 'Mlp':
        """Same architecture with new parameters."""
        return Mlp(self.widths, params, self.activation)

    def __repr__(self):
        return f"Mlp(widths={self.widths}, params={self.num_params}, activation='{self.activation}')"


def mlp_init(widths: Sequence[int], seed: int) -> Mlp:
    """
    Initialize a network deterministically from a seed.

    Weights and biases are uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)].

    Args:
        widths: Layer widths, input first
        seed: Unsigned integer seed

    Returns:
        New Mlp
    """
    widths = _validate_widths(widths)
    rng = np.random.default_rng(seed)
    chunks = []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        chunks.append(rng.uniform(-bound, bound, size=fan_in * fan_out))
        chunks.append(rng.uniform(-bound, bound, size=fan_out))
    return Mlp(widths, np.concatenate(chunks))


def mlp_constant(widths: Sequence[int], value: float, seed: int = 0) -> Mlp:
    """Network whose output is exactly `value` everywhere (zero last layer, bias = value)."""
    net = mlp_init(widths, seed)
    params = net.params.copy()
    fan_in, fan_out, w, b = list(net.layer_slices())[-1]
    params[w] = 0.0
    params[b] = value
    return net.with_params(params)


def _activate(h, activation: str):
    if isinstance(h, Var):
        return ad.tanh(h)
    return np.tanh(h)


def mlp_forward(net: Mlp, x, params=None):
    """
    Evaluate the network at a batch of coordinates.

    With plain arrays the computation runs in numpy. If either x or params is
    a Var the computation is recorded so the output is differentiable in both.

    Args:
        net: Network (architecture, and parameters when params is None)
        x: Coordinates of shape (N, d), or (N,) when d == 1
        params: Optional flat parameter array or Var overriding net.params

    Returns:
        Outputs of shape (N, widths[-1])
    """
    if params is None:
        params = net.params
    if not isinstance(params, Var):
        params = np.asarray(params, dtype=np.float64)
    if params.shape != (net.num_params,):
        raise ShapeMismatchError(f"parameter shape {params.shape} != ({net.num_params},)")

    if isinstance(x, Var):
        if x.ndim != 2 or x.shape[1] != net.input_dim:
            raise ShapeMismatchError(f"input shape {x.shape} does not match input width {net.input_dim}")
    else:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1 and net.input_dim == 1:
            x = x.reshape(-1, 1)
        if x.ndim != 2 or x.shape[1] != net.input_dim:
            raise ShapeMismatchError(f"input shape {x.shape} does not match input width {net.input_dim}")

    recorded = isinstance(x, Var) or isinstance(params, Var)
    layers = list(net.layer_slices())
    h = x
    for i, (fan_in, fan_out, w, b) in enumerate(layers):
        W = params[w].reshape((fan_in, fan_out))
        bias = params[b]
        h = ad.matmul(h, W) + bias if recorded else h @ W + bias
        if i < len(layers) - 1:
            h = _activate(h, net.activation)
    return h


def flatten(net: Mlp) -> np.ndarray:
    """Copy of the flat parameter array."""
    return net.params.copy()


def unflatten(net: Mlp, flat) -> Mlp:
    """Network with net's architecture and the given flat parameters."""
    flat = np.asarray(flat, dtype=np.float64)
    if flat.ndim != 1 or flat.size != net.num_params:
        raise ShapeMismatchError(f"expected {net.num_params} parameters, got shape {flat.shape}")
    return net.with_params(flat)


def checkpoint_header(net: Mlp) -> str:
    widths = 'x'.join(str(w) for w in net.widths)
    return f"{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION} {widths} {net.activation}"


def save_checkpoint(net: Mlp, path: Union[str, Path]) -> Path:
    """Write header line then little-endian float64 parameters."""
    payload = (checkpoint_header(net) + "\n").encode('ascii') + net.params.astype('<f8').tobytes()
    out = atomic_write_bytes(path, payload)
    log.debug(f"[CKPT] wrote {out} ({net.num_params} params)")
    return out


def load_checkpoint(path: Union[str, Path]) -> Mlp:
    """Read a checkpoint written by save_checkpoint."""
    data = Path(path).read_bytes()
    newline = data.find(b"\n")
    if newline < 0:
        raise ValueError(f"{path}: missing checkpoint header")
    parts = data[:newline].decode('ascii', errors='replace').split()
    if len(parts) != 4 or parts[0] != CHECKPOINT_MAGIC or parts[1] != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unrecognized checkpoint header {parts}")
    try:
        widths = tuple(int(w) for w in parts[2].split('x'))
    except ValueError:
        raise ValueError(f"{path}: bad widths field '{parts[2]}'") from None
    body = data[newline + 1:]
    expected = param_count(widths) * 8
    if len(body) != expected:
        raise ShapeMismatchError(f"{path}: expected {expected} parameter bytes, found {len(body)}")
    params = np.frombuffer(body, dtype='<f8').astype(np.float64)
    return Mlp(widths, params, parts[3])
