"""
Exception hierarchy for bilevel PINN optimization.
"""
from typing import Optional


class BilevelPinnError(Exception):
    """Base class for all errors raised by the package."""


class TapeError(BilevelPinnError):
    """Misuse of the recording tape (cross-tape arithmetic, non-scalar targets)."""


class ShapeMismatchError(BilevelPinnError, ValueError):
    """Array or parameter vector has the wrong shape or length."""


class UnsupportedOrderError(BilevelPinnError, ValueError):
    """Requested spatial derivative order exceeds what the engine supports."""


class NumericFailure(BilevelPinnError, FloatingPointError):
    """A non-finite value was found while extracting derivatives or losses."""

    def __init__(self, node_id: int, op: str, detail: str = "non-finite value"):
        self.node_id = node_id
        self.op = op
        super().__init__(f"{detail} at node {node_id} (op '{op}')")


class SolverDivergence(BilevelPinnError):
    """An iterative solver failed to make progress or blew up."""

    def __init__(self, method: str, detail: str):
        self.method = method
        super().__init__(f"{method}: {detail}")


class StepSizeError(SolverDivergence):
    """Truncated Neumann series grew instead of converging."""


class OracleError(BilevelPinnError):
    """The dense hypergradient oracle cannot be formed or solved."""

    def __init__(self, detail: str, smallest_singular_value: Optional[float] = None):
        self.smallest_singular_value = smallest_singular_value
        super().__init__(detail)


class EmptyHistoryError(BilevelPinnError, ValueError):
    """Truncated unrolling was asked to differentiate through no states."""


class DegenerateVectorError(BilevelPinnError, ValueError):
    """A vector with zero norm was given where a direction is required."""


class TrainingAborted(BilevelPinnError):
    """Training hit a numeric failure; carries the last finite network."""

    def __init__(self, message: str, last_good=None):
        self.last_good = last_good
        super().__init__(message)


class ConfigError(BilevelPinnError, ValueError):
    """Malformed or invalid configuration."""

    def __init__(self, message: str, line: Optional[int] = None, key: Optional[str] = None):
        self.line = line
        self.key = key
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(prefix + message)


class ControlFormatError(BilevelPinnError, ValueError):
    """Control-grid CSV does not match the documented format or problem."""
