"""
Experiment configuration.

Settings are pydantic models that reject unknown keys. On disk a
configuration is flat text, one `key = value` per line with `#` comments and
dotted section keys:

    problem = heat2d
    method = bpn-broyden
    bilevel.warmup_epochs = 2000
    broyden.rank = 16
"""
import logging
import re
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .errors import ConfigError

log = logging.getLogger(__name__)

KEY_RE = re.compile(r'^[a-z_][a-z0-9_]*(\.[a-z_][a-z0-9_]*)?$')
INT_RE = re.compile(r'^[+-]?\d+$')
FLOAT_RE = re.compile(r'^[+-]?(\d+\.?\d*|\.\d+)([eE][+-]?\d+)?$|^[+-]?(inf|nan)$')

ProblemName = Literal['poisson1d', 'poisson2d_cg', 'heat2d', 'burgers1d']
MethodTag = Literal['bpn-broyden', 'bpn-neumann', 'bpn-cg', 'bpn-t1t2', 'bpn-trmd', 'penalty']
HypergradMethod = Literal['broyden', 'neumann', 'cg', 't1t2', 'trmd']

# Default outer step sizes: network-valued controls, raw vector controls
OUTER_LR_MLP = 1e-2
OUTER_LR_VECTOR = 5e-2


class StrictModel(BaseModel):
    model_config = ConfigDict(extra='forbid', validate_assignment=True)


class BroydenSettings(StrictModel):
    max_iters: int = Field(32, ge=0)
    rank: int = Field(16, ge=0)
    alpha: float = Field(1.0, gt=0)
    tol: float = Field(1e-6, ge=0)
    b0: Literal['minus-identity', 'plus-identity'] = 'minus-identity'
    v_form: Literal['transpose', 'direct'] = 'transpose'
    line_search: bool = True
    max_backtracks: int = Field(8, ge=0)


class NeumannSettings(StrictModel):
    alpha: float = Field(1e-2, gt=0)
    terms: int = Field(16, ge=0)
    tol: float = Field(1e-3, ge=0)


class CgSettings(StrictModel):
    iters: int = Field(50, ge=1)
    tol: float = Field(1e-6, ge=0)


class TrmdSettings(StrictModel):
    steps: int = Field(10, ge=0)
    lr: float = Field(1e-3, gt=0)


class PenaltySettings(StrictModel):
    init_weight: float = Field(1e-3, gt=0)
    ratio: float = Field(2.0, ge=1)
    max_weight: float = Field(1e3, gt=0)
    stage_epochs: int = Field(200, ge=1)


class SamplingSettings(StrictModel):
    n_interior: int = Field(2048, ge=1)
    n_boundary: int = Field(512, ge=1)
    n_objective: Optional[int] = Field(None, ge=1)
    resample: bool = True
    interior_weight: float = Field(1.0, ge=0)
    boundary_weight: float = Field(1.0, ge=0)


class LoopSettings(StrictModel):
    """Algorithm parameters shared by the bilevel driver and the penalty baseline."""
    warmup_epochs: int = Field(2000, ge=0)
    finetune_epochs: int = Field(200, ge=0)
    inner_lr: float = Field(1e-3, gt=0)
    outer_lr: Optional[float] = Field(None, gt=0)
    max_outer_iters: int = Field(1000, ge=0)
    convergence_window: int = Field(10, ge=1)
    convergence_tol: float = Field(1e-4, ge=0)
    validate_every: int = Field(50, ge=1)
    checkpoints: bool = True

    def resolved_outer_lr(self, control_kind: str) -> float:
        if self.outer_lr is not None:
            return self.outer_lr
        return OUTER_LR_VECTOR if control_kind == 'vector' else OUTER_LR_MLP


class BilevelConfig(LoopSettings):
    """Everything one run of the driver needs."""
    method: HypergradMethod = 'broyden'
    seed: int = Field(0, ge=0)
    sampling: SamplingSettings = Field(default_factory=SamplingSettings)
    broyden: BroydenSettings = Field(default_factory=BroydenSettings)
    neumann: NeumannSettings = Field(default_factory=NeumannSettings)
    cg: CgSettings = Field(default_factory=CgSettings)
    trmd: TrmdSettings = Field(default_factory=TrmdSettings)
    penalty: PenaltySettings = Field(default_factory=PenaltySettings)


def _as_list(value):
    if value is None or isinstance(value, (list, tuple)):
        return value
    return [value]


class ExperimentConfig(StrictModel):
    """Top-level configuration read by the command line."""
    problem: ProblemName = 'poisson1d'
    method: MethodTag = 'bpn-broyden'
    output_dir: str = 'runs/default'
    seed: int = Field(0, ge=0)
    state_widths: Optional[List[int]] = None
    control_widths: Optional[List[int]] = None
    fidelity_methods: List[Literal['broyden', 'neumann', 'cg', 't1t2']] = Field(
        default_factory=lambda: ['broyden', 'neumann', 't1t2'], min_length=1)
    fidelity_broyden_iters: List[int] = Field(default_factory=lambda: [2, 4, 8, 16, 32], min_length=1)
    fidelity_outer_iters: int = Field(75, ge=1)
    bilevel: LoopSettings = Field(default_factory=LoopSettings)
    sampling: SamplingSettings = Field(default_factory=SamplingSettings)
    broyden: BroydenSettings = Field(default_factory=BroydenSettings)
    neumann: NeumannSettings = Field(default_factory=NeumannSettings)
    cg: CgSettings = Field(default_factory=CgSettings)
    trmd: TrmdSettings = Field(default_factory=TrmdSettings)
    penalty: PenaltySettings = Field(default_factory=PenaltySettings)

    @field_validator('state_widths', 'control_widths', 'fidelity_methods', 'fidelity_broyden_iters',
                     mode='before')
    @classmethod
    def _wrap_scalar(cls, v):
        return _as_list(v)

    @field_validator('output_dir', mode='before')
    @classmethod
    def _path_as_text(cls, v):
        # `output_dir = 2024` parses as a number
        if isinstance(v, (int, float)) and not isinstance(v, bool):
            return format_value(v)
        return v

    @field_validator('state_widths', 'control_widths')
    @classmethod
    def _positive_widths(cls, v):
        if v is not None and (len(v) < 2 or min(v) <= 0):
            raise ValueError("widths need at least two positive entries")
        return v

    @field_validator('fidelity_broyden_iters')
    @classmethod
    def _positive_iters(cls, v):
        if min(v) < 1:
            raise ValueError("Broyden iteration counts must be positive")
        return v

    @property
    def hypergrad_method(self) -> Optional[str]:
        """Solver tag behind a bpn-* method, None for the penalty baseline."""
        return self.method[len('bpn-'):] if self.method.startswith('bpn-') else None

    def to_bilevel_config(self) -> BilevelConfig:
        return BilevelConfig(
            **self.bilevel.model_dump(),
            method=self.hypergrad_method or 'broyden',
            seed=self.seed,
            sampling=self.sampling,
            broyden=self.broyden,
            neumann=self.neumann,
            cg=self.cg,
            trmd=self.trmd,
            penalty=self.penalty,
        )


# ===== Flat text format =====

def parse_value(raw: str) -> Any:
    """Parse a scalar or a comma-separated list of scalars; quoted text stays a string."""
    raw = raw.strip()
    if len(raw) >= 2 and raw[0] == raw[-1] and raw[0] in '"\'':
        return raw[1:-1]
    if ',' in raw:
        return [parse_value(part) for part in raw.split(',') if part.strip()]
    lowered = raw.lower()
    if lowered in ('true', 'false'):
        return lowered == 'true'
    if lowered == 'none':
        return None
    if INT_RE.match(raw):
        return int(raw)
    if FLOAT_RE.match(lowered):
        return float(raw)
    return raw


def format_value(value: Any) -> str:
    if value is None:
        return 'none'
    if isinstance(value, bool):
        return 'true' if value else 'false'
    if isinstance(value, float):
        return repr(float(value))
    if isinstance(value, (list, tuple)):
        return ','.join(format_value(v) for v in value)
    if isinstance(value, str) and value and parse_value(value) != value:
        return f'"{value}"'
    return str(value)


def _flatten(data: Dict[str, Any], prefix: str = '') -> Dict[str, Any]:
    flat = {}
    for key, value in data.items():
        if isinstance(value, dict):
            flat.update(_flatten(value, f"{prefix}{key}."))
        else:
            flat[f"{prefix}{key}"] = value
    return flat


def _nest(flat: Dict[str, Any]) -> Dict[str, Any]:
    nested: Dict[str, Any] = {}
    for key, value in flat.items():
        if '.' in key:
            section, name = key.split('.', 1)
            target = nested.setdefault(section, {})
            if not isinstance(target, dict):
                raise ConfigError(f"'{section}' is a value, not a section", key=key)
            target[name] = value
        else:
            if isinstance(nested.get(key), dict):
                raise ConfigError(f"'{key}' is a section, not a value", key=key)
            nested[key] = value
    return nested


def _validate(flat: Dict[str, Any], lines: Dict[str, int]) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(_nest(flat))
    except ValidationError as exc:
        err = exc.errors()[0]
        loc = [str(p) for p in err['loc'] if not isinstance(p, int)]
        key = '.'.join(loc[:2])
        while key and key not in lines and '.' in key:
            key = key.rsplit('.', 1)[0]
        if key not in lines:
            nested_keys = sorted((n, k) for k, n in lines.items() if k.startswith(key + '.'))
            if nested_keys:
                key = nested_keys[0][1]
        line = lines.get(key)
        if err['type'] == 'extra_forbidden':
            message = f"unknown key '{key}'"
        else:
            message = f"invalid value for '{key}': {err['msg']}"
        raise ConfigError(message, line, key) from None


def parse_config_text(text: str) -> ExperimentConfig:
    """
    Parse flat configuration text.

    Raises:
        ConfigError: with the line number of the offending key
    """
    flat: Dict[str, Any] = {}
    lines: Dict[str, int] = {}
    for line_no, line in enumerate(text.splitlines(), start=1):
        body = line.split('#', 1)[0].strip()
        if not body:
            continue
        if '=' not in body:
            raise ConfigError(f"expected 'key = value', got '{body}'", line_no)
        key, value = (part.strip() for part in body.split('=', 1))
        if not KEY_RE.match(key):
            raise ConfigError(f"malformed key '{key}'", line_no, key)
        if key in flat:
            raise ConfigError(f"duplicate key '{key}' (first set on line {lines[key]})", line_no, key)
        flat[key] = parse_value(value)
        lines[key] = line_no
    return _validate(flat, lines)


def load_config(path: Union[str, Path]) -> ExperimentConfig:
    """Read and parse a configuration file."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config '{path}': {exc.strerror}") from None
    return parse_config_text(text)


def format_config(config: ExperimentConfig) -> str:
    """Effective configuration as flat text, sorted by key."""
    flat = _flatten(config.model_dump())
    return ''.join(f"{key} = {format_value(flat[key])}\n" for key in sorted(flat))


def apply_overrides(config: ExperimentConfig, overrides: Dict[str, Any]) -> ExperimentConfig:
    """
    New configuration with dotted keys replaced.

    String values are parsed like file values; anything else is used as is.
    """
    flat = _flatten(config.model_dump())
    lines = {}
    for key, value in overrides.items():
        if not KEY_RE.match(key):
            raise ConfigError(f"malformed key '{key}'", key=key)
        flat[key] = parse_value(value) if isinstance(value, str) else value
    return _validate(flat, lines)


def flat_keys() -> List[str]:
    """Every settable key, dotted."""
    return sorted(_flatten(ExperimentConfig().model_dump()))


def parse_sweep_spec(specs: List[str]) -> List[Tuple[str, List[str]]]:
    """
    Parse repeated 'key=v1,v2,...' sweep arguments.

    Raises:
        ConfigError: malformed spec or unknown key
    """
    known = set(flat_keys())
    axes = []
    for spec in specs:
        if '=' not in spec:
            raise ConfigError(f"sweep spec '{spec}' must look like key=v1,v2")
        key, values = (part.strip() for part in spec.split('=', 1))
        if key not in known:
            raise ConfigError(f"cannot sweep unknown key '{key}'", key=key)
        items = [v.strip() for v in values.split(',') if v.strip()]
        if items:
            axes.append((key, items))
    return axes
