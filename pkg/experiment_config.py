"""
Kimura Boundary Lab
Copyright (c) 2025 Abhishek Datta

Licensed under the MIT License.
See LICENSE file in the project root for full license information.

This file is part of the Kimura Boundary Lab,
a desk-scale numerical laboratory for degenerate diffusion operators.
"""

"""
Experiment Config
Versioned config schema, canonical hashing and environment defaults
"""

import hashlib
import json
import os
from dataclasses import dataclass
from typing import Any, Dict, List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from geometry_measure import QuadratureSpec

try:
    from dotenv import load_dotenv
    DOTENV_AVAILABLE = True
except ImportError:
    DOTENV_AVAILABLE = False

SCHEMA_VERSION = 1
DEFAULT_OUTPUT_DIR = 'lab_runs'

EXPERIMENT_TAGS = (
    'conjugation', 'commutator', 'singular_measure', 'garding', 'continuity', 'hardy',
    'convergence', 'energy', 'maximum_principle', 'vanishing_exponent', 'derivative_bound',
    'carleson', 'hopf_oleinik', 'quotient', 'holder', 'elliptic_harnack', 'sobolev_sup',
    'envelope_scan', 'monte_carlo',
)
HARNACK_TAGS = ('carleson', 'hopf_oleinik', 'quotient', 'holder', 'elliptic_harnack')


class ConfigError(ValueError):
    """Raised for unreadable configs; the message lists the offending field paths"""


class _Strict(BaseModel):
    model_config = ConfigDict(extra='forbid')


class OperatorSpec(_Strict):
    """Either {"builtin": name} or an explicit coefficient bundle"""
    builtin: Optional[str] = None
    name: Optional[str] = None
    n: Optional[int] = Field(None, ge=0)
    m: Optional[int] = Field(None, ge=0)
    n0: Optional[int] = Field(None, ge=0)
    beta0: Optional[float] = Field(None, gt=0.0)
    ellipticity: Optional[float] = Field(None, gt=0.0)
    x_extent: Optional[List[float]] = None
    y_center: Optional[List[float]] = None
    y_radius: Optional[float] = Field(None, gt=0.0)
    coefficients: Dict[str, Any] = Field(default_factory=dict)

    @model_validator(mode='after')
    def _builtin_or_explicit(self):
        if self.builtin is None and (self.n is None or self.n0 is None):
            raise ValueError("give either 'builtin' or at least 'n' and 'n0'")
        return self

    def to_operator_spec(self):
        return {k: v for k, v in self.model_dump().items() if v is not None}


class GridSpec(_Strict):
    nodes: int = Field(65, ge=3)
    layers: int = Field(10, ge=0, le=40)
    ratio: float = Field(0.5, gt=0.0, lt=1.0)
    y_nodes: Optional[int] = Field(None, ge=3)
    refinements: List[int] = Field(default_factory=list)

    @field_validator('refinements')
    @classmethod
    def _increasing(cls, value):
        if any(v < 3 for v in value) or any(b <= a for a, b in zip(value, value[1:])):
            raise ValueError("refinement node counts must be >= 3 and strictly increasing")
        return value


class SchemeSpec(_Strict):
    name: Literal['crank-nicolson', 'implicit-euler'] = 'crank-nicolson'
    dt: float = Field(1e-3, gt=0.0)
    t_end: float = Field(1.0, gt=0.0)
    save_every: int = Field(10, ge=1)
    rannacher: bool = True


class InitialDataSpec(_Strict):
    """Initial data: a sympy expression in x1.., y1.. or a named benchmark"""
    kind: Literal['default', 'expression', 'eigen', 'mode', 'product_mode'] = 'default'
    expression: Optional[str] = None
    name: Optional[str] = None

    @model_validator(mode='after')
    def _expression_given(self):
        if self.kind == 'expression' and not self.expression:
            raise ValueError("kind 'expression' needs an 'expression'")
        return self


class ExperimentSpec(_Strict):
    tag: Literal[EXPERIMENT_TAGS]
    t: Optional[float] = Field(None, ge=0.0)
    r: Optional[float] = Field(None, gt=0.0)
    tolerance: Optional[float] = Field(None, gt=0.0)
    p_scan: Optional[List[float]] = None
    params: Dict[str, Any] = Field(default_factory=dict)

    @field_validator('p_scan')
    @classmethod
    def _p_above_two(cls, value):
        if value is not None and (not value or any(p <= 2.0 for p in value)):
            raise ValueError("every scanned p must exceed 2")
        return value


class ExperimentConfig(_Strict):
    schema_version: Literal[1] = SCHEMA_VERSION
    operator: OperatorSpec
    grid: GridSpec = Field(default_factory=GridSpec)
    scheme: SchemeSpec = Field(default_factory=SchemeSpec)
    quadrature: QuadratureSpec = Field(default_factory=QuadratureSpec)
    initial_data: List[InitialDataSpec] = Field(default_factory=list)
    experiments: List[ExperimentSpec] = Field(default_factory=list)
    seed: int = Field(0, ge=0)
    output_dir: Optional[str] = None
    threads: Optional[int] = Field(None, ge=1)


def _error_lines(exc: ValidationError):
    lines = []
    for error in exc.errors():
        path = '.'.join(str(p) for p in error['loc']) or '<root>'
        lines.append(f"{path}: {error['msg']}")
    return lines


def parse_config(raw):
    try:
        return ExperimentConfig.model_validate(raw)
    except ValidationError as exc:
        raise ConfigError("invalid config:\n  " + "\n  ".join(_error_lines(exc))) from exc


def load_config(path):
    """Read and validate a JSON config; a missing file raises FileNotFoundError"""
    with open(path) as f:
        text = f.read()
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from exc
    return parse_config(raw)


def canonical_config(config: ExperimentConfig):
    return json.dumps(config.model_dump(mode='json'), sort_keys=True, separators=(',', ':'))


def dump_config(config: ExperimentConfig):
    return json.dumps(config.model_dump(mode='json'), sort_keys=True, indent=2)


def config_hash(config: ExperimentConfig):
    return hashlib.md5(canonical_config(config).encode()).hexdigest()


def with_overrides(config: ExperimentConfig, seed=None, grid_nodes=None, experiments=None):
    """Copy with CLI overrides applied and re-validated"""
    raw = config.model_dump(mode='json')
    if seed is not None:
        raw['seed'] = seed
    if grid_nodes is not None:
        raw['grid']['nodes'] = grid_nodes
        if raw['grid']['refinements']:
            raw['grid']['refinements'] = [max(3, (grid_nodes - 1) // 2 + 1), grid_nodes]
    if experiments is not None:
        raw['experiments'] = experiments
    return parse_config(raw)


@dataclass(frozen=True)
class RunSettings:
    """Effective worker count and output root after flags, config and environment"""
    threads: int
    output_dir: str


def resolve_settings(config: ExperimentConfig, threads=None, output_dir=None):
    """Flags override the config, which overrides KIMURA_LAB_THREADS / KIMURA_LAB_OUT"""
    if DOTENV_AVAILABLE:
        load_dotenv()
    env_threads = os.getenv('KIMURA_LAB_THREADS')
    try:
        default_threads = int(env_threads) if env_threads else 1
    except ValueError as exc:
        raise ConfigError(f"KIMURA_LAB_THREADS must be an integer, got '{env_threads}'") from exc
    resolved_threads = threads or config.threads or default_threads
    if resolved_threads < 1:
        raise ConfigError("threads: must be at least 1")
    resolved_out = output_dir or config.output_dir or os.getenv('KIMURA_LAB_OUT') or DEFAULT_OUTPUT_DIR
    return RunSettings(int(resolved_threads), resolved_out)
