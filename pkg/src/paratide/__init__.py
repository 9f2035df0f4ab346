"""Parallel-in-time simulation engine with a shallow-water + tracer testbed."""

from .checkpoint import Checkpoint, read_checkpoint, write_checkpoint
from .config import ExperimentConfig, parse_config
from .metrics import (
    SpeedupModel,
    max_profitable_iterations,
    measure_runtime_ratio,
    rel_l2_norm,
    rel_max_norm,
    speedup_bound,
    speedup_estimate,
    time_averaged_error_series,
)
from .parareal import (
    IterationRecord,
    PararealConfig,
    PararealResult,
    run_parareal,
)
from .propagator import (
    PropagateResult,
    PropagatorSpec,
    SliceLayout,
    propagate,
    run_external,
)
from .solver import (
    ModelParams,
    ab3_step,
    cfl_max_dt,
    integrate,
    integrate_batch,
    integrate_history,
    rhs,
)
from .state import (
    Field,
    Grid,
    ModelState,
    StepHistory,
    Tendency,
    state_add,
    state_diff,
    validate_state,
)

__version__ = "0.1.0"

__all__ = [
    "Checkpoint",
    "ExperimentConfig",
    "Field",
    "Grid",
    "IterationRecord",
    "ModelParams",
    "ModelState",
    "PararealConfig",
    "PararealResult",
    "PropagateResult",
    "PropagatorSpec",
    "SliceLayout",
    "SpeedupModel",
    "StepHistory",
    "Tendency",
    "ab3_step",
    "cfl_max_dt",
    "integrate",
    "integrate_batch",
    "integrate_history",
    "max_profitable_iterations",
    "measure_runtime_ratio",
    "parse_config",
    "propagate",
    "read_checkpoint",
    "rel_l2_norm",
    "rel_max_norm",
    "rhs",
    "run_external",
    "run_parareal",
    "speedup_bound",
    "speedup_estimate",
    "state_add",
    "state_diff",
    "time_averaged_error_series",
    "validate_state",
    "write_checkpoint",
]
