"""Uniform propagator abstraction plus subprocess orchestration.

A propagator maps a state across one time slice.  Internal propagators run
the built-in dynamical core in-process; external propagators hand the state
to a child process through checkpoint files and collect the result the same
way — files and exit codes are the whole protocol, so any simulator that
honors the command contract can stand in:

    <command> --in <path> --out <path> --t-end <seconds> --spd <n>

with exit 0 and a readable output checkpoint meaning success.  Each
external run gets its own working directory holding in.prcp, out.prcp and
run.log.
"""

from __future__ import annotations

import subprocess
import tempfile
import time as _time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from .checkpoint import read_checkpoint, write_checkpoint
from .errors import (
    BlowUpError,
    ExternalTimeoutError,
    SpawnFailureError,
    StepMismatchError,
)
from .solver import SECONDS_PER_DAY, ModelParams, StepHistory, integrate_history
from .state import ModelState

IN_FILE = "in.prcp"
OUT_FILE = "out.prcp"
LOG_FILE = "run.log"


@dataclass(frozen=True)
class PropagatorSpec:
    """One time integrator, defined by its steps-per-day and execution mode.

    restart_policy governs what happens at call boundaries: "warm" carries
    the multistep tendency history across calls (bit-exact continuation),
    "cold" rebuilds it from scratch each call, which is what restart-file
    continuation does in practice.
    """

    spd: int
    mode: str = "internal"                       # "internal" | "external"
    command: tuple[str, ...] = ()
    workdir_template: str = ""                   # may contain {iteration} and {slice}
    restart_policy: str = "cold"

    def __post_init__(self):
        if self.spd < 1 or SECONDS_PER_DAY % self.spd != 0:
            raise ValueError(f"spd={self.spd} is not an integer divisor of 86400")
        if self.mode not in ("internal", "external"):
            raise ValueError(f"unknown propagator mode {self.mode!r}")
        if self.mode == "external" and not self.command:
            raise ValueError("external mode requires a command vector")
        if self.restart_policy not in ("cold", "warm"):
            raise ValueError(f"unknown restart policy {self.restart_policy!r}")
        object.__setattr__(self, "command", tuple(self.command))

    @property
    def dt(self) -> int:
        return SECONDS_PER_DAY // self.spd


@dataclass(frozen=True)
class SliceLayout:
    """Partition of [t0, t0 + n_slices * slice_length] into equal slices."""

    t0: int
    slice_length: int
    n_slices: int

    def __post_init__(self):
        if self.t0 < 0:
            raise ValueError("t0 must be >= 0")
        if self.slice_length <= 0:
            raise ValueError("slice_length must be positive")
        if self.n_slices < 1:
            raise ValueError("n_slices must be >= 1")

    @property
    def t_end(self) -> int:
        return self.t0 + self.n_slices * self.slice_length

    @property
    def total_seconds(self) -> int:
        return self.n_slices * self.slice_length

    def boundaries(self) -> tuple[int, ...]:
        return tuple(self.t0 + n * self.slice_length for n in range(self.n_slices + 1))

    def compatible_with(self, spec: PropagatorSpec) -> bool:
        return self.slice_length % spec.dt == 0


@dataclass(frozen=True)
class ExitReport:
    """Outcome of one external run; nonzero exits are reported, not raised."""

    returncode: int
    wall_seconds: float
    log_path: Path


@dataclass(frozen=True)
class PropagateResult:
    state: ModelState
    history: StepHistory | None = field(default=None)


def run_external(
    command: Sequence[str],
    workdir: str | Path,
    env: dict[str, str] | None = None,
    timeout: float | None = None,
) -> ExitReport:
    """Launch a child in its own directory with captured output.

    stdout and stderr both go to run.log inside the working directory.
    A timeout kills the child and raises; a plain nonzero exit is returned
    in the report for the caller to interpret.
    """
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    log_path = workdir / LOG_FILE
    start = _time.perf_counter()
    try:
        with open(log_path, "wb") as log:
            proc = subprocess.run(
                list(command),
                cwd=workdir,
                stdout=log,
                stderr=subprocess.STDOUT,
                env=env,
                timeout=timeout,
            )
    except (FileNotFoundError, PermissionError) as err:
        raise SpawnFailureError(f"cannot launch {command[0]!r}: {err}") from err
    except subprocess.TimeoutExpired as err:
        wall = _time.perf_counter() - start
        raise ExternalTimeoutError(
            f"{command[0]!r} exceeded {timeout}s and was killed",
            report=ExitReport(returncode=-1, wall_seconds=wall, log_path=log_path),
        ) from err
    return ExitReport(
        returncode=proc.returncode,
        wall_seconds=_time.perf_counter() - start,
        log_path=log_path,
    )


def _external_workdir(
    spec: PropagatorSpec, workdir: str | Path | None, slice_index: int, iteration: int
) -> Path:
    if workdir is not None:
        return Path(workdir)
    if spec.workdir_template:
        return Path(spec.workdir_template.format(iteration=iteration, slice=slice_index))
    return Path(tempfile.mkdtemp(prefix="paratide-run-"))


def propagate(
    spec: PropagatorSpec,
    state: ModelState,
    t_end: int,
    params: ModelParams,
    *,
    history: StepHistory | None = None,
    slice_index: int = -1,
    iteration: int = -1,
    workdir: str | Path | None = None,
    timeout: float | None = None,
) -> PropagateResult:
    """Advance a state across [state.time, t_end] with one propagator.

    Warm policy resumes from the supplied history and returns the final
    one; cold policy ignores incoming history and returns none, so chained
    cold calls reproduce restart-file behavior.  Within a parallel-in-time
    run the inputs are synthesized by the correction algebra and carry no
    history, so slice propagation always bootstraps afresh there.
    """
    t_end = int(t_end)
    span = t_end - state.time
    if span <= 0:
        raise StepMismatchError(f"slice [{state.time}, {t_end}] is empty")
    if span % spec.dt != 0:
        raise StepMismatchError(
            f"slice of {span}s is not a multiple of the {spec.dt}s step (spd={spec.spd})"
        )

    warm = spec.restart_policy == "warm"
    if spec.mode == "internal":
        if warm and history is not None:
            if history.current.time != state.time:
                raise StepMismatchError(
                    f"history is at t={history.current.time}, state at t={state.time}"
                )
            h = history
        else:
            h = StepHistory(state)
        try:
            h = integrate_history(h, t_end, spec.dt, params)
        except BlowUpError as err:
            err.slice_index = slice_index
            err.iteration = iteration
            raise
        return PropagateResult(h.current, h if warm else None)

    # External mode: state goes out and comes back through checkpoints.
    wd = _external_workdir(spec, workdir, slice_index, iteration)
    wd.mkdir(parents=True, exist_ok=True)
    in_path = wd / IN_FILE
    out_path = wd / OUT_FILE
    write_checkpoint(
        state,
        history if warm else None,
        in_path,
        slice_index=slice_index,
        iteration=iteration,
    )
    cmd = list(spec.command) + [
        "--in", str(in_path),
        "--out", str(out_path),
        "--t-end", str(t_end),
        "--spd", str(spec.spd),
    ]
    report = run_external(cmd, wd, timeout=timeout)
    if report.returncode != 0:
        raise BlowUpError(
            f"external propagator exited {report.returncode} (log: {report.log_path})",
            slice_index=slice_index,
            iteration=iteration,
            log_path=report.log_path,
        )
    if not out_path.exists():
        raise BlowUpError(
            f"external propagator left no output file {out_path}",
            slice_index=slice_index,
            iteration=iteration,
            log_path=report.log_path,
        )
    ck = read_checkpoint(out_path, grid=state.grid)
    if ck.state.time != t_end:
        raise BlowUpError(
            f"external propagator returned t={ck.state.time}, expected {t_end}",
            slice_index=slice_index,
            iteration=iteration,
            log_path=report.log_path,
        )
    out_history = ck.step_history(spec.dt) if (warm and ck.history) else None
    return PropagateResult(ck.state, out_history)


def restarted_serial_run(
    spec: PropagatorSpec,
    u0: ModelState,
    layout: SliceLayout,
    params: ModelParams,
    *,
    run_dir: str | Path | None = None,
    timeout: float | None = None,
) -> list[ModelState]:
    """Serial run restarted at every slice boundary (history dropped).

    This is the trajectory a parallel-in-time run converges to, because
    every slice propagation there starts from a bare state as well.
    Returns states at all n_slices + 1 boundaries.
    """
    if u0.time != layout.t0:
        raise StepMismatchError(f"u0 at t={u0.time}, layout starts at {layout.t0}")
    states = [u0]
    for n in range(layout.n_slices):
        wd = Path(run_dir) / f"slice{n}" if run_dir is not None else None
        result = propagate(
            spec,
            states[-1],
            layout.t0 + (n + 1) * layout.slice_length,
            params,
            history=None,
            slice_index=n,
            iteration=-1,
            workdir=wd,
            timeout=timeout,
        )
        states.append(result.state)
    return states


def split_run(
    spec: PropagatorSpec,
    u0: ModelState,
    layout: SliceLayout,
    params: ModelParams,
) -> ModelState:
    """Chain one propagate call per slice, threading whatever history the
    policy returns: warm chains are bit-exact continuations, cold chains
    restart at every boundary."""
    state = u0
    history = None
    for n in range(layout.n_slices):
        result = propagate(
            spec,
            state,
            layout.t0 + (n + 1) * layout.slice_length,
            params,
            history=history,
            slice_index=n,
        )
        state, history = result.state, result.history
    return state


def consecutive_run(
    spec: PropagatorSpec, u0: ModelState, t_end: int, params: ModelParams
) -> ModelState:
    """Single unsplit propagation over the whole window."""
    return propagate(spec, u0, t_end, params).state
