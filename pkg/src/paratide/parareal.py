"""Parareal driver: coarse init sweep, parallel fine phase, correction sweep.

The driver operates on propagator callables ``fn(state, slice_index,
iteration) -> state`` so that closed-form test propagators can stand in for
the real ones; ``run_parareal`` wires the callables up from PropagatorSpec
values.  All state arithmetic between propagations goes through the exact
state algebra (state_add / state_diff), with one shortcut: when the freshly
computed coarse value is bit-identical to the retained one, the correction
G + (F - G) is replaced by F itself — the exact-arithmetic value — so the
standard exactness-propagation invariant holds bit-for-bit instead of up to
rounding.

A fine propagation that fails (divergence, killed external run, missing
output) leaves its correction undefined; in continue mode the sweep then
keeps the uncorrected coarse value for that slice and flags it, in abort
mode the run stops.
"""

from __future__ import annotations

import json
import time as _time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

from .checkpoint import write_checkpoint
from .errors import BlowUpError, ZeroReferenceError
from .metrics import rel_l2_norm, rel_max_norm
from .propagator import PropagatorSpec, SliceLayout, propagate
from .solver import ModelParams, integrate_batch
from .state import Field, ModelState, state_add, state_diff

PropagatorFn = Callable[[ModelState, int, int], ModelState]

ABORT = "abort"
CONTINUE_UNCORRECTED = "continue_uncorrected"

DEFAULT_MONITORED = (Field.U, Field.T, Field.S)


@dataclass(frozen=True)
class PararealConfig:
    """Everything the driver needs besides the initial state and physics."""

    layout: SliceLayout
    coarse: PropagatorSpec
    fine: PropagatorSpec
    max_iterations: int | None = None          # default: n_slices
    epsilon: float = 1e-2                      # 0 disables epsilon stopping
    on_blow_up: str = CONTINUE_UNCORRECTED
    max_parallel_fine: int = 4
    monitored_fields: tuple[Field, ...] = DEFAULT_MONITORED
    allow_equal_spd: bool = False              # degenerate G == F test setups only

    def __post_init__(self):
        if self.fine.spd < self.coarse.spd or (
            self.fine.spd == self.coarse.spd and not self.allow_equal_spd
        ):
            raise ValueError(
                f"fine spd {self.fine.spd} must exceed coarse spd {self.coarse.spd}"
            )
        for name, spec in (("coarse", self.coarse), ("fine", self.fine)):
            if not self.layout.compatible_with(spec):
                raise ValueError(
                    f"slice length {self.layout.slice_length}s is not a multiple "
                    f"of the {name} step {spec.dt}s"
                )
        k = self.iterations
        if not 1 <= k <= self.layout.n_slices:
            raise ValueError(
                f"max_iterations={k} must be in [1, n_slices={self.layout.n_slices}]"
            )
        if self.on_blow_up not in (ABORT, CONTINUE_UNCORRECTED):
            raise ValueError(f"unknown on_blow_up mode {self.on_blow_up!r}")
        if self.max_parallel_fine < 1:
            raise ValueError("max_parallel_fine must be >= 1")
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")

    @property
    def iterations(self) -> int:
        return self.layout.n_slices if self.max_iterations is None else self.max_iterations


@dataclass(frozen=True)
class BlowUpEvent:
    k: int
    slice_index: int
    phase: str           # "init" | "fine" | "correction"
    message: str


@dataclass(frozen=True)
class IterationRecord:
    """Per-iteration bookkeeping for the run report."""

    k: int
    wall_coarse_s: float
    wall_fine_s: float
    wall_correction_s: float
    errors: dict[Field, tuple[float, float]] | None   # field -> (E_inf, E_2) at T
    blow_up_slices: tuple[int, ...] = ()


@dataclass(frozen=True)
class PararealResult:
    layout: SliceLayout
    iterates: tuple[tuple[ModelState, ...], ...]      # [k][n], n = 0..n_slices
    records: tuple[IterationRecord, ...]
    blow_ups: tuple[BlowUpEvent, ...]
    stopped_at_epsilon: bool
    aborted: bool = False
    abort_reason: str = ""
    first_crossing: dict[Field, int | None] = field(default_factory=dict)

    @property
    def iterations_run(self) -> int:
        return len(self.iterates) - 1

    @property
    def final(self) -> ModelState:
        return self.iterates[-1][-1]


def make_propagator(
    spec: PropagatorSpec,
    params: ModelParams,
    layout: SliceLayout,
    run_dir: str | Path | None = None,
    role: str = "propagator",
    timeout: float | None = None,
) -> PropagatorFn:
    """Bind a spec to a callable mapping (state, slice, iteration) -> state.

    Internal propagators also expose a vectorized ``batch`` entry point for
    the fine phase (lanes stack into one numpy computation) and are marked
    as not releasing the GIL, so the driver never wastes threads on them.
    External propagators block in the child process, where threads do help.
    """

    def fn(state: ModelState, slice_index: int, iteration: int) -> ModelState:
        workdir = None
        if spec.mode == "external" and run_dir is not None:
            prefix = f"k{iteration}" if iteration >= 0 else "serial"
            workdir = Path(run_dir) / prefix / f"slice{slice_index}" / role
        return propagate(
            spec,
            state,
            state.time + layout.slice_length,
            params,
            slice_index=slice_index,
            iteration=iteration,
            workdir=workdir,
            timeout=timeout,
        ).state

    if spec.mode == "internal":
        def batch(states, indices, iteration):
            outs = integrate_batch(states, layout.slice_length, spec.dt, params)
            for n, out in zip(indices, outs):
                if isinstance(out, BlowUpError):
                    out.slice_index = n
                    out.iteration = iteration
            return outs

        fn.batch = batch
        fn.releases_gil = False
    else:
        fn.releases_gil = True
    return fn


def coarse_init_sweep(
    u0: ModelState, cfg: PararealConfig, coarse_fn: PropagatorFn
) -> list[ModelState]:
    """Sequential coarse pass producing the zeroth iterate U^0_0..U^0_N.

    The coarse values double as the retained G^0 for the first correction.
    A blow-up here is fatal: there is nothing to fall back on yet.
    """
    if u0.time != cfg.layout.t0:
        raise ValueError(f"u0 at t={u0.time}, layout starts at t={cfg.layout.t0}")
    states = [u0]
    for n in range(cfg.layout.n_slices):
        states.append(coarse_fn(states[n], n, 0))
    return states


def fine_parallel_phase(
    u_prev: Sequence[ModelState],
    g_prev: Sequence[ModelState | None],
    cfg: PararealConfig,
    fine_fn: PropagatorFn,
    k: int,
) -> tuple[list[ModelState | None], list[ModelState | None], list[BlowUpEvent]]:
    """Concurrent fine propagation for slices n = k-1 .. N_t-1.

    Returns (fine values, corrections, blow-up events), each indexed by
    target slice n+1 over the full 0..N_t range (entries below the loop
    start stay None: those slices are already exact and skipped).
    Results are gathered by slice index, so worker count cannot change
    the outcome bits.
    """
    n_slices = cfg.layout.n_slices
    fine_vals: list[ModelState | None] = [None] * (n_slices + 1)
    deltas: list[ModelState | None] = [None] * (n_slices + 1)
    events: list[BlowUpEvent] = []

    indices = list(range(k - 1, n_slices))
    outcomes: dict[int, ModelState | BlowUpError] = {}
    batch = getattr(fine_fn, "batch", None)
    if batch is not None:
        for n, out in zip(indices, batch([u_prev[n] for n in indices], indices, k)):
            outcomes[n] = out
    elif getattr(fine_fn, "releases_gil", True):
        workers = min(cfg.max_parallel_fine, len(indices)) or 1
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = {n: pool.submit(fine_fn, u_prev[n], n, k) for n in indices}
            for n in indices:
                try:
                    outcomes[n] = futures[n].result()
                except BlowUpError as err:
                    outcomes[n] = err
    else:
        for n in indices:
            try:
                outcomes[n] = fine_fn(u_prev[n], n, k)
            except BlowUpError as err:
                outcomes[n] = err

    for n in indices:
        outcome = outcomes[n]
        if isinstance(outcome, BlowUpError):
            if cfg.on_blow_up == ABORT:
                raise outcome
            events.append(BlowUpEvent(k, n, "fine", str(outcome)))
            continue
        fine_vals[n + 1] = outcome
        deltas[n + 1] = state_diff(outcome, g_prev[n + 1])
    return fine_vals, deltas, events


def correction_sweep(
    u_prev: Sequence[ModelState],
    fine_vals: Sequence[ModelState | None],
    deltas: Sequence[ModelState | None],
    g_prev: Sequence[ModelState | None],
    cfg: PararealConfig,
    coarse_fn: PropagatorFn,
    k: int,
) -> tuple[list[ModelState], list[ModelState | None], list[BlowUpEvent]]:
    """Sequential coarse sweep with corrections for n = k-1 .. N_t-1.

    Slices below the loop start carry over unchanged (they are already
    exact).  A missing correction (failed fine run) keeps the unedited
    coarse value for that slice.  Returns (next iterate, retained coarse
    values, events); a coarse blow-up truncates the sweep and is reported
    by a terminal event — the caller decides whether that aborts the run.
    """
    n_slices = cfg.layout.n_slices
    u_next: list[ModelState] = list(u_prev)
    g_next: list[ModelState | None] = list(g_prev)
    events: list[BlowUpEvent] = []

    for n in range(k - 1, n_slices):
        try:
            g_new = coarse_fn(u_next[n], n, k)
        except BlowUpError as err:
            events.append(BlowUpEvent(k, n, "correction", str(err)))
            if cfg.on_blow_up == ABORT:
                raise
            return u_next, g_next, events
        g_next[n + 1] = g_new
        delta = deltas[n + 1]
        if delta is None:
            u_next[n + 1] = g_new
        elif g_prev[n + 1] is not None and g_new.bit_equal(g_prev[n + 1]):
            # G terms cancel exactly, so the exact-arithmetic update is F.
            u_next[n + 1] = fine_vals[n + 1]
        else:
            u_next[n + 1] = state_add(g_new, delta)
    return u_next, g_next, events


def _errors_at_final(
    state: ModelState, reference: ModelState, fields: Sequence[Field]
) -> dict[Field, tuple[float, float] | None]:
    """Relative norms per monitored field; None marks an undefined ratio
    (identically zero reference field)."""
    out = {}
    for f in fields:
        approx = state.field(f)
        ref = reference.field(f)
        try:
            out[f] = (rel_max_norm(approx, ref), rel_l2_norm(approx, ref))
        except ZeroReferenceError:
            out[f] = None
    return out


def serial_fine_reference(
    u0: ModelState, cfg: PararealConfig, fine_fn: PropagatorFn
) -> list[ModelState]:
    """Restarted serial fine trajectory: one bare fine call per slice."""
    states = [u0]
    for n in range(cfg.layout.n_slices):
        states.append(fine_fn(states[n], n, -1))
    return states


def _write_iterate_checkpoints(
    run_dir: Path, k: int, states: Sequence[ModelState]
) -> None:
    for n, s in enumerate(states):
        write_checkpoint(
            s, None, run_dir / f"k{k}" / f"slice{n}" / "iterate.prcp",
            slice_index=n, iteration=k,
        )


def run_parareal(
    u0: ModelState,
    cfg: PararealConfig,
    params: ModelParams,
    *,
    coarse_fn: PropagatorFn | None = None,
    fine_fn: PropagatorFn | None = None,
    reference: Sequence[ModelState] | None = None,
    run_dir: str | Path | None = None,
    run_id: str = "parareal",
    timeout: float | None = None,
) -> PararealResult:
    """Full Parareal loop with convergence monitoring.

    The error monitor compares the final-time iterate against the restarted
    serial fine run; with epsilon > 0 the loop stops once both norms fall
    below it for every monitored field, and always stops at max_iterations
    (at iteration N_t the fine trajectory is reproduced outright).  When no
    reference is supplied and epsilon stopping is active, the reference is
    computed here with the same fine propagator.
    """
    run_dir = Path(run_dir) if run_dir is not None else None
    if coarse_fn is None:
        coarse_fn = make_propagator(cfg.coarse, params, cfg.layout, run_dir, "coarse", timeout)
    if fine_fn is None:
        fine_fn = make_propagator(cfg.fine, params, cfg.layout, run_dir, "fine", timeout)

    monitoring = cfg.epsilon > 0
    if monitoring and reference is None:
        reference = serial_fine_reference(u0, cfg, fine_fn)
    ref_final = reference[-1] if reference is not None else None

    def record_for(k, states, wall_coarse, wall_fine, wall_corr, flagged):
        errors = None
        if ref_final is not None:
            errors = _errors_at_final(states[-1], ref_final, cfg.monitored_fields)
        return IterationRecord(k, wall_coarse, wall_fine, wall_corr, errors, tuple(flagged))

    t0 = _time.perf_counter()
    u_curr = coarse_init_sweep(u0, cfg, coarse_fn)
    init_wall = _time.perf_counter() - t0
    g_curr: list[ModelState | None] = list(u_curr)

    iterates = [tuple(u_curr)]
    records = [record_for(0, u_curr, init_wall, 0.0, 0.0, ())]
    all_events: list[BlowUpEvent] = []
    first_crossing: dict[Field, int | None] = {}
    stopped = False
    aborted = False
    abort_reason = ""

    if run_dir is not None:
        _write_iterate_checkpoints(run_dir, 0, u_curr)

    def crossed(errors) -> bool:
        ok = True
        for f in cfg.monitored_fields:
            pair = errors[f]
            if pair is not None and pair[0] <= cfg.epsilon and pair[1] <= cfg.epsilon:
                first_crossing.setdefault(f, records[-1].k)
            else:
                # undefined errors (zero reference field) never count as
                # converged; that is a degenerate experiment to flag
                ok = False
        return ok

    if monitoring and crossed(records[0].errors):
        stopped = True

    k = 0
    while not stopped and k < cfg.iterations:
        k += 1
        t0 = _time.perf_counter()
        fine_vals, deltas, fine_events = fine_parallel_phase(u_curr, g_curr, cfg, fine_fn, k)
        fine_wall = _time.perf_counter() - t0

        t0 = _time.perf_counter()
        u_next, g_next, sweep_events = correction_sweep(
            u_curr, fine_vals, deltas, g_curr, cfg, coarse_fn, k
        )
        corr_wall = _time.perf_counter() - t0

        all_events.extend(fine_events)
        all_events.extend(sweep_events)
        if sweep_events:
            # The sequential chain broke: nothing meaningful follows.
            aborted = True
            abort_reason = sweep_events[-1].message

        u_curr, g_curr = u_next, g_next
        iterates.append(tuple(u_curr))
        flagged = [e.slice_index for e in fine_events + sweep_events]
        records.append(record_for(k, u_curr, corr_wall, fine_wall, corr_wall, flagged))
        if run_dir is not None:
            _write_iterate_checkpoints(run_dir, k, u_curr)
        if aborted:
            break
        if monitoring and crossed(records[-1].errors):
            stopped = True

    if monitoring:
        for f in cfg.monitored_fields:
            first_crossing.setdefault(f, None)

    result = PararealResult(
        layout=cfg.layout,
        iterates=tuple(iterates),
        records=tuple(records),
        blow_ups=tuple(all_events),
        stopped_at_epsilon=stopped,
        aborted=aborted,
        abort_reason=abort_reason,
        first_crossing=first_crossing,
    )
    if run_dir is not None:
        _write_manifest(run_dir, run_id, cfg, result)
    return result


def _write_manifest(run_dir: Path, run_id: str, cfg: PararealConfig, result: PararealResult) -> None:
    manifest = {
        "run_id": run_id,
        "layout": {
            "t0": cfg.layout.t0,
            "slice_length": cfg.layout.slice_length,
            "n_slices": cfg.layout.n_slices,
        },
        "coarse_spd": cfg.coarse.spd,
        "fine_spd": cfg.fine.spd,
        "max_iterations": cfg.iterations,
        "epsilon": cfg.epsilon,
        "on_blow_up": cfg.on_blow_up,
        "iterations_run": result.iterations_run,
        "stopped_at_epsilon": result.stopped_at_epsilon,
        "aborted": result.aborted,
        "iterations": [
            {
                "k": rec.k,
                "checkpoints": f"k{rec.k}/slice<n>/iterate.prcp",
                "blow_up_slices": list(rec.blow_up_slices),
            }
            for rec in result.records
        ],
    }
    run_dir.mkdir(parents=True, exist_ok=True)
    path = run_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
