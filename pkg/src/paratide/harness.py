"""Experiment harness: spin-up, reference management, studies, reports.

A run starts from a seeded, spun-up state, executes the parallel-in-time
loop once per fine step-count, evaluates both error norms per iteration
against a cached restarted serial fine reference, and emits a CSV, a text
table and a JSON report.  Reference trajectories and the spun-up state are
cached by a hash of everything they depend on, so repeated experiments
skip the serial recomputation.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import read_checkpoint, write_checkpoint
from .config import ExperimentConfig
from .errors import IOFailureError, ValidationError, ZeroReferenceError
from .metrics import (
    ERROR_CSV_HEADER,
    SliceAverages,
    first_crossing_iteration,
    max_profitable_iterations,
    rel_l2_norm,
    rel_max_norm,
    speedup_bound,
    speedup_estimate,
    time_averaged_error_series,
)
from .parareal import PararealConfig, PararealResult, run_parareal
from .propagator import PropagatorSpec, SliceLayout, consecutive_run, split_run
from .solver import (
    SECONDS_PER_DAY,
    ModelParams,
    StepHistory,
    ab3_step,
    integrate,
    integrate_history,
)
from .state import Field, FIELD_ORDER, Grid, ModelState

_NOISE_MODES = 3


def runs_root(config: ExperimentConfig) -> Path:
    """Run-directory root; the PARAREAL_RUNS_DIR env var wins over config."""
    override = os.environ.get("PARAREAL_RUNS_DIR")
    return Path(override) if override else Path(config.output_dir)


def _band_limited_noise(rng: np.random.Generator, grid: Grid, amp: float) -> np.ndarray:
    """Smooth random field from a handful of low-wavenumber cosine modes."""
    x = np.arange(grid.nx, dtype=np.float64)[None, :] / grid.nx
    y = np.arange(grid.ny, dtype=np.float64)[:, None] / grid.ny
    modes = [
        (kx, ky)
        for kx in range(0, _NOISE_MODES + 1)
        for ky in range(-_NOISE_MODES, _NOISE_MODES + 1)
        if (kx, ky) != (0, 0) and not (kx == 0 and ky < 0)
        and kx * kx + ky * ky <= _NOISE_MODES * _NOISE_MODES
    ]
    out = np.zeros((grid.ny, grid.nx))
    scale = amp / np.sqrt(len(modes))
    for kx, ky in modes:
        coeff = scale * rng.standard_normal()
        phase = rng.uniform(0.0, 2.0 * np.pi)
        out += coeff * np.cos(2.0 * np.pi * (kx * x + ky * y) + phase)
    return out


def initial_state(grid: Grid, params: ModelParams, seed: int) -> ModelState:
    """Seeded smooth initial fields with discretely balanced velocities.

    The elevation noise is turned into velocities through the same
    centered differences the core uses, so the initial state starts out in
    geostrophic balance on the grid rather than in the continuum.
    """
    rng = np.random.default_rng(seed)
    eta = _band_limited_noise(rng, grid, 1.0e-3)
    temp = 10.0 + _band_limited_noise(rng, grid, 0.5)
    salt = 35.0 + _band_limited_noise(rng, grid, 0.05)

    deta_dx = (np.roll(eta, -1, axis=1) - np.roll(eta, 1, axis=1)) / (2.0 * grid.dx)
    deta_dy = (np.roll(eta, -1, axis=0) - np.roll(eta, 1, axis=0)) / (2.0 * grid.dy)
    u = -(params.g / params.f0) * deta_dy
    v = (params.g / params.f0) * deta_dx

    return ModelState.from_fields(
        grid,
        {Field.U: u, Field.V: v, Field.ETA: eta, Field.T: temp, Field.S: salt},
        time=0,
    )


def _cache_dir(config: ExperimentConfig) -> Path:
    return runs_root(config) / "cache" / config.hash()


def spin_up(config: ExperimentConfig, duration: int | None = None) -> ModelState:
    """Integrate the seeded state onto the model's attractor (cached).

    duration defaults to the configured spin-up; zero returns the seeded
    state unchanged.  The result is re-stamped to the layout start so
    experiments can treat it as their t0 state.
    """
    if duration is None:
        duration = int(round(config.spin_up_days * SECONDS_PER_DAY))
    dt = SECONDS_PER_DAY // config.spin_up_spd
    if duration % dt != 0:
        raise ValidationError(
            f"spin-up of {duration}s is not a multiple of the {dt}s spin-up step"
        )

    cache = _cache_dir(config) / f"init_{duration}.prcp"
    if cache.exists():
        return read_checkpoint(cache, grid=config.grid).state.with_time(config.layout.t0)

    state = initial_state(config.grid, config.params, config.seed)
    if duration > 0:
        state = integrate(state, duration, dt, config.params)
    write_checkpoint(state, None, cache)
    return state.with_time(config.layout.t0)


def serial_reference(
    config: ExperimentConfig, fine_spd: int, u0: ModelState
) -> list[ModelState]:
    """Restarted serial fine trajectory at all slice boundaries (cached)."""
    layout = config.layout
    ref_dir = _cache_dir(config) / f"ref{fine_spd}"
    marker = ref_dir / "complete"
    if marker.exists():
        return [
            read_checkpoint(ref_dir / f"slice{n}.prcp", grid=config.grid).state
            for n in range(layout.n_slices + 1)
        ]

    dt = SECONDS_PER_DAY // fine_spd
    states = [u0]
    for n in range(layout.n_slices):
        states.append(
            integrate(states[n], layout.t0 + (n + 1) * layout.slice_length, dt, config.params)
        )
    for n, s in enumerate(states):
        write_checkpoint(s, None, ref_dir / f"slice{n}.prcp", slice_index=n)
    marker.write_text("ok\n")
    return states


# --------------------------------------------------------------------------
# Run report

@dataclass(frozen=True)
class ErrorCell:
    k: int
    field_name: str
    e_inf: float | None
    e_2: float | None
    status: str                     # "ok" | "undefined" | "skipped"


@dataclass(frozen=True)
class FineRunReport:
    fine_spd: int
    run_id: str
    iterations_run: int
    aborted: bool
    errors: tuple[ErrorCell, ...]
    wall: dict[int, tuple[float, float]]          # k -> (coarse s, fine s)
    blow_ups: tuple[dict, ...]
    first_crossing: dict[str, int | None]
    exact_at_last: dict[str, float] | None        # per field, rel max at k = N_t
    m_nominal: float
    max_profitable_k: int
    speedup_rows: tuple[tuple[int, float, float], ...]   # (k, estimate, bound)


@dataclass(frozen=True)
class RunReport:
    run_id: str
    config_path: str
    config_hash: str
    epsilon: float
    n_slices: int
    slice_length: int
    coarse_spd: int
    monitored: tuple[str, ...]
    fine_runs: tuple[FineRunReport, ...]
    flags: dict[str, bool] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "run_id": self.run_id,
            "config_path": self.config_path,
            "config_hash": self.config_hash,
            "epsilon": self.epsilon,
            "n_slices": self.n_slices,
            "slice_length": self.slice_length,
            "coarse_spd": self.coarse_spd,
            "monitored": list(self.monitored),
            "flags": dict(sorted(self.flags.items())),
            "fine_runs": [
                {
                    "fine_spd": fr.fine_spd,
                    "run_id": fr.run_id,
                    "iterations_run": fr.iterations_run,
                    "aborted": fr.aborted,
                    "m_nominal": fr.m_nominal,
                    "max_profitable_k": fr.max_profitable_k,
                    "first_crossing": fr.first_crossing,
                    "exact_at_last": fr.exact_at_last,
                    "blow_ups": list(fr.blow_ups),
                    "errors": [
                        {
                            "k": c.k, "field": c.field_name, "status": c.status,
                            "E_inf": c.e_inf, "E_2": c.e_2,
                        }
                        for c in fr.errors
                    ],
                    "wall": {str(k): list(v) for k, v in sorted(fr.wall.items())},
                    "speedup": [
                        {"k": k, "estimate": est, "bound": bnd}
                        for k, est, bnd in fr.speedup_rows
                    ],
                }
                for fr in self.fine_runs
            ],
        }


def _error_cells(
    result: PararealResult,
    reference: list[ModelState],
    monitored: tuple[Field, ...],
    n_slices: int,
) -> tuple[ErrorCell, ...]:
    """One cell per (k, field) for k = 0 .. N_t - 1.

    Iterations beyond an aborted run are marked skipped; a zero reference
    norm is reported as undefined instead of dividing.
    """
    ref_final = reference[-1]
    cells = []
    for k in range(n_slices):
        for f in monitored:
            if k > result.iterations_run:
                cells.append(ErrorCell(k, f.name, None, None, "skipped"))
                continue
            approx = result.iterates[k][-1].field(f)
            ref = ref_final.field(f)
            try:
                e_inf = rel_max_norm(approx, ref)
                e_2 = rel_l2_norm(approx, ref)
            except ZeroReferenceError:
                cells.append(ErrorCell(k, f.name, None, None, "undefined"))
                continue
            cells.append(ErrorCell(k, f.name, e_inf, e_2, "ok"))
    return tuple(cells)


def _crossings(
    cells: tuple[ErrorCell, ...], monitored: tuple[Field, ...], epsilon: float
) -> dict[str, int | None]:
    out = {}
    for f in monitored:
        table = {
            c.k: (c.e_inf, c.e_2)
            for c in cells
            if c.field_name == f.name and c.status == "ok"
        }
        out[f.name] = first_crossing_iteration(table, epsilon)
    return out


def run_experiment(
    config: ExperimentConfig,
    run_id: str | None = None,
    *,
    keep_iterate_checkpoints: bool = True,
) -> tuple[RunReport, Path]:
    """Run the configured experiment and emit all report artifacts.

    Returns the report plus the directory they were written to.  Blow-ups
    under the continue policy are recorded, not raised; abort-mode blow-ups
    propagate.
    """
    run_id = run_id or config.run_name()
    root = runs_root(config)
    run_dir = root / run_id
    u0 = spin_up(config)

    fine_reports = []
    for nf in config.fine_spds:
        reference = serial_reference(config, nf, u0)
        sub_id = f"{run_id}-nf{nf}"
        cfg = PararealConfig(
            layout=config.layout,
            coarse=PropagatorSpec(config.coarse_spd, restart_policy=config.restart_policy),
            fine=PropagatorSpec(nf, restart_policy=config.restart_policy),
            max_iterations=config.max_iterations,
            epsilon=0.0,        # run every iteration; crossings are derived below
            on_blow_up=config.on_blow_up,
            max_parallel_fine=config.max_parallel_fine,
            monitored_fields=config.monitored_fields,
        )
        result = run_parareal(
            u0, cfg, config.params,
            run_dir=(run_dir / f"nf{nf}" if keep_iterate_checkpoints else None),
            run_id=sub_id,
        )
        cells = _error_cells(result, reference, config.monitored_fields, config.layout.n_slices)
        crossing = _crossings(cells, config.monitored_fields, config.epsilon)

        exact = None
        if result.iterations_run == config.layout.n_slices and not result.aborted:
            exact = {
                f.name: rel_max_norm(result.final.field(f), reference[-1].field(f))
                for f in FIELD_ORDER
            }

        m_nominal = nf / config.coarse_spd
        fine_reports.append(
            FineRunReport(
                fine_spd=nf,
                run_id=sub_id,
                iterations_run=result.iterations_run,
                aborted=result.aborted,
                errors=cells,
                wall={r.k: (r.wall_coarse_s, r.wall_fine_s) for r in result.records},
                blow_ups=tuple(
                    {"k": e.k, "slice": e.slice_index, "phase": e.phase, "message": e.message}
                    for e in result.blow_ups
                ),
                first_crossing=crossing,
                exact_at_last=exact,
                m_nominal=m_nominal,
                max_profitable_k=max_profitable_iterations(m_nominal, config.layout.n_slices),
                speedup_rows=tuple(
                    (k, speedup_estimate(k, config.layout.n_slices, m_nominal),
                     speedup_bound(k, config.layout.n_slices, m_nominal))
                    for k in range(1, config.layout.n_slices + 1)
                ),
            )
        )

    flags = {"tracer_crossing_anomaly": _tracer_anomaly(fine_reports)}
    report = RunReport(
        run_id=run_id,
        config_path=config.source_path,
        config_hash=config.hash(),
        epsilon=config.epsilon,
        n_slices=config.layout.n_slices,
        slice_length=config.layout.slice_length,
        coarse_spd=config.coarse_spd,
        monitored=tuple(f.name for f in config.monitored_fields),
        fine_runs=tuple(fine_reports),
        flags=flags,
    )
    emit_report(report, "csv", run_dir)
    emit_report(report, "text-table", run_dir)
    _write_json(run_dir / "report.json", report.to_dict())
    return report, run_dir


def _tracer_anomaly(fine_reports: list[FineRunReport]) -> bool:
    """True when a tracer needed more iterations than the zonal velocity.

    Crossings that never happen count as infinity, so a stagnating
    velocity never flags the tracers.
    """
    inf = float("inf")
    for fr in fine_reports:
        if fr.aborted:
            continue
        u_cross = fr.first_crossing.get("U")
        u_val = inf if u_cross is None else u_cross
        for tracer in ("T", "S"):
            t_cross = fr.first_crossing.get(tracer)
            if t_cross is None:
                t_val = inf
            else:
                t_val = t_cross
            if t_val > u_val:
                return True
    return False


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _write_json(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def emit_report(report: RunReport, fmt: str, out_dir: str | Path) -> Path:
    """Write the error CSV or the text table; bytes are deterministic for
    identical reports apart from the timing columns in the CSV."""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        if fmt == "csv":
            path = out_dir / "errors.csv"
            lines = [",".join(ERROR_CSV_HEADER)]
            for fr in report.fine_runs:
                blow_by_k: dict[int, list[str]] = {}
                for b in fr.blow_ups:
                    blow_by_k.setdefault(b["k"], []).append(f"slice{b['slice']}")
                for cell in fr.errors:
                    wall = fr.wall.get(cell.k, (0.0, 0.0))
                    if cell.status == "ok":
                        e_inf, e_2 = _fmt(cell.e_inf), _fmt(cell.e_2)
                    else:
                        e_inf = e_2 = cell.status
                    lines.append(",".join([
                        fr.run_id,
                        str(cell.k),
                        cell.field_name,
                        e_inf,
                        e_2,
                        _fmt(wall[0]),
                        _fmt(wall[1]),
                        ";".join(blow_by_k.get(cell.k, [])),
                    ]))
            path.write_text("\n".join(lines) + "\n")
            return path
        if fmt == "text-table":
            path = out_dir / "report.txt"
            path.write_text(_text_table(report))
            return path
    except OSError as err:
        raise IOFailureError(f"cannot emit report into {out_dir}: {err}") from err
    raise ValueError(f"unknown report format {fmt!r}")


def _text_table(report: RunReport) -> str:
    lines = []
    lines.append(f"run {report.run_id}  (config {report.config_path})")
    lines.append("")
    lines.append("settings")
    lines.append("  dT(s)    T(s)      N_F          N_G  N_t")
    total = report.n_slices * report.slice_length
    nf_list = ",".join(str(fr.fine_spd) for fr in report.fine_runs)
    lines.append(
        f"  {report.slice_length:<8d} {total:<9d} {nf_list:<12s} {report.coarse_spd:<4d} {report.n_slices}"
    )
    lines.append("")
    for fr in report.fine_runs:
        lines.append(
            f"fine spd {fr.fine_spd} (m={fr.m_nominal:g}, profitable K<={fr.max_profitable_k}, "
            f"iterations run {fr.iterations_run}{', ABORTED' if fr.aborted else ''})"
        )
        crossing = ", ".join(
            f"{name}: {'-' if k is None else k}"
            for name, k in sorted(fr.first_crossing.items())
        )
        lines.append(f"  first k with both norms <= {report.epsilon:g}: {crossing}")
        if fr.exact_at_last is not None:
            worst = max(fr.exact_at_last.values())
            lines.append(f"  exact at k=N_t: worst field rel max-norm {worst:.3e}")
        if fr.blow_ups:
            for b in fr.blow_ups:
                lines.append(f"  blow-up: k={b['k']} slice={b['slice']} phase={b['phase']}")
        lines.append("  k  S_estimate  S_bound")
        for k, est, bnd in fr.speedup_rows:
            lines.append(f"  {k:<2d} {est:>10.6f}  {bnd:>8.6f}")
        lines.append("")
    for name, value in sorted(report.flags.items()):
        lines.append(f"flag {name}: {'yes' if value else 'no'}")
    lines.append("")
    return "\n".join(lines)


# --------------------------------------------------------------------------
# Restart-consistency study

@dataclass(frozen=True)
class RestartStudyRow:
    n_slices: int
    slice_seconds: int
    cold_deviation: float         # max over monitored fields, rel max-norm
    warm_deviation: float
    warm_bit_exact: bool


@dataclass(frozen=True)
class RestartStudyReport:
    total_seconds: int
    spd: int
    rows: tuple[RestartStudyRow, ...]
    cold_non_decreasing: bool     # observed property, report-only

    def to_text(self) -> str:
        lines = [
            f"restart consistency study: {self.total_seconds}s at {self.spd} spd",
            "n_slices slice_s  cold_dev      warm_dev  warm_bit_exact",
        ]
        for r in self.rows:
            lines.append(
                f"{r.n_slices:<8d} {r.slice_seconds:<8d} {r.cold_deviation:<13.6e} "
                f"{r.warm_deviation:<9.1e} {'yes' if r.warm_bit_exact else 'NO'}"
            )
        lines.append(
            f"cold deviation non-decreasing in slice count: "
            f"{'yes' if self.cold_non_decreasing else 'no (reported, not asserted)'}"
        )
        lines.append("")
        return "\n".join(lines)


def restart_consistency_study(
    config: ExperimentConfig,
    slice_counts: tuple[int, ...] = (1, 2, 4, 6),
    total_days: float = 1.0,
) -> RestartStudyReport:
    """Quantify split-vs-consecutive deviation for both restart policies.

    A fixed window is split into increasingly many slices; each split run
    chains one propagate call per slice while the consecutive run covers
    the window in one call.  Warm chains must match bit-exactly, cold
    chains deviate.
    """
    total = int(round(total_days * SECONDS_PER_DAY))
    spd = config.coarse_spd
    dt = SECONDS_PER_DAY // spd
    u0 = spin_up(config)

    consecutive = consecutive_run(
        PropagatorSpec(spd, restart_policy="cold"), u0, u0.time + total, config.params
    )

    rows = []
    for n in slice_counts:
        if total % n != 0 or (total // n) % dt != 0:
            raise ValidationError(
                f"cannot split {total}s into {n} slices aligned to the {dt}s step"
            )
        layout = SliceLayout(t0=u0.time, slice_length=total // n, n_slices=n)
        devs = {}
        finals = {}
        for policy in ("cold", "warm"):
            final = split_run(PropagatorSpec(spd, restart_policy=policy), u0, layout, config.params)
            finals[policy] = final
            devs[policy] = max(
                rel_max_norm(final.field(f), consecutive.field(f))
                for f in config.monitored_fields
            )
        rows.append(
            RestartStudyRow(
                n_slices=n,
                slice_seconds=total // n,
                cold_deviation=devs["cold"],
                warm_deviation=devs["warm"],
                warm_bit_exact=finals["warm"].bit_equal(consecutive),
            )
        )

    cold = [r.cold_deviation for r in rows]
    non_decreasing = all(b >= a for a, b in zip(cold, cold[1:]))
    return RestartStudyReport(
        total_seconds=total, spd=spd, rows=tuple(rows), cold_non_decreasing=non_decreasing
    )


# --------------------------------------------------------------------------
# Time-averaged serial error study

def slice_averaged_run(
    u0: ModelState, layout: SliceLayout, spd: int, params: ModelParams
) -> SliceAverages:
    """Serial run restarted per slice, recording slice-time-averaged fields.

    The average is over the states reached after each step within the
    slice, so every slice contributes the same number of samples at every
    step count.
    """
    dt = SECONDS_PER_DAY // spd
    if layout.slice_length % dt != 0:
        raise ValidationError(
            f"slice of {layout.slice_length}s is not a multiple of the {dt}s step"
        )
    n_steps = layout.slice_length // dt
    state = u0
    means = []
    for _ in range(layout.n_slices):
        h = StepHistory(state)
        acc = np.zeros_like(state.data)
        for _ in range(n_steps):
            h = ab3_step(h, dt, params)
            acc += h.current.data
        means.append(acc / n_steps)
        state = h.current
    return SliceAverages(spd=spd, layout=layout, means=tuple(means))


def time_averaged_study(
    config: ExperimentConfig, spd_list: tuple[int, ...] | None = None
) -> dict[int, dict[Field, tuple[float, ...]]]:
    """Per-slice averaged errors of serial runs against the reference spd."""
    if spd_list is None:
        spd_list = tuple(sorted({config.coarse_spd, *config.fine_spds}))
    u0 = spin_up(config)
    all_spds = tuple(sorted({*spd_list, config.reference_spd}))
    runs = [
        slice_averaged_run(u0, config.layout, spd, config.params) for spd in all_spds
    ]
    return time_averaged_error_series(runs, config.reference_spd, config.monitored_fields)


def spin_up_energy_series(
    config: ExperimentConfig, sample_days: tuple[int, ...]
) -> dict[int, float]:
    """Kinetic energy of the spin-up trajectory at the given day marks."""
    from .solver import kinetic_energy

    dt = SECONDS_PER_DAY // config.spin_up_spd
    state = initial_state(config.grid, config.params, config.seed)
    h = StepHistory(state)
    out = {}
    if 0 in sample_days:
        out[0] = kinetic_energy(state)
    for day in sorted(d for d in sample_days if d > 0):
        h = integrate_history(h, day * SECONDS_PER_DAY, dt, config.params)
        out[day] = kinetic_energy(h.current)
    return out
