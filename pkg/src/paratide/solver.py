"""Rotating shallow-water + tracer dynamical core on a doubly periodic grid.

Momentum carries Coriolis rotation, advection, a linear free-surface
pressure gradient, lateral viscosity, and a steady sinusoidal zonal body
force; temperature and salinity are advected in flux form and diffused.
All spatial operators are second-order centered differences with periodic
wrap.  Time integration is third-order Adams-Bashforth, bootstrapped with
one explicit-trapezoid step and one AB2 step so the observed convergence
order stays at three.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import BlowUpError, CFLImpossibleError, NonFiniteError, StepMismatchError
from .state import (
    Field,
    Grid,
    ModelState,
    StepHistory,
    Tendency,
    validate_state,
)

SECONDS_PER_DAY = 86400

# AB coefficients, classic explicit Adams-Bashforth family.
_AB3 = (23.0 / 12.0, -16.0 / 12.0, 5.0 / 12.0)
_AB2 = (1.5, -0.5)


@dataclass(frozen=True)
class ModelParams:
    """Physical parameters of the dynamical core.

    Defaults are the desk-scale calibration: a 50 km grid with a shallow
    equivalent depth puts the 36-steps-per-day coarse step right against
    the gravity-wave CFL bound, and the weak wavenumber-3 wind analog keeps
    velocities small enough that year-long runs stay inside it.
    """

    f0: float = 1.0e-4            # Coriolis parameter (1/s)
    g: float = 9.81               # gravity (m/s^2)
    H: float = 8.0                # mean layer depth (m)
    nu_h: float = 100.0           # horizontal viscosity (m^2/s)
    kappa: float = 50.0           # tracer diffusivity (m^2/s)
    forcing_amp: float = 1.0e-9   # zonal body-force amplitude (m/s^2)
    forcing_wavenumber: int = 3
    velocity_cap: float = 100.0   # |u|,|v| beyond this is a blow-up (m/s)

    def __post_init__(self):
        if self.H <= 0 or self.g <= 0:
            raise ValueError("H and g must be positive")
        if self.nu_h < 0 or self.kappa < 0:
            raise ValueError("nu_h and kappa must be non-negative")
        if int(self.forcing_wavenumber) != self.forcing_wavenumber:
            raise ValueError("forcing_wavenumber must be an integer")


@functools.lru_cache(maxsize=32)
def _zonal_forcing(grid: Grid, amp: float, wavenumber: int) -> np.ndarray:
    """Steady body force on u: amp * sin(2 pi k y / Ly), constant along x."""
    j = np.arange(grid.ny, dtype=np.float64)
    profile = amp * np.sin(2.0 * np.pi * wavenumber * j / grid.ny)
    fx = np.broadcast_to(profile[:, None], (grid.ny, grid.nx)).copy()
    fx.setflags(write=False)
    return fx


_U, _V, _ETA, _T, _S = (f.value for f in (Field.U, Field.V, Field.ETA, Field.T, Field.S))


def _rhs_core(data: np.ndarray, grid: Grid, p: ModelParams) -> np.ndarray:
    """Tendency arithmetic on a (..., 5, ny, nx) block, no checks.

    Works identically on a single state or on a batch of independent
    states stacked along a leading axis: every operation is elementwise
    (or a per-lane shift), so batched results are bit-identical to
    one-by-one evaluation.  The dynamics are autonomous — nothing here
    reads the clock — which is what lets lanes at different time stamps
    share steps.
    """
    # One set of stacked periodic shifts serves gradients, Laplacians AND
    # the tracer fluxes: shifting commutes with elementwise products, so
    # d/dx(uT) is assembled from shifted u and T without extra rolls.
    xp = np.roll(data, -1, axis=-1)
    xm = np.roll(data, 1, axis=-1)
    yp = np.roll(data, -1, axis=-2)
    ym = np.roll(data, 1, axis=-2)

    cx = 0.5 / grid.dx
    cy = 0.5 / grid.dy
    gx = (xp[..., :3, :, :] - xm[..., :3, :, :]) * cx
    gy = (yp[..., :3, :, :] - ym[..., :3, :, :]) * cy
    if grid.dx == grid.dy:
        lap = xp + xm
        lap += yp
        lap += ym
        lap -= 4.0 * data
        lap *= 1.0 / grid.dx**2
    else:
        lap = (xp + xm - 2.0 * data) * (1.0 / grid.dx**2)
        lap += (yp + ym - 2.0 * data) * (1.0 / grid.dy**2)

    u = data[..., _U, :, :]
    v = data[..., _V, :, :]

    out = np.empty_like(data)
    out[..., _U, :, :] = (
        p.f0 * v
        - (u * gx[..., _U, :, :] + v * gy[..., _U, :, :])
        - p.g * gx[..., _ETA, :, :]
        + p.nu_h * lap[..., _U, :, :]
        + _zonal_forcing(grid, p.forcing_amp, int(p.forcing_wavenumber))
    )
    out[..., _V, :, :] = (
        -p.f0 * u
        - (u * gx[..., _V, :, :] + v * gy[..., _V, :, :])
        - p.g * gy[..., _ETA, :, :]
        + p.nu_h * lap[..., _V, :, :]
    )
    out[..., _ETA, :, :] = -p.H * (gx[..., _U, :, :] + gy[..., _V, :, :])

    # Tracers in flux form: the divergence telescopes over the periodic
    # grid, so grid means of T and S are conserved to round-off.
    div = (xp[..., _U : _U + 1, :, :] * xp[..., _T:, :, :]
           - xm[..., _U : _U + 1, :, :] * xm[..., _T:, :, :]) * cx
    div += (yp[..., _V : _V + 1, :, :] * yp[..., _T:, :, :]
            - ym[..., _V : _V + 1, :, :] * ym[..., _T:, :, :]) * cy
    out[..., _T, :, :] = p.kappa * lap[..., _T, :, :] - div[..., 0, :, :]
    out[..., _S, :, :] = p.kappa * lap[..., _S, :, :] - div[..., 1, :, :]

    return out


def rhs(s: ModelState, p: ModelParams) -> Tendency:
    """Assemble the tendency of every field from the current state.

    Deterministic: identical input bits always produce identical output
    bits (pure numpy elementwise arithmetic, fixed evaluation order).
    """
    if not s.is_finite():
        raise NonFiniteError("rhs requires a finite state")
    return Tendency(s.grid, _rhs_core(s.data, s.grid, p))


def ab3_step(h: StepHistory, dt: int, p: ModelParams) -> StepHistory:
    """Advance one step, bootstrapping through trapezoid and AB2.

    With no prior tendencies the step is an explicit trapezoid (Heun)
    step; with one it is two-step Adams-Bashforth; with two or more it is
    AB3.  The fresh tendency is appended to the history and the oldest
    entry beyond three is dropped.
    """
    dt = int(dt)
    if dt <= 0:
        raise StepMismatchError(f"dt must be a positive integer second count, got {dt}")
    s = h.current
    if h.tendencies and h.tendencies[-1][0] != s.time - dt:
        raise StepMismatchError(
            f"history was built at a different step size: last tendency at "
            f"t={h.tendencies[-1][0]}, expected t={s.time - dt}"
        )

    f_n = rhs(s, p)
    n_prior = len(h.tendencies)
    if n_prior == 0:
        predictor = ModelState(s.grid, s.data + dt * f_n.data, s.time + dt)
        f_pred = rhs(predictor, p)
        new_data = s.data + (0.5 * dt) * (f_n.data + f_pred.data)
    elif n_prior == 1:
        f_m1 = h.tendencies[-1][1]
        new_data = f_n.data * (dt * _AB2[0])
        new_data += f_m1.data * (dt * _AB2[1])
        new_data += s.data
    else:
        f_m1 = h.tendencies[-1][1]
        f_m2 = h.tendencies[-2][1]
        new_data = f_n.data * (dt * _AB3[0])
        scratch = f_m1.data * (dt * _AB3[1])
        new_data += scratch
        np.multiply(f_m2.data, dt * _AB3[2], out=scratch)
        new_data += scratch
        new_data += s.data

    new_state = ModelState(s.grid, new_data, s.time + dt)
    report = validate_state(new_state, p.velocity_cap)
    if report is not None:
        raise BlowUpError(f"step to t={new_state.time} diverged: {report}", report)

    tendencies = (h.tendencies + ((s.time, f_n),))[-3:]
    return StepHistory(new_state, tendencies)


def _check_window(t_start: int, t_end: int, dt: int) -> int:
    if dt <= 0 or SECONDS_PER_DAY % dt != 0:
        raise StepMismatchError(f"dt={dt} is not an integer divisor of 86400")
    span = t_end - t_start
    if span <= 0:
        raise StepMismatchError(f"t_end={t_end} must be after t_start={t_start}")
    if span % dt != 0:
        raise StepMismatchError(f"window of {span}s is not a multiple of dt={dt}")
    return span // dt


def integrate_history(h: StepHistory, t_end: int, dt: int, p: ModelParams) -> StepHistory:
    """Step an existing history forward to t_end (warm continuation)."""
    n_steps = _check_window(h.current.time, int(t_end), int(dt))
    for i in range(n_steps):
        try:
            h = ab3_step(h, dt, p)
        except BlowUpError as err:
            err.step = i
            raise
    return h


def integrate(s: ModelState, t_end: int, dt: int, p: ModelParams) -> ModelState:
    """Cold-start integration: the multistep history is rebuilt from scratch.

    This mirrors restart-file continuation, where the integrator memory is
    not part of the restart payload; split runs therefore deviate slightly
    from unsplit ones.  Use integrate_history to carry memory across calls.
    """
    return integrate_history(StepHistory(s), t_end, dt, p).current


def integrate_batch(
    states: Sequence[ModelState], duration: int, dt: int, p: ModelParams
) -> list["ModelState | BlowUpError"]:
    """Cold-start integration of independent states, stacked along a lane axis.

    Bit-identical to calling integrate on each state (the step arithmetic
    replicates ab3_step operation for operation and everything is
    elementwise), but one numpy call now serves every lane, which is what
    makes a wide parallel fine phase cheap in-process.  States may sit at
    different time stamps; the dynamics are autonomous.

    A lane that blows up is reported as a BlowUpError carrying the failing
    step index, without disturbing the other lanes.
    """
    states = list(states)
    if not states:
        return []
    grid = states[0].grid
    for s in states:
        if s.grid != grid:
            raise StepMismatchError("batch lanes must share one grid")
    duration = int(duration)
    dt = int(dt)
    if dt <= 0 or SECONDS_PER_DAY % dt != 0:
        raise StepMismatchError(f"dt={dt} is not an integer divisor of 86400")
    if duration <= 0 or duration % dt != 0:
        raise StepMismatchError(f"window of {duration}s is not a multiple of dt={dt}")
    n_steps = duration // dt

    batch = np.stack([s.data for s in states])
    n_lanes = batch.shape[0]
    alive = np.ones(n_lanes, dtype=bool)
    failures: dict[int, tuple[int, np.ndarray]] = {}

    f_m1 = f_m2 = None
    # Dead lanes keep stepping on NaN/inf values (their results are
    # discarded); silence the numpy noise that produces.
    with np.errstate(over="ignore", invalid="ignore"):
        for i in range(n_steps):
            f_n = _rhs_core(batch, grid, p)
            if i == 0:
                predictor = batch + dt * f_n
                f_pred = _rhs_core(predictor, grid, p)
                batch = batch + (0.5 * dt) * (f_n + f_pred)
            elif i == 1:
                new = f_n * (dt * _AB2[0])
                new += f_m1 * (dt * _AB2[1])
                new += batch
                batch = new
            else:
                new = f_n * (dt * _AB3[0])
                scratch = f_m1 * (dt * _AB3[1])
                new += scratch
                np.multiply(f_m2, dt * _AB3[2], out=scratch)
                new += scratch
                new += batch
                batch = new
            f_m2, f_m1 = f_m1, f_n

            ok = np.isfinite(batch).all(axis=(1, 2, 3))
            ok &= np.abs(batch[:, :2]).max(axis=(1, 2, 3)) <= p.velocity_cap
            for lane in np.nonzero(alive & ~ok)[0]:
                failures[int(lane)] = (i, batch[lane].copy())
                alive[lane] = False

    results: list[ModelState | BlowUpError] = []
    for lane, s in enumerate(states):
        if lane in failures:
            step, data = failures[lane]
            bad = ModelState(grid, data, s.time + (step + 1) * dt)
            report = validate_state(bad, p.velocity_cap)
            results.append(
                BlowUpError(f"step to t={bad.time} diverged: {report}", report, step=step)
            )
        else:
            results.append(ModelState(grid, batch[lane].copy(), s.time + duration))
    return results


@functools.lru_cache(maxsize=1)
def divisors_of_day() -> tuple[int, ...]:
    return tuple(d for d in range(1, SECONDS_PER_DAY + 1) if SECONDS_PER_DAY % d == 0)


def cfl_max_dt(
    s: ModelState,
    p: ModelParams,
    grid: Grid | None = None,
    courant: float = 0.5,
) -> int:
    """Largest divisor of 86400 below the wave+advection CFL bound.

    The raw bound is courant * min(dx, dy) / (sqrt(g H) + max(|u|, |v|));
    rounding is always downward to the nearest admissible step count.
    """
    grid = grid or s.grid
    speed = float(np.sqrt(p.g * p.H))
    umax = float(np.abs(s.field(Field.U)).max(initial=0.0))
    vmax = float(np.abs(s.field(Field.V)).max(initial=0.0))
    denom = speed + max(umax, vmax)
    if not np.isfinite(denom):
        raise CFLImpossibleError("velocity is unbounded; no step size is admissible")
    bound = courant * min(grid.dx, grid.dy) / denom if denom > 0 else float(SECONDS_PER_DAY)
    if bound < 1.0:
        raise CFLImpossibleError(
            f"CFL bound {bound:.3g}s is below the 1s step floor"
        )
    best = 1
    for d in divisors_of_day():
        if d <= bound:
            best = d
        else:
            break
    return best


def kinetic_energy(s: ModelState) -> float:
    """Grid-mean kinetic energy density 0.5 (u^2 + v^2)."""
    u = s.field(Field.U)
    v = s.field(Field.V)
    return float(0.5 * np.mean(u * u + v * v))
