"""Grid, model state container, and the exact linear state algebra.

The five prognostic fields live in one contiguous ``(5, ny, nx)`` float64
block so that the correction algebra and the time stepper work on whole
states with single array operations.  States are immutable value objects:
arrays are frozen after construction and every operation returns a fresh
state, so states can be shared freely between concurrent workers.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping

import numpy as np

from .errors import GridMismatchError, NonFiniteError

DEFAULT_VELOCITY_CAP = 100.0  # m/s; ~100x any physical ocean velocity


class Field(Enum):
    """The five prognostic fields, in serialization order."""

    U = 0      # zonal velocity (m/s)
    V = 1      # meridional velocity (m/s)
    ETA = 2    # surface elevation (m)
    T = 3      # temperature (degC)
    S = 4      # salinity (psu)


FIELD_ORDER = (Field.U, Field.V, Field.ETA, Field.T, Field.S)
N_FIELDS = len(FIELD_ORDER)


@dataclass(frozen=True)
class Grid:
    """Doubly periodic structured grid.

    nx, ny are cell counts (at least 4 so the centered stencils have three
    distinct neighbours); dx, dy are cell sizes in meters.
    """

    nx: int
    ny: int
    dx: float
    dy: float

    def __post_init__(self):
        if self.nx < 4 or self.ny < 4:
            raise ValueError(f"grid must be at least 4x4, got {self.nx}x{self.ny}")
        if self.dx <= 0 or self.dy <= 0:
            raise ValueError("dx and dy must be positive")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.ny, self.nx)

    @property
    def size(self) -> int:
        return self.nx * self.ny


def _freeze(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


def _stack_fields(grid: Grid, fields: Mapping[Field, np.ndarray]) -> np.ndarray:
    missing = [f for f in FIELD_ORDER if f not in fields]
    if missing:
        raise ValueError(f"missing fields: {missing}")
    data = np.empty((N_FIELDS, grid.ny, grid.nx), dtype=np.float64)
    for f in FIELD_ORDER:
        arr = np.asarray(fields[f], dtype=np.float64)
        if arr.size != grid.size:
            raise ValueError(
                f"field {f.name} has {arr.size} values, grid wants {grid.size}"
            )
        data[f.value] = arr.reshape(grid.ny, grid.nx)
    return data


@dataclass(frozen=True)
class ModelState:
    """All five prognostic fields on a grid at one integer-second time stamp.

    Times are integer seconds so that step arithmetic with divisors of a day
    stays exact; non-integer stamps are rejected up front.
    """

    grid: Grid
    data: np.ndarray          # (5, ny, nx) float64, frozen
    time: int

    def __post_init__(self):
        if not isinstance(self.time, (int, np.integer)) or isinstance(self.time, bool):
            raise ValueError(f"time must be an integer number of seconds, got {self.time!r}")
        if self.time < 0:
            raise ValueError(f"time must be >= 0, got {self.time}")
        object.__setattr__(self, "time", int(self.time))
        if self.data.shape != (N_FIELDS, self.grid.ny, self.grid.nx):
            raise ValueError(
                f"data shape {self.data.shape} does not match grid {self.grid.shape}"
            )
        if self.data.dtype != np.float64:
            object.__setattr__(self, "data", self.data.astype(np.float64))
        _freeze(self.data)

    @classmethod
    def from_fields(cls, grid: Grid, fields: Mapping[Field, np.ndarray], time: int) -> "ModelState":
        return cls(grid, _stack_fields(grid, fields), time)

    @classmethod
    def zeros(cls, grid: Grid, time: int = 0) -> "ModelState":
        return cls(grid, np.zeros((N_FIELDS, grid.ny, grid.nx)), time)

    @property
    def fields(self) -> dict[Field, np.ndarray]:
        return {f: self.data[f.value] for f in FIELD_ORDER}

    def field(self, f: Field) -> np.ndarray:
        return self.data[f.value]

    def with_time(self, time: int) -> "ModelState":
        return ModelState(self.grid, self.data, time)

    def with_data(self, data: np.ndarray) -> "ModelState":
        return ModelState(self.grid, data, self.time)

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.data).all())

    def bit_equal(self, other: "ModelState") -> bool:
        """Bitwise equality of every field value plus grid and time stamp."""
        return (
            self.grid == other.grid
            and self.time == other.time
            and self.data.tobytes() == other.data.tobytes()
        )


@dataclass(frozen=True)
class Tendency:
    """Time derivatives of all five fields, same layout as ModelState."""

    grid: Grid
    data: np.ndarray          # (5, ny, nx) float64, frozen

    def __post_init__(self):
        if self.data.shape != (N_FIELDS, self.grid.ny, self.grid.nx):
            raise ValueError(
                f"tendency shape {self.data.shape} does not match grid {self.grid.shape}"
            )
        _freeze(self.data)

    def field(self, f: Field) -> np.ndarray:
        return self.data[f.value]


@dataclass(frozen=True)
class StepHistory:
    """Current state plus up to three prior tendency evaluations.

    Each entry is (time stamp, tendency); stamps are strictly increasing,
    uniformly spaced by the active step size, and the most recent entry was
    evaluated exactly one step before ``current.time``.  This is precisely
    the multistep memory a warm restart preserves and a cold restart drops.
    """

    current: ModelState
    tendencies: tuple[tuple[int, Tendency], ...] = field(default=())

    def __post_init__(self):
        if len(self.tendencies) > 3:
            raise ValueError("history holds at most 3 tendencies")
        stamps = [t for t, _ in self.tendencies]
        if any(b <= a for a, b in zip(stamps, stamps[1:])):
            raise ValueError("history time stamps must be strictly increasing")
        gaps = {b - a for a, b in zip(stamps, stamps[1:])}
        if len(gaps) > 1:
            raise ValueError(f"history time stamps must be uniformly spaced, gaps {sorted(gaps)}")

    def __len__(self) -> int:
        return len(self.tendencies)


@dataclass(frozen=True)
class BlowUpReport:
    """First violation found by validate_state."""

    field_name: Field
    index: tuple[int, int]    # (row, col) of the first offending value
    value: float
    reason: str               # "non_finite" or "velocity_cap"

    def __str__(self) -> str:
        return (
            f"blow-up in {self.field_name.name} at {self.index}: "
            f"{self.value!r} ({self.reason})"
        )


def _check_compatible(a: ModelState, b: ModelState) -> None:
    if a.grid != b.grid:
        raise GridMismatchError(f"grids differ: {a.grid} vs {b.grid}")
    if not a.is_finite() or not b.is_finite():
        raise NonFiniteError("state algebra requires finite operands")


def state_diff(a: ModelState, b: ModelState) -> ModelState:
    """Exact fieldwise subtraction a - b; the result keeps a's time stamp."""
    _check_compatible(a, b)
    return ModelState(a.grid, a.data - b.data, a.time)


def state_add(a: ModelState, b: ModelState) -> ModelState:
    """Exact fieldwise sum a + b; the result keeps a's time stamp."""
    _check_compatible(a, b)
    return ModelState(a.grid, a.data + b.data, a.time)


def validate_state(s: ModelState, velocity_cap: float = DEFAULT_VELOCITY_CAP) -> BlowUpReport | None:
    """Return None if the state is sane, else a report on the first offender.

    A state blows up when any value is non-finite or when either velocity
    component exceeds the cap in magnitude.  The healthy path is a pair of
    cheap whole-array checks; offender lookup only runs on failure.
    """
    finite = np.isfinite(s.data)
    if not finite.all():
        flat = int(np.argmax(~finite))
        f_idx, row, col = np.unravel_index(flat, s.data.shape)
        return BlowUpReport(
            field_name=FIELD_ORDER[f_idx],
            index=(int(row), int(col)),
            value=float(s.data[f_idx, row, col]),
            reason="non_finite",
        )
    if np.abs(s.data[:2]).max() > velocity_cap:
        for f in (Field.U, Field.V):
            speed = np.abs(s.data[f.value])
            if speed.max() > velocity_cap:
                flat = int(np.argmax(speed > velocity_cap))
                row, col = np.unravel_index(flat, speed.shape)
                return BlowUpReport(
                    field_name=f,
                    index=(int(row), int(col)),
                    value=float(s.data[f.value, row, col]),
                    reason="velocity_cap",
                )
    return None
