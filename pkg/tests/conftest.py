from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from paratide import Field, Grid, ModelParams, ModelState
from paratide.harness import initial_state
from paratide.solver import integrate

REPO_ROOT = Path(__file__).resolve().parents[1]
CONFIG_DIR = REPO_ROOT / "configs"


@pytest.fixture(scope="session")
def grid():
    return Grid(nx=32, ny=32, dx=50_000.0, dy=50_000.0)


@pytest.fixture(scope="session")
def grid8():
    return Grid(nx=8, ny=8, dx=50_000.0, dy=50_000.0)


@pytest.fixture(scope="session")
def params():
    return ModelParams()


@pytest.fixture(scope="session")
def settled_state(grid, params):
    """Seeded state integrated for one day: cheap but dynamically active."""
    s = initial_state(grid, params, seed=1234)
    return integrate(s, 86400, 300, params).with_time(0)


def random_state(grid, rng, time=0):
    """State with smooth random fields, finite everywhere."""
    data = np.empty((5, grid.ny, grid.nx))
    scales = {Field.U: 0.1, Field.V: 0.1, Field.ETA: 0.05, Field.T: 1.0, Field.S: 0.2}
    base = {Field.U: 0.0, Field.V: 0.0, Field.ETA: 0.0, Field.T: 10.0, Field.S: 35.0}
    for f in Field:
        data[f.value] = base[f] + scales[f] * rng.standard_normal((grid.ny, grid.nx))
    return ModelState(grid, data, time)


def constant_state(grid, u=0.0, v=0.0, eta=0.0, temp=10.0, salt=35.0, time=0):
    fields = {
        Field.U: np.full((grid.ny, grid.nx), float(u)),
        Field.V: np.full((grid.ny, grid.nx), float(v)),
        Field.ETA: np.full((grid.ny, grid.nx), float(eta)),
        Field.T: np.full((grid.ny, grid.nx), float(temp)),
        Field.S: np.full((grid.ny, grid.nx), float(salt)),
    }
    return ModelState.from_fields(grid, fields, time)
