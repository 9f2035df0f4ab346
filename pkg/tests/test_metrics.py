import math

import numpy as np
import pytest

from paratide import (
    ModelParams,
    PropagatorSpec,
    SliceLayout,
    max_profitable_iterations,
    measure_runtime_ratio,
    rel_l2_norm,
    rel_max_norm,
    speedup_bound,
    speedup_estimate,
    time_averaged_error_series,
)
from paratide.errors import LayoutMismatchError, ZeroReferenceError
from paratide.metrics import SliceAverages, first_crossing_iteration
from paratide.state import Field


# --------------------------------------------------------------------------
# Norms against naive loop oracles

def oracle_max_norm(approx, ref):
    num = 0.0
    den = 0.0
    for a, r in zip(approx.ravel(), ref.ravel()):
        num = max(num, abs(a - r))
        den = max(den, abs(r))
    return num / den


def oracle_l2_norm(approx, ref):
    # compensated (Kahan) summation of the squares
    def sumsq(values):
        total, comp = 0.0, 0.0
        for v in values.ravel():
            y = v * v - comp
            t = total + y
            comp = (t - total) - y
            total = t
        return total

    return math.sqrt(sumsq(approx - ref)) / math.sqrt(sumsq(ref))


def test_identical_arrays_have_zero_error():
    rng = np.random.default_rng(1)
    a = rng.standard_normal(64)
    assert rel_max_norm(a, a) == 0.0
    assert rel_l2_norm(a, a) == 0.0


def test_constant_shift_max_norm():
    ref = np.array([1.0, -3.0, 2.0])
    approx = ref + 0.5
    assert rel_max_norm(approx, ref) == 0.5 / 3.0


def test_single_element_l2():
    assert rel_l2_norm(np.array([2.5]), np.array([2.0])) == 0.5 / 2.0


def test_max_norm_matches_oracle_exactly():
    rng = np.random.default_rng(2)
    approx = rng.standard_normal(100)
    ref = rng.standard_normal(100)
    assert rel_max_norm(approx, ref) == oracle_max_norm(approx, ref)


def test_l2_norm_matches_compensated_oracle():
    rng = np.random.default_rng(3)
    approx = rng.standard_normal(100)
    ref = rng.standard_normal(100)
    got = rel_l2_norm(approx, ref)
    want = oracle_l2_norm(approx, ref)
    assert abs(got - want) <= 1e-15 * want


def test_zero_reference_is_an_error_not_a_value():
    with pytest.raises(ZeroReferenceError):
        rel_max_norm(np.ones(4), np.zeros(4))
    with pytest.raises(ZeroReferenceError):
        rel_l2_norm(np.ones(4), np.zeros(4))


def test_norm_axioms_random_sweep():
    rng = np.random.default_rng(4)
    for _ in range(200):
        approx = rng.standard_normal(16)
        ref = rng.standard_normal(16)
        scale = float(rng.uniform(0.1, 10.0))
        for norm in (rel_max_norm, rel_l2_norm):
            value = norm(approx, ref)
            assert value >= 0.0
            # the ratio is scale-free
            assert np.isclose(norm(approx * scale, ref * scale), value, rtol=1e-12)
        assert rel_max_norm(ref, ref) == 0.0


# --------------------------------------------------------------------------
# Speedup model

def test_speedup_estimate_values():
    assert speedup_estimate(1, 12, 2.0) == pytest.approx(12.0 / 13.0, rel=1e-15)
    assert speedup_estimate(1, 12, 2.0) < 1.0
    assert speedup_estimate(6, 12, 8.0) == pytest.approx(8.0 / 11.0, rel=1e-15)
    # cross-check with the runtime-ratio form N_t m / ((k+1) N_t + k m)
    for k, nt, m in [(1, 12, 2.0), (3, 8, 5.0), (6, 12, 8.0)]:
        direct = nt * m / ((k + 1) * nt + k * m)
        assert speedup_estimate(k, nt, m) == pytest.approx(direct, rel=1e-14)


def test_speedup_estimate_limit_in_m():
    # m -> infinity: S -> N_t / k
    assert speedup_estimate(3, 12, 1e12) == pytest.approx(4.0, rel=1e-9)


def test_speedup_bound_values():
    assert speedup_bound(6, 12, 8.0) == pytest.approx(8.0 / 7.0, rel=1e-15)
    assert speedup_bound(1, 12, 2.0) == 1.0
    assert speedup_bound(1, 5, 2.0) == 1.0


def test_bound_dominates_estimate_random_sweep():
    rng = np.random.default_rng(5)
    for _ in range(1000):
        k = int(rng.integers(1, 40))
        nt = int(rng.integers(1, 64))
        m = float(rng.uniform(0.01, 100.0))
        assert speedup_bound(k, nt, m) >= speedup_estimate(k, nt, m)


def test_argument_validation():
    with pytest.raises(ValueError):
        speedup_estimate(0, 12, 2.0)
    with pytest.raises(ValueError):
        speedup_bound(1, 0, 2.0)
    with pytest.raises(ValueError):
        speedup_estimate(1, 12, 0.0)


def brute_force_profitable(m, nt):
    best = 0
    for k in range(1, 10 * nt + 1):
        if min(m / (k + 1), nt / k) > 1.0:
            best = k
    return best


def test_profitable_iterations_known_limits():
    assert max_profitable_iterations(2.0, 12) == 0
    assert max_profitable_iterations(4.0, 12) == 2
    assert max_profitable_iterations(8.0, 12) == 6


def test_profitable_iterations_matches_brute_force():
    for m in range(1, 65):
        for nt in (1, 2, 3, 5, 8, 13, 21, 34, 64):
            got = max_profitable_iterations(float(m), nt)
            want = brute_force_profitable(float(m), nt)
            assert got == want, (m, nt)
            # closed form for integer m, clamped at never-profitable
            assert got == max(0, min(m - 2, nt - 1)), (m, nt)


def test_first_crossing_helper():
    errors = {0: (0.5, 0.3), 1: (0.02, 0.2), 2: (0.001, 0.004), 3: (0.5, 0.5)}
    assert first_crossing_iteration(errors, 1e-2) == 2
    assert first_crossing_iteration(errors, 1e-6) is None


# --------------------------------------------------------------------------
# Runtime-ratio measurement (small grid keeps the timings honest but quick)

@pytest.fixture(scope="module")
def ratio_state():
    from paratide import Grid
    from paratide.harness import initial_state

    grid = Grid(16, 16, 50_000.0, 50_000.0)
    return initial_state(grid, ModelParams(), seed=7)


def test_runtime_ratio_self_is_one(ratio_state):
    r = measure_runtime_ratio(
        PropagatorSpec(36), PropagatorSpec(36, mode="internal"), ratio_state,
        86400, ModelParams(), repetitions=9,
    )
    assert abs(r.m - 1.0) <= 0.10


def test_runtime_ratio_doubling(ratio_state):
    r = measure_runtime_ratio(
        PropagatorSpec(36), PropagatorSpec(72), ratio_state, 86400, ModelParams(),
        repetitions=9,
    )
    assert abs(r.m - 2.0) <= 0.25 * 2.0


def test_runtime_ratio_requires_internal(ratio_state):
    ext = PropagatorSpec(72, mode="external", command=("true",))
    with pytest.raises(ValueError):
        measure_runtime_ratio(PropagatorSpec(36), ext, ratio_state, 86400, ModelParams())


# --------------------------------------------------------------------------
# Time-averaged error series

def toy_averages(spd, layout, values):
    means = tuple(np.full((5, 4, 4), v) for v in values)
    return SliceAverages(spd=spd, layout=layout, means=means)


def test_series_of_reference_is_zero():
    layout = SliceLayout(t0=0, slice_length=86400, n_slices=2)
    ref = toy_averages(1440, layout, [1.0, 2.0])
    series = time_averaged_error_series([ref], 1440, fields=(Field.T,))
    assert series[1440][Field.T] == (0.0, 0.0)


def test_two_slice_toy_matches_hand_computation():
    layout = SliceLayout(t0=0, slice_length=86400, n_slices=2)
    ref = toy_averages(1440, layout, [2.0, 4.0])
    run = toy_averages(36, layout, [2.5, 3.0])
    series = time_averaged_error_series([run, ref], 1440, fields=(Field.T,))
    assert series[36][Field.T] == (0.5 / 2.0, 1.0 / 4.0)


def test_layout_mismatch_rejected():
    l1 = SliceLayout(t0=0, slice_length=86400, n_slices=2)
    l2 = SliceLayout(t0=0, slice_length=43200, n_slices=2)
    with pytest.raises(LayoutMismatchError):
        time_averaged_error_series(
            [toy_averages(36, l1, [1, 2]), toy_averages(1440, l2, [1, 2])], 1440
        )
    with pytest.raises(LayoutMismatchError):
        time_averaged_error_series([toy_averages(36, l1, [1, 2])], 1440)


def test_error_ordering_by_step_size(settled_state, params):
    # coarser stepping sits farther from the fine reference on slice one
    from paratide.harness import slice_averaged_run

    layout = SliceLayout(t0=0, slice_length=43200, n_slices=2)
    runs = [
        slice_averaged_run(settled_state, layout, spd, params)
        for spd in (36, 72, 144, 1440)
    ]
    series = time_averaged_error_series(runs, 1440, fields=(Field.T,))
    first = {spd: series[spd][Field.T][0] for spd in (36, 72, 144)}
    assert first[36] > first[72] > first[144] > 0.0


def test_speedup_model_object():
    from paratide.metrics import SpeedupModel

    model = SpeedupModel(n_slices=12, runtime_ratio=8.0, tau_g=10.0)
    assert model.estimate(6) == speedup_estimate(6, 12, 8.0)
    assert model.bound(6) == speedup_bound(6, 12, 8.0)
    assert model.max_profitable() == 6
    # estimate equals serial / parareal runtime by construction
    assert model.serial_seconds() / model.parareal_seconds(6) == pytest.approx(
        model.estimate(6), rel=1e-14
    )
    assert SpeedupModel(12, 8.0).serial_seconds() is None
    with pytest.raises(ValueError):
        SpeedupModel(0, 1.0)
    with pytest.raises(ValueError):
        SpeedupModel(12, 0.0)
