import sys

import pytest

from paratide import (
    PropagatorSpec,
    SliceLayout,
    propagate,
    rel_max_norm,
    run_external,
)
from paratide.errors import (
    BlowUpError,
    ExternalTimeoutError,
    SpawnFailureError,
    StepMismatchError,
)
from paratide.propagator import consecutive_run, restarted_serial_run, split_run
from paratide.solver import integrate

SINGLE_SHOT = (sys.executable, "-m", "paratide", "single-shot")


def test_spec_validation():
    with pytest.raises(ValueError):
        PropagatorSpec(spd=77)            # 86400 % 77 != 0
    with pytest.raises(ValueError):
        PropagatorSpec(spd=36, mode="external")   # no command
    with pytest.raises(ValueError):
        PropagatorSpec(spd=36, restart_policy="hot")
    assert PropagatorSpec(36).dt == 2400


def test_layout_helpers():
    layout = SliceLayout(t0=0, slice_length=2400, n_slices=12)
    assert layout.t_end == 28800
    assert layout.boundaries()[:3] == (0, 2400, 4800)
    assert layout.compatible_with(PropagatorSpec(36))
    assert not layout.compatible_with(PropagatorSpec(24))  # 3600 s step


def test_internal_single_step_slice(settled_state, params):
    # slice length equal to the coarse step: exactly one time step
    spec = PropagatorSpec(36)
    out = propagate(spec, settled_state, settled_state.time + 2400, params)
    expected = integrate(settled_state, settled_state.time + 2400, 2400, params)
    assert out.state.bit_equal(expected)
    assert out.history is None  # cold policy drops the memory


def test_zero_length_slice_rejected(settled_state, params):
    with pytest.raises(StepMismatchError):
        propagate(PropagatorSpec(36), settled_state, settled_state.time, params)


def test_warm_split_is_bit_exact(settled_state, params):
    spec = PropagatorSpec(36, restart_policy="warm")
    layout = SliceLayout(t0=settled_state.time, slice_length=43200, n_slices=2)
    whole = consecutive_run(spec, settled_state, settled_state.time + 86400, params)
    chained = split_run(spec, settled_state, layout, params)
    assert chained.bit_equal(whole)


def test_cold_split_deviates_but_stays_small(settled_state, params):
    # The restart pathology: a cold split differs from the unsplit run,
    # but over one day the deviation stays below the pinned 1e-3 bound.
    spec = PropagatorSpec(36, restart_policy="cold")
    layout = SliceLayout(t0=settled_state.time, slice_length=43200, n_slices=2)
    whole = consecutive_run(spec, settled_state, settled_state.time + 86400, params)
    chained = split_run(spec, settled_state, layout, params)
    assert not chained.bit_equal(whole)
    worst = max(rel_max_norm(chained.field(f), whole.field(f)) for f in chained.fields)
    assert 0.0 < worst < 1e-3


def test_restarted_serial_run_boundaries(settled_state, params):
    layout = SliceLayout(t0=settled_state.time, slice_length=4800, n_slices=3)
    states = restarted_serial_run(PropagatorSpec(36), settled_state, layout, params)
    assert len(states) == 4
    assert [s.time for s in states] == list(layout.boundaries())
    # each hop is an independent cold integration
    hop = integrate(states[1], states[1].time + 4800, 2400, params)
    assert states[2].bit_equal(hop)


# --------------------------------------------------------------------------
# run_external

def test_run_external_success(tmp_path):
    report = run_external([sys.executable, "-c", "print('ok')"], tmp_path / "w")
    assert report.returncode == 0
    assert "ok" in report.log_path.read_text()


def test_run_external_nonzero_exit_reported_not_raised(tmp_path):
    report = run_external([sys.executable, "-c", "raise SystemExit(9)"], tmp_path / "w")
    assert report.returncode == 9


def test_run_external_spawn_failure(tmp_path):
    with pytest.raises(SpawnFailureError):
        run_external(["/no/such/binary"], tmp_path / "w")


def test_run_external_timeout_kills(tmp_path):
    with pytest.raises(ExternalTimeoutError):
        run_external(
            [sys.executable, "-c", "import time; time.sleep(60)"],
            tmp_path / "w",
            timeout=0.5,
        )


def test_run_external_concurrent_logs_are_complete(tmp_path):
    from concurrent.futures import ThreadPoolExecutor

    script = "import sys\nfor i in range(200): print(f'line{i}')"
    dirs = [tmp_path / "a", tmp_path / "b"]
    with ThreadPoolExecutor(max_workers=2) as pool:
        futures = [
            pool.submit(run_external, [sys.executable, "-c", script], d) for d in dirs
        ]
        reports = [f.result() for f in futures]
    for report in reports:
        lines = report.log_path.read_text().splitlines()
        assert lines == [f"line{i}" for i in range(200)]


# --------------------------------------------------------------------------
# External-mode propagate against the engine's own CLI

def test_external_propagate_matches_internal(tmp_path, settled_state, params):
    t_end = settled_state.time + 2400
    internal = propagate(PropagatorSpec(72), settled_state, t_end, params)
    spec = PropagatorSpec(72, mode="external", command=SINGLE_SHOT)
    external = propagate(
        spec, settled_state, t_end, params, workdir=tmp_path / "w", slice_index=0
    )
    assert external.state.bit_equal(internal.state)
    assert (tmp_path / "w" / "in.prcp").exists()
    assert (tmp_path / "w" / "out.prcp").exists()
    assert (tmp_path / "w" / "run.log").exists()


def test_external_warm_split_matches_consecutive(tmp_path, settled_state, params):
    spec = PropagatorSpec(
        36, mode="external", command=SINGLE_SHOT, restart_policy="warm",
        workdir_template=str(tmp_path / "k{iteration}" / "s{slice}"),
    )
    layout = SliceLayout(t0=settled_state.time, slice_length=7200, n_slices=2)
    chained = split_run(spec, settled_state, layout, params)
    whole = consecutive_run(
        PropagatorSpec(36, restart_policy="warm"), settled_state,
        settled_state.time + 14400, params,
    )
    assert chained.bit_equal(whole)


def test_external_failure_is_blow_up_with_context(tmp_path, settled_state, params):
    spec = PropagatorSpec(
        36, mode="external", command=(sys.executable, "-c", "raise SystemExit(3)")
    )
    with pytest.raises(BlowUpError) as err:
        propagate(
            spec, settled_state, settled_state.time + 2400, params,
            workdir=tmp_path / "w", slice_index=5, iteration=2,
        )
    assert err.value.slice_index == 5
    assert err.value.iteration == 2
    assert err.value.log_path is not None


def test_external_missing_output_is_blow_up(tmp_path, settled_state, params):
    spec = PropagatorSpec(
        36, mode="external", command=(sys.executable, "-c", "pass")
    )
    with pytest.raises(BlowUpError) as err:
        propagate(
            spec, settled_state, settled_state.time + 2400, params,
            workdir=tmp_path / "w",
        )
    assert "no output" in str(err.value)
