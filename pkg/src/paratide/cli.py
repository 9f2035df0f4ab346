"""Command-line interface.

Subcommands:

    run <config>            full experiment: references, parareal, reports
    serial <config> --spd N restarted serial reference run (cached)
    single-shot ...         one propagation, the external-propagator target
    speedup --m M --nt N    speedup model table
    restart-study <config>  split-vs-consecutive deviation table
    avg-error <config>      per-slice time-averaged serial errors
    emit <report.json>      re-emit a stored report as csv or text-table

Exit codes: 0 success, 2 validation/parse error, 3 blow-up in abort mode,
4 I/O failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import harness
from .checkpoint import read_checkpoint, write_checkpoint
from .config import parse_config
from .errors import (
    BlowUpError,
    ConfigError,
    EngineError,
    IOFailureError,
)
from .harness import RunReport, FineRunReport, ErrorCell
from .metrics import max_profitable_iterations, speedup_bound, speedup_estimate
from .solver import SECONDS_PER_DAY, ModelParams, integrate_history
from .state import StepHistory

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_BLOW_UP = 3
EXIT_IO = 4


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="paratide")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run the configured experiment")
    p_run.add_argument("config")
    p_run.add_argument("--run-id", default=None)

    p_serial = sub.add_parser("serial", help="restarted serial reference run")
    p_serial.add_argument("config")
    p_serial.add_argument("--spd", type=int, required=True)
    p_serial.add_argument("--out", default=None, help="write the final state here")

    p_single = sub.add_parser("single-shot", help="one propagation via checkpoint files")
    p_single.add_argument("--in", dest="in_path", required=True)
    p_single.add_argument("--out", dest="out_path", required=True)
    p_single.add_argument("--t-end", dest="t_end", type=int, required=True)
    p_single.add_argument("--spd", type=int, required=True)
    p_single.add_argument("--config", default=None, help="model parameters (defaults otherwise)")

    p_speed = sub.add_parser("speedup", help="speedup model table")
    p_speed.add_argument("--m", type=float, required=True)
    p_speed.add_argument("--nt", type=int, required=True)
    p_speed.add_argument("--k", type=int, default=None)

    p_study = sub.add_parser("restart-study", help="cold vs warm restart deviation")
    p_study.add_argument("config")
    p_study.add_argument("--slices", default="1,2,4,6")
    p_study.add_argument("--days", type=float, default=1.0)

    p_avg = sub.add_parser("avg-error", help="time-averaged serial error study")
    p_avg.add_argument("config")
    p_avg.add_argument("--spd-list", default=None, help="comma list; default coarse+fine spds")

    p_emit = sub.add_parser("emit", help="re-emit a stored report")
    p_emit.add_argument("report", help="path to report.json")
    p_emit.add_argument("--format", choices=("csv", "text-table"), required=True)
    p_emit.add_argument("--out-dir", default=None)

    return parser


def _cmd_run(args) -> int:
    config = parse_config(args.config)
    report, run_dir = harness.run_experiment(config, run_id=args.run_id)
    print(f"report written to {run_dir}")
    for fr in report.fine_runs:
        crossing = ", ".join(
            f"{name}={'-' if k is None else k}" for name, k in sorted(fr.first_crossing.items())
        )
        print(
            f"  nf{fr.fine_spd}: iterations={fr.iterations_run} "
            f"first-crossing[{crossing}] profitable K<={fr.max_profitable_k}"
            f"{' ABORTED' if fr.aborted else ''}"
        )
    return EXIT_OK


def _cmd_serial(args) -> int:
    config = parse_config(args.config)
    spd = args.spd
    if SECONDS_PER_DAY % spd != 0:
        raise ConfigError(f"--spd {spd} does not divide 86400")
    u0 = harness.spin_up(config)
    states = harness.serial_reference(config, spd, u0)
    final = states[-1]
    print(f"serial reference at {spd} spd: {len(states) - 1} slices, final t={final.time}s")
    if args.out:
        write_checkpoint(final, None, args.out)
        print(f"final state written to {args.out}")
    return EXIT_OK


def _cmd_single_shot(args) -> int:
    if args.config:
        config = parse_config(args.config, model_only=True)
        grid, params = config.grid, config.params
    else:
        # shape comes from the file header, spacing from the defaults
        grid, params = None, ModelParams()
    if SECONDS_PER_DAY % args.spd != 0:
        raise ConfigError(f"--spd {args.spd} does not divide 86400")
    dt = SECONDS_PER_DAY // args.spd

    ck = read_checkpoint(args.in_path, grid=grid)
    if ck.history:
        h = ck.step_history(dt)
    else:
        h = StepHistory(ck.state)
    h = integrate_history(h, args.t_end, dt, params)
    write_checkpoint(
        h.current, h, args.out_path,
        slice_index=ck.slice_index, iteration=ck.iteration,
    )
    return EXIT_OK


def _cmd_speedup(args) -> int:
    ks = [args.k] if args.k is not None else list(range(1, args.nt + 1))
    print(f"speedup model: N_t={args.nt} m={args.m:g}")
    print("k estimate bound")
    for k in ks:
        print(f"{k} {speedup_estimate(k, args.nt, args.m):.6f} {speedup_bound(k, args.nt, args.m):.6f}")
    print(f"max profitable K: {max_profitable_iterations(args.m, args.nt)}")
    return EXIT_OK


def _cmd_restart_study(args) -> int:
    config = parse_config(args.config)
    counts = tuple(int(x) for x in args.slices.split(",") if x.strip())
    report = harness.restart_consistency_study(config, counts, args.days)
    print(report.to_text(), end="")
    return EXIT_OK


def _cmd_avg_error(args) -> int:
    config = parse_config(args.config)
    spd_list = None
    if args.spd_list:
        spd_list = tuple(int(x) for x in args.spd_list.split(",") if x.strip())
    series = harness.time_averaged_study(config, spd_list)
    print(f"time-averaged errors vs {config.reference_spd} spd reference")
    print("spd,slice,field,E_inf")
    for spd in sorted(series):
        for f, values in series[spd].items():
            for n, e in enumerate(values):
                print(f"{spd},{n},{f.name},{e!r}")
    return EXIT_OK


def _report_from_json(path: Path) -> RunReport:
    payload = json.loads(path.read_text())
    fine_runs = []
    for fr in payload["fine_runs"]:
        fine_runs.append(
            FineRunReport(
                fine_spd=fr["fine_spd"],
                run_id=fr["run_id"],
                iterations_run=fr["iterations_run"],
                aborted=fr["aborted"],
                errors=tuple(
                    ErrorCell(c["k"], c["field"], c["E_inf"], c["E_2"], c["status"])
                    for c in fr["errors"]
                ),
                wall={int(k): tuple(v) for k, v in fr["wall"].items()},
                blow_ups=tuple(fr["blow_ups"]),
                first_crossing=fr["first_crossing"],
                exact_at_last=fr["exact_at_last"],
                m_nominal=fr["m_nominal"],
                max_profitable_k=fr["max_profitable_k"],
                speedup_rows=tuple((r["k"], r["estimate"], r["bound"]) for r in fr["speedup"]),
            )
        )
    return RunReport(
        run_id=payload["run_id"],
        config_path=payload["config_path"],
        config_hash=payload["config_hash"],
        epsilon=payload["epsilon"],
        n_slices=payload["n_slices"],
        slice_length=payload["slice_length"],
        coarse_spd=payload["coarse_spd"],
        monitored=tuple(payload["monitored"]),
        fine_runs=tuple(fine_runs),
        flags=payload["flags"],
    )


def _cmd_emit(args) -> int:
    path = Path(args.report)
    if not path.exists():
        raise IOFailureError(f"{path}: no such report")
    report = _report_from_json(path)
    out_dir = Path(args.out_dir) if args.out_dir else path.parent
    written = harness.emit_report(report, args.format, out_dir)
    print(f"wrote {written}")
    return EXIT_OK


_COMMANDS = {
    "run": _cmd_run,
    "serial": _cmd_serial,
    "single-shot": _cmd_single_shot,
    "speedup": _cmd_speedup,
    "restart-study": _cmd_restart_study,
    "avg-error": _cmd_avg_error,
    "emit": _cmd_emit,
}


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_VALIDATION
    except BlowUpError as err:
        print(f"blow-up: {err}", file=sys.stderr)
        return EXIT_BLOW_UP
    except IOFailureError as err:
        print(f"i/o failure: {err}", file=sys.stderr)
        return EXIT_IO
    except OSError as err:
        print(f"i/o failure: {err}", file=sys.stderr)
        return EXIT_IO
    except EngineError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_VALIDATION


def entrypoint() -> None:
    sys.exit(main())
