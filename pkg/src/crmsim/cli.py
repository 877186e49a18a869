"""Command-line entry point: validate, run, gen-workload, report.

Exit codes: 0 success, 1 I/O failure, 2 usage, 3 malformed input,
4 runtime integrity.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Sequence

from .domain import CrmError
from .simkit import Simulation, SchemaError, export_metrics, load_scenario, write_scenario
from .simkit.scenario import builtin_scenarios, jobspec_to_dict
from .simkit.workload import materialize

EXIT_OK = 0
EXIT_IO = 1
EXIT_USAGE = 2
EXIT_SCHEMA = 3
EXIT_INTEGRITY = 4

U64_MAX = 2**64 - 1


def _seed(text: str) -> int:
    try:
        value = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if not 0 <= value <= U64_MAX:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return value


def _positive(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return value


def build_parser() -> argparse.ArgumentParser:
    scenario_help = "scenario JSON file, or builtin:NAME for one of: " + ", ".join(builtin_scenarios())
    p = argparse.ArgumentParser(prog="crmsim", description="Cluster resource manager simulator.")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    v = sub.add_parser("validate", help="check a scenario file without running it")
    v.add_argument("scenario_pos", nargs="?", metavar="SCENARIO", help=scenario_help)
    v.add_argument("--scenario", help=scenario_help)
    v.add_argument("--quiet", action="store_true")

    r = sub.add_parser("run", help="simulate a scenario and write the event log and metrics")
    r.add_argument("--scenario", required=True, help=scenario_help)
    r.add_argument("--seed", type=_seed, default=0, help="workload seed (unsigned 64-bit, default 0)")
    r.add_argument("--out", required=True, type=Path, help="output directory")
    r.add_argument("--replicas", type=_positive, default=1, help="run seeds seed..seed+N-1 into replica-K subdirectories")
    r.add_argument("--audit", action="store_true", help="recheck all accounting after every event")
    r.add_argument("--quiet", action="store_true")

    g = sub.add_parser("gen-workload", help="write the seeded workload as an explicit job list")
    g.add_argument("--scenario", required=True, help=scenario_help)
    g.add_argument("--seed", type=_seed, default=0)
    g.add_argument("--out", type=Path, help="output file (default: stdout)")
    g.add_argument("--quiet", action="store_true")

    rep = sub.add_parser("report", help="summarize a metrics directory written by run")
    rep.add_argument("metrics_dir", type=Path, help="directory holding queue_times.csv and group_usage.csv")
    rep.add_argument("--out", type=Path, help="where to write report files (default: the metrics directory)")
    rep.add_argument("--no-plot", action="store_true", help="skip the histogram PNG")
    rep.add_argument("--quiet", action="store_true")
    return p


def _say(args: argparse.Namespace, text: str) -> None:
    if not args.quiet:
        print(text)


def cmd_validate(args: argparse.Namespace) -> int:
    ref = args.scenario or args.scenario_pos
    if ref is None:
        print("crmsim validate: a scenario is required", file=sys.stderr)
        return EXIT_USAGE
    sc = load_scenario(ref)
    _say(args, f"ok {sc.name}: {len(sc.hosts)} hosts, {len(sc.templates)} templates, {len(sc.queues)} queues, {len(sc.vms)} vms")
    return EXIT_OK


def _run_one(sc, seed: int, out: Path, audit: bool) -> tuple[str, int, int]:
    sim = Simulation(sc, seed, audit=audit)
    log, metrics = sim.run()
    out.mkdir(parents=True, exist_ok=True)
    log.write(out / "events.jsonl")
    export_metrics(metrics, out)
    write_scenario(sc, out / "scenario.json")
    digest = log.digest()
    (out / "events.sha256").write_text(digest + "\n")
    return digest, len(log), metrics.completed


def cmd_run(args: argparse.Namespace) -> int:
    sc = load_scenario(args.scenario)
    for k in range(args.replicas):
        seed = (args.seed + k) & U64_MAX
        out = args.out if args.replicas == 1 else args.out / f"replica-{k:03d}"
        digest, events, completed = _run_one(sc, seed, out, args.audit)
        _say(args, f"seed={seed} out={out} events={events} completed={completed} sha256={digest}")
    return EXIT_OK


def cmd_gen_workload(args: argparse.Namespace) -> int:
    sc = load_scenario(args.scenario)
    jobs = [jobspec_to_dict(j) for j in materialize(sc, args.seed)]
    text = json.dumps({"jobs": jobs}, indent=2) + "\n"
    if args.out is None:
        if not args.quiet:
            sys.stdout.write(text)
    else:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text(text)
        _say(args, f"wrote {len(jobs)} jobs to {args.out}")
    return EXIT_OK


def cmd_report(args: argparse.Namespace) -> int:
    from .report import write_report

    for name in ("queue_times.csv", "group_usage.csv"):
        if not (args.metrics_dir / name).is_file():
            raise SchemaError(f"{args.metrics_dir}: missing {name}")
    try:
        report, _ = write_report(args.metrics_dir, args.out, plot=not args.no_plot)
    except (ValueError, KeyError) as exc:
        raise SchemaError(f"{args.metrics_dir}: {exc}") from None
    if not args.quiet:
        sys.stdout.write(report.render())
    return EXIT_OK


COMMANDS = {
    "validate": cmd_validate,
    "run": cmd_run,
    "gen-workload": cmd_gen_workload,
    "report": cmd_report,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return COMMANDS[args.command](args)
    except SchemaError as exc:
        print(f"crmsim: invalid input: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except CrmError as exc:
        print(f"crmsim: integrity failure: {exc}", file=sys.stderr)
        return EXIT_INTEGRITY
    except OSError as exc:
        print(f"crmsim: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
