"""Command line: ``megaloop run|validate|export``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .megamodel import Megamodel, MegamodelError
from .model import conforms
from .runner import EXIT_CONFIG, EXIT_OK, run
from .scenario import ScenarioError, load_scenario
from .sync import standard_metamodels


def _cmd_run(args) -> int:
    try:
        scenario = load_scenario(args.scenario)
    except ScenarioError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(args.out) if args.out else Path("runs") / scenario.name
    try:
        result = run(scenario, seed=args.seed, until=args.until, out=out)
    except (MegamodelError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    reports = result.trace.of_kind("report")
    print(f"{scenario.name}: status {result.status}, {len(result.trace.records)} trace records, "
          f"{len(reports)} adaptation reports, output in {out}")
    if result.message:
        print(result.message, file=sys.stderr)
    return result.status


def _cmd_validate(args) -> int:
    try:
        s = load_scenario(args.scenario)
    except ScenarioError as exc:
        for p in getattr(exc, "problems", None) or [exc]:
            print(f"error: {p}", file=sys.stderr)
        return EXIT_CONFIG
    print(f"{s.name}: ok ({len(s.managers)} managers, {len(s.timeline)} timeline events, seed {s.seed})")
    return EXIT_OK


def _cmd_export(args) -> int:
    run_dir = Path(args.run_dir)
    try:
        mega = Megamodel.import_json((run_dir / "megamodel.json").read_text())
    except (OSError, MegamodelError, KeyError, json.JSONDecodeError) as exc:
        print(f"error: cannot read megamodel: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    (run_dir / "megamodel.dot").write_text(mega.export_dot())
    models = run_dir / "models"
    models.mkdir(exist_ok=True)
    for node, model in sorted(mega.models.items()):
        (models / f"{node}.json").write_text(json.dumps(model.to_dict(), indent=1, sort_keys=True) + "\n")
    impl = mega.models.get("impl")
    if impl is not None:
        report = conforms(impl, standard_metamodels()["Implementation"])
        status = "conforms" if report.conforms else f"{len(report.violations)} violations"
        print(f"implementation model: {status}")
    print(f"exported {len(mega.models)} models and megamodel.dot to {run_dir}")
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="megaloop", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("run", help="run a scenario against the simulator")
    p.add_argument("scenario")
    p.add_argument("--seed", type=int)
    p.add_argument("--until", type=float, help="simulated seconds to run (default: runLength)")
    p.add_argument("--out", help="output directory (default: runs/<name>)")
    p.set_defaults(fn=_cmd_run)
    p = sub.add_parser("validate", help="load and validate a scenario bundle")
    p.add_argument("scenario")
    p.set_defaults(fn=_cmd_validate)
    p = sub.add_parser("export", help="re-export DOT and model files of a finished run")
    p.add_argument("run_dir")
    p.set_defaults(fn=_cmd_export)
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
