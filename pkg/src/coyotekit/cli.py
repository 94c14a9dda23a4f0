"""Command line entry point: ``coyotekit run <dir> ...``."""
from __future__ import annotations

import argparse
import os
import sys

from .coverage import render_report
from .session import EXIT_OK, ProjectError, run_project

SOLVER_ENV = "COYOTEKIT_SOLVER_CMD"
_FORMATS = {"text", "json", "csv"}


def _formats(value: str) -> list[str]:
    out = [v.strip() for v in value.split(",") if v.strip()]
    bad = [v for v in out if v not in _FORMATS]
    if bad or not out:
        raise argparse.ArgumentTypeError(f"report formats are text, json, csv (got {value!r})")
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="coyotekit", description="Concolic unit testing for MiniC.")
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="generate tests for every entry function of a project")
    run.add_argument("project", help="project directory (with an optional coyote.toml)")
    run.add_argument("--strategy", choices=["hybrid", "ccs", "dfs"])
    run.add_argument("--budget-per-fn", type=float, metavar="S", help="seconds per function")
    run.add_argument("--max-exec", type=int, metavar="N", help="executions per function")
    run.add_argument("--jobs", type=int, metavar="J", help="functions tested in parallel")
    run.add_argument("--seed", type=int, metavar="K")
    run.add_argument("--solver", choices=["internal", "external"])
    run.add_argument("--solver-cmd", metavar="TPL",
                     help=f"solver command with a {{file}} placeholder (default: ${SOLVER_ENV})")
    run.add_argument("--domain-bits", type=int, metavar="B",
                     help="fixed domain width for the internal solver")
    run.add_argument("--keep-traces", action="store_true", default=None)
    run.add_argument("--dump-ir", action="store_true")
    run.add_argument("--debug-concrete-reads", action="store_true", default=None,
                     help="concretize every input-dependent load (demonstration only)")
    run.add_argument("--report", type=_formats, default=["text", "json", "csv"], metavar="FMTS",
                     help="comma-separated subset of text,json,csv")
    run.add_argument("--out", default="out", metavar="DIR")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    solver_cmd = args.solver_cmd or os.environ.get(SOLVER_ENV) or None
    try:
        result = run_project(
            args.project, args.out, formats=args.report, dump_ir=args.dump_ir,
            strategy=args.strategy, budget_per_fn=args.budget_per_fn, max_exec=args.max_exec,
            jobs=args.jobs, seed=args.seed, solver=args.solver, solver_cmd=solver_cmd,
            domain_bits=args.domain_bits, keep_traces=args.keep_traces,
            concrete_reads=args.debug_concrete_reads)
    except ProjectError as err:
        print(f"coyotekit: {err}", file=sys.stderr)
        return err.exit_code
    for r in result.functions:
        if r.status != "ok":
            print(f"coyotekit: {r.function} quarantined: {r.error}", file=sys.stderr)
    sys.stdout.write(render_report(result.report, "text").decode())
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
