"""Per-function concolic sessions and the whole-project pipeline."""
from __future__ import annotations

import glob
import json
import os
import shutil
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path

import tomli

from .coverage import CoverageReport, LineIndex, build_report, render_report
from .executor import Program, StepLimits, execute
from .harness import HarnessPlan, build_harness, default_testcase, reachable_functions
from .ir import IRModule, validate
from .minic import MiniCError, compile_sources
from .search import (
    FLIP_BUDGET, PLATEAU_K, UNSAT_STREAK, CoverageState, ExecutionTree, Scheduler,
    detect_divergence, integrate_trace,
)
from .solver import DEFAULT_TIMEOUT_MS, FALLBACK_MAX_BITS, SolverError, solve_flip
from .symbolic import check_consistency, replay
from .trace import TestCase, TraceFile, serialize_testcase, write_trace

MANIFEST = "coyote.toml"
EXIT_OK = 0
EXIT_INPUT = 2
EXIT_IO = 3


class ProjectError(Exception):
    """Raised for invalid projects; ``exit_code`` tells the CLI how to exit."""

    def __init__(self, message: str, exit_code: int = EXIT_INPUT):
        super().__init__(message)
        self.exit_code = exit_code


@dataclass
class SessionConfig:
    strategy: str = "hybrid"
    budget_per_fn: float = 60.0
    max_exec: int = 2000
    jobs: int = field(default_factory=lambda: os.cpu_count() or 1)
    seed: int = 0
    solver: str = "internal"
    solver_cmd: str | None = None
    domain_bits: int | None = None
    timeout_ms: int = DEFAULT_TIMEOUT_MS
    max_steps: int = StepLimits.max_steps
    max_call_depth: int = StepLimits.max_call_depth
    concrete_reads: bool = False
    keep_traces: bool = False
    flip_budget: int = FLIP_BUDGET
    plateau_k: int = PLATEAU_K
    unsat_streak: int = UNSAT_STREAK

    def __post_init__(self) -> None:
        if self.strategy not in ("hybrid", "ccs", "dfs"):
            raise ValueError(f"strategy must be hybrid, ccs or dfs, not {self.strategy!r}")
        if not self.budget_per_fn > 0:
            raise ValueError("per-function budget must be positive")
        if self.jobs < 1:
            raise ValueError("jobs must be at least 1")
        if self.max_exec < 1:
            raise ValueError("max executions must be at least 1")
        if self.solver not in ("internal", "external"):
            raise ValueError(f"solver must be internal or external, not {self.solver!r}")
        if self.solver == "external" and not self.solver_cmd:
            raise ValueError("external solver selected but no solver command given")
        if self.domain_bits is not None and not 1 <= self.domain_bits <= FALLBACK_MAX_BITS:
            raise ValueError(f"domain bits must be in 1..{FALLBACK_MAX_BITS}")

    @property
    def limits(self) -> StepLimits:
        return StepLimits(self.max_steps, self.max_call_depth)


@dataclass
class CaseRecord:
    testcase: TestCase
    added: bool  # new statement, branch direction or error code
    error: int | None = None  # error code seen for the first time in this session, if any


@dataclass
class FunctionResult:
    function: str
    file: str
    status: str = "ok"
    error: str | None = None
    coverage: CoverageState = field(default_factory=CoverageState)
    cases: list[CaseRecord] = field(default_factory=list)
    suite: list[TestCase] = field(default_factory=list)
    executions: int = 0
    divergences: int = 0
    unsat: int = 0
    unknown: int = 0
    wall_time: float = 0.0
    log: list[str] = field(default_factory=list)
    traces: list[TraceFile] = field(default_factory=list)
    progress: list[tuple[int, int, int]] = field(default_factory=list)
    consistency_violations: int = 0
    constraints_checked: int = 0
    phase_switch: int | None = None
    plan: HarnessPlan | None = None
    harness_ir: str = ""


def minimize_suite(cases: list[CaseRecord]) -> list[TestCase]:
    """Keep, in discovery order, every case that added coverage (or a new error code)."""
    return [c.testcase for c in cases if c.added or c.error is not None]


def run_function(module: IRModule, target: str, config: SessionConfig) -> FunctionResult:
    """One concolic session for ``target``; never raises for errors inside the session."""
    fn = module.functions[target]
    result = FunctionResult(target, fn.file)
    start = time.perf_counter()
    try:
        _session(module, target, config, result, start)
    except Exception as err:  # quarantine: report and move on
        result.status = "quarantined"
        result.error = f"{type(err).__name__}: {err}"
        result.log.append(f"quarantined\t{result.error}")
        result.coverage = CoverageState()
        result.suite = []
    result.wall_time = time.perf_counter() - start
    return result


def _session(module: IRModule, target: str, config: SessionConfig, result: FunctionResult,
             start: float) -> None:
    plan, hm = build_harness(module, target)
    result.plan = plan
    result.harness_ir = hm.pretty()
    prog = Program(hm)
    index = LineIndex(hm)
    tree = ExecutionTree(hm)
    cov = result.coverage
    sched = Scheduler(tree, config.strategy, budget=config.flip_budget,
                      plateau_k=config.plateau_k, unsat_limit=config.unsat_streak)
    limits = config.limits
    bindings_of: dict[int, dict[int, int]] = {}
    # the internal solver is deterministic, so a retried unknown reuses its verdict
    internal_unknown: set[int] = set()
    log = result.log
    goal_fns = [f for f in reachable_functions(hm, target) if f in index.universe]
    goal_lines = frozenset().union(*(index.universe[f] for f in goal_fns))
    goal_branches = {(s, d) for f in goal_fns for s in index.sites[f] for d in (0, 1)}

    def run_case(tc: TestCase):
        trace = execute(prog, plan.driver_name, tc, limits)
        result.executions += 1
        if config.keep_traces:
            result.traces.append(trace)
        pc = replay(hm, trace, concrete_reads=config.concrete_reads)
        bad = check_consistency(pc, tc.bindings)
        result.constraints_checked += len(pc.constraints)
        if bad:
            result.consistency_violations += len(bad)
            for c in bad:
                log.append(f"inconsistent\ttc={tc.id}\t{c.instr_id}\t{c.kind}")
        seen = dict(tc.bindings)
        seen.update(pc.inputs_seen)
        bindings_of[tc.id] = seen
        before = cov.errors.copy()
        added = integrate_trace(tree, index, trace, pc, cov)
        err = trace.error[0] if trace.error else None
        result.cases.append(CaseRecord(tc, added, err if err is not None and err not in before else None))
        result.progress.append((result.executions, len(cov.lines), len(cov.branches)))
        return trace, added

    tc0 = default_testcase(plan)
    _, added = run_case(tc0)
    log.append(f"exec\ttc=0\tnew={int(added)}\tlines={len(cov.lines)}\tbranches={len(cov.branches)}")
    next_id = 1
    while result.executions < config.max_exec:
        if time.perf_counter() - start > config.budget_per_fn:
            log.append("stop\tbudget")
            break
        if goal_lines <= cov.lines and goal_branches <= cov.branches:
            log.append("stop\tcoverage complete")
            break
        cand = sched.next(cov)
        if cand is None:
            log.append("stop\tfrontier exhausted")
            break
        if sched.strategy == "hybrid" and sched.hybrid.switched_at is not None and result.phase_switch is None:
            result.phase_switch = result.executions
            log.append(f"phase\tdfs\tafter={sched.hybrid.switched_at}")
        log.append(f"issue\t{cand.instr_id}\tdir={cand.direction}\tdepth={cand.depth}"
                   f"\tscore={cand.ccs_score}\tphase={sched.phase}\tparent={cand.node.origin}")
        constraints, negated = cand.constraints()
        parent = bindings_of[cand.node.origin]
        if config.solver == "internal" and cand.node.seq in internal_unknown:
            tree.record_outcome(cand, "unknown")
            sched.observe("unknown", False)
            result.unknown += 1
            log.append("outcome\tunknown\tcached")
            continue
        try:
            res = solve_flip(constraints, negated, parent, backend=config.solver,
                             solver_cmd=config.solver_cmd, domain_bits=config.domain_bits,
                             timeout_ms=config.timeout_ms)
        except SolverError as err:
            log.append(f"solver-error\t{err}")
            tree.record_outcome(cand, "unknown")
            sched.observe("unknown", False)
            result.unknown += 1
            continue
        if res.verdict != "sat":
            tree.record_outcome(cand, res.verdict)
            sched.observe(res.verdict, False)
            if res.verdict == "unsat":
                result.unsat += 1
            else:
                result.unknown += 1
                internal_unknown.add(cand.node.seq)
            diag = res.stats.get("diagnostic", "")
            log.append(f"outcome\t{res.verdict}" + (f"\t{diag}" if diag else ""))
            continue
        tc = TestCase(next_id, dict(sorted(res.model.items())), cand.node.origin, cand.instr_id)
        next_id += 1
        trace, added = run_case(tc)
        diverged = detect_divergence(cand.predicted(), trace)
        outcome = "diverged" if diverged else "sat"
        tree.record_outcome(cand, outcome, tc.id)
        sched.observe(outcome, added)
        if diverged:
            result.divergences += 1
            log.append(f"diverged\ttc={tc.id}\tflip={cand.instr_id}")
        log.append(f"outcome\t{outcome}\ttc={tc.id}\tnew={int(added)}\tlines={len(cov.lines)}"
                   f"\tbranches={len(cov.branches)}")
    else:
        log.append("stop\tmax executions")
    result.suite = minimize_suite(result.cases)


# ---------------------------------------------------------------------------
# projects


@dataclass
class Project:
    root: Path
    sources: list[tuple[str, str]]
    entry_functions: list[str] | None
    settings: dict
    manifest: dict = field(default_factory=dict)

    @property
    def paths(self) -> list[str]:
        return [p for p, _ in self.sources]


def load_project(root: str | Path) -> Project:
    """Read ``coyote.toml`` (if present) and the MiniC sources it names."""
    root = Path(root)
    if not root.is_dir():
        raise ProjectError(f"{root}: not a directory", EXIT_IO)
    manifest = root / MANIFEST
    data: dict = {}
    if manifest.exists():
        try:
            data = tomli.loads(manifest.read_text())
        except (tomli.TOMLDecodeError, UnicodeDecodeError) as err:
            raise ProjectError(f"{manifest}: {err}") from err
        except OSError as err:
            raise ProjectError(f"{manifest}: {err}", EXIT_IO) from err
    project = data.get("project", {})
    patterns = project.get("sources", ["*.mc"])
    files: list[str] = []
    for pat in patterns:
        matches = sorted(glob.glob(str(root / pat), recursive=True))
        if not matches:
            raise ProjectError(f"{manifest}: source pattern {pat!r} matches no files")
        files.extend(m for m in matches if m not in files)
    if not files:
        raise ProjectError(f"{root}: no MiniC sources")
    sources = []
    for f in files:
        rel = os.path.relpath(f, root)
        try:
            sources.append((rel, Path(f).read_text()))
        except OSError as err:
            raise ProjectError(f"{f}: {err}", EXIT_IO) from err
        except UnicodeDecodeError as err:
            raise ProjectError(f"{f}: {err}") from err
    return Project(root, sources, project.get("entry_functions"), data.get("session", {}), data)


def compile_project(project: Project) -> IRModule:
    try:
        module = compile_sources(project.sources)
    except MiniCError as err:
        raise ProjectError("\n".join(str(d) for d in err.diagnostics)) from err
    diags = validate(module)
    if diags:
        raise ProjectError("\n".join(str(d) for d in diags))
    if project.entry_functions is not None:
        for name in project.entry_functions:
            if name not in module.functions or module.functions[name].kind != "user":
                raise ProjectError(f"{MANIFEST}: entry function {name!r} is not defined")
    return module


def config_from(settings: dict, **overrides) -> SessionConfig:
    """Defaults, then manifest ``[session]`` settings, then non-None overrides."""
    known = {f.name for f in fields(SessionConfig)}
    values = {}
    for k, v in settings.items():
        key = k.replace("-", "_")
        if key not in known:
            raise ProjectError(f"{MANIFEST}: unknown session setting {k!r}")
        values[key] = v
    values.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return SessionConfig(**values)
    except (TypeError, ValueError) as err:
        raise ProjectError(str(err)) from err


@dataclass
class ProjectResult:
    module: IRModule
    functions: list[FunctionResult]
    report: CoverageReport
    wall_time: float
    coverage: CoverageState


def _run_one(args: tuple[IRModule, str, SessionConfig]) -> FunctionResult:
    module, name, config = args
    return run_function(module, name, config)


def run_module(module: IRModule, config: SessionConfig,
               entry_functions: list[str] | None = None) -> ProjectResult:
    start = time.perf_counter()
    names = entry_functions if entry_functions is not None else [f.name for f in module.user_functions()]
    names = sorted(names, key=lambda n: (module.functions[n].file, n))
    if config.jobs > 1 and len(names) > 1:
        with ProcessPoolExecutor(max_workers=config.jobs) as pool:
            results = list(pool.map(_run_one, [(module, n, config) for n in names]))
    else:
        results = [run_function(module, n, config) for n in names]
    total = CoverageState()
    for r in results:
        total.merge(r.coverage)
    index = LineIndex(module)
    report = build_report(index, total.lines, total.branches)
    by_name = {r.function: r for r in results}
    for fc in report.functions:
        r = by_name.get(fc.function)
        if r is not None:
            fc.test_cases = len(r.suite)
            fc.executions = r.executions
            fc.divergences = r.divergences
            fc.wall_time = r.wall_time
            fc.status = r.status
    report.wall_time = time.perf_counter() - start
    return ProjectResult(module, results, report, report.wall_time, total)


def write_outputs(result: ProjectResult, out: Path, formats: list[str], *, keep_traces: bool = False,
                  dump_ir: bool = False, figures: bool = True) -> None:
    out.mkdir(parents=True, exist_ok=True)
    for r in result.functions:
        fdir = out / r.function
        if fdir.exists():
            shutil.rmtree(fdir)
        suite = fdir / "suite"
        suite.mkdir(parents=True)
        for tc in r.suite:
            (suite / f"{tc.id:05d}.tc").write_text(serialize_testcase(tc))
        (fdir / "session.log").write_text("\n".join(r.log) + "\n")
        if keep_traces:
            tdir = fdir / "traces"
            tdir.mkdir()
            for t in r.traces:
                write_trace(t, tdir / f"{t.testcase:05d}.trace")
        if dump_ir:
            (fdir / "harness.ir").write_text(r.harness_ir)
    if dump_ir:
        (out / "module.ir").write_text(result.module.pretty())
    for fmt in formats:
        ext = {"text": "txt", "json": "json", "csv": "csv"}[fmt]
        (out / f"report.{ext}").write_bytes(render_report(result.report, fmt))
    timing = {
        "wall_time_s": round(result.wall_time, 3),
        "functions": {r.function: round(r.wall_time, 3) for r in result.functions},
    }
    (out / "timing.json").write_text(json.dumps(timing, indent=2, sort_keys=True) + "\n")
    if figures:
        from .plotting import write_figures

        write_figures(result, out)


def run_project(root: str | Path, out: str | Path | None = None, *, formats: list[str] | None = None,
                dump_ir: bool = False, **overrides) -> ProjectResult:
    """Load, compile and test a project directory, then write its artifacts.

    Input errors raise ``ProjectError`` before anything is written.
    """
    project = load_project(root)
    module = compile_project(project)
    config = config_from(project.settings, **overrides)
    result = run_module(module, config, project.entry_functions)
    if out is not None:
        try:
            write_outputs(result, Path(out), formats or ["text", "json", "csv"],
                          keep_traces=config.keep_traces, dump_ir=dump_ir)
        except OSError as err:
            raise ProjectError(f"cannot write outputs: {err}", EXIT_IO) from err
    return result


__all__ = [
    "CaseRecord", "FunctionResult", "Project", "ProjectError", "ProjectResult", "SessionConfig",
    "compile_project", "config_from", "load_project", "minimize_suite", "run_function",
    "run_module", "run_project", "write_outputs",
]
