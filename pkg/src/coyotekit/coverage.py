"""Statement and branch coverage from traces, and report rendering.

A source line counts as executed when an instruction attributed to it executed.
Within a block every instruction executes once the next block of the same frame
(or the frame's return) is seen; a runtime error cuts the erroring frame's block
at the failing instruction and every caller's block at its pending call.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

from .ir import IRModule, branch_sites

STATEMENT_THRESHOLD = 90.0
BRANCH_THRESHOLD = 80.0
THROUGHPUT_THRESHOLD = 10_000.0  # statements per hour
SCHEMA = "coyotekit-report/1"


class CoverageError(ValueError):
    pass


class LineIndex:
    """Per-block line attribution for the user functions of a module."""

    def __init__(self, module: IRModule):
        self.block_lines: dict[str, list[tuple[str, int]]] = {}
        self.full: dict[str, frozenset[tuple[str, int]]] = {}
        self.universe: dict[str, frozenset[tuple[str, int]]] = {}
        self.sites: dict[str, list[str]] = {}
        self.files: dict[str, str] = {}
        for fn in module.functions.values():
            user = fn.kind == "user"
            for blk in fn.blocks:
                key = str(blk.id)
                lines = [(fn.file, ins.line) for ins in blk.all_instrs()] if user else []
                self.block_lines[key] = lines
                self.full[key] = frozenset(lines)
            if user:
                self.universe[fn.name] = frozenset().union(*(self.full[str(b.id)] for b in fn.blocks))
                self.sites[fn.name] = [str(iid) for iid, _, _ in branch_sites(fn)]
                self.files[fn.name] = fn.file

    def prefix(self, block: str, upto: int) -> frozenset[tuple[str, int]]:
        return frozenset(self.block_lines.get(block, [])[:upto])


@dataclass
class TraceCoverage:
    blocks: set[str] = field(default_factory=set)
    branches: set[tuple[str, int]] = field(default_factory=set)
    lines: set[tuple[str, int]] = field(default_factory=set)
    error: int | None = None


_NONE: frozenset = frozenset()  # blocks outside the index (drivers, stubs) cover no lines


def _instr_index(iid: str) -> int:
    return int(iid.rsplit(":", 1)[1])


def trace_coverage(index: LineIndex, trace) -> TraceCoverage:
    out = TraceCoverage()
    lines = out.lines
    full = index.full
    stack: list[list] = []  # [current block, index of pending call]
    for ev in trace.events:
        tag = ev[0]
        if tag == "B":
            fr = stack[-1]
            if fr[0] is not None:
                lines |= full[fr[0]]
            fr[0] = ev[1]
            out.blocks.add(ev[1])
        elif tag == "BR":
            out.branches.add((ev[1], ev[2]))
        elif tag == "F":
            stack.append([None, -1])
        elif tag == "CALL":
            stack[-1][1] = _instr_index(ev[1])
        elif tag == "RET":
            fr = stack.pop()
            lines |= full.get(fr[0], _NONE)
        elif tag == "ERR":
            out.error = ev[1]
            top = stack.pop()
            lines |= index.prefix(top[0], _instr_index(ev[2]) + 1)
            for fr in stack:
                lines |= index.prefix(fr[0], fr[1] + 1)
            stack.clear()
    return out


@dataclass
class FunctionCoverage:
    file: str
    function: str
    statements_total: int
    statements_covered: int
    branches_total: int
    branches_covered: int
    test_cases: int = 0
    executions: int = 0
    divergences: int = 0
    wall_time: float | None = None
    status: str = "ok"


@dataclass
class CoverageReport:
    functions: list[FunctionCoverage] = field(default_factory=list)
    statements_total: int = 0
    statements_covered: int = 0
    branches_total: int = 0
    branches_covered: int = 0
    wall_time: float | None = None

    @property
    def test_cases(self) -> int:
        return sum(f.test_cases for f in self.functions)

    @property
    def executions(self) -> int:
        return sum(f.executions for f in self.functions)

    @property
    def divergences(self) -> int:
        return sum(f.divergences for f in self.functions)

    @property
    def statement_pct(self) -> float | None:
        return pct(self.statements_covered, self.statements_total)

    @property
    def branch_pct(self) -> float | None:
        return pct(self.branches_covered, self.branches_total)

    def files(self) -> list[dict]:
        by_file: dict[str, dict] = {}
        for f in self.functions:
            row = by_file.setdefault(f.file, {"file": f.file, "functions": 0, "statements_total": 0,
                                              "statements_covered": 0, "branches_total": 0,
                                              "branches_covered": 0})
            row["functions"] += 1
            row["statements_total"] += f.statements_total
            row["statements_covered"] += f.statements_covered
            row["branches_total"] += f.branches_total
            row["branches_covered"] += f.branches_covered
        return [by_file[k] for k in sorted(by_file)]


def pct(covered: int, total: int) -> float | None:
    return None if total == 0 else 100.0 * covered / total


def fmt_pct(value: float | None) -> str:
    return "-" if value is None else f"{value:.1f}%"


def build_report(index: LineIndex, lines: set[tuple[str, int]], branches: set[tuple[str, int]],
                 functions: list[str] | None = None) -> CoverageReport:
    """Aggregate covered lines/branch directions over the user functions of ``index``.

    Totals are sums over the listed functions, so a line shared by two functions
    counts once for each.
    """
    names = sorted(index.universe, key=lambda n: (index.files[n], n)) if functions is None else functions
    report = CoverageReport()
    for name in names:
        universe = index.universe[name]
        sites = index.sites[name]
        fc = FunctionCoverage(
            index.files[name], name, len(universe), len(universe & lines),
            2 * len(sites), sum((s, d) in branches for s in sites for d in (0, 1)))
        report.functions.append(fc)
    _retotal(report)
    return report


def _retotal(report: CoverageReport) -> None:
    report.statements_total = sum(f.statements_total for f in report.functions)
    report.statements_covered = sum(f.statements_covered for f in report.functions)
    report.branches_total = sum(f.branches_total for f in report.functions)
    report.branches_covered = sum(f.branches_covered for f in report.functions)


def compute_coverage(module: IRModule, traces, accepted_hashes: set[str] | None = None) -> CoverageReport:
    """Coverage of ``traces`` over the user functions of ``module``.

    Traces normally come from harnessed copies of ``module``; the hashes of those
    copies are accepted in addition to the module's own.
    """
    if accepted_hashes is None:
        accepted_hashes = harness_hashes(module)
    index = LineIndex(module)
    lines: set[tuple[str, int]] = set()
    branches: set[tuple[str, int]] = set()
    for t in traces:
        if t.module_hash not in accepted_hashes:
            raise CoverageError(f"trace of test case {t.testcase} has module hash {t.module_hash}, "
                                f"which does not belong to this module")
        tc = trace_coverage(index, t)
        lines |= tc.lines
        branches |= tc.branches
    return build_report(index, lines, branches)


def harness_hashes(module: IRModule) -> set[str]:
    from .harness import HarnessError, build_harness

    out = {module.hash()}
    for fn in module.user_functions():
        try:
            out.add(build_harness(module, fn.name)[1].hash())
        except HarnessError:  # pragma: no cover - user functions always have a harness
            pass
    return out


# ---------------------------------------------------------------------------
# verdicts and rendering


def practicality_check(report: CoverageReport) -> dict[str, bool | None]:
    """Inclusive thresholds on aggregate coverage; throughput only when wall time is known."""
    st, br = report.statement_pct, report.branch_pct
    verdict: dict[str, bool | None] = {
        "statement": st is not None and _ge(st, STATEMENT_THRESHOLD),
        "branch": br is not None and _ge(br, BRANCH_THRESHOLD),
        "throughput": None,
    }
    if report.wall_time:
        verdict["throughput"] = throughput(report) >= THROUGHPUT_THRESHOLD
    return verdict


def _ge(value: float, threshold: float) -> bool:
    # compare at the rendered precision so that 90.0% passes a 90% threshold
    return round(value, 9) >= threshold


def throughput(report: CoverageReport) -> float:
    """Statements under test per hour of wall time."""
    if not report.wall_time:
        return 0.0
    return report.statements_total / (report.wall_time / 3600.0)


def report_dict(report: CoverageReport) -> dict:
    """The JSON form. Wall time is omitted so that repeated runs compare byte-identical."""
    def counts(total: int, covered: int) -> dict:
        return {"total": total, "covered": covered}

    return {
        "schema": SCHEMA,
        "functions": [
            {
                "file": f.file,
                "function": f.function,
                "status": f.status,
                "statements": counts(f.statements_total, f.statements_covered),
                "branches": counts(f.branches_total, f.branches_covered),
                "testCases": f.test_cases,
                "executions": f.executions,
                "divergences": f.divergences,
            }
            for f in report.functions
        ],
        "files": [
            {
                "file": row["file"],
                "functions": row["functions"],
                "statements": counts(row["statements_total"], row["statements_covered"]),
                "branches": counts(row["branches_total"], row["branches_covered"]),
            }
            for row in report.files()
        ],
        "total": {
            "files": len(report.files()),
            "functions": len(report.functions),
            "statements": counts(report.statements_total, report.statements_covered),
            "branches": counts(report.branches_total, report.branches_covered),
            "testCases": report.test_cases,
            "executions": report.executions,
            "divergences": report.divergences,
        },
    }


def report_from_dict(data: dict) -> CoverageReport:
    if data.get("schema") != SCHEMA:
        raise CoverageError(f"unsupported report schema {data.get('schema')!r}")
    report = CoverageReport()
    for f in data["functions"]:
        report.functions.append(FunctionCoverage(
            f["file"], f["function"], f["statements"]["total"], f["statements"]["covered"],
            f["branches"]["total"], f["branches"]["covered"], f["testCases"], f["executions"],
            f["divergences"], None, f["status"]))
    _retotal(report)
    return report


_TEXT_COLUMNS = ["File", "Function", "Statements", "Branches", "Stmt%", "Br%", "Tests", "Diverged",
                 "Time(s)"]


def _text_row(file: str, name: str, st: int, sc: int, bt: int, bc: int, tests: int, div: int,
              wall: float | None) -> list[str]:
    return [file, name, f"{sc}/{st}", f"{bc}/{bt}", fmt_pct(pct(sc, st)), fmt_pct(pct(bc, bt)),
            str(tests), str(div), "-" if wall is None else f"{wall:.1f}"]


def render_report(report: CoverageReport, fmt: str = "text") -> bytes:
    if fmt == "json":
        return (json.dumps(report_dict(report), indent=2) + "\n").encode()
    total_row = ("TOTAL", str(len(report.functions)), report.statements_total,
                 report.statements_covered, report.branches_total, report.branches_covered,
                 report.test_cases, report.divergences, report.wall_time)
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["file", "function", "statements_total", "statements_covered", "branches_total",
                    "branches_covered", "statement_pct", "branch_pct", "test_cases", "divergences"])
        for f in report.functions:
            w.writerow([f.file, f.function, f.statements_total, f.statements_covered,
                        f.branches_total, f.branches_covered,
                        fmt_pct(pct(f.statements_covered, f.statements_total)),
                        fmt_pct(pct(f.branches_covered, f.branches_total)),
                        f.test_cases, f.divergences])
        w.writerow(["TOTAL", len(report.functions), report.statements_total,
                    report.statements_covered, report.branches_total, report.branches_covered,
                    fmt_pct(report.statement_pct), fmt_pct(report.branch_pct),
                    report.test_cases, report.divergences])
        return buf.getvalue().encode()
    if fmt != "text":
        raise ValueError(f"unknown report format {fmt!r}")
    rows = [_TEXT_COLUMNS]
    for f in report.functions:
        name = f.function if f.status == "ok" else f"{f.function} [{f.status}]"
        rows.append(_text_row(f.file, name, f.statements_total, f.statements_covered,
                              f.branches_total, f.branches_covered, f.test_cases, f.divergences,
                              f.wall_time))
    rows.append(_text_row(*total_row))
    widths = [max(len(r[i]) for r in rows) for i in range(len(_TEXT_COLUMNS))]
    out = []
    for k, r in enumerate(rows):
        cells = [c.ljust(widths[i]) if i < 2 else c.rjust(widths[i]) for i, c in enumerate(r)]
        out.append("  ".join(cells).rstrip())
        if k == 0 or k == len(rows) - 2:
            out.append("  ".join("-" * w for w in widths))
    text = "\n".join(out) + "\n"
    verdict = practicality_check(report)
    text += (f"statement coverage {fmt_pct(report.statement_pct)} "
             f"(>= {STATEMENT_THRESHOLD:.0f}%: {'pass' if verdict['statement'] else 'fail'}), "
             f"branch coverage {fmt_pct(report.branch_pct)} "
             f"(>= {BRANCH_THRESHOLD:.0f}%: {'pass' if verdict['branch'] else 'fail'})\n")
    if verdict["throughput"] is not None:
        text += (f"throughput {throughput(report):.0f} statements/hour "
                 f"(>= {THROUGHPUT_THRESHOLD:.0f}: {'pass' if verdict['throughput'] else 'fail'})\n")
    return text.encode()
