from __future__ import annotations

import json
import subprocess
import sys

import pytest

from coyotekit.cli import build_parser, main
from coyotekit.coverage import LineIndex, compute_coverage, trace_coverage
from coyotekit.executor import execute
from coyotekit.harness import build_harness
from coyotekit.session import (CaseRecord, ProjectError, SessionConfig, compile_project, config_from,
                               load_project, minimize_suite, run_function, run_project)
from coyotekit.trace import TestCase, parse_testcase, read_trace

from conftest import compile_one

MATH = """\
i32 clamp(i32 v, i32 lo, i32 hi) {
  if (v < lo) { return lo; }
  if (v > hi) { return hi; }
  return v;
}
i32 safe_div(i32 a, i32 b) {
  if (b == 0) { return 0; }
  return a / b;
}
"""
TABLE = """\
i32 table[8] = {1, 2, 3, 4, 5, 6, 7, 8};
i32 lookup(i32 k) {
  if (k < 0 || k >= 8) { return -1; }
  if (table[k] == 6) { return 100; }
  return table[k];
}
"""
MANIFEST = """\
[project]
name = "mini"
sources = ["*.mc"]

[session]
strategy = "hybrid"
max_exec = 200
jobs = 1
"""


@pytest.fixture
def project(tmp_path):
    root = tmp_path / "proj"
    root.mkdir()
    (root / "math.mc").write_text(MATH)
    (root / "table.mc").write_text(TABLE)
    (root / "coyote.toml").write_text(MANIFEST)
    return root


def test_run_writes_all_artifacts(project, tmp_path, capsys):
    out = tmp_path / "out"
    code = main(["run", str(project), "--out", str(out), "--keep-traces", "--dump-ir"])
    assert code == 0
    stdout = capsys.readouterr().out
    assert "TOTAL" in stdout and "clamp" in stdout
    for name in ("report.txt", "report.json", "report.csv", "timing.json", "module.ir",
                 "coverage_by_function.png", "coverage_progress.png"):
        assert (out / name).is_file(), name
    assert (out / "coverage_by_function.png").read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
    for fn in ("clamp", "safe_div", "lookup"):
        fdir = out / fn
        assert (fdir / "session.log").is_file() and (fdir / "harness.ir").is_file()
        cases = sorted((fdir / "suite").glob("*.tc"))
        assert cases and all(parse_testcase(p.read_text()).id >= 0 for p in cases)
        assert sorted((fdir / "traces").glob("*.trace"))
    data = json.loads((out / "report.json").read_text())
    assert data["total"]["statements"]["covered"] == data["total"]["statements"]["total"]
    assert data["total"]["branches"]["covered"] == data["total"]["branches"]["total"]


def test_kept_traces_reproduce_the_report(project, tmp_path):
    out = tmp_path / "out"
    result = run_project(project, out, keep_traces=True)
    traces = [read_trace(p) for p in sorted(out.glob("*/traces/*.trace"))]
    again = compute_coverage(result.module, traces)
    assert again.statements_covered == result.report.statements_covered
    assert again.branches_covered == result.report.branches_covered


def test_minimized_suite_preserves_coverage(project):
    module = compile_project(load_project(project))
    config = SessionConfig(jobs=1, max_exec=200)
    for name in ("clamp", "safe_div", "lookup"):
        r = run_function(module, name, config)
        plan, hm = build_harness(module, name)
        index = LineIndex(hm)
        lines, branches = set(), set()
        for tc in r.suite:
            c = trace_coverage(index, execute(hm, plan.driver_name, tc))
            lines |= c.lines
            branches |= c.branches
        assert lines == r.coverage.lines and branches == r.coverage.branches
        assert len(r.suite) <= r.executions
        assert r.log[-1] == "stop\tcoverage complete"


def test_minimize_keeps_discovery_order():
    cases = [CaseRecord(TestCase(0), True), CaseRecord(TestCase(1), False), CaseRecord(TestCase(2), False, 1),
             CaseRecord(TestCase(3), True)]
    assert [tc.id for tc in minimize_suite(cases)] == [0, 2, 3]


def test_unparseable_file_exits_2_without_output(project, tmp_path, capsys):
    (project / "broken.mc").write_text("i32 f( { return 1; }\n")
    out = tmp_path / "out"
    out.mkdir()
    (out / "keep.txt").write_text("untouched")
    assert main(["run", str(project), "--out", str(out)]) == 2
    err = capsys.readouterr().err
    assert "broken.mc:1:" in err and "syntax error" in err
    assert sorted(p.name for p in out.iterdir()) == ["keep.txt"]


def test_semantic_error_exits_2(project, tmp_path, capsys):
    (project / "dup.mc").write_text("i32 clamp(i32 v) { return v; }\n")
    assert main(["run", str(project), "--out", str(tmp_path / "o")]) == 2
    assert "duplicate definition of clamp" in capsys.readouterr().err
    assert not (tmp_path / "o").exists()


def test_missing_directory_exits_3(tmp_path, capsys):
    assert main(["run", str(tmp_path / "nope")]) == 3


@pytest.mark.parametrize("manifest, message", [
    ('[session]\nstrategy = "bfs"\n', "strategy"),
    ('[session]\ncolour = 1\n', "unknown session setting"),
    ('[project]\nentry_functions = ["nope"]\n', "entry function"),
    ('[project]\nsources = ["*.c"]\n', "matches no files"),
    ("[session\n", "coyote.toml"),
])
def test_bad_manifests(project, tmp_path, manifest, message):
    (project / "coyote.toml").write_text(manifest)
    with pytest.raises(ProjectError, match=message) as err:
        run_project(project, tmp_path / "o")
    assert err.value.exit_code == 2


def test_entry_functions_restrict_the_run(project, tmp_path):
    (project / "coyote.toml").write_text('[project]\nentry_functions = ["lookup"]\n[session]\njobs = 1\n')
    result = run_project(project, None)
    assert [r.function for r in result.functions] == ["lookup"]
    # totals still count every function of the project
    assert {f.function for f in result.report.functions} == {"clamp", "safe_div", "lookup"}


def test_cli_flags_override_manifest(project):
    cfg = config_from({"strategy": "ccs", "max_exec": 5}, strategy="dfs", max_exec=None)
    assert cfg.strategy == "dfs" and cfg.max_exec == 5
    with pytest.raises(ProjectError):
        config_from({}, solver="external")
    with pytest.raises(SystemExit):
        build_parser().parse_args(["run", "x", "--report", "text,xml"])
    args = build_parser().parse_args(["run", "x", "--report", "json,csv", "--jobs", "2"])
    assert args.report == ["json", "csv"] and args.jobs == 2


def test_parallel_jobs_match_serial(project, tmp_path):
    a = run_project(project, tmp_path / "a", jobs=1)
    b = run_project(project, tmp_path / "b", jobs=2)
    assert (tmp_path / "a" / "report.json").read_bytes() == (tmp_path / "b" / "report.json").read_bytes()
    assert [r.log for r in a.functions] == [r.log for r in b.functions]


def test_max_exec_stop(tmp_path):
    m = compile_one("i32 w(i32 n){ i32 i = 0; while (i < n) { i = i + 1; } if (n == 77) { return 1; } return i; }")
    r = run_function(m, "w", SessionConfig(jobs=1, max_exec=3, strategy="dfs"))
    assert r.executions == 3 and r.log[-1] == "stop\tmax executions"


def test_module_entry_point(project, tmp_path):
    out = tmp_path / "out"
    proc = subprocess.run([sys.executable, "-m", "coyotekit", "run", str(project), "--out", str(out),
                           "--report", "json"], capture_output=True, text=True, timeout=300)
    assert proc.returncode == 0, proc.stderr
    assert (out / "report.json").is_file() and not (out / "report.csv").exists()
