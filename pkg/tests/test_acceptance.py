"""End-to-end acceptance criteria over the bundled corpus.

Each test records its verdict in ``ACCEPTANCE`` before asserting, and the
terminal summary prints one line per criterion. Corpus runs use jobs=1 and
seed 0 so that they are reproducible on any machine.
"""
from __future__ import annotations

import json
import random
import shutil
import time

import pytest

from coyotekit.corpus import load_entries, reference_coverage
from coyotekit.coverage import (BRANCH_THRESHOLD, STATEMENT_THRESHOLD, THROUGHPUT_THRESHOLD, LineIndex,
                                compute_coverage, trace_coverage)
from coyotekit.harness import build_harness
from coyotekit.ir import Glob, branch_sites
from coyotekit.session import SessionConfig, run_function, run_module, run_project
from coyotekit.solver import (ADAPTIVE_BITS, SolverQuery, emit_smtlib, solve_external, solve_fallback,
                              validate_model)
from coyotekit.symbolic import Const, ICmp, Input, check_consistency, replay
from coyotekit.trace import TraceFile, parse_trace, serialize_trace

from conftest import ACCEPTANCE, random_query

WALL_LIMIT_S = 600.0
DIVERGENCE_LIMIT = 0.01
SYMBOLIC_READ_EXEC = 50
CONCRETE_READ_EXEC = 500
ROUNDTRIP_TRACES = 1000
SOLVER_QUERIES = 200


def record(n: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[n] = (bool(ok), detail)


@pytest.fixture(scope="module")
def corpus_run(corpus_root, tmp_path_factory):
    """The default hybrid configuration over the whole corpus, traces kept."""
    out = tmp_path_factory.mktemp("corpus-run")
    start = time.perf_counter()
    result = run_project(corpus_root, out, jobs=1, seed=0, solver="internal", keep_traces=True)
    wall = time.perf_counter() - start
    return result, out, wall


@pytest.fixture(scope="module")
def cases_by_function(corpus_run):
    result, _, _ = corpus_run
    return {r.function: {c.testcase.id: c.testcase for c in r.cases} for r in result.functions}


# -- 1 ------------------------------------------------------------------------


def test_c1_practicality_thresholds(corpus_run):
    result, _, wall = corpus_run
    rep = result.report
    st, br = rep.statement_pct, rep.branch_pct
    ok = st >= STATEMENT_THRESHOLD and br >= BRANCH_THRESHOLD and wall <= WALL_LIMIT_S
    quarantined = [r.function for r in result.functions if r.status != "ok"]
    record(1, ok and not quarantined,
           f"statements {rep.statements_covered}/{rep.statements_total} ({st:.1f}% >= 90), "
           f"branches {rep.branches_covered}/{rep.branches_total} ({br:.1f}% >= 80), "
           f"wall {wall:.0f}s <= {WALL_LIMIT_S:.0f}s, quarantined {len(quarantined)}")
    assert not quarantined
    assert st >= STATEMENT_THRESHOLD
    assert br >= BRANCH_THRESHOLD
    assert wall <= WALL_LIMIT_S


# -- 2 ------------------------------------------------------------------------


def test_c2_throughput(corpus_run):
    _, out, _ = corpus_run
    totals = json.loads((out / "report.json").read_text())["total"]
    wall = json.loads((out / "timing.json").read_text())["wall_time_s"]
    rate = totals["statements"]["total"] / (wall / 3600.0)
    record(2, rate >= THROUGHPUT_THRESHOLD,
           f"{totals['statements']['total']} statements in {wall:.1f}s = {rate:,.0f}/h >= 10,000/h")
    assert rate >= THROUGHPUT_THRESHOLD


# -- 3 ------------------------------------------------------------------------


def test_c3_dfs_matches_enumeration_oracle(corpus_module):
    config = SessionConfig(strategy="dfs", solver="internal", domain_bits=8, jobs=1)
    checked, mismatched = 0, []
    for entry in load_entries():
        for name, oracle in entry.oracle.items():
            r = run_function(corpus_module, name, config)
            want = {(s, d) for s, d in oracle["branches"]}
            checked += 1
            if r.coverage.branches != want:
                mismatched.append(name)
    record(3, checked > 0 and not mismatched,
           f"{checked - len(mismatched)}/{checked} enumerable functions match exactly"
           + (f"; mismatched: {', '.join(mismatched)}" if mismatched else ""))
    assert checked >= 25
    assert mismatched == []


# -- 4 ------------------------------------------------------------------------


def test_c4_symbolic_reads_beat_concrete_reads(corpus_module):
    fn = corpus_module.functions["tl_find77"]
    # the true direction of `tl_table[x] == 77`
    site = next(str(iid) for iid, _, _ in branch_sites(fn) if _reads_table(corpus_module, iid))
    target = (site, 1)
    _, hm = build_harness(corpus_module, "tl_find77")
    index = LineIndex(hm)

    def first_hit(concrete: bool, limit: int) -> tuple[int | None, int, str]:
        r = run_function(corpus_module, "tl_find77", SessionConfig(
            jobs=1, seed=0, max_exec=limit, concrete_reads=concrete, keep_traces=True))
        for k, t in enumerate(r.traces, start=1):
            if target in trace_coverage(index, t).branches:
                return k, r.executions, r.log[-1]
        return None, r.executions, r.log[-1]

    sym_hit, _, _ = first_hit(False, SYMBOLIC_READ_EXEC)
    con_hit, con_execs, con_stop = first_hit(True, CONCRETE_READ_EXEC)
    ok = sym_hit is not None and con_hit is None
    record(4, ok, f"symbolic reads cover {site}=T at execution {sym_hit} (<= {SYMBOLIC_READ_EXEC}); "
                  f"concrete reads: {'covered' if con_hit else 'not covered'} after {con_execs} executions "
                  f"(limit {CONCRETE_READ_EXEC}, {con_stop.replace(chr(9), ': ')})")
    assert sym_hit is not None
    assert con_hit is None


def _reads_table(module, iid) -> bool:
    """True for a branch whose block loads from ``tl_table``."""
    blk = module.block(iid.block_id)
    return any(isinstance(a, Glob) and a.name == "tl_table" for i in blk.instrs for a in i.args)


# -- 5 ------------------------------------------------------------------------


def test_c5_hybrid_vs_ccs(corpus_run, corpus_project, corpus_module):
    result, _, _ = corpus_run
    ccs = run_module(corpus_module, SessionConfig(strategy="ccs", jobs=1, seed=0),
                     corpus_project.entry_functions)
    hybrid = {f["file"]: f["branches_covered"] for f in result.report.files()}
    only_ccs = {f["file"]: f["branches_covered"] for f in ccs.report.files()}
    cats = corpus_project.manifest["corpus"]["categories"]
    adversarial = sorted(f for f, c in cats.items() if c == "ccs-adversarial")
    not_strict = [f for f in adversarial if not hybrid[f] > only_ccs[f]]
    worse = [f for f in hybrid if cats[f] != "ccs-adversarial" and hybrid[f] < only_ccs[f]]
    detail = ", ".join(f"{f} {hybrid[f]}>{only_ccs[f]}" for f in adversarial)
    record(5, not not_strict and not worse,
           f"adversarial: {detail}; other files hybrid >= ccs: {len(hybrid) - len(adversarial) - len(worse)}"
           f"/{len(hybrid) - len(adversarial)}")
    assert len(adversarial) >= 2
    assert not_strict == []
    assert worse == []


# -- 6 ------------------------------------------------------------------------


def test_c6_path_condition_consistency(corpus_run, corpus_module, cases_by_function):
    result, _, _ = corpus_run
    traces = violations = constraints = 0
    for r in result.functions:
        _, hm = build_harness(corpus_module, r.function)
        cases = cases_by_function[r.function]
        for t in r.traces:
            pc = replay(hm, t)
            constraints += len(pc.constraints)
            violations += len(check_consistency(pc, cases[t.testcase].bindings))
            traces += 1
    in_session = sum(r.consistency_violations for r in result.functions)
    ok = traces > 0 and violations == 0 and in_session == 0
    record(6, ok, f"{traces} traces, {constraints} constraints re-checked, {violations} violations "
                  f"({in_session} during the run)")
    assert traces == sum(r.executions for r in result.functions)
    assert violations == 0 and in_session == 0


# -- 7 ------------------------------------------------------------------------


def test_c7_divergence_rate(corpus_run):
    result, out, _ = corpus_run
    execs = sum(r.executions for r in result.functions)
    div = sum(r.divergences for r in result.functions)
    logged = sum(sum(1 for line in (out / r.function / "session.log").read_text().splitlines()
                     if line.startswith("diverged\t")) for r in result.functions)
    rate = div / execs
    record(7, rate < DIVERGENCE_LIMIT and logged == div,
           f"{div}/{execs} executions diverged ({100 * rate:.2f}% < 1%), {logged} logged")
    assert rate < DIVERGENCE_LIMIT
    assert logged == div


# -- 8 ------------------------------------------------------------------------


def test_c8_coverage_oracle_equivalence(corpus_run, corpus_module, cases_by_function):
    result, _, _ = corpus_run
    checked = bad = 0
    all_traces = []
    for r in result.functions:
        plan, hm = build_harness(corpus_module, r.function)
        index = LineIndex(hm)
        cases = cases_by_function[r.function]
        for t in r.traces:
            got = trace_coverage(index, t)
            lines, branches = reference_coverage(hm, plan.driver_name, cases[t.testcase])
            checked += 1
            bad += got.lines != lines or got.branches != branches
            all_traces.append(t)
    agg = compute_coverage(corpus_module, all_traces)
    same_totals = (agg.statements_covered == result.report.statements_covered
                   and agg.branches_covered == result.report.branches_covered)
    record(8, checked > 0 and bad == 0 and same_totals,
           f"{checked - bad}/{checked} traces agree with re-interpretation; "
           f"aggregate {agg.statements_covered} statements, {agg.branches_covered} branches "
           f"({'equal' if same_totals else 'different'} to report)")
    assert bad == 0
    assert same_totals


# -- 9 ------------------------------------------------------------------------


def _random_trace(rng: random.Random) -> TraceFile:
    def iid() -> str:
        return f"{rng.choice(['f', 'g_2', '__drv_f'])}:{rng.randint(0, 40)}:{rng.randint(0, 40)}"

    events: list[tuple] = [("F", "__drv_f")]
    for _ in range(rng.randint(0, 60)):
        kind = rng.choice(["F", "B", "BR", "LD", "ST", "AL", "IN", "CALL", "RET"])
        v = rng.randint(-2**31, 2**31 - 1)
        events.append({
            "F": ("F", "f"), "B": ("B", iid().rsplit(":", 1)[0]), "BR": ("BR", iid(), rng.randint(0, 1)),
            "LD": ("LD", iid(), rng.randint(1, 5000), v), "ST": ("ST", iid(), rng.randint(1, 5000), v),
            "AL": ("AL", iid(), rng.randint(1, 5000), rng.randint(1, 64)), "IN": ("IN", rng.randint(0, 30), v),
            "CALL": ("CALL", iid(), "g_2"), "RET": ("RET",),
        }[kind])
    if rng.random() < 0.3:
        events += [("ERR", rng.randint(1, 4), iid()), ("END", "abort")]
    else:
        events.append(("END", "ok"))
    return TraceFile(f"{rng.getrandbits(64):016x}", rng.randint(0, 99999), "__drv_f", events)


def test_c9_roundtrips_and_determinism(corpus_run, corpus_root, tmp_path_factory):
    result, out, _ = corpus_run
    rng = random.Random(0)
    bad_rt = 0
    for _ in range(ROUNDTRIP_TRACES):
        t = _random_trace(rng)
        data = serialize_trace(t)
        back = parse_trace(data)
        bad_rt += back != t or serialize_trace(back) != data
    real = [t for r in result.functions for t in r.traces]
    bad_real = sum(serialize_trace(parse_trace(serialize_trace(t))) != serialize_trace(t) for t in real)

    out2 = tmp_path_factory.mktemp("corpus-rerun")
    run_project(corpus_root, out2, jobs=1, seed=0, solver="internal")
    same_report = (out / "report.json").read_bytes() == (out2 / "report.json").read_bytes()
    suite1 = {p.relative_to(out): p.read_bytes() for p in sorted(out.glob("*/suite/*.tc"))}
    suite2 = {p.relative_to(out2): p.read_bytes() for p in sorted(out2.glob("*/suite/*.tc"))}
    same_suite = suite1 == suite2
    shutil.rmtree(out2)

    q_rng = random.Random(9)
    bad_smt = 0
    for _ in range(100):
        cs = random_query(q_rng)
        bad_smt += emit_smtlib(SolverQuery(cs)) != emit_smtlib(SolverQuery(list(cs)))
    ok = bad_rt == 0 and bad_real == 0 and same_report and same_suite and bad_smt == 0
    record(9, ok, f"{ROUNDTRIP_TRACES} generated + {len(real)} real traces round-trip "
                  f"({bad_rt + bad_real} bad); report.json {'identical' if same_report else 'DIFFERS'}; "
                  f"{len(suite1)} suite files {'identical' if same_suite else 'DIFFER'}; "
                  f"SMT-LIB stable ({bad_smt} bad)")
    assert bad_rt == 0 and bad_real == 0
    assert same_report and same_suite
    assert bad_smt == 0


# -- 10 -----------------------------------------------------------------------


def _bounded_query(rng: random.Random) -> tuple[SolverQuery, int]:
    """A random query whose inputs are confined to the fallback domain, so that
    the 32-bit problem and the fallback grid have the same answer."""
    cs = random_query(rng)
    inputs = sorted(frozenset().union(*(c.inputs for c in cs)))
    bits = ADAPTIVE_BITS[max(len(inputs), 1)]
    lo, hi = -(1 << (bits - 1)), (1 << (bits - 1)) - 1
    for i in inputs:
        cs += [ICmp("sge", Input(i), Const(lo)), ICmp("sle", Input(i), Const(hi))]
    return SolverQuery(cs), bits


def test_c10_solver_validity():
    z3 = shutil.which("z3")
    cmd = f"{z3} -smt2 {{file}}" if z3 else None
    rng = random.Random(10)
    sat = invalid = disagree = external_unknown = 0
    for _ in range(SOLVER_QUERIES):
        q, bits = _bounded_query(rng)
        fb = solve_fallback(q, bits)
        if fb.verdict == "sat":
            sat += 1
            invalid += not validate_model(q.constraints, fb.model)
        if cmd is not None:
            ext = solve_external(q, cmd)
            if ext.verdict == "unknown":
                external_unknown += 1
                continue
            if ext.verdict == "sat":
                invalid += not validate_model(q.constraints, ext.model)
            disagree += ext.verdict != fb.verdict
    ext_note = (f"external solver agrees on {SOLVER_QUERIES - disagree - external_unknown}/{SOLVER_QUERIES} "
                f"({external_unknown} unknown)" if cmd else "no external solver: fallback-only subset")
    ok = invalid == 0 and disagree == 0 and external_unknown == 0
    record(10, ok, f"{SOLVER_QUERIES} queries, {sat} sat, {invalid} invalid models; {ext_note}")
    assert invalid == 0
    assert disagree == 0 and external_unknown == 0
