from __future__ import annotations

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from coyotekit.executor import Program, StepLimits, execute, sdiv32, srem32, wrap32
from coyotekit.harness import build_harness
from coyotekit.trace import (ERR_CALL_DEPTH, ERR_DIV_ZERO, ERR_MEMORY, ERR_STEP_LIMIT, TestCase, TraceFile,
                             TraceFormatError, parse_testcase, parse_trace, read_trace, serialize_testcase,
                             serialize_trace, write_trace)

from conftest import compile_one, run_target

i32 = st.integers(-2**31, 2**31 - 1)


# -- arithmetic helpers -------------------------------------------------------


@given(st.integers(-2**40, 2**40))
def test_wrap32_range_and_congruence(v):
    w = wrap32(v)
    assert -2**31 <= w < 2**31
    assert (w - v) % 2**32 == 0


def test_division_truncates_toward_zero():
    assert sdiv32(-7, 2) == -3 and srem32(-7, 2) == -1
    assert sdiv32(7, -2) == -3 and srem32(7, -2) == 1
    assert sdiv32(-2**31, -1) == -2**31 and srem32(-2**31, -1) == 0


@given(i32, i32.filter(lambda b: b != 0))
def test_div_rem_identity(a, b):
    assert wrap32(sdiv32(a, b) * b + srem32(a, b)) == a


# -- execution ------------------------------------------------------------------


def test_trace_shape():
    m = compile_one("extern i32 rd(); i32 s(){ return rd() + rd(); }")
    plan, _, t = run_target(m, "s", {0: 4, 1: 5})
    assert [r.kind for _, r in plan.inputs] == ["stubReturn", "stubReturn"]
    assert t.entry == "__drv_s" and t.status == "ok"
    assert t.events[0] == ("F", "__drv_s")
    assert [e for e in t.events if e[0] == "IN"] == [("IN", 0, 4), ("IN", 1, 5)]
    assert t.events[-1] == ("END", "ok")
    depth = 0
    for e in t.events:
        depth += {"F": 1, "RET": -1}.get(e[0], 0)
        assert depth >= 0
    assert depth == 0


@pytest.mark.parametrize("src, target, bindings, limits, code", [
    ("i32 f(i32 x){ return 10 / x; }", "f", {0: 0}, None, ERR_DIV_ZERO),
    ("i32 f(i32 x){ return 10 % x; }", "f", {0: 0}, None, ERR_DIV_ZERO),
    ("i32 f(i32 x){ i32 a[2]; return a[x]; }", "f", {0: 5}, None, ERR_MEMORY),
    ("i32 f(i32 x){ i32 a[2]; return a[x]; }", "f", {0: -1}, None, ERR_MEMORY),
    ("i32 r(i32 n){ return r(n+1); }", "r", {}, None, ERR_CALL_DEPTH),
    ("void l(){ i32 i=0; while (1) { i=i+1; } }", "l", {}, StepLimits(max_steps=1000), ERR_STEP_LIMIT),
])
def test_runtime_errors_abort(src, target, bindings, limits, code):
    m = compile_one(src)
    _, _, t = run_target(m, target, bindings, limits)
    assert t.status == "abort"
    assert t.error[0] == code
    assert t.events[-2][0] == "ERR" and t.events[-1] == ("END", "abort")


def test_red_zone_between_arrays():
    # writing one past a local array must not land in a neighbour
    m = compile_one("i32 f(i32 x){ i32 a[2]; i32 b[2]; a[x] = 7; return b[0]; }")
    _, _, t = run_target(m, "f", {0: 2})
    assert t.error is not None and t.error[0] == ERR_MEMORY


def test_unbound_inputs_default_to_zero():
    m = compile_one("i32 f(i32 x){ if (x == 0) { return 1; } return 2; }")
    _, _, t = run_target(m, "f", {})
    assert t.branch_decisions()[0][1] == 1


def test_program_is_reusable_and_deterministic():
    m = compile_one("i32 f(i32 x, i32 y){ i32 s = 0; while (x > 0) { s = s + y; x = x - 1; } return s; }")
    plan, hm = build_harness(m, "f")
    prog = Program(hm)
    for x in (0, 3, 7):
        tc = TestCase(x, {0: x, 1: 2})
        a = execute(prog, plan.driver_name, tc)
        b = execute(hm, plan.driver_name, tc)
        assert serialize_trace(a) == serialize_trace(b)
        assert len(a.branch_decisions()) == x + 1


def test_globals_in_trace_addresses():
    m = compile_one("i32 g; i32 f(){ g = g + 1; return g; }")
    plan, hm, t = run_target(m, "f", {0: 41})
    addr = hm.globals["g"].base
    stores = [e for e in t.events if e[0] == "ST" and e[2] == addr]
    assert stores[-1][3] == 42


# -- trace format ---------------------------------------------------------------


def _sample_trace() -> TraceFile:
    m = compile_one("i32 f(i32 x){ i32 a[2]; a[0] = x; if (a[0] > 3) { return 1; } return 10 / x; }")
    return run_target(m, "f", {0: 0})[2]


def test_trace_roundtrip_file(tmp_path):
    t = _sample_trace()
    write_trace(t, tmp_path / "t.trace")
    assert read_trace(tmp_path / "t.trace") == t
    assert serialize_trace(parse_trace(serialize_trace(t))) == serialize_trace(t)


def test_trace_is_tab_separated_lf():
    data = serialize_trace(_sample_trace())
    assert b"\r" not in data and data.endswith(b"\n")
    head = data.split(b"\n")[0].split(b"\t")
    assert head[0] == b"TRACE" and len(head) == 4


def test_bad_branch_flag_reports_line():
    text = serialize_trace(_sample_trace()).decode().splitlines()
    k = next(i for i, line in enumerate(text) if line.startswith("BR\t"))
    parts = text[k].split("\t")
    text[k] = "\t".join([parts[0], parts[1], "2"])
    with pytest.raises(TraceFormatError) as err:
        parse_trace("\n".join(text) + "\n")
    assert err.value.lineno == k + 1


@pytest.mark.parametrize("mutate, line", [
    (lambda ls: ls[:1] + ["XX\t1"] + ls[1:], 2),
    (lambda ls: ls + ["RET"], None),
    (lambda ls: ["TRACE\tnothex\t0\tf"] + ls[1:], 1),
    (lambda ls: ls[:-1] + ["END\tok"], None),
])
def test_malformed_traces_rejected(mutate, line):
    lines = serialize_trace(_sample_trace()).decode().splitlines()
    bad = mutate(lines)
    with pytest.raises(TraceFormatError) as err:
        parse_trace("\n".join(bad) + "\n")
    if line is not None:
        assert err.value.lineno == line


def test_missing_final_newline_rejected():
    with pytest.raises(TraceFormatError):
        parse_trace(serialize_trace(_sample_trace())[:-1])


_iid = st.builds(lambda f, b, i: f"{f}:{b}:{i}", st.sampled_from(["f", "g_1", "__drv_f"]),
                 st.integers(0, 50), st.integers(0, 50))
_event = st.one_of(
    st.builds(lambda n: ("F", n), st.sampled_from(["f", "g_1"])),
    st.builds(lambda b: ("B", b.rsplit(":", 1)[0]), _iid),
    st.builds(lambda i, d: ("BR", i, d), _iid, st.integers(0, 1)),
    st.builds(lambda i, a, v: ("LD", i, a, v), _iid, st.integers(1, 10_000), i32),
    st.builds(lambda i, a, v: ("ST", i, a, v), _iid, st.integers(1, 10_000), i32),
    st.builds(lambda i, a, n: ("AL", i, a, n), _iid, st.integers(1, 10_000), st.integers(1, 64)),
    st.builds(lambda k, v: ("IN", k, v), st.integers(0, 99), i32),
    st.builds(lambda i, c: ("CALL", i, c), _iid, st.sampled_from(["f", "rd"])),
    st.just(("RET",)),
)


@st.composite
def traces(draw):
    events = draw(st.lists(_event, max_size=40))
    if draw(st.booleans()):
        events += [("ERR", draw(st.integers(1, 4)), draw(_iid)), ("END", "abort")]
    else:
        events.append(("END", draw(st.sampled_from(["ok", "abort"]))))
    return TraceFile(draw(st.text("0123456789abcdef", min_size=1, max_size=16)),
                     draw(st.integers(0, 10**6)), draw(st.sampled_from(["__drv_f", "main"])), events)


@settings(max_examples=300, deadline=None)
@given(traces())
def test_trace_roundtrip_property(t):
    assert parse_trace(serialize_trace(t)) == t


# -- test case files --------------------------------------------------------------


@given(st.integers(0, 10**6), st.dictionaries(st.integers(0, 50), i32, max_size=8),
       st.one_of(st.none(), st.integers(0, 10**6)))
def test_testcase_roundtrip(tid, bindings, parent):
    tc = TestCase(tid, bindings, parent)
    assert parse_testcase(serialize_testcase(tc)) == tc
