"""Trace files (one concrete path per run) and test case files.

Trace format: UTF-8, LF line endings, tab-separated fields. The first line is
the header ``TRACE <module-hash> <testcase-id> <entry>``; every following line
is one event::

    F <function>                 function entered
    B <block-id>                 block entered
    BR <instr-id> <0|1>          conditional branch, 1 = true target taken
    LD <instr-id> <addr> <value>
    ST <instr-id> <addr> <value>
    AL <instr-id> <base> <nwords>
    IN <input-id> <value>
    CALL <instr-id> <callee>
    RET
    ERR <code> <instr-id>        runtime error at that instruction
    END <ok|abort>
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path

ERR_DIV_ZERO = 1
ERR_MEMORY = 2
ERR_CALL_DEPTH = 3
ERR_STEP_LIMIT = 4
ERROR_NAMES = {
    ERR_DIV_ZERO: "division by zero",
    ERR_MEMORY: "memory access outside any allocated region",
    ERR_CALL_DEPTH: "call depth limit exceeded",
    ERR_STEP_LIMIT: "step limit exceeded",
}

Event = tuple


class TraceFormatError(ValueError):
    def __init__(self, lineno: int, message: str):
        self.lineno = lineno
        super().__init__(f"line {lineno}: {message}")


@dataclass
class TraceFile:
    module_hash: str
    testcase: int
    entry: str
    events: list[Event] = field(default_factory=list)

    @property
    def status(self) -> str | None:
        if self.events and self.events[-1][0] == "END":
            return self.events[-1][1]
        return None

    @property
    def error(self) -> tuple[int, str] | None:
        for ev in reversed(self.events):
            if ev[0] == "ERR":
                return ev[1], ev[2]
        return None

    def branch_decisions(self) -> list[tuple[str, int]]:
        return [(ev[1], ev[2]) for ev in self.events if ev[0] == "BR"]


_INT = r"-?(?:0|[1-9][0-9]*)"
_NAME = r"[A-Za-z_][A-Za-z_0-9]*"
_BLOCK = rf"{_NAME}:(?:0|[1-9][0-9]*)"
_INSTR = rf"{_BLOCK}:(?:0|[1-9][0-9]*)"
_EVENT_PATTERNS = {
    "F": (re.compile(_NAME),),
    "B": (re.compile(_BLOCK),),
    "BR": (re.compile(_INSTR), re.compile(r"[01]")),
    "LD": (re.compile(_INSTR), re.compile(_INT), re.compile(_INT)),
    "ST": (re.compile(_INSTR), re.compile(_INT), re.compile(_INT)),
    "AL": (re.compile(_INSTR), re.compile(_INT), re.compile(_INT)),
    "IN": (re.compile(_INT), re.compile(_INT)),
    "CALL": (re.compile(_INSTR), re.compile(_NAME)),
    "RET": (),
    "ERR": (re.compile(r"[1-9][0-9]*"), re.compile(_INSTR)),
    "END": (re.compile(r"ok|abort"),),
}
# which fields are integers, by event tag
_INT_FIELDS = {"BR": (2,), "LD": (2, 3), "ST": (2, 3), "AL": (2, 3), "IN": (1, 2), "ERR": (1,)}


def serialize_trace(trace: TraceFile) -> bytes:
    lines = [f"TRACE\t{trace.module_hash}\t{trace.testcase}\t{trace.entry}"]
    lines.extend("\t".join(map(str, ev)) for ev in trace.events)
    return ("\n".join(lines) + "\n").encode()


def parse_trace(data: bytes | str) -> TraceFile:
    text = data.decode() if isinstance(data, bytes) else data
    if not text.endswith("\n"):
        raise TraceFormatError(text.count("\n") + 1, "missing final newline")
    lines = text[:-1].split("\n")
    head = lines[0].split("\t")
    if (len(head) != 4 or head[0] != "TRACE" or not re.fullmatch(r"[0-9a-f]+", head[1])
            or not re.fullmatch(_INT, head[2]) or not re.fullmatch(_NAME, head[3])):
        raise TraceFormatError(1, "malformed header")
    trace = TraceFile(head[1], int(head[2]), head[3])
    ended = False
    for lineno, line in enumerate(lines[1:], start=2):
        if ended:
            raise TraceFormatError(lineno, "event after END")
        parts = line.split("\t")
        tag = parts[0]
        pats = _EVENT_PATTERNS.get(tag)
        if pats is None:
            raise TraceFormatError(lineno, f"unknown event {tag!r}")
        if len(parts) != len(pats) + 1:
            raise TraceFormatError(lineno, f"{tag} expects {len(pats)} fields")
        for pat, value in zip(pats, parts[1:]):
            if not pat.fullmatch(value):
                raise TraceFormatError(lineno, f"malformed {tag} field {value!r}")
        ints = _INT_FIELDS.get(tag, ())
        ev = tuple(int(v) if i in ints else v for i, v in enumerate(parts) if i > 0)
        if tag == "END":
            ended = True
            if trace.events and trace.events[-1][0] == "ERR" and ev[0] != "abort":
                raise TraceFormatError(lineno, "ERR must be followed by END abort")
        elif trace.events and trace.events[-1][0] == "ERR":
            raise TraceFormatError(lineno, "ERR must be followed by END abort")
        trace.events.append((tag, *ev))
    return trace


def write_trace(trace: TraceFile, path: str | Path) -> None:
    Path(path).write_bytes(serialize_trace(trace))


def read_trace(path: str | Path) -> TraceFile:
    return parse_trace(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# test cases


@dataclass
class TestCase:
    """Integer values bound to symbolic input ids; unbound inputs read as 0."""

    __test__ = False  # not a pytest class

    id: int
    bindings: dict[int, int] = field(default_factory=dict)
    parent: int | None = None
    flip: str | None = None

    def value(self, input_id: int) -> int:
        return self.bindings.get(input_id, 0)


def serialize_testcase(tc: TestCase) -> str:
    parent = "none" if tc.parent is None else str(tc.parent)
    flip = tc.flip or "none"
    lines = [f"testcase {tc.id} parent {parent} flip {flip}"]
    lines.extend(f"in {k} {tc.bindings[k]}" for k in sorted(tc.bindings))
    return "\n".join(lines) + "\n"


def parse_testcase(text: str) -> TestCase:
    lines = text.splitlines()
    m = re.fullmatch(rf"testcase ({_INT}) parent (none|{_INT}) flip (none|{_INSTR})", lines[0] if lines else "")
    if m is None:
        raise ValueError("line 1: malformed test case header")
    tc = TestCase(int(m[1]), {}, None if m[2] == "none" else int(m[2]), None if m[3] == "none" else m[3])
    last = -1
    for lineno, line in enumerate(lines[1:], start=2):
        b = re.fullmatch(rf"in ({_INT}) ({_INT})", line)
        if b is None:
            raise ValueError(f"line {lineno}: malformed binding")
        k = int(b[1])
        if k < 0 or k <= last:
            raise ValueError(f"line {lineno}: input ids must be non-negative and ascending")
        last = k
        tc.bindings[k] = int(b[2])
    return tc
