"""Bundled corpus access and oracles.

``reference_coverage`` re-interprets a test case straight from the IR and marks
lines and branch directions as it goes, with no trace in between; it is the
independent check on trace-based coverage. ``enumerate_oracle`` runs the
executor over every input assignment of a small domain.
"""
from __future__ import annotations

import itertools
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .coverage import LineIndex, trace_coverage
from .executor import Program, StepLimits, execute
from .harness import HarnessPlan, build_harness, reachable_externs
from .ir import FRESH_INPUT, Glob, Imm, IRModule, Reg
from .trace import TestCase

CATEGORIES = (
    "straightline", "branching", "loops", "arrays-symbolic-index", "interprocedural",
    "extern-stubs", "error-paths", "ccs-adversarial", "dfs-required",
)
ORACLE_FILE = "oracle.json"
ORACLE_MAX_INPUTS = 2
ORACLE_MAX_BITS = 8


class OracleError(ValueError):
    pass


def corpus_dir() -> Path:
    env = os.environ.get("COYOTEKIT_CORPUS")
    if env:
        return Path(env)
    return Path(__file__).resolve().parents[2] / "corpus"


@dataclass
class CorpusEntry:
    source: str
    category: str
    oracle: dict[str, dict] = field(default_factory=dict)  # function -> {"branches": [...], "lines": [...]}


def load_entries(root: Path | None = None) -> list[CorpusEntry]:
    root = root or corpus_dir()
    data = json.loads((root / ORACLE_FILE).read_text())
    return [CorpusEntry(src, e["category"], e.get("functions", {}))
            for src, e in sorted(data["entries"].items())]


# ---------------------------------------------------------------------------
# reference interpreter


class _Fault(Exception):
    pass


def _w(v: int) -> int:
    v &= 0xFFFFFFFF
    return v - (1 << 32) if v >= 1 << 31 else v


def _div(a: int, b: int) -> int:
    q = abs(a) // abs(b)
    return q if (a >= 0) == (b >= 0) else -q


def reference_coverage(module: IRModule, entry: str, testcase: TestCase,
                       limits: StepLimits = StepLimits()) -> tuple[set, set]:
    """Lines and branch directions of user functions executed by ``testcase``."""
    lines: set[tuple[str, int]] = set()
    branches: set[tuple[str, int]] = set()
    memory: dict[int, int] = {}
    for g in module.globals.values():
        for i, v in enumerate(g.init):
            memory[g.base + i] = v
    static = [ins.args[0].value for f in module.functions.values() for ins in f.instructions()
              if ins.op == "input" and ins.args[0].value != FRESH_INPUT]
    state = {"fresh": max(static, default=-1) + 1, "steps": 0, "top": module.stack_base}

    def run(name: str, args: list[int], depth: int) -> int:
        fn = module.functions[name]
        user = fn.kind == "user"
        regs: dict[int, int] = {p.reg: a for p, a in zip(fn.params, args)}
        frame_base = state["top"]

        def val(op) -> int:
            if isinstance(op, Reg):
                return regs[op.n]
            if isinstance(op, Glob):
                return module.globals[op.name].base
            return op.value

        block = fn.blocks[fn.entry]
        while True:
            for ins in block.all_instrs():
                state["steps"] += 1
                if user:
                    lines.add((fn.file, ins.line))
                if state["steps"] > limits.max_steps:
                    raise _Fault
                op = ins.op
                a = ins.args
                if op == "br":
                    taken = val(a[0]) != 0
                    if user:
                        branches.add((str(ins.id), int(taken)))
                    block = fn.blocks[ins.targets[0] if taken else ins.targets[1]]
                    break
                if op == "jmp":
                    block = fn.blocks[ins.targets[0]]
                    break
                if op == "ret":
                    v = val(a[0]) if a else 0
                    for addr in range(frame_base, state["top"]):
                        memory.pop(addr, None)
                    state["top"] = frame_base
                    return v
                if op == "call":
                    if depth + 1 > limits.max_call_depth:
                        raise _Fault
                    r = run(ins.callee, [val(x) for x in a], depth + 1)
                    if ins.dst is not None:
                        regs[ins.dst] = r
                elif op == "alloca":
                    base = state["top"]
                    n = a[0].value
                    memory.update((base + i, 0) for i in range(n))
                    state["top"] = base + n + 1
                    regs[ins.dst] = base
                elif op == "load":
                    addr = val(a[0])
                    if addr not in memory:
                        raise _Fault
                    regs[ins.dst] = memory[addr]
                elif op == "store":
                    addr = val(a[0])
                    if addr not in memory:
                        raise _Fault
                    memory[addr] = val(a[1])
                elif op == "input":
                    k = a[0].value
                    if k == FRESH_INPUT:
                        k = state["fresh"]
                        state["fresh"] += 1
                    regs[ins.dst] = _w(testcase.bindings.get(k, 0))
                elif op == "const":
                    regs[ins.dst] = val(a[0])
                elif op == "icmp":
                    x, y = val(a[0]), val(a[1])
                    regs[ins.dst] = int({"eq": x == y, "ne": x != y, "slt": x < y, "sle": x <= y,
                                         "sgt": x > y, "sge": x >= y}[ins.pred])
                else:
                    x, y = val(a[0]), val(a[1])
                    if op in ("add", "gep"):
                        r = x + y
                    elif op == "sub":
                        r = x - y
                    elif op == "mul":
                        r = x * y
                    elif op in ("sdiv", "srem"):
                        if y == 0:
                            raise _Fault
                        r = _div(x, y) if op == "sdiv" else x - _div(x, y) * y
                    elif op == "and":
                        r = x & y
                    elif op == "or":
                        r = x | y
                    elif op == "xor":
                        r = x ^ y
                    elif op == "shl":
                        r = x << (y & 31)
                    elif op == "ashr":
                        r = x >> (y & 31)
                    else:  # pragma: no cover
                        raise ValueError(op)
                    regs[ins.dst] = _w(r)

    try:
        run(entry, [], 1)
    except _Fault:
        pass
    return lines, branches


# ---------------------------------------------------------------------------
# enumeration oracle


def oracle_inputs(module: IRModule, target: str) -> tuple[HarnessPlan, IRModule, list[int]]:
    plan, hm = build_harness(module, target)
    return plan, hm, [i for i, _ in plan.inputs]


def enumerable(module: IRModule, target: str) -> bool:
    plan, _, ids = oracle_inputs(module, target)
    return len(ids) <= ORACLE_MAX_INPUTS and not reachable_externs(module, target)


def enumerate_oracle(module: IRModule, target: str, domain_bits: int = ORACLE_MAX_BITS,
                     limits: StepLimits = StepLimits()) -> tuple[set, set]:
    """Union of coverage over all sign-extended inputs of ``domain_bits`` bits."""
    plan, hm, ids = oracle_inputs(module, target)
    if len(ids) > ORACLE_MAX_INPUTS or domain_bits > ORACLE_MAX_BITS or domain_bits < 1:
        raise OracleError(f"oracle out of range: {len(ids)} inputs at {domain_bits} bits")
    if reachable_externs(module, target):
        raise OracleError(f"{target} reaches extern functions; stub inputs are not enumerable")
    prog = Program(hm)
    index = LineIndex(hm)
    lo = -(1 << (domain_bits - 1))
    values = range(lo, -lo)
    lines: set = set()
    branches: set = set()
    seen_paths: set[tuple] = set()
    for combo in itertools.product(values, repeat=len(ids)):
        trace = execute(prog, plan.driver_name, TestCase(0, dict(zip(ids, combo))), limits)
        path = tuple(trace.branch_decisions())
        if path in seen_paths and trace.error is None:
            continue
        seen_paths.add(path)
        tc = trace_coverage(index, trace)
        lines |= tc.lines
        branches |= tc.branches
    return lines, branches


def build_oracle(root: Path | None = None, categories: dict[str, str] | None = None) -> dict:
    """Recompute ``oracle.json`` content for the corpus at ``root``."""
    from .session import compile_project, load_project

    root = root or corpus_dir()
    project = load_project(root)
    module = compile_project(project)
    if categories is None:
        categories = project.manifest.get("corpus", {}).get("categories", {})
    missing = [p for p in project.paths if p not in categories]
    if missing:
        raise OracleError(f"no category for {', '.join(missing)}")
    entries: dict[str, dict] = {}
    for path in project.paths:
        funcs = {}
        for fn in module.user_functions():
            if fn.file != path or not enumerable(module, fn.name):
                continue
            lines, branches = enumerate_oracle(module, fn.name)
            funcs[fn.name] = {
                "domain_bits": ORACLE_MAX_BITS,
                "branches": sorted([s, d] for s, d in branches),
                "lines": sorted(line for f, line in lines if f == path),
                "lines_all": sorted([f, line] for f, line in lines),
            }
        entries[path] = {"category": categories[path], "functions": funcs}
    return {"domain_bits": ORACLE_MAX_BITS, "entries": entries}


def main() -> None:  # pragma: no cover - maintenance entry point
    root = corpus_dir()
    data = build_oracle(root)
    (root / ORACLE_FILE).write_text(json.dumps(data, indent=1, sort_keys=True) + "\n")
    print(f"wrote {root / ORACLE_FILE}: {len(data['entries'])} entries")


if __name__ == "__main__":  # pragma: no cover
    main()
