"""Symbolic expressions and trace replay.

Replay walks the IR in lock-step with a trace, keeping a symbolic value per
register and per written memory cell. Loads through input-dependent addresses
become if-then-else chains over the enclosing allocated region (plus bounds
constraints); stores always go to the concrete address seen in the trace and
pin input-dependent addresses to it.
"""
from __future__ import annotations

import bisect
from dataclasses import dataclass, field
from typing import Iterable, Union

from .executor import sdiv32, srem32, wrap32
from .ir import Glob, Imm, IRModule, Reg
from .trace import TraceFile

REGION_CAP = 256

_EMPTY: frozenset[int] = frozenset()


@dataclass(frozen=True, slots=True, repr=False)
class Const:
    value: int
    inputs: frozenset = field(default=_EMPTY, init=False, compare=False)

    def __repr__(self) -> str:
        return str(self.value)


@dataclass(frozen=True, slots=True, repr=False)
class Input:
    id: int
    inputs: frozenset = field(default=_EMPTY, init=False, compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "inputs", frozenset((self.id,)))

    def __repr__(self) -> str:
        return f"in{self.id}"


def _union(*parts: frozenset) -> frozenset:
    out = _EMPTY
    for p in parts:
        if p:
            out = p if not out else (out if p <= out else out | p)
    return out


@dataclass(frozen=True, slots=True, repr=False)
class BinOp:
    op: str
    lhs: "SymExpr"
    rhs: "SymExpr"
    inputs: frozenset = field(default=_EMPTY, init=False, compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "inputs", _union(self.lhs.inputs, self.rhs.inputs))

    def __repr__(self) -> str:
        return f"({self.op} {self.lhs!r} {self.rhs!r})"


@dataclass(frozen=True, slots=True, repr=False)
class ICmp:
    pred: str
    lhs: "SymExpr"
    rhs: "SymExpr"
    inputs: frozenset = field(default=_EMPTY, init=False, compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "inputs", _union(self.lhs.inputs, self.rhs.inputs))

    def __repr__(self) -> str:
        return f"({self.pred} {self.lhs!r} {self.rhs!r})"


@dataclass(frozen=True, slots=True, repr=False)
class ITE:
    cond: "SymExpr"
    then: "SymExpr"
    other: "SymExpr"
    inputs: frozenset = field(default=_EMPTY, init=False, compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "inputs", _union(self.cond.inputs, self.then.inputs, self.other.inputs))

    def __repr__(self) -> str:
        return f"(ite {self.cond!r} {self.then!r} {self.other!r})"


SymExpr = Union[Const, Input, BinOp, ICmp, ITE]

NEGATED = {"eq": "ne", "ne": "eq", "slt": "sge", "sge": "slt", "sgt": "sle", "sle": "sgt"}


def _apply(op: str, a: int, b: int) -> int | None:
    if op == "add":
        return wrap32(a + b)
    if op == "sub":
        return wrap32(a - b)
    if op == "mul":
        return wrap32(a * b)
    if op == "sdiv":
        return None if b == 0 else sdiv32(a, b)
    if op == "srem":
        return None if b == 0 else srem32(a, b)
    if op == "and":
        return a & b
    if op == "or":
        return a | b
    if op == "xor":
        return a ^ b
    if op == "shl":
        return wrap32(a << (b & 31))
    if op == "ashr":
        return a >> (b & 31)
    raise ValueError(f"unknown operator {op}")


def _compare(pred: str, a: int, b: int) -> int:
    if pred == "eq":
        return int(a == b)
    if pred == "ne":
        return int(a != b)
    if pred == "slt":
        return int(a < b)
    if pred == "sle":
        return int(a <= b)
    if pred == "sgt":
        return int(a > b)
    if pred == "sge":
        return int(a >= b)
    raise ValueError(f"unknown predicate {pred}")


def binop(op: str, a: SymExpr, b: SymExpr) -> SymExpr:
    if type(a) is Const and type(b) is Const:
        v = _apply(op, a.value, b.value)
        if v is not None:
            return Const(v)
    elif type(b) is Const:
        if b.value == 0 and op in ("add", "sub", "or", "xor", "shl", "ashr"):
            return a
        if b.value == 1 and op in ("mul", "sdiv"):
            return a
    elif type(a) is Const and a.value == 0 and op in ("add", "or", "xor"):
        return b
    return BinOp(op, a, b)


def icmp(pred: str, a: SymExpr, b: SymExpr) -> SymExpr:
    if type(a) is Const and type(b) is Const:
        return Const(_compare(pred, a.value, b.value))
    return ICmp(pred, a, b)


def ite(c: SymExpr, a: SymExpr, b: SymExpr) -> SymExpr:
    if type(c) is Const:
        return a if c.value else b
    return ITE(c, a, b)


def truth(expr: SymExpr, direction: bool) -> SymExpr:
    """An expression that is non-zero exactly when ``expr`` has the given truth value."""
    if isinstance(expr, ICmp):
        return expr if direction else ICmp(NEGATED[expr.pred], expr.lhs, expr.rhs)
    if isinstance(expr, Const):
        return Const(int(bool(expr.value) == direction))
    return ICmp("ne" if direction else "eq", expr, Const(0))


def postorder(roots: Iterable[SymExpr]) -> list[SymExpr]:
    """Distinct nodes reachable from ``roots``, children before parents."""
    out: list[SymExpr] = []
    seen: set[int] = set()
    for root in roots:
        if id(root) in seen:
            continue
        stack: list[tuple[SymExpr, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                out.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            if isinstance(node, ITE):
                stack.extend(((node.other, False), (node.then, False), (node.cond, False)))
            elif isinstance(node, (BinOp, ICmp)):
                stack.extend(((node.rhs, False), (node.lhs, False)))
    return out


def eval_expr(expr: SymExpr, assignment: dict[int, int]) -> int | None:
    """Evaluate under ``assignment``; ``None`` means undefined (a division by zero occurs)."""
    if type(expr) is Const:
        return expr.value
    vals: dict[int, int] = {}
    for node in postorder([expr]):
        t = type(node)
        if t is Const:
            v = node.value
        elif t is Input:
            v = wrap32(assignment[node.id])
        elif t is BinOp:
            v = _apply(node.op, vals[id(node.lhs)], vals[id(node.rhs)])
            if v is None:
                return None
        elif t is ICmp:
            v = _compare(node.pred, vals[id(node.lhs)], vals[id(node.rhs)])
        else:
            v = vals[id(node.then)] if vals[id(node.cond)] else vals[id(node.other)]
        vals[id(node)] = v
    return vals[id(expr)]


def expr_size(expr: SymExpr) -> int:
    return len(postorder([expr]))


# ---------------------------------------------------------------------------
# path conditions


FLIPPABLE = ("branch", "fault")


@dataclass
class BranchConstraint:
    """One recorded constraint. ``kind`` is ``branch`` for flippable branch decisions and
    ``bounds``/``pin``/``guard`` for side constraints of the memory model and division.
    ``fault`` records a division whose input-dependent divisor was zero on this path;
    it ends the path and is flippable like a branch."""

    instr_id: str
    taken: bool
    expr: SymExpr
    line: int
    depth: int
    kind: str = "branch"
    br_index: int = -1  # ordinal of the BR event in the trace (branch kind only)

    @property
    def asserted(self) -> SymExpr:
        return truth(self.expr, self.taken)


@dataclass
class PathCondition:
    constraints: list[BranchConstraint] = field(default_factory=list)
    inputs_seen: dict[int, int] = field(default_factory=dict)
    branch_count: int = field(default=0, repr=False)
    raw_branches: list[tuple[str, int]] = field(default_factory=list, repr=False)

    def __len__(self) -> int:
        return len(self.constraints)

    def __iter__(self):
        return iter(self.constraints)

    def branches(self) -> list[BranchConstraint]:
        return [c for c in self.constraints if c.kind == "branch"]

    def decisions(self) -> list[tuple[str, bool]]:
        return [(c.instr_id, c.taken) for c in self.constraints if c.kind in FLIPPABLE]

    def dump(self) -> str:
        lines = []
        for c in self.constraints:
            tag = ("T" if c.taken else "F") if c.kind == "branch" else c.kind
            lines.append(f"{c.instr_id}\t{tag}\t{c.expr!r}")
        return "\n".join(lines) + ("\n" if lines else "")


# ---------------------------------------------------------------------------
# symbolic memory


class SymbolicMemory:
    """Cells written during this replay plus the registry of allocated regions."""

    def __init__(self, module: IRModule | None = None):
        self.cells: dict[int, SymExpr] = {}
        self.starts: list[int] = []
        self.sizes: list[int] = []
        self.initial: dict[int, int] = {}
        if module is not None:
            for g in sorted(module.globals.values(), key=lambda g: g.base):
                self.register(g.base, g.size)
                for i, v in enumerate(g.init):
                    self.initial[g.base + i] = v

    def register(self, base: int, size: int) -> None:
        if self.starts and base < self.starts[-1] + self.sizes[-1]:
            i = bisect.bisect_left(self.starts, base)
            if (i < len(self.starts) and self.starts[i] < base + size) or (
                    i > 0 and self.starts[i - 1] + self.sizes[i - 1] > base):
                raise ReplayError(f"region [{base}, {base + size}) overlaps a registered region")
            self.starts.insert(i, base)
            self.sizes.insert(i, size)
        else:
            self.starts.append(base)
            self.sizes.append(size)
        for a in range(base, base + size):
            self.cells.pop(a, None)

    def release_from(self, base: int) -> None:
        """Drop every region starting at or above ``base`` (stack frame exit)."""
        while self.starts and self.starts[-1] >= base:
            start = self.starts.pop()
            size = self.sizes.pop()
            for a in range(start, start + size):
                self.cells.pop(a, None)

    def region_of(self, addr: int) -> tuple[int, int] | None:
        i = bisect.bisect_right(self.starts, addr) - 1
        if i >= 0 and addr < self.starts[i] + self.sizes[i]:
            return self.starts[i], self.sizes[i]
        return None

    def value(self, addr: int) -> SymExpr:
        cell = self.cells.get(addr)
        if cell is not None:
            return cell
        return Const(self.initial.get(addr, 0))


class ReplayError(RuntimeError):
    pass


def symbolic_load(addr_expr: SymExpr, concrete_addr: int, concrete_value: int,
                  mem: SymbolicMemory, pc: PathCondition | None = None, *,
                  instr_id: str = "", line: int = 0, concretize: bool = False,
                  region_cap: int = REGION_CAP) -> SymExpr:
    region = mem.region_of(concrete_addr)
    if region is None:
        raise ReplayError(f"load at {concrete_addr} outside any registered region")
    if type(addr_expr) is Const:
        cell = mem.cells.get(concrete_addr)
        return cell if cell is not None else Const(concrete_value)
    base, size = region
    depth = _depth(pc)
    if concretize or size > region_cap:
        if pc is not None:
            pc.constraints.append(BranchConstraint(
                instr_id, True, ICmp("eq", addr_expr, Const(concrete_addr)), line, depth, "pin"))
        cell = mem.cells.get(concrete_addr)
        return cell if cell is not None else Const(concrete_value)
    result = mem.value(base + size - 1)
    for a in range(base + size - 2, base - 1, -1):
        result = ITE(ICmp("eq", addr_expr, Const(a)), mem.value(a), result)
    if pc is not None:
        pc.constraints.append(BranchConstraint(
            instr_id, True, ICmp("sge", addr_expr, Const(base)), line, depth, "bounds"))
        pc.constraints.append(BranchConstraint(
            instr_id, True, ICmp("slt", addr_expr, Const(base + size)), line, depth, "bounds"))
    return result


def symbolic_store(addr_expr: SymExpr, concrete_addr: int, value_expr: SymExpr,
                   mem: SymbolicMemory, pc: PathCondition | None = None, *,
                   instr_id: str = "", line: int = 0) -> None:
    mem.cells[concrete_addr] = value_expr
    if type(addr_expr) is not Const and pc is not None:
        pc.constraints.append(BranchConstraint(
            instr_id, True, ICmp("eq", addr_expr, Const(concrete_addr)), line, _depth(pc), "pin"))


def _depth(pc: PathCondition | None) -> int:
    if pc is None:
        return 0
    return pc.branch_count


# ---------------------------------------------------------------------------
# replay


class _Frame:
    __slots__ = ("fn", "regs", "block", "ip", "dst", "stack_base")

    def __init__(self, fn, regs, stack_base):
        self.fn = fn
        self.regs = regs
        self.block = 0
        self.ip = 0
        self.dst = None
        self.stack_base = stack_base


class _Replayer:
    def __init__(self, module: IRModule, trace: TraceFile, concrete_reads: bool, region_cap: int):
        self.module = module
        self.trace = trace
        self.events = trace.events
        self.pos = 0
        self.concrete_reads = concrete_reads
        self.region_cap = region_cap
        self.mem = SymbolicMemory(module)
        self.pc = PathCondition()
        self.br_count = 0
        self.watermark = module.stack_base
        self.consts: dict[int, Const] = {}

    def fail(self, message: str) -> ReplayError:
        # header is line 1, event i is on line i + 2
        return ReplayError(f"trace line {self.pos + 2}: {message}")

    def next(self, tag: str, ident: str | None = None) -> tuple:
        if self.pos >= len(self.events):
            raise self.fail(f"trace ended, expected {tag}")
        ev = self.events[self.pos]
        if ev[0] != tag or (ident is not None and ev[1] != ident):
            want = f"{tag} {ident}" if ident is not None else tag
            raise self.fail(f"expected {want}, found {' '.join(map(str, ev))}")
        self.pos += 1
        return ev

    def operand(self, frame: _Frame, op) -> SymExpr:
        if isinstance(op, Reg):
            return frame.regs[op.n]
        value = self.module.globals[op.name].base if isinstance(op, Glob) else op.value
        c = self.consts.get(value)
        if c is None:
            c = self.consts[value] = Const(value)
        return c

    def enter(self, name: str, args: list[SymExpr]) -> _Frame:
        fn = self.module.functions.get(name)
        if fn is None:
            raise self.fail(f"unknown function {name}")
        self.next("F", name)
        regs: list = [None] * fn.nregs
        for p, a in zip(fn.params, args):
            regs[p.reg] = a
        frame = _Frame(fn, regs, self.watermark)
        self.next("B", str(fn.blocks[0].id))
        return frame

    def add(self, c: BranchConstraint) -> None:
        self.pc.constraints.append(c)
        if c.kind == "branch":
            self.pc.branch_count += 1

    def run(self) -> PathCondition:
        if self.trace.module_hash != self.module.hash():
            raise ReplayError(f"module hash mismatch: trace {self.trace.module_hash}, "
                              f"module {self.module.hash()}")
        stack: list[_Frame] = []
        frame = self.enter(self.trace.entry, [])
        pc = self.pc
        while True:
            blk = frame.fn.blocks[frame.block]
            instrs = blk.instrs
            ins = instrs[frame.ip] if frame.ip < len(instrs) else blk.terminator
            iid = str(ins.id)
            if self.pos < len(self.events) and self.events[self.pos][0] == "ERR":
                ev = self.events[self.pos]
                if ev[2] == iid:
                    if ins.op in ("sdiv", "srem") and ev[1] == 1:
                        rhs = self.operand(frame, ins.args[1])
                        if type(rhs) is not Const:
                            pc.constraints.append(BranchConstraint(
                                iid, False, ICmp("ne", rhs, Const(0)), ins.line,
                                pc.branch_count, "fault", self.br_count))
                    self.pos += 1
                    self.next("END")
                    if self.events[self.pos - 1][1] != "abort":
                        raise self.fail("ERR not followed by END abort")
                    return pc
            frame.ip += 1
            op = ins.op
            a = ins.args
            if op == "load":
                ev = self.next("LD", iid)
                addr = self.operand(frame, a[0])
                if type(addr) is Const and addr.value != ev[2]:
                    raise self.fail(f"address mismatch at {iid}: replay {addr.value}, trace {ev[2]}")
                try:
                    v = symbolic_load(addr, ev[2], ev[3], self.mem, pc, instr_id=iid, line=ins.line,
                                      concretize=self.concrete_reads, region_cap=self.region_cap)
                except ReplayError as err:
                    raise self.fail(str(err)) from None
                if type(v) is Const and v.value != ev[3]:
                    raise self.fail(f"value mismatch at {iid}: replay {v.value}, trace {ev[3]}")
                frame.regs[ins.dst] = v
            elif op == "store":
                ev = self.next("ST", iid)
                addr = self.operand(frame, a[0])
                if type(addr) is Const and addr.value != ev[2]:
                    raise self.fail(f"address mismatch at {iid}: replay {addr.value}, trace {ev[2]}")
                if self.mem.region_of(ev[2]) is None:
                    raise self.fail(f"store at {ev[2]} outside any registered region")
                value = self.operand(frame, a[1])
                symbolic_store(addr, ev[2], value, self.mem, pc, instr_id=iid, line=ins.line)
            elif op == "icmp":
                frame.regs[ins.dst] = icmp(ins.pred, self.operand(frame, a[0]), self.operand(frame, a[1]))
            elif op == "br":
                ev = self.next("BR", iid)
                taken = ev[2]
                pc.raw_branches.append((iid, taken))
                cond = self.operand(frame, a[0])
                if type(cond) is Const:
                    if (cond.value != 0) != bool(taken):
                        raise self.fail(f"concrete branch {iid} disagrees with trace")
                else:
                    self.add(BranchConstraint(iid, bool(taken), cond, ins.line,
                                              pc.branch_count, "branch", self.br_count))
                self.br_count += 1
                frame.block = ins.targets[0] if taken else ins.targets[1]
                frame.ip = 0
                self.next("B", str(frame.fn.blocks[frame.block].id))
            elif op == "jmp":
                frame.block = ins.targets[0]
                frame.ip = 0
                self.next("B", str(frame.fn.blocks[frame.block].id))
            elif op in ("add", "sub", "mul", "and", "or", "xor", "shl", "ashr", "gep"):
                frame.regs[ins.dst] = binop("add" if op == "gep" else op,
                                            self.operand(frame, a[0]), self.operand(frame, a[1]))
            elif op in ("sdiv", "srem"):
                lhs, rhs = self.operand(frame, a[0]), self.operand(frame, a[1])
                if type(rhs) is not Const:
                    self.add(BranchConstraint(iid, True, ICmp("ne", rhs, Const(0)), ins.line,
                                              pc.branch_count, "guard"))
                frame.regs[ins.dst] = binop(op, lhs, rhs)
            elif op == "alloca":
                ev = self.next("AL", iid)
                if ev[3] != a[0].value:
                    raise self.fail(f"alloca size mismatch at {iid}")
                self.mem.register(ev[2], ev[3])
                self.watermark = ev[2] + ev[3] + 1
                frame.regs[ins.dst] = Const(ev[2])
            elif op == "input":
                ev = self.next("IN")
                if a[0].value >= 0 and ev[1] != a[0].value:
                    raise self.fail(f"input id mismatch at {iid}")
                frame.regs[ins.dst] = Input(ev[1])
                pc.inputs_seen[ev[1]] = ev[2]
            elif op == "call":
                self.next("CALL", iid)
                args = [self.operand(frame, x) for x in a]
                frame.dst = ins.dst
                stack.append(frame)
                frame = self.enter(ins.callee, args)
            elif op == "ret":
                self.next("RET")
                value = self.operand(frame, a[0]) if a else None
                self.mem.release_from(frame.stack_base)
                self.watermark = frame.stack_base
                if not stack:
                    ev = self.next("END")
                    if ev[1] != "ok":
                        raise self.fail("normal return must end with END ok")
                    if self.pos != len(self.events):
                        raise self.fail("events after END")
                    return pc
                frame = stack.pop()
                if frame.dst is not None:
                    frame.regs[frame.dst] = value
            elif op == "const":
                frame.regs[ins.dst] = self.operand(frame, a[0])
            else:  # pragma: no cover
                raise self.fail(f"cannot replay opcode {op}")


def replay(module: IRModule, trace: TraceFile, *, concrete_reads: bool = False,
           region_cap: int = REGION_CAP) -> PathCondition:
    """Symbolically replay ``trace`` over ``module`` and return its path condition."""
    return _Replayer(module, trace, concrete_reads, region_cap).run()


def check_consistency(pc: PathCondition, bindings: dict[int, int]) -> list[BranchConstraint]:
    """Constraints that do not evaluate to their recorded direction under ``bindings``."""
    full = dict(pc.inputs_seen)
    full.update({k: v for k, v in bindings.items()})
    bad = []
    for c in pc.constraints:
        v = eval_expr(c.expr, {i: full.get(i, 0) for i in c.expr.inputs})
        if v is None or bool(v) != c.taken:
            bad.append(c)
    return bad
