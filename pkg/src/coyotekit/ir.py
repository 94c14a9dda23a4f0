"""Intermediate representation: instructions, blocks, functions, modules.

The IR is a small load/store language over 32-bit signed integers with
word-addressed memory. It is the target of both the concrete executor and
the symbolic replay engine.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Iterable, Iterator

ICMP_PREDICATES = ("eq", "ne", "slt", "sle", "sgt", "sge")
BINARY_OPS = ("add", "sub", "mul", "sdiv", "srem", "and", "or", "xor", "shl", "ashr")
VALUE_OPS = BINARY_OPS + ("const", "icmp", "alloca", "load", "store", "gep", "call", "input")
TERMINATORS = ("br", "jmp", "ret")

# Reachability follows calls this many levels deep (entry blocks only).
CALL_REACH_LEVELS = 1

FRESH_INPUT = -1  # `input` operand used by stubs: take the next dynamic input id


@dataclass(frozen=True, order=True)
class BlockId:
    function: str
    index: int

    def __str__(self) -> str:
        return f"{self.function}:{self.index}"

    @classmethod
    def parse(cls, text: str) -> BlockId:
        fn, _, idx = text.rpartition(":")
        if not fn:
            raise ValueError(f"malformed block id {text!r}")
        return cls(fn, int(idx))


@dataclass(frozen=True, order=True)
class InstrId:
    function: str
    block: int
    index: int

    def __str__(self) -> str:
        return f"{self.function}:{self.block}:{self.index}"

    @property
    def block_id(self) -> BlockId:
        return BlockId(self.function, self.block)

    @classmethod
    def parse(cls, text: str) -> InstrId:
        parts = text.rsplit(":", 2)
        if len(parts) != 3 or not parts[0]:
            raise ValueError(f"malformed instruction id {text!r}")
        return cls(parts[0], int(parts[1]), int(parts[2]))


@dataclass(frozen=True)
class Reg:
    n: int

    def __str__(self) -> str:
        return f"%{self.n}"


@dataclass(frozen=True)
class Imm:
    value: int

    def __str__(self) -> str:
        return str(self.value)


@dataclass(frozen=True)
class Glob:
    name: str

    def __str__(self) -> str:
        return f"@{self.name}"


Operand = Reg | Imm | Glob


@dataclass
class Instr:
    """One IR instruction or terminator.

    ``args`` holds value operands. ``pred`` is set for ``icmp``; ``callee`` for
    ``call``; ``targets`` holds block indices for ``br`` (true, false) and
    ``jmp``. ``alloca`` and ``input`` carry their integer immediate in
    ``args[0]`` as an :class:`Imm`.
    """

    op: str
    dst: int | None = None
    args: tuple[Operand, ...] = ()
    line: int = 0
    pred: str | None = None
    callee: str | None = None
    targets: tuple[int, ...] = ()
    id: InstrId | None = None

    @property
    def is_terminator(self) -> bool:
        return self.op in TERMINATORS


@dataclass
class IRBlock:
    id: BlockId
    instrs: list[Instr] = field(default_factory=list)
    terminator: Instr | None = None

    def all_instrs(self) -> list[Instr]:
        if self.terminator is None:
            return list(self.instrs)
        return [*self.instrs, self.terminator]

    def successors(self) -> tuple[int, ...]:
        if self.terminator is None:
            return ()
        return self.terminator.targets


@dataclass
class Param:
    reg: int
    name: str
    size: int | None = None  # None: scalar; N: array of N words passed by base address

    @property
    def is_array(self) -> bool:
        return self.size is not None


@dataclass
class IRFunction:
    name: str
    params: list[Param]
    blocks: list[IRBlock]
    returns_value: bool = True
    entry: int = 0
    file: str = ""
    line: int = 0
    kind: str = "user"  # user | driver | stub
    nregs: int = 0

    def block(self, index: int) -> IRBlock:
        return self.blocks[index]

    def instructions(self) -> Iterator[Instr]:
        for blk in self.blocks:
            yield from blk.all_instrs()

    def assign_ids(self) -> None:
        for i, blk in enumerate(self.blocks):
            blk.id = BlockId(self.name, i)
            for j, ins in enumerate(blk.all_instrs()):
                ins.id = InstrId(self.name, i, j)
        regs = [p.reg for p in self.params]
        regs.extend(ins.dst for ins in self.instructions() if ins.dst is not None)
        self.nregs = max(regs, default=-1) + 1


@dataclass
class GlobalVar:
    name: str
    base: int
    size: int
    init: tuple[int, ...]
    is_array: bool = False
    const: bool = False
    file: str = ""

    @property
    def end(self) -> int:
        return self.base + self.size


@dataclass
class ExternDecl:
    name: str
    params: list[Param]
    returns_value: bool


@dataclass
class IRModule:
    functions: dict[str, IRFunction] = field(default_factory=dict)
    globals: dict[str, GlobalVar] = field(default_factory=dict)
    externs: dict[str, ExternDecl] = field(default_factory=dict)

    @property
    def line_table(self) -> dict[InstrId, int]:
        return {ins.id: ins.line for fn in self.functions.values() for ins in fn.instructions()}

    @property
    def globals_end(self) -> int:
        return max((g.end for g in self.globals.values()), default=1)

    @property
    def stack_base(self) -> int:
        # one-word red zone between the last global and the stack
        return self.globals_end + 1

    def user_functions(self) -> list[IRFunction]:
        return [fn for fn in self.functions.values() if fn.kind == "user"]

    def block(self, bid: BlockId) -> IRBlock:
        return self.functions[bid.function].blocks[bid.index]

    def instr(self, iid: InstrId) -> Instr:
        blk = self.functions[iid.function].blocks[iid.block]
        return blk.all_instrs()[iid.index]

    def global_at(self, addr: int) -> GlobalVar | None:
        for g in self.globals.values():
            if g.base <= addr < g.end:
                return g
        return None

    def pretty(self) -> str:
        return format_module(self)

    def hash(self) -> str:
        return hashlib.sha256(self.pretty().encode()).hexdigest()[:16]

    def copy(self) -> IRModule:
        import copy

        return copy.deepcopy(self)

    def extended(self) -> IRModule:
        """Shallow copy whose function and extern tables can be changed independently."""
        return IRModule(dict(self.functions), dict(self.globals), dict(self.externs))


# ---------------------------------------------------------------------------
# pretty printing


def _fmt_args(args: Iterable[Operand]) -> str:
    return ", ".join(str(a) for a in args)


def format_instr(ins: Instr) -> str:
    op = ins.op
    if op == "const":
        body = f"%{ins.dst} = const {ins.args[0]}"
    elif op in BINARY_OPS or op == "gep":
        body = f"%{ins.dst} = {op} {_fmt_args(ins.args)}"
    elif op == "icmp":
        body = f"%{ins.dst} = icmp {ins.pred} {_fmt_args(ins.args)}"
    elif op == "alloca":
        body = f"%{ins.dst} = alloca {ins.args[0]}"
    elif op == "load":
        body = f"%{ins.dst} = load {ins.args[0]}"
    elif op == "store":
        body = f"store {_fmt_args(ins.args)}"
    elif op == "input":
        n = ins.args[0].value  # type: ignore[union-attr]
        body = f"%{ins.dst} = input {'fresh' if n == FRESH_INPUT else n}"
    elif op == "call":
        lhs = f"%{ins.dst} = " if ins.dst is not None else ""
        body = f"{lhs}call @{ins.callee}({_fmt_args(ins.args)})"
    elif op == "br":
        body = f"br {ins.args[0]}, b{ins.targets[0]}, b{ins.targets[1]}"
    elif op == "jmp":
        body = f"jmp b{ins.targets[0]}"
    elif op == "ret":
        body = f"ret {ins.args[0]}" if ins.args else "ret"
    else:
        body = f"<{op}>"
    return f"{body:<40} #L{ins.line}"


def _fmt_param(p: Param) -> str:
    return f"%{p.reg} {p.name}: i32[{p.size}]" if p.is_array else f"%{p.reg} {p.name}: i32"


def format_function(fn: IRFunction) -> str:
    ret = "i32" if fn.returns_value else "void"
    params = ", ".join(_fmt_param(p) for p in fn.params)
    lines = [f"func @{fn.name}({params}) -> {ret} kind={fn.kind} file={fn.file!r} line={fn.line} {{"]
    for i, blk in enumerate(fn.blocks):
        lines.append(f"b{i}:")
        for ins in blk.instrs:
            lines.append("  " + format_instr(ins))
        if blk.terminator is not None:
            lines.append("  " + format_instr(blk.terminator))
    lines.append("}")
    return "\n".join(lines)


def format_module(module: IRModule) -> str:
    out: list[str] = []
    for g in sorted(module.globals.values(), key=lambda g: g.base):
        qual = "const " if g.const else ""
        shape = f"[{g.size}]" if g.is_array else ""
        init = ", ".join(str(v) for v in g.init)
        out.append(f"{qual}global @{g.name}{shape} base={g.base} = {{{init}}}")
    for name in sorted(module.externs):
        ext = module.externs[name]
        ret = "i32" if ext.returns_value else "void"
        out.append(f"extern @{name}({', '.join(_fmt_param(p) for p in ext.params)}) -> {ret}")
    for name in sorted(module.functions):
        out.append(format_function(module.functions[name]))
    return "\n".join(out) + "\n"


# ---------------------------------------------------------------------------
# validation


@dataclass(frozen=True)
class Diagnostic:
    where: str
    message: str

    def __str__(self) -> str:
        return f"{self.where}: {self.message}"


_ARITY = {op: 2 for op in BINARY_OPS} | {"const": 1, "icmp": 2, "alloca": 1, "load": 1,
                                         "store": 2, "gep": 2, "input": 1}


def validate(module: IRModule) -> list[Diagnostic]:
    """Check structural invariants; an empty list means the module is well formed."""
    diags: list[Diagnostic] = []
    callable_names = set(module.functions) | set(module.externs)

    # global regions: disjoint, starting at 1
    regions = sorted(module.globals.values(), key=lambda g: g.base)
    prev_end = 1
    for g in regions:
        if g.base < prev_end or g.size < 1:
            diags.append(Diagnostic(f"@{g.name}", "global region overlaps or starts below address 1"))
        if len(g.init) != g.size:
            diags.append(Diagnostic(f"@{g.name}", "initializer length differs from size"))
        prev_end = max(prev_end, g.end)

    for fn in module.functions.values():
        diags.extend(_validate_function(module, fn, callable_names))
    return diags


def _validate_function(module: IRModule, fn: IRFunction, callable_names: set[str]) -> list[Diagnostic]:
    diags: list[Diagnostic] = []
    if not fn.blocks or not 0 <= fn.entry < len(fn.blocks):
        return [Diagnostic(fn.name, "entry block missing")]
    seen_ids: set[BlockId] = set()
    for i, blk in enumerate(fn.blocks):
        if blk.id in seen_ids or blk.id != BlockId(fn.name, i):
            diags.append(Diagnostic(str(blk.id), "duplicate or misnumbered block id"))
        seen_ids.add(blk.id)
        if blk.terminator is None:
            diags.append(Diagnostic(str(blk.id), "block lacks a terminator"))
        for ins in blk.instrs:
            if ins.is_terminator:
                diags.append(Diagnostic(str(ins.id), "terminator before end of block"))
        for ins in blk.all_instrs():
            diags.extend(_validate_instr(module, fn, ins, callable_names))

    # single assignment + definition before use (must-defined dataflow)
    defs: dict[int, InstrId | None] = {p.reg: None for p in fn.params}
    for ins in fn.instructions():
        if ins.dst is None:
            continue
        if ins.dst in defs:
            diags.append(Diagnostic(str(ins.id), f"register %{ins.dst} assigned more than once"))
        defs[ins.dst] = ins.id
    diags.extend(_check_defined_before_use(fn))
    return diags


def _validate_instr(module: IRModule, fn: IRFunction, ins: Instr, callable_names: set[str]) -> list[Diagnostic]:
    where = str(ins.id)
    out: list[Diagnostic] = []
    op = ins.op
    if op not in VALUE_OPS and op not in TERMINATORS:
        return [Diagnostic(where, f"unknown opcode {op!r}")]
    if op in _ARITY and len(ins.args) != _ARITY[op]:
        out.append(Diagnostic(where, f"{op} expects {_ARITY[op]} operands"))
    if op == "icmp" and ins.pred not in ICMP_PREDICATES:
        out.append(Diagnostic(where, f"bad icmp predicate {ins.pred!r}"))
    if op in ("const", "alloca", "input") and ins.args and not isinstance(ins.args[0], Imm):
        out.append(Diagnostic(where, f"{op} needs an immediate operand"))
    if op == "alloca" and ins.args and isinstance(ins.args[0], Imm) and ins.args[0].value < 1:
        out.append(Diagnostic(where, "alloca of fewer than one word"))
    if op == "input" and fn.kind == "user":
        out.append(Diagnostic(where, "input instruction outside a driver or stub"))
    if op in ("store", "call", "br", "jmp", "ret") and ins.dst is not None and op != "call":
        out.append(Diagnostic(where, f"{op} has no result"))
    if op in VALUE_OPS and op not in ("store", "call") and ins.dst is None:
        out.append(Diagnostic(where, f"{op} needs a result register"))
    if op == "call":
        if ins.callee not in callable_names:
            out.append(Diagnostic(where, f"call to undefined function {ins.callee!r}"))
    if op == "br":
        if len(ins.args) != 1 or len(ins.targets) != 2:
            out.append(Diagnostic(where, "br needs one condition and two targets"))
    if op == "jmp" and len(ins.targets) != 1:
        out.append(Diagnostic(where, "jmp needs one target"))
    for t in ins.targets:
        if not 0 <= t < len(fn.blocks):
            out.append(Diagnostic(where, f"branch target b{t} does not exist"))
    for a in ins.args:
        if isinstance(a, Glob) and a.name not in module.globals:
            out.append(Diagnostic(where, f"unknown global @{a.name}"))
        if isinstance(a, Reg) and not 0 <= a.n < max(fn.nregs, 1):
            out.append(Diagnostic(where, f"register %{a.n} out of range"))
    return out


def _check_defined_before_use(fn: IRFunction) -> list[Diagnostic]:
    n = len(fn.blocks)
    preds: list[list[int]] = [[] for _ in range(n)]
    for i, blk in enumerate(fn.blocks):
        for t in blk.successors():
            if 0 <= t < n:
                preds[t].append(i)
    universe = frozenset(range(fn.nregs))
    params = frozenset(p.reg for p in fn.params)
    gen = []
    for blk in fn.blocks:
        gen.append(frozenset(ins.dst for ins in blk.all_instrs() if ins.dst is not None))
    inn: list[frozenset[int]] = [universe] * n
    inn[fn.entry] = params
    changed = True
    while changed:
        changed = False
        for i in range(n):
            if i == fn.entry:
                new = params
            elif preds[i]:
                new = frozenset.intersection(*[inn[p] | gen[p] for p in preds[i]])
            else:
                new = universe  # unreachable: vacuous
            if new != inn[i]:
                inn[i] = new
                changed = True
    diags = []
    for i, blk in enumerate(fn.blocks):
        defined = set(inn[i])
        for ins in blk.all_instrs():
            for a in ins.args:
                if isinstance(a, Reg) and a.n not in defined:
                    diags.append(Diagnostic(str(ins.id), f"register %{a.n} read before assignment"))
            if ins.dst is not None:
                defined.add(ins.dst)
    return diags


# ---------------------------------------------------------------------------
# CFG queries


def reachable_blocks(module: IRModule, function: str, start: BlockId | int) -> set[BlockId]:
    """Forward closure from ``start`` plus entry blocks of directly called functions."""
    fn = module.functions[function]
    idx = start.index if isinstance(start, BlockId) else start
    seen = {idx}
    stack = [idx]
    while stack:
        b = stack.pop()
        for t in fn.blocks[b].successors():
            if t not in seen:
                seen.add(t)
                stack.append(t)
    out = {BlockId(function, b) for b in seen}
    if CALL_REACH_LEVELS > 0:
        for b in seen:
            for ins in fn.blocks[b].instrs:
                if ins.op == "call" and ins.callee in module.functions:
                    callee = module.functions[ins.callee]
                    out.add(BlockId(callee.name, callee.entry))
    return out


def intraprocedural_reachable(fn: IRFunction, start: int) -> set[int]:
    seen = {start}
    stack = [start]
    while stack:
        b = stack.pop()
        for t in fn.blocks[b].successors():
            if t not in seen:
                seen.add(t)
                stack.append(t)
    return seen


def branch_sites(fn: IRFunction) -> list[tuple[InstrId, BlockId, BlockId]]:
    sites = []
    for blk in fn.blocks:
        term = blk.terminator
        if term is not None and term.op == "br":
            sites.append((term.id, BlockId(fn.name, term.targets[0]), BlockId(fn.name, term.targets[1])))
    sites.sort(key=lambda s: s[0])
    return sites
