"""Concrete tracing interpreter for the IR (offline mode: one path per run)."""
from __future__ import annotations

from dataclasses import dataclass

from .ir import FRESH_INPUT, Glob, Imm, IRModule, Reg
from .trace import (
    ERR_CALL_DEPTH, ERR_DIV_ZERO, ERR_MEMORY, ERR_STEP_LIMIT, TestCase, TraceFile,
)

MASK = 0xFFFFFFFF
SIGN = 0x80000000


def wrap32(v: int) -> int:
    v &= MASK
    return v - 0x100000000 if v & SIGN else v


def sdiv32(a: int, b: int) -> int:
    q = abs(a) // abs(b)
    return wrap32(q if (a < 0) == (b < 0) else -q)


def srem32(a: int, b: int) -> int:
    return wrap32(a - sdiv32(a, b) * b)


@dataclass(frozen=True)
class StepLimits:
    max_steps: int = 200_000
    max_call_depth: int = 256


# opcodes of the compiled form
(ADD, SUB, MUL, SDIV, SREM, AND, OR, XOR, SHL, ASHR, EQ, NE, SLT, SLE, SGT, SGE,
 ALLOCA, LOAD, STORE, CALL, INPUT, MOV, BR, JMP, RET) = range(25)
_BIN = {"add": ADD, "sub": SUB, "mul": MUL, "sdiv": SDIV, "srem": SREM, "and": AND, "or": OR,
        "xor": XOR, "shl": SHL, "ashr": ASHR, "gep": ADD}
_CMP = {"eq": EQ, "ne": NE, "slt": SLT, "sle": SLE, "sgt": SGT, "sge": SGE}


class _CompiledFunction:
    """Blocks as lists of tuples over a register file that also holds immediates."""

    __slots__ = ("name", "blocks", "block_ids", "template", "nparams")

    def __init__(self, module: IRModule, name: str):
        fn = module.functions[name]
        self.name = name
        self.nparams = len(fn.params)
        consts: dict[int, int] = {}
        template = [0] * fn.nregs

        def slot(op) -> int:
            if isinstance(op, Reg):
                return op.n
            value = module.globals[op.name].base if isinstance(op, Glob) else op.value
            if value not in consts:
                consts[value] = len(template)
                template.append(value)
            return consts[value]

        self.blocks = []
        self.block_ids = [str(b.id) for b in fn.blocks]
        for blk in fn.blocks:
            code = []
            for ins in blk.all_instrs():
                iid = str(ins.id)
                op = ins.op
                a = ins.args
                if op in _BIN:
                    code.append((_BIN[op], ins.dst, slot(a[0]), slot(a[1]), iid))
                elif op == "icmp":
                    code.append((_CMP[ins.pred], ins.dst, slot(a[0]), slot(a[1]), iid))
                elif op == "const":
                    code.append((MOV, ins.dst, slot(a[0]), iid))
                elif op == "alloca":
                    code.append((ALLOCA, ins.dst, a[0].value, iid))
                elif op == "load":
                    code.append((LOAD, ins.dst, slot(a[0]), iid))
                elif op == "store":
                    code.append((STORE, slot(a[0]), slot(a[1]), iid))
                elif op == "call":
                    code.append((CALL, ins.dst, ins.callee, tuple(slot(x) for x in a), iid))
                elif op == "input":
                    code.append((INPUT, ins.dst, a[0].value, iid))
                elif op == "br":
                    code.append((BR, slot(a[0]), ins.targets[0], ins.targets[1], iid))
                elif op == "jmp":
                    code.append((JMP, ins.targets[0], iid))
                elif op == "ret":
                    code.append((RET, slot(a[0]) if a else -1, iid))
                else:  # pragma: no cover - validate rejects unknown opcodes
                    raise ValueError(f"cannot execute {op}")
            self.blocks.append(code)
        self.template = template


class Program:
    """An IR module prepared for repeated execution."""

    def __init__(self, module: IRModule):
        self.module = module
        self.hash = module.hash()
        self.functions = {name: _CompiledFunction(module, name) for name in module.functions}
        self.init_memory: dict[int, int] = {}
        for g in module.globals.values():
            for i, v in enumerate(g.init):
                self.init_memory[g.base + i] = v
        static_ids = [ins.args[0].value for fn in module.functions.values()
                      for ins in fn.instructions() if ins.op == "input"
                      and ins.args[0].value != FRESH_INPUT]
        self.fresh_base = max(static_ids, default=-1) + 1
        self.stack_base = module.stack_base


def execute(module: IRModule | Program, entry: str, testcase: TestCase,
            limits: StepLimits = StepLimits()) -> TraceFile:
    """Run ``entry`` concretely under ``testcase`` and return the trace of the single path taken."""
    prog = module if isinstance(module, Program) else Program(module)
    events: list[tuple] = []
    ev = events.append
    trace = TraceFile(prog.hash, testcase.id, entry, events)
    bindings = testcase.bindings
    mem = dict(prog.init_memory)
    watermark = prog.stack_base
    fresh = prog.fresh_base
    max_steps = limits.max_steps
    max_depth = limits.max_call_depth
    steps = 0

    fn = prog.functions[entry]
    regs = list(fn.template)
    ev(("F", fn.name))
    frames: list[tuple] = []  # (fn, regs, block, ip, dst, frame_watermark)
    frame_base = watermark
    block = 0
    ev(("B", fn.block_ids[0]))
    code = fn.blocks[0]
    ip = 0
    depth = 1

    while True:
        ins = code[ip]
        ip += 1
        steps += 1
        if steps > max_steps:
            ev(("ERR", ERR_STEP_LIMIT, ins[-1]))
            ev(("END", "abort"))
            return trace
        op = ins[0]
        if op <= ASHR:
            a = regs[ins[2]]
            b = regs[ins[3]]
            if op == ADD:
                v = a + b
            elif op == SUB:
                v = a - b
            elif op == MUL:
                v = a * b
            elif op == SDIV or op == SREM:
                if b == 0:
                    ev(("ERR", ERR_DIV_ZERO, ins[4]))
                    ev(("END", "abort"))
                    return trace
                v = sdiv32(a, b) if op == SDIV else srem32(a, b)
            elif op == AND:
                v = a & b
            elif op == OR:
                v = a | b
            elif op == XOR:
                v = a ^ b
            elif op == SHL:
                v = a << (b & 31)
            else:
                v = a >> (b & 31)
            v &= MASK
            regs[ins[1]] = v - 0x100000000 if v & SIGN else v
        elif op <= SGE:
            a = regs[ins[2]]
            b = regs[ins[3]]
            if op == EQ:
                r = a == b
            elif op == NE:
                r = a != b
            elif op == SLT:
                r = a < b
            elif op == SLE:
                r = a <= b
            elif op == SGT:
                r = a > b
            else:
                r = a >= b
            regs[ins[1]] = 1 if r else 0
        elif op == LOAD:
            addr = regs[ins[2]]
            v = mem.get(addr)
            if v is None:
                ev(("ERR", ERR_MEMORY, ins[3]))
                ev(("END", "abort"))
                return trace
            regs[ins[1]] = v
            ev(("LD", ins[3], addr, v))
        elif op == STORE:
            addr = regs[ins[1]]
            if addr not in mem:
                ev(("ERR", ERR_MEMORY, ins[3]))
                ev(("END", "abort"))
                return trace
            v = regs[ins[2]]
            mem[addr] = v
            ev(("ST", ins[3], addr, v))
        elif op == BR:
            taken = 1 if regs[ins[1]] != 0 else 0
            ev(("BR", ins[4], taken))
            block = ins[2] if taken else ins[3]
            code = fn.blocks[block]
            ip = 0
            ev(("B", fn.block_ids[block]))
        elif op == JMP:
            block = ins[1]
            code = fn.blocks[block]
            ip = 0
            ev(("B", fn.block_ids[block]))
        elif op == ALLOCA:
            n = ins[2]
            base = watermark
            for addr in range(base, base + n):
                mem[addr] = 0
            watermark = base + n + 1  # one-word red zone
            regs[ins[1]] = base
            ev(("AL", ins[3], base, n))
        elif op == CALL:
            if depth >= max_depth:
                ev(("ERR", ERR_CALL_DEPTH, ins[4]))
                ev(("END", "abort"))
                return trace
            callee = prog.functions.get(ins[2])
            if callee is None:
                raise RuntimeError(f"call to {ins[2]} which has no body; generate stubs first")
            ev(("CALL", ins[4], ins[2]))
            new_regs = list(callee.template)
            for i, s in enumerate(ins[3]):
                new_regs[i] = regs[s]
            frames.append((fn, regs, block, ip, ins[1], frame_base))
            depth += 1
            fn = callee
            regs = new_regs
            frame_base = watermark
            block = 0
            code = fn.blocks[0]
            ip = 0
            ev(("F", fn.name))
            ev(("B", fn.block_ids[0]))
        elif op == RET:
            value = regs[ins[1]] if ins[1] >= 0 else 0
            ev(("RET",))
            for addr in range(frame_base, watermark):
                mem.pop(addr, None)
            watermark = frame_base
            if not frames:
                ev(("END", "ok"))
                return trace
            fn, regs, block, ip, dst, frame_base = frames.pop()
            code = fn.blocks[block]
            depth -= 1
            if dst is not None:
                regs[dst] = value
        elif op == INPUT:
            iid = ins[2]
            if iid == FRESH_INPUT:
                iid = fresh
                fresh += 1
            v = wrap32(bindings.get(iid, 0))
            regs[ins[1]] = v
            ev(("IN", iid, v))
        elif op == MOV:
            regs[ins[1]] = regs[ins[2]]
        else:  # pragma: no cover
            raise RuntimeError(f"bad opcode {op}")
