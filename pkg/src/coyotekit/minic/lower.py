"""Lower a linked MiniC program to the IR.

Scalar locals and parameters live in stack slots (one ``alloca`` each, hoisted
to the entry block) and are accessed through ``load``/``store``; expression
temporaries are single-assignment registers. ``&&``, ``||`` and ``!`` in
conditions become control flow.
"""
from __future__ import annotations

from dataclasses import dataclass

from ..ir import (
    BlockId, ExternDecl, GlobalVar, Glob, Imm, Instr, IRBlock, IRFunction, IRModule, Operand,
    Param, Reg,
)
from .ast import (
    Assign, Binary, Block, Call, Expr, ExprStmt, FunctionDecl, If, Index, Num, Return,
    SourceProgram, Stmt, Unary, Var, VarDecl, While,
)

_ARITH = {"+": "add", "-": "sub", "*": "mul", "/": "sdiv", "%": "srem",
          "&": "and", "|": "or", "^": "xor", "<<": "shl", ">>": "ashr"}
_CMP = {"==": "eq", "!=": "ne", "<": "slt", "<=": "sle", ">": "sgt", ">=": "sge"}


@dataclass
class _Slot:
    kind: str  # local | param_array | global
    operand: Operand  # address operand (alloca register, param register, or @global)
    size: int | None


class _FunctionLowerer:
    def __init__(self, decl: FunctionDecl, module: IRModule, signatures: dict[str, bool]):
        self.decl = decl
        self.module = module
        self.signatures = signatures
        self.blocks: list[IRBlock] = []
        self.allocas: list[Instr] = []
        self.cur: int | None = None
        self.next_reg = len(decl.params)
        self.scopes: list[dict[str, _Slot]] = []
        self.line = decl.line

    # infrastructure
    def reg(self) -> int:
        r = self.next_reg
        self.next_reg += 1
        return r

    def new_block(self) -> int:
        self.blocks.append(IRBlock(BlockId(self.decl.name, len(self.blocks))))
        return len(self.blocks) - 1

    def emit(self, ins: Instr) -> Instr:
        if self.cur is None:
            self.cur = self.new_block()  # code after return: unreachable block
        if not ins.line:
            ins.line = self.line
        blk = self.blocks[self.cur]
        if ins.is_terminator:
            blk.terminator = ins
            self.cur = None
        else:
            blk.instrs.append(ins)
        return ins

    def value(self, op: str, *args: Operand, pred: str | None = None) -> Reg:
        dst = self.reg()
        self.emit(Instr(op, dst, tuple(args), pred=pred))
        return Reg(dst)

    def alloca(self, nwords: int) -> Reg:
        dst = self.reg()
        self.allocas.append(Instr("alloca", dst, (Imm(nwords),), line=self.decl.line))
        return Reg(dst)

    def jump(self, target: int) -> None:
        if self.cur is not None:
            self.emit(Instr("jmp", targets=(target,)))

    def lookup(self, name: str) -> _Slot:
        for scope in reversed(self.scopes):
            if name in scope:
                return scope[name]
        g = self.module.globals[name]
        return _Slot("global", Glob(name), g.size if g.is_array else None)

    # driver
    def run(self) -> IRFunction:
        decl = self.decl
        self.cur = self.new_block()
        params = []
        scope: dict[str, _Slot] = {}
        for i, p in enumerate(decl.params):
            params.append(Param(i, p.name, p.size))
            if p.size is None:
                slot = self.alloca(1)
                self.emit(Instr("store", None, (slot, Reg(i)), line=decl.line))
                scope[p.name] = _Slot("local", slot, None)
            else:
                scope[p.name] = _Slot("param_array", Reg(i), p.size)
        self.scopes.append(scope)
        assert decl.body is not None
        self.block(decl.body)
        if self.cur is not None:
            self.line = decl.line
            self.emit(Instr("ret", args=(Imm(0),) if decl.returns_value else ()))
        self.blocks[0].instrs[:0] = self.allocas
        fn = IRFunction(decl.name, params, self.blocks, decl.returns_value, 0, decl.path, decl.line)
        fn.assign_ids()
        return fn

    # statements
    def block(self, blk: Block) -> None:
        self.scopes.append({})
        for s in blk.body:
            self.stmt(s)
        self.scopes.pop()

    def stmt(self, s: Stmt) -> None:
        self.line = s.line
        if isinstance(s, Block):
            self.block(s)
        elif isinstance(s, VarDecl):
            slot = self.alloca(s.size or 1)
            self.scopes[-1][s.name] = _Slot("local", slot, s.size)
            if s.init is not None:
                v = self.expr(s.init)
                self.line = s.line
                self.emit(Instr("store", None, (slot, v)))
        elif isinstance(s, Assign):
            addr = self.address(s.target)
            v = self.expr(s.value)
            self.line = s.line
            self.emit(Instr("store", None, (addr, v)))
        elif isinstance(s, If):
            then_b = self.new_block()
            else_b = self.new_block() if s.other is not None else None
            join_b = self.new_block() if s.other is None else None
            self.cond(s.cond, then_b, else_b if else_b is not None else join_b)
            self.cur = then_b
            self.scoped(s.then)
            then_falls = self.cur is not None
            if then_falls:
                if join_b is None:
                    join_b = self.new_block()
                self.line = s.line
                self.jump(join_b)
            if else_b is not None:
                self.cur = else_b
                assert s.other is not None
                self.scoped(s.other)
                if self.cur is not None:
                    if join_b is None:
                        join_b = self.new_block()
                    self.line = s.line
                    self.jump(join_b)
            self.cur = join_b
        elif isinstance(s, While):
            head = self.new_block()
            self.jump(head)
            self.cur = head
            body = self.new_block()
            exit_b = self.new_block()
            self.line = s.line
            self.cond(s.cond, body, exit_b)
            self.cur = body
            self.scoped(s.body)
            self.line = s.line
            self.jump(head)
            self.cur = exit_b
        elif isinstance(s, Return):
            if s.value is not None:
                v = self.expr(s.value)
                self.line = s.line
                self.emit(Instr("ret", args=(v,)))
            else:
                self.emit(Instr("ret"))
        elif isinstance(s, ExprStmt):
            self.expr(s.expr, discard=True)
        else:  # pragma: no cover - parser produces no other statements
            raise TypeError(type(s).__name__)

    def scoped(self, s: Stmt) -> None:
        self.scopes.append({})
        self.stmt(s)
        self.scopes.pop()

    # conditions
    def cond(self, e: Expr, t: int, f: int) -> None:
        if isinstance(e, Binary) and e.op == "&&":
            mid = self.new_block()
            self.cond(e.lhs, mid, f)
            self.cur = mid
            self.cond(e.rhs, t, f)
        elif isinstance(e, Binary) and e.op == "||":
            mid = self.new_block()
            self.cond(e.lhs, t, mid)
            self.cur = mid
            self.cond(e.rhs, t, f)
        elif isinstance(e, Unary) and e.op == "!":
            self.cond(e.operand, f, t)
        elif isinstance(e, Binary) and e.op in _CMP:
            a = self.expr(e.lhs)
            b = self.expr(e.rhs)
            c = self.value("icmp", a, b, pred=_CMP[e.op])
            self.emit(Instr("br", args=(c,), targets=(t, f)))
        else:
            v = self.expr(e)
            c = self.value("icmp", v, Imm(0), pred="ne")
            self.emit(Instr("br", args=(c,), targets=(t, f)))

    # expressions
    def address(self, target: Var | Index) -> Operand:
        slot = self.lookup(target.name)
        if isinstance(target, Var):
            return slot.operand
        idx = self.expr(target.index)
        return self.value("gep", slot.operand, idx)

    def expr(self, e: Expr, discard: bool = False) -> Operand:
        if isinstance(e, Num):
            return Imm(e.value)
        if isinstance(e, Var):
            slot = self.lookup(e.name)
            if slot.size is not None:
                return slot.operand  # array passed as base address
            return self.value("load", slot.operand)
        if isinstance(e, Index):
            return self.value("load", self.address(e))
        if isinstance(e, Call):
            args = tuple(self.expr(a) for a in e.args)
            returns = self._returns_value(e.name)
            dst = self.reg() if returns and not discard else None
            self.emit(Instr("call", dst, args, callee=e.name))
            return Reg(dst) if dst is not None else Imm(0)
        if isinstance(e, Unary):
            if e.op == "!":
                v = self.expr(e.operand)
                return self.value("icmp", v, Imm(0), pred="eq")
            v = self.expr(e.operand)
            if e.op == "-":
                return self.value("sub", Imm(0), v)
            return self.value("xor", v, Imm(-1))
        if isinstance(e, Binary):
            if e.op in ("&&", "||"):
                return self.logical_value(e)
            a = self.expr(e.lhs)
            b = self.expr(e.rhs)
            if e.op in _CMP:
                return self.value("icmp", a, b, pred=_CMP[e.op])
            return self.value(_ARITH[e.op], a, b)
        raise TypeError(type(e).__name__)  # pragma: no cover

    def logical_value(self, e: Binary) -> Operand:
        slot = self.alloca(1)
        t = self.new_block()
        f = self.new_block()
        join = self.new_block()
        self.cond(e, t, f)
        self.cur = t
        self.emit(Instr("store", None, (slot, Imm(1))))
        self.jump(join)
        self.cur = f
        self.emit(Instr("store", None, (slot, Imm(0))))
        self.jump(join)
        self.cur = join
        return self.value("load", slot)

    def _returns_value(self, name: str) -> bool:
        return self.signatures[name]


def allocate_globals(program: SourceProgram) -> dict[str, GlobalVar]:
    """Place globals at ascending addresses from 1, with a one-word gap between regions."""
    out: dict[str, GlobalVar] = {}
    addr = 1
    for g in program.globals:
        out[g.name] = GlobalVar(g.name, addr, g.words, tuple(g.init), g.size is not None, g.const,
                                g.path)
        addr += g.words + 1
    return out


def lower(program: SourceProgram) -> IRModule:
    module = IRModule()
    module.globals = allocate_globals(program)
    for fn in program.functions:
        if fn.is_extern:
            module.externs[fn.name] = ExternDecl(
                fn.name, [Param(i, p.name, p.size) for i, p in enumerate(fn.params)], fn.returns_value)
    signatures = {fn.name: fn.returns_value for fn in program.functions}
    for decl in program.defined_functions():
        module.functions[decl.name] = _FunctionLowerer(decl, module, signatures).run()
    return module
