"""Automatic test driver and stub generation.

A driver ``__drv_<target>`` feeds one symbolic input per parameter scalar,
parameter array cell and referenced (non-const) global cell, then calls the
target. Every extern reachable from the target is replaced by a stub that
returns a fresh symbolic value per dynamic call.
"""
from __future__ import annotations

from dataclasses import dataclass, field

from .ir import FRESH_INPUT, Glob, Imm, Instr, IRBlock, IRFunction, IRModule, BlockId, Param, Reg
from .trace import TestCase

DRIVER_PREFIX = "__drv_"


class HarnessError(ValueError):
    pass


@dataclass(frozen=True)
class InputRole:
    kind: str  # paramScalar | paramArrayCell | globalScalar | globalArrayCell | stubReturn
    name: str
    index: int | None = None  # array cell, or call ordinal for stub returns

    def __str__(self) -> str:
        return f"{self.kind}({self.name})" if self.index is None else f"{self.kind}({self.name}, {self.index})"


@dataclass
class HarnessPlan:
    target: str
    inputs: list[tuple[int, InputRole]] = field(default_factory=list)

    @property
    def driver_name(self) -> str:
        return DRIVER_PREFIX + self.target

    def role(self, input_id: int) -> InputRole | None:
        for i, r in self.inputs:
            if i == input_id:
                return r
        return None


def _global_refs(fn: IRFunction) -> set[str]:
    return {a.name for ins in fn.instructions() for a in ins.args if isinstance(a, Glob)}


def _calls(fn: IRFunction) -> list[str]:
    return [ins.callee for ins in fn.instructions() if ins.op == "call"]


def plan_harness(module: IRModule, target: str) -> HarnessPlan:
    if target in module.externs and target not in module.functions:
        raise HarnessError(f"cannot test extern function {target}")
    if target not in module.functions:
        raise HarnessError(f"unknown function {target}")
    fn = module.functions[target]
    plan = HarnessPlan(target)
    roles: list[InputRole] = []
    for p in fn.params:
        if p.is_array:
            roles.extend(InputRole("paramArrayCell", p.name, i) for i in range(p.size))
        else:
            roles.append(InputRole("paramScalar", p.name))

    referenced = _global_refs(fn)
    for callee in _calls(fn):
        if callee in module.functions and module.functions[callee].kind == "user":
            referenced |= _global_refs(module.functions[callee])
    for name in sorted(referenced):
        g = module.globals[name]
        if g.const:
            continue
        if g.is_array:
            roles.extend(InputRole("globalArrayCell", name, i) for i in range(g.size))
        else:
            roles.append(InputRole("globalScalar", name))

    ordinals: dict[str, int] = {}
    for callee in _calls(fn):
        ext = module.externs.get(callee)
        if ext is not None and ext.returns_value:
            k = ordinals.get(callee, 0)
            ordinals[callee] = k + 1
            roles.append(InputRole("stubReturn", callee, k))
    plan.inputs = list(enumerate(roles))
    return plan


def _reach(module: IRModule, target: str) -> tuple[set[str], set[str]]:
    seen = {target}
    stack = [target]
    externs: set[str] = set()
    while stack:
        fn = module.functions[stack.pop()]
        for callee in _calls(fn):
            if callee in module.externs and callee not in module.functions:
                externs.add(callee)
            elif callee in module.functions and callee not in seen:
                seen.add(callee)
                stack.append(callee)
    return seen, externs


def reachable_externs(module: IRModule, target: str) -> list[str]:
    return sorted(_reach(module, target)[1])


def reachable_functions(module: IRModule, target: str) -> list[str]:
    """Defined functions callable from ``target``, including itself."""
    return sorted(_reach(module, target)[0])


def synthesize_driver(module: IRModule, plan: HarnessPlan) -> IRModule:
    """Return a copy of ``module`` with the driver and stubs added.

    Existing functions are shared with ``module``; only the tables are copied.
    """
    out = module.extended()
    target = out.functions[plan.target]
    name = plan.driver_name
    instrs: list[Instr] = []
    nreg = 0

    def reg() -> int:
        nonlocal nreg
        nreg += 1
        return nreg - 1

    bases: dict[str, int] = {}
    for p in target.params:
        if p.is_array:
            r = reg()
            instrs.append(Instr("alloca", r, (Imm(p.size),)))
            bases[p.name] = r
    args: dict[str, Reg] = {}
    for input_id, role in plan.inputs:
        if role.kind == "stubReturn":
            continue
        r = reg()
        instrs.append(Instr("input", r, (Imm(input_id),)))
        if role.kind == "paramScalar":
            args[role.name] = Reg(r)
        elif role.kind == "paramArrayCell":
            p = reg()
            instrs.append(Instr("gep", p, (Reg(bases[role.name]), Imm(role.index))))
            instrs.append(Instr("store", None, (Reg(p), Reg(r))))
        elif role.kind == "globalScalar":
            instrs.append(Instr("store", None, (Glob(role.name), Reg(r))))
        elif role.kind == "globalArrayCell":
            p = reg()
            instrs.append(Instr("gep", p, (Glob(role.name), Imm(role.index))))
            instrs.append(Instr("store", None, (Reg(p), Reg(r))))
    call_args = tuple(Reg(bases[p.name]) if p.is_array else args[p.name] for p in target.params)
    dst = reg() if target.returns_value else None
    instrs.append(Instr("call", dst, call_args, callee=plan.target))
    for ins in instrs:
        ins.line = target.line
    blk = IRBlock(BlockId(name, 0), instrs, Instr("ret", line=target.line))
    driver = IRFunction(name, [], [blk], False, 0, target.file, target.line, kind="driver")
    driver.assign_ids()
    out.functions[name] = driver

    for ext_name in reachable_externs(module, plan.target):
        ext = out.externs.pop(ext_name)
        params = [Param(i, p.name, p.size) for i, p in enumerate(ext.params)]
        k = len(params)
        if ext.returns_value:
            body = [Instr("input", k, (Imm(FRESH_INPUT),))]
            term = Instr("ret", args=(Reg(k),))
        else:
            body, term = [], Instr("ret")
        stub = IRFunction(ext_name, params, [IRBlock(BlockId(ext_name, 0), body, term)],
                          ext.returns_value, 0, "<stub>", 0, kind="stub")
        stub.assign_ids()
        out.functions[ext_name] = stub
    return out


def default_testcase(plan: HarnessPlan) -> TestCase:
    return TestCase(0, {i: 0 for i, _ in plan.inputs}, None)


def build_harness(module: IRModule, target: str) -> tuple[HarnessPlan, IRModule]:
    plan = plan_harness(module, target)
    return plan, synthesize_driver(module, plan)
