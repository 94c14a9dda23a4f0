from __future__ import annotations

import pytest

from coyotekit.ir import (BlockId, GlobalVar, Imm, InstrId, Instr, Reg, branch_sites, intraprocedural_reachable,
                          reachable_blocks, validate)

from conftest import compile_one

SRC = """\
i32 g[2];
i32 h(i32 v) { return v * 2; }
i32 f(i32 x) {
  i32 a[3];
  a[x] = 1;
  if (x > 0) {
    return g[1] + h(a[0]);
  }
  while (x < 10) { x = x + 1; }
  return x;
}
"""


@pytest.fixture
def module():
    return compile_one(SRC)


def test_well_formed_module_has_no_diagnostics(module):
    assert validate(module) == []


def test_ids_are_dense_and_ordered(module):
    fn = module.functions["f"]
    for i, blk in enumerate(fn.blocks):
        assert blk.id == BlockId("f", i)
        for j, ins in enumerate(blk.all_instrs()):
            assert ins.id == InstrId("f", i, j)
    assert InstrId.parse("f:2:3") == InstrId("f", 2, 3)
    assert InstrId.parse("f:2:3").block_id == BlockId("f", 2)
    assert BlockId.parse(str(BlockId("f", 4))) == BlockId("f", 4)


def test_globals_start_at_one_and_stack_follows(module):
    g = module.globals["g"]
    assert g.base == 1 and g.size == 2 and g.init == (0, 0)
    assert module.stack_base > module.globals_end
    assert module.global_at(2) is g and module.global_at(3) is None


def test_hash_is_stable_and_sensitive(module):
    assert module.hash() == compile_one(SRC).hash()
    other = compile_one(SRC.replace("v * 2", "v * 3"))
    assert other.hash() != module.hash()


def test_copy_is_independent(module):
    dup = module.copy()
    dup.functions["f"].blocks[0].instrs.pop()
    assert validate(module) == []
    assert dup.hash() != module.hash()


def test_pretty_lists_every_instruction(module):
    text = module.pretty()
    assert "global @g[2] base=1" in text
    assert "func @f(" in text and "func @h(" in text
    n = sum(1 for fn in module.functions.values() for _ in fn.instructions())
    assert sum(1 for line in text.splitlines() if "#L" in line) == n


def test_reachable_blocks_includes_callee_entry(module):
    reach = reachable_blocks(module, "f", 0)
    assert BlockId("h", 0) in reach
    fn = module.functions["f"]
    assert {b.index for b in reach if b.function == "f"} == intraprocedural_reachable(fn, 0)


def test_branch_sites_sorted(module):
    sites = branch_sites(module.functions["f"])
    assert len(sites) == 2
    assert [s[0] for s in sites] == sorted(s[0] for s in sites)
    for iid, t, e in sites:
        term = module.instr(iid)
        assert term.op == "br" and term.targets == (t.index, e.index)


# -- validation catches broken modules -----------------------------------------


def _messages(module) -> str:
    return " | ".join(d.message for d in validate(module))


def test_missing_terminator(module):
    module.functions["h"].blocks[0].terminator = None
    assert "lacks a terminator" in _messages(module)


def test_bad_branch_target(module):
    fn = module.functions["f"]
    br = [b for b in fn.blocks if b.terminator.op == "br"][0]
    br.terminator.targets = (br.terminator.targets[0], 99)
    assert "b99 does not exist" in _messages(module)


def test_double_assignment(module):
    fn = module.functions["h"]
    blk = fn.blocks[0]
    dst = blk.instrs[0].dst
    blk.instrs.append(Instr("const", dst, (Imm(3),), line=2))
    fn.assign_ids()
    assert "assigned more than once" in _messages(module)


def test_read_before_assignment(module):
    fn = module.functions["h"]
    r = fn.nregs
    # %r+1 reads %r, which is only defined afterwards
    fn.blocks[0].instrs[0:0] = [Instr("add", r + 1, (Reg(r), Imm(1)), line=2),
                                Instr("const", r, (Imm(0),), line=2)]
    fn.assign_ids()
    assert "read before assignment" in _messages(module)


def test_unknown_callee(module):
    for ins in module.functions["f"].instructions():
        if ins.op == "call":
            ins.callee = "nowhere"
    assert "undefined function 'nowhere'" in _messages(module)


def test_input_in_user_function(module):
    fn = module.functions["h"]
    fn.blocks[0].instrs.append(Instr("input", fn.nregs, (Imm(0),), line=2))
    fn.assign_ids()
    assert "input instruction outside a driver" in _messages(module)


def test_overlapping_globals(module):
    module.globals["z"] = GlobalVar("z", 2, 1, (0,))
    assert "overlaps" in _messages(module)


def test_terminator_mid_block(module):
    blk = module.functions["h"].blocks[0]
    blk.instrs.insert(0, Instr("ret", args=(Imm(0),), line=2))
    module.functions["h"].assign_ids()
    assert "terminator before end of block" in _messages(module)
