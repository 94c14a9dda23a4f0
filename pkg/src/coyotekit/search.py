"""Execution tree and flip-candidate selection (DFS, CCS and their hybrid).

The tree is a trie over symbolic branch decisions ``(instrId, taken)``. Every
node carries the status of its *untaken sibling*, i.e. of the path that flips
the node's own decision. Candidates are indexed by a DFS heap and a CCS pool
so that selection does not walk the whole tree.
"""
from __future__ import annotations

import heapq
from dataclasses import dataclass, field

from .coverage import LineIndex, trace_coverage
from .ir import BlockId, InstrId, IRModule, reachable_blocks
from .symbolic import FLIPPABLE, PathCondition, SymExpr, truth

UNEXPLORED = "unexplored"
QUEUED = "queued"
SOLVED_SAT = "solvedSat"
UNSAT = "unsat"
UNKNOWN = "unknown"
DIVERGED = "diverged"
PRUNED = "pruned"
TAKEN = "taken"  # the sibling path was reached by some executed trace

FLIP_BUDGET = 16
PLATEAU_K = 8
UNSAT_STREAK = 8

_OUTCOMES = {"sat": SOLVED_SAT, "unsat": UNSAT, "unknown": UNKNOWN, "diverged": DIVERGED}


class SchedulerError(RuntimeError):
    pass


class TreeNode:
    __slots__ = ("decision", "parent", "children", "depth", "status", "origin", "attempts",
                 "site_count", "target", "pc", "pc_pos", "br_index", "line", "child_case", "seq")

    def __init__(self, decision, parent, depth):
        self.decision: tuple[str, int] | None = decision
        self.parent: TreeNode | None = parent
        self.children: dict[tuple[str, int], TreeNode] = {}
        self.depth = depth
        self.status = UNEXPLORED
        self.origin = -1
        self.attempts = 0
        self.site_count = 0
        self.target: str | None = None
        self.pc: PathCondition | None = None
        self.pc_pos = -1
        self.br_index = -1
        self.line = 0
        self.child_case: int | None = None
        self.seq = 0

    def key(self) -> tuple[tuple[str, int], ...]:
        out = []
        n = self
        while n is not None and n.decision is not None:
            out.append(n.decision)
            n = n.parent
        return tuple(reversed(out))

    def sibling(self) -> "TreeNode | None":
        if self.parent is None or self.decision is None:
            return None
        return self.parent.children.get((self.decision[0], 1 - self.decision[1]))


@dataclass
class FlipCandidate:
    node: TreeNode
    instr_id: str
    direction: int  # direction the flipped execution should take
    target: str
    depth: int
    ccs_score: int = 0

    @property
    def key(self) -> tuple[tuple[str, int], ...]:
        return self.node.key()

    def constraints(self) -> tuple[list[SymExpr], SymExpr]:
        """All constraints before the flipped branch asserted as recorded, plus the negation."""
        pc = self.node.pc
        assert pc is not None
        before = [c.asserted for c in pc.constraints[:self.node.pc_pos]]
        branch = pc.constraints[self.node.pc_pos]
        negated = truth(branch.expr, not branch.taken)
        return before + [negated], negated

    def predicted(self) -> list[tuple[str, int]]:
        """Raw branch decisions the child trace must start with."""
        assert self.node.pc is not None
        raw = self.node.pc.raw_branches
        if self.node.pc.constraints[self.node.pc_pos].kind == "fault":
            return list(raw[:self.node.br_index])
        pred = list(raw[:self.node.br_index + 1])
        pred[-1] = (pred[-1][0], self.direction)
        return pred


@dataclass
class CoverageState:
    blocks: set[str] = field(default_factory=set)
    branches: set[tuple[str, int]] = field(default_factory=set)
    lines: set[tuple[str, int]] = field(default_factory=set)
    errors: set[int] = field(default_factory=set)
    version: int = 0

    def merge(self, other: "CoverageState") -> None:
        self.blocks |= other.blocks
        self.branches |= other.branches
        self.lines |= other.lines
        self.errors |= other.errors
        self.version += 1


class ExecutionTree:
    def __init__(self, module: IRModule):
        self.module = module
        self.root = TreeNode(None, None, -1)
        self.size = 0
        self._heap: list[tuple[int, int, int, TreeNode]] = []
        self._pool: list[TreeNode] = []
        self._seq = 0
        self._score_cache: dict[str, int] = {}
        self._score_version = -1
        self._reach: dict[str, frozenset[str]] = {}

    # -- construction -------------------------------------------------------

    def insert(self, pc: PathCondition, origin: int) -> int:
        """Insert the decision path of ``pc``; returns the number of new nodes."""
        node = self.root
        added = 0
        counts: dict[str, int] = {}
        for pos, c in enumerate(pc.constraints):
            if c.kind not in FLIPPABLE:
                continue
            d = (c.instr_id, int(c.taken))
            child = node.children.get(d)
            if child is None:
                child = TreeNode(d, node, node.depth + 1)
                child.origin = origin
                child.site_count = counts.get(c.instr_id, 0)
                child.pc = pc
                child.pc_pos = pos
                child.br_index = c.br_index
                child.line = c.line
                child.target = (str(InstrId.parse(c.instr_id).block_id) if c.kind == "fault"
                                else self._untaken_target(c.instr_id, c.taken))
                self._seq += 1
                child.seq = self._seq
                node.children[d] = child
                self.size += 1
                added += 1
                other = node.children.get((d[0], 1 - d[1]))
                if other is not None:
                    # both directions now executed: neither is a frontier entry any more
                    child.status = TAKEN
                    if other.status in (UNEXPLORED, PRUNED, UNKNOWN):
                        other.status = TAKEN
                else:
                    heapq.heappush(self._heap, (-child.depth, -origin, -child.seq, child))
                    self._pool.append(child)
            counts[c.instr_id] = counts.get(c.instr_id, 0) + 1
            node = child
        return added

    def _untaken_target(self, iid: str, taken: bool) -> str:
        ins = self.module.instr(InstrId.parse(iid))
        fn = InstrId.parse(iid).function
        return str(BlockId(fn, ins.targets[1] if taken else ins.targets[0]))

    # -- scoring ------------------------------------------------------------

    def reachable(self, block: str) -> frozenset[str]:
        r = self._reach.get(block)
        if r is None:
            bid = BlockId.parse(block)
            r = frozenset(str(b) for b in reachable_blocks(self.module, bid.function, bid.index))
            self._reach[block] = r
        return r

    def score(self, node: TreeNode, cov: CoverageState) -> int:
        if self._score_version != cov.version:
            self._score_cache.clear()
            self._score_version = cov.version
        s = self._score_cache.get(node.target)
        if s is None:
            s = len(self.reachable(node.target) - cov.blocks)
            self._score_cache[node.target] = s
        return s

    # -- selection ----------------------------------------------------------

    def _candidate(self, node: TreeNode, score: int = 0) -> FlipCandidate:
        assert node.decision is not None
        return FlipCandidate(node, node.decision[0], 1 - node.decision[1], node.target, node.depth, score)

    def next_ccs(self, cov: CoverageState) -> FlipCandidate | None:
        best: TreeNode | None = None
        best_score = 0
        keep: list[TreeNode] = []
        for node in self._pool:
            if not _selectable(node):
                continue
            s = self.score(node, cov)
            if s == 0:
                node.status = PRUNED
                continue
            keep.append(node)
            if best is None or s > best_score or (s == best_score and (
                    node.depth < best.depth or (node.depth == best.depth and node.key() < best.key()))):
                best, best_score = node, s
        self._pool = keep
        if best is None:
            return None
        return self._queue(best, best_score)

    def next_dfs(self, budget: int = FLIP_BUDGET) -> FlipCandidate | None:
        while self._heap:
            _, _, _, node = self._heap[0]
            if node.status not in (UNEXPLORED, PRUNED, UNKNOWN) or (
                    node.status == UNKNOWN and node.attempts >= 2) or node.site_count >= budget:
                heapq.heappop(self._heap)
                continue
            heapq.heappop(self._heap)
            return self._queue(node, 0)
        return None

    def _queue(self, node: TreeNode, score: int) -> FlipCandidate:
        node.status = QUEUED
        node.attempts += 1
        return self._candidate(node, score)

    # -- outcomes -----------------------------------------------------------

    def record_outcome(self, cand: FlipCandidate, outcome: str, testcase: int | None = None) -> None:
        node = cand.node
        if node.status != QUEUED:
            raise SchedulerError(f"illegal transition {node.status} -> {outcome} for {cand.instr_id}")
        if outcome not in _OUTCOMES:
            raise SchedulerError(f"unknown outcome {outcome}")
        node.status = _OUTCOMES[outcome]
        if outcome == "unknown" and node.attempts < 2:
            # retryable once
            heapq.heappush(self._heap, (-node.depth, -node.origin, -node.seq, node))
            self._pool.append(node)
        if outcome in ("sat", "diverged"):
            node.child_case = testcase

    def frontier(self) -> list[TreeNode]:
        out = []
        stack = [self.root]
        while stack:
            n = stack.pop()
            if n.decision is not None and (n.status in (UNEXPLORED, PRUNED) or (
                    n.status == UNKNOWN and n.attempts < 2)):
                out.append(n)
            stack.extend(n.children.values())
        return out

    def nodes(self):
        stack = [self.root]
        while stack:
            n = stack.pop()
            if n.decision is not None:
                yield n
            stack.extend(n.children.values())


def _selectable(node: TreeNode) -> bool:
    return node.status == UNEXPLORED or (node.status == UNKNOWN and node.attempts < 2)


# ---------------------------------------------------------------------------
# strategies


@dataclass
class HybridState:
    phase: str = "ccs"
    plateau: int = 0
    unsat_streak: int = 0
    plateau_k: int = PLATEAU_K
    unsat_limit: int = UNSAT_STREAK
    switched_at: int | None = None

    def observe(self, outcome: str, new_coverage: bool) -> None:
        if self.phase != "ccs":
            return
        if outcome == "sat":
            self.unsat_streak = 0
            self.plateau = 0 if new_coverage else self.plateau + 1
        elif outcome in ("unsat", "unknown"):
            self.unsat_streak += 1
        elif outcome == "diverged":
            self.plateau = 0 if new_coverage else self.plateau + 1

    def should_switch(self) -> bool:
        return self.plateau >= self.plateau_k or self.unsat_streak >= self.unsat_limit


class Scheduler:
    """Strategy front end over an ``ExecutionTree``."""

    def __init__(self, tree: ExecutionTree, strategy: str = "hybrid", *, budget: int = FLIP_BUDGET,
                 plateau_k: int = PLATEAU_K, unsat_limit: int = UNSAT_STREAK):
        if strategy not in ("hybrid", "ccs", "dfs"):
            raise ValueError(f"unknown strategy {strategy!r}")
        self.tree = tree
        self.strategy = strategy
        self.budget = budget
        self.hybrid = HybridState(plateau_k=plateau_k, unsat_limit=unsat_limit)
        self.issued = 0

    @property
    def phase(self) -> str:
        return self.strategy if self.strategy != "hybrid" else self.hybrid.phase

    def next(self, cov: CoverageState) -> FlipCandidate | None:
        if self.strategy == "dfs":
            cand = self.tree.next_dfs(self.budget)
        elif self.strategy == "ccs":
            cand = self.tree.next_ccs(cov)
        else:
            cand = None
            if self.hybrid.phase == "ccs":
                if self.hybrid.should_switch():
                    self._switch()
                else:
                    cand = self.tree.next_ccs(cov)
                    if cand is None:
                        self._switch()
            if cand is None and self.hybrid.phase == "dfs":
                cand = self.tree.next_dfs(self.budget)
        if cand is not None:
            self.issued += 1
        return cand

    def _switch(self) -> None:
        self.hybrid.phase = "dfs"
        self.hybrid.switched_at = self.issued

    def observe(self, outcome: str, new_coverage: bool) -> None:
        if self.strategy == "hybrid":
            self.hybrid.observe(outcome, new_coverage)


# ---------------------------------------------------------------------------
# trace integration


def integrate_trace(tree: ExecutionTree, index: LineIndex, trace, pc: PathCondition,
                    cov: CoverageState) -> bool:
    """Insert the path and merge its coverage; True if anything new was covered."""
    tree.insert(pc, trace.testcase)
    tc = trace_coverage(index, trace)
    new = bool(tc.blocks - cov.blocks or tc.branches - cov.branches or tc.lines - cov.lines)
    new_error = tc.error is not None and tc.error not in cov.errors
    if new:
        cov.blocks |= tc.blocks
        cov.branches |= tc.branches
        cov.lines |= tc.lines
        cov.version += 1
    if new_error:
        cov.errors.add(tc.error)
    return new or new_error


def detect_divergence(predicted: list[tuple[str, int]], trace) -> bool:
    actual = trace.branch_decisions()
    if len(actual) < len(predicted):
        return True
    return any(a != p for a, p in zip(actual, predicted))
