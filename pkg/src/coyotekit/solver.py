"""Constraint solving: SMT-LIB emission, an external solver process, and an
exhaustive fallback over small signed domains."""
from __future__ import annotations

import functools
import itertools
import os
import re
import shlex
import subprocess
import tempfile
import time
from dataclasses import dataclass, field

import numpy as np

from .symbolic import BinOp, Const, ICmp, Input, ITE, SymExpr, eval_expr, postorder

DEFAULT_TIMEOUT_MS = 5000
FALLBACK_MAX_INPUTS = 3
FALLBACK_MAX_BITS = 10
# domain width used by the internal solver, by number of free inputs
ADAPTIVE_BITS = {1: 10, 2: 8, 3: 6}
CHUNK = 1 << 14


class SolverError(RuntimeError):
    pass


class FallbackRangeError(SolverError):
    def __init__(self, n_inputs: int, bits: int):
        super().__init__(f"fallback out of range: {n_inputs} inputs at {bits} bits "
                         f"(limit {FALLBACK_MAX_INPUTS} inputs, {FALLBACK_MAX_BITS} bits)")


@dataclass
class SolverQuery:
    constraints: list[SymExpr]
    inputs: frozenset[int] = frozenset()
    timeout_ms: int = DEFAULT_TIMEOUT_MS

    def __post_init__(self) -> None:
        mentioned: frozenset[int] = frozenset().union(*(c.inputs for c in self.constraints))
        if not self.inputs:
            self.inputs = mentioned
        elif not mentioned <= self.inputs:
            raise ValueError(f"inputs {sorted(mentioned - self.inputs)} are not in scope")


@dataclass
class SolverResult:
    verdict: str  # sat | unsat | unknown
    model: dict[int, int] | None = None
    stats: dict = field(default_factory=dict)

    @property
    def sat(self) -> bool:
        return self.verdict == "sat"


def validate_model(constraints: list[SymExpr], model: dict[int, int]) -> bool:
    for c in constraints:
        v = eval_expr(c, model)
        if not v:
            return False
    return True


# ---------------------------------------------------------------------------
# SMT-LIB


_SMT_OPS = {"add": "bvadd", "sub": "bvsub", "mul": "bvmul", "sdiv": "bvsdiv", "srem": "bvsrem",
            "and": "bvand", "or": "bvor", "xor": "bvxor", "shl": "bvshl", "ashr": "bvashr"}
_SMT_PREDS = {"slt": "bvslt", "sle": "bvsle", "sgt": "bvsgt", "sge": "bvsge"}


def _bv(value: int) -> str:
    return f"#x{value & 0xFFFFFFFF:08X}"


def emit_smtlib(query: SolverQuery) -> str:
    """A deterministic QF_BV script for ``query``; shared subterms become ``define-fun``s."""
    nodes = postorder(query.constraints)
    refs: dict[int, int] = {}
    divisors: list[SymExpr] = []
    for n in nodes:
        kids = ()
        if isinstance(n, ITE):
            kids = (n.cond, n.then, n.other)
        elif isinstance(n, (BinOp, ICmp)):
            kids = (n.lhs, n.rhs)
            if isinstance(n, BinOp) and n.op in ("sdiv", "srem") and not isinstance(n.rhs, Const):
                divisors.append(n.rhs)
        for k in kids:
            refs[id(k)] = refs.get(id(k), 0) + 1

    names: dict[int, str] = {}
    lines = ["(set-logic QF_BV)"]
    for i in sorted(query.inputs):
        lines.append(f"(declare-const in{i} (_ BitVec 32))")

    def bool_term(n: SymExpr) -> str:
        if isinstance(n, ICmp):
            return names.get(id(n)) or _icmp_text(n)
        return f"(distinct {bv_term(n)} {_bv(0)})"

    def bv_term(n: SymExpr) -> str:
        if isinstance(n, Const):
            return _bv(n.value)
        if isinstance(n, Input):
            return f"in{n.id}"
        if isinstance(n, ICmp):
            return f"(ite {bool_term(n)} {_bv(1)} {_bv(0)})"
        if id(n) in names:
            return names[id(n)]
        return _node_text(n)

    def _icmp_text(n: ICmp) -> str:
        a, b = bv_term(n.lhs), bv_term(n.rhs)
        if n.pred == "eq":
            return f"(= {a} {b})"
        if n.pred == "ne":
            return f"(distinct {a} {b})"
        return f"({_SMT_PREDS[n.pred]} {a} {b})"

    def _node_text(n: SymExpr) -> str:
        if isinstance(n, ITE):
            return f"(ite {bool_term(n.cond)} {bv_term(n.then)} {bv_term(n.other)})"
        assert isinstance(n, BinOp)
        a, b = bv_term(n.lhs), bv_term(n.rhs)
        if n.op in ("shl", "ashr"):
            b = f"(bvand {b} {_bv(31)})"
        return f"({_SMT_OPS[n.op]} {a} {b})"

    counter = 0
    for n in nodes:
        if refs.get(id(n), 0) > 1 and isinstance(n, (BinOp, ICmp, ITE)):
            name = f"t{counter}"
            counter += 1
            if isinstance(n, ICmp):
                body, sort = _icmp_text(n), "Bool"
            else:
                body, sort = _node_text(n), "(_ BitVec 32)"
            lines.append(f"(define-fun {name} () {sort} {body})")
            names[id(n)] = name
    seen_div: set[str] = set()
    for d in divisors:
        text = f"(assert (distinct {bv_term(d)} {_bv(0)}))"
        if text not in seen_div:
            seen_div.add(text)
            lines.append(text)
    for c in query.constraints:
        lines.append(f"(assert {bool_term(c)})")
    lines.append("(check-sat)")
    if query.inputs:
        lines.append("(get-value (" + " ".join(f"in{i}" for i in sorted(query.inputs)) + "))")
    return "\n".join(lines) + "\n"


_VALUE_RE = re.compile(r"\(\s*in(\d+)\s+(#x[0-9a-fA-F]+|#b[01]+|\(\s*_\s+bv(\d+)\s+32\s*\))\s*\)")


def parse_solver_output(text: str, inputs: frozenset[int]) -> tuple[str, dict[int, int] | None, str]:
    """Verdict, model and a diagnostic string (empty when the output parsed cleanly)."""
    tokens = text.split()
    if not tokens or tokens[0] not in ("sat", "unsat", "unknown"):
        return "unknown", None, f"unparseable solver output: {text[:200]!r}"
    verdict = tokens[0]
    if verdict != "sat":
        return verdict, None, ""
    model: dict[int, int] = {}
    for m in _VALUE_RE.finditer(text):
        lit = m.group(2)
        if lit.startswith("#x"):
            raw = int(lit[2:], 16)
        elif lit.startswith("#b"):
            raw = int(lit[2:], 2)
        else:
            raw = int(m.group(3))
        raw &= 0xFFFFFFFF
        model[int(m.group(1))] = raw - (1 << 32) if raw & 0x80000000 else raw
    missing = inputs - model.keys()
    if missing:
        return "unknown", None, f"solver model lacks inputs {sorted(missing)}"
    return "sat", model, ""


def solve_external(query: SolverQuery, solver_cmd: str) -> SolverResult:
    """Run ``solver_cmd`` (a template containing ``{file}``) on the emitted script."""
    if "{file}" not in solver_cmd:
        raise SolverError("solver command template needs a {file} placeholder")
    script = emit_smtlib(query)
    start = time.perf_counter()
    fd, path = tempfile.mkstemp(suffix=".smt2", prefix="coyotekit-")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(script)
        argv = [tok.replace("{file}", path) for tok in shlex.split(solver_cmd)]
        try:
            proc = subprocess.run(argv, capture_output=True, text=True,
                                  timeout=query.timeout_ms / 1000.0)
        except subprocess.TimeoutExpired:
            return SolverResult("unknown", None, _stats("external", start, "timeout"))
        except OSError as err:
            raise SolverError(f"cannot start solver {argv[0]!r}: {err}") from err
    finally:
        os.unlink(path)
    verdict, model, diag = parse_solver_output(proc.stdout, query.inputs)
    if verdict == "sat" and not validate_model(query.constraints, model):
        verdict, model, diag = "unknown", None, "external model failed validation"
    return SolverResult(verdict, model, _stats("external", start, diag))


def _stats(backend: str, start: float, diagnostic: str = "") -> dict:
    out = {"backend": backend, "wall_ms": round((time.perf_counter() - start) * 1000.0, 3)}
    if diagnostic:
        out["diagnostic"] = diagnostic
    return out


# ---------------------------------------------------------------------------
# fallback


def _eval_node(n: SymExpr, vals: dict, valid: np.ndarray) -> np.ndarray | np.int32:
    t = type(n)
    if t is Const:
        return np.int32(n.value)
    if t is Input:
        raise KeyError(n.id)
    if t is ICmp:
        a, b = vals[id(n.lhs)], vals[id(n.rhs)]
        p = n.pred
        r = (a == b if p == "eq" else a != b if p == "ne" else a < b if p == "slt"
             else a <= b if p == "sle" else a > b if p == "sgt" else a >= b)
        return np.asarray(r).astype(np.int32)
    if t is ITE:
        return np.where(vals[id(n.cond)] != 0, vals[id(n.then)], vals[id(n.other)]).astype(np.int32)
    a, b = vals[id(n.lhs)], vals[id(n.rhs)]
    op = n.op
    if op == "add":
        return a + b
    if op == "sub":
        return a - b
    if op == "mul":
        return a * b
    if op in ("sdiv", "srem"):
        nz = b != 0
        valid &= np.broadcast_to(nz, valid.shape)
        a64 = np.asarray(a, dtype=np.int64)
        b64 = np.where(nz, b, 1).astype(np.int64)
        q = np.abs(a64) // np.abs(b64)
        q = np.where((a64 < 0) != (b64 < 0), -q, q)
        return (q if op == "sdiv" else a64 - q * b64).astype(np.int32)
    if op == "and":
        return a & b
    if op == "or":
        return a | b
    if op == "xor":
        return a ^ b
    if op == "shl":
        return a << (b & np.int32(31))
    return a >> (b & np.int32(31))


def _schedule(exprs: list[SymExpr]) -> list[tuple[SymExpr, list[SymExpr]]]:
    """Per expr, the nodes not already needed by an earlier expr, children first."""
    seen: set[int] = set()
    out = []
    for e in exprs:
        nodes = [n for n in postorder([e]) if id(n) not in seen]
        seen.update(id(n) for n in nodes)
        out.append((e, nodes))
    return out


def eval_vectorized(exprs: list[SymExpr], columns: dict[int, np.ndarray],
                    schedule: list | None = None) -> np.ndarray:
    """Boolean mask of candidates (rows of ``columns``) under which every expr is truthy.

    Values are int32 arrays, so numpy's wrapping arithmetic gives two's-complement
    semantics; only division is widened. Evaluation stops once no row survives.
    """
    size = len(next(iter(columns.values()))) if columns else 1
    valid = np.ones(size, dtype=bool)
    vals: dict = {("in", i): col.astype(np.int32, copy=False) for i, col in columns.items()}
    with np.errstate(over="ignore"):
        for e, nodes in schedule if schedule is not None else _schedule(exprs):
            for n in nodes:
                vals[id(n)] = vals[("in", n.id)] if type(n) is Input else _eval_node(n, vals, valid)
            valid &= np.broadcast_to(vals[id(e)] != 0, valid.shape)
            if not valid.any():
                break
    return valid


@functools.lru_cache(maxsize=64)
def _grid(n: int, bits: int, start: int) -> tuple[np.ndarray, ...]:
    """Columns of one chunk of the lexicographic grid; column 0 is most significant."""
    lo = -(1 << (bits - 1))
    width = 1 << bits
    idx = np.arange(start, min(width ** n, start + CHUNK), dtype=np.int64)
    cols = []
    for _ in range(n):
        cols.append((idx % width + lo).astype(np.int32))
        idx = idx // width
    for c in cols:
        c.flags.writeable = False
    return tuple(reversed(cols))


def _search(constraints: list[SymExpr], order: list[int], bits: int) -> dict[int, int] | None:
    total = (1 << bits) ** len(order)
    if not order:
        return {} if validate_model(constraints, {}) else None
    schedule = _schedule(constraints)
    for start in range(0, total, CHUNK):
        columns = dict(zip(order, _grid(len(order), bits, start)))
        mask = eval_vectorized(constraints, columns, schedule)
        hits = np.flatnonzero(mask)
        if hits.size:
            k = int(hits[0])
            return {i: int(columns[i][k]) for i in order}
    return None


def solve_fallback(query: SolverQuery, domain_bits: int) -> SolverResult:
    """First satisfying assignment in lexicographic order over signed ``domain_bits`` values."""
    n = len(query.inputs)
    if n > FALLBACK_MAX_INPUTS or domain_bits > FALLBACK_MAX_BITS or domain_bits < 1:
        raise FallbackRangeError(n, domain_bits)
    start = time.perf_counter()
    model = _search(query.constraints, sorted(query.inputs), domain_bits)
    if model is None:
        return SolverResult("unsat", None, _stats("fallback", start))
    if not validate_model(query.constraints, model):  # pragma: no cover - vectorized eval bug guard
        return SolverResult("unknown", None, _stats("fallback", start, "model failed validation"))
    return SolverResult("sat", model, _stats("fallback", start))


# ---------------------------------------------------------------------------
# flip solving inside a session


def slice_constraints(constraints: list[SymExpr], focus: frozenset[int]) -> list[SymExpr]:
    """Constraints transitively sharing inputs with ``focus``."""
    parent: dict[int, int] = {}

    def find(x: int) -> int:
        while parent.setdefault(x, x) != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for c in constraints:
        ids = sorted(c.inputs)
        for other in ids[1:]:
            ra, rb = find(ids[0]), find(other)
            if ra != rb:
                parent[max(ra, rb)] = min(ra, rb)
    roots = {find(i) for i in focus}
    return [c for c in constraints if c.inputs and find(min(c.inputs)) in roots]


def substitute(expr: SymExpr, values: dict[int, int]) -> SymExpr:
    """Replace the given inputs by constants, refolding the expression."""
    from .symbolic import binop, icmp, ite

    if not (expr.inputs & values.keys()):
        return expr
    out: dict[int, SymExpr] = {}
    for n in postorder([expr]):
        if not (n.inputs & values.keys()):
            out[id(n)] = n
        elif type(n) is Input:
            out[id(n)] = Const(values[n.id])
        elif type(n) is BinOp:
            out[id(n)] = binop(n.op, out[id(n.lhs)], out[id(n.rhs)])
        elif type(n) is ICmp:
            out[id(n)] = icmp(n.pred, out[id(n.lhs)], out[id(n.rhs)])
        else:
            out[id(n)] = ite(out[id(n.cond)], out[id(n.then)], out[id(n.other)])
    return out[id(expr)]


PARTIAL_MAX_SUBSETS = 48


def _partial_subsets(focus: frozenset[int], free: frozenset[int]) -> list[frozenset[int]]:
    """Inputs to free when a slice is too wide. A small focus (the negated constraint's
    own inputs) is tried alone, then with one more slice input at a time; a wide focus
    is tried through its singletons and then its pairs. Capped."""
    if len(focus) <= FALLBACK_MAX_INPUTS:
        out = [focus]
        if len(focus) < FALLBACK_MAX_INPUTS:
            out += [focus | {j} for j in sorted(free - focus)]
    else:
        ids = sorted(focus)
        out = [frozenset((i,)) for i in ids]
        out += [frozenset(p) for p in itertools.combinations(ids, 2)]
    return out[:PARTIAL_MAX_SUBSETS]


def _solve_subset(part: list[SymExpr], subset: frozenset[int], free: frozenset[int],
                  parent: dict[int, int], domain_bits: int | None):
    fixed = {i: parent.get(i, 0) for i in free - subset}
    if fixed:
        part = [substitute(c, fixed) for c in part]
        part = [c for c in part if not (type(c) is Const and c.value != 0)]
        if any(type(c) is Const for c in part):
            return part, fixed, None
    part = part[::-1]  # the negated constraint and its neighbours prune fastest
    live = frozenset().union(*(c.inputs for c in part))
    bits = domain_bits if domain_bits is not None else ADAPTIVE_BITS.get(len(live), 6)
    if not live:
        return part, fixed, ({} if validate_model(part, {}) else None)
    return part, fixed, _search(part, sorted(live), bits)


def solve_flip(constraints: list[SymExpr], negated: SymExpr, parent: dict[int, int], *,
               backend: str = "internal", solver_cmd: str | None = None,
               domain_bits: int | None = None,
               timeout_ms: int = DEFAULT_TIMEOUT_MS) -> SolverResult:
    """Solve ``constraints`` (which include ``negated``) for a child of ``parent``.

    Only the slice of constraints connected to the negated one is solved; every
    other input keeps its parent value. A sat model is completed from ``parent``
    and validated against all constraints.
    """
    start = time.perf_counter()
    focus = negated.inputs
    part = slice_constraints(constraints, focus)
    free = frozenset().union(*(c.inputs for c in part))
    fixed: dict[int, int] = {}
    model: dict[int, int] | None = None
    note = ""
    if backend == "external":
        if not solver_cmd:
            raise SolverError("external backend needs a solver command")
        result = solve_external(SolverQuery(part, free, timeout_ms), solver_cmd)
        model = result.model
        if result.verdict != "sat":
            return result
    else:
        attempts = [free] if len(free) <= FALLBACK_MAX_INPUTS else _partial_subsets(focus, free)
        if not attempts:
            return SolverResult("unknown", None, _stats("internal", start, "slice too wide"))
        model = None
        for subset in attempts:
            _, fixed, model = _solve_subset(part, subset, free, parent, domain_bits)
            if model is not None:
                break
        if model is None:
            # a miss on a partial slice is not a proof of infeasibility
            verdict = "unsat" if attempts == [free] else "unknown"
            return SolverResult(verdict, None, _stats("internal", start,
                                                      "" if verdict == "unsat" else "partial"))
        note = "" if attempts == [free] else "partial"
    full = dict(parent)
    full.update(fixed)
    full.update(model or {})
    if not validate_model(constraints, {i: full.get(i, 0) for i in
                                        frozenset().union(*(c.inputs for c in constraints))}):
        return SolverResult("unknown", None, _stats(backend, start, "completed model failed validation"))
    return SolverResult("sat", full, _stats(backend, start, note))
