from __future__ import annotations

import random
import shutil

import pytest

from coyotekit.corpus import corpus_dir
from coyotekit.executor import execute
from coyotekit.harness import build_harness
from coyotekit.minic import compile_sources
from coyotekit.session import compile_project, load_project
from coyotekit.symbolic import BinOp, Const, ICmp, Input, ITE
from coyotekit.trace import TestCase

# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def compile_one(text: str, path: str = "t.mc"):
    return compile_sources([(path, text)])


def run_target(module, target: str, bindings: dict[int, int] | None = None, limits=None):
    """Harness ``target`` and execute it once; returns (plan, harnessed module, trace)."""
    plan, hm = build_harness(module, target)
    tc = TestCase(0, dict(bindings or {}))
    trace = execute(hm, plan.driver_name, tc, limits) if limits else execute(hm, plan.driver_name, tc)
    return plan, hm, trace


_QUERY_OPS = ("add", "sub", "mul", "and", "or", "xor", "shl", "ashr", "sdiv", "srem")
_QUERY_PREDS = ("eq", "ne", "slt", "sle", "sgt", "sge")


def random_term(rng: random.Random, inputs: list[int], depth: int):
    if depth == 0 or rng.random() < 0.3:
        if rng.random() < 0.6:
            return Input(rng.choice(inputs))
        return Const(rng.randint(-40, 40))
    if rng.random() < 0.1:
        return ITE(random_pred(rng, inputs, depth - 1), random_term(rng, inputs, depth - 1),
                   random_term(rng, inputs, depth - 1))
    return BinOp(rng.choice(_QUERY_OPS), random_term(rng, inputs, depth - 1), random_term(rng, inputs, depth - 1))


def random_pred(rng: random.Random, inputs: list[int], depth: int = 2):
    return ICmp(rng.choice(_QUERY_PREDS), random_term(rng, inputs, depth), random_term(rng, inputs, depth))


def random_query(rng: random.Random, max_inputs: int = 3, max_constraints: int = 4) -> list:
    """A small conjunction of comparisons over up to ``max_inputs`` inputs."""
    inputs = list(range(rng.randint(1, max_inputs)))
    return [random_pred(rng, inputs) for _ in range(rng.randint(1, max_constraints))]


@pytest.fixture(scope="session")
def corpus_root():
    return corpus_dir()


@pytest.fixture(scope="session")
def corpus_project(corpus_root):
    return load_project(corpus_root)


@pytest.fixture(scope="session")
def corpus_module(corpus_project):
    return compile_project(corpus_project)


@pytest.fixture
def solver_cmd():
    z3 = shutil.which("z3")
    if z3 is None:
        pytest.skip("no external solver on PATH")
    return f"{z3} -smt2 {{file}}"


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
