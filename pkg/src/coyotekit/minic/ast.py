"""MiniC abstract syntax tree."""
from __future__ import annotations

from dataclasses import dataclass, field


@dataclass(frozen=True)
class SourceDiagnostic:
    path: str
    line: int
    col: int
    message: str

    def __str__(self) -> str:
        return f"{self.path}:{self.line}:{self.col}: {self.message}"


class MiniCError(Exception):
    def __init__(self, diagnostics: list[SourceDiagnostic]):
        self.diagnostics = diagnostics
        super().__init__("\n".join(str(d) for d in diagnostics))


# expressions ---------------------------------------------------------------


@dataclass
class Expr:
    line: int
    col: int


@dataclass
class Num(Expr):
    value: int


@dataclass
class Var(Expr):
    name: str


@dataclass
class Index(Expr):
    name: str
    index: Expr


@dataclass
class Call(Expr):
    name: str
    args: list[Expr]


@dataclass
class Unary(Expr):
    op: str
    operand: Expr


@dataclass
class Binary(Expr):
    op: str
    lhs: Expr
    rhs: Expr


# statements ----------------------------------------------------------------


@dataclass
class Stmt:
    line: int
    col: int
    end_line: int


@dataclass
class Block(Stmt):
    body: list[Stmt]


@dataclass
class VarDecl(Stmt):
    name: str
    size: int | None
    init: Expr | None


@dataclass
class Assign(Stmt):
    target: Var | Index
    value: Expr


@dataclass
class If(Stmt):
    cond: Expr
    then: Stmt
    other: Stmt | None


@dataclass
class While(Stmt):
    cond: Expr
    body: Stmt


@dataclass
class Return(Stmt):
    value: Expr | None


@dataclass
class ExprStmt(Stmt):
    expr: Expr


# declarations --------------------------------------------------------------


@dataclass
class ParamDecl:
    name: str
    size: int | None  # None for scalars


@dataclass
class FunctionDecl:
    name: str
    params: list[ParamDecl]
    returns_value: bool
    body: Block | None  # None for `extern`
    path: str
    line: int
    col: int = 1
    end_line: int = 0

    @property
    def is_extern(self) -> bool:
        return self.body is None


@dataclass
class GlobalDecl:
    name: str
    size: int | None
    init: tuple[int, ...]
    path: str
    line: int
    col: int = 1
    const: bool = False

    @property
    def words(self) -> int:
        return 1 if self.size is None else self.size


@dataclass
class Fragment:
    path: str
    functions: list[FunctionDecl] = field(default_factory=list)
    globals: list[GlobalDecl] = field(default_factory=list)
    diagnostics: list[SourceDiagnostic] = field(default_factory=list)


@dataclass
class SourceProgram:
    files: list[tuple[str, str]]
    functions: list[FunctionDecl]
    globals: list[GlobalDecl]

    def function(self, name: str) -> FunctionDecl:
        for fn in self.functions:
            if fn.name == name:
                return fn
        raise KeyError(name)

    def defined_functions(self) -> list[FunctionDecl]:
        return [fn for fn in self.functions if not fn.is_extern]
