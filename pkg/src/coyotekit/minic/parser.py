"""Lexer, recursive-descent parser and per-file name resolution for MiniC."""
from __future__ import annotations

import re
from dataclasses import dataclass

from .ast import (
    Assign, Binary, Block, Call, Expr, ExprStmt, FunctionDecl, Fragment, GlobalDecl, If,
    Index, MiniCError, Num, ParamDecl, Return, SourceDiagnostic, SourceProgram, Stmt, Unary,
    Var, VarDecl, While,
)

KEYWORDS = {"i32", "int", "void", "if", "else", "while", "return", "extern", "const"}

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>[ \t\r\n]+)
  | (?P<lcomment>//[^\n]*)
  | (?P<bcomment>/\*.*?\*/)
  | (?P<num>0[xX][0-9a-fA-F]+|[0-9]+)
  | (?P<ident>[A-Za-z_][A-Za-z_0-9]*)
  | (?P<op>\|\||&&|==|!=|<=|>=|<<|>>|[-+*/%&|^!~<>=(){}\[\],;])
    """,
    re.VERBOSE | re.DOTALL,
)

INT_MIN = -(1 << 31)
INT_MAX = (1 << 31) - 1

# binary operator precedence, loosest first
_PRECEDENCE = [
    ("||",),
    ("&&",),
    ("|",),
    ("^",),
    ("&",),
    ("==", "!="),
    ("<", "<=", ">", ">="),
    ("<<", ">>"),
    ("+", "-"),
    ("*", "/", "%"),
]


@dataclass
class Token:
    kind: str  # num | ident | kw | op | eof
    text: str
    line: int
    col: int


class _SyntaxError(Exception):
    def __init__(self, line: int, col: int, message: str):
        self.line, self.col, self.message = line, col, message


def tokenize(text: str) -> list[Token]:
    tokens: list[Token] = []
    pos, line, line_start = 0, 1, 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            raise _SyntaxError(line, pos - line_start + 1, f"unexpected character {text[pos]!r}")
        kind = m.lastgroup
        tok = m.group()
        if kind == "ident" and tok in KEYWORDS:
            kind = "kw"
        if kind in ("num", "ident", "kw", "op"):
            tokens.append(Token(kind, tok, line, pos - line_start + 1))
        nl = tok.count("\n")
        if nl:
            line += nl
            line_start = pos + tok.rindex("\n") + 1
        pos = m.end()
    if text[pos:].strip():
        raise _SyntaxError(line, pos - line_start + 1, "unterminated comment")
    tokens.append(Token("eof", "", line, pos - line_start + 1))
    return tokens


class _Parser:
    def __init__(self, text: str, path: str):
        self.path = path
        self.toks = tokenize(text)
        self.i = 0

    # token helpers
    @property
    def tok(self) -> Token:
        return self.toks[self.i]

    def at(self, *texts: str) -> bool:
        t = self.tok
        return t.kind in ("op", "kw") and t.text in texts

    def advance(self) -> Token:
        t = self.toks[self.i]
        self.i += 1
        return t

    def expect(self, text: str) -> Token:
        if not self.at(text):
            t = self.tok
            found = t.text or "end of input"
            raise _SyntaxError(t.line, t.col, f"expected {text!r}, found {found!r}")
        return self.advance()

    def ident(self) -> Token:
        t = self.tok
        if t.kind != "ident":
            raise _SyntaxError(t.line, t.col, f"expected identifier, found {t.text or 'end of input'!r}")
        return self.advance()

    def int_literal(self, negative: bool = False) -> int:
        t = self.tok
        if t.kind != "num":
            raise _SyntaxError(t.line, t.col, f"expected integer literal, found {t.text!r}")
        self.advance()
        is_hex = t.text[:2] in ("0x", "0X")
        v = int(t.text, 16) if is_hex else int(t.text, 10)
        if is_hex and INT_MAX < v <= 0xFFFFFFFF:
            v -= 1 << 32  # hex literals name 32-bit patterns
        v = -v if negative else v
        if not INT_MIN <= v <= INT_MAX:
            raise _SyntaxError(t.line, t.col, f"integer literal {t.text} out of range")
        return v

    def type_name(self) -> bool:
        """Parse `i32`/`int`/`void`; return True for value-returning types."""
        if self.at("i32", "int"):
            self.advance()
            return True
        if self.at("void"):
            self.advance()
            return False
        t = self.tok
        raise _SyntaxError(t.line, t.col, f"expected type, found {t.text or 'end of input'!r}")

    def array_size(self) -> int | None:
        if not self.at("["):
            return None
        self.advance()
        t = self.tok
        n = self.int_literal()
        if n < 1:
            raise _SyntaxError(t.line, t.col, "array size must be at least 1")
        self.expect("]")
        return n

    # top level
    def fragment(self) -> Fragment:
        frag = Fragment(self.path)
        while self.tok.kind != "eof":
            start = self.tok
            if self.at("extern"):
                self.advance()
                returns = self.type_name()
                name = self.ident()
                params = self.params()
                self.expect(";")
                frag.functions.append(FunctionDecl(name.text, params, returns, None, self.path,
                                                   start.line, start.col, start.line))
                continue
            is_const = False
            if self.at("const"):
                self.advance()
                is_const = True
            returns = self.type_name()
            name = self.ident()
            if self.at("(") and not is_const:
                params = self.params()
                body = self.block()
                frag.functions.append(FunctionDecl(name.text, params, returns, body, self.path,
                                                   start.line, start.col, body.end_line))
                continue
            if not returns:
                raise _SyntaxError(name.line, name.col, "global variables must have type i32")
            size = self.array_size()
            init = self.global_init(size)
            self.expect(";")
            frag.globals.append(GlobalDecl(name.text, size, init, self.path, start.line, start.col,
                                           is_const))
        return frag

    def global_init(self, size: int | None) -> tuple[int, ...]:
        words = 1 if size is None else size
        if not self.at("="):
            return (0,) * words
        eq = self.advance()
        values: list[int] = []
        if size is not None:
            self.expect("{")
            while not self.at("}"):
                values.append(self.signed_literal())
                if not self.at("}"):
                    self.expect(",")
            self.expect("}")
        else:
            values.append(self.signed_literal())
        if len(values) != words:
            raise _SyntaxError(eq.line, eq.col, f"initializer has {len(values)} values, expected {words}")
        return tuple(values)

    def signed_literal(self) -> int:
        neg = False
        if self.at("-"):
            self.advance()
            neg = True
        return self.int_literal(neg)

    def params(self) -> list[ParamDecl]:
        self.expect("(")
        params: list[ParamDecl] = []
        if self.at("void") and self.toks[self.i + 1].text == ")":
            self.advance()
        while not self.at(")"):
            if not self.at("i32", "int"):
                t = self.tok
                raise _SyntaxError(t.line, t.col, f"expected parameter type, found {t.text!r}")
            self.advance()
            name = self.ident()
            params.append(ParamDecl(name.text, self.array_size()))
            if not self.at(")"):
                self.expect(",")
        self.expect(")")
        return params

    # statements
    def block(self) -> Block:
        start = self.expect("{")
        body: list[Stmt] = []
        while not self.at("}"):
            if self.tok.kind == "eof":
                raise _SyntaxError(self.tok.line, self.tok.col, "expected '}', found end of input")
            body.append(self.statement())
        end = self.expect("}")
        return Block(start.line, start.col, end.line, body)

    def statement(self) -> Stmt:
        t = self.tok
        if self.at("{"):
            return self.block()
        if self.at("i32", "int"):
            self.advance()
            name = self.ident()
            size = self.array_size()
            init = None
            if self.at("="):
                if size is not None:
                    raise _SyntaxError(self.tok.line, self.tok.col, "local arrays cannot have initializers")
                self.advance()
                init = self.expr()
            end = self.expect(";")
            return VarDecl(t.line, t.col, end.line, name.text, size, init)
        if self.at("if"):
            self.advance()
            self.expect("(")
            cond = self.expr()
            self.expect(")")
            then = self.statement()
            other = None
            if self.at("else"):
                self.advance()
                other = self.statement()
            end = (other or then).end_line
            return If(t.line, t.col, end, cond, then, other)
        if self.at("while"):
            self.advance()
            self.expect("(")
            cond = self.expr()
            self.expect(")")
            body = self.statement()
            return While(t.line, t.col, body.end_line, cond, body)
        if self.at("return"):
            self.advance()
            value = None if self.at(";") else self.expr()
            end = self.expect(";")
            return Return(t.line, t.col, end.line, value)
        e = self.expr()
        if self.at("="):
            eq = self.advance()
            if not isinstance(e, (Var, Index)):
                raise _SyntaxError(eq.line, eq.col, "left side of assignment is not assignable")
            value = self.expr()
            end = self.expect(";")
            return Assign(t.line, t.col, end.line, e, value)
        end = self.expect(";")
        return ExprStmt(t.line, t.col, end.line, e)

    # expressions
    def expr(self, level: int = 0) -> Expr:
        if level == len(_PRECEDENCE):
            return self.unary()
        lhs = self.expr(level + 1)
        while self.tok.kind == "op" and self.tok.text in _PRECEDENCE[level]:
            op = self.advance()
            rhs = self.expr(level + 1)
            lhs = Binary(op.line, op.col, op.text, lhs, rhs)
        return lhs

    def unary(self) -> Expr:
        t = self.tok
        if self.at("-", "!", "~"):
            self.advance()
            if t.text == "-" and self.tok.kind == "num":
                v = self.int_literal(negative=True)
                return Num(t.line, t.col, v)
            return Unary(t.line, t.col, t.text, self.unary())
        return self.primary()

    def primary(self) -> Expr:
        t = self.tok
        if t.kind == "num":
            return Num(t.line, t.col, self.int_literal())
        if t.kind == "ident":
            self.advance()
            if self.at("("):
                self.advance()
                args: list[Expr] = []
                while not self.at(")"):
                    args.append(self.expr())
                    if not self.at(")"):
                        self.expect(",")
                self.expect(")")
                return Call(t.line, t.col, t.text, args)
            if self.at("["):
                self.advance()
                idx = self.expr()
                self.expect("]")
                return Index(t.line, t.col, t.text, idx)
            return Var(t.line, t.col, t.text)
        if self.at("("):
            self.advance()
            e = self.expr()
            self.expect(")")
            return e
        raise _SyntaxError(t.line, t.col, f"expected expression, found {t.text or 'end of input'!r}")


# ---------------------------------------------------------------------------
# name resolution within one file


class _Resolver:
    def __init__(self, frag: Fragment):
        self.frag = frag
        self.diags: list[SourceDiagnostic] = []
        self.globals: dict[str, GlobalDecl] = {}

    def error(self, line: int, col: int, msg: str) -> None:
        self.diags.append(SourceDiagnostic(self.frag.path, line, col, msg))

    def run(self) -> list[SourceDiagnostic]:
        seen_fn: dict[str, FunctionDecl] = {}
        for g in self.frag.globals:
            if g.name in self.globals:
                self.error(g.line, g.col, f"duplicate definition of {g.name}")
            self.globals[g.name] = g
        for fn in self.frag.functions:
            prev = seen_fn.get(fn.name)
            if prev is not None and not (prev.is_extern or fn.is_extern):
                self.error(fn.line, fn.col, f"duplicate definition of {fn.name}")
            if fn.name in self.globals:
                self.error(fn.line, fn.col, f"duplicate definition of {fn.name}")
            if prev is None or prev.is_extern:
                seen_fn[fn.name] = fn
            names = set()
            for p in fn.params:
                if p.name in names:
                    self.error(fn.line, fn.col, f"duplicate parameter {p.name}")
                names.add(p.name)
            if fn.body is not None:
                scope = {p.name: p.size for p in fn.params}
                self.block(fn.body, [scope], fn)
        return self.diags

    def lookup(self, scopes: list[dict[str, int | None]], name: str) -> tuple[bool, int | None, bool]:
        """Return (found, size, is_const_global)."""
        for scope in reversed(scopes):
            if name in scope:
                return True, scope[name], False
        g = self.globals.get(name)
        if g is not None:
            return True, g.size, g.const
        return False, None, False

    def block(self, blk: Block, scopes: list[dict[str, int | None]], fn: FunctionDecl) -> None:
        scopes.append({})
        for s in blk.body:
            self.stmt(s, scopes, fn)
        scopes.pop()

    def stmt(self, s: Stmt, scopes: list[dict[str, int | None]], fn: FunctionDecl) -> None:
        if isinstance(s, Block):
            self.block(s, scopes, fn)
        elif isinstance(s, VarDecl):
            if s.init is not None:
                self.scalar(s.init, scopes)
            if s.name in scopes[-1]:
                self.error(s.line, s.col, f"duplicate definition of {s.name}")
            scopes[-1][s.name] = s.size
        elif isinstance(s, Assign):
            tgt = s.target
            found, size, is_const = self.lookup(scopes, tgt.name)
            if not found:
                self.error(tgt.line, tgt.col, f"unknown identifier {tgt.name}")
            elif is_const:
                self.error(tgt.line, tgt.col, f"type mismatch: assignment to const global {tgt.name}")
            elif isinstance(tgt, Var) and size is not None:
                self.error(tgt.line, tgt.col, f"type mismatch: cannot assign to array {tgt.name}")
            elif isinstance(tgt, Index):
                if size is None:
                    self.error(tgt.line, tgt.col, f"type mismatch: {tgt.name} is not an array")
                self.scalar(tgt.index, scopes)
            self.scalar(s.value, scopes)
        elif isinstance(s, If):
            self.scalar(s.cond, scopes)
            self.stmt(s.then, scopes + [{}], fn)
            if s.other is not None:
                self.stmt(s.other, scopes + [{}], fn)
        elif isinstance(s, While):
            self.scalar(s.cond, scopes)
            self.stmt(s.body, scopes + [{}], fn)
        elif isinstance(s, Return):
            if s.value is not None:
                if not fn.returns_value:
                    self.error(s.line, s.col, f"type mismatch: void function {fn.name} returns a value")
                self.scalar(s.value, scopes)
            elif fn.returns_value:
                self.error(s.line, s.col, f"type mismatch: {fn.name} must return a value")
        elif isinstance(s, ExprStmt):
            self.expr(s.expr, scopes, allow_void=True)

    def scalar(self, e: Expr, scopes: list[dict[str, int | None]]) -> None:
        self.expr(e, scopes)

    def expr(self, e: Expr, scopes, allow_void: bool = False, as_arg: bool = False) -> None:
        if isinstance(e, Num):
            return
        if isinstance(e, Var):
            found, size, _ = self.lookup(scopes, e.name)
            if not found:
                self.error(e.line, e.col, f"unknown identifier {e.name}")
            elif size is not None and not as_arg:
                self.error(e.line, e.col, f"type mismatch: array {e.name} used as a scalar")
        elif isinstance(e, Index):
            found, size, _ = self.lookup(scopes, e.name)
            if not found:
                self.error(e.line, e.col, f"unknown identifier {e.name}")
            elif size is None:
                self.error(e.line, e.col, f"type mismatch: {e.name} is not an array")
            self.expr(e.index, scopes)
        elif isinstance(e, Call):
            for a in e.args:
                self.expr(a, scopes, as_arg=True)
        elif isinstance(e, Unary):
            self.expr(e.operand, scopes)
        elif isinstance(e, Binary):
            self.expr(e.lhs, scopes)
            self.expr(e.rhs, scopes)


def parse(text: str, path: str = "<input>") -> Fragment:
    """Parse one MiniC file; the returned fragment carries its diagnostics."""
    try:
        frag = _Parser(text, path).fragment()
    except _SyntaxError as err:
        return Fragment(path, diagnostics=[SourceDiagnostic(path, err.line, err.col,
                                                            f"syntax error: {err.message}")])
    frag.diagnostics.extend(_Resolver(frag).run())
    return frag


# ---------------------------------------------------------------------------
# linking


def _walk_calls(stmt: Stmt):
    stack: list[object] = [stmt]
    while stack:
        node = stack.pop()
        if isinstance(node, Call):
            yield node
        if isinstance(node, Block):
            stack.extend(node.body)
        elif isinstance(node, VarDecl):
            if node.init is not None:
                stack.append(node.init)
        elif isinstance(node, Assign):
            stack.extend([node.target, node.value])
        elif isinstance(node, If):
            stack.extend([node.cond, node.then] + ([node.other] if node.other else []))
        elif isinstance(node, While):
            stack.extend([node.cond, node.body])
        elif isinstance(node, Return):
            if node.value is not None:
                stack.append(node.value)
        elif isinstance(node, ExprStmt):
            stack.append(node.expr)
        elif isinstance(node, Index):
            stack.append(node.index)
        elif isinstance(node, Call):
            stack.extend(node.args)
        elif isinstance(node, Unary):
            stack.append(node.operand)
        elif isinstance(node, Binary):
            stack.extend([node.lhs, node.rhs])


def _call_contexts(fn: FunctionDecl):
    """Yield (call, used_as_value) pairs."""
    assert fn.body is not None
    stmts: list[Stmt] = [fn.body]
    while stmts:
        s = stmts.pop()
        if isinstance(s, Block):
            stmts.extend(s.body)
            continue
        if isinstance(s, If):
            stmts.extend([s.then] + ([s.other] if s.other else []))
        elif isinstance(s, While):
            stmts.append(s.body)
        top = s.expr if isinstance(s, ExprStmt) else None
        for call in _walk_calls(_ExprOnly(s)):
            yield call, call is not top


class _ExprOnly(Block):
    """Wrap a statement's own expressions (not nested statements) for call walking."""

    def __init__(self, s: Stmt):
        exprs: list = []
        if isinstance(s, VarDecl) and s.init is not None:
            exprs = [s.init]
        elif isinstance(s, Assign):
            exprs = [s.target, s.value]
        elif isinstance(s, (If, While)):
            exprs = [s.cond]
        elif isinstance(s, Return) and s.value is not None:
            exprs = [s.value]
        elif isinstance(s, ExprStmt):
            exprs = [s.expr]
        super().__init__(s.line, s.col, s.end_line, exprs)


def link(fragments: list[Fragment], texts: list[tuple[str, str]] | None = None) -> SourceProgram:
    """Combine per-file fragments; raise :class:`MiniCError` on any diagnostic."""
    diags: list[SourceDiagnostic] = []
    for f in fragments:
        diags.extend(f.diagnostics)
    defined: dict[str, FunctionDecl] = {}
    externs: dict[str, FunctionDecl] = {}
    globals_: dict[str, GlobalDecl] = {}
    for f in fragments:
        for g in f.globals:
            if g.name in globals_:
                diags.append(SourceDiagnostic(f.path, g.line, g.col, f"duplicate definition of {g.name}"))
            globals_[g.name] = g
        for fn in f.functions:
            if fn.is_extern:
                externs.setdefault(fn.name, fn)
            elif fn.name in defined:
                if defined[fn.name].path != fn.path:
                    diags.append(SourceDiagnostic(f.path, fn.line, fn.col,
                                                  f"duplicate definition of {fn.name}"))
            else:
                defined[fn.name] = fn
    for name, fn in list(defined.items()) + list(externs.items()):
        if name in globals_ and globals_[name].path != fn.path:
            diags.append(SourceDiagnostic(fn.path, fn.line, fn.col, f"duplicate definition of {name}"))
    signatures = {**externs, **defined}
    for name, ext in externs.items():
        d = defined.get(name)
        if d is not None and ([p.size for p in d.params] != [p.size for p in ext.params]
                              or d.returns_value != ext.returns_value):
            diags.append(SourceDiagnostic(ext.path, ext.line, ext.col,
                                          f"type mismatch: extern {name} disagrees with its definition"))
    for fn in defined.values():
        diags.extend(_check_calls(fn, signatures, globals_))
    if diags:
        raise MiniCError(diags)
    functions = list(defined.values()) + [e for n, e in externs.items() if n not in defined]
    return SourceProgram(texts or [], functions, list(globals_.values()))


def _check_calls(fn: FunctionDecl, sigs: dict[str, FunctionDecl],
                 globals_: dict[str, GlobalDecl]) -> list[SourceDiagnostic]:
    out = []
    local_arrays = _array_names(fn)
    for call, as_value in _call_contexts(fn):
        callee = sigs.get(call.name)
        if callee is None:
            out.append(SourceDiagnostic(fn.path, call.line, call.col, f"unknown identifier {call.name}"))
            continue
        if as_value and not callee.returns_value:
            out.append(SourceDiagnostic(fn.path, call.line, call.col,
                                        f"type mismatch: void function {call.name} used as a value"))
        if len(call.args) != len(callee.params):
            out.append(SourceDiagnostic(fn.path, call.line, call.col,
                                        f"type mismatch: {call.name} expects {len(callee.params)} arguments"))
            continue
        for arg, p in zip(call.args, callee.params):
            size = None
            if isinstance(arg, Var):
                size = local_arrays.get(arg.name)
                if size is None and arg.name not in local_arrays:
                    g = globals_.get(arg.name)
                    size = g.size if g is not None and g.path == fn.path else None
            if p.size != size:
                want = f"i32[{p.size}]" if p.size is not None else "i32"
                have = f"i32[{size}]" if size is not None else "i32"
                out.append(SourceDiagnostic(fn.path, arg.line, arg.col,
                                            f"type mismatch: argument {p.name} of {call.name} "
                                            f"expects {want}, got {have}"))
            elif p.size is not None and isinstance(arg, Var):
                g = globals_.get(arg.name)
                if arg.name not in local_arrays and g is not None and g.const:
                    out.append(SourceDiagnostic(fn.path, arg.line, arg.col,
                                                f"type mismatch: const global {arg.name} passed as array"))
    return out


def _array_names(fn: FunctionDecl) -> dict[str, int | None]:
    """Names that denote local or parameter variables, mapped to array size (None: scalar).

    Shadowing is rare enough in MiniC that a flat map suffices for argument checks.
    """
    names: dict[str, int | None] = {p.name: p.size for p in fn.params}
    stack: list[Stmt] = [fn.body] if fn.body else []
    while stack:
        s = stack.pop()
        if isinstance(s, Block):
            stack.extend(s.body)
        elif isinstance(s, VarDecl):
            names[s.name] = s.size
        elif isinstance(s, If):
            stack.extend([s.then] + ([s.other] if s.other else []))
        elif isinstance(s, While):
            stack.append(s.body)
    return names


def parse_program(sources: list[tuple[str, str]]) -> SourceProgram:
    """Parse and link ``(path, text)`` pairs."""
    frags = [parse(text, path) for path, text in sources]
    return link(frags, sources)
