"""MiniC: a small C-like language front end."""
from .ast import Fragment, FunctionDecl, GlobalDecl, MiniCError, SourceDiagnostic, SourceProgram
from .lower import lower
from .parser import link, parse, parse_program, tokenize

__all__ = [
    "Fragment", "FunctionDecl", "GlobalDecl", "MiniCError", "SourceDiagnostic", "SourceProgram",
    "compile_sources", "link", "lower", "parse", "parse_program", "tokenize",
]


def compile_sources(sources: list[tuple[str, str]]):
    """Parse, link and lower ``(path, text)`` pairs into an IR module."""
    return lower(parse_program(sources))
