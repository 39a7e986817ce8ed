"""Readable session-type notation.

Grammar (whitespace, ``//`` and ``/* */`` comments are ignored)::

    module  := (definition ';'?)*
    definition
            := 'rec'? NAME '=' shape
             | 'pub'? 'type' NAME '=' 'St' '!' '[' shape ']'
             | 'Rec' '!' '(' 'pub'? NAME ',' '[' shape ']' ')'
    shape   := 'end'
             | 'rec' NAME '.' shape                  recursion binder
             | NAME                                  recursion variable / named type
             | '(' ROLE OP MSG ')' '.' shape         single action
             | '(' ROLE OP '{' branch (',' branch)* ','? '}' ')'
    branch  := MSG '.' shape
    OP      := '&' (offer) | '+' (select)

A choice with more than two branches is expanded into nested two-way
choices. ``Rec!`` and ``St!`` forms accept the macro notation as written.
Role names may carry a ``Role`` prefix (``RoleServerUser``).
"""

from __future__ import annotations

import re
from typing import Any, Mapping

from .session import (END, End, MalformedShape, Message, OfferOne, OfferTwo, Rec,
                      Role, SelectOne, SelectTwo, Shape, branches, check_well_formed,
                      expand_nary_offer, expand_nary_select)


class DslError(MalformedShape):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


_TOKEN = re.compile(r"""
    (?P<ws>\s+)
  | (?P<comment>//[^\n]*|/\*.*?\*/)
  | (?P<name>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<punct>[(){}\[\].,&+=;!])
""", re.VERBOSE | re.DOTALL)


def _tokenize(text: str) -> list[tuple[str, int]]:
    out, pos, line = [], 0, 1
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if not m:
            raise DslError(f"unexpected character {text[pos]!r}", line)
        kind = m.lastgroup
        if kind in ("name", "punct"):
            out.append((m.group(), line))
        line += m.group().count("\n")
        pos = m.end()
    return out


class _Parser:
    def __init__(self, text: str):
        self.toks = _tokenize(text)
        self.i = 0

    def peek(self, k: int = 0) -> str | None:
        j = self.i + k
        return self.toks[j][0] if j < len(self.toks) else None

    @property
    def line(self) -> int | None:
        if self.i < len(self.toks):
            return self.toks[self.i][1]
        return self.toks[-1][1] if self.toks else None

    def take(self, expected: str | None = None) -> str:
        tok = self.peek()
        if tok is None:
            raise DslError(f"unexpected end of input, expected {expected or 'a token'}", self.line)
        if expected is not None and tok != expected:
            raise DslError(f"expected {expected!r}, got {tok!r}", self.line)
        self.i += 1
        return tok

    def name(self) -> str:
        tok = self.peek()
        if tok is None or not re.fullmatch(r"[A-Za-z_]\w*", tok):
            raise DslError(f"expected a name, got {tok!r}", self.line)
        self.i += 1
        return tok

    def shape(self) -> tuple:
        line = self.line
        tok = self.peek()
        if tok == "end":
            self.take()
            return ("end",)
        if tok == "rec":
            self.take()
            name = self.name()
            self.take(".")
            return ("rec", name, self.shape(), line)
        if tok == "(":
            self.take()
            role = self.name()
            op = self.take()
            if op not in ("&", "+"):
                raise DslError(f"expected '&' or '+', got {op!r}", line)
            if self.peek() == "{":
                self.take()
                cases = [self.branch()]
                while self.peek() == ",":
                    self.take()
                    if self.peek() == "}":
                        break
                    cases.append(self.branch())
                self.take("}")
                self.take(")")
                return ("choice", op, role, cases, line)
            msg = self.name()
            self.take(")")
            if self.peek() != ".":
                raise DslError(f"action ({role} {op} {msg}) needs a continuation", line)
            self.take(".")
            return ("choice", op, role, [(msg, self.shape(), line)], line)
        return ("ref", self.name(), line)

    def branch(self) -> tuple:
        line = self.line
        msg = self.name()
        self.take(".")
        return (msg, self.shape(), line)

    def definitions(self) -> list[tuple[str, bool, tuple, int | None]]:
        defs = []
        while self.peek() is not None:
            line = self.line
            if self.peek() == "Rec" and self.peek(1) == "!":
                self.take(), self.take("!"), self.take("(")
                if self.peek() == "pub":
                    self.take()
                name = self.name()
                self.take(","), self.take("[")
                body = self.shape()
                self.take("]"), self.take(")")
                defs.append((name, True, body, line))
            elif self.peek() in ("pub", "type"):
                if self.peek() == "pub":
                    self.take()
                self.take("type")
                name = self.name()
                self.take("="), self.take("St"), self.take("!"), self.take("[")
                body = self.shape()
                self.take("]")
                defs.append((name, False, body, line))
            else:
                is_rec = self.peek() == "rec"
                if is_rec:
                    self.take()
                name = self.name()
                self.take("=")
                defs.append((name, is_rec, self.shape(), line))
            if self.peek() == ";":
                self.take()
        return defs


def _binders(ast: tuple, into: dict[str, Rec]) -> None:
    kind = ast[0]
    if kind == "rec":
        name = ast[1]
        if name in into:
            raise DslError(f"recursion variable {name} bound twice", ast[3])
        into[name] = Rec(name)
        _binders(ast[2], into)
    elif kind == "choice":
        for _, cont, _ in ast[3]:
            _binders(cont, into)


class _Builder:
    def __init__(self, env: Mapping[str, Any], recs: dict[str, Rec],
                 aliases: dict[str, tuple] | None = None):
        self.env = env
        self.recs = recs
        self.aliases = aliases or {}
        self.resolved: dict[str, Shape] = {}
        self.resolving: set[str] = set()

    def role(self, name: str, line: int | None) -> Role:
        for key in (name, name[4:] if name.startswith("Role") else None):
            if key and isinstance(self.env.get(key), Role):
                return self.env[key]
        raise DslError(f"unknown role {name}", line)

    def msg(self, name: str, line: int | None) -> type[Message]:
        obj = self.env.get(name)
        if isinstance(obj, type) and issubclass(obj, Message):
            return obj
        raise DslError(f"unknown message class {name}", line)

    def ref(self, name: str, line: int | None) -> Shape:
        if name in self.recs:
            return self.recs[name]
        if name in self.resolved:
            return self.resolved[name]
        if name in self.aliases:
            if name in self.resolving:
                raise DslError(f"unguarded recursion through {name}; declare it with 'rec'", line)
            self.resolving.add(name)
            self.resolved[name] = self.build(self.aliases[name])
            self.resolving.discard(name)
            return self.resolved[name]
        obj = self.env.get(name)
        if isinstance(obj, Shape):
            return obj
        raise DslError(f"unknown session type {name}", line)

    def build(self, ast: tuple) -> Shape:
        kind = ast[0]
        if kind == "end":
            return END
        if kind == "ref":
            return self.ref(ast[1], ast[2])
        if kind == "rec":
            rec = self.recs[ast[1]]
            rec.define(self.build(ast[2]))
            return rec
        _, op, role_name, cases, line = ast
        peer = self.role(role_name, line)
        built = [(self.msg(m, ln), self.build(c)) for m, c, ln in cases]
        return (expand_nary_offer if op == "&" else expand_nary_select)(peer, built)


def default_env() -> dict[str, Any]:
    from . import messages
    return messages.env()


def compose(text: str, env: Mapping[str, Any] | None = None) -> Shape:
    """Parse one shape expression."""
    env = default_env() if env is None else env
    parser = _Parser(text)
    ast = parser.shape()
    if parser.peek() is not None:
        raise DslError(f"trailing input at {parser.peek()!r}", parser.line)
    recs: dict[str, Rec] = {}
    _binders(ast, recs)
    shape = _Builder(env, recs).build(ast)
    check_well_formed(shape)
    return shape


def compose_module(text: str, env: Mapping[str, Any] | None = None) -> dict[str, Shape]:
    """Parse a sequence of named definitions; names may be used before they
    are defined. Returns the shapes in definition order."""
    env = default_env() if env is None else env
    defs = _Parser(text).definitions()
    recs: dict[str, Rec] = {}
    aliases: dict[str, tuple] = {}
    for name, is_rec, body, line in defs:
        if name in recs or name in aliases:
            raise DslError(f"{name} defined twice", line)
        if is_rec:
            recs[name] = Rec(name)
            _binders(body, recs)
        else:
            aliases[name] = body
            _binders(body, recs)
    builder = _Builder(env, recs, aliases)
    out: dict[str, Shape] = {}
    for name, is_rec, body, _ in defs:
        if is_rec:
            recs[name].define(builder.build(body))
            out[name] = recs[name]
        else:
            out[name] = builder.ref(name, None)
    for shape in out.values():
        check_well_formed(shape)
    return out


def render(shape: Shape) -> str:
    """Print ``shape`` in the notation accepted by :func:`compose`.

    Each recursion point is bound where it is first reached and referenced
    by name afterwards.
    """
    bound: set[str] = set()

    def r(s: Shape) -> str:
        if isinstance(s, Rec):
            if s.name in bound:
                return s.name
            bound.add(s.name)
            return f"rec {s.name}.{r(s.body)}"
        if isinstance(s, End):
            return "end"
        op = "&" if isinstance(s, (OfferOne, OfferTwo)) else "+"
        if isinstance(s, (OfferOne, SelectOne)):
            return f"({s.peer} {op} {s.msg.label}).{r(s.cont)}"
        if isinstance(s, (OfferTwo, SelectTwo)):
            cases = ", ".join(f"{m.label}.{r(c)}" for m, c in branches(s))
            return f"({s.peer} {op} {{{cases}}})"
        raise MalformedShape(f"cannot render {s!r}")

    return r(shape)
