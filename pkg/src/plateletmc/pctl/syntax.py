"""AST, parser and printer for the PCTL query fragment.

Grammar (whitespace-insensitive)::

    query := ("P=?" | "P" CMP PROB | "T=?") "[" path "]"
    path  := "F" bound? sf | sf "U" bound? sf
    bound := "<=" (INT | NAME)
    sf    := '"' LABEL '"' | "!" sf | sf "&" sf | sf "|" sf | "(" sf ")"

Precedence is ``!`` > ``&`` > ``|``; binary operators associate left. A
bound may be a bare name such as ``B``, a parameter filled in by
:func:`bind` (used for horizon sweeps). Labels of the form ``pr14`` are
canonicalized to ``pr_14``.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, replace
from typing import Optional, Union

from ..errors import InvalidInput, PlateletMCError


class ParseError(PlateletMCError):
    def __init__(self, message: str, offset: int, expected: frozenset = frozenset(), text: str = ""):
        self.message = message
        self.offset = offset
        self.expected = frozenset(expected)
        self.text = text
        exp = f" (expected one of: {', '.join(sorted(self.expected))})" if self.expected else ""
        super().__init__(f"byte {offset}: {message}{exp}")

    def caret(self) -> str:
        """Two-line rendering of the query with a marker under the offset."""
        raw = self.text.encode()
        col = len(raw[: self.offset].decode(errors="replace"))
        return f"{self.text}\n{' ' * col}^"


class UnsupportedFeature(ParseError):
    pass


# -- AST ---------------------------------------------------------------------


@dataclass(frozen=True)
class Atom:
    name: str


@dataclass(frozen=True)
class Not:
    arg: "StateFormula"


@dataclass(frozen=True)
class And:
    left: "StateFormula"
    right: "StateFormula"


@dataclass(frozen=True)
class Or:
    left: "StateFormula"
    right: "StateFormula"


StateFormula = Union[Atom, Not, And, Or]
Bound = Union[int, str, None]


@dataclass(frozen=True)
class Eventually:
    target: StateFormula
    bound: Bound = None


@dataclass(frozen=True)
class Until:
    left: StateFormula
    right: StateFormula
    bound: Bound = None


PathFormula = Union[Eventually, Until]


@dataclass(frozen=True)
class ProbQuery:
    path: PathFormula


@dataclass(frozen=True)
class ProbThreshold:
    cmp: str
    p: float
    path: PathFormula


@dataclass(frozen=True)
class TimeQuery:
    path: PathFormula


Query = Union[ProbQuery, ProbThreshold, TimeQuery]


# -- tokenizer ---------------------------------------------------------------

_TOKEN = re.compile(
    r"""
    (?P<ws>\s+)
  | (?P<string>"[^"]*")
  | (?P<cmp><=|>=|<|>)
  | (?P<query>=\?)
  | (?P<number>\d+(?:\.\d*)?(?:[eE][+-]?\d+)?|\.\d+(?:[eE][+-]?\d+)?)
  | (?P<word>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<punct>[\[\]()!&|])
  | (?P<diamond>◊)
    """,
    re.VERBOSE,
)
_LABEL = re.compile(r"[A-Za-z_][A-Za-z0-9_]*\Z")
_PR_SHORT = re.compile(r"pr(\d+)\Z")


@dataclass(frozen=True)
class _Tok:
    kind: str
    text: str
    offset: int  # byte offset


def _tokenize(text: str) -> list[_Tok]:
    toks = []
    pos = 0
    byte = 0
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if m is None:
            if text[pos] == '"':
                raise ParseError("unterminated label string", byte, frozenset({'"'}), text)
            raise ParseError(f"unexpected character {text[pos]!r}", byte, text=text)
        kind = m.lastgroup
        if kind == "diamond":  # the eventually operator written as a lozenge
            toks.append(_Tok("word", "F", byte))
        elif kind != "ws":
            toks.append(_Tok(kind, m.group(), byte))
        byte += len(m.group().encode())
        pos = m.end()
    toks.append(_Tok("eof", "", byte))
    return toks


def canonical_label(name: str) -> str:
    m = _PR_SHORT.match(name)
    return f"pr_{m.group(1)}" if m else name


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.toks = _tokenize(text)
        self.i = 0

    @property
    def tok(self) -> _Tok:
        return self.toks[self.i]

    def fail(self, expected, message: Optional[str] = None):
        tok = self.tok
        found = "end of input" if tok.kind == "eof" else repr(tok.text)
        raise ParseError(message or f"unexpected {found}", tok.offset, frozenset(expected), self.text)

    def is_word(self, word: str) -> bool:
        return self.tok.kind == "word" and self.tok.text == word

    def is_punct(self, p: str) -> bool:
        return self.tok.kind == "punct" and self.tok.text == p

    def expect_punct(self, p: str):
        if not self.is_punct(p):
            self.fail({p})
        self.i += 1

    def query(self) -> Query:
        head_tok = self.tok
        if self.is_word("P"):
            self.i += 1
            if self.tok.kind == "query":
                self.i += 1
                head = ("P=?", None, None)
            elif self.tok.kind == "cmp":
                cmp = self.tok.text
                self.i += 1
                if self.tok.kind != "number":
                    self.fail({"PROB"})
                p = float(self.tok.text)
                if not 0.0 <= p <= 1.0:
                    self.fail(set(), f"probability threshold {self.tok.text} outside [0, 1]")
                self.i += 1
                head = ("P", cmp, p)
            else:
                self.fail({"=?", "<", "<=", ">", ">="})
        elif self.is_word("T"):
            self.i += 1
            if self.tok.kind != "query":
                self.fail({"=?"})
            self.i += 1
            head = ("T=?", None, None)
        else:
            self.fail({"P", "T"})
        self.expect_punct("[")
        path_tok = self.tok
        path = self.path()
        self.expect_punct("]")
        if self.tok.kind != "eof":
            self.fail({"end of input"})
        kind, cmp, p = head
        if kind == "T=?":
            if isinstance(path, Until):
                raise UnsupportedFeature("T=? supports only F (eventually), not U", path_tok.offset, text=self.text)
            if path.bound is not None:
                raise UnsupportedFeature("T=? takes an unbounded F", path_tok.offset, text=self.text)
            return TimeQuery(path)
        if kind == "P=?":
            return ProbQuery(path)
        del head_tok
        return ProbThreshold(cmp, p, path)

    def path(self) -> PathFormula:
        if self.is_word("F"):
            self.i += 1
            bound = self.bound()
            return Eventually(self.sf(), bound)
        left = self.sf()
        if not self.is_word("U"):
            self.fail({"U", "&", "|"})
        self.i += 1
        bound = self.bound()
        return Until(left, self.sf(), bound)

    def bound(self) -> Bound:
        if self.tok.kind != "cmp":
            return None
        if self.tok.text != "<=":
            self.fail({"<="}, f"only '<=' bounds are supported, got {self.tok.text!r}")
        self.i += 1
        tok = self.tok
        if tok.kind == "number" and tok.text.isdigit():
            self.i += 1
            return int(tok.text)
        if tok.kind == "word":
            self.i += 1
            return tok.text
        self.fail({"INT", "NAME"})

    def sf(self) -> StateFormula:
        node = self.conj()
        while self.is_punct("|"):
            self.i += 1
            node = Or(node, self.conj())
        return node

    def conj(self) -> StateFormula:
        node = self.unary()
        while self.is_punct("&"):
            self.i += 1
            node = And(node, self.unary())
        return node

    def unary(self) -> StateFormula:
        tok = self.tok
        if self.is_punct("!"):
            self.i += 1
            return Not(self.unary())
        if self.is_punct("("):
            self.i += 1
            node = self.sf()
            self.expect_punct(")")
            return node
        if tok.kind == "string":
            name = tok.text[1:-1]
            if not _LABEL.match(name):
                raise ParseError(f"invalid label name {name!r}", tok.offset + 1, text=self.text)
            self.i += 1
            return Atom(canonical_label(name))
        self.fail({'"LABEL"', "!", "("})


def parse(text: str) -> Query:
    """Parse a query string; raises :class:`ParseError` with a byte offset."""
    return _Parser(text).query()


# -- printing ----------------------------------------------------------------

_PREC = {Or: 1, And: 2, Not: 3, Atom: 4}


def _sf(node: StateFormula) -> str:
    if isinstance(node, Atom):
        return f'"{node.name}"'
    if isinstance(node, Not):
        inner = _sf(node.arg)
        return f"!{inner}" if _PREC[type(node.arg)] >= 3 else f"!({inner})"
    op = " | " if isinstance(node, Or) else " & "
    prec = _PREC[type(node)]
    left = _sf(node.left)
    if _PREC[type(node.left)] < prec:
        left = f"({left})"
    right = _sf(node.right)
    if _PREC[type(node.right)] <= prec:
        right = f"({right})"
    return left + op + right


def _bound(b: Bound) -> str:
    return "" if b is None else f"<={b}"


def _path(path: PathFormula) -> str:
    if isinstance(path, Eventually):
        return f"F{_bound(path.bound)} {_sf(path.target)}"
    return f"{_sf(path.left)} U{_bound(path.bound)} {_sf(path.right)}"


def pretty(query: Query) -> str:
    if isinstance(query, ProbQuery):
        head = "P=?"
    elif isinstance(query, ProbThreshold):
        head = f"P{query.cmp}{query.p!r}"
    else:
        head = "T=?"
    return f"{head} [ {_path(query.path)} ]"


def atoms(node) -> set[str]:
    if isinstance(node, Atom):
        return {node.name}
    if isinstance(node, Not):
        return atoms(node.arg)
    if isinstance(node, (And, Or)):
        return atoms(node.left) | atoms(node.right)
    if isinstance(node, Eventually):
        return atoms(node.target)
    if isinstance(node, Until):
        return atoms(node.left) | atoms(node.right)
    return atoms(node.path)


def parameters(query: Query) -> set[str]:
    b = query.path.bound
    return {b} if isinstance(b, str) else set()


def bind(query: Query, **values: int) -> Query:
    """Substitute integer values for named bounds."""
    b = query.path.bound
    if isinstance(b, str):
        if b not in values:
            raise InvalidInput(f"no value for bound parameter {b!r}")
        v = int(values[b])
        if v < 0:
            raise InvalidInput("bounds must be >= 0")
        return replace(query, path=replace(query.path, bound=v))
    return query
