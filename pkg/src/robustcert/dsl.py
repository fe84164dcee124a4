"""Expression and problem-file language.

Vector fields are given per coordinate as smooth expressions over
``x1..xn``; the initial and unsafe sets are boolean combinations of
inequalities between such expressions. Everything parsed here is immutable.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from functools import cached_property
from itertools import product
from typing import Callable, Sequence

import numpy as np

FUNCTIONS = {
    "sin": np.sin,
    "cos": np.cos,
    "exp": np.exp,
    "sqrt": np.sqrt,
    "log": np.log,
}
NON_SMOOTH = {"abs", "min", "max", "sign", "floor", "ceil", "round"}


class ParseError(ValueError):
    """Syntax or semantic error in an expression, predicate or problem file."""

    def __init__(self, message: str, pos: int | None = None, line: int | None = None):
        self.message = message
        self.pos = pos
        self.line = line
        where = []
        if line is not None:
            where.append(f"line {line}")
        if pos is not None:
            where.append(f"column {pos + 1}")
        prefix = f"{', '.join(where)}: " if where else ""
        super().__init__(prefix + message)


class UnknownIdentifierError(ParseError):
    pass


class DimensionError(ParseError):
    pass


class NonSmoothError(ParseError):
    pass


class ProblemError(ValueError):
    """A parsed problem violates one of its structural invariants."""


# ---------------------------------------------------------------------------
# expression tree


class Expr:
    __slots__ = ()

    def __call__(self, X):
        return evaluate(self, X)


@dataclass(frozen=True)
class Num(Expr):
    value: float


@dataclass(frozen=True)
class Var(Expr):
    index: int  # 1-based


@dataclass(frozen=True)
class Neg(Expr):
    arg: Expr


@dataclass(frozen=True)
class BinOp(Expr):
    op: str
    left: Expr
    right: Expr


@dataclass(frozen=True)
class Call(Expr):
    name: str
    arg: Expr


def variables(e: Expr) -> set[int]:
    if isinstance(e, Var):
        return {e.index}
    if isinstance(e, Num):
        return set()
    if isinstance(e, (Neg, Call)):
        return variables(e.arg)
    return variables(e.left) | variables(e.right)


def compile_expr(e: Expr) -> Callable[[np.ndarray], np.ndarray]:
    """Turn ``e`` into a function of an ``(..., n)`` array of points."""
    if isinstance(e, Num):
        v = float(e.value)
        return lambda X: np.full(np.shape(X)[:-1], v)
    if isinstance(e, Var):
        i = e.index - 1
        return lambda X: np.asarray(X, dtype=float)[..., i]
    if isinstance(e, Neg):
        g = compile_expr(e.arg)
        return lambda X: -g(X)
    if isinstance(e, Call):
        g = compile_expr(e.arg)
        fn = FUNCTIONS[e.name]
        return lambda X: fn(g(X))
    a, b = compile_expr(e.left), compile_expr(e.right)
    if e.op == "+":
        return lambda X: a(X) + b(X)
    if e.op == "-":
        return lambda X: a(X) - b(X)
    if e.op == "*":
        return lambda X: a(X) * b(X)
    if e.op == "/":
        return lambda X: a(X) / b(X)
    if e.op == "^":
        if isinstance(e.right, Num) and float(e.right.value).is_integer():
            k = int(e.right.value)
            return lambda X: a(X) ** k
        return lambda X: np.power(a(X), b(X))
    raise ValueError(f"unknown operator {e.op!r}")


def evaluate(e: Expr, X) -> np.ndarray | float:
    X = np.asarray(X, dtype=float)
    out = compile_expr(e)(X if X.ndim else X[None])
    return float(out) if np.ndim(out) == 0 else out


# -- symbolic differentiation with light constant folding


def _is(e: Expr, v: float) -> bool:
    return isinstance(e, Num) and e.value == v


def _add(a: Expr, b: Expr) -> Expr:
    if _is(a, 0):
        return b
    if _is(b, 0):
        return a
    if isinstance(a, Num) and isinstance(b, Num):
        return Num(a.value + b.value)
    return BinOp("+", a, b)


def _sub(a: Expr, b: Expr) -> Expr:
    if _is(b, 0):
        return a
    if _is(a, 0):
        return _neg(b)
    if isinstance(a, Num) and isinstance(b, Num):
        return Num(a.value - b.value)
    return BinOp("-", a, b)


def _mul(a: Expr, b: Expr) -> Expr:
    if _is(a, 0) or _is(b, 0):
        return Num(0.0)
    if _is(a, 1):
        return b
    if _is(b, 1):
        return a
    if isinstance(a, Num) and isinstance(b, Num):
        return Num(a.value * b.value)
    return BinOp("*", a, b)


def _div(a: Expr, b: Expr) -> Expr:
    if _is(a, 0):
        return Num(0.0)
    if _is(b, 1):
        return a
    return BinOp("/", a, b)


def _neg(a: Expr) -> Expr:
    if isinstance(a, Num):
        return Num(-a.value)
    if isinstance(a, Neg):
        return a.arg
    return Neg(a)


def diff(e: Expr, i: int) -> Expr:
    """Partial derivative of ``e`` with respect to ``x_i`` (1-based)."""
    if isinstance(e, Num):
        return Num(0.0)
    if isinstance(e, Var):
        return Num(1.0 if e.index == i else 0.0)
    if isinstance(e, Neg):
        return _neg(diff(e.arg, i))
    if isinstance(e, Call):
        u, du = e.arg, diff(e.arg, i)
        if _is(du, 0):
            return Num(0.0)
        outer = {
            "sin": lambda: Call("cos", u),
            "cos": lambda: _neg(Call("sin", u)),
            "exp": lambda: e,
            "sqrt": lambda: _div(Num(0.5), e),
            "log": lambda: _div(Num(1.0), u),
        }[e.name]()
        return _mul(outer, du)
    a, b = e.left, e.right
    da, db = diff(a, i), diff(b, i)
    if e.op == "+":
        return _add(da, db)
    if e.op == "-":
        return _sub(da, db)
    if e.op == "*":
        return _add(_mul(da, b), _mul(a, db))
    if e.op == "/":
        return _div(_sub(_mul(da, b), _mul(a, db)), BinOp("^", b, Num(2.0)))
    if e.op == "^":
        if isinstance(b, Num):
            k = b.value
            if k == 0:
                return Num(0.0)
            power = a if k == 2 else BinOp("^", a, Num(k - 1))
            return _mul(_mul(Num(k), power), da)
        # a^b = exp(b log a)
        inner = _add(_mul(db, Call("log", a)), _div(_mul(b, da), a))
        return _mul(e, inner)
    raise ValueError(f"unknown operator {e.op!r}")


def gradient(e: Expr, n: int) -> tuple[Expr, ...]:
    return tuple(diff(e, i) for i in range(1, n + 1))


# -- printing

_PREC = {"+": 1, "-": 1, "*": 2, "/": 2}


def _is_atom(e: Expr) -> bool:
    return isinstance(e, (Var, Call)) or (isinstance(e, Num) and e.value >= 0)


def _num_text(v: float) -> str:
    if v < 0:
        return f"(-{repr(float(-v))})"
    return repr(float(v))


def to_text(e: Expr) -> str:
    """Print ``e`` so that parsing the result evaluates identically."""
    if isinstance(e, Num):
        return _num_text(e.value)
    if isinstance(e, Var):
        return f"x{e.index}"
    if isinstance(e, Call):
        return f"{e.name}({to_text(e.arg)})"
    if isinstance(e, Neg):
        inner = to_text(e.arg)
        if not (_is_atom(e.arg) or isinstance(e.arg, BinOp) and e.arg.op == "^"):
            inner = f"({inner})"
        return f"-{inner}"
    left, right = to_text(e.left), to_text(e.right)
    if e.op == "^":
        if not _is_atom(e.left):
            left = f"({left})"
        if not _is_atom(e.right):
            right = f"({right})"
        return f"{left}^{right}"
    p = _PREC[e.op]
    if isinstance(e.left, BinOp) and e.left.op in _PREC and _PREC[e.left.op] < p:
        left = f"({left})"
    if isinstance(e.right, BinOp) and e.right.op in _PREC and _PREC[e.right.op] <= p:
        right = f"({right})"
    if isinstance(e.right, Neg):
        right = f"({right})"
    return f"{left} {e.op} {right}"


# ---------------------------------------------------------------------------
# tokenizer and parser

_TOKEN = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<name>[A-Za-z_][A-Za-z0-9_]*)"
    r"|(?P<op><=|>=|&&|\|\||[-+*/^(),<>]))"
)


@dataclass(frozen=True)
class Token:
    kind: str
    text: str
    pos: int


def tokenize(text: str) -> list[Token]:
    tokens = []
    pos = 0
    while pos < len(text):
        if text[pos].isspace():
            pos += 1
            continue
        m = _TOKEN.match(text, pos)
        if not m or m.end() == pos:
            raise ParseError(f"unexpected character {text[pos]!r}", pos)
        kind = m.lastgroup
        start = m.start(kind)
        tokens.append(Token(kind, m.group(kind), start))
        pos = m.end()
    tokens.append(Token("end", "", len(text)))
    return tokens


class _Parser:
    def __init__(self, text: str, n: int):
        self.text = text
        self.n = n
        self.toks = tokenize(text)
        self.i = 0

    @property
    def tok(self) -> Token:
        return self.toks[self.i]

    def take(self) -> Token:
        t = self.toks[self.i]
        self.i += 1
        return t

    def accept(self, text: str) -> bool:
        if self.tok.text == text and self.tok.kind != "num":
            self.i += 1
            return True
        return False

    def expect(self, text: str) -> Token:
        if self.tok.text != text:
            found = self.tok.text or "end of input"
            raise ParseError(f"expected {text!r}, found {found!r}", self.tok.pos)
        return self.take()

    def done(self):
        if self.tok.kind != "end":
            raise ParseError(f"unexpected {self.tok.text!r}", self.tok.pos)

    # expressions
    def expr(self) -> Expr:
        e = self.term()
        while self.tok.text in ("+", "-"):
            op = self.take().text
            e = BinOp(op, e, self.term())
        return e

    def term(self) -> Expr:
        e = self.unary()
        while self.tok.text in ("*", "/"):
            op = self.take().text
            e = BinOp(op, e, self.unary())
        return e

    def unary(self) -> Expr:
        if self.accept("-"):
            return Neg(self.unary())
        if self.accept("+"):
            return self.unary()
        return self.power()

    def power(self) -> Expr:
        base = self.atom()
        if self.accept("^"):
            return BinOp("^", base, self.unary())
        return base

    def atom(self) -> Expr:
        t = self.tok
        if t.kind == "num":
            self.take()
            return Num(float(t.text))
        if t.kind == "name":
            self.take()
            m = re.fullmatch(r"x(\d+)", t.text)
            if m:
                k = int(m.group(1))
                if k < 1:
                    raise UnknownIdentifierError(f"unknown identifier {t.text!r}", t.pos)
                if k > self.n:
                    raise DimensionError(
                        f"variable {t.text!r} exceeds dimension {self.n}", t.pos
                    )
                return Var(k)
            if t.text in NON_SMOOTH:
                raise NonSmoothError(f"non-smooth function {t.text!r} is not allowed", t.pos)
            if t.text in FUNCTIONS:
                self.expect("(")
                arg = self.expr()
                self.expect(")")
                return Call(t.text, arg)
            if t.text == "pi":
                return Num(math.pi)
            raise UnknownIdentifierError(f"unknown identifier {t.text!r}", t.pos)
        if self.accept("("):
            e = self.expr()
            self.expect(")")
            return e
        found = t.text or "end of input"
        raise ParseError(f"unexpected {found!r}", t.pos)

    # predicates
    def pred(self) -> "SetPredicate":
        parts = [self.conj()]
        while self.tok.text in ("or", "||"):
            self.take()
            parts.append(self.conj())
        return parts[0] if len(parts) == 1 else Or(tuple(parts))

    def conj(self) -> "SetPredicate":
        parts = [self.pred_atom()]
        while self.tok.text in ("and", "&&"):
            self.take()
            parts.append(self.pred_atom())
        return parts[0] if len(parts) == 1 else And(tuple(parts))

    def pred_atom(self) -> "SetPredicate":
        if self.tok.text in ("true", "false"):
            return Const(self.take().text == "true")
        if self.tok.text == "(":
            save = self.i
            self.take()
            try:
                p = self.pred()
                self.expect(")")
                return p
            except ParseError:
                self.i = save
        lhs = self.expr()
        t = self.tok
        if t.text not in ("<=", "<", ">=", ">"):
            raise ParseError("expected a comparison operator", t.pos)
        self.take()
        rhs = self.expr()
        if t.text in ("<=", "<"):
            return Atom(_sub(lhs, rhs) if not _is(rhs, 0) else lhs, strict=t.text == "<")
        return Atom(_sub(rhs, lhs), strict=t.text == ">")


def parse_expression(text: str, n: int) -> Expr:
    """Parse ``text`` into an expression over ``x1..xn``.

    >>> parse_expression("-x1", 1)
    Neg(arg=Var(index=1))
    """
    if not text or not text.strip():
        raise ParseError("empty expression", 0)
    p = _Parser(text, n)
    e = p.expr()
    p.done()
    return e


# ---------------------------------------------------------------------------
# set predicates


class SetPredicate:
    __slots__ = ()

    def __call__(self, X) -> np.ndarray:
        return self.holds(np.asarray(X, dtype=float))


@dataclass(frozen=True)
class Atom(SetPredicate):
    """``expr < 0`` when strict, else ``expr <= 0``."""

    expr: Expr
    strict: bool = False

    def holds(self, X):
        v = evaluate(self.expr, X)
        return np.asarray(v < 0 if self.strict else v <= 0)


@dataclass(frozen=True)
class And(SetPredicate):
    parts: tuple

    def holds(self, X):
        out = self.parts[0].holds(X)
        for p in self.parts[1:]:
            out = out & p.holds(X)
        return out


@dataclass(frozen=True)
class Or(SetPredicate):
    parts: tuple

    def holds(self, X):
        out = self.parts[0].holds(X)
        for p in self.parts[1:]:
            out = out | p.holds(X)
        return out


@dataclass(frozen=True)
class Const(SetPredicate):
    value: bool

    def holds(self, X):
        return np.full(np.shape(X)[:-1], self.value)


def predicate_text(p: SetPredicate) -> str:
    if isinstance(p, Const):
        return "true" if p.value else "false"
    if isinstance(p, Atom):
        return f"{to_text(p.expr)} {'<' if p.strict else '<='} 0"
    joiner = " and " if isinstance(p, And) else " or "
    return joiner.join(f"({predicate_text(q)})" for q in p.parts)


def parse_predicate(text: str, n: int) -> SetPredicate:
    if not text or not text.strip():
        raise ParseError("empty predicate", 0)
    p = _Parser(text, n)
    out = p.pred()
    p.done()
    return out


# ---------------------------------------------------------------------------
# problems


@dataclass(frozen=True)
class SafetyProblem:
    dim: int
    field: tuple
    init: SetPredicate
    unsafe: SetPredicate
    domain: tuple  # ((lo, hi), ...)
    name: str = ""

    @property
    def lo(self) -> np.ndarray:
        return np.array([a for a, _ in self.domain], dtype=float)

    @property
    def hi(self) -> np.ndarray:
        return np.array([b for _, b in self.domain], dtype=float)

    @cached_property
    def _compiled(self):
        return [compile_expr(e) for e in self.field]

    def f(self, X) -> np.ndarray:
        """Vector field at an ``(..., n)`` array of points."""
        X = np.asarray(X, dtype=float)
        out = np.empty(X.shape)
        for k, g in enumerate(self._compiled):
            out[..., k] = g(X)
        return out

    def in_box(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        return np.all((X >= self.lo) & (X <= self.hi), axis=-1)


def eval_field(p: SafetyProblem, x) -> np.ndarray:
    return p.f(np.asarray(x, dtype=float))


def face_samples(domain, per_axis: int = 17) -> np.ndarray:
    """Sample points on every face of an axis-aligned box."""
    lo = np.array([a for a, _ in domain], dtype=float)
    hi = np.array([b for _, b in domain], dtype=float)
    n = len(lo)
    axes = [np.linspace(lo[k], hi[k], per_axis) for k in range(n)]
    pts = []
    for k in range(n):
        others = [axes[j] for j in range(n) if j != k]
        for side in (lo[k], hi[k]):
            for combo in product(*others) if others else [()]:
                p = list(combo)
                p.insert(k, side)
                pts.append(p)
    return np.array(pts, dtype=float)


def make_problem(
    field_texts: Sequence[str],
    domain,
    init: str,
    unsafe: str,
    name: str = "",
    face_density: int = 17,
) -> SafetyProblem:
    n = len(field_texts)
    if n < 1:
        raise ProblemError("dimension must be at least 1")
    dom = tuple((float(a), float(b)) for a, b in domain)
    if len(dom) != n:
        raise ProblemError(f"domain has {len(dom)} intervals, expected {n}")
    for a, b in dom:
        if not a < b:
            raise ProblemError(f"empty domain interval [{a}, {b}]")
    prob = SafetyProblem(
        dim=n,
        field=tuple(parse_expression(t, n) for t in field_texts),
        init=parse_predicate(init, n),
        unsafe=parse_predicate(unsafe, n),
        domain=dom,
        name=name,
    )
    check_boundedness(prob, face_density)
    return prob


def check_boundedness(p: SafetyProblem, per_axis: int = 17) -> None:
    """Every sample on the box faces must be unsafe, otherwise raise."""
    pts = face_samples(p.domain, per_axis)
    ok = p.unsafe(pts)
    if not np.all(ok):
        bad = pts[np.argmin(ok)]
        raise ProblemError(
            "safe state on the domain boundary at "
            f"({', '.join(f'{v:g}' for v in bad)}); the unsafe set must cover the box faces"
        )


_LINE = re.compile(r"^\s*([A-Za-z_]+)\s*=\s*(.*?)\s*$")
_KEYS = ("dim", "field", "domain", "init", "unsafe")


def _strip_comment(line: str) -> str:
    # '#' inside a quoted string is kept
    quote = False
    for k, ch in enumerate(line):
        if ch == '"':
            quote = not quote
        elif ch == "#" and not quote:
            return line[:k]
    return line


def parse_problem(text: str, name: str = "", face_density: int = 17) -> SafetyProblem:
    """Parse a problem file (``key = value`` lines, ``#`` comments)."""
    values: dict[str, tuple[str, int]] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = _strip_comment(raw)
        if not line.strip():
            continue
        m = _LINE.match(line)
        if not m:
            raise ParseError("expected 'key = value'", line=lineno)
        key, val = m.group(1), m.group(2)
        if key not in _KEYS:
            raise ParseError(f"unknown key {key!r}", line=lineno)
        if key in values:
            raise ParseError(f"duplicate key {key!r}", line=lineno)
        values[key] = (val, lineno)
    for key in _KEYS:
        if key not in values:
            raise ParseError(f"missing key {key!r}")

    def load(key):
        val, lineno = values[key]
        try:
            return json.loads(val), lineno
        except json.JSONDecodeError as exc:
            raise ParseError(f"malformed value for {key!r}: {exc.msg}", exc.pos, lineno) from None

    dim, line_dim = load("dim")
    if not isinstance(dim, int) or isinstance(dim, bool) or dim < 1:
        raise ParseError("dim must be a positive integer", line=line_dim)
    fields, line_field = load("field")
    if not isinstance(fields, list) or not all(isinstance(s, str) for s in fields):
        raise ParseError("field must be a list of strings", line=line_field)
    if len(fields) != dim:
        raise ParseError(f"field has {len(fields)} entries, expected {dim}", line=line_field)
    domain, line_dom = load("domain")
    if (
        not isinstance(domain, list)
        or len(domain) != dim
        or not all(
            isinstance(iv, list) and len(iv) == 2 and all(isinstance(v, (int, float)) for v in iv)
            for iv in domain
        )
    ):
        raise ParseError(f"domain must be a list of {dim} [lo, hi] pairs", line=line_dom)
    preds = {}
    for key in ("init", "unsafe"):
        s, lineno = load(key)
        if not isinstance(s, str):
            raise ParseError(f"{key} must be a quoted predicate", line=lineno)
        preds[key] = (s, lineno)

    def with_line(fn, arg, lineno):
        try:
            return fn(arg, dim)
        except ParseError as exc:
            raise type(exc)(exc.message, exc.pos, lineno) from None

    field_exprs = tuple(with_line(parse_expression, s, line_field) for s in fields)
    init = with_line(parse_predicate, preds["init"][0], preds["init"][1])
    unsafe = with_line(parse_predicate, preds["unsafe"][0], preds["unsafe"][1])
    dom = tuple((float(a), float(b)) for a, b in domain)
    for a, b in dom:
        if not a < b:
            raise ProblemError(f"empty domain interval [{a}, {b}]")
    prob = SafetyProblem(dim, field_exprs, init, unsafe, dom, name)
    check_boundedness(prob, face_density)
    return prob


def problem_text(p: SafetyProblem) -> str:
    lines = [
        f"dim = {p.dim}",
        "field = " + json.dumps([to_text(e) for e in p.field]),
        "domain = " + json.dumps([list(iv) for iv in p.domain]),
        "init = " + json.dumps(predicate_text(p.init)),
        "unsafe = " + json.dumps(predicate_text(p.unsafe)),
    ]
    return "\n".join(lines) + "\n"
