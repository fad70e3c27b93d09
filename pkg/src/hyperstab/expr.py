"""Coefficient expression language.

Coefficient functions of ``(x, t)`` are written as small arithmetic
expressions, e.g. ``"exp(-t)*sin(pi*x)"``.  The grammar is deliberately tiny::

    expr    := term (('+' | '-') term)*
    term    := unary (('*' | '/') unary)*
    unary   := '-' unary | primary
    primary := NUMBER | 'x' | 't' | 'pi' | 'e'
             | FUNC '(' expr ')' | '(' expr ')'
    FUNC    := 'exp' | 'sin' | 'cos' | 'sqrt'

Evaluation is done with numpy in binary64, so ``x`` and ``t`` may be scalars
or broadcastable arrays.  Division by zero and square roots of negative
numbers raise :class:`ExprEvalError` instead of producing inf/nan.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Union

import numpy as np

__all__ = [
    "Expr", "Num", "Var", "Const", "Neg", "BinOp", "Call",
    "ExprError", "ExprSyntaxError", "ExprEvalError",
    "parse", "evaluate", "to_string", "FUNCTIONS", "CONSTANTS",
]

FUNCTIONS = {"exp": np.exp, "sin": np.sin, "cos": np.cos, "sqrt": np.sqrt}
CONSTANTS = {"pi": math.pi, "e": math.e}
VARIABLES = ("x", "t")

MAX_DEPTH = 150

_PREC = {"+": 1, "-": 1, "*": 2, "/": 2}


class ExprError(ValueError):
    """Base class for expression errors."""


class ExprSyntaxError(ExprError):
    """Malformed expression text.  ``offset`` is a byte offset into the UTF-8 input."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.message = message
        self.offset = offset


class ExprEvalError(ExprError):
    """Division by zero or a domain error during evaluation."""


# ---------------------------------------------------------------- AST nodes


class Expr:
    """Base class of the expression tree.  Nodes are immutable."""

    def __call__(self, x, t):
        return evaluate(self, x, t)

    def __str__(self):
        return to_string(self)

    @property
    def variables(self) -> frozenset:
        """Names of the free variables (subset of ``{'x', 't'}``)."""
        return frozenset(_collect_vars(self))

    def is_constant(self) -> bool:
        return not self.variables


@dataclass(frozen=True)
class Num(Expr):
    value: float

    def _ev(self, x, t):
        return np.float64(self.value)


@dataclass(frozen=True)
class Var(Expr):
    name: str

    def _ev(self, x, t):
        return x if self.name == "x" else t


@dataclass(frozen=True)
class Const(Expr):
    name: str

    def _ev(self, x, t):
        return np.float64(CONSTANTS[self.name])


@dataclass(frozen=True)
class Neg(Expr):
    operand: Expr

    def _ev(self, x, t):
        return -self.operand._ev(x, t)


@dataclass(frozen=True)
class BinOp(Expr):
    op: str
    left: Expr
    right: Expr

    def _ev(self, x, t):
        lhs = self.left._ev(x, t)
        rhs = self.right._ev(x, t)
        if self.op == "+":
            return lhs + rhs
        if self.op == "-":
            return lhs - rhs
        if self.op == "*":
            return lhs * rhs
        if np.any(rhs == 0):
            raise ExprEvalError(f"division by zero in {to_string(self)!r}")
        return lhs / rhs


@dataclass(frozen=True)
class Call(Expr):
    func: str
    arg: Expr

    def _ev(self, x, t):
        val = self.arg._ev(x, t)
        if self.func == "sqrt" and np.any(val < 0):
            raise ExprEvalError(f"sqrt of negative value in {to_string(self)!r}")
        with np.errstate(over="ignore"):
            return FUNCTIONS[self.func](val)


def _collect_vars(node: Expr):
    if isinstance(node, Var):
        yield node.name
    elif isinstance(node, Neg):
        yield from _collect_vars(node.operand)
    elif isinstance(node, BinOp):
        yield from _collect_vars(node.left)
        yield from _collect_vars(node.right)
    elif isinstance(node, Call):
        yield from _collect_vars(node.arg)


# --------------------------------------------------------------- evaluation


def evaluate(e: Expr, x, t):
    """Evaluate ``e`` at ``(x, t)``.

    Scalars in give a Python float out; arrays broadcast against each other.
    """
    scalar = np.ndim(x) == 0 and np.ndim(t) == 0
    xv = np.asarray(x, dtype=float)
    tv = np.asarray(t, dtype=float)
    with np.errstate(over="ignore", invalid="ignore"):
        out = e._ev(xv, tv)
    if scalar:
        return float(out)
    return np.broadcast_to(np.asarray(out, dtype=float), np.broadcast(xv, tv).shape).copy()


# ----------------------------------------------------------------- printing


def _prec(node: Expr) -> int:
    if isinstance(node, BinOp):
        return _PREC[node.op]
    if isinstance(node, Neg):
        return 3
    return 4


def _fmt_num(v: float) -> str:
    if not math.isfinite(v):
        raise ExprError(f"cannot print non-finite literal {v!r}")
    s = repr(float(v))
    return f"({s})" if v < 0 or s.startswith("-") else s


def to_string(e: Expr) -> str:
    """Render ``e`` as text that parses back to an identically evaluating tree."""
    if isinstance(e, Num):
        return _fmt_num(e.value)
    if isinstance(e, (Var, Const)):
        return e.name
    if isinstance(e, Call):
        return f"{e.func}({to_string(e.arg)})"
    if isinstance(e, Neg):
        inner = to_string(e.operand)
        if _prec(e.operand) < 3:
            inner = f"({inner})"
        return f"-{inner}"
    p = _PREC[e.op]
    left = to_string(e.left)
    right = to_string(e.right)
    if _prec(e.left) < p:
        left = f"({left})"
    # float arithmetic is not associative: keep explicit grouping on the right
    if _prec(e.right) <= p:
        right = f"({right})"
    sep = f" {e.op} " if e.op in "+-" else e.op
    return f"{left}{sep}{right}"


# ------------------------------------------------------------------ parsing

_TOKEN = re.compile(
    r"""
    (?P<ws>\s+)
  | (?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)
  | (?P<ident>[A-Za-z_][A-Za-z_0-9]*)
  | (?P<op>[-+*/(),])
    """,
    re.VERBOSE,
)


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.tokens = list(self._tokenize(text))
        self.pos = 0

    def _byte(self, char_offset: int) -> int:
        return len(self.text[:char_offset].encode("utf-8", errors="surrogatepass"))

    def error(self, message: str, char_offset: int):
        return ExprSyntaxError(message, self._byte(char_offset))

    def _tokenize(self, text):
        i = 0
        while i < len(text):
            m = _TOKEN.match(text, i)
            if m is None:
                raise self.error(f"unexpected character {text[i]!r}", i)
            if m.lastgroup != "ws":
                yield m.lastgroup, m.group(), i
            i = m.end()
        yield "end", "", len(text)

    def peek(self):
        return self.tokens[self.pos]

    def take(self):
        tok = self.tokens[self.pos]
        self.pos += 1
        return tok

    def expect(self, text: str):
        kind, val, off = self.take()
        if val != text or kind == "end":
            found = "end of input" if kind == "end" else repr(val)
            raise self.error(f"expected {text!r}, found {found}", off)

    def parse(self) -> Expr:
        node = self.expr(0)
        kind, val, off = self.peek()
        if kind != "end":
            raise self.error(f"unexpected token {val!r}", off)
        return node

    def _check_depth(self, depth: int, off: int):
        if depth > MAX_DEPTH:
            raise self.error("expression nested too deeply", off)

    def expr(self, depth: int) -> Expr:
        node = self.term(depth)
        while self.peek()[1] in ("+", "-") and self.peek()[0] == "op":
            _, op, off = self.take()
            depth += 1
            self._check_depth(depth, off)
            node = BinOp(op, node, self.term(depth))
        return node

    def term(self, depth: int) -> Expr:
        node = self.unary(depth)
        while self.peek()[1] in ("*", "/") and self.peek()[0] == "op":
            _, op, off = self.take()
            depth += 1
            self._check_depth(depth, off)
            node = BinOp(op, node, self.unary(depth))
        return node

    def unary(self, depth: int) -> Expr:
        kind, val, off = self.peek()
        if kind == "op" and val == "-":
            self.take()
            self._check_depth(depth + 1, off)
            return Neg(self.unary(depth + 1))
        return self.primary(depth)

    def primary(self, depth: int) -> Expr:
        kind, val, off = self.take()
        if kind == "num":
            value = float(val)
            if not math.isfinite(value):
                raise self.error(f"numeric literal {val!r} out of range", off)
            return Num(value)
        if kind == "ident":
            is_call = self.peek()[1] == "("
            if val in FUNCTIONS:
                if not is_call:
                    raise self.error(f"function {val!r} takes 1 argument, used without call", off)
                return self.call(val, off, depth)
            if val in VARIABLES or val in CONSTANTS:
                if is_call:
                    raise self.error(f"{val!r} is not a function", off)
                return Var(val) if val in VARIABLES else Const(val)
            raise self.error(f"unknown identifier {val!r}", off)
        if kind == "op" and val == "(":
            self._check_depth(depth + 1, off)
            node = self.expr(depth + 1)
            self.expect(")")
            return node
        found = "end of input" if kind == "end" else repr(val)
        raise self.error(f"unexpected {found}", off)

    def call(self, name: str, off: int, depth: int) -> Expr:
        self.expect("(")
        self._check_depth(depth + 1, off)
        if self.peek()[1] == ")":
            raise self.error(f"function {name!r} takes 1 argument, got 0", self.peek()[2])
        arg = self.expr(depth + 1)
        nargs = 1
        while self.peek()[1] == ",":
            self.take()
            self.expr(depth + 1)
            nargs += 1
        if nargs != 1:
            raise self.error(f"function {name!r} takes 1 argument, got {nargs}", off)
        self.expect(")")
        return Call(name, arg)


def parse(text: Union[str, bytes]) -> Expr:
    """Parse expression text into a tree.

    Raises :class:`ExprSyntaxError` (with a byte offset) for malformed input,
    unknown identifiers, and wrong argument counts.
    """
    if isinstance(text, (bytes, bytearray)):
        try:
            text = bytes(text).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ExprSyntaxError("invalid UTF-8", exc.start) from None
    if not isinstance(text, str):
        raise TypeError(f"expected str or bytes, got {type(text).__name__}")
    return _Parser(text).parse()
