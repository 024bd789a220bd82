"""Tiny expression language for problem coefficients.

Grammar (ASCII only, whitespace insignificant)::

    expr   := term (('+' | '-') term)*          left associative
    term   := unary (('*' | '/') unary)*        left associative
    unary  := '-' unary | power
    power  := atom ('^' unary)?                 right associative
    atom   := NUMBER | NAME | NAME '(' expr (',' expr)* ')' | '(' expr ')'

so '^' binds tighter than unary minus, which binds tighter than '*' and
'/'.  Permitted variable names are a subset of {x, y, z, u}; the function
set is fixed (sqrt, exp, log, sin, cos, tan, tanh, abs, pow).

Expressions are immutable after parsing and safe to share across workers.
`evaluate` walks the tree with exact scalar semantics and raises
`DomainError` naming the offending node; `compile_fn` emits a vectorised
numpy callable (NaN/inf instead of exceptions) for the hot numeric paths.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

PERMITTED_VARIABLES = ("x", "y", "z", "u")

# function name -> arity
FUNCTIONS = {
    "sqrt": 1,
    "exp": 1,
    "log": 1,
    "sin": 1,
    "cos": 1,
    "tan": 1,
    "tanh": 1,
    "abs": 1,
    "pow": 2,
}


class ParseError(ValueError):
    """Syntax error, unknown identifier or arity mismatch; carries the byte offset."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at offset {offset})")
        self.offset = offset


class EvalError(ValueError):
    """Base class for evaluation failures."""


class DomainError(EvalError):
    """Evaluation hit a point outside a function's domain.

    `node_text` is the printed form of the offending sub-expression and
    `offset` its position in the original source (-1 for synthesized nodes).
    """

    def __init__(self, message: str, node):
        self.node_text = to_string_node(node)
        self.offset = node.offset
        super().__init__(f"{message} in '{self.node_text}' (offset {self.offset})")


@dataclass(frozen=True)
class Num:
    value: float
    offset: int = -1


@dataclass(frozen=True)
class Var:
    name: str
    offset: int = -1


@dataclass(frozen=True)
class Unary:
    operand: object
    offset: int = -1
    # only unary minus exists


@dataclass(frozen=True)
class Binary:
    op: str  # one of + - * / ^
    left: object
    right: object
    offset: int = -1


@dataclass(frozen=True)
class Call:
    fn: str
    args: tuple
    offset: int = -1


@dataclass(frozen=True)
class Expression:
    """Parsed coefficient function of up to three named variables."""

    root: object
    variables: tuple[str, ...]

    def __str__(self) -> str:
        return to_string(self)


_TOKEN_RE = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<name>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op>[-+*/^(),]))"
)


def _tokenize(text: str) -> list[tuple[str, str, int]]:
    tokens = []
    pos = 0
    n = len(text)
    while pos < n:
        m = _TOKEN_RE.match(text, pos)
        if m is None or m.end() == pos:
            # skip leading whitespace manually so the offset points at the culprit
            stripped = pos
            while stripped < n and text[stripped].isspace():
                stripped += 1
            if stripped == n:
                break
            raise ParseError(f"unexpected character {text[stripped]!r}", stripped)
        kind = m.lastgroup
        tokens.append((kind, m.group(kind), m.start(kind)))
        pos = m.end()
    tokens.append(("end", "", n))
    return tokens


class _Parser:
    def __init__(self, tokens, allowed_vars):
        self.tokens = tokens
        self.i = 0
        self.allowed = tuple(allowed_vars)

    def peek(self):
        return self.tokens[self.i]

    def advance(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect_op(self, op):
        kind, val, off = self.peek()
        if kind != "op" or val != op:
            raise ParseError(f"expected {op!r}", off)
        return self.advance()

    def parse_expr(self):
        node = self.parse_term()
        while True:
            kind, val, off = self.peek()
            if kind == "op" and val in "+-":
                self.advance()
                rhs = self.parse_term()
                node = Binary(val, node, rhs, off)
            else:
                return node

    def parse_term(self):
        node = self.parse_unary()
        while True:
            kind, val, off = self.peek()
            if kind == "op" and val in "*/":
                self.advance()
                rhs = self.parse_unary()
                node = Binary(val, node, rhs, off)
            else:
                return node

    def parse_unary(self):
        kind, val, off = self.peek()
        if kind == "op" and val == "-":
            self.advance()
            return Unary(self.parse_unary(), off)
        return self.parse_power()

    def parse_power(self):
        base = self.parse_atom()
        kind, val, off = self.peek()
        if kind == "op" and val == "^":
            self.advance()
            expo = self.parse_unary()  # right associative, minus allowed in exponent
            return Binary("^", base, expo, off)
        return base

    def parse_atom(self):
        kind, val, off = self.advance()
        if kind == "num":
            return Num(float(val), off)
        if kind == "name":
            nxt_kind, nxt_val, _ = self.peek()
            if nxt_kind == "op" and nxt_val == "(":
                if val not in FUNCTIONS:
                    raise ParseError(f"unknown function {val!r}", off)
                self.advance()
                args = [self.parse_expr()]
                while True:
                    k, v, o = self.peek()
                    if k == "op" and v == ",":
                        self.advance()
                        args.append(self.parse_expr())
                    else:
                        break
                self.expect_op(")")
                if len(args) != FUNCTIONS[val]:
                    raise ParseError(
                        f"function {val!r} takes {FUNCTIONS[val]} argument(s), got {len(args)}",
                        off,
                    )
                return Call(val, tuple(args), off)
            if val in self.allowed:
                return Var(val, off)
            raise ParseError(f"unknown identifier {val!r}", off)
        if kind == "op" and val == "(":
            node = self.parse_expr()
            self.expect_op(")")
            return node
        raise ParseError("expected a number, name or '('", off)


def parse(text: str, allowed_vars) -> Expression:
    """Parse `text` into an Expression over the given variable names."""
    if not text or not text.strip():
        raise ParseError("empty expression", 0)
    if not text.isascii():
        bad = next(i for i, ch in enumerate(text) if not ch.isascii())
        raise ParseError("non-ASCII input", bad)
    allowed = tuple(allowed_vars)
    for name in allowed:
        if name not in PERMITTED_VARIABLES:
            raise ValueError(f"variable {name!r} not in permitted set {PERMITTED_VARIABLES}")
    parser = _Parser(_tokenize(text), allowed)
    root = parser.parse_expr()
    kind, _, off = parser.peek()
    if kind != "end":
        raise ParseError("trailing input", off)
    return Expression(root, allowed)


# ---------------------------------------------------------------------------
# evaluation


def _pow_scalar(base: float, expo: float, node) -> float:
    if expo == int(expo) and abs(expo) < 2**31:
        n = int(expo)
        if base == 0.0 and n < 0:
            raise DomainError("zero raised to a negative power", node)
        try:
            return float(base**n)
        except OverflowError:
            raise DomainError("overflow in power", node) from None
    if base <= 0.0:
        raise DomainError("non-integer power of a non-positive base", node)
    try:
        return math.exp(expo * math.log(base))
    except OverflowError:
        raise DomainError("overflow in power", node) from None


def _eval_node(node, bindings: Mapping[str, float]) -> float:
    if isinstance(node, Num):
        return node.value
    if isinstance(node, Var):
        try:
            return float(bindings[node.name])
        except KeyError:
            raise EvalError(f"unbound variable {node.name!r}") from None
    if isinstance(node, Unary):
        return -_eval_node(node.operand, bindings)
    if isinstance(node, Binary):
        a = _eval_node(node.left, bindings)
        b = _eval_node(node.right, bindings)
        if node.op == "+":
            return a + b
        if node.op == "-":
            return a - b
        if node.op == "*":
            return a * b
        if node.op == "/":
            if b == 0.0:
                raise DomainError("division by zero", node)
            return a / b
        return _pow_scalar(a, b, node)
    # Call
    args = [_eval_node(arg, bindings) for arg in node.args]
    fn = node.fn
    a = args[0]
    if fn == "sqrt":
        if a < 0.0:
            raise DomainError("sqrt of a negative number", node)
        return math.sqrt(a)
    if fn == "exp":
        try:
            return math.exp(a)
        except OverflowError:
            raise DomainError("overflow in exp", node) from None
    if fn == "log":
        if a <= 0.0:
            raise DomainError("log of a non-positive number", node)
        return math.log(a)
    if fn == "sin":
        return math.sin(a)
    if fn == "cos":
        return math.cos(a)
    if fn == "tan":
        return math.tan(a)
    if fn == "tanh":
        return math.tanh(a)
    if fn == "abs":
        return abs(a)
    # pow
    return _pow_scalar(a, args[1], node)


def evaluate(e: Expression, bindings: Mapping[str, float]) -> float:
    """Evaluate at a point; raises DomainError identifying the offending node."""
    value = _eval_node(e.root, bindings)
    if not math.isfinite(value):
        raise DomainError("non-finite result", e.root)
    return value


# ---------------------------------------------------------------------------
# printing

_PREC = {"+": 1, "-": 1, "*": 2, "/": 2, "neg": 3, "^": 4}


def to_string_node(node, parent_prec: int = 0) -> str:
    if isinstance(node, Num):
        v = node.value
        if v == int(v) and abs(v) < 1e16:
            s = str(int(v))
        else:
            s = repr(v)
        if v < 0 and parent_prec > 0:
            return f"({s})"
        return s
    if isinstance(node, Var):
        return node.name
    if isinstance(node, Unary):
        s = "-" + to_string_node(node.operand, _PREC["neg"])
        return f"({s})" if parent_prec > _PREC["neg"] else s
    if isinstance(node, Binary):
        p = _PREC[node.op]
        if node.op == "^":
            s = f"{to_string_node(node.left, p + 1)}^{to_string_node(node.right, p)}"
        else:
            # left associative: right child needs strictly higher precedence
            s = (
                f"{to_string_node(node.left, p)} {node.op} "
                f"{to_string_node(node.right, p + 1)}"
            )
        return f"({s})" if p < parent_prec else s
    args = ", ".join(to_string_node(a) for a in node.args)
    return f"{node.fn}({args})"


def to_string(e: Expression) -> str:
    return to_string_node(e.root)


# ---------------------------------------------------------------------------
# differentiation with light constant folding


def _is_num(node, value=None):
    return isinstance(node, Num) and (value is None or node.value == value)


def _add(a, b):
    if _is_num(a, 0.0):
        return b
    if _is_num(b, 0.0):
        return a
    if _is_num(a) and _is_num(b):
        return Num(a.value + b.value)
    return Binary("+", a, b)


def _sub(a, b):
    if _is_num(b, 0.0):
        return a
    if _is_num(a) and _is_num(b):
        return Num(a.value - b.value)
    if _is_num(a, 0.0):
        return _neg(b)
    return Binary("-", a, b)


def _neg(a):
    if _is_num(a):
        return Num(-a.value)
    return Unary(a)


def _mul(a, b):
    if _is_num(a, 0.0) or _is_num(b, 0.0):
        return Num(0.0)
    if _is_num(a, 1.0):
        return b
    if _is_num(b, 1.0):
        return a
    if _is_num(a) and _is_num(b):
        return Num(a.value * b.value)
    return Binary("*", a, b)


def _div(a, b):
    if _is_num(a, 0.0):
        return Num(0.0)
    if _is_num(b, 1.0):
        return a
    return Binary("/", a, b)


def _pow(a, b):
    if _is_num(b, 1.0):
        return a
    if _is_num(b, 0.0):
        return Num(1.0)
    return Binary("^", a, b)


def _diff_node(node, var: str):
    if isinstance(node, Num):
        return Num(0.0)
    if isinstance(node, Var):
        return Num(1.0) if node.name == var else Num(0.0)
    if isinstance(node, Unary):
        return _neg(_diff_node(node.operand, var))
    if isinstance(node, Binary):
        a, b = node.left, node.right
        da, db = _diff_node(a, var), _diff_node(b, var)
        if node.op == "+":
            return _add(da, db)
        if node.op == "-":
            return _sub(da, db)
        if node.op == "*":
            return _add(_mul(da, b), _mul(a, db))
        if node.op == "/":
            return _div(_sub(_mul(da, b), _mul(a, db)), _pow(b, Num(2.0)))
        # power
        if _is_num(b):
            n = b.value
            return _mul(_mul(Num(n), _pow(a, Num(n - 1.0))), da)
        # general u^v = exp(v log u)
        term = _add(_mul(db, Call("log", (a,))), _mul(b, _div(da, a)))
        return _mul(_pow(a, b), term)
    # Call
    u = node.args[0]
    du = _diff_node(u, var)
    fn = node.fn
    if fn == "sqrt":
        return _div(du, _mul(Num(2.0), Call("sqrt", (u,))))
    if fn == "exp":
        return _mul(du, Call("exp", (u,)))
    if fn == "log":
        return _div(du, u)
    if fn == "sin":
        return _mul(du, Call("cos", (u,)))
    if fn == "cos":
        return _neg(_mul(du, Call("sin", (u,))))
    if fn == "tan":
        return _mul(du, _add(Num(1.0), _pow(Call("tan", (u,)), Num(2.0))))
    if fn == "tanh":
        return _mul(du, _sub(Num(1.0), _pow(Call("tanh", (u,)), Num(2.0))))
    if fn == "abs":
        # sign(u) * du away from zero; at u == 0 this divides by zero -> DomainError
        return _mul(_div(u, Call("abs", (u,))), du)
    # pow(u, v): same as u^v
    v = node.args[1]
    dv = _diff_node(v, var)
    if _is_num(v):
        n = v.value
        return _mul(_mul(Num(n), _pow(u, Num(n - 1.0))), du)
    term = _add(_mul(dv, Call("log", (u,))), _mul(v, _div(du, u)))
    return _mul(_pow(u, v), term)


def differentiate(e: Expression, var: str) -> Expression:
    """Symbolic derivative with respect to `var`."""
    if var not in e.variables:
        raise ValueError(f"{var!r} is not a variable of this expression")
    return Expression(_diff_node(e.root, var), e.variables)


# ---------------------------------------------------------------------------
# numpy compilation (fast path; NaN/inf semantics instead of exceptions)


def _emit(node) -> str:
    if isinstance(node, Num):
        return repr(node.value)
    if isinstance(node, Var):
        return node.name
    if isinstance(node, Unary):
        return f"(-{_emit(node.operand)})"
    if isinstance(node, Binary):
        if node.op == "^":
            return _emit_pow(node.left, node.right)
        return f"({_emit(node.left)} {node.op} {_emit(node.right)})"
    if node.fn == "pow":
        return _emit_pow(node.args[0], node.args[1])
    np_fn = "np.abs" if node.fn == "abs" else f"np.{node.fn}"
    return f"{np_fn}({_emit(node.args[0])})"


def _emit_pow(base, expo) -> str:
    if isinstance(expo, Num) and expo.value == int(expo.value) and abs(expo.value) < 2**31:
        return f"({_emit(base)} ** {int(expo.value)})"
    return f"({_emit(base)} ** {_emit(expo)})"


def compile_fn(e: Expression) -> Callable[..., np.ndarray]:
    """Compile to a numpy callable taking the expression's variables as keywords.

    Out-of-domain points yield NaN/inf rather than raising; callers are
    expected to scan results.  Scalar inputs are promoted to float64 arrays
    so that negative bases with fractional exponents give NaN, matching the
    array branch.
    """
    params = ", ".join(e.variables) if e.variables else "_unused=None"
    src = f"lambda {params}: {_emit(e.root)}"
    raw = eval(src, {"np": np, "__builtins__": {}})  # AST is whitelisted, no injection path

    def fn(**kwargs):
        coerced = {k: np.asarray(v, dtype=np.float64) for k, v in kwargs.items()}
        with np.errstate(all="ignore"):
            out = raw(**coerced) if e.variables else raw()
        return np.asarray(out, dtype=np.float64)

    fn.source = src
    return fn
