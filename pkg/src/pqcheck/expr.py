"""Scalar expressions over chart coordinates.

A small recursive-descent parser produces an immutable AST; :func:`eval_jet`
evaluates it together with its coordinate gradient using forward-mode dual
numbers (one seed direction per coordinate, all seeds carried at once).

Points may be a single point of shape ``(m,)`` or a batch of shape
``(..., m)``; values then have shape ``(...)`` and gradients ``(..., m)``.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

FUNCTIONS = ("sin", "cos", "tan", "exp", "log", "sqrt", "abs", "atan")


class ExprError(ValueError):
    """Base class for expression errors."""


class ExprSyntaxError(ExprError):
    def __init__(self, message: str, position: int):
        super().__init__(f"{message} at position {position}")
        self.position = position


class ExprDomainError(ExprError):
    """Raised when evaluation leaves the domain of a function or is non-finite."""


# --------------------------------------------------------------------------
# AST


@dataclass(frozen=True)
class Num:
    value: float

    def __post_init__(self):
        if not math.isfinite(self.value) or self.value < 0:
            raise ValueError(f"literal must be finite and non-negative, got {self.value!r}")


@dataclass(frozen=True)
class Var:
    name: str
    index: int


@dataclass(frozen=True)
class Neg:
    arg: "Node"


@dataclass(frozen=True)
class BinOp:
    op: str  # one of + - * / ^
    left: "Node"
    right: "Node"


@dataclass(frozen=True)
class Call:
    func: str
    arg: "Node"


Node = Union[Num, Var, Neg, BinOp, Call]


@dataclass(frozen=True)
class ScalarExpr:
    """Parsed expression bound to an ordered tuple of coordinate names."""

    ast: Node
    coords: tuple[str, ...]

    @property
    def dim(self) -> int:
        return len(self.coords)

    def __str__(self) -> str:
        return format_expr(self)


# --------------------------------------------------------------------------
# Parsing

_TOKEN_RE = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<ident>[A-Za-z_][A-Za-z0-9_]*)"
    r"|(?P<op>[-+*/^(),]))"
)


def _tokenize(text: str) -> list[tuple[str, str, int]]:
    tokens = []
    pos = 0
    while pos < len(text):
        if text[pos:].strip() == "":
            break
        m = _TOKEN_RE.match(text, pos)
        if m is None or m.end() == pos:
            stripped = len(text[pos:]) - len(text[pos:].lstrip())
            raise ExprSyntaxError(f"unexpected character {text[pos + stripped]!r}", pos + stripped)
        kind = m.lastgroup
        tokens.append((kind, m.group(kind), m.start(kind)))
        pos = m.end()
    tokens.append(("end", "", len(text)))
    return tokens


class _Parser:
    def __init__(self, text: str, coords: Sequence[str]):
        self.text = text
        self.coords = {name: i for i, name in enumerate(coords)}
        self.tokens = _tokenize(text)
        self.i = 0

    def peek(self):
        return self.tokens[self.i]

    def take(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect(self, value: str):
        kind, val, pos = self.take()
        if val != value or kind != "op":
            found = "end of input" if kind == "end" else repr(val)
            raise ExprSyntaxError(f"expected {value!r}, found {found}", pos)

    def parse(self) -> Node:
        node = self.expr()
        kind, val, pos = self.peek()
        if kind != "end":
            raise ExprSyntaxError(f"unexpected token {val!r}", pos)
        return node

    def expr(self) -> Node:
        node = self.term()
        while self.peek()[1] in ("+", "-") and self.peek()[0] == "op":
            op = self.take()[1]
            node = BinOp(op, node, self.term())
        return node

    def term(self) -> Node:
        node = self.factor()
        while self.peek()[1] in ("*", "/") and self.peek()[0] == "op":
            op = self.take()[1]
            node = BinOp(op, node, self.factor())
        return node

    def factor(self) -> Node:
        kind, val, _ = self.peek()
        if kind == "op" and val == "-":
            self.take()
            return Neg(self.factor())
        return self.power()

    def power(self) -> Node:
        base = self.atom()
        kind, val, _ = self.peek()
        if kind == "op" and val == "^":
            self.take()
            return BinOp("^", base, self.factor())
        return base

    def atom(self) -> Node:
        kind, val, pos = self.take()
        if kind == "num":
            return Num(float(val))
        if kind == "ident":
            if self.peek()[1] == "(" and self.peek()[0] == "op":
                if val not in FUNCTIONS:
                    raise ExprSyntaxError(f"unknown function {val!r}", pos)
                self.take()
                args = [self.expr()]
                while self.peek()[1] == ",":
                    self.take()
                    args.append(self.expr())
                self.expect(")")
                if len(args) != 1:
                    raise ExprSyntaxError(f"function {val!r} takes 1 argument, got {len(args)}", pos)
                return Call(val, args[0])
            if val in FUNCTIONS:
                raise ExprSyntaxError(f"function {val!r} requires an argument", pos)
            if val not in self.coords:
                raise ExprSyntaxError(f"unknown identifier {val!r}", pos)
            return Var(val, self.coords[val])
        if kind == "op" and val == "(":
            node = self.expr()
            self.expect(")")
            return node
        found = "end of input" if kind == "end" else repr(val)
        raise ExprSyntaxError(f"unexpected {found}", pos)


def parse_expr(text: str, coords: Sequence[str]) -> ScalarExpr:
    """Parse ``text`` into a :class:`ScalarExpr` over ``coords``.

    Precedence: ``^`` binds tighter than unary minus, which binds tighter than
    ``* /``, then ``+ -``; ``^`` is right-associative.
    """
    coords = tuple(coords)
    if not coords:
        raise ValueError("coordinate list must be nonempty")
    if len(set(coords)) != len(coords):
        raise ValueError(f"coordinate names must be distinct: {coords}")
    for name in coords:
        if not re.fullmatch(r"[A-Za-z_][A-Za-z0-9_]*", name) or name in FUNCTIONS:
            raise ValueError(f"invalid coordinate name {name!r}")
    if not text or not text.strip():
        raise ExprSyntaxError("empty expression", 0)
    return ScalarExpr(_Parser(text, coords).parse(), coords)


# --------------------------------------------------------------------------
# Formatting

_PREC = {"+": 1, "-": 1, "*": 2, "/": 2}


def _prec(node: Node) -> int:
    if isinstance(node, BinOp):
        return 4 if node.op == "^" else _PREC[node.op]
    if isinstance(node, Neg):
        return 3
    return 5


def _fmt_num(v: float) -> str:
    if v.is_integer() and v < 1e15:
        return str(int(v))
    return repr(v)


def _fmt(node: Node) -> str:
    if isinstance(node, Num):
        return _fmt_num(node.value)
    if isinstance(node, Var):
        return node.name
    if isinstance(node, Call):
        return f"{node.func}({_fmt(node.arg)})"
    if isinstance(node, Neg):
        inner = _fmt(node.arg)
        return f"-{inner}" if _prec(node.arg) >= 3 else f"-({inner})"
    op = node.op
    left, right = _fmt(node.left), _fmt(node.right)
    if op == "^":
        if _prec(node.left) < 5:
            left = f"({left})"
        if _prec(node.right) < 3:
            right = f"({right})"
        return f"{left}^{right}"
    p = _PREC[op]
    if _prec(node.left) < p:
        left = f"({left})"
    if _prec(node.right) <= p:
        right = f"({right})"
    sep = f" {op} " if p == 1 else op
    return f"{left}{sep}{right}"


def format_expr(e: ScalarExpr | Node) -> str:
    """Render an expression so that ``parse_expr`` reproduces the same tree."""
    return _fmt(e.ast if isinstance(e, ScalarExpr) else e)


# --------------------------------------------------------------------------
# Programmatic construction (used by the scene catalog)


def const(v: float) -> Node:
    return Neg(Num(-float(v))) if v < 0 else Num(float(v))


def add(a: Node, b: Node) -> Node:
    return BinOp("+", a, b)


def sub(a: Node, b: Node) -> Node:
    return BinOp("-", a, b)


def mul(a: Node, b: Node) -> Node:
    return BinOp("*", a, b)


def div(a: Node, b: Node) -> Node:
    return BinOp("/", a, b)


def power(a: Node, b: Node | float) -> Node:
    return BinOp("^", a, b if not isinstance(b, (int, float)) else const(b))


def total(terms: Sequence[Node]) -> Node:
    node = terms[0]
    for t in terms[1:]:
        node = add(node, t)
    return node


def is_constant(node: Node) -> bool:
    if isinstance(node, Num):
        return True
    if isinstance(node, Var):
        return False
    if isinstance(node, (Neg, Call)):
        return is_constant(node.arg)
    return is_constant(node.left) and is_constant(node.right)


def free_variables(e: ScalarExpr | Node) -> set[str]:
    """Names of the coordinates an expression actually references."""
    node = e.ast if isinstance(e, ScalarExpr) else e
    if isinstance(node, Var):
        return {node.name}
    if isinstance(node, Num):
        return set()
    if isinstance(node, (Neg, Call)):
        return free_variables(node.arg)
    return free_variables(node.left) | free_variables(node.right)


# --------------------------------------------------------------------------
# Forward-mode evaluation


@dataclass(frozen=True)
class Jet:
    """Value of a scalar field together with its coordinate gradient."""

    value: np.ndarray
    gradient: np.ndarray

    def __add__(self, other: Jet) -> Jet:
        return Jet(self.value + other.value, self.gradient + other.gradient)

    def __sub__(self, other: Jet) -> Jet:
        return Jet(self.value - other.value, self.gradient - other.gradient)

    def __neg__(self) -> Jet:
        return Jet(-self.value, -self.gradient)

    def __mul__(self, other: Jet) -> Jet:
        return Jet(
            self.value * other.value,
            self.gradient * other.value[..., None] + self.value[..., None] * other.gradient,
        )

    def __truediv__(self, other: Jet) -> Jet:
        q = self.value / other.value
        return Jet(q, (self.gradient - q[..., None] * other.gradient) / other.value[..., None])

    def chain(self, f, df) -> Jet:
        """Apply a scalar function with known derivative ``df``."""
        return Jet(f(self.value), df(self.value)[..., None] * self.gradient)

    def powc(self, n: float) -> Jet:
        """Raise to a constant power."""
        v = self.value
        if n == 0:
            return Jet(np.ones_like(v), np.zeros_like(self.gradient))
        return Jet(v**n, (n * v ** (n - 1))[..., None] * self.gradient)


def _check_domain(cond: np.ndarray, func: str):
    if np.any(cond):
        raise ExprDomainError(f"argument outside the domain of {func}")


_DERIVS = {
    "sin": (np.sin, np.cos),
    "cos": (np.cos, lambda v: -np.sin(v)),
    "tan": (np.tan, lambda v: 1.0 / np.cos(v) ** 2),
    "exp": (np.exp, np.exp),
    "log": (np.log, lambda v: 1.0 / v),
    "sqrt": (np.sqrt, lambda v: 0.5 / np.sqrt(v)),
    "abs": (np.abs, np.sign),
    "atan": (np.arctan, lambda v: 1.0 / (1.0 + v * v)),
}


def _const_value(node: Node) -> float:
    return float(_value(node, np.zeros(0)))


def _jet(node: Node, x: np.ndarray) -> Jet:
    shape = x.shape[:-1]
    if isinstance(node, Num):
        return Jet(np.full(shape, node.value), np.zeros(x.shape))
    if isinstance(node, Var):
        grad = np.zeros(x.shape)
        grad[..., node.index] = 1.0
        return Jet(x[..., node.index].copy(), grad)
    if isinstance(node, Neg):
        return -_jet(node.arg, x)
    if isinstance(node, Call):
        a = _jet(node.arg, x)
        if node.func == "log":
            _check_domain(a.value <= 0, "log")
        elif node.func == "sqrt":
            _check_domain(a.value <= 0, "sqrt")
        f, df = _DERIVS[node.func]
        return a.chain(f, df)
    a = _jet(node.left, x)
    if node.op == "^":
        if is_constant(node.right):
            n = _const_value(node.right)
            if not float(n).is_integer():
                _check_domain(a.value < 0, "non-integer power")
            return a.powc(n)
        b = _jet(node.right, x)
        _check_domain(a.value <= 0, "variable-exponent power")
        log_a = a.chain(np.log, lambda v: 1.0 / v)
        return (b * log_a).chain(np.exp, np.exp)
    b = _jet(node.right, x)
    if node.op == "+":
        return a + b
    if node.op == "-":
        return a - b
    if node.op == "*":
        return a * b
    return a / b


def _as_points(e: ScalarExpr, point) -> np.ndarray:
    x = np.asarray(point, dtype=float)
    if x.ndim == 0 or x.shape[-1] != e.dim:
        raise ValueError(f"point dimension {x.shape[-1:] or 0} does not match chart dimension {e.dim}")
    return x


def eval_jet(e: ScalarExpr, point) -> Jet:
    """Evaluate ``e`` and its gradient at ``point`` (shape ``(..., m)``)."""
    x = _as_points(e, point)
    with np.errstate(all="ignore"):
        jet = _jet(e.ast, x)
    if not (np.all(np.isfinite(jet.value)) and np.all(np.isfinite(jet.gradient))):
        raise ExprDomainError(f"non-finite result evaluating {format_expr(e)!r}")
    return jet


def _value(node: Node, x: np.ndarray):
    if isinstance(node, Num):
        return node.value
    if isinstance(node, Var):
        return x[..., node.index]
    if isinstance(node, Neg):
        return -_value(node.arg, x)
    if isinstance(node, Call):
        a = _value(node.arg, x)
        if node.func == "log":
            _check_domain(np.asarray(a) <= 0, "log")
        elif node.func == "sqrt":
            _check_domain(np.asarray(a) < 0, "sqrt")
        return _DERIVS[node.func][0](a)
    a = _value(node.left, x)
    if node.op == "^":
        if is_constant(node.right):
            n = float(_value(node.right, x))
            if not n.is_integer():
                _check_domain(np.asarray(a) < 0, "non-integer power")
            return np.power(a, n)
        b = _value(node.right, x)
        _check_domain(np.asarray(a) <= 0, "variable-exponent power")
        return np.power(a, b)
    b = _value(node.right, x)
    if node.op == "+":
        return a + b
    if node.op == "-":
        return a - b
    if node.op == "*":
        return a * b
    return a / b


def evaluate(e: ScalarExpr, point) -> np.ndarray:
    """Value-only evaluation (no derivatives)."""
    x = np.asarray(point, dtype=float)
    if e.dim:
        x = _as_points(e, x)
    with np.errstate(all="ignore"):
        out = np.asarray(_value(e.ast, x), dtype=float)
    if e.dim:
        out = np.broadcast_to(out, x.shape[:-1]).copy()
    if not np.all(np.isfinite(out)):
        raise ExprDomainError(f"non-finite result evaluating {format_expr(e)!r}")
    return out
