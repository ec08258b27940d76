"""Arithmetic expressions in ``t, x1, x2`` with symbolic differentiation.

Grammar (recursive descent)::

    expr   := term (('+' | '-') term)*
    term   := unary (('*' | '/') unary)*
    unary  := ('+' | '-') unary | atom
    atom   := NUMBER | NAME | NAME '(' expr ')' | '(' expr ')'

Names are the variables ``t, x1, x2``, the constant ``pi`` and the
functions ``sin, cos, exp``.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass

import numpy as np

VARIABLES = ("t", "x1", "x2")
FUNCTIONS = {"sin": np.sin, "cos": np.cos, "exp": np.exp}
CONSTANTS = {"pi": math.pi}

_TOKEN = re.compile(r"\s*(?:(\d+\.\d*(?:[eE][+-]?\d+)?|\.\d+(?:[eE][+-]?\d+)?|\d+(?:[eE][+-]?\d+)?)"
                    r"|([A-Za-z_][A-Za-z_0-9]*)|(.))")


class ExpressionError(ValueError):
    pass


@dataclass(frozen=True)
class Num:
    value: float


@dataclass(frozen=True)
class Var:
    name: str


@dataclass(frozen=True)
class Neg:
    arg: object


@dataclass(frozen=True)
class Bin:
    op: str
    left: object
    right: object


@dataclass(frozen=True)
class Call:
    fn: str
    arg: object


def _tokens(text):
    out = []
    pos = 0
    text = text.strip()
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if m is None or m.end() == pos:
            break
        num, name, sym = m.groups()
        if num is not None:
            out.append(("num", float(num)))
        elif name is not None:
            out.append(("name", name))
        elif sym is not None and not sym.isspace():
            if sym not in "+-*/()":
                raise ExpressionError(f"unexpected character '{sym}' in '{text}'")
            out.append(("sym", sym))
        pos = m.end()
    return out


class _Parser:
    def __init__(self, text):
        self.text = text
        self.toks = _tokens(text)
        self.i = 0

    def peek(self):
        return self.toks[self.i] if self.i < len(self.toks) else (None, None)

    def take(self, kind=None, value=None):
        tok = self.peek()
        if tok[0] is None or (kind and tok[0] != kind) or (value and tok[1] != value):
            want = value or kind or "token"
            raise ExpressionError(f"expected {want} in '{self.text}'")
        self.i += 1
        return tok

    def parse(self):
        if not self.toks:
            raise ExpressionError("empty expression")
        node = self.expr()
        if self.i != len(self.toks):
            raise ExpressionError(f"trailing input in '{self.text}'")
        return node

    def expr(self):
        node = self.term()
        while self.peek() in (("sym", "+"), ("sym", "-")):
            op = self.take()[1]
            node = Bin(op, node, self.term())
        return node

    def term(self):
        node = self.unary()
        while self.peek() in (("sym", "*"), ("sym", "/")):
            op = self.take()[1]
            node = Bin(op, node, self.unary())
        return node

    def unary(self):
        if self.peek() == ("sym", "-"):
            self.take()
            return Neg(self.unary())
        if self.peek() == ("sym", "+"):
            self.take()
            return self.unary()
        return self.atom()

    def atom(self):
        kind, val = self.peek()
        if kind == "num":
            self.take()
            return Num(val)
        if kind == "name":
            self.take()
            if val in FUNCTIONS:
                self.take("sym", "(")
                arg = self.expr()
                self.take("sym", ")")
                return Call(val, arg)
            if val in CONSTANTS:
                return Num(CONSTANTS[val])
            if val in VARIABLES:
                return Var(val)
            raise ExpressionError(f"unknown name '{val}' in '{self.text}'")
        if (kind, val) == ("sym", "("):
            self.take()
            node = self.expr()
            self.take("sym", ")")
            return node
        raise ExpressionError(f"unexpected end or symbol in '{self.text}'")


def parse(text) -> object:
    if isinstance(text, (int, float)):
        return Num(float(text))
    return _Parser(str(text)).parse()


# ---------------------------------------------------------------------------
# evaluation, simplification and differentiation
# ---------------------------------------------------------------------------

def evaluate(node, env):
    if isinstance(node, Num):
        return node.value
    if isinstance(node, Var):
        return env[node.name]
    if isinstance(node, Neg):
        return -evaluate(node.arg, env)
    if isinstance(node, Call):
        return FUNCTIONS[node.fn](evaluate(node.arg, env))
    a, b = evaluate(node.left, env), evaluate(node.right, env)
    if node.op == "+":
        return a + b
    if node.op == "-":
        return a - b
    if node.op == "*":
        return a * b
    return a / b


def _is(node, value):
    return isinstance(node, Num) and node.value == value


def _add(a, b):
    if _is(a, 0.0):
        return b
    if _is(b, 0.0):
        return a
    if isinstance(a, Num) and isinstance(b, Num):
        return Num(a.value + b.value)
    return Bin("+", a, b)


def _sub(a, b):
    if _is(b, 0.0):
        return a
    if _is(a, 0.0):
        return _neg(b)
    if isinstance(a, Num) and isinstance(b, Num):
        return Num(a.value - b.value)
    return Bin("-", a, b)


def _mul(a, b):
    if _is(a, 0.0) or _is(b, 0.0):
        return Num(0.0)
    if _is(a, 1.0):
        return b
    if _is(b, 1.0):
        return a
    if isinstance(a, Num) and isinstance(b, Num):
        return Num(a.value * b.value)
    return Bin("*", a, b)


def _div(a, b):
    if _is(a, 0.0):
        return Num(0.0)
    if _is(b, 1.0):
        return a
    return Bin("/", a, b)


def _neg(a):
    if isinstance(a, Num):
        return Num(-a.value)
    if isinstance(a, Neg):
        return a.arg
    return Neg(a)


def diff(node, var):
    """Symbolic derivative with respect to ``var``."""
    if isinstance(node, Num):
        return Num(0.0)
    if isinstance(node, Var):
        return Num(1.0 if node.name == var else 0.0)
    if isinstance(node, Neg):
        return _neg(diff(node.arg, var))
    if isinstance(node, Call):
        inner = diff(node.arg, var)
        if node.fn == "sin":
            outer = Call("cos", node.arg)
        elif node.fn == "cos":
            outer = Neg(Call("sin", node.arg))
        else:
            outer = node
        return _mul(outer, inner)
    a, b = node.left, node.right
    da, db = diff(a, var), diff(b, var)
    if node.op == "+":
        return _add(da, db)
    if node.op == "-":
        return _sub(da, db)
    if node.op == "*":
        return _add(_mul(da, b), _mul(a, db))
    # quotient rule
    return _div(_sub(_mul(da, b), _mul(a, db)), _mul(b, b))


def to_text(node):
    if isinstance(node, Num):
        return repr(node.value)
    if isinstance(node, Var):
        return node.name
    if isinstance(node, Neg):
        return f"(-{to_text(node.arg)})"
    if isinstance(node, Call):
        return f"{node.fn}({to_text(node.arg)})"
    return f"({to_text(node.left)} {node.op} {to_text(node.right)})"


class Expression:
    """Vectorised scalar field ``e(t, x)`` with ``x[..., 2]``."""

    def __init__(self, source):
        self.source = source
        self.tree = parse(source)

    @classmethod
    def from_tree(cls, tree, source=None):
        obj = cls.__new__(cls)
        obj.tree = tree
        obj.source = source if source is not None else to_text(tree)
        return obj

    def __call__(self, t, x):
        x = np.asarray(x, dtype=float)
        shape = x.shape[:-1]
        env = {"t": float(t), "x1": x[..., 0], "x2": x[..., 1]}
        return np.broadcast_to(np.asarray(evaluate(self.tree, env), dtype=float), shape).copy()

    def derivative(self, var):
        return Expression.from_tree(diff(self.tree, var))

    @property
    def is_constant(self):
        return all(isinstance(diff(self.tree, v), Num) and diff(self.tree, v).value == 0.0
                   for v in VARIABLES)

    def __repr__(self):
        return f"Expression({self.source!r})"


class VectorExpression:
    """Two-component field from a pair of expressions."""

    def __init__(self, sources):
        if isinstance(sources, (str, int, float)) or len(sources) != 2:
            raise ExpressionError("a vector field needs exactly two component expressions")
        self.components = [Expression(s) for s in sources]

    def __call__(self, t, x):
        return np.stack([c(t, x) for c in self.components], axis=-1)


def gradient(expr: Expression):
    """``grad_x`` of a scalar expression as a vector field ``(t, x) -> [..., 2]``."""
    d1, d2 = expr.derivative("x1"), expr.derivative("x2")

    def grad(t, x):
        return np.stack([d1(t, x), d2(t, x)], axis=-1)

    return grad
