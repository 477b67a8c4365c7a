"""
Expression language for closed-form drift and diffusion coefficients.

Expressions are infix formulas in the single variable ``x`` built from numbers,
``+ - * / ^``, unary minus and the functions sin, cos, exp, tanh and abs.
The ``^`` operator only accepts a constant integer exponent, which keeps the
symbolic derivative closed-form. Parsed trees are immutable and can be shared
between threads.
"""

import math
import re
from dataclasses import dataclass
from typing import Union

import numpy as np
import structlog

logger = structlog.get_logger(__name__)

# Functions accepted by the parser. "sign" only shows up in derivatives of abs
# but is parseable so printed derivatives round-trip.
FUNCTIONS = ("sin", "cos", "exp", "tanh", "abs", "sign")

_TOKEN_RE = re.compile(
    r"\s*(?:"
    r"(?P<number>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<name>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op>[-+*/^()])"
    r")"
)


class ExprError(ValueError):
    """
    Raised for malformed expressions (syntax, unknown names, bad exponents).

    ``offset`` is the position of the offending token as a byte offset into the
    UTF-8 encoded source, or None when no single token is at fault.
    """

    def __init__(self, message: str, offset: int = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte {offset})"
        super().__init__(message)


@dataclass(frozen=True)
class Const:
    value: float


@dataclass(frozen=True)
class Var:
    name: str = "x"


@dataclass(frozen=True)
class Unary:
    op: str  # "neg" or a function name
    arg: "ExprAst"


@dataclass(frozen=True)
class Binary:
    op: str  # one of + - * / ^
    left: "ExprAst"
    right: "ExprAst"


ExprAst = Union[Const, Var, Unary, Binary]


def _byte_offset(source: str, index: int) -> int:
    return len(source[:index].encode("utf-8"))


def _tokenize(source: str):
    tokens = []
    pos = 0
    while pos < len(source):
        if source[pos:].strip() == "":
            break
        match = _TOKEN_RE.match(source, pos)
        if not match or match.end() == pos:
            index = len(source) - len(source[pos:].lstrip())
            raise ExprError(f"Unexpected character {source[index]!r}", _byte_offset(source, index))
        kind = match.lastgroup
        tokens.append((kind, match.group(kind), _byte_offset(source, match.start(kind))))
        pos = match.end()
    tokens.append(("end", "", _byte_offset(source, len(source))))
    return tokens


class _Parser:
    """Recursive-descent parser: ^ > unary minus > * / > + -, binaries left-associative."""

    def __init__(self, source: str):
        self.source = source
        self.tokens = _tokenize(source)
        self.pos = 0

    def peek(self):
        return self.tokens[self.pos]

    def take(self):
        token = self.tokens[self.pos]
        self.pos += 1
        return token

    def expect(self, text):
        kind, value, offset = self.take()
        if value != text:
            raise ExprError(f"Expected {text!r} but found {value or 'end of input'!r}", offset)

    def parse(self) -> ExprAst:
        node = self.expression()
        kind, value, offset = self.peek()
        if kind != "end":
            raise ExprError(f"Unexpected token {value!r}", offset)
        return node

    def expression(self):
        node = self.term()
        while self.peek()[1] in ("+", "-") and self.peek()[0] == "op":
            op = self.take()[1]
            node = Binary(op, node, self.term())
        return node

    def term(self):
        node = self.unary()
        while self.peek()[1] in ("*", "/") and self.peek()[0] == "op":
            op = self.take()[1]
            node = Binary(op, node, self.unary())
        return node

    def unary(self):
        kind, value, _ = self.peek()
        if kind == "op" and value == "-":
            self.take()
            operand = self.unary()
            if isinstance(operand, Const):
                return Const(-operand.value)
            return Unary("neg", operand)
        if kind == "op" and value == "+":
            self.take()
            return self.unary()
        return self.power()

    def power(self):
        base = self.atom()
        kind, value, _ = self.peek()
        if kind == "op" and value == "^":
            self.take()
            exponent = self.exponent()
            kind, value, offset = self.peek()
            if kind == "op" and value == "^":
                raise ExprError("Chained exponents are not supported", offset)
            return Binary("^", base, Const(float(exponent)))
        return base

    def exponent(self) -> int:
        kind, value, offset = self.peek()
        wrapped = kind == "op" and value == "("
        if wrapped:
            self.take()
        sign = 1
        kind, value, offset = self.peek()
        if kind == "op" and value in ("-", "+"):
            self.take()
            sign = -1 if value == "-" else 1
        kind, value, offset = self.take()
        if kind != "number":
            raise ExprError("Exponent must be a constant integer", offset)
        number = float(value)
        if not number.is_integer():
            raise ExprError(f"Non-integer exponent {value}", offset)
        if wrapped:
            self.expect(")")
        return sign * int(number)

    def atom(self):
        kind, value, offset = self.take()
        if kind == "number":
            return Const(float(value))
        if kind == "name":
            if value == "x":
                return Var("x")
            if value in FUNCTIONS:
                self.expect("(")
                arg = self.expression()
                self.expect(")")
                return Unary(value, arg)
            raise ExprError(f"Unknown identifier {value!r}", offset)
        if kind == "op" and value == "(":
            node = self.expression()
            self.expect(")")
            return node
        raise ExprError(f"Unexpected token {value or 'end of input'!r}", offset)


def parse(source: str) -> ExprAst:
    """
    Parse an infix expression in the variable x.

    Args:
        source: Expression text, e.g. "-0.25*x^3" or "0.76*(1+cos(x))"

    Returns:
        ExprAst: The immutable expression tree

    Raises:
        ExprError: On syntax errors (with offset), unknown identifiers or non-integer exponents
    """
    if not isinstance(source, str) or not source.strip():
        raise ExprError("Expression is empty")
    return _Parser(source).parse()


_UNARY_FUNCS = {
    "sin": np.sin,
    "cos": np.cos,
    "exp": np.exp,
    "tanh": np.tanh,
    "abs": np.abs,
    "sign": np.sign,
}


def _evaluate(node: ExprAst, x):
    if isinstance(node, Const):
        return np.full_like(x, node.value)
    if isinstance(node, Var):
        return x
    if isinstance(node, Unary):
        arg = _evaluate(node.arg, x)
        if node.op == "neg":
            return -arg
        return _UNARY_FUNCS[node.op](arg)
    left = _evaluate(node.left, x)
    if node.op == "^":
        n = int(node.right.value)
        if n < 0:
            return np.where(left == 0.0, np.nan, left ** float(n))
        return left ** n
    right = _evaluate(node.right, x)
    if node.op == "+":
        return left + right
    if node.op == "-":
        return left - right
    if node.op == "*":
        return left * right
    # Division by zero is undefined, not infinite
    return np.where(right == 0.0, np.nan, left / np.where(right == 0.0, 1.0, right))


def evaluate(ast: ExprAst, x):
    """
    Evaluate an expression tree at x (scalar or array).

    Undefined results (division by zero, overflow, domain errors) come back as NaN
    so the caller can flag them.
    """
    scalar = np.ndim(x) == 0
    values = np.asarray(x, dtype=float)
    with np.errstate(all="ignore"):
        result = _evaluate(ast, values)
        result = np.where(np.isfinite(result), result, np.nan)
    if scalar:
        return float(result)
    return result


def _is_const(node, value=None):
    return isinstance(node, Const) and (value is None or node.value == value)


def _add(a, b):
    if _is_const(a, 0.0):
        return b
    if _is_const(b, 0.0):
        return a
    if _is_const(a) and _is_const(b):
        return Const(a.value + b.value)
    return Binary("+", a, b)


def _sub(a, b):
    if _is_const(b, 0.0):
        return a
    if _is_const(a) and _is_const(b):
        return Const(a.value - b.value)
    if _is_const(a, 0.0):
        return _neg(b)
    return Binary("-", a, b)


def _mul(a, b):
    if _is_const(a, 0.0) or _is_const(b, 0.0):
        return Const(0.0)
    if _is_const(a, 1.0):
        return b
    if _is_const(b, 1.0):
        return a
    if _is_const(a) and _is_const(b):
        return Const(a.value * b.value)
    return Binary("*", a, b)


def _div(a, b):
    if _is_const(a, 0.0):
        return Const(0.0)
    if _is_const(b, 1.0):
        return a
    return Binary("/", a, b)


def _neg(a):
    if _is_const(a):
        return Const(-a.value)
    return Unary("neg", a)


def _pow(a, n: int):
    if n == 0:
        return Const(1.0)
    if n == 1:
        return a
    return Binary("^", a, Const(float(n)))


def derivative(ast: ExprAst) -> ExprAst:
    """
    Exact symbolic derivative with respect to x.

    Only trivial constant folding is applied (multiplying by 0 or 1, adding 0).
    abs differentiates to sign, so its subgradient at 0 is 0.
    """
    if isinstance(ast, Const):
        return Const(0.0)
    if isinstance(ast, Var):
        return Const(1.0)
    if isinstance(ast, Unary):
        inner = derivative(ast.arg)
        if ast.op == "neg":
            return _neg(inner)
        if ast.op == "sin":
            outer = Unary("cos", ast.arg)
        elif ast.op == "cos":
            outer = _neg(Unary("sin", ast.arg))
        elif ast.op == "exp":
            outer = ast
        elif ast.op == "tanh":
            outer = _sub(Const(1.0), _pow(ast, 2))
        elif ast.op == "abs":
            outer = Unary("sign", ast.arg)
        else:
            # sign is piecewise constant
            return Const(0.0)
        return _mul(outer, inner)

    left, right = ast.left, ast.right
    if ast.op == "+":
        return _add(derivative(left), derivative(right))
    if ast.op == "-":
        return _sub(derivative(left), derivative(right))
    if ast.op == "*":
        return _add(_mul(derivative(left), right), _mul(left, derivative(right)))
    if ast.op == "/":
        numerator = _sub(_mul(derivative(left), right), _mul(left, derivative(right)))
        return _div(numerator, _pow(right, 2))
    n = int(right.value)
    return _mul(_mul(Const(float(n)), _pow(left, n - 1)), derivative(left))


def to_source(ast: ExprAst) -> str:
    """Print a tree as fully parenthesized source that parses back to the same tree."""
    if isinstance(ast, Const):
        text = repr(ast.value)
        return f"({text})" if math.copysign(1.0, ast.value) < 0 else text
    if isinstance(ast, Var):
        return "x"
    if isinstance(ast, Unary):
        if ast.op == "neg":
            return f"(-{to_source(ast.arg)})"
        return f"{ast.op}({to_source(ast.arg)})"
    if ast.op == "^":
        n = int(ast.right.value)
        exponent = f"({n})" if n < 0 else str(n)
        return f"({to_source(ast.left)}^{exponent})"
    return f"({to_source(ast.left)}{ast.op}{to_source(ast.right)})"


class Expression:
    """
    A parsed coefficient function with its symbolic derivative.

    Calling the object evaluates the function; ``prime`` evaluates the derivative.
    Both accept scalars or numpy arrays.
    """

    def __init__(self, source: str):
        self.source = source
        self.ast = parse(source)
        self.derivative_ast = derivative(self.ast)
        logger.debug("Parsed expression", source=source, derivative=to_source(self.derivative_ast))

    def __call__(self, x):
        return evaluate(self.ast, x)

    def prime(self, x):
        return evaluate(self.derivative_ast, x)

    def __repr__(self):
        return f"Expression({self.source!r})"
