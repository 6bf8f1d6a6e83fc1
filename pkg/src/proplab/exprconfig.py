"""Closed-form coordinate expressions and experiment configuration.

The expression language is deliberately small: real literals, the
coordinates ``x0 .. x3`` (``t`` is an alias of ``x0``), the four arithmetic
operators, powers with a constant integer exponent, and a fixed set of
elementary functions.  Expressions are immutable trees of frozen
dataclasses, so they hash, compare structurally and can be shared freely.

Precedence, from tightest to loosest::

    ^        (right associative, exponent must be a constant integer)
    unary -
    * /      (left associative)
    + -      (left associative)

Example
-------
>>> e = parse_expression("exp(2*x1)/x2")
>>> round(evaluate(e, (0.0, 0.3, 2.0)), 6)
0.911059
>>> pretty(differentiate(parse_expression("x0^2"), 0))
'(2.0 * x0)'
"""

from __future__ import annotations

import json
import math
import re
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence, Union

import numpy as np

from .errors import ConfigError, DomainError, ExprSyntaxError, UnknownIdentifier

MAX_DIM = 4
FUNCTIONS = ("sin", "cos", "tan", "exp", "log", "sqrt", "sinh", "cosh", "tanh")
VARIABLES = {f"x{i}": i for i in range(MAX_DIM)}
VARIABLES["t"] = 0


class NonFiniteWarning(RuntimeWarning):
    """Evaluation produced NaN or Inf without a domain violation."""


# ---------------------------------------------------------------------------
# AST
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Num:
    value: float


@dataclass(frozen=True)
class Var:
    index: int


@dataclass(frozen=True)
class Neg:
    arg: "Expr"


@dataclass(frozen=True)
class BinOp:
    op: str  # one of + - * /
    left: "Expr"
    right: "Expr"


@dataclass(frozen=True)
class Pow:
    base: "Expr"
    exponent: int


@dataclass(frozen=True)
class Call:
    func: str
    arg: "Expr"


Expr = Union[Num, Var, Neg, BinOp, Pow, Call]
_OPNAMES = {"+": "Add", "-": "Sub", "*": "Mul", "/": "Div"}


def describe(e: Expr) -> str:
    """Compact constructor-style rendering, e.g. ``Mul(Pow(x0,2),Sin(x1))``."""
    if isinstance(e, Num):
        return repr(e.value)
    if isinstance(e, Var):
        return f"x{e.index}"
    if isinstance(e, Neg):
        return f"Neg({describe(e.arg)})"
    if isinstance(e, BinOp):
        return f"{_OPNAMES[e.op]}({describe(e.left)},{describe(e.right)})"
    if isinstance(e, Pow):
        return f"Pow({describe(e.base)},{e.exponent})"
    if isinstance(e, Call):
        return f"{e.func.capitalize()}({describe(e.arg)})"
    raise TypeError(f"not an expression node: {e!r}")


def variables(e: Expr) -> frozenset:
    """Indices of the coordinates occurring in ``e``."""
    if isinstance(e, Var):
        return frozenset((e.index,))
    if isinstance(e, Num):
        return frozenset()
    if isinstance(e, (Neg, Call)):
        return variables(e.arg)
    if isinstance(e, Pow):
        return variables(e.base)
    return variables(e.left) | variables(e.right)


# ---------------------------------------------------------------------------
# Lexer / parser
# ---------------------------------------------------------------------------

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>[ \t\r\n]+)
  | (?P<num>(?:\d+\.\d*|\.\d+|\d+)(?:[eE][+-]?\d+)?)
  | (?P<name>[A-Za-z_][A-Za-z_0-9]*)
  | (?P<op>[-+*/^()])
    """,
    re.VERBOSE,
)


@dataclass(frozen=True)
class _Tok:
    kind: str  # 'num', 'name', op character, or 'end'
    text: str
    offset: int


def _tokenize(text: str) -> list:
    toks = []
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            raise ExprSyntaxError(f"unexpected character {text[pos]!r}", pos,
                                  {"number", "name", "operator", "("})
        kind = m.lastgroup
        if kind != "ws":
            tok_kind = m.group() if kind == "op" else kind
            toks.append(_Tok(tok_kind, m.group(), pos))
        pos = m.end()
    toks.append(_Tok("end", "", len(text)))
    return toks


_ATOM_START = frozenset({"number", "name", "(", "-"})


class _Parser:
    def __init__(self, text: str):
        self.toks = _tokenize(text)
        self.i = 0

    @property
    def tok(self) -> _Tok:
        return self.toks[self.i]

    def advance(self) -> _Tok:
        tok = self.toks[self.i]
        self.i += 1
        return tok

    def expect(self, kind: str) -> _Tok:
        if self.tok.kind != kind:
            raise ExprSyntaxError(f"unexpected {self._show(self.tok)}", self.tok.offset, {kind})
        return self.advance()

    @staticmethod
    def _show(tok: _Tok) -> str:
        return "end of input" if tok.kind == "end" else repr(tok.text)

    def parse(self) -> Expr:
        e = self.expr()
        if self.tok.kind != "end":
            raise ExprSyntaxError(f"unexpected {self._show(self.tok)}", self.tok.offset,
                                  {"+", "-", "*", "/", "^", "end"})
        return e

    def expr(self) -> Expr:
        left = self.term()
        while self.tok.kind in ("+", "-"):
            op = self.advance().kind
            left = BinOp(op, left, self.term())
        return left

    def term(self) -> Expr:
        left = self.unary()
        while self.tok.kind in ("*", "/"):
            op = self.advance().kind
            left = BinOp(op, left, self.unary())
        return left

    def unary(self) -> Expr:
        if self.tok.kind == "-":
            self.advance()
            return Neg(self.unary())
        return self.power()

    def power(self) -> Expr:
        base = self.atom()
        if self.tok.kind == "^":
            self.advance()
            return Pow(base, self.exponent())
        return base

    def _signed_int(self) -> int:
        sign = 1
        if self.tok.kind == "-":
            self.advance()
            sign = -1
        if self.tok.kind == "(":
            self.advance()
            value = self._signed_int()
            self.expect(")")
            return sign * value
        tok = self.tok
        if tok.kind != "num" or not tok.text.isdigit():
            raise ExprSyntaxError(f"exponent must be a constant integer, got {self._show(tok)}",
                                  tok.offset, {"integer"})
        self.advance()
        if len(tok.text) > 6:
            raise ExprSyntaxError("integer exponent is too large", tok.offset, {"integer"})
        return sign * int(tok.text)

    def exponent(self) -> int:
        start = self.tok.offset
        value = self._signed_int()
        if self.tok.kind == "^":  # right associative chain of integer constants
            self.advance()
            upper = self.exponent()
            if upper < 0 or upper * math.log2(max(abs(value), 2)) > 16:
                raise ExprSyntaxError("integer exponent chain must stay a small integer", start, {"integer"})
            value = value ** upper
        return value

    def atom(self) -> Expr:
        tok = self.tok
        if tok.kind == "num":
            self.advance()
            return Num(float(tok.text))
        if tok.kind == "name":
            self.advance()
            if tok.text in VARIABLES:
                return Var(VARIABLES[tok.text])
            if tok.text in FUNCTIONS:
                self.expect("(")
                arg = self.expr()
                self.expect(")")
                return Call(tok.text, arg)
            raise UnknownIdentifier(f"unknown identifier {tok.text!r}", tok.offset,
                                    set(VARIABLES) | set(FUNCTIONS))
        if tok.kind == "(":
            self.advance()
            e = self.expr()
            self.expect(")")
            return e
        raise ExprSyntaxError(f"unexpected {self._show(tok)}", tok.offset, _ATOM_START)


def parse_expression(text: str) -> Expr:
    """Parse ``text`` into an expression tree.

    Raises
    ------
    ExprSyntaxError
        Malformed input; carries the byte offset and the expected token set.
    UnknownIdentifier
        A name that is neither a coordinate nor an allowed function.
    """
    if isinstance(text, bytes):
        try:
            text = text.decode("ascii")
        except UnicodeDecodeError as exc:
            raise ExprSyntaxError("input is not ASCII", exc.start, {"ascii"}) from None
    if not isinstance(text, str):
        raise TypeError("expression text must be a string")
    for pos, ch in enumerate(text):
        if ord(ch) > 127:
            raise ExprSyntaxError("input is not ASCII", pos, {"ascii"})
    if not text.strip():
        raise ExprSyntaxError("empty expression", 0, _ATOM_START)
    return _Parser(text).parse()


# ---------------------------------------------------------------------------
# Pretty printing
# ---------------------------------------------------------------------------

def pretty(e: Expr) -> str:
    """Fully parenthesised text that re-parses to an equivalent tree."""
    if isinstance(e, Num):
        v = e.value
        if not math.isfinite(v):
            raise ValueError("non-finite literal cannot be printed")
        if math.copysign(1.0, v) < 0:
            return f"(-{repr(-v)})"
        return repr(v)
    if isinstance(e, Var):
        return f"x{e.index}"
    if isinstance(e, Neg):
        return f"(-{pretty(e.arg)})"
    if isinstance(e, BinOp):
        return f"({pretty(e.left)} {e.op} {pretty(e.right)})"
    if isinstance(e, Pow):
        k = e.exponent
        return f"({pretty(e.base)}^{k if k >= 0 else f'({k})'})"
    if isinstance(e, Call):
        return f"{e.func}({pretty(e.arg)})"
    raise TypeError(f"not an expression node: {e!r}")


# ---------------------------------------------------------------------------
# Constant-folding constructors
# ---------------------------------------------------------------------------

def _is_num(e, value=None) -> bool:
    return isinstance(e, Num) and (value is None or e.value == value)


def num(v: float) -> Expr:
    v = float(v)
    return Neg(Num(-v)) if math.copysign(1.0, v) < 0 else Num(v)


def _num_value(e):
    if isinstance(e, Num):
        return e.value
    if isinstance(e, Neg) and isinstance(e.arg, Num):
        return -e.arg.value
    return None


def neg(a: Expr) -> Expr:
    if isinstance(a, Neg):
        return a.arg
    if _is_num(a, 0.0):
        return a
    return Neg(a)


def add(a: Expr, b: Expr) -> Expr:
    va, vb = _num_value(a), _num_value(b)
    if vb == 0.0:
        return a
    if va == 0.0:
        return b
    if va is not None and vb is not None:
        return num(va + vb)
    return BinOp("+", a, b)


def sub(a: Expr, b: Expr) -> Expr:
    va, vb = _num_value(a), _num_value(b)
    if vb == 0.0:
        return a
    if va == 0.0:
        return neg(b)
    if va is not None and vb is not None:
        return num(va - vb)
    return BinOp("-", a, b)


def mul(a: Expr, b: Expr) -> Expr:
    va, vb = _num_value(a), _num_value(b)
    if va == 0.0 or vb == 0.0:
        return Num(0.0)
    if va == 1.0:
        return b
    if vb == 1.0:
        return a
    if va is not None and vb is not None:
        return num(va * vb)
    return BinOp("*", a, b)


def div(a: Expr, b: Expr) -> Expr:
    va, vb = _num_value(a), _num_value(b)
    if vb == 1.0:
        return a
    if va == 0.0 and vb != 0.0:
        return Num(0.0)
    if va is not None and vb is not None and vb != 0.0:
        return num(va / vb)
    return BinOp("/", a, b)


def power(a: Expr, k: int) -> Expr:
    k = int(k)
    if k == 0:
        return Num(1.0)
    if k == 1:
        return a
    va = _num_value(a)
    if va is not None and (va != 0.0 or k > 0):
        return num(va ** k)
    return Pow(a, k)


def call(func: str, a: Expr) -> Expr:
    return Call(func, a)


# ---------------------------------------------------------------------------
# Differentiation
# ---------------------------------------------------------------------------

def differentiate(e: Expr, var: int | str) -> Expr:
    """Exact derivative of ``e`` with respect to coordinate ``var``.

    Only constant folding is applied (``0*e -> 0``, ``e+0 -> e``,
    ``1*e -> e`` and literal arithmetic), so results are deterministic.
    """
    if isinstance(var, str):
        if var not in VARIABLES:
            raise UnknownIdentifier(f"unknown variable {var!r}", 0, set(VARIABLES))
        var = VARIABLES[var]
    return _d(e, int(var))


def _d(e: Expr, v: int) -> Expr:
    if isinstance(e, Num):
        return Num(0.0)
    if isinstance(e, Var):
        return Num(1.0 if e.index == v else 0.0)
    if isinstance(e, Neg):
        return neg(_d(e.arg, v))
    if isinstance(e, BinOp):
        a, b = e.left, e.right
        da, db = _d(a, v), _d(b, v)
        if e.op == "+":
            return add(da, db)
        if e.op == "-":
            return sub(da, db)
        if e.op == "*":
            return add(mul(da, b), mul(a, db))
        # quotient rule, written so that a constant numerator stays simple
        if _is_num(db, 0.0):
            return div(da, b)
        return div(sub(mul(da, b), mul(a, db)), power(b, 2))
    if isinstance(e, Pow):
        db = _d(e.base, v)
        if _is_num(db, 0.0):
            return Num(0.0)
        return mul(mul(Num(float(e.exponent)), power(e.base, e.exponent - 1)), db)
    if isinstance(e, Call):
        u = e.arg
        du = _d(u, v)
        if _is_num(du, 0.0):
            return Num(0.0)
        f = e.func
        if f == "sin":
            outer = call("cos", u)
        elif f == "cos":
            outer = neg(call("sin", u))
        elif f == "tan":
            outer = power(call("cos", u), -2)
        elif f == "exp":
            outer = e
        elif f == "log":
            return div(du, u)
        elif f == "sqrt":
            return div(du, mul(Num(2.0), e))
        elif f == "sinh":
            outer = call("cosh", u)
        elif f == "cosh":
            outer = call("sinh", u)
        elif f == "tanh":
            outer = power(call("cosh", u), -2)
        else:  # pragma: no cover - guarded by the parser
            raise UnknownIdentifier(f"unknown function {f!r}", 0, FUNCTIONS)
        return mul(outer, du)
    raise TypeError(f"not an expression node: {e!r}")


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

_NP_FUNCS = {
    "sin": np.sin, "cos": np.cos, "tan": np.tan, "exp": np.exp, "log": np.log,
    "sqrt": np.sqrt, "sinh": np.sinh, "cosh": np.cosh, "tanh": np.tanh,
}


def _coords(x) -> list:
    if np.isscalar(x):
        return [x]
    return [x[i] for i in range(len(x))]


def evaluate(e: Expr, x: Sequence[float], *, warn: bool = True):
    """Evaluate ``e`` at coordinates ``x`` in IEEE double precision.

    ``x`` may hold scalars or equally shaped arrays (vectorised evaluation).

    Raises
    ------
    DomainError
        ``log`` or ``sqrt`` of a negative argument, ``log(0)``, or a
        division by zero (including negative powers of zero).
    """
    coords = _coords(x)
    need = variables(e)
    if need and max(need) >= len(coords):
        raise ValueError(f"expression uses x{max(need)} but only {len(coords)} coordinates given")
    with np.errstate(all="ignore"):
        value = _eval(e, coords)
    if warn and not np.all(np.isfinite(value)):
        warnings.warn(f"non-finite value while evaluating {pretty(e)}", NonFiniteWarning, stacklevel=2)
    return value


def _eval(e: Expr, xs: list):
    if isinstance(e, Num):
        return e.value
    if isinstance(e, Var):
        return xs[e.index]
    if isinstance(e, Neg):
        return -_eval(e.arg, xs)
    if isinstance(e, BinOp):
        a = _eval(e.left, xs)
        b = _eval(e.right, xs)
        if e.op == "+":
            return a + b
        if e.op == "-":
            return a - b
        if e.op == "*":
            return a * b
        if np.any(np.asarray(b) == 0):
            raise DomainError(f"division by zero in {pretty(e)}")
        return np.divide(a, b) if isinstance(a, np.ndarray) or isinstance(b, np.ndarray) else a / b
    if isinstance(e, Pow):
        b = _eval(e.base, xs)
        k = e.exponent
        if k < 0:
            if np.any(np.asarray(b) == 0):
                raise DomainError(f"zero raised to a negative power in {pretty(e)}")
            return 1.0 / _ipow(b, -k)
        return _ipow(b, k)
    if isinstance(e, Call):
        a = _eval(e.arg, xs)
        if e.func == "log" and np.any(np.asarray(a) <= 0):
            raise DomainError(f"log of a non-positive argument in {pretty(e)}")
        if e.func == "sqrt" and np.any(np.asarray(a) < 0):
            raise DomainError(f"sqrt of a negative argument in {pretty(e)}")
        f = _NP_FUNCS[e.func]
        out = f(a)
        return float(out) if np.ndim(out) == 0 else out
    raise TypeError(f"not an expression node: {e!r}")


def _ipow(b, k: int):
    # repeated squaring in a fixed order so compiled and tree evaluation agree
    result = 1.0
    base = b
    first = True
    while k:
        if k & 1:
            result = base if first else result * base
            first = False
        k >>= 1
        if k:
            base = base * base
    return result


def _source(e: Expr) -> str:
    if isinstance(e, Num):
        return repr(e.value)
    if isinstance(e, Var):
        return f"x{e.index}"
    if isinstance(e, Neg):
        return f"(-{_source(e.arg)})"
    if isinstance(e, BinOp):
        return f"({_source(e.left)} {e.op} {_source(e.right)})"
    if isinstance(e, Pow):
        k = e.exponent
        if k < 0:
            return f"(1.0 / _ipow({_source(e.base)}, {-k}))"
        return f"_ipow({_source(e.base)}, {k})"
    if isinstance(e, Call):
        return f"_np.{e.func}({_source(e.arg)})"
    raise TypeError(f"not an expression node: {e!r}")


def compile_exprs(exprs: Sequence[Expr], dim: int = MAX_DIM) -> Callable:
    """Compile several expressions into one vectorised function.

    The returned callable takes a coordinate array of shape ``(dim, ...)``
    and returns an array of shape ``(len(exprs), ...)``.  No domain checks
    are made; use :func:`evaluate` when diagnostics matter.
    """
    args = ", ".join(f"x{i}" for i in range(dim))
    body = ", ".join(_source(e) for e in exprs)
    src = f"def _f({args}):\n    return ({body},)\n"
    namespace = {"_np": np, "_ipow": _ipow}
    exec(compile(src, "<proplab-expr>", "exec"), namespace)  # noqa: S102 - generated from a parsed AST
    raw = namespace["_f"]

    def fn(x):
        x = np.asarray(x, dtype=float)
        with np.errstate(all="ignore"):
            vals = raw(*[x[i] for i in range(dim)])
        shape = np.shape(x)[1:]
        out = np.empty((len(exprs),) + shape)
        for i, v in enumerate(vals):
            out[i] = v
        return out

    fn.source = src
    return fn


# ---------------------------------------------------------------------------
# Expression arrays (real or complex entries) with exact derivatives
# ---------------------------------------------------------------------------

class ExprArray:
    """Array of (possibly complex) expressions with compiled derivatives.

    Parameters
    ----------
    entries : nested sequence
        Leaves are expression strings, :class:`Expr` nodes, numbers, or
        ``[re, im]`` pairs of those for complex entries.
    dim : int
        Number of coordinates the expressions may use.
    ndim : int, optional
        Number of array axes.  Without it the shape is inferred, and a
        length-two innermost list of scalars is read as ``[re, im]``; pass
        ``ndim`` whenever that reading could be ambiguous.

    The object evaluates ``value(x)``, ``grad(x)`` (leading axis is the
    derivative direction) and ``hess(x)`` (two leading derivative axes).
    """

    def __init__(self, entries, dim: int, ndim: int | None = None):
        self.dim = int(dim)
        re_list, im_list = [], []
        self.shape = _leaf_shape(entries) if ndim is None else _fixed_shape(entries, ndim)
        for leaf in _flatten(entries, len(self.shape)):
            r, i = _as_complex_pair(leaf)
            re_list.append(r)
            im_list.append(i)
        self.re = tuple(re_list)
        self.im = tuple(im_list)
        self.is_real = all(_is_num(i, 0.0) for i in self.im)
        self._value = compile_exprs(self.re + self.im, self.dim)
        self._grad = None
        self._hess = None
        self._last = {}

    def _pack(self, flat, lead: int = 0):
        # flat: (lead axes..., 2 * size, batch...) -> (lead axes..., *shape, batch...)
        n = len(self.re)
        re = flat[(slice(None),) * lead + (slice(0, n),)]
        out = re if self.is_real else re + 1j * flat[(slice(None),) * lead + (slice(n, 2 * n),)]
        return out.reshape(out.shape[:lead] + self.shape + out.shape[lead + 1:])

    def _cached(self, name, x, compute):
        key = (name, x.tobytes(), x.shape)
        if self._last.get(name, (None,))[0] != key:
            self._last[name] = (key, compute())
        return self._last[name][1]

    def value(self, x):
        x = np.asarray(x, dtype=float)
        return self._cached("v", x, lambda: self._pack(self._value(x)))

    def grad(self, x):
        """Array of shape ``(dim, *shape, *batch)``."""
        if self._grad is None:
            exprs = [differentiate(e, a) for a in range(self.dim) for e in self.re + self.im]
            self._grad = compile_exprs(exprs, self.dim)
        x = np.asarray(x, dtype=float)

        def compute():
            flat = self._grad(x)
            return self._pack(flat.reshape((self.dim, 2 * len(self.re)) + flat.shape[1:]), 1)

        return self._cached("g", x, compute)

    def hess(self, x):
        """Array of shape ``(dim, dim, *shape, *batch)``."""
        if self._hess is None:
            exprs = [differentiate(differentiate(e, a), b)
                     for a in range(self.dim) for b in range(self.dim) for e in self.re + self.im]
            self._hess = compile_exprs(exprs, self.dim)
        x = np.asarray(x, dtype=float)
        flat = self._hess(x)
        return self._pack(flat.reshape((self.dim, self.dim, 2 * len(self.re)) + flat.shape[1:]), 2)

    def entries(self):
        """Nested list of ``(re, im)`` expression pairs."""
        flat = list(zip(self.re, self.im))
        return np.array(flat, dtype=object).reshape(self.shape + (2,)).tolist()


def _leaf_shape(entries) -> tuple:
    shape = []
    node = entries
    while isinstance(node, (list, tuple)) and not _is_pair_leaf(node):
        shape.append(len(node))
        node = node[0]
    return tuple(shape)


def _fixed_shape(entries, ndim: int) -> tuple:
    shape = []
    node = entries
    for _ in range(ndim):
        if not isinstance(node, (list, tuple)):
            raise ConfigError(f"expected a nested array with {ndim} axes")
        shape.append(len(node))
        node = node[0]
    return tuple(shape)


def _is_pair_leaf(node) -> bool:
    return (isinstance(node, (list, tuple)) and len(node) == 2
            and all(isinstance(v, (str, int, float, Num, Var, Neg, BinOp, Pow, Call)) for v in node))


def _flatten(entries, depth: int):
    if depth == 0:
        yield entries
        return
    for item in entries:
        yield from _flatten(item, depth - 1)


def as_expr(value) -> Expr:
    if isinstance(value, (Num, Var, Neg, BinOp, Pow, Call)):
        return value
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        return num(float(value))
    if isinstance(value, str):
        return parse_expression(value)
    raise ConfigError(f"cannot interpret {value!r} as an expression")


def _as_complex_pair(leaf):
    if _is_pair_leaf(leaf):
        return as_expr(leaf[0]), as_expr(leaf[1])
    if isinstance(leaf, complex):
        return num(leaf.real), num(leaf.imag)
    return as_expr(leaf), Num(0.0)


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

CONFIG_KEYS = ("dim", "metric", "rank", "connection", "potential", "box", "time_orientation", "name")


@dataclass(frozen=True)
class ExperimentConfig:
    """Validated configuration document.

    Keys (all lower case):

    ``dim``
        Spacetime dimension, 2..4.
    ``metric``
        ``dim x dim`` array of expression strings; must be symmetric.
    ``rank``
        Bundle rank N (default 1).
    ``connection``
        Optional list of ``dim`` arrays, each ``N x N``; entries are
        expression strings or ``[re, im]`` pairs.
    ``potential``
        Optional ``N x N`` array with the same entry format.
    ``box``
        Optional ``dim x 2`` coordinate bounds of the chart.
    ``time_orientation``
        Optional covector (list of numbers), default ``dx0``.
    ``name``
        Optional label.

    Any other top-level keys are kept verbatim in ``sections`` for the
    individual experiments.
    """

    dim: int
    metric: tuple
    rank: int
    connection: Any
    potential: Any
    box: Any
    time_orientation: Any
    name: str
    sections: Mapping[str, Any]
    digest: str


def load_config(source: str | Path | Mapping) -> ExperimentConfig:
    """Load and validate a configuration from a path, JSON text or mapping."""
    import hashlib

    if isinstance(source, Mapping):
        doc = dict(source)
    else:
        text = Path(source).read_text(encoding="utf-8") if Path(str(source)).exists() else str(source)
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"configuration is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError("configuration must be a JSON object")
    digest = hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:16]

    dim = doc.get("dim")
    if not isinstance(dim, int) or not 2 <= dim <= MAX_DIM:
        raise ConfigError("'dim' must be an integer in 2..4")
    metric_raw = doc.get("metric")
    if (not isinstance(metric_raw, list) or len(metric_raw) != dim
            or any(not isinstance(row, list) or len(row) != dim for row in metric_raw)):
        raise ConfigError("'metric' must be a dim x dim array of expression strings")
    metric = tuple(tuple(_config_expr(v, f"metric[{i}][{j}]", dim) for j, v in enumerate(row))
                   for i, row in enumerate(metric_raw))
    for i in range(dim):
        for j in range(i + 1, dim):
            if metric[i][j] != metric[j][i] and not _numerically_equal(metric[i][j], metric[j][i], dim):
                raise ConfigError(f"metric is not symmetric: entries [{i}][{j}] and [{j}][{i}] differ")

    rank = doc.get("rank", 1)
    if not isinstance(rank, int) or rank < 1:
        raise ConfigError("'rank' must be a positive integer")

    connection = doc.get("connection")
    if connection is not None:
        if not isinstance(connection, list) or len(connection) != dim:
            raise ConfigError("'connection' must list one N x N array per coordinate")
        for mu, block in enumerate(connection):
            _check_square(block, rank, f"connection[{mu}]", dim)
    potential = doc.get("potential")
    if potential is not None:
        _check_square(potential, rank, "potential", dim)

    box = doc.get("box")
    if box is not None:
        box = np.asarray(box, dtype=float)
        if box.shape != (dim, 2) or np.any(box[:, 0] >= box[:, 1]):
            raise ConfigError("'box' must be dim x 2 with lower < upper")
        box = tuple(map(tuple, box.tolist()))
    orient = doc.get("time_orientation")
    if orient is not None:
        orient = tuple(float(v) for v in orient)
        if len(orient) != dim:
            raise ConfigError("'time_orientation' must have dim components")

    sections = {k: v for k, v in doc.items() if k not in CONFIG_KEYS}
    return ExperimentConfig(dim=dim, metric=metric, rank=rank, connection=connection,
                            potential=potential, box=box, time_orientation=orient,
                            name=str(doc.get("name", "config")), sections=sections, digest=digest)


def _config_expr(value, where: str, dim: int) -> Expr:
    try:
        e = as_expr(value)
    except ExprSyntaxError as exc:
        raise ConfigError(f"{where}: {exc}") from None
    if variables(e) and max(variables(e)) >= dim:
        raise ConfigError(f"{where}: uses a coordinate beyond dim={dim}")
    return e


def _check_square(block, rank: int, where: str, dim: int) -> None:
    if not isinstance(block, list) or len(block) != rank or any(
            not isinstance(row, list) or len(row) != rank for row in block):
        raise ConfigError(f"'{where}' must be a {rank} x {rank} array")
    for i, row in enumerate(block):
        for j, leaf in enumerate(row):
            parts = leaf if isinstance(leaf, list) else [leaf]
            if len(parts) not in (1, 2):
                raise ConfigError(f"{where}[{i}][{j}]: expected an expression or [re, im]")
            for p in parts:
                _config_expr(p, f"{where}[{i}][{j}]", dim)


def _numerically_equal(a: Expr, b: Expr, dim: int) -> bool:
    rng = np.random.default_rng(0)
    pts = rng.uniform(-0.5, 0.5, size=(dim, 16))
    try:
        va = evaluate(a, pts, warn=False)
        vb = evaluate(b, pts, warn=False)
    except DomainError:
        return False
    return bool(np.allclose(va, vb, rtol=1e-12, atol=1e-14))
