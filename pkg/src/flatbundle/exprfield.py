"""Closed-form scalar fields on a coordinate chart.

A :class:`ScalarField` is a small expression tree over named coordinates,
closed under symbolic differentiation and evaluable pointwise or on whole
numpy grids.  The grammar covers numeric literals, coordinates, the
arithmetic operators ``+ - * / ^`` (with ``^`` right-associative), unary
minus, and the functions ``sin cos tan cot exp log sqrt``.  Angles are
radians throughout.

Fields are immutable; evaluation has no side effects and is safe to call
from any context.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "ScalarField",
    "ParseError",
    "SingularEvaluationError",
    "parse_scalar_field",
    "derivative",
    "evaluate",
]


class ParseError(ValueError):
    """Malformed expression source.  ``column`` is 1-based."""

    def __init__(self, message, column):
        super().__init__(f"column {column}: {message}")
        self.column = column


class SingularEvaluationError(ArithmeticError):
    """Evaluation hit a pole or left a function's domain.

    ``expression`` holds the offending subexpression's source form.
    """

    def __init__(self, expression, reason):
        super().__init__(f"singular evaluation of '{expression}': {reason}")
        self.expression = expression
        self.reason = reason


# ---------------------------------------------------------------------------
# AST nodes

_PREC_ADD, _PREC_MUL, _PREC_UNARY, _PREC_POW, _PREC_ATOM = 1, 2, 3, 4, 5


class _Node:
    __slots__ = ()

    def eval(self, env):
        raise NotImplementedError

    def diff(self, name):
        raise NotImplementedError

    def free_names(self, out):
        raise NotImplementedError

    # precedence-aware printing; `prec` is the parent's binding strength
    def src(self):
        raise NotImplementedError

    def _wrap(self, prec, parent_prec):
        s = self.src()
        return f"({s})" if prec < parent_prec else s


class _Const(_Node):
    __slots__ = ("value",)

    def __init__(self, value):
        self.value = float(value)

    def eval(self, env):
        return self.value

    def diff(self, name):
        return _Const(0.0)

    def free_names(self, out):
        pass

    def src(self):
        v = self.value
        if v == int(v) and abs(v) < 1e16:
            return str(int(v))
        return repr(v)

    def ordered(self, parent_prec):
        # negative literals only arise from folding; print with sign parens
        if self.value < 0 and parent_prec > _PREC_ADD:
            return f"({self.src()})"
        return self.src()


class _Coord(_Node):
    __slots__ = ("name",)

    def __init__(self, name):
        self.name = name

    def eval(self, env):
        return env[self.name]

    def diff(self, name):
        return _Const(1.0 if name == self.name else 0.0)

    def free_names(self, out):
        out.add(self.name)

    def src(self):
        return self.name


class _Neg(_Node):
    __slots__ = ("a",)

    def __init__(self, a):
        self.a = a

    def eval(self, env):
        return -self.a.eval(env)

    def diff(self, name):
        return _neg(self.a.diff(name))

    def free_names(self, out):
        self.a.free_names(out)

    def src(self):
        return "-" + self.a._wrap(_node_prec(self.a), _PREC_UNARY)


class _BinOp(_Node):
    __slots__ = ("a", "b")

    def __init__(self, a, b):
        self.a = a
        self.b = b

    def free_names(self, out):
        self.a.free_names(out)
        self.b.free_names(out)


class _Add(_BinOp):
    def eval(self, env):
        return self.a.eval(env) + self.b.eval(env)

    def diff(self, name):
        return _add(self.a.diff(name), self.b.diff(name))

    def src(self):
        return (self.a._wrap(_node_prec(self.a), _PREC_ADD)
                + " + " + self.b._wrap(_node_prec(self.b), _PREC_ADD))


class _Sub(_BinOp):
    def eval(self, env):
        return self.a.eval(env) - self.b.eval(env)

    def diff(self, name):
        return _sub(self.a.diff(name), self.b.diff(name))

    def src(self):
        # right side binds one tighter so a - (b + c) keeps its parens
        return (self.a._wrap(_node_prec(self.a), _PREC_ADD)
                + " - " + self.b._wrap(_node_prec(self.b), _PREC_ADD + 1))


class _Mul(_BinOp):
    def eval(self, env):
        return self.a.eval(env) * self.b.eval(env)

    def diff(self, name):
        return _add(_mul(self.a.diff(name), self.b),
                    _mul(self.a, self.b.diff(name)))

    def src(self):
        return (self.a._wrap(_node_prec(self.a), _PREC_MUL)
                + "*" + self.b._wrap(_node_prec(self.b), _PREC_MUL))


class _Div(_BinOp):
    def eval(self, env):
        den = self.b.eval(env)
        if np.any(den == 0):
            raise SingularEvaluationError(self.src(), "division by zero")
        return self.a.eval(env) / den

    def diff(self, name):
        num = _sub(_mul(self.a.diff(name), self.b),
                   _mul(self.a, self.b.diff(name)))
        return _div(num, _pow(self.b, _Const(2.0)))

    def src(self):
        return (self.a._wrap(_node_prec(self.a), _PREC_MUL)
                + "/" + self.b._wrap(_node_prec(self.b), _PREC_MUL + 1))


class _Pow(_BinOp):
    def eval(self, env):
        base = self.a.eval(env)
        if isinstance(self.b, _Const):
            e = self.b.value
            if e == int(e):
                if np.any((base == 0) & (e < 0)):
                    raise SingularEvaluationError(self.src(), "zero base with negative exponent")
                return base ** int(e)
        expo = self.b.eval(env)
        if np.any(base < 0):
            raise SingularEvaluationError(self.src(), "negative base with non-integer exponent")
        if np.any((base == 0) & (expo < 0)):
            raise SingularEvaluationError(self.src(), "zero base with negative exponent")
        return base ** expo

    def diff(self, name):
        if isinstance(self.b, _Const):
            e = self.b.value
            return _mul(_mul(self.b, _pow(self.a, _Const(e - 1.0))),
                        self.a.diff(name))
        # u^v with variable exponent: u^v * (v' log u + v u'/u)
        term = _add(_mul(self.b.diff(name), _Call("log", self.a)),
                    _div(_mul(self.b, self.a.diff(name)), self.a))
        return _mul(self, term)

    def src(self):
        # right-associative: left operand needs parens at equal precedence
        return (self.a._wrap(_node_prec(self.a), _PREC_POW + 1)
                + "^" + self.b._wrap(_node_prec(self.b), _PREC_POW))


class _Call(_Node):
    __slots__ = ("fn", "a")

    def __init__(self, fn, a):
        self.fn = fn
        self.a = a

    def eval(self, env):
        x = self.a.eval(env)
        fn = self.fn
        if fn == "sin":
            return np.sin(x)
        if fn == "cos":
            return np.cos(x)
        if fn == "tan":
            return np.tan(x)
        if fn == "cot":
            s = np.sin(x)
            if np.any(s == 0):
                raise SingularEvaluationError(self.src(), "cotangent pole")
            return np.cos(x) / s
        if fn == "exp":
            return np.exp(x)
        if fn == "log":
            if np.any(x <= 0):
                raise SingularEvaluationError(self.src(), "logarithm of non-positive value")
            return np.log(x)
        if fn == "sqrt":
            if np.any(x < 0):
                raise SingularEvaluationError(self.src(), "square root of negative value")
            return np.sqrt(x)
        raise AssertionError(fn)

    def diff(self, name):
        u, du = self.a, self.a.diff(name)
        fn = self.fn
        if fn == "sin":
            outer = _Call("cos", u)
        elif fn == "cos":
            outer = _neg(_Call("sin", u))
        elif fn == "tan":
            outer = _div(_Const(1.0), _pow(_Call("cos", u), _Const(2.0)))
        elif fn == "cot":
            outer = _neg(_div(_Const(1.0), _pow(_Call("sin", u), _Const(2.0))))
        elif fn == "exp":
            outer = self
        elif fn == "log":
            outer = _div(_Const(1.0), u)
        elif fn == "sqrt":
            outer = _div(_Const(1.0), _mul(_Const(2.0), self))
        else:
            raise AssertionError(fn)
        return _mul(outer, du)

    def free_names(self, out):
        self.a.free_names(out)

    def src(self):
        return f"{self.fn}({self.a.src()})"


def _node_prec(node):
    if isinstance(node, (_Const, _Coord, _Call)):
        # negative constants print with a leading sign, bind like unary
        if isinstance(node, _Const) and node.value < 0:
            return _PREC_UNARY
        return _PREC_ATOM
    if isinstance(node, (_Add, _Sub)):
        return _PREC_ADD
    if isinstance(node, (_Mul, _Div)):
        return _PREC_MUL
    if isinstance(node, _Neg):
        return _PREC_UNARY
    if isinstance(node, _Pow):
        return _PREC_POW
    raise AssertionError(type(node))


# folding constructors: collapse constant branches and algebraic identities
# so derivative trees stay small

def _is_const(n, v=None):
    return isinstance(n, _Const) and (v is None or n.value == v)


def _add(a, b):
    if _is_const(a) and _is_const(b):
        return _Const(a.value + b.value)
    if _is_const(a, 0.0):
        return b
    if _is_const(b, 0.0):
        return a
    return _Add(a, b)


def _sub(a, b):
    if _is_const(a) and _is_const(b):
        return _Const(a.value - b.value)
    if _is_const(b, 0.0):
        return a
    if _is_const(a, 0.0):
        return _neg(b)
    return _Sub(a, b)


def _mul(a, b):
    if _is_const(a) and _is_const(b):
        return _Const(a.value * b.value)
    if _is_const(a, 0.0) or _is_const(b, 0.0):
        return _Const(0.0)
    if _is_const(a, 1.0):
        return b
    if _is_const(b, 1.0):
        return a
    return _Mul(a, b)


def _div(a, b):
    if _is_const(a, 0.0):
        return _Const(0.0)
    if _is_const(b, 1.0):
        return a
    if _is_const(a) and _is_const(b) and b.value != 0.0:
        return _Const(a.value / b.value)
    return _Div(a, b)


def _pow(a, b):
    if _is_const(b, 1.0):
        return a
    if _is_const(b, 0.0):
        return _Const(1.0)
    if _is_const(a) and _is_const(b):
        e = b.value
        if e == int(e) and not (a.value == 0 and e < 0):
            return _Const(a.value ** int(e))
        if a.value > 0:
            return _Const(a.value ** e)
    return _Pow(a, b)


def _neg(a):
    if _is_const(a):
        return _Const(-a.value)
    if isinstance(a, _Neg):
        return a.a
    return _Neg(a)


# ---------------------------------------------------------------------------
# tokenizer / parser

_FUNCTIONS = ("sin", "cos", "tan", "cot", "exp", "log", "sqrt")


class _Token:
    __slots__ = ("kind", "text", "column")

    def __init__(self, kind, text, column):
        self.kind = kind
        self.text = text
        self.column = column


def _tokenize(src):
    tokens = []
    i, n = 0, len(src)
    while i < n:
        c = src[i]
        if c in " \t":
            i += 1
            continue
        col = i + 1
        if c in "+-*/^()":
            tokens.append(_Token(c, c, col))
            i += 1
            continue
        if c.isdigit() or (c == "." and i + 1 < n and src[i + 1].isdigit()):
            j = i
            while j < n and src[j].isdigit():
                j += 1
            if j < n and src[j] == ".":
                j += 1
                while j < n and src[j].isdigit():
                    j += 1
            if j < n and src[j] in "eE":
                k = j + 1
                if k < n and src[k] in "+-":
                    k += 1
                if k < n and src[k].isdigit():
                    j = k
                    while j < n and src[j].isdigit():
                        j += 1
            text = src[i:j]
            try:
                float(text)
            except ValueError:
                raise ParseError(f"malformed number '{text}'", col)
            tokens.append(_Token("num", text, col))
            i = j
            continue
        if c.isalpha() or c == "_":
            j = i
            while j < n and (src[j].isalnum() or src[j] == "_"):
                j += 1
            tokens.append(_Token("name", src[i:j], col))
            i = j
            continue
        raise ParseError(f"unexpected character '{c}'", col)
    tokens.append(_Token("end", "", n + 1))
    return tokens


class _Parser:
    def __init__(self, tokens, coords):
        self.tokens = tokens
        self.pos = 0
        self.coords = coords

    def peek(self):
        return self.tokens[self.pos]

    def take(self):
        t = self.tokens[self.pos]
        self.pos += 1
        return t

    def expect(self, kind):
        t = self.peek()
        if t.kind != kind:
            shown = t.text if t.kind != "end" else "end of input"
            raise ParseError(f"expected '{kind}', found {shown!r}" if t.kind != "end"
                             else f"expected '{kind}', found end of input", t.column)
        return self.take()

    def parse(self):
        node = self.expr()
        t = self.peek()
        if t.kind != "end":
            raise ParseError(f"unexpected trailing input {t.text!r}", t.column)
        return node

    def expr(self):
        node = self.term()
        while self.peek().kind in ("+", "-"):
            op = self.take().kind
            rhs = self.term()
            node = _add(node, rhs) if op == "+" else _sub(node, rhs)
        return node

    def term(self):
        node = self.unary()
        while self.peek().kind in ("*", "/"):
            op = self.take().kind
            rhs = self.unary()
            node = _mul(node, rhs) if op == "*" else _div(node, rhs)
        return node

    def unary(self):
        if self.peek().kind == "-":
            self.take()
            return _neg(self.unary())
        return self.power()

    def power(self):
        base = self.atom()
        if self.peek().kind == "^":
            self.take()
            expo = self.unary()  # right-associative, allows x^-2
            return _pow(base, expo)
        return base

    def atom(self):
        t = self.peek()
        if t.kind == "num":
            self.take()
            return _Const(float(t.text))
        if t.kind == "(":
            self.take()
            node = self.expr()
            self.expect(")")
            return node
        if t.kind == "name":
            self.take()
            if t.text in _FUNCTIONS:
                self.expect("(")
                arg = self.expr()
                self.expect(")")
                return _Call(t.text, arg)
            if t.text in self.coords:
                return _Coord(t.text)
            raise ParseError(f"unknown identifier '{t.text}'", t.column)
        shown = "end of input" if t.kind == "end" else repr(t.text)
        raise ParseError(f"expected a value, found {shown}", t.column)


# ---------------------------------------------------------------------------
# public field type

class ScalarField:
    """A smooth scalar function of the chart coordinates.

    Parameters
    ----------
    ast : internal expression node
    coords : tuple of str
        Coordinate names, fixing the argument order for evaluation
        and the axis indices for differentiation.

    Fields support ``+ - * / **`` and unary ``-`` against other fields
    over the same coordinates or plain numbers.
    """

    __slots__ = ("ast", "coords")

    def __init__(self, ast, coords):
        self.ast = ast
        self.coords = tuple(coords)

    # -- construction helpers

    @classmethod
    def constant(cls, value, coords):
        return cls(_Const(float(value)), coords)

    @classmethod
    def coordinate(cls, name, coords):
        if name not in coords:
            raise ValueError(f"'{name}' is not one of {coords}")
        return cls(_Coord(name), coords)

    # -- evaluation

    def __call__(self, *point):
        if len(point) == 1 and isinstance(point[0], (list, tuple, np.ndarray)) \
                and len(self.coords) != 1:
            point = tuple(point[0])
        if len(point) != len(self.coords):
            raise ValueError(
                f"expected {len(self.coords)} coordinate values, got {len(point)}")
        env = dict(zip(self.coords, point))
        return self.ast.eval(env)

    def on_grid(self, mesh):
        """Evaluate on broadcastable coordinate arrays (one per coordinate)."""
        if len(mesh) != len(self.coords):
            raise ValueError("mesh arity does not match coordinates")
        env = dict(zip(self.coords, mesh))
        out = self.ast.eval(env)
        if np.isscalar(out) or np.ndim(out) == 0:
            out = np.full(np.broadcast(*mesh).shape, float(out))
        return np.asarray(out, dtype=float)

    # -- calculus

    def diff(self, mu):
        if isinstance(mu, str):
            if mu not in self.coords:
                raise ValueError(f"unknown coordinate {mu!r}; have {self.coords}")
            name = mu
        else:
            name = self.coords[mu]
        return ScalarField(self.ast.diff(name), self.coords)

    # -- algebra (used when assembling induced connections and gauges)

    def _coerce(self, other):
        if isinstance(other, ScalarField):
            if other.coords != self.coords:
                raise ValueError("fields live on different coordinate tuples")
            return other
        return ScalarField.constant(other, self.coords)

    def __add__(self, other):
        return ScalarField(_add(self.ast, self._coerce(other).ast), self.coords)

    __radd__ = __add__

    def __sub__(self, other):
        return ScalarField(_sub(self.ast, self._coerce(other).ast), self.coords)

    def __rsub__(self, other):
        return ScalarField(_sub(self._coerce(other).ast, self.ast), self.coords)

    def __mul__(self, other):
        return ScalarField(_mul(self.ast, self._coerce(other).ast), self.coords)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return ScalarField(_div(self.ast, self._coerce(other).ast), self.coords)

    def __rtruediv__(self, other):
        return ScalarField(_div(self._coerce(other).ast, self.ast), self.coords)

    def __pow__(self, other):
        return ScalarField(_pow(self.ast, self._coerce(other).ast), self.coords)

    def __neg__(self):
        return ScalarField(_neg(self.ast), self.coords)

    def is_zero(self):
        return _is_const(self.ast, 0.0)

    def free_coordinates(self):
        out = set()
        self.ast.free_names(out)
        return out

    def __str__(self):
        return self.ast.src()

    def __repr__(self):
        return f"ScalarField({self.ast.src()!r}, coords={self.coords})"


def parse_scalar_field(src, coords):
    """Parse ``src`` into a :class:`ScalarField` over the named coordinates.

    Raises :class:`ParseError` (with a 1-based ``column``) on syntax errors
    or identifiers that are neither functions nor coordinates.
    """
    coords = tuple(coords)
    tokens = _tokenize(src)
    ast = _Parser(tokens, coords).parse()
    return ScalarField(ast, coords)


def derivative(f, mu):
    """Exact partial derivative of ``f`` along coordinate ``mu`` (index or name)."""
    return f.diff(mu)


def evaluate(f, point):
    """Evaluate ``f`` at a point (sequence of floats, or arrays to broadcast)."""
    return f(*point)
