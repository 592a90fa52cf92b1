"""A tiny, serializable expression language for functions of one trait ``x``.

Model rates, selection functions and test functions are written as strings
such as ``"x - 0.5"``, ``"exp(-2*x) + min(x, 0.3)"`` or
``"piecewise(0, 0.5, 1)"`` so that experiment configs stay plain text and
reproducible.  Expressions are parsed once with :mod:`ast`, checked against a
whitelist, and evaluated elementwise on numpy arrays.

Grammar
-------
* the identifier ``x`` and the constants ``e``, ``pi``
* numeric literals
* binary ``+ - * /`` and ``^`` (or ``**``) for powers, unary ``-``
* ``exp``, ``log``, ``sqrt``, ``abs``
* ``min(a, b, ...)`` and ``max(a, b, ...)``, elementwise
* ``piecewise(v0, b1, v1, b2, v2, ...)``: ``v0`` for ``x < b1``, ``v1`` for
  ``b1 <= x < b2`` and so on; breakpoints must be increasing numeric literals.
"""

from __future__ import annotations

import ast
import math

import numpy as np

__all__ = ["Expr", "DSLError", "parse"]


class DSLError(ValueError):
    """Raised for syntax errors or disallowed constructs in an expression."""


_UNARY_FUNCS = {
    "exp": np.exp,
    "log": np.log,
    "sqrt": np.sqrt,
    "abs": np.abs,
}
_CONSTANTS = {"e": math.e, "pi": math.pi}
_BINOPS = {
    ast.Add: np.add,
    ast.Sub: np.subtract,
    ast.Mult: np.multiply,
    ast.Div: np.divide,
    ast.Pow: np.power,
}


def _literal(node):
    if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)):
        return float(node.value)
    if isinstance(node, ast.UnaryOp) and isinstance(node.op, (ast.USub, ast.UAdd)):
        v = _literal(node.operand)
        if v is not None:
            return -v if isinstance(node.op, ast.USub) else v
    return None


def _check(node, source):
    if isinstance(node, ast.Expression):
        _check(node.body, source)
    elif isinstance(node, ast.BinOp):
        if type(node.op) not in _BINOPS:
            raise DSLError(f"operator {type(node.op).__name__} not allowed in {source!r}")
        _check(node.left, source)
        _check(node.right, source)
    elif isinstance(node, ast.UnaryOp):
        if not isinstance(node.op, (ast.USub, ast.UAdd)):
            raise DSLError(f"unary operator not allowed in {source!r}")
        _check(node.operand, source)
    elif isinstance(node, ast.Constant):
        if isinstance(node.value, bool) or not isinstance(node.value, (int, float)):
            raise DSLError(f"only numeric literals are allowed in {source!r}")
    elif isinstance(node, ast.Name):
        if node.id != "x" and node.id not in _CONSTANTS:
            raise DSLError(f"unknown identifier {node.id!r} in {source!r}")
    elif isinstance(node, ast.Call):
        if not isinstance(node.func, ast.Name) or node.keywords:
            raise DSLError(f"malformed call in {source!r}")
        name = node.func.id
        nargs = len(node.args)
        if name in _UNARY_FUNCS:
            if nargs != 1:
                raise DSLError(f"{name} takes one argument in {source!r}")
        elif name in ("min", "max"):
            if nargs < 2:
                raise DSLError(f"{name} needs at least two arguments in {source!r}")
        elif name == "piecewise":
            if nargs < 3 or nargs % 2 == 0:
                raise DSLError(f"piecewise needs v0, b1, v1[, b2, v2 ...] in {source!r}")
            bps = [_literal(a) for a in node.args[1::2]]
            if any(b is None for b in bps):
                raise DSLError(f"piecewise breakpoints must be numbers in {source!r}")
            if any(b2 <= b1 for b1, b2 in zip(bps, bps[1:])):
                raise DSLError(f"piecewise breakpoints must increase in {source!r}")
        else:
            raise DSLError(f"unknown function {name!r} in {source!r}")
        for a in node.args:
            _check(a, source)
    else:
        raise DSLError(f"construct {type(node).__name__} not allowed in {source!r}")


def _eval(node, x):
    if isinstance(node, ast.BinOp):
        return _BINOPS[type(node.op)](_eval(node.left, x), _eval(node.right, x))
    if isinstance(node, ast.UnaryOp):
        v = _eval(node.operand, x)
        return -v if isinstance(node.op, ast.USub) else v
    if isinstance(node, ast.Constant):
        return float(node.value)
    if isinstance(node, ast.Name):
        return x if node.id == "x" else _CONSTANTS[node.id]
    # calls
    name = node.func.id
    args = [_eval(a, x) for a in node.args]
    if name in _UNARY_FUNCS:
        return _UNARY_FUNCS[name](args[0])
    if name == "min":
        out = args[0]
        for a in args[1:]:
            out = np.minimum(out, a)
        return out
    if name == "max":
        out = args[0]
        for a in args[1:]:
            out = np.maximum(out, a)
        return out
    # piecewise
    values = args[0::2]
    breaks = [_literal(a) for a in node.args[1::2]]
    idx = np.searchsorted(np.asarray(breaks), x, side="right")
    out = np.zeros(np.shape(x))
    for i, v in enumerate(values):
        out = np.where(idx == i, v, out)
    return out


class Expr:
    """A parsed expression in ``x``, callable on scalars or arrays.

    >>> Expr("2*x^2 + 1")(np.array([0.0, 1.0]))
    array([1., 3.])
    """

    __slots__ = ("source", "_tree")

    def __init__(self, source):
        if isinstance(source, Expr):
            source = source.source
        source = str(source).strip()
        if not source:
            raise DSLError("empty expression")
        try:
            tree = ast.parse(source.replace("^", "**"), mode="eval")
        except SyntaxError as exc:
            raise DSLError(f"cannot parse {source!r}: {exc.msg}") from None
        _check(tree, source)
        self.source = source
        self._tree = tree

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            out = _eval(self._tree.body, x)
        return np.broadcast_to(np.asarray(out, dtype=float), x.shape).copy()

    @property
    def is_constant(self):
        return not any(isinstance(n, ast.Name) and n.id == "x" for n in ast.walk(self._tree))

    def __repr__(self):
        return f"Expr({self.source!r})"

    def __str__(self):
        return self.source

    def __eq__(self, other):
        return isinstance(other, Expr) and other.source == self.source

    def __hash__(self):
        return hash(("Expr", self.source))

    def __reduce__(self):
        return (Expr, (self.source,))


def parse(source):
    """Parse ``source`` into an :class:`Expr`, raising :class:`DSLError` on failure."""
    return Expr(source)
