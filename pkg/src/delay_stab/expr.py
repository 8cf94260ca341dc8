"""Small arithmetic expressions for configuration values and initial profiles.

Grammar: numbers, ``pi``, ``e``, one free variable (``x`` for profiles,
``tau`` for output histories), ``+ - * /``, ``**`` or ``^`` for powers,
parentheses and the functions ``sin cos tan exp log sqrt abs``.  Parsing
goes through :mod:`ast`; nothing is ever passed to ``eval``.

>>> f = compile_expression("5*x^2*(x - 3/4)", "x")
>>> float(f(1.0))
1.25
"""
from __future__ import annotations

import ast
import math
import operator

import numpy as np

from .errors import ParseError

_BINARY = {
    ast.Add: operator.add,
    ast.Sub: operator.sub,
    ast.Mult: operator.mul,
    ast.Div: operator.truediv,
    ast.Pow: operator.pow,
}
_UNARY = {ast.UAdd: operator.pos, ast.USub: operator.neg}
_FUNCTIONS = {
    "sin": np.sin, "cos": np.cos, "tan": np.tan, "exp": np.exp,
    "log": np.log, "sqrt": np.sqrt, "abs": np.abs,
}
_CONSTANTS = {"pi": math.pi, "e": math.e}


def _build(node, variable, text):
    if isinstance(node, ast.Expression):
        return _build(node.body, variable, text)
    if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)) and not isinstance(node.value, bool):
        v = float(node.value)
        return lambda arg: v
    if isinstance(node, ast.Name):
        if variable is not None and node.id == variable:
            return lambda arg: arg
        if node.id in _CONSTANTS:
            v = _CONSTANTS[node.id]
            return lambda arg: v
        raise ParseError(f"unknown name {node.id!r} in {text!r}", operation="compile_expression")
    if isinstance(node, ast.BinOp) and type(node.op) in _BINARY:
        op = _BINARY[type(node.op)]
        left, right = _build(node.left, variable, text), _build(node.right, variable, text)
        return lambda arg: op(left(arg), right(arg))
    if isinstance(node, ast.UnaryOp) and type(node.op) in _UNARY:
        op = _UNARY[type(node.op)]
        inner = _build(node.operand, variable, text)
        return lambda arg: op(inner(arg))
    if isinstance(node, ast.Call) and isinstance(node.func, ast.Name) and node.func.id in _FUNCTIONS:
        if len(node.args) != 1 or node.keywords:
            raise ParseError(f"{node.func.id} takes exactly one argument in {text!r}",
                             operation="compile_expression")
        fn = _FUNCTIONS[node.func.id]
        inner = _build(node.args[0], variable, text)
        return lambda arg: fn(inner(arg))
    raise ParseError(f"unsupported syntax {ast.dump(node)[:40]}... in {text!r}", operation="compile_expression")


def compile_expression(text, variable=None):
    """Vectorised callable of one variable (the argument is ignored when
    ``variable`` is None)."""
    if not isinstance(text, str) or not text.strip():
        raise ParseError("empty expression", operation="compile_expression")
    try:
        tree = ast.parse(text.strip().replace("^", "**"), mode="eval")
    except SyntaxError as exc:
        raise ParseError(f"cannot parse {text!r}: {exc.msg}", operation="compile_expression") from exc
    body = _build(tree, variable, text)

    def fn(arg):
        out = body(np.asarray(arg, dtype=float) if np.ndim(arg) else float(arg))
        if np.ndim(arg):
            return np.broadcast_to(np.asarray(out, dtype=float), np.shape(arg)).copy()
        return float(out)

    fn.expression = text
    return fn


def evaluate_number(text):
    """Value of a constant expression such as ``pi/5``."""
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        value = compile_expression(text)(0.0)
    if not math.isfinite(value):
        raise ParseError(f"{text!r} is not finite", operation="evaluate_number")
    return value
