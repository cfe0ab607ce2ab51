"""Tiny arithmetic expression language for config-supplied coefficients and data.

Grammar: numbers, ``+ - * / **``, parentheses, unary minus, the names
``x``, ``y``, ``t``, ``pi`` and one-argument calls ``sin``, ``cos``, ``exp``.
Expressions are parsed with :mod:`ast` and checked node by node; nothing is
passed to ``eval``.
"""

from __future__ import annotations

import ast
import math
import operator
from dataclasses import dataclass
from typing import Callable

import numpy as np

FUNCTIONS: dict[str, Callable] = {"sin": np.sin, "cos": np.cos, "exp": np.exp}
CONSTANTS = {"pi": math.pi}
VARIABLES = ("x", "y", "t")

_BINARY = {
    ast.Add: operator.add,
    ast.Sub: operator.sub,
    ast.Mult: operator.mul,
    ast.Div: operator.truediv,
    ast.Pow: operator.pow,
}
_UNARY = {ast.USub: operator.neg, ast.UAdd: operator.pos}


class ExpressionError(ValueError):
    """Raised for text outside the expression grammar."""


def _compile(node: ast.AST, source: str) -> Callable[[dict], np.ndarray]:
    if isinstance(node, ast.Expression):
        return _compile(node.body, source)
    if isinstance(node, ast.Constant) and type(node.value) in (int, float):
        value = float(node.value)
        return lambda env: value
    if isinstance(node, ast.Name):
        if node.id in CONSTANTS:
            value = CONSTANTS[node.id]
            return lambda env: value
        if node.id in VARIABLES:
            name = node.id
            return lambda env: env[name]
        raise ExpressionError(f"unknown name {node.id!r} in {source!r}")
    if isinstance(node, ast.BinOp) and type(node.op) in _BINARY:
        op = _BINARY[type(node.op)]
        left, right = _compile(node.left, source), _compile(node.right, source)
        return lambda env: op(left(env), right(env))
    if isinstance(node, ast.UnaryOp) and type(node.op) in _UNARY:
        op = _UNARY[type(node.op)]
        inner = _compile(node.operand, source)
        return lambda env: op(inner(env))
    if isinstance(node, ast.Call):
        if not isinstance(node.func, ast.Name) or node.func.id not in FUNCTIONS:
            raise ExpressionError(f"only {sorted(FUNCTIONS)} may be called in {source!r}")
        if len(node.args) != 1 or node.keywords:
            raise ExpressionError(f"{node.func.id} takes exactly one argument in {source!r}")
        fn = FUNCTIONS[node.func.id]
        arg = _compile(node.args[0], source)
        return lambda env: fn(arg(env))
    if isinstance(node, ast.BinOp) and isinstance(node.op, ast.BitXor):
        raise ExpressionError(f"use ** for powers in {source!r}")
    raise ExpressionError(f"unsupported syntax {type(node).__name__} in {source!r}")


@dataclass(frozen=True)
class Expression:
    """Compiled expression; call with node coordinates ``(n, d)`` and a time."""

    source: str
    _fn: Callable = None  # type: ignore[assignment]

    @classmethod
    def parse(cls, text: str | int | float) -> "Expression":
        if isinstance(text, bool):
            raise ExpressionError("expected an expression, got a boolean")
        if isinstance(text, (int, float)):
            text = repr(float(text))
        if not isinstance(text, str):
            raise ExpressionError(f"expected an expression string, got {type(text).__name__}")
        try:
            tree = ast.parse(text.strip(), mode="eval")
        except SyntaxError as exc:
            raise ExpressionError(f"cannot parse {text!r}: {exc.msg}") from None
        return cls(text, _compile(tree, text))

    @property
    def names(self) -> set[str]:
        tree = ast.parse(self.source.strip(), mode="eval")
        return {n.id for n in ast.walk(tree) if isinstance(n, ast.Name)}

    def __call__(self, points: np.ndarray, t: float = 0.0) -> np.ndarray:
        points = np.atleast_2d(np.asarray(points, dtype=float))
        env = {
            "x": points[:, 0],
            "y": points[:, 1] if points.shape[1] > 1 else np.zeros(len(points)),
            "t": float(t),
        }
        with np.errstate(all="ignore"):
            out = np.broadcast_to(np.asarray(self._fn(env), dtype=float), (len(points),))
        return np.array(out)


def parse_expression(text: str | int | float) -> Expression:
    return Expression.parse(text)
