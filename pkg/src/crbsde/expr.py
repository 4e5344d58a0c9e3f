"""Tiny arithmetic language for drivers, obstacles and terminal values.

Grammar: numbers, the variables ``t``, ``y``, ``z``, ``w``, binary ``+ - *``,
unary ``-``/``+``, parentheses and ``min(...)``/``max(...)`` with two or more
arguments. Every expression is a total function on the reals. Parsing reuses
Python's tokenizer, then rejects anything outside the whitelist.
"""

from __future__ import annotations

import ast
import operator
from functools import reduce

import numpy as np

from .errors import ExpressionError

VARIABLES = ("t", "y", "z", "w")
_BINOPS = {ast.Add: operator.add, ast.Sub: operator.sub, ast.Mult: operator.mul}
_FUNCS = {"min": np.minimum, "max": np.maximum}


class Expression:
    """Compiled expression; call with keyword arrays for the variables it uses."""

    def __init__(self, text):
        if isinstance(text, (int, float)) and not isinstance(text, bool):
            text = repr(float(text))
        if not isinstance(text, str):
            raise ExpressionError(f"expression must be a string or number, got {type(text).__name__}")
        self.text = text
        try:
            tree = ast.parse(text.strip(), mode="eval")
        except SyntaxError as exc:
            pos = (exc.offset - 1) if exc.offset else None
            raise ExpressionError(f"cannot parse {text!r}: {exc.msg}", pos) from None
        self.variables = set()
        self._fn = self._compile(tree.body)

    def _compile(self, node):
        if isinstance(node, ast.Constant):
            if isinstance(node.value, bool) or not isinstance(node.value, (int, float)):
                raise ExpressionError(f"unsupported literal {node.value!r}", node.col_offset)
            value = float(node.value)
            return lambda env: value
        if isinstance(node, ast.Name):
            if node.id not in VARIABLES:
                raise ExpressionError(f"unknown variable {node.id!r}", node.col_offset)
            name = node.id
            self.variables.add(name)
            return lambda env: env[name]
        if isinstance(node, ast.BinOp) and type(node.op) in _BINOPS:
            op = _BINOPS[type(node.op)]
            left, right = self._compile(node.left), self._compile(node.right)
            return lambda env: op(left(env), right(env))
        if isinstance(node, ast.UnaryOp) and isinstance(node.op, (ast.USub, ast.UAdd)):
            inner = self._compile(node.operand)
            if isinstance(node.op, ast.USub):
                return lambda env: -inner(env)
            return inner
        if isinstance(node, ast.Call):
            if not isinstance(node.func, ast.Name) or node.func.id not in _FUNCS:
                raise ExpressionError("only min(...) and max(...) may be called", node.col_offset)
            if node.keywords or len(node.args) < 2:
                raise ExpressionError(f"{node.func.id} needs two or more positional arguments", node.col_offset)
            fn = _FUNCS[node.func.id]
            args = [self._compile(a) for a in node.args]
            return lambda env: reduce(fn, (a(env) for a in args))
        op = getattr(node, "op", None)
        what = type(op).__name__ if op is not None else type(node).__name__
        raise ExpressionError(f"unsupported construct {what}", getattr(node, "col_offset", None))

    @property
    def state_dependent(self):
        return bool(self.variables & {"y", "z"})

    def __call__(self, t=0.0, y=0.0, z=0.0, w=0.0):
        env = {"t": t, "y": y, "z": z, "w": w}
        return np.asarray(self._fn(env), dtype=float)

    def __repr__(self):
        return f"Expression({self.text!r})"

    def __eq__(self, other):
        return isinstance(other, Expression) and other.text == self.text

    def __hash__(self):
        return hash(self.text)


def parse(text):
    return Expression(text)
