"""Arithmetic expressions for analytic potentials in config files.

Grammar: numbers, ``+ - * / ^`` (``^`` is power), parentheses, the
functions ``sin cos tan exp log sqrt abs max min tanh``, the constant
``pi``, the coordinates ``x1 x2 x3 r theta`` and any named constants
supplied by the caller.  ``r`` is the Euclidean
norm of the point and ``theta`` the polar angle of its last two
coordinates.  Expressions are parsed with :mod:`ast` and evaluated on
numpy arrays by walking a whitelisted tree.
"""

from __future__ import annotations

import ast
import operator
from typing import Callable, Optional

import numpy as np

from .errors import ConfigurationError

_FUNCS = {
    "sin": np.sin,
    "cos": np.cos,
    "tan": np.tan,
    "exp": np.exp,
    "log": np.log,
    "sqrt": np.sqrt,
    "abs": np.abs,
    "tanh": np.tanh,
    "max": np.maximum,
    "min": np.minimum,
}
_BIN = {
    ast.Add: operator.add,
    ast.Sub: operator.sub,
    ast.Mult: operator.mul,
    ast.Div: operator.truediv,
    ast.Pow: operator.pow,
}
_UN = {ast.UAdd: operator.pos, ast.USub: operator.neg}
COORDS = ("x1", "x2", "x3", "r", "theta")


def _check(node, names):
    if isinstance(node, ast.Expression):
        return _check(node.body, names)
    if isinstance(node, ast.Constant):
        if not isinstance(node.value, (int, float)) or isinstance(node.value, bool):
            raise ConfigurationError(f"unsupported constant {node.value!r}")
        return
    if isinstance(node, ast.Name):
        if node.id not in names:
            raise ConfigurationError(f"unknown name {node.id!r}")
        return
    if isinstance(node, ast.BinOp) and type(node.op) in _BIN:
        _check(node.left, names)
        _check(node.right, names)
        return
    if isinstance(node, ast.UnaryOp) and type(node.op) in _UN:
        _check(node.operand, names)
        return
    if isinstance(node, ast.Call) and isinstance(node.func, ast.Name) and node.func.id in _FUNCS and not node.keywords:
        for a in node.args:
            _check(a, names)
        return
    raise ConfigurationError(f"unsupported syntax: {ast.dump(node)[:60]}")


def _eval(node, env):
    if isinstance(node, ast.Constant):
        return float(node.value)
    if isinstance(node, ast.Name):
        return env[node.id]
    if isinstance(node, ast.BinOp):
        return _BIN[type(node.op)](_eval(node.left, env), _eval(node.right, env))
    if isinstance(node, ast.UnaryOp):
        return _UN[type(node.op)](_eval(node.operand, env))
    return _FUNCS[node.func.id](*[_eval(a, env) for a in node.args])


class Expression:
    """Compiled expression; call with points of shape ``(..., d)``."""

    def __init__(self, text: str, constants: Optional[dict] = None):
        self.text = text.strip()
        self.constants = {k: float(v) for k, v in (constants or {}).items()}
        for k in self.constants:
            if k in COORDS or k in _FUNCS or not k.isidentifier():
                raise ConfigurationError(f"invalid constant name {k!r}")
        if not self.text:
            raise ConfigurationError("empty expression")
        try:
            tree = ast.parse(self.text.replace("^", "**"), mode="eval")
        except SyntaxError as exc:
            raise ConfigurationError(f"cannot parse {text!r}: {exc.msg}") from None
        _check(tree, set(COORDS) | {"pi"} | set(self.constants))
        self.tree = tree.body

    def __call__(self, points) -> np.ndarray:
        p = np.asarray(points, float)
        d = p.shape[-1]
        env = {f"x{k + 1}": p[..., k] if k < d else np.zeros(p.shape[:-1]) for k in range(3)}
        env["r"] = np.sqrt(np.sum(p * p, axis=-1))
        env["theta"] = np.arctan2(p[..., -1], p[..., -2]) if d >= 2 else np.zeros(p.shape[:-1])
        env["pi"] = np.pi
        env.update(self.constants)
        out = _eval(self.tree, env)
        return np.broadcast_to(np.asarray(out, float), p.shape[:-1]).copy()

    def __repr__(self):
        return f"Expression({self.text!r})"


def compile_form(texts, constants: Optional[dict] = None) -> Callable:
    """One-form from component expressions: ``points -> (d, ...)``."""
    exprs = [Expression(t, constants) for t in texts]

    def form(points):
        return np.stack([e(points) for e in exprs])

    form.texts = tuple(texts)
    return form
