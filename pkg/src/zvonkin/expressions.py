"""A minimal, safe arithmetic-expression evaluator for coefficient entries.

Expressions such as ``"x2 - kappa*sgn(x1)"`` are parsed with :mod:`ast` and
checked against a whitelist (numbers, variables ``x1..xd``, named parameters,
``+ - * / ^ **``, and the functions ``sgn``, ``exp``, ``abs``).  The result is a
vectorised callable mapping an ``(n, d)`` array of points to ``(n,)`` values.
"""

from __future__ import annotations

import ast
import re
from collections.abc import Callable, Mapping

import numpy as np

from .errors import InputError

FUNCTIONS: dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "sgn": np.sign,
    "exp": np.exp,
    "abs": np.abs,
}

_BINOPS = {
    ast.Add: np.add,
    ast.Sub: np.subtract,
    ast.Mult: np.multiply,
    ast.Div: np.divide,
    ast.Pow: np.power,
}

_VAR = re.compile(r"^x([1-9][0-9]*)$")


class Expression:
    """A compiled scalar expression in the variables ``x1..xd``.

    Parameters
    ----------
    source:
        Expression text.  ``^`` means exponentiation.
    dim:
        Number of state variables available.
    params:
        Named constants that may appear in the expression.
    aliases:
        Extra variable names mapped to a coordinate index (0-based), e.g.
        ``{"y": 1}`` so that a threshold ``b(y)`` can be written in ``y``.
    """

    def __init__(
        self,
        source: str,
        dim: int,
        params: Mapping[str, float] | None = None,
        aliases: Mapping[str, int] | None = None,
    ):
        if not isinstance(source, str) or not source.strip():
            raise InputError("expression must be a non-empty string")
        self.source = source
        self.dim = int(dim)
        self.params = {k: float(v) for k, v in (params or {}).items()}
        self.aliases = dict(aliases or {})
        try:
            tree = ast.parse(source.replace("^", "**"), mode="eval")
        except SyntaxError as exc:
            raise InputError(f"cannot parse expression {source!r}: {exc.msg}") from None
        self._check(tree.body)
        self._tree = tree.body
        self.variables = sorted(self._collect_vars(tree.body))

    # -- validation -------------------------------------------------------
    def _resolve(self, name: str) -> int | float:
        m = _VAR.match(name)
        if m:
            idx = int(m.group(1)) - 1
            if idx >= self.dim:
                raise InputError(f"variable {name} exceeds dimension {self.dim}")
            return idx
        if name in self.aliases:
            return int(self.aliases[name])
        if name in self.params:
            return self.params[name]
        raise InputError(f"unknown name {name!r} in expression {self.source!r}")

    def _check(self, node: ast.AST) -> None:
        if isinstance(node, ast.BinOp):
            if type(node.op) not in _BINOPS:
                raise InputError(f"operator {type(node.op).__name__} not allowed")
            self._check(node.left)
            self._check(node.right)
        elif isinstance(node, ast.UnaryOp):
            if not isinstance(node.op, (ast.UAdd, ast.USub)):
                raise InputError(f"operator {type(node.op).__name__} not allowed")
            self._check(node.operand)
        elif isinstance(node, ast.Call):
            if not isinstance(node.func, ast.Name) or node.func.id not in FUNCTIONS:
                raise InputError(f"only {sorted(FUNCTIONS)} may be called")
            if len(node.args) != 1 or node.keywords:
                raise InputError(f"{node.func.id}() takes exactly one argument")
            self._check(node.args[0])
        elif isinstance(node, ast.Name):
            self._resolve(node.id)
        elif isinstance(node, ast.Constant):
            if isinstance(node.value, bool) or not isinstance(node.value, (int, float)):
                raise InputError(f"constant {node.value!r} is not a number")
        else:
            raise InputError(f"syntax {type(node).__name__} not allowed in expressions")

    def _collect_vars(self, node: ast.AST) -> set[int]:
        out: set[int] = set()
        callees = {id(sub.func) for sub in ast.walk(node) if isinstance(sub, ast.Call)}
        for sub in ast.walk(node):
            if isinstance(sub, ast.Name) and id(sub) not in callees and not isinstance(self._resolve(sub.id), float):
                out.add(int(self._resolve(sub.id)))
        return out

    # -- evaluation -------------------------------------------------------
    def _eval(self, node: ast.AST, x: np.ndarray) -> np.ndarray | float:
        if isinstance(node, ast.BinOp):
            return _BINOPS[type(node.op)](self._eval(node.left, x), self._eval(node.right, x))
        if isinstance(node, ast.UnaryOp):
            val = self._eval(node.operand, x)
            return -val if isinstance(node.op, ast.USub) else val
        if isinstance(node, ast.Call):
            return FUNCTIONS[node.func.id](self._eval(node.args[0], x))
        if isinstance(node, ast.Name):
            ref = self._resolve(node.id)
            return ref if isinstance(ref, float) else x[:, ref]
        return float(node.value)  # ast.Constant

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        pts = x.reshape(-1, self.dim)
        with np.errstate(all="ignore"):
            val = self._eval(self._tree, pts)
        out = np.broadcast_to(np.asarray(val, dtype=float), (pts.shape[0],)).copy()
        return out.reshape(x.shape[:-1])

    @property
    def is_constant(self) -> bool:
        return not self.variables

    def __repr__(self) -> str:
        return f"Expression({self.source!r}, dim={self.dim})"
