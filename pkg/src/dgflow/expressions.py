"""Small arithmetic expressions used by scenario files.

Scenario JSON may declare an energy, a dissipation potential or a friction
coefficient as a string such as ``"(1 + t) * x**2 / 2"``.  The string is
parsed with sympy, differentiated symbolically and compiled with
``lambdify`` into numpy-vectorised callables.

Variable names
--------------
``t``
    time.
``x`` or ``x1 .. xn``
    state components (``x`` is accepted when ``n == 1``).
``v`` or ``v1 .. vn``
    velocity components for dissipation potentials.
"""
from __future__ import annotations

import numpy as np
import sympy as sp

_ALLOWED_FUNCS = {
    "sin": sp.sin, "cos": sp.cos, "tan": sp.tan, "exp": sp.exp, "log": sp.log,
    "sqrt": sp.sqrt, "abs": sp.Abs, "Abs": sp.Abs, "tanh": sp.tanh,
    "cosh": sp.cosh, "sinh": sp.sinh, "atan": sp.atan, "pi": sp.pi, "E": sp.E,
}


class ExpressionError(ValueError):
    """Raised when an expression string cannot be parsed or uses unknown names."""


def state_symbols(prefix: str, dim: int) -> list[sp.Symbol]:
    return [sp.Symbol(f"{prefix}{i + 1}", real=True) for i in range(dim)]


def parse(expr: str, prefix: str, dim: int, with_time: bool = True):
    """Parse ``expr`` into a sympy expression.

    Returns ``(expression, t_symbol, [component symbols])``.
    """
    if not isinstance(expr, str) or not expr.strip():
        raise ExpressionError("expression must be a non-empty string")
    t = sp.Symbol("t", real=True)
    comps = state_symbols(prefix, dim)
    local = dict(_ALLOWED_FUNCS)
    local.update({str(c): c for c in comps})
    if dim == 1:
        local[prefix] = comps[0]
    if with_time:
        local["t"] = t
    try:
        parsed = sp.sympify(expr, locals=local, convert_xor=True)
    except (sp.SympifyError, SyntaxError, TypeError) as exc:
        raise ExpressionError(f"cannot parse expression {expr!r}: {exc}") from exc
    allowed = set(comps) | ({t} if with_time else set())
    unknown = parsed.free_symbols - allowed
    if unknown:
        names = ", ".join(sorted(str(s) for s in unknown))
        raise ExpressionError(f"unknown names in {expr!r}: {names}")
    return parsed, t, comps


def _lambdify(fn_expr, args):
    f = sp.lambdify(args, fn_expr, modules="numpy")

    def call(*vals):
        out = f(*vals)
        shape = np.broadcast(*vals).shape
        return np.broadcast_to(np.asarray(out, dtype=float), shape).astype(float)

    return call


class CompiledField:
    """A scalar field ``f(t, x)`` with symbolic first and second derivatives.

    Calls take ``t`` with shape ``(...)`` and ``x`` with shape ``(..., n)``.
    """

    def __init__(self, expr: str, dim: int, prefix: str = "x", with_time: bool = True):
        self.source = expr
        self.dim = dim
        self.expr, t, comps = parse(expr, prefix, dim, with_time)
        self.time_dependent = with_time and t in self.expr.free_symbols
        args = [t, *comps]
        self._f = _lambdify(self.expr, args)
        grad = [sp.diff(self.expr, c) for c in comps]
        self._grad = [_lambdify(g, args) for g in grad]
        self._hess = [[_lambdify(sp.diff(g, c), args) for c in comps] for g in grad]
        self._dt = _lambdify(sp.diff(self.expr, t), args)
        self._dt_grad = [_lambdify(sp.diff(g, t), args) for g in grad]

    def _args(self, t, x):
        x = np.asarray(x, dtype=float)
        t = np.broadcast_to(np.asarray(t, dtype=float), x.shape[:-1])
        return [t, *[x[..., i] for i in range(self.dim)]]

    def value(self, t, x):
        return self._f(*self._args(t, x))

    def grad(self, t, x):
        a = self._args(t, x)
        return np.stack([g(*a) for g in self._grad], axis=-1)

    def hess(self, t, x):
        a = self._args(t, x)
        return np.stack([np.stack([h(*a) for h in row], axis=-1) for row in self._hess], axis=-2)

    def dt(self, t, x):
        return self._dt(*self._args(t, x))

    def dt_grad(self, t, x):
        a = self._args(t, x)
        return np.stack([g(*a) for g in self._dt_grad], axis=-1)
