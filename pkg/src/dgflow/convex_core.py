"""Dissipation potentials, Fenchel conjugates and subgradient selection.

A dissipation potential is a convex, superlinear function of the velocity,
optionally modulated by a positive friction coefficient::

    psi(t, x, v) = a(t, x) * psi0(v) + shift

with conjugate ``psi*(t, x, z) = a * psi0*(z / a) - shift``.  All functions
accept batched input: vectors live on the last axis and every leading axis
is broadcast, which is what the quadrature and grid solvers rely on.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable, Optional

import numpy as np
from scipy.optimize import minimize

__all__ = [
    "DissipationPotential",
    "DomainError",
    "DimensionError",
    "UnboundedConjugateError",
    "evaluate",
    "conjugate",
    "conjugate_gradient",
    "subdifferential_select",
    "fenchel_gap",
    "numeric_conjugate",
    "golden_section_max",
]

TOL_GAP = 1e-8
CONJ_RADIUS = 1e3
MAX_NUMERIC_DIM = 4
_GRID_POINTS = {1: 51, 2: 51, 3: 21, 4: 11}
_INVPHI = (math.sqrt(5.0) - 1.0) / 2.0


class DomainError(ValueError):
    """The velocity lies outside the effective domain (or where the subdifferential is empty)."""


class DimensionError(ValueError):
    """Vector length does not match the declared dimension."""


class UnboundedConjugateError(ArithmeticError):
    """The numeric conjugate maximiser escaped to the search radius."""


@dataclass(frozen=True)
class DissipationPotential:
    """Convex superlinear dissipation ``psi(t, x, v) = a(t, x) psi0(v) + shift``.

    Parameters
    ----------
    family : {"quadratic", "power", "entropy", "custom"}
        ``quadratic``: ``weight * |v|^2 / 2``.  ``power``: ``|v|^p / p``.
        ``entropy``: ``sum v_i (log v_i - 1)`` on ``v >= 0``, ``+inf`` elsewhere.
        ``custom``: user callable ``func(v) -> float`` on a single vector.
    dim : int
        Dimension of the velocity space.
    friction : object with ``value(t, x)`` and ``grad(t, x)``, optional
        Positive friction coefficient, see :class:`dgflow.energy_models.FrictionField`.
    domain : callable, optional
        For custom potentials, predicate ``domain(v) -> bool`` of the effective domain.
    """

    family: str
    dim: int = 1
    weight: float = 1.0
    p: float = 2.0
    func: Optional[Callable] = None
    domain: Optional[Callable] = None
    friction: Optional[object] = None
    shift: float = 0.0
    label: str = ""

    def __post_init__(self):
        if self.family not in ("quadratic", "power", "entropy", "custom"):
            raise ValueError(f"unknown potential family {self.family!r}")
        if self.dim < 1:
            raise ValueError("dim must be a positive integer")
        if self.family == "quadratic" and not self.weight > 0:
            raise ValueError("quadratic weight must be positive")
        if self.family == "power" and not self.p > 1:
            raise ValueError("power family needs p > 1")
        if self.family == "custom":
            if self.func is None:
                raise ValueError("custom potential needs a callable")
            if self.dim > MAX_NUMERIC_DIM:
                raise ValueError(f"custom potentials are limited to dim <= {MAX_NUMERIC_DIM}")

    # -- constructors -----------------------------------------------------
    @classmethod
    def quadratic(cls, weight: float = 1.0, dim: int = 1) -> "DissipationPotential":
        return cls("quadratic", dim=dim, weight=float(weight))

    @classmethod
    def power(cls, p: float, dim: int = 1) -> "DissipationPotential":
        return cls("power", dim=dim, p=float(p))

    @classmethod
    def entropy(cls, dim: int = 1) -> "DissipationPotential":
        return cls("entropy", dim=dim)

    @classmethod
    def custom(cls, func: Callable, dim: int = 1, domain: Optional[Callable] = None,
               label: str = "") -> "DissipationPotential":
        return cls("custom", dim=dim, func=func, domain=domain, label=label)

    @classmethod
    def from_spec(cls, spec: dict, dim: int = 1) -> "DissipationPotential":
        """Build from a scenario entry such as ``{"family": "power", "p": 1.5}``."""
        fam = spec.get("family")
        dim = int(spec.get("dim", dim))
        if fam == "quadratic":
            pot = cls.quadratic(spec.get("weight", 1.0), dim)
        elif fam == "power":
            if "p" not in spec:
                raise ValueError("power potential needs 'p'")
            pot = cls.power(spec["p"], dim)
        elif fam == "entropy":
            pot = cls.entropy(dim)
        elif fam == "custom":
            from .expressions import CompiledField
            field = CompiledField(spec["expr"], dim, prefix="v", with_time=False)

            def func(v, _f=field):
                return float(_f.value(0.0, np.asarray(v, dtype=float)))

            pot = cls.custom(func, dim, label=spec["expr"])
        else:
            raise ValueError(f"unknown potential family {fam!r}")
        if spec.get("shift"):
            pot = pot.shifted(float(spec["shift"]))
        return pot

    def to_spec(self) -> dict:
        out = {"family": self.family, "dim": self.dim}
        if self.family == "quadratic":
            out["weight"] = self.weight
        elif self.family == "power":
            out["p"] = self.p
        elif self.family == "custom":
            out["expr"] = self.label
        if self.shift:
            out["shift"] = self.shift
        return out

    def with_friction(self, friction) -> "DissipationPotential":
        return replace(self, friction=friction)

    def shifted(self, k: float) -> "DissipationPotential":
        """Potential ``psi + k``; its conjugate is ``psi* - k``."""
        return replace(self, shift=self.shift + float(k))

    @property
    def q(self) -> float:
        """Conjugate exponent of the power family."""
        return self.p / (self.p - 1.0)

    @property
    def is_custom(self) -> bool:
        return self.family == "custom"

    # -- unmodulated base psi0 (vectorised, last axis = dim) -------------
    def base_value(self, v):
        v = np.asarray(v, dtype=float)
        if self.family == "quadratic":
            return 0.5 * self.weight * np.sum(v * v, axis=-1)
        if self.family == "power":
            return np.linalg.norm(v, axis=-1) ** self.p / self.p
        if self.family == "entropy":
            with np.errstate(divide="ignore", invalid="ignore"):
                terms = np.where(v > 0, v * (np.log(np.where(v > 0, v, 1.0)) - 1.0), 0.0)
                terms = np.where(v < 0, np.inf, terms)
            return np.sum(terms, axis=-1)
        return _apply_pointwise(self._custom_value, v)

    def _custom_value(self, v):
        if self.domain is not None and not self.domain(v):
            return math.inf
        val = float(self.func(v))
        return math.inf if math.isnan(val) else val

    def base_grad(self, v):
        v = np.asarray(v, dtype=float)
        if self.family == "quadratic":
            return self.weight * v
        if self.family == "power":
            r = np.linalg.norm(v, axis=-1, keepdims=True)
            with np.errstate(divide="ignore", invalid="ignore"):
                scale = np.where(r > 0, r ** (self.p - 2.0), 0.0)
            return scale * v
        if self.family == "entropy":
            if np.any(v <= 0):
                raise DomainError("entropy subdifferential is empty for v <= 0")
            return np.log(v)
        return _apply_pointwise_vec(self._custom_subgradient, v, self.dim)

    def _custom_subgradient(self, v):
        f0 = self._custom_value(v)
        if not math.isfinite(f0):
            raise DomainError(f"v={v} lies outside the effective domain")
        n = v.size
        g = np.empty(n)
        for i in range(n):
            h = 1e-6 * (1.0 + abs(v[i]))
            e = np.zeros(n)
            e[i] = h
            fp, fm = self._custom_value(v + e), self._custom_value(v - e)
            if n == 1:
                dminus = (f0 - fm) / h if math.isfinite(fm) else -math.inf
                dplus = (fp - f0) / h if math.isfinite(fp) else math.inf
                if math.isfinite(dminus) and math.isfinite(dplus) and \
                        dplus - dminus <= 1e-4 * (1.0 + abs(dplus) + abs(dminus)):
                    g[i] = (fp - fm) / (2 * h)
                else:
                    # minimal-norm element of [d-, d+]
                    g[i] = min(max(0.0, dminus), dplus)
            else:
                if not (math.isfinite(fp) and math.isfinite(fm)):
                    raise DomainError(f"v={v} lies on the boundary of the effective domain")
                g[i] = (fp - fm) / (2 * h)
        return g

    def base_conj(self, z):
        z = np.asarray(z, dtype=float)
        if self.family == "quadratic":
            return np.sum(z * z, axis=-1) / (2.0 * self.weight)
        if self.family == "power":
            return np.linalg.norm(z, axis=-1) ** self.q / self.q
        if self.family == "entropy":
            return np.sum(np.exp(z), axis=-1)
        return _apply_pointwise(lambda zz: numeric_conjugate(self._custom_value, zz)[0], z)

    def base_conj_grad(self, z):
        z = np.asarray(z, dtype=float)
        if self.family == "quadratic":
            return z / self.weight
        if self.family == "power":
            r = np.linalg.norm(z, axis=-1, keepdims=True)
            with np.errstate(divide="ignore", invalid="ignore"):
                scale = np.where(r > 0, r ** (self.q - 2.0), 0.0)
            return scale * z
        if self.family == "entropy":
            return np.exp(z)
        return _apply_pointwise_vec(lambda zz: numeric_conjugate(self._custom_value, zz)[1], z, self.dim)

    def base_conj_1d(self, z):
        """``(psi0*, psi0*', psi0*'')`` for scalar arguments (dim 1, built-in families)."""
        z = np.asarray(z, dtype=float)
        if self.family == "quadratic":
            w = self.weight
            return z * z / (2 * w), z / w, np.full_like(z, 1.0 / w)
        if self.family == "power":
            q = self.q
            az = np.abs(z)
            with np.errstate(divide="ignore", invalid="ignore"):
                d2 = np.where(az > 0, (q - 1) * az ** (q - 2), 0.0 if q > 2 else np.inf)
            return az ** q / q, az ** (q - 1) * np.sign(z), d2
        if self.family == "entropy":
            e = np.exp(z)
            return e, e, e
        raise NotImplementedError("closed-form conjugate derivatives need a built-in family")


# -- helpers ----------------------------------------------------------------

def _apply_pointwise(fn, arr):
    arr = np.asarray(arr, dtype=float)
    flat = arr.reshape(-1, arr.shape[-1])
    out = np.array([fn(row) for row in flat], dtype=float)
    return out.reshape(arr.shape[:-1])


def _apply_pointwise_vec(fn, arr, dim):
    arr = np.asarray(arr, dtype=float)
    flat = arr.reshape(-1, arr.shape[-1])
    out = np.array([fn(row) for row in flat], dtype=float).reshape(-1, dim)
    return out.reshape(arr.shape)


def _as_vec(pot: DissipationPotential, v, name="v"):
    v = np.asarray(v, dtype=float)
    if v.ndim == 0:
        v = v[None]
    if v.shape[-1] != pot.dim:
        raise DimensionError(f"{name} has length {v.shape[-1]}, expected {pot.dim}")
    return v


def _friction(pot: DissipationPotential, t, x, lead_shape):
    if pot.friction is None:
        return None
    if x is None:
        raise ValueError("a friction-modulated potential needs the state x")
    x = np.asarray(x, dtype=float)
    if x.ndim == 0:
        x = x[None]
    a = np.asarray(pot.friction.value(t, x), dtype=float)
    return np.broadcast_to(a, lead_shape)


def _out(val):
    val = np.asarray(val)
    return float(val) if val.ndim == 0 else val


# -- public operations --------------------------------------------------------

def evaluate(pot: DissipationPotential, t, x, v):
    """``psi(t, x, v)``; ``+inf`` outside the effective domain."""
    v = _as_vec(pot, v)
    base = pot.base_value(v)
    a = _friction(pot, t, x, base.shape)
    val = base if a is None else a * base
    return _out(val + pot.shift)


def conjugate(pot: DissipationPotential, t, x, z):
    """``psi*(t, x, z) = sup_v <z, v> - psi(t, x, v)``.

    Closed forms for the built-in families; custom potentials use
    :func:`numeric_conjugate`.
    """
    z = _as_vec(pot, z, "z")
    if not np.all(np.isfinite(z)):
        raise ValueError("z must be finite")
    a = _friction(pot, t, x, z.shape[:-1])
    if a is None:
        val = pot.base_conj(z)
    else:
        val = a * pot.base_conj(z / a[..., None])
    return _out(val - pot.shift)


def conjugate_gradient(pot: DissipationPotential, t, x, z):
    """Gradient of ``z -> psi*(t, x, z)`` (the maximiser in the conjugate)."""
    z = _as_vec(pot, z, "z")
    a = _friction(pot, t, x, z.shape[:-1])
    if a is None:
        return pot.base_conj_grad(z)
    return pot.base_conj_grad(z / a[..., None])


def subdifferential_select(pot: DissipationPotential, t, x, v):
    """One element of ``d_v psi(t, x, v)``: the gradient, or the minimal-norm element at kinks."""
    v = _as_vec(pot, v)
    base = pot.base_value(v)
    if not np.all(np.isfinite(base)):
        raise DomainError("v lies outside the effective domain")
    g = pot.base_grad(v)
    a = _friction(pot, t, x, v.shape[:-1])
    if a is not None:
        g = a[..., None] * g
    return g if g.ndim > 1 else np.asarray(g)


def fenchel_gap(pot: DissipationPotential, t, x, v, z):
    """``psi(v) + psi*(z) - <z, v>``: nonnegative, zero iff ``z`` is a subgradient at ``v``."""
    v = _as_vec(pot, v)
    z = _as_vec(pot, z, "z")
    val = np.asarray(evaluate(pot, t, x, v)) + np.asarray(conjugate(pot, t, x, z)) \
        - np.sum(z * v, axis=-1)
    return _out(val)


# -- numeric conjugation --------------------------------------------------------

def golden_section_max(g, lo, hi, rtol=1e-10, max_iter=200):
    """Maximise a unimodal scalar function on ``[lo, hi]``; returns ``(argmax, max)``.

    Tolerates ``-inf`` values (they simply lose every comparison).
    """
    a, b = float(lo), float(hi)
    c = b - _INVPHI * (b - a)
    d = a + _INVPHI * (b - a)
    gc, gd = g(c), g(d)
    for _ in range(max_iter):
        if abs(b - a) <= rtol * max(1.0, abs(a) + abs(b)):
            break
        if gc >= gd:
            b, d, gd = d, c, gc
            c = b - _INVPHI * (b - a)
            gc = g(c)
        else:
            a, c, gc = c, d, gd
            d = a + _INVPHI * (b - a)
            gd = g(d)
    xm = 0.5 * (a + b)
    candidates = [(g(xm), xm), (gc, c), (gd, d)]
    best = max(candidates, key=lambda p: p[0])
    return best[1], best[0]


def numeric_conjugate(f: Callable, z, radius: float = CONJ_RADIUS, rtol: float = 1e-10,
                      grid_points: Optional[int] = None):
    """Numerically evaluate ``sup_v <z, v> - f(v)`` over the ball of radius ``radius``.

    Coarse grid search followed by golden-section refinement (1-D) or
    Nelder-Mead (2-4 D).  Returns ``(value, maximiser)``.

    Raises
    ------
    UnboundedConjugateError
        If the maximiser sits on the search radius.
    """
    z = np.atleast_1d(np.asarray(z, dtype=float))
    n = z.size
    if n > MAX_NUMERIC_DIM:
        raise ValueError(f"numeric conjugation is limited to dim <= {MAX_NUMERIC_DIM}")
    m = grid_points or _GRID_POINTS[n]
    axis = np.linspace(-radius, radius, m)
    step = axis[1] - axis[0]

    def obj(v):
        fv = f(np.atleast_1d(v))
        fv = float(fv)
        if not math.isfinite(fv) and fv > 0:
            return -math.inf
        return float(np.dot(z, np.atleast_1d(v))) - fv

    if n == 1:
        vals = np.array([obj(np.array([s])) for s in axis])
        i = int(np.argmax(vals))
        lo, hi = axis[max(i - 1, 0)], axis[min(i + 1, m - 1)]
        vbest, gbest = golden_section_max(lambda s: obj(np.array([s])), lo, hi, rtol=rtol)
        vstar = np.array([vbest])
    else:
        mesh = np.stack(np.meshgrid(*([axis] * n), indexing="ij"), axis=-1).reshape(-1, n)
        mesh = mesh[np.linalg.norm(mesh, axis=1) <= radius * (1 + 1e-12)]
        vals = np.array([obj(row) for row in mesh])
        start = mesh[int(np.argmax(vals))]
        simplex = np.vstack([start] + [start + step * e for e in np.eye(n)])
        res = minimize(lambda v: -obj(v), start, method="Nelder-Mead",
                       options={"initial_simplex": simplex, "xatol": rtol * max(1.0, np.abs(start).max()),
                                "fatol": 1e-15, "maxiter": 20000, "maxfev": 40000})
        vstar, gbest = res.x, -res.fun
        if gbest < vals.max():
            vstar, gbest = start, vals.max()
    if not math.isfinite(gbest):
        raise UnboundedConjugateError("conjugate is not finite at z")
    if np.linalg.norm(vstar) >= radius * (1 - 1e-6):
        raise UnboundedConjugateError(
            f"conjugate maximiser reached the search radius {radius:g}; sup likely diverges")
    return gbest, vstar
