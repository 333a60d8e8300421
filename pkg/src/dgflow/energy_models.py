"""Energies ``phi(t, x)``, friction fields and the slope ``S = psi*(-D phi)``."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np
from scipy.optimize import minimize

from .convex_core import DimensionError, DissipationPotential, conjugate

__all__ = [
    "EnergyModel",
    "FrictionField",
    "PowerBoundViolation",
    "eval_energy",
    "grad_energy",
    "dt_energy",
    "slope",
    "check_power_bound",
]


class PowerBoundViolation(RuntimeError):
    """``|d_t phi| <= b (phi + c (1 + |x|))`` failed at some node."""

    def __init__(self, message, t=None, x=None, ratio=None):
        super().__init__(message)
        self.t, self.x, self.ratio = t, x, ratio


def _fd_step(x):
    return 1e-6 * (1.0 + np.abs(x))


def _fd_grad(f, t, x):
    """Central differences with step ``1e-6 (1 + |x_i|)`` on the last axis."""
    x = np.asarray(x, dtype=float)
    n = x.shape[-1]
    out = np.empty_like(x)
    h = _fd_step(x)
    for i in range(n):
        e = np.zeros_like(x)
        e[..., i] = h[..., i]
        out[..., i] = (f(t, x + e) - f(t, x - e)) / (2 * h[..., i])
    return out


def _pointwise(fn):
    """Lift a callable on (scalar t, 1-D x) to batched inputs."""

    def call(t, x):
        x = np.asarray(x, dtype=float)
        tt = np.broadcast_to(np.asarray(t, dtype=float), x.shape[:-1])
        flat_x = x.reshape(-1, x.shape[-1])
        flat_t = tt.reshape(-1)
        res = [np.asarray(fn(float(ti), xi), dtype=float) for ti, xi in zip(flat_t, flat_x)]
        res = np.array(res)
        return res.reshape(x.shape[:-1] + res.shape[1:])

    return call


@dataclass(frozen=True)
class FrictionField:
    """Friction coefficient ``a(t, x)`` with ``lower <= a <= upper``.

    ``func`` and ``grad_func`` act on batched input (``t`` of shape ``(...)``,
    ``x`` of shape ``(..., n)``); without ``grad_func`` the spatial gradient
    falls back to central differences.
    """

    func: Callable
    lower: float
    upper: float
    grad_func: Optional[Callable] = None
    label: str = ""

    def __post_init__(self):
        if not (0 < self.lower <= self.upper):
            raise ValueError("friction bounds need 0 < lower <= upper")

    @classmethod
    def from_expr(cls, expr: str, lower: float, upper: float, dim: int = 1) -> "FrictionField":
        from .expressions import CompiledField
        f = CompiledField(expr, dim, prefix="x", with_time=True)
        return cls(f.value, float(lower), float(upper), f.grad, label=expr)

    def value(self, t, x):
        return np.asarray(self.func(t, np.asarray(x, dtype=float)), dtype=float)

    def grad(self, t, x):
        if self.grad_func is not None:
            return np.asarray(self.grad_func(t, np.asarray(x, dtype=float)), dtype=float)
        return _fd_grad(self.value, t, x)

    def check(self, t, x):
        """Return ``(min a, max a)`` over the samples; raise if outside the declared bounds."""
        a = self.value(t, x)
        lo, hi = float(np.min(a)), float(np.max(a))
        if lo < self.lower - 1e-12 or hi > self.upper + 1e-12:
            raise ValueError(
                f"friction leaves [{self.lower}, {self.upper}]: sampled range [{lo}, {hi}]")
        return lo, hi


@dataclass(frozen=True)
class EnergyModel:
    """Energy ``phi(t, x)`` on ``R^n``, normalised to be nonnegative.

    Families
    --------
    ``quadratic``
        ``curvature / 2 * |x - center|^2``.
    ``double_well``
        ``scale / 4 * (|x|^2 - 1)^2``.
    ``custom``
        batched callables ``phi(t, x)`` and optionally ``grad``, ``hess``,
        ``dt``, ``dt_grad``; missing derivatives use finite differences.

    The infimum recorded at construction (``offset``) is subtracted from
    every value; :meth:`raw_value` undoes it.
    """

    family: str
    dim: int = 1
    center: tuple = (0.0,)
    curvature: float = 1.0
    scale: float = 1.0
    time_dependent: bool = False
    power_bound: Optional[tuple] = None
    abar: float = 0.0
    offset: float = 0.0
    funcs: dict = field(default_factory=dict, compare=False)
    label: str = ""

    # -- constructors -----------------------------------------------------
    @classmethod
    def quadratic(cls, center=0.0, curvature=1.0, dim=1) -> "EnergyModel":
        c = tuple(np.broadcast_to(np.asarray(center, dtype=float), (dim,)).tolist())
        return cls("quadratic", dim=dim, center=c, curvature=float(curvature))

    @classmethod
    def double_well(cls, scale=1.0, dim=1) -> "EnergyModel":
        return cls("double_well", dim=dim, scale=float(scale))

    @classmethod
    def custom(cls, phi, grad=None, dt=None, hess=None, dt_grad=None, dim=1,
               time_dependent=False, power_bound=None, abar=0.0, offset=None,
               pointwise=False, label="") -> "EnergyModel":
        """Energy from callables.

        With ``pointwise=True`` the callables take a scalar ``t`` and a 1-D
        ``x`` and are looped over batches.  ``offset=None`` estimates
        ``inf phi(0, .)`` by multi-start minimisation.
        """
        wrap = _pointwise if pointwise else (lambda f: f)
        funcs = {"phi": wrap(phi)}
        for name, fn in (("grad", grad), ("dt", dt), ("hess", hess), ("dt_grad", dt_grad)):
            if fn is not None:
                funcs[name] = wrap(fn)
        model = cls("custom", dim=dim, time_dependent=time_dependent,
                    power_bound=None if power_bound is None else tuple(map(float, power_bound)),
                    abar=float(abar), funcs=funcs, label=label)
        if offset is None:
            offset = model._estimate_infimum()
        return replace(model, offset=float(offset))

    @classmethod
    def from_expr(cls, expr: str, dim=1, power_bound=None, abar=0.0, offset=None) -> "EnergyModel":
        from .expressions import CompiledField
        f = CompiledField(expr, dim, prefix="x", with_time=True)
        return cls.custom(f.value, grad=f.grad, dt=f.dt, hess=f.hess, dt_grad=f.dt_grad,
                          dim=dim, time_dependent=f.time_dependent, power_bound=power_bound,
                          abar=abar, offset=offset, label=expr)

    @classmethod
    def from_spec(cls, spec: dict, dim: int = 1) -> "EnergyModel":
        fam = spec.get("family")
        dim = int(spec.get("dim", dim))
        pb = spec.get("power_bound")
        if pb is not None:
            pb = (float(pb["b"]), float(pb.get("c", 0.0))) if isinstance(pb, dict) else tuple(pb)
        if fam == "quadratic":
            model = cls.quadratic(spec.get("center", 0.0), spec.get("curvature", 1.0), dim)
        elif fam == "double_well":
            model = cls.double_well(spec.get("scale", 1.0), dim)
        elif fam == "custom":
            return cls.from_expr(spec["expr"], dim, power_bound=pb, abar=spec.get("abar", 0.0),
                                 offset=spec.get("offset"))
        else:
            raise ValueError(f"unknown energy family {fam!r}")
        if pb is not None:
            model = replace(model, power_bound=pb)
        return model

    def to_spec(self) -> dict:
        out = {"family": self.family, "dim": self.dim}
        if self.family == "quadratic":
            out.update(center=list(self.center), curvature=self.curvature)
        elif self.family == "double_well":
            out.update(scale=self.scale)
        else:
            out.update(expr=self.label, offset=self.offset)
        if self.power_bound is not None:
            out["power_bound"] = {"b": self.power_bound[0], "c": self.power_bound[1]}
        return out

    def shifted(self, k: float) -> "EnergyModel":
        """The energy ``phi + k`` (its normalisation is deliberately not reapplied)."""
        return replace(self, offset=self.offset - float(k))

    def _estimate_infimum(self) -> float:
        best = math.inf
        rng = np.random.default_rng(0)
        starts = [np.zeros(self.dim)] + [rng.normal(scale=2.0, size=self.dim) for _ in range(8)]
        for s in starts:
            res = minimize(lambda y: float(self.funcs["phi"](0.0, y[None, :])[0]), s,
                           method="Nelder-Mead", options={"xatol": 1e-10, "fatol": 1e-14})
            best = min(best, float(res.fun))
        return best

    # -- evaluation (batched; x has shape (..., n)) -------------------------
    def _check(self, x):
        x = np.asarray(x, dtype=float)
        if x.ndim == 0:
            x = x[None]
        if x.shape[-1] != self.dim:
            raise DimensionError(f"x has length {x.shape[-1]}, expected {self.dim}")
        return x

    def raw_value(self, t, x):
        x = self._check(x)
        if self.family == "quadratic":
            d = x - np.asarray(self.center)
            return 0.5 * self.curvature * np.sum(d * d, axis=-1)
        if self.family == "double_well":
            r2 = np.sum(x * x, axis=-1)
            return 0.25 * self.scale * (r2 - 1.0) ** 2
        return np.asarray(self.funcs["phi"](t, x), dtype=float)

    def value(self, t, x):
        return self.raw_value(t, x) - self.offset

    def grad(self, t, x):
        x = self._check(x)
        if self.family == "quadratic":
            return self.curvature * (x - np.asarray(self.center))
        if self.family == "double_well":
            r2 = np.sum(x * x, axis=-1, keepdims=True)
            return self.scale * (r2 - 1.0) * x
        if "grad" in self.funcs:
            return np.asarray(self.funcs["grad"](t, x), dtype=float)
        return _fd_grad(self.raw_value, t, x)

    @property
    def gradient_source(self) -> str:
        if self.family != "custom" or "grad" in self.funcs:
            return "analytic"
        return "finite_difference"

    def hess(self, t, x):
        x = self._check(x)
        n = self.dim
        eye = np.eye(n)
        if self.family == "quadratic":
            return np.broadcast_to(self.curvature * eye, x.shape + (n,))
        if self.family == "double_well":
            r2 = np.sum(x * x, axis=-1)[..., None, None]
            return self.scale * ((r2 - 1.0) * eye + 2.0 * x[..., :, None] * x[..., None, :])
        if "hess" in self.funcs:
            return np.asarray(self.funcs["hess"](t, x), dtype=float)
        h = _fd_step(x)
        out = np.empty(x.shape + (n,))
        for i in range(n):
            e = np.zeros_like(x)
            e[..., i] = h[..., i]
            out[..., :, i] = (self.grad(t, x + e) - self.grad(t, x - e)) / (2 * h[..., i, None])
        return out

    def dt(self, t, x):
        x = self._check(x)
        if not self.time_dependent:
            return np.zeros(x.shape[:-1])
        if "dt" in self.funcs:
            return np.asarray(self.funcs["dt"](t, x), dtype=float)
        t = np.asarray(t, dtype=float)
        h = 1e-6 * (1.0 + np.abs(t))
        return (self.raw_value(t + h, x) - self.raw_value(t - h, x)) / (2 * h)

    def dt_grad(self, t, x):
        x = self._check(x)
        if not self.time_dependent:
            return np.zeros_like(x)
        if "dt_grad" in self.funcs:
            return np.asarray(self.funcs["dt_grad"](t, x), dtype=float)
        return _fd_grad(self.dt, t, x)


def _out(val):
    val = np.asarray(val)
    return float(val) if val.ndim == 0 else val


def eval_energy(E: EnergyModel, t, x):
    """Normalised energy ``phi(t, x) >= 0``."""
    return _out(E.value(t, x))


def grad_energy(E: EnergyModel, t, x):
    """``D phi(t, x)``.  Custom energies without a gradient fall back to finite differences."""
    if E.gradient_source == "finite_difference":
        warnings.warn("energy gradient computed by finite differences", RuntimeWarning, stacklevel=2)
    g = E.grad(t, x)
    return g


def dt_energy(E: EnergyModel, t, x):
    return _out(E.dt(t, x))


def slope(E: EnergyModel, pot: DissipationPotential, t, x):
    """``S(t, x) = psi*(t, x, -D phi(t, x))`` (equal to the relaxed slope for C^1 energies)."""
    x = E._check(x)
    return conjugate(pot, t, x, -E.grad(t, x))


def check_power_bound(E: EnergyModel, t, x, raise_on_violation=True):
    """Check ``|d_t phi| <= b (phi + c (1 + |x|))`` at the given nodes.

    Returns the largest ratio ``|d_t phi| / (b (phi + c (1 + |x|)))`` (0 for
    autonomous models).  A ratio above one raises :class:`PowerBoundViolation`.
    """
    if not E.time_dependent:
        return 0.0
    if E.power_bound is None:
        raise ValueError("time-dependent energy needs power_bound=(b, c)")
    b, c = E.power_bound
    x = E._check(x)
    t = np.broadcast_to(np.asarray(t, dtype=float), x.shape[:-1])
    lhs = np.abs(E.dt(t, x))
    rhs = b * (E.value(t, x) + c * (1.0 + np.linalg.norm(x, axis=-1)))
    excess = lhs - rhs
    tol = 1e-12 * (1.0 + np.abs(rhs))
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(rhs > 0, lhs / rhs, np.where(lhs > tol, np.inf, 0.0))
    worst = int(np.argmax(excess.reshape(-1)))
    if raise_on_violation and excess.reshape(-1)[worst] > tol.reshape(-1)[worst]:
        tw = float(t.reshape(-1)[worst])
        xw = x.reshape(-1, x.shape[-1])[worst]
        raise PowerBoundViolation(
            f"power bound fails at t={tw:.6g}, x={xw}: |d_t phi|={lhs.reshape(-1)[worst]:.6g} "
            f"> b(phi + c(1+|x|))={rhs.reshape(-1)[worst]:.6g}", tw, xw,
            float(ratio.reshape(-1)[worst]))
    return float(np.max(ratio)) if ratio.size else 0.0
