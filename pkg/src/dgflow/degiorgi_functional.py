"""Discrete trajectories and the weighted energy-dissipation functional ``J^a``.

For a piecewise-linear curve with nodes ``x_0 .. x_N`` on a uniform grid of
step ``tau = T / N`` the functional is approximated by the midpoint rule::

    J = e^{-aT} phi(T, x_N) - phi(0, x_0)
        + sum_k tau e^{-a t_k} [psi(t_k, m_k, v_k) + S(t_k, m_k) + a phi(t_k, m_k) - d_t phi(t_k, m_k)]

with ``t_k = (k + 1/2) tau``, ``m_k = (x_k + x_{k+1}) / 2`` and
``v_k = (x_{k+1} - x_k) / tau``.  Everything is vectorised over leading
batch axes of the node array, so populations of trajectories are evaluated
in one call.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .convex_core import (DissipationPotential, conjugate, conjugate_gradient, evaluate,
                          DimensionError)
from .energy_models import EnergyModel, check_power_bound

__all__ = [
    "Trajectory",
    "DeGiorgiParams",
    "evaluate_J",
    "gradient_J",
    "value_and_gradient",
    "residual_profile",
    "chain_rule_defect",
    "shift_invariance_check",
    "j_report",
    "write_trajectory_csv",
    "read_trajectory_csv",
]


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Piecewise-linear curve on the uniform grid ``t_k = k T / N``.

    ``nodes`` has shape ``(N + 1, n)``; ``nodes[0]`` is the initial datum.
    """

    T: float
    nodes: np.ndarray
    x0_fixed: bool = True

    def __post_init__(self):
        nodes = np.asarray(self.nodes, dtype=float)
        if nodes.ndim == 1:
            nodes = nodes[:, None]
        if nodes.ndim != 2:
            raise ValueError("nodes must have shape (N + 1, n)")
        if nodes.shape[0] < 3:
            raise ValueError("a trajectory needs N >= 2 steps")
        if not np.all(np.isfinite(nodes)):
            raise ValueError("trajectory nodes must be finite")
        if not self.T > 0:
            raise ValueError("horizon T must be positive")
        object.__setattr__(self, "nodes", nodes)

    @classmethod
    def constant(cls, x0, T, N) -> "Trajectory":
        x0 = np.atleast_1d(np.asarray(x0, dtype=float))
        return cls(float(T), np.tile(x0, (N + 1, 1)))

    @classmethod
    def from_function(cls, f, T, N) -> "Trajectory":
        """Sample a curve ``f(t) -> point`` at the grid nodes."""
        t = np.linspace(0.0, T, N + 1)
        return cls(float(T), np.array([np.atleast_1d(f(tk)) for tk in t], dtype=float))

    @property
    def N(self) -> int:
        return self.nodes.shape[0] - 1

    @property
    def dim(self) -> int:
        return self.nodes.shape[1]

    @property
    def tau(self) -> float:
        return self.T / self.N

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.N + 1)

    @property
    def velocities(self) -> np.ndarray:
        return np.diff(self.nodes, axis=0) / self.tau

    def path_length(self) -> float:
        return float(np.sum(np.linalg.norm(np.diff(self.nodes, axis=0), axis=1)))

    def at(self, t):
        """Linear interpolation of the curve at times ``t``."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        cols = [np.interp(t, self.times, self.nodes[:, i]) for i in range(self.dim)]
        return np.stack(cols, axis=-1)

    def with_nodes(self, nodes) -> "Trajectory":
        return Trajectory(self.T, nodes, self.x0_fixed)


@dataclass(frozen=True, eq=False)
class DeGiorgiParams:
    """Problem data of the weighted functional.

    For time-dependent energies the weight must satisfy ``a >= max(abar, b)``
    where ``b`` comes from the energy's power bound.
    """

    a: float
    energy: EnergyModel
    pot: DissipationPotential
    x0: np.ndarray
    T: float
    N: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        x0 = np.atleast_1d(np.asarray(self.x0, dtype=float))
        object.__setattr__(self, "x0", x0)
        if self.a < 0:
            raise ValueError("weight a must be nonnegative")
        if not self.T > 0 or int(self.N) < 2:
            raise ValueError("need T > 0 and N >= 2")
        object.__setattr__(self, "N", int(self.N))
        if x0.size != self.energy.dim or x0.size != self.pot.dim:
            raise DimensionError("x0, energy and potential dimensions differ")
        if self.energy.time_dependent:
            if self.energy.power_bound is None:
                raise ValueError("time-dependent energy needs a power bound (b, c)")
            need = max(self.energy.abar, self.energy.power_bound[0])
            if self.a < need:
                raise ValueError(f"time-dependent energy needs a >= max(abar, b) = {need}")

    @property
    def tau(self) -> float:
        return self.T / self.N

    @property
    def dim(self) -> int:
        return self.x0.size

    def replace(self, **kw) -> "DeGiorgiParams":
        d = dict(a=self.a, energy=self.energy, pot=self.pot, x0=self.x0, T=self.T, N=self.N,
                 meta=self.meta)
        d.update(kw)
        return DeGiorgiParams(**d)

    def midpoint_times(self, N=None) -> np.ndarray:
        N = self.N if N is None else N
        return (np.arange(N) + 0.5) * (self.T / N)

    def check_power_bound(self, traj=None, raise_on_violation=True):
        """Power-bound check at every quadrature node ``(t_k, m_k)``.

        Without ``traj`` the constant curve at ``x0`` is used.  Returns the
        largest ratio ``|d_t phi| / (b (phi + c))``.
        """
        if not self.energy.time_dependent:
            return 0.0
        t = self.midpoint_times()
        if traj is None:
            x = np.broadcast_to(self.x0, (t.size, self.dim))
        else:
            nodes = _nodes(self, traj)
            x = 0.5 * (nodes[1:] + nodes[:-1])
        return check_power_bound(self.energy, t, x, raise_on_violation=raise_on_violation)


def _nodes(params: DeGiorgiParams, traj):
    nodes = traj.nodes if isinstance(traj, Trajectory) else np.asarray(traj, dtype=float)
    if nodes.ndim == 1:
        nodes = nodes[:, None]
    if nodes.shape[-2] != params.N + 1 or nodes.shape[-1] != params.dim:
        raise DimensionError(
            f"trajectory shape {nodes.shape[-2:]} does not match grid ({params.N + 1}, {params.dim})")
    if isinstance(traj, Trajectory) and not math.isclose(traj.T, params.T, rel_tol=1e-12):
        raise ValueError("trajectory horizon differs from params.T")
    return nodes


def _stage(params: DeGiorgiParams, nodes):
    tau = params.tau
    t = params.midpoint_times()
    xm = 0.5 * (nodes[..., 1:, :] + nodes[..., :-1, :])
    v = np.diff(nodes, axis=-2) / tau
    w = np.exp(-params.a * t)
    tb = np.broadcast_to(t, xm.shape[:-1])
    return t, tb, xm, v, w


def _integrand(params, tb, xm, v):
    E, pot = params.energy, params.pot
    psi = np.asarray(evaluate(pot, tb, xm, v))
    S = np.asarray(conjugate(pot, tb, xm, -E.grad(tb, xm)))
    L = psi + S + params.a * E.value(tb, xm)
    if E.time_dependent:
        L = L - E.dt(tb, xm)
    return L, psi


def evaluate_J(params: DeGiorgiParams, traj):
    """Midpoint quadrature of ``J^a``.

    ``traj`` is a :class:`Trajectory` or an array of nodes with optional
    leading batch axes, shape ``(..., N + 1, n)``.  Returns ``+inf`` whenever
    a velocity leaves the effective domain of ``psi``.
    """
    nodes = _nodes(params, traj)
    E = params.energy
    t, tb, xm, v, w = _stage(params, nodes)
    with np.errstate(invalid="ignore", over="ignore"):
        L, psi = _integrand(params, tb, xm, v)
        body = params.tau * np.sum(w * L, axis=-1)
        x0 = nodes[..., 0, :]
        xN = nodes[..., -1, :]
        val = math.exp(-params.a * params.T) * E.value(params.T, xN) - E.value(0.0, x0) + body
        val = np.where(np.any(np.isposinf(psi), axis=-1), np.inf, val)
    val = np.asarray(val)
    return float(val) if val.ndim == 0 else val


def _friction_parts(pot, tb, xm, v, z):
    """x-derivatives of psi(t, x, v) and psi*(t, x, z) coming from the friction field."""
    fr = pot.friction
    a = np.asarray(fr.value(tb, xm))[..., None]
    ga = np.asarray(fr.grad(tb, xm))
    psi0 = pot.base_value(v)[..., None]
    zs = z / a
    conj0 = pot.base_conj(zs)[..., None]
    dconj = pot.base_conj_grad(zs)
    d_psi = psi0 * ga
    d_conj = (conj0 - np.sum(dconj * zs, axis=-1, keepdims=True)) * ga
    return d_psi, d_conj


def value_and_gradient(params: DeGiorgiParams, traj):
    """``(J, dJ/dnodes)`` for a single trajectory (shape ``(N + 1, n)``).

    The gradient with respect to ``x_0`` is set to zero because the initial
    node is held fixed.  Velocity terms use the gradient of ``psi`` (or the
    minimal-norm subgradient at kinks).
    """
    nodes = _nodes(params, traj)
    if nodes.ndim != 2:
        raise ValueError("value_and_gradient expects a single trajectory")
    E, pot, a = params.energy, params.pot, params.a
    tau = params.tau
    t, tb, xm, v, w = _stage(params, nodes)
    J = evaluate_J(params, nodes)
    if not math.isfinite(J):
        return J, np.full_like(nodes, np.nan)
    Dphi = E.grad(tb, xm)
    H = E.hess(tb, xm)
    z = -Dphi
    # d/dv psi
    Lv = pot.base_grad(v)
    if pot.friction is not None:
        Lv = np.asarray(pot.friction.value(tb, xm))[:, None] * Lv
    # d/dx S = -D^2 phi . grad_z psi*(-Dphi) + explicit friction part
    gz = conjugate_gradient(pot, tb, xm, z)
    Lx = -np.einsum("kij,kj->ki", H, gz) + a * Dphi
    if E.time_dependent:
        Lx = Lx - E.dt_grad(tb, xm)
    if pot.friction is not None:
        d_psi, d_conj = _friction_parts(pot, tb, xm, v, z)
        Lx = Lx + d_psi + d_conj
    wk = (tau * w)[:, None]
    g = np.zeros_like(nodes)
    g[:-1] += wk * (0.5 * Lx - Lv / tau)
    g[1:] += wk * (0.5 * Lx + Lv / tau)
    g[-1] += math.exp(-a * params.T) * E.grad(params.T, nodes[-1])
    g[0] = 0.0
    return J, g


def gradient_J(params: DeGiorgiParams, traj):
    return value_and_gradient(params, traj)[1]


def residual_profile(params: DeGiorgiParams, traj) -> np.ndarray:
    """Per-step Fenchel gaps ``psi(v_k) + psi*(-z_k) + <z_k, v_k>``, ``z_k = D phi(t_k, m_k)``."""
    nodes = _nodes(params, traj)
    E, pot = params.energy, params.pot
    t, tb, xm, v, w = _stage(params, nodes)
    z = E.grad(tb, xm)
    with np.errstate(invalid="ignore"):
        r = np.asarray(evaluate(pot, tb, xm, v)) + np.asarray(conjugate(pot, tb, xm, -z)) \
            + np.sum(z * v, axis=-1)
    return r


def chain_rule_defect(params: DeGiorgiParams, traj):
    """``J - sum_k tau e^{-a t_k} r_k``.

    For smooth curves this is the quadrature error of the telescoping
    identity for ``e^{-at} phi(t, x(t))`` and vanishes as ``tau -> 0``.
    """
    nodes = _nodes(params, traj)
    t = params.midpoint_times()
    r = residual_profile(params, nodes)
    return evaluate_J(params, nodes) - params.tau * np.sum(np.exp(-params.a * t) * r, axis=-1)


def shift_invariance_check(params: DeGiorgiParams, traj, k_energy: float, k_pot: float) -> dict:
    """Compare ``J^a`` before and after the vertical shifts ``phi + k_energy`` and ``psi + k_pot``.

    The potential shift cancels pointwise against the slope.  The energy
    shift cancels exactly when ``a = 0``; for ``a > 0`` the cancellation
    holds for the integral and the midpoint rule leaves an ``O(tau^2)``
    remainder, so the tolerance is relaxed to ``1e-4``.
    """
    base = evaluate_J(params, traj)
    j_pot = evaluate_J(params.replace(pot=params.pot.shifted(k_pot)), traj)
    j_en = evaluate_J(params.replace(energy=params.energy.shifted(k_energy)), traj)
    d_pot = abs(j_pot - base)
    d_en = abs(j_en - base)
    tol_en = 1e-10 if params.a == 0 else 1e-4
    return {
        "value": base,
        "pot_shift": k_pot,
        "pot_shift_difference": d_pot,
        "energy_shift": k_energy,
        "energy_shift_difference": d_en,
        "energy_shift_tolerance": tol_en,
        "passed": bool(d_pot <= 1e-10 * max(1.0, abs(base)) and d_en <= tol_en),
    }


def j_report(params: DeGiorgiParams, traj) -> dict:
    """JSON-ready summary ``{value, per_step_residual_max, quadrature_N}``."""
    r = residual_profile(params, traj)
    return {
        "value": float(evaluate_J(params, traj)),
        "per_step_residual_max": float(np.max(r)),
        "quadrature_N": int(params.N),
    }


def write_trajectory_csv(traj: Trajectory, path) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["t"] + [f"x_{i + 1}" for i in range(traj.dim)])
        for t, row in zip(traj.times, traj.nodes):
            wr.writerow([repr(float(t))] + [repr(float(c)) for c in row])


def read_trajectory_csv(path) -> Trajectory:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return Trajectory(float(data[-1, 0]), data[:, 1:])


def write_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.bool_):
        return bool(o)
    raise TypeError(f"not JSON serialisable: {type(o)}")
