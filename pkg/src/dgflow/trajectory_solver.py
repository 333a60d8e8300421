"""Direct minimisation of ``J^a`` over discrete curves, and the minimizing-movements baseline."""
from __future__ import annotations

import json
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ._optim import StagnationError, lbfgs
from .convex_core import evaluate
from .degiorgi_functional import (DeGiorgiParams, Trajectory, evaluate_J, residual_profile,
                                  value_and_gradient)

__all__ = [
    "OptimResult",
    "SolverOptions",
    "StagnationError",
    "StepError",
    "minimize_J",
    "minimizing_movements",
    "verify_null_minimum",
    "is_convex_problem",
    "max_threads",
]


class StepError(RuntimeError):
    """An inner minimizing-movements step failed to converge."""

    def __init__(self, message, k):
        super().__init__(message)
        self.k = k


def max_threads() -> int:
    """Thread cap from ``DGFLOW_THREADS`` (default: CPU count)."""
    raw = os.environ.get("DGFLOW_THREADS")
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            pass
    return os.cpu_count() or 1


@dataclass
class SolverOptions:
    """Options for :func:`minimize_J`.

    ``gtol=None`` means ``1e-6 * sqrt(n N)``.  ``restarts=None`` chooses 0
    for convex problems and 5 otherwise.
    """

    gtol: Optional[float] = None
    max_iter: int = 5000
    memory: int = 20
    restarts: Optional[int] = None
    seed: int = 0
    raise_on_stagnation: bool = False


@dataclass
class OptimResult:
    trajectory: Trajectory
    value: float
    iterations: int
    grad_norm: float
    converged: bool
    history: list = field(default_factory=list)
    restart_values: list = field(default_factory=list)
    runtime: float = 0.0

    def to_dict(self) -> dict:
        return {
            "value": self.value,
            "iterations": self.iterations,
            "grad_norm": self.grad_norm,
            "converged": self.converged,
            "restart_values": list(self.restart_values),
            "runtime": self.runtime,
            "T": self.trajectory.T,
            "nodes": self.trajectory.nodes.tolist(),
        }

    def to_json(self, path) -> None:
        from .degiorgi_functional import write_json
        write_json(self.to_dict(), path)

    def write_history_csv(self, path) -> None:
        lines = ["iter,J,grad_norm"]
        lines += [f"{i},{f!r},{g!r}" for i, f, g in self.history]
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")


def is_convex_problem(params: DeGiorgiParams) -> bool:
    """Built-in convex energies without friction (restarts are pointless there)."""
    return params.energy.family == "quadratic" and params.pot.friction is None


def _single_run(params, nodes0, opts, gtol):
    mask = np.ones_like(nodes0, dtype=bool)
    mask[0] = False

    def fun(x):
        return value_and_gradient(params, x)

    res = lbfgs(fun, nodes0, gtol=gtol, max_iter=opts.max_iter, memory=opts.memory, mask=mask,
                raise_on_stagnation=opts.raise_on_stagnation)
    return res


def minimize_J(params: DeGiorgiParams, init: Optional[Trajectory] = None,
               opts: Optional[SolverOptions] = None) -> OptimResult:
    """Minimise ``J^a`` over discrete curves starting at ``x0``.

    The initial node is never moved.  For nonconvex problems the run is
    repeated from perturbed initial curves (Gaussian node noise of size
    ``0.1 |x0| + 0.1``) and the best value is kept; values within ``1e-9``
    are tied and the shortest path wins.

    Raises
    ------
    StagnationError
        Only with ``opts.raise_on_stagnation``: every line search failed.
    """
    opts = opts or SolverOptions()
    start = time.perf_counter()
    init = init if init is not None else Trajectory.constant(params.x0, params.T, params.N)
    nodes0 = init.nodes.copy()
    if nodes0.shape != (params.N + 1, params.dim):
        raise ValueError("initial trajectory does not match the grid")
    if not np.allclose(nodes0[0], params.x0, rtol=0, atol=1e-14):
        raise ValueError("initial trajectory must start at x0")
    if not math.isfinite(evaluate_J(params, nodes0)):
        raise ValueError("J(init) is not finite")
    gtol = opts.gtol if opts.gtol is not None else 1e-6 * math.sqrt(params.dim * params.N)
    restarts = opts.restarts
    if restarts is None:
        restarts = 0 if is_convex_problem(params) else 5
    starts = [nodes0]
    rng = np.random.default_rng(opts.seed)
    sigma = 0.1 * float(np.linalg.norm(params.x0)) + 0.1
    for _ in range(restarts):
        pert = nodes0 + sigma * rng.standard_normal(nodes0.shape)
        pert[0] = params.x0
        if not math.isfinite(evaluate_J(params, pert)):
            pert = nodes0.copy()
        starts.append(pert)

    workers = min(max_threads(), len(starts))
    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            runs = list(ex.map(lambda s: _single_run(params, s, opts, gtol), starts))
    else:
        runs = [_single_run(params, s, opts, gtol) for s in starts]

    best_val = min(r.f for r in runs)
    tied = [r for r in runs if r.f <= best_val + 1e-9]
    best = min(tied, key=lambda r: Trajectory(params.T, r.x).path_length())
    traj = Trajectory(params.T, best.x)
    value = evaluate_J(params, traj)
    return OptimResult(traj, value, best.iterations, best.grad_norm, best.converged, best.history,
                       [float(r.f) for r in runs], time.perf_counter() - start)


def _mm_step(params, k, xk, tol):
    """Solve ``argmin_x tau psi(t_{k+1}, x_k, (x - x_k)/tau) + phi(t_{k+1}, x)``."""
    E, pot, tau = params.energy, params.pot, params.tau
    t1 = (k + 1) * tau
    a_fr = None
    if pot.friction is not None:
        a_fr = float(np.asarray(pot.friction.value(t1, xk[None, :]))[0])

    def fun(x):
        v = (x - xk) / tau
        psi0 = float(pot.base_value(v))
        if not math.isfinite(psi0):
            return math.inf, np.zeros_like(x)
        scale = 1.0 if a_fr is None else a_fr
        f = tau * scale * psi0 + float(E.value(t1, x[None, :])[0])
        g = scale * pot.base_grad(v) + E.grad(t1, x[None, :])[0]
        return f, g

    # explicit step as a warm start when it is admissible
    x_init = xk.copy()
    try:
        z = -E.grad(t1, xk[None, :])[0]
        trial = xk + tau * np.asarray(pot.base_conj_grad(z if a_fr is None else z / a_fr))
        if math.isfinite(fun(trial)[0]) and fun(trial)[0] < fun(xk)[0]:
            x_init = trial
    except (ArithmeticError, ValueError):
        pass
    if not math.isfinite(fun(x_init)[0]):
        raise StepError(f"step {k}: starting point outside the domain", k)
    try:
        res = lbfgs(fun, x_init, gtol=tol, max_iter=500, memory=10)
    except StagnationError as exc:
        if np.linalg.norm(fun(exc.best_x)[1]) <= 1e-7:
            return exc.best_x
        raise StepError(f"step {k}: inner solver stagnated", k) from exc
    if not res.converged:
        raise StepError(f"step {k}: inner solver hit the iteration cap", k)
    return res.x


def minimizing_movements(params: DeGiorgiParams, tol: float = 1e-10) -> Trajectory:
    """Implicit Euler ``x_{k+1} = argmin tau psi((x - x_k)/tau) + phi(t_{k+1}, x)``.

    A friction coefficient is frozen at ``(t_{k+1}, x_k)`` in each step.
    """
    nodes = np.empty((params.N + 1, params.dim))
    nodes[0] = params.x0
    for k in range(params.N):
        nodes[k + 1] = _mm_step(params, k, nodes[k], tol)
    return Trajectory(params.T, nodes)


def verify_null_minimum(params: DeGiorgiParams, result: OptimResult, tol_value: float = 1e-3,
                        tol_residual: float = 5e-3, eps_quad: Optional[float] = None) -> dict:
    """Check that the minimiser is a null-minimiser.

    The report holds the value, the interval ``[-eps_quad, eps_quad]`` the
    continuum minimum is certified to lie in, the largest per-step Fenchel
    residual, and ``J^{a'}`` for ``a' in {0, a, a + 1}``.  ``passed``
    requires ``|J| <= tol_value`` and the residual bound.
    """
    traj = result.trajectory
    value = float(evaluate_J(params, traj))
    r = residual_profile(params, traj)
    eps = tol_value if eps_quad is None else eps_quad
    weights = sorted({0.0, float(params.a), float(params.a) + 1.0})
    others = {}
    for ap in weights:
        try:
            others[f"{ap:g}"] = float(evaluate_J(params.replace(a=ap), traj))
        except ValueError:
            # a' below the admissible weight for a time-dependent energy
            others[f"{ap:g}"] = None
    passed = bool(abs(value) <= tol_value and float(np.max(r)) <= tol_residual)
    return {
        "value": value,
        "certified_interval": [-eps, eps],
        "max_residual": float(np.max(r)),
        "J_by_weight": others,
        "converged": bool(result.converged),
        "tol_value": tol_value,
        "tol_residual": tol_residual,
        "passed": passed,
    }
