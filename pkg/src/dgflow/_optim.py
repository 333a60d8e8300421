"""Limited-memory quasi-Newton descent for extended-real objectives.

scipy's L-BFGS-B assumes finite objective values; here a step landing on
``+inf`` (a velocity outside the effective domain of ``psi``) must simply be
rejected by the line search, and failure to make progress has to surface
as an error that still carries the best iterate.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class StagnationError(RuntimeError):
    """Every line-search trial failed; ``best_x`` and ``best_f`` hold the best iterate."""

    def __init__(self, message, best_x, best_f, iterations, history):
        super().__init__(message)
        self.best_x = best_x
        self.best_f = best_f
        self.iterations = iterations
        self.history = history


@dataclass
class LBFGSResult:
    x: np.ndarray
    f: float
    grad_norm: float
    iterations: int
    converged: bool
    history: list = field(default_factory=list)
    n_evals: int = 0


def lbfgs(fun, x0, gtol=1e-8, max_iter=1000, memory=10, c1=1e-4, max_backtrack=60,
          mask=None, raise_on_stagnation=True, ftol=0.0):
    """Minimise ``fun(x) -> (f, grad)`` by L-BFGS with Armijo backtracking.

    Parameters
    ----------
    fun : callable
        Returns value and gradient; the value may be ``+inf``.
    mask : array of bool, optional
        Coordinates that are free; the others are never moved.
    ftol : float
        Optional relative decrease threshold; after 5 consecutive steps with
        relative decrease below it the run stops as converged.

    Notes
    -----
    Convergence is declared when the Euclidean norm of the (masked)
    gradient drops below ``gtol``.
    """
    x = np.array(x0, dtype=float)
    shape = x.shape
    x = x.ravel()
    free = np.ones_like(x, dtype=bool) if mask is None else np.asarray(mask, bool).ravel()

    def eval_(y):
        f, g = fun(y.reshape(shape))
        g = np.asarray(g, dtype=float).ravel().copy()
        g[~free] = 0.0
        return float(f), g

    f, g = eval_(x)
    n_evals = 1
    if not math.isfinite(f):
        raise ValueError("initial point has non-finite objective")
    s_hist, y_hist = [], []
    history = [(0, f, float(np.linalg.norm(g)))]
    it = 0
    small = 0
    while True:
        gn = float(np.linalg.norm(g))
        if gn <= gtol:
            return LBFGSResult(x.reshape(shape), f, gn, it, True, history, n_evals)
        if it >= max_iter:
            return LBFGSResult(x.reshape(shape), f, gn, it, False, history, n_evals)
        # two-loop recursion
        q = g.copy()
        alphas = []
        for s, y in zip(reversed(s_hist), reversed(y_hist)):
            rho = 1.0 / np.dot(y, s)
            al = rho * np.dot(s, q)
            alphas.append(al)
            q -= al * y
        if s_hist:
            q *= np.dot(s_hist[-1], y_hist[-1]) / np.dot(y_hist[-1], y_hist[-1])
        else:
            q *= min(1.0, 1.0 / gn)
        for (s, y), al in zip(zip(s_hist, y_hist), reversed(alphas)):
            rho = 1.0 / np.dot(y, s)
            b = rho * np.dot(y, q)
            q += s * (al - b)
        d = -q
        slope = float(np.dot(g, d))
        if not slope < 0:
            s_hist.clear()
            y_hist.clear()
            d = -g * min(1.0, 1.0 / gn)
            slope = float(np.dot(g, d))
        step = 1.0
        accepted = False
        for _ in range(max_backtrack):
            xn = x + step * d
            fn, gnew = eval_(xn)
            n_evals += 1
            if math.isfinite(fn) and fn <= f + c1 * step * slope and \
                    (fn < f or np.linalg.norm(gnew) < gn):
                # at round-off level an equal value is accepted only if it shrinks the gradient
                accepted = True
                break
            step *= 0.5
        if not accepted:
            if s_hist:
                # drop curvature memory and retry along steepest descent once
                s_hist.clear()
                y_hist.clear()
                continue
            if raise_on_stagnation:
                raise StagnationError(
                    f"line search failed at iteration {it} (|g|={gn:.3e})",
                    x.reshape(shape), f, it, history)
            return LBFGSResult(x.reshape(shape), f, gn, it, False, history, n_evals)
        s = xn - x
        y = gnew - g
        if np.dot(s, y) > 1e-12 * np.dot(s, s) ** 0.5 * np.linalg.norm(y):
            s_hist.append(s)
            y_hist.append(y)
            if len(s_hist) > memory:
                s_hist.pop(0)
                y_hist.pop(0)
        rel = (f - fn) / max(1.0, abs(f))
        x, f, g = xn, fn, gnew
        it += 1
        history.append((it, f, float(np.linalg.norm(g))))
        if ftol > 0:
            small = small + 1 if rel < ftol else 0
            if small >= 5:
                return LBFGSResult(x.reshape(shape), f, float(np.linalg.norm(g)), it, True,
                                   history, n_evals)
