"""Cylinder-function subsolutions of the Hamilton-Jacobi dual constraint.

A certificate is a function ``xi(t, x) = zeta(t, <z_1, x>, ..., <z_k, x>)``
that must satisfy, on ``[0, T] x X``::

    -d_t xi + e^{-at} psi*(t, x, -e^{at} D_x xi) <= e^{-at} (S + a phi - d_t phi)
    xi(T, x) <= e^{-aT} phi(T, x)

Every such ``xi`` gives the lower bound ``sum (xi(0) - phi(0)) mu0`` for the
relaxed problem, and backward boundedness forces ``xi <= e^{-at} phi``, hence
a nonpositive bound.  Feasibility is checked on samples, never proved.

Families
--------
``affine``
    ``zeta = alpha(t) + sum_i beta_i(t) y_i`` with cubic B-spline ``alpha``, ``beta_i``.
``tensor``
    ``zeta = sum_jl C_jl B_j(t) B_l(y)`` (``k = 1``), cubic in both variables.
``callable``
    user-supplied ``zeta`` and derivatives; :func:`canonical_certificate`
    builds ``e^{-at} phi(t, x)`` this way.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sps
from scipy.interpolate import BSpline
from scipy.optimize import minimize
from scipy.stats import qmc

from ._optim import StagnationError, lbfgs
from .convex_core import conjugate, conjugate_gradient
from .degiorgi_functional import DeGiorgiParams, write_json

__all__ = [
    "CylinderSubsolution",
    "FeasibilityReport",
    "SampleSpec",
    "DualOptions",
    "InfeasibleFamilyError",
    "canonical_certificate",
    "check_hj_feasible",
    "check_backward_bound",
    "dual_value",
    "maximize_dual",
    "hj_violations",
]

TOL_FEAS = 1e-6
TOL_DUAL = 1e-3


class InfeasibleFamilyError(RuntimeError):
    """No member of the parametric family passed the sampled feasibility check."""


# -- splines ------------------------------------------------------------------------

def clamped_knots(lo, hi, n_basis, degree=3):
    """Clamped knot vector on ``[lo, hi]`` with ``n_basis`` functions."""
    n_inner = n_basis - degree - 1
    if n_inner < 0:
        raise ValueError("need n_basis >= degree + 1")
    inner = np.linspace(lo, hi, n_inner + 2)[1:-1]
    return np.concatenate([[lo] * (degree + 1), inner, [hi] * (degree + 1)])


def greville(knots, degree=3):
    n = len(knots) - degree - 1
    return np.array([np.mean(knots[j + 1:j + degree + 1]) for j in range(n)])


class _Basis:
    """Cubic B-spline basis with value and derivative design matrices."""

    def __init__(self, knots, degree=3):
        self.knots = np.asarray(knots, dtype=float)
        self.degree = degree
        self.n = len(self.knots) - degree - 1
        eye = np.eye(self.n)
        self._b = BSpline(self.knots, eye, degree, extrapolate=True)
        self._db = self._b.derivative()

    @property
    def lo(self):
        return self.knots[self.degree]

    @property
    def hi(self):
        return self.knots[-self.degree - 1]

    def __call__(self, s, nu=0):
        s = np.clip(np.asarray(s, dtype=float), self.lo, self.hi)
        return (self._b if nu == 0 else self._db)(s)

    def local(self, s, nu=0):
        """``(columns, values)`` of the ``degree + 1`` basis functions alive at each ``s``."""
        s = np.clip(np.asarray(s, dtype=float).ravel(), self.lo, self.hi)
        m = np.searchsorted(self.knots, s, side="right") - 1
        m = np.clip(m, self.degree, self.n - 1)
        cols = m[:, None] - self.degree + np.arange(self.degree + 1)[None, :]
        dense = self(s, nu)
        vals = np.take_along_axis(dense, cols, axis=1)
        return cols, vals


# -- certificates --------------------------------------------------------------------

@dataclass(eq=False)
class CylinderSubsolution:
    """Candidate ``xi(t, x) = zeta(t, Z x)`` with ``Z`` the ``k x n`` matrix of directions."""

    kind: str
    directions: np.ndarray
    T: float
    knots_t: Optional[np.ndarray] = None
    knots_y: Optional[np.ndarray] = None
    coef: Optional[np.ndarray] = None
    funcs: dict = field(default_factory=dict)
    bounds: dict = field(default_factory=dict)
    label: str = ""

    def __post_init__(self):
        self.directions = np.atleast_2d(np.asarray(self.directions, dtype=float))
        if self.kind not in ("affine", "tensor", "callable"):
            raise ValueError(f"unknown certificate kind {self.kind!r}")
        if self.kind == "tensor" and self.k != 1:
            raise ValueError("tensor certificates use a single direction")
        if self.kind in ("affine", "tensor"):
            self._bt = _Basis(self.knots_t)
            self._by = _Basis(self.knots_y) if self.kind == "tensor" else None
            if self.coef is None:
                self.coef = np.zeros(self.n_params)
            self.coef = np.asarray(self.coef, dtype=float).ravel()
            if self.coef.size != self.n_params:
                raise ValueError("coefficient vector has the wrong length")

    # -- constructors
    @classmethod
    def affine(cls, T, dim=1, n_basis=10, directions=None, coef=None):
        Z = np.eye(dim) if directions is None else directions
        return cls("affine", Z, float(T), knots_t=clamped_knots(0.0, T, n_basis), coef=coef)

    @classmethod
    def tensor(cls, T, y_range, n_t=8, n_y=20, direction=None, coef=None):
        Z = np.array([[1.0]]) if direction is None else np.atleast_2d(direction)
        return cls("tensor", Z, float(T), knots_t=clamped_knots(0.0, T, n_t),
                   knots_y=clamped_knots(y_range[0], y_range[1], n_y), coef=coef)

    @classmethod
    def from_callables(cls, T, zeta, dzeta_dt, grad_y, directions, label=""):
        """``zeta(t, y)``, ``dzeta_dt(t, y)`` and ``grad_y(t, y)`` act on ``t (...)`` and ``y (..., k)``."""
        return cls("callable", directions, float(T),
                   funcs={"zeta": zeta, "dt": dzeta_dt, "grad": grad_y}, label=label)

    # -- shape
    @property
    def k(self) -> int:
        return self.directions.shape[0]

    @property
    def dim(self) -> int:
        return self.directions.shape[1]

    @property
    def n_params(self) -> int:
        if self.kind == "affine":
            return (self.k + 1) * self._bt.n
        if self.kind == "tensor":
            return self._bt.n * self._by.n
        return 0

    def with_coef(self, coef) -> "CylinderSubsolution":
        return CylinderSubsolution(self.kind, self.directions, self.T, self.knots_t, self.knots_y,
                                   np.array(coef, dtype=float), dict(self.funcs), {}, self.label)

    # -- evaluation (t: (...), x: (..., n))
    def _y(self, x):
        x = np.asarray(x, dtype=float)
        if x.ndim == 0:
            x = x[None]
        if x.shape[-1] != self.dim:
            raise ValueError(f"x has length {x.shape[-1]}, expected {self.dim}")
        return x @ self.directions.T

    def _parts(self, t, x):
        """``(zeta, d_t zeta, grad_y zeta)`` at the samples."""
        y = self._y(x)
        t = np.broadcast_to(np.asarray(t, dtype=float), y.shape[:-1])
        if self.kind == "callable":
            return (np.asarray(self.funcs["zeta"](t, y)), np.asarray(self.funcs["dt"](t, y)),
                    np.asarray(self.funcs["grad"](t, y)))
        shape = y.shape[:-1]
        tf = t.ravel()
        yf = y.reshape(-1, self.k)
        Bt, dBt = self._bt(tf), self._bt(tf, 1)
        nb = self._bt.n
        if self.kind == "affine":
            C = self.coef.reshape(self.k + 1, nb)
            al, dal = Bt @ C[0], dBt @ C[0]
            be, dbe = Bt @ C[1:].T, dBt @ C[1:].T
            z = al + np.sum(be * yf, axis=1)
            zt = dal + np.sum(dbe * yf, axis=1)
            zy = be
        else:
            C = self.coef.reshape(nb, self._by.n)
            By, dBy = self._by(yf[:, 0]), self._by(yf[:, 0], 1)
            z = np.einsum("sj,jl,sl->s", Bt, C, By)
            zt = np.einsum("sj,jl,sl->s", dBt, C, By)
            zy = np.einsum("sj,jl,sl->s", Bt, C, dBy)[:, None]
        return z.reshape(shape), zt.reshape(shape), zy.reshape(shape + (self.k,))

    def value(self, t, x):
        return self._parts(t, x)[0]

    def dt(self, t, x):
        return self._parts(t, x)[1]

    def grad_x(self, t, x):
        """``D_x xi = sum_i d_i zeta z_i``."""
        return self._parts(t, x)[2] @ self.directions

    # -- linear structure in the coefficients
    def design(self, t, x):
        """Sparse matrices ``(A0, At, [A_i])`` with ``zeta = A0 c``, ``d_t zeta = At c``, ``d_i zeta = A_i c``."""
        if self.kind == "callable":
            raise ValueError("callable certificates have no coefficients")
        y = self._y(x).reshape(-1, self.k)
        tf = np.broadcast_to(np.asarray(t, dtype=float), y.shape[:1]).ravel()
        ns = tf.size
        ct, vt = self._bt.local(tf)
        _, dvt = self._bt.local(tf, 1)
        nb = self._bt.n
        P = self.n_params
        rows = np.repeat(np.arange(ns), ct.shape[1])

        def mat(cols, vals):
            return sps.csr_matrix((vals.ravel(), (np.repeat(np.arange(ns), cols.shape[1]),
                                                  cols.ravel())), shape=(ns, P))

        if self.kind == "affine":
            cols = [ct] + [ct + (i + 1) * nb for i in range(self.k)]
            cols = np.concatenate(cols, axis=1)
            A0 = mat(cols, np.concatenate([vt] + [vt * y[:, [i]] for i in range(self.k)], axis=1))
            At = mat(cols, np.concatenate([dvt] + [dvt * y[:, [i]] for i in range(self.k)], axis=1))
            Ai = []
            for i in range(self.k):
                v = np.zeros((ns, cols.shape[1]))
                v[:, (i + 1) * ct.shape[1]:(i + 2) * ct.shape[1]] = vt
                Ai.append(mat(cols, v))
            return A0, At, Ai
        cy, vy = self._by.local(y[:, 0])
        _, dvy = self._by.local(y[:, 0], 1)
        ny = self._by.n
        cols = (ct[:, :, None] * ny + cy[:, None, :]).reshape(ns, -1)
        A0 = mat(cols, (vt[:, :, None] * vy[:, None, :]).reshape(ns, -1))
        At = mat(cols, (dvt[:, :, None] * vy[:, None, :]).reshape(ns, -1))
        Ay = mat(cols, (vt[:, :, None] * dvy[:, None, :]).reshape(ns, -1))
        del rows
        return A0, At, [Ay]

    def time_shift_coefficients(self, eps: float, c: float) -> np.ndarray:
        """Coefficients of ``zeta + eps (t - T) - c`` (exact: splines reproduce affine functions of t)."""
        add = eps * (greville(self._bt.knots) - self.T) - c
        coef = self.coef.copy()
        if self.kind == "affine":
            coef[:self._bt.n] += add
        else:
            C = coef.reshape(self._bt.n, self._by.n)
            C += add[:, None]
            coef = C.ravel()
        return coef

    # -- serialisation
    def to_dict(self) -> dict:
        out = {"kind": self.kind, "directions": self.directions.tolist(), "T": self.T,
               "bounds": self.bounds, "label": self.label}
        if self.kind != "callable":
            out["knots_t"] = self.knots_t.tolist()
            out["coef"] = self.coef.tolist()
            if self.kind == "tensor":
                out["knots_y"] = self.knots_y.tolist()
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "CylinderSubsolution":
        if d["kind"] == "callable":
            raise ValueError("callable certificates cannot be restored from JSON")
        return cls(d["kind"], np.array(d["directions"]), d["T"], np.array(d["knots_t"]),
                   None if "knots_y" not in d else np.array(d["knots_y"]), np.array(d["coef"]),
                   bounds=d.get("bounds", {}), label=d.get("label", ""))


def canonical_certificate(params: DeGiorgiParams, shift: float = 0.0) -> CylinderSubsolution:
    """``xi(t, x) = e^{-at} phi(t, x) + shift`` with ``k = n`` coordinate directions."""
    E, a = params.energy, params.a

    def zeta(t, y):
        return np.exp(-a * t) * E.value(t, y) + shift

    def dzeta(t, y):
        return np.exp(-a * t) * (E.dt(t, y) - a * E.value(t, y))

    def grad(t, y):
        return np.exp(-a * np.asarray(t))[..., None] * E.grad(t, y)

    label = "exp(-a t) phi" + (f" + {shift:g}" if shift else "")
    return CylinderSubsolution.from_callables(params.T, zeta, dzeta, grad, np.eye(params.dim), label)


# -- sampling and feasibility ----------------------------------------------------------

@dataclass
class SampleSpec:
    """Sample cloud over ``[0, T] x box``.

    ``box`` defaults to ``x0 +- 3`` per coordinate.  In one dimension an
    ``n_grid x n_grid`` tensor grid is used as well as ``n_halton``
    quasi-random points; in higher dimension the grid is replaced by
    ``n_grid^2`` extra quasi-random points.
    """

    n_grid: int = 201
    n_halton: int = 10000
    box: Optional[tuple] = None
    half_width: float = 3.0
    seed: int = 0

    def box_for(self, params: DeGiorgiParams):
        if self.box is not None:
            lo, hi = self.box
            return np.atleast_1d(np.asarray(lo, float)), np.atleast_1d(np.asarray(hi, float))
        return params.x0 - self.half_width, params.x0 + self.half_width

    def points(self, params: DeGiorgiParams):
        """``(t, x)`` interior samples and ``x`` terminal samples."""
        lo, hi = self.box_for(params)
        n = params.dim
        T = params.T
        hal = qmc.Halton(d=n + 1, scramble=True, seed=self.seed).random(self.n_halton)
        th = hal[:, 0] * T
        xh = lo + hal[:, 1:] * (hi - lo)
        if n == 1:
            tg, xg = np.meshgrid(np.linspace(0, T, self.n_grid),
                                 np.linspace(lo[0], hi[0], self.n_grid), indexing="ij")
            t = np.concatenate([tg.ravel(), th])
            x = np.concatenate([xg.ravel()[:, None], xh])
            xT = np.concatenate([np.linspace(lo[0], hi[0], 4 * self.n_grid)[:, None], xh])
        else:
            extra = qmc.Halton(d=n + 1, scramble=True, seed=self.seed + 1).random(self.n_grid ** 2)
            t = np.concatenate([th, extra[:, 0] * T])
            x = np.concatenate([xh, lo + extra[:, 1:] * (hi - lo)])
            xT = x
        return t, x, xT

    def doubled(self) -> "SampleSpec":
        return SampleSpec(2 * self.n_grid - 1, 2 * self.n_halton, self.box, self.half_width,
                          self.seed)


@dataclass
class FeasibilityReport:
    max_violation_hj: float
    max_violation_terminal: float
    worst_point: tuple
    feasible: bool
    samples_checked: int
    tol_feas: float = TOL_FEAS
    falsified: bool = False
    repair: dict = field(default_factory=dict)
    history: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"max_violation_hj": self.max_violation_hj,
                "max_violation_terminal": self.max_violation_terminal,
                "worst_point": [float(self.worst_point[0]), list(map(float, self.worst_point[1]))],
                "feasible": self.feasible, "samples_checked": self.samples_checked,
                "tol_feas": self.tol_feas, "falsified": self.falsified, "repair": self.repair}


def _rhs(params: DeGiorgiParams, t, x):
    """``e^{-at} (S + a phi - d_t phi)`` at samples."""
    E, pot, a = params.energy, params.pot, params.a
    S = np.asarray(conjugate(pot, t, x, -E.grad(t, x)))
    r = S + a * E.value(t, x)
    if E.time_dependent:
        r = r - E.dt(t, x)
    return np.exp(-a * t) * r


def hj_violations(params: DeGiorgiParams, xi: CylinderSubsolution, t, x, xT=None):
    """Pointwise HJ defect (positive = violated) and terminal defect."""
    a = params.a
    t = np.asarray(t, dtype=float)
    x = np.asarray(x, dtype=float).reshape(t.shape + (params.dim,))
    _, zt, _ = xi._parts(t, x)
    Dx = xi.grad_x(t, x)
    ea = np.exp(a * t)
    g = -zt + np.asarray(conjugate(params.pot, t, x, -ea[..., None] * Dx)) / ea - _rhs(params, t, x)
    gT = None
    if xT is not None:
        xT = np.asarray(xT, dtype=float)
        gT = xi.value(params.T, xT) - math.exp(-a * params.T) * params.energy.value(params.T, xT)
    return g, gT


def check_hj_feasible(params: DeGiorgiParams, xi: CylinderSubsolution,
                      sample_spec: Optional[SampleSpec] = None, tol_feas: float = TOL_FEAS
                      ) -> FeasibilityReport:
    """Largest sampled violations of the HJ inequality and of the terminal bound."""
    spec = sample_spec or SampleSpec()
    t, x, xT = spec.points(params)
    g, gT = hj_violations(params, xi, t, x, xT)
    i = int(np.argmax(g))
    j = int(np.argmax(gT))
    mh, mt = float(g[i]), float(gT[j])
    worst = (float(t[i]), x[i].copy()) if mh >= mt else (float(params.T), xT[j].copy())
    return FeasibilityReport(mh, mt, worst, bool(mh <= tol_feas and mt <= tol_feas),
                             int(t.size + xT.shape[0]), tol_feas)


def check_backward_bound(params: DeGiorgiParams, xi: CylinderSubsolution,
                         sample_spec: Optional[SampleSpec] = None, tol: float = 1e-8,
                         tol_feas: float = TOL_FEAS, eps_list=(1e-2, 1e-3)) -> dict:
    """Sampled check of ``xi(t, x) <= e^{-at} phi(t, x)``.

    Also runs the perturbation diagnostic: ``xi_eps = xi + eps (t - T - 1)``
    must satisfy the HJ and terminal inequalities with margin ``eps / 2``
    and stay strictly below ``e^{-at} phi``.  A certificate that fails the
    feasibility check gets a report labelled ``vacuous``.
    """
    spec = sample_spec or SampleSpec()
    t, x, xT = spec.points(params)
    feas = check_hj_feasible(params, xi, spec, tol_feas)
    upper = np.exp(-params.a * t) * params.energy.value(t, x)
    xi_v = xi.value(t, x)
    slack = upper - xi_v
    g, gT = hj_violations(params, xi, t, x, xT)
    diag = {}
    for eps in eps_list:
        # d_t of the perturbation is eps, D_x is unchanged
        m_hj = float(np.max(g - eps))
        m_T = float(np.max(gT - eps))
        m_claim = float(np.max(xi_v + eps * (t - params.T - 1.0) - upper))
        diag[f"{eps:g}"] = {"max_hj": m_hj, "max_terminal": m_T, "max_claim": m_claim,
                            "ok": bool(m_hj <= -eps / 2 and m_T <= -eps / 2 and m_claim < 0)}
    holds = bool(np.min(slack) >= -tol)
    return {
        "vacuous": not feas.feasible,
        "bound_holds": holds,
        "min_slack": float(np.min(slack)),
        "max_slack": float(np.max(slack)),
        "perturbation": diag,
        "passed": bool(holds and all(d["ok"] for d in diag.values())) if feas.feasible else holds,
        "counterexample": bool(feas.feasible and not holds),
    }


def dual_value(params: DeGiorgiParams, xi: CylinderSubsolution, mu0=None) -> float:
    """``sum (xi(0, x) - phi(0, x)) mu0``.

    ``mu0`` is ``None`` (Dirac at ``x0``) or a pair ``(points, weights)``.
    """
    if mu0 is None:
        pts = params.x0[None, :]
        w = np.ones(1)
    else:
        pts, w = mu0
        pts = np.asarray(pts, dtype=float).reshape(-1, params.dim)
        w = np.asarray(w, dtype=float)
    return float(np.dot(xi.value(0.0, pts) - params.energy.value(0.0, pts), w))


# -- dual ascent -----------------------------------------------------------------------

@dataclass
class DualOptions:
    family: str = "affine"
    n_basis: int = 10
    n_t: int = 8
    n_y: int = 20
    rounds: int = 5
    iters_per_round: int = 1000
    exchange: int = 3
    opt_grid: int = 61
    opt_halton: int = 1000
    rho0: float = 1.0
    rho_factor: float = 10.0
    n_refine: int = 64
    tol_feas: float = TOL_FEAS
    tol_dual: float = TOL_DUAL
    sample: SampleSpec = field(default_factory=SampleSpec)

    @classmethod
    def from_spec(cls, spec: Optional[dict]) -> "DualOptions":
        spec = dict(spec or {})
        sample = SampleSpec(**spec.pop("sample", {}))
        return cls(sample=sample, **spec)


def _family(params: DeGiorgiParams, opts: DualOptions) -> CylinderSubsolution:
    if opts.family == "affine":
        xi = CylinderSubsolution.affine(params.T, params.dim, opts.n_basis)
    elif opts.family == "tensor":
        if params.dim != 1:
            raise ValueError("tensor family is one-dimensional")
        lo, hi = opts.sample.box_for(params)
        xi = CylinderSubsolution.tensor(params.T, (float(lo[0]), float(hi[0])), opts.n_t, opts.n_y)
    else:
        raise ValueError(f"unknown dual family {opts.family!r}")
    if xi.n_params > 200:
        raise ValueError("dual families are limited to 200 parameters")
    return xi


def _refine(params, xi, t, x, g, box, n_starts, terminal=False):
    """Local maximisation of the violation from the worst samples.

    Returns the largest violation found and the points reached.
    """
    lo, hi = box
    order = np.argsort(g)[::-1][:n_starts]
    best = float(np.max(g))
    n = params.dim
    found = []
    for i in order:
        if terminal:
            def f(z):
                return -float(hj_violations(params, xi, np.zeros(1), np.zeros((1, n)), z[None, :])[1][0])
            z0 = x[i]
            bnds = list(zip(lo, hi))
        else:
            def f(z):
                return -float(hj_violations(params, xi, z[:1], z[None, 1:])[0][0])
            z0 = np.concatenate([[t[i]], x[i]])
            bnds = [(0.0, params.T)] + list(zip(lo, hi))
        res = minimize(f, z0, method="L-BFGS-B", bounds=bnds,
                       options={"maxiter": 50, "ftol": 1e-15, "gtol": 1e-12})
        best = max(best, -float(res.fun))
        found.append(res.x)
    return best, np.array(found).reshape(len(found), -1)


def _repair(params, xi, t, x, xT, box, n_refine):
    """Shift ``xi`` by ``eps (t - T) - c`` so that the largest violations found vanish."""
    g, gT = hj_violations(params, xi, t, x, xT)
    eps = max(0.0, _refine(params, xi, t, x, g, box, n_refine)[0])
    cT = max(0.0, _refine(params, xi, t, xT, gT, box, n_refine // 4, terminal=True)[0])
    if eps > 0 or cT > 0:
        # a small margin keeps round-off on the feasible side
        xi = xi.with_coef(xi.time_shift_coefficients(eps * (1 + 1e-9) + 1e-14,
                                                     cT * (1 + 1e-9) + 1e-14))
    return xi, eps, cT


class _Problem:
    """Penalised objective on a fixed sample set."""

    def __init__(self, params, xi, t, x, xT, a0, phi0):
        self.params, self.t, self.x = params, t, x
        self.A0, self.At, self.Ai = xi.design(t, x)
        self.AT = xi.design(np.full(xT.shape[0], params.T), xT)[0]
        self.rhs = _rhs(params, t, x)
        self.rhsT = math.exp(-params.a * params.T) * params.energy.value(params.T, xT)
        self.ea = np.exp(params.a * t)
        self.Z = xi.directions
        self.a0, self.phi0 = a0, phi0

    def violations(self, c):
        gy = np.stack([A @ c for A in self.Ai], axis=-1)
        w = -self.ea[:, None] * (gy @ self.Z)
        g = -(self.At @ c) + np.asarray(conjugate(self.params.pot, self.t, self.x, w)) / self.ea - self.rhs
        return g, w

    def __call__(self, c, rho):
        g, w = self.violations(c)
        gT = self.AT @ c - self.rhsT
        ph = np.maximum(g, 0.0)
        pt = np.maximum(gT, 0.0)
        f = -(self.a0 @ c - self.phi0) + 0.5 * rho * (ph @ ph + pt @ pt)
        # d g / d c = -At + sum_i A_i^T [grad psi*(w) . (-e^{at} z_i)] / e^{at}
        gz = np.asarray(conjugate_gradient(self.params.pot, self.t, self.x, w))
        grad = -self.a0 + rho * (-(self.At.T @ ph) + self.AT.T @ pt)
        for i, A in enumerate(self.Ai):
            grad += rho * (A.T @ (ph * -(gz @ self.Z[i])))
        return f, grad

    def run(self, c, rho, iters):
        try:
            return lbfgs(lambda cc: self(cc, rho), c, gtol=1e-10, max_iter=iters, memory=20).x
        except StagnationError as exc:
            return exc.best_x


def maximize_dual(params: DeGiorgiParams, family_spec=None, mu0=None, opts: Optional[DualOptions] = None):
    """Penalised ascent of :func:`dual_value` over a spline certificate family.

    Rounds of L-BFGS on ``-value + rho / 2 * sum(max(0, violation)^2)`` over a
    coarse sample set, ``rho`` multiplied by ``opts.rho_factor`` between
    rounds.  Then a few exchange passes add the worst points of the full
    sample cloud (and local maximisers of the violation started there) to
    the active set and re-optimise.  The result is finally made feasible by
    ``xi + eps (t - T) - c`` with ``eps`` and ``c`` the largest HJ and
    terminal violations found.

    Returns ``(certificate, value, report)``; ``report.falsified`` is set
    when the value exceeds ``opts.tol_dual``.

    Raises
    ------
    InfeasibleFamilyError
        If the repaired certificate still fails the sampled check.
    """
    if opts is None:
        opts = DualOptions.from_spec(family_spec) if isinstance(family_spec, dict) else DualOptions()
    xi = _family(params, opts)
    box = opts.sample.box_for(params)
    if mu0 is None:
        pts, w = params.x0[None, :], np.ones(1)
    else:
        pts, w = np.asarray(mu0[0], float).reshape(-1, params.dim), np.asarray(mu0[1], float)
    a0 = np.asarray(xi.design(np.zeros(pts.shape[0]), pts)[0].T @ w).ravel()
    phi0 = float(np.dot(params.energy.value(0.0, pts), w))

    coarse = SampleSpec(opts.opt_grid, opts.opt_halton, opts.sample.box, opts.sample.half_width,
                        opts.sample.seed)
    t, x, xT = coarse.points(params)
    prob = _Problem(params, xi, t, x, xT, a0, phi0)
    c = np.zeros(xi.n_params)
    rho = opts.rho0
    history = []

    def log(stage):
        g, _ = prob.violations(c)
        history.append({"stage": stage, "rho": rho, "value": float(a0 @ c - phi0),
                        "max_hj": float(np.max(g)),
                        "max_terminal": float(np.max(prob.AT @ c - prob.rhsT))})

    for r in range(opts.rounds):
        if r:
            rho *= opts.rho_factor
        c = prob.run(c, rho, opts.iters_per_round)
        log(f"round {r}")

    tf, xf, xTf = opts.sample.points(params)
    for e in range(opts.exchange):
        cur = xi.with_coef(c)
        g, gT = hj_violations(params, cur, tf, xf, xTf)
        top = np.argsort(g)[::-1][:opts.n_refine]
        _, zr = _refine(params, cur, tf, xf, g, box, opts.n_refine // 4)
        topT = np.argsort(gT)[::-1][:opts.n_refine // 4]
        _, zT = _refine(params, cur, tf, xTf, gT, box, opts.n_refine // 8, terminal=True)
        t = np.concatenate([t, tf[top], zr[:, 0]])
        x = np.concatenate([x, xf[top], zr[:, 1:]])
        xT = np.concatenate([xT, xTf[topT], zT])
        prob = _Problem(params, xi, t, x, xT, a0, phi0)
        c = prob.run(c, rho, opts.iters_per_round)
        log(f"exchange {e}")

    # repair each candidate and keep the best; the zero certificate is often
    # feasible already (e.g. when x0 minimises phi)
    best = None
    for coef in (c, np.zeros_like(c)):
        cand, eps, cT = _repair(params, xi.with_coef(coef), tf, xf, xTf, box, opts.n_refine)
        rep = check_hj_feasible(params, cand, opts.sample, opts.tol_feas)
        val = dual_value(params, cand, mu0)
        if rep.feasible and (best is None or val > best[1]):
            best = (cand, val, rep, eps, cT)
    if best is None:
        raise InfeasibleFamilyError(
            f"repaired certificate still violates the sampled constraints "
            f"(hj {rep.max_violation_hj:.3e}, terminal {rep.max_violation_terminal:.3e})")
    xi, value, report, eps, cT = best
    if params.dim == 1:
        lo, hi = box
        TT, XX = np.meshgrid(np.linspace(0, params.T, 101), np.linspace(lo[0], hi[0], 101),
                             indexing="ij")
        zeta, zt, zy = xi._parts(TT, XX[..., None])
        xi.bounds = {"zeta": float(np.max(np.abs(zeta))), "d_t": float(np.max(np.abs(zt))),
                     "d_y": float(np.max(np.abs(zy)))}
    report.falsified = bool(value > opts.tol_dual)
    report.repair = {"eps": eps, "c": cT}
    report.history = history
    return xi, value, report


def save_certificate(xi: CylinderSubsolution, report: Optional[FeasibilityReport], path,
                     value=None) -> None:
    out = xi.to_dict()
    out["value"] = value
    if report is not None:
        out["feasibility"] = report.to_dict()
    write_json(out, path)
