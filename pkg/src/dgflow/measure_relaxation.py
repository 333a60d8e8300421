"""Relaxed problem over space-time measures on a 1-D grid.

Unknowns on a grid of ``Nt`` time slabs and ``Nx`` space cells:

``mu[k, i]``
    mass rate of ``mu`` in slab ``k`` and cell ``i`` (each slab carries the
    total mass ``M``, so ``sum(mu) * tau = T * M``).
``nu[k, f]``
    flux through interior face ``f`` (between cells ``f`` and ``f + 1``);
    boundary faces carry no flux.
``m_end[i]``
    terminal mass.

The weak continuity equation is tested against grid functions ``xi[j, i]``
on time nodes ``j = 0..Nt`` and cell centres::

    sum mu (xi[k+1] - xi[k]) + tau sum nu Dx(xi) - sum xi[Nt] m_end + sum xi[0] mu0 = 0

with ``Dx`` the centred face difference averaged over the two time nodes of
the slab.  The action lives on faces, with face mass ``rho_f`` equal to the
mean of the two neighbouring cells, through the perspective
``c_f rho_f psi0(nu_f / rho_f)``.

The saddle-point problem is solved by the primal-dual hybrid gradient
method; an auxiliary face-mass variable ``rho`` tied to ``mu`` by linear
rows keeps every proximal map separable.
"""
from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import scipy.sparse as sps

from .convex_core import DissipationPotential
from .degiorgi_functional import DeGiorgiParams, Trajectory, write_json

__all__ = [
    "SpaceTimeGrid",
    "GridMeasureTriple",
    "RelaxOptions",
    "RelaxResult",
    "OutOfDomainError",
    "ReconstructionError",
    "InvariantError",
    "make_mu0",
    "assemble_continuity_operator",
    "continuity_residual",
    "weak_residual",
    "evaluate_E",
    "dual_bound",
    "solve_relaxed",
    "lift_trajectory",
    "stationary_triple",
    "reconstruct_characteristic",
    "face_action",
    "action_dual_value",
    "perspective_prox",
    "save_triple",
    "load_triple",
]


class OutOfDomainError(ValueError):
    """A trajectory leaves ``[x_min, x_max]``."""


class ReconstructionError(RuntimeError):
    """The reconstruction hit vacuum; ``partial`` holds the path computed so far."""

    def __init__(self, message, partial):
        super().__init__(message)
        self.partial = partial


class InvariantError(AssertionError):
    """An internal invariant (nonnegative masses after a prox) was broken."""


@dataclass(frozen=True)
class SpaceTimeGrid:
    T: float
    Nt: int
    x_min: float
    x_max: float
    Nx: int

    def __post_init__(self):
        if self.Nt < 8 or self.Nx < 8:
            raise ValueError("grid needs Nt, Nx >= 8")
        if not self.x_min < self.x_max or not self.T > 0:
            raise ValueError("need x_min < x_max and T > 0")

    @property
    def tau(self) -> float:
        return self.T / self.Nt

    @property
    def h(self) -> float:
        return (self.x_max - self.x_min) / self.Nx

    @property
    def centers(self) -> np.ndarray:
        return self.x_min + (np.arange(self.Nx) + 0.5) * self.h

    @property
    def faces(self) -> np.ndarray:
        """Interior face positions (``Nx - 1`` of them)."""
        return self.x_min + np.arange(1, self.Nx) * self.h

    @property
    def slab_times(self) -> np.ndarray:
        return (np.arange(self.Nt) + 0.5) * self.tau

    @property
    def node_times(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.Nt + 1)

    def contains(self, x) -> bool:
        return bool(self.x_min < float(x) < self.x_max)

    def to_dict(self) -> dict:
        return {"T": self.T, "Nt": self.Nt, "x_min": self.x_min, "x_max": self.x_max,
                "Nx": self.Nx}


@dataclass(eq=False)
class GridMeasureTriple:
    mu: np.ndarray
    nu: np.ndarray
    m_end: np.ndarray
    mu0: np.ndarray

    def check_shapes(self, grid: SpaceTimeGrid):
        Nt, Nx = grid.Nt, grid.Nx
        if self.mu.shape != (Nt, Nx) or self.nu.shape != (Nt, Nx - 1) or \
                self.m_end.shape != (Nx,) or self.mu0.shape != (Nx,):
            raise ValueError("triple arrays do not match the grid")

    @property
    def mass(self) -> float:
        return float(np.sum(self.mu0))

    def rho(self) -> np.ndarray:
        return 0.5 * (self.mu[:, :-1] + self.mu[:, 1:])

    def mass_defects(self, grid: SpaceTimeGrid) -> dict:
        """Deviations in the two mass identities (tests ``xi = 1`` and ``xi = t``)."""
        M = self.mass
        return {"terminal": float(abs(np.sum(self.m_end) - M)),
                "time_integral": float(abs(np.sum(self.mu) * grid.tau - grid.T * M))}

    def copy(self) -> "GridMeasureTriple":
        return GridMeasureTriple(self.mu.copy(), self.nu.copy(), self.m_end.copy(), self.mu0.copy())


def make_mu0(grid: SpaceTimeGrid, x0: float, mode: str = "cell", mass: float = 1.0) -> np.ndarray:
    """Discrete initial datum.

    ``cell``: all mass in the cell containing ``x0``; ``split``: linear split
    between the two nearest centres; ``gaussian``: normalised Gaussian of
    width ``2h`` sampled at the centres.
    """
    x0 = float(np.asarray(x0).reshape(-1)[0])
    if not grid.contains(x0):
        raise OutOfDomainError(f"x0={x0} outside ({grid.x_min}, {grid.x_max})")
    out = np.zeros(grid.Nx)
    if mode == "cell":
        i = min(int((x0 - grid.x_min) // grid.h), grid.Nx - 1)
        out[i] = mass
    elif mode == "split":
        out = _split_weights(grid, x0) * mass
    elif mode == "gaussian":
        w = np.exp(-0.5 * ((grid.centers - x0) / (2 * grid.h)) ** 2)
        out = mass * w / w.sum()
    else:
        raise ValueError(f"unknown mu0 mode {mode!r}")
    return out


def _split_weights(grid: SpaceTimeGrid, x: float) -> np.ndarray:
    if not (grid.x_min <= x <= grid.x_max):
        raise OutOfDomainError(f"x={x} outside [{grid.x_min}, {grid.x_max}]")
    w = np.zeros(grid.Nx)
    s = (x - grid.x_min) / grid.h - 0.5
    if s <= 0:
        w[0] = 1.0
    elif s >= grid.Nx - 1:
        w[-1] = 1.0
    else:
        i = int(math.floor(s))
        th = s - i
        w[i] += 1.0 - th
        w[i + 1] += th
    return w


# -- continuity operator ---------------------------------------------------------

class _Layout:
    """Index bookkeeping for the stacked unknown ``u = (mu, nu, m_end, rho)``."""

    def __init__(self, grid: SpaceTimeGrid):
        Nt, Nx = grid.Nt, grid.Nx
        self.n_mu = Nt * Nx
        self.n_nu = Nt * (Nx - 1)
        self.n_m = Nx
        self.s_mu = slice(0, self.n_mu)
        self.s_nu = slice(self.n_mu, self.n_mu + self.n_nu)
        self.s_m = slice(self.s_nu.stop, self.s_nu.stop + self.n_m)
        self.s_rho = slice(self.s_m.stop, self.s_m.stop + self.n_nu)
        self.n = self.s_rho.stop
        self.n_ce = (Nt + 1) * Nx
        self.n_rows = self.n_ce + self.n_nu


def _ce_matrix(grid: SpaceTimeGrid) -> sps.csr_matrix:
    """Rows ``(j, i)``: coefficient of ``xi[j, i]`` in the weak form, columns ``(mu, nu, m_end)``."""
    Nt, Nx, tau, h = grid.Nt, grid.Nx, grid.tau, grid.h
    rows, cols, vals = [], [], []
    row = lambda j, i: j * Nx + i
    c_mu = lambda k, i: k * Nx + i
    off_nu = Nt * Nx
    c_nu = lambda k, f: off_nu + k * (Nx - 1) + f
    off_m = off_nu + Nt * (Nx - 1)
    for k in range(Nt):
        for i in range(Nx):
            rows += [row(k + 1, i), row(k, i)]
            cols += [c_mu(k, i), c_mu(k, i)]
            vals += [1.0, -1.0]
        for f in range(Nx - 1):
            coef = tau / (2 * h)
            for j in (k, k + 1):
                rows += [row(j, f + 1), row(j, f)]
                cols += [c_nu(k, f), c_nu(k, f)]
                vals += [coef, -coef]
    for i in range(Nx):
        rows.append(row(Nt, i))
        cols.append(off_m + i)
        vals.append(-1.0)
    return sps.csr_matrix((vals, (rows, cols)), shape=((Nt + 1) * Nx, off_m + Nx))


def assemble_continuity_operator(grid: SpaceTimeGrid, mu0: np.ndarray):
    """Sparse ``K`` and right-hand side ``b`` with ``K (mu, nu, m_end) = b`` the discrete weak form.

    For a grid function ``xi`` (flattened over ``(Nt + 1, Nx)``),
    ``xi @ (K u - b)`` equals the weak continuity residual tested with
    ``xi``.
    """
    K = _ce_matrix(grid)
    b = np.zeros(K.shape[0])
    b[:grid.Nx] = -np.asarray(mu0, dtype=float)
    return K, b


def _pack(triple: GridMeasureTriple) -> np.ndarray:
    return np.concatenate([triple.mu.ravel(), triple.nu.ravel(), triple.m_end.ravel()])


def continuity_residual(grid: SpaceTimeGrid, triple: GridMeasureTriple) -> np.ndarray:
    """``K u - b`` reshaped to ``(Nt + 1, Nx)``."""
    K, b = assemble_continuity_operator(grid, triple.mu0)
    return (K @ _pack(triple) - b).reshape(grid.Nt + 1, grid.Nx)


def weak_residual(grid: SpaceTimeGrid, triple: GridMeasureTriple, n_modes: int = 4) -> float:
    """Largest weak residual over smooth test functions, scaled by their C^1 norm and the mass.

    Test functions are products ``cos(p pi t / T) * {cos, sin}(q pi (x - x_min) / L)``
    with ``p, q < n_modes``.
    """
    res = continuity_residual(grid, triple)
    t = grid.node_times[:, None]
    x = grid.centers[None, :]
    L = grid.x_max - grid.x_min
    worst = 0.0
    for p in range(n_modes):
        for q in range(n_modes):
            for trig in (np.cos, np.sin):
                if trig is np.sin and q == 0:
                    continue
                xi = np.cos(p * np.pi * t / grid.T) * trig(q * np.pi * (x - grid.x_min) / L)
                c1 = 1.0 + p * np.pi / grid.T + q * np.pi / L
                worst = max(worst, abs(float(np.sum(xi * res))) / (c1 * triple.mass))
    return worst


# -- costs -------------------------------------------------------------------------

@dataclass
class _Costs:
    c_mu: np.ndarray       # (Nt, Nx), multiplies mu
    c_m: np.ndarray        # (Nx,), multiplies m_end
    c_face: np.ndarray     # (Nt, Nx - 1), perspective scale
    const: float


def _costs(params: DeGiorgiParams, grid: SpaceTimeGrid, mu0: np.ndarray) -> _Costs:
    if params.dim != 1:
        raise ValueError("the grid solver handles one space dimension")
    E, pot, a = params.energy, params.pot, params.a
    if pot.is_custom:
        raise ValueError("the grid solver needs a built-in potential family")
    if not math.isclose(params.T, grid.T, rel_tol=1e-12):
        raise ValueError("grid horizon differs from params.T")
    tau = grid.tau
    ts = grid.slab_times
    w = np.exp(-a * ts)
    X = np.broadcast_to(grid.centers[None, :, None], (grid.Nt, grid.Nx, 1))
    Tt = np.broadcast_to(ts[:, None], (grid.Nt, grid.Nx))
    z = -E.grad(Tt, X)
    if pot.friction is None:
        S = pot.base_conj(z) - pot.shift
    else:
        af = np.asarray(pot.friction.value(Tt, X))
        S = af * pot.base_conj(z / af[..., None]) - pot.shift
    lin = S + a * E.value(Tt, X) + pot.shift
    if E.time_dependent:
        lin = lin - E.dt(Tt, X)
    c_mu = tau * w[:, None] * lin
    c_m = math.exp(-a * grid.T) * E.value(grid.T, grid.centers[:, None])
    Xf = np.broadcast_to(grid.faces[None, :, None], (grid.Nt, grid.Nx - 1, 1))
    Tf = np.broadcast_to(ts[:, None], (grid.Nt, grid.Nx - 1))
    af = np.ones((grid.Nt, grid.Nx - 1)) if pot.friction is None \
        else np.asarray(pot.friction.value(Tf, Xf))
    c_face = tau * w[:, None] * af
    const = -float(np.dot(E.value(0.0, grid.centers[:, None]), mu0))
    return _Costs(c_mu, c_m, c_face, const)


def _persp(pot: DissipationPotential, c, nu, rho):
    """``c * rho * psi0(nu / rho)`` with the conventions at ``rho = 0``."""
    nu = np.asarray(nu, dtype=float)
    rho = np.asarray(rho, dtype=float)
    out = np.zeros(np.broadcast(nu, rho).shape)
    pos = rho > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        vel = np.where(pos, nu / np.where(pos, rho, 1.0), 0.0)
        val = pot.base_value(vel[..., None])
        out = np.where(pos, c * rho * val, out)
    out = np.where(~pos & (nu != 0), np.inf, out)
    out = np.where(rho < 0, np.inf, out)
    return out


def face_action(params: DeGiorgiParams, grid: SpaceTimeGrid, triple: GridMeasureTriple,
                rho: Optional[np.ndarray] = None) -> float:
    """Discrete weighted action ``sum_f c_f rho_f psi0(nu_f / rho_f)``."""
    costs = _costs(params, grid, triple.mu0)
    rho = triple.rho() if rho is None else rho
    return float(np.sum(_persp(params.pot, costs.c_face, triple.nu, rho)))


def action_dual_value(params: DeGiorgiParams, grid: SpaceTimeGrid, triple: GridMeasureTriple,
                      zeta: np.ndarray) -> float:
    """``sum_f zeta_f nu_f - c_f rho_f psi0*(zeta_f / c_f)``: a lower bound of the face action.

    The supremum over ``zeta`` equals :func:`face_action`; it is attained at
    ``zeta = c_f psi0'(nu_f / rho_f)``.
    """
    costs = _costs(params, grid, triple.mu0)
    c = costs.c_face
    rho = triple.rho()
    conj = params.pot.base_conj((zeta / c)[..., None])
    return float(np.sum(zeta * triple.nu - c * rho * conj))


def evaluate_E(params: DeGiorgiParams, grid: SpaceTimeGrid, triple: GridMeasureTriple) -> float:
    """Discrete relaxed functional; ``+inf`` if a flux crosses a face with no mass."""
    triple.check_shapes(grid)
    if np.any(triple.mu < 0) or np.any(triple.m_end < 0):
        return math.inf
    costs = _costs(params, grid, triple.mu0)
    act = _persp(params.pot, costs.c_face, triple.nu, triple.rho())
    if not np.all(np.isfinite(act)):
        return math.inf
    return float(np.sum(costs.c_mu * triple.mu) + np.sum(act) + np.dot(costs.c_m, triple.m_end)
                 + costs.const)


def dual_bound(params: DeGiorgiParams, grid: SpaceTimeGrid, mu0: np.ndarray, xi: np.ndarray,
               costs: Optional[_Costs] = None) -> float:
    """Lower bound on the discrete minimum from a test field ``xi`` of shape ``(Nt + 1, Nx)``.

    The Lagrangian is minimised over the flux in closed form and over
    nonnegative slabs of mass ``M`` (which the continuity rows force).
    """
    costs = costs or _costs(params, grid, mu0)
    pot = params.pot
    M = float(np.sum(mu0))
    dxi = (xi[:, 1:] - xi[:, :-1]) / grid.h
    beta = grid.tau * 0.5 * (dxi[:-1] + dxi[1:])
    c = costs.c_face
    red = c * pot.base_conj((-beta / c)[..., None])
    ct = costs.c_mu + (xi[1:] - xi[:-1])
    ct[:, :-1] -= 0.5 * red
    ct[:, 1:] -= 0.5 * red
    val = float(np.dot(xi[0], mu0)) + costs.const
    val += M * float(np.sum(np.min(ct, axis=1)))
    val += M * float(np.min(costs.c_m - xi[-1]))
    return val


# -- proximal maps ---------------------------------------------------------------------

def _project_rows_simplex(v: np.ndarray, mass: float) -> np.ndarray:
    """Euclidean projection of each row onto ``{w >= 0, sum w = mass}``."""
    v = np.atleast_2d(v)
    n = v.shape[1]
    u = -np.sort(-v, axis=1)
    css = np.cumsum(u, axis=1) - mass
    ind = np.arange(1, n + 1)
    cond = u - css / ind > 0
    r = n - 1 - np.argmax(cond[:, ::-1], axis=1)
    theta = css[np.arange(v.shape[0]), r] / (r + 1)
    return np.maximum(v - theta[:, None], 0.0)


def _cubic_root(s, ahat, bhat):
    """Root of ``beta^3 / (2 s^2) + beta (1 + ahat / s) - bhat = 0`` on the branch of ``bhat``."""
    p = 2.0 * s * (s + ahat)
    q = -2.0 * s * s * bhat
    p3 = p / 3.0
    disc = 0.25 * q * q + p3 * p3 * p3
    with np.errstate(invalid="ignore", divide="ignore"):
        sq = np.sqrt(np.maximum(disc, 0.0))
        one = np.cbrt(-q / 2.0 + sq) + np.cbrt(-q / 2.0 - sq)
    out = one
    three = disc < 0
    if np.any(three):
        # three real roots: trigonometric form, extreme root on the side of bhat
        pp, qq = p[three], q[three]
        r = 2.0 * np.sqrt(-pp / 3.0)
        arg = np.clip(3.0 * np.abs(qq) / (np.abs(pp) * r), -1.0, 1.0)
        out[three] = -np.sign(qq) * r * np.cos(np.arccos(arg) / 3.0)
    # Newton polishing step
    for _ in range(1):
        o2 = out * out
        f = o2 * out / (2 * s * s) + out * (1 + ahat / s) - bhat
        df = 3 * o2 / (2 * s * s) + 1 + ahat / s
        ok = np.abs(df) > 1e-300
        out = np.where(ok, out - f / np.where(ok, df, 1.0), out)
    return out


def _project_generic(pot, c, ahat, bhat, warm=None, tol=1e-12, max_iter=100):
    """Project ``(ahat, bhat)`` onto ``{alpha + c psi0*(beta / c) <= 0}``; returns ``beta``.

    Solves ``d(beta) = beta - bhat + max(0, ahat + c psi0*(beta/c)) psi0*'(beta/c) = 0``
    (the derivative of a convex function of ``beta``) by Newton steps kept
    inside a sign-change bracket.
    """
    def dfun(b):
        f, f1, f2 = pot.base_conj_1d(b / c)
        g = ahat + c * f
        pos = g > 0
        d = b - bhat + np.where(pos, g * f1, 0.0)
        with np.errstate(invalid="ignore"):
            dd = 1.0 + np.where(pos, f1 * f1 + g * f2 / c, 0.0)
        return d, dd

    d_hat, _ = dfun(bhat)
    # root lies below bhat where d(bhat) > 0, above where d(bhat) < 0
    direction = np.where(d_hat > 0, -1.0, 1.0)
    lo = np.where(direction < 0, bhat, bhat)
    step = np.maximum(1.0, np.abs(bhat))
    other = bhat + direction * step
    for _ in range(200):
        d_o, _ = dfun(other)
        done = np.sign(d_o) != np.sign(d_hat)
        done |= d_hat == 0
        if np.all(done):
            break
        step = np.where(done, step, 2 * step)
        other = np.where(done, other, bhat + direction * step)
    lo = np.minimum(bhat, other)
    hi = np.maximum(bhat, other)
    b = np.clip(warm, lo, hi) if warm is not None else 0.5 * (lo + hi)
    for _ in range(max_iter):
        d, dd = dfun(b)
        lo = np.where(d < 0, b, lo)
        hi = np.where(d > 0, b, hi)
        with np.errstate(invalid="ignore", divide="ignore"):
            nb = b - d / dd
        bad = ~np.isfinite(nb) | (nb <= lo) | (nb >= hi)
        nb = np.where(bad, 0.5 * (lo + hi), nb)
        if np.max(np.abs(nb - b)) <= tol * max(1.0, float(np.max(np.abs(b)))):
            b = nb
            break
        b = nb
    return b


def perspective_prox(pot: DissipationPotential, c, rho_hat, nu_hat, gamma, warm=None):
    """Proximal map of ``gamma * c * rho psi0(nu / rho)`` at ``(rho_hat, nu_hat)``.

    Uses Moreau's identity: the conjugate of the perspective is the indicator
    of ``{alpha + c psi0*(beta / c) <= 0}``, whose projection is closed form
    for the quadratic family (a cubic) and a safeguarded Newton solve
    otherwise.  Returns ``(rho, nu, beta)`` where ``beta`` is the projection's
    flux component (useful as a warm start).
    """
    ah = rho_hat / gamma
    bh = nu_hat / gamma
    c = np.broadcast_to(np.asarray(c, dtype=float), bh.shape)
    f0 = pot.base_conj((bh / c)[..., None])
    inside = ah + c * f0 <= 0
    if pot.family == "quadratic":
        beta = _cubic_root(pot.weight * c, ah, bh)
    else:
        beta = np.zeros_like(bh)
        out = ~inside
        if np.any(out):
            wb = None if warm is None else warm[out]
            beta[out] = _project_generic(pot, c[out], ah[out], bh[out], wb)
    alpha = np.minimum(ah, -c * pot.base_conj((beta / c)[..., None]))
    alpha = np.where(inside, ah, alpha)
    beta = np.where(inside, bh, beta)
    rho = rho_hat - gamma * alpha
    nu = nu_hat - gamma * beta
    rho = np.where(inside, 0.0, rho)
    nu = np.where(inside, 0.0, nu)
    if np.any(rho < -1e-9 * max(1.0, float(np.max(np.abs(rho_hat))))):
        raise InvariantError("negative face mass after the perspective prox")
    return np.maximum(rho, 0.0), nu, beta


# -- solver ----------------------------------------------------------------------------

@dataclass
class RelaxOptions:
    max_iter: int = 20000
    tol_gap: float = 1e-3
    tol_feas: float = 5e-4
    check_every: int = 250
    step_ratio: Optional[float] = None
    power_iters: int = 50
    time_limit: Optional[float] = None
    adaptive: bool = True
    mu0_mode: str = "cell"
    seed: int = 0
    verbose: bool = False


@dataclass
class RelaxResult:
    triple: GridMeasureTriple
    value: float
    duality_gap: float
    dual_value: float
    xi: np.ndarray
    iterations: int
    converged: bool
    constraint_residual: float
    runtime: float
    history: list = field(default_factory=list)

    def __iter__(self):
        # allows ``triple, value, gap = solve_relaxed(...)``
        return iter((self.triple, self.value, self.duality_gap))


def stationary_triple(grid: SpaceTimeGrid, mu0: np.ndarray) -> GridMeasureTriple:
    """Mass resting at ``mu0`` for all times, no flux."""
    mu0 = np.asarray(mu0, dtype=float)
    return GridMeasureTriple(np.tile(mu0, (grid.Nt, 1)), np.zeros((grid.Nt, grid.Nx - 1)),
                             mu0.copy(), mu0.copy())


def _power_norm(A, iters, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(A.shape[1])
    x /= np.linalg.norm(x)
    s = 0.0
    for _ in range(iters):
        y = A.T @ (A @ x)
        s = np.linalg.norm(y)
        x = y / s
    return math.sqrt(s)


def solve_relaxed(params: DeGiorgiParams, grid: SpaceTimeGrid, opts: Optional[RelaxOptions] = None,
                  mu0: Optional[np.ndarray] = None) -> RelaxResult:
    """Minimise the discrete relaxed functional under the continuity equation.

    Primal-dual hybrid gradient iterations with steps ``s_p s_d ||K||^2 <= 1``
    (``||K||`` from power iterations).  The dual variable on the continuity
    rows is the test field ``xi``; the duality gap reported is the primal
    value minus :func:`dual_bound` at the current ``xi``.  Iteration stops
    once the gap and the constraint residual are below tolerance.
    """
    opts = opts or RelaxOptions()
    start = time.perf_counter()
    if mu0 is None:
        mu0 = make_mu0(grid, params.x0[0], opts.mu0_mode)
    mu0 = np.asarray(mu0, dtype=float)
    M = float(mu0.sum())
    Nt, Nx = grid.Nt, grid.Nx
    lay = _Layout(grid)
    costs = _costs(params, grid, mu0)
    pot = params.pot

    K_ce, b_ce = assemble_continuity_operator(grid, mu0)
    # rho - avg(mu) = 0 rows
    avg = sps.lil_matrix((lay.n_nu, lay.n_mu))
    for k in range(Nt):
        for f in range(Nx - 1):
            r = k * (Nx - 1) + f
            avg[r, k * Nx + f] = -0.5
            avg[r, k * Nx + f + 1] = -0.5
    K = sps.bmat([[K_ce, None], [sps.hstack([avg, sps.csr_matrix((lay.n_nu, lay.n_nu + Nx))]),
                                 sps.eye(lay.n_nu)]]).tocsr()
    # the CE block has no rho columns: pad it
    if K.shape[1] != lay.n:
        raise InvariantError("operator layout mismatch")
    KT = K.T.tocsr()
    b = np.concatenate([b_ce, np.zeros(lay.n_nu)])
    L = _power_norm(K, opts.power_iters, opts.seed) * 1.01
    ratio = opts.step_ratio if opts.step_ratio is not None else 3.0
    sp_ = ratio / L
    sd_ = 1.0 / (ratio * L)

    init = stationary_triple(grid, mu0)
    u = np.concatenate([_pack(init), init.rho().ravel()])
    y = np.zeros(K.shape[0])
    c_mu = costs.c_mu.ravel()
    c_m = costs.c_m
    c_face = costs.c_face.ravel()
    warm = np.zeros(lay.n_nu)
    history = []
    best = None
    it = 0
    converged = False
    Ku = K @ u
    KTy = KT @ y
    alpha = 0.5
    for it in range(1, opts.max_iter + 1):
        g = u - sp_ * KTy
        un = np.empty_like(u)
        mu = _project_rows_simplex((g[lay.s_mu] - sp_ * c_mu).reshape(Nt, Nx), M)
        un[lay.s_mu] = mu.ravel()
        un[lay.s_m] = _project_rows_simplex((g[lay.s_m] - sp_ * c_m)[None, :], M)[0]
        rho, nu, warm = perspective_prox(pot, c_face, g[lay.s_rho], g[lay.s_nu], sp_, warm)
        un[lay.s_rho] = rho
        un[lay.s_nu] = nu
        Kun = K @ un
        yn = y + sd_ * (2 * Kun - Ku - b)
        KTyn = KT @ yn
        if opts.adaptive and it % 50 == 0:
            # balance primal and dual residuals; the step product is unchanged
            p_res = np.linalg.norm((u - un) / sp_ - (KTy - KTyn))
            d_res = np.linalg.norm((y - yn) / sd_ - (Ku - Kun))
            if p_res > 2.0 * d_res:
                sp_, sd_ = sp_ / (1 - alpha), sd_ * (1 - alpha)
                alpha *= 0.95
            elif d_res > 2.0 * p_res:
                sp_, sd_ = sp_ * (1 - alpha), sd_ / (1 - alpha)
                alpha *= 0.95
        u, Ku, y, KTy = un, Kun, yn, KTyn
        if it % opts.check_every == 0 or it == opts.max_iter:
            tri = _unpack(u, grid, mu0)
            val = evaluate_E(params, grid, tri)
            xi = y[:lay.n_ce].reshape(Nt + 1, Nx)
            dv = dual_bound(params, grid, mu0, xi, costs)
            res = float(np.linalg.norm(Ku[:lay.n_ce] - b_ce) / max(M, 1e-300))
            gap = val - dv
            history.append((it, val, dv, res))
            if opts.verbose:
                print(f"{it:7d}  E={val:+.6e}  D={dv:+.6e}  gap={gap:.3e}  res={res:.3e}")
            if best is None or dv > best[1]:
                best = (xi.copy(), dv)
            if gap <= opts.tol_gap and res <= opts.tol_feas:
                converged = True
                break
            if opts.time_limit is not None and time.perf_counter() - start > opts.time_limit:
                break
    tri = _unpack(u, grid, mu0)
    val = evaluate_E(params, grid, tri)
    xi_best, dv = best
    res = float(np.linalg.norm(Ku[:lay.n_ce] - b_ce) / max(M, 1e-300))
    return RelaxResult(tri, val, val - dv, dv, xi_best, it, converged, res,
                       time.perf_counter() - start, history)


def _unpack(u, grid, mu0):
    """Primal triple from the stacked iterate.

    The flux is rescaled so that face velocities computed against the
    auxiliary face mass are kept against the mean cell mass; the two masses
    agree at convergence and this makes the action finite along the way.
    """
    lay = _Layout(grid)
    mu = u[lay.s_mu].reshape(grid.Nt, grid.Nx).copy()
    nu = u[lay.s_nu].reshape(grid.Nt, grid.Nx - 1)
    rho = u[lay.s_rho].reshape(grid.Nt, grid.Nx - 1)
    rbar = 0.5 * (mu[:, :-1] + mu[:, 1:])
    with np.errstate(divide="ignore", invalid="ignore"):
        nu = np.where(rho > 0, nu * rbar / np.where(rho > 0, rho, 1.0), 0.0)
    return GridMeasureTriple(mu, nu, u[lay.s_m].copy(), np.asarray(mu0, dtype=float).copy())


# -- lifting and reconstruction -------------------------------------------------------

def lift_trajectory(grid: SpaceTimeGrid, traj: Trajectory, mu0: Optional[np.ndarray] = None,
                    mass: float = 1.0) -> GridMeasureTriple:
    """Measures carried by a curve.

    Slab ``k`` puts the mass on the two cells bracketing ``x(t_k)`` (linear
    split); the flux on each face is the slab velocity times the face mass,
    so the face action equals ``mass * psi(v_k)`` exactly.
    """
    if traj.dim != 1:
        raise ValueError("lifting needs a 1-D trajectory")
    xs = traj.nodes[:, 0]
    if np.any(xs <= grid.x_min) or np.any(xs >= grid.x_max):
        raise OutOfDomainError("trajectory leaves the spatial domain")
    ts = grid.slab_times
    xm = np.interp(ts, traj.times, xs)
    # slab velocity: slope of the curve across the slab
    v = (np.interp(ts + 0.5 * grid.tau, traj.times, xs)
         - np.interp(ts - 0.5 * grid.tau, traj.times, xs)) / grid.tau
    mu = np.stack([_split_weights(grid, x) for x in xm]) * mass
    rho = 0.5 * (mu[:, :-1] + mu[:, 1:])
    nu = v[:, None] * rho
    m_end = _split_weights(grid, xs[-1]) * mass
    if mu0 is None:
        mu0 = make_mu0(grid, xs[0], "cell", mass)
    return GridMeasureTriple(mu, nu, m_end, np.asarray(mu0, dtype=float))


def reconstruct_characteristic(grid: SpaceTimeGrid, triple: GridMeasureTriple, x0=None,
                               mu_floor: Optional[float] = None) -> Trajectory:
    """Integrate ``x' = nu / rho`` from ``x0`` by the explicit midpoint rule with step ``tau``.

    ``x0=None`` starts from the barycentre of ``mu0``, which sits inside the
    support even when the datum is split between two cells.

    Numerator and denominator are interpolated bilinearly over slab centres
    and interior faces.

    Raises
    ------
    ReconstructionError
        If the interpolated face mass drops below ``mu_floor`` (default
        ``1e-12 M / (Nt Nx)``) or the path leaves the domain.
    """
    M = triple.mass
    floor = mu_floor if mu_floor is not None else 1e-12 * M / (grid.Nt * grid.Nx)
    rho = triple.rho()
    nu = triple.nu
    ts = grid.slab_times
    xf = grid.faces

    def interp(arr, t, x):
        s = np.clip((t - ts[0]) / grid.tau, 0.0, grid.Nt - 1.0)
        k = min(int(s), grid.Nt - 2)
        a = s - k
        r = np.clip((x - xf[0]) / grid.h, 0.0, grid.Nx - 2.0)
        f = min(int(r), grid.Nx - 3)
        bb = r - f
        return ((1 - a) * ((1 - bb) * arr[k, f] + bb * arr[k, f + 1])
                + a * ((1 - bb) * arr[k + 1, f] + bb * arr[k + 1, f + 1]))

    if x0 is None:
        x0 = float(np.dot(triple.mu0, grid.centers) / M)
    xs = [float(np.asarray(x0).reshape(-1)[0])]

    def vel(t, x):
        if not (grid.x_min < x < grid.x_max):
            raise ReconstructionError(f"path left the domain at t={t:.4g}",
                                      _partial(grid, xs))
        r = interp(rho, t, x)
        if r <= floor:
            raise ReconstructionError(f"vacuum along the path at t={t:.4g}, x={x:.4g}",
                                      _partial(grid, xs))
        return interp(nu, t, x) / r

    for k in range(grid.Nt):
        t, x = k * grid.tau, xs[-1]
        xh = x + 0.5 * grid.tau * vel(t, x)
        xs.append(x + grid.tau * vel(t + 0.5 * grid.tau, xh))
    return Trajectory(grid.T, np.array(xs)[:, None])


def _partial(grid, xs):
    return np.array(xs)


# -- serialisation ---------------------------------------------------------------------

def save_triple(directory, grid: SpaceTimeGrid, triple: GridMeasureTriple, value=None, gap=None,
                extra: Optional[dict] = None) -> Path:
    """Write ``mu.csv``, ``nu.csv``, ``m_end.csv``, ``mu0.csv`` and ``header.json``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for name in ("mu", "nu", "m_end", "mu0"):
        arr = np.atleast_2d(getattr(triple, name))
        np.savetxt(d / f"{name}.csv", arr, delimiter=",", fmt="%.17g")
    header = {"grid": grid.to_dict(), "mass": triple.mass,
              "masses": triple.mass_defects(grid), "value": value, "gap": gap}
    if extra:
        header.update(extra)
    write_json(header, d / "header.json")
    return d


def load_triple(directory):
    d = Path(directory)
    header = json.loads((d / "header.json").read_text())
    grid = SpaceTimeGrid(**header["grid"])
    mu = np.loadtxt(d / "mu.csv", delimiter=",", ndmin=2)
    nu = np.loadtxt(d / "nu.csv", delimiter=",", ndmin=2)
    m_end = np.loadtxt(d / "m_end.csv", delimiter=",", ndmin=2)[0]
    mu0 = np.loadtxt(d / "mu0.csv", delimiter=",", ndmin=2)[0]
    return grid, GridMeasureTriple(mu, nu, m_end, mu0), header
