"""Scenario files, stage pipelines and the ``dgflow`` command line.

A scenario is a JSON object::

    {"name": "quadratic",
     "energy": {"family": "quadratic"},
     "potential": {"family": "quadratic"},
     "friction": {"expr": "1 + sin(x)/2", "lower": 0.5, "upper": 1.5},   # optional
     "a": 0.0, "x0": 1.0, "T": 1.0, "N": 200, "seed": 0,
     "solver": {...}, "grid": {...}, "dual": {...}, "tolerances": {...},
     "stages": ["solve", "mms", "relax", "dual"]}

Every stage writes its own artifacts into the output directory and appends a
row ``scenario, stage, value, residual, gap, runtime`` to ``summary.csv``.
"""
from __future__ import annotations

import argparse
import csv
import json
import math
import sys
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional

import numpy as np

from .convex_core import DissipationPotential
from .degiorgi_functional import (DeGiorgiParams, Trajectory, evaluate_J, residual_profile,
                                  write_json, write_trajectory_csv)
from .energy_models import EnergyModel, FrictionField
from .hj_dual_certificates import (DualOptions, InfeasibleFamilyError, canonical_certificate,
                                   check_backward_bound, check_hj_feasible, maximize_dual,
                                   save_certificate)
from .measure_relaxation import (ReconstructionError, RelaxOptions, SpaceTimeGrid,
                                 reconstruct_characteristic, save_triple, solve_relaxed)
from .trajectory_solver import SolverOptions, minimize_J, minimizing_movements, verify_null_minimum

__all__ = [
    "Scenario",
    "SchemaError",
    "load_scenario",
    "bundled_scenario",
    "run_scenario",
    "compare_solvers",
    "equation_residual",
    "main",
]

STAGES = ("solve", "mms", "relax", "dual")
SUMMARY_FIELDS = ["scenario", "stage", "value", "residual", "gap", "runtime"]

DEFAULT_TOLERANCES = {
    "value": 1e-3,           # |J| of the direct minimiser
    "residual": 5e-3,        # largest per-step Fenchel gap
    "mms_distance": 5e-2,    # sup distance direct vs minimizing movements
    "relax_value": 5e-2,     # |min E - min J|
    "gap": 5e-2,             # primal-dual gap of the grid solver
    "recon_margin": 0.1,     # J(reconstruction) <= E + margin
    "dual": 1e-3,            # dual value upper bound
    "dual_min": None,        # optional lower bound on the dual value
    "canonical": 1e-8,       # violation of exp(-at) phi
}


class SchemaError(ValueError):
    """The scenario file is not valid JSON or misses a required field."""


@dataclass
class Scenario:
    name: str
    params: DeGiorgiParams
    spec: dict
    solver: dict = field(default_factory=dict)
    grid: dict = field(default_factory=dict)
    dual: dict = field(default_factory=dict)
    tolerances: dict = field(default_factory=dict)
    stages: tuple = STAGES
    seed: int = 0

    def tol(self, key):
        return self.tolerances.get(key, DEFAULT_TOLERANCES[key])


# -- schema --------------------------------------------------------------------------

_REQUIRED = {"name": str, "energy": dict, "potential": dict, "a": (int, float),
             "x0": (int, float, list), "T": (int, float), "N": int}
_OPTIONAL = {"friction": dict, "seed": int, "solver": dict, "grid": dict, "dual": dict,
             "tolerances": dict, "stages": list, "calibration": dict, "description": str}


def _validate(spec) -> None:
    if not isinstance(spec, dict):
        raise SchemaError("top level: expected a JSON object")
    for key, typ in _REQUIRED.items():
        if key not in spec:
            raise SchemaError(f"field '{key}': missing required field")
        if not isinstance(spec[key], typ) or isinstance(spec[key], bool):
            raise SchemaError(f"field '{key}': wrong type {type(spec[key]).__name__}")
    for key, val in spec.items():
        if key in _REQUIRED:
            continue
        if key not in _OPTIONAL:
            raise SchemaError(f"field '{key}': unknown field")
        if not isinstance(val, _OPTIONAL[key]):
            raise SchemaError(f"field '{key}': wrong type {type(val).__name__}")
    if spec["T"] <= 0:
        raise SchemaError("field 'T': must be positive")
    if spec["N"] < 2:
        raise SchemaError("field 'N': must be at least 2")
    if spec["a"] < 0:
        raise SchemaError("field 'a': must be nonnegative")
    for st in spec.get("stages", []):
        if st not in STAGES:
            raise SchemaError(f"field 'stages': unknown stage {st!r}")
    for key, val in spec.get("tolerances", {}).items():
        if key not in DEFAULT_TOLERANCES:
            raise SchemaError(f"field 'tolerances.{key}': unknown tolerance")
        if val is not None and (not isinstance(val, (int, float)) or isinstance(val, bool)):
            raise SchemaError(f"field 'tolerances.{key}': expected a number")
    if "family" not in spec["energy"]:
        raise SchemaError("field 'energy.family': missing")
    if "family" not in spec["potential"]:
        raise SchemaError("field 'potential.family': missing")
    fr = spec.get("friction")
    if fr is not None:
        for key in ("expr", "lower", "upper"):
            if key not in fr:
                raise SchemaError(f"field 'friction.{key}': missing")


def scenario_from_dict(spec: dict, source: str = "<dict>") -> Scenario:
    _validate(spec)
    x0 = np.atleast_1d(np.asarray(spec["x0"], dtype=float))
    dim = x0.size
    try:
        energy = EnergyModel.from_spec(spec["energy"], dim)
        pot = DissipationPotential.from_spec(spec["potential"], dim)
        if "friction" in spec:
            fr = spec["friction"]
            pot = pot.with_friction(FrictionField.from_expr(fr["expr"], fr["lower"], fr["upper"], dim))
        params = DeGiorgiParams(float(spec["a"]), energy, pot, x0, float(spec["T"]), int(spec["N"]),
                                meta={"name": spec["name"], "source": source})
    except (ValueError, KeyError, TypeError) as exc:
        raise SchemaError(f"{source}: {exc}") from exc
    return Scenario(spec["name"], params, spec, dict(spec.get("solver", {})),
                    dict(spec.get("grid", {})), dict(spec.get("dual", {})),
                    dict(spec.get("tolerances", {})), tuple(spec.get("stages", STAGES)),
                    int(spec.get("seed", 0)))


def load_scenario(path) -> Scenario:
    """Parse and validate a scenario file; raises :class:`SchemaError` with a line or field."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise SchemaError(f"{path}: {exc.strerror}") from exc
    try:
        spec = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    try:
        return scenario_from_dict(spec, str(path))
    except SchemaError as exc:
        raise SchemaError(f"{path}: {exc}") from exc


def bundled_scenario(name: str) -> Path:
    """Path of a scenario shipped with the package (``quadratic``, ``double_well_a1``, ...)."""
    p = resources.files("dgflow") / "scenarios" / f"{name}.json"
    if not p.is_file():
        raise FileNotFoundError(f"no bundled scenario {name!r}")
    return Path(str(p))


# -- stages ----------------------------------------------------------------------------

@dataclass
class StageOutcome:
    stage: str
    value: float
    residual: float
    gap: float
    runtime: float
    passed: bool
    report_path: Path
    report: dict


def _solver_opts(sc: Scenario) -> SolverOptions:
    s = dict(sc.solver)
    s.setdefault("seed", sc.seed)
    return SolverOptions(**s)


def _stage_solve(sc: Scenario, out: Path, ctx: dict) -> StageOutcome:
    res = minimize_J(sc.params, opts=_solver_opts(sc))
    ctx["solve"] = res
    rep = verify_null_minimum(sc.params, res, sc.tol("value"), sc.tol("residual"))
    rep["iterations"] = res.iterations
    rep["restart_values"] = res.restart_values
    rep["runtime"] = res.runtime
    if sc.params.energy.time_dependent:
        rep["power_bound_ratio"] = float(sc.params.check_power_bound(res.trajectory, raise_on_violation=False))
    write_trajectory_csv(res.trajectory, out / "solve_trajectory.csv")
    res.write_history_csv(out / "solve_history.csv")
    path = out / "solve_report.json"
    write_json(rep, path)
    return StageOutcome("solve", rep["value"], rep["max_residual"], math.nan, res.runtime,
                        rep["passed"], path, rep)


def _stage_mms(sc: Scenario, out: Path, ctx: dict) -> StageOutcome:
    start = time.perf_counter()
    traj = minimizing_movements(sc.params)
    runtime = time.perf_counter() - start
    ctx["mms"] = traj
    value = float(evaluate_J(sc.params, traj))
    resid = float(np.max(residual_profile(sc.params, traj)))
    rep = {"value": value, "max_residual": resid, "runtime": runtime, "terminal": traj.nodes[-1]}
    passed = True
    if "solve" in ctx:
        d = float(np.max(np.linalg.norm(traj.nodes - ctx["solve"].trajectory.nodes, axis=1)))
        rep["sup_distance_to_solve"] = d
        rep["tol_distance"] = sc.tol("mms_distance")
        passed = d <= sc.tol("mms_distance")
    rep["passed"] = passed
    write_trajectory_csv(traj, out / "mms_trajectory.csv")
    path = out / "mms_report.json"
    write_json(rep, path)
    return StageOutcome("mms", value, resid, math.nan, runtime, passed, path, rep)


def _grid(sc: Scenario, override=None) -> SpaceTimeGrid:
    g = sc.grid
    Nt, Nx = override if override else (g.get("Nt", 64), g.get("Nx", 64))
    x0 = float(sc.params.x0[0])
    return SpaceTimeGrid(sc.params.T, int(Nt), float(g.get("x_min", x0 - 1.5)),
                         float(g.get("x_max", x0 + 1.5)), int(Nx))


def _stage_relax(sc: Scenario, out: Path, ctx: dict) -> StageOutcome:
    if sc.params.dim != 1:
        rep = {"skipped": "the grid solver is one-dimensional", "passed": True}
        path = out / "relax_report.json"
        write_json(rep, path)
        return StageOutcome("relax", math.nan, math.nan, math.nan, 0.0, True, path, rep)
    grid = _grid(sc, ctx.get("grid_override"))
    keys = {k: v for k, v in sc.grid.items() if k in RelaxOptions.__dataclass_fields__}
    keys.setdefault("seed", sc.seed)
    res = solve_relaxed(sc.params, grid, RelaxOptions(**keys))
    ctx["relax"] = res
    j_ref = ctx["solve"].value if "solve" in ctx else 0.0
    rep = {"value": res.value, "duality_gap": res.duality_gap, "dual_value": res.dual_value,
           "constraint_residual": res.constraint_residual, "iterations": res.iterations,
           "converged": res.converged, "runtime": res.runtime, "grid": grid.to_dict(),
           "J_reference": j_ref, "masses": res.triple.mass_defects(grid)}
    passed = (res.duality_gap <= sc.tol("gap")
              and abs(res.value - j_ref) <= sc.tol("relax_value"))
    try:
        rec = reconstruct_characteristic(grid, res.triple)
        rec_params = sc.params.replace(N=rec.N)
        rep["reconstruction_J"] = float(evaluate_J(rec_params, rec))
        rep["reconstruction_terminal"] = rec.nodes[-1]
        write_trajectory_csv(rec, out / "relax_reconstruction.csv")
        passed = passed and rep["reconstruction_J"] <= res.value + sc.tol("recon_margin")
        if "solve" in ctx:
            s = ctx["solve"].trajectory
            ref = np.array([s.at(t) for t in rec.times])
            rep["reconstruction_sup_distance"] = float(np.max(np.abs(rec.nodes - ref)))
    except ReconstructionError as exc:
        rep["reconstruction_error"] = str(exc)
        passed = False
    rep["passed"] = bool(passed)
    save_triple(out / "relax_triple", grid, res.triple, res.value, res.duality_gap)
    path = out / "relax_report.json"
    write_json(rep, path)
    return StageOutcome("relax", res.value, res.constraint_residual, res.duality_gap, res.runtime,
                        rep["passed"], path, rep)


def _stage_dual(sc: Scenario, out: Path, ctx: dict) -> StageOutcome:
    start = time.perf_counter()
    opts = DualOptions.from_spec(sc.dual)
    canon = check_hj_feasible(sc.params, canonical_certificate(sc.params), opts.sample)
    rep = {"canonical": canon.to_dict()}
    try:
        xi, value, feas = maximize_dual(sc.params, opts=opts)
    except InfeasibleFamilyError as exc:
        rep.update(error=str(exc), passed=False)
        path = out / "dual_report.json"
        write_json(rep, path)
        return StageOutcome("dual", math.nan, math.nan, math.nan, time.perf_counter() - start,
                            False, path, rep)
    bb = check_backward_bound(sc.params, xi, opts.sample)
    runtime = time.perf_counter() - start
    viol = max(feas.max_violation_hj, feas.max_violation_terminal)
    canon_viol = max(canon.max_violation_hj, canon.max_violation_terminal)
    rep.update(value=value, feasibility=feas.to_dict(), backward_bound=bb, runtime=runtime,
               history=feas.history)
    lo = sc.tol("dual_min")
    passed = (value <= sc.tol("dual") and not feas.falsified and bb["bound_holds"]
              and canon_viol <= sc.tol("canonical") and (lo is None or value >= lo))
    # primal-dual sandwich, when the other stages ran
    if "solve" in ctx:
        rep["primal_J"] = ctx["solve"].value
        rep["sandwich_width"] = ctx["solve"].value - value
    rep["passed"] = bool(passed)
    save_certificate(xi, feas, out / "dual_certificate.json", value)
    path = out / "dual_report.json"
    write_json(rep, path)
    gap = rep.get("sandwich_width", math.nan)
    return StageOutcome("dual", value, viol, gap, runtime, rep["passed"], path, rep)


_RUNNERS = {"solve": _stage_solve, "mms": _stage_mms, "relax": _stage_relax, "dual": _stage_dual}


def _fmt(x) -> str:
    return "" if x is None or (isinstance(x, float) and math.isnan(x)) else repr(float(x))


def write_summary(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(SUMMARY_FIELDS)
        for r in rows:
            wr.writerow([r["scenario"], r["stage"], _fmt(r["value"]), _fmt(r["residual"]),
                         _fmt(r["gap"]), f"{r['runtime']:.3f}"])


def run_scenario(path, stage: str = "all", out=None, grid: Optional[tuple] = None,
                 n: Optional[int] = None, log=print):
    """Run the requested stages; returns ``(exit_code, out_dir, outcomes)``.

    ``stage="all"`` runs the stages listed in the scenario (default: all four).
    Exit code 0 means every stage assertion passed, 1 that one failed.

    Raises
    ------
    SchemaError
        Malformed scenario file (the CLI maps it to exit code 2).
    """
    sc = load_scenario(path)
    if n is not None:
        sc.params = sc.params.replace(N=int(n))
    if stage != "all" and stage not in STAGES:
        raise SchemaError(f"unknown stage {stage!r}")
    stages = sc.stages if stage == "all" else (stage,)
    out = Path(out) if out is not None else Path("dgflow_out") / sc.name
    out.mkdir(parents=True, exist_ok=True)
    ctx = {"grid_override": grid}
    # relax and dual compare against the direct minimiser when it is available
    order = [s for s in STAGES if s in stages]
    outcomes = []
    for st in order:
        oc = _RUNNERS[st](sc, out, ctx)
        outcomes.append(oc)
        log(f"[{sc.name}] {st:5s} value={_fmt(oc.value) or '-'} residual={_fmt(oc.residual) or '-'}"
            f" gap={_fmt(oc.gap) or '-'} runtime={oc.runtime:.2f}s "
            f"{'ok' if oc.passed else 'FAILED'}")
    rows = [{"scenario": sc.name, "stage": o.stage, "value": o.value, "residual": o.residual,
             "gap": o.gap, "runtime": o.runtime} for o in outcomes]
    write_summary(rows, out / "summary.csv")
    failed = [o for o in outcomes if not o.passed]
    for o in failed:
        log(f"assertion failed: see {o.report_path}")
    return (1 if failed else 0), out, outcomes


# -- solver comparison -------------------------------------------------------------------

def equation_residual(params: DeGiorgiParams, traj: Trajectory) -> float:
    """Discrete L2 norm in time of ``a(t, x) x' + D phi(t, x)`` at step midpoints.

    Only meaningful for quadratic ``psi = |v|^2 / 2`` (with optional friction).
    """
    nodes = traj.nodes
    tau = traj.tau
    tm = (np.arange(traj.N) + 0.5) * tau
    xm = 0.5 * (nodes[1:] + nodes[:-1])
    v = np.diff(nodes, axis=0) / tau
    fr = params.pot.friction
    coef = 1.0 if fr is None else fr.value(tm, xm)[:, None]
    r = params.pot.weight * coef * v + params.energy.grad(tm, xm)
    return float(math.sqrt(tau * np.sum(r * r)))


def compare_solvers(path, Ns=(50, 100, 200, 400), out=None, log=print) -> dict:
    """Direct minimisation versus minimizing movements over a refinement ladder."""
    sc = load_scenario(path)
    rows = []
    for N in Ns:
        p = sc.params.replace(N=int(N))
        res = minimize_J(p, opts=_solver_opts(sc))
        t0 = time.perf_counter()
        mm = minimizing_movements(p)
        t_mm = time.perf_counter() - t0
        row = {"N": int(N), "tau": p.tau, "J_direct": res.value,
               "J_mms": float(evaluate_J(p, mm)),
               "sup_distance": float(np.max(np.linalg.norm(res.trajectory.nodes - mm.nodes, axis=1))),
               "runtime_direct": res.runtime, "runtime_mms": t_mm}
        if p.pot.family == "quadratic":
            row["residual_direct"] = equation_residual(p, res.trajectory)
            row["residual_mms"] = equation_residual(p, mm)
        rows.append(row)
        log(f"[{sc.name}] N={N:4d} J_direct={row['J_direct']:.3e} J_mms={row['J_mms']:.3e} "
            f"sup_distance={row['sup_distance']:.3e}")
    report = {"scenario": sc.name, "refinement": rows}
    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        write_json(report, out / "compare_report.json")
        with open(out / "compare_table.csv", "w", newline="") as fh:
            keys = list(rows[0].keys())
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(keys)
            for r in rows:
                wr.writerow([_fmt(r[k]) if isinstance(r[k], float) else r[k] for k in keys])
    return report


# -- command line ---------------------------------------------------------------------------

def _parse_grid(text: str):
    try:
        a, b = text.lower().split("x")
        return int(a), int(b)
    except ValueError:
        raise argparse.ArgumentTypeError(f"grid must look like 64x64, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dgflow", description="Variational gradient-flow experiments.")
    sub = ap.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run the stages of a scenario")
    r.add_argument("scenario", help="scenario JSON file or bundled scenario name")
    r.add_argument("--stage", default="all", choices=("all",) + STAGES)
    r.add_argument("--out", default=None, help="artifact directory")
    r.add_argument("--grid", type=_parse_grid, default=None, metavar="NtxNx")
    r.add_argument("--n", type=int, default=None, metavar="N", help="override the time grid size")
    c = sub.add_parser("compare", help="direct solver versus minimizing movements")
    c.add_argument("scenario")
    c.add_argument("--out", default=None)
    c.add_argument("--ns", default="50,100,200,400", help="comma separated N ladder")
    sub.add_parser("list", help="list bundled scenarios")
    return ap


def _resolve(name: str) -> Path:
    p = Path(name)
    if p.exists() or p.suffix == ".json":
        return p
    try:
        return bundled_scenario(name)
    except FileNotFoundError:
        return p


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        if args.command == "list":
            for p in sorted((resources.files("dgflow") / "scenarios").iterdir(), key=str):
                if str(p).endswith(".json"):
                    print(Path(str(p)).stem)
            return 0
        if args.command == "compare":
            Ns = tuple(int(s) for s in args.ns.split(","))
            compare_solvers(_resolve(args.scenario), Ns, args.out)
            return 0
        code, out, _ = run_scenario(_resolve(args.scenario), args.stage, args.out, args.grid, args.n)
        print(f"artifacts in {out}")
        return code
    except SchemaError as exc:
        print(f"dgflow: schema error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
