"""Scenario-file driven command line front end.

Scenario files are TOML tables with matrix literals as nested arrays. Each
command loads one (or more) scenario files, runs the requested pipeline and
writes a deterministic JSON report plus a control CSV next to the chosen
output directory. Exit codes: 0 success, 1 error, 2 infeasibility diagnosed.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import math
import os
import sys
import tempfile
from dataclasses import dataclass
from typing import Optional

import numpy as np
import tomli

from . import oracle as oracle_mod
from .dual import (ConeVerdict, DualSolution, ReachabilityProblem, SolveStatus,
                   SolverOptions, estimate_c_star, minimize_J)
from .lti import LtiSystem, TimeGrid, kalman_rank, rank_family_test, strong_kalman_check
from .sets import make_set
from .synth import control_to_csv, reconstruct_control, verify

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_INFEASIBLE = 2

_ORACLE_GAP_TOL = 1e-3


class ScenarioError(ValueError):
    pass


@dataclass
class Scenario:
    name: str
    sys: LtiSystem
    cset: object
    y0: np.ndarray
    yf: np.ndarray
    T: float
    eps: float
    grid_N: int
    solver: SolverOptions
    subcone_orthobasis: list

    def problem(self, grid_N: Optional[int] = None, eps: Optional[float] = None) -> ReachabilityProblem:
        N = self.grid_N if grid_N is None else grid_N
        e = self.eps if eps is None else eps
        return ReachabilityProblem(self.sys, self.cset, self.y0, self.yf,
                                   self.T, e, grid=TimeGrid(self.T, N))


def _require(table: dict, key: str, where: str):
    if key not in table:
        raise ScenarioError(f"scenario is missing required field '{where}{key}'")
    return table[key]


def _as_matrix(value, where: str) -> np.ndarray:
    try:
        M = np.asarray(value, dtype=float)
    except (TypeError, ValueError):
        raise ScenarioError(f"field '{where}' is not a numeric matrix literal") from None
    if M.ndim != 2:
        raise ScenarioError(f"field '{where}' must be a nested array (matrix), got ndim={M.ndim}")
    return M


def _as_vector(value, where: str) -> np.ndarray:
    try:
        v = np.asarray(value, dtype=float)
    except (TypeError, ValueError):
        raise ScenarioError(f"field '{where}' is not a numeric vector literal") from None
    if v.ndim != 1:
        raise ScenarioError(f"field '{where}' must be a flat array (vector), got ndim={v.ndim}")
    return v


def load_scenario(path: str) -> Scenario:
    """Parse and cross-validate a scenario file; errors name the field."""
    try:
        with open(path, "rb") as fh:
            data = tomli.load(fh)
    except FileNotFoundError:
        raise ScenarioError(f"scenario file not found: {path}") from None
    except tomli.TOMLDecodeError as exc:
        raise ScenarioError(f"scenario parse error in {path}: {exc}") from None

    name = _require(data, "name", "")
    system = _require(data, "system", "")
    A = _as_matrix(_require(system, "A", "system."), "system.A")
    B = _as_matrix(_require(system, "B", "system."), "system.B")
    try:
        sys_ = LtiSystem(A, B)
    except ValueError as exc:
        raise ScenarioError(f"invalid system matrices: {exc}") from None

    try:
        cset = make_set(_require(data, "set", ""))
    except ValueError as exc:
        raise ScenarioError(f"invalid set table: {exc}") from None
    if cset.dim != sys_.m:
        raise ScenarioError(
            f"field 'set': dimension {cset.dim} does not match system.B column count {sys_.m}")

    y0 = _as_vector(_require(data, "y0", ""), "y0")
    yf = _as_vector(_require(data, "yf", ""), "yf")
    for fname, v in (("y0", y0), ("yf", yf)):
        if v.shape != (sys_.n,):
            raise ScenarioError(
                f"field '{fname}': length {v.shape[0]} does not match state dimension {sys_.n}")

    T = float(_require(data, "T", ""))
    if T <= 0:
        raise ScenarioError("field 'T' must be positive")
    eps = float(data.get("eps", 0.0))
    if eps < 0:
        raise ScenarioError("field 'eps' must be nonnegative")
    grid_N = int(data.get("grid_N", 2000))
    if grid_N < 2:
        raise ScenarioError("field 'grid_N' must be at least 2")

    solver_tbl = data.get("solver", {})
    known = {"max_iter", "grad_tol", "n_restarts", "divergence_norm", "seed"}
    for key in solver_tbl:
        if key not in known:
            raise ScenarioError(f"field 'solver.{key}' is not a solver option")
    solver = SolverOptions(
        max_iter=int(solver_tbl.get("max_iter", 5000)),
        grad_tol=float(solver_tbl.get("grad_tol", 1e-8)),
        n_restarts=int(solver_tbl.get("n_restarts", 4)),
        divergence_norm=float(solver_tbl.get("divergence_norm", 1e8)),
        seed=int(solver_tbl.get("seed", 0)),
    )
    try:
        solver.validate()
    except ValueError as exc:
        raise ScenarioError(f"invalid solver table: {exc}") from None

    basis = data.get("subcone_orthobasis", [])
    basis_vecs = [_as_vector(b, "subcone_orthobasis[*]") for b in basis]
    for b in basis_vecs:
        if b.shape != (sys_.n,):
            raise ScenarioError(
                f"field 'subcone_orthobasis': entry length {b.shape[0]} does not match n={sys_.n}")
    return Scenario(name=name, sys=sys_, cset=cset, y0=y0, yf=yf, T=T, eps=eps,
                    grid_N=grid_N, solver=solver, subcone_orthobasis=basis_vecs)


# -- deterministic JSON -------------------------------------------------------

def dump_json(obj) -> str:
    """JSON text with floats at 17 significant digits and sorted keys."""
    return _dump(obj, 0) + "\n"


def _dump(obj, indent: int) -> str:
    pad = "  " * indent
    pad_in = "  " * (indent + 1)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f'{pad_in}"{k}": {_dump(obj[k], indent + 1)}' for k in sorted(obj)]
        return "{\n" + ",\n".join(items) + f"\n{pad}}}"
    if isinstance(obj, (list, tuple, np.ndarray)):
        seq = list(obj)
        if not seq:
            return "[]"
        items = [f"{pad_in}{_dump(v, indent + 1)}" for v in seq]
        return "[\n" + ",\n".join(items) + f"\n{pad}]"
    if isinstance(obj, bool) or isinstance(obj, np.bool_):
        return "true" if obj else "false"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if math.isnan(x):
            return '"nan"'
        if math.isinf(x):
            return '"inf"' if x > 0 else '"-inf"'
        return format(x, ".17g")
    if obj is None:
        return "null"
    return '"' + str(obj).replace("\\", "\\\\").replace('"', '\\"') + '"'


def _write_atomic(path: str, text: str) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# -- commands -----------------------------------------------------------------

def _solve_one(scn: Scenario, out_dir: str, grid_N=None, eps=None, seed=None) -> int:
    opts = scn.solver if seed is None else SolverOptions(
        max_iter=scn.solver.max_iter, grad_tol=scn.solver.grad_tol,
        n_restarts=scn.solver.n_restarts, divergence_norm=scn.solver.divergence_norm,
        seed=seed)
    prob = scn.problem(grid_N=grid_N, eps=eps)
    dual = minimize_J(prob, opts)
    report = {
        "name": scn.name,
        "eps": prob.eps,
        "grid_N": prob.grid.N,
        "T": prob.T,
        "seed": opts.seed,
        "status": dual.status.value,
        "J_value": dual.J_value,
        "grad_norm": dual.grad_norm,
        "iterations": dual.iterations,
        "F_star_value": dual.F_star_value,
        "p_f_star": list(dual.p_f_star),
    }
    report_path = os.path.join(out_dir, f"{scn.name}.report.json")
    if dual.status is SolveStatus.DIVERGING:
        trace = dual.norm_trace or []
        report["norm_trace_tail"] = trace[-25:]
        report["diagnosis"] = "dual objective unbounded below: target not reachable at this eps"
        _write_atomic(report_path, dump_json(report))
        print(f"{scn.name}: DIVERGING (|p| grew past {opts.divergence_norm:g}); report at {report_path}")
        return EXIT_INFEASIBLE
    ctrl = reconstruct_control(prob, dual)
    rep = verify(prob, ctrl, dual)
    report.update(rep.as_dict())
    _write_atomic(report_path, dump_json(report))
    csv_path = os.path.join(out_dir, f"{scn.name}.control.csv")
    control_to_csv(ctrl, csv_path)
    print(f"{scn.name}: status={dual.status.value} terminal_error={rep.terminal_error:.3e} "
          f"eps_satisfied={rep.eps_satisfied} gap={rep.duality_gap_rel:.3e}")
    return EXIT_OK if rep.eps_satisfied else EXIT_ERROR


def cmd_solve(paths, out_dir=".", jobs=1, grid_N=None, eps=None, seed=None) -> int:
    scenarios = [load_scenario(p) for p in paths]
    os.makedirs(out_dir, exist_ok=True)
    if jobs <= 1 or len(scenarios) == 1:
        codes = [_solve_one(s, out_dir, grid_N, eps, seed) for s in scenarios]
    else:
        with concurrent.futures.ThreadPoolExecutor(max_workers=jobs) as pool:
            codes = list(pool.map(
                lambda s: _solve_one(s, out_dir, grid_N, eps, seed), scenarios))
    return max(codes)


def cmd_check(path) -> int:
    scn = load_scenario(path)
    rank = kalman_rank(scn.sys)
    print(f"kalman_rank = {rank} (state dimension {scn.sys.n})")
    if scn.sys.m >= 2:
        print(f"strong_kalman_check = {strong_kalman_check(scn.sys)}")
    else:
        print("strong_kalman_check = n/a (single control column)")
    for i, b in enumerate(scn.subcone_orthobasis):
        ok = rank_family_test(scn.sys, [b])
        print(f"rank_family_test[{i}] basis={list(b)} -> {ok}")
    return EXIT_OK


def cmd_cstar(path, grid_N=None, seed=None, with_solve=False) -> int:
    scn = load_scenario(path)
    opts = scn.solver if seed is None else SolverOptions(
        max_iter=scn.solver.max_iter, grad_tol=scn.solver.grad_tol,
        n_restarts=scn.solver.n_restarts, divergence_norm=scn.solver.divergence_norm,
        seed=seed)
    prob = scn.problem(grid_N=grid_N)
    est = estimate_c_star(prob, opts)
    value = "inf" if math.isinf(est.value) else format(est.value, ".12g")
    print(f"c_star = {value} attained={est.attained} (stationarity {est.stationarity:.3e})")
    if with_solve and prob.eps == 0.0:
        dual = minimize_J(prob, opts)
        if dual.status is SolveStatus.DIVERGING:
            print("minimize_J: DIVERGING (consistent with non-attained or infinite c_star)")
            return EXIT_INFEASIBLE
        predicted = -est.value ** 2 / 4.0 if math.isfinite(est.value) else -math.inf
        print(f"min J_0 = {dual.J_value:.12g} vs -c_star^2/4 = {predicted:.12g}")
    return EXIT_OK


def cmd_oracle_compare(path, grid_N=None) -> int:
    scn = load_scenario(path)
    N = min(grid_N or scn.grid_N, 512)
    prob = scn.problem(grid_N=N)
    dual = minimize_J(prob, scn.solver)
    primal = oracle_mod.solve_primal_direct(prob)
    if dual.status is SolveStatus.DIVERGING:
        print(f"{scn.name}: primal infeasible / dual diverging "
              f"(oracle residual {primal.feasibility_residual:.3e})")
        return EXIT_INFEASIBLE
    dual_value = -dual.J_value
    gap = abs(primal.objective - dual_value) / (1.0 + abs(primal.objective))
    print(f"{scn.name}: oracle_objective={primal.objective:.9e} dual_value={dual_value:.9e} "
          f"relative_gap={gap:.3e} oracle_residual={primal.feasibility_residual:.3e}")
    return EXIT_OK if gap <= _ORACLE_GAP_TOL else EXIT_ERROR


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="conereach",
        description="Reachability of linear systems under conic control constraints")
    sub = parser.add_subparsers(dest="command", required=True)

    p_solve = sub.add_parser("solve", help="minimize the dual, synthesize and verify a control")
    p_solve.add_argument("scenario", nargs="+", help="scenario file path(s)")
    p_solve.add_argument("--grid", type=int, default=None, help="override grid_N")
    p_solve.add_argument("--eps", type=float, default=None, help="override eps")
    p_solve.add_argument("--seed", type=int, default=None, help="override solver seed")
    p_solve.add_argument("--out-dir", default=".", help="directory for reports and CSVs")
    p_solve.add_argument("--jobs", type=int, default=1, help="concurrent scenario solves")

    p_check = sub.add_parser("check", help="rank conditions of the scenario system")
    p_check.add_argument("scenario")

    p_cstar = sub.add_parser("cstar", help="estimate the exact-reachability constant")
    p_cstar.add_argument("scenario")
    p_cstar.add_argument("--grid", type=int, default=None)
    p_cstar.add_argument("--seed", type=int, default=None)
    p_cstar.add_argument("--solve", action="store_true",
                         help="also minimize J_0 and print the cross check (eps = 0 only)")

    p_cmp = sub.add_parser("oracle-compare", help="dual pipeline against the direct primal oracle")
    p_cmp.add_argument("scenario")
    p_cmp.add_argument("--grid", type=int, default=None)

    args = parser.parse_args(argv)
    try:
        if args.command == "solve":
            return cmd_solve(args.scenario, out_dir=args.out_dir, jobs=args.jobs,
                             grid_N=args.grid, eps=args.eps, seed=args.seed)
        if args.command == "check":
            return cmd_check(args.scenario)
        if args.command == "cstar":
            return cmd_cstar(args.scenario, grid_N=args.grid, seed=args.seed,
                             with_solve=args.solve)
        if args.command == "oracle-compare":
            return cmd_oracle_compare(args.scenario, grid_N=args.grid)
    except ScenarioError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except (ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    raise AssertionError("unreachable")


if __name__ == "__main__":
    sys.exit(main())
