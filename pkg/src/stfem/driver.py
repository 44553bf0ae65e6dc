"""Run orchestration: configuration, convergence studies and adaptive loops."""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .assembly import (
    ProblemCoefficients,
    StabilizationConfig,
    StabilizationMode,
    assemble_system,
    default_theta,
)
from .estimate import (
    ErrorReport,
    cost_functional,
    doerfler_mark,
    l2_norm,
    norm_h,
    residual_indicator,
)
from .fem import DiscreteFunction, difference
from .linalg import (
    PRECONDITIONER_NAMES,
    build_system_preconditioner,
    fgmres,
    write_matrix_market,
    write_solver_csv,
)
from .mesh import build_structured_mesh, mesh_size, refine, write_vtk
from .problems import PROBLEMS, get_problem

__all__ = [
    "RunConfig",
    "Solution",
    "RunResult",
    "REPORT_COLUMNS",
    "read_config",
    "solve",
    "run_convergence_study",
    "run_adaptive",
    "shell_fraction",
    "write_report",
    "config_from",
]

log = logging.getLogger(__name__)

REPORT_COLUMNS = (
    "level", "n", "elements", "dofs", "h", "norm_h", "rate",
    "l2_y", "l2_p", "l2_u", "J", "eta2", "marked",
    "iterations", "relres", "converged",
)


@dataclass
class RunConfig:
    """Settings of one convergence study or adaptive run.

    ``theta=None`` picks the default stabilization scale for ``(d, k)``.
    ``preconditioner="auto"`` uses exact block solves for ``rho >= 1e-3``
    and ILU(0) of the whole coupled matrix below that.
    """

    problem: str = "smooth2d"
    spatial_dim: int | None = None
    degree: int = 1
    n0: int = 2
    levels: int = 4
    steps: int = 20
    rho: float = 0.01
    theta: float | None = None
    stabilization: str = "per_element"
    theta_mark: float = 0.5
    rtol: float = 1e-8
    restart: int = 50
    maxit: int | None = None
    preconditioner: str = "auto"
    out_dir: str = "out"
    dump_system: bool = False
    plots: bool = True

    def __post_init__(self):
        if self.problem not in PROBLEMS:
            raise ValueError(f"unknown problem {self.problem!r}; choose from {', '.join(PROBLEMS)}")
        if self.spatial_dim is not None and self.spatial_dim not in (1, 2):
            raise ValueError("spatial_dim must be 1 or 2")
        if self.degree not in (1, 2, 3):
            raise ValueError("degree must be 1, 2 or 3")
        if self.n0 < 1 or self.levels < 1 or self.steps < 0:
            raise ValueError("n0 and levels must be >= 1 and steps >= 0")
        if not self.rho > 0:
            raise ValueError("rho must be positive")
        if self.theta is not None and not self.theta > 0:
            raise ValueError("theta must be positive")
        StabilizationMode(self.stabilization)
        if not 0 < self.theta_mark <= 1:
            raise ValueError("theta_mark must lie in (0, 1]")
        if not 0 < self.rtol < 1 or self.restart < 1:
            raise ValueError("rtol must lie in (0, 1) and restart must be >= 1")
        if self.preconditioner != "auto" and self.preconditioner not in PRECONDITIONER_NAMES:
            raise ValueError(f"unknown preconditioner {self.preconditioner!r}")

    @property
    def dim(self) -> int:
        return get_problem(self.problem, self.rho, self.spatial_dim).spatial_dim

    def stab(self) -> StabilizationConfig:
        theta = default_theta(self.dim, self.degree) if self.theta is None else self.theta
        return StabilizationConfig(theta=theta, mode=self.stabilization)

    def preconditioner_kind(self) -> str:
        if self.preconditioner != "auto":
            return self.preconditioner
        return "lu" if self.rho >= 1e-3 else "coupled-ilu0"


def _parse_bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


_CONVERTERS = {
    "problem": str, "spatial_dim": int, "degree": int, "n0": int, "levels": int, "steps": int,
    "rho": float, "theta": float, "stabilization": str, "theta_mark": float, "rtol": float,
    "restart": int, "maxit": int, "preconditioner": str, "out_dir": str,
    "dump_system": _parse_bool, "plots": _parse_bool,
}


def read_config(path) -> dict:
    """Parse a flat ``key = value`` file into RunConfig keyword arguments.

    Blank lines and ``#`` comments are ignored; ``none`` clears optional fields.
    """
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip().replace("-", "_")
        if not sep or key not in _CONVERTERS:
            raise ValueError(f"{path}:{lineno}: cannot parse {raw.strip()!r}")
        value = value.strip()
        out[key] = None if value.lower() == "none" else _CONVERTERS[key](value)
    return out


# -- one solve ---------------------------------------------------------------------
@dataclass
class Solution:
    system: object
    x: np.ndarray
    state: DiscreteFunction
    adjoint: DiscreteFunction
    control: DiscreteFunction
    report: object
    residual: float

    @property
    def mesh(self):
        return self.system.mesh


def solve(mesh, problem, config: RunConfig) -> Solution:
    """Assemble and solve the reduced optimality system on ``mesh``."""
    coeffs = ProblemCoefficients(problem.varrho)
    system = assemble_system(mesh, config.degree, coeffs, config.stab(), target=problem.target)
    M = build_system_preconditioner(system, config.preconditioner_kind())
    x, report = fgmres(system.matrix, system.rhs, M, rtol=config.rtol, restart=config.restart, maxit=config.maxit)
    fn = np.linalg.norm(system.rhs)
    residual = float(np.linalg.norm(system.rhs - system.matrix @ x) / fn) if fn > 0 else 0.0
    y, p = system.split(x)
    return Solution(
        system, x,
        DiscreteFunction(system.state_map, y),
        DiscreteFunction(system.adjoint_map, p),
        DiscreteFunction(system.adjoint_map, -p / problem.varrho),
        report, residual,
    )


def _errors(sol: Solution, problem) -> ErrorReport:
    mesh = sol.mesh
    ex = problem.exact
    rep = ErrorReport()
    if ex is not None:
        ey = difference(ex.state, sol.state)
        ep = difference(ex.adjoint, sol.adjoint)
        rep.parts = norm_h(ey, ep, mesh, problem.varrho, sol.system.lam)
        rep.l2_y = l2_norm(ey, mesh)
        rep.l2_p = l2_norm(ep, mesh)
        rep.l2_u = l2_norm(difference(ex.control, sol.control), mesh)
    rep.J = cost_functional(sol.state, sol.control, problem.target, mesh, problem.varrho).total
    return rep


# -- reporting -----------------------------------------------------------------------
@dataclass
class RunResult:
    rows: list = field(default_factory=list)
    ok: bool = True
    marked: list = field(default_factory=list)
    meshes: list = field(default_factory=list)
    out_dir: Path | None = None


def write_report(path, rows) -> None:
    """CSV with the fixed :data:`REPORT_COLUMNS`; missing values stay empty."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(REPORT_COLUMNS)
        for row in rows:
            w.writerow(["" if row.get(c) is None else _fmt(row[c]) for c in REPORT_COLUMNS])


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def _row(index, n, sol: Solution, rep: ErrorReport | None, rtol: float) -> dict:
    row = dict(
        level=index, n=n, elements=sol.mesh.n_elements,
        dofs=sol.system.n_state + sol.system.n_adjoint, h=mesh_size(sol.mesh),
        iterations=sol.report.iterations, relres=sol.residual,
        converged=bool(sol.report.converged and sol.residual <= rtol),
    )
    if rep is not None:
        row.update(J=rep.J, l2_y=rep.l2_y, l2_p=rep.l2_p, l2_u=rep.l2_u)
        if rep.l2_y is not None:
            row["norm_h"] = rep.norm_h
    return row


def _snapshot(out: Path, i: int, sol: Solution, cell_data=None) -> None:
    nv = sol.mesh.n_vertices
    point_data = {
        "state": sol.state.coefficients[:nv],
        "adjoint": sol.adjoint.coefficients[:nv],
        "control": sol.control.coefficients[:nv],
    }
    write_vtk(out / f"step_{i}.vtk", sol.mesh, point_data=point_data, cell_data=cell_data)


def _write_level(out: Path, i: int, sol: Solution, config: RunConfig) -> None:
    write_solver_csv(out / f"solver_{i}.csv", sol.report)
    if config.dump_system:
        write_matrix_market(out / f"K_{i}.mtx", sol.system.matrix, "reduced optimality system matrix")
        write_matrix_market(out / f"f_{i}.mtx", sol.system.rhs, "right-hand side")


def _finish(result: RunResult, config: RunConfig, kind: str) -> RunResult:
    out = result.out_dir
    write_report(out / "report.csv", result.rows)
    if config.plots and result.rows:
        from .plotting import plot_adaptive, plot_convergence

        try:
            (plot_convergence if kind == "convergence" else plot_adaptive)(result.rows, out)
        except Exception as exc:  # plots are a convenience; never fail a run on them
            log.warning("could not render plots: %s", exc)
    return result


def run_convergence_study(config: RunConfig) -> RunResult:
    """Uniform refinement ``n = n0 * 2**l`` for ``l < levels`` against the closed-form solution."""
    problem = get_problem(config.problem, config.rho, config.spatial_dim)
    if problem.exact is None:
        raise ValueError(f"problem {config.problem!r} has no closed-form solution")
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    result = RunResult(out_dir=out)
    prev = None
    for level in range(config.levels):
        n = config.n0 * 2**level
        mesh = build_structured_mesh(problem.spatial_dim, n, problem.final_time)
        t0 = time.perf_counter()
        sol = solve(mesh, problem, config)
        row = _row(level, n, sol, _errors(sol, problem), config.rtol)
        if prev is not None:
            row["rate"] = math.log(prev["norm_h"] / row["norm_h"]) / math.log(prev["h"] / row["h"])
        log.info("level %d n=%d dofs=%d err=%.4e rate=%s its=%d (%.1fs)", level, n, row["dofs"],
                 row["norm_h"], row.get("rate"), row["iterations"], time.perf_counter() - t0)
        result.rows.append(row)
        result.meshes.append(mesh)
        _write_level(out, level, sol, config)
        _snapshot(out, level, sol)
        if not row["converged"]:
            log.error("solver did not converge at level %d (relres %.3e)", level, sol.residual)
            result.ok = False
            break
        prev = row
    return _finish(result, config, "convergence")


def run_adaptive(config: RunConfig) -> RunResult:
    """Solve, estimate, mark and refine ``steps`` times starting from ``n0``.

    Every step (including the last) records its Doerfler set; only the first
    ``steps`` of them are refined.
    """
    problem = get_problem(config.problem, config.rho, config.spatial_dim)
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    result = RunResult(out_dir=out)
    mesh = build_structured_mesh(problem.spatial_dim, config.n0, problem.final_time)
    for step in range(config.steps + 1):
        t0 = time.perf_counter()
        sol = solve(mesh, problem, config)
        rep = _errors(sol, problem)
        eta2 = residual_indicator(mesh, sol.state, sol.adjoint, problem.target, problem.varrho)
        marked = doerfler_mark(eta2, config.theta_mark)
        rep.eta2 = float(eta2.sum())
        row = _row(step, config.n0, sol, rep, config.rtol)
        row.update(eta2=rep.eta2, marked=int(marked.size))
        log.info("step %d elements=%d dofs=%d eta2=%.4e J=%.6e its=%d (%.1fs)", step, mesh.n_elements,
                 row["dofs"], rep.eta2, rep.J, row["iterations"], time.perf_counter() - t0)
        result.rows.append(row)
        result.marked.append(marked)
        result.meshes.append(mesh)
        _write_level(out, step, sol, config)
        _snapshot(out, step, sol, cell_data={"eta2": eta2})
        if not row["converged"]:
            log.error("solver did not converge at step %d (relres %.3e)", step, sol.residual)
            result.ok = False
            break
        if step < config.steps:
            mesh = refine(mesh, marked)
    return _finish(result, config, "adaptive")


def shell_fraction(mesh, elements, center, radius: float, width: float) -> float:
    """Fraction of ``elements`` meeting the shell ``|r - radius| <= width / 2``.

    The distance range of each simplex is bounded from sampled points
    (vertices, edge midpoints, centroid), so the count is conservative.
    """
    elements = np.asarray(elements, dtype=np.int64)
    if elements.size == 0:
        return 0.0
    P = mesh.vertices[mesh.simplices[elements]]
    nv = P.shape[1]
    i, j = np.triu_indices(nv, 1)
    S = np.concatenate([P, 0.5 * (P[:, i] + P[:, j]), P.mean(axis=1, keepdims=True)], axis=1)
    r = np.linalg.norm(S - np.asarray(center, float), axis=-1)
    lo, hi = radius - 0.5 * width, radius + 0.5 * width
    hit = (r.max(axis=1) >= lo) & (r.min(axis=1) <= hi)
    return float(hit.mean())


def config_from(base: RunConfig | None = None, **overrides) -> RunConfig:
    """Apply non-``None`` overrides to ``base`` (or the defaults)."""
    base = base or RunConfig()
    known = {f.name for f in fields(RunConfig)}
    bad = set(overrides) - known
    if bad:
        raise ValueError(f"unknown settings: {', '.join(sorted(bad))}")
    return replace(base, **{k: v for k, v in overrides.items() if v is not None})
