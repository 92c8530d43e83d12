"""Nested iteration over a mesh hierarchy.

Each level starts PCG from the prolonged solution of the previous level and
stops once the relative preconditioned residual has dropped below
``alpha * (n_l / n_{l-1}) ** (-beta / d)``. The run ends at the last level,
when the error reaches ``epsilon * ||y_d||``, or when the control cost proxy
exceeds the budget ``c_u``. A cascadic continuation keeps ``rho`` frozen and
only refines the mesh.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numba
import numpy as np

from .control import ControlProblem, Solution, setup, solve
from .fem import FeFunction, TargetField
from .mesh import SimplicialMesh, build_structured, refine_uniform
from .solver import StopRule


class NestingError(ValueError):
    """The fine mesh does not refine the coarse one."""


@dataclass(frozen=True)
class NestedConfig:
    """Settings of a nested (or non-nested) campaign.

    Parameters
    ----------
    dim : int
    max_level : int
        Finest level to visit; level 1 has grid spacing 1/4.
    min_level : int
        Coarsest level, solved from zero to ``coarse_tol``.
    refine : {"uniform", "adaptive"}
    coarse_tol : float
        Relative residual reduction on level 1 (and on every level of a
        non-nested run).
    alpha, beta : float
        Scaling and rate of the per-level tolerance.
    epsilon : float, optional
        Stop once ``||y_d - y_l|| <= epsilon * ||y_d||``.
    c_u : float, optional
        Stop once the control cost proxy ``y^T K y`` exceeds this budget.
    cascadic_levels : int
        Extra frozen-``rho`` levels appended by :func:`run_cascadic`.
    theta : float
        Bulk fraction used by adaptive marking.
    target : TargetField, optional
        Defaults to the indicator of ``(1/4, 3/4)^dim``.
    rho_policy : str or float, optional
        Defaults to ``"global"`` for uniform and ``"element"`` for adaptive runs.
    """

    dim: int = 3
    max_level: int = 5
    min_level: int = 1
    refine: str = "uniform"
    coarse_tol: float = 1e-6
    alpha: float = 1.0
    beta: float = 0.5
    epsilon: Optional[float] = None
    c_u: Optional[float] = None
    cascadic_levels: int = 0
    theta: float = 0.5
    target: Optional[TargetField] = None
    rho_policy: Optional[object] = None
    maxiter: int = 10_000

    def __post_init__(self):
        if self.dim not in (1, 2, 3):
            raise ValueError("dim must be 1, 2 or 3")
        if not 1 <= self.min_level <= self.max_level:
            raise ValueError("need 1 <= min_level <= max_level")
        if self.refine not in ("uniform", "adaptive"):
            raise ValueError("refine must be 'uniform' or 'adaptive'")
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if not 0 < self.beta <= 2:
            raise ValueError("beta must lie in (0, 2]")
        if self.epsilon is not None and not 0 < self.epsilon <= 1:
            raise ValueError("epsilon must lie in (0, 1]")
        if self.c_u is not None and not self.c_u > 0:
            raise ValueError("c_u must be positive")
        if not 0 < self.theta <= 1:
            raise ValueError("theta must lie in (0, 1]")
        if not 0 < self.coarse_tol < 1:
            raise ValueError("coarse_tol must lie in (0, 1)")
        if self.cascadic_levels < 0:
            raise ValueError("cascadic_levels must be >= 0")

    @property
    def resolved_target(self) -> TargetField:
        return self.target if self.target is not None else TargetField.unit_box(self.dim)

    @property
    def resolved_policy(self):
        if self.rho_policy is not None:
            return self.rho_policy
        return "element" if self.refine == "adaptive" else "global"


@dataclass
class LevelRecord:
    """Outcome of one level. ``dofs`` counts all vertices, ``n_interior`` the unknowns."""

    level: int
    dofs: int
    n_interior: int
    h: float
    rho: float
    iterations: int
    tolerance: float
    error: float
    control_proxy: float
    wall_time: float
    stop: str = ""
    converged: bool = True
    spmv: int = 0
    history: list = field(default_factory=list, repr=False)
    mesh: Optional[SimplicialMesh] = field(default=None, repr=False)
    solution: Optional[Solution] = field(default=None, repr=False)

    def row(self) -> dict:
        return {"level": self.level, "dofs": self.dofs, "error": self.error,
                "its": self.iterations, "seconds": self.wall_time}


# ---------------------------------------------------------------------------
# prolongation

@numba.njit(cache=True)
def _fill_midpoints(values, parents, start):
    for v in range(start, values.shape[0]):
        a = parents[v, 0]
        b = parents[v, 1]
        values[v] = 0.5 * (values[a] + values[b])


def prolong(coarse: FeFunction, fine_mesh: SimplicialMesh) -> FeFunction:
    """Represent a coarse P1 function on a refined mesh (no approximation).

    Inherited vertices copy their values; every new vertex takes the mean of
    the endpoints of the edge it bisects. New vertices are numbered after
    their parents, so one forward sweep suffices.
    """
    cm = coarse.mesh
    if not fine_mesh.is_refinement_of(cm) or fine_mesh.n_parent_vertices != cm.n_vertices:
        raise NestingError("fine mesh is not a recorded refinement of the coarse mesh")
    parents = fine_mesh.parent_of_vertex
    n0 = cm.n_vertices
    if np.any(parents[n0:] < 0):
        raise NestingError("new vertices without a parent edge")
    values = np.zeros(fine_mesh.n_vertices)
    values[:n0] = coarse.nodal()
    _fill_midpoints(values, parents, n0)
    return FeFunction(fine_mesh, values[fine_mesh.interior_vertices])


# ---------------------------------------------------------------------------
# tolerances and diagnostics

def level_tolerance(cfg: NestedConfig, n_fine: int, n_coarse: int) -> float:
    """``alpha * (n_fine / n_coarse) ** (-beta / d)`` (``d = 3`` for 3D runs)."""
    if n_fine <= 0 or n_coarse <= 0:
        raise ValueError("DOF counts must be positive")
    return cfg.alpha * (n_fine / n_coarse) ** (-cfg.beta / cfg.dim)


def k_star(q: float, q_target: float) -> int:
    """Smallest ``k`` with ``q**k <= q_target`` (nested iteration count bound)."""
    if not 0 < q < 1 or not 0 < q_target < 1:
        raise ValueError("q and q_target must lie in (0, 1)")
    return int(math.ceil(math.log(1.0 / q_target) / math.log(1.0 / q) - 1e-12))


def target_ratio(norm_l2: float, norm_hs: float, s: float, c: float = 1.0) -> float:
    """``||y_d|| / ((1 + 2^s) c ||y_d||_s + 2^(1+s) ||y_d||)``, always below 1."""
    return norm_l2 / ((1 + 2 ** s) * c * norm_hs + 2 ** (1 + s) * norm_l2)


def fit_rate(errors, hs, levels=None) -> float:
    """Least-squares slope of ``log(error)`` against ``log(h)``.

    With ``levels`` given, level 1 is left out as pre-asymptotic. At least
    three points must remain.
    """
    e = np.asarray(errors, dtype=float)
    h = np.asarray(hs, dtype=float)
    if e.shape != h.shape:
        raise ValueError("errors and hs differ in length")
    if levels is not None:
        keep = np.asarray(levels) != 1
        e, h = e[keep], h[keep]
    if e.size < 3:
        raise ValueError("need at least three points to fit a rate")
    if np.any(e <= 0) or np.any(h <= 0):
        raise ValueError("errors and hs must be positive")
    x = np.log(h)
    if np.ptp(x) == 0:
        raise ValueError("all h values coincide")
    slope, _ = np.polyfit(x, np.log(e), 1)
    return float(slope)


def total_spmv(records: list) -> int:
    return int(sum(r.spmv for r in records))


# ---------------------------------------------------------------------------
# drivers

def _solve_level(problem: ControlProblem, level: int, tol: float, x0, maxiter: int) -> LevelRecord:
    t0 = time.perf_counter()
    sol = solve(problem, x0=x0, stop=StopRule(rtol=tol, maxiter=maxiter))
    wall = time.perf_counter() - t0
    mesh = problem.mesh
    rep = sol.report
    return LevelRecord(
        level=level, dofs=mesh.n_vertices, n_interior=mesh.n_interior, h=mesh.h,
        rho=problem.rho_scalar, iterations=rep.iterations, tolerance=tol,
        error=sol.norms["error"], control_proxy=sol.norms["control_proxy"], wall_time=wall,
        converged=rep.converged, spmv=problem.operator.spmv_per_apply * rep.applies,
        history=list(rep.history), mesh=mesh, solution=sol)


def _stop_flags(cfg: NestedConfig, rec: LevelRecord, target_norm: float) -> str:
    flags = []
    if cfg.epsilon is not None and rec.error <= cfg.epsilon * target_norm:
        flags.append("epsilon")
    if cfg.c_u is not None and rec.control_proxy > cfg.c_u:
        flags.append("c_u")
    return ",".join(flags)


def drive(cfg: NestedConfig, next_mesh: Callable[[LevelRecord], SimplicialMesh],
          first_mesh: Optional[SimplicialMesh] = None, nested: bool = True) -> list:
    """Level loop shared by uniform and adaptive campaigns.

    ``next_mesh`` maps the record of a finished level to the next mesh.
    With ``nested=False`` every level starts from zero and uses ``coarse_tol``.
    """
    target = cfg.resolved_target
    target_norm = target.l2_norm(cfg.dim)
    mesh = first_mesh if first_mesh is not None else build_structured(cfg.dim, cfg.min_level)
    records = []
    prev = None
    for level in range(cfg.min_level, cfg.max_level + 1):
        if prev is not None:
            mesh = next_mesh(prev)
        problem = setup(mesh, target, cfg.resolved_policy)
        if prev is None or not nested:
            tol, x0 = cfg.coarse_tol, None
        else:
            tol = level_tolerance(cfg, mesh.n_vertices, prev.dofs)
            x0 = prolong(prev.solution.y, mesh).coeffs
        rec = _solve_level(problem, level, tol, x0, cfg.maxiter)
        records.append(rec)
        if not rec.converged:
            rec.stop = "solver"
            break
        rec.stop = _stop_flags(cfg, rec, target_norm)
        if rec.stop:
            break
        prev = rec
    else:
        records[-1].stop = "max_level"
    return records


def run_nested(cfg: NestedConfig) -> list:
    """Nested iteration; returns one :class:`LevelRecord` per visited level."""
    if cfg.refine == "adaptive":
        from .adapt import run_adaptive
        return run_adaptive(cfg)
    return drive(cfg, lambda rec: refine_uniform(rec.mesh))


def run_nonnested(cfg: NestedConfig) -> list:
    """Every level solved from zero to ``coarse_tol``."""
    if cfg.refine == "adaptive":
        from .adapt import run_adaptive
        return run_adaptive(cfg, nested=False)
    return drive(cfg, lambda rec: refine_uniform(rec.mesh), nested=False)


def accepted_level(records: list) -> LevelRecord:
    """Last level whose control cost stayed within budget.

    When the budget rule fired on level ``l + 1`` this is level ``l``.
    """
    if not records:
        raise ValueError("no records")
    if "c_u" in records[-1].stop.split(","):
        if len(records) < 2:
            raise ValueError("the cost budget is exceeded already on the first level")
        return records[-2]
    return records[-1]


def run_cascadic(cfg: NestedConfig, records: list, J: Optional[int] = None) -> list:
    """Refine ``J`` more times with ``rho`` frozen at the accepted level.

    Starts from :func:`accepted_level`; each new level is solved with the
    prolonged previous state as initial guess and the usual per-level
    tolerance. Returns the new records only (the input for ``J = 0``).
    """
    J = cfg.cascadic_levels if J is None else J
    if J == 0:
        return records
    base = accepted_level(records)
    rho = float(base.rho)
    target = cfg.resolved_target
    out = []
    prev = base
    for j in range(1, J + 1):
        mesh = refine_uniform(prev.mesh)
        problem = setup(mesh, target, rho)
        tol = level_tolerance(cfg, mesh.n_vertices, prev.dofs)
        x0 = prolong(prev.solution.y, mesh).coeffs
        rec = _solve_level(problem, base.level + j, tol, x0, cfg.maxiter)
        rec.stop = "cascadic"
        out.append(rec)
        if not rec.converged:
            rec.stop = "solver"
            break
        prev = rec
    return out


def control_increments(base: LevelRecord, cascade: list) -> list:
    """``||u_{l+1} - prolong(u_l)||_{L2}`` along a cascadic run."""
    from .fem import assemble_mass

    out = []
    prev = base
    for rec in cascade:
        u_prev = prolong(prev.solution.u, rec.mesh)
        diff = rec.solution.u.coeffs - u_prev.coeffs
        M = assemble_mass(rec.mesh)
        out.append(math.sqrt(max(float(diff @ (M @ diff)), 0.0)))
        prev = rec
    return out
