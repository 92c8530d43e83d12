"""Problem-level API for the L2-regularized tracking problem.

Given a mesh and a target ``y_d``, :func:`setup` assembles the matrices and
resolves the regularization ``rho``; :func:`solve` runs PCG on the lumped
Schur complement and recovers state, control and adjoint.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from .fem import (Assembly, FeFunction, LumpedDiagonal, TargetField, assemble, assemble_load,
                  assemble_lumped, l2_error_vs_target)
from .mesh import SimplicialMesh
from .solver import PcgReport, SchurOperator, StopRule, build_schur, pcg
from .sparse import dot

RhoPolicy = Union[str, float]


def _resolve_rho(mesh: SimplicialMesh, policy: RhoPolicy):
    """Return ``(rho, per_element)`` for a policy name or an explicit value."""
    if isinstance(policy, str):
        if policy == "global":
            return mesh.h ** 4, False
        if policy == "element":
            return mesh.element_size ** 4, True
        raise ValueError(f"unknown rho policy {policy!r}")
    rho = float(policy)
    if not rho > 0:
        raise ValueError("explicit rho must be positive")
    return rho, False


@dataclass(frozen=True, eq=False)
class ControlProblem:
    """Assembled problem on one mesh.

    ``rho`` is a scalar for the global and explicit policies and an array of
    per-element values for the ``"element"`` policy. In the latter case the
    Schur operator uses the lumped mass weighted by ``1 / rho_e``.
    """

    mesh: SimplicialMesh
    target: TargetField
    policy: RhoPolicy
    rho: Union[float, np.ndarray]
    assembly: Assembly
    load: np.ndarray
    operator: SchurOperator

    @property
    def K(self):
        return self.assembly.K

    @property
    def M(self):
        return self.assembly.M

    @property
    def D(self) -> LumpedDiagonal:
        return self.assembly.D

    @property
    def n(self) -> int:
        return self.mesh.n_interior

    @property
    def rho_scalar(self) -> float:
        """The scalar ``rho`` (largest element value for per-element policies)."""
        return float(np.max(self.rho))


def setup(mesh: SimplicialMesh, target: TargetField, policy: RhoPolicy = "global",
          assembly: Optional[Assembly] = None) -> ControlProblem:
    """Assemble ``K``, ``M``, ``lump(M)`` and the load vector; resolve ``rho``.

    Parameters
    ----------
    policy : {"global", "element"} or float
        ``"global"``: ``rho = h**4`` with ``h`` the mesh size.
        ``"element"``: ``rho_e = h_e**4`` per element.
        A float is used as ``rho`` directly.
    assembly : Assembly, optional
        Reuse matrices already assembled on ``mesh``.
    """
    if assembly is None:
        assembly = assemble(mesh)
    elif assembly.mesh is not mesh:
        raise ValueError("assembly belongs to a different mesh")
    rho, per_element = _resolve_rho(mesh, policy)
    load = assemble_load(mesh, target)
    if per_element:
        W = assemble_lumped(mesh, weight=1.0 / rho)
        op = build_schur(assembly.K, assembly.M, assembly.D, rho, W)
    else:
        op = build_schur(assembly.K, assembly.M, assembly.D, rho)
    return ControlProblem(mesh, target, policy, rho, assembly, load, op)


@dataclass(frozen=True, eq=False)
class Solution:
    y: FeFunction
    u: FeFunction
    p: FeFunction
    report: PcgReport
    norms: dict = field(default_factory=dict)

    @property
    def error(self) -> float:
        return self.norms["error"]


def control_cost(sol: Solution, problem: Optional[ControlProblem] = None) -> dict:
    """Control cost measures.

    Returns
    -------
    dict
        ``proxy``: ``y^T K y``, the quantity compared with the cost budget;
        ``lumped``: ``u^T lump(M) u``; ``exact``: ``u^T M u``.
        ``exact <= lumped`` always holds since ``M <= lump(M)``.
    """
    if problem is None:
        a = assemble(sol.y.mesh)
        K, M, D = a.K, a.M, a.D
    else:
        K, M, D = problem.K, problem.M, problem.D
    y, u = sol.y.coeffs, sol.u.coeffs
    return {
        "proxy": dot(y, K @ y),
        "lumped": dot(u, D.values * u),
        "exact": dot(u, M @ u),
    }


def _recover(problem: ControlProblem, y: np.ndarray, report: PcgReport) -> Solution:
    op = problem.operator
    mesh = problem.mesh
    u = op.control(y)
    p = op.adjoint(y)
    yf = FeFunction(mesh, y)
    sol = Solution(yf, FeFunction(mesh, u), FeFunction(mesh, p), report)
    cost = control_cost(sol, problem)
    sol.norms.update(
        error=l2_error_vs_target(yf, problem.target),
        state_l2=math.sqrt(max(dot(y, problem.M @ y), 0.0)),
        control_proxy=cost["proxy"],
        control_lumped=cost["lumped"],
        control_l2_sq=cost["exact"],
    )
    return sol


def solve(problem: ControlProblem, x0: Optional[np.ndarray] = None,
          stop: StopRule = StopRule()) -> Solution:
    """PCG on the lumped Schur system, then recovery of ``u = D^{-1} K y`` and ``p``.

    A run that hits the iteration cap still returns a solution; check
    ``sol.report.converged``.
    """
    y, report = pcg(problem.operator, problem.D, problem.load, x0=x0, stop=stop)
    return _recover(problem, y, report)


def residual_check(sol: Solution, problem: ControlProblem) -> dict:
    """Residuals of the recovered fields.

    ``schur``: ``||S y - b|| / ||b||`` (Euclidean).
    ``adjoint_identity``: ``max |W p + K y|`` relative to ``max |K y|``;
    zero up to rounding by construction (``p = -rho u`` for scalar ``rho``).
    ``mixed``: relative residual of the block system
    ``[M, -K; K, W] [y; p] = [b; 0]`` with ``W = lump(M) / rho``.
    ``schur_preconditioned``: ``sqrt(r^T D^{-1} r / b^T D^{-1} b)``.
    """
    op = problem.operator
    y, p = sol.y.coeffs, sol.p.coeffs
    b = problem.load
    r = b - op.apply(y)
    nb = np.linalg.norm(b)
    wvals = op.W.values if op.variable else problem.D.values / problem.rho
    ky = problem.K @ y
    adj = wvals * p + ky
    scale_adj = max(np.abs(ky).max(initial=0.0), np.finfo(float).tiny)
    r1 = problem.M @ y - problem.K @ p - b
    r2 = adj
    mixed = math.sqrt(dot(r1, r1) + dot(r2, r2))
    dvals = problem.D.values
    bd = math.sqrt(dot(b, b / dvals))
    return {
        "schur": float(np.linalg.norm(r) / nb) if nb > 0 else float(np.linalg.norm(r)),
        "schur_preconditioned": math.sqrt(dot(r, r / dvals)) / bd if bd > 0 else 0.0,
        "adjoint_identity": float(np.abs(adj).max(initial=0.0) / scale_adj),
        "mixed": mixed / nb if nb > 0 else mixed,
    }
