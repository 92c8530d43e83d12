"""Brute-force verifiers for the discrete identities and bounds the solver relies on.

Each check recomputes its quantities along an independent path (element-wise
quadrature or dense linear algebra) and returns a :class:`CheckReport`.
Dense paths refuse problems above :data:`~masslump.sparse.ORACLE_BUDGET`.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg

from .control import setup
from .fem import (FeFunction, TargetField, assemble, l2_error_vs_target, simplex_rule)
from .mesh import SimplicialMesh, build_structured, refine_uniform
from .nested import fit_rate
from .solver import FullMassSchurOperator, StopRule, convergence_factor, pcg
from .sparse import ORACLE_BUDGET, OracleBudgetError, dense_solve, operator_to_dense

# element constants of the consistency bound in reference coordinates:
# |int (pq - I(pq))| <= C |tau| ||grad p~|| ||grad q~||
CONSISTENCY_CONSTANTS = {1: 1.0 / 6.0, 2: 0.5, 3: 1.5}


@dataclass
class CheckReport:
    name: str
    passed: bool
    value: float
    bound: float
    details: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["details"] = {k: (v.tolist() if isinstance(v, np.ndarray) else v)
                          for k, v in self.details.items()}
        return out


def _budget(n: int):
    if n > ORACLE_BUDGET:
        raise OracleBudgetError(f"{n} unknowns exceed the oracle budget {ORACLE_BUDGET}")


def _nodal_pairs(mesh: SimplicialMesh, samples: int, seed: int):
    rng = np.random.default_rng(seed)
    n = mesh.n_interior
    for _ in range(samples):
        p = np.zeros(mesh.n_vertices)
        q = np.zeros(mesh.n_vertices)
        p[mesh.interior_vertices] = rng.standard_normal(n)
        q[mesh.interior_vertices] = rng.standard_normal(n)
        yield p, q


def _exact_products(mesh: SimplicialMesh, p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Per-element ``int p q`` by a quadrature exact for quadratics."""
    lam, w = simplex_rule(mesh.dim, 2)
    pe, qe = p[mesh.elements], q[mesh.elements]
    vals = (pe @ lam.T) * (qe @ lam.T)  # (ne, nq)
    return mesh.volumes * (vals @ w)


def _interpolant_products(mesh: SimplicialMesh, p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Per-element ``int I(pq)``: mean of the nodal products times the volume."""
    return mesh.volumes * np.mean(p[mesh.elements] * q[mesh.elements], axis=1)


# ---------------------------------------------------------------------------

def verify_lumped_representation(mesh: SimplicialMesh, samples: int = 1000,
                                 seed: int = 0) -> CheckReport:
    """``q^T lump(M) p == int I(pq)`` and ``||p||_h^2 / (d+2) <= ||p||^2 <= ||p||_h^2``.

    The reported value is the largest violation, relative to ``||p||_h^2``.
    """
    _budget(mesh.n_interior)
    D = assemble(mesh).D.values
    d = mesh.dim
    worst_rep = 0.0
    worst_sandwich = 0.0
    iv = mesh.interior_vertices
    for p, q in _nodal_pairs(mesh, samples, seed):
        lumped = float(q[iv] @ (D * p[iv]))
        direct = float(_interpolant_products(mesh, p, q).sum())
        scale = math.sqrt(float(p[iv] @ (D * p[iv])) * float(q[iv] @ (D * q[iv])))
        worst_rep = max(worst_rep, abs(lumped - direct) / scale)
        ph2 = float(p[iv] @ (D * p[iv]))
        pl2 = float(_exact_products(mesh, p, p).sum())
        viol = max(ph2 / (d + 2) - pl2, pl2 - ph2, 0.0) / ph2
        worst_sandwich = max(worst_sandwich, viol)
    worst = max(worst_rep, worst_sandwich)
    return CheckReport("lumped_representation", worst <= 1e-13, worst, 1e-13,
                       {"representation": worst_rep, "sandwich": worst_sandwich,
                        "samples": samples, "dim": d, "n": mesh.n_interior})


def _consistency_terms(mesh: SimplicialMesh, p: np.ndarray, q: np.ndarray):
    """Per element: ``|int (pq - I(pq))|``, ``|tau| ||grad p~|| ||grad q~||`` and the
    magnitude of the two integrals (the rounding scale of the difference)."""
    d = mesh.dim
    exact = _exact_products(mesh, p, q)
    interp = _interpolant_products(mesh, p, q)
    pe, qe = p[mesh.elements], q[mesh.elements]
    ref_vol = 1.0 / math.factorial(d)
    gp = np.sqrt(np.sum((pe[:, 1:] - pe[:, :1]) ** 2, axis=1) * ref_vol)
    gq = np.sqrt(np.sum((qe[:, 1:] - qe[:, :1]) ** 2, axis=1) * ref_vol)
    scale = np.maximum(np.abs(exact), np.abs(interp))
    return np.abs(exact - interp), mesh.volumes * gp * gq, scale


def element_consistency_ratios(mesh: SimplicialMesh, p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """``|int_tau (pq - I(pq))| / (|tau| ||grad p~|| ||grad q~||)`` per element.

    ``p~`` is ``p`` pulled back to the reference element, whose gradient is
    ``(p_1 - p_0, ..., p_d - p_0)``. Elements where either gradient vanishes
    get ratio 0.
    """
    diff, den, _ = _consistency_terms(mesh, p, q)
    out = np.zeros_like(diff)
    ok = den > 1e-300
    out[ok] = diff[ok] / den[ok]
    return out


def verify_consistency_error(mesh: SimplicialMesh, samples: int = 1000,
                             seed: int = 0) -> CheckReport:
    """Consistency error of the lumped inner product.

    Checks on every element and sample:

    * the exact element identity
      ``int (pq - I(pq)) = -|tau| / ((d+1)(d+2)) * sum_{i<j} (p_i - p_j)(q_i - q_j)``;
    * in 1D, ``<p,q>_h - <p,q> = (1/6) sum h_e^2 int p'q'``;
    * the reference-element bound with constant 1/6, 1/2, 3/2 for d = 1, 2, 3,
      up to rounding of ``1e-13`` relative to the element integrals (the 1D
      bound holds with equality on every element).

    Also reports ``|<p,q> - <p,q>_h| / (h^2 ||grad p|| ||grad q||)``.
    """
    _budget(mesh.n_interior)
    d = mesh.dim
    asm = assemble(mesh)
    K = asm.K
    iv = mesh.interior_vertices
    h = mesh.h
    pairs_i, pairs_j = np.triu_indices(d + 1, 1)
    worst_identity = 0.0
    worst_1d = 0.0
    worst_elem = 0.0
    worst_excess = 0.0
    const = CONSISTENCY_CONSTANTS[d]
    worst_global = 0.0
    for p, q in _nodal_pairs(mesh, samples, seed):
        exact = _exact_products(mesh, p, q)
        interp = _interpolant_products(mesh, p, q)
        pe, qe = p[mesh.elements], q[mesh.elements]
        formula = -mesh.volumes / ((d + 1) * (d + 2)) * np.sum(
            (pe[:, pairs_i] - pe[:, pairs_j]) * (qe[:, pairs_i] - qe[:, pairs_j]), axis=1)
        scale = max(np.abs(exact).max(), np.abs(interp).max(), 1e-300)
        worst_identity = max(worst_identity, float(np.abs(exact - interp - formula).max() / scale))
        gap = float(interp.sum() - exact.sum())
        if d == 1:
            he = mesh.volumes
            dp = (pe[:, 1] - pe[:, 0]) / he
            dq = (qe[:, 1] - qe[:, 0]) / he
            rhs = float(np.sum(he ** 2 * he * dp * dq) / 6.0)
            worst_1d = max(worst_1d, abs(gap - rhs) / max(abs(exact).sum(), 1e-300))
        diff, den, escale = _consistency_terms(mesh, p, q)
        ok = den > 1e-300
        worst_elem = max(worst_elem, float((diff[ok] / den[ok]).max(initial=0.0)))
        excess = (diff - const * den) / np.maximum(escale, 1e-300)
        worst_excess = max(worst_excess, float(excess.max()))
        gpn = math.sqrt(float(p[iv] @ (K @ p[iv])))
        gqn = math.sqrt(float(q[iv] @ (K @ q[iv])))
        worst_global = max(worst_global, abs(gap) / (h * h * gpn * gqn))
    passed = worst_identity <= 1e-13 and worst_1d <= 1e-13 and worst_excess <= 1e-13
    return CheckReport("consistency_error", passed, worst_elem, const,
                       {"element_identity": worst_identity, "identity_1d": worst_1d,
                        "bound_excess": worst_excess,
                        "global_ratio": worst_global, "samples": samples, "dim": d})


def reference_element_spectrum(dim: int) -> tuple[float, float]:
    """Extremal eigenvalues of ``D_tau^{-1} M_tau`` on the reference simplex.

    ``M_tau`` comes from quadrature, ``D_tau`` from its row sums.
    """
    lam, w = simplex_rule(dim, 2)
    vol = 1.0 / math.factorial(dim)
    m = vol * (lam.T * w) @ lam
    dvals = m.sum(axis=1)
    s = 1.0 / np.sqrt(dvals)
    ev = scipy.linalg.eigvalsh(s[:, None] * m * s[None, :])
    return float(ev[0]), float(ev[-1])


def rayleigh_quotients(mesh: SimplicialMesh, samples: int = 10_000, seed: int = 0) -> np.ndarray:
    """``p^T M p / p^T D p`` for random coefficient vectors."""
    a = assemble(mesh)
    rng = np.random.default_rng(seed)
    out = np.empty(samples)
    for k in range(samples):
        p = rng.standard_normal(mesh.n_interior)
        out[k] = float(p @ (a.M @ p)) / float(p @ (a.D.values * p))
    return out


def verify_spectral_equivalence(mesh: SimplicialMesh, rho: Optional[float] = None) -> CheckReport:
    """Dense generalized eigenvalues of ``(M, D)``, ``(S, M)`` and ``(S, D)``.

    Asserts ``1/(d+2) <= lambda(M, D) <= 1`` and ``lambda_min(S, M) >= 1``.
    Reports ``lambda_max(S, M)`` and the condition number of ``D^{-1} S``.
    """
    _budget(mesh.n_interior)
    d = mesh.dim
    prob = setup(mesh, TargetField.zero(), "global" if rho is None else rho)
    M = prob.M.to_dense()
    dv = prob.D.values
    S = operator_to_dense(prob.operator.apply, prob.n)
    S = 0.5 * (S + S.T)
    s = 1.0 / np.sqrt(dv)
    md = scipy.linalg.eigvalsh(s[:, None] * M * s[None, :])
    sm = scipy.linalg.eigvalsh(S, M)
    sd = scipy.linalg.eigvalsh(s[:, None] * S * s[None, :])
    lo_bound = 1.0 / (d + 2)
    tol = 1e-12
    passed = bool(md[0] >= lo_bound - tol and md[-1] <= 1 + tol and sm[0] >= 1 - 1e-10)
    return CheckReport("spectral_equivalence", passed, float(sd[-1] / sd[0]), float("nan"),
                       {"md_min": float(md[0]), "md_max": float(md[-1]),
                        "sm_min": float(sm[0]), "sm_max": float(sm[-1]),
                        "sd_min": float(sd[0]), "sd_max": float(sd[-1]),
                        "rho": prob.rho_scalar, "dim": d, "n": prob.n})


def verify_pcg_envelope(problem, rtol: float = 1e-12) -> CheckReport:
    """PCG errors in the ``S`` norm stay below ``2 q^k`` times the initial error.

    ``q`` is computed from the exact condition number of ``D^{-1} S``.
    """
    _budget(problem.n)
    S = operator_to_dense(problem.operator.apply, problem.n)
    S = 0.5 * (S + S.T)
    y_star = dense_solve(S, problem.load)
    dv = problem.D.values
    s = 1.0 / np.sqrt(dv)
    ev = scipy.linalg.eigvalsh(s[:, None] * S * s[None, :])
    kappa = float(ev[-1] / ev[0])
    q = convergence_factor(kappa) if kappa > 1 + 1e-14 else 0.0
    _, rep = pcg(problem.operator, problem.D, problem.load, stop=StopRule(rtol=rtol),
                 keep_iterates=True)
    errs = []
    for x in rep.iterates:
        e = y_star - x
        errs.append(math.sqrt(max(float(e @ (S @ e)), 0.0)))
    errs = np.array(errs)
    env = 2.0 * q ** np.arange(len(errs)) * errs[0]
    # rounding floor: the dense solution is itself only accurate to ~1e-12
    floor = 1e-10 * max(errs[0], 1e-300)
    excess = errs - env - floor
    worst = float(excess.max(initial=-np.inf))
    return CheckReport("pcg_envelope", worst <= 0.0, worst, 0.0,
                       {"kappa": kappa, "q": q, "iterations": rep.iterations,
                        "errors": errs, "envelope": env})


def verify_dense_agreement(problem, rtol: float = 1e-10) -> CheckReport:
    """PCG solution against a dense LU solve of the same Schur system."""
    _budget(problem.n)
    S = operator_to_dense(problem.operator.apply, problem.n)
    y_star = dense_solve(S, problem.load)
    y, _ = pcg(problem.operator, problem.D, problem.load, stop=StopRule(rtol=rtol))
    nrm = float(np.linalg.norm(y_star))
    rel = float(np.linalg.norm(y - y_star) / nrm) if nrm > 0 else float(np.linalg.norm(y))
    return CheckReport("dense_agreement", rel <= 1e-8, rel, 1e-8, {"n": problem.n})


def verify_lumping_effect(dim: int = 3, levels=(2, 3, 4), target: Optional[TargetField] = None,
                          inner_tol: float = 1e-12, rtol: float = 1e-6) -> CheckReport:
    """Errors of lumped and full-mass Schur solves with ``rho = h^4``.

    Both use the same load, preconditioner and stopping rule; the full-mass
    operator inverts ``M`` by an inner CG. Asserts error ratios in
    ``[0.9, 1.1]`` and fitted rates within 0.05.
    """
    target = TargetField.unit_box(dim) if target is None else target
    levels = list(levels)
    mesh = build_structured(dim, levels[0])
    lumped, full, hs = [], [], []
    for k, level in enumerate(levels):
        if k:
            while mesh.level < level:
                mesh = refine_uniform(mesh)
        prob = setup(mesh, target)
        y_l, _ = pcg(prob.operator, prob.D, prob.load, stop=StopRule(rtol=rtol))
        op_full = FullMassSchurOperator(prob.K, prob.M, prob.rho_scalar, inner_tol)
        y_f, _ = pcg(op_full, prob.D, prob.load, stop=StopRule(rtol=rtol))
        lumped.append(l2_error_vs_target(FeFunction(mesh, y_l), target))
        full.append(l2_error_vs_target(FeFunction(mesh, y_f), target))
        hs.append(mesh.h)
    ratios = np.array(lumped) / np.array(full)
    details = {"levels": levels, "lumped": lumped, "full": full, "ratios": ratios.tolist()}
    passed = bool(np.all((ratios >= 0.9) & (ratios <= 1.1)))
    if len(levels) >= 3:
        r_l = fit_rate(lumped, hs)
        r_f = fit_rate(full, hs)
        details.update(rate_lumped=r_l, rate_full=r_f)
        passed = passed and abs(r_l - r_f) <= 0.05
    worst = float(np.max(np.abs(ratios - 1.0)))
    return CheckReport("lumping_effect", passed, worst, 0.1, details)


def run_suite(seed: int = 0, samples: int = 200, quick: bool = True) -> list:
    """Every verifier on small structured meshes in 1D, 2D and 3D."""
    reports = []
    for d in (1, 2, 3):
        lo, hi = reference_element_spectrum(d)
        err = max(abs(lo - 1.0 / (d + 2)), abs(hi - 1.0))
        reports.append(CheckReport(f"reference_spectrum_{d}d", err <= 1e-12, err, 1e-12,
                                   {"min": lo, "max": hi}))
        levels = {1: (1, 2, 3), 2: (1, 2), 3: (1,)}[d]
        for level in levels:
            mesh = build_structured(d, level)
            tag = f"{d}d_l{level}"
            for rep in (verify_lumped_representation(mesh, samples, seed),
                        verify_consistency_error(mesh, samples, seed),
                        verify_spectral_equivalence(mesh)):
                rep.name = f"{rep.name}_{tag}"
                reports.append(rep)
            prob = setup(mesh, TargetField.unit_box(d))
            for rep in (verify_pcg_envelope(prob), verify_dense_agreement(prob)):
                rep.name = f"{rep.name}_{tag}"
                reports.append(rep)
    if not quick:
        reports.append(verify_lumping_effect(3, (2, 3, 4)))
    else:
        reports.append(verify_lumping_effect(2, (2, 3, 4)))
    return reports
