"""Mass-lumped Schur complement operator and diagonally preconditioned CG."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from .fem import LumpedDiagonal
from .sparse import CsrMatrix, dot, lanczos_extremal, symmetric_eigs_extremal


class IndefiniteOperatorError(ArithmeticError):
    """CG met a direction with ``p^T S p <= 0``."""


class InnerSolveError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class SchurOperator:
    """``S = K W^{-1} K + M``.

    Constant regularization stores ``rho`` and ``W = lump(M) / rho``, applied as
    ``rho * K (D^{-1} (K x)) + M x``. Variable regularization stores ``W`` as
    the lumped mass weighted by ``1 / rho_e`` on each element.
    """

    K: CsrMatrix
    M: CsrMatrix
    D: LumpedDiagonal
    rho: Union[float, np.ndarray]
    W: Optional[LumpedDiagonal] = None

    @property
    def n(self) -> int:
        return self.K.shape[0]

    @property
    def variable(self) -> bool:
        return self.W is not None

    @property
    def spmv_per_apply(self) -> int:
        return 3

    def apply(self, x: np.ndarray) -> np.ndarray:
        kx = self.K @ x
        if self.W is None:
            return self.rho * (self.K @ (kx / self.D.values)) + self.M @ x
        return self.K @ (kx / self.W.values) + self.M @ x

    __call__ = apply

    def control(self, y: np.ndarray) -> np.ndarray:
        """Control coefficients ``D^{-1} K y`` (lumped state equation)."""
        return (self.K @ y) / self.D.values

    def adjoint(self, y: np.ndarray) -> np.ndarray:
        """Adjoint coefficients ``p`` with ``W p + K y = 0``."""
        if self.W is None:
            return -self.rho * self.control(y)
        return -(self.K @ y) / self.W.values


def build_schur(K: CsrMatrix, M: CsrMatrix, D: LumpedDiagonal,
                rho: Union[float, np.ndarray], W: Optional[LumpedDiagonal] = None) -> SchurOperator:
    """Validate inputs and build the lumped Schur operator.

    ``rho`` is a positive scalar, or a per-element array together with the
    ``1/rho``-weighted lumped diagonal ``W``.
    """
    n = K.shape[0]
    if K.shape != (n, n) or M.shape != (n, n) or len(D) != n:
        raise ValueError("dimension mismatch between K, M and D")
    if np.ndim(rho) == 0:
        if not rho > 0:
            raise ValueError("rho must be positive")
        if W is not None:
            raise ValueError("W is only used with per-element rho")
        return SchurOperator(K, M, D, float(rho))
    rho = np.asarray(rho, dtype=float)
    if not np.all(rho > 0):
        raise ValueError("rho must be positive on every element")
    if W is None or len(W) != n:
        raise ValueError("per-element rho needs the weighted lumped diagonal W")
    return SchurOperator(K, M, D, rho, W)


@dataclass(frozen=True)
class StopRule:
    """PCG termination.

    ``rtol``: stop once ``sqrt(r^T D^{-1} r)`` has dropped by this factor
    relative to the initial residual. ``fixed``: run exactly that many steps.
    ``maxiter``: hard cap (unconverged flag when hit).
    """

    rtol: float = 1e-6
    maxiter: int = 10_000
    fixed: Optional[int] = None


@dataclass
class PcgReport:
    iterations: int
    history: list
    final_relative: float
    wall_time: float
    stop_reason: str
    converged: bool
    applies: int = 0
    iterates: Optional[list] = field(default=None, repr=False)


def pcg(op, precond: LumpedDiagonal, b: np.ndarray, x0: Optional[np.ndarray] = None,
        stop: StopRule = StopRule(), keep_iterates: bool = False) -> tuple[np.ndarray, PcgReport]:
    """Conjugate gradients for ``op x = b`` preconditioned by a positive diagonal."""
    t0 = time.perf_counter()
    apply = op.apply if hasattr(op, "apply") else op
    dvals = precond.values if hasattr(precond, "values") else np.asarray(precond)
    n = b.shape[0]
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    applies = 0
    if x0 is not None and np.any(x):
        r = b - apply(x)
        applies += 1
    else:
        r = b.copy()
    z = r / dvals
    rz = dot(r, z)
    norm0 = math.sqrt(max(rz, 0.0))
    history = [norm0]
    iterates = [x.copy()] if keep_iterates else None
    if norm0 == 0.0:
        return x, PcgReport(0, history, 0.0, time.perf_counter() - t0, "zero_residual",
                            True, applies, iterates)
    p = z.copy()
    k = 0
    reason = "max_iterations"
    limit = stop.fixed if stop.fixed is not None else stop.maxiter
    while k < limit:
        q = apply(p)
        applies += 1
        pq = dot(p, q)
        if not pq > 0.0:
            raise IndefiniteOperatorError(f"p^T S p = {pq:.3e} at iteration {k}")
        alpha = rz / pq
        x += alpha * p
        r -= alpha * q
        z = r / dvals
        rz_new = dot(r, z)
        k += 1
        rel = math.sqrt(max(rz_new, 0.0)) / norm0
        history.append(rel * norm0)
        if keep_iterates:
            iterates.append(x.copy())
        if stop.fixed is None and rel <= stop.rtol:
            reason = "tolerance"
            break
        if rz_new == 0.0:
            reason = "tolerance"
            break
        p = z + (rz_new / rz) * p
        rz = rz_new
    else:
        if stop.fixed is not None:
            reason = "fixed_count"
    final = history[-1] / norm0
    converged = reason in ("tolerance", "fixed_count")
    return x, PcgReport(k, history, final, time.perf_counter() - t0, reason, converged,
                        applies, iterates)


def convergence_factor(kappa: float) -> float:
    s = math.sqrt(kappa)
    return (s - 1.0) / (s + 1.0)


def estimate_condition(op, precond: LumpedDiagonal, exact: bool = False,
                       max_steps: int = 200) -> tuple[float, float]:
    """Spectral condition number of ``D^{-1} S`` and the CG factor ``q``.

    Lanczos estimate by default; ``exact=True`` uses a dense eigensolve
    (oracle-size problems only).
    """
    apply = op.apply if hasattr(op, "apply") else op
    n = len(precond)
    if exact:
        lo, hi = symmetric_eigs_extremal(apply, n, precond.values, mode="exact")
    else:
        est = lanczos_extremal(apply, n, precond.values, max_steps=max_steps)
        lo, hi = est.lam_min, est.lam_max
    kappa = hi / lo
    if abs(kappa - 1.0) < 1e-12:
        kappa = 1.0
    return kappa, convergence_factor(kappa)


def cg_inner(A: CsrMatrix, b: np.ndarray, tol: float, maxiter: int = 10_000) -> np.ndarray:
    """CG with Jacobi preconditioner for mass-matrix solves."""
    dvals = A.diagonal()
    x = np.zeros_like(b)
    r = b.copy()
    z = r / dvals
    p = z.copy()
    rz = dot(r, z)
    r0 = math.sqrt(max(rz, 0.0))
    if r0 == 0.0:
        return x
    for _ in range(maxiter):
        q = A @ p
        alpha = rz / dot(p, q)
        x += alpha * p
        r -= alpha * q
        z = r / dvals
        rz_new = dot(r, z)
        if math.sqrt(max(rz_new, 0.0)) <= tol * r0:
            return x
        p = z + (rz_new / rz) * p
        rz = rz_new
    raise InnerSolveError("inner mass-matrix CG did not converge")


def apply_full_mass_schur(K: CsrMatrix, M: CsrMatrix, x: np.ndarray, rho: float,
                          inner_tol: float = 1e-12, inner=None) -> np.ndarray:
    """``rho K M^{-1} K x + M x`` with ``M^{-1}`` realized by inner CG.

    ``inner`` replaces the matrix inverted inside (a :class:`LumpedDiagonal`
    is inverted exactly).
    """
    kx = K @ x
    if not np.any(kx):
        w = np.zeros_like(kx)
    elif isinstance(inner, LumpedDiagonal):
        w = kx / inner.values
    else:
        w = cg_inner(M if inner is None else inner, kx, inner_tol)
    return rho * (K @ w) + M @ x


@dataclass(frozen=True, eq=False)
class FullMassSchurOperator:
    """``rho K M^{-1} K + M`` (oracle-grade, inner CG per application)."""

    K: CsrMatrix
    M: CsrMatrix
    rho: float
    inner_tol: float = 1e-12

    @property
    def n(self) -> int:
        return self.K.shape[0]

    def apply(self, x):
        return apply_full_mass_schur(self.K, self.M, x, self.rho, self.inner_tol)

    __call__ = apply
