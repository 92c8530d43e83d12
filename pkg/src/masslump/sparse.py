"""Sparse kernels used on the solver hot path, plus a small dense toolkit.

The hot path (SpMV, diagonal scaling, dot products) is implemented here on top
of numpy/numba so the solver does not depend on an external sparse library.
The dense helpers exist only for oracle checks on desk-scale problems and
refuse inputs above :data:`ORACLE_BUDGET` unknowns.
"""
from __future__ import annotations

import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional

import numba
import numpy as np
import scipy.linalg

ORACLE_BUDGET = 4096

_WORKERS = 1


class OracleBudgetError(ValueError):
    """Raised when a dense oracle path is asked to handle a too-large system."""


class LanczosBreakdown(RuntimeError):
    pass


def set_workers(n: int) -> None:
    """Set the number of worker threads used by the kernels in this module."""
    global _WORKERS
    if n < 1:
        raise ValueError("worker count must be >= 1")
    _WORKERS = int(n)


def get_workers() -> int:
    return _WORKERS


def _chunks(n: int, parts: int) -> list[tuple[int, int]]:
    bounds = np.linspace(0, n, parts + 1).astype(np.int64)
    return [(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]


def run_partitioned(n: int, task: Callable[[int, int], object]) -> list:
    """Run ``task(start, stop)`` over a row partition of ``range(n)``.

    Results come back in partition order, so reductions over them are
    deterministic for a fixed worker count.
    """
    parts = _chunks(n, min(_WORKERS, max(n, 1)))
    if len(parts) <= 1:
        return [task(0, n)]
    with ThreadPoolExecutor(max_workers=len(parts)) as pool:
        return list(pool.map(lambda ab: task(*ab), parts))


@numba.njit(nogil=True, cache=True)
def _csr_matvec(indptr, indices, data, x, y, start, stop):
    for i in range(start, stop):
        acc = 0.0
        for k in range(indptr[i], indptr[i + 1]):
            acc += data[k] * x[indices[k]]
        y[i] = acc


@dataclass(frozen=True, eq=False)
class CsrMatrix:
    """Compressed sparse row matrix.

    Column indices are strictly increasing inside each row. ``symmetric`` is
    a declaration made by the producer (assembly), checked by
    :meth:`symmetry_defect`.
    """

    indptr: np.ndarray
    indices: np.ndarray
    data: np.ndarray
    shape: tuple[int, int]
    symmetric: bool = False

    def __post_init__(self):
        if self.indptr.shape != (self.shape[0] + 1,):
            raise ValueError("indptr length must be nrows + 1")
        if self.indices.shape != self.data.shape:
            raise ValueError("indices and data must have equal length")

    @property
    def nnz(self) -> int:
        return int(self.indptr[-1])

    def matvec(self, x: np.ndarray) -> np.ndarray:
        return spmv(self, x)

    def __matmul__(self, x):
        return spmv(self, x)

    def diagonal(self) -> np.ndarray:
        rows = np.repeat(np.arange(self.shape[0]), np.diff(self.indptr))
        out = np.zeros(self.shape[0])
        hit = rows == self.indices
        out[rows[hit]] = self.data[hit]
        return out

    def to_dense(self) -> np.ndarray:
        n, m = self.shape
        if n > ORACLE_BUDGET or m > ORACLE_BUDGET:
            raise OracleBudgetError(f"refusing to densify a {n}x{m} matrix")
        out = np.zeros(self.shape)
        rows = np.repeat(np.arange(n), np.diff(self.indptr))
        np.add.at(out, (rows, self.indices), self.data)
        return out

    def symmetry_defect(self) -> float:
        """Max |A[i,j] - A[j,i]| relative to max |A|, computed sparsely."""
        n = self.shape[0]
        rows = np.repeat(np.arange(n, dtype=np.int64), np.diff(self.indptr))
        key = rows * n + self.indices
        tkey = self.indices.astype(np.int64) * n + rows
        order = np.argsort(key)
        pos = np.searchsorted(key[order], tkey)
        pos = np.minimum(pos, len(key) - 1)
        found = key[order][pos] == tkey
        if not np.all(found):
            return np.inf
        diff = np.abs(self.data - self.data[order][pos])
        scale = np.abs(self.data).max() if self.nnz else 1.0
        return float(diff.max() / scale) if self.nnz else 0.0

    @classmethod
    def from_dense(cls, a: np.ndarray, symmetric: bool = False) -> "CsrMatrix":
        a = np.asarray(a, dtype=float)
        rows, cols = np.nonzero(a)
        indptr = np.zeros(a.shape[0] + 1, dtype=np.int64)
        np.add.at(indptr, rows + 1, 1)
        return cls(np.cumsum(indptr), cols.astype(np.int64), a[rows, cols],
                   a.shape, symmetric)

    @classmethod
    def identity(cls, n: int) -> "CsrMatrix":
        return cls(np.arange(n + 1, dtype=np.int64), np.arange(n, dtype=np.int64),
                   np.ones(n), (n, n), True)


def spmv(a: CsrMatrix, x: np.ndarray) -> np.ndarray:
    """Return ``a @ x``. Row-partitioned across workers; bit-identical for any
    worker count because every row is reduced by a single thread."""
    x = np.ascontiguousarray(x, dtype=float)
    if x.shape != (a.shape[1],):
        raise ValueError(f"dimension mismatch: matrix {a.shape}, vector {x.shape}")
    y = np.empty(a.shape[0])
    run_partitioned(a.shape[0], lambda s, e: _csr_matvec(a.indptr, a.indices, a.data,
                                                          x, y, s, e))
    return y


DOT_BLOCK = 1 << 15


def dot(x: np.ndarray, y: np.ndarray) -> float:
    """Inner product summed over fixed blocks of :data:`DOT_BLOCK` entries.

    The block partials do not depend on the worker count, so results are
    bit-identical for any number of workers.
    """
    n = x.shape[0]
    nblocks = max(1, -(-n // DOT_BLOCK))
    if nblocks == 1:
        return float(np.dot(x, y))
    partial = np.empty(nblocks)

    def task(b0, b1):
        for b in range(b0, b1):
            s = b * DOT_BLOCK
            partial[b] = np.dot(x[s:s + DOT_BLOCK], y[s:s + DOT_BLOCK])

    if _WORKERS == 1:
        task(0, nblocks)
    else:
        run_partitioned(nblocks, task)
    return float(np.sum(partial))


def diag_apply_inverse(d: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Entrywise ``x / d`` for a strictly positive diagonal ``d``."""
    d = np.asarray(getattr(d, "values", d))
    if d.shape != np.shape(x):
        raise ValueError("dimension mismatch")
    if not np.all(d > 0):
        raise ValueError("diagonal has nonpositive entries")
    return x / d


def dense_solve(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """LU solve for oracle checks; raises on near-singular input."""
    a = np.asarray(a, dtype=float)
    if a.shape[0] > ORACLE_BUDGET:
        raise OracleBudgetError(f"dense solve of size {a.shape[0]} exceeds budget")
    with warnings.catch_warnings():
        # singularity is detected below and raised as an error
        warnings.simplefilter("ignore", scipy.linalg.LinAlgWarning)
        lu, piv = scipy.linalg.lu_factor(a, check_finite=True)
    if np.min(np.abs(np.diag(lu))) <= np.finfo(float).eps * np.abs(lu).max() * a.shape[0]:
        raise np.linalg.LinAlgError("matrix is singular to working precision")
    x = scipy.linalg.lu_solve((lu, piv), b)
    nb = np.linalg.norm(b)
    if nb > 0 and np.linalg.norm(a @ x - b) > 1e-10 * nb:
        raise np.linalg.LinAlgError("dense solve residual above 1e-10")
    return x


def operator_to_dense(apply: Callable[[np.ndarray], np.ndarray], n: int) -> np.ndarray:
    if n > ORACLE_BUDGET:
        raise OracleBudgetError(f"operator of size {n} exceeds oracle budget")
    eye = np.eye(n)
    return np.column_stack([apply(eye[:, j]) for j in range(n)])


@dataclass
class EigenEstimate:
    lam_min: float
    lam_max: float
    steps: int = 0
    exact: bool = True
    ritz_history: list = field(default_factory=list, repr=False)


def lanczos_extremal(apply: Callable[[np.ndarray], np.ndarray], n: int,
                     metric: Optional[np.ndarray] = None, max_steps: int = 200,
                     stagnation: float = 1e-8, seed: int = 0) -> EigenEstimate:
    """Extremal eigenvalues of ``B^{-1} A`` for SPD diagonal metric ``B``.

    Lanczos in the ``B``-inner product with full reorthogonalization. Stops when
    both extremal Ritz values change by less than ``stagnation`` (relative)
    between steps, or at ``max_steps``.
    """
    b = np.ones(n) if metric is None else np.asarray(getattr(metric, "values", metric))
    rng = np.random.default_rng(seed)
    m = min(max_steps, n)
    basis = np.empty((m + 1, n))
    v = rng.standard_normal(n)
    basis[0] = v / np.sqrt(v @ (b * v))
    alphas, betas = [], []
    prev = None
    history = []
    for j in range(m):
        w = apply(basis[j]) / b
        a = basis[j] @ (b * w)
        alphas.append(a)
        q = basis[: j + 1]
        for _ in range(2):
            w -= q.T @ (q @ (b * w))
        beta = np.sqrt(max(w @ (b * w), 0.0))
        t = np.diag(alphas) + np.diag(betas, 1) + np.diag(betas, -1)
        ritz = scipy.linalg.eigvalsh(t)
        cur = (float(ritz[0]), float(ritz[-1]))
        history.append(cur)
        if prev is not None and all(abs(c - p) <= stagnation * abs(c) for c, p in zip(cur, prev)):
            return EigenEstimate(cur[0], cur[1], j + 1, False, history)
        prev = cur
        if beta <= 1e-14 * max(abs(a), 1.0):
            # invariant subspace: Ritz values are eigenvalues
            return EigenEstimate(cur[0], cur[1], j + 1, j + 1 == n, history)
        betas.append(beta)
        basis[j + 1] = w / beta
    if not history:
        raise LanczosBreakdown("no Lanczos steps performed")
    return EigenEstimate(history[-1][0], history[-1][1], m, m == n, history)


def symmetric_eigs_extremal(apply, n: int, metric=None, mode: str = "auto",
                            max_steps: int = 200) -> tuple[float, float]:
    """Extremal generalized eigenvalues of ``apply`` w.r.t. a diagonal metric.

    ``mode="exact"`` densifies and calls a dense symmetric eigensolver;
    ``mode="lanczos"`` runs :func:`lanczos_extremal`; ``"auto"`` picks exact
    when ``n`` fits in the oracle budget.
    """
    if callable(apply):
        op = apply
    else:
        mat = apply
        op = lambda x: mat @ x  # noqa: E731
    if mode == "auto":
        mode = "exact" if n <= ORACLE_BUDGET else "lanczos"
    if mode == "exact":
        a = operator_to_dense(op, n)
        a = 0.5 * (a + a.T)
        if metric is None:
            lam = scipy.linalg.eigvalsh(a)
        else:
            bvals = np.asarray(getattr(metric, "values", metric))
            if bvals.ndim == 1:
                s = 1.0 / np.sqrt(bvals)
                lam = scipy.linalg.eigvalsh(s[:, None] * a * s[None, :])
            else:
                lam = scipy.linalg.eigvalsh(a, bvals)
        return float(lam[0]), float(lam[-1])
    if mode == "lanczos":
        try:
            est = lanczos_extremal(op, n, metric, max_steps=max_steps)
        except LanczosBreakdown as exc:
            raise LanczosBreakdown(f"Lanczos eigen probe failed: {exc}") from exc
        return est.lam_min, est.lam_max
    raise ValueError(f"unknown mode {mode!r}")
