"""P1 finite elements on :class:`~masslump.mesh.SimplicialMesh`.

Stiffness, mass and (extended-row-sum) lumped mass matrices over interior
DOFs, load vectors for box-indicator and smooth targets, and the L2/H1
functionals used for error reporting.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numba
import numpy as np
from scipy.special import roots_jacobi

from .mesh import MeshError, SimplicialMesh, element_blocks
from .sparse import CsrMatrix, dot


class AlignmentError(ValueError):
    """An indicator target is cut by an element instead of following faces."""


# ---------------------------------------------------------------------------
# quadrature

def simplex_rule(dim: int, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Collapsed-coordinate Gauss-Jacobi rule on the reference simplex.

    Returns barycentric points ``(npts, dim+1)`` and weights summing to 1, so
    ``integral over tau of f ~= |tau| * sum(w * f)``. Exact for polynomials of
    total degree ``2n - 1``.
    """
    nodes, weights = [], []
    for k in range(dim):
        a = dim - 1 - k
        x, w = roots_jacobi(n, a, 0)
        nodes.append((x + 1) / 2)
        weights.append(w / 2 ** (a + 1))
    grids = np.meshgrid(*nodes, indexing="ij")
    wgrid = np.ones_like(grids[0])
    for k, w in enumerate(weights):
        shape = [1] * dim
        shape[k] = n
        wgrid = wgrid * w.reshape(shape)
    t = [g.ravel() for g in grids]
    # collapse cube -> simplex: x_k = t_k * prod_{j<k} (1 - t_j)
    coords = []
    rem = np.ones_like(t[0])
    for k in range(dim):
        coords.append(t[k] * rem)
        rem = rem * (1 - t[k])
    coords = np.stack(coords, axis=1)
    bary = np.hstack([1 - coords.sum(axis=1, keepdims=True), coords])
    w = wgrid.ravel()
    return bary, w / w.sum()


# ---------------------------------------------------------------------------
# targets

@dataclass(frozen=True)
class TargetField:
    """Desired state ``y_d``.

    ``kind`` is ``"box"`` (indicator of an open box), ``"sine"`` (product of
    ``sin(pi x_i)``), ``"zero"`` or ``"custom"`` (arbitrary callable, integrated
    by quadrature).
    """

    kind: str
    lower: Optional[tuple] = None
    upper: Optional[tuple] = None
    func: Optional[Callable] = None

    @classmethod
    def box(cls, lower, upper) -> "TargetField":
        return cls("box", tuple(float(v) for v in lower), tuple(float(v) for v in upper))

    @classmethod
    def unit_box(cls, dim: int, lo: float = 0.25, hi: float = 0.75) -> "TargetField":
        return cls.box((lo,) * dim, (hi,) * dim)

    @classmethod
    def sine(cls) -> "TargetField":
        return cls("sine")

    @classmethod
    def zero(cls) -> "TargetField":
        return cls("zero")

    @classmethod
    def custom(cls, func: Callable[[np.ndarray], np.ndarray]) -> "TargetField":
        return cls("custom", func=func)

    @property
    def elementwise_constant(self) -> bool:
        return self.kind in ("box", "zero")

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        if self.kind == "box":
            lo, hi = np.array(self.lower), np.array(self.upper)
            return np.all((x > lo) & (x < hi), axis=1).astype(float)
        if self.kind == "sine":
            return np.prod(np.sin(np.pi * x), axis=1)
        if self.kind == "zero":
            return np.zeros(x.shape[0])
        return np.asarray(self.func(x), dtype=float)

    def l2_norm(self, dim: int) -> float:
        if self.kind == "box":
            lo = np.clip(self.lower[:dim], 0, 1)
            hi = np.clip(self.upper[:dim], 0, 1)
            return float(np.sqrt(np.prod(np.maximum(hi - lo, 0))))
        if self.kind == "sine":
            return 0.5 ** (dim / 2)
        if self.kind == "zero":
            return 0.0
        raise NotImplementedError("no closed-form norm for custom targets")

    def element_values(self, mesh: SimplicialMesh) -> np.ndarray:
        """Per-element constant value; raises :class:`AlignmentError` if cut."""
        if self.kind == "zero":
            return np.zeros(mesh.n_elements)
        if self.kind != "box":
            raise ValueError(f"{self.kind} target is not element-wise constant")
        d = mesh.dim
        lo = np.array(self.lower[:d])
        hi = np.array(self.upper[:d])
        out = np.empty(mesh.n_elements)
        for blk in element_blocks(mesh.n_elements):
            x = mesh.vertices[mesh.elements[blk]]  # (nb, d+1, d)
            inside = np.all((x >= lo) & (x <= hi), axis=(1, 2))
            outside = np.any(np.all(x <= lo, axis=1) | np.all(x >= hi, axis=1), axis=1)
            cut = ~(inside | outside)
            if np.any(cut):
                k = int(np.flatnonzero(cut)[0])
                raise AlignmentError(f"element {blk.start + k} with vertices {x[k].tolist()} "
                                     "cuts the target box")
            out[blk] = inside
        return out


# ---------------------------------------------------------------------------
# functions

@dataclass(frozen=True, eq=False)
class FeFunction:
    """P1 function given by its interior coefficients (zero on the boundary)."""

    mesh: SimplicialMesh
    coeffs: np.ndarray

    def __post_init__(self):
        if self.coeffs.shape != (self.mesh.n_interior,):
            raise ValueError(f"expected {self.mesh.n_interior} coefficients, got {self.coeffs.shape}")

    def nodal(self) -> np.ndarray:
        """Values at all vertices (boundary values are 0)."""
        out = np.zeros(self.mesh.n_vertices)
        out[self.mesh.interior_vertices] = self.coeffs
        return out

    @classmethod
    def interpolate(cls, mesh: SimplicialMesh, f: Callable[[np.ndarray], np.ndarray]) -> "FeFunction":
        return cls(mesh, np.asarray(f(mesh.vertices[mesh.interior_vertices]), dtype=float))

    def __call__(self, points: np.ndarray) -> np.ndarray:
        return evaluate(self.mesh, self.nodal(), points)


def evaluate(mesh: SimplicialMesh, nodal: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Point evaluation by brute-force element search (small meshes only)."""
    pts = np.atleast_2d(points)
    x = mesh.vertices[mesh.elements]
    jac = np.stack([x[:, i] - x[:, 0] for i in range(1, mesh.dim + 1)], axis=-1)
    jinv = np.linalg.inv(jac)
    out = np.empty(pts.shape[0])
    for k, p in enumerate(pts):
        lam = np.einsum("eij,ej->ei", jinv, p - x[:, 0])
        bary = np.hstack([1 - lam.sum(axis=1, keepdims=True), lam])
        e = int(np.argmax(bary.min(axis=1)))
        if bary[e].min() < -1e-10:
            raise ValueError(f"point {p} outside the mesh")
        out[k] = bary[e] @ nodal[mesh.elements[e]]
    return out


# ---------------------------------------------------------------------------
# assembly kernels

@numba.njit(nogil=True, cache=True)
def _jacobian_inverse(x, e, d, jinv):
    """Fill ``jinv`` (rows = gradients of lambda_1..lambda_d); return |det J|."""
    if d == 1:
        det = x[e[1], 0] - x[e[0], 0]
        jinv[0, 0] = 1.0 / det
        return abs(det)
    if d == 2:
        a = x[e[1], 0] - x[e[0], 0]
        b = x[e[2], 0] - x[e[0], 0]
        c = x[e[1], 1] - x[e[0], 1]
        dd = x[e[2], 1] - x[e[0], 1]
        det = a * dd - b * c
        jinv[0, 0] = dd / det
        jinv[0, 1] = -b / det
        jinv[1, 0] = -c / det
        jinv[1, 1] = a / det
        return abs(det)
    m = np.empty((3, 3))
    for i in range(3):
        for j in range(3):
            m[i, j] = x[e[j + 1], i] - x[e[0], i]
    c00 = m[1, 1] * m[2, 2] - m[1, 2] * m[2, 1]
    c01 = m[1, 2] * m[2, 0] - m[1, 0] * m[2, 2]
    c02 = m[1, 0] * m[2, 1] - m[1, 1] * m[2, 0]
    det = m[0, 0] * c00 + m[0, 1] * c01 + m[0, 2] * c02
    jinv[0, 0] = c00 / det
    jinv[1, 0] = c01 / det
    jinv[2, 0] = c02 / det
    jinv[0, 1] = (m[0, 2] * m[2, 1] - m[0, 1] * m[2, 2]) / det
    jinv[1, 1] = (m[0, 0] * m[2, 2] - m[0, 2] * m[2, 0]) / det
    jinv[2, 1] = (m[0, 1] * m[2, 0] - m[0, 0] * m[2, 1]) / det
    jinv[0, 2] = (m[0, 1] * m[1, 2] - m[0, 2] * m[1, 1]) / det
    jinv[1, 2] = (m[0, 2] * m[1, 0] - m[0, 0] * m[1, 2]) / det
    jinv[2, 2] = (m[0, 0] * m[1, 1] - m[0, 1] * m[1, 0]) / det
    return abs(det)


@numba.njit(nogil=True, cache=True)
def _find(indptr, indices, row, col):
    lo = indptr[row]
    hi = indptr[row + 1] - 1
    while lo <= hi:
        mid = (lo + hi) // 2
        c = indices[mid]
        if c == col:
            return mid
        if c < col:
            lo = mid + 1
        else:
            hi = mid - 1
    return -1


@numba.njit(nogil=True, cache=True)
def _assemble(x, elements, iidx, indptr, indices, kvals, mvals, start, stop, fact):
    d = elements.shape[1] - 1
    jinv = np.zeros((d, d))
    grads = np.zeros((d + 1, d))
    mdiag = 2.0 / ((d + 1) * (d + 2))
    moff = 1.0 / ((d + 1) * (d + 2))
    bad = -1
    for el in range(start, stop):
        e = elements[el]
        det = _jacobian_inverse(x, e, d, jinv)
        vol = det / fact
        if not vol > 0.0:
            bad = el
            break
        for k in range(d):
            grads[0, k] = 0.0
        for i in range(d):
            for k in range(d):
                grads[i + 1, k] = jinv[i, k]
                grads[0, k] -= jinv[i, k]
        for a in range(d + 1):
            ra = iidx[e[a]]
            if ra < 0:
                continue
            for b in range(d + 1):
                cb = iidx[e[b]]
                if cb < 0:
                    continue
                g = 0.0
                for k in range(d):
                    g += grads[a, k] * grads[b, k]
                pos = _find(indptr, indices, ra, cb)
                kvals[pos] += vol * g
                mvals[pos] += vol * (mdiag if a == b else moff)
    return bad


@numba.njit(nogil=True, cache=True)
def _volumes(x, elements, fact):
    d = elements.shape[1] - 1
    jinv = np.zeros((d, d))
    out = np.empty(elements.shape[0])
    for el in range(elements.shape[0]):
        out[el] = _jacobian_inverse(x, elements[el], d, jinv) / fact
    return out


@numba.njit(cache=True)
def _fill_pattern(lo, hi, indptr, nlow, cols):
    # sorted unique edges (lo < hi) give every row its columns in ascending
    # order: lower neighbours, then the diagonal, then upper neighbours
    n = indptr.shape[0] - 1
    low_pos = indptr[:-1].copy()
    up_pos = np.empty(n, dtype=np.int64)
    for r in range(n):
        cols[indptr[r] + nlow[r]] = r
        up_pos[r] = indptr[r] + nlow[r] + 1
    for k in range(lo.shape[0]):
        a = lo[k]
        b = hi[k]
        cols[low_pos[b]] = a
        low_pos[b] += 1
        cols[up_pos[a]] = b
        up_pos[a] += 1


def _pattern(mesh: SimplicialMesh) -> tuple[np.ndarray, np.ndarray]:
    """CSR pattern over interior DOFs: vertex adjacency plus diagonal."""
    n = mesh.n_interior
    iidx = mesh.interior_index
    keys = []
    d = mesh.dim
    for blk in element_blocks(mesh.n_elements, 4 * (1 << 19)):
        el = iidx[mesh.elements[blk]]
        for i in range(d + 1):
            for j in range(i + 1, d + 1):
                a, b = el[:, i], el[:, j]
                ok = (a >= 0) & (b >= 0)
                lo = np.minimum(a[ok], b[ok])
                hi = np.maximum(a[ok], b[ok])
                keys.append(np.unique(lo * n + hi))
        keys = [np.unique(np.concatenate(keys))] if keys else []
    ekeys = keys[0] if keys else np.zeros(0, dtype=np.int64)
    del keys
    lo, hi = ekeys // n, ekeys % n
    del ekeys
    nlow = np.bincount(hi, minlength=n).astype(np.int64)
    deg = nlow + np.bincount(lo, minlength=n) + 1
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(deg, out=indptr[1:])
    cols = np.empty(int(indptr[-1]), dtype=np.int64)
    _fill_pattern(lo, hi, indptr, nlow, cols)
    return indptr, cols


@dataclass(frozen=True, eq=False)
class LumpedDiagonal:
    """Positive diagonal over interior DOFs plus its extended (all-vertex) form."""

    values: np.ndarray
    extended: np.ndarray
    weighted: bool = False

    def __post_init__(self):
        if not np.all(self.values > 0):
            raise ValueError("lumped diagonal must be strictly positive")

    def __len__(self):
        return self.values.shape[0]

    def apply(self, x):
        return self.values * x

    def solve(self, x):
        return x / self.values


@dataclass(frozen=True, eq=False)
class Assembly:
    mesh: SimplicialMesh
    K: CsrMatrix
    M: CsrMatrix
    D: LumpedDiagonal


def assemble(mesh: SimplicialMesh) -> Assembly:
    """Stiffness, mass and lumped mass in one sweep over the elements."""
    indptr, indices = _pattern(mesh)
    x = mesh.vertices
    el = mesh.elements
    iidx = mesh.interior_index
    nnz = indices.shape[0]
    fact = float(math.factorial(mesh.dim))

    # single pass in element order: the result must not depend on the worker count
    kv = np.zeros(nnz)
    mv = np.zeros(nnz)
    bad = _assemble(x, el, iidx, indptr, indices, kv, mv, 0, mesh.n_elements, fact)
    if bad >= 0:
        raise MeshError(f"degenerate element {bad}")
    n = mesh.n_interior
    K = CsrMatrix(indptr, indices, kv, (n, n), True)
    M = CsrMatrix(indptr, indices, mv, (n, n), True)
    return Assembly(mesh, K, M, assemble_lumped(mesh))


def assemble_stiffness(mesh: SimplicialMesh) -> CsrMatrix:
    return assemble(mesh).K


def assemble_mass(mesh: SimplicialMesh) -> CsrMatrix:
    return assemble(mesh).M


def element_volumes(mesh: SimplicialMesh) -> np.ndarray:
    return _volumes(mesh.vertices, mesh.elements, float(math.factorial(mesh.dim)))


def assemble_lumped(mesh: SimplicialMesh, weight: Optional[np.ndarray] = None) -> LumpedDiagonal:
    """Row sums of the full (boundary-inclusive) mass matrix, restricted to interior DOFs.

    With ``weight`` given (one positive value per element) the mass matrix is
    that of ``integral weight * phi_i * phi_j``.
    """
    vol = element_volumes(mesh)
    if weight is not None:
        weight = np.asarray(weight, dtype=float)
        if weight.shape != (mesh.n_elements,):
            raise ValueError("weight must have one entry per element")
        if not np.all(weight > 0):
            raise ValueError("element weights must be strictly positive")
        vol = vol * weight
    ext = _scatter(mesh, lambda blk: np.repeat((vol[blk] / (mesh.dim + 1))[:, None],
                                               mesh.dim + 1, axis=1))
    return LumpedDiagonal(ext[mesh.interior_vertices], ext, weight is not None)


def _scatter(mesh: SimplicialMesh, weights) -> np.ndarray:
    """Sum element-vertex contributions into a vertex array.

    ``weights(blk)`` returns an ``(nb, d+1)`` array for the element slice ``blk``.
    """
    ext = np.zeros(mesh.n_vertices)
    for blk in element_blocks(mesh.n_elements):
        w = weights(blk)
        el = mesh.elements[blk]
        for i in range(mesh.dim + 1):
            ext += np.bincount(el[:, i], weights=w[:, i], minlength=mesh.n_vertices)
    return ext


def assemble_load(mesh: SimplicialMesh, target: TargetField, order: int = 3,
                  extended: bool = False) -> np.ndarray:
    """Load vector ``integral y_d phi_i`` over interior DOFs.

    Element-wise constant targets are integrated exactly; others with a
    collapsed Gauss-Jacobi rule of ``order`` points per direction.
    """
    d = mesh.dim
    vol = element_volumes(mesh)
    if target.elementwise_constant:
        cv = target.element_values(mesh) * vol / (d + 1)
        ext = _scatter(mesh, lambda blk: np.repeat(cv[blk][:, None], d + 1, axis=1))
    else:
        bary, w = simplex_rule(d, order)
        xv = mesh.vertices

        def weights(blk):
            xe = xv[mesh.elements[blk]]
            out = np.zeros((xe.shape[0], d + 1))
            for lam, wq in zip(bary, w):
                f = target(np.einsum("i,eij->ej", lam, xe)) * vol[blk] * wq
                out += f[:, None] * lam[None, :]
            return out

        ext = _scatter(mesh, weights)
    return ext if extended else ext[mesh.interior_vertices]


# ---------------------------------------------------------------------------
# functionals

def _same_mesh(p: FeFunction, q: FeFunction):
    if p.mesh is not q.mesh:
        raise ValueError("functions live on different meshes")


def lumped_inner(p: FeFunction, q: FeFunction, D: Optional[LumpedDiagonal] = None) -> float:
    """``q^T lump(M) p``, i.e. the integral of the nodal interpolant of ``p*q``."""
    _same_mesh(p, q)
    if D is None:
        D = assemble_lumped(p.mesh)
    return dot(q.coeffs, D.values * p.coeffs)


def l2_inner(p: FeFunction, q: FeFunction, M: Optional[CsrMatrix] = None) -> float:
    _same_mesh(p, q)
    if M is None:
        M = assemble_mass(p.mesh)
    return dot(q.coeffs, M @ p.coeffs)


def h1_seminorm(p: FeFunction, K: Optional[CsrMatrix] = None) -> float:
    if K is None:
        K = assemble_stiffness(p.mesh)
    return math.sqrt(max(dot(p.coeffs, K @ p.coeffs), 0.0))


def element_errors_sq(y: FeFunction, target: TargetField, order: int = 4) -> np.ndarray:
    """Per-element ``||y_d - y||^2_{L2(tau_e)}``.

    Exact for element-wise constant targets (the integrand is quadratic);
    otherwise a Gauss-Jacobi rule with ``order`` points per direction.
    """
    mesh = y.mesh
    d = mesh.dim
    vol = element_volumes(mesh)
    nodal = y.nodal()
    out = np.zeros(mesh.n_elements)
    if target.elementwise_constant:
        c = target.element_values(mesh)
        for blk in element_blocks(mesh.n_elements):
            pv = nodal[mesh.elements[blk]]  # (nb, d+1)
            s1 = pv.sum(axis=1)
            s2 = np.sum(pv * pv, axis=1)
            int_pp = (s2 + s1 * s1) / ((d + 1) * (d + 2))
            cb = c[blk]
            out[blk] = vol[blk] * (cb * cb - 2.0 * cb * s1 / (d + 1) + int_pp)
        return np.maximum(out, 0.0)
    bary, w = simplex_rule(d, order)
    for blk in element_blocks(mesh.n_elements):
        pv = nodal[mesh.elements[blk]]
        xe = mesh.vertices[mesh.elements[blk]]
        acc = np.zeros(pv.shape[0])
        for lam, wq in zip(bary, w):
            diff = target(np.einsum("i,eij->ej", lam, xe)) - pv @ lam
            acc += wq * diff * diff
        out[blk] = acc * vol[blk]
    return out


def l2_error_vs_target(y: FeFunction, target: TargetField, order: int = 4) -> float:
    """``||y_d - y||_{L2(Omega)}``."""
    return math.sqrt(float(np.sum(element_errors_sq(y, target, order))))


def l2_norm(y: FeFunction) -> float:
    """``||y||_{L2}``, computed exactly."""
    return l2_error_vs_target(y, TargetField.zero())
