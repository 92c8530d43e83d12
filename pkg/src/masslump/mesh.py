"""Simplicial meshes of the unit hypercube with nested bisection refinement.

Vertices live on an integer lattice: coordinate = ``lattice / scale`` with
``scale`` a power of two, so midpoints, nestedness and boundary tests are exact.

Elements are stored as ordered vertex tuples ``[x0, ..., xd]`` together with a
type ``gamma`` in ``0..d-1``. The refinement edge is always ``(x0, xd)``.
Bisection of ``[x0, ..., xd]_gamma`` at the midpoint ``z`` gives::

    [x0, z, x1, ..., x_gamma, x_{gamma+1}, ..., x_{d-1}]_{gamma+1 mod d}
    [xd, z, x1, ..., x_gamma, x_{d-1}, ..., x_{gamma+1}]_{gamma+1 mod d}

Starting from a Kuhn triangulation (type 0, vertices ordered along the cube
path), this rule keeps meshes conforming under closure, produces finitely many
similarity classes, and ``d`` sweeps over all elements reproduce the Kuhn
triangulation of the halved grid.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Optional

import numpy as np

DEFAULT_VERTEX_BUDGET = 40_000_000
ELEMENT_BLOCK = 1 << 19  # elements per block in element-wise array passes


def element_blocks(n_elements: int, size: int = ELEMENT_BLOCK):
    """Consecutive slices covering ``range(n_elements)``; bounds peak memory."""
    for s in range(0, n_elements, size):
        yield slice(s, min(n_elements, s + size))


class MeshError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class SimplicialMesh:
    """Immutable conforming simplicial mesh of ``(0, 1)^dim``.

    Parameters
    ----------
    dim : int
        Spatial dimension, 1, 2 or 3.
    lattice : ndarray of int64, shape (nv, dim)
        Integer vertex coordinates; the physical point is ``lattice / scale``.
    scale : int
        Power-of-two denominator of the lattice.
    elements : ndarray of int64, shape (ne, dim + 1)
        Vertex indices in bisection order (refinement edge = first/last).
    types : ndarray of int8, shape (ne,)
        Bisection type of every element.
    level : int
        Refinement level; structured meshes start at 1.
    parent_of_vertex : ndarray of int64, shape (nv, 2)
        Endpoints of the edge a vertex bisects, ``-1`` for inherited vertices.
    n_parent_vertices : int
        Vertex count of the mesh this one was refined from (0 for a root mesh).
    kuhn : bool
        True when the mesh is the Kuhn triangulation of a tensor grid.
    """

    dim: int
    lattice: np.ndarray
    scale: int
    elements: np.ndarray
    types: np.ndarray
    level: int = 1
    parent_of_vertex: Optional[np.ndarray] = field(default=None, repr=False)
    n_parent_vertices: int = 0
    kuhn: bool = False

    def __post_init__(self):
        if self.dim not in (1, 2, 3):
            raise MeshError(f"dim must be 1, 2 or 3, got {self.dim}")
        if self.elements.shape[1] != self.dim + 1:
            raise MeshError("elements must have dim + 1 vertices")
        if self.parent_of_vertex is None:
            object.__setattr__(self, "parent_of_vertex",
                               np.full((self.n_vertices, 2), -1, dtype=np.int64))

    @property
    def n_vertices(self) -> int:
        return self.lattice.shape[0]

    @property
    def n_elements(self) -> int:
        return self.elements.shape[0]

    @cached_property
    def vertices(self) -> np.ndarray:
        return self.lattice / float(self.scale)

    @cached_property
    def boundary_vertex(self) -> np.ndarray:
        return np.any((self.lattice == 0) | (self.lattice == self.scale), axis=1)

    @cached_property
    def interior_index(self) -> np.ndarray:
        """Interior DOF number per vertex, ``-1`` on the boundary."""
        idx = np.full(self.n_vertices, -1, dtype=np.int64)
        inner = ~self.boundary_vertex
        idx[inner] = np.arange(int(inner.sum()))
        return idx

    @cached_property
    def interior_vertices(self) -> np.ndarray:
        return np.flatnonzero(~self.boundary_vertex)

    @property
    def n_interior(self) -> int:
        return int(self.interior_vertices.shape[0])

    @cached_property
    def volumes(self) -> np.ndarray:
        x = self.vertices
        out = np.empty(self.n_elements)
        for blk in element_blocks(self.n_elements):
            e = self.elements[blk]
            jac = np.stack([x[e[:, i]] - x[e[:, 0]] for i in range(1, self.dim + 1)], axis=-1)
            out[blk] = np.abs(np.linalg.det(jac))
        return out / math.factorial(self.dim)

    @cached_property
    def element_size(self) -> np.ndarray:
        """``(d! |tau|)^(1/d)``: the grid spacing for Kuhn simplices."""
        return (math.factorial(self.dim) * self.volumes) ** (1.0 / self.dim)

    @property
    def h(self) -> float:
        return float(self.element_size.max())

    @property
    def is_uniform(self) -> bool:
        hs = self.element_size
        return bool(np.all(np.abs(hs - hs[0]) <= 1e-12 * hs[0]))

    def vertex_keys(self) -> np.ndarray:
        return _lattice_keys(self.lattice, self.scale)

    def edges(self) -> np.ndarray:
        """Unique sorted vertex pairs of all element edges."""
        pairs = [self.elements[:, [i, j]] for i, j in itertools.combinations(range(self.dim + 1), 2)]
        e = np.sort(np.concatenate(pairs), axis=1)
        return np.unique(e, axis=0)

    def is_refinement_of(self, coarse: "SimplicialMesh") -> bool:
        n = coarse.n_vertices
        if self.n_vertices < n or self.dim != coarse.dim:
            return False
        ratio = self.scale // coarse.scale if self.scale >= coarse.scale else 0
        if ratio == 0 or ratio * coarse.scale != self.scale:
            return False
        return bool(np.array_equal(self.lattice[:n], coarse.lattice * ratio))


def _lattice_keys(lattice: np.ndarray, scale: int) -> np.ndarray:
    base = scale + 1
    d = lattice.shape[1]
    if base ** d >= 2 ** 62:
        raise MeshError("lattice too fine for integer vertex keys")
    key = np.zeros(lattice.shape[0], dtype=np.int64)
    for i in range(d):
        key = key * base + lattice[:, i]
    return key


def _kuhn_paths(dim: int) -> np.ndarray:
    """Lattice offsets of the ``dim!`` Kuhn simplices of the unit cube."""
    out = []
    for perm in itertools.permutations(range(dim)):
        pts = [np.zeros(dim, dtype=np.int64)]
        for axis in perm:
            nxt = pts[-1].copy()
            nxt[axis] += 1
            pts.append(nxt)
        out.append(np.array(pts))
    return np.array(out)


def build_structured(dim: int, level: int, max_vertices: int = DEFAULT_VERTEX_BUDGET) -> SimplicialMesh:
    """Kuhn triangulation of ``(0,1)^dim`` with spacing ``2**-(level+1)``."""
    if dim not in (1, 2, 3):
        raise MeshError(f"dim must be 1, 2 or 3, got {dim}")
    if level < 1:
        raise MeshError("level must be >= 1")
    n = 2 ** (level + 1)
    nv = (n + 1) ** dim
    if nv > max_vertices:
        raise MeshError(f"level {level} in {dim}D needs {nv} vertices, budget is {max_vertices}")
    axes = [np.arange(n + 1, dtype=np.int64)] * dim
    lattice = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, dim)
    strides = np.array([(n + 1) ** (dim - 1 - i) for i in range(dim)], dtype=np.int64)
    cells = np.stack(np.meshgrid(*[np.arange(n, dtype=np.int64)] * dim, indexing="ij"),
                     axis=-1).reshape(-1, dim)
    corner = cells @ strides
    paths = _kuhn_paths(dim) @ strides  # (d!, d+1)
    elements = (corner[:, None, None] + paths[None, :, :]).reshape(-1, dim + 1)
    types = np.zeros(elements.shape[0], dtype=np.int8)
    return SimplicialMesh(dim, lattice, n, elements, types, level, kuhn=True)


def element_geometry(mesh: SimplicialMesh, e: int) -> tuple[float, np.ndarray]:
    """Volume and barycentric gradients (shape ``(d+1, d)``) of element ``e``."""
    if not 0 <= e < mesh.n_elements:
        raise IndexError(f"element index {e} out of range")
    x = mesh.vertices[mesh.elements[e]]
    jac = (x[1:] - x[0]).T
    det = np.linalg.det(jac)
    vol = abs(det) / math.factorial(mesh.dim)
    if vol <= 1e-300 or abs(det) <= 1e-14 * np.abs(jac).max() ** mesh.dim:
        raise MeshError(f"degenerate element {e}")
    ginv = np.linalg.inv(jac)  # rows: gradients of lambda_1..lambda_d
    grads = np.vstack([-ginv.sum(axis=0), ginv])
    return vol, grads


class _Builder:
    """Mutable working state for a sequence of bisections."""

    def __init__(self, mesh: SimplicialMesh):
        self.dim = mesh.dim
        self.scale = mesh.scale
        self.lattice = mesh.lattice.copy()
        self.elements = mesh.elements.copy()
        self.types = mesh.types.copy()
        self.parents = [mesh.parent_of_vertex.copy()]
        self.n_start = mesh.n_vertices
        self._keys_sorted = None

    def _double(self):
        self.lattice *= 2
        self.scale *= 2
        self._keys_sorted = None

    def _vertex_lookup(self):
        if self._keys_sorted is None:
            keys = _lattice_keys(self.lattice, self.scale)
            order = np.argsort(keys, kind="stable")
            self._keys_sorted = (keys[order], order)
        return self._keys_sorted

    def _find(self, pts: np.ndarray) -> np.ndarray:
        keys, order = self._vertex_lookup()
        q = _lattice_keys(pts, self.scale)
        pos = np.minimum(np.searchsorted(keys, q), len(keys) - 1)
        return np.where(keys[pos] == q, order[pos], -1)

    def bisect(self, idx: np.ndarray) -> None:
        if idx.size == 0:
            return
        d = self.dim
        el = self.elements[idx]
        a, b = el[:, 0], el[:, d]
        s = self.lattice[a] + self.lattice[b]
        if np.any(s % 2):
            self._double()
            s = self.lattice[a] + self.lattice[b]
        mid = s // 2
        found = self._find(mid)
        z = found.copy()
        new = found < 0
        if np.any(new):
            keys = _lattice_keys(mid[new], self.scale)
            ukeys, first, inv = np.unique(keys, return_index=True, return_inverse=True)
            start = self.lattice.shape[0]
            self.lattice = np.vstack([self.lattice, mid[new][first]])
            pe = np.sort(np.stack([a[new][first], b[new][first]], axis=1), axis=1)
            self.parents.append(pe)
            z[new] = start + inv.ravel()
            self._keys_sorted = None
        g = self.types[idx].astype(np.int64)
        kids1 = np.empty_like(el)
        kids2 = np.empty_like(el)
        for gamma in range(d):
            sel = g == gamma
            if not np.any(sel):
                continue
            e = el[sel]
            zz = z[sel][:, None]
            mid_part = e[:, 1:gamma + 1]
            tail = e[:, gamma + 1:d]
            kids1[sel] = np.hstack([e[:, :1], zz, mid_part, tail])
            kids2[sel] = np.hstack([e[:, d:d + 1], zz, mid_part, tail[:, ::-1]])
        newtype = ((g + 1) % d).astype(np.int8)
        self.elements[idx] = kids1
        self.types[idx] = newtype
        self.elements = np.vstack([self.elements, kids2])
        self.types = np.concatenate([self.types, newtype])

    def hanging(self) -> np.ndarray:
        """Indices of elements with a vertex sitting on the midpoint of an edge."""
        d = self.dim
        hit = np.zeros(self.elements.shape[0], dtype=bool)
        for i, j in itertools.combinations(range(d + 1), 2):
            s = self.lattice[self.elements[:, i]] + self.lattice[self.elements[:, j]]
            even = ~np.any(s % 2, axis=1)
            if not np.any(even):
                continue
            cand = np.flatnonzero(even)
            hit[cand[self._find(s[cand] // 2) >= 0]] = True
        return np.flatnonzero(hit)

    def close(self, max_rounds: int) -> None:
        for _ in range(max_rounds):
            bad = self.hanging()
            if bad.size == 0:
                return
            self.bisect(bad)
        raise MeshError("conforming closure did not terminate within the generation bound")

    def finish(self, level: int, n_parent: int) -> SimplicialMesh:
        lattice, scale = self.lattice, self.scale
        while scale > 1 and not np.any(lattice % 2):
            lattice = lattice // 2
            scale //= 2
        parents = np.vstack(self.parents)
        return SimplicialMesh(self.dim, lattice, scale, self.elements, self.types,
                              level, parents, n_parent)


def refine_uniform(mesh: SimplicialMesh, max_vertices: int = DEFAULT_VERTEX_BUDGET) -> SimplicialMesh:
    """Split every element into ``2**d`` children; h halves.

    Kuhn meshes are refined by :func:`refine_kuhn` (red refinement with the
    diagonal along the cube path), any other mesh by ``d`` bisection sweeps.
    """
    if mesh.kuhn:
        return refine_kuhn(mesh, max_vertices)
    return refine_bisection(mesh, max_vertices)


def refine_bisection(mesh: SimplicialMesh, max_vertices: int = DEFAULT_VERTEX_BUDGET) -> SimplicialMesh:
    """``d`` sweeps of bisection over all elements."""
    est = mesh.n_vertices * 2 ** mesh.dim
    if est > max_vertices * 2:
        raise MeshError(f"uniform refinement would exceed the vertex budget ({max_vertices})")
    b = _Builder(mesh)
    for _ in range(mesh.dim):
        b.bisect(np.arange(b.elements.shape[0]))
    out = b.finish(mesh.level + 1, mesh.n_vertices)
    if out.n_vertices > max_vertices:
        raise MeshError(f"refined mesh has {out.n_vertices} vertices, budget is {max_vertices}")
    return out


def refine_kuhn(mesh: SimplicialMesh, max_vertices: int = DEFAULT_VERTEX_BUDGET) -> SimplicialMesh:
    """Kuhn triangulation of the halved grid, nested in a Kuhn mesh.

    Every Kuhn simplex is a union of Kuhn simplices of the halved grid, so the
    result is a refinement of ``mesh``. Coarse vertices keep their numbers and
    every new vertex records the coarse edge it bisects.
    """
    d = mesh.dim
    n = mesh.scale
    if not mesh.kuhn:
        raise MeshError("refine_kuhn needs a structured Kuhn mesh")
    if n != 2 ** (mesh.level + 1):
        raise MeshError("mesh level and lattice scale disagree")
    fine = build_structured(d, mesh.level + 1, max_vertices)
    fkeys = fine.vertex_keys()  # lexicographic, hence sorted
    coarse_pos = np.searchsorted(fkeys, _lattice_keys(mesh.lattice * 2, 2 * n))
    is_new = np.ones(fine.n_vertices, dtype=bool)
    is_new[coarse_pos] = False
    new_pos = np.flatnonzero(is_new)
    order = np.concatenate([coarse_pos, new_pos])
    renumber = np.empty(fine.n_vertices, dtype=np.int64)
    renumber[order] = np.arange(fine.n_vertices)
    lattice = fine.lattice[order]
    # a new vertex bisects the coarse edge spanned along its odd coordinates
    nl = lattice[mesh.n_vertices:]
    odd = nl % 2
    ends = np.stack([nl - odd, nl + odd], axis=1)
    ckeys = mesh.vertex_keys()
    corder = np.argsort(ckeys)
    parents = np.full((fine.n_vertices, 2), -1, dtype=np.int64)
    for k in range(2):
        pos = np.searchsorted(ckeys[corder], _lattice_keys(ends[:, k] // 2, n))
        parents[mesh.n_vertices:, k] = corder[pos]
    parents[mesh.n_vertices:] = np.sort(parents[mesh.n_vertices:], axis=1)
    elements = fine.elements
    for blk in element_blocks(elements.shape[0]):
        elements[blk] = renumber[elements[blk]]
    return SimplicialMesh(d, lattice, fine.scale, elements, fine.types,
                          fine.level, parents, mesh.n_vertices, kuhn=True)


def bisect(mesh: SimplicialMesh, marked: Iterable[int], max_rounds: Optional[int] = None) -> SimplicialMesh:
    """Bisect the marked elements once and close the mesh conformingly."""
    marked = np.unique(np.asarray(list(marked) if not isinstance(marked, np.ndarray) else marked,
                                  dtype=np.int64))
    if marked.size == 0:
        raise MeshError("no elements marked")
    if marked[0] < 0 or marked[-1] >= mesh.n_elements:
        raise MeshError("marked element index out of range")
    b = _Builder(mesh)
    b.bisect(marked)
    if max_rounds is None:
        max_rounds = 64 * mesh.dim
    b.close(max_rounds)
    return b.finish(mesh.level + 1, mesh.n_vertices)


@dataclass
class MeshHierarchy:
    meshes: list
    nested: bool = True

    @classmethod
    def uniform(cls, dim: int, levels: int, max_vertices: int = DEFAULT_VERTEX_BUDGET,
                scheme: str = "kuhn") -> "MeshHierarchy":
        """Nested uniform hierarchy starting from the level-1 Kuhn mesh.

        ``scheme="kuhn"`` keeps the Kuhn triangulation on every level;
        ``scheme="bisection"`` applies ``d`` bisection sweeps per level.
        """
        step = {"kuhn": refine_kuhn, "bisection": refine_bisection}.get(scheme)
        if step is None:
            raise ValueError(f"unknown refinement scheme {scheme!r}")
        meshes = [build_structured(dim, 1, max_vertices)]
        for _ in range(levels - 1):
            meshes.append(step(meshes[-1], max_vertices))
        return cls(meshes, True)

    def __getitem__(self, i):
        return self.meshes[i]

    def __len__(self):
        return len(self.meshes)


def conformity_defects(mesh: SimplicialMesh) -> int:
    """Number of hanging-node incidences (0 for a conforming mesh)."""
    return int(_Builder(mesh).hanging().size)


def facet_census(mesh: SimplicialMesh) -> tuple[int, int]:
    """(interior facets shared by more than two elements, unmatched facets off the boundary)."""
    d = mesh.dim
    facets = np.sort(np.concatenate([np.delete(mesh.elements, i, axis=1) for i in range(d + 1)]), axis=1)
    uniq, counts = np.unique(facets, axis=0, return_counts=True)
    over = int(np.sum(counts > 2))
    single = uniq[counts == 1]
    lat = mesh.lattice[single]  # (nf, d, dim)
    on_bdry = np.zeros(single.shape[0], dtype=bool)
    for ax in range(mesh.dim):
        c = lat[:, :, ax]
        on_bdry |= np.all(c == 0, axis=1) | np.all(c == mesh.scale, axis=1)
    return over, int(np.sum(~on_bdry))


def min_angle(mesh: SimplicialMesh) -> float:
    """Smallest interior angle (2D) or smallest dihedral-type quality (3D), radians."""
    x = mesh.vertices[mesh.elements]
    if mesh.dim == 1:
        return math.pi
    if mesh.dim == 2:
        best = np.inf
        for i in range(3):
            u = x[:, (i + 1) % 3] - x[:, i]
            v = x[:, (i + 2) % 3] - x[:, i]
            c = np.sum(u * v, axis=1) / np.linalg.norm(u, axis=1) / np.linalg.norm(v, axis=1)
            best = min(best, float(np.arccos(np.clip(c, -1, 1)).min()))
        return best
    # 3D: dihedral angles from facet normals
    normals = []
    for i in range(4):
        f = [j for j in range(4) if j != i]
        n = np.cross(x[:, f[1]] - x[:, f[0]], x[:, f[2]] - x[:, f[0]])
        side = np.sum(n * (x[:, i] - x[:, f[0]]), axis=1)
        n = n * -np.sign(side)[:, None]
        normals.append(n / np.linalg.norm(n, axis=1)[:, None])
    best = np.inf
    for i, j in itertools.combinations(range(4), 2):
        c = -np.sum(normals[i] * normals[j], axis=1)
        best = min(best, float(np.arccos(np.clip(c, -1, 1)).min()))
    return best
