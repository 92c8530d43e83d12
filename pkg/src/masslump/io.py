"""File formats: legacy VTK, plain-text meshes, Matrix Market, CSV and JSON.

Plain-text mesh format::

    # masslump mesh
    dim <d> scale <s> level <l>
    vertices <nv>
    <integer lattice coordinates, one vertex per line>
    elements <ne>
    <type> <vertex indices in bisection order>

Physical coordinates are the lattice coordinates divided by ``scale``.
"""
from __future__ import annotations

import csv
import json
import math
from pathlib import Path
from typing import Iterable, Mapping, Optional

import numpy as np
import scipy.io
import scipy.sparse

from .mesh import SimplicialMesh
from .sparse import CsrMatrix

_VTK_CELL = {1: 3, 2: 5, 3: 10}  # line, triangle, tetrahedron


def write_vtk(path, mesh: SimplicialMesh, point_data: Optional[Mapping[str, np.ndarray]] = None,
              cell_data: Optional[Mapping[str, np.ndarray]] = None) -> Path:
    """Legacy ASCII unstructured grid. Point arrays have one value per vertex."""
    path = Path(path)
    x = np.zeros((mesh.n_vertices, 3))
    x[:, :mesh.dim] = mesh.vertices
    k = mesh.dim + 1
    lines = ["# vtk DataFile Version 3.0", "masslump", "ASCII", "DATASET UNSTRUCTURED_GRID",
             f"POINTS {mesh.n_vertices} double"]
    lines += [" ".join(repr(float(v)) for v in row) for row in x]
    lines.append(f"CELLS {mesh.n_elements} {mesh.n_elements * (k + 1)}")
    lines += [f"{k} " + " ".join(map(str, e)) for e in mesh.elements]
    lines.append(f"CELL_TYPES {mesh.n_elements}")
    lines += [str(_VTK_CELL[mesh.dim])] * mesh.n_elements
    for section, data, count in (("POINT_DATA", point_data, mesh.n_vertices),
                                 ("CELL_DATA", cell_data, mesh.n_elements)):
        if not data:
            continue
        lines.append(f"{section} {count}")
        for name, values in data.items():
            values = np.asarray(values, dtype=float)
            if values.shape != (count,):
                raise ValueError(f"{name}: expected {count} values, got {values.shape}")
            lines += [f"SCALARS {name} double 1", "LOOKUP_TABLE default"]
            lines += [repr(float(v)) for v in values]
    path.write_text("\n".join(lines) + "\n")
    return path


def write_mesh_text(path, mesh: SimplicialMesh) -> Path:
    path = Path(path)
    with path.open("w") as fh:
        fh.write("# masslump mesh\n")
        fh.write(f"dim {mesh.dim} scale {mesh.scale} level {mesh.level}\n")
        fh.write(f"vertices {mesh.n_vertices}\n")
        np.savetxt(fh, mesh.lattice, fmt="%d")
        fh.write(f"elements {mesh.n_elements}\n")
        np.savetxt(fh, np.column_stack([mesh.types, mesh.elements]), fmt="%d")
    return path


def read_mesh_text(path) -> SimplicialMesh:
    lines = [ln for ln in Path(path).read_text().splitlines() if ln and not ln.startswith("#")]
    head = lines[0].split()
    meta = dict(zip(head[::2], map(int, head[1::2])))
    nv = int(lines[1].split()[1])
    lattice = np.array([ln.split() for ln in lines[2:2 + nv]], dtype=np.int64).reshape(nv, meta["dim"])
    ne = int(lines[2 + nv].split()[1])
    rows = np.array([ln.split() for ln in lines[3 + nv:3 + nv + ne]], dtype=np.int64)
    rows = rows.reshape(ne, meta["dim"] + 2)
    return SimplicialMesh(meta["dim"], lattice, meta["scale"], rows[:, 1:].copy(),
                          rows[:, 0].astype(np.int8), meta["level"])


def write_matrix_market(path, a: CsrMatrix) -> Path:
    path = Path(path)
    m = scipy.sparse.csr_matrix((a.data, a.indices, a.indptr), shape=a.shape)
    scipy.io.mmwrite(str(path), m, symmetry="symmetric" if a.symmetric else "general")
    return path


def read_matrix_market(path) -> CsrMatrix:
    m = scipy.sparse.csr_matrix(scipy.io.mmread(str(path)))
    m.sort_indices()
    return CsrMatrix(m.indptr.astype(np.int64), m.indices.astype(np.int64), m.data.astype(float),
                     m.shape)


def write_vector_csv(path, values: Iterable[float], header: str = "value") -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", header])
        for i, v in enumerate(values):
            w.writerow([i, repr(float(v))])
    return path


RESULT_COLUMNS = ("level", "dofs", "error", "its", "seconds")


def write_results_csv(path, rows: Iterable[Mapping]) -> Path:
    """Rows with the columns ``level, dofs, error, its, seconds``.

    Floats are written with ``repr`` so reading the file back is exact.
    """
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(RESULT_COLUMNS)
        for r in rows:
            w.writerow([int(r["level"]), int(r["dofs"]), repr(float(r["error"])),
                        int(r["its"]), repr(float(r["seconds"]))])
    return path


def read_results_csv(path) -> list:
    out = []
    with Path(path).open(newline="") as fh:
        for r in csv.DictReader(fh):
            out.append({"level": int(r["level"]), "dofs": int(r["dofs"]),
                        "error": float(r["error"]), "its": int(r["its"]),
                        "seconds": float(r["seconds"])})
    return out


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def write_json(path, data) -> Path:
    path = Path(path)
    path.write_text(json.dumps(_jsonable(data), indent=2) + "\n")
    return path
