"""Legacy-ASCII VTK export of a solver state.

Layout: an ``UNSTRUCTURED_GRID`` in which every mesh element is split
into ``s**d`` sub-cells (``s`` = ``subdivisions``) sampled on its own
``(s + 1)**d`` points. Points are not shared between elements, so the
discontinuities of the dG fields survive. Cells are VTK hexahedra (type
12) in 3D and quads (type 9) in 2D. Point data: ``u`` (vectors), ``p``
and ``phi`` (scalars).
"""

from __future__ import annotations

import itertools
import os

import numpy as np

VTK_QUAD = 9
VTK_HEXAHEDRON = 12


def _reference_grid(dim: int, s: int) -> np.ndarray:
    """Sample points in ``[-1, 1]^dim``, first axis fastest."""
    t = np.linspace(-1.0, 1.0, s + 1)
    grids = np.meshgrid(*([t] * dim), indexing="ij")
    return np.stack([g.ravel(order="F") for g in grids], axis=-1)


def _local_cells(dim: int, s: int) -> np.ndarray:
    """Connectivity of the sub-cells in the local point numbering, in VTK vertex order."""
    n = s + 1

    def pid(*ijk):
        return sum(c * n**a for a, c in enumerate(ijk))

    cells = []
    for ijk in itertools.product(range(s), repeat=dim):
        i, j = ijk[0], ijk[1]
        if dim == 2:
            cells.append([pid(i, j), pid(i + 1, j), pid(i + 1, j + 1), pid(i, j + 1)])
        else:
            k = ijk[2]
            cells.append(
                [
                    pid(i, j, k),
                    pid(i + 1, j, k),
                    pid(i + 1, j + 1, k),
                    pid(i, j + 1, k),
                    pid(i, j, k + 1),
                    pid(i + 1, j, k + 1),
                    pid(i + 1, j + 1, k + 1),
                    pid(i, j + 1, k + 1),
                ]
            )
    return np.array(cells, dtype=int)


def sample_points(state, subdivisions: int = 1) -> np.ndarray:
    """Physical sample points ``(n_elements * (s+1)^d, dim)`` in file order."""
    mesh = state.u.space.mesh
    xi = _reference_grid(mesh.dim, subdivisions)
    half = 0.5 * mesh.spacing
    pts = mesh.element_lower[:, None, :] + (xi[None] + 1.0) * half
    return pts.reshape(-1, mesh.dim)


def export_fields(state, path, subdivisions: int = 1, title: str = "dg pressure-correction fields") -> None:
    """Write ``u``, ``p`` and ``phi`` of ``state`` to a legacy ASCII ``.vtk`` file."""
    if subdivisions < 1:
        raise ValueError("subdivisions must be >= 1")
    X = state.u.space
    mesh = X.mesh
    d = mesh.dim
    xi = _reference_grid(d, subdivisions)
    pts = sample_points(state, subdivisions)
    npe = xi.shape[0]
    u = state.u.evaluate_reference(xi)  # (d, ne, npe)
    u = u.transpose(1, 2, 0).reshape(-1, d)
    p = state.p.evaluate_reference(xi).ravel()
    phi = state.phi.evaluate_reference(xi).ravel()
    local = _local_cells(d, subdivisions)
    cells = (local[None, :, :] + npe * np.arange(mesh.n_elements)[:, None, None]).reshape(-1, local.shape[1])
    ctype = VTK_HEXAHEDRON if d == 3 else VTK_QUAD

    pts3 = np.zeros((pts.shape[0], 3))
    pts3[:, :d] = pts
    u3 = np.zeros((u.shape[0], 3))
    u3[:, :d] = u

    lines = ["# vtk DataFile Version 3.0", title[:255], "ASCII", "DATASET UNSTRUCTURED_GRID"]
    lines.append(f"POINTS {pts3.shape[0]} double")
    lines.extend(" ".join(f"{c:.10e}" for c in row) for row in pts3)
    nv = cells.shape[1]
    lines.append(f"CELLS {cells.shape[0]} {cells.shape[0] * (nv + 1)}")
    lines.extend(f"{nv} " + " ".join(map(str, row)) for row in cells)
    lines.append(f"CELL_TYPES {cells.shape[0]}")
    lines.extend([str(ctype)] * cells.shape[0])
    lines.append(f"POINT_DATA {pts3.shape[0]}")
    lines.append("VECTORS u double")
    lines.extend(" ".join(f"{c:.10e}" for c in row) for row in u3)
    for name, arr in (("p", p), ("phi", phi)):
        lines.append(f"SCALARS {name} double 1")
        lines.append("LOOKUP_TABLE default")
        lines.extend(f"{c:.10e}" for c in arr)
    parent = os.path.dirname(os.fspath(path))
    if parent:
        os.makedirs(parent, exist_ok=True)
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
