"""Structured Cartesian meshes of axis-aligned boxes.

Elements are numbered lexicographically with the first axis fastest,
``index = i0 + n0 * (i1 + n1 * i2)``, so the upper neighbour of an element
along any axis always has the larger index. Interior faces are oriented
along the positive axis direction: ``E1`` is the lower element, ``E2`` the
upper one, and the normal points from ``E1`` to ``E2``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional, Sequence, Union

import numpy as np


class MeshError(ValueError):
    """Raised for invalid mesh construction arguments or queries."""


@dataclass(frozen=True, eq=False)
class Element:
    index: int
    lower: np.ndarray
    upper: np.ndarray

    @property
    def h(self) -> float:
        """Diameter of the element (length of the box diagonal)."""
        return float(np.linalg.norm(self.upper - self.lower))

    @property
    def volume(self) -> float:
        return float(np.prod(self.upper - self.lower))


@dataclass(frozen=True, eq=False)
class Face:
    index: int
    elements: tuple
    axis: int
    normal: np.ndarray
    measure: float
    center: np.ndarray
    boundary: bool = False

    @property
    def h(self) -> float:
        d = self.normal.size
        return float(self.measure ** (1.0 / (d - 1)))


@dataclass(frozen=True, eq=False)
class Mesh:
    """Uniform Cartesian partition of ``[lower, upper]`` into boxes.

    All elements are congruent, which the assembly routines exploit: every
    reference table is shared by every element and by every face normal to
    the same axis.
    """

    dim: int
    lower: np.ndarray
    upper: np.ndarray
    cells: tuple
    elements: list = field(repr=False)
    interior_faces: list = field(repr=False)
    boundary_faces: list = field(repr=False)

    @property
    def n_elements(self) -> int:
        return len(self.elements)

    @cached_property
    def spacing(self) -> np.ndarray:
        return (self.upper - self.lower) / np.asarray(self.cells, dtype=float)

    @property
    def element_volume(self) -> float:
        return float(np.prod(self.spacing))

    @property
    def volume(self) -> float:
        return float(np.prod(self.upper - self.lower))

    @property
    def h(self) -> float:
        """Maximum element diameter."""
        return float(np.linalg.norm(self.spacing))

    @property
    def faces(self) -> list:
        return self.interior_faces + self.boundary_faces

    def face_measure(self, axis: int) -> float:
        return float(np.prod(np.delete(self.spacing, axis)))

    def face_h(self, axis: int) -> float:
        return self.face_measure(axis) ** (1.0 / (self.dim - 1))

    @cached_property
    def element_lower(self) -> np.ndarray:
        """Lower corners of all elements, shape ``(n_elements, dim)``."""
        idx = np.indices(self.cells[::-1]).reshape(self.dim, -1)[::-1].T
        return self.lower + idx * self.spacing

    def interior_pairs(self, axis: int) -> tuple[np.ndarray, np.ndarray]:
        """Element indices ``(E1, E2)`` of all interior faces normal to ``axis``."""
        return self._pairs[axis]

    def boundary_elements(self, axis: int, side: int) -> np.ndarray:
        """Elements touching the boundary face ``x_axis = lower`` (side 0) or ``upper`` (side 1)."""
        return self._boundary[axis][side]

    @cached_property
    def _grid(self) -> np.ndarray:
        # grid[i_{d-1}, ..., i_0] = element index
        return np.arange(self.n_elements).reshape(self.cells[::-1])

    @cached_property
    def _pairs(self) -> list:
        out = []
        for axis in range(self.dim):
            ax = self.dim - 1 - axis
            g = self._grid
            e1 = np.take(g, np.arange(self.cells[axis] - 1), axis=ax).ravel()
            e2 = np.take(g, np.arange(1, self.cells[axis]), axis=ax).ravel()
            order = np.argsort(e1, kind="stable")
            out.append((e1[order], e2[order]))
        return out

    @cached_property
    def _boundary(self) -> list:
        out = []
        for axis in range(self.dim):
            ax = self.dim - 1 - axis
            lo = np.sort(np.take(self._grid, 0, axis=ax).ravel())
            hi = np.sort(np.take(self._grid, self.cells[axis] - 1, axis=ax).ravel())
            out.append((lo, hi))
        return out


def build_mesh(
    lower: Union[Sequence[float], float],
    upper: Union[Sequence[float], float],
    cells: Union[Sequence[int], int],
    dim: Optional[int] = None,
) -> Mesh:
    """Build a uniform Cartesian mesh of the box ``[lower, upper]``.

    ``cells`` gives the number of elements per axis; scalars are broadcast
    to ``dim`` axes.
    """
    if dim is None:
        for arg in (lower, upper, cells):
            if np.ndim(arg) == 1:
                dim = len(arg)
                break
        else:
            raise MeshError("dim is required when box and cells are all scalars")
    if dim not in (2, 3):
        raise MeshError(f"dim must be 2 or 3, got {dim}")
    lo = np.broadcast_to(np.asarray(lower, dtype=float), (dim,)).copy()
    hi = np.broadcast_to(np.asarray(upper, dtype=float), (dim,)).copy()
    n = np.broadcast_to(np.asarray(cells), (dim,))
    if not np.all(np.isfinite(lo)) or not np.all(np.isfinite(hi)):
        raise MeshError("box corners must be finite")
    if np.any(hi <= lo):
        raise MeshError(f"degenerate box: lower={lo}, upper={hi}")
    if np.any(n != np.round(n)) or np.any(n < 1):
        raise MeshError(f"cells per axis must be positive integers, got {n}")
    cells_t = tuple(int(c) for c in n)

    mesh = Mesh(dim, lo, hi, cells_t, [], [], [])
    dx = mesh.spacing
    for e, corner in enumerate(mesh.element_lower):
        mesh.elements.append(Element(e, corner, corner + dx))

    eye = np.eye(dim)
    for axis in range(dim):
        e1, e2 = mesh.interior_pairs(axis)
        area = mesh.face_measure(axis)
        for a, b in zip(e1, e2):
            center = mesh.element_lower[a] + 0.5 * dx
            center[axis] += 0.5 * dx[axis]
            mesh.interior_faces.append(
                Face(len(mesh.interior_faces), (int(a), int(b)), axis, eye[axis].copy(), area, center)
            )
    n_int = len(mesh.interior_faces)
    for axis in range(dim):
        area = mesh.face_measure(axis)
        for side, sign in ((0, -1.0), (1, 1.0)):
            for a in mesh.boundary_elements(axis, side):
                center = mesh.element_lower[a] + 0.5 * dx
                center[axis] += sign * 0.5 * dx[axis]
                mesh.boundary_faces.append(
                    Face(
                        n_int + len(mesh.boundary_faces),
                        (int(a),),
                        axis,
                        sign * eye[axis],
                        area,
                        center,
                        boundary=True,
                    )
                )
    return mesh


def face_neighbors(mesh: Mesh, face: Union[Face, int]) -> tuple[int, Optional[int]]:
    """Return ``(E1, E2)`` for an interior face or ``(E, None)`` for a boundary face.

    Integer arguments index ``mesh.faces`` (interior faces first).
    """
    if not isinstance(face, Face):
        faces = mesh.faces
        if isinstance(face, bool) or not 0 <= int(face) < len(faces):
            raise MeshError(f"invalid face index {face!r}")
        face = faces[int(face)]
    if face.boundary:
        return face.elements[0], None
    return face.elements[0], face.elements[1]
