"""Modal dG spaces on Cartesian meshes.

The local basis is the tensor-product Legendre family filtered to total
degree ``<= k`` and scaled to be L2-orthonormal on each physical element,
so every element mass matrix is the identity. Coefficient arrays are
element-major and basis-minor: scalar fields have shape
``(n_elements, n_basis)``, vector fields ``(dim, n_elements, n_basis)``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from functools import cached_property
from math import comb
from typing import Callable, Optional, Sequence, Union

import numpy as np
from numpy.polynomial import legendre

from dgpc.mesh import Mesh


@dataclass(frozen=True)
class QuadratureRule:
    """Tensor Gauss-Legendre rule on ``[-1, 1]^dim``."""

    nodes: np.ndarray  # (n_points, dim)
    weights: np.ndarray  # (n_points,)
    points_per_axis: int

    @property
    def exactness(self) -> int:
        return 2 * self.points_per_axis - 1

    @classmethod
    def gauss_legendre(cls, points_per_axis: int, dim: int) -> "QuadratureRule":
        if points_per_axis < 1:
            raise ValueError("points_per_axis must be >= 1")
        x, w = legendre.leggauss(points_per_axis)
        if dim == 0:
            return cls(np.zeros((1, 0)), np.ones(1), points_per_axis)
        grids = np.meshgrid(*([x] * dim), indexing="ij")
        wgrids = np.meshgrid(*([w] * dim), indexing="ij")
        nodes = np.stack([g.ravel() for g in grids], axis=-1)
        weights = np.prod(np.stack([g.ravel() for g in wgrids], axis=-1), axis=-1)
        return cls(nodes, weights, points_per_axis)


def total_degree_indices(dim: int, degree: int) -> list:
    """Multi-indices with total degree ``<= degree``, ordered by degree then lexicographically."""
    idx = [a for a in itertools.product(range(degree + 1), repeat=dim) if sum(a) <= degree]
    return sorted(idx, key=lambda a: (sum(a), tuple(-ai for ai in a)))


class PolynomialBasis:
    """Orthonormal Legendre basis of total degree ``<= degree`` on ``[-1, 1]^dim``."""

    def __init__(self, dim: int, degree: int):
        if degree < 0:
            raise ValueError("degree must be non-negative")
        self.dim = dim
        self.degree = degree
        self.indices = np.array(total_degree_indices(dim, degree), dtype=int)
        assert len(self.indices) == comb(degree + dim, dim)

    @property
    def size(self) -> int:
        return len(self.indices)

    def _axis_tables(self, x: np.ndarray):
        # values and derivatives of normalised Legendre polynomials, shape (degree+1, n)
        k = self.degree
        vals = np.empty((k + 1, x.size))
        ders = np.empty((k + 1, x.size))
        for n in range(k + 1):
            c = np.zeros(n + 1)
            c[n] = np.sqrt((2 * n + 1) / 2.0)
            vals[n] = legendre.legval(x, c)
            ders[n] = legendre.legval(x, legendre.legder(c)) if n > 0 else 0.0
        return vals, ders

    def evaluate(self, xi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Values ``(n_points, size)`` and gradients ``(dim, n_points, size)`` at reference points."""
        xi = np.atleast_2d(xi)
        tabs = [self._axis_tables(xi[:, a]) for a in range(self.dim)]
        values = np.ones((xi.shape[0], self.size))
        for a in range(self.dim):
            values *= tabs[a][0][self.indices[:, a]].T
        grads = np.ones((self.dim, xi.shape[0], self.size))
        for g in range(self.dim):
            for a in range(self.dim):
                table = tabs[a][1] if a == g else tabs[a][0]
                grads[g] *= table[self.indices[:, a]].T
        return values, grads


class DgSpace:
    """Broken polynomial space of degree ``degree`` on ``mesh``.

    Holds physical-element evaluation tables. Because all elements are
    congruent the tables are shared: ``values`` has shape ``(n_q, n_basis)``
    and physical quadrature weights already include the Jacobian.
    """

    def __init__(self, mesh: Mesh, degree: int, quad_points: Optional[int] = None):
        self.mesh = mesh
        self.dim = mesh.dim
        self.degree = degree
        self.basis = PolynomialBasis(mesh.dim, degree)
        self.quad_points = quad_points if quad_points is not None else degree + 2
        self.rule = QuadratureRule.gauss_legendre(self.quad_points, mesh.dim)
        self.face_rule = QuadratureRule.gauss_legendre(self.quad_points, mesh.dim - 1)

        half = 0.5 * mesh.spacing
        self.jacobian = float(np.prod(half))
        scale = 1.0 / np.sqrt(self.jacobian)
        v, g = self.basis.evaluate(self.rule.nodes)
        self.values = v * scale
        self.grads = g * scale / half[:, None, None]
        self.weights = self.rule.weights * self.jacobian

    @property
    def n_basis(self) -> int:
        return self.basis.size

    @property
    def n_elements(self) -> int:
        return self.mesh.n_elements

    @property
    def n_dofs(self) -> int:
        return self.n_elements * self.n_basis

    def dof(self, element, basis_index, component=0):
        """Global index of (component, element, basis function)."""
        return (component * self.n_elements + np.asarray(element)) * self.n_basis + basis_index

    def quad_points_physical(self, rule: Optional[QuadratureRule] = None) -> np.ndarray:
        """Physical coordinates ``(n_elements, n_q, dim)`` of the volume nodes."""
        rule = rule or self.rule
        half = 0.5 * self.mesh.spacing
        return self.mesh.element_lower[:, None, :] + (rule.nodes[None, :, :] + 1.0) * half

    def tables(self, rule: QuadratureRule) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Physical values, gradients and weights for an arbitrary volume rule."""
        half = 0.5 * self.mesh.spacing
        scale = 1.0 / np.sqrt(self.jacobian)
        v, g = self.basis.evaluate(rule.nodes)
        return v * scale, g * scale / half[:, None, None], rule.weights * self.jacobian

    @cached_property
    def face_tables(self) -> list:
        """Per axis: dict with traces on the lower (side 0) and upper (side 1) face.

        Entries: ``values[side]`` ``(n_fq, n_basis)``, ``grads[side]``
        ``(dim, n_fq, n_basis)``, ``weights`` ``(n_fq,)``, ``nodes``
        ``(n_fq, dim)`` reference nodes of the side-0 face.
        """
        d = self.dim
        half = 0.5 * self.mesh.spacing
        scale = 1.0 / np.sqrt(self.jacobian)
        out = []
        for axis in range(d):
            tang = [a for a in range(d) if a != axis]
            values, grads = [], []
            for side in (0, 1):
                xi = np.empty((self.face_rule.nodes.shape[0], d))
                xi[:, tang] = self.face_rule.nodes
                xi[:, axis] = -1.0 if side == 0 else 1.0
                v, g = self.basis.evaluate(xi)
                values.append(v * scale)
                grads.append(g * scale / half[:, None, None])
                if side == 0:
                    nodes = xi.copy()
            weights = self.face_rule.weights * float(np.prod(half[tang]))
            out.append(dict(values=values, grads=grads, weights=weights, nodes=nodes, tangential=tang))
        return out

    def face_points_physical(self, axis: int, side: int, elements: np.ndarray) -> np.ndarray:
        """Physical coordinates ``(n_faces, n_fq, dim)`` of nodes on a face of ``elements``."""
        half = 0.5 * self.mesh.spacing
        xi = self.face_tables[axis]["nodes"].copy()
        xi[:, axis] = -1.0 if side == 0 else 1.0
        return self.mesh.element_lower[elements][:, None, :] + (xi[None] + 1.0) * half

    def element_average_vector(self) -> np.ndarray:
        """Coefficient vector ``c`` with ``c @ q = integral of q`` over the domain."""
        c = np.zeros((self.n_elements, self.n_basis))
        c[:, 0] = np.sqrt(self.mesh.element_volume)
        return c.ravel()

    def project_zero_mean(self, coeffs: np.ndarray) -> np.ndarray:
        """L2-orthogonal projection of a scalar coefficient vector onto zero-mean fields."""
        c = self.element_average_vector()
        flat = np.asarray(coeffs, dtype=float).ravel()
        return (flat - c * (c @ flat) / (c @ c)).reshape(np.shape(coeffs))


@dataclass
class DgScalarField:
    space: DgSpace
    coeffs: np.ndarray  # (n_elements, n_basis)

    def __post_init__(self):
        self.coeffs = np.asarray(self.coeffs, dtype=float).reshape(self.space.n_elements, self.space.n_basis)

    @classmethod
    def zeros(cls, space: DgSpace) -> "DgScalarField":
        return cls(space, np.zeros((space.n_elements, space.n_basis)))

    @property
    def flat(self) -> np.ndarray:
        return self.coeffs.ravel()

    def integral(self) -> float:
        return float(self.space.element_average_vector() @ self.flat)

    def evaluate_reference(self, xi: np.ndarray) -> np.ndarray:
        """Values ``(n_elements, n_points)`` at reference points of every element."""
        v, _ = self.space.basis.evaluate(xi)
        return self.coeffs @ (v / np.sqrt(self.space.jacobian)).T


@dataclass
class DgVectorField:
    space: DgSpace
    coeffs: np.ndarray  # (dim, n_elements, n_basis)

    def __post_init__(self):
        s = self.space
        self.coeffs = np.asarray(self.coeffs, dtype=float).reshape(s.dim, s.n_elements, s.n_basis)

    @classmethod
    def zeros(cls, space: DgSpace) -> "DgVectorField":
        return cls(space, np.zeros((space.dim, space.n_elements, space.n_basis)))

    @property
    def flat(self) -> np.ndarray:
        return self.coeffs.ravel()

    def evaluate_reference(self, xi: np.ndarray) -> np.ndarray:
        """Values ``(dim, n_elements, n_points)`` at reference points of every element."""
        v, _ = self.space.basis.evaluate(xi)
        return self.coeffs @ (v / np.sqrt(self.space.jacobian)).T


Field = Union[DgScalarField, DgVectorField]


def _as_space(space_or_mesh, degree, quad_points) -> DgSpace:
    if isinstance(space_or_mesh, DgSpace):
        return space_or_mesh
    return DgSpace(space_or_mesh, degree, quad_points)


def l2_project(
    space_or_mesh: Union[DgSpace, Mesh],
    function: Callable[[np.ndarray], np.ndarray],
    degree: Optional[int] = None,
    quad_points: Optional[int] = None,
) -> Field:
    """Local L2 projection of ``function`` onto the broken space.

    ``function`` maps points ``(n, dim)`` to values ``(n,)`` or ``(n, dim)``;
    a vector output gives a :class:`DgVectorField`.
    """
    space = _as_space(space_or_mesh, degree, quad_points)
    pts = space.quad_points_physical()
    ne, nq, d = pts.shape
    vals = np.asarray(function(pts.reshape(-1, d)), dtype=float)
    wv = space.values * space.weights[:, None]
    if vals.ndim == 1:
        return DgScalarField(space, vals.reshape(ne, nq) @ wv)
    vals = vals.reshape(ne, nq, d).transpose(2, 0, 1)
    return DgVectorField(space, vals @ wv)


def l2_error(field: Field, exact: Callable[[np.ndarray], np.ndarray], quad_points: Optional[int] = None) -> float:
    """Quadrature approximation of ``||field - exact||_{L2(domain)}``.

    The default rule has ``degree + 3`` points per axis (exact to degree
    ``2 * degree + 5``).
    """
    space = field.space
    q = quad_points if quad_points is not None else space.degree + 3
    rule = QuadratureRule.gauss_legendre(q, space.dim)
    values, _, weights = space.tables(rule)
    pts = space.quad_points_physical(rule)
    ne, nq, d = pts.shape
    ex = np.asarray(exact(pts.reshape(-1, d)), dtype=float)
    if isinstance(field, DgScalarField):
        diff = field.coeffs @ values.T - ex.reshape(ne, nq)
        return float(np.sqrt(np.sum(diff**2 * weights)))
    diff = field.coeffs @ values.T - ex.reshape(ne, nq, d).transpose(2, 0, 1)
    return float(np.sqrt(np.sum(diff**2 * weights)))


def _penalties(sigma) -> tuple[float, float]:
    if np.ndim(sigma) == 0:
        s_int = s_bdry = float(sigma)
    else:
        s_int, s_bdry = (float(s) for s in sigma)
    if s_int <= 0 or s_bdry <= 0:
        raise ValueError(f"penalty parameters must be positive, got {sigma!r}")
    return s_int, s_bdry


def _broken_gradient_sq(space: DgSpace, coeffs: np.ndarray) -> float:
    # coeffs (..., n_elements, n_basis)
    total = 0.0
    for g in range(space.dim):
        vals = coeffs @ space.grads[g].T
        total += float(np.sum(vals**2 * space.weights))
    return total


def _jump_sq(space: DgSpace, coeffs: np.ndarray, sigma_int: float, sigma_bdry: Optional[float]) -> float:
    mesh = space.mesh
    total = 0.0
    for axis in range(space.dim):
        ft = space.face_tables[axis]
        h_e = mesh.face_h(axis)
        e1, e2 = mesh.interior_pairs(axis)
        if e1.size:
            jump = coeffs[..., e1, :] @ ft["values"][1].T - coeffs[..., e2, :] @ ft["values"][0].T
            total += sigma_int / h_e * float(np.sum(jump**2 * ft["weights"]))
        if sigma_bdry is not None:
            for side in (0, 1):
                tr = coeffs[..., mesh.boundary_elements(axis, side), :] @ ft["values"][side].T
                total += sigma_bdry / h_e * float(np.sum(tr**2 * ft["weights"]))
    return total


def dg_norm_velocity(field: DgVectorField, sigma) -> float:
    """Energy norm: broken H1 seminorm plus ``sigma / h_e`` jumps on all faces.

    ``sigma`` is a scalar or an ``(interior, boundary)`` pair.
    """
    s_int, s_bdry = _penalties(sigma)
    space = field.space
    sq = _broken_gradient_sq(space, field.coeffs) + _jump_sq(space, field.coeffs, s_int, s_bdry)
    return float(np.sqrt(sq))


def dg_seminorm_scalar(field: DgScalarField, sigma_tilde: float) -> float:
    """Energy seminorm on scalar fields; jump terms over interior faces only."""
    s, _ = _penalties(sigma_tilde)
    space = field.space
    sq = _broken_gradient_sq(space, field.coeffs) + _jump_sq(space, field.coeffs, s, None)
    return float(np.sqrt(sq))


def dg_error_velocity(field: DgVectorField, exact: Callable[[np.ndarray], np.ndarray], sigma, fd_step: float = 1e-6) -> float:
    """``||field - exact||_DG`` for a continuous ``exact`` velocity.

    The exact gradient is approximated by central differences with relative
    step ``fd_step`` (error of order ``fd_step**2``). Interior jumps of the
    exact field vanish, so only the boundary mismatch involves ``exact``.
    """
    s_int, s_bdry = _penalties(sigma)
    space = field.space
    mesh = space.mesh
    d = space.dim
    pts = space.quad_points_physical().reshape(-1, d)
    ne, nq = space.n_elements, space.weights.size
    step = fd_step * float(np.max(mesh.upper - mesh.lower))
    grad_sq = 0.0
    for g in range(d):
        shift = np.zeros(d)
        shift[g] = step
        dex = (np.asarray(exact(pts + shift)) - np.asarray(exact(pts - shift))) / (2 * step)
        dex = dex.reshape(ne, nq, d).transpose(2, 0, 1)
        diff = field.coeffs @ space.grads[g].T - dex
        grad_sq += float(np.sum(diff**2 * space.weights))
    jump_sq = _jump_sq(space, field.coeffs, s_int, None)
    for axis in range(d):
        ft = space.face_tables[axis]
        h_e = mesh.face_h(axis)
        for side in (0, 1):
            el = mesh.boundary_elements(axis, side)
            fp = space.face_points_physical(axis, side, el)
            ex = np.asarray(exact(fp.reshape(-1, d))).reshape(len(el), -1, d).transpose(2, 0, 1)
            tr = field.coeffs[:, el, :] @ ft["values"][side].T - ex
            jump_sq += s_bdry / h_e * float(np.sum(tr**2 * ft["weights"]))
    return float(np.sqrt(grad_sq + jump_sq))
