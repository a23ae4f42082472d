"""Discontinuous Galerkin pressure-correction solver for incompressible Navier-Stokes."""

from dgpc.mesh import Mesh, Element, Face, build_mesh, face_neighbors
from dgpc.fespace import (
    PolynomialBasis,
    QuadratureRule,
    DgSpace,
    DgScalarField,
    DgVectorField,
    l2_project,
    l2_error,
    dg_norm_velocity,
    dg_seminorm_scalar,
)

__version__ = "0.1.0"

__all__ = [
    "Mesh",
    "Element",
    "Face",
    "build_mesh",
    "face_neighbors",
    "PolynomialBasis",
    "QuadratureRule",
    "DgSpace",
    "DgScalarField",
    "DgVectorField",
    "l2_project",
    "l2_error",
    "dg_norm_velocity",
    "dg_seminorm_scalar",
]
