"""Assembly of the dG bilinear and trilinear forms.

Matrices follow the convention ``A[test, trial]`` so that ``A @ v`` is the
vector of form values ``a(v, theta_j)`` over test basis functions. Vector
spaces are component-blocked; the diffusion and convection operators act
identically on every velocity component, so they are assembled as one
scalar block and expanded with :func:`vector_operator` when needed.

Interior faces normal to axis ``a`` carry ``n_e = +e_a``, ``E1`` is the
lower element (trace from its upper face, side 1) and ``E2`` the upper one
(trace from its lower face, side 0). Jumps are ``trace(E1) - trace(E2)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp

from dgpc.fespace import DgScalarField, DgSpace, DgVectorField
from dgpc.mesh import Mesh

SparseMatrix = sp.csr_matrix
BoundaryData = Callable[[np.ndarray], np.ndarray]


class FormError(ValueError):
    pass


@dataclass(frozen=True)
class FormParams:
    """Viscosity, symmetrisation and penalty parameters of the scheme."""

    mu: float = 1.0
    epsilon: int = -1
    sigma_interior: float = 64.0
    sigma_boundary: float = 128.0
    sigma_tilde: float = 2.0
    delta: Optional[float] = None  # defaults to 1 / (4 d)

    def validate(self, dim: int) -> "FormParams":
        if self.mu <= 0:
            raise FormError(f"mu must be positive, got {self.mu}")
        if self.epsilon not in (-1, 0, 1):
            raise FormError(f"epsilon must be -1, 0 or 1, got {self.epsilon}")
        if self.sigma_interior <= 0 or self.sigma_boundary <= 0:
            raise FormError("velocity penalties must be positive")
        if self.sigma_tilde <= 0:
            raise FormError("sigma_tilde must be positive")
        delta = self.delta_for(dim)
        if not 0 < delta <= 1.0 / (4 * dim) * (1 + 1e-12):
            raise FormError(f"delta must lie in ]0, 1/(4d)] = ]0, {1 / (4 * dim):g}], got {delta}")
        return self

    def delta_for(self, dim: int) -> float:
        return 1.0 / (4 * dim) if self.delta is None else float(self.delta)

    @property
    def kappa(self) -> float:
        """Coercivity constant of the velocity diffusion form."""
        return 1.0 if self.epsilon == 1 else 0.5


# --------------------------------------------------------------------------
# sparsity


class BlockSparsity:
    """CSR layout of an element-block operator coupling face neighbours.

    Blocks are ``(n_rows_local, n_cols_local)``: one per element on the
    diagonal plus ``(E1, E2)`` and ``(E2, E1)`` blocks per interior face.
    Every position is unique, so filling the matrix is a single gather.
    """

    def __init__(self, mesh: Mesh, nr: int, nc: int):
        self.mesh, self.nr, self.nc = mesh, nr, nc
        jj, ii = np.meshgrid(np.arange(nr), np.arange(nc), indexing="ij")
        jj, ii = jj.ravel(), ii.ravel()

        def block_coords(re, ce):
            return (re[:, None] * nr + jj).ravel(), (ce[:, None] * nc + ii).ravel()

        ne = mesh.n_elements
        rows, cols = [], []
        r, c = block_coords(np.arange(ne), np.arange(ne))
        rows.append(r)
        cols.append(c)
        for axis in range(mesh.dim):
            e1, e2 = mesh.interior_pairs(axis)
            for re, ce in ((e1, e2), (e2, e1)):
                r, c = block_coords(re, ce)
                rows.append(r)
                cols.append(c)
        rows = np.concatenate(rows)
        cols = np.concatenate(cols)
        self.order = np.lexsort((cols, rows))
        self.indices = cols[self.order].astype(np.int32)
        counts = np.bincount(rows, minlength=ne * nr)
        self.indptr = np.concatenate([[0], np.cumsum(counts)]).astype(np.int32)
        self.shape = (ne * nr, ne * nc)

    def matrix(self, diag: np.ndarray, upper: list, lower: list) -> SparseMatrix:
        """``upper[a]`` holds ``(E1 row, E2 col)`` blocks, ``lower[a]`` ``(E2 row, E1 col)``."""
        parts = [diag.ravel()]
        for a in range(self.mesh.dim):
            parts.append(upper[a].ravel())
            parts.append(lower[a].ravel())
        data = np.concatenate(parts)[self.order]
        return sp.csr_matrix((data, self.indices.copy(), self.indptr.copy()), shape=self.shape)


@lru_cache(maxsize=32)
def _sparsity(mesh: Mesh, nr: int, nc: int) -> BlockSparsity:
    return BlockSparsity(mesh, nr, nc)


def sparsity(mesh: Mesh, nr: int, nc: int) -> BlockSparsity:
    return _sparsity(mesh, nr, nc)


def vector_operator(scalar_block: sp.spmatrix, dim: int) -> SparseMatrix:
    """Block-diagonal expansion of a componentwise scalar operator."""
    return sp.block_diag([scalar_block] * dim, format="csr")


def _fm(a: np.ndarray, b: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Face/volume moment ``sum_q w_q a[q, j] b[q, i]`` as a ``(j, i)`` block."""
    return (a * w[:, None]).T @ b


def _boundary_sign(side: int) -> float:
    return -1.0 if side == 0 else 1.0


def _check_compatible(test: DgSpace, trial: DgSpace):
    if test.mesh is not trial.mesh:
        raise FormError("spaces live on different meshes")
    if test.quad_points != trial.quad_points:
        raise FormError("spaces must share one quadrature rule")


# --------------------------------------------------------------------------
# interior-penalty type forms


def _penalty_form(
    space: DgSpace,
    trial_consistency: float,
    test_consistency: float,
    sigma_int: float,
    sigma_bdry: Optional[float],
) -> SparseMatrix:
    """Scalar form ``sum_E (grad v, grad th) + c1 <{dn v},[th]> + c2 <{dn th},[v]> + sigma/h <[v],[th]>``.

    Boundary faces are included when ``sigma_bdry`` is given.
    """
    mesh = space.mesh
    nb = space.n_basis
    stiff = sum(_fm(space.grads[g], space.grads[g], space.weights) for g in range(space.dim))
    diag = np.broadcast_to(stiff, (mesh.n_elements, nb, nb)).copy()
    upper, lower = [], []
    for axis in range(space.dim):
        ft = space.face_tables[axis]
        wf = ft["weights"]
        h_e = mesh.face_h(axis)
        # traces: X=L uses side 1, X=R uses side 0; jump signs +1 / -1
        V = {"L": ft["values"][1], "R": ft["values"][0]}
        Dn = {"L": ft["grads"][1][axis], "R": ft["grads"][0][axis]}
        s = {"L": 1.0, "R": -1.0}
        blocks = {}
        for X in "LR":  # test side
            for Y in "LR":  # trial side
                blk = trial_consistency * 0.5 * s[X] * _fm(V[X], Dn[Y], wf)
                blk += test_consistency * 0.5 * s[Y] * _fm(Dn[X], V[Y], wf)
                blk += sigma_int / h_e * s[X] * s[Y] * _fm(V[X], V[Y], wf)
                blocks[X + Y] = blk
        e1, e2 = mesh.interior_pairs(axis)
        diag[e1] += blocks["LL"]
        diag[e2] += blocks["RR"]
        upper.append(np.broadcast_to(blocks["LR"], (e1.size, nb, nb)))
        lower.append(np.broadcast_to(blocks["RL"], (e1.size, nb, nb)))
        if sigma_bdry is not None:
            for side in (0, 1):
                sign = _boundary_sign(side)
                v = ft["values"][side]
                dn = sign * ft["grads"][side][axis]
                blk = trial_consistency * _fm(v, dn, wf) + test_consistency * _fm(dn, v, wf)
                blk += sigma_bdry / h_e * _fm(v, v, wf)
                diag[mesh.boundary_elements(axis, side)] += blk
    return sparsity(mesh, nb, nb).matrix(diag, upper, lower)


def boundary_values(space: DgSpace, data: BoundaryData, axis: int, side: int) -> np.ndarray:
    """Evaluate vector boundary data ``(n_faces, n_fq, dim)`` on one side of the box."""
    elems = space.mesh.boundary_elements(axis, side)
    pts = space.face_points_physical(axis, side, elems)
    nf, nq, d = pts.shape
    return np.asarray(data(pts.reshape(-1, d)), dtype=float).reshape(nf, nq, d)


def assemble_a_epsilon(
    space: DgSpace,
    params: FormParams,
    dirichlet_data: Optional[BoundaryData] = None,
    scalar: bool = False,
) -> tuple[SparseMatrix, np.ndarray]:
    """Interior-penalty diffusion form on the velocity space.

    Returns the matrix and the right-hand side carrying the boundary data
    terms ``eps <dn theta, g> + sigma_b / h_e <g, theta>`` (zero when no data
    is given). With ``scalar=True`` the single-component block and an rhs
    of shape ``(dim, n_dofs_scalar)`` are returned.
    """
    if params.epsilon not in (-1, 0, 1):
        raise FormError(f"epsilon must be -1, 0 or 1, got {params.epsilon}")
    A = _penalty_form(space, -1.0, float(params.epsilon), params.sigma_interior, params.sigma_boundary)
    rhs = np.zeros((space.dim, space.n_elements, space.n_basis))
    if dirichlet_data is not None:
        mesh = space.mesh
        for axis in range(space.dim):
            ft = space.face_tables[axis]
            wf = ft["weights"]
            h_e = mesh.face_h(axis)
            for side in (0, 1):
                sign = _boundary_sign(side)
                g = boundary_values(space, dirichlet_data, axis, side)
                test = params.epsilon * sign * ft["grads"][side][axis] + params.sigma_boundary / h_e * ft["values"][side]
                contrib = np.einsum("fqc,q,qj->cfj", g, wf, test)
                rhs[:, mesh.boundary_elements(axis, side)] += contrib
    if scalar:
        return A, rhs.reshape(space.dim, -1)
    return vector_operator(A, space.dim), rhs.ravel()


def assemble_a_ellip(space: DgSpace, params: FormParams) -> SparseMatrix:
    """Symmetric interior penalty form for the potential; interior faces only."""
    if params.sigma_tilde <= 0:
        raise FormError("sigma_tilde must be positive")
    return _penalty_form(space, -1.0, -1.0, params.sigma_tilde, None)


def dg_norm_matrix(space: DgSpace, sigma_int: float, sigma_bdry: Optional[float], scalar: bool = True) -> SparseMatrix:
    """Gram matrix of the energy norm (``sigma_bdry=None`` gives the interior-only seminorm)."""
    N = _penalty_form(space, 0.0, 0.0, sigma_int, sigma_bdry)
    return N if scalar else vector_operator(N, space.dim)


def interior_jump_matrix(space: DgSpace, sigma: float) -> SparseMatrix:
    """Matrix of ``sum_{interior e} sigma / h_e <[p], [q]>``."""
    mesh = space.mesh
    nb = space.n_basis
    diag = np.zeros((mesh.n_elements, nb, nb))
    upper, lower = [], []
    for axis in range(space.dim):
        ft = space.face_tables[axis]
        c = sigma / mesh.face_h(axis)
        VL, VR, wf = ft["values"][1], ft["values"][0], ft["weights"]
        e1, e2 = mesh.interior_pairs(axis)
        diag[e1] += c * _fm(VL, VL, wf)
        diag[e2] += c * _fm(VR, VR, wf)
        upper.append(np.broadcast_to(-c * _fm(VL, VR, wf), (e1.size, nb, nb)))
        lower.append(np.broadcast_to(-c * _fm(VR, VL, wf), (e1.size, nb, nb)))
    return sparsity(mesh, nb, nb).matrix(diag, upper, lower)


# --------------------------------------------------------------------------
# velocity-pressure coupling and lifts


@dataclass(frozen=True)
class CouplingOperators:
    """Matrices realising ``b`` and its broken/lifted pieces.

    * ``divergence`` ``(nM, nX)``: ``(div_h theta, q)``
    * ``lift_r`` ``(nM, nX)``: coefficients of ``R_h([theta])``
    * ``gradient`` ``(nX, nM)``: coefficients of ``grad_h q`` projected on X_h
    * ``lift_g`` ``(nX, nM)``: coefficients of ``G_h([q])``

    so that ``b = divergence - lift_r = (lift_g - gradient).T``.
    """

    divergence: SparseMatrix
    lift_r: SparseMatrix
    gradient: SparseMatrix
    lift_g: SparseMatrix

    @property
    def b(self) -> SparseMatrix:
        return (self.divergence - self.lift_r).tocsr()

    @property
    def b_equivalent(self) -> SparseMatrix:
        return (self.lift_g - self.gradient).T.tocsr()


def assemble_coupling(X: DgSpace, M: DgSpace) -> CouplingOperators:
    _check_compatible(X, M)
    mesh = X.mesh
    n1, n2, d = X.n_basis, M.n_basis, X.dim
    pat_mx = sparsity(mesh, n2, n1)
    pat_xm = sparsity(mesh, n1, n2)
    div_parts, r_parts, grad_parts, g_parts = [], [], [], []
    for c in range(d):
        # volume: (d_c phi_i, psi_j) and (d_c psi_i, phi_j)
        div_diag = np.broadcast_to(_fm(M.values, X.grads[c], X.weights), (mesh.n_elements, n2, n1)).copy()
        grad_diag = np.broadcast_to(_fm(X.values, M.grads[c], X.weights), (mesh.n_elements, n1, n2)).copy()
        r_diag = np.zeros((mesh.n_elements, n2, n1))
        g_diag = np.zeros((mesh.n_elements, n1, n2))
        r_up, r_lo, g_up, g_lo, z_up, z_lo, zg_up, zg_lo = [], [], [], [], [], [], [], []
        for axis in range(d):
            e1, e2 = mesh.interior_pairs(axis)
            nf = e1.size
            zero_mx = np.zeros((nf, n2, n1))
            zero_xm = np.zeros((nf, n1, n2))
            z_up.append(zero_mx)
            z_lo.append(zero_mx)
            zg_up.append(zero_xm)
            zg_lo.append(zero_xm)
            if axis != c:
                r_up.append(zero_mx)
                r_lo.append(zero_mx)
                g_up.append(zero_xm)
                g_lo.append(zero_xm)
                continue
            fx, fm = X.face_tables[axis], M.face_tables[axis]
            wf = fx["weights"]
            VX = {"L": fx["values"][1], "R": fx["values"][0]}
            VM = {"L": fm["values"][1], "R": fm["values"][0]}
            s = {"L": 1.0, "R": -1.0}
            # R_h: <{psi_j}, [phi_i] n_e . e_c>
            rb = {X_ + Y_: 0.5 * s[Y_] * _fm(VM[X_], VX[Y_], wf) for X_ in "LR" for Y_ in "LR"}
            # G_h: <{phi_j} n_e . e_c, [psi_i]>
            gb = {X_ + Y_: 0.5 * s[Y_] * _fm(VX[X_], VM[Y_], wf) for X_ in "LR" for Y_ in "LR"}
            r_diag[e1] += rb["LL"]
            r_diag[e2] += rb["RR"]
            g_diag[e1] += gb["LL"]
            g_diag[e2] += gb["RR"]
            r_up.append(np.broadcast_to(rb["LR"], (nf, n2, n1)))
            r_lo.append(np.broadcast_to(rb["RL"], (nf, n2, n1)))
            g_up.append(np.broadcast_to(gb["LR"], (nf, n1, n2)))
            g_lo.append(np.broadcast_to(gb["RL"], (nf, n1, n2)))
            for side in (0, 1):
                sign = _boundary_sign(side)
                blk = sign * _fm(fm["values"][side], fx["values"][side], wf)
                r_diag[mesh.boundary_elements(axis, side)] += blk
        div_parts.append(pat_mx.matrix(div_diag, z_up, z_lo))
        r_parts.append(pat_mx.matrix(r_diag, r_up, r_lo))
        grad_parts.append(pat_xm.matrix(grad_diag, zg_up, zg_lo))
        g_parts.append(pat_xm.matrix(g_diag, g_up, g_lo))
    return CouplingOperators(
        divergence=sp.hstack(div_parts, format="csr"),
        lift_r=sp.hstack(r_parts, format="csr"),
        gradient=sp.vstack(grad_parts, format="csr"),
        lift_g=sp.vstack(g_parts, format="csr"),
    )


def assemble_b(X: DgSpace, M: DgSpace) -> SparseMatrix:
    """``B`` with ``q @ B @ theta = b(theta, q)``, shape ``(nM, d * nX)``."""
    return assemble_coupling(X, M).b


def boundary_flux_vector(M: DgSpace, X: DgSpace, data: BoundaryData) -> np.ndarray:
    """``<q, g . n>`` over the domain boundary for every pressure basis function."""
    mesh = M.mesh
    out = np.zeros((M.n_elements, M.n_basis))
    for axis in range(M.dim):
        fm = M.face_tables[axis]
        for side in (0, 1):
            g = boundary_values(X, data, axis, side)
            gn = _boundary_sign(side) * g[..., axis]
            out[mesh.boundary_elements(axis, side)] += (gn * fm["weights"]) @ fm["values"][side]
    return out.ravel()


def lift_Rh(coupling: CouplingOperators, field: DgVectorField, M: DgSpace) -> DgScalarField:
    """Lift of the velocity jumps into the pressure space (all faces)."""
    return DgScalarField(M, coupling.lift_r @ field.flat)


def lift_Gh(coupling: CouplingOperators, field: DgScalarField, X: DgSpace) -> DgVectorField:
    """Lift of the scalar jumps into the velocity space (interior faces only)."""
    return DgVectorField(X, coupling.lift_g @ field.flat)


# --------------------------------------------------------------------------
# convection


class ConvectionAssembler:
    """Reassembles the upwinded convection block for a new convecting field.

    The sparsity pattern and the reference moment tensors are built once;
    each call costs a few dense contractions over elements and faces.
    """

    def __init__(self, space: DgSpace):
        self.space = space
        s = space
        nb, nq = s.n_basis, s.values.shape[0]
        w = s.weights
        # volume: sum_c W_c (d_c phi_i) phi_j  and  1/2 div(W) phi_i phi_j
        self._vol_adv = np.einsum("q,qj,cqi->cqji", w, s.values, s.grads).reshape(s.dim * nq, nb * nb)
        self._vol_div = (0.5 * np.einsum("q,qj,qi->qji", w, s.values, s.values)).reshape(nq, nb * nb)
        self._face = []
        for axis in range(s.dim):
            ft = s.face_tables[axis]
            wf = ft["weights"]
            VL, VR = ft["values"][1], ft["values"][0]

            def mom(a, b):
                return np.einsum("q,qj,qi->qji", wf, a, b).reshape(wf.size, nb * nb)

            self._face.append(
                dict(LL=mom(VL, VL), RR=mom(VR, VR), LR=mom(VL, VR), RL=mom(VR, VL), B0=mom(VR, VR), B1=mom(VL, VL))
            )
        self._pattern = sparsity(s.mesh, nb, nb)

    def assemble(
        self,
        w: DgVectorField,
        z: Optional[DgVectorField] = None,
        inflow_data: Optional[BoundaryData] = None,
        jump_data: Optional[BoundaryData] = None,
        part: str = "full",
    ) -> tuple[SparseMatrix, np.ndarray]:
        """Scalar convection block and data rhs ``(dim, n_dofs_scalar)``.

        ``part`` selects ``"full"`` (the upwinded form), ``"C"`` (volume and
        averaged-face terms) or ``"U"`` (the signed upwind terms). The inflow
        set is decided by ``z`` (default ``w``) at each face node with a
        strict inequality. ``inflow_data`` is the exterior velocity trace on
        the boundary for the upwind term; ``jump_data`` is subtracted from
        ``w`` in the boundary jump ``[w]``.
        """
        if part not in ("full", "C", "U"):
            raise FormError(f"unknown convection part {part!r}")
        s = self.space
        mesh = s.mesh
        nb, d, ne = s.n_basis, s.dim, s.n_elements
        zf = w if z is None else z
        wc = w.coeffs
        use_c = part in ("full", "C")
        use_u = part in ("full", "U")
        # full: a_C = C + sum |{w}.n|...; U enters a_C with a minus sign, so
        # the "U" part returns +U: sum {w}.n_E (v_int - v_ext) th_int on inflow
        up_sign = 1.0 if part == "full" else -1.0

        if use_c:
            W = np.stack([wc[c] @ s.values.T for c in range(d)], axis=1)  # (ne, d, nq)
            divw = sum(wc[c] @ s.grads[c].T for c in range(d))  # (ne, nq)
            diag = (W.reshape(ne, -1) @ self._vol_adv + divw @ self._vol_div).reshape(ne, nb, nb)
        else:
            diag = np.zeros((ne, nb, nb))
        rhs = np.zeros((d, ne, nb))
        upper, lower = [], []
        for axis in range(d):
            ft = s.face_tables[axis]
            mom = self._face[axis]
            e1, e2 = mesh.interior_pairs(axis)
            VL, VR = ft["values"][1], ft["values"][0]
            wl = wc[axis][e1] @ VL.T
            wr = wc[axis][e2] @ VR.T
            beta = 0.5 * (wl + wr)
            zbeta = 0.5 * (zf.coeffs[axis][e1] @ VL.T + zf.coeffs[axis][e2] @ VR.T) if z is not None else beta
            jump = wl - wr
            in_l = np.where(zbeta < 0, -beta, 0.0) * up_sign  # inflow for E1 (n_E = n_e)
            in_r = np.where(zbeta > 0, beta, 0.0) * up_sign  # inflow for E2 (n_E = -n_e)
            avg = -0.25 * jump if use_c else np.zeros_like(jump)
            if not use_u:
                in_l = np.zeros_like(in_l)
                in_r = np.zeros_like(in_r)
            diag[e1] += ((avg + in_l) @ mom["LL"]).reshape(-1, nb, nb)
            diag[e2] += ((avg + in_r) @ mom["RR"]).reshape(-1, nb, nb)
            upper.append((-in_l @ mom["LR"]).reshape(-1, nb, nb))
            lower.append((-in_r @ mom["RL"]).reshape(-1, nb, nb))
            for side in (0, 1):
                sign = _boundary_sign(side)
                el = mesh.boundary_elements(axis, side)
                V = ft["values"][side]
                wn = sign * (wc[axis][el] @ V.T)
                zn = sign * (zf.coeffs[axis][el] @ V.T) if z is not None else wn
                jn = wn
                if jump_data is not None:
                    jn = wn - sign * boundary_values(s, jump_data, axis, side)[..., axis]
                inflow = np.where(zn < 0, -wn, 0.0) * up_sign if use_u else np.zeros_like(wn)
                coef = inflow + (-0.5 * jn if use_c else 0.0)
                diag[el] += (coef @ mom["B1" if side == 1 else "B0"]).reshape(-1, nb, nb)
                if inflow_data is not None and use_u:
                    g = boundary_values(s, inflow_data, axis, side)
                    rhs[:, el] += np.einsum("fq,fqc,q,qj->cfj", inflow, g, ft["weights"], V)
        self.last_diagonal_blocks = diag
        A = self._pattern.matrix(diag, upper, lower)
        return A, rhs.reshape(d, -1)


def assemble_convection(
    space: DgSpace,
    w: DgVectorField,
    z: Optional[DgVectorField] = None,
    inflow_data: Optional[BoundaryData] = None,
    jump_data: Optional[BoundaryData] = None,
    part: str = "full",
    scalar: bool = False,
) -> tuple[SparseMatrix, np.ndarray]:
    """Matrix of ``v -> a_C(z; w, v, .)`` and its boundary-data rhs."""
    A, rhs = ConvectionAssembler(space).assemble(w, z, inflow_data, jump_data, part)
    if scalar:
        return A, rhs
    return vector_operator(A, space.dim), rhs.ravel()
