"""Krylov solvers for the momentum and potential systems.

Both solvers accept an element-block Jacobi preconditioner: blocks are the
diagonal ``(n_basis, n_basis)`` sub-matrices of one element.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.sparse as sp

log = logging.getLogger(__name__)

PRECONDITIONERS = ("none", "block-jacobi", "two-level")


@dataclass(frozen=True)
class SolverConfig:
    rtol: float = 1e-10
    atol: float = 1e-14
    max_iter: int = 10_000
    restart: int = 50
    preconditioner: str = "block-jacobi"

    def __post_init__(self):
        if self.rtol <= 0 or self.atol <= 0:
            raise ValueError("tolerances must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if self.restart < 1:
            raise ValueError("restart must be >= 1")
        if self.preconditioner not in PRECONDITIONERS:
            raise ValueError(f"preconditioner must be one of {PRECONDITIONERS}")


@dataclass(frozen=True)
class SolveReport:
    iterations: int
    residual: float
    converged: bool
    target: float = 0.0


class SolverError(RuntimeError):
    """Raised when an iteration fails; carries the :class:`SolveReport`."""

    def __init__(self, message: str, report: Optional[SolveReport] = None):
        super().__init__(message)
        self.report = report


def diagonal_blocks(A: sp.spmatrix, block_size: int) -> np.ndarray:
    """Dense diagonal blocks ``(n_blocks, b, b)`` of a square sparse matrix."""
    n = A.shape[0]
    if n % block_size:
        raise ValueError(f"matrix size {n} not divisible by block size {block_size}")
    bsr = sp.bsr_matrix(A, blocksize=(block_size, block_size))
    nblk = n // block_size
    owner = np.repeat(np.arange(nblk), np.diff(bsr.indptr))
    mask = bsr.indices == owner
    out = np.zeros((nblk, block_size, block_size))
    out[owner[mask]] = bsr.data[mask]
    return out


class BlockJacobi:
    def __init__(self, A: Optional[sp.spmatrix], block_size: int, symmetric: bool = False, blocks=None):
        if blocks is None:
            blocks = diagonal_blocks(A, block_size)
        self.block_size = block_size
        if symmetric:
            # pseudo-inverse keeps the preconditioner SPD on singular blocks
            self.inv = np.linalg.pinv(blocks, hermitian=True)
        else:
            self.inv = np.linalg.inv(blocks)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        b = self.block_size
        return np.einsum("eij,ej->ei", self.inv, x.reshape(-1, b)).ravel()


class TwoLevel:
    """Block-Jacobi smoothing around an exact solve on the low-order modes.

    With an orthonormal modal basis the first ``coarse_modes`` coefficients
    of every element span a coarse space (the element averages when
    ``coarse_modes == 1``), and restriction is plain index selection, so the
    Galerkin coarse matrix is a submatrix of ``A``. One application is
    pre-smoothing, coarse correction and post-smoothing; with a symmetric
    ``A`` and symmetric blocks the result is a symmetric preconditioner.

    ``null_vector`` (coarse-mode coefficients of a kernel vector of ``A``)
    makes a singular coarse matrix solvable: the coarse system is bordered
    with that vector, which fixes the kernel component to zero.
    """

    def __init__(self, A, block_size: int, coarse_modes: int = 1, symmetric: bool = False, blocks=None, null_vector=None):
        import scipy.sparse.linalg as spla

        self.A = A.tocsr()
        n_blocks = A.shape[0] // block_size
        self.smoother = BlockJacobi(A if blocks is None else None, block_size, symmetric=symmetric, blocks=blocks)
        self.idx = (np.arange(n_blocks)[:, None] * block_size + np.arange(coarse_modes)[None, :]).ravel()
        Ac = self.A[self.idx][:, self.idx]
        self.bordered = null_vector is not None
        if self.bordered:
            # singular coarse matrix: border it with the kernel vector
            c = np.asarray(null_vector, dtype=float)[self.idx]
            col = sp.csr_matrix(c[:, None])
            Ac = sp.bmat([[Ac, col], [col.T, None]])
        self.coarse = spla.splu(sp.csc_matrix(Ac))

    def _coarse_solve(self, rc):
        if self.bordered:
            return self.coarse.solve(np.append(rc, 0.0))[:-1]
        return self.coarse.solve(rc)

    def __call__(self, r: np.ndarray) -> np.ndarray:
        z = self.smoother(r)
        res = r - self.A @ z
        z[self.idx] += self._coarse_solve(res[self.idx])
        res = r - self.A @ z
        return z + self.smoother(res)


def _identity(x):
    return x


def _preconditioner(A, config: SolverConfig, block_size: Optional[int], symmetric: bool, null_vector=None):
    if config.preconditioner == "none" or block_size is None:
        return _identity
    if config.preconditioner == "two-level":
        return TwoLevel(A, block_size, symmetric=symmetric, null_vector=null_vector)
    return BlockJacobi(A, block_size, symmetric=symmetric)


def gmres(A, b, config: SolverConfig, precond=_identity, x0: Optional[np.ndarray] = None):
    """Restarted GMRES with right preconditioning and CGS2 orthogonalisation."""
    n = b.size
    x = np.zeros(n) if x0 is None else x0.astype(float).copy()
    bnorm = float(np.linalg.norm(b))
    target = max(config.rtol * bnorm, config.atol)
    r = b - A @ x
    beta = float(np.linalg.norm(r))
    its = 0
    if beta <= target:
        return x, SolveReport(0, beta, True, target)
    m = config.restart
    while its < config.max_iter:
        V = np.zeros((m + 1, n))
        H = np.zeros((m + 1, m))
        cs = np.zeros(m)
        sn = np.zeros(m)
        g = np.zeros(m + 1)
        g[0] = beta
        V[0] = r / beta
        k = 0
        for k in range(m):
            w = A @ precond(V[k])
            h = V[: k + 1] @ w
            w -= h @ V[: k + 1]
            h2 = V[: k + 1] @ w
            w -= h2 @ V[: k + 1]
            h += h2
            hn = float(np.linalg.norm(w))
            H[: k + 1, k] = h
            H[k + 1, k] = hn
            for i in range(k):
                t = cs[i] * H[i, k] + sn[i] * H[i + 1, k]
                H[i + 1, k] = -sn[i] * H[i, k] + cs[i] * H[i + 1, k]
                H[i, k] = t
            denom = np.hypot(H[k, k], H[k + 1, k])
            cs[k], sn[k] = (1.0, 0.0) if denom == 0 else (H[k, k] / denom, H[k + 1, k] / denom)
            H[k, k] = cs[k] * H[k, k] + sn[k] * H[k + 1, k]
            H[k + 1, k] = 0.0
            g[k + 1] = -sn[k] * g[k]
            g[k] = cs[k] * g[k]
            its += 1
            if abs(g[k + 1]) <= target or hn == 0.0 or its >= config.max_iter:
                break
            V[k + 1] = w / hn
        y = np.linalg.solve(np.triu(H[: k + 1, : k + 1]), g[: k + 1])
        x += precond(y @ V[: k + 1])
        r = b - A @ x
        beta = float(np.linalg.norm(r))
        if beta <= target:
            return x, SolveReport(its, beta, True, target)
        if abs(g[k + 1]) <= target:
            # the recurrence converged but the true residual did not; keep restarting
            log.debug("gmres: estimated residual %.3e vs true %.3e", abs(g[k + 1]), beta)
    return x, SolveReport(its, beta, False, target)


def solve_momentum(
    A: sp.spmatrix,
    rhs: np.ndarray,
    config: SolverConfig = SolverConfig(),
    block_size: Optional[int] = None,
    x0: Optional[np.ndarray] = None,
    precond=None,
) -> tuple[np.ndarray, SolveReport]:
    """Solve the nonsymmetric momentum system with restarted GMRES.

    ``rhs`` may be 2-D, one right-hand side per row; the reported iteration
    count is then the total and the residual the worst one.
    """
    rhs = np.asarray(rhs, dtype=float)
    if A.shape[0] != A.shape[1] or A.shape[0] != rhs.shape[-1]:
        raise ValueError(f"shape mismatch: A {A.shape}, rhs {rhs.shape}")
    if precond is None:
        precond = _preconditioner(A, config, block_size, symmetric=False)
    if rhs.ndim == 1:
        x, rep = gmres(A, rhs, config, precond, x0)
    else:
        xs, reps = [], []
        for i, b in enumerate(rhs):
            x_i, r_i = gmres(A, b, config, precond, None if x0 is None else x0[i])
            xs.append(x_i)
            reps.append(r_i)
        x = np.stack(xs)
        rep = SolveReport(
            sum(r.iterations for r in reps),
            max(r.residual for r in reps),
            all(r.converged for r in reps),
            max(r.target for r in reps),
        )
    if not rep.converged:
        raise SolverError(f"GMRES did not converge: residual {rep.residual:.3e} after {rep.iterations} iterations", rep)
    return x, rep


def solve_poisson_zero_mean(
    A: sp.spmatrix,
    rhs: np.ndarray,
    config: SolverConfig = SolverConfig(),
    null_vector: Optional[np.ndarray] = None,
    block_size: Optional[int] = None,
    mean_tol: float = 1e-8,
    precond=None,
) -> tuple[np.ndarray, SolveReport]:
    """Preconditioned CG on the complement of ``null_vector``.

    ``null_vector`` spans the kernel of ``A`` (the coefficient vector of the
    constant function); the iterate, the initial residual and every search
    direction are projected onto its orthogonal complement, so the solution
    has zero mean.
    """
    rhs = np.asarray(rhs, dtype=float)
    n = rhs.size
    c = np.ones(n) if null_vector is None else np.asarray(null_vector, dtype=float)
    c = c / np.linalg.norm(c)

    def proj(v):
        return v - c * (c @ v)

    rnorm0 = float(np.linalg.norm(rhs))
    if abs(c @ rhs) > mean_tol * max(rnorm0, 1e-300) and abs(c @ rhs) > config.atol:
        raise SolverError(f"right-hand side is not orthogonal to the kernel: <1, rhs> = {c @ rhs:.3e}")
    b = proj(rhs)
    bnorm = float(np.linalg.norm(b))
    target = max(config.rtol * bnorm, config.atol)
    if precond is None:
        precond = _preconditioner(A, config, block_size, symmetric=True, null_vector=null_vector)
    x = np.zeros(n)
    r = b.copy()
    res = bnorm
    its = 0
    # outer loop restarts from the true residual if the recurrence drifts
    while res > target and its < config.max_iter:
        z = proj(precond(r))
        p = z.copy()
        rz = float(r @ z)
        while its < config.max_iter:
            Ap = A @ p
            pAp = float(p @ Ap)
            if pAp <= 0 or rz <= 0:
                break
            alpha = rz / pAp
            x += alpha * p
            r -= alpha * Ap
            its += 1
            if float(np.linalg.norm(r)) <= target:
                break
            z = proj(precond(r))
            rz_new = float(r @ z)
            p = z + (rz_new / rz) * p
            rz = rz_new
        x = proj(x)
        r = b - A @ x
        res_new = float(np.linalg.norm(r))
        if res_new >= res and res_new > target:
            res = res_new
            break
        res = res_new
    rep = SolveReport(its, res, res <= target, target)
    if not rep.converged:
        raise SolverError(f"CG did not converge: residual {res:.3e} after {its} iterations", rep)
    return x, rep
