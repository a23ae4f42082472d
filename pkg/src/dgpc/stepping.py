"""Fully discrete pressure-correction time stepping.

Each step solves, in order,

1. the momentum problem for the intermediate velocity ``v`` with lagged
   convection ``a_C(u; u, v, .)``, diffusion ``mu a_eps`` and the old
   pressure;
2. the potential problem ``a_ellip(phi, q) = -b(v, q) / tau`` on zero-mean
   fields;
3. the coefficientwise updates ``p += phi - delta mu (div_h v - R_h v)`` and
   ``u = v - tau (grad_h phi - G_h phi)``.

With the orthonormal basis the mass matrices are identities, so the
updates in step 3 are plain vector operations. Optional diagnostics check
the discrete identities the scheme satisfies.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp

from dgpc.fespace import DgScalarField, DgSpace, DgVectorField, l2_project
from dgpc.forms import (
    ConvectionAssembler,
    FormParams,
    assemble_a_ellip,
    assemble_a_epsilon,
    assemble_coupling,
    boundary_flux_vector,
    dg_norm_matrix,
    interior_jump_matrix,
)
from dgpc.mesh import Mesh
from dgpc.solver import (
    BlockJacobi,
    SolveReport,
    SolverConfig,
    SolverError,
    TwoLevel,
    diagonal_blocks,
    solve_momentum,
    solve_poisson_zero_mean,
)

log = logging.getLogger(__name__)

# f(points, t) -> (n, dim); g(points, t) -> (n, dim)
TimeFunction = Callable[[np.ndarray, float], np.ndarray]


class SteppingError(RuntimeError):
    """A solver failure inside a time step, with the step and stage attached."""

    def __init__(self, step: int, stage: str, cause: Exception):
        super().__init__(f"step {step}, {stage}: {cause}")
        self.step = step
        self.stage = stage
        self.report = getattr(cause, "report", None)


@dataclass
class StepConfig:
    tau: float
    n_steps: int
    params: FormParams = field(default_factory=FormParams)
    momentum_solver: SolverConfig = field(default_factory=SolverConfig)
    poisson_solver: SolverConfig = field(default_factory=SolverConfig)
    diagnostics: bool = False
    poincare_constant: float = 1.0
    # subtract the prescribed normal flux g.n in the divergence functional
    boundary_flux_correction: bool = True

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if self.n_steps < 1:
            raise ValueError(f"n_steps must be >= 1, got {self.n_steps}")

    @property
    def final_time(self) -> float:
        return self.n_steps * self.tau


@dataclass
class State:
    n: int
    t: float
    u: DgVectorField
    v: DgVectorField
    p: DgScalarField
    phi: DgScalarField

    def copy(self) -> "State":
        return State(
            self.n,
            self.t,
            DgVectorField(self.u.space, self.u.coeffs.copy()),
            DgVectorField(self.v.space, self.v.coeffs.copy()),
            DgScalarField(self.p.space, self.p.coeffs.copy()),
            DgScalarField(self.phi.space, self.phi.coeffs.copy()),
        )


@dataclass
class StepDiagnostics:
    step: int
    time: float
    kinetic_energy: float  # ||u_h^n||^2
    v_dg_norm_sq: float  # ||v_h^n||_DG^2
    pressure_mean: float
    potential_mean: float
    s_mean: float
    weak_update_residual: float  # pressure/velocity updates checked in weak form
    transfer_residual: float
    divergence_residual: float
    energy_lhs: float
    energy_rhs: float
    s_norm: float
    xi_seminorm: float
    momentum: Optional[SolveReport] = None
    poisson: Optional[SolveReport] = None
    homogeneous: bool = True

    def as_row(self) -> dict:
        row = {k: getattr(self, k) for k in self.__dataclass_fields__ if k not in ("momentum", "poisson")}
        row["momentum_iterations"] = self.momentum.iterations if self.momentum else 0
        row["poisson_iterations"] = self.poisson.iterations if self.poisson else 0
        return row


class PressureCorrectionScheme:
    """Owns the spaces, the constant operators and the per-step assembler."""

    def __init__(
        self,
        mesh: Mesh,
        k1: int,
        k2: int,
        config: StepConfig,
        forcing: Optional[TimeFunction] = None,
        boundary: Optional[TimeFunction] = None,
        quad_points: Optional[int] = None,
    ):
        if k1 < 1 or k2 < 0:
            raise ValueError("need k1 >= 1 and k2 >= 0")
        if not k1 - 1 <= k2 <= k1 + 1:
            raise ValueError(f"degrees must satisfy k1 - 1 <= k2 <= k1 + 1, got k1={k1}, k2={k2}")
        self.mesh = mesh
        self.config = config
        self.params = config.params.validate(mesh.dim)
        q = quad_points if quad_points is not None else k1 + 2
        self.X = DgSpace(mesh, k1, q)
        self.M = DgSpace(mesh, k2, q)
        self.forcing = forcing
        self.boundary = boundary
        self.delta = self.params.delta_for(mesh.dim)

        p = self.params
        self.A_eps, _ = assemble_a_epsilon(self.X, p, scalar=True)
        self._eps_blocks = diagonal_blocks(self.A_eps, self.X.n_basis)
        self.A_ell = assemble_a_ellip(self.M, p)
        self.coupling = assemble_coupling(self.X, self.M)
        self.B = self.coupling.b
        self.BT = self.B.T.tocsr()
        self.strong_div = (self.coupling.divergence - self.coupling.lift_r).tocsr()
        self.strong_grad = (self.coupling.gradient - self.coupling.lift_g).tocsr()
        self.null_vector = self.M.element_average_vector()
        self.convection = ConvectionAssembler(self.X)
        self._ell_precond = None
        if config.poisson_solver.preconditioner == "block-jacobi":
            self._ell_precond = BlockJacobi(self.A_ell, self.M.n_basis, symmetric=True)
        elif config.poisson_solver.preconditioner == "two-level":
            self._ell_precond = TwoLevel(
                self.A_ell, self.M.n_basis, symmetric=True, null_vector=self.null_vector
            )
        self._identity = sp.identity(self.X.n_dofs, format="csr")

        # diagnostics operators, built lazily
        self._diag_ops = None
        self._S = None
        self._dg_sum = 0.0
        self._f_sum = 0.0
        self._u0_sq = None
        self.last_reports = None

    # ------------------------------------------------------------------
    def initialize(self, u0: Optional[Callable[[np.ndarray], np.ndarray]] = None) -> State:
        """``u_h^0`` is the local L2 projection of ``u0``; ``p, phi`` start at zero and ``v_h^0 = u_h^0``."""
        if u0 is None:
            u = DgVectorField.zeros(self.X)
        else:
            u = l2_project(self.X, u0)
            if not isinstance(u, DgVectorField):
                raise ValueError("initial velocity must be vector valued")
        return self.initialize_coefficients(u.coeffs)

    def initialize_coefficients(self, coeffs: np.ndarray) -> State:
        u = DgVectorField(self.X, np.array(coeffs, dtype=float))
        self._S = np.zeros(self.M.n_dofs)
        self._dg_sum = 0.0
        self._f_sum = 0.0
        self._u0_sq = float(u.flat @ u.flat)
        return State(
            0,
            0.0,
            u,
            DgVectorField(self.X, u.coeffs.copy()),
            DgScalarField.zeros(self.M),
            DgScalarField.zeros(self.M),
        )

    # ------------------------------------------------------------------
    def _data(self, t: float):
        if self.boundary is None:
            return None
        g = self.boundary
        return lambda x: g(x, t)

    def _forcing_moments(self, t: float) -> Optional[np.ndarray]:
        if self.forcing is None:
            return None
        f = self.forcing
        return l2_project(self.X, lambda x: f(x, t)).coeffs.reshape(self.X.dim, -1)

    def momentum_system(self, state: State, t_new: float):
        """Scalar momentum matrix, its diagonal blocks and the rhs ``(dim, n)``."""
        cfg, p = self.config, self.params
        tau = cfg.tau
        g_new = self._data(t_new)
        g_old = self._data(state.t)
        C, rhs_c = self.convection.assemble(state.u, inflow_data=g_new, jump_data=g_old)
        blocks = np.eye(self.X.n_basis) + tau * self.convection.last_diagonal_blocks + tau * p.mu * self._eps_blocks
        S = (self._identity + tau * C + (tau * p.mu) * self.A_eps).tocsr()
        d = self.X.dim
        rhs = state.u.coeffs.reshape(d, -1) + tau * (self.BT @ state.p.flat).reshape(d, -1)
        if g_new is not None:
            _, rhs_eps = assemble_a_epsilon(self.X, p, dirichlet_data=g_new, scalar=True)
            rhs = rhs + tau * rhs_c + tau * p.mu * rhs_eps
        fm = self._forcing_moments(t_new)
        if fm is not None:
            rhs = rhs + tau * fm
        return S, blocks, rhs

    def divergence_data(self, t: float) -> Optional[np.ndarray]:
        """Zero-mean projected boundary flux functional ``<q, g.n>`` at time ``t``."""
        if self.boundary is None or not self.config.boundary_flux_correction:
            return None
        g = self._data(t)
        return self.M.project_zero_mean(boundary_flux_vector(self.M, self.X, g))

    def advance(self, state: State) -> tuple[State, Optional[StepDiagnostics]]:
        cfg, p = self.config, self.params
        tau = cfg.tau
        n = state.n + 1
        t_new = n * tau
        d = self.X.dim

        S, blocks, rhs = self.momentum_system(state, t_new)
        kind = cfg.momentum_solver.preconditioner
        if kind == "block-jacobi":
            precond = BlockJacobi(None, self.X.n_basis, blocks=blocks)
        elif kind == "two-level":
            precond = TwoLevel(S, self.X.n_basis, blocks=blocks)
        else:
            precond = lambda x: x  # noqa: E731
        try:
            v_flat, mom_rep = solve_momentum(
                S, rhs, cfg.momentum_solver, x0=state.u.coeffs.reshape(d, -1), precond=precond
            )
        except SolverError as exc:
            raise SteppingError(n, "momentum", exc) from exc
        v = DgVectorField(self.X, v_flat)

        div_v = self.B @ v.flat
        scale = float(np.linalg.norm(div_v))
        dg = self.divergence_data(t_new)
        if dg is not None:
            div_v = div_v + dg
            scale += float(np.linalg.norm(dg))
        # The potential equation is tested with zero-mean functions only, so the
        # constant component of the right-hand side is dropped. It is rounding:
        # b(v, 1) = 0 for every v, but b(v, .) and the data term nearly cancel
        # and the remainder is divided by tau.
        mean = float(self.null_vector @ div_v) / float(np.linalg.norm(self.null_vector))
        if abs(mean) > 1e-10 * max(scale, 1e-300):
            err = SolverError(f"divergence functional has a mean of {mean:.3e} (scale {scale:.3e})")
            raise SteppingError(n, "potential", err)
        div_v = self.M.project_zero_mean(div_v)
        try:
            phi_flat, poi_rep = solve_poisson_zero_mean(
                self.A_ell,
                -div_v / tau,
                cfg.poisson_solver,
                null_vector=self.null_vector,
                precond=self._ell_precond if self._ell_precond is not None else (lambda x: x),
            )
        except SolverError as exc:
            raise SteppingError(n, "potential", exc) from exc
        phi = DgScalarField(self.M, phi_flat)

        strong = self.strong_div @ v.flat
        if dg is not None:
            strong = strong + dg
        p_new = state.p.flat + phi_flat - self.delta * p.mu * strong
        u_new = v.flat - tau * (self.strong_grad @ phi_flat)
        if not np.all(np.isfinite(u_new)):
            raise SteppingError(n, "update", FloatingPointError("non-finite velocity"))
        new = State(n, t_new, DgVectorField(self.X, u_new), v, DgScalarField(self.M, p_new), phi)
        self.last_reports = (mom_rep, poi_rep)

        diag = None
        if cfg.diagnostics:
            diag = self.check_identities(state, new, mom_rep, poi_rep)
        return new, diag

    # ------------------------------------------------------------------
    def _ensure_diag_ops(self):
        if self._diag_ops is None:
            p = self.params
            self._diag_ops = dict(
                N_vel=dg_norm_matrix(self.X, p.sigma_interior, p.sigma_boundary, scalar=False),
                N_pres=dg_norm_matrix(self.M, p.sigma_tilde, None),
                J=interior_jump_matrix(self.M, p.sigma_tilde),
                G=self.coupling.lift_g,
            )
        return self._diag_ops

    def check_identities(
        self,
        old: State,
        new: State,
        momentum: Optional[SolveReport] = None,
        poisson: Optional[SolveReport] = None,
    ) -> StepDiagnostics:
        """Evaluate the discrete identities and the energy inequality after a step."""
        ops = self._ensure_diag_ops()
        cfg, prm = self.config, self.params
        tau, mu, delta = cfg.tau, prm.mu, self.delta
        u, v, phi, pn = new.u.flat, new.v.flat, new.phi.flat, new.p.flat
        c = self.null_vector
        dg = self.divergence_data(new.t)

        # below tau * atol / rtol the potential solve stops on its absolute
        # tolerance, so scales are floored there to keep the ratio meaningful
        psolve = cfg.poisson_solver
        floor = tau * psolve.atol / psolve.rtol

        def rel(res, *terms, floor=1e-300):
            scale = max([float(np.max(np.abs(t))) for t in terms if np.size(t)] + [floor])
            return float(np.max(np.abs(res))) / scale

        # weak forms of the updates
        Bv = self.B @ v
        dp = pn - old.p.flat - phi + delta * mu * (Bv + (dg if dg is not None else 0.0))
        du = u - v - tau * (self.BT @ phi)
        weak = max(rel(dp, pn, old.p.flat, phi), rel(du, u, v))

        Bu = self.B @ u
        Gphi = ops["G"] @ phi
        GtGphi = ops["G"].T @ Gphi
        Jphi = ops["J"] @ phi
        Aphi = self.A_ell @ phi
        r_transfer = Bu - Bv - tau * Aphi + tau * Jphi - tau * GtGphi
        r_div = Bu + tau * Jphi - tau * GtGphi
        transfer = rel(r_transfer, Bu, Bv, tau * Aphi, tau * Jphi, tau * GtGphi, floor=floor)
        divergence = rel(r_div, Bu, Bv, tau * Jphi, tau * GtGphi, floor=floor)

        # auxiliary functions and energy
        self._S = self._S + delta * mu * (self.strong_div @ v)
        xi = pn + self._S
        ke = float(u @ u)
        vdg = float(v @ (ops["N_vel"] @ v))
        self._dg_sum += vdg
        f_sq = 0.0
        fm = self._forcing_moments(new.t)
        if fm is not None:
            f_sq = float(np.sum(fm**2))
        self._f_sum += f_sq
        xi_sq = float(xi @ (ops["N_pres"] @ xi))
        s_sq = float(self._S @ self._S)
        kappa = prm.kappa
        lhs = ke + 0.5 * kappa * mu * tau * self._dg_sum + 0.5 * tau**2 * xi_sq + tau / (delta * mu) * s_sq
        rhs = self._u0_sq + 2 * cfg.poincare_constant**2 / (kappa * mu) * tau * self._f_sum
        vol = self.mesh.volume
        return StepDiagnostics(
            step=new.n,
            time=new.t,
            kinetic_energy=ke,
            v_dg_norm_sq=vdg,
            pressure_mean=float(c @ pn) / vol,
            potential_mean=float(c @ phi) / vol,
            s_mean=float(c @ self._S) / vol,
            weak_update_residual=weak,
            transfer_residual=transfer,
            divergence_residual=divergence,
            energy_lhs=lhs,
            energy_rhs=rhs,
            s_norm=math.sqrt(s_sq),
            xi_seminorm=math.sqrt(max(xi_sq, 0.0)),
            momentum=momentum,
            poisson=poisson,
            homogeneous=self.boundary is None,
        )

    def run(self, state: State, n_steps: Optional[int] = None, callback=None):
        """Advance ``n_steps`` (default: the configured count); returns final state and diagnostics."""
        steps = self.config.n_steps if n_steps is None else n_steps
        history = []
        for _ in range(steps):
            state, diag = self.advance(state)
            if diag is not None:
                history.append(diag)
            if callback is not None:
                callback(state, diag)
        return state, history


def initialize(mesh: Mesh, k1: int, k2: int, config: StepConfig, u0=None, **kwargs):
    """Build a scheme and its initial state."""
    scheme = PressureCorrectionScheme(mesh, k1, k2, config, **kwargs)
    return scheme, scheme.initialize(u0)


def advance(scheme: PressureCorrectionScheme, state: State):
    return scheme.advance(state)
