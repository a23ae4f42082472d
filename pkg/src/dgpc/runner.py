"""Single runs and convergence studies driven by a :class:`RunConfig`."""

from __future__ import annotations

import csv
import io
import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from dgpc.config import RunConfig
from dgpc.fespace import dg_error_velocity, l2_error
from dgpc.mesh import build_mesh
from dgpc.mms import ManufacturedSolution, RateTable, solution_by_name
from dgpc.stepping import PressureCorrectionScheme, StepConfig, StepDiagnostics

log = logging.getLogger(__name__)

DIAGNOSTIC_COLUMNS = (
    "step",
    "time",
    "kinetic_energy",
    "v_dg_norm_sq",
    "pressure_mean",
    "potential_mean",
    "s_mean",
    "weak_update_residual",
    "transfer_residual",
    "divergence_residual",
    "energy_lhs",
    "energy_rhs",
    "s_norm",
    "xi_seminorm",
    "momentum_iterations",
    "poisson_iterations",
)


class StudyError(RuntimeError):
    """A run inside a convergence study failed; ``level`` says which one."""

    def __init__(self, level: int, cause: Exception):
        super().__init__(f"level {level}: {cause}")
        self.level = level
        self.cause = cause


@dataclass
class RunReport:
    """Outcome of one run. ``config`` is the full configuration text, so the report reproduces the run."""

    config: str
    final_time: float
    steps: int
    n_elements: int
    velocity_dofs: int
    pressure_dofs: int
    err_v: float
    err_u: float
    err_p: float
    err_v_dg: float
    uv_relative_difference: float
    final_kinetic_energy: float
    wall_clock: float
    momentum_iterations: int
    momentum_max_iterations: int
    poisson_iterations: int
    poisson_max_iterations: int
    diagnostics: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RunReport":
        return cls(**json.loads(text))

    def errors_csv(self) -> str:
        """Deterministic CSV of the final errors (no timings)."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("field", "l2_error"))
        for name in ("v", "u", "p"):
            w.writerow((name, repr(float(getattr(self, f"err_{name}")))))
        w.writerow(("v_dg", repr(float(self.err_v_dg))))
        return buf.getvalue()


def problem_for(config: RunConfig) -> ManufacturedSolution:
    return solution_by_name(config.mms, config.dim, config.mu)


def build_scheme(config: RunConfig) -> tuple[PressureCorrectionScheme, ManufacturedSolution]:
    sol = problem_for(config)
    upper = sol.upper if config.upper is None else config.upper
    lower = config.lower
    mesh = build_mesh(lower, upper, config.cells, dim=config.dim)
    step_cfg = StepConfig(
        config.tau,
        config.n_steps,
        config.form_params(),
        config.momentum_solver(),
        config.poisson_solver(),
        diagnostics=config.diagnostics,
        boundary_flux_correction=config.boundary_flux_correction,
    )
    boundary = None if config.mms == "zero" else sol.velocity
    scheme = PressureCorrectionScheme(
        mesh,
        config.k1,
        config.k2,
        step_cfg,
        forcing=sol.forcing_for(config.mu),
        boundary=boundary,
        quad_points=config.quad_points,
    )
    return scheme, sol


def initial_state(scheme: PressureCorrectionScheme, sol: ManufacturedSolution, config: RunConfig):
    if config.initial == "zero":
        return scheme.initialize(None)
    if config.initial == "random":
        rng = np.random.default_rng(config.seed)
        X = scheme.X
        return scheme.initialize_coefficients(rng.standard_normal((X.dim, X.n_elements, X.n_basis)))
    return scheme.initialize(lambda x: sol.velocity(x, 0.0))


def config_warnings(config: RunConfig) -> list:
    # delta needs no check here: validation keeps it below 1/(4d) <= kappa/(2d)
    out = []
    bound = lift_constant_estimate(config.k1)
    if config.sigma_tilde < bound:
        out.append(
            f"sigma_tilde = {config.sigma_tilde:g} is below (k1+1)(k1+2)/2 = {bound:g}, the asymptotic size of the "
            "squared velocity-lift constant on uniform box meshes; the potential update may inject energy"
        )
    return out


def lift_constant_estimate(k1: int) -> float:
    """Limit of the squared lift constant of ``G_h`` on fine uniform box meshes (measured, see tests)."""
    return (k1 + 1) * (k1 + 2) / 2.0


def summarize_diagnostics(history: Sequence[StepDiagnostics], u0_sq: float) -> dict:
    if not history:
        return {}
    ke = np.array([d.kinetic_energy for d in history])
    lhs = np.array([d.energy_lhs for d in history])
    energies = np.concatenate([[u0_sq], ke])
    slack = 1e-10 * max(u0_sq, 1e-300)
    return {
        "max_pressure_mean": float(max(abs(d.pressure_mean) for d in history)),
        "max_weak_update_residual": float(max(d.weak_update_residual for d in history)),
        "max_transfer_residual": float(max(d.transfer_residual for d in history)),
        "max_divergence_residual": float(max(d.divergence_residual for d in history)),
        "kinetic_energy_nonincreasing": bool(np.all(np.diff(energies) <= slack)),
        "energy_lhs_nonincreasing": bool(np.all(np.diff(lhs) <= slack)),
        "energy_bound_holds": bool(np.all(lhs <= np.array([d.energy_rhs for d in history]) + slack)),
        "initial_kinetic_energy": float(u0_sq),
        "final_energy_lhs": float(lhs[-1]),
    }


def diagnostics_csv(history: Sequence[StepDiagnostics], every: int = 1) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(DIAGNOSTIC_COLUMNS)
    for i, d in enumerate(history):
        if (i + 1) % every and i != len(history) - 1:
            continue
        row = d.as_row()
        w.writerow([row[c] if isinstance(row[c], (int, bool)) else repr(float(row[c])) for c in DIAGNOSTIC_COLUMNS])
    return buf.getvalue()


def execute(config: RunConfig, callback=None):
    """Run a configuration; returns ``(report, final_state, scheme, history)``."""
    scheme, sol = build_scheme(config)
    state = initial_state(scheme, sol, config)
    u0_sq = float(state.u.flat @ state.u.flat)
    history = []
    its = dict(m=0, m_max=0, p=0, p_max=0)
    warnings = config_warnings(config)
    for w in warnings:
        log.warning(w)
    t0 = time.perf_counter()
    for _ in range(config.n_steps):
        state, diag = scheme.advance(state)
        rep = scheme.last_reports
        its["m"] += rep[0].iterations
        its["m_max"] = max(its["m_max"], rep[0].iterations)
        its["p"] += rep[1].iterations
        its["p_max"] = max(its["p_max"], rep[1].iterations)
        if diag is not None:
            history.append(diag)
        if callback is not None:
            callback(state, diag)
    wall = time.perf_counter() - t0

    T = state.t
    exact_u = lambda x: sol.velocity(x, T)  # noqa: E731
    err_v = l2_error(state.v, exact_u)
    err_u = l2_error(state.u, exact_u)
    err_p = l2_error(state.p, lambda x: sol.pressure(x, T))
    prm = config.form_params()
    err_v_dg = dg_error_velocity(state.v, exact_u, (prm.sigma_interior, prm.sigma_boundary))
    ref = max(err_v, err_u)
    rel = abs(err_v - err_u) / ref if ref > 0 else 0.0
    report = RunReport(
        config=config.to_text(),
        final_time=T,
        steps=state.n,
        n_elements=scheme.mesh.n_elements,
        velocity_dofs=scheme.X.n_dofs * scheme.X.dim,
        pressure_dofs=scheme.M.n_dofs,
        err_v=err_v,
        err_u=err_u,
        err_p=err_p,
        err_v_dg=err_v_dg,
        uv_relative_difference=rel,
        final_kinetic_energy=float(state.u.flat @ state.u.flat),
        wall_clock=wall,
        momentum_iterations=its["m"],
        momentum_max_iterations=its["m_max"],
        poisson_iterations=its["p"],
        poisson_max_iterations=its["p_max"],
        diagnostics=summarize_diagnostics(history, u0_sq),
        warnings=warnings,
    )
    return report, state, scheme, history


def run(config: RunConfig, output_dir: Optional[str] = None, write: bool = True) -> RunReport:
    """Execute ``config`` and, if ``write``, store its outputs under ``output_dir``.

    Files: ``config.ini`` (echo), ``errors.csv``, ``report.json``,
    ``diagnostics.csv`` when diagnostics are on, ``fields.vtk`` when
    VTK export is on.
    """
    report, state, scheme, history = execute(config)
    if write:
        out = output_dir or config.output_dir
        os.makedirs(out, exist_ok=True)
        _write(os.path.join(out, "config.ini"), report.config)
        _write(os.path.join(out, "errors.csv"), report.errors_csv())
        _write(os.path.join(out, "report.json"), report.to_json())
        if history:
            _write(os.path.join(out, "diagnostics.csv"), diagnostics_csv(history, config.diagnostics_every))
        if config.vtk:
            from dgpc.vtk import export_fields

            export_fields(state, os.path.join(out, "fields.vtk"), subdivisions=config.vtk_subdivisions)
    return report


def _write(path: str, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


# ---------------------------------------------------------------------------
# convergence studies


def level_config(base: RunConfig, axis: str, level: int) -> RunConfig:
    """Configuration of refinement ``level``: cells doubled (space) or ``tau`` halved (time) ``level`` times."""
    f = 2**level
    if axis == "space":
        cells = tuple(c * f for c in base.cells) if isinstance(base.cells, tuple) else base.cells * f
        return replace(base, cells=cells)
    if axis == "time":
        return replace(base, tau=base.tau / f)
    raise ValueError(f"axis must be 'space' or 'time', got {axis!r}")


def level_resolution(config: RunConfig, axis: str) -> float:
    if axis == "time":
        return config.tau
    sol = problem_for(config)
    upper = np.broadcast_to(np.asarray(sol.upper if config.upper is None else config.upper, float), (config.dim,))
    lower = np.broadcast_to(np.asarray(config.lower, float), (config.dim,))
    cells = np.broadcast_to(np.asarray(config.cells), (config.dim,))
    # h_e = |e|^(1/(d-1)) of the faces normal to the first axis
    spacing = (upper - lower) / cells
    return float(np.prod(spacing[1:]) ** (1.0 / (config.dim - 1)))


def run_convergence_study(
    base_config: RunConfig, axis: str, levels: int, workers: int = 1, reports: Optional[list] = None
) -> RateTable:
    """Run ``levels`` refinements along ``axis`` and tabulate errors and rates.

    Levels are independent and may run in ``workers`` threads. Failures are
    re-raised as :class:`StudyError` carrying the level index. If a list is
    passed as ``reports`` the per-level :class:`RunReport` objects are
    appended to it.
    """
    if levels < 2:
        raise ValueError("a convergence study needs at least 2 levels")
    if axis not in ("space", "time"):
        raise ValueError(f"axis must be 'space' or 'time', got {axis!r}")
    if base_config.k2 != base_config.k1 - 1:
        raise ValueError("rate studies use k2 = k1 - 1")
    configs = [level_config(base_config, axis, i) for i in range(levels)]

    def one(i):
        try:
            return execute(configs[i])[0]
        except Exception as exc:  # noqa: BLE001 - re-raised with the level attached
            raise StudyError(i, exc) from exc

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, range(levels)))
    else:
        results = [one(i) for i in range(levels)]
    table = RateTable(axis)
    for cfg, rep in zip(configs, results):
        table.add(level_resolution(cfg, axis), rep.err_v, rep.err_u, rep.err_p)
        log.info("%s level %d: err_v=%.4e err_u=%.4e err_p=%.4e", axis, len(table.rows) - 1, rep.err_v, rep.err_u, rep.err_p)
    if reports is not None:
        reports.extend(results)
    return table
