"""Manufactured solutions and convergence-rate bookkeeping."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

# mean-shift constant making the Beltrami pressure average zero on the unit cube
BELTRAMI_PRESSURE_SHIFT = 7.63958172715414


@dataclass(frozen=True)
class ManufacturedSolution:
    """Exact velocity/pressure pair on a box.

    ``velocity(x, t)`` maps points ``(n, dim)`` to ``(n, dim)``,
    ``pressure(x, t)`` to ``(n,)``. ``forcing(x, t, mu)`` is the body force
    that makes the pair solve the momentum equation with viscosity ``mu``.
    """

    name: str
    dim: int
    lower: tuple
    upper: tuple
    velocity: Callable
    pressure: Callable
    forcing: Callable
    viscosity: float = 1.0

    def forcing_for(self, mu: float) -> Optional[Callable]:
        """Forcing as ``f(x, t)``, or ``None`` when it vanishes identically."""
        if self.name in ("zero", "shear") or mu == self.viscosity:
            return None
        return lambda x, t: self.forcing(x, t, mu)


def beltrami_velocity(x: np.ndarray, t: float) -> np.ndarray:
    x = np.atleast_2d(x)
    X, Y, Z = x[:, 0], x[:, 1], x[:, 2]
    et = math.exp(-t)
    ux = -et * (np.exp(X) * np.sin(Y + Z) + np.exp(Z) * np.cos(X + Y))
    uy = -et * (np.exp(Y) * np.sin(X + Z) + np.exp(X) * np.cos(Y + Z))
    uz = -et * (np.exp(Z) * np.sin(X + Y) + np.exp(Y) * np.cos(X + Z))
    return np.stack([ux, uy, uz], axis=-1)


def beltrami_pressure(x: np.ndarray, t: float) -> np.ndarray:
    x = np.atleast_2d(x)
    X, Y, Z = x[:, 0], x[:, 1], x[:, 2]
    s = (
        np.exp(X + Z) * np.sin(Y + Z) * np.cos(X + Y)
        + np.exp(X + Y) * np.sin(X + Z) * np.cos(Y + Z)
        + np.exp(Y + Z) * np.sin(X + Y) * np.cos(X + Z)
        + 0.5 * np.exp(2 * X)
        + 0.5 * np.exp(2 * Y)
        + 0.5 * np.exp(2 * Z)
        - BELTRAMI_PRESSURE_SHIFT
    )
    return -math.exp(-2 * t) * s


def beltrami_3d(t: float, point) -> tuple[np.ndarray, np.ndarray]:
    """Velocity and pressure of the Beltrami flow at ``point`` (or points)."""
    pts = np.atleast_2d(np.asarray(point, dtype=float))
    u, p = beltrami_velocity(pts, t), beltrami_pressure(pts, t)
    if np.ndim(point) == 1:
        return u[0], p[0]
    return u, p


def _beltrami_forcing(x, t, mu):
    # the velocity satisfies du/dt = lap(u) = -u and u.grad(u) + grad(p) = 0
    return (mu - 1.0) * beltrami_velocity(x, t)


BELTRAMI = ManufacturedSolution(
    "beltrami", 3, (0.0, 0.0, 0.0), (1.0, 1.0, 1.0), beltrami_velocity, beltrami_pressure, _beltrami_forcing, 1.0
)


def taylor_green(nu: float = 1.0) -> ManufacturedSolution:
    """Decaying Taylor-Green vortex on ``(0, pi)^2`` with viscosity ``nu``."""

    def velocity(x, t):
        x = np.atleast_2d(x)
        e = math.exp(-2 * nu * t)
        return np.stack([-np.cos(x[:, 0]) * np.sin(x[:, 1]) * e, np.sin(x[:, 0]) * np.cos(x[:, 1]) * e], axis=-1)

    def pressure(x, t):
        x = np.atleast_2d(x)
        return -0.25 * (np.cos(2 * x[:, 0]) + np.cos(2 * x[:, 1])) * math.exp(-4 * nu * t)

    def forcing(x, t, mu):
        return 2.0 * (mu - nu) * velocity(x, t)

    return ManufacturedSolution("taylor_green", 2, (0.0, 0.0), (math.pi, math.pi), velocity, pressure, forcing, nu)


def taylor_green_2d(t: float, point, nu: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    sol = taylor_green(nu)
    pts = np.atleast_2d(np.asarray(point, dtype=float))
    u, p = sol.velocity(pts, t), sol.pressure(pts, t)
    if np.ndim(point) == 1:
        return u[0], p[0]
    return u, p


def _zero_velocity(dim):
    return lambda x, t: np.zeros((np.atleast_2d(x).shape[0], dim))


def zero_solution(dim: int) -> ManufacturedSolution:
    z = _zero_velocity(dim)
    return ManufacturedSolution(
        "zero",
        dim,
        (0.0,) * dim,
        (1.0,) * dim,
        z,
        lambda x, t: np.zeros(np.atleast_2d(x).shape[0]),
        lambda x, t, mu: z(x, t),
        1.0,
    )


def shear_flow(dim: int) -> ManufacturedSolution:
    """Steady plane shear ``u = (1 + y, 0, ...)``, ``p = 0`` on the unit box.

    It solves the equations with zero forcing for every viscosity and lies
    in every velocity space with ``k1 >= 1``, so a run reproduces it up to
    rounding.
    """

    def velocity(x, t):
        x = np.atleast_2d(x)
        u = np.zeros((x.shape[0], dim))
        u[:, 0] = 1.0 + x[:, 1]
        return u

    return ManufacturedSolution(
        "shear",
        dim,
        (0.0,) * dim,
        (1.0,) * dim,
        velocity,
        lambda x, t: np.zeros(np.atleast_2d(x).shape[0]),
        lambda x, t, mu: np.zeros((np.atleast_2d(x).shape[0], dim)),
        1.0,
    )


def solution_by_name(name: str, dim: int, mu: float = 1.0) -> ManufacturedSolution:
    if name == "beltrami":
        if dim != 3:
            raise ValueError("the Beltrami flow is three-dimensional")
        return BELTRAMI
    if name == "taylor_green":
        if dim != 2:
            raise ValueError("the Taylor-Green vortex is two-dimensional")
        return taylor_green(mu)
    if name == "zero":
        return zero_solution(dim)
    if name == "shear":
        return shear_flow(dim)
    raise ValueError(f"unknown manufactured solution {name!r}")


# --------------------------------------------------------------------------
# rates


def convergence_rate(err_coarse: Optional[float], err_fine: Optional[float], floor: float = 1e-13) -> Optional[float]:
    """``ln(err_coarse / err_fine) / ln 2``; ``None`` when either error is at machine level."""
    if err_coarse is None or err_fine is None or err_coarse <= floor or err_fine <= floor:
        return None
    return math.log(err_coarse / err_fine) / math.log(2.0)


CSV_COLUMNS = ("level", "h_or_tau", "err_v", "rate_v", "err_u", "rate_u", "err_p", "rate_p")
FIELDS = ("v", "u", "p")


@dataclass
class RateTable:
    axis: str
    rows: list = field(default_factory=list)

    def add(self, resolution: float, err_v: float, err_u: float, err_p: float) -> dict:
        row = {"level": len(self.rows), "h_or_tau": resolution, "err_v": err_v, "err_u": err_u, "err_p": err_p}
        prev = self.rows[-1] if self.rows else None
        for f in FIELDS:
            row[f"rate_{f}"] = convergence_rate(prev[f"err_{f}"], row[f"err_{f}"]) if prev else None
        self.rows.append(row)
        return row

    def rates(self, name: str) -> list:
        return [r[f"rate_{name}"] for r in self.rows[1:]]

    def errors(self, name: str) -> list:
        return [r[f"err_{name}"] for r in self.rows]

    def recompute_rates(self) -> list:
        return [
            {f: convergence_rate(a[f"err_{f}"], b[f"err_{f}"]) for f in FIELDS} for a, b in zip(self.rows, self.rows[1:])
        ]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in self.rows:
            w.writerow([_fmt(r[c]) if c != "level" else r[c] for c in CSV_COLUMNS])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, axis: str = "space") -> "RateTable":
        table = cls(axis)
        for rec in csv.DictReader(io.StringIO(text)):
            table.rows.append(
                {
                    "level": int(rec["level"]),
                    **{c: (float(rec[c]) if rec[c] else None) for c in CSV_COLUMNS if c != "level"},
                }
            )
        return table

    def format(self) -> str:
        head = f"{'level':>5} {'h/tau':>10} " + " ".join(f"{'err_' + f:>11} {'rate':>6}" for f in FIELDS)
        lines = [head]
        for r in self.rows:
            cells = []
            for f in FIELDS:
                rate = r[f"rate_{f}"]
                cells.append(f"{r[f'err_{f}']:11.4e} {('---' if rate is None else f'{rate:.3f}'):>6}")
            lines.append(f"{r['level']:>5} {r['h_or_tau']:10.4e} " + " ".join(cells))
        return "\n".join(lines)


def _fmt(x) -> str:
    if x is None:
        return ""
    return repr(float(x))
