"""Run configuration: an INI-style key/value text format.

Grammar
-------
The text is read with :mod:`configparser`. Lines are ``key = value``;
``#`` and ``;`` start comments. Keys may be grouped under the section
headers listed in :data:`SCHEMA` (``[mesh]``, ``[discretization]``,
``[forms]``, ``[time]``, ``[problem]``, ``[solver]``, ``[output]``) or
written before any header, in which case they are looked up by name.
Every key name is unique across sections, so a bare key is unambiguous.
A key may also be written as ``section.key``; this is the form used by
command-line overrides.

Values:

* numbers accept fractions such as ``1/8`` and powers such as ``2^-13``;
* ``cells``, ``lower`` and ``upper`` take one value (broadcast to every
  axis) or one value per axis separated by spaces or commas;
* booleans are ``true/false``, ``yes/no``, ``on/off`` or ``1/0``.

Unknown keys, duplicate keys and constraint violations raise
:class:`ConfigError` naming the offending key.
"""

from __future__ import annotations

import configparser
import math
import re
from dataclasses import asdict, dataclass, field, fields, replace
from fractions import Fraction
from typing import Any, Optional

from dgpc.forms import FormParams
from dgpc.solver import PRECONDITIONERS, SolverConfig

PROBLEMS = ("beltrami", "taylor_green", "zero", "shear")
INITIAL = ("exact", "zero", "random")


class ConfigError(ValueError):
    """Invalid configuration text or values; ``key`` names the culprit when known."""

    def __init__(self, message: str, key: Optional[str] = None):
        super().__init__(f"{key}: {message}" if key else message)
        self.key = key


# ---------------------------------------------------------------------------
# value parsers


def parse_number(text: str) -> float:
    s = text.strip().replace(" ", "")
    m = re.fullmatch(r"([+-]?[0-9.]+)\^([+-]?[0-9]+)", s)
    if m:
        return float(Fraction(m.group(1)) ** int(m.group(2)))
    try:
        return float(Fraction(s))
    except (ValueError, ZeroDivisionError):
        pass
    try:
        return float(s)
    except ValueError:
        raise ValueError(f"not a number: {text!r}") from None


def parse_int(text: str) -> int:
    x = parse_number(text)
    if x != int(x):
        raise ValueError(f"not an integer: {text!r}")
    return int(x)


def parse_bool(text: str) -> bool:
    s = text.strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_list(conv):
    def parse(text: str):
        parts = [p for p in re.split(r"[,\s]+", text.strip()) if p]
        if not parts:
            raise ValueError("empty list")
        vals = tuple(conv(p) for p in parts)
        return vals[0] if len(vals) == 1 else vals

    return parse


def parse_optional_number(text: str) -> Optional[float]:
    return None if text.strip().lower() in ("", "none", "default") else parse_number(text)


def parse_optional_int(text: str) -> Optional[int]:
    return None if text.strip().lower() in ("", "none", "default") else parse_int(text)


def _choice(options):
    def parse(text: str) -> str:
        s = text.strip().lower()
        if s not in options:
            raise ValueError(f"expected one of {', '.join(options)}, got {text!r}")
        return s

    return parse


def _string(text: str) -> str:
    return text.strip()


# key -> (section, parser)
SCHEMA: dict[str, tuple[str, Any]] = {
    "dim": ("mesh", parse_int),
    "cells": ("mesh", _parse_list(parse_int)),
    "lower": ("mesh", _parse_list(parse_number)),
    "upper": ("mesh", _parse_list(parse_number)),
    "k1": ("discretization", parse_int),
    "k2": ("discretization", parse_int),
    "quad_points": ("discretization", parse_optional_int),
    "mu": ("forms", parse_number),
    "epsilon": ("forms", parse_int),
    "sigma_interior": ("forms", parse_number),
    "sigma_boundary": ("forms", parse_number),
    "sigma_tilde": ("forms", parse_number),
    "delta": ("forms", parse_optional_number),
    "tau": ("time", parse_number),
    "T": ("time", parse_number),
    "mms": ("problem", _choice(PROBLEMS)),
    "initial": ("problem", _choice(INITIAL)),
    "seed": ("problem", parse_int),
    "boundary_flux_correction": ("problem", parse_bool),
    "momentum_rtol": ("solver", parse_number),
    "momentum_atol": ("solver", parse_number),
    "momentum_max_iter": ("solver", parse_int),
    "momentum_restart": ("solver", parse_int),
    "momentum_preconditioner": ("solver", _choice(PRECONDITIONERS)),
    "poisson_rtol": ("solver", parse_number),
    "poisson_atol": ("solver", parse_number),
    "poisson_max_iter": ("solver", parse_int),
    "poisson_preconditioner": ("solver", _choice(PRECONDITIONERS)),
    "diagnostics": ("output", parse_bool),
    "diagnostics_every": ("output", parse_int),
    "vtk": ("output", parse_bool),
    "vtk_subdivisions": ("output", parse_int),
    "output_dir": ("output", _string),
}
SECTIONS = tuple(dict.fromkeys(sec for sec, _ in SCHEMA.values()))
REQUIRED = ("dim", "cells", "k1", "k2", "tau", "T", "mms")


@dataclass(frozen=True)
class RunConfig:
    """Every parameter of a run; :meth:`to_text` writes a file that parses back to an equal object."""

    dim: int
    cells: Any
    k1: int
    k2: int
    tau: float
    T: float
    mms: str
    lower: Any = 0.0
    upper: Any = None  # None: the manufactured solution's own box
    quad_points: Optional[int] = None
    mu: float = 1.0
    epsilon: int = -1
    sigma_interior: float = 64.0
    sigma_boundary: float = 128.0
    sigma_tilde: float = 2.0
    delta: Optional[float] = None
    initial: str = "exact"
    seed: int = 0
    boundary_flux_correction: bool = True
    momentum_rtol: float = 1e-10
    momentum_atol: float = 1e-14
    momentum_max_iter: int = 10_000
    momentum_restart: int = 50
    momentum_preconditioner: str = "block-jacobi"
    poisson_rtol: float = 1e-10
    poisson_atol: float = 1e-14
    poisson_max_iter: int = 10_000
    poisson_preconditioner: str = "block-jacobi"
    diagnostics: bool = False
    diagnostics_every: int = 1
    vtk: bool = False
    vtk_subdivisions: int = 1
    output_dir: str = "results"

    def __post_init__(self):
        self.validate()

    # -- derived values ---------------------------------------------------
    @property
    def n_steps(self) -> int:
        return int(round(self.T / self.tau))

    @property
    def effective_quad_points(self) -> int:
        return self.k1 + 2 if self.quad_points is None else self.quad_points

    @property
    def effective_delta(self) -> float:
        return 1.0 / (4 * self.dim) if self.delta is None else self.delta

    def form_params(self) -> FormParams:
        return FormParams(
            self.mu, self.epsilon, self.sigma_interior, self.sigma_boundary, self.sigma_tilde, self.delta
        )

    def momentum_solver(self) -> SolverConfig:
        return SolverConfig(
            self.momentum_rtol,
            self.momentum_atol,
            self.momentum_max_iter,
            self.momentum_restart,
            self.momentum_preconditioner,
        )

    def poisson_solver(self) -> SolverConfig:
        return SolverConfig(
            self.poisson_rtol, self.poisson_atol, self.poisson_max_iter, 1, self.poisson_preconditioner
        )

    # -- validation -------------------------------------------------------
    def validate(self) -> None:
        if self.dim not in (2, 3):
            raise ConfigError("must be 2 or 3", "dim")
        for key in ("cells", "lower", "upper"):
            val = getattr(self, key)
            if isinstance(val, tuple) and len(val) != self.dim:
                raise ConfigError(f"expected 1 or {self.dim} values, got {len(val)}", key)
        cells = self.cells if isinstance(self.cells, tuple) else (self.cells,)
        if any(c < 1 for c in cells):
            raise ConfigError("cell counts must be positive", "cells")
        if self.k1 < 1:
            raise ConfigError("velocity degree must be at least 1", "k1")
        if self.k2 < 0:
            raise ConfigError("pressure degree must be non-negative", "k2")
        if not self.k1 - 1 <= self.k2 <= self.k1 + 1:
            raise ConfigError(f"degrees must satisfy k1 - 1 <= k2 <= k1 + 1 (k1={self.k1}, k2={self.k2})", "k2")
        if self.quad_points is not None and self.quad_points < 1:
            raise ConfigError("must be positive", "quad_points")
        if not self.tau > 0 or not math.isfinite(self.tau):
            raise ConfigError("time step must be positive", "tau")
        if not self.T > 0:
            raise ConfigError("final time must be positive", "T")
        n = self.T / self.tau
        if abs(n - round(n)) > 1e-9 * max(1.0, n):
            raise ConfigError(f"final time {self.T} is not a whole number of steps of size {self.tau}", "T")
        if self.mms not in PROBLEMS:
            raise ConfigError(f"unknown problem {self.mms!r}", "mms")
        if self.mms == "beltrami" and self.dim != 3:
            raise ConfigError("the Beltrami flow needs dim = 3", "mms")
        if self.mms == "taylor_green" and self.dim != 2:
            raise ConfigError("the Taylor-Green vortex needs dim = 2", "mms")
        if self.initial not in INITIAL:
            raise ConfigError(f"unknown initial condition {self.initial!r}", "initial")
        if self.diagnostics_every < 1:
            raise ConfigError("must be >= 1", "diagnostics_every")
        if self.vtk_subdivisions < 1:
            raise ConfigError("must be >= 1", "vtk_subdivisions")
        if not self.mu > 0:
            raise ConfigError("viscosity must be positive", "mu")
        if self.epsilon not in (-1, 0, 1):
            raise ConfigError("must be -1, 0 or 1", "epsilon")
        for key in ("sigma_interior", "sigma_boundary", "sigma_tilde"):
            if not getattr(self, key) > 0:
                raise ConfigError("penalty parameters must be positive", key)
        bound = 1.0 / (4 * self.dim)
        if self.delta is not None and not 0 < self.delta <= bound * (1 + 1e-12):
            raise ConfigError(f"must lie in ]0, 1/(4d)] = ]0, {bound:g}], got {self.delta:g}", "delta")
        for prefix in ("momentum", "poisson"):
            try:
                getattr(self, f"{prefix}_solver")()
            except ValueError as exc:
                raise ConfigError(str(exc), f"{prefix}_rtol") from None

    # -- serialization ----------------------------------------------------
    def to_dict(self) -> dict:
        return asdict(self)

    def to_text(self) -> str:
        """Sectioned text that :func:`parse_config` reads back to an equal config."""
        by_section: dict[str, list[str]] = {s: [] for s in SECTIONS}
        for f in fields(self):
            val = getattr(self, f.name)
            if val is None:
                if f.name == "upper":
                    continue
                text = "none"
            elif isinstance(val, bool):
                text = "true" if val else "false"
            elif isinstance(val, tuple):
                text = " ".join(_fmt_scalar(v) for v in val)
            else:
                text = _fmt_scalar(val)
            by_section[SCHEMA[f.name][0]].append(f"{f.name} = {text}")
        parts = []
        for sec in SECTIONS:
            parts.append(f"[{sec}]")
            parts.extend(by_section[sec])
            parts.append("")
        return "\n".join(parts)

    def with_overrides(self, **values) -> "RunConfig":
        return replace(self, **values)


def _fmt_scalar(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


# ---------------------------------------------------------------------------


def _resolve_key(raw: str, section: Optional[str]) -> str:
    key = raw.strip()
    if "." in key:
        sec, key = key.split(".", 1)
        if sec not in SECTIONS:
            raise ConfigError(f"unknown section {sec!r}", raw)
        section = sec
    if key not in SCHEMA:
        raise ConfigError("unknown key", key)
    if section is not None and section != "DEFAULT" and SCHEMA[key][0] != section:
        raise ConfigError(f"belongs in section [{SCHEMA[key][0]}], not [{section}]", key)
    return key


def _convert(key: str, text: str):
    try:
        return SCHEMA[key][1](text)
    except ValueError as exc:
        raise ConfigError(str(exc), key) from None


def parse_overrides(pairs) -> dict:
    """``["tau=1/16", "forms.sigma_tilde=8"]`` -> converted values keyed by field name."""
    out = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"override {pair!r} is not of the form key=value")
        raw, text = pair.split("=", 1)
        key = _resolve_key(raw, None)
        out[key] = _convert(key, text)
    return out


def parse_config(text: str, overrides=None) -> RunConfig:
    """Parse configuration text (see the module docstring) into a validated :class:`RunConfig`.

    ``overrides`` is an optional list of ``key=value`` strings applied last.
    """
    parser = configparser.ConfigParser(
        interpolation=None, comment_prefixes=("#", ";"), inline_comment_prefixes=("#", ";"), strict=True
    )
    parser.optionxform = str  # keep "T" distinct from "t"
    body = text if re.match(r"\s*\[", text) else "[__top__]\n" + text
    try:
        parser.read_string(body)
    except configparser.DuplicateOptionError as exc:
        raise ConfigError("given twice", exc.option) from None
    except configparser.DuplicateSectionError as exc:
        raise ConfigError(f"section [{exc.section}] appears twice") from None
    except configparser.Error as exc:
        raise ConfigError(f"malformed configuration: {exc}") from None

    values: dict[str, Any] = {}
    for sec in parser.sections():
        if sec != "__top__" and sec not in SECTIONS:
            raise ConfigError(f"unknown section [{sec}]")
        for raw, text_val in parser.items(sec):
            key = _resolve_key(raw, None if sec == "__top__" else sec)
            if key in values:
                raise ConfigError("given twice", key)
            values[key] = _convert(key, text_val)
    if overrides:
        values.update(parse_overrides(overrides))
    missing = [k for k in REQUIRED if k not in values]
    if missing:
        raise ConfigError("required key missing", missing[0])
    return RunConfig(**values)


def load_config(path, overrides=None) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read(), overrides)
