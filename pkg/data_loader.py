import configparser
import logging
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd

from closure import GasModel, Profile, build_closure
from config import (
    DEFAULT_EPSILON,
    DEFAULT_HBAR,
    DEFAULT_MESH_H,
    DEFAULT_NOZZLE_K,
    DEFAULT_S_EXPONENT,
    DEFAULT_SCHEDULE,
    DEFAULT_SEED,
    EPSILON_MAX,
    GRAD_TOL,
    MAX_ITERATIONS,
    NOZZLE_PRESETS,
    PROFILE_SAMPLES,
    PROFILE_PRESETS,
    QUADRATURE_ORDER,
    SHEAR_DENSITY_AMPLITUDE,
    SHEAR_VELOCITY_AMPLITUDE,
    TABLE_NODES,
    TOL_Q_REL,
)
from errors import ConfigurationError
from geometry import build_nozzle
from jetfit import JetProblem
from solver import EnergyParams

logger = logging.getLogger(__name__)


# =========================
# Two-column text
# =========================
def read_two_column(source, names=("x", "y")) -> pd.DataFrame:
    """Whitespace separated numeric columns; '#' starts a comment."""
    try:
        frame = pd.read_csv(source, sep=r"\s+", comment="#", header=None, names=list(names), engine="python")
    except (OSError, pd.errors.ParserError) as exc:
        raise ConfigurationError(f"cannot read two-column data from {source}: {exc}") from exc
    frame = frame.apply(pd.to_numeric, errors="coerce")
    bad = frame.isna().any(axis=1)
    if bad.any():
        row = int(np.flatnonzero(bad.to_numpy())[0])
        raise ConfigurationError(f"{source}: non-numeric value in data row {row + 1}")
    if len(frame) < 2:
        raise ConfigurationError(f"{source}: at least two rows are required")
    return frame


# =========================
# Profile presets
# =========================
def profile_preset(name: str, hbar: float):
    """(rho_bar, u_bar) for a named upstream preset on [0, hbar]."""
    if name == "uniform":
        return Profile.constant(1.0, "rho=1"), Profile.constant(1.0, "u=1")
    if name == "linear-velocity":
        return (
            Profile.constant(1.0, "rho=1"),
            Profile("u=1+x2", lambda x: 1.0 + np.asarray(x, dtype=float), lambda x: np.ones_like(np.asarray(x, dtype=float))),
        )
    if name == "smooth-shear":
        a, b = SHEAR_DENSITY_AMPLITUDE, SHEAR_VELOCITY_AMPLITUDE
        k = np.pi / hbar

        def rho(x):
            return 1.0 + a * np.cos(k * np.asarray(x, dtype=float))

        def rho_prime(x):
            return -a * k * np.sin(k * np.asarray(x, dtype=float))

        def u(x):
            x = np.asarray(x, dtype=float)
            return 1.0 + b * x**2 * (hbar - x) ** 2

        def u_prime(x):
            x = np.asarray(x, dtype=float)
            return b * (2.0 * x * (hbar - x) ** 2 - 2.0 * x**2 * (hbar - x))

        return Profile("smooth-shear rho", rho, rho_prime), Profile("smooth-shear u", u, u_prime)
    raise ConfigurationError(f"unknown profile preset '{name}'; choose one of {', '.join(PROFILE_PRESETS)}")


# =========================
# Run configuration
# =========================
@dataclass(frozen=True)
class GasConfig:
    gamma: float
    pbar: float
    profile: str = "uniform"
    rho_file: Optional[str] = None
    u_file: Optional[str] = None


@dataclass(frozen=True)
class NozzleConfig:
    preset: Optional[str] = "mirrored-exponential"
    samples_file: Optional[str] = None
    hbar: float = DEFAULT_HBAR
    h_star: float = 1.0
    k: float = DEFAULT_NOZZLE_K


@dataclass(frozen=True)
class NumericsConfig:
    epsilon: float = DEFAULT_EPSILON
    h: float = DEFAULT_MESH_H
    delta_chi: Optional[float] = None
    s: float = DEFAULT_S_EXPONENT
    k_mu: Optional[float] = None
    grad_tol: float = GRAD_TOL
    tol_q_rel: float = TOL_Q_REL
    max_iterations: int = MAX_ITERATIONS
    quadrature_order: int = QUADRATURE_ORDER
    table_nodes: int = TABLE_NODES
    grading: float = 0.0
    include_z_terms: bool = True
    seed: int = DEFAULT_SEED


@dataclass(frozen=True)
class ScheduleConfig:
    stages: tuple = tuple(DEFAULT_SCHEDULE)
    lambda_lo: Optional[float] = None
    lambda_hi: Optional[float] = None
    pbar_lo: Optional[float] = None
    pbar_hi: Optional[float] = None
    pbar_width: Optional[float] = None
    pressures: tuple = ()


@dataclass(frozen=True)
class OutputConfig:
    directory: str = "results"
    stations: tuple = ()


@dataclass(frozen=True)
class RunConfig:
    gas: GasConfig
    nozzle: NozzleConfig = field(default_factory=NozzleConfig)
    numerics: NumericsConfig = field(default_factory=NumericsConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    output: OutputConfig = field(default_factory=OutputConfig)
    source: Optional[str] = None
    text: str = ""

    @property
    def lam_bracket(self):
        if self.schedule.lambda_lo is None or self.schedule.lambda_hi is None:
            return None
        return (self.schedule.lambda_lo, self.schedule.lambda_hi)

    def with_pbar(self, pbar: float) -> "RunConfig":
        return replace(self, gas=replace(self.gas, pbar=float(pbar)))

    def with_seed(self, seed: int) -> "RunConfig":
        return replace(self, numerics=replace(self.numerics, seed=int(seed)))


def _stages(raw: str):
    stages = []
    for item in raw.split(","):
        mu, sep, R = item.strip().partition(":")
        if not sep:
            raise ValueError(f"stage '{item.strip()}' is not of the form mu:R")
        stages.append((float(mu), float(R)))
    if not stages:
        raise ValueError("at least one stage is required")
    return tuple(stages)


def _floats(raw: str):
    return tuple(float(v) for v in re.split(r"[,\s]+", raw.strip()) if v)


def _optional_str(raw: str):
    return raw.strip() or None


def _bool(raw: str):
    value = raw.strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"'{raw}' is not a boolean")


# section -> key -> (parser, required)
SCHEMA = {
    "gas": {
        "gamma": (float, True),
        "pbar": (float, True),
        "profile": (str.strip, False),
        "rho_file": (_optional_str, False),
        "u_file": (_optional_str, False),
    },
    "nozzle": {
        "preset": (_optional_str, False),
        "samples_file": (_optional_str, False),
        "hbar": (float, False),
        "h_star": (float, False),
        "k": (float, False),
    },
    "numerics": {
        "epsilon": (float, False),
        "h": (float, False),
        "delta_chi": (float, False),
        "s": (float, False),
        "k_mu": (float, False),
        "grad_tol": (float, False),
        "tol_q_rel": (float, False),
        "max_iterations": (int, False),
        "quadrature_order": (int, False),
        "table_nodes": (int, False),
        "grading": (float, False),
        "include_z_terms": (_bool, False),
        "seed": (int, False),
    },
    "schedule": {
        "stages": (_stages, False),
        "lambda_lo": (float, False),
        "lambda_hi": (float, False),
        "pbar_lo": (float, False),
        "pbar_hi": (float, False),
        "pbar_width": (float, False),
        "pressures": (_floats, False),
    },
    "output": {
        "directory": (str.strip, False),
        "stations": (_floats, False),
    },
}

SECTION_TYPES = {
    "gas": GasConfig,
    "nozzle": NozzleConfig,
    "numerics": NumericsConfig,
    "schedule": ScheduleConfig,
    "output": OutputConfig,
}


def _positions(text: str) -> dict:
    """(section, key) -> (line, column of the value), 1-based; (section, None) for headers."""
    positions = {}
    section = None
    for number, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped[0] in "#;":
            continue
        match = re.match(r"\s*\[([^\]]+)\]", line)
        if match:
            section = match.group(1).strip()
            positions[(section, None)] = (number, line.index("[") + 1)
            continue
        match = re.match(r"\s*([^=:\s][^=:]*?)\s*[=:]\s*", line)
        if match and section is not None:
            positions[(section, match.group(1).strip().lower())] = (number, match.end() + 1)
    return positions


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    """Parse the sectioned key = value run description; every failure names its key."""
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text, source=source)
    except configparser.MissingSectionHeaderError as exc:
        raise ConfigurationError(f"{source}: content before the first [section]", line=exc.lineno, column=1) from exc
    except configparser.DuplicateOptionError as exc:
        raise ConfigurationError(
            f"{source}: duplicate key '{exc.section}.{exc.option}'", key=f"{exc.section}.{exc.option}", line=exc.lineno
        ) from exc
    except configparser.DuplicateSectionError as exc:
        raise ConfigurationError(f"{source}: duplicate section [{exc.section}]", key=exc.section, line=exc.lineno) from exc
    except configparser.ParsingError as exc:
        line = exc.errors[0][0] if exc.errors else None
        raise ConfigurationError(f"{source}: malformed line", line=line, column=1) from exc

    positions = _positions(text)
    values = {name: {} for name in SCHEMA}
    for section in parser.sections():
        if section not in SCHEMA:
            line, column = positions.get((section, None), (None, None))
            raise ConfigurationError(f"{source}: unknown section [{section}]", key=section, line=line, column=column)
        for key, raw in parser.items(section):
            line, column = positions.get((section, key), (None, None))
            if key not in SCHEMA[section]:
                raise ConfigurationError(
                    f"{source}: unknown key '{section}.{key}'", key=f"{section}.{key}", line=line, column=column
                )
            convert, _ = SCHEMA[section][key]
            try:
                values[section][key] = convert(raw)
            except ValueError as exc:
                raise ConfigurationError(
                    f"{source}: invalid value for '{section}.{key}': {exc}", key=f"{section}.{key}", line=line, column=column
                ) from exc

    for section, keys in SCHEMA.items():
        for key, (_, required) in keys.items():
            if required and key not in values[section]:
                line, column = positions.get((section, None), (None, None))
                raise ConfigurationError(
                    f"{source}: missing required key '{section}.{key}'", key=f"{section}.{key}", line=line, column=column
                )

    config = RunConfig(
        **{name: SECTION_TYPES[name](**values[name]) for name in SCHEMA},
        source=source,
        text=text,
    )
    _validate(config, positions, source)
    return config


def _validate(config: RunConfig, positions: dict, source: str):
    def fail(section, key, message):
        line, column = positions.get((section, key), positions.get((section, None), (None, None)))
        raise ConfigurationError(f"{source}: {message}", key=f"{section}.{key}", line=line, column=column)

    eps = config.numerics.epsilon
    if not (0.0 < eps < EPSILON_MAX):
        fail("numerics", "epsilon", f"epsilon must lie in (0, {EPSILON_MAX:g}), got {eps:g}")
    if config.numerics.h <= 0.0:
        fail("numerics", "h", "mesh size must be positive")
    if config.gas.profile not in PROFILE_PRESETS and config.gas.profile != "file":
        fail("gas", "profile", f"profile must be one of {', '.join(PROFILE_PRESETS)} or 'file'")
    if config.gas.profile == "file" and not (config.gas.rho_file and config.gas.u_file):
        fail("gas", "profile", "profile 'file' needs gas.rho_file and gas.u_file")
    if config.nozzle.preset is None and config.nozzle.samples_file is None:
        fail("nozzle", "preset", "either nozzle.preset or nozzle.samples_file is required")
    if config.nozzle.preset is not None and config.nozzle.preset not in NOZZLE_PRESETS:
        fail("nozzle", "preset", f"preset must be one of {', '.join(NOZZLE_PRESETS)}")
    stages = config.schedule.stages
    if any(b[0] < a[0] or b[1] < a[1] for a, b in zip(stages, stages[1:])):
        fail("schedule", "stages", "stages must be nondecreasing in mu and R")


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    config = parse_config(text, source=str(path))
    logger.info("config loaded from %s", path)
    return config


# =========================
# Model and problem assembly
# =========================
def _resolve(config: RunConfig, name: Optional[str]) -> Optional[Path]:
    if name is None:
        return None
    path = Path(name)
    if not path.is_absolute() and config.source and Path(config.source).exists():
        path = Path(config.source).parent / path
    return path


def upstream_profiles(config: RunConfig):
    hbar = config.nozzle.hbar
    if config.gas.profile == "file":
        rho_data = read_two_column(_resolve(config, config.gas.rho_file), ("x2", "rho"))
        u_data = read_two_column(_resolve(config, config.gas.u_file), ("x2", "u"))
        rho_bar = Profile.from_samples(rho_data["x2"], rho_data["rho"], "rho file")
        u_bar = Profile.from_samples(u_data["x2"], u_data["u"], "u file")
    else:
        rho_bar, u_bar = profile_preset(config.gas.profile, hbar)
    return rho_bar, u_bar


def build_model(config: RunConfig, pbar: float = None) -> GasModel:
    rho_bar, u_bar = upstream_profiles(config)
    pbar = config.gas.pbar if pbar is None else pbar
    return GasModel(config.gas.gamma, pbar, rho_bar, u_bar, config.nozzle.hbar)


def build_nozzle_from_config(config: RunConfig):
    nozzle = config.nozzle
    samples = None
    if nozzle.samples_file is not None:
        samples = read_two_column(_resolve(config, nozzle.samples_file), ("x2", "x1"))
    return build_nozzle(nozzle.preset, samples, hbar=nozzle.hbar, k=nozzle.k, h_star=nozzle.h_star)


def energy_params(config: RunConfig) -> EnergyParams:
    n = config.numerics
    return EnergyParams(
        delta_chi=n.delta_chi,
        quadrature_order=n.quadrature_order,
        max_iterations=n.max_iterations,
        grad_tol=n.grad_tol,
        tol_q_rel=n.tol_q_rel,
        include_z_terms=n.include_z_terms,
    )


def build_problem(config: RunConfig, pbar: float = None) -> JetProblem:
    model = build_model(config, pbar)
    table = build_closure(model, config.numerics.epsilon, nodes=config.numerics.table_nodes)
    return JetProblem(
        table=table,
        nozzle=build_nozzle_from_config(config),
        h=config.numerics.h,
        params=energy_params(config),
        s=config.numerics.s,
        k_mu=config.numerics.k_mu,
        lam_bracket=config.lam_bracket,
        schedule=list(config.schedule.stages),
        grading=config.numerics.grading,
    )


def problem_factory(config: RunConfig):
    """Callable pbar -> JetProblem sharing everything but the upstream pressure."""
    nozzle = build_nozzle_from_config(config)
    params = energy_params(config)

    def make(pbar: float) -> JetProblem:
        model = build_model(config, pbar)
        table = build_closure(model, config.numerics.epsilon, nodes=config.numerics.table_nodes)
        return JetProblem(
            table=table, nozzle=nozzle, h=config.numerics.h, params=params, s=config.numerics.s,
            k_mu=config.numerics.k_mu, lam_bracket=None, schedule=list(config.schedule.stages),
            grading=config.numerics.grading,
        )

    return make


def pbar_threshold(config: RunConfig) -> float:
    """P̄_* = max ρ̄ū²/γ, available even when the configured P̄ is below it."""
    rho_bar, u_bar = upstream_profiles(config)
    x = np.linspace(0.0, config.nozzle.hbar, PROFILE_SAMPLES)
    return float(np.max(rho_bar(x) * u_bar(x) ** 2) / config.gas.gamma)
