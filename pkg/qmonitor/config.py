"""Configuration management for qubit-monitor runs."""
import logging
import math
import os
import re
import sys

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
from dotenv import load_dotenv

from qmonitor.qubit import Bath, BathSpec, BlochState, MonitorConfig, Physics, QubitParams, Rates
from qmonitor.trajectory import TrajectoryConfig

env_path = Path(__file__).parent.parent / ".env"
load_dotenv(env_path)


class Config:
    THREADS: str = os.environ.get("QMONITOR_THREADS", "1")
    LOG_LEVEL: str = os.environ.get("QMONITOR_LOG_LEVEL", "INFO")
    OUTPUT_DIR: str = os.environ.get("QMONITOR_OUTPUT_DIR", "results")
    PROGRESS: str = os.environ.get("QMONITOR_PROGRESS", "1")
    DEFAULT_DT: float = 0.005
    DEFAULT_N_TRAJ: int = 100_000
    DEFAULT_BATCH_SIZE: int = 1000
    DEFAULT_OMEGA_C: float = 1000.0

    @classmethod
    def validate(cls) -> None:
        errors = []
        if not cls.THREADS.isdigit() or int(cls.THREADS) < 1:
            errors.append(f"QMONITOR_THREADS must be a positive integer, got {cls.THREADS!r}")
        if not isinstance(logging.getLevelName(cls.LOG_LEVEL.upper()), int):
            errors.append(f"QMONITOR_LOG_LEVEL {cls.LOG_LEVEL!r} is not a logging level")
        if cls.PROGRESS not in ("0", "1"):
            errors.append(f"QMONITOR_PROGRESS must be 0 or 1, got {cls.PROGRESS!r}")
        if errors:
            raise ValueError("\n".join(errors))

    @classmethod
    def get_threads(cls, override: int | None = None) -> int:
        return override if override is not None else int(cls.THREADS)

    @classmethod
    def get_output_path(cls, name: str | Path) -> Path:
        path = Path(name)
        if not path.is_absolute():
            path = Path(cls.OUTPUT_DIR) / path
        return path

    @classmethod
    def progress_enabled(cls) -> bool:
        return cls.PROGRESS != "0" and sys.stderr.isatty()


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


SECTIONS: dict[str, set[str]] = {
    "physics": {
        "delta", "gamma_plus", "gamma_minus", "temperatures", "couplings", "bath_names", "omega_c",
    },
    "monitor": {"gamma", "theta_m", "theta_n", "phi_m", "phi_n", "measurement_only"},
    "trajectory": {
        "dt", "t_equilibrate", "t_window", "n_traj", "master_seed", "batch_size", "bin_width",
        "max_lag", "initial",
    },
    "sweep": {
        "theta_m", "theta_n", "theta_m_points", "theta_n_points", "theta_m_range",
        "theta_n_range", "measurement_only", "mirror",
    },
    "output": {"path", "mode"},
}
REQUIRED_SECTIONS = ("physics", "monitor")
OUTPUT_MODES = ("analytic", "mc")

_SECTION_LINE = re.compile(r"^\s*\[\s*([A-Za-z0-9_-]+)\s*\]")
_KEY_LINE = re.compile(r"^\s*([A-Za-z0-9_-]+)\s*=")
_DECODE_LINE = re.compile(r"line (\d+)")


@dataclass(frozen=True)
class SweepGrid:
    """Angle grid in units of pi; points run row-major, theta_m outermost."""

    theta_m: tuple[float, ...]
    theta_n: tuple[float, ...] = ()
    measurement_only: bool = False
    mirror: bool = False

    def points(self) -> list[tuple[float, float]]:
        if self.measurement_only:
            return [(t, t) for t in self.theta_m]
        if self.mirror:
            return [(t, 1.0 - t) for t in self.theta_m]
        return [(tm, tn) for tm in self.theta_m for tn in self.theta_n]

    def __len__(self) -> int:
        return len(self.points())


@dataclass(frozen=True)
class RunConfig:
    physics: Physics
    trajectory: TrajectoryConfig
    sweep: SweepGrid | None = None
    output_path: str | None = None
    mode: str | None = None
    bin_width: float = 0.1
    max_lag: float = math.nan
    source: str = field(default="", repr=False)

    def with_seed(self, master_seed: int) -> "RunConfig":
        trajectory = TrajectoryConfig(**{**self.trajectory.__dict__, "master_seed": master_seed})
        return _replace(self, trajectory=trajectory)

    def with_trajectories(self, n_traj: int) -> "RunConfig":
        trajectory = TrajectoryConfig(**{**self.trajectory.__dict__, "n_traj": n_traj})
        return _replace(self, trajectory=trajectory)

    def sweep_points(self) -> list[tuple[float, float]]:
        """Sweep grid, or the single configured monitor point (units of pi)."""
        if self.sweep is not None:
            return self.sweep.points()
        mc = self.physics.monitor
        return [(mc.measure.theta / math.pi, mc.feedback.theta / math.pi)]

    @property
    def monte_carlo(self) -> bool:
        return self.mode != "analytic" and self.trajectory.n_traj > 0


def _replace(cfg: RunConfig, **changes: Any) -> RunConfig:
    return RunConfig(**{**cfg.__dict__, **changes})


class _Locator:
    """1-based line numbers of sections and keys in the config text."""

    def __init__(self, text: str):
        self.sections: dict[str, int] = {}
        self.keys: dict[tuple[str, str], int] = {}
        section = ""
        for number, line in enumerate(text.splitlines(), start=1):
            if match := _SECTION_LINE.match(line):
                section = match.group(1)
                self.sections.setdefault(section, number)
            elif match := _KEY_LINE.match(line):
                self.keys.setdefault((section, match.group(1)), number)

    def line(self, section: str, key: str | None = None) -> int | None:
        if key is not None and (section, key) in self.keys:
            return self.keys[(section, key)]
        return self.sections.get(section)


class _Section:
    def __init__(self, name: str, values: dict[str, Any], locator: _Locator):
        self.name = name
        self.values = values
        self.locator = locator

    def __contains__(self, key: str) -> bool:
        return key in self.values

    def error(self, key: str | None, message: str) -> ConfigError:
        where = f"[{self.name}]" if key is None else f"[{self.name}] {key}"
        return ConfigError(f"{where}: {message}", self.locator.line(self.name, key))

    def number(self, key: str, default: float | None = None) -> float:
        if key not in self.values:
            if default is None:
                raise self.error(key, "is required")
            return default
        value = self.values[key]
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise self.error(key, f"expected a number, got {value!r}")
        return float(value)

    def integer(self, key: str, default: int) -> int:
        value = self.values.get(key, default)
        if isinstance(value, bool) or not isinstance(value, int):
            raise self.error(key, f"expected an integer, got {value!r}")
        return value

    def flag(self, key: str, default: bool = False) -> bool:
        value = self.values.get(key, default)
        if not isinstance(value, bool):
            raise self.error(key, f"expected true or false, got {value!r}")
        return value

    def string(self, key: str, default: str | None = None) -> str | None:
        value = self.values.get(key, default)
        if value is not None and not isinstance(value, str):
            raise self.error(key, f"expected a string, got {value!r}")
        return value

    def numbers(self, key: str) -> list[float] | None:
        if key not in self.values:
            return None
        value = self.values[key]
        if not isinstance(value, list) or not all(
            isinstance(v, (int, float)) and not isinstance(v, bool) for v in value
        ):
            raise self.error(key, f"expected a list of numbers, got {value!r}")
        return [float(v) for v in value]


def _parse_physics(section: _Section) -> tuple[QubitParams, Rates | None, BathSpec | None]:
    try:
        qubit = QubitParams(section.number("delta", 1.0))
    except ValueError as e:
        raise section.error("delta", str(e)) from e

    has_rates = "gamma_plus" in section or "gamma_minus" in section
    has_baths = "temperatures" in section or "couplings" in section
    if has_rates and has_baths:
        raise section.error(None, "give either gamma_plus/gamma_minus or temperatures/couplings, not both")
    if not has_rates and not has_baths:
        raise section.error(None, "needs gamma_plus/gamma_minus or temperatures/couplings")

    if has_rates:
        try:
            rates = Rates(section.number("gamma_plus"), section.number("gamma_minus"))
        except ValueError as e:
            if isinstance(e, ConfigError):
                raise
            raise section.error("gamma_plus", str(e)) from e
        for key in ("bath_names", "omega_c"):
            if key in section:
                raise section.error(key, "only applies to the temperatures/couplings form")
        return qubit, rates, None

    temperatures = section.numbers("temperatures")
    couplings = section.numbers("couplings")
    if temperatures is None or couplings is None:
        raise section.error(None, "temperatures and couplings must both be given")
    if len(temperatures) != len(couplings):
        raise section.error("couplings", "must have one entry per temperature")
    names = section.values.get("bath_names")
    if names is None:
        names = ["h", "c"] if len(temperatures) == 2 else [f"b{i}" for i in range(len(temperatures))]
    if not isinstance(names, list) or len(names) != len(temperatures):
        raise section.error("bath_names", "must list one name per bath")
    try:
        baths = BathSpec(
            tuple(Bath(t, a, str(n)) for t, a, n in zip(temperatures, couplings, names)),
            omega_c=section.number("omega_c", Config.DEFAULT_OMEGA_C),
        )
    except ValueError as e:
        raise section.error(None, str(e)) from e
    return qubit, None, baths


def _parse_monitor(section: _Section) -> MonitorConfig:
    theta_m = section.number("theta_m", 0.0)
    phi_m = section.number("phi_m", 0.0)
    if section.flag("measurement_only"):
        for key in ("theta_n", "phi_n"):
            if key in section:
                raise section.error(key, "conflicts with measurement_only")
        theta_n, phi_n = theta_m, phi_m
    else:
        theta_n = section.number("theta_n", 0.0)
        phi_n = section.number("phi_n", 0.0)
    try:
        return MonitorConfig(
            section.number("gamma"),
            BlochState.from_pi_units(theta_m, phi_m),
            BlochState.from_pi_units(theta_n, phi_n),
        )
    except ValueError as e:
        if isinstance(e, ConfigError):
            raise
        raise section.error(None, str(e)) from e


def _axis(section: _Section, name: str) -> tuple[float, ...] | None:
    explicit = section.numbers(name)
    points_key, range_key = f"{name}_points", f"{name}_range"
    if explicit is not None:
        if points_key in section or range_key in section:
            raise section.error(name, f"conflicts with {points_key}/{range_key}")
        values = explicit
    elif points_key in section:
        points = section.integer(points_key, 0)
        bounds = section.numbers(range_key) or [0.0, 1.0]
        if len(bounds) != 2:
            raise section.error(range_key, "expected [start, stop]")
        if points < 1:
            raise section.error(points_key, "must be positive")
        values = np.linspace(bounds[0], bounds[1], points).tolist()
    elif range_key in section:
        raise section.error(range_key, f"needs {points_key}")
    else:
        return None
    if not values:
        raise section.error(name, "grid is empty")
    for value in values:
        if not 0.0 <= value <= 1.0:
            raise section.error(name, f"angle {value} outside [0, 1] (units of pi)")
    return tuple(values)


def _parse_sweep(section: _Section, monitor: MonitorConfig) -> SweepGrid:
    measurement_only = section.flag("measurement_only")
    mirror = section.flag("mirror")
    if measurement_only and mirror:
        raise section.error("mirror", "conflicts with measurement_only")
    theta_m = _axis(section, "theta_m")
    theta_n = _axis(section, "theta_n")
    if theta_m is None:
        raise section.error("theta_m", "grid is required in a sweep")
    if (measurement_only or mirror) and theta_n is not None:
        raise section.error("theta_n", "follows theta_m on this sweep and cannot be given")
    if theta_n is None and not (measurement_only or mirror):
        theta_n = (monitor.feedback.theta / math.pi,)
    return SweepGrid(theta_m, theta_n or (), measurement_only, mirror)


def _parse_trajectory(section: _Section, physics: Physics) -> tuple[TrajectoryConfig, float, float]:
    gp = physics.rates.gp

    def derived(factor: float) -> float:
        return factor / gp if gp > 0 else 0.0

    cfg = TrajectoryConfig(
        dt=section.number("dt", Config.DEFAULT_DT),
        t_equilibrate=section.number("t_equilibrate", derived(10.0)),
        t_window=section.number("t_window", derived(50.0)),
        n_traj=section.integer("n_traj", Config.DEFAULT_N_TRAJ),
        master_seed=section.integer("master_seed", 0),
        batch_size=section.integer("batch_size", Config.DEFAULT_BATCH_SIZE),
        initial=section.string("initial", "steady"),
    )
    if section.values:
        try:
            cfg.validate(physics.rates, physics.qubit, stationary=cfg.initial == "steady")
        except ValueError as e:
            raise section.error(None, str(e)) from e
    bin_width = section.number("bin_width", 0.1)
    max_lag = section.number("max_lag", derived(20.0))
    if bin_width <= 0:
        raise section.error("bin_width", "must be positive")
    return cfg, bin_width, max_lag


def parse_config(text: str) -> RunConfig:
    """Validated RunConfig from TOML text; angles are in units of pi."""
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as e:
        match = _DECODE_LINE.search(str(e))
        raise ConfigError(f"syntax error: {e}", int(match.group(1)) if match else None) from e

    locator = _Locator(text)
    for name, values in data.items():
        if name not in SECTIONS:
            raise ConfigError(f"unknown section [{name}]", locator.line(name))
        if not isinstance(values, dict):
            raise ConfigError(f"[{name}] must be a section", locator.line("", name))
        for key in values:
            if key not in SECTIONS[name]:
                raise ConfigError(f"[{name}] {key}: unknown key", locator.line(name, key))
    for name in REQUIRED_SECTIONS:
        if name not in data:
            raise ConfigError(f"missing section [{name}]")

    sections = {name: _Section(name, data.get(name, {}), locator) for name in SECTIONS}
    qubit, rates, baths = _parse_physics(sections["physics"])
    monitor = _parse_monitor(sections["monitor"])
    if baths is not None:
        physics = Physics.from_baths(qubit, baths, monitor)
    else:
        physics = Physics(qubit, rates, monitor)

    trajectory, bin_width, max_lag = _parse_trajectory(sections["trajectory"], physics)
    sweep = _parse_sweep(sections["sweep"], monitor) if "sweep" in data else None

    output = sections["output"]
    mode = output.string("mode")
    if mode is not None and mode not in OUTPUT_MODES:
        raise output.error("mode", f"expected one of {OUTPUT_MODES}, got {mode!r}")

    return RunConfig(
        physics=physics,
        trajectory=trajectory,
        sweep=sweep,
        output_path=output.string("path"),
        mode=mode,
        bin_width=bin_width,
        max_lag=max_lag,
        source=text,
    )


def load_config(path: str | Path) -> RunConfig:
    return parse_config(Path(path).read_text())
