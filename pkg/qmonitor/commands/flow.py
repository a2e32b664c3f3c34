"""Steady-state commands: steady, sweep-flow and cooling."""
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..config import Config, RunConfig
from ..energetics import UndefinedCopError, analytic_flow, balance_check, cop, steady_flows
from ..output import ResultWriter, chunked, run_metadata
from ..parallel import run_ordered
from ..qubit import Physics, effective_bath

log = logging.getLogger(__name__)

SWEEP_COLUMNS = ["theta_m", "theta_n", "J_numeric", "J_analytic", "J1", "J2", "Jc", "Jh", "J_bath"]
COOLING_COLUMNS = [
    "series", "theta_m", "theta_n", "J", "Jc", "Jh", "COP", "qubit_cooled", "bath_cooled",
]
# grid rows handed to the worker pool at a time; every finished block is flushed
BLOCK_SIZE = 1024
DEFAULT_COOLING_POINTS = 41
DEFAULT_MIRROR_POINTS = 101


@dataclass(frozen=True)
class FlowPoint:
    physics: Physics
    theta_m: float  # units of pi
    theta_n: float

    def at_angles(self) -> Physics:
        return self.physics.with_angles(self.theta_m * math.pi, self.theta_n * math.pi)


def flow_row(point: FlowPoint) -> dict[str, float]:
    physics = point.at_angles()
    rho, flows = steady_flows(physics)
    mc = physics.monitor
    row = {
        "theta_m": point.theta_m,
        "theta_n": point.theta_n,
        "J_numeric": flows.j_total,
        "J_analytic": float(
            analytic_flow(mc.measure.theta, mc.feedback.theta, physics.rates, mc.gamma, physics.qubit)
        ),
        "J1": flows.j1,
        "J2": flows.j2,
        "Jc": flows.jc,
        "Jh": flows.jh,
        "J_bath": flows.bath_total,
    }
    row.update({f"J_{name}": current for name, current in flows.bath_currents.items()})
    row.update({
        "rho_gg": rho.gg,
        "rho_ee": rho.ee,
        "rho_ge_re": rho.ge.real,
        "rho_ge_im": rho.ge.imag,
        "sigma_z": rho.sigma_z,
        "balance_residual": balance_check(rho, mc),
    })
    return row


def _sweep(points: list[FlowPoint], writer: ResultWriter, workers: int) -> list[dict[str, float]]:
    rows = []
    for block in chunked(points, BLOCK_SIZE):
        results = run_ordered(flow_row, block, workers=workers, desc="flow")
        writer.write_rows(results)
        rows.extend(results)
        log.info(f"Flow sweep: {len(rows)}/{len(points)} points")
    return rows


def _points(cfg: RunConfig) -> list[FlowPoint]:
    return [FlowPoint(cfg.physics, tm, tn) for tm, tn in cfg.sweep_points()]


def cmd_steady(cfg: RunConfig, out: Path, workers: int = 1) -> Path:
    """Steady state, flow breakdown and effective bath at each configured point."""
    physics = cfg.physics
    bath_columns = [f"J_{name}" for name in physics.bath_names()]
    columns = [
        "theta_m", "theta_n", "rho_gg", "rho_ee", "rho_ge_re", "rho_ge_im", "sigma_z",
        "J_numeric", "J1", "J2", *bath_columns, "J_bath", "balance_residual",
    ]
    omega_c = physics.baths.omega_c if physics.baths else Config.DEFAULT_OMEGA_C
    try:
        alpha_eff, t_eff = effective_bath(physics.rates, physics.qubit, omega_c)
    except ValueError as e:
        log.warning(f"No effective bath: {e}")
        alpha_eff, t_eff = math.nan, math.nan

    metadata = run_metadata(
        "steady", cfg.source, gamma_plus=physics.rates.gamma_plus_rate,
        gamma_minus=physics.rates.gamma_minus_rate, alpha_eff=alpha_eff, T_eff=t_eff,
    )
    with ResultWriter(out, columns, metadata) as writer:
        _sweep(_points(cfg), writer, workers)
    log.info(f"Effective bath: alpha_eff={alpha_eff:.6g}, T_eff={t_eff:.6g}")
    return out


def cmd_sweep_flow(cfg: RunConfig, out: Path, workers: int = 1) -> Path:
    """Row-major grid of numeric and closed-form flows."""
    if cfg.sweep is None:
        raise ValueError("sweep-flow needs a [sweep] section")
    points = _points(cfg)
    log.info(f"Sweeping {len(points)} monitor settings")
    with ResultWriter(out, SWEEP_COLUMNS, run_metadata("sweep-flow", cfg.source)) as writer:
        rows = _sweep(points, writer, workers)

    best = max(rows, key=lambda row: row["J_numeric"])
    worst = min(rows, key=lambda row: row["J_numeric"])
    log.info(
        f"J_max={best['J_numeric']:.6g} at ({best['theta_m']:.3f}, {best['theta_n']:.3f})pi, "
        f"J_min={worst['J_numeric']:.6g} at ({worst['theta_m']:.3f}, {worst['theta_n']:.3f})pi"
    )
    return out


def _cop(jc: float, jh: float) -> float:
    try:
        return cop(jc, jh)
    except UndefinedCopError:
        return math.nan


def _cooling_row(series: str, row: dict[str, float]) -> dict[str, float | str]:
    return {
        "series": series,
        "theta_m": row["theta_m"],
        "theta_n": row["theta_n"],
        "J": row["J_numeric"],
        "Jc": row["Jc"],
        "Jh": row["Jh"],
        "COP": _cop(row["Jc"], row["Jh"]),
        "qubit_cooled": row["J_numeric"] < 0,
        "bath_cooled": row["Jc"] > 0,
    }


def cmd_cooling(cfg: RunConfig, out: Path, workers: int = 1) -> Path:
    """J_c over the angle grid plus the COP series along theta_m + theta_n = pi."""
    physics = cfg.physics
    if physics.baths is None or set(physics.bath_names()) != {"h", "c"}:
        raise ValueError("cooling needs two baths named 'h' and 'c'")

    if cfg.sweep is not None and not (cfg.sweep.mirror or cfg.sweep.measurement_only):
        grid = cfg.sweep.points()
        mirror_axis = cfg.sweep.theta_m
    else:
        axis = np.linspace(0.0, 1.0, DEFAULT_COOLING_POINTS).tolist()
        grid = [(tm, tn) for tm in axis for tn in axis]
        mirror_axis = np.linspace(0.0, 1.0, DEFAULT_MIRROR_POINTS).tolist()
        if cfg.sweep is not None:
            mirror_axis = list(cfg.sweep.theta_m)

    grid_points = [FlowPoint(physics, tm, tn) for tm, tn in grid]
    mirror_points = [FlowPoint(physics, t, 1.0 - t) for t in mirror_axis]

    metadata = run_metadata("cooling", cfg.source)
    with ResultWriter(out, COOLING_COLUMNS, metadata) as writer:
        cooled_bath = cooled_qubit = 0
        for block in chunked(grid_points, BLOCK_SIZE):
            rows = [_cooling_row("grid", r) for r in run_ordered(flow_row, block, workers=workers)]
            writer.write_rows(rows)
            cooled_bath += sum(row["bath_cooled"] for row in rows)
            cooled_qubit += sum(row["qubit_cooled"] for row in rows)
        mirror_rows = [
            _cooling_row("mirror", r) for r in run_ordered(flow_row, mirror_points, workers=workers)
        ]
        writer.write_rows(mirror_rows)

    log.info(
        f"Cold bath cooled at {cooled_bath} of {len(grid_points)} grid points "
        f"(qubit cooled at {cooled_qubit})"
    )
    return out
