"""Trajectory commands: trajectory, noise and spectrum."""
import logging
import math
from pathlib import Path

import numpy as np

from ..config import RunConfig
from ..lindblad import evolve, physics_liouvillian, solve_steady_state
from ..noise import analytic_noise, estimate_noise_mc, s0_weak_coupling
from ..output import ResultWriter, run_metadata
from ..qubit import SIGMA_Z, Physics
from ..trajectory import dump_records, ensemble_mean_state, run_trajectories

log = logging.getLogger(__name__)

NOISE_COLUMNS = [
    "theta_m", "theta_n", "S0_analytic", "S0_mc", "S0_stderr", "S1_analytic", "S1_mc",
    "S1_stderr", "fano_analytic", "fano_mc", "q_jump", "q_ex",
]
EXTRA_NOISE_COLUMNS = ["S0_weak", "q_ex_tail", "fano_stderr", "J_mc", "J_stderr"]
MEAN_STATE_COLUMNS = [
    "t", "sigma_z_mc", "sigma_z_stderr", "sigma_z_lindblad", "rho_ee_mc", "rho_ee_lindblad",
]
DEFAULT_DUMP = 1


def _stochastic_metadata(command: str, cfg: RunConfig, **extra) -> dict:
    trajectory = cfg.trajectory
    return run_metadata(
        command, cfg.source, seed=trajectory.master_seed, n_traj=trajectory.n_traj,
        dt=trajectory.dt, **extra,
    )


def _initial_state(cfg: RunConfig):
    # pure-state runs start in the post-jump state |n><n|
    if cfg.trajectory.initial == "pure":
        return cfg.physics.monitor.feedback.projector()
    return None


def cmd_trajectory(
    cfg: RunConfig, out: Path, workers: int = 1, n_dump: int | None = None,
    mean_state: bool = False, sample_every: int = 20,
) -> Path:
    """StepRecord dump of the first trajectories, or the ensemble-mean sigma_z path."""
    physics = cfg.physics
    rho0 = _initial_state(cfg)
    if not mean_state:
        n = DEFAULT_DUMP if n_dump is None else n_dump
        log.info(f"Recording {n} trajectories")
        records = run_trajectories(cfg.trajectory, physics, n, rho0=rho0, workers=workers)
        return dump_records(records, out, _stochastic_metadata("trajectory", cfg))

    trajectory = cfg.trajectory
    path = ensemble_mean_state(
        trajectory, physics, rho0=rho0, sample_every=sample_every, workers=workers
    )
    # stationary window: the deterministic reference is the steady state itself
    start = np.asarray(solve_steady_state(physics)) if rho0 is None else rho0
    reference = evolve(
        start, physics_liouvillian(physics), path.times[-1], dt=trajectory.dt,
        sample_every=sample_every,
    )
    metadata = _stochastic_metadata("trajectory", cfg, mean_state=True)
    with ResultWriter(out, MEAN_STATE_COLUMNS, metadata) as writer:
        sigma_z, sigma_z_err = path.sigma_z(), path.sigma_z_stderr()
        lindblad_sigma_z = reference.expectation(SIGMA_Z)
        for i, t in enumerate(path.times):
            writer.write_row([
                t, sigma_z[i], sigma_z_err[i], lindblad_sigma_z[i],
                path.mean[i, 1, 1].real, reference.states[i, 1, 1].real,
            ])
    spread = sigma_z_err > 0
    worst = np.max(np.abs(sigma_z - lindblad_sigma_z)[spread] / sigma_z_err[spread], initial=0.0)
    log.info(f"Largest sigma_z deviation from the Lindblad path: {worst:.2f} stderr")
    return out


def noise_row(
    physics: Physics, cfg: RunConfig, theta_m: float, theta_n: float, workers: int, subtract: str
) -> dict[str, float]:
    """Analytic and (optionally) Monte Carlo noise at one monitor point (angles in pi)."""
    point = physics.with_angles(theta_m * math.pi, theta_n * math.pi)
    analytic = analytic_noise(point)
    estimate = analytic.estimate
    row = {
        "theta_m": theta_m,
        "theta_n": theta_n,
        "S0_analytic": estimate.s0,
        "S0_weak": float(s0_weak_coupling(
            point.monitor.measure.theta, point.monitor.feedback.theta, point.rates,
            point.monitor.gamma, point.qubit,
        )),
        "S1_analytic": estimate.s1_dc,
        "fano_analytic": estimate.fano,
        "q_jump": estimate.q_jump,
        "q_ex": estimate.q_ex,
        "q_ex_tail": analytic.q_ex_tail,
    }
    if cfg.monte_carlo:
        corr, spectrum = estimate_noise_mc(
            point, cfg.trajectory, max_lag=cfg.max_lag, bin_width=cfg.bin_width,
            subtract=subtract, workers=workers,
        )
        mc = spectrum.estimate
        row.update({
            "S0_mc": mc.s0,
            "S0_stderr": mc.s0_stderr,
            "S1_mc": mc.s1_dc,
            "S1_stderr": mc.s1_stderr,
            "fano_mc": mc.fano,
            "fano_stderr": mc.fano_stderr,
            "J_mc": corr.flow,
            "J_stderr": corr.flow_stderr,
        })
    return row


def cmd_noise(cfg: RunConfig, out: Path, workers: int = 1, subtract: str = "solver") -> Path:
    """Noise sweep; MC columns appear when trajectories are requested."""
    points = cfg.sweep_points()
    if cfg.monte_carlo:
        columns = NOISE_COLUMNS + EXTRA_NOISE_COLUMNS
    else:
        columns = [c for c in NOISE_COLUMNS if "mc" not in c and "stderr" not in c]
        columns += ["S0_weak", "q_ex_tail"]
    metadata = _stochastic_metadata("noise", cfg, subtract=subtract)
    log.info(f"Noise at {len(points)} points ({'with' if cfg.monte_carlo else 'without'} MC)")
    with ResultWriter(out, columns, metadata) as writer:
        for theta_m, theta_n in points:
            writer.write_row(noise_row(cfg.physics, cfg, theta_m, theta_n, workers, subtract))
            log.info(f"Noise point ({theta_m:.4f}, {theta_n:.4f})pi done")
    return out


def correlation_path(out: Path) -> Path:
    return out.with_name(f"{out.stem}.correlation{out.suffix or '.csv'}")


def cmd_spectrum(cfg: RunConfig, out: Path, workers: int = 1, subtract: str = "solver") -> Path:
    """S(omega) and the c1(tau) series at the configured monitor point."""
    if cfg.trajectory.n_traj < 2:
        raise ValueError("spectrum needs at least two trajectories")
    physics = cfg.physics
    corr, spectrum = estimate_noise_mc(
        physics, cfg.trajectory, max_lag=cfg.max_lag, bin_width=cfg.bin_width,
        subtract=subtract, workers=workers,
    )
    estimate = spectrum.estimate
    metadata = _stochastic_metadata(
        "spectrum", cfg, subtract=subtract, bin_width=cfg.bin_width, S0=estimate.s0,
        S0_stderr=estimate.s0_stderr, S1_dc=estimate.s1_dc, S1_stderr=estimate.s1_stderr,
        fano=estimate.fano, fano_stderr=estimate.fano_stderr,
    )
    with ResultWriter(out, ["omega", "S", "S_stderr", "S1", "S1_stderr"], metadata) as writer:
        writer.write_rows(zip(
            spectrum.omegas, spectrum.s_total, spectrum.s_total_stderr, spectrum.s1,
            spectrum.s1_stderr,
        ))
    with ResultWriter(correlation_path(out), ["tau", "c1", "c1_stderr"], metadata) as writer:
        writer.write_rows(zip(corr.lag_times, corr.c1, corr.c1_stderr))
    return out
