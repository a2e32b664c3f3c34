"""Fluctuations of the monitor energy flow.

Closed forms for the Poisson noise S0, the backaction noise S1 and the Fano
factor, and Monte Carlo estimators of the energy-flow correlation and its
spectrum from trajectory ensembles.
"""
import functools
import logging
import math
from collections import deque
from dataclasses import dataclass
from typing import Any

import numpy as np
import scipy.fft
import scipy.linalg

from qmonitor.energetics import monitor_flow
from qmonitor.lindblad import (
    Liouvillian,
    check_step,
    expectation_functional,
    measurement_superoperator,
    physics_liouvillian,
    rk4_propagator,
    spectral_gap,
    steady_state,
    trace_functional,
    vec,
)
from qmonitor.qubit import DensityMatrix, Physics, QubitParams, Rates
from qmonitor.trajectory import (
    TrajectoryConfig,
    TrajectoryRecord,
    check_rare_jump_regime,
    run_ensemble,
)

logger = logging.getLogger(__name__)

DEFAULT_BIN_WIDTH = 0.1
EXCESS_ENERGY_STEP = 0.01
EXCESS_ENERGY_TOL = 1e-10
EXCESS_ENERGY_HORIZON = 50.0
TRIANGLE_TOL = 1e-10
SUBTRACT_MODES = ("solver", "sample")


class FanoDivergenceError(ValueError):
    pass


class ExcessEnergyError(ValueError):
    def __init__(self, message: str, tail_estimate: float):
        super().__init__(f"{message} (tail estimate {tail_estimate:.3e})")
        self.tail_estimate = tail_estimate


@dataclass(frozen=True)
class NoiseEstimate:
    s0: float
    s1_dc: float
    fano: float
    s0_stderr: float = 0.0
    s1_stderr: float = 0.0
    fano_stderr: float = 0.0
    q_jump: float = math.nan
    q_ex: float = math.nan

    def __post_init__(self):
        if self.s0 < 0:
            raise ValueError(f"Poisson noise must be non-negative, got {self.s0}")
        if self.s0 > 0 and math.isfinite(self.fano):
            ratio = (self.s0 + self.s1_dc) / self.s0
            if abs(self.fano - ratio) > 1e-9 * max(1.0, abs(ratio)):
                raise ValueError(f"fano={self.fano} disagrees with (s0 + s1)/s0 = {ratio}")


# Weak-coupling closed forms; angles broadcast as numpy arrays.

def sigma_z_weak_coupling(theta_m, theta_n, r: Rates, gamma: float):
    cm, cn = np.cos(theta_m), np.cos(theta_n)
    return -(2 * r.gm - gamma * (cm - cn)) / (2 * r.gp + gamma * (1 - cm * cn))


def rho_mm_weak_coupling(theta_m, sigma_z):
    """<m|rho|m> with the steady-state coherences neglected."""
    return 0.5 * (1 - sigma_z * np.cos(theta_m))


def poisson_zero_feedback_angle(sigma_z: float) -> float:
    """theta_n at which the jump lands on the steady-state energy, so S0 = 0."""
    if abs(sigma_z) > 1:
        raise ValueError(f"<sigma_z> = {sigma_z} outside [-1, 1]")
    return math.acos(-sigma_z)


def s0_weak_coupling(theta_m, theta_n, r: Rates, gamma: float, q: QubitParams = QubitParams()):
    sz = sigma_z_weak_coupling(theta_m, theta_n, r, gamma)
    rho_mm = rho_mm_weak_coupling(theta_m, sz)
    return 0.5 * gamma * q.delta**2 * (sz + np.cos(theta_n)) ** 2 * rho_mm


def q_jump(rho_ss, q: QubitParams, theta_n: float) -> float:
    """Energy delivered by one jump from the steady state into |n>."""
    sigma_z = DensityMatrix(np.asarray(rho_ss)).sigma_z
    return -0.5 * q.delta * (math.cos(theta_n) + sigma_z)


def transient_initial_flow(theta_m, theta_n, gamma: float, q: QubitParams = QubitParams()):
    """J(t=0) right after a jump into |n>."""
    return -0.25 * gamma * q.delta * np.sin(theta_m - theta_n) * np.sin(theta_n)


def _monitor_flow_row(physics: Physics) -> np.ndarray:
    """Row vector j with j @ vec(rho) == tr[H0 D_M rho]."""
    h_row = expectation_functional(physics.qubit.hamiltonian)
    return h_row @ measurement_superoperator(physics.monitor)


def transient_flow(
    physics: Physics, t_end: float, dt: float = EXCESS_ENERGY_STEP
) -> tuple[np.ndarray, np.ndarray]:
    """(times, J(t)) for rho(0) = |n><n|."""
    L = physics_liouvillian(physics)
    check_step(dt, L.delta)
    propagator = rk4_propagator(L, dt)
    j_row = _monitor_flow_row(physics)
    n_steps = int(round(t_end / dt))
    v = vec(physics.monitor.feedback.projector())
    flows = np.empty(n_steps + 1)
    flows[0] = (j_row @ v).real
    for step in range(1, n_steps + 1):
        v = propagator @ v
        flows[step] = (j_row @ v).real
    return np.arange(n_steps + 1) * dt, flows


def _at_angles(physics: Physics, theta_m: float | None, theta_n: float | None) -> Physics:
    if theta_m is None and theta_n is None:
        return physics
    return physics.with_angles(
        physics.monitor.measure.theta if theta_m is None else theta_m,
        physics.monitor.feedback.theta if theta_n is None else theta_n,
    )


@dataclass(frozen=True)
class ExcessEnergyReport:
    q_ex: float
    tail_estimate: float
    t_end: float
    method: str


def _integrate_excess(physics: Physics, L: Liouvillian, j_ss: float, dt: float) -> ExcessEnergyReport:
    check_step(dt, L.delta)
    mc = physics.monitor
    propagator = rk4_propagator(L, dt)
    j_row = _monitor_flow_row(physics)
    tol = EXCESS_ENERGY_TOL * max(abs(j_ss), mc.gamma * physics.qubit.delta)
    period_steps = max(1, math.ceil(2 * math.pi / physics.qubit.delta / dt))
    gap = spectral_gap(L)
    if gap <= 0:
        raise ExcessEnergyError("generator has no relaxing mode", math.inf)
    # without a bath the monitor alone relaxes the qubit; the bare-bath gap is gp / 2
    relaxation_rate = physics.rates.gp if physics.rates.gp > 0 else 2 * gap
    n_max = math.ceil(EXCESS_ENERGY_HORIZON / relaxation_rate / dt)

    v = vec(mc.feedback.projector())
    previous = (j_row @ v).real - j_ss
    recent: deque[float] = deque([abs(previous)], maxlen=period_steps)
    total = 0.0
    for step in range(1, n_max + 1):
        v = propagator @ v
        deviation = (j_row @ v).real - j_ss
        total += 0.5 * dt * (previous + deviation)
        previous = deviation
        recent.append(abs(deviation))
        if len(recent) == period_steps and max(recent) < tol:
            return ExcessEnergyReport(total, max(recent) / gap, step * dt, "integrate")
    raise ExcessEnergyError(
        f"transient flow not settled by t = {n_max * dt:.1f}", max(recent) / gap
    )


def _resolvent_excess(physics: Physics, L: Liouvillian) -> ExcessEnergyReport:
    """Q_ex = j @ x with L x = -(rho(0) - rho_ss), x traceless."""
    rho_ss = steady_state(L)
    rhs = -(vec(physics.monitor.feedback.projector()) - vec(rho_ss))
    system = L.matrix.copy()
    system[0, :] = trace_functional()
    rhs[0] = 0.0
    x = scipy.linalg.solve(system, rhs)
    return ExcessEnergyReport(float((_monitor_flow_row(physics) @ x).real), 0.0, math.inf, "resolvent")


def excess_energy_report(
    physics: Physics,
    theta_m: float | None = None,
    theta_n: float | None = None,
    *,
    method: str = "integrate",
    dt: float = EXCESS_ENERGY_STEP,
) -> ExcessEnergyReport:
    """Integral of J(t) - J after a jump into |n>.

    method="integrate" follows the transient with the RK4 engine until it
    settles; method="resolvent" solves the generator's linear system exactly.
    """
    physics = _at_angles(physics, theta_m, theta_n)
    if physics.monitor.gamma == 0:
        return ExcessEnergyReport(0.0, 0.0, 0.0, method)

    L = physics_liouvillian(physics)
    if method == "resolvent":
        return _resolvent_excess(physics, L)
    if method != "integrate":
        raise ValueError(f"unknown excess-energy method {method!r}")
    j_ss = monitor_flow(steady_state(L), physics.qubit, physics.monitor).j_total
    return _integrate_excess(physics, L, j_ss, dt)


def excess_energy(
    physics: Physics,
    theta_m: float | None = None,
    theta_n: float | None = None,
    *,
    method: str = "integrate",
    dt: float = EXCESS_ENERGY_STEP,
) -> float:
    return excess_energy_report(physics, theta_m, theta_n, method=method, dt=dt).q_ex


def s0_analytic(rho_ss, physics: Physics) -> float:
    """2 gamma rho_mm Q_jump^2, which equals 2 Q_jump J^(2)."""
    mc = physics.monitor
    rho_mm = DensityMatrix(np.asarray(rho_ss)).population(mc.measure)
    jump = q_jump(rho_ss, physics.qubit, mc.feedback.theta)
    return 2 * mc.gamma * rho_mm * jump**2


def _backaction(gamma: float, rho_mm: float, jump: float, excess: float) -> float:
    return 4 * gamma * rho_mm * (jump + 0.5 * excess) * excess


def s1_analytic(
    physics: Physics, theta_m: float | None = None, theta_n: float | None = None, **kwargs: Any
) -> float:
    physics = _at_angles(physics, theta_m, theta_n)
    rho_ss = steady_state(physics_liouvillian(physics))
    report = excess_energy_report(physics, **kwargs)
    logger.debug(f"Q_ex = {report.q_ex:.6e} (tail estimate {report.tail_estimate:.1e})")
    mc = physics.monitor
    jump = q_jump(rho_ss, physics.qubit, mc.feedback.theta)
    return _backaction(mc.gamma, rho_ss.population(mc.measure), jump, report.q_ex)


def fano(
    physics: Physics, theta_m: float | None = None, theta_n: float | None = None, **kwargs: Any
) -> float:
    """(1 + Q_ex/Q_jump)^2."""
    physics = _at_angles(physics, theta_m, theta_n)
    rho_ss = steady_state(physics_liouvillian(physics))
    jump = q_jump(rho_ss, physics.qubit, physics.monitor.feedback.theta)
    if jump == 0:
        raise FanoDivergenceError("Fano factor diverges: Q_jump = 0")
    return (1 + excess_energy(physics, **kwargs) / jump) ** 2


def fano_ratio(s0: float, s1: float) -> float:
    if s0 == 0:
        raise FanoDivergenceError("Fano factor diverges: S0 = 0")
    return (s0 + s1) / s0


@dataclass(frozen=True)
class AnalyticNoise:
    estimate: NoiseEstimate
    q_ex_tail: float
    rho_ss: DensityMatrix


def analytic_noise(physics: Physics, **kwargs: Any) -> AnalyticNoise:
    """Closed-form S0, S1 and Fano factor at the configured monitor point."""
    mc = physics.monitor
    rho_ss = steady_state(physics_liouvillian(physics))
    jump = q_jump(rho_ss, physics.qubit, mc.feedback.theta)
    report = excess_energy_report(physics, **kwargs)
    rho_mm = rho_ss.population(mc.measure)

    j2 = monitor_flow(rho_ss, physics.qubit, mc).j2
    s0 = 2 * mc.gamma * rho_mm * jump**2
    if abs(s0 - 2 * jump * j2) > 1e-12 * max(1.0, abs(s0)):
        raise AssertionError(f"S0 = {s0} but 2 Q_jump J2 = {2 * jump * j2}")
    s1 = _backaction(mc.gamma, rho_mm, jump, report.q_ex)

    if jump == 0 or s0 == 0:
        fano_value = math.inf if s1 > 0 else math.nan
    else:
        fano_value = (1 + report.q_ex / jump) ** 2
        ratio = fano_ratio(s0, s1)
        if abs(fano_value - ratio) > TRIANGLE_TOL * max(1.0, abs(ratio)):
            raise AssertionError(f"(1 + Q_ex/Q_jump)^2 = {fano_value} but (S0 + S1)/S0 = {ratio}")
    estimate = NoiseEstimate(s0, s1, fano_value, q_jump=jump, q_ex=report.q_ex)
    return AnalyticNoise(estimate, report.tail_estimate, rho_ss)


# Monte Carlo estimators

def autocovariance_sums(x: np.ndarray, max_lag: int) -> np.ndarray:
    """sum_j x[..., j] x[..., j + L] for L = 0..max_lag, by zero-padded FFT."""
    n = x.shape[-1]
    size = scipy.fft.next_fast_len(2 * n)
    spectrum = scipy.fft.rfft(x, n=size, axis=-1)
    sums = scipy.fft.irfft(spectrum * spectrum.conj(), n=size, axis=-1)
    return sums[..., : max_lag + 1]


@dataclass
class MomentSums:
    """Sums over trajectories of per-trajectory estimates, merged in chunk order."""

    count: int
    total: np.ndarray
    squares: np.ndarray
    cross: float  # sum of s0_i * s1_dc_i

    def merge(self, other: "MomentSums") -> "MomentSums":
        return MomentSums(
            self.count + other.count,
            self.total + other.total,
            self.squares + other.squares,
            self.cross + other.cross,
        )


@dataclass(frozen=True)
class _Layout:
    """Positions of the per-trajectory quantities in a feature vector."""

    n_lags: int

    @property
    def flow(self) -> int:
        return 0

    @property
    def c0(self) -> int:
        return 1

    @property
    def lags(self) -> slice:
        return slice(2, 2 + self.n_lags)

    @property
    def spectrum(self) -> slice:
        return slice(2 + self.n_lags, 2 + 2 * self.n_lags)

    @property
    def size(self) -> int:
        return 2 + 2 * self.n_lags


@dataclass(frozen=True)
class CorrelationSettings:
    dt: float
    bin_width: float
    max_lag_bins: int
    j_ss: float
    subtract: str = "solver"

    def __post_init__(self):
        if self.subtract not in SUBTRACT_MODES:
            raise ValueError(f"unknown subtraction {self.subtract!r}; use one of {SUBTRACT_MODES}")
        if self.max_lag_bins < 1:
            raise ValueError("max lag must cover at least one bin")
        if abs(self.bin_steps * self.dt - self.bin_width) > 1e-9 * self.bin_width:
            raise ValueError(f"bin width {self.bin_width} is not a multiple of dt={self.dt}")

    @classmethod
    def from_times(
        cls, dt: float, j_ss: float, max_lag: float, bin_width: float = DEFAULT_BIN_WIDTH,
        subtract: str = "solver",
    ) -> "CorrelationSettings":
        return cls(dt, bin_width, int(round(max_lag / bin_width)), j_ss, subtract)

    @property
    def bin_steps(self) -> int:
        return max(1, int(round(self.bin_width / self.dt)))

    def n_bins(self, n_steps: int) -> int:
        n_bins = n_steps // self.bin_steps
        if n_bins <= self.max_lag_bins:
            raise ValueError(
                f"window of {n_bins} bins is shorter than the requested max lag "
                f"({self.max_lag_bins} bins)"
            )
        return n_bins


def trajectory_moments(
    binned: np.ndarray, sum_q: np.ndarray, sum_q2: np.ndarray, n_steps: int,
    settings: CorrelationSettings,
) -> MomentSums:
    """Per-trajectory correlation and spectrum estimates, summed over the batch.

    binned holds raw bin sums of Q = q1 + q2 with shape (batch, n_bins).
    """
    k = settings.bin_steps
    n_bins = binned.shape[1]
    n_lags = settings.max_lag_bins + 1
    if settings.subtract == "solver":
        level = np.full(len(binned), settings.j_ss * settings.dt)
    else:
        level = sum_q / n_steps

    c0 = sum_q2 / n_steps - 2 * level * sum_q / n_steps + level**2
    fluctuation = binned - k * level[:, None]
    lag_cov = autocovariance_sums(fluctuation, settings.max_lag_bins) / (
        n_bins - np.arange(n_lags)
    )
    lag_cov[:, 0] -= k * c0
    s1 = (2 / settings.bin_width) * scipy.fft.dct(lag_cov, type=1, axis=-1)

    layout = _Layout(n_lags)
    features = np.empty((len(binned), layout.size))
    features[:, layout.flow] = sum_q / n_steps / settings.dt
    features[:, layout.c0] = c0
    features[:, layout.lags] = lag_cov
    features[:, layout.spectrum] = s1
    s0 = 2 * c0 / settings.dt
    return MomentSums(
        len(binned),
        features.sum(axis=0),
        np.square(features).sum(axis=0),
        float((s0 * s1[:, 0]).sum()),
    )


class CorrelationAccumulator:
    """Streams Q into bins while trajectories run; keeps no per-step history."""

    def __init__(self, traj_indices, n_record: int, settings: CorrelationSettings):
        self.settings = settings
        self.n_steps = n_record
        self.n_bins = settings.n_bins(n_record)
        batch = len(traj_indices)
        self.binned = np.zeros((batch, self.n_bins))
        self.sum_q = np.zeros(batch)
        self.sum_q2 = np.zeros(batch)

    def record(self, step, states, jumped, q1, q2) -> None:
        energy = q1 + q2
        self.sum_q += energy
        self.sum_q2 += energy**2
        bin_index = step // self.settings.bin_steps
        if bin_index < self.n_bins:
            self.binned[:, bin_index] += energy

    def result(self) -> MomentSums:
        return trajectory_moments(self.binned, self.sum_q, self.sum_q2, self.n_steps, self.settings)


@dataclass(frozen=True, eq=False)
class CorrelationEstimate:
    settings: CorrelationSettings
    n_traj: int
    flow: float
    flow_stderr: float
    c0: float
    c0_stderr: float
    lag_times: np.ndarray
    c1: np.ndarray  # c1[0] is the in-bin limit tau -> 0+
    c1_stderr: np.ndarray
    omegas: np.ndarray
    s1: np.ndarray
    s1_stderr: np.ndarray
    s0_s1_covariance: float

    @property
    def s0(self) -> float:
        return 2 * self.c0 / self.settings.dt

    @property
    def s0_stderr(self) -> float:
        return 2 * self.c0_stderr / self.settings.dt

    def c1_two_sided(self) -> tuple[np.ndarray, np.ndarray]:
        """c1 on lags -max..max; even by construction."""
        tau = np.concatenate([-self.lag_times[:0:-1], self.lag_times])
        values = np.concatenate([self.c1[:0:-1], self.c1])
        return tau, values


def _mean_and_stderr(sums: MomentSums) -> tuple[np.ndarray, np.ndarray]:
    n = sums.count
    mean = sums.total / n
    if n < 2:
        return mean, np.full_like(mean, math.nan)
    variance = np.maximum(sums.squares / n - mean**2, 0.0) * n / (n - 1)
    return mean, np.sqrt(variance / n)


def correlation_from_moments(sums: MomentSums, settings: CorrelationSettings) -> CorrelationEstimate:
    n_lags = settings.max_lag_bins + 1
    layout = _Layout(n_lags)
    mean, stderr = _mean_and_stderr(sums)
    k2 = settings.bin_steps**2

    s0_mean = 2 * mean[layout.c0] / settings.dt
    s1_dc_mean = mean[layout.spectrum][0]
    n = sums.count
    covariance = (sums.cross / n - s0_mean * s1_dc_mean) * n / max(n - 1, 1) / n

    return CorrelationEstimate(
        settings=settings,
        n_traj=n,
        flow=float(mean[layout.flow]),
        flow_stderr=float(stderr[layout.flow]),
        c0=float(mean[layout.c0]),
        c0_stderr=float(stderr[layout.c0]),
        lag_times=np.arange(n_lags) * settings.bin_width,
        c1=mean[layout.lags] / k2,
        c1_stderr=stderr[layout.lags] / k2,
        omegas=np.pi * np.arange(n_lags) / (settings.max_lag_bins * settings.bin_width),
        s1=mean[layout.spectrum],
        s1_stderr=stderr[layout.spectrum],
        s0_s1_covariance=float(covariance),
    )


def correlation_mc(
    records: list[TrajectoryRecord],
    j_ss: float,
    dt: float,
    bin_width: float = DEFAULT_BIN_WIDTH,
    max_lag: float | None = None,
    subtract: str = "solver",
) -> CorrelationEstimate:
    """Correlation of the monitor energy flow from stored StepRecord streams."""
    if not records:
        raise ValueError("no trajectories to correlate")
    n_steps = len(records[0])
    if any(len(record) != n_steps for record in records):
        raise ValueError("records must share one window length")
    if max_lag is None:
        max_lag = n_steps * dt / 2
    settings = CorrelationSettings.from_times(dt, j_ss, max_lag, bin_width, subtract)
    k = settings.bin_steps
    n_bins = settings.n_bins(n_steps)

    energies = np.stack([record.energy() for record in records])
    binned = energies[:, : n_bins * k].reshape(len(records), n_bins, k).sum(axis=2)
    sums = trajectory_moments(
        binned, energies.sum(axis=1), np.square(energies).sum(axis=1), n_steps, settings
    )
    return correlation_from_moments(sums, settings)


@dataclass(frozen=True, eq=False)
class SpectrumEstimate:
    omegas: np.ndarray
    s_total: np.ndarray
    s_total_stderr: np.ndarray
    s1: np.ndarray
    s1_stderr: np.ndarray
    estimate: NoiseEstimate


def spectrum_mc(
    corr: CorrelationEstimate, q_jump_value: float = math.nan, q_ex_value: float = math.nan
) -> SpectrumEstimate:
    """S(omega) = S0 + S1(omega) on the cosine-transform grid of the lag series."""
    s0, s0_err = corr.s0, corr.s0_stderr
    s1_dc, s1_err = float(corr.s1[0]), float(corr.s1_stderr[0])
    if s0 > 0:
        fano_value = fano_ratio(s0, s1_dc)
        # delta method for 1 + S1/S0 with correlated numerator and denominator
        variance = (
            s1_err**2 / s0**2
            + s1_dc**2 * s0_err**2 / s0**4
            - 2 * s1_dc * corr.s0_s1_covariance / s0**3
        )
        fano_err = math.sqrt(max(variance, 0.0))
    else:
        fano_value, fano_err = math.nan, math.nan

    estimate = NoiseEstimate(
        s0, s1_dc, fano_value, s0_err, s1_err, fano_err, q_jump=q_jump_value, q_ex=q_ex_value
    )
    s_total = s0 + corr.s1
    s_total_err = np.sqrt(s0_err**2 + corr.s1_stderr**2)
    return SpectrumEstimate(corr.omegas, s_total, s_total_err, corr.s1, corr.s1_stderr, estimate)


@dataclass
class _CorrelationFactory:
    settings: CorrelationSettings

    def __call__(self, traj_indices, n_record):
        return CorrelationAccumulator(traj_indices, n_record, self.settings)


def estimate_noise_mc(
    physics: Physics,
    cfg: TrajectoryConfig,
    *,
    max_lag: float | None = None,
    bin_width: float = DEFAULT_BIN_WIDTH,
    subtract: str = "solver",
    workers: int = 1,
) -> tuple[CorrelationEstimate, SpectrumEstimate]:
    """Stationary-window ensemble estimate of the correlation and the spectrum."""
    cfg.validate(physics.rates, physics.qubit, stationary=True)
    check_rare_jump_regime(physics)
    rho_ss = steady_state(physics_liouvillian(physics))
    j_ss = monitor_flow(rho_ss, physics.qubit, physics.monitor).j_total
    if max_lag is None:
        max_lag = 20.0 / physics.rates.gp
    settings = CorrelationSettings.from_times(cfg.dt, j_ss, max_lag, bin_width, subtract)
    settings.n_bins(cfg.n_window)

    chunks = run_ensemble(
        cfg, physics, _CorrelationFactory(settings), n_record=cfg.n_window, workers=workers,
        desc="noise",
    )
    corr = correlation_from_moments(functools.reduce(MomentSums.merge, chunks), settings)
    jump = q_jump(rho_ss, physics.qubit, physics.monitor.feedback.theta)
    logger.info(
        f"MC flow {corr.flow:.6e} +- {corr.flow_stderr:.1e} against solver {j_ss:.6e}"
    )
    return corr, spectrum_mc(corr, q_jump_value=jump)
