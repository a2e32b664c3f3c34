"""Quantum-jump unraveling under continuous measurement and feedback.

Conditional states are propagated in batches as column-stacked vectors of
shape (batch, 4). Every trajectory draws its uniforms from a Philox stream
keyed by (master_seed, trajectory index), so results do not depend on how
trajectories are grouped or scheduled.
"""
import functools
import logging
import math
from collections.abc import Callable, Iterator, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Protocol

import numpy as np

from qmonitor.lindblad import (
    StepSizeError,
    bath_superoperator,
    commutator_superoperator,
    dissipator_bath,
    expectation_functional,
    left,
    right,
    solve_steady_state,
    trace_functional,
    unvec,
    vec,
)
from qmonitor.output import ResultWriter
from qmonitor.parallel import run_ordered
from qmonitor.qubit import DensityMatrix, MonitorConfig, Physics, QubitParams, Rates

logger = logging.getLogger(__name__)

DEFAULT_DT = 0.005
MAX_DT = 0.01
MAX_JUMP_PROBABILITY = 0.1
LINEAR_JUMP_LIMIT = 0.01
MIN_STEP_TRACE = 0.5
# multiple of 4: one Philox counter yields four doubles
UNIFORM_BLOCK = 4096
RARE_JUMP_RATIO = 10.0
MIN_MEAN_STATE_TRAJECTORIES = 100


class JumpStepError(ValueError):
    pass


@dataclass(frozen=True)
class TrajectoryConfig:
    dt: float = DEFAULT_DT
    t_equilibrate: float = 0.0
    t_window: float = 0.0
    n_traj: int = 1000
    master_seed: int = 0
    batch_size: int = 500
    initial: str = "steady"

    @classmethod
    def for_rates(cls, r: Rates, **overrides: Any) -> "TrajectoryConfig":
        """Config with t_equilibrate = 10/gamma_+ and t_window = 50/gamma_+ unless given."""
        overrides.setdefault("t_equilibrate", 10.0 / r.gp)
        overrides.setdefault("t_window", 50.0 / r.gp)
        return cls(**overrides)

    @property
    def n_equilibrate(self) -> int:
        return int(round(self.t_equilibrate / self.dt))

    @property
    def n_window(self) -> int:
        return int(round(self.t_window / self.dt))

    def validate(self, r: Rates, q: QubitParams = QubitParams(), stationary: bool = True) -> None:
        errors = []
        if not 0 < self.dt <= MAX_DT / q.delta:
            errors.append(f"dt={self.dt} must lie in (0, {MAX_DT / q.delta}]")
        if self.n_traj < 0:
            errors.append("n_traj must be non-negative")
        if self.batch_size < 1:
            errors.append("batch_size must be positive")
        if not 0 <= self.master_seed < 2**64:
            errors.append("master_seed must be an unsigned 64-bit integer")
        if self.initial not in ("steady", "pure"):
            errors.append(f"unknown initial condition {self.initial!r}")
        if stationary:
            if r.gp <= 0:
                errors.append("stationary windows need gamma_+ > 0")
            else:
                # slack for window lengths written as decimals
                if self.t_equilibrate < 10.0 / r.gp * (1 - 1e-9):
                    errors.append(f"t_equilibrate={self.t_equilibrate} is below 10/gamma_+")
                if self.t_window < 50.0 / r.gp * (1 - 1e-9):
                    errors.append(f"t_window={self.t_window} is below 50/gamma_+")
        if errors:
            raise ValueError("\n".join(errors))


@dataclass(frozen=True)
class StepRecord:
    jumped: bool
    q1: float
    q2: float


@dataclass(frozen=True, eq=False)
class TrajectoryRecord:
    """StepRecord stream of one trajectory, stored column-wise."""

    traj_index: int
    dt: float
    jumped: np.ndarray
    q1: np.ndarray
    q2: np.ndarray

    def __len__(self) -> int:
        return len(self.jumped)

    def __iter__(self) -> Iterator[StepRecord]:
        for jumped, q1, q2 in zip(self.jumped, self.q1, self.q2):
            yield StepRecord(bool(jumped), float(q1), float(q2))

    def energy(self) -> np.ndarray:
        return self.q1 + self.q2

    @property
    def jump_count(self) -> int:
        return int(self.jumped.sum())


def trajectory_uniforms(master_seed: int, traj_index: int, start_step: int, count: int) -> np.ndarray:
    """Uniforms for steps [start_step, start_step + count) of one trajectory."""
    if start_step % 4:
        raise ValueError("uniform blocks must start on a multiple of 4 steps")
    bit_generator = np.random.Philox(
        key=np.array([master_seed, traj_index], dtype=np.uint64),
        counter=np.array([start_step // 4, 0, 0, 0], dtype=np.uint64),
    )
    return np.random.Generator(bit_generator).random(count)


def jump_probability(rho_c, mc: MonitorConfig, dt: float) -> float:
    """gamma <m|rho_c|m> dt."""
    p = mc.gamma * DensityMatrix(np.asarray(rho_c)).population(mc.measure) * dt
    if p > MAX_JUMP_PROBABILITY:
        raise JumpStepError(f"jump probability {p:.3f} per step; reduce dt")
    return min(max(p, 0.0), 1.0)


def no_detection_dissipator(rho, mc: MonitorConfig) -> np.ndarray:
    """D_M^(1)[rho] = gamma <m|rho|m> rho - gamma/2 {P_m, rho}."""
    rho = np.asarray(rho, dtype=complex)
    p = mc.measure.projector()
    rho_mm = np.trace(p @ rho).real
    return mc.gamma * rho_mm * rho - 0.5 * mc.gamma * (p @ rho + rho @ p)


def sme_step(rho_c, jumped: bool, physics: Physics, dt: float) -> DensityMatrix:
    if jumped:
        return DensityMatrix(physics.monitor.feedback.projector())
    rho = np.asarray(rho_c, dtype=complex)
    h = physics.qubit.hamiltonian
    drift = (
        -1j * (h @ rho - rho @ h)
        + dissipator_bath(rho, physics.rates)
        + no_detection_dissipator(rho, physics.monitor)
    )
    updated = rho + drift * dt
    trace = np.trace(updated).real
    if trace < MIN_STEP_TRACE:
        raise StepSizeError(f"trace fell to {trace:.3f} in one step; reduce dt")
    return DensityMatrix(updated / trace)


def step_energies(
    rho_c, jumped: bool, mc: MonitorConfig, dt: float, q: QubitParams = QubitParams()
) -> tuple[float, float]:
    """(Q_c^(1), Q_c^(2)) for one step taken from rho_c."""
    rho = np.asarray(rho_c, dtype=complex)
    h = q.hamiltonian
    q1 = np.trace(h @ no_detection_dissipator(rho, mc)).real * dt
    q2 = np.trace(h @ (mc.feedback.projector() - rho)).real if jumped else 0.0
    return float(q1), float(q2)


class ConditionalEngine:
    """Batched form of sme_step / step_energies for one physics setting."""

    def __init__(self, physics: Physics, dt: float):
        mc = physics.monitor
        h = physics.qubit.hamiltonian
        p_m = mc.measure.projector()
        if mc.gamma * dt > MAX_JUMP_PROBABILITY:
            raise JumpStepError(f"gamma*dt = {mc.gamma * dt:.3f}; reduce dt")
        if mc.gamma * dt > LINEAR_JUMP_LIMIT:
            logger.warning(f"gamma*dt = {mc.gamma * dt:.3g} exceeds {LINEAR_JUMP_LIMIT}")

        self.dt = dt
        self.gamma = mc.gamma
        generator = (
            commutator_superoperator(h)
            + bath_superoperator(physics.rates)
            - 0.5 * mc.gamma * (left(p_m) + right(p_m))
        )
        # v -> v + dt * L v, applied as V @ euler_t for row-stacked batches
        self.euler_t = (np.eye(4) + dt * generator).T
        self.measure_row = expectation_functional(p_m)
        self.energy_row = expectation_functional(h)
        self.anticommutator_row = expectation_functional(h @ p_m + p_m @ h)
        self.trace_row = trace_functional()
        self.jump_state = vec(mc.feedback.projector())
        self.jump_energy = float(np.trace(h @ mc.feedback.projector()).real)

    def populations(self, states: np.ndarray) -> np.ndarray:
        return (states @ self.measure_row).real

    def jump_probabilities(self, states: np.ndarray) -> np.ndarray:
        return np.clip(self.gamma * self.dt * self.populations(states), 0.0, 1.0)

    def energies(self, states: np.ndarray, jumped: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        rho_mm = self.populations(states)
        energy = (states @ self.energy_row).real
        q1 = self.dt * self.gamma * (
            rho_mm * energy - 0.5 * (states @ self.anticommutator_row).real
        )
        q2 = np.where(jumped, self.jump_energy - energy, 0.0)
        return q1, q2

    def step(self, states: np.ndarray, jumped: np.ndarray) -> np.ndarray:
        rho_mm = self.populations(states)
        updated = states @ self.euler_t + (self.dt * self.gamma * rho_mm)[:, None] * states
        traces = (updated @ self.trace_row).real
        if traces.min() < MIN_STEP_TRACE:
            raise StepSizeError(f"trace fell to {traces.min():.3f} in one step; reduce dt")
        updated /= traces[:, None]
        # column-stacked (gg, eg, ge, ee): keep the Hermitian part exactly
        coherence = 0.5 * (updated[:, 1] + updated[:, 2].conj())
        updated[:, 1] = coherence
        updated[:, 2] = coherence.conj()
        updated[:, 0] = updated[:, 0].real
        updated[:, 3] = updated[:, 3].real
        updated[jumped] = self.jump_state
        return updated


class StepObserver(Protocol):
    def record(
        self, step: int, states: np.ndarray, jumped: np.ndarray, q1: np.ndarray, q2: np.ndarray
    ) -> None: ...

    def result(self) -> Any: ...


class RecordAccumulator:
    """Keeps the full StepRecord stream of every trajectory in the chunk."""

    def __init__(self, traj_indices: Sequence[int], n_record: int, dt: float):
        self.traj_indices = list(traj_indices)
        self.dt = dt
        batch = len(self.traj_indices)
        self.jumped = np.zeros((batch, n_record), dtype=bool)
        self.q1 = np.zeros((batch, n_record))
        self.q2 = np.zeros((batch, n_record))

    def record(self, step, states, jumped, q1, q2) -> None:
        self.jumped[:, step] = jumped
        self.q1[:, step] = q1
        self.q2[:, step] = q2

    def result(self) -> list[TrajectoryRecord]:
        return [
            TrajectoryRecord(index, self.dt, self.jumped[row], self.q1[row], self.q2[row])
            for row, index in enumerate(self.traj_indices)
        ]


@dataclass
class StateMoments:
    """Running sums of conditional states at the sampled steps."""

    count: int
    total: np.ndarray  # (n_samples, 4) complex
    squares: np.ndarray  # (n_samples, 4) real, |.|^2 per component

    def merge(self, other: "StateMoments") -> "StateMoments":
        return StateMoments(
            self.count + other.count, self.total + other.total, self.squares + other.squares
        )


class PathAccumulator:
    def __init__(self, traj_indices: Sequence[int], n_record: int, sample_every: int):
        self.sample_every = sample_every
        n_samples = (n_record - 1) // sample_every + 1
        self.moments = StateMoments(
            len(traj_indices),
            np.zeros((n_samples, 4), dtype=complex),
            np.zeros((n_samples, 4)),
        )

    def record(self, step, states, jumped, q1, q2) -> None:
        if step % self.sample_every:
            return
        sample = step // self.sample_every
        self.moments.total[sample] += states.sum(axis=0)
        self.moments.squares[sample] += (np.abs(states) ** 2).sum(axis=0)

    def result(self) -> StateMoments:
        return self.moments


@dataclass(frozen=True)
class ChunkTask:
    physics: Physics
    cfg: TrajectoryConfig
    traj_indices: tuple[int, ...]
    initial_state: np.ndarray
    n_skip: int
    n_record: int
    observer_factory: Callable[..., StepObserver]


def propagate(
    engine: ConditionalEngine,
    master_seed: int,
    traj_indices: Sequence[int],
    initial_state: np.ndarray,
    n_skip: int,
    n_record: int,
    observer: StepObserver,
) -> np.ndarray:
    """Run n_skip unobserved steps, then n_record observed ones; returns final states."""
    states = np.tile(vec(initial_state), (len(traj_indices), 1))
    total = n_skip + n_record
    for block_start in range(0, total, UNIFORM_BLOCK):
        count = min(UNIFORM_BLOCK, total - block_start)
        uniforms = np.stack(
            [trajectory_uniforms(master_seed, i, block_start, count) for i in traj_indices]
        )
        for offset in range(count):
            step = block_start + offset
            jumped = uniforms[:, offset] < engine.jump_probabilities(states)
            if step >= n_skip:
                q1, q2 = engine.energies(states, jumped)
                observer.record(step - n_skip, states, jumped, q1, q2)
            states = engine.step(states, jumped)
    return states


def run_chunk(task: ChunkTask) -> Any:
    engine = ConditionalEngine(task.physics, task.cfg.dt)
    observer = task.observer_factory(task.traj_indices, task.n_record)
    propagate(
        engine,
        task.cfg.master_seed,
        task.traj_indices,
        task.initial_state,
        task.n_skip,
        task.n_record,
        observer,
    )
    return observer.result()


def initial_condition(
    cfg: TrajectoryConfig, physics: Physics, rho0=None
) -> tuple[np.ndarray, int]:
    """(initial state, equilibration steps) for the configured start mode."""
    if rho0 is not None or cfg.initial == "pure":
        if rho0 is None:
            raise ValueError("pure-state start needs an initial density matrix")
        return np.asarray(rho0, dtype=complex), 0
    return np.asarray(solve_steady_state(physics)), cfg.n_equilibrate


def chunk_indices(n_traj: int, batch_size: int) -> list[tuple[int, ...]]:
    return [
        tuple(range(start, min(start + batch_size, n_traj)))
        for start in range(0, n_traj, batch_size)
    ]


def run_ensemble(
    cfg: TrajectoryConfig,
    physics: Physics,
    observer_factory: Callable[..., StepObserver],
    *,
    n_record: int,
    rho0=None,
    workers: int = 1,
    desc: str | None = "trajectories",
) -> list[Any]:
    """Chunk results in trajectory-index order.

    Chunks hold batch_size consecutive trajectories regardless of the worker
    count, so every chunk computes identical arithmetic in any schedule.
    """
    initial_state, n_skip = initial_condition(cfg, physics, rho0)
    tasks = [
        ChunkTask(physics, cfg, indices, initial_state, n_skip, n_record, observer_factory)
        for indices in chunk_indices(cfg.n_traj, cfg.batch_size)
    ]
    logger.info(
        f"Ensemble of {cfg.n_traj} trajectories in {len(tasks)} chunks "
        f"({n_skip} equilibration + {n_record} recorded steps)"
    )
    return run_ordered(run_chunk, tasks, workers=workers, desc=desc)


def run_trajectory(
    cfg: TrajectoryConfig, traj_index: int, physics: Physics, rho0=None
) -> TrajectoryRecord:
    """Record one trajectory's window; identical for identical (master_seed, traj_index)."""
    cfg.validate(physics.rates, physics.qubit, stationary=rho0 is None and cfg.initial == "steady")
    initial_state, n_skip = initial_condition(cfg, physics, rho0)
    factory = functools.partial(RecordAccumulator, dt=cfg.dt)
    task = ChunkTask(physics, cfg, (traj_index,), initial_state, n_skip, cfg.n_window, factory)
    return run_chunk(task)[0]


def run_trajectories(
    cfg: TrajectoryConfig, physics: Physics, n: int, rho0=None, workers: int = 1
) -> list[TrajectoryRecord]:
    cfg.validate(physics.rates, physics.qubit, stationary=rho0 is None and cfg.initial == "steady")
    factory = functools.partial(RecordAccumulator, dt=cfg.dt)
    limited = TrajectoryConfig(**{**cfg.__dict__, "n_traj": n})
    chunks = run_ensemble(limited, physics, factory, n_record=cfg.n_window, rho0=rho0, workers=workers)
    return [record for chunk in chunks for record in chunk]


@dataclass(frozen=True, eq=False)
class EnsemblePath:
    times: np.ndarray
    mean: np.ndarray  # (n, 2, 2)
    stderr: np.ndarray  # (n, 2, 2), standard error of each matrix element (modulus)
    n_traj: int

    def sigma_z(self) -> np.ndarray:
        return (self.mean[:, 1, 1] - self.mean[:, 0, 0]).real

    def sigma_z_stderr(self) -> np.ndarray:
        # populations are anticorrelated: sigma_z = 2 rho_ee - 1
        return 2 * self.stderr[:, 1, 1]

    def density(self, index: int) -> DensityMatrix:
        return DensityMatrix(self.mean[index])


@dataclass
class _PathSpec:
    sample_every: int

    def __call__(self, traj_indices, n_record):
        return PathAccumulator(traj_indices, n_record, self.sample_every)


def ensemble_mean_state(
    cfg: TrajectoryConfig,
    physics: Physics,
    rho0=None,
    t_end: float | None = None,
    sample_every: int = 1,
    workers: int = 1,
) -> EnsemblePath:
    """Pointwise ensemble average of the conditional state.

    With rho0 the ensemble starts from rho0 at t = 0 (pure-state start mode);
    otherwise it is sampled over the stationary window after equilibration.
    """
    if cfg.n_traj < MIN_MEAN_STATE_TRAJECTORIES:
        raise ValueError(f"ensemble mean needs at least {MIN_MEAN_STATE_TRAJECTORIES} trajectories")
    stationary = rho0 is None and cfg.initial == "steady"
    cfg.validate(physics.rates, physics.qubit, stationary=stationary)
    t_end = cfg.t_window if t_end is None else t_end
    n_record = int(round(t_end / cfg.dt)) + 1

    chunks = run_ensemble(
        cfg, physics, _PathSpec(sample_every), n_record=n_record, rho0=rho0, workers=workers,
        desc="mean state",
    )
    moments = functools.reduce(StateMoments.merge, chunks)
    n = moments.count
    mean = moments.total / n
    variance = np.maximum(moments.squares / n - np.abs(mean) ** 2, 0.0)
    stderr = np.sqrt(variance / max(n - 1, 1))

    times = np.arange(mean.shape[0]) * sample_every * cfg.dt
    as_matrices = np.stack([unvec(v) for v in mean])
    stderr_matrices = np.stack([unvec(s) for s in stderr])
    return EnsemblePath(times, as_matrices, stderr_matrices, n)


def check_rare_jump_regime(physics: Physics, rho_ss: DensityMatrix | None = None) -> float:
    """tau_0 / tau_r with tau_0 = 1/(gamma rho_mm) and tau_r = 2/gamma_+."""
    rho_ss = solve_steady_state(physics) if rho_ss is None else rho_ss
    jump_rate = physics.monitor.gamma * rho_ss.population(physics.monitor.measure)
    if jump_rate == 0:
        return math.inf
    tau_r = 2.0 / physics.rates.gp
    ratio = (1.0 / jump_rate) / tau_r
    if ratio < RARE_JUMP_RATIO:
        logger.warning(
            f"Jumps are not rare: tau_0/tau_r = {ratio:.2f} < {RARE_JUMP_RATIO:g}; "
            "the closed-form backaction noise assumes independent jumps"
        )
    return ratio


def dump_records(records: Sequence[TrajectoryRecord], path: Path, metadata: dict | None = None) -> Path:
    columns = ["traj", "step", "jumped", "q1", "q2"]
    with ResultWriter(path, columns, metadata) as writer:
        for record in records:
            for step, entry in enumerate(record):
                writer.write_row([record.traj_index, step, entry.jumped, entry.q1, entry.q2])
    return Path(path)


@dataclass(frozen=True)
class StepStatistics:
    """Jump count of a state held fixed; used to test the jump draw."""

    steps: int
    jumps: int
    probability: float = field(default=0.0)


def count_fixed_state_jumps(
    rho_c, physics: Physics, dt: float, steps: int, master_seed: int = 0, traj_index: int = 0
) -> StepStatistics:
    """Jumps over `steps` draws with the conditional state frozen at rho_c."""
    engine = ConditionalEngine(physics, dt)
    probability = float(engine.jump_probabilities(vec(rho_c)[None, :])[0])
    padded = steps + (-steps) % 4
    uniforms = trajectory_uniforms(master_seed, traj_index, 0, padded)[:steps]
    return StepStatistics(steps, int((uniforms < probability).sum()), probability)
