"""Superoperators, steady state and deterministic evolution of the master equation."""
import logging
from collections.abc import Callable
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from qmonitor.qubit import (
    IDENTITY,
    SIGMA_MINUS,
    SIGMA_PLUS,
    DensityMatrix,
    MonitorConfig,
    Physics,
    QubitParams,
    Rates,
    feedback_unitary,
)

logger = logging.getLogger(__name__)

# relative size of the second-smallest singular value below which the kernel is degenerate
_KERNEL_TOL = 1e-12
MAX_EVOLVE_STEP = 0.05
DEFAULT_EVOLVE_STEP = 0.01


class SteadyStateError(ValueError):
    def __init__(self, message: str, condition_number: float):
        super().__init__(f"{message} (condition number {condition_number:.3e})")
        self.condition_number = condition_number


class StepSizeError(ValueError):
    pass


# Column-stacking convention: vec(A X B) = (B^T kron A) vec(X).
def vec(rho) -> np.ndarray:
    return np.asarray(rho, dtype=complex).reshape(-1, order="F")


def unvec(v: np.ndarray) -> np.ndarray:
    return np.asarray(v).reshape(2, 2, order="F")


def left(a: np.ndarray) -> np.ndarray:
    return np.kron(IDENTITY, a)


def right(b: np.ndarray) -> np.ndarray:
    return np.kron(b.T, IDENTITY)


def sandwich(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.kron(b.T, a)


def commutator_superoperator(h: np.ndarray) -> np.ndarray:
    """-i[h, .]"""
    return -1j * (left(h) - right(h))


def lindblad_superoperator(jump: np.ndarray, rate: float) -> np.ndarray:
    number = jump.conj().T @ jump
    return rate * (sandwich(jump, jump.conj().T) - 0.5 * left(number) - 0.5 * right(number))


def trace_functional() -> np.ndarray:
    """Row vector t with t @ vec(X) == tr X."""
    return vec(IDENTITY)


def expectation_functional(op: np.ndarray) -> np.ndarray:
    """Row vector f with f @ vec(X) == tr(op X)."""
    return vec(op.T)


def bath_superoperator(r: Rates) -> np.ndarray:
    return lindblad_superoperator(SIGMA_MINUS, r.gamma_plus_rate) + lindblad_superoperator(
        SIGMA_PLUS, r.gamma_minus_rate
    )


def measurement_superoperator(mc: MonitorConfig) -> np.ndarray:
    p = mc.measure.projector()
    u = feedback_unitary(mc.measure, mc.feedback)
    return mc.gamma * (
        sandwich(u @ p, p @ u.conj().T) - 0.5 * left(p) - 0.5 * right(p)
    )


def dissipator_bath(rho, r: Rates) -> np.ndarray:
    """D_B[rho] for one bath (or the total rates of several)."""
    rho = np.asarray(rho, dtype=complex)
    out = np.zeros((2, 2), dtype=complex)
    for rate, jump in ((r.gamma_plus_rate, SIGMA_MINUS), (r.gamma_minus_rate, SIGMA_PLUS)):
        number = jump.conj().T @ jump
        out += rate * (jump @ rho @ jump.conj().T - 0.5 * (number @ rho + rho @ number))
    return out


def dissipator_meas(rho, mc: MonitorConfig) -> np.ndarray:
    rho = np.asarray(rho, dtype=complex)
    p = mc.measure.projector()
    u = feedback_unitary(mc.measure, mc.feedback)
    return mc.gamma * (u @ p @ rho @ p @ u.conj().T - 0.5 * (p @ rho + rho @ p))


@dataclass(frozen=True, eq=False)
class Liouvillian:
    """4x4 generator acting on column-stacked density matrices."""

    matrix: np.ndarray
    delta: float = 1.0

    def apply(self, rho) -> np.ndarray:
        return unvec(self.matrix @ vec(rho))

    def eigenvalues(self) -> np.ndarray:
        return scipy.linalg.eigvals(self.matrix)


def build_liouvillian(q: QubitParams, r: Rates, mc: MonitorConfig) -> Liouvillian:
    matrix = (
        commutator_superoperator(q.hamiltonian)
        + bath_superoperator(r)
        + measurement_superoperator(mc)
    )
    return Liouvillian(matrix, q.delta)


def physics_liouvillian(physics: Physics) -> Liouvillian:
    return build_liouvillian(physics.qubit, physics.rates, physics.monitor)


def steady_state(L: Liouvillian) -> DensityMatrix:
    """Unique null vector of L with unit trace.

    Row 0 of the generator is replaced by the trace constraint; populations
    obey tr(L rho) = 0 so that row carries no independent information.
    """
    singular = scipy.linalg.svdvals(L.matrix)
    scale = max(singular[0], np.finfo(float).tiny)
    if singular[-2] <= _KERNEL_TOL * scale:
        cond = np.inf if singular[-2] == 0 else singular[0] / singular[-2]
        raise SteadyStateError("generator kernel is not one-dimensional", cond)

    system = L.matrix.copy()
    system[0, :] = trace_functional()
    rhs = np.zeros(4, dtype=complex)
    rhs[0] = 1.0
    cond = np.linalg.cond(system)
    try:
        solution = scipy.linalg.solve(system, rhs)
    except scipy.linalg.LinAlgError as e:
        raise SteadyStateError(f"steady-state solve failed: {e}", cond) from e
    rho = unvec(solution)
    return DensityMatrix(rho / np.trace(rho).real)


def solve_steady_state(physics: Physics) -> DensityMatrix:
    return steady_state(physics_liouvillian(physics))


def spectral_gap(L: Liouvillian, tol: float = 1e-10) -> float:
    """Smallest decay rate among the non-stationary modes."""
    eigs = L.eigenvalues()
    decaying = -eigs.real[np.abs(eigs) > tol]
    return float(decaying.min())


def rk4_step(f: Callable[[np.ndarray], np.ndarray], y: np.ndarray, h: float) -> np.ndarray:
    k1 = f(y) * h
    k2 = f(y + 0.5 * k1) * h
    k3 = f(y + 0.5 * k2) * h
    k4 = f(y + k3) * h
    return y + (k1 + 2 * (k2 + k3) + k4) / 6


def rk4_propagator(L: Liouvillian, dt: float) -> np.ndarray:
    """One classical RK4 step of the linear system, as a matrix."""
    return rk4_step(lambda y: L.matrix @ y, np.eye(4, dtype=complex), dt)


def check_step(dt: float, delta: float, limit: float = MAX_EVOLVE_STEP) -> None:
    if not 0 < dt <= limit / delta:
        raise StepSizeError(f"time step {dt} outside (0, {limit / delta}]")


@dataclass(frozen=True, eq=False)
class EvolutionPath:
    times: np.ndarray
    states: np.ndarray  # (n, 2, 2)

    def __len__(self) -> int:
        return len(self.times)

    def density(self, index: int) -> DensityMatrix:
        return DensityMatrix(self.states[index])

    def expectation(self, op: np.ndarray) -> np.ndarray:
        return np.einsum("ij,nji->n", op, self.states).real

    def traces(self) -> np.ndarray:
        return np.einsum("nii->n", self.states).real


def evolve(
    rho0, L: Liouvillian, t_end: float, dt: float = DEFAULT_EVOLVE_STEP, sample_every: int = 1
) -> EvolutionPath:
    check_step(dt, L.delta)
    n_steps = int(round(t_end / dt))
    propagator = rk4_propagator(L, dt)

    v = vec(rho0)
    times = [0.0]
    states = [unvec(v).copy()]
    for step in range(1, n_steps + 1):
        v = propagator @ v
        if step % sample_every == 0 or step == n_steps:
            times.append(step * dt)
            states.append(unvec(v).copy())
    states = np.array(states)
    # exact Hermitian part; the RK4 map preserves it up to rounding
    states = 0.5 * (states + states.conj().transpose(0, 2, 1))
    return EvolutionPath(np.array(times), states)
