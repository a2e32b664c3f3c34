"""Qubit states, operators and bath rates.

Basis order is (|g>, |e>) with |g> = |sigma_z = -1>. Energies are in units of
the qubit splitting and hbar = k_B = 1 throughout.
"""
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

logger = logging.getLogger(__name__)

KET_G = np.array([1.0, 0.0], dtype=complex)
KET_E = np.array([0.0, 1.0], dtype=complex)

IDENTITY = np.eye(2, dtype=complex)
SIGMA_X = np.array([[0, 1], [1, 0]], dtype=complex)
SIGMA_Z = np.array([[-1, 0], [0, 1]], dtype=complex)
# sigma_+ raises |g> -> |e>
SIGMA_PLUS = np.outer(KET_E, KET_G.conj())
SIGMA_MINUS = np.outer(KET_G, KET_E.conj())

# n(w) is set to zero beyond this exponent
_EXP_OVERFLOW = 700.0
_ANGLE_SLACK = 1e-12


@dataclass(frozen=True)
class BlochState:
    """Pure state cos(theta/2)|g> + e^{i phi} sin(theta/2)|e>."""

    theta: float
    phi: float = 0.0

    def __post_init__(self):
        theta = float(self.theta)
        if not (-_ANGLE_SLACK <= theta <= math.pi + _ANGLE_SLACK):
            raise ValueError(f"theta must lie in [0, pi], got {theta}")
        object.__setattr__(self, "theta", min(max(theta, 0.0), math.pi))
        object.__setattr__(self, "phi", float(self.phi) % (2 * math.pi))

    @classmethod
    def from_pi_units(cls, theta: float, phi: float = 0.0) -> "BlochState":
        return cls(theta * math.pi, phi * math.pi)

    def ket(self) -> np.ndarray:
        return np.array(
            [math.cos(self.theta / 2), np.exp(1j * self.phi) * math.sin(self.theta / 2)],
            dtype=complex,
        )

    def complement_ket(self) -> np.ndarray:
        """Orthogonal state sin(theta/2)|g> - e^{i phi} cos(theta/2)|e>."""
        return np.array(
            [math.sin(self.theta / 2), -np.exp(1j * self.phi) * math.cos(self.theta / 2)],
            dtype=complex,
        )

    def projector(self) -> np.ndarray:
        ket = self.ket()
        return np.outer(ket, ket.conj())


@dataclass(frozen=True, eq=False)
class DensityMatrix:
    """2x2 density matrix; Hermitian by construction and read-only."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.array(self.matrix, dtype=complex).reshape(2, 2)
        m = 0.5 * (m + m.conj().T)
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    def __array__(self, dtype=None, copy=None):
        return self.matrix if dtype is None else self.matrix.astype(dtype)

    @property
    def gg(self) -> float:
        return float(self.matrix[0, 0].real)

    @property
    def ee(self) -> float:
        return float(self.matrix[1, 1].real)

    @property
    def ge(self) -> complex:
        return complex(self.matrix[0, 1])

    @property
    def eg(self) -> complex:
        return complex(self.matrix[1, 0])

    @property
    def trace(self) -> float:
        return float(np.trace(self.matrix).real)

    @property
    def sigma_z(self) -> float:
        return self.ee - self.gg

    def population(self, state: BlochState) -> float:
        """<s|rho|s>."""
        ket = state.ket()
        return float((ket.conj() @ self.matrix @ ket).real)

    def min_eigenvalue(self) -> float:
        return float(np.linalg.eigvalsh(self.matrix)[0])

    def validate(self, trace_tol: float = 1e-10, positivity_tol: float = 1e-9) -> None:
        errors = []
        if abs(self.trace - 1.0) > trace_tol:
            errors.append(f"trace {self.trace!r} deviates from 1 by more than {trace_tol}")
        if self.min_eigenvalue() < -positivity_tol:
            errors.append(f"negative eigenvalue {self.min_eigenvalue()!r}")
        if errors:
            raise ValueError("\n".join(errors))


@dataclass(frozen=True)
class QubitParams:
    delta: float = 1.0

    def __post_init__(self):
        if not self.delta > 0:
            raise ValueError(f"qubit splitting must be positive, got {self.delta}")

    @property
    def hamiltonian(self) -> np.ndarray:
        return 0.5 * self.delta * SIGMA_Z


@dataclass(frozen=True)
class Bath:
    temperature: float
    alpha: float
    name: str = ""


@dataclass(frozen=True)
class BathSpec:
    """Ohmic baths sharing one cutoff frequency."""

    baths: tuple[Bath, ...]
    omega_c: float = 1000.0

    def __post_init__(self):
        object.__setattr__(self, "baths", tuple(self.baths))
        errors = []
        if not self.baths:
            errors.append("at least one bath is required")
        for index, bath in enumerate(self.baths):
            if not bath.temperature > 0:
                errors.append(f"bath {index}: temperature must be positive")
            if bath.alpha < 0:
                errors.append(f"bath {index}: coupling must be non-negative")
        if not self.omega_c > 0:
            errors.append("cutoff frequency must be positive")
        if errors:
            raise ValueError("\n".join(errors))

    @classmethod
    def hot_cold(
        cls, t_hot: float, t_cold: float, alpha_hot: float, alpha_cold: float,
        omega_c: float = 1000.0,
    ) -> "BathSpec":
        return cls(
            (Bath(t_hot, alpha_hot, "h"), Bath(t_cold, alpha_cold, "c")), omega_c=omega_c
        )

    def names(self) -> list[str]:
        return [bath.name or f"b{index}" for index, bath in enumerate(self.baths)]


@dataclass(frozen=True)
class Rates:
    """Total emission (Gamma_+) and absorption (Gamma_-) rates."""

    gamma_plus_rate: float
    gamma_minus_rate: float

    def __post_init__(self):
        if self.gamma_plus_rate < 0 or self.gamma_minus_rate < 0:
            raise ValueError("rates must be non-negative")

    @property
    def gp(self) -> float:
        return self.gamma_plus_rate + self.gamma_minus_rate

    @property
    def gm(self) -> float:
        return self.gamma_plus_rate - self.gamma_minus_rate

    def __add__(self, other: "Rates") -> "Rates":
        return Rates(
            self.gamma_plus_rate + other.gamma_plus_rate,
            self.gamma_minus_rate + other.gamma_minus_rate,
        )

    def temperature(self, q: QubitParams) -> float:
        if self.gamma_minus_rate == 0:
            return 0.0
        if self.gamma_plus_rate <= self.gamma_minus_rate:
            raise ValueError("no positive temperature for Gamma_+ <= Gamma_-")
        return q.delta / math.log(self.gamma_plus_rate / self.gamma_minus_rate)


@dataclass(frozen=True)
class MonitorConfig:
    gamma: float
    measure: BlochState = field(default_factory=lambda: BlochState(0.0))
    feedback: BlochState = field(default_factory=lambda: BlochState(0.0))

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError(f"measurement strength must be non-negative, got {self.gamma}")

    @classmethod
    def from_angles(
        cls, gamma: float, theta_m: float, theta_n: float, phi_m: float = 0.0, phi_n: float = 0.0
    ) -> "MonitorConfig":
        return cls(gamma, BlochState(theta_m, phi_m), BlochState(theta_n, phi_n))

    @property
    def measurement_only(self) -> bool:
        return self.measure == self.feedback


@dataclass(frozen=True)
class Physics:
    """Everything the engines need for one monitor setting."""

    qubit: QubitParams
    rates: Rates
    monitor: MonitorConfig
    baths: BathSpec | None = None

    @classmethod
    def from_baths(cls, qubit: QubitParams, baths: BathSpec, monitor: MonitorConfig) -> "Physics":
        return cls(qubit, rates_from_baths(baths, qubit), monitor, baths)

    def with_monitor(self, monitor: MonitorConfig) -> "Physics":
        return replace(self, monitor=monitor)

    def with_angles(self, theta_m: float, theta_n: float) -> "Physics":
        m = self.monitor
        return self.with_monitor(
            MonitorConfig.from_angles(m.gamma, theta_m, theta_n, m.measure.phi, m.feedback.phi)
        )

    def bath_rates(self) -> list[Rates]:
        """Per-bath rates; a bare Rates input acts as one effective bath."""
        if self.baths is None:
            return [self.rates]
        return [bath_rates(b, self.qubit, self.baths.omega_c) for b in self.baths.baths]

    def bath_names(self) -> list[str]:
        return ["bath"] if self.baths is None else self.baths.names()


def density(state: BlochState) -> DensityMatrix:
    return DensityMatrix(state.projector())


def feedback_unitary(m: BlochState, n: BlochState) -> np.ndarray:
    """U_nm = |n><m| + |n_bar><m_bar|."""
    return np.outer(n.ket(), m.ket().conj()) + np.outer(
        n.complement_ket(), m.complement_ket().conj()
    )


def ohmic_spectral_density(omega: float, alpha: float, omega_c: float) -> float:
    return 2.0 * alpha * omega * math.exp(-omega / omega_c)


def bose_einstein(omega: float, temperature: float) -> float:
    x = omega / temperature
    if x > _EXP_OVERFLOW:
        return 0.0
    return 1.0 / math.expm1(x)


def bath_rates(bath: Bath, q: QubitParams, omega_c: float) -> Rates:
    coupling = 0.5 * math.pi * ohmic_spectral_density(q.delta, bath.alpha, omega_c)
    n = bose_einstein(q.delta, bath.temperature)
    return Rates(coupling * (1.0 + n), coupling * n)


def rates_from_baths(baths: BathSpec, q: QubitParams) -> Rates:
    total = Rates(0.0, 0.0)
    for bath in baths.baths:
        total = total + bath_rates(bath, q, baths.omega_c)
    return total


def effective_bath(r: Rates, q: QubitParams, omega_c: float = 1000.0) -> tuple[float, float]:
    """Single Ohmic bath (alpha_eff, T_eff) reproducing the given rates."""
    if r.gamma_plus_rate <= r.gamma_minus_rate:
        raise ValueError(
            f"Gamma_+ = {r.gamma_plus_rate} must exceed Gamma_- = {r.gamma_minus_rate}"
        )
    t_eff = r.temperature(q)
    alpha_eff = r.gm / (math.pi * q.delta * math.exp(-q.delta / omega_c))
    return alpha_eff, t_eff
