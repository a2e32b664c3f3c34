"""Steady-state energy flows between monitor, qubit and heat baths."""
import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np
import scipy.optimize

from qmonitor.lindblad import dissipator_bath, dissipator_meas, solve_steady_state
from qmonitor.qubit import DensityMatrix, MonitorConfig, Physics, QubitParams, Rates

logger = logging.getLogger(__name__)

EDGE_THRESHOLD = 0.15
ZERO_FLOW_TOL = 1e-10


class UndefinedCopError(ValueError):
    pass


class ZeroFlowError(ValueError):
    pass


@dataclass(frozen=True)
class FlowBreakdown:
    j_total: float
    j1: float
    j2: float
    bath_currents: dict[str, float] = field(default_factory=dict)

    @property
    def jc(self) -> float:
        return self.bath_currents.get("c", math.nan)

    @property
    def jh(self) -> float:
        return self.bath_currents.get("h", math.nan)

    @property
    def bath_total(self) -> float:
        return sum(self.bath_currents.values())


def _energy(q: QubitParams, op) -> float:
    return float(np.trace(q.hamiltonian @ np.asarray(op)).real)


def monitor_flow(rho, q: QubitParams, mc: MonitorConfig) -> FlowBreakdown:
    """J = tr[H0 D_M[rho]] split into no-detection (J1) and jump (J2) parts."""
    rho = np.asarray(rho, dtype=complex)
    p_m = mc.measure.projector()
    p_n = mc.feedback.projector()
    rho_mm = float(np.trace(p_m @ rho).real)

    j_total = _energy(q, dissipator_meas(rho, mc))
    j2 = mc.gamma * rho_mm * _energy(q, p_n - rho)
    j1 = mc.gamma * rho_mm * _energy(q, rho) - 0.5 * mc.gamma * _energy(q, p_m @ rho + rho @ p_m)
    return FlowBreakdown(j_total, j1, j2)


def bath_flow(rho, q: QubitParams, per_bath: Sequence[Rates], bath_index: int) -> float:
    """Heat current tr[H0 D_B,r[rho]] from bath r into the qubit."""
    if not 0 <= bath_index < len(per_bath):
        raise ValueError(f"unknown bath index {bath_index} ({len(per_bath)} baths)")
    return _energy(q, dissipator_bath(rho, per_bath[bath_index]))


def steady_flows(physics: Physics) -> tuple[DensityMatrix, FlowBreakdown]:
    rho = solve_steady_state(physics)
    monitor = monitor_flow(rho, physics.qubit, physics.monitor)
    per_bath = physics.bath_rates()
    currents = {
        name: bath_flow(rho, physics.qubit, per_bath, index)
        for index, name in enumerate(physics.bath_names())
    }
    return rho, FlowBreakdown(monitor.j_total, monitor.j1, monitor.j2, currents)


def numeric_flow(physics: Physics) -> float:
    rho = solve_steady_state(physics)
    return monitor_flow(rho, physics.qubit, physics.monitor).j_total


def cop(jc: float, jh: float) -> float:
    denominator = jh + jc
    if denominator == 0:
        raise UndefinedCopError("COP undefined: J_h + J_c = 0")
    return abs(jc / denominator)


# Weak-coupling closed forms. Angles broadcast as numpy arrays.

def analytic_flow(theta_m, theta_n, r: Rates, gamma: float, q: QubitParams = QubitParams()):
    cm, cn = np.cos(theta_m), np.cos(theta_n)
    numerator = r.gp * (cn - cm) - r.gm * (1 - cm * cn)
    denominator = gamma * (cn * cm - 1) - 2 * r.gp
    return 0.5 * gamma * q.delta * numerator / denominator


def flow_bounds(r: Rates, gamma: float, q: QubitParams = QubitParams()) -> tuple[float, float]:
    scale = gamma * q.delta / (r.gp + gamma)
    return -scale * r.gamma_minus_rate, scale * r.gamma_plus_rate


def instantaneous_flow_extremes(gamma: float, q: QubitParams = QubitParams()) -> tuple[float, float]:
    """Flow for |e> (|g>) prepared, measured to |e> (|g>) and fed back to |g> (|e>)."""
    return -gamma * q.delta, gamma * q.delta


def symmetric_axis_flow(theta_m, r: Rates, gamma: float, q: QubitParams = QubitParams()):
    """Flow on the mirror axis theta_m + theta_n = pi."""
    c = np.cos(theta_m)
    numerator = r.gm * (1 + c**2) + 2 * r.gp * c
    denominator = gamma * (1 + c**2) + 2 * r.gp
    return 0.5 * gamma * q.delta * numerator / denominator


def mirror_sign_change(temperature: float, q: QubitParams = QubitParams()) -> float:
    return math.pi - math.acos(math.tanh(q.delta / (4 * temperature)))


def quadratic_deviation(epsilon, r: Rates, gamma: float):
    """J/J_max near theta_m = 0 (equivalently J/J_min near pi) on the mirror axis."""
    return 1 - r.gp / (r.gp + gamma) * np.square(epsilon) / 2


def zero_flow_curve(
    theta_m: float,
    t_eff: float,
    q: QubitParams = QubitParams(),
    *,
    mode: str = "edge",
    physics: Physics | None = None,
    edge_threshold: float = EDGE_THRESHOLD,
) -> float:
    """Feedback angle theta_n with vanishing steady-state flow at the given theta_m.

    mode="edge" uses the closed forms valid near (0, 0) and (pi, pi);
    mode="root" brackets the numerically exact flow along theta_n.
    """
    if mode == "root":
        if physics is None:
            raise ValueError("root mode needs the physics to solve for the steady state")
        return _zero_flow_root(theta_m, physics)
    if mode != "edge":
        raise ValueError(f"unknown zero-flow mode {mode!r}")

    if theta_m < edge_threshold:
        factor = 0.0 if t_eff == 0 else math.exp(-q.delta / (2 * t_eff))
        return factor * theta_m
    if math.pi - theta_m < edge_threshold:
        if t_eff == 0:
            raise ZeroFlowError("no zero-flow curve near (pi, pi) at zero temperature")
        distance = math.exp(q.delta / (2 * t_eff)) * (math.pi - theta_m)
        if distance > math.pi:
            raise ZeroFlowError(f"edge formula leaves [0, pi] at theta_m={theta_m}")
        return math.pi - distance
    raise ZeroFlowError(
        f"theta_m={theta_m:.4f} is not within {edge_threshold} of an edge; use mode='root'"
    )


def _zero_flow_root(theta_m: float, physics: Physics) -> float:
    def flow(theta_n: float) -> float:
        return numeric_flow(physics.with_angles(theta_m, theta_n))

    theta_n = scipy.optimize.brentq(flow, 0.0, math.pi, xtol=1e-14, rtol=4 * np.finfo(float).eps)
    residual = flow(theta_n)
    if abs(residual) > ZERO_FLOW_TOL:
        logger.warning(f"Zero-flow root at theta_m={theta_m:.4f} leaves |J|={abs(residual):.2e}")
    return theta_n


def balance_check(rho, mc: MonitorConfig) -> float:
    """Residual of rho_mm (cos theta_m - cos theta_n) = sin theta_m Re[rho_{m m_bar}].

    The complement in the balance condition carries the opposite phase to
    BlochState.complement_ket, hence the plus sign; gamma*Delta/2 * residual == J.
    """
    rho = np.asarray(rho, dtype=complex)
    m, m_bar = mc.measure.ket(), mc.measure.complement_ket()
    rho_mm = float((m.conj() @ rho @ m).real)
    coherence = complex(m.conj() @ rho @ m_bar)
    return (
        rho_mm * (math.cos(mc.measure.theta) - math.cos(mc.feedback.theta))
        + math.sin(mc.measure.theta) * coherence.real
    )
