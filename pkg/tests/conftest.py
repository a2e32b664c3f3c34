"""Shared parameter sets."""

import math

import pytest

from qmonitor.qubit import BathSpec, MonitorConfig, Physics, QubitParams, Rates


@pytest.fixture
def qubit():
    """Unit splitting."""
    return QubitParams(1.0)


@pytest.fixture
def flow_physics(qubit):
    """Single bath at T_eff = 1/ln 2 with gamma = 0.1."""
    return Physics(qubit, Rates(0.1, 0.05), MonitorConfig.from_angles(0.1, 0.0, 0.0))


@pytest.fixture
def cooling_physics(qubit):
    """Hot and cold Ohmic baths with weak measurement."""
    baths = BathSpec.hot_cold(1.5, 1.0, 0.01, 0.01)
    return Physics.from_baths(qubit, baths, MonitorConfig.from_angles(0.01, 0.3, 0.6))


@pytest.fixture
def noise_physics(qubit):
    """Measurement-only monitor in the rare-jump regime."""
    monitor = MonitorConfig.from_angles(0.01, 0.5 * math.pi, 0.5 * math.pi)
    return Physics(qubit, Rates(0.3, 0.15), monitor)


@pytest.fixture
def fast_physics(qubit):
    """Strong bath so stationary windows stay short in Monte Carlo tests."""
    monitor = MonitorConfig.from_angles(0.1, 0.3 * math.pi, 0.7 * math.pi)
    return Physics(qubit, Rates(1.0, 0.5), monitor)
