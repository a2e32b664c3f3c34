"""Tests for the analytic and Monte Carlo noise of the monitor energy."""

import math

import numpy as np
import pytest

from qmonitor.energetics import steady_flows
from qmonitor.lindblad import solve_steady_state
from qmonitor.noise import (
    CorrelationSettings,
    FanoDivergenceError,
    MomentSums,
    NoiseEstimate,
    analytic_noise,
    autocovariance_sums,
    correlation_mc,
    estimate_noise_mc,
    excess_energy,
    excess_energy_report,
    fano,
    fano_ratio,
    poisson_zero_feedback_angle,
    q_jump,
    rho_mm_weak_coupling,
    s0_analytic,
    s0_weak_coupling,
    s1_analytic,
    sigma_z_weak_coupling,
    spectrum_mc,
    transient_flow,
    transient_initial_flow,
)
from qmonitor.qubit import MonitorConfig, Physics, Rates
from qmonitor.trajectory import TrajectoryConfig, TrajectoryRecord


def measurement_only(physics, theta):
    """Same physics with theta_m = theta_n = theta (radians)."""
    return physics.with_angles(theta, theta)


@pytest.fixture
def synthetic_records():
    """Independent jump records: Q = 1 with probability 0.01 per step."""
    rng = np.random.default_rng(5)
    records = []
    for index in range(20):
        jumped = rng.random(4000) < 0.01
        q2 = np.where(jumped, 1.0, 0.0)
        records.append(TrajectoryRecord(index, 0.01, jumped, np.zeros(4000), q2))
    return records


class TestWeakCoupling:
    """Tests for the weak-coupling closed forms."""

    def test_s0_on_axis(self):
        """Test S0 = 4 gamma / 27 at theta = 0 for Gamma_+ = 2 Gamma_-."""
        value = s0_weak_coupling(0.0, 0.0, Rates(0.3, 0.15), 0.01)
        assert value == pytest.approx(4 * 0.01 / 27)

    def test_sigma_z_without_monitor_effect(self):
        """Test <sigma_z> is thermal when measurement and feedback share an energy eigenstate."""
        assert sigma_z_weak_coupling(0.0, 0.0, Rates(0.3, 0.15), 0.01) == pytest.approx(-1 / 3)

    def test_poisson_zero(self):
        """Test the feedback angle with zero jump energy."""
        assert poisson_zero_feedback_angle(-1 / 3) == pytest.approx(math.acos(1 / 3))
        with pytest.raises(ValueError):
            poisson_zero_feedback_angle(1.5)

    def test_rho_mm_tracks_solver(self, qubit):
        """Test the coherence-free population against the exact steady state for weak measurement."""
        theta = 0.4 * math.pi
        physics = Physics(qubit, Rates(0.3, 0.15), MonitorConfig.from_angles(0.001, theta, theta))
        rho = solve_steady_state(physics)
        sz = sigma_z_weak_coupling(theta, theta, physics.rates, 0.001)
        expected = rho.population(physics.monitor.measure)
        assert rho_mm_weak_coupling(theta, sz) == pytest.approx(expected, rel=0.02)

    def test_s0_tracks_exact(self, qubit):
        """Test the weak-coupling S0 against the exact closed form for weak measurement."""
        theta = 0.25 * math.pi
        physics = Physics(qubit, Rates(0.3, 0.15), MonitorConfig.from_angles(0.001, theta, theta))
        exact = analytic_noise(physics, method="resolvent").estimate.s0
        assert s0_weak_coupling(theta, theta, physics.rates, 0.001) == pytest.approx(exact, rel=0.05)


class TestJumpEnergy:
    """Tests for Q_jump and the excess energy."""

    def test_q_jump_sign_change(self, noise_physics):
        """Test the jump energy changes sign between 0.3 pi and 0.5 pi."""
        signs = []
        for theta in (0.3 * math.pi, 0.5 * math.pi):
            physics = measurement_only(noise_physics, theta)
            signs.append(np.sign(q_jump(solve_steady_state(physics), physics.qubit, theta)))
        assert signs == [-1.0, 1.0]

    def test_transient_starts_at_closed_form(self, flow_physics):
        """Test J(0) after a jump matches the closed form."""
        physics = flow_physics.with_angles(0.9, 2.0)
        _, flows = transient_flow(physics, t_end=0.1)
        assert flows[0] == pytest.approx(transient_initial_flow(0.9, 2.0, 0.1), abs=1e-14)

    def test_transient_relaxes(self, flow_physics):
        """Test J(t) approaches the steady-state flow."""
        physics = flow_physics.with_angles(0.9, 2.0)
        _, flows = transient_flow(physics, t_end=300.0)
        _, steady = steady_flows(physics)
        assert flows[-1] == pytest.approx(steady.j_total, abs=1e-9)

    def test_methods_agree(self, noise_physics):
        """Test the integrated transient against the resolvent solve."""
        physics = measurement_only(noise_physics, 0.5 * math.pi)
        integrated = excess_energy_report(physics)
        resolvent = excess_energy_report(physics, method="resolvent")
        assert integrated.method == "integrate"
        assert integrated.q_ex == pytest.approx(resolvent.q_ex, rel=1e-3)
        assert integrated.tail_estimate < 1e-6

    def test_excess_zero_root(self, noise_physics):
        """Test the excess energy changes sign near 0.381 pi on the measurement-only line."""
        low = excess_energy(noise_physics, 0.35 * math.pi, 0.35 * math.pi, method="resolvent")
        high = excess_energy(noise_physics, 0.41 * math.pi, 0.41 * math.pi, method="resolvent")
        assert low * high < 0

    def test_no_measurement_no_excess(self, noise_physics):
        """Test gamma = 0 has no excess energy."""
        physics = noise_physics.with_monitor(MonitorConfig.from_angles(0.0, 1.0, 1.0))
        assert excess_energy(physics) == 0.0

    def test_monitor_without_bath(self, qubit):
        """Test the excess energy is finite when only the monitor relaxes the qubit."""
        physics = Physics(qubit, Rates(0.0, 0.0), MonitorConfig.from_angles(0.1, 0.3 * math.pi, 0.7 * math.pi))
        integrated = excess_energy_report(physics)
        resolvent = excess_energy_report(physics, method="resolvent")
        assert math.isfinite(integrated.q_ex)
        assert integrated.q_ex == pytest.approx(resolvent.q_ex, rel=1e-3, abs=1e-12)

    def test_unknown_method(self, noise_physics):
        """Test an unknown method is rejected."""
        with pytest.raises(ValueError, match="unknown excess-energy method"):
            excess_energy(noise_physics, method="guess")


class TestAnalyticNoise:
    """Tests for the closed-form S0, S1 and Fano factor."""

    def test_on_axis_values(self, noise_physics):
        """Test S0 = 4 gamma / 27, S1 = 0 and F = 1 at theta = 0."""
        result = analytic_noise(measurement_only(noise_physics, 0.0))
        assert result.estimate.s0 == pytest.approx(4 * 0.01 / 27)
        assert result.estimate.s1_dc == pytest.approx(0.0, abs=1e-15)
        assert result.estimate.fano == pytest.approx(1.0)

    @pytest.mark.parametrize("theta", [0.1, 0.25, 0.5, 0.8])
    def test_triangle(self, noise_physics, theta):
        """Test (1 + Q_ex/Q_jump)^2 = (S0 + S1)/S0."""
        physics = measurement_only(noise_physics, theta * math.pi)
        estimate = analytic_noise(physics).estimate
        assert estimate.fano == pytest.approx(fano_ratio(estimate.s0, estimate.s1_dc), rel=1e-10)
        assert estimate.fano == pytest.approx(fano(physics), rel=1e-10)

    def test_s0_is_twice_jump_energy_times_jump_flow(self, flow_physics):
        """Test S0 = 2 Q_jump J2 at an arbitrary monitor point."""
        physics = flow_physics.with_angles(0.7, 2.2)
        rho, flows = steady_flows(physics)
        jump = q_jump(rho, physics.qubit, 2.2)
        assert s0_analytic(rho, physics) == pytest.approx(2 * jump * flows.j2, rel=1e-12)

    def test_s1_vanishes_at_poles(self, noise_physics):
        """Test the backaction noise vanishes for energy-eigenstate monitors."""
        for theta in (0.0, math.pi):
            assert abs(s1_analytic(noise_physics, theta, theta)) <= 1e-12

    def test_s1_matches_bundle(self, noise_physics):
        """Test the standalone S1 agrees with the bundled result."""
        physics = measurement_only(noise_physics, 0.6 * math.pi)
        assert s1_analytic(physics) == pytest.approx(analytic_noise(physics).estimate.s1_dc)

    def test_monitor_without_bath(self, qubit):
        """Test the closed forms hold with zero bath rates."""
        physics = Physics(qubit, Rates(0.0, 0.0), MonitorConfig.from_angles(0.1, 0.3 * math.pi, 0.7 * math.pi))
        result = analytic_noise(physics)
        assert result.rho_ss.ee > 0.5
        assert result.estimate.s0 > 0
        assert math.isfinite(result.estimate.s1_dc)
        assert result.estimate.fano == pytest.approx(fano_ratio(result.estimate.s0, result.estimate.s1_dc), rel=1e-10)

    def test_fano_ratio_diverges(self):
        """Test a vanishing Poisson noise has no Fano factor."""
        with pytest.raises(FanoDivergenceError):
            fano_ratio(0.0, 1.0)

    def test_estimate_rejects_negative_s0(self):
        """Test S0 < 0 is rejected."""
        with pytest.raises(ValueError, match="non-negative"):
            NoiseEstimate(-1.0, 0.0, 1.0)

    def test_estimate_checks_fano(self):
        """Test an inconsistent Fano factor is rejected."""
        with pytest.raises(ValueError, match="disagrees"):
            NoiseEstimate(1.0, 1.0, 3.0)


class TestCorrelations:
    """Tests for the binned correlation estimator."""

    def test_autocovariance_matches_direct_sum(self):
        """Test the FFT lag sums against a direct computation."""
        x = np.random.default_rng(2).normal(size=(3, 50))
        sums = autocovariance_sums(x, 5)
        for lag in range(6):
            np.testing.assert_allclose(sums[:, lag], (x[:, : 50 - lag] * x[:, lag:]).sum(axis=1))

    def test_bin_width_must_fit_step(self):
        """Test a bin width that is not a multiple of dt is rejected."""
        with pytest.raises(ValueError, match="not a multiple"):
            CorrelationSettings(dt=0.003, bin_width=0.1, max_lag_bins=5, j_ss=0.0)

    def test_window_must_exceed_max_lag(self):
        """Test a window shorter than the max lag is rejected."""
        settings = CorrelationSettings.from_times(dt=0.01, j_ss=0.0, max_lag=10.0)
        with pytest.raises(ValueError, match="shorter than the requested max lag"):
            settings.n_bins(500)

    def test_unknown_subtraction(self):
        """Test an unknown mean-subtraction mode is rejected."""
        with pytest.raises(ValueError, match="unknown subtraction"):
            CorrelationSettings(dt=0.01, bin_width=0.1, max_lag_bins=5, j_ss=0.0, subtract="x")

    def test_merge_adds(self):
        """Test moment sums merge by addition."""
        a = MomentSums(2, np.ones(3), np.ones(3), 1.0)
        b = MomentSums(3, np.full(3, 2.0), np.full(3, 4.0), 0.5)
        merged = a.merge(b)
        assert merged.count == 5
        np.testing.assert_allclose(merged.squares, 5.0)
        assert merged.cross == 1.5

    def test_c0_is_per_step_variance(self, synthetic_records):
        """Test C0 is the per-step variance averaged over trajectories."""
        corr = correlation_mc(synthetic_records, 0.0, 0.01, max_lag=1.0, subtract="sample")
        expected = np.mean([np.var(record.energy()) for record in synthetic_records])
        assert corr.c0 == pytest.approx(expected, rel=1e-12)
        assert corr.s0 == pytest.approx(2 * expected / 0.01, rel=1e-12)

    def test_independent_jumps_have_no_backaction(self, synthetic_records):
        """Test uncorrelated jumps give c1 consistent with zero."""
        corr = correlation_mc(synthetic_records, 0.0, 0.01, max_lag=1.0, subtract="sample")
        lagged = corr.c1[1:]
        assert np.all(np.abs(lagged) <= 5 * corr.c1_stderr[1:] + 1e-12)

    def test_two_sided_is_even(self, synthetic_records):
        """Test the two-sided correlation is symmetric in tau."""
        corr = correlation_mc(synthetic_records, 0.0, 0.01, max_lag=1.0)
        tau, values = corr.c1_two_sided()
        np.testing.assert_allclose(tau, -tau[::-1])
        np.testing.assert_allclose(values, values[::-1])
        assert len(tau) == 2 * len(corr.lag_times) - 1

    def test_spectrum_adds_poisson_floor(self, synthetic_records):
        """Test S(omega) = S0 + S1(omega) and the Fano factor uses the DC value."""
        corr = correlation_mc(synthetic_records, 0.0, 0.01, max_lag=1.0, subtract="sample")
        spectrum = spectrum_mc(corr)
        np.testing.assert_allclose(spectrum.s_total, corr.s0 + corr.s1)
        assert spectrum.estimate.fano == pytest.approx(1 + corr.s1[0] / corr.s0)
        assert spectrum.omegas[0] == 0.0

    def test_records_must_share_length(self, synthetic_records):
        """Test ragged record sets are rejected."""
        short = TrajectoryRecord(99, 0.01, np.zeros(10, bool), np.zeros(10), np.zeros(10))
        with pytest.raises(ValueError, match="one window length"):
            correlation_mc([*synthetic_records, short], 0.0, 0.01)


class TestMonteCarloNoise:
    """Tests for the streaming ensemble estimate."""

    def test_no_measurement_no_noise(self, fast_physics):
        """Test gamma = 0 yields vanishing flow and correlations."""
        physics = fast_physics.with_monitor(MonitorConfig.from_angles(0.0, 0.5, 0.5))
        cfg = TrajectoryConfig.for_rates(physics.rates, n_traj=4, batch_size=4, master_seed=1)
        corr, spectrum = estimate_noise_mc(physics, cfg)
        assert corr.flow == 0.0
        assert corr.c0 == 0.0
        np.testing.assert_array_equal(corr.c1, 0.0)
        assert spectrum.estimate.s0 == 0.0
        assert math.isnan(spectrum.estimate.fano)

    @pytest.mark.slow
    def test_flow_and_poisson_noise(self, fast_physics):
        """Test the ensemble reproduces the solver flow and the Poisson noise."""
        cfg = TrajectoryConfig.for_rates(
            fast_physics.rates, n_traj=200, batch_size=100, master_seed=17
        )
        corr, spectrum = estimate_noise_mc(fast_physics, cfg)
        _, flows = steady_flows(fast_physics)
        assert abs(corr.flow - flows.j_total) <= 3 * corr.flow_stderr
        expected = analytic_noise(fast_physics).estimate.s0
        assert abs(spectrum.estimate.s0 - expected) <= 3 * spectrum.estimate.s0_stderr
        assert corr.n_traj == 200

    @pytest.mark.slow
    def test_subtraction_modes_agree_on_s0(self, fast_physics):
        """Test solver and sample mean subtraction give nearly the same S0."""
        cfg = TrajectoryConfig.for_rates(
            fast_physics.rates, n_traj=40, batch_size=40, master_seed=23
        )
        solver, _ = estimate_noise_mc(fast_physics, cfg, subtract="solver")
        sample, _ = estimate_noise_mc(fast_physics, cfg, subtract="sample")
        assert sample.s0 == pytest.approx(solver.s0, rel=1e-2)
