"""Tests for the quantum-jump trajectory engine."""

import dataclasses
import logging
import math

import numpy as np
import pytest

from qmonitor.energetics import steady_flows
from qmonitor.lindblad import evolve, physics_liouvillian, solve_steady_state, vec
from qmonitor.noise import estimate_noise_mc
from qmonitor.output import read_metadata
from qmonitor.qubit import SIGMA_Z, BlochState, DensityMatrix, MonitorConfig
from qmonitor.trajectory import (
    ConditionalEngine,
    JumpStepError,
    TrajectoryConfig,
    check_rare_jump_regime,
    chunk_indices,
    count_fixed_state_jumps,
    dump_records,
    ensemble_mean_state,
    jump_probability,
    run_trajectories,
    run_trajectory,
    sme_step,
    step_energies,
    trajectory_uniforms,
)


@pytest.fixture
def short_config(fast_physics):
    """Shortest stationary window the validation accepts for the fast bath."""
    return TrajectoryConfig.for_rates(
        fast_physics.rates, dt=0.005, n_traj=6, master_seed=42, batch_size=4
    )


@pytest.fixture
def mixed_state():
    return DensityMatrix([[0.7, 0.2 - 0.1j], [0.2 + 0.1j, 0.3]])


class TestUniformStreams:
    """Tests for the counter-based random streams."""

    def test_reproducible(self):
        """Test identical keys give identical uniforms."""
        np.testing.assert_array_equal(
            trajectory_uniforms(7, 3, 0, 16), trajectory_uniforms(7, 3, 0, 16)
        )

    def test_blocks_join(self):
        """Test a stream read in two blocks equals the stream read at once."""
        whole = trajectory_uniforms(7, 3, 0, 16)
        np.testing.assert_array_equal(whole[8:], trajectory_uniforms(7, 3, 8, 8))

    def test_trajectories_differ(self):
        """Test neighbouring trajectories get independent streams."""
        assert not np.array_equal(trajectory_uniforms(7, 3, 0, 8), trajectory_uniforms(7, 4, 0, 8))

    def test_block_alignment(self):
        """Test blocks must start on a multiple of four steps."""
        with pytest.raises(ValueError, match="multiple of 4"):
            trajectory_uniforms(7, 3, 2, 8)


class TestConditionalStep:
    """Tests for the single-step conditional update."""

    def test_jump_probability(self, fast_physics, mixed_state):
        """Test p = gamma <m|rho|m> dt."""
        mc = fast_physics.monitor
        expected = mc.gamma * mixed_state.population(mc.measure) * 0.005
        assert jump_probability(mixed_state, mc, 0.005) == pytest.approx(expected)

    def test_large_jump_probability_rejected(self):
        """Test a step with more than a 10% jump chance is refused."""
        mc = MonitorConfig.from_angles(30.0, 0.0, 0.0)
        with pytest.raises(JumpStepError, match="reduce dt"):
            jump_probability(BlochState(0.0).projector(), mc, 0.01)

    def test_jump_resets_to_feedback_state(self, fast_physics, mixed_state):
        """Test a detection leaves the qubit in |n>."""
        rho = sme_step(mixed_state, True, fast_physics, 0.005)
        np.testing.assert_allclose(rho.matrix, fast_physics.monitor.feedback.projector())

    def test_no_jump_keeps_state_physical(self, fast_physics, mixed_state):
        """Test the no-detection update keeps unit trace and positivity."""
        rho = sme_step(mixed_state, False, fast_physics, 0.005)
        rho.validate()

    def test_jump_energy(self, fast_physics, mixed_state):
        """Test Q2 is the energy change of the reset."""
        mc, q = fast_physics.monitor, fast_physics.qubit
        _, q2 = step_energies(mixed_state, True, mc, 0.005, q)
        h = q.hamiltonian
        expected = np.trace(h @ mc.feedback.projector()).real - np.trace(h @ mixed_state.matrix).real
        assert q2 == pytest.approx(expected)
        assert step_energies(mixed_state, False, mc, 0.005, q)[1] == 0.0

    def test_engine_matches_scalar_step(self, fast_physics, mixed_state):
        """Test the batched engine reproduces the scalar update and energies."""
        engine = ConditionalEngine(fast_physics, 0.005)
        states = np.stack([vec(mixed_state), vec(BlochState(1.0, 0.5).projector())])
        jumped = np.array([False, True])
        q1, q2 = engine.energies(states, jumped)
        updated = engine.step(states, jumped)
        for row in range(2):
            expected = sme_step(states[row].reshape(2, 2, order="F"), jumped[row], fast_physics, 0.005)
            np.testing.assert_allclose(updated[row], vec(expected), atol=1e-14)
            e1, e2 = step_energies(
                states[row].reshape(2, 2, order="F"), jumped[row], fast_physics.monitor, 0.005,
                fast_physics.qubit,
            )
            assert q1[row] == pytest.approx(e1, abs=1e-18)
            assert q2[row] == pytest.approx(e2)

    def test_engine_rejects_strong_measurement(self, fast_physics):
        """Test gamma dt above 0.1 is refused up front."""
        physics = fast_physics.with_monitor(MonitorConfig.from_angles(30.0, 0.0, 0.0))
        with pytest.raises(JumpStepError):
            ConditionalEngine(physics, 0.01)

    def test_fixed_state_jump_rate(self, fast_physics):
        """Test the jump draw fires with the stated probability."""
        rho = BlochState(fast_physics.monitor.measure.theta).projector()
        stats = count_fixed_state_jumps(rho, fast_physics, 0.005, 400_000, master_seed=3)
        expected = stats.probability * stats.steps
        assert abs(stats.jumps - expected) < 5 * math.sqrt(expected)


class TestTrajectoryConfig:
    """Tests for trajectory settings."""

    def test_for_rates_windows(self, fast_physics):
        """Test default windows are 10/gamma_p and 50/gamma_p."""
        cfg = TrajectoryConfig.for_rates(fast_physics.rates)
        assert cfg.t_equilibrate == pytest.approx(10 / 1.5)
        assert cfg.t_window == pytest.approx(50 / 1.5)
        assert cfg.n_window == round(cfg.t_window / cfg.dt)

    def test_validate_collects_errors(self, fast_physics):
        """Test every invalid setting is reported."""
        cfg = TrajectoryConfig(dt=0.02, t_window=1.0, batch_size=0, master_seed=-1)
        with pytest.raises(ValueError) as excinfo:
            cfg.validate(fast_physics.rates)
        message = str(excinfo.value)
        for fragment in ("dt=0.02", "batch_size", "master_seed", "t_window"):
            assert fragment in message

    def test_pure_start_skips_window_check(self, fast_physics):
        """Test non-stationary runs may use short windows."""
        TrajectoryConfig(dt=0.005, t_window=1.0).validate(fast_physics.rates, stationary=False)

    def test_chunks(self):
        """Test chunks hold consecutive indices of at most batch_size."""
        assert chunk_indices(5, 2) == [(0, 1), (2, 3), (4,)]


class TestEnsembles:
    """Tests for trajectory ensembles."""

    def test_trajectory_reproducible(self, fast_physics, short_config):
        """Test a trajectory depends only on the seed and its index."""
        first = run_trajectory(short_config, 2, fast_physics)
        again = run_trajectory(short_config, 2, fast_physics)
        np.testing.assert_array_equal(first.jumped, again.jumped)
        np.testing.assert_array_equal(first.q1, again.q1)
        assert len(first) == short_config.n_window

    def test_single_run_matches_ensemble(self, fast_physics, short_config):
        """Test a trajectory is the same alone and inside a batch."""
        alone = run_trajectory(short_config, 1, fast_physics)
        batch = run_trajectories(short_config, fast_physics, 3)
        np.testing.assert_array_equal(alone.jumped, batch[1].jumped)
        np.testing.assert_allclose(alone.q1, batch[1].q1, rtol=1e-12, atol=1e-18)

    @pytest.mark.slow
    def test_worker_count_invariance(self, fast_physics, short_config):
        """Test records are identical for one and two worker processes."""
        serial = run_trajectories(short_config, fast_physics, 6, workers=1)
        parallel = run_trajectories(short_config, fast_physics, 6, workers=2)
        for a, b in zip(serial, parallel):
            assert a.traj_index == b.traj_index
            np.testing.assert_array_equal(a.jumped, b.jumped)
            np.testing.assert_array_equal(a.q1, b.q1)
            np.testing.assert_array_equal(a.q2, b.q2)

    def test_jumps_happen(self, fast_physics, short_config):
        """Test a stationary window records detections with their energies."""
        records = run_trajectories(short_config, fast_physics, 6)
        assert sum(record.jump_count for record in records) > 0
        for record in records:
            assert np.all(record.q2[~record.jumped] == 0.0)
            assert np.all(record.q2[record.jumped] != 0.0)

    @pytest.mark.slow
    def test_mean_state_follows_lindblad(self, fast_physics):
        """Test the ensemble-mean state tracks the master equation from a pure start."""
        cfg = TrajectoryConfig(dt=0.005, t_window=4.0, n_traj=400, master_seed=9, batch_size=200)
        rho0 = fast_physics.monitor.feedback.projector()
        path = ensemble_mean_state(cfg, fast_physics, rho0=rho0, sample_every=100)
        reference = evolve(rho0, physics_liouvillian(fast_physics), 4.0, dt=0.005, sample_every=100)
        np.testing.assert_allclose(path.times, reference.times)
        deviation = np.abs(path.sigma_z() - reference.expectation(SIGMA_Z))
        assert np.all(deviation <= 5 * path.sigma_z_stderr() + 0.01)

    def test_mean_state_needs_ensemble(self, fast_physics):
        """Test tiny ensembles are refused."""
        cfg = TrajectoryConfig(dt=0.005, t_window=1.0, n_traj=10)
        with pytest.raises(ValueError, match="at least"):
            ensemble_mean_state(cfg, fast_physics, rho0=np.eye(2) / 2)

    def test_dump_records(self, fast_physics, short_config, tmp_path):
        """Test dumped records carry one row per step and the metadata block."""
        records = run_trajectories(short_config, fast_physics, 1)
        out = dump_records(records, tmp_path / "records.csv", {"seed": 42})
        lines = out.read_text().splitlines()
        assert read_metadata(out)["seed"] == "42"
        header = [line for line in lines if not line.startswith("#")][0]
        assert header == "traj,step,jumped,q1,q2"
        assert len(lines) == len(read_metadata(out)) + 1 + short_config.n_window


class TestRareJumps:
    """Tests for the rare-jump diagnostic."""

    def test_rare_regime(self, noise_physics):
        """Test weak measurement is in the rare-jump regime."""
        assert check_rare_jump_regime(noise_physics) > 10

    def test_warns_when_jumps_are_frequent(self, fast_physics, caplog):
        """Test frequent jumps are logged as a warning."""
        physics = fast_physics.with_monitor(MonitorConfig.from_angles(5.0, 0.5, 0.5))
        with caplog.at_level(logging.WARNING):
            ratio = check_rare_jump_regime(physics, solve_steady_state(physics))
        assert ratio < 10
        assert "not rare" in caplog.text

    def test_no_jumps(self, fast_physics):
        """Test a monitor that never fires reports an infinite ratio."""
        physics = fast_physics.with_monitor(MonitorConfig.from_angles(0.0, 0.5, 0.5))
        assert math.isinf(check_rare_jump_regime(physics))


class TestStepHalving:
    """Tests for the time-step stability of ensemble estimates."""

    @pytest.mark.slow
    def test_flow_and_poisson_noise_stable(self, fast_physics):
        """Test halving dt moves J and S0 by no more than the combined statistical error."""
        cfg = TrajectoryConfig.for_rates(
            fast_physics.rates, dt=0.005, n_traj=200, batch_size=100, master_seed=31
        )
        coarse_corr, coarse = estimate_noise_mc(fast_physics, cfg)
        fine_corr, fine = estimate_noise_mc(fast_physics, dataclasses.replace(cfg, dt=0.0025))
        flow_err = math.hypot(coarse_corr.flow_stderr, fine_corr.flow_stderr)
        assert abs(fine_corr.flow - coarse_corr.flow) <= 3 * flow_err
        s0_err = math.hypot(coarse.estimate.s0_stderr, fine.estimate.s0_stderr)
        assert abs(fine.estimate.s0 - coarse.estimate.s0) <= 3 * s0_err
        _, flows = steady_flows(fast_physics)
        assert abs(fine_corr.flow - flows.j_total) <= 3 * fine_corr.flow_stderr
