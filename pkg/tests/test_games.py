"""Tests for the interference game physics and environment."""

from dataclasses import replace

import numpy as np
import pytest

from pyv2xbench.exceptions import ConfigurationError, EnvironmentStateError
from pyv2xbench.games import (
    GameConfig,
    InterferenceGameEnv,
    TopologySource,
    cam_rate,
    encode_gain,
    encode_interference,
    evaluate_joint_actions,
    global_state_dim,
    interference_v2v,
    link_rates,
    local_observation_dim,
    queue_step,
    reward_nfig,
    reward_sig,
    run_episode,
    sinr_v2i,
    sinr_v2v,
)
from pyv2xbench.models import (
    ChannelParams,
    QueueState,
    RewardWeights,
    SamplingMode,
    Task,
)


class SilentPolicy:
    """Every agent silent on subchannel 0."""

    def act(self, env):
        return env.silent_action()


class TestSinr:
    """Test SINR and interference against hand-computed values.

    With ``unit_params`` the noise and V2I power are 1 mW and the power
    levels are 10, 1 and 0 mW, so action ``3 * m + p`` selects subchannel m
    at level p.
    """

    def test_v2i_sinr_separate_subchannels(self, two_link_realization, unit_params):
        """Test each V2I link sees only the V2V link on its subchannel."""
        sinr = sinr_v2i([0, 4], two_link_realization, unit_params)
        np.testing.assert_allclose(sinr, [2.0 / 6.0, 3.0 / 1.8], rtol=1e-12)

    def test_v2i_sinr_shared_subchannel(self, two_link_realization, unit_params):
        """Test both V2V links interfering with the first V2I link."""
        sinr = sinr_v2i([0, 0], two_link_realization, unit_params)
        np.testing.assert_allclose(sinr, [2.0 / 13.0, 3.0], rtol=1e-12)

    def test_v2v_interference_tensor(self, two_link_realization, unit_params):
        """Test interference at every receiver on every subchannel."""
        interference = interference_v2v([0, 4], two_link_realization, unit_params)
        np.testing.assert_allclose(
            interference, [[0.01, 0.42], [1.03, 0.04]], rtol=1e-12
        )

    def test_v2v_sinr_separate_subchannels(self, two_link_realization, unit_params):
        """Test V2V SINR when the links use different subchannels."""
        sinr, _ = sinr_v2v([0, 4], two_link_realization, unit_params)
        np.testing.assert_allclose(sinr, [10.0 / 1.01, 4.0 / 1.04], rtol=1e-12)

    def test_v2v_sinr_shared_subchannel(self, two_link_realization, unit_params):
        """Test V2V SINR when both links collide on subchannel 0."""
        sinr, interference = sinr_v2v([0, 0], two_link_realization, unit_params)
        np.testing.assert_allclose(sinr, [10.0 / 4.01, 30.0 / 2.03], rtol=1e-12)
        np.testing.assert_allclose(interference[:, 0], [3.01, 1.03], rtol=1e-12)

    def test_silent_link_has_zero_sinr(self, two_link_realization, unit_params):
        """Test the -100 dBm level transmits nothing."""
        sinr, _ = sinr_v2v([2, 5], two_link_realization, unit_params)
        np.testing.assert_array_equal(sinr, [0.0, 0.0])
        np.testing.assert_allclose(
            sinr_v2i([2, 5], two_link_realization, unit_params), [2.0, 3.0]
        )

    def test_batch_matches_scalar(self, two_link_realization, unit_params):
        """Test a batch of joint actions agrees with one-at-a-time evaluation."""
        batch = np.array([[0, 4], [0, 0], [5, 1]])
        sinr, _ = sinr_v2v(batch, two_link_realization, unit_params)
        for row, actions in enumerate(batch):
            single, _ = sinr_v2v(actions, two_link_realization, unit_params)
            np.testing.assert_array_equal(sinr[row], single)

    def test_wrong_action_width(self, two_link_realization, unit_params):
        """Test a joint action must have one entry per agent."""
        with pytest.raises(ConfigurationError, match="expected 2"):
            sinr_v2i([0, 1, 2], two_link_realization, unit_params)


class TestRatesAndQueues:
    """Test rates, CAM rates and the queue recursion."""

    def test_link_rates(self):
        """Test W log2(1 + SINR)."""
        params = ChannelParams()
        np.testing.assert_allclose(link_rates([0.0, 1.0, 3.0], params), [0.0, 1e6, 2e6])

    def test_cam_rate(self):
        """Test bits per second to CAMs per second."""
        params = ChannelParams()
        assert cam_rate(50880.0, params) == pytest.approx(1.0)
        assert cam_rate(1e6, params) == pytest.approx(1e6 / 50880)

    def test_first_interval_fills_queue(self):
        """Test the interval starting at t=0 leaves every queue at one."""
        queue = queue_step(QueueState(np.array([0.2, 0.0]), 0), np.array([1e4, 1e4]), 1e-3)
        np.testing.assert_array_equal(queue.q, [1.0, 1.0])
        assert queue.t == 1

    def test_queue_drains(self):
        """Test later intervals drain by the delivered CAMs and floor at zero."""
        queue = queue_step(QueueState(np.ones(2), 1), np.array([400.0, 2000.0]), 1e-3)
        np.testing.assert_allclose(queue.q, [0.6, 0.0])
        assert queue.t == 2

    def test_empty_queue_stays_empty(self):
        """Test an empty queue never goes negative."""
        queue = queue_step(QueueState(np.zeros(1), 5), np.array([1e5]), 1e-3)
        np.testing.assert_array_equal(queue.q, [0.0])


class TestRewards:
    """Test both reward functions."""

    def test_nfig_reward(self):
        """Test the weighted sum of rates."""
        weights = RewardWeights(rate_scale=1.0)
        assert reward_nfig([1.0, 2.0], [1.0, 3.0], weights) == pytest.approx(3.9)

    def test_nfig_reward_scale(self):
        """Test rates are divided by the rate scale."""
        weights = RewardWeights()
        assert reward_nfig([1e7], [1e7], weights) == pytest.approx(1.0)

    def test_sig_reward_masks_finished_links(self):
        """Test empty queues drop their rate and earn the completion bonus."""
        weights = RewardWeights(0.2, 1.8, 0.5, 1.0)
        reward = reward_sig([1.0, 2.0], [1.0, 3.0], np.array([0.5, 0.0]), weights)
        assert reward == pytest.approx(0.2 * 3.0 + 1.8 * 1.0 + 0.5)

    def test_sig_reward_all_pending(self):
        """Test the SIG reward equals the NFIG form when every queue is pending."""
        weights = RewardWeights(0.2, 1.8, 0.5, 1.0)
        reward = reward_sig([1.0], [2.0, 2.0], np.ones(2), weights)
        assert reward == pytest.approx(0.2 + 1.8 * 4.0)

    def test_sig_reward_all_done(self):
        """Test only V2I rates and bonuses remain once every queue is empty."""
        weights = RewardWeights(0.2, 1.8, 0.5, 1.0)
        reward = reward_sig([4.0], [2.0, 2.0], np.zeros(2), weights)
        assert reward == pytest.approx(0.8 + 1.0)

    def test_batch_rewards(self, two_link_realization, unit_params):
        """Test batch rewards match the per-action reward."""
        weights = RewardWeights(rate_scale=1.0)
        batch = np.array([[0, 4], [0, 0]])
        rewards = evaluate_joint_actions(batch, two_link_realization, unit_params, weights)
        expected_first = reward_nfig(
            link_rates([2.0 / 6.0, 3.0 / 1.8], unit_params),
            link_rates([10.0 / 1.01, 4.0 / 1.04], unit_params),
            weights,
        )
        assert rewards.shape == (2,)
        assert rewards[0] == pytest.approx(expected_first, rel=1e-12)


class TestEncoding:
    """Test feature encodings and dimensions."""

    def test_encode_gain(self):
        """Test the dB mapping and clipping."""
        np.testing.assert_allclose(encode_gain([1e-12, 1e-9, 1.0, 0.0]), [0.0, 0.5, 2.0, 0.0])

    def test_encode_interference(self):
        """Test interference relative to the noise floor."""
        np.testing.assert_allclose(encode_interference([1.0, 1000.0], 1.0), [0.0, 0.5])

    def test_dimensions(self):
        """Test the state and local observation sizes for four links."""
        assert global_state_dim(4, 4) == 105
        assert local_observation_dim(4) == 14


class TestTopologySource:
    """Test episode topology draws."""

    @pytest.fixture
    def snapshots(self, small_test_set):
        return [replace(small_test_set[0], sample_id=k) for k in range(20)]

    def test_empty_source(self):
        """Test drawing from an empty source raises."""
        with pytest.raises(EnvironmentStateError):
            TopologySource([]).next(np.random.default_rng(0))

    def test_single(self, small_test_set):
        """Test a fixed source always returns its topology."""
        source = TopologySource.single(small_test_set[4])
        rng = np.random.default_rng(0)
        assert all(source.next(rng) is small_test_set[4] for _ in range(5))

    def test_consecutive(self, snapshots):
        """Test consecutive sampling walks the dataset in order."""
        source = TopologySource(snapshots, SamplingMode.CONSECUTIVE)
        rng = np.random.default_rng(0)
        ids = [source.next(rng).sample_id for _ in range(22)]
        assert ids == list(range(20)) + [0, 1]

    def test_consecutive_batches(self, snapshots):
        """Test batches of ten consecutive samples from a random start."""
        source = TopologySource(snapshots, SamplingMode.CONSECUTIVE_BATCHES)
        rng = np.random.default_rng(3)
        ids = [source.next(rng).sample_id for _ in range(10)]
        assert all((b - a) % 20 == 1 for a, b in zip(ids, ids[1:], strict=False))

    def test_random_covers_dataset(self, snapshots):
        """Test uniform sampling reaches most samples."""
        source = TopologySource(snapshots, SamplingMode.RANDOM)
        rng = np.random.default_rng(0)
        ids = {source.next(rng).sample_id for _ in range(200)}
        assert len(ids) == 20


class TestEnvironment:
    """Test the interference game environment."""

    def test_step_before_reset(self, nfig_env):
        """Test stepping a fresh environment raises."""
        with pytest.raises(EnvironmentStateError, match="reset"):
            nfig_env.step([0, 0])

    def test_nfig_is_one_shot(self, nfig_env):
        """Test NFIG ends after one step and refuses another."""
        observations = nfig_env.reset()
        assert observations.shape == (2, nfig_env.state_dim)
        outcome = nfig_env.step([0, 3])
        assert outcome.done
        assert outcome.t == 1
        np.testing.assert_array_equal(outcome.rewards, [outcome.reward] * 2)
        with pytest.raises(EnvironmentStateError, match="finished"):
            nfig_env.step([0, 3])

    def test_invalid_action(self, nfig_env):
        """Test out-of-range actions are rejected."""
        nfig_env.reset()
        with pytest.raises(ConfigurationError):
            nfig_env.step([0, nfig_env.n_actions])

    def test_nfig_reward_matches_batch(self, nfig_env):
        """Test the environment reward equals the vectorized evaluation."""
        nfig_env.reset()
        realization = nfig_env.realization
        actions = np.array([[1, 6], [0, 0], [7, 2]])
        expected = evaluate_joint_actions(
            actions, realization, nfig_env.params, nfig_env.weights
        )
        for row, joint in enumerate(actions):
            nfig_env.reset()
            assert nfig_env.step(joint).reward == pytest.approx(expected[row], rel=1e-12)

    def test_sig_horizon(self, sig_env):
        """Test the episode runs for the configured horizon."""
        sig_env.reset()
        steps = 0
        while not sig_env.done:
            outcome = sig_env.step(sig_env.silent_action())
            steps += 1
        assert steps == 5
        assert outcome.t == 5

    def test_silent_links_keep_queue_full(self, sig_env):
        """Test queues stay at one when nobody transmits."""
        sig_env.reset()
        for _ in range(3):
            outcome = sig_env.step(sig_env.silent_action())
            np.testing.assert_array_equal(sig_env.queue.q, [1.0, 1.0])
            np.testing.assert_array_equal(outcome.rates.v2v, [0.0, 0.0])

    def test_reset_restarts(self, sig_env):
        """Test reset clears the queue and time index."""
        sig_env.reset()
        sig_env.step(sig_env.silent_action())
        sig_env.reset()
        assert sig_env.queue.t == 0
        assert not sig_env.done

    def test_pinned_topology_is_deterministic(self, sig_env, small_test_set):
        """Test pinned topologies reuse identical frozen gains."""
        sig_env.reset(topology=small_test_set[7])
        first = sig_env.realization.v2v.copy()
        sig_env.reset(topology=small_test_set[2])
        sig_env.reset(topology=small_test_set[7])
        np.testing.assert_array_equal(sig_env.realization.v2v, first)

    def test_partial_observation(self, small_test_set):
        """Test POSIG agents see only their local features."""
        source = TopologySource(small_test_set)
        env = InterferenceGameEnv(Task.POSIG, source, ChannelParams(n_subchannels=2), seed=1)
        observations = env.reset()
        assert env.obs_dim == local_observation_dim(2)
        assert observations.shape == (2, 8)
        np.testing.assert_array_equal(observations[:, -2], [1.0, 1.0])
        np.testing.assert_array_equal(observations[:, -1], [0.0, 0.0])
        np.testing.assert_array_equal(observations[:, 4:6], np.zeros((2, 2)))

    def test_fast_fading_changes_each_step(self, small_test_set):
        """Test FF tasks redraw small-scale fading every interval."""
        env = InterferenceGameEnv(
            Task.SIG_SL_FF,
            TopologySource.single(small_test_set[0]),
            ChannelParams(n_subchannels=2),
            GameConfig(horizon=3),
            seed=0,
        )
        env.reset()
        before = env.realization.v2v.copy()
        env.step(env.silent_action())
        assert not np.array_equal(env.realization.v2v, before)

    def test_run_episode(self, sig_env):
        """Test a silent episode earns only V2I reward."""
        total = run_episode(sig_env, SilentPolicy(), seed=0)
        assert total > 0
        assert sig_env.done
