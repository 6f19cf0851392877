"""Tests for oracles, normalization bounds and equilibrium analysis."""

import itertools
import logging

import numpy as np
import pytest

from pyv2xbench.exceptions import DegenerateBoundsError, EnumerationLimitError
from pyv2xbench.games import (
    InterferenceGameEnv,
    TopologySource,
    link_rates,
    reward_nfig,
    sinr_v2i,
    sinr_v2v,
)
from pyv2xbench.models import (
    ChannelParams,
    ChannelRealization,
    EquilibriumSet,
    NormalizationBounds,
    QueueState,
    RewardWeights,
    Task,
)
from pyv2xbench.oracles import (
    BoundsCache,
    OraclePolicy,
    RandomPolicy,
    bounds_key,
    cds_performance_correlation,
    coordination_difficulty_score,
    enumerate_pure_nash,
    exhaustive_best_joint_action,
    exhaustive_search,
    greedy_iterative_assignment,
    iter_joint_actions,
    nfig_payoff_tensor,
    normalize_return,
    oracle_return,
    random_policy_return,
    reward_objective,
    robustness_ablation,
    sig_oracle_objective,
    single_location_bounds,
    verify_equilibrium,
)


def random_realization(rng, n_links, n_subchannels=2):
    """Log-uniform gains spanning the typical dynamic range."""

    def gains(*shape):
        return 10 ** rng.uniform(-12, -6, shape)

    return ChannelRealization(
        v2v=gains(n_links, n_links, n_subchannels),
        v2v_to_bs=gains(n_links, n_subchannels),
        bs_to_v2v=gains(n_links, n_subchannels),
        v2i=gains(n_subchannels),
    )


def brute_force_best(realization, params, weights):
    """Scalar loop over every joint action, independent of the batch engine."""
    best = -np.inf
    for joint in itertools.product(
        range(params.n_actions), repeat=realization.num_v2v_links
    ):
        v2i = link_rates(sinr_v2i(list(joint), realization, params), params)
        v2v = link_rates(sinr_v2v(list(joint), realization, params)[0], params)
        best = max(best, float(reward_nfig(v2i, v2v, weights)))
    return best


class TestJointActions:
    """Test joint action enumeration order."""

    def test_lexicographic_order(self):
        """Test the last agent varies fastest."""
        chunks = list(iter_joint_actions(2, 3, chunk=4))
        flat = np.concatenate(chunks)
        assert flat.tolist() == [list(p) for p in itertools.product(range(3), repeat=2)]
        assert [len(c) for c in chunks] == [4, 4, 1]


class TestExhaustiveSearch:
    """Test the exact oracle."""

    def test_matches_brute_force(self):
        """Test equality with an independent scalar maximizer on random games."""
        params = ChannelParams(n_subchannels=2)
        weights = RewardWeights.nfig()
        rng = np.random.default_rng(0)
        for _ in range(200):
            realization = random_realization(rng, 2)
            _, value = exhaustive_best_joint_action(realization, params, weights)
            assert value == pytest.approx(brute_force_best(realization, params, weights), rel=1e-12)

    def test_returned_action_attains_value(self):
        """Test the reported reward belongs to the reported joint action."""
        params = ChannelParams(n_subchannels=2)
        weights = RewardWeights.nfig()
        realization = random_realization(np.random.default_rng(4), 3)
        action, value = exhaustive_best_joint_action(realization, params, weights)
        v2i = link_rates(sinr_v2i(action, realization, params), params)
        v2v = link_rates(sinr_v2v(action, realization, params)[0], params)
        assert float(reward_nfig(v2i, v2v, weights)) == pytest.approx(value, rel=1e-12)

    def test_refuses_above_guard(self):
        """Test the enumeration guard."""
        params = ChannelParams(n_subchannels=2)
        realization = random_realization(np.random.default_rng(0), 3)
        with pytest.raises(EnumerationLimitError) as exc_info:
            exhaustive_search(realization, params, reward_objective(RewardWeights()), 2)
        assert exc_info.value.details == {"n_agents": 3, "max_agents": 2}

    def test_ties_go_to_smallest_action(self, unit_params):
        """Test a game where every joint action is worth the same."""
        zeros = np.zeros((1, 1, 2))
        realization = ChannelRealization(zeros, np.zeros((1, 2)), np.zeros((1, 2)), np.zeros(2))
        action, value = exhaustive_best_joint_action(realization, unit_params, RewardWeights())
        assert action.tolist() == [0]
        assert value == 0.0

    def test_sig_objective_prefers_pending_throughput(self, two_link_realization, unit_params):
        """Test throughput of pending links outranks the reward."""
        weights = RewardWeights(0.2, 1.8, 0.5, 1.0)
        queue = QueueState(np.array([1.0, 0.0]), 3)
        action, keys = exhaustive_search(
            two_link_realization, unit_params, sig_oracle_objective(weights, queue)
        )
        assert len(keys) == 2
        # link 0 is the only pending one and transmits at full power
        assert action[0] % unit_params.n_power_levels == 0


class TestGreedyAssignment:
    """Test the greedy fallback."""

    def test_never_beats_exhaustive(self):
        """Test greedy is a lower bound of the exhaustive optimum."""
        params = ChannelParams(n_subchannels=2)
        weights = RewardWeights.nfig()
        rng = np.random.default_rng(1)
        for _ in range(30):
            realization = random_realization(rng, 2)
            objective = reward_objective(weights)
            greedy = greedy_iterative_assignment(realization, params, objective)
            _, best = exhaustive_search(realization, params, objective)
            assert greedy.value[0] <= best[0] + 1e-12

    def test_single_agent_is_optimal(self):
        """Test greedy equals exhaustive with one agent."""
        params = ChannelParams(n_subchannels=2)
        weights = RewardWeights.nfig()
        rng = np.random.default_rng(2)
        for _ in range(20):
            realization = random_realization(rng, 1)
            objective = reward_objective(weights)
            greedy = greedy_iterative_assignment(realization, params, objective)
            _, best = exhaustive_search(realization, params, objective)
            assert greedy.value[0] == pytest.approx(best[0], rel=1e-12)

    def test_terminates(self):
        """Test greedy stops once a sweep changes nothing."""
        params = ChannelParams(n_subchannels=4)
        realization = random_realization(np.random.default_rng(3), 6, 4)
        result = greedy_iterative_assignment(realization, params)
        assert result.joint_action.shape == (6,)
        assert result.converged
        assert 1 <= result.sweeps <= 16 * 6

    def test_converges_within_sixteen_sweeps_per_agent(self):
        """Test 1,000 random instances converge within 16 L sweeps."""
        rng = np.random.default_rng(4)
        for _ in range(1000):
            n_links = int(rng.integers(1, 5))
            n_subchannels = int(rng.choice([2, 4]))
            params = ChannelParams(n_subchannels=n_subchannels)
            realization = random_realization(rng, n_links, n_subchannels)
            result = greedy_iterative_assignment(realization, params)
            assert result.converged
            assert result.sweeps <= 16 * n_links

    def test_sweep_cap_warns(self, caplog):
        """Test stopping at the cap is logged and reported."""
        params = ChannelParams(n_subchannels=2)
        realization = random_realization(np.random.default_rng(5), 3)
        with caplog.at_level(logging.WARNING, logger="pyv2xbench.oracles"):
            result = greedy_iterative_assignment(realization, params, max_sweeps=1)
        assert result.sweeps == 1
        assert not result.converged
        assert "1-sweep cap" in caplog.text


class TestPolicies:
    """Test the baseline policies."""

    def test_random_policy_in_range(self, nfig_env):
        """Test random actions are valid action indices."""
        nfig_env.reset()
        policy = RandomPolicy(0)
        actions = np.stack([policy.act(nfig_env) for _ in range(100)])
        assert actions.min() >= 0
        assert actions.max() < nfig_env.n_actions

    def test_unknown_oracle_mode(self):
        """Test oracle modes are validated."""
        with pytest.raises(ValueError, match="unknown oracle mode"):
            OraclePolicy("psychic")

    def test_oracle_beats_random(self, nfig_env):
        """Test the oracle return dominates the random return."""
        random = random_policy_return(nfig_env, n_episodes=50)
        oracle = oracle_return(nfig_env)
        assert oracle.mean > random.mean
        assert random.n_episodes == 50
        assert random.stderr > 0


class TestNormalization:
    """Test the affine return normalization."""

    def test_anchors(self):
        """Test g_min maps to 0 and g_max to 1."""
        bounds = NormalizationBounds(2.0, 6.0)
        assert normalize_return(2.0, bounds) == 0.0
        assert normalize_return(6.0, bounds) == 1.0
        assert normalize_return(4.0, bounds) == 0.5

    def test_below_random_is_negative(self):
        """Test returns below the random baseline go negative."""
        assert normalize_return(1.0, NormalizationBounds(2.0, 6.0)) == -0.25

    def test_arrays(self):
        """Test vectorized normalization."""
        result = normalize_return(np.array([2.0, 6.0]), NormalizationBounds(2.0, 6.0))
        np.testing.assert_array_equal(result, [0.0, 1.0])

    def test_degenerate(self):
        """Test equal anchors raise."""
        with pytest.raises(DegenerateBoundsError, match="degenerate"):
            normalize_return(1.0, NormalizationBounds(3.0, 3.0))

    def test_single_location_bounds(self, nfig_env):
        """Test the oracle normalizes to exactly one on its own topology."""
        topology = nfig_env.source.snapshots[0]
        bounds = single_location_bounds(nfig_env, topology, n_random_episodes=40)
        assert bounds.topology_id == "123_close"
        assert bounds.n_random_episodes == 40
        oracle = oracle_return(nfig_env, topology=topology)
        assert normalize_return(oracle.mean, bounds) == pytest.approx(1.0, abs=1e-12)


class TestBoundsCache:
    """Test persisted normalization bounds."""

    def test_persistence(self, tmp_path):
        """Test bounds written by one cache are read by another."""
        path = tmp_path / "bounds.json"
        key = bounds_key(Task.NFIG, "35_far", 4, 4)
        BoundsCache(path).put(key, NormalizationBounds(1.0, 2.0, Task.NFIG, "35_far"))
        reloaded = BoundsCache(path)
        assert key in reloaded
        assert reloaded.get(key) == NormalizationBounds(1.0, 2.0, Task.NFIG, "35_far")

    def test_get_or_compute_runs_once(self):
        """Test the compute callback only runs on a miss."""
        cache = BoundsCache()
        calls = []

        def compute():
            calls.append(1)
            return NormalizationBounds(0.0, 1.0)

        cache.get_or_compute("k", compute)
        cache.get_or_compute("k", compute)
        assert calls == [1]

    def test_key_format(self):
        """Test the cache key layout."""
        assert bounds_key(Task.SIG_ML, "test_set", 4, 4) == "sig_ml|test_set|L4|M4"

    def test_key_digest_tracks_inputs(self):
        """Test the key digest changes with the inputs and ignores their order."""
        key = bounds_key(Task.NFIG, "35_mid", 2, 2, {"test_seed": 0, "horizon": 1})
        prefix, digest = key.rsplit("|", 1)
        assert prefix == "nfig|35_mid|L2|M2"
        assert len(digest) == 16
        assert key == bounds_key(Task.NFIG, "35_mid", 2, 2, {"horizon": 1, "test_seed": 0})
        assert key != bounds_key(Task.NFIG, "35_mid", 2, 2, {"test_seed": 7, "horizon": 1})


class TestNashEquilibria:
    """Test pure equilibrium enumeration and the coordination score."""

    def test_coordination_game(self):
        """Test both diagonal cells of a 2x2 coordination game."""
        payoff = np.array([[2.0, 0.0], [0.0, 1.0]])
        eq = enumerate_pure_nash(payoff)
        assert eq.joint_actions == [(0, 0), (1, 1)]
        assert eq.raw_returns == [2.0, 1.0]

    def test_constant_game(self):
        """Test every joint action of a constant game is an equilibrium."""
        eq = enumerate_pure_nash(np.full((3, 3), 5.0))
        assert len(eq.joint_actions) == 9

    def test_global_optimum_is_included(self):
        """Test the argmax of a random common payoff is always an equilibrium."""
        rng = np.random.default_rng(0)
        for _ in range(20):
            payoff = rng.normal(size=(4, 4, 4))
            eq = enumerate_pure_nash(payoff)
            best = np.unravel_index(np.argmax(payoff), payoff.shape)
            assert tuple(int(a) for a in best) in eq.joint_actions

    def test_verify_agrees_with_enumeration(self):
        """Test the deviation check accepts exactly the enumerated equilibria."""
        rng = np.random.default_rng(1)
        payoff = rng.integers(0, 4, size=(3, 3)).astype(float)
        eq = enumerate_pure_nash(payoff)
        for joint in itertools.product(range(3), repeat=2):
            assert verify_equilibrium(payoff, joint) == (joint in eq.joint_actions)

    def test_normalized_returns(self):
        """Test equilibrium returns are normalized with the given bounds."""
        payoff = np.array([[2.0, 0.0], [0.0, 1.0]])
        eq = enumerate_pure_nash(payoff, NormalizationBounds(0.0, 2.0), "toy")
        assert eq.returns == [1.0, 0.5]
        assert eq.topology_id == "toy"

    def test_payoff_tensor_shape(self, two_link_realization, unit_params):
        """Test one payoff entry per joint action."""
        payoff = nfig_payoff_tensor(two_link_realization, unit_params, RewardWeights())
        assert payoff.shape == (6, 6)
        action, value = exhaustive_best_joint_action(
            two_link_realization, unit_params, RewardWeights()
        )
        assert payoff[tuple(action)] == pytest.approx(value)
        assert payoff.max() == pytest.approx(value)

    def test_cds_single_optimal_equilibrium(self):
        """Test a unique optimal equilibrium scores zero."""
        report = coordination_difficulty_score(EquilibriumSet([(0, 0)], [1.0]))
        assert report.score == 0.0
        assert report.equilibrium_count == 1

    def test_cds_two_equilibria(self):
        """Test the score of an optimal and a half-optimal equilibrium."""
        report = coordination_difficulty_score(
            EquilibriumSet([(0, 0), (1, 1)], [1.0, 0.5], topology_id="toy")
        )
        assert report.score == pytest.approx(0.75)
        assert report.topology_id == "toy"

    def test_cds_empty_set(self):
        """Test an empty equilibrium set cannot be scored."""
        with pytest.raises(DegenerateBoundsError, match="empty"):
            coordination_difficulty_score(EquilibriumSet(), "35_close")

    def test_cds_non_positive_best(self):
        """Test a non-positive best equilibrium return cannot be scored."""
        with pytest.raises(DegenerateBoundsError):
            coordination_difficulty_score(EquilibriumSet([(0,)], [0.0]))

    def test_spearman(self):
        """Test the rank correlation sign."""
        rho, _ = cds_performance_correlation([0.1, 0.2, 0.3, 0.4], [0.9, 0.8, 0.7, 0.1])
        assert rho == pytest.approx(-1.0)


class TestRobustnessAblation:
    """Test the train versus held-out comparison."""

    def test_gap(self, small_test_set):
        """Test the gap is the difference of normalized means."""
        env = InterferenceGameEnv(
            Task.NFIG,
            TopologySource(small_test_set),
            ChannelParams(n_subchannels=2),
            seed=0,
        )
        bounds = NormalizationBounds(0.0, 1.0, Task.NFIG)
        result = robustness_ablation(
            RandomPolicy(0), env, small_test_set[:3], small_test_set[3:], bounds
        )
        assert len(result.train_returns) == 3
        assert len(result.test_returns) == 6
        assert result.gap == pytest.approx(
            np.mean(result.train_returns) - np.mean(result.test_returns)
        )
