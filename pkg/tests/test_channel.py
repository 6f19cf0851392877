"""Tests for the radio channel model."""

from dataclasses import replace

import numpy as np
import pytest

from pyv2xbench.channel import (
    INACTIVE_GAIN,
    ShadowingState,
    fast_fading,
    large_scale_gains,
    path_loss_v2i,
    path_loss_v2v,
    realize,
    realize_gains,
    shadowing,
    v2i_distance,
)
from pyv2xbench.games import interference_v2v, sinr_v2i
from pyv2xbench.models import ChannelParams, FadingMode, LargeScaleGains
from pyv2xbench.topology import generate_initial_topology, step_mobility


class TestPathLoss:
    """Test the path loss formulas."""

    def test_v2v_floor(self):
        """Test distances below 3 m use the 3 m value."""
        expected = 22.7 * np.log10(3.0) + 41.0 + 20.0 * np.log10(2.0 / 5.0)
        assert path_loss_v2v(3.0) == pytest.approx(expected)
        assert path_loss_v2v(0.5) == pytest.approx(expected)
        assert expected == pytest.approx(43.87, abs=0.01)

    def test_v2i_reference_points(self):
        """Test the V2I model at 1 km and 100 m."""
        assert path_loss_v2i(1000.0) == pytest.approx(128.1)
        assert path_loss_v2i(100.0) == pytest.approx(90.5)
        assert path_loss_v2i(1.0) == pytest.approx(path_loss_v2i(10.0))

    def test_monotone_in_distance(self):
        """Test both models increase with distance."""
        d = np.array([5.0, 50.0, 500.0, 1500.0])
        assert np.all(np.diff(path_loss_v2v(d)) > 0)
        assert np.all(np.diff(path_loss_v2i(d)) > 0)

    def test_v2i_distance_uses_antenna_heights(self):
        """Test the 3-D distance includes the height difference."""
        params = ChannelParams()
        dh = params.bs_antenna_height - params.vehicle_antenna_height
        assert v2i_distance(0.0, params) == pytest.approx(abs(dh))
        assert v2i_distance(100.0, params) > 100.0


class TestRandomComponents:
    """Test shadowing and fading draws."""

    def test_shadowing_unmoved_is_unchanged(self):
        """Test zero displacement keeps the previous shadowing."""
        rng = np.random.default_rng(0)
        previous = np.array([1.0, -2.0, 3.5])
        np.testing.assert_allclose(shadowing(previous, 0.0, 3.0, 10.0, rng), previous)

    def test_shadowing_far_move_is_stationary(self):
        """Test a large move redraws from N(0, sigma)."""
        rng = np.random.default_rng(1)
        draws = shadowing(np.full(20000, 5.0), 1e6, 3.0, 10.0, rng)
        assert abs(draws.mean()) < 0.1
        assert draws.std() == pytest.approx(3.0, rel=0.03)

    def test_fast_fading_unit_mean(self):
        """Test Rayleigh power factors average to one."""
        draws = fast_fading(np.random.default_rng(2), 50000)
        assert draws.min() >= 0.0
        assert draws.mean() == pytest.approx(1.0, rel=0.02)


class TestShadowingState:
    """Test per-link shadowing state."""

    def test_initial_shapes(self):
        """Test one entry per link."""
        state = ShadowingState.initial(3, 2, ChannelParams(), np.random.default_rng(0))
        assert state.v2v.shape == (3, 3)
        assert state.v2v_to_bs.shape == (3,)
        assert state.bs_to_v2v.shape == (3, 2)
        assert state.v2i.shape == (2,)

    def test_frozen_is_deterministic(self, highway):
        """Test frozen shadowing depends only on channel seed and sample id."""
        snapshot = generate_initial_topology(highway, 2, 2, rng=0, sample_id=4)
        params = ChannelParams()
        first = ShadowingState.frozen(snapshot, params, channel_seed=7)
        second = ShadowingState.frozen(snapshot, params, channel_seed=7)
        other = ShadowingState.frozen(snapshot, params, channel_seed=8)
        np.testing.assert_array_equal(first.v2v, second.v2v)
        assert not np.array_equal(first.v2v, other.v2v)

    def test_advance_redraws_unrelated_snapshots(self, highway):
        """Test snapshots outside one rollout get an independent draw."""
        params = ChannelParams()
        a = generate_initial_topology(highway, 2, 2, rng=0)
        b = generate_initial_topology(highway, 2, 2, rng=1)
        state = ShadowingState.initial(2, 2, params, np.random.default_rng(0))
        advanced = state.advance(a, b, params, np.random.default_rng(5))
        expected = ShadowingState.initial(2, 2, params, np.random.default_rng(5))
        np.testing.assert_array_equal(advanced.v2i, expected.v2i)

    def test_advance_correlates_within_rollout(self, highway):
        """Test a short move inside a rollout keeps shadowing close."""
        params = ChannelParams()
        first = generate_initial_topology(highway, 2, 2, rng=0)
        first = replace(first, rollout_id=0)
        second = step_mobility(first, highway, 0.001, rng=0)
        state = ShadowingState.initial(2, 2, params, np.random.default_rng(0))
        advanced = state.advance(first, second, params, np.random.default_rng(1))
        assert np.max(np.abs(advanced.v2i - state.v2i)) < 2.0


class TestGains:
    """Test gain construction and realization."""

    def test_zero_shadowing_matches_path_loss(self, highway):
        """Test the V2I gain equals the path loss plus antenna terms."""
        params = ChannelParams()
        snapshot = generate_initial_topology(highway, 1, 1, rng=3)
        zero = ShadowingState(np.zeros((1, 1)), np.zeros(1), np.zeros((1, 1)), np.zeros(1))
        gains = large_scale_gains(snapshot, params, zero)
        horizontal = np.linalg.norm(
            snapshot.v2i_positions()[0] - np.asarray(snapshot.bs_position)
        )
        expected_db = (
            -path_loss_v2i(v2i_distance(horizontal, params))
            + params.vehicle_gain_dbi
            + params.bs_gain_dbi
            - params.bs_noise_figure_db
        )
        assert gains.g_v2i[0] == pytest.approx(10 ** (expected_db / 10))

    def test_nff_constant_across_subchannels(self, highway):
        """Test without fast fading every subchannel carries the same gain."""
        params = ChannelParams()
        snapshot = generate_initial_topology(highway, 2, 4, rng=0)
        shadow = ShadowingState.initial(2, 4, params, np.random.default_rng(0))
        real = realize(snapshot, params, shadow, FadingMode.NFF)
        assert real.v2v.shape == (2, 2, 4)
        np.testing.assert_array_equal(real.v2v[:, :, 0], real.v2v[:, :, 3])
        np.testing.assert_array_equal(real.v2v_to_bs[:, 0], real.v2v_to_bs[:, 2])

    def test_ff_varies_across_subchannels(self, highway):
        """Test fast fading makes subchannels differ."""
        params = ChannelParams()
        snapshot = generate_initial_topology(highway, 2, 4, rng=0)
        shadow = ShadowingState.initial(2, 4, params, np.random.default_rng(0))
        real = realize(snapshot, params, shadow, FadingMode.FF, np.random.default_rng(9))
        assert not np.array_equal(real.v2v[:, :, 0], real.v2v[:, :, 1])

    def test_ff_requires_rng(self):
        """Test fast fading without a generator raises."""
        gains = LargeScaleGains(np.ones((1, 1)), np.ones(1), np.ones((1, 1)), np.ones(1))
        with pytest.raises(ValueError, match="random generator"):
            realize_gains(gains, 1, FadingMode.FF)

    def test_missing_v2i_users_are_masked(self):
        """Test subchannels without a V2I user keep positive gains and are masked."""
        gains = LargeScaleGains(np.ones((1, 1)), np.ones(1), np.ones((1, 1)), np.ones(1))
        real = realize_gains(gains, 3, FadingMode.NFF)
        np.testing.assert_array_equal(real.v2i, [1.0, INACTIVE_GAIN, INACTIVE_GAIN])
        np.testing.assert_array_equal(real.bs_to_v2v, [[1.0, INACTIVE_GAIN, INACTIVE_GAIN]])
        np.testing.assert_array_equal(real.active_subchannels, [1.0, 0.0, 0.0])
        assert real.num_subchannels == 3

    def test_masked_subchannels_carry_no_uplink(self):
        """Test padded subchannels stay positive under fading but add no V2I terms."""
        params = ChannelParams(n_subchannels=4)
        gains = LargeScaleGains(
            np.full((2, 2), 1e-9), np.full(2, 1e-10), np.full((2, 2), 1e-11), np.full(2, 1e-10)
        )
        real = realize_gains(gains, 4, FadingMode.FF, np.random.default_rng(0))
        for tensor in (real.v2v, real.v2v_to_bs, real.bs_to_v2v, real.v2i):
            assert np.all(tensor > 0)

        # both agents on padded subchannel 3 at the highest power
        actions = np.full(2, 3 * params.n_power_levels)
        power = params.power_levels_mw[0]
        assert sinr_v2i(actions, real, params)[2:].tolist() == [0.0, 0.0]
        interference = interference_v2v(actions, real, params)
        assert interference[1, 3] == pytest.approx(power * real.v2v[0, 1, 3])
        assert interference[0, 3] == pytest.approx(power * real.v2v[1, 0, 3])
