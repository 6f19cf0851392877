"""Test configuration and fixtures for pyv2xbench tests."""

import numpy as np
import pytest

from pyv2xbench.games import GameConfig, InterferenceGameEnv, TopologySource
from pyv2xbench.models import (
    ChannelParams,
    ChannelRealization,
    HighwayConfig,
    Task,
    TopologySnapshot,
)
from pyv2xbench.topology import test_topologies


def make_realization(
    v2v: np.ndarray,
    v2v_to_bs: np.ndarray,
    bs_to_v2v: np.ndarray,
    v2i: np.ndarray,
) -> ChannelRealization:
    """Build a realization from plain nested lists or arrays."""
    return ChannelRealization(
        v2v=np.asarray(v2v, dtype=float),
        v2v_to_bs=np.asarray(v2v_to_bs, dtype=float),
        bs_to_v2v=np.asarray(bs_to_v2v, dtype=float),
        v2i=np.asarray(v2i, dtype=float),
    )


@pytest.fixture
def highway() -> HighwayConfig:
    """Default highway at the 35 veh/km level."""
    return HighwayConfig()


@pytest.fixture
def params() -> ChannelParams:
    """Channel parameters with two subchannels."""
    return ChannelParams(n_subchannels=2)


@pytest.fixture
def unit_params() -> ChannelParams:
    """Parameters with 0 dBm noise and power levels that make arithmetic easy."""
    return ChannelParams(
        n_subchannels=2,
        noise_power_dbm=0.0,
        v2i_tx_power_dbm=0.0,
        power_levels_dbm=(10.0, 0.0, -100.0),
        subchannel_bandwidth=1.0,
    )


@pytest.fixture
def two_link_realization() -> ChannelRealization:
    """Two V2V links and two subchannels with distinct, hand-picked gains."""
    v2v = np.zeros((2, 2, 2))
    v2v[0, 0] = [1.0, 2.0]
    v2v[1, 1] = [3.0, 4.0]
    v2v[0, 1] = [0.1, 0.2]
    v2v[1, 0] = [0.3, 0.4]
    return make_realization(
        v2v=v2v,
        v2v_to_bs=[[0.5, 0.6], [0.7, 0.8]],
        bs_to_v2v=[[0.01, 0.02], [0.03, 0.04]],
        v2i=[2.0, 3.0],
    )


@pytest.fixture(scope="session")
def small_test_set() -> list[TopologySnapshot]:
    """Nine test topologies with L=2, M=2."""
    return test_topologies(HighwayConfig(), 2, 2, seed=0)


@pytest.fixture(scope="session")
def tiny_test_set() -> list[TopologySnapshot]:
    """Nine test topologies with L=1, M=1."""
    return test_topologies(HighwayConfig(), 1, 1, seed=0)


@pytest.fixture
def nfig_env(small_test_set) -> InterferenceGameEnv:
    """NFIG environment pinned to the 123_close topology."""
    topology = next(t for t in small_test_set if t.topology_id == "123_close")
    return InterferenceGameEnv(
        Task.NFIG, TopologySource.single(topology), ChannelParams(n_subchannels=2), seed=0
    )


@pytest.fixture
def sig_env(small_test_set) -> InterferenceGameEnv:
    """SIG SL NFF environment with a short horizon."""
    topology = next(t for t in small_test_set if t.topology_id == "123_close")
    return InterferenceGameEnv(
        Task.SIG_SL_NFF,
        TopologySource.single(topology),
        ChannelParams(n_subchannels=2),
        GameConfig(horizon=5),
        seed=0,
    )
