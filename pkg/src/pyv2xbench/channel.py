"""
Radio channel model for the freeway C-V2X scenario.

Large-scale gains combine path loss, log-normal shadowing and antenna terms
and are frequency independent. Small-scale fading is Rayleigh (exponential
power, unit mean) drawn i.i.d. per link, subchannel and communication interval.
All gains are linear power gains.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .models import (
    ChannelParams,
    ChannelRealization,
    FadingMode,
    LargeScaleGains,
    TopologySnapshot,
    db_to_linear,
)

logger = logging.getLogger(__name__)

# Gain on subchannels without a V2I user; 150 dB below unity, masked out of rates.
INACTIVE_GAIN = 1e-15


def path_loss_v2v(
    distance: float | np.ndarray, carrier_frequency_ghz: float = 2.0
) -> np.ndarray:
    """V2V line-of-sight path loss in dB with a 3 m distance floor."""
    d = np.maximum(np.asarray(distance, dtype=float), 3.0)
    return 22.7 * np.log10(d) + 41.0 + 20.0 * np.log10(carrier_frequency_ghz / 5.0)


def path_loss_v2i(distance: float | np.ndarray) -> np.ndarray:
    """V2I path loss in dB over the 3-D distance, with a 10 m floor."""
    d = np.maximum(np.asarray(distance, dtype=float), 10.0)
    return 128.1 + 37.6 * np.log10(d / 1000.0)


def v2i_distance(horizontal: float | np.ndarray, params: ChannelParams) -> np.ndarray:
    """3-D vehicle-to-BS distance including antenna heights."""
    dh = params.bs_antenna_height - params.vehicle_antenna_height
    return np.sqrt(np.asarray(horizontal, dtype=float) ** 2 + dh**2)


def shadowing(
    previous: float | np.ndarray,
    moved: float | np.ndarray,
    sigma_db: float,
    decorrelation: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """
    Correlated log-normal shadowing update.

    S' = rho * S + sqrt(1 - rho^2) * N(0, sigma), rho = exp(-moved / decorrelation).
    The stationary marginal is N(0, sigma).
    """
    prev = np.asarray(previous, dtype=float)
    rho = np.exp(-np.asarray(moved, dtype=float) / decorrelation)
    noise = rng.normal(0.0, sigma_db, size=np.broadcast(prev, rho).shape)
    return rho * prev + np.sqrt(1.0 - rho**2) * noise


def fast_fading(
    rng: np.random.Generator, size: int | tuple[int, ...] | None = None
) -> np.ndarray:
    """Rayleigh power fading factors, Exponential with mean 1."""
    return rng.exponential(1.0, size=size)


@dataclass(frozen=True, eq=False)
class ShadowingState:
    """Per-link shadowing in dB, owned by one environment instance."""

    v2v: np.ndarray = field(metadata={"description": "(L, L) Tx_j -> Rx_i"})
    v2v_to_bs: np.ndarray = field(metadata={"description": "(L,) Tx_i -> BS"})
    bs_to_v2v: np.ndarray = field(metadata={"description": "(L, M) V2I Tx m -> Rx_i"})
    v2i: np.ndarray = field(metadata={"description": "(M,) V2I Tx m -> BS"})

    @classmethod
    def initial(
        cls,
        num_v2v_links: int,
        num_v2i_links: int,
        params: ChannelParams,
        rng: np.random.Generator,
    ) -> ShadowingState:
        """Draw every link from the stationary marginal."""
        v2v_sigma, v2i_sigma = params.v2v_shadow_std_db, params.v2i_shadow_std_db
        return cls(
            v2v=rng.normal(0.0, v2v_sigma, (num_v2v_links, num_v2v_links)),
            v2v_to_bs=rng.normal(0.0, v2i_sigma, num_v2v_links),
            bs_to_v2v=rng.normal(0.0, v2v_sigma, (num_v2v_links, num_v2i_links)),
            v2i=rng.normal(0.0, v2i_sigma, num_v2i_links),
        )

    @classmethod
    def frozen(
        cls, snapshot: TopologySnapshot, params: ChannelParams, channel_seed: int
    ) -> ShadowingState:
        """Deterministic shadowing of one topology, keyed by (channel_seed, sample_id)."""
        rng = np.random.default_rng([channel_seed, snapshot.sample_id])
        return cls.initial(snapshot.num_v2v_links, snapshot.num_v2i_links, params, rng)

    def advance(
        self,
        previous: TopologySnapshot,
        current: TopologySnapshot,
        params: ChannelParams,
        rng: np.random.Generator,
    ) -> ShadowingState:
        """
        Update shadowing for the move from ``previous`` to ``current``.

        Vehicle-to-vehicle links decorrelate with the mean displacement of
        their two endpoints, links to the BS with the vehicle displacement.
        Snapshots that are not consecutive samples of one rollout get an
        independent redraw.
        """
        adjacent = (
            previous.rollout_id >= 0
            and previous.rollout_id == current.rollout_id
            and current.step_in_rollout == previous.step_in_rollout + 1
        )
        if not adjacent:
            return ShadowingState.initial(
                current.num_v2v_links, current.num_v2i_links, params, rng
            )
        moved = np.linalg.norm(current.positions() - previous.positions(), axis=1)
        n_v2v = current.num_v2v_links
        tx_moved = moved[0 : 2 * n_v2v : 2]
        rx_moved = moved[1 : 2 * n_v2v : 2]
        v2i_moved = moved[2 * n_v2v :]
        v2v_sigma, v2v_decor = params.v2v_shadow_std_db, params.v2v_decorrelation_m
        v2i_sigma, v2i_decor = params.v2i_shadow_std_db, params.v2i_decorrelation_m
        return ShadowingState(
            v2v=shadowing(
                self.v2v, (tx_moved[:, None] + rx_moved[None, :]) / 2, v2v_sigma, v2v_decor, rng
            ),
            v2v_to_bs=shadowing(self.v2v_to_bs, tx_moved, v2i_sigma, v2i_decor, rng),
            bs_to_v2v=shadowing(
                self.bs_to_v2v,
                (rx_moved[:, None] + v2i_moved[None, :]) / 2,
                v2v_sigma,
                v2v_decor,
                rng,
            ),
            v2i=shadowing(self.v2i, v2i_moved, v2i_sigma, v2i_decor, rng),
        )


def _pairwise_distance(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.linalg.norm(a[:, None, :] - b[None, :, :], axis=2)


def large_scale_gains(
    snapshot: TopologySnapshot,
    params: ChannelParams,
    shadow: ShadowingState,
) -> LargeScaleGains:
    """
    Frequency-independent gains alpha = 10^((-PL - S + G_tx + G_rx - NF_rx) / 10).

    V2V receivers use the vehicle antenna gain and noise figure, the BS its own.
    """
    tx = snapshot.tx_positions()
    rx = snapshot.rx_positions()
    v2i = snapshot.v2i_positions()
    bs = np.asarray(snapshot.bs_position, dtype=float)
    fc = params.carrier_frequency_ghz

    to_vehicle = 2 * params.vehicle_gain_dbi - params.vehicle_noise_figure_db
    to_bs = params.vehicle_gain_dbi + params.bs_gain_dbi - params.bs_noise_figure_db

    v2v_db = -path_loss_v2v(_pairwise_distance(tx, rx), fc) - shadow.v2v + to_vehicle
    bs_to_v2v_db = (
        -path_loss_v2v(_pairwise_distance(rx, v2i), fc) - shadow.bs_to_v2v + to_vehicle
    )
    tx_bs = v2i_distance(np.linalg.norm(tx - bs, axis=1), params)
    v2v_to_bs_db = -path_loss_v2i(tx_bs) - shadow.v2v_to_bs + to_bs
    v2i_bs = v2i_distance(np.linalg.norm(v2i - bs, axis=1), params)
    v2i_db = -path_loss_v2i(v2i_bs) - shadow.v2i + to_bs

    return LargeScaleGains(
        g_v2v_cross=db_to_linear(v2v_db),
        g_v2v_to_bs=db_to_linear(v2v_to_bs_db),
        g_bs_to_v2v=db_to_linear(bs_to_v2v_db),
        g_v2i=db_to_linear(v2i_db),
    )


def realize_gains(
    gains: LargeScaleGains,
    n_subchannels: int,
    fading_mode: FadingMode,
    rng: np.random.Generator | None = None,
) -> ChannelRealization:
    """Expand large-scale gains over subchannels and apply small-scale fading."""
    n_v2v = gains.g_v2v_cross.shape[0]
    v2v = np.repeat(gains.g_v2v_cross[:, :, None], n_subchannels, axis=2)
    v2v_to_bs = np.repeat(gains.g_v2v_to_bs[:, None], n_subchannels, axis=1)
    bs_to_v2v = gains.g_bs_to_v2v[:, :n_subchannels].copy()
    v2i = gains.g_v2i[:n_subchannels].copy()
    active = np.arange(n_subchannels) < v2i.shape[0]
    if not active.all():
        missing = n_subchannels - v2i.shape[0]
        bs_to_v2v = np.pad(
            bs_to_v2v, ((0, 0), (0, missing)), constant_values=INACTIVE_GAIN
        )
        v2i = np.pad(v2i, (0, missing), constant_values=INACTIVE_GAIN)

    if fading_mode is FadingMode.FF:
        if rng is None:
            raise ValueError("fast fading requires a random generator")
        v2v = v2v * fast_fading(rng, (n_v2v, n_v2v, n_subchannels))
        v2v_to_bs = v2v_to_bs * fast_fading(rng, (n_v2v, n_subchannels))
        bs_to_v2v = bs_to_v2v * fast_fading(rng, (n_v2v, n_subchannels))
        v2i = v2i * fast_fading(rng, n_subchannels)
    return ChannelRealization(
        v2v=v2v, v2v_to_bs=v2v_to_bs, bs_to_v2v=bs_to_v2v, v2i=v2i, v2i_active=active
    )


def realize(
    snapshot: TopologySnapshot,
    params: ChannelParams,
    shadow: ShadowingState,
    fading_mode: FadingMode,
    rng: np.random.Generator | None = None,
) -> ChannelRealization:
    """Full gain tensors G = alpha * h of one communication interval."""
    gains = large_scale_gains(snapshot, params, shadow)
    return realize_gains(gains, params.n_subchannels, fading_mode, rng)
