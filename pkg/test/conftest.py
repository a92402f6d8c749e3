"""Shared small configurations: tests use short tap grids so every run stays fast."""

import pytest

from mimogan.channel import ChannelRealizationConfig, CorrelationConfig, TdlProfile


def small_config(n_rx: int = 2, n_tx: int = 2, n_taps: int = 16, profile: str = "tdl-a", seed: int = 0, fading: str = "rayleigh", correlation: str = "medium-a") -> ChannelRealizationConfig:
    """TDL config with a 30 ns delay spread so the longest path fits in a 16-tap grid."""
    tdl = TdlProfile.single_path() if profile == "single-tap" else TdlProfile.bundled(profile, desired_delay_spread_ns=30.0)
    corr = CorrelationConfig.identity(n_tx, n_rx) if correlation == "identity" else CorrelationConfig.medium_a(n_tx, n_rx)
    return ChannelRealizationConfig(profile=tdl, correlation=corr, n_tx=n_tx, n_rx=n_rx, n_taps=n_taps, rng_seed=seed, fading=fading)


@pytest.fixture
def config_2x2() -> ChannelRealizationConfig:
    return small_config()


@pytest.fixture
def single_tap_1x1() -> ChannelRealizationConfig:
    return small_config(1, 1, n_taps=8, profile="single-tap", fading="static", correlation="identity")
