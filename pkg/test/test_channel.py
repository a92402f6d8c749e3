"""Tests for the reference TDL MIMO channel simulator."""

import numpy as np
import pytest

from conftest import small_config
from mimogan.channel import (
    MEDIUM_A_ALPHA,
    ChannelRealizationConfig,
    CorrelationConfig,
    TdlProfile,
    apply_channel,
    correlation_sqrt,
    exponential_correlation,
    fractional_delay_kernel,
    path_kernels,
    projected_pdp,
    read_complex_matrix_csv,
    realization_rng,
    sample_channel,
    sample_channels,
    write_complex_matrix_csv,
)
from mimogan.errors import ConfigurationError
from mimogan.metrics import mean_pdp, pdp_stats, spatial_correlations
from mimogan.tensor import Waveform


@pytest.mark.parametrize("name", ["tdl-a", "tdl-b"])
def test_bundled_profiles(name):
    profile = TdlProfile.bundled(name)
    assert profile.n_paths == 23, f"{name} should have 23 paths"
    assert profile.normalized_delays[0] == 0.0
    assert profile.normalized_delays == sorted(profile.normalized_delays)
    assert np.isclose(profile.linear_powers.sum(), 1.0)


def test_profile_validation():
    with pytest.raises(ValueError):
        TdlProfile(name="custom", normalized_delays=[0.0, 2.0, 1.0], powers_db=[0.0, -1.0, -2.0])
    with pytest.raises(ValueError):
        TdlProfile(name="custom", normalized_delays=[0.5], powers_db=[0.0])
    with pytest.raises(ConfigurationError):
        TdlProfile.bundled("tdl-z")


def test_profile_from_csv(tmp_path):
    path = tmp_path / "two_path.csv"
    path.write_text("delay_normalized,power_db\n1.0,-3.0\n0.0,0.0\n")
    profile = TdlProfile.from_csv(path, desired_delay_spread_ns=100.0)
    assert profile.normalized_delays == [0.0, 1.0], "rows are sorted by delay"
    assert np.allclose(profile.delays_s, [0.0, 100e-9])


def test_exponential_correlation():
    r = exponential_correlation(4, MEDIUM_A_ALPHA)
    assert np.allclose(np.diag(r), 1.0)
    assert np.isclose(r[0, 3], 0.3)
    assert np.isclose(r[0, 1], 0.3 ** (1 / 9))
    assert np.array_equal(exponential_correlation(1, 0.3), [[1.0]])


@pytest.mark.parametrize("n", [1, 2, 4])
def test_medium_a_matrices_are_valid(n):
    corr = CorrelationConfig.medium_a(n, n)
    for r in (corr.r_tx, corr.r_rx):
        assert np.allclose(r, r.conj().T)
        assert np.allclose(np.diag(r), 1.0)
        assert np.linalg.eigvalsh(r).min() > -1e-12


def test_correlation_validation():
    with pytest.raises(ValueError):
        CorrelationConfig(r_tx=np.array([[1.0, 0.5], [0.2, 1.0]]), r_rx=np.eye(2))
    with pytest.raises(ValueError):
        CorrelationConfig(r_tx=np.array([[2.0, 0.0], [0.0, 1.0]]), r_rx=np.eye(2))
    with pytest.raises(ValueError):
        CorrelationConfig(r_tx=np.array([[1.0, 2.0], [2.0, 1.0]]), r_rx=np.eye(2))


def test_correlation_sqrt():
    r = CorrelationConfig.medium_a(4, 4).r_rx
    s = correlation_sqrt(r)
    assert np.allclose(s @ s.conj().T, r)


def test_complex_matrix_csv(tmp_path):
    matrix = np.array([[1.0, 0.2 + 0.1j], [0.2 - 0.1j, 1.0]])
    write_complex_matrix_csv(tmp_path / "r.csv", matrix)
    assert np.allclose(read_complex_matrix_csv(tmp_path / "r.csv"), matrix)
    corr = CorrelationConfig.from_csv(tmp_path / "r.csv", tmp_path / "r.csv")
    assert corr.n_tx == 2 and corr.n_rx == 2


def test_integer_delay_kernel_is_exact_delta():
    kernel = fractional_delay_kernel(5.0, 16)
    expected = np.zeros(16)
    expected[5] = 1.0
    assert np.array_equal(kernel, expected)


def test_fractional_delay_kernel_energy_and_peak():
    kernel = fractional_delay_kernel(20.4, 64)
    assert abs(np.sum(kernel ** 2) - 1.0) < 0.01, "kernel well inside the grid keeps unit energy"
    assert int(np.argmax(np.abs(kernel))) == 20


def test_config_consistency_checks():
    with pytest.raises(ValueError):
        ChannelRealizationConfig(profile=TdlProfile.single_path(), correlation=CorrelationConfig.identity(2, 2), n_tx=4, n_rx=2)
    with pytest.raises(ValueError):
        ChannelRealizationConfig(profile=TdlProfile.bundled("tdl-a"), correlation=CorrelationConfig.identity(1, 1), n_tx=1, n_rx=1, n_taps=32)


def test_config_hash_ignores_seed(config_2x2):
    assert config_2x2.config_hash() == config_2x2.model_copy(update={"rng_seed": 99}).config_hash()
    assert config_2x2.config_hash() != small_config(n_taps=24).config_hash()


def test_sampling_is_reproducible(config_2x2):
    first = sample_channel(config_2x2)
    second = sample_channel(config_2x2)
    assert np.array_equal(first.data, second.data), "same seed gives the same realization"
    other = sample_channel(config_2x2, realization_rng(config_2x2.rng_seed, 1))
    assert not np.array_equal(first.data, other.data)
    assert first.data.shape == (2, 2, 16)


def test_sampling_independent_of_threads_and_batching(config_2x2):
    ids = list(range(10))
    sequential = sample_channels(config_2x2, ids, threads=1)
    threaded = sample_channels(config_2x2, ids, threads=3)
    assert np.array_equal(sequential, threaded), "thread count must not change any realization"
    assert np.array_equal(sample_channels(config_2x2, [7])[0], sequential[7]), "a realization depends only on its id"
    assert sample_channels(config_2x2, []).shape == (0, 2, 2, 16)


def test_static_fading_is_deterministic_gain():
    cfg = small_config(2, 2, n_taps=8, profile="single-tap", fading="static", correlation="identity")
    h = sample_channels(cfg, range(3))
    assert np.allclose(h[:, :, :, 0], 1.0)
    assert np.allclose(h[:, :, :, 1:], 0.0)


def test_rayleigh_power_and_kronecker_correlation():
    cfg = small_config(2, 2, n_taps=4, profile="single-tap")
    h = sample_channels(cfg, range(6000))[:, :, :, 0]
    assert abs(np.mean(np.abs(h) ** 2) - 1.0) < 0.05, "unit power per link"
    tx = np.einsum("bia,bic->ac", h.conj(), h) / (h.shape[0] * cfg.n_rx)
    rx = np.einsum("bat,bct->ac", h, h.conj()) / (h.shape[0] * cfg.n_tx)
    assert np.allclose(tx, cfg.correlation.r_tx, atol=0.06), f"transmit correlation {tx}"
    assert np.allclose(rx, cfg.correlation.r_rx, atol=0.06), f"receive correlation {rx}"


def test_empirical_pdp_matches_projection():
    cfg = small_config(1, 1, n_taps=16, correlation="identity")
    expected = projected_pdp(cfg)
    measured = mean_pdp(sample_channels(cfg, range(4000)))
    assert np.allclose(measured, expected, atol=0.05 * expected.max())


def test_apply_channel_matches_first_tap(single_tap_1x1):
    h = sample_channel(single_tap_1x1)
    x = Waveform(data=np.arange(8).reshape(1, 8), sample_rate_hz=single_tap_1x1.sample_rate_hz)
    assert np.allclose(apply_channel(h, x).data, x.data)


def test_path_kernels_peak_at_nearest_sample(config_2x2):
    kernels = path_kernels(config_2x2)
    assert kernels.shape == (config_2x2.profile.n_paths, config_2x2.n_taps)
    assert np.all((kernels ** 2).sum(axis=1) <= 1.0 + 1e-12), "truncation can only lose kernel energy"
    nearest = np.floor(config_2x2.delays_samples + 0.5).astype(int)
    assert np.array_equal(np.abs(kernels).argmax(axis=1), nearest), "each kernel peaks at the grid point nearest its delay"
    assert np.allclose(projected_pdp(config_2x2), config_2x2.profile.linear_powers @ kernels ** 2)


def test_tdl_a_delay_statistics_at_300_ns():
    cfg = ChannelRealizationConfig(
        profile=TdlProfile.bundled("tdl-a", desired_delay_spread_ns=300.0),
        correlation=CorrelationConfig.identity(1, 1),
        n_tx=1,
        n_rx=1,
    )
    stats = pdp_stats(mean_pdp(sample_channels(cfg, range(10_000))), cfg.sample_rate_hz)
    assert stats.average_delay_us == pytest.approx(0.2641, rel=0.05)
    assert stats.rms_delay_spread_us == pytest.approx(0.2897, rel=0.05)


def test_strong_correlation_is_recovered_at_4x4():
    r = exponential_correlation(4, 0.9)
    cfg = ChannelRealizationConfig(
        profile=TdlProfile.single_path(),
        correlation=CorrelationConfig(r_tx=r, r_rx=r),
        n_tx=4,
        n_rx=4,
        n_taps=4,
    )
    report = spatial_correlations(sample_channels(cfg, range(10_000)), r, r, n_taps=1)
    assert report.taps == [0]
    assert np.max(np.abs(report.r_tx_hat - r)) < 0.03
    assert np.max(np.abs(report.r_rx_hat - r)) < 0.03
