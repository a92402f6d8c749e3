"""Tests for complex containers, convolution and gram matrices."""

import numpy as np
import pytest

from mimogan.errors import ContractViolationError, NumericError
from mimogan.tensor import ChannelTensor, ComplexVec, Waveform, convolve, delay_stack, deinterleave, gram_batch, interleave, rx_gram

RATE = 30.72e6


def _random_waveform(antennas: int, samples: int, seed: int = 0) -> Waveform:
    rng = np.random.default_rng(seed)
    return Waveform(data=rng.standard_normal((antennas, samples)) + 1j * rng.standard_normal((antennas, samples)), sample_rate_hz=RATE)


def test_delta_channel_passes_input_through():
    x = _random_waveform(2, 32)
    taps = np.zeros((2, 2, 8), dtype=np.complex128)
    taps[0, 0, 0] = 1.0
    taps[1, 1, 0] = 1.0
    y = convolve(ChannelTensor(data=taps, sample_rate_hz=RATE), x)
    assert np.allclose(y.data, x.data), "identity channel must reproduce the input"


def test_delayed_tap_shifts_and_truncates():
    x = _random_waveform(1, 16)
    taps = np.zeros((1, 1, 8), dtype=np.complex128)
    taps[0, 0, 3] = 2.0
    y = convolve(ChannelTensor(data=taps, sample_rate_hz=RATE), x)
    assert y.samples == 16, "output keeps the input length"
    assert np.all(y.data[0, :3] == 0), "causal: nothing before the tap delay"
    assert np.allclose(y.data[0, 3:], 2.0 * x.data[0, :13])


def test_convolution_sums_transmit_antennas():
    x = _random_waveform(2, 10, seed=3)
    taps = np.zeros((1, 2, 4), dtype=np.complex128)
    taps[0, 0, 0] = 1.0
    taps[0, 1, 1] = 1j
    y = convolve(ChannelTensor(data=taps, sample_rate_hz=RATE), x)
    expected = x.data[0].copy()
    expected[1:] += 1j * x.data[1, :-1]
    assert np.allclose(y.data[0], expected)


def test_convolution_rejects_mismatches():
    h = ChannelTensor(data=np.ones((2, 2, 4)), sample_rate_hz=RATE)
    with pytest.raises(ContractViolationError):
        convolve(h, _random_waveform(3, 8))
    with pytest.raises(ContractViolationError):
        convolve(h, Waveform(data=np.ones((2, 8)), sample_rate_hz=1e6))


def test_containers_reject_bad_values():
    with pytest.raises(NumericError):
        ComplexVec(data=[1.0, np.nan])
    with pytest.raises(ValueError):
        Waveform(data=np.ones(4), sample_rate_hz=RATE)
    with pytest.raises(ValueError):
        ChannelTensor(data=np.ones((2, 2, 4)), sample_rate_hz=0.0)


def test_containers_are_read_only():
    vec = ComplexVec(data=[1.0, 2.0])
    with pytest.raises(ValueError):
        vec.data[0] = 5.0


def test_delay_stack_entries():
    x = np.arange(1, 6, dtype=np.complex128).reshape(1, 1, 5)
    stack = delay_stack(x, 3)
    assert stack.shape == (1, 1, 3, 5)
    assert np.array_equal(stack[0, 0, 2], [0, 0, 1, 2, 3])


def test_rx_gram_is_hermitian_outer_product():
    y = _random_waveform(3, 20, seed=1)
    g = rx_gram(y)
    assert np.array_equal(g, g.conj().T), "gram must be exactly Hermitian"
    assert np.allclose(g, y.data @ y.data.conj().T)
    assert np.allclose(gram_batch(y.data[None])[0], g)


def test_interleave_layout():
    assert np.array_equal(interleave(np.array([1 + 2j, 3 - 4j])), [1, 2, 3, -4])
    assert np.array_equal(deinterleave(np.array([1.0, 2.0, 3.0, -4.0])), [1 + 2j, 3 - 4j])
    with pytest.raises(ContractViolationError):
        deinterleave(np.ones(3))


def _loop_convolution(h: np.ndarray, x: np.ndarray) -> np.ndarray:
    n_rx, n_tx, n_taps = h.shape
    samples = x.shape[1]
    y = np.zeros((n_rx, samples), dtype=np.complex128)
    for i in range(n_rx):
        for n in range(samples):
            for j in range(n_tx):
                for tau in range(min(n_taps, n + 1)):
                    y[i, n] += h[i, j, tau] * x[j, n - tau]
    return y


@pytest.mark.parametrize("n_rx,n_tx", [(1, 1), (2, 2), (4, 4)])
def test_convolution_matches_direct_sum(n_rx, n_tx):
    rng = np.random.default_rng(n_rx)
    for instance in range(200):
        n_taps, samples = int(rng.integers(1, 9)), int(rng.integers(1, 21))
        taps = rng.standard_normal((n_rx, n_tx, n_taps)) + 1j * rng.standard_normal((n_rx, n_tx, n_taps))
        x = _random_waveform(n_tx, samples, seed=instance)
        y = convolve(ChannelTensor(data=taps, sample_rate_hz=RATE), x)
        assert np.max(np.abs(y.data - _loop_convolution(taps, x.data))) < 1e-12, f"instance {instance}, L={n_taps}, T={samples}"


def test_convolution_is_linear():
    rng = np.random.default_rng(4)
    h1, h2 = (rng.standard_normal((2, 3, 5)) + 1j * rng.standard_normal((2, 3, 5)) for _ in range(2))
    x1, x2 = _random_waveform(3, 12, seed=5), _random_waveform(3, 12, seed=6)
    a, b = 0.7 - 1.2j, -2.0 + 0.3j

    def run(h, x):
        return convolve(ChannelTensor(data=h, sample_rate_hz=RATE), Waveform(data=x, sample_rate_hz=RATE)).data

    assert np.allclose(run(h1, a * x1.data + b * x2.data), a * run(h1, x1.data) + b * run(h1, x2.data), atol=1e-12)
    assert np.allclose(run(a * h1 + b * h2, x1.data), a * run(h1, x1.data) + b * run(h2, x1.data), atol=1e-12)


def test_impulse_on_one_transmitter_reads_its_column():
    rng = np.random.default_rng(7)
    taps = rng.standard_normal((3, 2, 6)) + 1j * rng.standard_normal((3, 2, 6))
    h = ChannelTensor(data=taps, sample_rate_hz=RATE)
    for j in range(2):
        x = np.zeros((2, 10), dtype=np.complex128)
        x[j, 0] = 1.0
        y = convolve(h, Waveform(data=x, sample_rate_hz=RATE))
        assert np.array_equal(y.data[:, :6], taps[:, j, :]), f"column {j}"
        assert np.all(y.data[:, 6:] == 0)


def test_rx_gram_matches_direct_sum():
    y = _random_waveform(4, 15, seed=9)
    expected = np.zeros((4, 4), dtype=np.complex128)
    for a in range(4):
        for b in range(4):
            for n in range(15):
                expected[a, b] += y.data[a, n] * np.conj(y.data[b, n])
    assert np.max(np.abs(rx_gram(y) - expected)) < 1e-12


def test_rx_gram_of_orthonormal_rows_is_identity():
    rng = np.random.default_rng(10)
    q, _ = np.linalg.qr(rng.standard_normal((16, 3)) + 1j * rng.standard_normal((16, 3)))
    g = rx_gram(Waveform(data=q.T, sample_rate_hz=RATE))
    assert np.allclose(g, np.eye(3), atol=1e-12)


def test_rx_gram_rejects_non_hermitian_result(monkeypatch):
    monkeypatch.setattr("mimogan.tensor.gram_batch", lambda y: np.array([[1.0, 2.0], [0.0, 1.0]], dtype=np.complex128))
    with pytest.raises(NumericError, match="Hermitian"):
        rx_gram(_random_waveform(2, 4))
