"""Complex tensor containers and the signal kernels shared by the simulator and the GAN."""

from typing import Any

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from mimogan.errors import ContractViolationError, NumericError


def ensure_finite(array: np.ndarray, where: str) -> np.ndarray:
    """Raise NumericError if the array holds NaN or Inf."""
    if not np.all(np.isfinite(array)):
        raise NumericError("non-finite values", where=where)
    return array


def _frozen_complex(value: Any, ndim: int, name: str) -> np.ndarray:
    array = np.array(value, dtype=np.complex128, copy=True)
    if array.ndim != ndim:
        raise ContractViolationError(f"{name} must be {ndim}-dimensional, got shape {array.shape}")
    if min(array.shape, default=1) < 1:
        raise ContractViolationError(f"{name} has an empty dimension: {array.shape}")
    ensure_finite(array, name)
    array.flags.writeable = False
    return array


class _ArrayModel(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)


class ComplexVec(_ArrayModel):
    """A finite complex vector (one link response h_ij or one antenna signal)."""

    data: np.ndarray = Field(description="complex128 samples, shape (length,)")

    @field_validator("data", mode="before")
    @classmethod
    def _check_data(cls, value: Any) -> np.ndarray:
        return _frozen_complex(value, 1, "ComplexVec")

    @property
    def length(self) -> int:
        return int(self.data.shape[0])


class Waveform(_ArrayModel):
    """Complex time series per antenna, shape (antennas, samples)."""

    data: np.ndarray = Field(description="complex128 samples, shape (antennas, samples)")
    sample_rate_hz: float = Field(gt=0, description="Sampling rate in Hz")

    @field_validator("data", mode="before")
    @classmethod
    def _check_data(cls, value: Any) -> np.ndarray:
        return _frozen_complex(value, 2, "Waveform")

    @property
    def antennas(self) -> int:
        return int(self.data.shape[0])

    @property
    def samples(self) -> int:
        return int(self.data.shape[1])

    @classmethod
    def zeros(cls, antennas: int, samples: int, sample_rate_hz: float) -> "Waveform":
        return cls(data=np.zeros((antennas, samples), dtype=np.complex128), sample_rate_hz=sample_rate_hz)

    def antenna(self, index: int) -> ComplexVec:
        return ComplexVec(data=self.data[index])


class ChannelTensor(_ArrayModel):
    """Sampled MIMO impulse response H[i, j, tau], shape (n_rx, n_tx, n_taps)."""

    data: np.ndarray = Field(description="complex128 taps, shape (n_rx, n_tx, n_taps)")
    sample_rate_hz: float = Field(gt=0, description="Sampling rate of the tap grid in Hz")

    @field_validator("data", mode="before")
    @classmethod
    def _check_data(cls, value: Any) -> np.ndarray:
        return _frozen_complex(value, 3, "ChannelTensor")

    @property
    def n_rx(self) -> int:
        return int(self.data.shape[0])

    @property
    def n_tx(self) -> int:
        return int(self.data.shape[1])

    @property
    def n_taps(self) -> int:
        return int(self.data.shape[2])

    def link(self, rx: int, tx: int) -> ComplexVec:
        return ComplexVec(data=self.data[rx, tx])


def delay_stack(x: np.ndarray, n_taps: int) -> np.ndarray:
    """
    Shifted copies of a stack of input waveforms.

    Args:
        x: inputs of shape (K, n_tx, T)
        n_taps: number of channel taps L

    Returns:
        Array of shape (K, n_tx, L, T) with entry [k, j, tau, n] = x[k, j, n - tau], zero for n < tau.
    """
    x = np.asarray(x)
    if x.ndim != 3:
        raise ContractViolationError(f"expected inputs of shape (K, n_tx, T), got {x.shape}")
    k, n_tx, t = x.shape
    stack = np.zeros((k, n_tx, n_taps, t), dtype=np.result_type(x.dtype, np.complex128))
    for tau in range(min(n_taps, t)):
        stack[:, :, tau, tau:] = x[:, :, : t - tau]
    return stack


def convolve_batch(h: np.ndarray, x: np.ndarray) -> np.ndarray:
    """
    Convolve B channels with K input waveforms, truncated to the input length.

    Args:
        h: channel taps, shape (B, n_rx, n_tx, L)
        x: input waveforms, shape (K, n_tx, T)

    Returns:
        Outputs of shape (B, K, n_rx, T).
    """
    h = np.asarray(h)
    x = np.asarray(x)
    if h.ndim != 4 or x.ndim != 3:
        raise ContractViolationError(f"expected h (B, n_rx, n_tx, L) and x (K, n_tx, T), got {h.shape} and {x.shape}")
    if h.shape[2] != x.shape[1]:
        raise ContractViolationError(f"channel has {h.shape[2]} tx antennas but input has {x.shape[1]}")
    ensure_finite(h, "convolve_batch channels")
    ensure_finite(x, "convolve_batch inputs")
    return np.einsum("bijl,kjln->bkin", h, delay_stack(x, h.shape[3]), optimize=True)


def convolve(h: ChannelTensor, x: Waveform) -> Waveform:
    """
    Discrete causal convolution y_i[n] = sum_j sum_tau h_ij[tau] x_j[n - tau], first T samples.

    Raises:
        ContractViolationError: antenna count or sample rate mismatch
    """
    if x.antennas != h.n_tx:
        raise ContractViolationError(f"input has {x.antennas} antennas, channel expects {h.n_tx}")
    if x.sample_rate_hz != h.sample_rate_hz:
        raise ContractViolationError(
            f"input sampled at {x.sample_rate_hz} Hz, channel at {h.sample_rate_hz} Hz"
        )
    y = convolve_batch(h.data[None], x.data[None])[0, 0]
    return Waveform(data=y, sample_rate_hz=x.sample_rate_hz)


def gram_batch(y: np.ndarray) -> np.ndarray:
    """Inter-antenna inner products G[..., a, b] = sum_n y[..., a, n] conj(y[..., b, n]), exactly Hermitian."""
    y = ensure_finite(np.asarray(y, dtype=np.complex128), "rx_gram")
    g = y @ np.conj(np.swapaxes(y, -1, -2))
    return 0.5 * (g + np.conj(np.swapaxes(g, -1, -2)))


def rx_gram(y: Waveform) -> np.ndarray:
    """Receive-side gram matrix of one waveform, shape (n_rx, n_rx)."""
    g = gram_batch(y.data)
    if not np.array_equal(g, g.conj().T):
        raise NumericError("gram matrix is not Hermitian", where="rx_gram")
    return g


def interleave(z: np.ndarray) -> np.ndarray:
    """Complex (..., n) to real (..., 2n) as re0, im0, re1, im1, ..."""
    z = np.asarray(z)
    return np.stack([z.real, z.imag], axis=-1).reshape(*z.shape[:-1], 2 * z.shape[-1])


def deinterleave(r: np.ndarray) -> np.ndarray:
    """Real (..., 2n) interleaved pairs back to complex (..., n)."""
    r = np.asarray(r, dtype=np.float64)
    if r.shape[-1] % 2:
        raise ContractViolationError(f"interleaved length must be even, got {r.shape[-1]}")
    pairs = r.reshape(*r.shape[:-1], r.shape[-1] // 2, 2)
    return pairs[..., 0] + 1j * pairs[..., 1]
