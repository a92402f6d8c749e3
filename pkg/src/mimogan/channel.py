"""Reference TDL MIMO channel: correlated Rayleigh paths placed band-limited on the sample grid."""

import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Literal, Optional, Sequence, Union

import numpy as np
import polars as pl
from eliot import start_action
from pydantic import BaseModel, ConfigDict, Field, field_serializer, field_validator, model_validator

from mimogan.errors import ConfigurationError, ContractViolationError
from mimogan.tensor import ChannelTensor, Waveform, convolve

DATA_DIR = Path(__file__).resolve().parent / "data"
PROFILE_DIR = DATA_DIR / "profiles"
CORRELATION_DIR = DATA_DIR / "correlation"

DEFAULT_SAMPLE_RATE_HZ = 30.72e6
DEFAULT_N_TAPS = 128
DEFAULT_DELAY_SPREAD_NS = 300.0

# 3GPP "Medium-A" antenna correlation: alpha on the gNB (transmit) side, beta on the UE (receive) side
MEDIUM_A_ALPHA = 0.3
MEDIUM_A_BETA = 0.3874

FRACTIONAL_DELAY_HALF_WIDTH = 16

BUNDLED_PROFILES = {"tdl-a": "tdl_a.csv", "tdl-b": "tdl_b.csv"}
STANDARD_PATH_COUNT = 23


class TdlProfile(BaseModel):
    """Tapped-delay-line power delay profile with delays normalized to unit delay spread."""

    name: str = Field(description="Profile identifier, e.g. tdl-a")
    normalized_delays: list[float] = Field(description="Path delays divided by the delay spread, ascending, first == 0")
    powers_db: list[float] = Field(description="Relative path powers in dB")
    desired_delay_spread_ns: float = Field(default=DEFAULT_DELAY_SPREAD_NS, gt=0, description="Delay spread used to scale the normalized delays (ns)")

    @model_validator(mode="after")
    def _check_paths(self) -> "TdlProfile":
        delays = self.normalized_delays
        if not delays:
            raise ConfigurationError("profile has no paths")
        if len(delays) != len(self.powers_db):
            raise ConfigurationError(f"{len(delays)} delays but {len(self.powers_db)} powers")
        if delays[0] != 0.0:
            raise ConfigurationError("first normalized delay must be 0")
        if any(b < a for a, b in zip(delays, delays[1:])):
            raise ConfigurationError("normalized delays must be sorted ascending")
        if self.name.lower() in BUNDLED_PROFILES and len(delays) != STANDARD_PATH_COUNT:
            raise ConfigurationError(f"{self.name} must have {STANDARD_PATH_COUNT} paths, got {len(delays)}")
        return self

    @property
    def n_paths(self) -> int:
        return len(self.normalized_delays)

    @property
    def delays_s(self) -> np.ndarray:
        return np.asarray(self.normalized_delays) * self.desired_delay_spread_ns * 1e-9

    @property
    def linear_powers(self) -> np.ndarray:
        """Path powers in linear scale, normalized to unit sum."""
        powers = 10.0 ** (np.asarray(self.powers_db) / 10.0)
        return powers / powers.sum()

    @classmethod
    def from_csv(cls, path: Union[str, Path], name: Optional[str] = None, desired_delay_spread_ns: float = DEFAULT_DELAY_SPREAD_NS) -> "TdlProfile":
        """Load a profile CSV with header `delay_normalized,power_db`."""
        path = Path(path)
        df = pl.read_csv(path).sort("delay_normalized", maintain_order=True)
        return cls(
            name=name or path.stem.replace("_", "-"),
            normalized_delays=df["delay_normalized"].cast(pl.Float64).to_list(),
            powers_db=df["power_db"].cast(pl.Float64).to_list(),
            desired_delay_spread_ns=desired_delay_spread_ns,
        )

    @classmethod
    def bundled(cls, name: str, desired_delay_spread_ns: float = DEFAULT_DELAY_SPREAD_NS) -> "TdlProfile":
        key = name.lower()
        if key not in BUNDLED_PROFILES:
            raise ConfigurationError(f"unknown profile '{name}', bundled: {sorted(BUNDLED_PROFILES)}")
        return cls.from_csv(PROFILE_DIR / BUNDLED_PROFILES[key], name=key, desired_delay_spread_ns=desired_delay_spread_ns)

    @classmethod
    def single_path(cls, name: str = "single-tap") -> "TdlProfile":
        return cls(name=name, normalized_delays=[0.0], powers_db=[0.0])


def exponential_correlation(n: int, alpha: float) -> np.ndarray:
    """3GPP ULA correlation matrix with entries alpha ** (((a - b) / (n - 1)) ** 2)."""
    if n < 1:
        raise ConfigurationError(f"antenna count must be positive, got {n}")
    if n == 1:
        return np.ones((1, 1))
    idx = np.arange(n)
    exponent = ((idx[:, None] - idx[None, :]) / (n - 1)) ** 2
    return alpha ** exponent


def read_complex_matrix_csv(path: Union[str, Path]) -> np.ndarray:
    """Read a square complex matrix stored row-major as `re,im` pairs, one matrix row per line, no header."""
    values = pl.read_csv(Path(path), has_header=False).to_numpy().astype(np.float64)
    if values.shape[1] % 2:
        raise ConfigurationError(f"{path}: odd number of columns, expected re,im pairs")
    matrix = values[:, 0::2] + 1j * values[:, 1::2]
    if matrix.shape[0] != matrix.shape[1]:
        raise ConfigurationError(f"{path}: matrix is not square: {matrix.shape}")
    return matrix


def write_complex_matrix_csv(path: Union[str, Path], matrix: np.ndarray) -> None:
    matrix = np.asarray(matrix, dtype=np.complex128)
    columns = {}
    for col in range(matrix.shape[1]):
        columns[f"re_{col}"] = matrix[:, col].real
        columns[f"im_{col}"] = matrix[:, col].imag
    pl.DataFrame(columns).write_csv(Path(path), include_header=False)


def _correlation_matrix(value: Any, name: str) -> np.ndarray:
    matrix = np.array(value)
    if matrix.ndim == 3 and matrix.shape[-1] == 2 and not np.iscomplexobj(matrix):
        matrix = matrix[..., 0] + 1j * matrix[..., 1]
    matrix = matrix.astype(np.complex128)
    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
        raise ConfigurationError(f"{name} must be square, got shape {matrix.shape}")
    if np.max(np.abs(matrix - matrix.conj().T)) > 1e-12:
        raise ConfigurationError(f"{name} is not Hermitian")
    if np.max(np.abs(np.diag(matrix) - 1.0)) > 1e-12:
        raise ConfigurationError(f"{name} must have a unit diagonal")
    if np.linalg.eigvalsh(matrix).min() < -1e-12:
        raise ConfigurationError(f"{name} is not positive semidefinite")
    matrix.flags.writeable = False
    return matrix


class CorrelationConfig(BaseModel):
    """Kronecker spatial correlation factors."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    r_tx: np.ndarray = Field(description="Transmit-side correlation, N_T x N_T Hermitian PSD, unit diagonal")
    r_rx: np.ndarray = Field(description="Receive-side correlation, N_R x N_R Hermitian PSD, unit diagonal")

    @field_validator("r_tx", "r_rx", mode="before")
    @classmethod
    def _check_matrix(cls, value: Any, info) -> np.ndarray:
        return _correlation_matrix(value, info.field_name)

    @field_serializer("r_tx", "r_rx")
    def _serialize_matrix(self, matrix: np.ndarray) -> list:
        return np.stack([matrix.real, matrix.imag], axis=-1).tolist()

    @property
    def n_tx(self) -> int:
        return int(self.r_tx.shape[0])

    @property
    def n_rx(self) -> int:
        return int(self.r_rx.shape[0])

    @classmethod
    def identity(cls, n_tx: int, n_rx: int) -> "CorrelationConfig":
        return cls(r_tx=np.eye(n_tx), r_rx=np.eye(n_rx))

    @classmethod
    def medium_a(cls, n_tx: int, n_rx: int) -> "CorrelationConfig":
        def side(kind: str, n: int, parameter: float) -> np.ndarray:
            bundled = CORRELATION_DIR / f"medium_a_{kind}_{n}.csv"
            if bundled.exists():
                return read_complex_matrix_csv(bundled)
            return exponential_correlation(n, parameter)

        return cls(r_tx=side("tx", n_tx, MEDIUM_A_ALPHA), r_rx=side("rx", n_rx, MEDIUM_A_BETA))

    @classmethod
    def from_csv(cls, tx_path: Union[str, Path], rx_path: Union[str, Path]) -> "CorrelationConfig":
        return cls(r_tx=read_complex_matrix_csv(tx_path), r_rx=read_complex_matrix_csv(rx_path))


class ChannelRealizationConfig(BaseModel):
    """Everything needed to draw reference channel realizations."""

    profile: TdlProfile = Field(description="Tap delays and powers")
    correlation: CorrelationConfig = Field(description="Kronecker correlation factors")
    n_tx: int = Field(gt=0, description="Number of transmit antennas N_T")
    n_rx: int = Field(gt=0, description="Number of receive antennas N_R")
    sample_rate_hz: float = Field(default=DEFAULT_SAMPLE_RATE_HZ, gt=0, description="Sampling rate (Hz)")
    n_taps: int = Field(default=DEFAULT_N_TAPS, gt=0, description="Number of taps L on the sample grid")
    rng_seed: int = Field(default=0, ge=0, lt=2**64, description="Base seed of the per-realization random streams")
    fading: Literal["rayleigh", "static"] = Field(default="rayleigh", description="rayleigh draws CN(0,1) path gains, static uses sqrt(power)")

    @model_validator(mode="after")
    def _check_consistency(self) -> "ChannelRealizationConfig":
        if self.correlation.n_tx != self.n_tx or self.correlation.n_rx != self.n_rx:
            raise ConfigurationError(
                f"correlation is {self.correlation.n_rx}x{self.correlation.n_tx}, channel is {self.n_rx}x{self.n_tx}"
            )
        last_delay = float(self.delays_samples[-1])
        if last_delay > self.n_taps - 1:
            raise ConfigurationError(
                f"{self.n_taps} taps at {self.sample_rate_hz} Hz do not cover the last path delay ({last_delay:.2f} samples)"
            )
        return self

    @property
    def delays_samples(self) -> np.ndarray:
        return self.profile.delays_s * self.sample_rate_hz

    @property
    def mimo(self) -> str:
        return f"{self.n_rx}x{self.n_tx}"

    def config_hash(self) -> str:
        """SHA-256 of the canonical JSON of everything except the seed."""
        payload = self.model_dump(mode="json", exclude={"rng_seed"})
        canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def correlation_sqrt(r: np.ndarray) -> np.ndarray:
    """
    Hermitian square root S of a PSD matrix, S @ S^H == R.

    Raises:
        ConfigurationError: R has an eigenvalue below -1e-8
    """
    r = np.asarray(r, dtype=np.complex128)
    if r.ndim != 2 or r.shape[0] != r.shape[1]:
        raise ContractViolationError(f"expected a square matrix, got shape {r.shape}")
    eigenvalues, vectors = np.linalg.eigh(0.5 * (r + r.conj().T))
    if eigenvalues.min() < -1e-8:
        raise ConfigurationError(f"correlation matrix is not PSD (min eigenvalue {eigenvalues.min():.3e})")
    return (vectors * np.sqrt(np.clip(eigenvalues, 0.0, None))) @ vectors.conj().T


def fractional_delay_kernel(delay_samples: float, n_taps: int, half_width: int = FRACTIONAL_DELAY_HALF_WIDTH) -> np.ndarray:
    """
    Hann-windowed sinc placing a unit path at a fractional delay on an n_taps grid.

    The (2 * half_width + 1)-tap kernel is centred on the nearest grid point, scaled to unit energy
    before truncation at the grid boundary. Integer delays give an exact delta.
    """
    kernel = np.zeros(n_taps)
    nearest = int(np.floor(delay_samples + 0.5))
    if abs(delay_samples - nearest) < 1e-12:
        if 0 <= nearest < n_taps:
            kernel[nearest] = 1.0
        return kernel
    grid = np.arange(nearest - half_width, nearest + half_width + 1)
    offset = grid - delay_samples
    taps = np.sinc(offset) * 0.5 * (1.0 + np.cos(np.pi * offset / (half_width + 1)))
    taps /= np.sqrt(np.sum(taps ** 2))
    inside = (grid >= 0) & (grid < n_taps)
    kernel[grid[inside]] = taps[inside]
    return kernel


def path_kernels(cfg: ChannelRealizationConfig) -> np.ndarray:
    """Placement kernels of every path, shape (n_paths, n_taps)."""
    return np.stack([fractional_delay_kernel(d, cfg.n_taps) for d in cfg.delays_samples])


def projected_pdp(cfg: ChannelRealizationConfig) -> np.ndarray:
    """Analytic mean per-link power per delay bin, sum_p P_p * k_p[n] ** 2."""
    return cfg.profile.linear_powers @ path_kernels(cfg) ** 2


def realization_rng(seed: int, realization_id: int) -> np.random.Generator:
    """Philox stream of one realization; path p reads the p-th block of n_rx * n_tx complex normals."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(realization_id,))))


class ChannelSampler:
    """Kernels and correlation roots of one configuration, shared by every realization drawn from it."""

    def __init__(self, cfg: ChannelRealizationConfig):
        self.cfg = cfg
        self.kernels = path_kernels(cfg)
        self.amplitudes = np.sqrt(cfg.profile.linear_powers)
        self.s_rx = correlation_sqrt(cfg.correlation.r_rx)
        self.s_tx_h = correlation_sqrt(cfg.correlation.r_tx).conj().T

    def gains(self, rng: np.random.Generator) -> np.ndarray:
        cfg = self.cfg
        shape = (cfg.profile.n_paths, cfg.n_rx, cfg.n_tx)
        if cfg.fading == "static":
            return np.broadcast_to(self.amplitudes[:, None, None], shape).astype(np.complex128)
        normals = rng.standard_normal(shape + (2,))
        white = (normals[..., 0] + 1j * normals[..., 1]) / np.sqrt(2.0)
        colored = self.s_rx @ white @ self.s_tx_h
        return self.amplitudes[:, None, None] * colored

    def taps(self, rng: np.random.Generator) -> np.ndarray:
        return np.einsum("pij,pl->ijl", self.gains(rng), self.kernels)

    def draw(self, realization_id: int) -> np.ndarray:
        return self.taps(realization_rng(self.cfg.rng_seed, realization_id))


def sample_channel(cfg: ChannelRealizationConfig, rng: Optional[np.random.Generator] = None) -> ChannelTensor:
    """
    Draw one static channel realization.

    Args:
        cfg: channel configuration
        rng: random stream; defaults to realization 0 of cfg.rng_seed

    Returns:
        ChannelTensor of shape (n_rx, n_tx, n_taps)
    """
    if rng is None:
        rng = realization_rng(cfg.rng_seed, 0)
    return ChannelTensor(data=ChannelSampler(cfg).taps(rng), sample_rate_hz=cfg.sample_rate_hz)


def sample_channels(cfg: ChannelRealizationConfig, realization_ids: Sequence[int], threads: int = 1) -> np.ndarray:
    """
    Draw the realizations with the given ids, shape (M, n_rx, n_tx, n_taps).

    Each realization uses its own stream, so the result does not depend on `threads`
    or on which other ids are requested alongside it.
    """
    ids = [int(i) for i in realization_ids]
    with start_action(action_type="sample_channels", profile=cfg.profile.name, mimo=cfg.mimo, count=len(ids), threads=threads):
        sampler = ChannelSampler(cfg)
        out = np.empty((len(ids), cfg.n_rx, cfg.n_tx, cfg.n_taps), dtype=np.complex128)
        if not ids:
            return out
        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                for pos, taps in enumerate(pool.map(sampler.draw, ids)):
                    out[pos] = taps
        else:
            for pos, rid in enumerate(ids):
                out[pos] = sampler.draw(rid)
        return out


def apply_channel(h: ChannelTensor, x: Waveform) -> Waveform:
    """Pass an input waveform through a channel realization."""
    return convolve(h, x)
