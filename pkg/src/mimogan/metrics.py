"""Power delay profile statistics, spatial correlations, MAE reporting and figure data."""

import json
from pathlib import Path
from typing import Any, Iterable, Optional, Sequence, Union

import numpy as np
import polars as pl
from eliot import start_action
from pydantic import BaseModel, ConfigDict, Field, field_serializer

from mimogan.errors import ContractViolationError, UndefinedStatisticsError
from mimogan.tensor import ChannelTensor

DEFAULT_CUTOFF_DB = 20.0
DEFAULT_TOP_TAPS = 10
POWER_MAE_FLOOR_DB = -100.0
CONVENTIONS = {
    "power_mae": "10*log10(|P_model - P_reference|) of total linear powers, floored at -100 dB",
    "delay_statistics": "bins tau/fs above the cutoff below the peak, no sub-bin interpolation",
    "correlation": "per-tap E[H^H H] and E[H H^H] summed over the strongest taps, normalized to unit diagonal",
    "correlation_mae": "mean absolute difference over real and imaginary parts of every entry",
    "total_power": "profiles carry unit total power per link, so the reference total power is close to 0 dB",
}


class PdpStats(BaseModel):
    total_power_db: float = Field(description="10*log10 of the power in the kept bins")
    average_delay_us: float = Field(description="Power-weighted mean delay of the kept bins (us)")
    rms_delay_spread_us: float = Field(ge=0, description="Power-weighted delay standard deviation of the kept bins (us)")
    cutoff_db: float = Field(default=DEFAULT_CUTOFF_DB, description="Bins more than this far below the peak are dropped")
    kept_bins: int = Field(ge=1, description="Number of bins above the cutoff")


class PdpMae(BaseModel):
    power_mae_db: float = Field(description="dB of the absolute linear total-power difference")
    average_delay_mae_us: float = Field(ge=0, description="Absolute average-delay difference (us)")
    rms_delay_mae_us: float = Field(ge=0, description="Absolute RMS delay spread difference (us)")
    pdp_curve_mae_db: Optional[float] = Field(default=None, description="dB of the mean absolute PDP difference above the reference cutoff")

    @property
    def average_delay_mae_ns(self) -> float:
        return self.average_delay_mae_us * 1e3

    @property
    def rms_delay_mae_ns(self) -> float:
        return self.rms_delay_mae_us * 1e3

    def power_text(self) -> str:
        return f"< {POWER_MAE_FLOOR_DB:.0f} dB" if self.power_mae_db <= POWER_MAE_FLOOR_DB else f"{self.power_mae_db:.2f} dB"


class SpatialCorrReport(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    r_tx_hat: np.ndarray = Field(description="Estimated transmit correlation, unit diagonal")
    r_rx_hat: np.ndarray = Field(description="Estimated receive correlation, unit diagonal")
    mae_tx: Optional[float] = Field(default=None, description="MAE against the reference transmit correlation")
    mae_rx: Optional[float] = Field(default=None, description="MAE against the reference receive correlation")
    taps: list[int] = Field(description="Delay bins the estimate was accumulated over")

    @field_serializer("r_tx_hat", "r_rx_hat")
    def _serialize_matrix(self, matrix: np.ndarray) -> list:
        return np.stack([matrix.real, matrix.imag], axis=-1).tolist()


def _channel_array(channels: Union[np.ndarray, Sequence[ChannelTensor]]) -> np.ndarray:
    if isinstance(channels, np.ndarray):
        array = channels
    else:
        items = list(channels)
        if not items:
            raise ContractViolationError("empty channel set")
        array = np.stack([h.data for h in items])
    if array.ndim != 4:
        raise ContractViolationError(f"channels must be (M, N_R, N_T, L), got {array.shape}")
    if array.shape[0] == 0:
        raise ContractViolationError("empty channel set")
    return array


class PdpAccumulator:
    """Running per-link sum of |h[tau]|^2 over realizations."""

    def __init__(self):
        self.power_sum: Optional[np.ndarray] = None
        self.count = 0

    def update(self, channels: Union[np.ndarray, Sequence[ChannelTensor]]) -> "PdpAccumulator":
        array = _channel_array(channels)
        power = np.sum(np.abs(array) ** 2, axis=0)
        if self.power_sum is None:
            self.power_sum = power
        elif power.shape != self.power_sum.shape:
            raise ContractViolationError(f"batch shape {array.shape[1:]} differs from {self.power_sum.shape}")
        else:
            self.power_sum = self.power_sum + power
        self.count += array.shape[0]
        return self

    def link_pdp(self) -> np.ndarray:
        if self.power_sum is None:
            raise ContractViolationError("no channels accumulated")
        return self.power_sum / self.count

    def mean_pdp(self) -> np.ndarray:
        return self.link_pdp().mean(axis=(0, 1))


def mean_pdp(channels: Union[np.ndarray, Sequence[ChannelTensor]], per_link: bool = False) -> np.ndarray:
    """
    Mean power per delay bin over realizations.

    Returns:
        Shape (L,) averaged over links, or (N_R, N_T, L) with per_link.
    """
    accumulator = PdpAccumulator().update(channels)
    return accumulator.link_pdp() if per_link else accumulator.mean_pdp()


def output_pdp(outputs: np.ndarray) -> np.ndarray:
    """Mean received power per sample over measurements, probes and receive antennas, outputs (M, K, N_R, T)."""
    outputs = np.asarray(outputs)
    if outputs.ndim != 4 or outputs.shape[0] == 0:
        raise ContractViolationError(f"outputs must be a non-empty (M, K, N_R, T) array, got {outputs.shape}")
    return np.mean(np.abs(outputs) ** 2, axis=(0, 1, 2))


def pdp_stats(p: np.ndarray, sample_rate_hz: float, cutoff_db: float = DEFAULT_CUTOFF_DB) -> PdpStats:
    """
    Total power, average delay and RMS delay spread over the bins within cutoff_db of the peak.

    Raises:
        UndefinedStatisticsError: the profile carries no power
    """
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1:
        raise ContractViolationError(f"expected a 1-D profile, got {p.shape}")
    if np.any(p < 0) or not np.all(np.isfinite(p)):
        raise ContractViolationError("profile must be finite and nonnegative")
    peak = p.max(initial=0.0)
    if peak <= 0:
        raise UndefinedStatisticsError("profile has no power")
    kept = p >= peak * 10.0 ** (-cutoff_db / 10.0)
    power = p[kept]
    delays_us = np.arange(p.size)[kept] / sample_rate_hz * 1e6
    total = power.sum()
    average = float(np.sum(power * delays_us) / total)
    variance = float(np.sum(power * (delays_us - average) ** 2) / total)
    return PdpStats(
        total_power_db=float(10.0 * np.log10(total)),
        average_delay_us=average,
        rms_delay_spread_us=float(np.sqrt(max(variance, 0.0))),
        cutoff_db=cutoff_db,
        kept_bins=int(kept.sum()),
    )


def power_mae_db(model_db: float, reference_db: float) -> float:
    difference = abs(10.0 ** (model_db / 10.0) - 10.0 ** (reference_db / 10.0))
    if difference == 0.0:
        return POWER_MAE_FLOOR_DB
    return max(float(10.0 * np.log10(difference)), POWER_MAE_FLOOR_DB)


def pdp_curve_mae_db(pdp_model: np.ndarray, pdp_reference: np.ndarray, cutoff_db: float = DEFAULT_CUTOFF_DB) -> float:
    """dB of the mean absolute linear PDP difference over the reference bins above the cutoff."""
    pdp_model = np.asarray(pdp_model, dtype=np.float64)
    pdp_reference = np.asarray(pdp_reference, dtype=np.float64)
    if pdp_model.shape != pdp_reference.shape:
        raise ContractViolationError(f"profile shapes differ: {pdp_model.shape} vs {pdp_reference.shape}")
    peak = pdp_reference.max(initial=0.0)
    if peak <= 0:
        raise UndefinedStatisticsError("reference profile has no power")
    kept = pdp_reference >= peak * 10.0 ** (-cutoff_db / 10.0)
    difference = float(np.mean(np.abs(pdp_model[kept] - pdp_reference[kept])))
    return POWER_MAE_FLOOR_DB if difference == 0.0 else max(10.0 * np.log10(difference), POWER_MAE_FLOOR_DB)


def pdp_mae(
    stats_model: PdpStats,
    stats_reference: PdpStats,
    pdp_model: Optional[np.ndarray] = None,
    pdp_reference: Optional[np.ndarray] = None,
) -> PdpMae:
    curve = None
    if pdp_model is not None and pdp_reference is not None:
        curve = pdp_curve_mae_db(pdp_model, pdp_reference, stats_reference.cutoff_db)
    return PdpMae(
        power_mae_db=power_mae_db(stats_model.total_power_db, stats_reference.total_power_db),
        average_delay_mae_us=abs(stats_model.average_delay_us - stats_reference.average_delay_us),
        rms_delay_mae_us=abs(stats_model.rms_delay_spread_us - stats_reference.rms_delay_spread_us),
        pdp_curve_mae_db=curve,
    )


def top_taps(power: np.ndarray, count: int = DEFAULT_TOP_TAPS) -> list[int]:
    """Indices of the strongest bins, ties broken by smaller delay, returned in delay order."""
    power = np.asarray(power)
    order = np.lexsort((np.arange(power.size), -power))
    return sorted(int(i) for i in order[:count])


def normalize_unit_diagonal(r: np.ndarray) -> np.ndarray:
    diagonal = np.real(np.diag(r))
    if np.any(diagonal <= 0):
        raise UndefinedStatisticsError("correlation estimate has a zero-power antenna")
    scale = np.sqrt(diagonal)
    return r / np.outer(scale, scale)


def correlation_mae(estimate: np.ndarray, reference: np.ndarray) -> float:
    estimate = np.asarray(estimate)
    reference = np.asarray(reference)
    if estimate.shape != reference.shape:
        raise ContractViolationError(f"correlation shapes differ: {estimate.shape} vs {reference.shape}")
    delta = estimate - reference
    return float((np.abs(delta.real).sum() + np.abs(delta.imag).sum()) / (2 * delta.size))


class CorrelationAccumulator:
    """Running per-tap sums of H^H H, H H^H and link power."""

    def __init__(self):
        self.tx_sum: Optional[np.ndarray] = None
        self.rx_sum: Optional[np.ndarray] = None
        self.power_sum: Optional[np.ndarray] = None
        self.count = 0

    def update(self, channels: Union[np.ndarray, Sequence[ChannelTensor]]) -> "CorrelationAccumulator":
        h = _channel_array(channels)
        tx = np.einsum("bial,bicl->lac", h.conj(), h, optimize=True)
        rx = np.einsum("bajl,bcjl->lac", h, h.conj(), optimize=True)
        power = np.sum(np.abs(h) ** 2, axis=(0, 1, 2))
        if self.tx_sum is None:
            self.tx_sum, self.rx_sum, self.power_sum = tx, rx, power
        elif tx.shape != self.tx_sum.shape or rx.shape != self.rx_sum.shape:
            raise ContractViolationError(f"batch shape {h.shape[1:]} differs from the accumulated channels")
        else:
            self.tx_sum = self.tx_sum + tx
            self.rx_sum = self.rx_sum + rx
            self.power_sum = self.power_sum + power
        self.count += h.shape[0]
        return self

    def report(
        self,
        r_tx_reference: Optional[np.ndarray] = None,
        r_rx_reference: Optional[np.ndarray] = None,
        n_taps: int = DEFAULT_TOP_TAPS,
    ) -> SpatialCorrReport:
        if self.tx_sum is None:
            raise ContractViolationError("no channels accumulated")
        taps = top_taps(self.power_sum, n_taps)
        r_tx = normalize_unit_diagonal(self.tx_sum[taps].sum(axis=0))
        r_rx = normalize_unit_diagonal(self.rx_sum[taps].sum(axis=0))
        r_tx = 0.5 * (r_tx + r_tx.conj().T)
        r_rx = 0.5 * (r_rx + r_rx.conj().T)
        return SpatialCorrReport(
            r_tx_hat=r_tx,
            r_rx_hat=r_rx,
            mae_tx=None if r_tx_reference is None else correlation_mae(r_tx, r_tx_reference),
            mae_rx=None if r_rx_reference is None else correlation_mae(r_rx, r_rx_reference),
            taps=taps,
        )


def spatial_correlations(
    channels: Union[np.ndarray, Sequence[ChannelTensor]],
    r_tx_reference: Optional[np.ndarray] = None,
    r_rx_reference: Optional[np.ndarray] = None,
    n_taps: int = DEFAULT_TOP_TAPS,
) -> SpatialCorrReport:
    """Normalized transmit and receive correlations over the strongest taps, with MAEs against references."""
    return CorrelationAccumulator().update(channels).report(r_tx_reference, r_rx_reference, n_taps)


def spectral_density(channels: Union[np.ndarray, Sequence[ChannelTensor]], sample_rate_hz: float) -> tuple[np.ndarray, np.ndarray]:
    """
    Mean |FFT(h)|^2 per frequency bin over realizations and links.

    Returns:
        (frequencies in MHz, density), both centred with fftshift
    """
    h = _channel_array(channels)
    n_taps = h.shape[-1]
    density = np.mean(np.abs(np.fft.fft(h, n=n_taps, axis=-1)) ** 2, axis=(0, 1, 2))
    frequencies = np.fft.fftfreq(n_taps, d=1.0 / sample_rate_hz) / 1e6
    return np.fft.fftshift(frequencies), np.fft.fftshift(density)


class ChannelComparison(BaseModel):
    """Channel-level comparison of a model against the reference."""

    model_config = ConfigDict(arbitrary_types_allowed=True, protected_namespaces=())

    reference: PdpStats
    model: PdpStats
    mae: PdpMae
    reference_correlation: SpatialCorrReport
    model_correlation: SpatialCorrReport
    reference_pdp: np.ndarray = Field(exclude=True)
    model_pdp: np.ndarray = Field(exclude=True)
    realizations: int

    @property
    def correlation_mae_tx(self) -> Optional[float]:
        return self.model_correlation.mae_tx

    @property
    def correlation_mae_rx(self) -> Optional[float]:
        return self.model_correlation.mae_rx


def compare_channels(
    reference_batches: Iterable[np.ndarray],
    model_batches: Iterable[np.ndarray],
    sample_rate_hz: float,
    r_tx: np.ndarray,
    r_rx: np.ndarray,
    cutoff_db: float = DEFAULT_CUTOFF_DB,
    n_taps: int = DEFAULT_TOP_TAPS,
) -> ChannelComparison:
    """Stream both channel sets through the accumulators and compute every statistic and MAE."""
    with start_action(action_type="compare_channels", cutoff_db=cutoff_db) as action:
        ref_pdp, ref_corr = PdpAccumulator(), CorrelationAccumulator()
        for batch in reference_batches:
            ref_pdp.update(batch)
            ref_corr.update(batch)
        model_pdp, model_corr = PdpAccumulator(), CorrelationAccumulator()
        for batch in model_batches:
            model_pdp.update(batch)
            model_corr.update(batch)
        reference_curve = ref_pdp.mean_pdp()
        model_curve = model_pdp.mean_pdp()
        reference_stats = pdp_stats(reference_curve, sample_rate_hz, cutoff_db)
        model_stats = pdp_stats(model_curve, sample_rate_hz, cutoff_db)
        mae = pdp_mae(model_stats, reference_stats, model_curve, reference_curve)
        comparison = ChannelComparison(
            reference=reference_stats,
            model=model_stats,
            mae=mae,
            reference_correlation=ref_corr.report(r_tx, r_rx, n_taps),
            model_correlation=model_corr.report(r_tx, r_rx, n_taps),
            reference_pdp=reference_curve,
            model_pdp=model_curve,
            realizations=model_pdp.count,
        )
        action.add_success_fields(
            power_mae_db=mae.power_mae_db,
            average_delay_mae_ns=mae.average_delay_mae_ns,
            rms_delay_mae_ns=mae.rms_delay_mae_ns,
            mae_tx=comparison.correlation_mae_tx,
            mae_rx=comparison.correlation_mae_rx,
        )
        return comparison


def _db(values: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return 10.0 * np.log10(np.asarray(values, dtype=np.float64))


def write_pdp_csv(path: Union[str, Path], sample_rate_hz: float, curves: dict[str, np.ndarray]) -> Path:
    """Columns: delay_bin, delay_us, then <name>_power and <name>_power_db per curve."""
    lengths = {len(c) for c in curves.values()}
    if len(lengths) != 1:
        raise ContractViolationError(f"curves have different lengths: {sorted(lengths)}")
    n = lengths.pop()
    columns: dict[str, Any] = {"delay_bin": np.arange(n), "delay_us": np.arange(n) / sample_rate_hz * 1e6}
    for name, curve in curves.items():
        columns[f"{name}_power"] = np.asarray(curve, dtype=np.float64)
        columns[f"{name}_power_db"] = _db(curve)
    return _write_csv(path, pl.DataFrame(columns))


def write_correlation_csv(path: Union[str, Path], reports: dict[str, SpatialCorrReport], references: dict[str, np.ndarray]) -> Path:
    """Columns: source, side, row, col, re, im, magnitude; one row per matrix entry."""
    rows = []

    def add(source: str, side: str, matrix: np.ndarray) -> None:
        for (a, b), value in np.ndenumerate(matrix):
            rows.append({"source": source, "side": side, "row": a, "col": b, "re": value.real, "im": value.imag, "magnitude": abs(value)})

    for side, matrix in references.items():
        add("configured", side, np.asarray(matrix, dtype=np.complex128))
    for source, report in reports.items():
        add(source, "tx", report.r_tx_hat)
        add(source, "rx", report.r_rx_hat)
    return _write_csv(path, pl.DataFrame(rows))


def write_spectral_csv(path: Union[str, Path], frequencies_mhz: np.ndarray, densities: dict[str, np.ndarray]) -> Path:
    """Columns: frequency_mhz, then <name>_density and <name>_density_db per curve."""
    columns: dict[str, Any] = {"frequency_mhz": np.asarray(frequencies_mhz, dtype=np.float64)}
    for name, density in densities.items():
        columns[f"{name}_density"] = np.asarray(density, dtype=np.float64)
        columns[f"{name}_density_db"] = _db(density)
    return _write_csv(path, pl.DataFrame(columns))


def write_samples_csv(path: Union[str, Path], channels: np.ndarray, sample_rate_hz: float, source: str = "model") -> Path:
    """Columns: source, sample, rx, tx, tap, delay_us, re, im, power_db; one row per tap of every link."""
    h = _channel_array(channels)
    m, n_rx, n_tx, n_taps = h.shape
    sample, rx, tx, tap = (axis.ravel() for axis in np.meshgrid(np.arange(m), np.arange(n_rx), np.arange(n_tx), np.arange(n_taps), indexing="ij"))
    flat = h.ravel()
    frame = pl.DataFrame({
        "source": [source] * flat.size,
        "sample": sample,
        "rx": rx,
        "tx": tx,
        "tap": tap,
        "delay_us": tap / sample_rate_hz * 1e6,
        "re": flat.real,
        "im": flat.imag,
        "power_db": _db(np.abs(flat) ** 2),
    })
    return _write_csv(path, frame)


def _write_csv(path: Union[str, Path], frame: pl.DataFrame) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.write_csv(path)
    return path


def write_report_json(path: Union[str, Path], report: Union[BaseModel, dict]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = report.model_dump(mode="json") if isinstance(report, BaseModel) else report
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return path
