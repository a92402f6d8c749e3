"""Evaluation runs: a trained model (or a second reference draw) against a dataset's ground truth."""

import json
from pathlib import Path
from typing import Iterator, Optional, Sequence, Union

import numpy as np
import polars as pl
from eliot import start_action
from pydantic import BaseModel, Field

from mimogan.dataset import ProbingDataset
from mimogan.errors import ConfigurationError
from mimogan.gan import MimoGan
from mimogan.channel import sample_channels
from mimogan.metrics import (
    CONVENTIONS,
    DEFAULT_CUTOFF_DB,
    DEFAULT_TOP_TAPS,
    ChannelComparison,
    compare_channels,
    spectral_density,
    write_correlation_csv,
    write_pdp_csv,
    write_report_json,
    write_samples_csv,
    write_spectral_csv,
)

EVAL_CHUNK = 512
FIGURE_SAMPLES = 4


class EvalReport(BaseModel):
    source: str = Field(description="mimo-gan or reference-simulator")
    checkpoint: Optional[str] = Field(default=None, description="Evaluated checkpoint")
    mimo: str
    mode: str
    split: str
    realizations: int
    seed: int
    dataset_config_hash: str
    cond_g: Optional[bool] = None
    cond_d: Optional[bool] = None
    use_gram: Optional[bool] = None
    parameter_counts: dict[str, int] = Field(default_factory=dict)
    power_mae_db: float
    power_mae_text: str
    average_delay_mae_ns: float
    rms_delay_mae_ns: float
    pdp_curve_mae_db: Optional[float]
    correlation_mae_tx: Optional[float]
    correlation_mae_rx: Optional[float]
    reference_correlation_mae_tx: Optional[float]
    reference_correlation_mae_rx: Optional[float]
    comparison: ChannelComparison
    conventions: dict[str, str] = Field(default_factory=lambda: dict(CONVENTIONS))


def chunk_seed(seed: int, chunk: int) -> int:
    return int(np.random.SeedSequence(seed, spawn_key=(chunk,)).generate_state(1)[0])


def _chunks(indices: Sequence[int], size: int = EVAL_CHUNK) -> Iterator[Sequence[int]]:
    for start in range(0, len(indices), size):
        yield indices[start:start + size]


def model_batches(model: MimoGan, count: int, seed: int) -> Iterator[np.ndarray]:
    for c, start in enumerate(range(0, count, EVAL_CHUNK)):
        yield model.sample_channels(min(EVAL_CHUNK, count - start), chunk_seed(seed, c))


def evaluate(
    dataset: ProbingDataset,
    model: Optional[MimoGan] = None,
    seed: int = 0,
    split: str = "test",
    cutoff_db: float = DEFAULT_CUTOFF_DB,
    n_taps: int = DEFAULT_TOP_TAPS,
    threads: int = 1,
    checkpoint: Optional[str] = None,
) -> EvalReport:
    """
    Compare model channels with the ground-truth realizations of one split.

    Without a model, the reference simulator is re-drawn with `seed` at realization ids
    beyond the dataset, giving a ground-truth self-consistency baseline.
    """
    indices = dataset.split.indices(split)
    if not indices:
        raise ConfigurationError(f"split '{split}' is empty")
    channel = dataset.channel
    with start_action(action_type="evaluate", split=split, count=len(indices), source="reference-simulator" if model is None else "mimo-gan") as action:
        reference = (dataset.reference_channels(chunk, threads) for chunk in _chunks(indices))
        if model is None:
            redraw = channel.model_copy(update={"rng_seed": seed})
            fresh = list(range(dataset.count, dataset.count + len(indices)))
            candidates = (sample_channels(redraw, chunk, threads) for chunk in _chunks(fresh))
        else:
            g = model.generator_config
            if (g.n_rx, g.n_tx, g.n_taps) != (channel.n_rx, channel.n_tx, channel.n_taps):
                raise ConfigurationError(f"model is {g.n_rx}x{g.n_tx} with {g.n_taps} taps, dataset {channel.mimo} with {channel.n_taps}")
            candidates = model_batches(model, len(indices), seed)
        comparison = compare_channels(
            reference, candidates, channel.sample_rate_hz, channel.correlation.r_tx, channel.correlation.r_rx, cutoff_db, n_taps
        )
        architecture = model.architecture if model is not None else None
        report = EvalReport(
            source="reference-simulator" if model is None else "mimo-gan",
            checkpoint=checkpoint,
            mimo=channel.mimo,
            mode=dataset.mode.value,
            split=split,
            realizations=len(indices),
            seed=seed,
            dataset_config_hash=channel.config_hash(),
            cond_g=architecture.cond_g if architecture else None,
            cond_d=architecture.cond_d if architecture else None,
            use_gram=architecture.use_gram if architecture else None,
            parameter_counts=model.parameter_counts() if model is not None else {},
            power_mae_db=comparison.mae.power_mae_db,
            power_mae_text=comparison.mae.power_text(),
            average_delay_mae_ns=comparison.mae.average_delay_mae_ns,
            rms_delay_mae_ns=comparison.mae.rms_delay_mae_ns,
            pdp_curve_mae_db=comparison.mae.pdp_curve_mae_db,
            correlation_mae_tx=comparison.model_correlation.mae_tx,
            correlation_mae_rx=comparison.model_correlation.mae_rx,
            reference_correlation_mae_tx=comparison.reference_correlation.mae_tx,
            reference_correlation_mae_rx=comparison.reference_correlation.mae_rx,
            comparison=comparison,
        )
        action.add_success_fields(
            average_delay_mae_ns=report.average_delay_mae_ns,
            rms_delay_mae_ns=report.rms_delay_mae_ns,
            power_mae_db=report.power_mae_db,
        )
        return report


def write_figures(out_dir: Union[str, Path], report: EvalReport, dataset: ProbingDataset, model: Optional[MimoGan] = None) -> dict[str, str]:
    """PDP, correlation, spectrum and sample CSVs under out_dir/figures."""
    figures = Path(out_dir) / "figures"
    channel = dataset.channel
    rate = channel.sample_rate_hz
    comparison = report.comparison
    indices = dataset.split.indices(report.split)[:EVAL_CHUNK]
    reference = dataset.reference_channels(indices)
    if model is not None:
        candidate = model.sample_channels(len(indices), chunk_seed(report.seed, 0))
    else:
        candidate = sample_channels(channel.model_copy(update={"rng_seed": report.seed}), range(dataset.count, dataset.count + len(indices)))
    frequencies, reference_density = spectral_density(reference, rate)
    _, candidate_density = spectral_density(candidate, rate)
    paths = {
        "pdp": write_pdp_csv(figures / "pdp.csv", rate, {"reference": comparison.reference_pdp, "model": comparison.model_pdp}),
        "correlation": write_correlation_csv(
            figures / "correlation.csv",
            {"reference": comparison.reference_correlation, "model": comparison.model_correlation},
            {"tx": channel.correlation.r_tx, "rx": channel.correlation.r_rx},
        ),
        "spectral": write_spectral_csv(figures / "spectral.csv", frequencies, {"reference": reference_density, "model": candidate_density}),
        "samples": write_samples_csv(figures / "samples.csv", candidate[:FIGURE_SAMPLES], rate),
    }
    return {name: str(path) for name, path in paths.items()}


def write_report(path: Union[str, Path], report: EvalReport) -> Path:
    return write_report_json(path, report)


SUMMARY_KEYS = ["cond_g", "cond_d", "use_gram", "mode"]
SUMMARY_METRICS = ["average_delay_mae_ns", "rms_delay_mae_ns", "power_mae_db", "correlation_mae_tx", "correlation_mae_rx"]


def summarize_reports(paths: Sequence[Union[str, Path]]) -> pl.DataFrame:
    """Median of every MAE per architecture arm across report.json files (one per seed)."""
    rows = []
    for path in paths:
        data = json.loads(Path(path).read_text())
        rows.append({**{key: data.get(key) for key in SUMMARY_KEYS}, "seed": data.get("seed"), **{m: data.get(m) for m in SUMMARY_METRICS}})
    if not rows:
        raise ConfigurationError("no reports to summarize")
    frame = pl.DataFrame(rows)
    return (
        frame.group_by(SUMMARY_KEYS, maintain_order=True)
        .agg([pl.len().alias("seeds"), *[pl.col(m).median().alias(m) for m in SUMMARY_METRICS]])
        .sort(SUMMARY_KEYS)
    )


def write_summaries(out_dir: Union[str, Path], summary: pl.DataFrame) -> dict[str, str]:
    """Conditioning ablation and gram/probing ablation tables."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    conditioning = out_dir / "summary_conditioning.csv"
    correlation = out_dir / "summary_correlation.csv"
    summary.select(["cond_g", "cond_d", "use_gram", "mode", "seeds", "average_delay_mae_ns", "rms_delay_mae_ns", "power_mae_db"]).write_csv(conditioning)
    summary.select(["use_gram", "mode", "cond_g", "cond_d", "seeds", "correlation_mae_tx", "correlation_mae_rx"]).write_csv(correlation)
    return {"conditioning": str(conditioning), "correlation": str(correlation)}
