"""
Simulation timing: the reference TDL simulator against MIMO-GAN sampling, per sample and batched.

One simulation is one channel sample plus its application to a T-sample input.
The baseline is the in-package reference simulator, so speed-ups are not comparable
to timings of other simulators.
"""

import hashlib
import time
from pathlib import Path
from typing import Callable, Optional, Union

import numpy as np
import polars as pl
from eliot import start_action
from pydantic import BaseModel, Field, field_validator

from mimogan.channel import ChannelRealizationConfig, ChannelSampler, CorrelationConfig, TdlProfile
from mimogan.dataset import ProbingMode
from mimogan.errors import ConfigurationError
from mimogan.gan import MimoGan
from mimogan.nn import configure_torch
from mimogan.tensor import convolve_batch

BASELINE_NOTE = "baseline is the in-package reference TDL simulator; absolute speed-ups are not comparable to external simulators"


def parse_mimo(value: str) -> tuple[int, int]:
    """'4x2' -> (n_rx=4, n_tx=2)."""
    try:
        n_rx, n_tx = (int(part) for part in value.lower().split("x"))
    except ValueError as e:
        raise ConfigurationError(f"MIMO size must look like 4x4, got '{value}'") from e
    if n_rx < 1 or n_tx < 1:
        raise ConfigurationError(f"MIMO size must be positive, got '{value}'")
    return n_rx, n_tx


class BenchConfig(BaseModel):
    mimo_sizes: list[str] = Field(default_factory=lambda: ["1x1", "2x2", "4x4"], description="Sizes as '<n_rx>x<n_tx>'")
    n_runs: int = Field(default=2048, ge=30, description="Timed simulations per row")
    batched: bool = Field(default=True, description="Include batched MIMO-GAN rows")
    batched_repeats: int = Field(default=5, ge=2, description="Timed repetitions of the batched call")
    warmup_runs: int = Field(default=16, ge=0, description="Untimed runs before timing")
    threads: int = Field(default=1, gt=0, description="Torch intra-op threads")
    seed: int = Field(default=0, ge=0, description="Seed of channel streams and latents")
    n_samples: int = Field(default=128, gt=0, description="Input length T")
    profile: str = Field(default="tdl-a", description="Reference simulator profile")
    checkpoints: dict[str, Path] = Field(default_factory=dict, description="Trained model per MIMO size")
    allow_untrained: bool = Field(default=False, description="Time freshly initialised models where no checkpoint is given")

    @field_validator("mimo_sizes")
    @classmethod
    def _check_sizes(cls, value: list[str]) -> list[str]:
        for size in value:
            parse_mimo(size)
        return value


class BenchRow(BaseModel):
    mimo: str
    system: str = Field(description="reference, gan or gan-batched")
    batched: bool
    n_runs: int
    mean_ms: float = Field(gt=0, description="Mean wall-clock time per simulation")
    std_ms: float = Field(ge=0)
    sample_ms: float = Field(description="Mean channel-sampling time per simulation")
    apply_ms: float = Field(description="Mean convolution time per simulation")
    speedup: float = Field(description="Reference mean over this row's mean")
    speedup_std: float = Field(description="First-order propagated standard deviation of the speed-up")
    output_sha256: str = Field(description="Digest of the simulated outputs")


class BenchReport(BaseModel):
    note: str = BASELINE_NOTE
    threads: int
    rows: list[BenchRow]


def reference_config(n_rx: int, n_tx: int, profile: str, seed: int) -> ChannelRealizationConfig:
    return ChannelRealizationConfig(
        profile=TdlProfile.bundled(profile),
        correlation=CorrelationConfig.medium_a(n_tx, n_rx),
        n_tx=n_tx,
        n_rx=n_rx,
        rng_seed=seed,
    )


def bench_input(n_tx: int, n_samples: int, seed: int) -> np.ndarray:
    """Fixed complex Gaussian input of shape (1, n_tx, T)."""
    rng = np.random.Generator(np.random.Philox(seed))
    return (rng.standard_normal((1, n_tx, n_samples)) + 1j * rng.standard_normal((1, n_tx, n_samples))) / np.sqrt(2.0)


def _digest(arrays: list[np.ndarray]) -> str:
    h = hashlib.sha256()
    for array in arrays:
        h.update(np.ascontiguousarray(array, dtype="<c16").tobytes())
    return h.hexdigest()


def reference_outputs(sampler: ChannelSampler, x: np.ndarray, n_runs: int) -> list[np.ndarray]:
    """Untimed reference simulations, realization ids 0..n_runs-1."""
    return [convolve_batch(sampler.draw(run)[None], x)[0, 0] for run in range(n_runs)]


def gan_outputs(model: MimoGan, x: np.ndarray, n_runs: int, seed: int, batched: bool) -> list[np.ndarray]:
    """Untimed MIMO-GAN simulations with the latents of the timed path."""
    if batched:
        return list(convolve_batch(model.sample_channels(n_runs, seed, batched=True), x)[:, 0])
    return [convolve_batch(model.sample_channels(1, seed + run, batched=False), x)[0, 0] for run in range(n_runs)]


def _time_per_run(sample: Callable[[int], np.ndarray], x: np.ndarray, n_runs: int, warmup: int) -> tuple[np.ndarray, np.ndarray, list[np.ndarray]]:
    for run in range(warmup):
        convolve_batch(sample(run), x)
    sample_ns = np.empty(n_runs)
    apply_ns = np.empty(n_runs)
    outputs = []
    for run in range(n_runs):
        t0 = time.perf_counter_ns()
        h = sample(run)
        t1 = time.perf_counter_ns()
        y = convolve_batch(h, x)
        t2 = time.perf_counter_ns()
        sample_ns[run] = t1 - t0
        apply_ns[run] = t2 - t1
        outputs.append(y[0, 0])
    return sample_ns / 1e6, apply_ns / 1e6, outputs


def _row(mimo: str, system: str, batched: bool, n_runs: int, sample_ms: np.ndarray, apply_ms: np.ndarray, outputs: list[np.ndarray]) -> BenchRow:
    total = sample_ms + apply_ms
    return BenchRow(
        mimo=mimo,
        system=system,
        batched=batched,
        n_runs=n_runs,
        mean_ms=float(total.mean()),
        std_ms=float(total.std(ddof=1)),
        sample_ms=float(sample_ms.mean()),
        apply_ms=float(apply_ms.mean()),
        speedup=1.0,
        speedup_std=0.0,
        output_sha256=_digest(outputs),
    )


def _with_speedup(row: BenchRow, baseline: BenchRow) -> BenchRow:
    ratio = baseline.mean_ms / row.mean_ms
    relative = np.hypot(baseline.std_ms / baseline.mean_ms, row.std_ms / row.mean_ms)
    return row.model_copy(update={"speedup": ratio, "speedup_std": float(ratio * relative)})


def load_bench_model(cfg: BenchConfig, mimo: str) -> MimoGan:
    n_rx, n_tx = parse_mimo(mimo)
    path = cfg.checkpoints.get(mimo)
    if path is None:
        if not cfg.allow_untrained:
            raise ConfigurationError(f"no checkpoint for {mimo}; pass one or allow untrained models")
        return MimoGan.build(n_rx, n_tx, ProbingMode.SEQUENTIAL, n_samples=cfg.n_samples, seed=cfg.seed)
    if not Path(path).exists():
        raise ConfigurationError(f"checkpoint {path} for {mimo} does not exist")
    model, _ = MimoGan.load(path)
    g = model.generator_config
    if (g.n_rx, g.n_tx) != (n_rx, n_tx):
        raise ConfigurationError(f"checkpoint {path} is {g.n_rx}x{g.n_tx}, expected {mimo}")
    return model


def bench_size(cfg: BenchConfig, mimo: str, model: Optional[MimoGan] = None) -> list[BenchRow]:
    n_rx, n_tx = parse_mimo(mimo)
    model = model or load_bench_model(cfg, mimo)
    x = bench_input(n_tx, cfg.n_samples, cfg.seed)
    sampler = ChannelSampler(reference_config(n_rx, n_tx, cfg.profile, cfg.seed))
    with start_action(action_type="bench_size", mimo=mimo, n_runs=cfg.n_runs) as action:
        ref_sample, ref_apply, ref_out = _time_per_run(lambda run: sampler.draw(run)[None], x, cfg.n_runs, cfg.warmup_runs)
        baseline = _row(mimo, "reference", False, cfg.n_runs, ref_sample, ref_apply, ref_out)

        gan_sample, gan_apply, gan_out = _time_per_run(
            lambda run: model.sample_channels(1, cfg.seed + run, batched=False), x, cfg.n_runs, cfg.warmup_runs
        )
        rows = [baseline, _with_speedup(_row(mimo, "gan", False, cfg.n_runs, gan_sample, gan_apply, gan_out), baseline)]

        if cfg.batched:
            model.sample_channels(min(cfg.n_runs, 64), cfg.seed, batched=True)
            per_sample, per_apply = [], []
            outputs: list[np.ndarray] = []
            for _ in range(cfg.batched_repeats):
                t0 = time.perf_counter_ns()
                h = model.sample_channels(cfg.n_runs, cfg.seed, batched=True)
                t1 = time.perf_counter_ns()
                y = convolve_batch(h, x)
                t2 = time.perf_counter_ns()
                per_sample.append((t1 - t0) / 1e6 / cfg.n_runs)
                per_apply.append((t2 - t1) / 1e6 / cfg.n_runs)
                outputs = list(y[:, 0])
            batched_row = _row(mimo, "gan-batched", True, cfg.n_runs, np.asarray(per_sample), np.asarray(per_apply), outputs)
            rows.append(_with_speedup(batched_row, baseline))
        action.add_success_fields(**{row.system: row.mean_ms for row in rows})
        return rows


def run_bench(cfg: BenchConfig, models: Optional[dict[str, MimoGan]] = None) -> BenchReport:
    """
    Time every configured MIMO size.

    Raises:
        ConfigurationError: a size has no checkpoint and untrained models are not allowed
    """
    models = models or {}
    configure_torch(cfg.threads)
    with start_action(action_type="run_bench", sizes=cfg.mimo_sizes, n_runs=cfg.n_runs, batched=cfg.batched):
        resolved = {mimo: models.get(mimo) or load_bench_model(cfg, mimo) for mimo in cfg.mimo_sizes}
        rows = [row for mimo in cfg.mimo_sizes for row in bench_size(cfg, mimo, resolved[mimo])]
        return BenchReport(threads=cfg.threads, rows=rows)


def write_bench_csv(path: Union[str, Path], report: BenchReport) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pl.DataFrame([row.model_dump() for row in report.rows]).write_csv(path)
    return path
