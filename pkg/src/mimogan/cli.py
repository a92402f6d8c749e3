#!/usr/bin/env python3
"""CLI for MIMO-GAN: dataset generation, training, evaluation, sampling and benchmarks."""

import json
from contextlib import contextmanager
from pathlib import Path
from typing import Iterator, Optional

import typer
from eliot import start_action
from pycomfort.logging import to_nice_file, to_nice_stdout
from pydantic import BaseModel, ValidationError

from mimogan.bench import run_bench, write_bench_csv
from mimogan.config import (
    DEFAULT_LOG_DIR,
    DEFAULT_OUT_DIR,
    DEFAULT_THREADS,
    RunConfig,
    build_manifest,
    resolve_run_config,
    write_manifest,
)
from mimogan.dataset import ProbingDataset, generate_dataset, load_dataset, save_channels, save_dataset
from mimogan.errors import ConfigurationError, MimoGanError
from mimogan.evaluation import evaluate, summarize_reports, write_figures, write_report, write_summaries
from mimogan.gan import EpochMetrics, MimoGan, train as train_model
from mimogan.metrics import write_report_json

DATASET_FILE = "dataset.mgd"
SAMPLES_FILE = "samples.mgc"
BOOL_FLAGS = {"cond_g": "--cond-g", "cond_d": "--cond-d", "use_gram": "--use-gram", "bench_batched": "--batched"}

app = typer.Typer(help="MIMO-GAN channel modeling tools")


class GlobalOptions(BaseModel):
    seed: Optional[int] = None
    config: Optional[Path] = None
    out_dir: Path = DEFAULT_OUT_DIR
    threads: int = DEFAULT_THREADS
    log_dir: Optional[Path] = DEFAULT_LOG_DIR


def setup_logging(log_dir: Path) -> None:
    """Setup eliot logging to file and stdout."""
    log_dir.mkdir(parents=True, exist_ok=True)
    json_path = log_dir / "mimogan.json"
    log_path = log_dir / "mimogan.log"
    to_nice_file(output_file=str(json_path), rendered_file=str(log_path))
    to_nice_stdout(output_file=str(json_path))


def parse_bool(value: Optional[str], flag: str) -> Optional[bool]:
    if value is None:
        return None
    lowered = value.strip().lower()
    if lowered in ("true", "1", "yes", "on"):
        return True
    if lowered in ("false", "0", "no", "off"):
        return False
    raise ConfigurationError(f"{flag} expects true or false, got '{value}'")


@app.callback()
def main(
    ctx: typer.Context,
    seed: Optional[int] = typer.Option(None, "--seed", help="Seed of every random stream"),
    config: Optional[Path] = typer.Option(None, "--config", help="JSON run configuration or a previous manifest.json"),
    out_dir: Path = typer.Option(DEFAULT_OUT_DIR, "--out-dir", help="Directory for every output (env MIMOGAN_OUT_DIR)"),
    threads: int = typer.Option(DEFAULT_THREADS, "--threads", help="Worker threads (env MIMOGAN_THREADS)"),
    log_dir: Optional[Path] = typer.Option(DEFAULT_LOG_DIR, "--log-dir", help="Log directory, default <out-dir>/logs (env MIMOGAN_LOG_DIR)"),
) -> None:
    """MIMO-GAN: learn MIMO channel models from impulse-probing measurements."""
    ctx.obj = GlobalOptions(seed=seed, config=config, out_dir=out_dir, threads=threads, log_dir=log_dir)


@contextmanager
def command(ctx: typer.Context, action_type: str, preset: Optional[str], overrides: dict) -> Iterator[tuple[RunConfig, Path]]:
    """Resolve the run configuration, set up logging and turn library errors into exit code 1."""
    options: GlobalOptions = ctx.obj or GlobalOptions()
    out_dir = options.out_dir
    try:
        setup_logging(options.log_dir or out_dir / "logs")
        flags = {"seed": options.seed, "threads": options.threads if options.threads != DEFAULT_THREADS else None}
        for key, value in overrides.items():
            if value is None:
                continue
            flags[key] = parse_bool(value, BOOL_FLAGS[key]) if key in BOOL_FLAGS else value
        config = resolve_run_config(preset, options.config, flags)
        with start_action(action_type=action_type, out_dir=str(out_dir), preset=preset, seed=config.seed) as action:
            try:
                yield config, out_dir
            except (MimoGanError, ValidationError) as e:
                action.add_error_fields(error=str(e), error_type=type(e).__name__)
                raise
    except (MimoGanError, ValidationError, OSError) as e:
        typer.echo(f"Error: {e}", err=True)
        raise typer.Exit(code=1)


def _dataset_path(out_dir: Path, dataset: Optional[Path]) -> Path:
    return dataset if dataset is not None else out_dir / DATASET_FILE


def _obtain_dataset(config: RunConfig, out_dir: Path, dataset: Optional[Path]) -> tuple[ProbingDataset, Path]:
    """Load the given dataset; without one, reuse or generate out_dir/dataset.mgd."""
    if dataset is not None:
        if not dataset.exists():
            raise ConfigurationError(f"dataset {dataset} does not exist")
        return load_dataset(dataset), dataset
    path = out_dir / DATASET_FILE
    if path.exists():
        return load_dataset(path), path
    generated = generate_dataset(config.channel_config(), config.mode, config.count, config.seed, config.n_samples, config.threads)
    save_dataset(generated, path)
    return generated, path


@app.command()
def dataset(
    ctx: typer.Context,
    preset: Optional[str] = typer.Option(None, "--preset", help="Named preset (desk-1x1, desk-2x2, desk-4x4, paper-4x4, toy-single-tap)"),
    profile: Optional[str] = typer.Option(None, "--profile", help="tdl-a, tdl-b, single-tap or a profile CSV"),
    mimo: Optional[str] = typer.Option(None, "--mimo", help="Array size <n_rx>x<n_tx>, e.g. 4x4"),
    count: Optional[int] = typer.Option(None, "--count", help="Number of measurements"),
    mode: Optional[str] = typer.Option(None, "--mode", help="sequential or simultaneous"),
    correlation: Optional[str] = typer.Option(None, "--correlation", help="medium-a, identity or custom"),
    fading: Optional[str] = typer.Option(None, "--fading", help="rayleigh or static"),
    delay_spread_ns: Optional[float] = typer.Option(None, "--delay-spread-ns", help="Desired delay spread (ns)"),
    seed: Optional[int] = typer.Option(None, "--seed", help="Seed (overrides the global option)"),
    output: Optional[Path] = typer.Option(None, "--output", help="Dataset file, default <out-dir>/dataset.mgd"),
) -> None:
    """
    Generate an impulse-probing dataset from the reference channel simulator.

    Example:
        mimogan dataset --profile tdl-a --mimo 4x4 --count 8000 --mode sequential --seed 1
    """
    overrides = dict(profile=profile, mimo=mimo, count=count, mode=mode, correlation=correlation, fading=fading, delay_spread_ns=delay_spread_ns, seed=seed)
    with command(ctx, "cli_dataset", preset, overrides) as (config, out_dir):
        path = output or out_dir / DATASET_FILE
        generated = generate_dataset(config.channel_config(), config.mode, config.count, config.seed, config.n_samples, config.threads)
        save_dataset(generated, path)
        write_manifest(out_dir, build_manifest("dataset", config, {"dataset": str(path)}, {"dataset_config_hash": generated.channel.config_hash()}))
        typer.echo(f"Dataset: {path} ({generated.count} measurements, {generated.mode.value}, {generated.channel.mimo})")
        typer.echo(f"Split: train {len(generated.split.train)}, val {len(generated.split.val)}, test {len(generated.split.test)}")


@app.command()
def train(
    ctx: typer.Context,
    preset: Optional[str] = typer.Option(None, "--preset", help="Named preset"),
    dataset_path: Optional[Path] = typer.Option(None, "--dataset", help="Dataset file; default <out-dir>/dataset.mgd, generated if absent"),
    epochs: Optional[int] = typer.Option(None, "--epochs", help="Training epochs"),
    batch_size: Optional[int] = typer.Option(None, "--batch-size", help="Measurements per critic step"),
    critic_iters: Optional[int] = typer.Option(None, "--critic-iters", help="Critic steps per generator step"),
    cond_g: Optional[str] = typer.Option(None, "--cond-g", help="Conditioned generator: true or false"),
    cond_d: Optional[str] = typer.Option(None, "--cond-d", help="Conditioned critic: true or false"),
    use_gram: Optional[str] = typer.Option(None, "--use-gram", help="Critic sees the gram matrix: true or false"),
    checkpoint_every: Optional[int] = typer.Option(None, "--checkpoint-every", help="Epochs between checkpoints"),
    seed: Optional[int] = typer.Option(None, "--seed", help="Seed (overrides the global option)"),
) -> None:
    """
    Train MIMO-GAN with WGAN-GP on a probing dataset.

    Writes checkpoints/epoch_*.ckpt, checkpoints/final.ckpt, metrics.jsonl and manifest.json.
    """
    overrides = dict(
        epochs=epochs, batch_size=batch_size, critic_iters=critic_iters, checkpoint_every=checkpoint_every, seed=seed,
        cond_g=cond_g, cond_d=cond_d, use_gram=use_gram,
    )
    with command(ctx, "cli_train", preset, overrides) as (config, out_dir):
        data, data_path = _obtain_dataset(config, out_dir, dataset_path)
        config = config.model_copy(update={"mode": data.mode, "mimo": data.channel.mimo, "n_samples": data.n_samples, "n_taps": data.channel.n_taps, "sample_rate_hz": data.channel.sample_rate_hz})
        model = config.build_model()
        typer.echo(f"Parameters: {model.parameter_counts()} ({model.architecture.label})")
        metrics_path = out_dir / "metrics.jsonl"
        metrics_path.parent.mkdir(parents=True, exist_ok=True)
        with metrics_path.open("w") as sink:

            def on_epoch(metrics: EpochMetrics, _: MimoGan) -> None:
                sink.write(metrics.model_dump_json() + "\n")
                sink.flush()

            result = train_model(model, data, config.train_config(), on_epoch=on_epoch, checkpoint_dir=out_dir / "checkpoints")
        outputs = {"dataset": str(data_path), "metrics": str(metrics_path), "checkpoints": result.checkpoints}
        extra = {"parameter_counts": result.parameter_counts, "lipschitz_proxy": result.lipschitz_proxy, "dataset_config_hash": data.channel.config_hash()}
        write_manifest(out_dir, build_manifest("train", config, outputs, extra))
        last = result.history[-1]
        typer.echo(f"Epochs: {len(result.history)}, critic steps {last.critic_steps}, generator steps {last.generator_steps}")
        if last.best_avg_delay_mae_ns is not None:
            typer.echo(f"Best validation average-delay MAE: {last.best_avg_delay_mae_ns:.3f} ns")
        typer.echo(f"Lipschitz proxy: {result.lipschitz_proxy:.3f}{'' if result.lipschitz_in_range else ' (outside [0.5, 1.5])'}")


@app.command(name="eval")
def eval_command(
    ctx: typer.Context,
    preset: Optional[str] = typer.Option(None, "--preset", help="Named preset"),
    checkpoint: Optional[Path] = typer.Option(None, "--checkpoint", help="Model checkpoint; without it the simulator is compared with itself"),
    dataset_path: Optional[Path] = typer.Option(None, "--dataset", help="Dataset file, default <out-dir>/dataset.mgd"),
    split: Optional[str] = typer.Option(None, "--split", help="train, val or test"),
    seed: Optional[int] = typer.Option(None, "--seed", help="Seed of the sampled channels"),
    output_format: str = typer.Option("text", "--format", help="Output format: text or json"),
) -> None:
    """
    Evaluate power delay statistics and spatial correlations against a dataset's ground truth.

    Writes report.json and figures/{pdp,correlation,spectral,samples}.csv.
    """
    with command(ctx, "cli_eval", preset, dict(eval_split=split, seed=seed)) as (config, out_dir):
        path = _dataset_path(out_dir, dataset_path)
        if not path.exists():
            raise ConfigurationError(f"dataset {path} does not exist")
        data = load_dataset(path)
        model = None
        if checkpoint is not None:
            if not checkpoint.exists():
                raise ConfigurationError(f"checkpoint {checkpoint} does not exist")
            model, _ = MimoGan.load(checkpoint)
        report = evaluate(
            data, model, seed=config.seed, split=config.eval_split, cutoff_db=config.cutoff_db, n_taps=config.top_taps,
            threads=config.threads, checkpoint=str(checkpoint) if checkpoint else None,
        )
        report_path = write_report(out_dir / "report.json", report)
        figures = write_figures(out_dir, report, data, model)
        write_manifest(out_dir, build_manifest("eval", config, {"report": str(report_path), "figures": figures}, {"dataset": str(path)}))
        if output_format == "json":
            typer.echo(report.model_dump_json(indent=2))
        else:
            c = report.comparison
            typer.echo(f"Source: {report.source} vs ground truth ({report.split} split, {report.realizations} realizations, {report.mimo})")
            typer.echo(f"{'':18}{'total power (dB)':>18}{'avg delay (us)':>16}{'rms spread (us)':>17}")
            for name, stats in (("ground truth", c.reference), (report.source, c.model)):
                typer.echo(f"{name:18}{stats.total_power_db:>18.3f}{stats.average_delay_us:>16.4f}{stats.rms_delay_spread_us:>17.4f}")
            typer.echo(f"MAE: power {report.power_mae_text}, avg delay {report.average_delay_mae_ns:.3f} ns, rms spread {report.rms_delay_mae_ns:.3f} ns")
            typer.echo(f"Correlation MAE: tx {report.correlation_mae_tx:.4f}, rx {report.correlation_mae_rx:.4f}")


@app.command()
def sample(
    ctx: typer.Context,
    checkpoint: Path = typer.Option(..., "--checkpoint", help="Model checkpoint"),
    n: int = typer.Option(16, "-n", "--n", help="Number of channel realizations"),
    seed: Optional[int] = typer.Option(None, "--seed", help="Seed of the latents"),
    output: Optional[Path] = typer.Option(None, "--output", help="Channel dump, default <out-dir>/samples.mgc"),
) -> None:
    """Draw channel realizations from a trained model into a channel dump file."""
    with command(ctx, "cli_sample", None, dict(seed=seed)) as (config, out_dir):
        if n < 0:
            raise ConfigurationError(f"-n must be nonnegative, got {n}")
        if not checkpoint.exists():
            raise ConfigurationError(f"checkpoint {checkpoint} does not exist")
        model, _ = MimoGan.load(checkpoint)
        channels = model.sample_channels(n, config.seed)
        path = save_channels(output or out_dir / SAMPLES_FILE, channels, model.generator_config.sample_rate_hz, {"checkpoint": str(checkpoint), "seed": config.seed})
        write_manifest(out_dir, build_manifest("sample", config, {"samples": str(path)}, {"checkpoint": str(checkpoint), "n": n}))
        typer.echo(f"Samples: {path} ({n} x {model.generator_config.n_rx}x{model.generator_config.n_tx}x{model.generator_config.n_taps})")


@app.command()
def bench(
    ctx: typer.Context,
    mimo: Optional[list[str]] = typer.Option(None, "--mimo", help="Array size to benchmark, repeatable"),
    n_runs: Optional[int] = typer.Option(None, "--n-runs", help="Simulations per row"),
    checkpoint: Optional[list[str]] = typer.Option(None, "--checkpoint", help="<mimo>=<path>, repeatable"),
    untrained: bool = typer.Option(False, "--untrained", help="Time freshly initialised models where no checkpoint is given"),
    batched: Optional[str] = typer.Option(None, "--batched", help="Include batched rows: true or false"),
    output_format: str = typer.Option("text", "--format", help="Output format: text, json, or csv"),
) -> None:
    """Time reference simulations against MIMO-GAN sampling, per sample and batched."""
    overrides = dict(bench_sizes=mimo or None, bench_runs=n_runs, bench_batched=batched)
    with command(ctx, "cli_bench", None, overrides) as (config, out_dir):
        checkpoints = {}
        for item in checkpoint or []:
            size, sep, path = item.partition("=")
            if not sep:
                raise ConfigurationError(f"--checkpoint expects <mimo>=<path>, got '{item}'")
            checkpoints[size] = Path(path)
        report = run_bench(config.bench_config(checkpoints, allow_untrained=untrained))
        csv_path = write_bench_csv(out_dir / "bench.csv", report)
        json_path = write_report_json(out_dir / "bench.json", report)
        write_manifest(out_dir, build_manifest("bench", config, {"csv": str(csv_path), "json": str(json_path)}))
        if output_format == "json":
            typer.echo(report.model_dump_json(indent=2))
        elif output_format == "csv":
            typer.echo(csv_path.read_text().rstrip())
        else:
            typer.echo(f"Note: {report.note}")
            for row in report.rows:
                typer.echo(f"{row.mimo:>4} {row.system:<12} {row.mean_ms:9.4f} ± {row.std_ms:.4f} ms  speed-up {row.speedup:8.2f} ± {row.speedup_std:.2f}")


@app.command()
def summarize(
    ctx: typer.Context,
    reports: list[Path] = typer.Argument(..., help="report.json files of several seeds and architecture arms"),
) -> None:
    """Aggregate evaluation reports into per-arm medians across seeds."""
    with command(ctx, "cli_summarize", None, {}) as (config, out_dir):
        missing = [str(p) for p in reports if not p.exists()]
        if missing:
            raise ConfigurationError(f"missing reports: {missing}")
        summary = summarize_reports(reports)
        paths = write_summaries(out_dir, summary)
        typer.echo(json.dumps(paths, indent=2))
        typer.echo(str(summary))


if __name__ == "__main__":
    app()
