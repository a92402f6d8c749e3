"""Run configuration: defaults < preset < JSON config file < command-line flags."""

import hashlib
import json
import os
from importlib.metadata import PackageNotFoundError, version
from pathlib import Path
from typing import Any, Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, model_validator

from mimogan import __version__
from mimogan.bench import BenchConfig, parse_mimo
from mimogan.channel import (
    DATA_DIR,
    DEFAULT_DELAY_SPREAD_NS,
    DEFAULT_N_TAPS,
    DEFAULT_SAMPLE_RATE_HZ,
    ChannelRealizationConfig,
    CorrelationConfig,
    TdlProfile,
)
from mimogan.container import canonical_json
from mimogan.dataset import ProbingMode
from mimogan.errors import ConfigurationError
from mimogan.gan import ArchitectureMode, MimoGan, TrainConfig
from mimogan.metrics import DEFAULT_CUTOFF_DB, DEFAULT_TOP_TAPS
from mimogan.nn import DEFAULT_EPS, INIT_SCHEME

PRESET_DIR = DATA_DIR / "presets"

DEFAULT_OUT_DIR = Path(os.getenv("MIMOGAN_OUT_DIR", "runs/default"))
DEFAULT_THREADS = int(os.getenv("MIMOGAN_THREADS", "1"))
DEFAULT_LOG_DIR: Optional[Path] = Path(os.environ["MIMOGAN_LOG_DIR"]) if os.getenv("MIMOGAN_LOG_DIR") else None


class RunConfig(BaseModel):
    """Every setting of a dataset, training, evaluation or benchmark run."""

    model_config = ConfigDict(extra="forbid")

    # reference channel
    profile: str = Field(default="tdl-a", description="Bundled profile name (tdl-a, tdl-b, single-tap) or a profile CSV path")
    delay_spread_ns: float = Field(default=DEFAULT_DELAY_SPREAD_NS, gt=0, description="Desired delay spread (ns)")
    mimo: str = Field(default="4x4", description="Array size '<n_rx>x<n_tx>'")
    correlation: Literal["medium-a", "identity", "custom"] = Field(default="medium-a", description="Antenna correlation")
    r_tx_csv: Optional[Path] = Field(default=None, description="Transmit correlation CSV for correlation=custom")
    r_rx_csv: Optional[Path] = Field(default=None, description="Receive correlation CSV for correlation=custom")
    fading: Literal["rayleigh", "static"] = Field(default="rayleigh", description="Path gain distribution")
    sample_rate_hz: float = Field(default=DEFAULT_SAMPLE_RATE_HZ, gt=0, description="Sampling rate (Hz)")
    n_taps: int = Field(default=DEFAULT_N_TAPS, gt=0, description="Channel taps L")

    # dataset
    n_samples: int = Field(default=128, gt=0, description="Samples T per probe waveform")
    mode: ProbingMode = Field(default=ProbingMode.SEQUENTIAL, description="Probing mode")
    count: int = Field(default=60000, gt=0, description="Measurements in the dataset")

    # model
    z_dim: int = Field(default=32, gt=0, description="Generator latent dimension")
    embed_dim: int = Field(default=4, gt=0, description="Link and antenna embedding dimension")
    hidden: list[int] = Field(default_factory=lambda: [100, 100], description="Hidden widths of both MLPs")
    cond_g: bool = Field(default=True, description="Conditioned generator")
    cond_d: bool = Field(default=True, description="Conditioned critic")
    use_gram: bool = Field(default=True, description="Critic receives the gram matrix")

    # training
    epochs: int = Field(default=500, gt=0, description="Training epochs")
    batch_size: int = Field(default=256, gt=0, description="Measurements per critic step")
    critic_iters: int = Field(default=25, gt=0, description="Critic steps per generator step")
    gp_lambda: float = Field(default=10.0, gt=0, description="Gradient penalty weight")
    lr: float = Field(default=2e-4, gt=0, description="Adam learning rate")
    beta1: float = Field(default=0.5, ge=0, lt=1, description="Adam beta1")
    beta2: float = Field(default=0.9, ge=0, lt=1, description="Adam beta2")
    checkpoint_every: int = Field(default=50, gt=0, description="Epochs between checkpoints")
    val_samples: int = Field(default=2048, gt=0, description="Validation measurements per epoch")
    lipschitz_strict: bool = Field(default=False, description="Fail when the final critic gradient norm leaves [0.5, 1.5]")
    lr_schedule: Literal["constant", "linear"] = Field(default="constant", description="Per-epoch learning-rate schedule")
    lr_floor: float = Field(default=0.01, gt=0, le=1, description="Final learning-rate fraction of the linear schedule")
    restore_best: bool = Field(default=False, description="Keep the weights of the best validation epoch")

    # evaluation
    cutoff_db: float = Field(default=DEFAULT_CUTOFF_DB, gt=0, description="PDP cutoff below the peak (dB)")
    top_taps: int = Field(default=DEFAULT_TOP_TAPS, gt=0, description="Taps accumulated for spatial correlations")
    eval_split: Literal["train", "val", "test"] = Field(default="test", description="Split compared during evaluation")

    # benchmark
    bench_sizes: list[str] = Field(default_factory=lambda: ["1x1", "2x2", "4x4"], description="Benchmarked array sizes")
    bench_runs: int = Field(default=2048, ge=30, description="Simulations per benchmark row")
    bench_warmup: int = Field(default=16, ge=0, description="Untimed warm-up simulations")
    bench_batched: bool = Field(default=True, description="Include batched rows")

    # run
    seed: int = Field(default=0, ge=0, description="Seed of every random stream of the run")
    threads: int = Field(default=DEFAULT_THREADS, gt=0, description="Worker threads")

    @model_validator(mode="after")
    def _check(self) -> "RunConfig":
        parse_mimo(self.mimo)
        if self.correlation == "custom" and (self.r_tx_csv is None or self.r_rx_csv is None):
            raise ConfigurationError("correlation=custom needs r_tx_csv and r_rx_csv")
        return self

    @property
    def n_rx(self) -> int:
        return parse_mimo(self.mimo)[0]

    @property
    def n_tx(self) -> int:
        return parse_mimo(self.mimo)[1]

    @property
    def architecture(self) -> ArchitectureMode:
        return ArchitectureMode(cond_g=self.cond_g, cond_d=self.cond_d, use_gram=self.use_gram)

    def tdl_profile(self) -> TdlProfile:
        if self.profile == "single-tap":
            return TdlProfile.single_path().model_copy(update={"desired_delay_spread_ns": self.delay_spread_ns})
        candidate = Path(self.profile)
        if candidate.suffix == ".csv":
            if not candidate.exists():
                raise ConfigurationError(f"profile file {candidate} does not exist")
            return TdlProfile.from_csv(candidate, desired_delay_spread_ns=self.delay_spread_ns)
        return TdlProfile.bundled(self.profile, desired_delay_spread_ns=self.delay_spread_ns)

    def correlation_config(self) -> CorrelationConfig:
        if self.correlation == "identity":
            return CorrelationConfig.identity(self.n_tx, self.n_rx)
        if self.correlation == "custom":
            return CorrelationConfig.from_csv(self.r_tx_csv, self.r_rx_csv)
        return CorrelationConfig.medium_a(self.n_tx, self.n_rx)

    def channel_config(self) -> ChannelRealizationConfig:
        return ChannelRealizationConfig(
            profile=self.tdl_profile(),
            correlation=self.correlation_config(),
            n_tx=self.n_tx,
            n_rx=self.n_rx,
            sample_rate_hz=self.sample_rate_hz,
            n_taps=self.n_taps,
            rng_seed=self.seed,
            fading=self.fading,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            critic_iters_per_gen=self.critic_iters,
            gp_lambda=self.gp_lambda,
            lr=self.lr,
            betas=(self.beta1, self.beta2),
            batch_size=self.batch_size,
            mode=self.mode,
            seed=self.seed,
            checkpoint_every=self.checkpoint_every,
            val_samples=self.val_samples,
            lipschitz_strict=self.lipschitz_strict,
            lr_schedule=self.lr_schedule,
            lr_floor=self.lr_floor,
            restore_best=self.restore_best,
            threads=self.threads,
        )

    def build_model(self) -> MimoGan:
        return MimoGan.build(
            self.n_rx,
            self.n_tx,
            mode=self.mode,
            architecture=self.architecture,
            n_taps=self.n_taps,
            n_samples=self.n_samples,
            sample_rate_hz=self.sample_rate_hz,
            z_dim=self.z_dim,
            embed_dim=self.embed_dim,
            hidden=self.hidden,
            seed=self.seed,
        )

    def bench_config(self, checkpoints: Optional[dict[str, Path]] = None, allow_untrained: bool = False) -> BenchConfig:
        return BenchConfig(
            mimo_sizes=self.bench_sizes,
            n_runs=self.bench_runs,
            batched=self.bench_batched,
            warmup_runs=self.bench_warmup,
            threads=self.threads,
            seed=self.seed,
            n_samples=self.n_samples,
            profile=self.profile if self.profile in ("tdl-a", "tdl-b") else "tdl-a",
            checkpoints=checkpoints or {},
            allow_untrained=allow_untrained,
        )

    def config_hash(self) -> str:
        """SHA-256 of the canonical JSON of everything but the seed and thread count."""
        payload = self.model_dump(mode="json", exclude={"seed", "threads"})
        return hashlib.sha256(canonical_json(payload).encode("utf-8")).hexdigest()


def available_presets() -> list[str]:
    return sorted(p.stem for p in PRESET_DIR.glob("*.json"))


def load_preset(name: str) -> dict[str, Any]:
    path = PRESET_DIR / f"{name}.json"
    if not path.exists():
        raise ConfigurationError(f"unknown preset '{name}', available: {available_presets()}")
    return json.loads(path.read_text())


def load_config_file(path: Union[str, Path]) -> dict[str, Any]:
    """Read a JSON config; a run manifest is accepted and its run_config section used."""
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"config file {path} does not exist")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"{path}: invalid JSON: {e}") from e
    if not isinstance(data, dict):
        raise ConfigurationError(f"{path}: expected a JSON object")
    return data.get("run_config", data)


def resolve_run_config(
    preset: Optional[str] = None,
    config_file: Optional[Union[str, Path]] = None,
    overrides: Optional[dict[str, Any]] = None,
) -> RunConfig:
    """Merge defaults, preset, config file and flags; flags left as None do not override."""
    merged: dict[str, Any] = {}
    if preset:
        merged.update(load_preset(preset))
    if config_file is not None:
        merged.update(load_config_file(config_file))
    merged.update({key: value for key, value in (overrides or {}).items() if value is not None})
    return RunConfig.model_validate(merged)


def _library_versions() -> dict[str, str]:
    versions = {}
    for package in ("numpy", "torch", "polars", "pydantic", "eliot", "typer"):
        try:
            versions[package] = version(package)
        except PackageNotFoundError:
            versions[package] = "unknown"
    return versions


def build_manifest(command: str, config: RunConfig, outputs: Optional[dict[str, Any]] = None, extra: Optional[dict[str, Any]] = None) -> dict[str, Any]:
    """Everything needed to reproduce a run; feeding it back through --config reproduces it."""
    return {
        "command": command,
        "package_version": __version__,
        "library_versions": _library_versions(),
        "run_config": config.model_dump(mode="json"),
        "config_hash": config.config_hash(),
        "seed": config.seed,
        "adam": {"lr": config.lr, "betas": [config.beta1, config.beta2], "eps": DEFAULT_EPS, "schedule": config.lr_schedule, "floor": config.lr_floor},
        "init_scheme": INIT_SCHEME,
        "z_dim": config.z_dim,
        "conditioning": config.architecture.model_dump(),
        "outputs": outputs or {},
        **(extra or {}),
    }


def write_manifest(out_dir: Union[str, Path], manifest: dict[str, Any]) -> Path:
    path = Path(out_dir) / "manifest.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path
