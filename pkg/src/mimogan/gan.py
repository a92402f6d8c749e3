"""
MIMO-GAN: a link-conditioned generator of channel impulse responses and a
receive-antenna-conditioned critic over probed channel outputs, trained with WGAN-GP.
"""

from copy import deepcopy
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Literal, Optional, Union

import numpy as np
import torch
from eliot import Message, start_action
from pydantic import BaseModel, Field, model_validator
from torch import nn

from mimogan import __version__
from mimogan.channel import DEFAULT_N_TAPS, DEFAULT_SAMPLE_RATE_HZ
from mimogan.dataset import ProbingDataset, ProbingMode, n_probes, probe_array
from mimogan.errors import ConfigurationError, ContractViolationError, DivergenceError, NumericError, UndefinedStatisticsError, UsageError
from mimogan.metrics import PdpMae, output_pdp, pdp_mae, pdp_stats
from mimogan.nn import (
    DEFAULT_BETAS,
    DEFAULT_LR,
    DTYPE,
    INIT_SCHEME,
    AdamState,
    EmbeddingSpec,
    Mlp,
    MlpSpec,
    as_tensor,
    check_finite,
    configure_torch,
    count_parameters,
    init_parameters,
    load_checkpoint,
    load_state_tensors,
    make_embedding,
    penalty_from_gradients,
    save_checkpoint,
    state_tensors,
)
from mimogan.tensor import ChannelTensor, ComplexVec, Waveform, convolve_batch, delay_stack, interleave

DEFAULT_Z_DIM = 32
DEFAULT_EMBED_DIM = 4
DIVERGENCE_THRESHOLD = 1e6
LIPSCHITZ_RANGE = (0.5, 1.5)


class ArchitectureMode(BaseModel):
    cond_g: bool = Field(default=True, description="Generator emits one link per call, conditioned on (i, j)")
    cond_d: bool = Field(default=True, description="Critic scores one receive antenna per call, conditioned on i")
    use_gram: bool = Field(default=True, description="Critic receives the receive-side gram matrix")

    @property
    def label(self) -> str:
        return f"cond_g={self.cond_g},cond_d={self.cond_d},gram={self.use_gram}"


class GeneratorConfig(BaseModel):
    n_rx: int = Field(gt=0, description="Receive antennas N_R")
    n_tx: int = Field(gt=0, description="Transmit antennas N_T")
    n_taps: int = Field(default=DEFAULT_N_TAPS, gt=0, description="Taps L per link")
    sample_rate_hz: float = Field(default=DEFAULT_SAMPLE_RATE_HZ, gt=0, description="Sampling rate of generated channels")
    z_dim: int = Field(default=DEFAULT_Z_DIM, gt=0, description="Latent dimension, shared by every link of a realization")
    embed_dim: int = Field(default=DEFAULT_EMBED_DIM, gt=0, description="Link embedding dimension")
    hidden: list[int] = Field(default_factory=lambda: [100, 100], description="Hidden layer widths")
    conditioned: bool = Field(default=True, description="Per-link conditioned generation")

    @property
    def n_links(self) -> int:
        return self.n_rx * self.n_tx

    def trunk_spec(self) -> MlpSpec:
        if self.conditioned:
            return MlpSpec(input_dim=self.z_dim + self.embed_dim, hidden=self.hidden, output_dim=2 * self.n_taps)
        return MlpSpec(input_dim=self.z_dim, hidden=self.hidden, output_dim=2 * self.n_links * self.n_taps)


class CriticConfig(BaseModel):
    n_rx: int = Field(gt=0, description="Receive antennas N_R")
    n_samples: int = Field(gt=0, description="Samples T per received waveform")
    n_probes: int = Field(default=1, gt=0, description="Probes K per measurement, concatenated per antenna")
    use_gram: bool = Field(default=True, description="Append the gram matrix sum_k y_k y_k^H")
    embed_dim: int = Field(default=DEFAULT_EMBED_DIM, gt=0, description="Receive-antenna embedding dimension")
    hidden: list[int] = Field(default_factory=lambda: [100, 100], description="Hidden layer widths")
    conditioned: bool = Field(default=True, description="Per-receive-antenna conditioned scoring")

    @property
    def gram_dim(self) -> int:
        return 2 * self.n_rx * self.n_rx if self.use_gram else 0

    def trunk_spec(self) -> MlpSpec:
        signal = 2 * self.n_probes * self.n_samples
        if self.conditioned:
            return MlpSpec(input_dim=signal + self.gram_dim + self.embed_dim, hidden=self.hidden, output_dim=1)
        return MlpSpec(input_dim=self.n_rx * signal + self.gram_dim, hidden=self.hidden, output_dim=1)


class TrainConfig(BaseModel):
    epochs: int = Field(default=500, gt=0, description="Passes of the training split through the critic")
    critic_iters_per_gen: int = Field(default=25, gt=0, description="Critic steps per generator step")
    gp_lambda: float = Field(default=10.0, gt=0, description="Gradient penalty weight")
    lr: float = Field(default=DEFAULT_LR, gt=0, description="Adam learning rate for both networks")
    betas: tuple[float, float] = Field(default=DEFAULT_BETAS, description="Adam betas")
    batch_size: int = Field(default=256, gt=0, description="Measurements per critic step")
    mode: ProbingMode = Field(default=ProbingMode.SEQUENTIAL, description="Probing mode of the training data")
    seed: int = Field(default=0, ge=0, description="Seed of shuffling, latents and interpolation weights")
    checkpoint_every: int = Field(default=50, gt=0, description="Epochs between checkpoints")
    val_samples: int = Field(default=2048, gt=0, description="Validation measurements (capped by the split)")
    lipschitz_strict: bool = Field(default=False, description="Raise when the final Lipschitz proxy leaves lipschitz_range")
    threads: int = Field(default=1, gt=0, description="Torch intra-op threads")
    divergence_threshold: float = Field(default=DIVERGENCE_THRESHOLD, gt=0, description="Abort when |critic loss| exceeds this")
    lipschitz_range: tuple[float, float] = Field(default=LIPSCHITZ_RANGE, description="Accepted final mean critic gradient norm")
    lr_schedule: Literal["constant", "linear"] = Field(default="constant", description="Per-epoch learning-rate schedule of both optimizers")
    lr_floor: float = Field(default=0.01, gt=0, le=1, description="Learning-rate fraction reached at the end of a linear schedule")
    restore_best: bool = Field(default=False, description="Finish with the weights of the best validation epoch")

    @model_validator(mode="after")
    def _check_range(self) -> "TrainConfig":
        low, high = self.lipschitz_range
        if not 0 <= low <= high:
            raise ConfigurationError(f"lipschitz_range must satisfy 0 <= low <= high, got {self.lipschitz_range}")
        return self

    def lr_factor(self, epoch: int) -> float:
        """Multiplier of the base learning rate during an epoch; linear runs from 1 down towards lr_floor."""
        if self.lr_schedule == "constant":
            return 1.0
        return self.lr_floor + (1.0 - self.lr_floor) * (1.0 - epoch / self.epochs)


class Generator(nn.Module):
    def __init__(self, config: GeneratorConfig):
        super().__init__()
        self.config = config
        self.embedding = make_embedding(EmbeddingSpec(vocab=config.n_links, dim=config.embed_dim)) if config.conditioned else None
        self.trunk = Mlp(config.trunk_spec())

    def forward(self, z: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Latents (B, z_dim) to channel taps as (real, imag), each (B, N_R, N_T, L)."""
        c = self.config
        if z.ndim != 2 or z.shape[1] != c.z_dim:
            raise ContractViolationError(f"latents must be (B, {c.z_dim}), got {tuple(z.shape)}")
        batch = z.shape[0]
        if c.conditioned:
            links = self.embedding.weight.unsqueeze(0).expand(batch, c.n_links, c.embed_dim)
            latents = z.unsqueeze(1).expand(batch, c.n_links, c.z_dim)
            out = self.trunk(torch.cat([latents, links], dim=-1))
        else:
            out = self.trunk(z)
        pairs = out.reshape(batch, c.n_rx, c.n_tx, c.n_taps, 2)
        return pairs[..., 0], pairs[..., 1]


class Critic(nn.Module):
    def __init__(self, config: CriticConfig):
        super().__init__()
        self.config = config
        self.embedding = make_embedding(EmbeddingSpec(vocab=config.n_rx, dim=config.embed_dim)) if config.conditioned else None
        self.trunk = Mlp(config.trunk_spec())

    @staticmethod
    def gram_features(y_re: torch.Tensor, y_im: torch.Tensor) -> torch.Tensor:
        """Interleaved sum_k y_k y_k^H for outputs (B, K, N_R, T), shape (B, 2 N_R^2)."""
        g_re = torch.einsum("bkat,bkct->bac", y_re, y_re) + torch.einsum("bkat,bkct->bac", y_im, y_im)
        g_im = torch.einsum("bkat,bkct->bac", y_im, y_re) - torch.einsum("bkat,bkct->bac", y_re, y_im)
        return torch.stack([g_re, g_im], dim=-1).reshape(y_re.shape[0], -1)

    def forward(self, y_re: torch.Tensor, y_im: torch.Tensor) -> torch.Tensor:
        """Scores of outputs (B, K, N_R, T): (B, N_R) when conditioned, else (B, 1)."""
        c = self.config
        expected = (c.n_probes, c.n_rx, c.n_samples)
        if tuple(y_re.shape[1:]) != expected or y_re.shape != y_im.shape:
            raise ContractViolationError(f"critic expects outputs (B, {expected}), got {tuple(y_re.shape)}")
        batch = y_re.shape[0]
        per_rx = torch.stack([y_re, y_im], dim=-1).permute(0, 2, 1, 3, 4).reshape(batch, c.n_rx, -1)
        parts = []
        if c.conditioned:
            parts.append(per_rx)
            if c.use_gram:
                parts.append(self.gram_features(y_re, y_im).unsqueeze(1).expand(batch, c.n_rx, c.gram_dim))
            parts.append(self.embedding.weight.unsqueeze(0).expand(batch, c.n_rx, c.embed_dim))
            return self.trunk(torch.cat(parts, dim=-1)).squeeze(-1)
        parts.append(per_rx.reshape(batch, -1))
        if c.use_gram:
            parts.append(self.gram_features(y_re, y_im))
        return self.trunk(torch.cat(parts, dim=-1))


def _split_complex(value: Any) -> tuple[torch.Tensor, torch.Tensor]:
    if isinstance(value, tuple):
        return as_tensor(value[0]), as_tensor(value[1])
    array = np.asarray(value, dtype=np.complex128)
    return as_tensor(array.real), as_tensor(array.imag)


def apply_probe_stack(h_re: torch.Tensor, h_im: torch.Tensor, s_re: torch.Tensor, s_im: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Channels (B, N_R, N_T, L) against a probe delay stack (K, N_T, L, T), outputs (B, K, N_R, T)."""
    out_re = torch.einsum("bijl,kjln->bkin", h_re, s_re) - torch.einsum("bijl,kjln->bkin", h_im, s_im)
    out_im = torch.einsum("bijl,kjln->bkin", h_re, s_im) + torch.einsum("bijl,kjln->bkin", h_im, s_re)
    return out_re, out_im


class MimoGan:
    """Generator, critic and the probing geometry they are trained on."""

    def __init__(self, generator_config: GeneratorConfig, critic_config: CriticConfig, mode: ProbingMode = ProbingMode.SEQUENTIAL, seed: int = 0):
        mode = ProbingMode(mode)
        if critic_config.n_rx != generator_config.n_rx:
            raise ConfigurationError(f"generator has {generator_config.n_rx} rx antennas, critic {critic_config.n_rx}")
        if critic_config.n_probes != n_probes(mode, generator_config.n_tx):
            raise ConfigurationError(f"{mode.value} probing of {generator_config.n_tx} tx antennas needs {n_probes(mode, generator_config.n_tx)} probes, critic has {critic_config.n_probes}")
        self.generator_config = generator_config
        self.critic_config = critic_config
        self.mode = mode
        self.seed = seed
        self.generator = Generator(generator_config)
        self.critic = Critic(critic_config)
        init = torch.Generator().manual_seed(seed)
        init_parameters(self.generator, init)
        init_parameters(self.critic, init)
        stack = delay_stack(probe_array(mode, generator_config.n_tx, critic_config.n_samples), generator_config.n_taps)
        self.stack_re = torch.as_tensor(stack.real, dtype=DTYPE)
        self.stack_im = torch.as_tensor(stack.imag, dtype=DTYPE)

    @classmethod
    def build(
        cls,
        n_rx: int,
        n_tx: int,
        mode: ProbingMode = ProbingMode.SEQUENTIAL,
        architecture: Optional[ArchitectureMode] = None,
        n_taps: int = DEFAULT_N_TAPS,
        n_samples: int = DEFAULT_N_TAPS,
        sample_rate_hz: float = DEFAULT_SAMPLE_RATE_HZ,
        z_dim: int = DEFAULT_Z_DIM,
        embed_dim: int = DEFAULT_EMBED_DIM,
        hidden: Optional[list[int]] = None,
        seed: int = 0,
    ) -> "MimoGan":
        architecture = architecture or ArchitectureMode()
        hidden = hidden or [100, 100]
        return cls(
            GeneratorConfig(
                n_rx=n_rx, n_tx=n_tx, n_taps=n_taps, sample_rate_hz=sample_rate_hz, z_dim=z_dim,
                embed_dim=embed_dim, hidden=hidden, conditioned=architecture.cond_g,
            ),
            CriticConfig(
                n_rx=n_rx, n_samples=n_samples, n_probes=n_probes(mode, n_tx), use_gram=architecture.use_gram,
                embed_dim=embed_dim, hidden=hidden, conditioned=architecture.cond_d,
            ),
            mode=mode,
            seed=seed,
        )

    @property
    def architecture(self) -> ArchitectureMode:
        return ArchitectureMode(
            cond_g=self.generator_config.conditioned, cond_d=self.critic_config.conditioned, use_gram=self.critic_config.use_gram
        )

    def parameter_counts(self) -> dict[str, int]:
        g, d = count_parameters(self.generator), count_parameters(self.critic)
        return {"generator": g, "critic": d, "total": g + d}

    def latents(self, n: int, rng: torch.Generator) -> torch.Tensor:
        return torch.randn((n, self.generator_config.z_dim), generator=rng, dtype=DTYPE)

    def fake_outputs(self, z: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Generated channels applied to the probes, (B, K, N_R, T) real and imaginary parts."""
        h_re, h_im = self.generator(z)
        return apply_probe_stack(h_re, h_im, self.stack_re, self.stack_im)

    def sample_channels(self, n: int, seed: int = 0, batched: bool = True) -> np.ndarray:
        """
        Draw n channel realizations, shape (n, N_R, N_T, L).

        Latents come from one torch stream seeded with `seed`, the same in both modes;
        batched runs every realization through one forward pass.
        """
        c = self.generator_config
        if n == 0:
            return np.zeros((0, c.n_rx, c.n_tx, c.n_taps), dtype=np.complex128)
        z = self.latents(n, torch.Generator().manual_seed(seed))
        with torch.no_grad():
            if batched:
                h_re, h_im = self.generator(z)
            else:
                parts = [self.generator(z[i:i + 1]) for i in range(n)]
                h_re = torch.cat([p[0] for p in parts])
                h_im = torch.cat([p[1] for p in parts])
        return h_re.numpy() + 1j * h_im.numpy()

    def simulate(self, x: Union[Waveform, np.ndarray], n: int = 1, seed: int = 0) -> np.ndarray:
        """Sample n channels and apply them to inputs x (n_tx, T) or (K, n_tx, T); outputs (n, K, N_R, T)."""
        data = x.data if isinstance(x, Waveform) else np.asarray(x)
        if data.ndim == 2:
            data = data[None]
        return convolve_batch(self.sample_channels(n, seed), data)

    def save(self, path: Union[str, Path], metadata: Optional[dict] = None) -> Path:
        tensors = {**state_tensors(self.generator, "generator."), **state_tensors(self.critic, "critic.")}
        header = {
            "package_version": __version__,
            "generator_config": self.generator_config.model_dump(mode="json"),
            "critic_config": self.critic_config.model_dump(mode="json"),
            "mode": self.mode.value,
            "seed": self.seed,
            "init_scheme": INIT_SCHEME,
            "parameter_counts": self.parameter_counts(),
            **(metadata or {}),
        }
        return save_checkpoint(path, tensors, header)

    @classmethod
    def load(cls, path: Union[str, Path]) -> tuple["MimoGan", dict]:
        tensors, metadata = load_checkpoint(path)
        try:
            model = cls(
                GeneratorConfig.model_validate(metadata["generator_config"]),
                CriticConfig.model_validate(metadata["critic_config"]),
                mode=ProbingMode(metadata["mode"]),
                seed=int(metadata.get("seed", 0)),
            )
        except KeyError as e:
            raise ConfigurationError(f"{path}: checkpoint metadata lacks {e}") from e
        load_state_tensors(model.generator, tensors, "generator.")
        load_state_tensors(model.critic, tensors, "critic.")
        return model, metadata


def generate_link(model: MimoGan, z: Any, link: tuple[int, int]) -> ComplexVec:
    """Impulse response of link (i, j) for latent z."""
    c = model.generator_config
    if not c.conditioned:
        raise UsageError("per-link generation needs a conditioned generator")
    i, j = link
    if not (0 <= i < c.n_rx and 0 <= j < c.n_tx):
        raise ContractViolationError(f"link {link} outside the {c.n_rx}x{c.n_tx} array")
    z = check_finite(as_tensor(z).reshape(-1), "latent")
    if z.shape[0] != c.z_dim:
        raise ContractViolationError(f"latent must have {c.z_dim} entries, got {z.shape[0]}")
    with torch.no_grad():
        embedding = model.generator.embedding.weight[i * c.n_tx + j]
        out = model.generator.trunk(torch.cat([z, embedding])).numpy()
    return ComplexVec(data=out[0::2] + 1j * out[1::2])


def generate_channel(model: MimoGan, z: Any) -> ChannelTensor:
    """Channel realization for latent z; every link shares the same z."""
    z = check_finite(as_tensor(z).reshape(1, -1), "latent")
    with torch.no_grad():
        h_re, h_im = model.generator(z)
    return ChannelTensor(data=h_re[0].numpy() + 1j * h_im[0].numpy(), sample_rate_hz=model.generator_config.sample_rate_hz)


def critic_score(model: MimoGan, y: Union[ComplexVec, Waveform], gram: Optional[np.ndarray] = None, i: Optional[int] = None) -> float:
    """
    Critic value of one receive antenna's waveform (conditioned) or of all antennas (unconditioned).

    `y` holds the antenna's probes concatenated (length K*T) or, unconditioned, one row per antenna.
    """
    c = model.critic_config
    if c.use_gram != (gram is not None):
        raise ContractViolationError("gram must be given exactly when the critic uses it")
    parts = []
    if c.conditioned:
        if not isinstance(y, ComplexVec) or i is None:
            raise ContractViolationError("a conditioned critic scores one antenna: pass a ComplexVec and its index")
        if not 0 <= i < c.n_rx:
            raise ContractViolationError(f"receive antenna {i} outside 0..{c.n_rx - 1}")
        parts.append(interleave(y.data))
    else:
        if not isinstance(y, Waveform):
            raise ContractViolationError("an unconditioned critic scores every antenna: pass a Waveform")
        parts.append(interleave(y.data).reshape(-1))
    if gram is not None:
        gram = np.asarray(gram, dtype=np.complex128)
        if gram.shape != (c.n_rx, c.n_rx):
            raise ContractViolationError(f"gram must be {c.n_rx}x{c.n_rx}, got {gram.shape}")
        parts.append(interleave(gram.reshape(-1)))
    features = as_tensor(np.concatenate(parts))
    with torch.no_grad():
        if c.conditioned:
            features = torch.cat([features, model.critic.embedding.weight[i]])
        return float(model.critic.trunk(features.unsqueeze(0))[0, 0])


@dataclass
class BatchLoss:
    critic_loss: torch.Tensor
    gen_loss: Optional[torch.Tensor]
    wasserstein: float
    penalty: float
    grad_norm_mean: float


def gradient_penalty(critic: Critic, y_re: torch.Tensor, y_im: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """
    Mean (||grad D|| - 1)^2 with the gradient taken through the gram matrix.

    Conditioned critics are penalized per (sample, receive antenna).
    Returns the penalty and every gradient norm.
    """
    y_re = y_re.detach().requires_grad_(True)
    y_im = y_im.detach().requires_grad_(True)
    scores = critic(y_re, y_im)
    penalties, norms = [], []
    for column in range(scores.shape[1]):
        g_re, g_im = torch.autograd.grad(scores[:, column].sum(), (y_re, y_im), create_graph=True)
        penalty, norm = penalty_from_gradients(torch.cat([g_re.flatten(1), g_im.flatten(1)], dim=1))
        penalties.append(penalty)
        norms.append(norm)
    return torch.stack(penalties).mean(), torch.cat(norms)


def wgan_gp_batch_loss(
    model: MimoGan,
    real: Any,
    rng: torch.Generator,
    gp_lambda: float = 10.0,
    z: Optional[torch.Tensor] = None,
    u: Optional[torch.Tensor] = None,
    with_generator_loss: bool = True,
) -> BatchLoss:
    """
    WGAN-GP objective on measured outputs.

    critic loss = E[D(fake)] - E[D(real)] + lambda * penalty, generator loss = -E[D(fake)],
    with fake outputs = probes * generated H and interpolation weights u drawn per measurement.
    """
    real_re, real_im = _split_complex(real)
    batch = real_re.shape[0]
    if batch == 0:
        raise ContractViolationError("empty batch")
    z = model.latents(batch, rng) if z is None else as_tensor(z)
    u = torch.rand((batch, 1, 1, 1), generator=rng, dtype=DTYPE) if u is None else as_tensor(u).reshape(batch, 1, 1, 1)

    with torch.set_grad_enabled(with_generator_loss):
        fake_re, fake_im = model.fake_outputs(z)
    d_real = model.critic(real_re, real_im)
    d_fake = model.critic(fake_re.detach(), fake_im.detach())
    mix_re = u * real_re + (1.0 - u) * fake_re.detach()
    mix_im = u * real_im + (1.0 - u) * fake_im.detach()
    penalty, norms = gradient_penalty(model.critic, mix_re, mix_im)

    wasserstein = d_real.mean() - d_fake.mean()
    critic_loss = -wasserstein + gp_lambda * penalty
    gen_loss = -model.critic(fake_re, fake_im).mean() if with_generator_loss else None
    check_finite(critic_loss.detach(), f"critic loss (batch of {batch}, W={float(wasserstein):.4g}, penalty={float(penalty):.4g})")
    return BatchLoss(
        critic_loss=critic_loss,
        gen_loss=gen_loss,
        wasserstein=float(wasserstein.detach()),
        penalty=float(penalty.detach()),
        grad_norm_mean=float(norms.detach().mean()),
    )


def generator_loss(model: MimoGan, batch_size: int, rng: torch.Generator) -> torch.Tensor:
    fake_re, fake_im = model.fake_outputs(model.latents(batch_size, rng))
    return -model.critic(fake_re, fake_im).mean()


class EpochMetrics(BaseModel):
    epoch: int
    lr: float
    critic_loss: float
    gen_loss: Optional[float]
    wasserstein: float
    penalty: float
    grad_norm_mean: float
    val_power_mae_db: Optional[float]
    val_avg_delay_mae_ns: Optional[float]
    val_rms_delay_mae_ns: Optional[float]
    best_avg_delay_mae_ns: Optional[float]
    generator_steps: int
    critic_steps: int


class TrainResult(BaseModel):
    history: list[EpochMetrics]
    lipschitz_proxy: float
    lipschitz_in_range: bool
    parameter_counts: dict[str, int]
    checkpoints: list[str]
    best_epoch: Optional[int] = None


def _check_compatible(model: MimoGan, dataset: ProbingDataset, config: TrainConfig) -> None:
    g, d, ch = model.generator_config, model.critic_config, dataset.channel
    if ProbingMode(config.mode) != dataset.mode or model.mode != dataset.mode:
        raise ConfigurationError(f"dataset uses {dataset.mode.value} probing, model {model.mode.value}, training config {config.mode.value}")
    if (g.n_rx, g.n_tx) != (ch.n_rx, ch.n_tx):
        raise ConfigurationError(f"model is {g.n_rx}x{g.n_tx}, dataset {ch.mimo}")
    if d.n_samples != dataset.n_samples:
        raise ConfigurationError(f"critic expects T={d.n_samples}, dataset has T={dataset.n_samples}")
    if not dataset.split.train:
        raise ConfigurationError("training split is empty")


def _validation_mae(model: MimoGan, real_pdp: Optional[np.ndarray], sample_rate_hz: float, count: int, seed: int) -> Optional[PdpMae]:
    if real_pdp is None:
        return None
    with torch.no_grad():
        fake_re, fake_im = model.fake_outputs(model.latents(count, torch.Generator().manual_seed(seed)))
    fake_pdp = output_pdp(fake_re.numpy() + 1j * fake_im.numpy())
    try:
        return pdp_mae(pdp_stats(fake_pdp, sample_rate_hz), pdp_stats(real_pdp, sample_rate_hz))
    except UndefinedStatisticsError:
        return None


def _selection_key(metrics: EpochMetrics) -> Optional[tuple[float, float]]:
    """Validation average-delay MAE at 0.01 ns resolution, ties broken by power MAE; lower is better."""
    if metrics.val_avg_delay_mae_ns is None or metrics.val_power_mae_db is None:
        return None
    return round(metrics.val_avg_delay_mae_ns, 2), metrics.val_power_mae_db


def _snapshot(model: MimoGan) -> dict[str, dict[str, torch.Tensor]]:
    return {"generator": deepcopy(model.generator.state_dict()), "critic": deepcopy(model.critic.state_dict())}


def train(
    model: MimoGan,
    dataset: ProbingDataset,
    config: TrainConfig,
    on_epoch: Optional[Callable[[EpochMetrics, MimoGan], None]] = None,
    checkpoint_dir: Optional[Union[str, Path]] = None,
) -> TrainResult:
    """
    Alternate critic steps over the shuffled training split with one generator step every
    `critic_iters_per_gen` critic steps.

    Both learning rates follow `config.lr_factor` per epoch. With `restore_best` the model ends
    with the weights of the epoch with the best validation MAE; checkpoints written during
    training keep the weights of their own epoch.

    Raises:
        DivergenceError: |critic loss| exceeded the divergence threshold
        NumericError: a loss became non-finite, or the final Lipschitz proxy left its range under lipschitz_strict
    """
    _check_compatible(model, dataset, config)
    configure_torch(config.threads)
    rng = torch.Generator().manual_seed(config.seed)
    critic_opt = AdamState(dict(model.critic.named_parameters()), lr=config.lr, betas=config.betas)
    generator_opt = AdamState(dict(model.generator.named_parameters()), lr=config.lr, betas=config.betas)
    schedules = [torch.optim.lr_scheduler.LambdaLR(opt.optimizer, config.lr_factor) for opt in (critic_opt, generator_opt)]
    train_indices = np.asarray(dataset.split.train, dtype=np.int64)
    val_indices = dataset.split.val[: config.val_samples]
    sample_rate = dataset.channel.sample_rate_hz
    real_val_pdp = output_pdp(dataset.output_tensor(val_indices)) if val_indices else None
    checkpoint_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    metadata = {"train_config": config.model_dump(mode="json"), "dataset_config_hash": dataset.channel.config_hash()}

    history: list[EpochMetrics] = []
    checkpoints: list[str] = []
    critic_steps = generator_steps = 0
    best: Optional[float] = None
    best_key: Optional[tuple[float, float]] = None
    best_epoch: Optional[int] = None
    best_state: Optional[dict[str, dict[str, torch.Tensor]]] = None

    with start_action(action_type="train", epochs=config.epochs, mode=dataset.mode.value, mimo=dataset.channel.mimo, architecture=model.architecture.label, **model.parameter_counts()) as run:
        for epoch in range(config.epochs):
            with start_action(action_type="train_epoch", epoch=epoch, lr=config.lr * config.lr_factor(epoch)) as action:
                order = np.random.Generator(np.random.Philox(np.random.SeedSequence(config.seed, spawn_key=(epoch,)))).permutation(train_indices.size)
                sums = {"critic_loss": 0.0, "wasserstein": 0.0, "penalty": 0.0, "grad_norm_mean": 0.0}
                gen_losses: list[float] = []
                batches = 0
                for start in range(0, train_indices.size, config.batch_size):
                    batch = train_indices[order[start:start + config.batch_size]]
                    real = dataset.output_tensor(batch)
                    critic_opt.zero_grad()
                    loss = wgan_gp_batch_loss(model, real, rng, config.gp_lambda, with_generator_loss=False)
                    value = float(loss.critic_loss.detach())
                    if abs(value) > config.divergence_threshold:
                        raise DivergenceError(
                            f"critic loss {value:.4g} exceeds {config.divergence_threshold:.4g}",
                            where=f"epoch {epoch}, critic step {critic_steps}, W={loss.wasserstein:.4g}, penalty={loss.penalty:.4g}",
                        )
                    loss.critic_loss.backward()
                    critic_opt.step()
                    critic_steps += 1
                    batches += 1
                    sums["critic_loss"] += value
                    sums["wasserstein"] += loss.wasserstein
                    sums["penalty"] += loss.penalty
                    sums["grad_norm_mean"] += loss.grad_norm_mean

                    if critic_steps % config.critic_iters_per_gen == 0:
                        generator_opt.zero_grad()
                        g_loss = generator_loss(model, len(batch), rng)
                        check_finite(g_loss.detach(), f"generator loss, epoch {epoch}")
                        g_loss.backward()
                        generator_opt.step()
                        generator_steps += 1
                        gen_losses.append(float(g_loss.detach()))

                mae = _validation_mae(model, real_val_pdp, sample_rate, len(val_indices), config.seed)
                if mae is not None:
                    best = mae.average_delay_mae_ns if best is None else min(best, mae.average_delay_mae_ns)
                metrics = EpochMetrics(
                    epoch=epoch,
                    lr=config.lr * config.lr_factor(epoch),
                    critic_loss=sums["critic_loss"] / batches,
                    gen_loss=float(np.mean(gen_losses)) if gen_losses else None,
                    wasserstein=sums["wasserstein"] / batches,
                    penalty=sums["penalty"] / batches,
                    grad_norm_mean=sums["grad_norm_mean"] / batches,
                    val_power_mae_db=mae.power_mae_db if mae else None,
                    val_avg_delay_mae_ns=mae.average_delay_mae_ns if mae else None,
                    val_rms_delay_mae_ns=mae.rms_delay_mae_ns if mae else None,
                    best_avg_delay_mae_ns=best,
                    generator_steps=generator_steps,
                    critic_steps=critic_steps,
                )
                action.add_success_fields(**metrics.model_dump(exclude={"epoch"}))
                history.append(metrics)
                for schedule in schedules:
                    schedule.step()
                key = _selection_key(metrics)
                if config.restore_best and key is not None and (best_key is None or key < best_key):
                    best_key, best_epoch, best_state = key, epoch, _snapshot(model)
                if on_epoch is not None:
                    on_epoch(metrics, model)
                if checkpoint_dir is not None and (epoch + 1) % config.checkpoint_every == 0:
                    path = model.save(checkpoint_dir / f"epoch_{epoch + 1:04d}.ckpt", {**metadata, "epoch": epoch + 1})
                    checkpoints.append(str(path))

        proxy = history[-1].grad_norm_mean
        low, high = config.lipschitz_range
        in_range = low <= proxy <= high
        if not in_range:
            Message.log(message_type="lipschitz_proxy_out_of_range", proxy=proxy, low=low, high=high)
            if config.lipschitz_strict:
                raise NumericError(f"critic gradient norm {proxy:.3f} outside [{low}, {high}]", where="end of training")
        if best_state is not None:
            model.generator.load_state_dict(best_state["generator"])
            model.critic.load_state_dict(best_state["critic"])
            run.log(message_type="restored_best_epoch", epoch=best_epoch, avg_delay_mae_ns=best_key[0], power_mae_db=best_key[1])
        if checkpoint_dir is not None:
            checkpoints.append(str(model.save(checkpoint_dir / "final.ckpt", {**metadata, "epoch": config.epochs, "best_epoch": best_epoch})))
        run.add_success_fields(lipschitz_proxy=proxy, generator_steps=generator_steps, critic_steps=critic_steps, best_epoch=best_epoch)
        return TrainResult(
            history=history,
            lipschitz_proxy=proxy,
            lipschitz_in_range=in_range,
            parameter_counts=model.parameter_counts(),
            checkpoints=checkpoints,
            best_epoch=best_epoch,
        )
