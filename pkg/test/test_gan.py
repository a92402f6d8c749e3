"""Tests for the MIMO-GAN generator, critic, losses and training loop."""

import numpy as np
import pytest
import torch
from pydantic import ValidationError

from conftest import small_config
from mimogan.dataset import ProbingMode, generate_dataset
from mimogan.config import resolve_run_config
from mimogan.errors import ConfigurationError, ContractViolationError, DivergenceError, NumericError, UsageError
from mimogan.evaluation import evaluate
from mimogan.gan import (
    ArchitectureMode,
    MimoGan,
    TrainConfig,
    critic_score,
    generate_channel,
    generate_link,
    gradient_penalty,
    train,
    wgan_gp_batch_loss,
)
from mimogan.nn import DTYPE
from mimogan.tensor import ComplexVec, gram_batch


def _small_model(n_rx: int = 2, n_tx: int = 2, mode: ProbingMode = ProbingMode.SEQUENTIAL, architecture: ArchitectureMode | None = None, seed: int = 0) -> MimoGan:
    return MimoGan.build(n_rx, n_tx, mode, architecture=architecture, n_taps=16, n_samples=20, z_dim=8, hidden=[16], seed=seed)


def test_parameter_counts_at_4x4():
    conditioned = MimoGan.build(4, 4, ProbingMode.SEQUENTIAL).parameter_counts()
    assert conditioned == {"generator": 39720, "critic": 116317, "total": 156037}
    unconditioned = MimoGan.build(4, 4, ProbingMode.SEQUENTIAL, ArchitectureMode(cond_g=False, cond_d=False)).parameter_counts()
    assert unconditioned["total"] == 850197
    assert unconditioned["total"] > 5 * conditioned["total"], "conditioning shrinks the model"


def test_probe_count_must_match_mode():
    model = _small_model()
    with pytest.raises(ConfigurationError):
        MimoGan(model.generator_config, model.critic_config, mode=ProbingMode.SIMULTANEOUS)


def test_generator_links_share_latent():
    model = _small_model()
    z = np.random.default_rng(0).standard_normal(8)
    channel = generate_channel(model, z)
    assert channel.data.shape == (2, 2, 16)
    for i in range(2):
        for j in range(2):
            link = generate_link(model, z, (i, j))
            assert np.allclose(link.data, channel.data[i, j]), f"link ({i}, {j}) must match the full realization"
    with pytest.raises(ContractViolationError):
        generate_link(model, z, (2, 0))


def test_unconditioned_generator_has_no_links():
    model = _small_model(architecture=ArchitectureMode(cond_g=False))
    with pytest.raises(UsageError):
        generate_link(model, np.zeros(8), (0, 0))
    assert generate_channel(model, np.zeros(8)).data.shape == (2, 2, 16)


def test_fake_outputs_read_channel_columns():
    model = _small_model()
    z = model.latents(3, torch.Generator().manual_seed(1))
    with torch.no_grad():
        h_re, h_im = model.generator(z)
        y_re, y_im = model.fake_outputs(z)
    assert y_re.shape == (3, 2, 2, 20)
    for k in range(2):
        assert torch.allclose(y_re[:, k, :, :16], h_re[:, :, k, :])
        assert torch.allclose(y_im[:, k, :, :16], h_im[:, :, k, :])


def test_critic_score_matches_batched_critic():
    model = _small_model()
    rng = np.random.default_rng(2)
    y = rng.standard_normal((2, 2, 20)) + 1j * rng.standard_normal((2, 2, 20))
    gram = gram_batch(y).sum(axis=0)
    with torch.no_grad():
        scores = model.critic(torch.as_tensor(y.real[None], dtype=DTYPE), torch.as_tensor(y.imag[None], dtype=DTYPE))
    assert scores.shape == (1, 2), "one score per receive antenna"
    for i in range(2):
        single = critic_score(model, ComplexVec(data=y[:, i, :].reshape(-1)), gram, i)
        assert np.isclose(single, float(scores[0, i])), f"antenna {i}"
    with pytest.raises(ContractViolationError):
        critic_score(model, ComplexVec(data=y[:, 0, :].reshape(-1)), None, 0)


def test_unconditioned_critic_scores_whole_measurement():
    model = _small_model(architecture=ArchitectureMode(cond_d=False, use_gram=False))
    y = torch.zeros((5, 2, 2, 20), dtype=DTYPE)
    assert model.critic(y, y).shape == (5, 1)


def test_sampling_batched_matches_per_sample():
    model = _small_model()
    batched = model.sample_channels(6, seed=4, batched=True)
    single = model.sample_channels(6, seed=4, batched=False)
    assert batched.shape == (6, 2, 2, 16)
    assert np.allclose(batched, single, atol=1e-12)
    assert model.sample_channels(0).shape == (0, 2, 2, 16)


def test_simulate_applies_sampled_channels():
    model = _small_model()
    x = np.zeros((2, 20), dtype=np.complex128)
    x[0, 0] = 1.0
    y = model.simulate(x, n=2, seed=3)
    h = model.sample_channels(2, seed=3)
    assert y.shape == (2, 1, 2, 20)
    assert np.allclose(y[:, 0, :, :16], h[:, :, 0, :])


def test_gradient_penalty_covers_every_antenna():
    model = _small_model()
    y = torch.randn((4, 2, 2, 20), dtype=DTYPE, generator=torch.Generator().manual_seed(0))
    penalty, norms = gradient_penalty(model.critic, y, y)
    assert norms.shape == (8,), "one norm per (measurement, receive antenna)"
    assert float(penalty) >= 0


def test_batch_loss_combines_terms():
    model = _small_model()
    cfg = small_config(n_taps=16)
    real = generate_dataset(cfg, ProbingMode.SEQUENTIAL, count=4, seed=0, n_samples=20).output_tensor()
    loss = wgan_gp_batch_loss(model, real, torch.Generator().manual_seed(0), gp_lambda=10.0)
    assert np.isclose(float(loss.critic_loss), -loss.wasserstein + 10.0 * loss.penalty)
    assert loss.gen_loss is not None and torch.isfinite(loss.gen_loss)
    loss.gen_loss.backward()
    assert model.generator.trunk.layers[0].weight.grad is not None, "generator loss reaches the generator"


def test_save_and_load_keep_samples(tmp_path):
    model = _small_model(seed=5)
    path = model.save(tmp_path / "model.ckpt", {"epoch": 3})
    loaded, metadata = MimoGan.load(path)
    assert metadata["epoch"] == 3
    assert loaded.architecture == model.architecture
    assert np.array_equal(loaded.sample_channels(3, seed=1), model.sample_channels(3, seed=1))


def _toy_training(tmp_path, **overrides):
    cfg = small_config(1, 1, n_taps=8, profile="single-tap", fading="static", correlation="identity")
    dataset = generate_dataset(cfg, ProbingMode.SEQUENTIAL, count=40, seed=0, n_samples=8)
    model = MimoGan.build(1, 1, ProbingMode.SEQUENTIAL, n_taps=8, n_samples=8, z_dim=4, hidden=[16], seed=0)
    config = TrainConfig(**{"epochs": 2, "batch_size": 8, "critic_iters_per_gen": 2, "checkpoint_every": 1, "val_samples": 8, **overrides})
    return model, dataset, config


def test_training_runs_and_checkpoints(tmp_path):
    model, dataset, config = _toy_training(tmp_path)
    seen = []
    result = train(model, dataset, config, on_epoch=lambda metrics, _: seen.append(metrics.epoch), checkpoint_dir=tmp_path / "ckpt")
    assert seen == [0, 1]
    last = result.history[-1]
    assert last.critic_steps == 6, "24 training measurements in batches of 8, two epochs"
    assert last.generator_steps == 3
    assert [p.split("/")[-1] for p in result.checkpoints] == ["epoch_0001.ckpt", "epoch_0002.ckpt", "final.ckpt"]
    assert last.val_avg_delay_mae_ns is not None
    assert np.isfinite(result.lipschitz_proxy)


def test_training_is_reproducible(tmp_path):
    first = train(*_toy_training(tmp_path), checkpoint_dir=tmp_path / "first")
    second = train(*_toy_training(tmp_path), checkpoint_dir=tmp_path / "second")
    assert first.history == second.history
    for name in ["epoch_0001.ckpt", "epoch_0002.ckpt", "final.ckpt"]:
        assert (tmp_path / "first" / name).read_bytes() == (tmp_path / "second" / name).read_bytes(), name


def test_training_rejects_mismatched_mode(tmp_path):
    model, dataset, config = _toy_training(tmp_path)
    with pytest.raises(ConfigurationError):
        train(model, dataset, config.model_copy(update={"mode": ProbingMode.SIMULTANEOUS}))


def test_divergence_aborts_training(tmp_path):
    model, dataset, config = _toy_training(tmp_path, divergence_threshold=1e-12)
    with pytest.raises(DivergenceError):
        train(model, dataset, config)


def _measurement_score(model: MimoGan, y: np.ndarray, i: int) -> float:
    """Score of receive antenna i for one measurement y of shape (K, N_R, T)."""
    return critic_score(model, ComplexVec(data=y[:, i, :].reshape(-1)), gram_batch(y).sum(axis=0), i)


def _score_gradient(model: MimoGan, y: np.ndarray, i: int, eps: float = 1e-6) -> np.ndarray:
    """Central differences of one antenna's score over the real and imaginary parts of y."""
    gradient = np.zeros(y.shape + (2,))
    for index in np.ndindex(*y.shape):
        for part, step in enumerate((eps, 1j * eps)):
            plus, minus = y.copy(), y.copy()
            plus[index] += step
            minus[index] -= step
            gradient[index + (part,)] = (_measurement_score(model, plus, i) - _measurement_score(model, minus, i)) / (2 * eps)
    return gradient


def test_critic_input_gradient_matches_central_differences():
    model = _small_model(n_rx=2, n_tx=1, seed=3)
    rng = np.random.default_rng(5)
    y = rng.standard_normal((1, 2, 20)) + 1j * rng.standard_normal((1, 2, 20))
    y_re = torch.as_tensor(y.real[None], dtype=DTYPE).requires_grad_(True)
    y_im = torch.as_tensor(y.imag[None], dtype=DTYPE).requires_grad_(True)
    scores = model.critic(y_re, y_im)
    for i in range(2):
        g_re, g_im = torch.autograd.grad(scores[0, i], (y_re, y_im), retain_graph=True)
        analytic = np.stack([g_re[0].numpy(), g_im[0].numpy()], axis=-1)
        numeric = _score_gradient(model, y, i)
        assert np.allclose(analytic, numeric, rtol=1e-5, atol=1e-8), f"antenna {i}, including the gram path"


def test_zero_critic_loss_equals_penalty_weight():
    model = _small_model()
    with torch.no_grad():
        for parameter in model.critic.parameters():
            parameter.zero_()
    real = torch.randn((3, 2, 2, 20), dtype=DTYPE, generator=torch.Generator().manual_seed(1))
    loss = wgan_gp_batch_loss(model, (real, real), torch.Generator().manual_seed(0), gp_lambda=10.0)
    assert loss.wasserstein == 0.0
    assert loss.penalty == 1.0, "a zero gradient sits at distance one from the unit norm"
    assert float(loss.critic_loss) == pytest.approx(10.0, abs=1e-12)


def test_batch_loss_of_one_measurement_unrolled():
    model = _small_model(n_rx=2, n_tx=1, seed=6)
    rng = np.random.default_rng(8)
    real = rng.standard_normal((1, 1, 2, 20)) + 1j * rng.standard_normal((1, 1, 2, 20))
    z = model.latents(1, torch.Generator().manual_seed(3))
    u = torch.tensor([0.3], dtype=DTYPE)
    loss = wgan_gp_batch_loss(model, real, torch.Generator().manual_seed(0), gp_lambda=10.0, z=z, u=u, with_generator_loss=False)

    with torch.no_grad():
        fake_re, fake_im = model.fake_outputs(z)
    fake = fake_re.numpy()[0] + 1j * fake_im.numpy()[0]
    mixed = 0.3 * real[0] + 0.7 * fake
    d_real = np.mean([_measurement_score(model, real[0], i) for i in range(2)])
    d_fake = np.mean([_measurement_score(model, fake, i) for i in range(2)])
    penalty = np.mean([(np.linalg.norm(_score_gradient(model, mixed, i)) - 1.0) ** 2 for i in range(2)])

    assert loss.wasserstein == pytest.approx(d_real - d_fake, abs=1e-10)
    assert loss.penalty == pytest.approx(penalty, rel=1e-6)
    assert float(loss.critic_loss) == pytest.approx(d_fake - d_real + 10.0 * penalty, rel=1e-6)


def test_lipschitz_range_is_enforced_only_when_strict(tmp_path):
    model, dataset, config = _toy_training(tmp_path, lipschitz_range=(1e6, 2e6))
    result = train(model, dataset, config)
    assert not result.lipschitz_in_range
    model, dataset, config = _toy_training(tmp_path, lipschitz_range=(1e6, 2e6), lipschitz_strict=True)
    with pytest.raises(NumericError, match="outside"):
        train(model, dataset, config)
    with pytest.raises(ValidationError):
        TrainConfig(lipschitz_range=(2.0, 1.0))


def test_linear_learning_rate_schedule(tmp_path):
    config = TrainConfig(epochs=4, lr_schedule="linear", lr_floor=0.2)
    assert [config.lr_factor(epoch) for epoch in range(4)] == pytest.approx([1.0, 0.8, 0.6, 0.4])
    assert TrainConfig(epochs=4).lr_factor(3) == 1.0

    model, dataset, config = _toy_training(tmp_path, lr_schedule="linear", lr_floor=0.5)
    result = train(model, dataset, config)
    assert [m.lr for m in result.history] == pytest.approx([config.lr, 0.75 * config.lr])


def test_restore_best_keeps_the_best_validation_epoch(tmp_path):
    model, dataset, config = _toy_training(tmp_path, epochs=4, restore_best=True)
    snapshots = {}
    result = train(model, dataset, config, on_epoch=lambda metrics, m: snapshots.setdefault(metrics.epoch, m.sample_channels(4, seed=1)))
    keys = [(round(m.val_avg_delay_mae_ns, 2), m.val_power_mae_db) for m in result.history]
    assert result.best_epoch == keys.index(min(keys))
    assert np.array_equal(model.sample_channels(4, seed=1), snapshots[result.best_epoch])

    model, dataset, config = _toy_training(tmp_path, epochs=4)
    assert train(model, dataset, config).best_epoch is None


@pytest.mark.slow
def test_single_tap_preset_recovers_the_static_channel():
    config = resolve_run_config("toy-single-tap")
    dataset = generate_dataset(config.channel_config(), config.mode, count=config.count, seed=config.seed, n_samples=config.n_samples)
    model = config.build_model()
    train(model, dataset, config.train_config())

    report = evaluate(dataset, model, seed=1)
    assert report.average_delay_mae_ns < 1.0
    assert report.power_mae_db < -25.0
    constant = dataset.reference_channels([0])[0]
    samples = model.sample_channels(256, seed=2)
    assert np.abs(samples - constant).mean(axis=0).max() < 0.05, "every tap of every link within 0.05 of the constant channel"
