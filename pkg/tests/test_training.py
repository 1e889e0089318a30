from __future__ import annotations

import copy
import csv
from pathlib import Path

import numpy as np
import pytest
import torch
from torch import nn

from conftest import make_record, smooth_label
from crme import training
from crme.dataset import SampleRecord
from crme.errors import ShapeMismatchError, TrainingDivergedError
from crme.models import Discriminator, DiscriminatorSpec, Generator, GeneratorSpec, init_params
from crme.training import (
    PLAIN,
    TrainConfig,
    discriminator_step,
    frozen,
    generator_step,
    l2_step,
    loss_discriminator,
    loss_generator,
    pixel_distance,
    train,
    train_l2_only,
)


def _state(module: nn.Module) -> dict[str, torch.Tensor]:
    return {name: t.detach().clone() for name, t in module.state_dict().items()}


def _assert_same_state(a: dict[str, torch.Tensor], b: dict[str, torch.Tensor]) -> None:
    assert a.keys() == b.keys()
    for name in a:
        assert torch.equal(a[name], b[name]), name


def _fully_sampled_record() -> SampleRecord:
    label = smooth_label((8, 8))
    return make_record(label, [(x, y) for x in range(8) for y in range(8)])


def test_loss_discriminator_examples() -> None:
    assert float(loss_discriminator(np.ones((2, 2)), np.zeros((2, 2)))) == 0.0
    assert float(loss_discriminator(np.zeros((2, 2)), np.ones((2, 2)))) == pytest.approx(8.0, abs=1e-9)
    assert float(loss_discriminator(np.full((1, 1), 0.5), np.full((1, 1), 0.5))) == pytest.approx(0.5, abs=1e-9)


def test_loss_generator_examples() -> None:
    p = np.array([[0.3, 0.7], [0.1, 0.9]])
    assert float(loss_generator(np.ones((2, 2)), p, p, 100.0)) == 0.0
    s_fake = np.array([[0.2, 0.4], [0.6, 0.8]])
    assert float(loss_generator(s_fake, p, np.zeros((2, 2)), 0.0)) == pytest.approx(((1 - s_fake) ** 2).sum(), abs=1e-9)
    value = loss_generator(np.full((1, 1), 0.5), np.ones((1, 1)), np.zeros((1, 1)), 2.0)
    assert float(value) == pytest.approx(2.25, abs=1e-9)


def test_losses_reject_bad_input() -> None:
    with pytest.raises(ShapeMismatchError):
        loss_discriminator(np.ones((2, 2)), np.ones((3, 3)))
    with pytest.raises(ShapeMismatchError):
        loss_generator(np.ones((2, 2)), np.ones((4, 4)), np.ones((2, 2)), 1.0)
    with pytest.raises(ValueError):
        loss_generator(np.ones((2, 2)), np.ones((2, 2)), np.ones((2, 2)), -1.0)


def test_losses_are_non_negative() -> None:
    rng = np.random.default_rng(0)
    for _ in range(20):
        s, s_fake = rng.random((6, 6)), rng.random((6, 6))
        p, p_fake = rng.random((8, 8)), rng.random((8, 8))
        assert float(loss_discriminator(s, s_fake)) >= 0.0
        assert float(loss_generator(s_fake, p, p_fake, float(rng.random() * 10))) >= 0.0


def test_loss_generator_is_affine_in_lambda() -> None:
    rng = np.random.default_rng(1)
    s_fake, p, p_fake = rng.random((6, 6)), rng.random((8, 8)), rng.random((8, 8))
    base = float(loss_generator(s_fake, p, p_fake, 0.0))
    slope = float(pixel_distance(p, p_fake))
    previous = base
    for lam in (0.5, 1.0, 3.0, 10.0, 100.0):
        value = float(loss_generator(s_fake, p, p_fake, lam))
        assert value == pytest.approx(base + lam * slope, rel=1e-12)
        assert value >= previous
        previous = value


def _numeric_gradient_errors(loss_fn, params: list[nn.Parameter], eps: float = 1e-6) -> np.ndarray:
    analytic = torch.autograd.grad(loss_fn(), params, allow_unused=True)
    errors = []
    with torch.no_grad():
        for param, grad in zip(params, analytic):
            grad = torch.zeros_like(param) if grad is None else grad
            flat, flat_grad = param.view(-1), grad.reshape(-1)
            for i in range(flat.numel()):
                original = flat[i].item()
                flat[i] = original + eps
                up = loss_fn().item()
                flat[i] = original - eps
                down = loss_fn().item()
                flat[i] = original
                numeric = (up - down) / (2 * eps)
                exact = flat_grad[i].item()
                errors.append(abs(exact - numeric) / max(abs(exact), abs(numeric), 1e-4))
    return np.asarray(errors)


def _jitter_biases(*modules: nn.Module) -> None:
    # keep pre-activations off the ReLU kink
    with torch.no_grad():
        for module in modules:
            for name, param in module.named_parameters():
                if name.endswith("bias"):
                    param.uniform_(-0.1, 0.1)


def test_gradients_match_finite_differences(
    tiny_generator_spec: GeneratorSpec, tiny_discriminator_spec: DiscriminatorSpec
) -> None:
    gen = init_params(tiny_generator_spec, 0).double()
    disc = init_params(tiny_discriminator_spec, 1).double()
    torch.manual_seed(2)
    _jitter_biases(gen, disc)
    x = torch.rand(2, 2, 8, 8, dtype=torch.float64)
    p = torch.rand(2, 1, 8, 8, dtype=torch.float64)
    params = list(gen.parameters()) + list(disc.parameters())

    def l_d() -> torch.Tensor:
        return loss_discriminator(disc(x, p), disc(x, gen(x)))

    def l_g() -> torch.Tensor:
        return loss_generator(disc(x, gen(x)), p, gen(x), 1.0)

    for loss_fn in (l_d, l_g):
        errors = _numeric_gradient_errors(loss_fn, params)
        assert np.mean(errors <= 1e-4) >= 0.95
        assert errors.max() <= 1e-3


def _chunks(records: list[SampleRecord]) -> list[training.Chunk]:
    loader = training.make_loader(records, TrainConfig(batch_size=len(records)))
    return [(x.double(), p.double()) for x, p in loader]


def test_single_discriminator_step_descends(
    tiny_records: list[SampleRecord], tiny_generator_spec: GeneratorSpec, tiny_discriminator_spec: DiscriminatorSpec
) -> None:
    gen = init_params(tiny_generator_spec, 0).double()
    disc = init_params(tiny_discriminator_spec, 0).double()
    chunks = _chunks(tiny_records[:3])
    gen_before = _state(gen)

    def batch_loss(d: Discriminator) -> float:
        with torch.no_grad():
            return sum(float(loss_discriminator(d(x, p), d(x, gen(x)))) for x, p in chunks)

    start = batch_loss(disc)
    lr, improved = 1.0, False
    for _ in range(40):
        candidate = copy.deepcopy(disc)
        reported = discriminator_step(gen, candidate, torch.optim.SGD(candidate.parameters(), lr=lr), chunks)
        assert reported == pytest.approx(start, rel=1e-9)
        if batch_loss(candidate) < start:
            improved = True
            break
        lr /= 2
    assert improved
    _assert_same_state(gen_before, _state(gen))


def test_single_generator_step_descends(
    tiny_records: list[SampleRecord], tiny_generator_spec: GeneratorSpec, tiny_discriminator_spec: DiscriminatorSpec
) -> None:
    gen = init_params(tiny_generator_spec, 0).double()
    disc = init_params(tiny_discriminator_spec, 0).double()
    chunks = _chunks(tiny_records[:3])
    disc_before = _state(disc)

    def batch_loss(g: Generator) -> float:
        with torch.no_grad():
            return sum(float(loss_generator(disc(x, g(x)), p, g(x), 100.0)) for x, p in chunks)

    start = batch_loss(gen)
    lr, improved = 1.0, False
    for _ in range(40):
        candidate = copy.deepcopy(gen)
        loss, _ = generator_step(candidate, disc, torch.optim.SGD(candidate.parameters(), lr=lr), chunks, 100.0)
        assert loss == pytest.approx(start, rel=1e-9)
        if batch_loss(candidate) < start:
            improved = True
            break
        lr /= 2
    assert improved
    _assert_same_state(disc_before, _state(disc))
    assert all(param.requires_grad for param in disc.parameters())


def test_frozen_restores_flags(tiny_discriminator_spec: DiscriminatorSpec) -> None:
    disc = init_params(tiny_discriminator_spec, 0)
    first = next(disc.parameters())
    first.requires_grad_(False)
    with frozen(disc):
        assert not any(p.requires_grad for p in disc.parameters())
    assert not first.requires_grad
    assert sum(p.requires_grad for p in disc.parameters()) == len(list(disc.parameters())) - 1


class _CertainDiscriminator(nn.Module):
    def forward(self, x: torch.Tensor, candidate: torch.Tensor) -> torch.Tensor:
        return torch.ones(candidate.shape[0], 1, 2, 2, dtype=candidate.dtype)


def test_l2_step_matches_generator_step_without_adversarial_term(
    tiny_records: list[SampleRecord], tiny_generator_spec: GeneratorSpec
) -> None:
    chunks = _chunks(tiny_records[:2])
    gen_a = init_params(tiny_generator_spec, 5).double()
    gen_b = copy.deepcopy(gen_a)
    pixel_a = l2_step(gen_a, torch.optim.SGD(gen_a.parameters(), lr=1e-3), chunks, 7.0)
    loss_b, pixel_b = generator_step(gen_b, _CertainDiscriminator(), torch.optim.SGD(gen_b.parameters(), lr=1e-3), chunks, 7.0)
    assert pixel_a == pytest.approx(pixel_b, rel=1e-12)
    assert loss_b == pytest.approx(7.0 * pixel_b)
    for a, b in zip(gen_a.parameters(), gen_b.parameters()):
        torch.testing.assert_close(a, b, rtol=0, atol=1e-15)


def _record_optimizer_steps(monkeypatch: pytest.MonkeyPatch) -> list[str]:
    calls: list[str] = []
    real = training.make_optimizer

    def recording(module: nn.Module, lr: float, config: TrainConfig) -> torch.optim.Optimizer:
        optimizer = real(module, lr, config)
        tag = "D" if isinstance(module, Discriminator) else "G"
        step = optimizer.step

        def wrapped(*args, **kwargs):
            calls.append(tag)
            return step(*args, **kwargs)

        optimizer.step = wrapped  # type: ignore[method-assign]
        return optimizer

    monkeypatch.setattr(training, "make_optimizer", recording)
    return calls


@pytest.mark.parametrize("rescore", [True, False])
def test_full_batch_epoch_is_one_update_each(
    monkeypatch: pytest.MonkeyPatch,
    tiny_records: list[SampleRecord],
    tiny_generator_spec: GeneratorSpec,
    tiny_discriminator_spec: DiscriminatorSpec,
    rescore: bool,
) -> None:
    calls = _record_optimizer_steps(monkeypatch)
    config = TrainConfig(n_stop=1, batch_size=0, checkpoint_every=0, rescore_after_d_step=rescore)
    gen, disc = init_params(tiny_generator_spec, 0), init_params(tiny_discriminator_spec, 0)
    _, _, log = train(tiny_records[:3], gen, disc, config)
    assert calls == ["D", "G"]
    assert len(log) == 1
    assert log.rows[0].d_updates == 1 and log.rows[0].g_updates == 1


def test_minibatches_alternate_d_then_g(
    monkeypatch: pytest.MonkeyPatch,
    tiny_records: list[SampleRecord],
    tiny_generator_spec: GeneratorSpec,
    tiny_discriminator_spec: DiscriminatorSpec,
) -> None:
    calls = _record_optimizer_steps(monkeypatch)
    config = TrainConfig(n_stop=1, batch_size=2, checkpoint_every=0)
    train(tiny_records, init_params(tiny_generator_spec, 0), init_params(tiny_discriminator_spec, 0), config)
    assert calls == ["D", "G"] * 3


def test_zero_epochs_leave_params_untouched(
    tiny_records: list[SampleRecord], tiny_generator_spec: GeneratorSpec, tiny_discriminator_spec: DiscriminatorSpec
) -> None:
    gen, disc = init_params(tiny_generator_spec, 0), init_params(tiny_discriminator_spec, 0)
    gen_before, disc_before = _state(gen), _state(disc)
    gen_out, disc_out, log = train(tiny_records, gen, disc, TrainConfig(n_stop=0))
    assert len(log) == 0
    _assert_same_state(gen_before, _state(gen_out))
    _assert_same_state(disc_before, _state(disc_out))


def test_train_rejects_empty_dataset(tiny_generator_spec: GeneratorSpec, tiny_discriminator_spec: DiscriminatorSpec) -> None:
    with pytest.raises(ValueError):
        train([], init_params(tiny_generator_spec, 0), init_params(tiny_discriminator_spec, 0), TrainConfig(n_stop=1))


def test_l2_only_overfits_one_record() -> None:
    record = _fully_sampled_record()
    gen = init_params(GeneratorSpec(depth=1, base_channels=8, max_channels=8), 0)
    config = TrainConfig(lambda_weight=1.0, eta_g=5e-3, beta1=0.9, n_stop=500, batch_size=1, checkpoint_every=0)
    _, log = train_l2_only([record], gen, config)
    assert len(log) == 500
    assert min(row.lambda_term for row in log.rows) < 1e-3
    assert all(row.loss_d == 0.0 and row.d_updates == 0 for row in log.rows)


def test_l2_only_is_deterministic(tiny_records: list[SampleRecord], tiny_generator_spec: GeneratorSpec) -> None:
    config = TrainConfig(n_stop=3, batch_size=2, seed=4, checkpoint_every=0)
    first, log_a = train_l2_only(tiny_records, init_params(tiny_generator_spec, 1), config)
    second, log_b = train_l2_only(tiny_records, init_params(tiny_generator_spec, 1), config)
    _assert_same_state(_state(first), _state(second))
    assert [r.pixel_l2 for r in log_a.rows] == [r.pixel_l2 for r in log_b.rows]


def test_adversarial_training_is_deterministic(
    tiny_records: list[SampleRecord], tiny_generator_spec: GeneratorSpec, tiny_discriminator_spec: DiscriminatorSpec
) -> None:
    config = TrainConfig(n_stop=3, batch_size=2, seed=4, checkpoint_every=0)
    runs = []
    for _ in range(2):
        gen = init_params(tiny_generator_spec, 1)
        disc = init_params(tiny_discriminator_spec, 2)
        runs.append(train(tiny_records, gen, disc, config))
    (gen_a, disc_a, log_a), (gen_b, disc_b, log_b) = runs
    _assert_same_state(_state(gen_a), _state(gen_b))
    _assert_same_state(_state(disc_a), _state(disc_b))
    assert [(r.loss_d, r.loss_g) for r in log_a.rows] == [(r.loss_d, r.loss_g) for r in log_b.rows]


def test_plain_optimizer_and_validation(
    tmp_path: Path,
    tiny_records: list[SampleRecord],
    tiny_generator_spec: GeneratorSpec,
    tiny_discriminator_spec: DiscriminatorSpec,
) -> None:
    config = TrainConfig(optimizer=PLAIN, eta_g=1e-3, eta_d=1e-3, n_stop=2, batch_size=3, checkpoint_every=1)
    gen, disc = init_params(tiny_generator_spec, 0), init_params(tiny_discriminator_spec, 0)
    _, _, log = train(tiny_records[:4], gen, disc, config, out_dir=tmp_path, validation=tiny_records[4:])
    assert [row.epoch for row in log.rows] == [1, 2]
    assert all(row.val_nmse is not None and row.val_nmse >= 0.0 for row in log.rows)
    assert all(row.loss_d >= 0.0 and row.loss_g >= row.lambda_term for row in log.rows)
    for tag in ("epoch_0001", "epoch_0002"):
        assert (tmp_path / "checkpoints" / tag / "generator.pt").exists()
        assert (tmp_path / "checkpoints" / tag / "discriminator.pt").exists()

    path = log.write_csv(tmp_path / "train_log.csv")
    with path.open(encoding="utf-8", newline="") as handle:
        rows = list(csv.DictReader(handle))
    assert len(rows) == 2
    assert rows[0]["optimizer"] == PLAIN
    assert float(rows[1]["lr_g"]) == pytest.approx(1e-3)


def test_non_finite_loss_saves_diagnostic_checkpoint(
    monkeypatch: pytest.MonkeyPatch,
    tmp_path: Path,
    tiny_records: list[SampleRecord],
    tiny_generator_spec: GeneratorSpec,
    tiny_discriminator_spec: DiscriminatorSpec,
) -> None:
    real = training.loss_discriminator
    monkeypatch.setattr(training, "loss_discriminator", lambda s, f: real(s, f) * float("nan"))
    gen, disc = init_params(tiny_generator_spec, 0), init_params(tiny_discriminator_spec, 0)
    with pytest.raises(TrainingDivergedError) as info:
        train(tiny_records, gen, disc, TrainConfig(n_stop=2, batch_size=2), out_dir=tmp_path)
    target = tmp_path / "checkpoints" / "diverged"
    assert info.value.checkpoint == target
    assert (target / "generator.pt").exists()
    assert (target / "discriminator.pt").exists()


def test_train_config_validation() -> None:
    with pytest.raises(ValueError):
        TrainConfig(lambda_weight=-1.0)
    with pytest.raises(ValueError):
        TrainConfig(eta_d=0.0)
    with pytest.raises(ValueError):
        TrainConfig(optimizer="rmsprop")
    with pytest.raises(ValueError):
        TrainConfig(batch_size=-2)


def test_adversarial_training_overfits_one_record() -> None:
    record = _fully_sampled_record()
    gen = init_params(GeneratorSpec(depth=1, base_channels=8, max_channels=8), 0)
    disc = init_params(DiscriminatorSpec(layers=2, base_channels=4, max_channels=8), 0)
    config = TrainConfig(
        lambda_weight=1.0,
        eta_g=5e-3,
        eta_d=5e-3,
        beta1=0.9,
        n_stop=500,
        batch_size=1,
        checkpoint_every=0,
    )
    _, _, log = train([record], gen, disc, config)
    assert min(row.lambda_term for row in log.rows) < 1e-3
