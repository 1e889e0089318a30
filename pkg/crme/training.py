"""Adversarial training of the generator against the patch discriminator.

One update consumes a group of chunks: the discriminator gradient is
accumulated over every chunk and applied, then the generator gradient is
accumulated against the (now frozen) discriminator and applied. With
``batch_size=0`` the group is the whole dataset, which is the one-update-per-
epoch form of the algorithm; otherwise every minibatch is its own group.
"""
from __future__ import annotations

from contextlib import contextmanager
import csv
from dataclasses import asdict, dataclass, field, fields
import math
from pathlib import Path
import time
from typing import Iterable, Iterator, Sequence

import numpy as np
import torch
from torch import nn
from torch.utils.data import DataLoader
from tqdm import tqdm

from .config import configure_logging, get_app_home
from .dataset import RecordDataset, SampleRecord
from .errors import ShapeMismatchError, TrainingDivergedError
from .models import Discriminator, Generator, save_params

logger = configure_logging()

PLAIN = "plain"
ADAM = "adam"
FULL_BATCH_CHUNK = 16

Chunk = tuple[torch.Tensor, torch.Tensor]


@dataclass(frozen=True)
class TrainConfig:
    lambda_weight: float = 100.0
    eta_g: float = 2e-4
    eta_d: float = 2e-4
    n_stop: int = 50
    batch_size: int = 16
    optimizer: str = ADAM
    beta1: float = 0.5
    beta2: float = 0.999
    seed: int = 0
    checkpoint_every: int = 10
    rescore_after_d_step: bool = True
    device: str = "cpu"
    num_workers: int = 0

    def __post_init__(self) -> None:
        if self.lambda_weight < 0:
            raise ValueError("lambda_weight must be >= 0")
        if self.eta_g <= 0 or self.eta_d <= 0:
            raise ValueError("step sizes must be > 0")
        if self.n_stop < 0:
            raise ValueError("n_stop must be >= 0")
        if self.batch_size < 0:
            raise ValueError("batch_size must be >= 0 (0 = full batch)")
        if self.optimizer not in (PLAIN, ADAM):
            raise ValueError(f"optimizer must be {PLAIN!r} or {ADAM!r}")
        if self.checkpoint_every < 0:
            raise ValueError("checkpoint_every must be >= 0")


@dataclass
class EpochRow:
    epoch: int
    loss_g: float
    loss_d: float
    pixel_l2: float
    lambda_term: float
    seconds: float
    lr_g: float
    lr_d: float
    d_updates: int
    g_updates: int
    val_nmse: float | None = None


@dataclass
class TrainLog:
    optimizer: str = ADAM
    rows: list[EpochRow] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.rows)

    def write_csv(self, path: Path) -> Path:
        path.parent.mkdir(parents=True, exist_ok=True)
        names = [f.name for f in fields(EpochRow)] + ["optimizer"]
        with path.open("w", encoding="utf-8", newline="") as handle:
            writer = csv.DictWriter(handle, fieldnames=names)
            writer.writeheader()
            for row in self.rows:
                writer.writerow({**asdict(row), "optimizer": self.optimizer})
        return path


@dataclass
class _Totals:
    loss_g: float = 0.0
    loss_d: float = 0.0
    pixel_l2: float = 0.0
    d_updates: int = 0
    g_updates: int = 0


def _as_tensor(value: torch.Tensor | np.ndarray | float) -> torch.Tensor:
    if isinstance(value, torch.Tensor):
        return value
    return torch.as_tensor(np.asarray(value, dtype=np.float64))


def loss_discriminator(s_real: torch.Tensor, s_fake: torch.Tensor) -> torch.Tensor:
    """``||1 - S||^2 + ||0 - S_fake||^2`` summed over every element."""
    s_real, s_fake = _as_tensor(s_real), _as_tensor(s_fake)
    if s_real.shape != s_fake.shape:
        raise ShapeMismatchError(f"score maps differ: {tuple(s_real.shape)} vs {tuple(s_fake.shape)}")
    return ((1.0 - s_real) ** 2).sum() + (s_fake**2).sum()


def pixel_distance(p: torch.Tensor, p_fake: torch.Tensor) -> torch.Tensor:
    p, p_fake = _as_tensor(p), _as_tensor(p_fake)
    if p.shape != p_fake.shape:
        raise ShapeMismatchError(f"maps differ: {tuple(p.shape)} vs {tuple(p_fake.shape)}")
    return ((p - p_fake) ** 2).sum()


def loss_generator(
    s_fake: torch.Tensor,
    p: torch.Tensor,
    p_fake: torch.Tensor,
    lambda_weight: float,
) -> torch.Tensor:
    """``||1 - S_fake||^2 + lambda * ||P - P_fake||^2``."""
    if lambda_weight < 0:
        raise ValueError("lambda_weight must be >= 0")
    s_fake = _as_tensor(s_fake)
    return ((1.0 - s_fake) ** 2).sum() + lambda_weight * pixel_distance(p, p_fake)


@contextmanager
def frozen(module: nn.Module) -> Iterator[nn.Module]:
    previous = [p.requires_grad for p in module.parameters()]
    module.requires_grad_(False)
    try:
        yield module
    finally:
        for param, flag in zip(module.parameters(), previous):
            param.requires_grad_(flag)


def _check_finite(value: float, what: str) -> None:
    if not math.isfinite(value):
        raise TrainingDivergedError(f"non-finite {what} ({value})")


def discriminator_step(
    gen: Generator,
    disc: Discriminator,
    opt_d: torch.optim.Optimizer,
    chunks: Sequence[Chunk],
) -> float:
    """Accumulate L_D over ``chunks`` with the generator frozen, then step once."""
    opt_d.zero_grad(set_to_none=True)
    total = 0.0
    for x, p in chunks:
        with torch.no_grad():
            p_fake = gen(x)
        loss = loss_discriminator(disc(x, p), disc(x, p_fake))
        loss.backward()
        total += float(loss.detach())
    _check_finite(total, "discriminator loss")
    opt_d.step()
    return total


def generator_step(
    gen: Generator,
    disc: Discriminator,
    opt_g: torch.optim.Optimizer,
    chunks: Sequence[Chunk],
    lambda_weight: float,
) -> tuple[float, float]:
    """Accumulate L_G over ``chunks`` against a frozen discriminator, then step once.

    Returns (L_G, unweighted pixel distance).
    """
    opt_g.zero_grad(set_to_none=True)
    total = 0.0
    pixel_total = 0.0
    with frozen(disc):
        for x, p in chunks:
            p_fake = gen(x)
            pixel = pixel_distance(p, p_fake)
            loss = ((1.0 - disc(x, p_fake)) ** 2).sum() + lambda_weight * pixel
            loss.backward()
            total += float(loss.detach())
            pixel_total += float(pixel.detach())
    _check_finite(total, "generator loss")
    opt_g.step()
    return total, pixel_total


def _literal_update(
    gen: Generator,
    disc: Discriminator,
    opt_g: torch.optim.Optimizer,
    opt_d: torch.optim.Optimizer,
    chunks: Sequence[Chunk],
    lambda_weight: float,
) -> tuple[float, float, float]:
    # Both gradients come from the same forward pass and the pre-update discriminator.
    opt_d.zero_grad(set_to_none=True)
    opt_g.zero_grad(set_to_none=True)
    loss_d_total = loss_g_total = pixel_total = 0.0
    for x, p in chunks:
        p_fake = gen(x)
        loss_d = loss_discriminator(disc(x, p), disc(x, p_fake.detach()))
        loss_d.backward()
        with frozen(disc):
            pixel = pixel_distance(p, p_fake)
            loss_g = ((1.0 - disc(x, p_fake)) ** 2).sum() + lambda_weight * pixel
            loss_g.backward()
        loss_d_total += float(loss_d.detach())
        loss_g_total += float(loss_g.detach())
        pixel_total += float(pixel.detach())
    _check_finite(loss_d_total, "discriminator loss")
    _check_finite(loss_g_total, "generator loss")
    opt_d.step()
    opt_g.step()
    return loss_d_total, loss_g_total, pixel_total


def l2_step(
    gen: Generator,
    opt_g: torch.optim.Optimizer,
    chunks: Sequence[Chunk],
    lambda_weight: float,
) -> float:
    opt_g.zero_grad(set_to_none=True)
    pixel_total = 0.0
    for x, p in chunks:
        pixel = pixel_distance(p, gen(x))
        (lambda_weight * pixel).backward()
        pixel_total += float(pixel.detach())
    _check_finite(pixel_total, "pixel loss")
    opt_g.step()
    return pixel_total


def make_optimizer(module: nn.Module, lr: float, config: TrainConfig) -> torch.optim.Optimizer:
    if config.optimizer == PLAIN:
        return torch.optim.SGD(module.parameters(), lr=lr)
    return torch.optim.Adam(module.parameters(), lr=lr, betas=(config.beta1, config.beta2))


def resolve_device(name: str) -> torch.device:
    if name == "auto":
        return torch.device("cuda" if torch.cuda.is_available() else "cpu")
    return torch.device(name)


def make_loader(records: Sequence[SampleRecord], config: TrainConfig) -> DataLoader:
    batch = config.batch_size or FULL_BATCH_CHUNK
    kwargs = {}
    if config.num_workers > 0:
        kwargs["prefetch_factor"] = 2
    return DataLoader(
        RecordDataset(records),
        batch_size=batch,
        shuffle=True,
        generator=torch.Generator().manual_seed(config.seed),
        num_workers=config.num_workers,
        **kwargs,
    )


def _update_groups(loader: DataLoader, full_batch: bool, device: torch.device) -> Iterator[list[Chunk]]:
    chunks = ((x.to(device), p.to(device)) for x, p in loader)
    if full_batch:
        yield list(chunks)
        return
    for chunk in chunks:
        yield [chunk]


def validation_nmse(gen: Generator, records: Sequence[SampleRecord], device: torch.device) -> float:
    from .evaluation import nmse

    was_training = gen.training
    gen.eval()
    scores = []
    with torch.no_grad():
        for record in records:
            x = torch.from_numpy(np.ascontiguousarray(record.input_image, dtype=np.float32)).unsqueeze(0)
            estimate = gen(x.to(device))[0, 0].double().cpu().numpy()
            scores.append(nmse(estimate, record.label.grid))
    gen.train(was_training)
    return float(np.mean(scores))


def save_checkpoint(out_dir: Path, gen: Generator, disc: Discriminator | None, tag: str) -> Path:
    target = out_dir / "checkpoints" / tag
    save_params(gen, target / "generator.pt")
    if disc is not None:
        save_params(disc, target / "discriminator.pt")
    return target


def _run(
    records: Sequence[SampleRecord],
    gen: Generator,
    disc: Discriminator | None,
    config: TrainConfig,
    out_dir: Path | None,
    validation: Sequence[SampleRecord] | None,
) -> TrainLog:
    if not records:
        raise ValueError("training needs at least one record")
    torch.manual_seed(config.seed)
    device = resolve_device(config.device)
    gen.to(device)
    opt_g = make_optimizer(gen, config.eta_g, config)
    opt_d = None
    if disc is not None:
        disc.to(device)
        opt_d = make_optimizer(disc, config.eta_d, config)
    loader = make_loader(records, config)
    log = TrainLog(optimizer=config.optimizer)
    lam = config.lambda_weight

    epochs = tqdm(range(config.n_stop), desc="train", unit="epoch", disable=None)
    for epoch in epochs:
        gen.train()
        if disc is not None:
            disc.train()
        start = time.perf_counter()
        totals = _Totals()
        try:
            for group in _update_groups(loader, config.batch_size == 0, device):
                if disc is None:
                    pixel = l2_step(gen, opt_g, group, lam)
                    totals.loss_g += lam * pixel
                    totals.pixel_l2 += pixel
                    totals.g_updates += 1
                    continue
                if config.rescore_after_d_step:
                    loss_d = discriminator_step(gen, disc, opt_d, group)
                    loss_g, pixel = generator_step(gen, disc, opt_g, group, lam)
                else:
                    loss_d, loss_g, pixel = _literal_update(gen, disc, opt_g, opt_d, group, lam)
                totals.loss_d += loss_d
                totals.loss_g += loss_g
                totals.pixel_l2 += pixel
                totals.d_updates += 1
                totals.g_updates += 1
        except TrainingDivergedError as exc:
            target = save_checkpoint(out_dir or get_app_home(), gen, disc, "diverged")
            logger.error("training diverged at epoch %d: %s", epoch + 1, exc)
            raise TrainingDivergedError(f"epoch {epoch + 1}: {exc}", target) from exc

        row = EpochRow(
            epoch=epoch + 1,
            loss_g=totals.loss_g,
            loss_d=totals.loss_d,
            pixel_l2=totals.pixel_l2,
            lambda_term=lam * totals.pixel_l2,
            seconds=time.perf_counter() - start,
            lr_g=config.eta_g,
            lr_d=config.eta_d if disc is not None else 0.0,
            d_updates=totals.d_updates,
            g_updates=totals.g_updates,
        )
        if validation:
            row.val_nmse = validation_nmse(gen, validation, device)
        log.rows.append(row)
        logger.info(
            "epoch %d: L_G=%.6g L_D=%.6g pixel=%.6g val_nmse=%s",
            row.epoch,
            row.loss_g,
            row.loss_d,
            row.pixel_l2,
            row.val_nmse,
        )
        if out_dir is not None and config.checkpoint_every and row.epoch % config.checkpoint_every == 0:
            save_checkpoint(out_dir, gen, disc, f"epoch_{row.epoch:04d}")
    return log


def train(
    dataset: Iterable[SampleRecord],
    gen_params: Generator,
    disc_params: Discriminator,
    config: TrainConfig,
    *,
    out_dir: Path | None = None,
    validation: Sequence[SampleRecord] | None = None,
) -> tuple[Generator, Discriminator, TrainLog]:
    log = _run(list(dataset), gen_params, disc_params, config, out_dir, validation)
    return gen_params, disc_params, log


def train_l2_only(
    dataset: Iterable[SampleRecord],
    gen_params: Generator,
    config: TrainConfig,
    *,
    out_dir: Path | None = None,
    validation: Sequence[SampleRecord] | None = None,
) -> tuple[Generator, TrainLog]:
    log = _run(list(dataset), gen_params, None, config, out_dir, validation)
    return gen_params, log
