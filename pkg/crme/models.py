"""Generator (UNet) and discriminator (patch CNN) of the conditional GAN."""
from __future__ import annotations

from dataclasses import asdict, dataclass
import math
import pickle
from pathlib import Path
from typing import Any

import torch
from torch import nn
import torch.nn.functional as F

from .config import configure_logging
from .errors import ParamsMismatchError, ShapeMismatchError
from .utils import atomic_write, dump_json

logger = configure_logging()

PARAMS_FORMAT = "crme-params"
PARAMS_VERSION = 1


@dataclass(frozen=True)
class GeneratorSpec:
    depth: int = 4
    base_channels: int = 64
    max_channels: int = 512
    kernel_size: int = 3
    in_channels: int = 2
    leaky_slope: float = 0.2

    def __post_init__(self) -> None:
        if self.depth < 1:
            raise ValueError("generator depth must be >= 1")
        if self.base_channels < 1 or self.max_channels < self.base_channels:
            raise ValueError("need 1 <= base_channels <= max_channels")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError("generator kernel_size must be odd")

    def stage_channels(self) -> list[int]:
        return [min(self.base_channels * 2**i, self.max_channels) for i in range(self.depth)]

    @property
    def learned_layers(self) -> int:
        return 4 * self.depth + 1


@dataclass(frozen=True)
class DiscriminatorSpec:
    layers: int = 5
    base_channels: int = 64
    max_channels: int = 512
    kernel_size: int = 4
    strided_layers: int | None = None
    in_channels: int = 3
    late_concat: int = 2
    leaky_slope: float = 0.2

    def __post_init__(self) -> None:
        if self.layers < 1:
            raise ValueError("discriminator needs at least one layer")
        if self.base_channels < 1 or self.max_channels < self.base_channels:
            raise ValueError("need 1 <= base_channels <= max_channels")
        if self.strided_layers is not None and not 0 <= self.strided_layers <= self.layers:
            raise ValueError("strided_layers must lie in [0, layers]")
        if self.late_concat < 0:
            raise ValueError("late_concat must be >= 0")

    @property
    def effective_strided_layers(self) -> int:
        if self.strided_layers is not None:
            return self.strided_layers
        return max(self.layers - 2, 0)

    @property
    def min_input_size(self) -> int:
        """Smallest side length that still yields a 1x1 score map."""
        size = 1
        for i in reversed(range(self.layers)):
            stride = 2 if i < self.effective_strided_layers else 1
            size = max((size - 1) * stride + self.kernel_size - 2, 1)
        return size

    def takes_raw_input(self, index: int) -> bool:
        return index > 0 and index >= self.layers - self.late_concat


class EncoderStage(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, slope: float) -> None:
        super().__init__()
        pad = kernel_size // 2
        self.conv = nn.Conv2d(in_channels, out_channels, kernel_size, padding=pad)
        self.down = nn.Conv2d(out_channels, out_channels, kernel_size, stride=2, padding=pad)
        self.slope = slope

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        skip = F.leaky_relu(self.conv(x), self.slope)
        return F.leaky_relu(self.down(skip), self.slope), skip


class DecoderStage(nn.Module):
    def __init__(self, in_channels: int, skip_channels: int, out_channels: int, kernel_size: int) -> None:
        super().__init__()
        self.up = nn.ConvTranspose2d(in_channels, skip_channels, kernel_size=2, stride=2)
        self.conv = nn.Conv2d(2 * skip_channels, out_channels, kernel_size, padding=kernel_size // 2)

    def forward(self, x: torch.Tensor, skip: torch.Tensor) -> torch.Tensor:
        x = F.relu(self.up(x))
        return self.conv(torch.cat([skip, x], dim=1))


class Generator(nn.Module):
    """UNet: ``depth`` encoder stages, a bottleneck, ``depth`` decoder stages.

    The last decoder convolution is the output layer (one channel, sigmoid),
    so the network has ``4 * depth + 1`` learned layers.
    """

    kind = "generator"

    def __init__(self, spec: GeneratorSpec) -> None:
        super().__init__()
        self.spec = spec
        channels = spec.stage_channels()
        self.encoders = nn.ModuleList()
        in_ch = spec.in_channels
        for ch in channels:
            self.encoders.append(EncoderStage(in_ch, ch, spec.kernel_size, spec.leaky_slope))
            in_ch = ch
        self.bottleneck = nn.Conv2d(in_ch, in_ch, spec.kernel_size, padding=spec.kernel_size // 2)
        self.decoders = nn.ModuleList()
        for i in reversed(range(spec.depth)):
            out_ch = 1 if i == 0 else channels[i - 1]
            self.decoders.append(DecoderStage(in_ch, channels[i], out_ch, spec.kernel_size))
            in_ch = out_ch

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        check_generator_input(x, self.spec)
        skips = []
        h = x
        for encoder in self.encoders:
            h, skip = encoder(h)
            skips.append(skip)
        h = F.relu(self.bottleneck(h))
        for index, (decoder, skip) in enumerate(zip(self.decoders, reversed(skips))):
            h = decoder(h, skip)
            if index < len(self.decoders) - 1:
                h = F.relu(h)
        return torch.sigmoid(h)


class Discriminator(nn.Module):
    """Patch discriminator scoring (input image, candidate map) pairs.

    The raw 3-channel pair is average-pooled to the working resolution and
    concatenated into the inputs of the last ``late_concat`` layers.
    """

    kind = "discriminator"

    def __init__(self, spec: DiscriminatorSpec) -> None:
        super().__init__()
        self.spec = spec
        self.convs = nn.ModuleList()
        in_ch = spec.in_channels
        for i in range(spec.layers):
            last = i == spec.layers - 1
            out_ch = 1 if last else min(spec.base_channels * 2**i, spec.max_channels)
            stride = 2 if i < spec.effective_strided_layers else 1
            extra = spec.in_channels if spec.takes_raw_input(i) else 0
            self.convs.append(nn.Conv2d(in_ch + extra, out_ch, spec.kernel_size, stride=stride, padding=1))
            in_ch = out_ch

    def forward(self, x: torch.Tensor, candidate: torch.Tensor) -> torch.Tensor:
        check_discriminator_input(x, candidate, self.spec)
        raw = torch.cat([x, candidate], dim=1)
        h = raw
        for i, conv in enumerate(self.convs):
            if self.spec.takes_raw_input(i):
                h = torch.cat([h, F.adaptive_avg_pool2d(raw, h.shape[-2:])], dim=1)
            h = conv(h)
            if i < len(self.convs) - 1:
                h = F.leaky_relu(h, self.spec.leaky_slope)
        return torch.sigmoid(h)


ModelParams = Generator | Discriminator


def check_generator_input(x: torch.Tensor, spec: GeneratorSpec) -> None:
    if x.ndim != 4 or x.shape[1] != spec.in_channels:
        raise ShapeMismatchError(f"generator expects (N, {spec.in_channels}, H, W), got {tuple(x.shape)}")
    factor = 2**spec.depth
    if x.shape[-2] % factor or x.shape[-1] % factor:
        raise ShapeMismatchError(f"input size {tuple(x.shape[-2:])} must be divisible by {factor}")


def check_discriminator_input(x: torch.Tensor, candidate: torch.Tensor, spec: DiscriminatorSpec) -> None:
    if x.ndim != 4 or candidate.ndim != 4:
        raise ShapeMismatchError("discriminator inputs must be 4-D (N, C, H, W)")
    if x.shape[0] != candidate.shape[0] or x.shape[-2:] != candidate.shape[-2:]:
        raise ShapeMismatchError(f"input {tuple(x.shape)} and candidate {tuple(candidate.shape)} disagree")
    if x.shape[1] + candidate.shape[1] != spec.in_channels:
        raise ShapeMismatchError(f"discriminator expects {spec.in_channels} channels in total")
    if min(x.shape[-2:]) < spec.min_input_size:
        raise ShapeMismatchError(
            f"maps of size {tuple(x.shape[-2:])} are too small for a {spec.layers}-layer discriminator; "
            f"need at least {spec.min_input_size}x{spec.min_input_size}"
        )


def build_input(rss: torch.Tensor, geo: torch.Tensor) -> torch.Tensor:
    """Stack RSS and map channels into the ``(N, 2, H, W)`` generator input."""
    if rss.shape != geo.shape:
        raise ShapeMismatchError(f"rss {tuple(rss.shape)} and map {tuple(geo.shape)} differ")
    if rss.ndim == 2:
        return torch.stack([rss, geo]).unsqueeze(0)
    return torch.stack([rss, geo], dim=1)


def generator_forward(x: torch.Tensor, params: Generator) -> torch.Tensor:
    was_training = params.training
    params.eval()
    try:
        with torch.no_grad():
            return params(x)
    finally:
        params.train(was_training)


def discriminator_forward(x: torch.Tensor, candidate: torch.Tensor, params: Discriminator) -> torch.Tensor:
    was_training = params.training
    params.eval()
    try:
        with torch.no_grad():
            return params(x, candidate)
    finally:
        params.train(was_training)


def count_learned_layers(module: nn.Module) -> int:
    return sum(1 for m in module.modules() if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)))


def param_manifest(module: nn.Module) -> dict[str, list[int]]:
    return {name: list(tensor.shape) for name, tensor in module.state_dict().items()}


def build_model(spec: GeneratorSpec | DiscriminatorSpec) -> ModelParams:
    if isinstance(spec, GeneratorSpec):
        return Generator(spec)
    if isinstance(spec, DiscriminatorSpec):
        return Discriminator(spec)
    raise TypeError(f"unknown network spec {type(spec).__name__}")


def init_params(spec: GeneratorSpec | DiscriminatorSpec, seed: int) -> ModelParams:
    """Seeded fan-in scaled normal weights, zero biases."""
    model = build_model(spec)
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for module in model.modules():
            if isinstance(module, nn.ConvTranspose2d):
                fan_in = module.weight.shape[0] * module.weight.shape[2] * module.weight.shape[3]
            elif isinstance(module, nn.Conv2d):
                fan_in = module.weight[0].numel()
            else:
                continue
            std = math.sqrt(2.0 / fan_in)
            module.weight.copy_(torch.randn(module.weight.shape, generator=gen) * std)
            if module.bias is not None:
                module.bias.zero_()
    return model


def save_params(params: ModelParams, path: Path) -> Path:
    payload = {
        "format": PARAMS_FORMAT,
        "version": PARAMS_VERSION,
        "kind": params.kind,
        "spec": asdict(params.spec),
        "manifest": param_manifest(params),
        "state": {name: t.detach().cpu().clone() for name, t in params.state_dict().items()},
    }
    atomic_write(path, lambda tmp: torch.save(payload, tmp))
    dump_json(path.with_suffix(".json"), {k: payload[k] for k in ("format", "version", "kind", "spec", "manifest")})
    return path


def _spec_from_payload(kind: str, spec: dict[str, Any]) -> GeneratorSpec | DiscriminatorSpec:
    cls = GeneratorSpec if kind == Generator.kind else DiscriminatorSpec
    return cls(**spec)


def load_params(path: Path, spec: GeneratorSpec | DiscriminatorSpec | None = None) -> ModelParams:
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except (OSError, RuntimeError, EOFError, ValueError, pickle.UnpicklingError) as exc:
        raise ParamsMismatchError(f"cannot read parameters from {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != PARAMS_FORMAT:
        raise ParamsMismatchError(f"{path} is not a crme parameter file")
    if payload.get("version") != PARAMS_VERSION:
        raise ParamsMismatchError(f"unsupported parameter version {payload.get('version')!r}")
    kind = payload["kind"]
    if spec is None:
        spec = _spec_from_payload(kind, payload["spec"])
    model = build_model(spec)
    if model.kind != kind:
        raise ParamsMismatchError(f"{path} holds {kind} parameters, not {model.kind}")
    expected = param_manifest(model)
    stored = payload["manifest"]
    problems = sorted(
        name for name in set(expected) | set(stored) if expected.get(name) != stored.get(name)
    )
    if problems:
        detail = ", ".join(f"{n}: file {stored.get(n)} vs spec {expected.get(n)}" for n in problems[:5])
        raise ParamsMismatchError(f"shape mismatch loading {path}: {detail}")
    model.load_state_dict(payload["state"], strict=True)
    return model
