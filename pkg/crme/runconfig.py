from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

from .citygen import CityParams
from .config import apply_overrides, config_to_dict, dataclass_from_dict, load_json_config, overridable_keys
from .dataset import DatasetConfig, DatasetRecipe, GrayCodec
from .evaluation import EvalConfig
from .models import DiscriminatorSpec, GeneratorSpec
from .propagation import PropagationParams
from .training import TrainConfig
from .utils import config_hash, derive_seed


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    out_dir: str = "runs"
    propagation: PropagationParams = field(default_factory=PropagationParams)
    city: CityParams = field(default_factory=CityParams)
    codec: GrayCodec = field(default_factory=GrayCodec)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    generator_spec: GeneratorSpec = field(default_factory=GeneratorSpec)
    discriminator_spec: DiscriminatorSpec = field(default_factory=DiscriminatorSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def recipe(self) -> DatasetRecipe:
        return DatasetRecipe(
            dataset=self.dataset,
            city=self.city,
            propagation=self.propagation,
            codec=self.codec,
            seed=self.seed,
        )

    def seeded_train(self) -> TrainConfig:
        # train.seed picks a stream under the run seed
        return replace(self.train, seed=derive_seed(self.seed, "train", self.train.seed))

    def init_seed(self, kind: str) -> int:
        return derive_seed(self.seed, "init", kind)

    def to_dict(self) -> dict[str, Any]:
        return config_to_dict(self)

    def digest(self, *extra: Any) -> str:
        return config_hash({"config": self.to_dict(), "extra": [str(item) for item in extra]})


def load_run_config(
    path: Path | None = None,
    overrides: list[str] | None = None,
    seed: int | None = None,
) -> RunConfig:
    data = load_json_config(path) if path is not None else {}
    if overrides:
        data = apply_overrides(data, overrides)
    if seed is not None:
        data = {**data, "seed": seed}
    return dataclass_from_dict(RunConfig, data)


def help_epilog() -> str:
    lines = ["config keys (override with --set key=value):"]
    lines.extend(f"  {key}" for key in overridable_keys(RunConfig()))
    return "\n".join(lines)
