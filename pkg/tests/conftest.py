from __future__ import annotations

import os
from pathlib import Path
import tempfile

import numpy as np
import pytest

# The package configures its file logger at import time; keep it out of the real home.
os.environ.setdefault("CRME_HOME", tempfile.mkdtemp(prefix="crme-home-"))

from crme.citygen import CityParams  # noqa: E402
from crme.core import GRAY, Building, GeoMap, RadioMap  # noqa: E402
from crme.dataset import (  # noqa: E402
    DatasetConfig,
    DatasetRecipe,
    RecordMeta,
    SampleRecord,
    UserCountDistribution,
    build_dataset,
    load_dataset,
)
from crme.models import DiscriminatorSpec, GeneratorSpec  # noqa: E402
from crme.propagation import PropagationParams  # noqa: E402


def pytest_addoption(parser: pytest.Parser) -> None:
    parser.addoption("--runslow", action="store_true", default=False, help="run desk-scale experiments")


def pytest_collection_modifyitems(config: pytest.Config, items: list[pytest.Item]) -> None:
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(autouse=True)
def crme_home(tmp_path: Path, monkeypatch: pytest.MonkeyPatch) -> Path:
    home = tmp_path / "crme-home"
    monkeypatch.setenv("CRME_HOME", str(home))
    monkeypatch.setenv("CRME_CACHE_DIR", str(home / "cache"))
    return home


@pytest.fixture
def wall_geo() -> GeoMap:
    """8x8 map with a single vertical wall at x=4, y=1..6."""
    wall = Building(id=1, cells=tuple((4, y) for y in range(1, 7)))
    return GeoMap.from_buildings((8, 8), [wall])


@pytest.fixture
def tiny_recipe() -> DatasetRecipe:
    return DatasetRecipe(
        dataset=DatasetConfig(
            num_records=6,
            users=UserCountDistribution(low=4, high=10),
        ),
        city=CityParams(width=16, height=16, buildings=(1, 3), building_side=(2, 4)),
        propagation=PropagationParams(),
        seed=3,
    )


@pytest.fixture
def flawed_recipe(tiny_recipe: DatasetRecipe) -> DatasetRecipe:
    return DatasetRecipe(
        dataset=DatasetConfig(
            num_records=6,
            users=UserCountDistribution(low=4, high=10),
            flawed=True,
            flaw_remove=(1, 1),
        ),
        city=CityParams(width=16, height=16, buildings=(2, 3), building_side=(2, 4)),
        propagation=tiny_recipe.propagation,
        seed=11,
    )


@pytest.fixture
def tiny_dataset(tmp_path: Path, tiny_recipe: DatasetRecipe) -> Path:
    out = tmp_path / "dataset"
    build_dataset(tiny_recipe, out)
    return out


@pytest.fixture
def tiny_records(tiny_dataset: Path) -> list[SampleRecord]:
    return list(load_dataset(tiny_dataset))


@pytest.fixture
def tiny_generator_spec() -> GeneratorSpec:
    return GeneratorSpec(depth=1, base_channels=4, max_channels=8)


@pytest.fixture
def tiny_discriminator_spec() -> DiscriminatorSpec:
    return DiscriminatorSpec(layers=2, base_channels=4, max_channels=8)


def smooth_label(shape: tuple[int, int] = (8, 8)) -> np.ndarray:
    xs, ys = np.meshgrid(np.linspace(0, 1, shape[0]), np.linspace(0, 1, shape[1]), indexing="ij")
    return 0.2 + 0.6 * (0.5 * xs + 0.5 * ys)


def make_record(
    label: np.ndarray,
    samples: list[tuple[int, int]],
    *,
    occupancy: np.ndarray | None = None,
    removed: tuple[Building, ...] = (),
    record_id: str = "000000",
) -> SampleRecord:
    cells = sorted(set(samples))
    rss = np.zeros(label.shape)
    for x, y in cells:
        rss[x, y] = label[x, y]
    input_map = np.zeros(label.shape) if occupancy is None else occupancy.astype(float)
    meta = RecordMeta(num_samples=len(cells), sample_locations=tuple(cells), removed_buildings=removed)
    return SampleRecord(
        record_id=record_id,
        input_image=np.stack([rss, input_map]),
        label=RadioMap(label, GRAY),
        meta=meta,
    )
