"""Standard and Flawed datasets of (RSS + map, radio map) image pairs.

On-disk layout::

    <dir>/manifest.json
    <dir>/records/<id>/input_rss.png
    <dir>/records/<id>/input_map.png
    <dir>/records/<id>/label.png
    <dir>/records/<id>/meta.json
"""
from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Iterator, Sequence

import numpy as np
import torch
from torch.utils.data import Dataset
from tqdm import tqdm

from .citygen import CityParams, random_city, random_transmitters
from .config import config_to_dict, configure_logging
from .core import (
    DB,
    GRAY,
    Building,
    Cell,
    GeoMap,
    NoiseMap,
    RadioMap,
    TransmitterField,
    linear_to_db,
    read_image_png,
    read_json_sidecar,
    write_image_png,
    write_json_sidecar,
)
from .discover import find_radiomapseer_maps
from .errors import ChecksumError, DatasetError, ImageFormatError, IngestionError, InsufficientSamplesError
from .propagation import PropagationParams, sample_rss, simulate_radio_map
from .utils import derive_seed, dump_json, make_rng, sha256_file

logger = configure_logging()

MANIFEST_VERSION = 1
MANIFEST_NAME = "manifest.json"
RECORD_FILES = ("input_rss.png", "input_map.png", "label.png", "meta.json")

SYNTHETIC = "synthetic"
RADIOMAPSEER = "radiomapseer"

FlawSpec = int | tuple[int, int] | None


@dataclass(frozen=True)
class GrayCodec:
    floor_dbm: float = -150.0
    ceiling_dbm: float = -40.0
    levels: int = 256

    def __post_init__(self) -> None:
        if not self.floor_dbm < self.ceiling_dbm:
            raise ValueError("floor_dbm must be below ceiling_dbm")
        if self.levels < 2 or 255 % (self.levels - 1):
            raise ValueError(f"levels must be >= 2 with levels - 1 dividing 255, got {self.levels}")

    def encode(self, dbm: np.ndarray) -> np.ndarray:
        span = self.ceiling_dbm - self.floor_dbm
        unit = (np.clip(np.asarray(dbm, dtype=np.float64), self.floor_dbm, self.ceiling_dbm) - self.floor_dbm) / span
        steps = self.levels - 1
        # quantize onto the 8-bit PNG grid
        return np.clip(np.floor(unit * steps + 0.5) * (255 // steps) / 255.0, 0.0, 1.0)

    def decode(self, gray: np.ndarray) -> np.ndarray:
        span = self.ceiling_dbm - self.floor_dbm
        return self.floor_dbm + np.asarray(gray, dtype=np.float64) * span


@dataclass(frozen=True)
class UserCountDistribution:
    kind: str = "uniform-integer"
    low: int = 18
    high: int = 62

    def __post_init__(self) -> None:
        if self.kind != "uniform-integer":
            raise ValueError(f"unsupported user count distribution {self.kind!r}")
        if not 0 <= self.low <= self.high:
            raise ValueError("user counts need 0 <= low <= high")

    def draw(self, rng: np.random.Generator) -> int:
        return int(rng.integers(self.low, self.high + 1))


@dataclass(frozen=True)
class DatasetConfig:
    num_records: int = 2000
    source: str = SYNTHETIC
    radiomapseer_root: str = ""
    radiomapseer_gain_dir: str = "gain/DPM"
    users: UserCountDistribution = field(default_factory=UserCountDistribution)
    flawed: bool = False
    flaw_remove: tuple[int, int] = (1, 3)
    transmitters: tuple[int, int] = (1, 1)
    tx_power_dbm: float = 23.0
    noise_dbm: float = -120.0
    split: str = "train"

    def __post_init__(self) -> None:
        if self.num_records < 0:
            raise ValueError("num_records must be >= 0")
        if self.source not in (SYNTHETIC, RADIOMAPSEER):
            raise ValueError(f"source must be {SYNTHETIC!r} or {RADIOMAPSEER!r}")
        if self.source == RADIOMAPSEER and not self.radiomapseer_root:
            raise ValueError("radiomapseer_root is required for the radiomapseer source")
        if not 0 <= self.flaw_remove[0] <= self.flaw_remove[1]:
            raise ValueError("flaw_remove must be a (low, high) range")
        if not 0 <= self.transmitters[0] <= self.transmitters[1]:
            raise ValueError("transmitters must be a (low, high) range")

    @property
    def flaw_spec(self) -> FlawSpec:
        return tuple(self.flaw_remove) if self.flawed else None


@dataclass(frozen=True)
class DatasetRecipe:
    """Everything a build needs; picklable so worker processes can share it."""

    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    city: CityParams = field(default_factory=CityParams)
    propagation: PropagationParams = field(default_factory=PropagationParams)
    codec: GrayCodec = field(default_factory=GrayCodec)
    seed: int = 0


@dataclass(frozen=True)
class RecordMeta:
    num_samples: int
    sample_locations: tuple[Cell, ...]
    removed_buildings: tuple[Building, ...] = ()
    seed: int = 0
    source: str = SYNTHETIC
    transmitters: tuple[tuple[int, int, float], ...] = ()
    map_name: str = ""
    gray_encoding: str = "codec"

    @property
    def removed_building_ids(self) -> list[int]:
        return [b.id for b in self.removed_buildings]

    def to_dict(self) -> dict[str, Any]:
        return {
            "num_samples": self.num_samples,
            "sample_locations": [list(cell) for cell in self.sample_locations],
            "removed_building_ids": self.removed_building_ids,
            "removed_buildings": [
                {"id": b.id, "cells": [list(cell) for cell in b.cells]} for b in self.removed_buildings
            ],
            "seed": self.seed,
            "source": self.source,
            "transmitters": [list(tx) for tx in self.transmitters],
            "map_name": self.map_name,
            "gray_encoding": self.gray_encoding,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> RecordMeta:
        try:
            return cls(
                num_samples=int(data["num_samples"]),
                sample_locations=tuple((int(x), int(y)) for x, y in data["sample_locations"]),
                removed_buildings=tuple(
                    Building(int(b["id"]), tuple((int(x), int(y)) for x, y in b["cells"]))
                    for b in data.get("removed_buildings", [])
                ),
                seed=int(data.get("seed", 0)),
                source=str(data.get("source", SYNTHETIC)),
                transmitters=tuple((int(t[0]), int(t[1]), float(t[2])) for t in data.get("transmitters", [])),
                map_name=str(data.get("map_name", "")),
                gray_encoding=str(data.get("gray_encoding", "codec")),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetError(f"malformed record metadata: {exc}") from exc


@dataclass(frozen=True, eq=False)
class SampleRecord:
    record_id: str
    input_image: np.ndarray
    label: RadioMap
    meta: RecordMeta

    def __post_init__(self) -> None:
        image = np.array(self.input_image, dtype=np.float64, copy=True)
        if image.ndim != 3 or image.shape[0] != 2 or image.shape[1:] != self.label.shape:
            raise ValueError(f"input image must be (2, {self.label.shape}), got {image.shape}")
        image.setflags(write=False)
        object.__setattr__(self, "input_image", image)
        self.label.require(GRAY)

    @property
    def shape(self) -> tuple[int, int]:
        return self.label.shape

    @property
    def rss(self) -> np.ndarray:
        return self.input_image[0]

    @property
    def input_map(self) -> np.ndarray:
        return self.input_image[1]

    @property
    def flawed(self) -> bool:
        return bool(self.meta.removed_buildings)

    @property
    def removed_mask(self) -> np.ndarray:
        mask = np.zeros(self.shape, dtype=bool)
        for building in self.meta.removed_buildings:
            for x, y in building.cells:
                mask[x, y] = True
        return mask

    @property
    def ground_truth_occupancy(self) -> np.ndarray:
        return (self.input_map > 0.5) | self.removed_mask

    @property
    def sample_mask(self) -> np.ndarray:
        mask = np.zeros(self.shape, dtype=bool)
        for x, y in self.meta.sample_locations:
            mask[x, y] = True
        return mask


def to_gray(radio_map: RadioMap, codec: GrayCodec) -> RadioMap:
    radio_map.require(DB)
    return RadioMap(codec.encode(radio_map.grid), GRAY)


def from_gray(radio_map: RadioMap, codec: GrayCodec) -> RadioMap:
    radio_map.require(GRAY)
    return RadioMap(codec.decode(radio_map.grid), DB)


def _draw_from_free(free: np.ndarray, k: int, rng: np.random.Generator) -> list[Cell]:
    if len(free) == 0:
        raise InsufficientSamplesError("map has no free cells for users")
    if k > len(free):
        raise InsufficientSamplesError(f"cannot place {k} users on {len(free)} free cells")
    picks = rng.choice(len(free), size=k, replace=False)
    return sorted((int(free[i][0]), int(free[i][1])) for i in picks)


def draw_user_locations(geo: GeoMap, dist: UserCountDistribution, rng: np.random.Generator) -> list[Cell]:
    return _draw_from_free(geo.free_cells(), dist.draw(rng), rng)


def make_flawed_map(geo: GeoMap, n_remove: int | tuple[int, int], rng: np.random.Generator) -> tuple[GeoMap, list[int]]:
    count = len(geo.buildings)
    if isinstance(n_remove, (tuple, list)):
        low, high = int(n_remove[0]), int(n_remove[1])
        if low > count:
            raise ValueError(f"cannot remove at least {low} buildings from a map with {count}")
        n = int(rng.integers(low, min(high, count) + 1))
    else:
        n = int(n_remove)
        if n > count:
            raise ValueError(f"cannot remove {n} buildings from a map with {count}")
    if n < 0:
        raise ValueError("n_remove must be >= 0")
    ids = geo.building_ids
    removed = sorted(int(ids[i]) for i in rng.choice(count, size=n, replace=False)) if n else []
    return geo.without(removed), removed


def _assemble(
    record_id: str,
    label: RadioMap,
    users: Sequence[Cell],
    geo: GeoMap,
    flaw_spec: FlawSpec,
    rng: np.random.Generator,
    **meta: Any,
) -> SampleRecord:
    rss = sample_rss(label, users)
    input_geo, removed_ids = (geo, []) if flaw_spec is None else make_flawed_map(geo, flaw_spec, rng)
    image = np.stack([rss.grid, input_geo.occupancy.astype(np.float64)])
    removed = tuple(geo.building(i) for i in removed_ids)
    record_meta = RecordMeta(
        num_samples=len(rss.sample_locations),
        sample_locations=rss.sample_locations,
        removed_buildings=removed,
        **meta,
    )
    return SampleRecord(record_id=record_id, input_image=image, label=label, meta=record_meta)


def make_sample(
    geo: GeoMap,
    transmitters: TransmitterField,
    noise: NoiseMap,
    params: PropagationParams,
    dist: UserCountDistribution,
    codec: GrayCodec,
    flaw_spec: FlawSpec,
    rng: np.random.Generator,
    *,
    record_id: str = "000000",
    seed: int = 0,
) -> SampleRecord:
    received = simulate_radio_map(transmitters, geo, noise, params)
    label = to_gray(linear_to_db(received, codec.floor_dbm), codec)
    users = draw_user_locations(geo, dist, rng)
    return _assemble(
        record_id,
        label,
        users,
        geo,
        flaw_spec,
        rng,
        seed=seed,
        source=SYNTHETIC,
        transmitters=tuple((tx.x, tx.y, tx.power) for tx in transmitters.tx_list),
    )


def resample_record(record: SampleRecord, k: int, rng: np.random.Generator) -> SampleRecord:
    """Re-draw the RSS channel at ``k`` free ground-truth cells of the label."""
    free = np.argwhere(~record.ground_truth_occupancy)
    users = _draw_from_free(free, k, rng)
    rss = sample_rss(record.label, users)
    image = np.stack([rss.grid, record.input_map])
    meta = replace(record.meta, num_samples=len(users), sample_locations=rss.sample_locations)
    return SampleRecord(record_id=record.record_id, input_image=image, label=record.label, meta=meta)


def synthetic_record(recipe: DatasetRecipe, index: int) -> SampleRecord:
    seed = derive_seed(recipe.seed, "record", index)
    rng = np.random.default_rng(seed)
    cfg = recipe.dataset
    geo = random_city(recipe.city, rng)
    transmitters = random_transmitters(geo, cfg.transmitters, cfg.tx_power_dbm, rng)
    noise = NoiseMap.constant(geo.shape, cfg.noise_dbm)
    return make_sample(
        geo,
        transmitters,
        noise,
        recipe.propagation,
        cfg.users,
        recipe.codec,
        cfg.flaw_spec,
        rng,
        record_id=f"{index:06d}",
        seed=seed,
    )


def ingest_radiomapseer(
    root_path: Path,
    dist: UserCountDistribution,
    codec: GrayCodec,
    rng: np.random.Generator,
    *,
    gain_dir: str = "gain/DPM",
    flaw_spec: FlawSpec = None,
    limit: int | None = None,
) -> Iterator[SampleRecord]:
    """Stream records from the published layout without using transmitter images.

    Gain images are taken as already gray-encoded labels; ``codec`` is not
    applied to them and the choice is recorded as ``gray_encoding="raw"``.
    """
    del codec  # published gains are used raw
    produced = 0
    for entry in find_radiomapseer_maps(root_path, gain_dir=gain_dir):
        if limit is not None and produced >= limit:
            return
        try:
            occupancy = read_image_png(entry.building_path) > 0.5
        except ImageFormatError as exc:
            raise IngestionError(entry.building_path, str(exc)) from exc
        geo = GeoMap.from_occupancy(occupancy)
        for gain_path in entry.gain_paths:
            if limit is not None and produced >= limit:
                return
            try:
                gain = read_image_png(gain_path)
            except ImageFormatError as exc:
                raise IngestionError(gain_path, str(exc)) from exc
            if gain.shape != geo.shape:
                raise IngestionError(gain_path, f"gain image {gain.shape} does not match map {geo.shape}")
            users = draw_user_locations(geo, dist, rng)
            yield _assemble(
                f"{entry.name}_{gain_path.stem.split('_')[-1]}",
                RadioMap(gain, GRAY),
                users,
                geo,
                flaw_spec,
                rng,
                source=RADIOMAPSEER,
                map_name=entry.name,
                gray_encoding="raw",
            )
            produced += 1


def write_record(record: SampleRecord, records_dir: Path) -> dict[str, str]:
    target = records_dir / record.record_id
    target.mkdir(parents=True, exist_ok=True)
    write_image_png(record.rss, target / "input_rss.png")
    write_image_png(record.input_map, target / "input_map.png")
    write_image_png(record.label.grid, target / "label.png")
    write_json_sidecar(target / "meta.json", record.meta.to_dict())
    return {name: sha256_file(target / name) for name in RECORD_FILES}


def read_record(records_dir: Path, record_id: str, checksums: dict[str, str] | None = None) -> SampleRecord:
    target = records_dir / record_id
    if checksums:
        for name in RECORD_FILES:
            path = target / name
            if not path.exists():
                raise DatasetError(f"record {record_id} is missing {name}")
            if sha256_file(path) != checksums.get(name):
                raise ChecksumError(f"checksum mismatch for {path}")
    try:
        rss = read_image_png(target / "input_rss.png")
        input_map = read_image_png(target / "input_map.png")
        label = read_image_png(target / "label.png")
        meta = RecordMeta.from_dict(read_json_sidecar(target / "meta.json"))
    except (OSError, ValueError, ImageFormatError) as exc:
        raise DatasetError(f"cannot read record {record_id}: {exc}") from exc
    return SampleRecord(
        record_id=record_id,
        input_image=np.stack([rss, input_map]),
        label=RadioMap(label, GRAY),
        meta=meta,
    )


def _record_stream(recipe: DatasetRecipe, workers: int) -> Iterator[SampleRecord]:
    cfg = recipe.dataset
    if cfg.source == RADIOMAPSEER:
        yield from ingest_radiomapseer(
            Path(cfg.radiomapseer_root).expanduser(),
            cfg.users,
            recipe.codec,
            make_rng(recipe.seed, "radiomapseer"),
            gain_dir=cfg.radiomapseer_gain_dir,
            flaw_spec=cfg.flaw_spec,
            limit=cfg.num_records or None,
        )
        return
    indices = range(cfg.num_records)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            yield from pool.map(synthetic_record, [recipe] * cfg.num_records, indices, chunksize=8)
        return
    for index in indices:
        yield synthetic_record(recipe, index)


def build_dataset(recipe: DatasetRecipe, out_dir: Path, *, workers: int = 1) -> dict[str, Any]:
    records_dir = out_dir / "records"
    records_dir.mkdir(parents=True, exist_ok=True)
    entries: list[dict[str, Any]] = []
    shape: list[int] | None = None
    stream = _record_stream(recipe, workers)
    for record in tqdm(stream, total=recipe.dataset.num_records or None, desc="build", unit="rec", disable=None):
        checksums = write_record(record, records_dir)
        entries.append({"id": record.record_id, "sha256": checksums})
        if shape is None:
            shape = list(record.shape)
    manifest = {
        "version": MANIFEST_VERSION,
        "count": len(entries),
        "shape": shape,
        "split": recipe.dataset.split,
        "source": recipe.dataset.source,
        "flawed": recipe.dataset.flawed,
        "codec": asdict(recipe.codec),
        "params": {
            "dataset": config_to_dict(recipe.dataset),
            "city": config_to_dict(recipe.city),
            "propagation": config_to_dict(recipe.propagation),
        },
        "seeds": {"root": recipe.seed, "record_seed": "derive_seed(root, 'record', index)"},
        "records": entries,
    }
    dump_json(out_dir / MANIFEST_NAME, manifest)
    logger.info("built %d records under %s", len(entries), out_dir)
    return manifest


def read_manifest(dataset_dir: Path) -> dict[str, Any]:
    path = dataset_dir / MANIFEST_NAME
    if not path.exists():
        raise DatasetError(f"no manifest at {path}")
    try:
        manifest = read_json_sidecar(path)
    except ValueError as exc:
        raise DatasetError(f"unreadable manifest {path}: {exc}") from exc
    if manifest.get("version") != MANIFEST_VERSION:
        raise DatasetError(f"unsupported manifest version {manifest.get('version')!r}")
    records = manifest.get("records")
    if not isinstance(records, list) or manifest.get("count") != len(records):
        raise DatasetError("manifest count does not match its record list")
    return manifest


def codec_from_manifest(manifest: dict[str, Any]) -> GrayCodec:
    return GrayCodec(**manifest["codec"])


def load_dataset(
    dataset_dir: Path,
    *,
    shuffle_seed: int | None = None,
    verify: bool = True,
) -> Iterator[SampleRecord]:
    """Validate ``dataset_dir`` eagerly, then stream its records."""
    manifest = read_manifest(dataset_dir)
    records_dir = dataset_dir / "records"
    on_disk = sorted(p.name for p in records_dir.iterdir() if p.is_dir()) if records_dir.exists() else []
    listed = [entry["id"] for entry in manifest["records"]]
    if len(on_disk) != manifest["count"] or sorted(listed) != on_disk:
        raise DatasetError(
            f"manifest lists {manifest['count']} records but {len(on_disk)} are on disk under {records_dir}"
        )
    order = list(range(len(listed)))
    if shuffle_seed is not None:
        order = [int(i) for i in np.random.default_rng(shuffle_seed).permutation(len(listed))]

    def _stream() -> Iterator[SampleRecord]:
        for i in order:
            entry = manifest["records"][i]
            yield read_record(records_dir, entry["id"], entry["sha256"] if verify else None)

    return _stream()


class RecordDataset(Dataset):
    """Tensor view of records: ``(x[2,H,W], y[1,H,W])`` in float32."""

    def __init__(self, records: Sequence[SampleRecord]) -> None:
        self.records = list(records)

    def __len__(self) -> int:
        return len(self.records)

    def __getitem__(self, index: int) -> tuple[torch.Tensor, torch.Tensor]:
        record = self.records[index]
        x = torch.from_numpy(np.ascontiguousarray(record.input_image, dtype=np.float32))
        y = torch.from_numpy(np.ascontiguousarray(record.label.grid, dtype=np.float32)).unsqueeze(0)
        return x, y
