"""Grid types shared by every stage of the pipeline.

All grids are numpy arrays of shape ``(R1, R2)`` indexed ``grid[x, y]`` with
``0 <= x < R1`` and ``0 <= y < R2``. Arrays held by these types are read-only
copies, so instances can be handed to worker processes without locking.
"""
from __future__ import annotations

from dataclasses import dataclass, field
import json
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy import ndimage

from .errors import DomainMismatchError, ImageFormatError, OutOfBoundsError, ShapeMismatchError
from .utils import dump_json

LINEAR = "linear_power"
DB = "db"
GRAY = "gray"
DOMAINS = (LINEAR, DB, GRAY)

DEFAULT_FLOOR_DBM = -150.0

Cell = tuple[int, int]


def _frozen(array: np.ndarray, dtype: Any = None) -> np.ndarray:
    out = np.array(array, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


def dbm_to_watts(dbm: float | np.ndarray) -> float | np.ndarray:
    return np.power(10.0, (np.asarray(dbm, dtype=np.float64) - 30.0) / 10.0)


def watts_to_dbm(watts: float | np.ndarray, floor_dbm: float = DEFAULT_FLOOR_DBM) -> float | np.ndarray:
    values = np.asarray(watts, dtype=np.float64)
    with np.errstate(divide="ignore"):
        dbm = np.where(values > 0, 10.0 * np.log10(np.where(values > 0, values, 1.0)) + 30.0, floor_dbm)
    return np.maximum(dbm, floor_dbm)


@dataclass(frozen=True)
class Building:
    id: int
    cells: tuple[Cell, ...]


@dataclass(frozen=True, eq=False)
class GeoMap:
    occupancy: np.ndarray
    buildings: tuple[Building, ...]
    meters_per_cell: float = 1.0

    def __post_init__(self) -> None:
        occupancy = _frozen(self.occupancy, np.uint8)
        if occupancy.ndim != 2:
            raise ShapeMismatchError(f"occupancy must be 2-D, got shape {occupancy.shape}")
        if not np.isin(occupancy, (0, 1)).all():
            raise ValueError("occupancy cells must be exactly 0 or 1")
        if self.meters_per_cell <= 0:
            raise ValueError("meters_per_cell must be positive")
        owner = np.zeros(occupancy.shape, dtype=bool)
        seen_ids: set[int] = set()
        for building in self.buildings:
            if building.id in seen_ids:
                raise ValueError(f"duplicate building id {building.id}")
            seen_ids.add(building.id)
            for x, y in building.cells:
                if not (0 <= x < occupancy.shape[0] and 0 <= y < occupancy.shape[1]):
                    raise OutOfBoundsError(f"building {building.id} cell {(x, y)} outside grid")
                if owner[x, y]:
                    raise ValueError(f"building footprints overlap at {(x, y)}")
                owner[x, y] = True
        if not np.array_equal(owner, occupancy == 1):
            raise ValueError("building footprints must cover exactly the occupied cells")
        object.__setattr__(self, "occupancy", occupancy)
        object.__setattr__(self, "buildings", tuple(self.buildings))

    @property
    def width(self) -> int:
        return int(self.occupancy.shape[0])

    @property
    def height(self) -> int:
        return int(self.occupancy.shape[1])

    @property
    def shape(self) -> tuple[int, int]:
        return (self.width, self.height)

    @property
    def building_ids(self) -> list[int]:
        return [b.id for b in self.buildings]

    def building(self, building_id: int) -> Building:
        for building in self.buildings:
            if building.id == building_id:
                return building
        raise KeyError(building_id)

    def in_bounds(self, cell: Cell) -> bool:
        return 0 <= cell[0] < self.width and 0 <= cell[1] < self.height

    def free_cells(self) -> np.ndarray:
        """Free cells as an ``(n, 2)`` int array in row-major order."""
        return np.argwhere(self.occupancy == 0)

    def without(self, building_ids: Iterable[int]) -> GeoMap:
        removed = set(building_ids)
        unknown = removed - set(self.building_ids)
        if unknown:
            raise KeyError(f"unknown building ids: {sorted(unknown)}")
        occupancy = np.array(self.occupancy, copy=True)
        kept: list[Building] = []
        for building in self.buildings:
            if building.id in removed:
                for x, y in building.cells:
                    occupancy[x, y] = 0
            else:
                kept.append(building)
        return GeoMap(occupancy=occupancy, buildings=tuple(kept), meters_per_cell=self.meters_per_cell)

    @classmethod
    def empty(cls, width: int, height: int, meters_per_cell: float = 1.0) -> GeoMap:
        return cls(np.zeros((width, height), dtype=np.uint8), (), meters_per_cell)

    @classmethod
    def from_occupancy(cls, grid: np.ndarray, meters_per_cell: float = 1.0) -> GeoMap:
        """Label 4-connected occupied components as buildings, ids in scan order."""
        occupancy = (np.asarray(grid) > 0).astype(np.uint8)
        labels, count = ndimage.label(occupancy)
        buildings = []
        for label in range(1, count + 1):
            cells = tuple((int(x), int(y)) for x, y in np.argwhere(labels == label))
            buildings.append(Building(id=label, cells=cells))
        return cls(occupancy, tuple(buildings), meters_per_cell)

    @classmethod
    def from_buildings(
        cls,
        shape: tuple[int, int],
        footprints: Sequence[Building],
        meters_per_cell: float = 1.0,
    ) -> GeoMap:
        occupancy = np.zeros(shape, dtype=np.uint8)
        for building in footprints:
            for x, y in building.cells:
                if not (0 <= x < shape[0] and 0 <= y < shape[1]):
                    raise OutOfBoundsError(f"building {building.id} cell {(x, y)} outside grid {tuple(shape)}")
                occupancy[x, y] = 1
        return cls(occupancy, tuple(footprints), meters_per_cell)


@dataclass(frozen=True)
class Transmitter:
    x: int
    y: int
    power: float


@dataclass(frozen=True, eq=False)
class TransmitterField:
    shape: tuple[int, int]
    tx_list: tuple[Transmitter, ...] = ()

    def __post_init__(self) -> None:
        cells: set[Cell] = set()
        for tx in self.tx_list:
            if tx.power <= 0:
                raise ValueError(f"transmit power must be positive, got {tx.power}")
            if not (0 <= tx.x < self.shape[0] and 0 <= tx.y < self.shape[1]):
                raise OutOfBoundsError(f"transmitter {(tx.x, tx.y)} outside grid {self.shape}")
            if (tx.x, tx.y) in cells:
                raise ValueError(f"two transmitters share cell {(tx.x, tx.y)}")
            cells.add((tx.x, tx.y))
        object.__setattr__(self, "shape", tuple(self.shape))
        object.__setattr__(self, "tx_list", tuple(self.tx_list))

    @property
    def grid(self) -> np.ndarray:
        grid = np.zeros(self.shape, dtype=np.float64)
        for tx in self.tx_list:
            grid[tx.x, tx.y] = tx.power
        grid.setflags(write=False)
        return grid

    def check_against(self, geo: GeoMap) -> None:
        if tuple(geo.shape) != tuple(self.shape):
            raise ShapeMismatchError(f"transmitter grid {self.shape} does not match map {geo.shape}")
        for tx in self.tx_list:
            if geo.occupancy[tx.x, tx.y]:
                raise ValueError(f"transmitter {(tx.x, tx.y)} sits inside a building")

    def rotated(self, k: int = 1) -> TransmitterField:
        """Transmitters of ``np.rot90(grid, k)``."""
        shape = self.shape
        moved = []
        for tx in self.tx_list:
            x, y = tx.x, tx.y
            w, h = shape
            for _ in range(k % 4):
                x, y = h - 1 - y, x
                w, h = h, w
            moved.append(Transmitter(x, y, tx.power))
        new_shape = shape if k % 2 == 0 else (shape[1], shape[0])
        return TransmitterField(new_shape, tuple(moved))


@dataclass(frozen=True, eq=False)
class RadioMap:
    grid: np.ndarray
    domain: str

    def __post_init__(self) -> None:
        if self.domain not in DOMAINS:
            raise ValueError(f"unknown domain {self.domain!r}")
        grid = _frozen(self.grid, np.float64)
        if grid.ndim != 2:
            raise ShapeMismatchError(f"radio map must be 2-D, got shape {grid.shape}")
        if self.domain == GRAY and (grid.min(initial=0.0) < 0.0 or grid.max(initial=0.0) > 1.0):
            raise ValueError("gray-domain values must lie in [0, 1]")
        if self.domain == LINEAR and grid.min(initial=0.0) < 0.0:
            raise ValueError("linear-domain values must be nonnegative")
        object.__setattr__(self, "grid", grid)

    @property
    def shape(self) -> tuple[int, int]:
        return (int(self.grid.shape[0]), int(self.grid.shape[1]))

    def require(self, domain: str) -> None:
        if self.domain != domain:
            raise DomainMismatchError(domain, self.domain)


@dataclass(frozen=True, eq=False)
class RssField:
    grid: np.ndarray
    domain: str
    sample_locations: tuple[Cell, ...] = field(default=())

    def __post_init__(self) -> None:
        grid = _frozen(self.grid, np.float64)
        mask = np.zeros(grid.shape, dtype=bool)
        for x, y in self.sample_locations:
            mask[x, y] = True
        if np.any(grid[~mask] != 0):
            raise ValueError("RSS grid must be zero off the sample locations")
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "sample_locations", tuple((int(x), int(y)) for x, y in self.sample_locations))

    @classmethod
    def from_map(cls, source: RadioMap, locations: Iterable[Cell]) -> RssField:
        cells = sorted({(int(x), int(y)) for x, y in locations})
        width, height = source.shape
        for x, y in cells:
            if not (0 <= x < width and 0 <= y < height):
                raise OutOfBoundsError(f"sample location {(x, y)} outside grid {source.shape}")
        grid = np.zeros(source.shape, dtype=np.float64)
        if cells:
            xs, ys = np.array(cells).T
            grid[xs, ys] = source.grid[xs, ys]
        return cls(grid=grid, domain=source.domain, sample_locations=tuple(cells))

    @property
    def mask(self) -> np.ndarray:
        mask = np.zeros(self.grid.shape, dtype=bool)
        for x, y in self.sample_locations:
            mask[x, y] = True
        return mask


@dataclass(frozen=True, eq=False)
class NoiseMap:
    grid: np.ndarray

    def __post_init__(self) -> None:
        grid = _frozen(self.grid, np.float64)
        if grid.min(initial=0.0) < 0.0:
            raise ValueError("noise power must be nonnegative")
        object.__setattr__(self, "grid", grid)

    @classmethod
    def constant(cls, shape: tuple[int, int], dbm: float) -> NoiseMap:
        return cls(np.full(shape, float(dbm_to_watts(dbm)), dtype=np.float64))

    @property
    def shape(self) -> tuple[int, int]:
        return (int(self.grid.shape[0]), int(self.grid.shape[1]))


def linear_to_db(radio_map: RadioMap, floor_dbm: float = DEFAULT_FLOOR_DBM) -> RadioMap:
    radio_map.require(LINEAR)
    return RadioMap(watts_to_dbm(radio_map.grid, floor_dbm), DB)


def db_to_linear(radio_map: RadioMap) -> RadioMap:
    radio_map.require(DB)
    return RadioMap(dbm_to_watts(radio_map.grid), LINEAR)


def gray_to_pixels(grid: np.ndarray) -> np.ndarray:
    values = np.clip(np.asarray(grid, dtype=np.float64), 0.0, 1.0)
    return np.floor(values * 255.0 + 0.5).astype(np.uint8)


def write_image_png(grid: np.ndarray, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(gray_to_pixels(grid)).save(path, format="PNG")
    return path


def read_image_png(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as image:
            if image.mode != "L":
                raise ImageFormatError(f"{path}: expected 8-bit grayscale PNG, got mode {image.mode}")
            pixels = np.asarray(image, dtype=np.uint8)
    except (UnidentifiedImageError, OSError) as exc:
        raise ImageFormatError(f"{path}: unreadable image ({exc})") from exc
    return pixels.astype(np.float64) / 255.0


def write_gray_png(radio_map: RadioMap, path: Path) -> Path:
    radio_map.require(GRAY)
    return write_image_png(radio_map.grid, path)


def read_gray_png(path: Path) -> RadioMap:
    return RadioMap(read_image_png(path), GRAY)


def write_json_sidecar(path: Path, payload: dict[str, Any]) -> Path:
    return dump_json(path, payload)


def read_json_sidecar(path: Path) -> dict[str, Any]:
    data = json.loads(path.read_text(encoding="utf-8"))
    if not isinstance(data, dict):
        raise ValueError(f"{path}: sidecar must hold a JSON object")
    return data
