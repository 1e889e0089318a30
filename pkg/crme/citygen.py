"""Synthetic city layouts and transmitter placement for the simulator."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import configure_logging
from .core import Building, GeoMap, Transmitter, TransmitterField, dbm_to_watts

logger = configure_logging()

MAX_PLACEMENT_ATTEMPTS = 200


@dataclass(frozen=True)
class CityParams:
    width: int = 64
    height: int = 64
    meters_per_cell: float = 1.0
    buildings: tuple[int, int] = (4, 8)
    building_side: tuple[int, int] = (4, 12)
    street_margin: int = 1

    def __post_init__(self) -> None:
        if self.width <= 0 or self.height <= 0:
            raise ValueError("city width and height must be positive")
        low, high = self.buildings
        if not 0 <= low <= high:
            raise ValueError("buildings must be a (low, high) range with 0 <= low <= high")
        side_low, side_high = self.building_side
        if not 1 <= side_low <= side_high:
            raise ValueError("building_side must be a (low, high) range with 1 <= low <= high")
        if self.street_margin < 0:
            raise ValueError("street_margin must be >= 0")


def random_city(params: CityParams, rng: np.random.Generator) -> GeoMap:
    """Place non-overlapping rectangular buildings separated by streets."""
    target = int(rng.integers(params.buildings[0], params.buildings[1] + 1))
    reserved = np.zeros((params.width, params.height), dtype=bool)
    footprints: list[Building] = []
    margin = params.street_margin
    attempts = 0
    while len(footprints) < target and attempts < MAX_PLACEMENT_ATTEMPTS * max(target, 1):
        attempts += 1
        w = int(rng.integers(params.building_side[0], params.building_side[1] + 1))
        h = int(rng.integers(params.building_side[0], params.building_side[1] + 1))
        if w > params.width or h > params.height:
            continue
        x0 = int(rng.integers(0, params.width - w + 1))
        y0 = int(rng.integers(0, params.height - h + 1))
        lo_x, hi_x = max(x0 - margin, 0), min(x0 + w + margin, params.width)
        lo_y, hi_y = max(y0 - margin, 0), min(y0 + h + margin, params.height)
        if reserved[lo_x:hi_x, lo_y:hi_y].any():
            continue
        reserved[x0 : x0 + w, y0 : y0 + h] = True
        cells = tuple((x, y) for x in range(x0, x0 + w) for y in range(y0, y0 + h))
        footprints.append(Building(id=len(footprints) + 1, cells=cells))
    if len(footprints) < target:
        logger.info("placed %d of %d requested buildings", len(footprints), target)
    return GeoMap.from_buildings((params.width, params.height), footprints, params.meters_per_cell)


def random_transmitters(
    geo: GeoMap,
    count: tuple[int, int],
    power_dbm: float,
    rng: np.random.Generator,
) -> TransmitterField:
    free = geo.free_cells()
    n = int(rng.integers(count[0], count[1] + 1))
    if n > len(free):
        raise ValueError(f"cannot place {n} transmitters on {len(free)} free cells")
    picks = rng.choice(len(free), size=n, replace=False) if n else np.array([], dtype=int)
    power = float(dbm_to_watts(power_dbm))
    tx_list = tuple(Transmitter(int(free[i][0]), int(free[i][1]), power) for i in sorted(picks))
    return TransmitterField(geo.shape, tx_list)
