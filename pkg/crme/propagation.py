"""Dominant-path ground-truth simulator.

Pathloss between two cell centres is

    PL = reference_loss_db + 10 * n * log10(max(d, 1 m)) + wall_loss_db * W

where ``W`` is the number of building cells whose closed square the straight
segment touches (a supercover traversal, computed in exact integer
arithmetic). An optional log-normal shadowing field multiplies the resulting
linear gain.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Iterable

import numpy as np
from scipy import ndimage

from .config import configure_logging
from .core import LINEAR, Cell, GeoMap, NoiseMap, RadioMap, RssField, Transmitter, TransmitterField
from .errors import OutOfBoundsError, ShapeMismatchError
from .utils import make_rng

logger = configure_logging()


@dataclass(frozen=True)
class PropagationParams:
    pathloss_exponent: float = 2.5
    reference_loss_db: float = 40.0
    wall_loss_db: float = 10.0
    shadowing_sigma_db: float = 0.0
    shadowing_correlation_length: float = 8.0
    rng_seed: int = 0

    def __post_init__(self) -> None:
        if self.pathloss_exponent <= 0:
            raise ValueError("pathloss_exponent must be > 0")
        if self.wall_loss_db < 0:
            raise ValueError("wall_loss_db must be >= 0")
        if self.shadowing_sigma_db < 0:
            raise ValueError("shadowing_sigma_db must be >= 0")
        if self.shadowing_correlation_length < 0:
            raise ValueError("shadowing_correlation_length must be >= 0")


@lru_cache(maxsize=None)
def _supercover_offsets(dx: int, dy: int) -> np.ndarray:
    if dx < 0:
        mirrored = _supercover_offsets(-dx, dy).copy()
        mirrored[:, 0] *= -1
        mirrored.setflags(write=False)
        return mirrored
    if dx == 0:
        lo, hi = min(0, dy), max(0, dy)
        offsets = np.array([(0, y) for y in range(lo, hi + 1)], dtype=np.intp)
        offsets.setflags(write=False)
        return offsets

    # Work in units of 1 / (2 * dx): y(X) * 2dx = 2X * dy for the segment (0,0)->(dx,dy).
    cells: list[tuple[int, int]] = []
    scale = 2 * dx
    for col in range(dx + 1):
        xa2 = max(2 * col - 1, 0)
        xb2 = min(2 * col + 1, 2 * dx)
        ya, yb = xa2 * dy, xb2 * dy
        lo, hi = min(ya, yb), max(ya, yb)
        y_min = -((dx - lo) // scale)
        y_max = (hi + dx) // scale
        cells.extend((col, y) for y in range(y_min, y_max + 1))
    offsets = np.array(cells, dtype=np.intp)
    offsets.setflags(write=False)
    return offsets


def supercover_cells(a: Cell, b: Cell) -> list[Cell]:
    """Every cell whose closed unit square the segment between centres ``a`` and ``b`` touches."""
    offsets = _supercover_offsets(int(b[0]) - int(a[0]), int(b[1]) - int(a[1]))
    return [(int(a[0] + ox), int(a[1] + oy)) for ox, oy in offsets]


def _check_cell(cell: Cell, geo: GeoMap) -> None:
    if not geo.in_bounds(cell):
        raise OutOfBoundsError(f"cell {tuple(cell)} outside grid {geo.shape}")


def wall_count(tx: Cell, rx: Cell, geo: GeoMap) -> int:
    _check_cell(tx, geo)
    _check_cell(rx, geo)
    offsets = _supercover_offsets(int(rx[0]) - int(tx[0]), int(rx[1]) - int(tx[1]))
    return int(geo.occupancy[tx[0] + offsets[:, 0], tx[1] + offsets[:, 1]].sum())


def wall_count_map(tx: Cell, geo: GeoMap) -> np.ndarray:
    _check_cell(tx, geo)
    occupancy = geo.occupancy
    counts = np.zeros(geo.shape, dtype=np.int64)
    if not occupancy.any():
        return counts
    tx_x, tx_y = int(tx[0]), int(tx[1])
    for x in range(geo.width):
        for y in range(geo.height):
            offsets = _supercover_offsets(x - tx_x, y - tx_y)
            counts[x, y] = occupancy[tx_x + offsets[:, 0], tx_y + offsets[:, 1]].sum()
    return counts


def _distance_m(dx: np.ndarray | int, dy: np.ndarray | int, meters_per_cell: float) -> np.ndarray:
    dx = np.asarray(dx, dtype=np.float64)
    dy = np.asarray(dy, dtype=np.float64)
    return np.sqrt(dx * dx + dy * dy) * meters_per_cell


def pathloss_db(tx: Cell, rx: Cell, geo: GeoMap, params: PropagationParams) -> float:
    _check_cell(tx, geo)
    _check_cell(rx, geo)
    if tuple(tx) == tuple(rx):
        return float(params.reference_loss_db)
    d = _distance_m(rx[0] - tx[0], rx[1] - tx[1], geo.meters_per_cell)
    walls = wall_count(tx, rx, geo)
    return float(
        params.reference_loss_db
        + 10.0 * params.pathloss_exponent * np.log10(max(float(d), 1.0))
        + params.wall_loss_db * walls
    )


def pathloss_map(tx: Cell, geo: GeoMap, params: PropagationParams) -> np.ndarray:
    _check_cell(tx, geo)
    xs, ys = np.indices(geo.shape)
    d = _distance_m(xs - tx[0], ys - tx[1], geo.meters_per_cell)
    loss = params.reference_loss_db + 10.0 * params.pathloss_exponent * np.log10(np.maximum(d, 1.0))
    if params.wall_loss_db > 0:
        loss = loss + params.wall_loss_db * wall_count_map(tx, geo)
    loss[tx[0], tx[1]] = params.reference_loss_db
    return loss


def shadowing_field(shape: tuple[int, int], params: PropagationParams, stream: Cell) -> np.ndarray:
    """Correlated log-normal shadowing in dB for the transmitter at ``stream``."""
    if params.shadowing_sigma_db == 0:
        return np.zeros(shape, dtype=np.float64)
    rng = make_rng(params.rng_seed, "shadowing", int(stream[0]), int(stream[1]))
    white = rng.standard_normal(shape)
    if params.shadowing_correlation_length > 0:
        white = ndimage.gaussian_filter(white, sigma=params.shadowing_correlation_length, mode="wrap")
    std = float(white.std())
    if std == 0:
        return np.zeros(shape, dtype=np.float64)
    return (white - white.mean()) / std * params.shadowing_sigma_db


def gain_map(tx: Cell, geo: GeoMap, params: PropagationParams) -> np.ndarray:
    gain = np.power(10.0, -pathloss_map(tx, geo, params) / 10.0)
    if params.shadowing_sigma_db > 0:
        gain = gain * np.power(10.0, shadowing_field(geo.shape, params, tx) / 10.0)
    return gain


def large_scale_gain(tx: Cell, rx: Cell, geo: GeoMap, params: PropagationParams) -> float:
    """Linear large-scale gain: pathloss times shadowing for one tx/rx pair."""
    gain = float(np.power(10.0, -pathloss_db(tx, rx, geo, params) / 10.0))
    if params.shadowing_sigma_db > 0:
        gain *= float(np.power(10.0, shadowing_field(geo.shape, params, tx)[rx[0], rx[1]] / 10.0))
    return gain


def simulate_radio_map(
    transmitters: TransmitterField,
    geo: GeoMap,
    noise: NoiseMap,
    params: PropagationParams,
) -> RadioMap:
    if tuple(noise.shape) != tuple(geo.shape):
        raise ShapeMismatchError(f"noise map {noise.shape} does not match geo map {geo.shape}")
    transmitters.check_against(geo)
    received = np.zeros(geo.shape, dtype=np.float64)
    for tx in transmitters.tx_list:
        received += tx.power * gain_map((tx.x, tx.y), geo, params)
    if not transmitters.tx_list:
        logger.warning("simulating a %dx%d map with no transmitters: result is the noise map", *geo.shape)
    return RadioMap(received + noise.grid, LINEAR)


def sample_rss(radio_map: RadioMap, locations: Iterable[Cell]) -> RssField:
    return RssField.from_map(radio_map, locations)


def single_transmitter(geo: GeoMap, cell: Cell, power_w: float) -> TransmitterField:
    return TransmitterField(geo.shape, (Transmitter(int(cell[0]), int(cell[1]), float(power_w)),))
