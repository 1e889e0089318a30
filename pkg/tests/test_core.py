from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image
import pytest

from crme.core import (
    DB,
    GRAY,
    LINEAR,
    Building,
    GeoMap,
    NoiseMap,
    RadioMap,
    RssField,
    Transmitter,
    TransmitterField,
    db_to_linear,
    dbm_to_watts,
    linear_to_db,
    read_gray_png,
    read_image_png,
    watts_to_dbm,
    write_gray_png,
)
from crme.errors import DomainMismatchError, ImageFormatError, OutOfBoundsError, ShapeMismatchError


def test_linear_to_db_examples() -> None:
    grid = np.array([[1e-3, 0.1], [0.0, 1.0]])
    result = linear_to_db(RadioMap(grid, LINEAR))
    assert result.domain == DB
    assert result.grid[0, 0] == pytest.approx(0.0, abs=1e-12)
    assert result.grid[0, 1] == pytest.approx(20.0, abs=1e-12)
    assert result.grid[1, 0] == -150.0
    assert result.grid[1, 1] == pytest.approx(30.0, abs=1e-12)


def test_db_to_linear_examples_and_round_trip() -> None:
    back = db_to_linear(RadioMap(np.array([[0.0, 30.0]]), DB))
    assert back.grid[0, 0] == pytest.approx(1e-3, rel=1e-12)
    assert back.grid[0, 1] == pytest.approx(1.0, rel=1e-12)
    original = RadioMap(np.array([[7.3e-3]]), LINEAR)
    round_trip = db_to_linear(linear_to_db(original))
    assert round_trip.grid[0, 0] == pytest.approx(7.3e-3, rel=1e-9)


def test_domain_conversions_reject_wrong_domain() -> None:
    with pytest.raises(DomainMismatchError):
        linear_to_db(RadioMap(np.zeros((2, 2)), DB))
    with pytest.raises(DomainMismatchError):
        db_to_linear(RadioMap(np.zeros((2, 2)), GRAY))


def test_scalar_helpers() -> None:
    assert dbm_to_watts(30.0) == pytest.approx(1.0)
    assert watts_to_dbm(0.0) == -150.0
    assert watts_to_dbm(1e-30, floor_dbm=-120.0) == -120.0


def test_radio_map_validates_values() -> None:
    with pytest.raises(ValueError):
        RadioMap(np.array([[1.5]]), GRAY)
    with pytest.raises(ValueError):
        RadioMap(np.array([[-1.0]]), LINEAR)
    with pytest.raises(ShapeMismatchError):
        RadioMap(np.zeros(4), DB)
    radio_map = RadioMap(np.zeros((2, 3)), GRAY)
    assert radio_map.shape == (2, 3)
    assert not radio_map.grid.flags.writeable


def test_geo_map_requires_matching_footprints() -> None:
    occupancy = np.zeros((4, 4), dtype=np.uint8)
    occupancy[1, 1] = 1
    with pytest.raises(ValueError):
        GeoMap(occupancy, ())
    with pytest.raises(ValueError):
        GeoMap(occupancy, (Building(1, ((1, 1),)), Building(2, ((1, 1),))))
    with pytest.raises(OutOfBoundsError):
        GeoMap.from_buildings((4, 4), [Building(1, ((4, 0),))])
    with pytest.raises(OutOfBoundsError):
        GeoMap.from_buildings((4, 4), [Building(1, ((-1, 2),))])
    with pytest.raises(OutOfBoundsError):
        GeoMap.from_buildings((4, 4), [Building(1, ((0, 7),))])


def test_geo_map_from_occupancy_labels_components() -> None:
    grid = np.zeros((6, 6), dtype=np.uint8)
    grid[0:2, 0:2] = 1
    grid[4, 3:6] = 1
    geo = GeoMap.from_occupancy(grid)
    assert geo.building_ids == [1, 2]
    assert len(geo.building(1).cells) == 4
    assert len(geo.building(2).cells) == 3
    assert len(geo.free_cells()) == 36 - 7


def test_geo_map_without_removes_footprints() -> None:
    geo = GeoMap.from_buildings((5, 5), [Building(1, ((0, 0), (0, 1))), Building(2, ((3, 3),))])
    reduced = geo.without([1])
    assert reduced.building_ids == [2]
    assert reduced.occupancy.sum() == 1
    with pytest.raises(KeyError):
        geo.without([9])


def test_transmitter_field_validation() -> None:
    with pytest.raises(ValueError):
        TransmitterField((4, 4), (Transmitter(0, 0, 0.0),))
    with pytest.raises(OutOfBoundsError):
        TransmitterField((4, 4), (Transmitter(4, 0, 1.0),))
    with pytest.raises(ValueError):
        TransmitterField((4, 4), (Transmitter(1, 1, 1.0), Transmitter(1, 1, 2.0)))
    field = TransmitterField((4, 4), (Transmitter(1, 2, 0.5),))
    assert field.grid[1, 2] == 0.5
    assert field.grid.sum() == 0.5


def test_transmitter_field_rotation_matches_rot90() -> None:
    field = TransmitterField((3, 5), (Transmitter(0, 1, 1.0), Transmitter(2, 4, 2.0)))
    for k in range(4):
        rotated = field.rotated(k)
        np.testing.assert_array_equal(rotated.grid, np.rot90(field.grid, k))


def test_rss_field_is_zero_off_samples() -> None:
    source = RadioMap(np.full((3, 3), 0.4), GRAY)
    rss = RssField.from_map(source, [(0, 0), (2, 1), (0, 0)])
    assert rss.sample_locations == ((0, 0), (2, 1))
    assert np.count_nonzero(rss.grid) == 2
    assert rss.mask.sum() == 2
    with pytest.raises(OutOfBoundsError):
        RssField.from_map(source, [(3, 0)])


def test_noise_map_constant() -> None:
    noise = NoiseMap.constant((2, 2), -120.0)
    assert noise.grid[0, 0] == pytest.approx(1e-15)


def test_gray_png_examples(tmp_path: Path) -> None:
    zeros = tmp_path / "zeros.png"
    write_gray_png(RadioMap(np.zeros((4, 4)), GRAY), zeros)
    with Image.open(zeros) as image:
        assert image.mode == "L"
        assert np.asarray(image).max() == 0

    ones = tmp_path / "ones.png"
    write_gray_png(RadioMap(np.ones((4, 4)), GRAY), ones)
    with Image.open(ones) as image:
        assert np.asarray(image).min() == 255

    half = tmp_path / "half.png"
    write_gray_png(RadioMap(np.full((2, 3), 0.5), GRAY), half)
    with Image.open(half) as image:
        assert np.asarray(image)[0, 0] == 128
    loaded = read_gray_png(half)
    assert loaded.shape == (2, 3)
    assert loaded.grid[0, 0] == 128 / 255


def test_gray_png_round_trip_on_levels(tmp_path: Path) -> None:
    levels = np.arange(256, dtype=np.float64).reshape(16, 16) / 255.0
    path = tmp_path / "levels.png"
    write_gray_png(RadioMap(levels, GRAY), path)
    np.testing.assert_array_equal(read_gray_png(path).grid, levels)


def test_read_image_rejects_color_png(tmp_path: Path) -> None:
    path = tmp_path / "rgb.png"
    Image.new("RGB", (4, 4)).save(path)
    with pytest.raises(ImageFormatError):
        read_image_png(path)
    garbage = tmp_path / "garbage.png"
    garbage.write_bytes(b"not a png")
    with pytest.raises(ImageFormatError):
        read_image_png(garbage)
