from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from .config import configure_logging
from .errors import IngestionError

logger = configure_logging()

BUILDINGS_SUBDIR = Path("png") / "buildings_complete"


@dataclass
class MapEntry:
    name: str
    building_path: Path
    gain_paths: list[Path]


def _numeric_key(path: Path) -> tuple[int, tuple[int, ...], str]:
    parts = path.stem.split("_")
    try:
        return (0, tuple(int(p) for p in parts), "")
    except ValueError:
        return (1, (), path.stem)


def find_radiomapseer_maps(root: Path, gain_dir: str = "gain/DPM") -> list[MapEntry]:
    buildings_root = root / BUILDINGS_SUBDIR
    gains_root = root / gain_dir
    if not buildings_root.is_dir():
        raise IngestionError(buildings_root, "building map directory not found")
    if not gains_root.is_dir():
        raise IngestionError(gains_root, "gain image directory not found")

    gains: dict[str, list[Path]] = {}
    for path in gains_root.glob("*_*.png"):
        map_name = path.stem.rsplit("_", 1)[0]
        gains.setdefault(map_name, []).append(path)

    entries: list[MapEntry] = []
    for building_path in sorted(buildings_root.glob("*.png"), key=_numeric_key):
        name = building_path.stem
        gain_paths = sorted(gains.get(name, []), key=_numeric_key)
        if not gain_paths:
            logger.warning("no gain images for map %s under %s", name, gains_root)
            continue
        entries.append(MapEntry(name=name, building_path=building_path, gain_paths=gain_paths))
    return entries
