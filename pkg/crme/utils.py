from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path
from typing import Any, Callable

import numpy as np


def canonical_json(payload: Any) -> str:
    return json.dumps(payload, sort_keys=True, indent=2, ensure_ascii=True, default=str) + "\n"


def dump_json(path: Path, payload: Any) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    atomic_write(path, lambda tmp: tmp.write_text(canonical_json(payload), encoding="utf-8"))
    return path


def config_hash(payload: Any, length: int = 12) -> str:
    digest = hashlib.sha256(canonical_json(payload).encode("utf-8")).hexdigest()
    return digest[:length]


def sha256_file(path: Path) -> str:
    digest = hashlib.sha256()
    with path.open("rb") as handle:
        for chunk in iter(lambda: handle.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def atomic_write(path: Path, writer: Callable[[Path], Any]) -> Path:
    """Write through a sibling temp file, then rename over ``path``."""
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp")
    try:
        writer(tmp)
        os.replace(tmp, path)
    finally:
        if tmp.exists():
            tmp.unlink()
    return path


def _key_entropy(key: int | str) -> int:
    if isinstance(key, (int, np.integer)) and key >= 0:
        return int(key)
    digest = hashlib.sha256(str(key).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def derive_seed(root_seed: int, *keys: int | str) -> int:
    """Deterministic child seed for (root_seed, key, ...), independent of call order."""
    entropy = [_key_entropy(root_seed)] + [_key_entropy(k) for k in keys]
    return int(np.random.SeedSequence(entropy).generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def make_rng(root_seed: int, *keys: int | str) -> np.random.Generator:
    return np.random.default_rng(derive_seed(root_seed, *keys))


def slugify(value: str, fallback: str = "item") -> str:
    if not value:
        return fallback
    output: list[str] = []
    last_dash = False
    for ch in value.strip():
        if ch.isascii() and (ch.isalnum() or ch in ("-", "_")):
            output.append(ch)
            last_dash = False
            continue
        if ch.isspace() or ch in (".", "/"):
            if not last_dash:
                output.append("-")
                last_dash = True
            continue
    slug = "".join(output).strip("-_")
    return slug or fallback


def panel_filename(record_id: str, method: str) -> str:
    return f"{slugify(record_id, 'record')}_{slugify(method, 'method')}.png"
