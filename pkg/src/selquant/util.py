"""Small shared helpers: RNG coercion, deterministic sub-seeding, hashing, CSV output."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

SeedLike = "int | np.random.SeedSequence | np.random.Generator"


def as_rng(seed) -> np.random.Generator:
    """Coerce an integer seed, SeedSequence, or Generator into a Generator."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def trial_rng(master_seed: int, *indices: int) -> np.random.Generator:
    """Independent stream for (master seed, trial/sub indices); stable across runs."""
    return np.random.default_rng(np.random.SeedSequence((int(master_seed),) + tuple(int(i) for i in indices)))


def spawn_seeds(rng: np.random.Generator, count: int) -> list[int]:
    """Draw `count` 63-bit child seeds from an existing stream."""
    return [int(s) for s in rng.integers(0, 2**63 - 1, size=count)]


def config_hash(obj) -> str:
    """Short stable hash of a JSON-serializable configuration object."""
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


def plan_hash(selected, bits) -> str:
    """Short stable hash of a selection plan (order-sensitive on purpose)."""
    blob = ",".join(f"{s}:{b}" for s, b in zip(selected, bits))
    return hashlib.sha1(blob.encode()).hexdigest()[:10]


def format_cell(value) -> str:
    if isinstance(value, float):
        return format(value, ".12g")
    return str(value)


def write_csv(path, header: list[str], rows: list[tuple]) -> None:
    """Write rows with a fixed float format so identical data gives identical bytes."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(format_cell(v) for v in row))
    path.write_text("\n".join(lines) + "\n")
