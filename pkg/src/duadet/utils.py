"""Seeding and small I/O helpers shared across modules."""
from __future__ import annotations

import json
import random
import zlib
from pathlib import Path

import numpy as np
import torch


def rng_for(seed: int, stream: str = "") -> np.random.Generator:
    """Independent numpy generator for (seed, stream).

    Streams keep e.g. geometry and style noise decorrelated while staying
    reproducible from a single integer seed.
    """
    key = zlib.crc32(stream.encode("utf-8")) & 0xFFFFFFFF
    return np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFF, key]))


def seed_everything(seed: int) -> np.random.Generator:
    """Seed torch and python RNGs; return the stage-level numpy generator."""
    torch.manual_seed(seed)
    random.seed(seed)
    return rng_for(seed, "stage")


def write_json(path: str | Path, obj) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_json(path: str | Path):
    with open(path) as fh:
        return json.load(fh)


class JsonlWriter:
    """Append-mode JSON-lines log, one dict per row."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "w")

    def write(self, row: dict) -> None:
        self._fh.write(json.dumps(row, sort_keys=True) + "\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_jsonl(path: str | Path) -> list[dict]:
    rows = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                rows.append(json.loads(line))
    return rows
