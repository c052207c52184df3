"""Randomized corruption scenarios for the repair suite."""

from __future__ import annotations

import os
import random
from dataclasses import dataclass
from pathlib import Path

from maif.container import FILE_HEADER_SIZE, ArtifactReader, create_artifact, payload_offset_for
from maif.wal import wal_path

from conftest import step_clock

SCENARIOS = ("S1", "S2", "S3", "S4")


@dataclass
class Scenario:
    name: str
    path: Path
    committed_version: int
    header_bytes: bytes
    expect_partial: bool = False
    damaged: bytes | None = None


def build_base(path: Path, rng: random.Random) -> list[bytes]:
    """Several commits, some of which update earlier blocks. Returns live block ids."""
    ids: list[bytes] = []
    with create_artifact(path, truncate=True, clock=step_clock()) as w:
        for _ in range(rng.randint(2, 5)):
            for _ in range(rng.randint(1, 3)):
                size = rng.randint(1, 3000)
                if ids and rng.random() < 0.4:
                    w.append_block("BDAT", rng.randbytes(size), block_id=rng.choice(ids))
                else:
                    ids.append(w.append_block("BDAT", rng.randbytes(size)))
            w.commit()
    return ids


def make_scenario(directory: Path, name: str, seed: int) -> Scenario:
    rng = random.Random(f"{name}-{seed}")
    path = Path(directory) / f"{name}-{seed}.maif"
    ids = build_base(path, rng)
    with ArtifactReader(path) as rd:
        version = rd.manifest_version
        man_off = rd.manifest_offset
        history = {bid: len(rd.historical_entries(bid)) for bid in ids}
        entries = {e.block_id: e for e in rd.list_blocks()}
    header = path.read_bytes()[:FILE_HEADER_SIZE]
    sc = Scenario(name, path, version, header)

    if name == "S1":
        with open(path, "ab") as fh:
            fh.write(rng.randbytes(rng.randint(1, 600)))
    elif name == "S2":
        # damage the newest manifest's payload; keep or drop the WAL at random
        start = payload_offset_for(man_off)
        with open(path, "r+b") as fh:
            fh.seek(start + rng.randrange(64))
            b = fh.read(1)[0]
            fh.seek(-1, os.SEEK_CUR)
            fh.write(bytes([b ^ (1 << rng.randrange(8))]))
        if rng.random() < 0.5:
            wal_path(path).unlink(missing_ok=True)
        sc.committed_version = version - 1
    elif name == "S3":
        with open(path, "r+b") as fh:
            fh.write(bytes(FILE_HEADER_SIZE) if rng.random() < 0.5 else rng.randbytes(FILE_HEADER_SIZE))
    else:
        bid = rng.choice(ids)
        e = entries[bid]
        with open(path, "r+b") as fh:
            pos = e.payload_offset + rng.randrange(e.payload_length)
            fh.seek(pos)
            b = fh.read(1)[0]
            fh.seek(pos)
            fh.write(bytes([b ^ (1 << rng.randrange(8))]))
        sc.damaged = bid
        # an intact older version lets repair re-point instead of tombstoning
        sc.expect_partial = history[bid] < 2
        sc.committed_version = version + 1
    return sc
