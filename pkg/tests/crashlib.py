"""Crash-injection harness shared by the transaction tests and the acceptance suite.

A run builds an artifact over several commits and crashes the writer during
one flush step of one commit.  Bytes written during the crashed step are
then torn at a random point, which models a power cut part-way through a
write that never reached stable storage.  Recovery must land on the last
commit whose WAL commit record survived intact.
"""

from __future__ import annotations

import os
import subprocess
import sys
import textwrap
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from maif import wal as walmod
from maif.container import ArtifactReader, create_artifact, open_writer
from maif.transactions import recover
from maif.validation import validate

STEPS = ("data", "manifest", "wal_commit", "header")


class SimulatedCrash(Exception):
    pass


@dataclass
class CrashOutcome:
    commit_index: int
    step: str
    expected_version: int
    expected_root: bytes
    recovered_version: int
    recovered_root: bytes
    valid: bool

    @property
    def ok(self) -> bool:
        return (self.valid and self.recovered_version == self.expected_version
                and self.recovered_root == self.expected_root)


def _sizes(path: Path) -> tuple[int, int]:
    w = walmod.wal_path(path)
    return os.path.getsize(path), (os.path.getsize(w) if w.exists() else 0)


def _tear(path: Path, lo: int, hi: int, rng) -> int:
    """Truncate ``path`` to a random length in [lo, hi]; returns the kept length."""
    # half the time the write made it to disk in full
    keep = int(rng.integers(lo, hi + 1)) if hi > lo and rng.random() < 0.5 else hi
    with open(path, "r+b") as fh:
        fh.truncate(keep)
    return keep


def crash_run(directory: Path, seed: int) -> CrashOutcome:
    rng = np.random.default_rng(seed)
    path = Path(directory) / f"crash{seed}.maif"
    commits = int(rng.integers(1, 5))
    crash_commit = int(rng.integers(0, commits))
    crash_step = STEPS[int(rng.integers(len(STEPS)))]

    marks: dict[str, tuple[int, int]] = {}
    state = {"commit": 0}

    def hook(step: str) -> None:
        marks[step] = _sizes(path)
        if state["commit"] == crash_commit and step == crash_step:
            raise SimulatedCrash(step)

    roots = {0: bytes(32)}
    w = create_artifact(path, truncate=True, durable=False, on_flush=hook)
    before = _sizes(path)
    try:
        for c in range(commits):
            state["commit"] = c
            marks.clear()
            before = _sizes(path)
            for _ in range(int(rng.integers(0, 4))):
                w.append_block("BDAT", rng.bytes(int(rng.integers(0, 3000))))
            snap = w.commit()
            roots[snap.manifest_version] = snap.root_hash
    except SimulatedCrash:
        pass
    finally:
        w.close()

    # the commit record of the crashed commit, if it reached the WAL
    records, _ = walmod.read_wal(walmod.wal_path(path))
    last_commit = [r for r in records if r.kind == walmod.WalKind.COMMIT]
    crashed_version = crash_commit + 1
    if last_commit and len(last_commit) == crashed_version:
        roots[crashed_version] = last_commit[-1].manifest_ref[2]

    # tear whatever the crashed step wrote
    idx = STEPS.index(crash_step)
    prev = marks.get(STEPS[idx - 1], before) if idx else before
    cur = marks[crash_step]
    committed = crash_step == "header"
    if crash_step == "header":
        # a torn header write mixes old and new header bytes
        if rng.random() < 0.5:
            with open(path, "r+b") as fh:
                start = int(rng.integers(0, 96))
                fh.seek(start)
                fh.write(os.urandom(min(int(rng.integers(1, 8)), 96 - start)))
    else:
        _tear(path, prev[0], cur[0], rng)
        wal_keep = _tear(walmod.wal_path(path), prev[1], cur[1], rng)
        committed = crash_step == "wal_commit" and wal_keep == cur[1]
    # junk past the torn point is possible too
    if rng.random() < 0.3:
        with open(path, "ab") as fh:
            fh.write(os.urandom(int(rng.integers(1, 200))))

    expected = crashed_version if committed else crash_commit
    snap = recover(path)
    if snap.manifest_version == 0:
        # nothing was ever committed: the file is back to a bare header
        ok = os.path.getsize(path) == 96
    else:
        with ArtifactReader(path) as rd:
            ok = all(it.error is None for it in rd.stream_blocks())
        ok = ok and validate(path, 2).passed
    return CrashOutcome(crash_commit, crash_step, expected, roots[expected],
                        snap.manifest_version, snap.root_hash, ok)


_CHILD = textwrap.dedent("""
    import os, sys
    from maif.container import create_artifact
    path, crash_step, n = sys.argv[1], sys.argv[2], int(sys.argv[3])
    state = {"c": 0}
    def hook(step):
        if state["c"] == n - 1 and step == crash_step:
            os._exit(17)
    w = create_artifact(path, truncate=True, on_flush=hook)
    for c in range(n):
        state["c"] = c
        w.append_block("TEXT", b"commit %d" % c)
        w.commit()
    w.close()
""")


def subprocess_crash(directory: Path, step: str, commits: int = 3) -> tuple[int, int]:
    """Kill a child process at ``step`` of its last commit; returns (expected, recovered) versions."""
    path = Path(directory) / f"child-{step}.maif"
    proc = subprocess.run([sys.executable, "-c", _CHILD, str(path), step, str(commits)],
                          capture_output=True, timeout=60)
    assert proc.returncode == 17, proc.stderr.decode()
    expected = commits if step in ("wal_commit", "header") else commits - 1
    snap = recover(path)
    with open_writer(path) as w:
        assert w.manifest_version == expected
    return expected, snap.manifest_version
