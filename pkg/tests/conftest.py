from __future__ import annotations

import itertools

import pytest

from maif.container import create_artifact
from maif.provenance import generate_keypair

T0 = 1_750_000_000_000_000  # fixed epoch microseconds for reproducible artifacts


def step_clock(start: int = T0, step: int = 1_000_000):
    """Deterministic clock advancing by ``step`` microseconds per call."""
    counter = itertools.count()
    return lambda: start + step * next(counter)


@pytest.fixture
def key():
    return generate_keypair(seed=b"alice", display_name="alice")


@pytest.fixture
def other_key():
    return generate_keypair(seed=b"bob", display_name="bob")


@pytest.fixture
def art(tmp_path):
    return tmp_path / "a.maif"


def flip_bit(path, offset: int, bit: int = 0) -> None:
    with open(path, "r+b") as fh:
        fh.seek(offset)
        b = fh.read(1)[0]
        fh.seek(offset)
        fh.write(bytes([b ^ (1 << bit)]))


def build_signed(path, key, texts=(b"alpha", b"beta", b"gamma"), clock=None):
    """One commit per text block, each with a signed append record. Returns block ids."""
    ids = []
    with create_artifact(path, signer=key, clock=clock or step_clock()) as w:
        for t in texts:
            bid = w.append_block("TEXT", t)
            w.record(1, [bid])
            w.commit()
            ids.append(bid)
    return ids


# One line per acceptance criterion, printed in the terminal summary.
ACCEPTANCE: dict[int, str] = {}


def acceptance(number: int, title: str, ok: bool, detail: str) -> None:
    ACCEPTANCE[number] = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail}"


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
