"""ACID layer: transactions over the WAL sidecar, crash recovery, MVCC snapshots.

Commit protocol (see ``ArtifactWriter.commit``):

1. data blocks appended and flushed
2. manifest block appended and flushed
3. WAL commit record written and flushed  -- the commit point
4. file header patched and flushed        -- advisory cache only

Recovery picks the newest commit whose manifest still verifies, truncates
the data file just past that manifest and rewrites the header.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

from . import wal as walmod
from .container import (
    BLOCK_HEADER_SIZE,
    FILE_HEADER_SIZE,
    ZERO_HASH,
    ArtifactReader,
    ArtifactWriter,
    BlockHeader,
    FileHeader,
    Manifest,
    Snapshot,
    _Lock,
    read_manifest_block,
    scan_manifests_backward,
)
from .errors import MaifError, RecoveryError, TransactionError, UnknownVersionError


@dataclass(frozen=True)
class _Candidate:
    offset: int
    length: int
    root_hash: bytes
    manifest: Manifest
    source: str  # "wal" | "header" | "scan"
    wal_end: int | None = None  # byte offset just past the chosen commit record

    @property
    def version(self) -> int:
        return self.manifest.manifest_version

    @property
    def end(self) -> int:
        return self.offset + self.length

    def snapshot(self) -> Snapshot:
        return Snapshot(self.version, self.offset, self.root_hash)


def _pread_fn(fd: int):
    def read(off: int, n: int) -> bytes:
        return os.pread(fd, n, off)
    return read


def _read_header(fd: int) -> FileHeader | None:
    try:
        return FileHeader.from_bytes(os.pread(fd, FILE_HEADER_SIZE, 0))
    except MaifError:
        return None


def _wal_candidate(path: Path, fd: int, size: int) -> tuple[_Candidate | None, int]:
    data = walmod.wal_path(path).read_bytes() if walmod.wal_path(path).exists() else b""
    records, valid = walmod.parse_wal(data)
    # byte end of each record, to know where to cut after a chosen commit
    ends, pos = [], 0
    for rec in records:
        pos += len(rec.to_bytes())
        ends.append(pos)
    read = _pread_fn(fd)
    for rec, end in zip(reversed(records), reversed(ends)):
        if rec.kind != walmod.WalKind.COMMIT:
            continue
        off, length, root = rec.manifest_ref
        try:
            hdr, _, man = read_manifest_block(read, off, size, root)
        except MaifError:
            continue
        if hdr.block_length != length:
            continue
        return _Candidate(off, length, root, man, "wal", end), valid
    return None, valid


def _header_candidate(fd: int, size: int, header: FileHeader | None) -> _Candidate | None:
    if header is None or not header.has_manifest:
        return None
    try:
        hdr, _, man = read_manifest_block(_pread_fn(fd), header.manifest_offset, size, header.root_hash)
    except MaifError:
        return None
    if hdr.block_length != header.manifest_length:
        return None
    return _Candidate(header.manifest_offset, header.manifest_length, header.root_hash, man, "header")


def latest_committed(path: str | os.PathLike) -> tuple[_Candidate | None, FileHeader | None]:
    """Newest committed manifest according to WAL and header, without modifying anything."""
    path = Path(path)
    fd = os.open(path, os.O_RDONLY)
    try:
        size = os.fstat(fd).st_size
        header = _read_header(fd)
        wal_c, _ = _wal_candidate(path, fd, size)
        hdr_c = _header_candidate(fd, size, header)
    finally:
        os.close(fd)
    cands = [c for c in (wal_c, hdr_c) if c is not None]
    best = max(cands, key=lambda c: (c.version, c.source == "wal")) if cands else None
    return best, header


def recover_locked(path: str | os.PathLike) -> Snapshot:
    """Recovery body; the caller must hold the writer lock."""
    path = Path(path)
    fd = os.open(path, os.O_RDWR)
    try:
        size = os.fstat(fd).st_size
        header = _read_header(fd)
        wal_c, wal_valid = _wal_candidate(path, fd, size)
        hdr_c = _header_candidate(fd, size, header)
        cands = [c for c in (wal_c, hdr_c) if c is not None]
        chosen = max(cands, key=lambda c: (c.version, c.source == "wal")) if cands else None
        if chosen is None:
            if header is not None and not header.has_manifest and size >= FILE_HEADER_SIZE:
                # created but never committed: drop any uncommitted tail
                if size > FILE_HEADER_SIZE:
                    os.ftruncate(fd, FILE_HEADER_SIZE)
                walmod.wal_path(path).unlink(missing_ok=True)
                return Snapshot(0, 0, ZERO_HASH)
            for off, man, root in scan_manifests_backward(path, limit=1):
                length = BlockHeader.from_bytes(os.pread(fd, BLOCK_HEADER_SIZE, off)).block_length
                chosen = _Candidate(off, length, root, man, "scan")
            if chosen is None:
                raise RecoveryError(f"{path}: no valid commit record and no valid manifest found")

        if size > chosen.end:
            os.ftruncate(fd, chosen.end)
        new_header = FileHeader(
            file_uuid=chosen.manifest.file_uuid,
            manifest_offset=chosen.offset,
            manifest_length=chosen.length,
            root_hash=chosen.root_hash,
            flags=header.flags if header is not None else 0,
        ).to_bytes()
        if os.pread(fd, FILE_HEADER_SIZE, 0) != new_header:
            os.pwrite(fd, new_header, 0)
        os.fsync(fd)
    finally:
        os.close(fd)

    wpath = walmod.wal_path(path)
    if wpath.exists():
        keep = chosen.wal_end if chosen.source == "wal" else wal_valid
        if wpath.stat().st_size != keep:
            with open(wpath, "r+b") as fh:
                fh.truncate(keep)
                fh.flush()
                os.fsync(fh.fileno())
    return chosen.snapshot()


def recover(path: str | os.PathLike) -> Snapshot:
    """Bring an artifact back to its last fully committed snapshot. Idempotent."""
    lock = _Lock(Path(path))
    try:
        return recover_locked(path)
    finally:
        lock.release()


def open_snapshot(path: str | os.PathLike, version: int | None = None) -> ArtifactReader:
    """Reader pinned to ``version`` (latest committed when omitted)."""
    head, _ = latest_committed(path)
    if head is None:
        raise UnknownVersionError(f"{path} has no committed version")
    if version is None or version == head.version:
        return ArtifactReader(path, manifest_offset=head.offset, expected_hash=head.root_hash)
    if version < 1 or version > head.version:
        raise UnknownVersionError(f"version {version} not in 1..{head.version}")
    with ArtifactReader(path, manifest_offset=head.offset, expected_hash=head.root_hash) as rd:
        for off, man, root in rd.iter_manifests():
            if man.manifest_version == version:
                return ArtifactReader(path, manifest_offset=off, expected_hash=root)
    raise UnknownVersionError(f"version {version} not found")


def begin(writer: ArtifactWriter) -> int:
    if not isinstance(writer, ArtifactWriter):
        raise TransactionError("transactions require a writer handle")
    return writer.begin()


def stage_block(writer: ArtifactWriter, txid: int, fourcc, payload, flags: int = 0, codec_id: int = 0,
                **kw) -> bytes:
    return writer.append_block(fourcc, payload, flags, codec_id, txid=txid, **kw)


def commit(writer: ArtifactWriter, txid: int) -> Snapshot:
    return writer.commit(txid)


def abort(writer: ArtifactWriter, txid: int) -> None:
    writer.abort(txid)
