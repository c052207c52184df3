"""Four-level artifact validation and automated repair.

Levels are cumulative:

1. structural -- magic, header CRC, bounds, block headers, alignment, padding
2. integrity  -- root hash, every payload hash, manifest version chain
3. semantic   -- EMBD shape/norm invariants, CSB commitments
4. provenance -- signed chain verification, provenance head cross-check

Repair handles four corruption classes:

* S1 bytes after the last committed manifest (torn tail or junk): truncate
* S2 latest manifest corrupt: fall back to the previous committed manifest
* S3 file header corrupt: rebuild it from the newest valid manifest
* S4 block payload corrupt: re-point to an older intact version, else
  tombstone the block and keep its bytes in place as quarantined evidence
"""

from __future__ import annotations

import os
import shutil
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path

import numpy as np

from . import wal as walmod
from .container import (
    BLOCK_HEADER_SIZE,
    FILE_HEADER_SIZE,
    FOURCC_EMBD,
    REGISTERED_FOURCCS,
    ArtifactReader,
    BlockHeader,
    FileHeader,
    ManifestEntry,
    _Lock,
    check_padding,
    open_writer,
    payload_offset_for,
    read_manifest_block,
    scan_manifests_backward,
    sha256,
)
from .errors import MaifError, RecoveryError, TamperError
from .provenance import ZERO_HASH, verify_chain

SEVERITIES = ("info", "warning", "error")


class Level(IntEnum):
    STRUCTURAL = 1
    INTEGRITY = 2
    SEMANTIC = 3
    PROVENANCE = 4


@dataclass(frozen=True)
class Finding:
    level: int
    severity: str
    code: str
    message: str
    block_id: bytes | None = None
    offset: int | None = None
    tamper: bool = False

    def to_dict(self) -> dict:
        return {
            "level": self.level, "severity": self.severity, "code": self.code, "message": self.message,
            "block_id": self.block_id.hex() if self.block_id else None, "offset": self.offset,
            "tamper": self.tamper,
        }


@dataclass
class ValidationReport:
    level: int
    findings: list[Finding] = field(default_factory=list)

    @property
    def errors(self) -> list[Finding]:
        return [f for f in self.findings if f.severity == "error" and f.level <= self.level]

    @property
    def verdict(self) -> str:
        return "fail" if self.errors else "pass"

    @property
    def passed(self) -> bool:
        return not self.errors

    @property
    def tampered(self) -> bool:
        return any(f.tamper for f in self.errors)

    def detected(self) -> bool:
        """Any error or tamper finding at all; used when measuring detection rates."""
        return bool(self.errors) or any(f.tamper for f in self.findings)

    def codes(self) -> set[str]:
        return {f.code for f in self.findings}

    def to_dict(self) -> dict:
        return {"level": self.level, "verdict": self.verdict, "findings": [f.to_dict() for f in self.findings]}


class _Validator:
    def __init__(self, path: Path, level: int, registry: dict | None, keyring):
        self.path = path
        self.level = level
        self.registry = registry or {}
        self.keyring = keyring
        self.report = ValidationReport(level)

    def add(self, level: int, severity: str, code: str, message: str, block_id=None, offset=None,
            tamper: bool = False) -> None:
        self.report.findings.append(Finding(level, severity, code, message, block_id, offset, tamper))

    def run(self) -> ValidationReport:
        with open(self.path, "rb") as fh:
            self.fd = fh.fileno()
            self.size = os.fstat(self.fd).st_size
            self._run()
        return self.report

    def read(self, off: int, n: int) -> bytes:
        return os.pread(self.fd, n, off)

    def _run(self) -> None:
        # ---- level 1
        try:
            header = FileHeader.from_bytes(self.read(0, FILE_HEADER_SIZE))
        except MaifError as exc:
            self.add(1, "error", "header", f"file header invalid: {exc}", offset=0)
            return
        if not header.has_manifest:
            self.add(1, "error", "no_manifest", "artifact has no committed manifest")
            return
        if header.manifest_offset + header.manifest_length > self.size:
            self.add(1, "error", "manifest_bounds", "manifest extends past end of file",
                     offset=header.manifest_offset)
            return
        try:
            mhdr, payload, manifest = read_manifest_block(self.read, header.manifest_offset, self.size,
                                                          check_hash=False)
        except MaifError as exc:
            self.add(1, "error", "manifest_structure", f"manifest unreadable: {exc}", offset=header.manifest_offset)
            return
        if mhdr.block_length != header.manifest_length:
            self.add(1, "error", "manifest_length", "header manifest_length disagrees with manifest block",
                     offset=header.manifest_offset)
        if manifest.file_uuid != header.file_uuid:
            self.add(1, "error", "file_uuid", "manifest file_uuid disagrees with header", offset=0)
        end = header.manifest_offset + mhdr.block_length
        if self.size > end:
            self.add(1, "warning", "trailing_bytes", f"{self.size - end} bytes after the last committed manifest",
                     offset=end)
        struct_ok = self._check_entries(manifest.entries, header.manifest_offset)
        if self.level < 2:
            return

        # ---- level 2
        root = sha256(payload)
        trailer = self.read(payload_offset_for(header.manifest_offset) + len(payload) + 8, 32)
        if root != header.root_hash or root != mhdr.payload_hash or root != trailer:
            self.add(2, "error", "root_hash", "manifest payload does not hash to the header root hash",
                     offset=header.manifest_offset, tamper=True)
        for e in manifest.entries:
            if e.offset not in struct_ok:
                continue
            if sha256(self.read(e.payload_offset, e.payload_length)) != e.payload_hash:
                self.add(2, "error", "payload_hash", f"payload hash mismatch for block {e.block_id.hex()}",
                         e.block_id, e.offset, tamper=True)
        self._check_history(header, root)
        if self.level < 3 or not self.report.passed:
            return

        # ---- levels 3 and 4 read through a verified reader
        try:
            rd = ArtifactReader(self.path)
        except MaifError as exc:
            self.add(2, "error", "reader", f"artifact does not open cleanly: {exc}", tamper=True)
            return
        with rd:
            self._semantic(rd)
            if self.level >= 4:
                self._provenance(rd, manifest.provenance_head_hash)

    def _check_entries(self, entries, manifest_offset: int) -> set[int]:
        ok: set[int] = set()
        seen: set[bytes] = set()
        prev_end = FILE_HEADER_SIZE
        for e in entries:
            if e.offset < prev_end:
                self.add(1, "error", "entry_order", "entries overlap or are not in increasing offset order",
                         e.block_id, e.offset)
            prev_end = max(prev_end, e.end)
            if e.block_id in seen:
                self.add(1, "error", "duplicate_id", "two entries share a block id", e.block_id, e.offset)
            seen.add(e.block_id)
            if e.end > manifest_offset or e.payload_length < 0:
                self.add(1, "error", "entry_bounds", "entry lies outside the committed region", e.block_id, e.offset)
                continue
            try:
                bh = BlockHeader.from_bytes(self.read(e.offset, BLOCK_HEADER_SIZE))
            except MaifError as exc:
                self.add(1, "error", "block_header", f"block header invalid: {exc}", e.block_id, e.offset,
                         tamper=True)
                continue
            if (bh.block_id, bh.fourcc, bh.block_length, bh.flags, bh.payload_hash) != \
                    (e.block_id, e.fourcc, e.block_length, e.flags, e.payload_hash):
                self.add(1, "error", "block_header", "block header disagrees with manifest entry",
                         e.block_id, e.offset, tamper=True)
                continue
            if e.payload_offset % 64:
                self.add(1, "error", "alignment", "payload not 64-byte aligned", e.block_id, e.offset)
            if not check_padding(self.read, e):
                self.add(1, "error", "padding", "non-zero bytes in block padding", e.block_id, e.offset, tamper=True)
            if e.is_tombstone and e.payload_length:
                self.add(1, "error", "tombstone", "tombstone block carries a payload", e.block_id, e.offset)
            if e.fourcc not in REGISTERED_FOURCCS:
                self.add(1, "info", "opaque_fourcc", f"unregistered fourcc {e.fourcc!r} preserved opaquely",
                         e.block_id, e.offset)
            ok.add(e.offset)
        return ok

    def _check_history(self, header: FileHeader, root: bytes) -> None:
        """Walk older manifests and check blocks only they still reference."""
        try:
            rd = ArtifactReader(self.path, manifest_offset=header.manifest_offset, expected_hash=root)
        except MaifError:
            return
        with rd:
            current = {e.offset for e in rd.entries}
            checked: set[int] = set()
            try:
                for off, man, _ in rd.iter_manifests():
                    if off == rd.manifest_offset:
                        continue
                    for e in man.entries:
                        if e.offset in current or e.offset in checked or e.is_tombstone:
                            continue
                        checked.add(e.offset)
                        try:
                            rd.read_entry(e)
                        except MaifError as exc:
                            self.add(2, "warning", "historical_block",
                                     f"superseded block version is damaged: {exc}", e.block_id, e.offset,
                                     tamper=True)
            except MaifError as exc:
                self.add(2, "error", "version_chain", str(exc), offset=getattr(exc, "offset", None), tamper=True)

    def _semantic(self, rd: ArtifactReader) -> None:
        from .payloads import decode_stored
        from .semantic import csb_verify, decode_embedding_payload, SemanticCommitment

        for e in rd.list_blocks(FOURCC_EMBD):
            hdr, stored = rd.read_entry(e)
            try:
                data = decode_stored(hdr, stored, self.keyring)
            except MaifError as exc:
                self.add(3, "info", "embd_opaque", f"cannot decode embedding block: {exc}", e.block_id, e.offset)
                continue
            try:
                block = decode_embedding_payload(data)
            except (MaifError, ValueError) as exc:
                code = "embd_norm" if "norm" in str(exc) else "embd_shape"
                self.add(3, "error", code, str(exc), e.block_id, e.offset)
                continue
            if "csb" not in block.extensions:
                self.add(3, "info", "csb_missing", "embedding block has no semantic commitment",
                         e.block_id, e.offset)
                continue
            try:
                com = SemanticCommitment.from_bytes(block.extensions["csb"])
                src = block.extensions.get("csb_src")
                if src is None or src not in rd.index or rd.index[src].is_tombstone:
                    self.add(3, "warning", "csb_source", "commitment source block is not present",
                             e.block_id, e.offset)
                    continue
                shdr, sstored = rd.get_block(src)
                x = decode_stored(shdr, sstored, self.keyring)
            except MaifError as exc:
                self.add(3, "info", "csb_unverifiable", str(exc), e.block_id, e.offset)
                continue
            if not csb_verify(x, block.matrix, com.nonce, com.commitment):
                self.add(3, "error", "csb_mismatch", "semantic commitment does not verify",
                         e.block_id, e.offset, tamper=True)

    def _provenance(self, rd: ArtifactReader, head: bytes) -> None:
        try:
            ledger = rd.ledger()
        except MaifError as exc:
            self.add(4, "error", "provenance_parse", f"provenance blocks unreadable: {exc}", tamper=True)
            return
        registry = ledger.registry
        registry.update(self.registry)
        report = verify_chain(ledger.records, registry)
        if not report.valid:
            self.add(4, "error", "provenance_chain",
                     f"chain invalid at record {report.first_invalid}: {report.reason}",
                     offset=report.first_invalid, tamper=True)
        expect = ledger.head_hash if ledger.records else ZERO_HASH
        if head != expect:
            self.add(4, "error", "provenance_head", "manifest provenance_head_hash disagrees with ledger head",
                     tamper=True)


def validate(path: str | os.PathLike, level: int = 4, registry: dict | None = None, keyring=None) -> ValidationReport:
    """Validate up to ``level``. Findings are report content; only I/O errors raise."""
    if not 1 <= int(level) <= 4:
        raise ValueError("level must be 1..4")
    return _Validator(Path(path), int(level), registry, keyring).run()


def level_reached(path: str | os.PathLike) -> int:
    """Highest validation level that passes (0 if even structural checks fail)."""
    report = validate(path, 4)
    for lvl in (1, 2, 3, 4):
        if any(f.severity == "error" and f.level <= lvl for f in report.findings):
            return lvl - 1
    return 4


# --------------------------------------------------------------------------
# Repair


@dataclass
class RepairOutcome:
    scenarios: list[str] = field(default_factory=list)
    actions: list[str] = field(default_factory=list)
    restored_version: int = 0
    verdict: str = "full"
    quarantined: list[bytes] = field(default_factory=list)

    @property
    def scenario_detected(self) -> str:
        return "+".join(self.scenarios) if self.scenarios else "none"

    def to_dict(self) -> dict:
        return {"scenario_detected": self.scenario_detected, "actions": self.actions,
                "restored_version": self.restored_version, "verdict": self.verdict,
                "quarantined": [q.hex() for q in self.quarantined]}


def _manifest_ok(fd: int, size: int, header: FileHeader):
    try:
        hdr, _, man = read_manifest_block(lambda o, n: os.pread(fd, n, o), header.manifest_offset, size,
                                          header.root_hash)
    except MaifError:
        return None
    if hdr.block_length != header.manifest_length:
        return None
    return man


def _fallback_manifest(path: Path, fd: int, size: int, exclude: int | None):
    """Newest committed manifest from the WAL, else from a backward scan."""
    records, _ = walmod.read_wal(walmod.wal_path(path))
    read = lambda o, n: os.pread(fd, n, o)  # noqa: E731
    for rec in reversed(records):
        if rec.kind != walmod.WalKind.COMMIT:
            continue
        off, length, root = rec.manifest_ref
        if off == exclude:
            continue
        try:
            hdr, _, man = read_manifest_block(read, off, size, root)
        except MaifError:
            continue
        if hdr.block_length == length:
            return off, length, root, man, "wal"
    for off, man, root in scan_manifests_backward(path):
        if off == exclude:
            continue
        length = BlockHeader.from_bytes(os.pread(fd, BLOCK_HEADER_SIZE, off)).block_length
        return off, length, root, man, "scan"
    return None


def _trim_wal(path: Path, manifest_end: int) -> None:
    """Drop WAL records from the first commit that points past ``manifest_end``."""
    wpath = walmod.wal_path(path)
    if not wpath.exists():
        return
    data = wpath.read_bytes()
    records, valid = walmod.parse_wal(data)
    keep = 0
    pos = 0
    for rec in records:
        pos += len(rec.to_bytes())
        if rec.kind == walmod.WalKind.COMMIT:
            off, length, _ = rec.manifest_ref
            if off + length > manifest_end:
                break
            keep = pos
    if keep != len(data):
        with open(wpath, "r+b") as fh:
            fh.truncate(keep)
            os.fsync(fh.fileno())


def _quarantined(rd: ArtifactReader) -> list[bytes]:
    """Tombstoned ids whose last stored version no longer verifies."""
    out = []
    for e in rd.entries:
        if not e.is_tombstone:
            continue
        try:
            versions = rd.historical_entries(e.block_id)
        except MaifError:
            continue
        if not versions:
            continue
        try:
            rd.read_entry(versions[-1])
        except MaifError:
            out.append(e.block_id)
    return out


def _repair_structure(path: Path, out: RepairOutcome) -> bool:
    """S1-S3. Returns False when no valid manifest exists anywhere."""
    with open(path, "r+b") as fh:
        fd = fh.fileno()
        size = os.fstat(fd).st_size
        try:
            header = FileHeader.from_bytes(os.pread(fd, FILE_HEADER_SIZE, 0))
        except MaifError:
            header = None
        target = None
        if header is not None and header.has_manifest:
            man = _manifest_ok(fd, size, header)
            if man is not None:
                target = (header.manifest_offset, header.manifest_length, header.root_hash, man, "header")
            else:
                out.scenarios.append("S2")
                target = _fallback_manifest(path, fd, size, exclude=header.manifest_offset)
        elif header is None:
            out.scenarios.append("S3")
            target = _fallback_manifest(path, fd, size, exclude=None)
        if target is None:
            return False
        off, length, root, man, source = target
        end = off + length
        if "S2" in out.scenarios:
            out.actions.append(f"fell back to manifest v{man.manifest_version} at {off} (via {source})")
        if size > end:
            if "S2" not in out.scenarios:
                out.scenarios.insert(0, "S1")
            fh.truncate(end)
            out.actions.append(f"truncated {size - end} bytes after offset {end}")
        new_header = FileHeader(man.file_uuid, off, length, root, header.flags if header else 0).to_bytes()
        if os.pread(fd, FILE_HEADER_SIZE, 0) != new_header:
            os.pwrite(fd, new_header, 0)
            out.actions.append("rewrote file header")
        fh.flush()
        os.fsync(fd)
        out.restored_version = man.manifest_version
    _trim_wal(path, end)
    return True


def _repair_payloads(path: Path, out: RepairOutcome) -> None:
    """S4: re-point damaged blocks to older intact versions or tombstone them."""
    with ArtifactReader(path) as rd:
        bad: list[ManifestEntry] = []
        for e in rd.list_blocks(include_tombstones=True):
            try:
                rd.read_entry(e)
                if not check_padding(rd.pread, e):
                    raise TamperError("non-zero padding", block_id=e.block_id, offset=e.offset)
            except MaifError:
                bad.append(e)
        already = _quarantined(rd)
        plan = []
        for e in bad:
            older = None
            try:
                for cand in reversed(rd.historical_entries(e.block_id)):
                    if cand.offset == e.offset:
                        continue
                    try:
                        rd.read_entry(cand)
                    except MaifError:
                        continue
                    older = cand
                    break
            except MaifError:
                pass
            plan.append((e, older))
    out.quarantined.extend(already)
    if not plan:
        return
    out.scenarios.append("S4")
    with open_writer(path) as w:
        for e, older in plan:
            if older is not None:
                w.repoint(older)
                out.actions.append(f"re-pointed block {e.block_id.hex()} to intact version at {older.offset}")
            else:
                w.delete_block(e.block_id)
                out.quarantined.append(e.block_id)
                out.actions.append(f"tombstoned block {e.block_id.hex()}; damaged bytes quarantined at {e.offset}")
        snap = w.commit()
    out.restored_version = snap.manifest_version


def repair(path: str | os.PathLike, keep_backup: bool = False) -> RepairOutcome:
    """Repair in place; originals are kept in ``<path>.bak`` until repair succeeds."""
    path = Path(path)
    out = RepairOutcome()
    pre = validate(path, 2)
    if pre.passed and "trailing_bytes" not in pre.codes():
        with ArtifactReader(path) as rd:
            out.restored_version = rd.manifest_version
            out.quarantined = _quarantined(rd)
        out.verdict = "partial" if out.quarantined else "full"
        return out

    bak = Path(str(path) + ".bak")
    wpath = walmod.wal_path(path)
    wbak = Path(str(wpath) + ".bak")
    shutil.copy2(path, bak)
    if wpath.exists():
        shutil.copy2(wpath, wbak)

    def restore() -> None:
        shutil.copy2(bak, path)
        if wbak.exists():
            shutil.copy2(wbak, wpath)

    try:
        lock = _Lock(path)
        try:
            ok = _repair_structure(path, out)
        finally:
            lock.release()
        if not ok:
            restore()
            out.verdict = "failed"
            out.actions.append("no valid manifest found; file left untouched")
            return out
        _repair_payloads(path, out)
        post = validate(path, 2)
    except (MaifError, RecoveryError) as exc:
        restore()
        out.verdict = "failed"
        out.actions.append(f"repair aborted: {exc}; original restored")
        return out
    if not post.passed:
        restore()
        out.verdict = "failed"
        out.actions.append("post-repair validation failed; original restored")
        return out
    out.verdict = "partial" if out.quarantined else "full"
    if not keep_backup:
        bak.unlink(missing_ok=True)
        wbak.unlink(missing_ok=True)
    return out
