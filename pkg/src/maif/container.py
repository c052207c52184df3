"""MAIF on-disk container: file header, typed blocks, manifests, reader and writer.

Layout::

    FileHeader (96 bytes)
    Block*      each: BlockHeader (80 bytes) | zero padding | payload [| trailer]

Every payload starts at a file offset divisible by 64.  Manifest ("MANI")
blocks carry a 40-byte trailer (payload length + SHA-256) so they can be
found by scanning backwards from the end of a damaged file.  The file is
append-only; a new version is a new manifest pointing at its predecessor.
"""

from __future__ import annotations

import fcntl
import hashlib
import mmap
import os
import struct
import threading
import time
import uuid
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from enum import IntFlag
from pathlib import Path
from typing import Callable, Iterator, NamedTuple, Sequence

from . import wal as walmod
from .errors import (
    BadMagicError,
    BlockDeletedError,
    BlockTooLargeError,
    FormatError,
    HeaderCrcError,
    MaifError,
    RootHashMismatch,
    TamperError,
    TransactionError,
    TruncatedError,
    UnknownBlockError,
    VersionChainError,
    WriterLockedError,
)
from .mcbe import Decoder, Encoder
from .provenance import (
    Action,
    AgentKey,
    ProvenanceLedger,
    decode_identities,
    decode_records,
    encode_identities,
    encode_records,
)

MAGIC = b"MAIF"
VERSION_MAJOR = 1
VERSION_MINOR = 0
FILE_HEADER_SIZE = 96
BLOCK_HEADER_SIZE = 80
ALIGN = 64
MANIFEST_TRAILER_SIZE = 40
BLOCK_VERSION = 1
DEFAULT_MAX_BLOCK_SIZE = 1 << 40
MAX_MANIFEST_ENTRIES = 1 << 24
ZERO_HASH = bytes(32)

FOURCC_TEXT = b"TEXT"
FOURCC_BDAT = b"BDAT"
FOURCC_EMBD = b"EMBD"
FOURCC_KGRF = b"KGRF"
FOURCC_ACLS = b"ACLS"
FOURCC_PROV = b"PROV"
FOURCC_IDNT = b"IDNT"
FOURCC_LIFE = b"LIFE"
FOURCC_MANI = b"MANI"
REGISTERED_FOURCCS = frozenset(
    {FOURCC_TEXT, FOURCC_BDAT, FOURCC_EMBD, FOURCC_KGRF, FOURCC_ACLS,
     FOURCC_PROV, FOURCC_IDNT, FOURCC_LIFE, FOURCC_MANI}
)

_FILE_HEADER = struct.Struct("<4sHH16sIQQ32s")  # 76 bytes, followed by crc32
_BLOCK_HEADER = struct.Struct("<Q4sHH16sB3sIQ32s")  # 80 bytes; crc32 lives in reserved[3:7]
_TRAILER = struct.Struct("<Q32s")

assert _BLOCK_HEADER.size == BLOCK_HEADER_SIZE


class BlockFlags(IntFlag):
    NONE = 0
    COMPRESSED = 1
    ENCRYPTED = 2
    TOMBSTONE = 4


def align_up(n: int, a: int = ALIGN) -> int:
    return (n + a - 1) // a * a


def payload_offset_for(block_start: int) -> int:
    return align_up(block_start + BLOCK_HEADER_SIZE)


def now_us() -> int:
    return time.time_ns() // 1000


def sha256(data) -> bytes:
    return hashlib.sha256(data).digest()


def as_fourcc(fourcc: bytes | str) -> bytes:
    if isinstance(fourcc, str):
        fourcc = fourcc.encode("ascii")
    if len(fourcc) != 4:
        raise ValueError(f"fourcc must be 4 bytes, got {fourcc!r}")
    return bytes(fourcc)


# --------------------------------------------------------------------------
# Fixed-layout structures


@dataclass(frozen=True)
class FileHeader:
    file_uuid: bytes
    manifest_offset: int = 0
    manifest_length: int = 0
    root_hash: bytes = ZERO_HASH
    flags: int = 0
    version_major: int = VERSION_MAJOR
    version_minor: int = VERSION_MINOR

    def to_bytes(self) -> bytes:
        body = _FILE_HEADER.pack(MAGIC, self.version_major, self.version_minor, self.file_uuid,
                                 self.flags, self.manifest_offset, self.manifest_length, self.root_hash)
        body += struct.pack("<I", zlib.crc32(body))
        return body.ljust(FILE_HEADER_SIZE, b"\0")

    @classmethod
    def from_bytes(cls, buf: bytes) -> "FileHeader":
        if len(buf) < FILE_HEADER_SIZE:
            raise TruncatedError(f"file header needs {FILE_HEADER_SIZE} bytes, got {len(buf)}")
        magic, vmaj, vmin, fid, flags, moff, mlen, root = _FILE_HEADER.unpack_from(buf)
        if magic != MAGIC:
            raise BadMagicError(f"bad magic {magic!r}")
        (crc,) = struct.unpack_from("<I", buf, _FILE_HEADER.size)
        if crc != zlib.crc32(buf[:_FILE_HEADER.size]):
            raise HeaderCrcError("file header CRC mismatch")
        if any(buf[_FILE_HEADER.size + 4:FILE_HEADER_SIZE]):
            raise HeaderCrcError("non-zero file header padding")
        return cls(fid, moff, mlen, root, flags, vmaj, vmin)

    @property
    def has_manifest(self) -> bool:
        return self.manifest_offset != 0


@dataclass(frozen=True)
class BlockHeader:
    block_length: int
    fourcc: bytes
    flags: int
    block_id: bytes
    codec_id: int = 0
    uncompressed_length: int = 0
    payload_hash: bytes = ZERO_HASH
    block_version: int = BLOCK_VERSION

    def to_bytes(self) -> bytes:
        fields = [self.block_length, self.fourcc, self.block_version, self.flags, self.block_id,
                  self.codec_id, b"\0\0\0", 0, self.uncompressed_length, self.payload_hash]
        crc = zlib.crc32(_BLOCK_HEADER.pack(*fields))
        fields[7] = crc
        return _BLOCK_HEADER.pack(*fields)

    @classmethod
    def from_bytes(cls, buf: bytes) -> "BlockHeader":
        if len(buf) < BLOCK_HEADER_SIZE:
            raise TruncatedError("short block header")
        (length, fourcc, bver, flags, bid, codec, reserved, crc, ulen, phash) = _BLOCK_HEADER.unpack_from(buf)
        check = zlib.crc32(_BLOCK_HEADER.pack(length, fourcc, bver, flags, bid, codec, reserved, 0, ulen, phash))
        if crc != check or reserved != b"\0\0\0":
            raise HeaderCrcError("block header CRC mismatch")
        return cls(length, fourcc, flags, bid, codec, ulen, phash, bver)

    @property
    def is_tombstone(self) -> bool:
        return bool(self.flags & BlockFlags.TOMBSTONE)


def block_layout(block_start: int, payload_len: int, fourcc: bytes) -> tuple[int, int]:
    """(payload_offset, block_length) for a block starting at ``block_start``."""
    poff = payload_offset_for(block_start)
    trailer = MANIFEST_TRAILER_SIZE if fourcc == FOURCC_MANI else 0
    return poff, poff - block_start + payload_len + trailer


@dataclass(frozen=True)
class ManifestEntry:
    block_id: bytes
    fourcc: bytes
    offset: int
    block_length: int
    payload_hash: bytes
    flags: int = 0

    @property
    def payload_offset(self) -> int:
        return payload_offset_for(self.offset)

    @property
    def payload_length(self) -> int:
        return self.offset + self.block_length - self.payload_offset

    @property
    def end(self) -> int:
        return self.offset + self.block_length

    @property
    def is_tombstone(self) -> bool:
        return bool(self.flags & BlockFlags.TOMBSTONE)

    def encode(self, enc: Encoder) -> None:
        enc.uuid(self.block_id).raw(self.fourcc, 4).u64(self.offset).u64(self.block_length)
        enc.hash(self.payload_hash).u16(self.flags)

    @classmethod
    def decode(cls, dec: Decoder) -> "ManifestEntry":
        return cls(dec.uuid(), dec.raw(4), dec.u64(), dec.u64(), dec.hash(), dec.u16())


@dataclass(frozen=True)
class Manifest:
    manifest_version: int
    created_at: int
    file_uuid: bytes
    prev_manifest_offset: int = 0
    prev_manifest_hash: bytes = ZERO_HASH
    provenance_head_hash: bytes = ZERO_HASH
    entries: tuple[ManifestEntry, ...] = ()

    def to_bytes(self) -> bytes:
        enc = Encoder()
        enc.u64(self.manifest_version).u64(self.created_at).uuid(self.file_uuid)
        enc.u64(self.prev_manifest_offset).hash(self.prev_manifest_hash).hash(self.provenance_head_hash)
        enc.seq(self.entries, lambda e, x: x.encode(e))
        return enc.getvalue()

    @classmethod
    def from_bytes(cls, buf: bytes) -> "Manifest":
        dec = Decoder(buf)
        version, created, fid = dec.u64(), dec.u64(), dec.uuid()
        prev_off, prev_hash, prov = dec.u64(), dec.hash(), dec.hash()
        entries = tuple(dec.seq(ManifestEntry.decode, max_count=MAX_MANIFEST_ENTRIES))
        dec.expect_end()
        if version < 1:
            raise FormatError("manifest_version must start at 1")
        return cls(version, created, fid, prev_off, prev_hash, prov, entries)

    @property
    def live_entries(self) -> list[ManifestEntry]:
        return [e for e in self.entries if not e.is_tombstone]


@dataclass(frozen=True)
class ManifestSummary:
    manifest_version: int
    offset: int
    root_hash: bytes
    created_at: int
    entry_count: int


@dataclass(frozen=True)
class Snapshot:
    manifest_version: int
    manifest_offset: int
    root_hash: bytes


class StreamItem(NamedTuple):
    entry: ManifestEntry
    header: BlockHeader | None
    payload: bytes | None
    error: MaifError | None


# --------------------------------------------------------------------------
# Low-level reads shared by reader, recovery and repair


def read_manifest_block(read: Callable[[int, int], bytes], offset: int, file_size: int,
                        expected_hash: bytes | None = None,
                        check_hash: bool = True) -> tuple[BlockHeader, bytes, Manifest]:
    """Read and check the MANI block at ``offset``.

    ``read(offset, n)`` supplies bytes.  Raises FormatError on structural
    problems and TamperError when the payload hash disagrees.
    """
    if offset < FILE_HEADER_SIZE or offset + BLOCK_HEADER_SIZE > file_size:
        raise TruncatedError(f"manifest offset {offset} out of bounds")
    hdr = BlockHeader.from_bytes(read(offset, BLOCK_HEADER_SIZE))
    if hdr.fourcc != FOURCC_MANI:
        raise FormatError(f"block at {offset} is {hdr.fourcc!r}, not a manifest")
    if offset + hdr.block_length > file_size:
        raise TruncatedError("manifest block runs past end of file")
    poff = payload_offset_for(offset)
    plen = offset + hdr.block_length - poff - MANIFEST_TRAILER_SIZE
    if plen < 0:
        raise FormatError("manifest block too short")
    payload = read(poff, plen + MANIFEST_TRAILER_SIZE)
    tlen, thash = _TRAILER.unpack_from(payload, plen)
    payload = payload[:plen]
    if tlen != plen:
        raise FormatError("manifest trailer length mismatch")
    if not check_hash:
        return hdr, payload, Manifest.from_bytes(payload)
    digest = sha256(payload)
    if digest != hdr.payload_hash or digest != thash:
        raise TamperError(f"manifest at {offset} fails its hash", offset=offset)
    if expected_hash is not None and digest != expected_hash:
        raise RootHashMismatch(f"manifest at {offset} does not match expected root hash", offset=offset)
    return hdr, payload, Manifest.from_bytes(payload)


def scan_manifests_backward(path: str | os.PathLike, limit: int | None = None) -> Iterator[tuple[int, Manifest, bytes]]:
    """Yield (offset, manifest, root_hash) for self-consistent MANI blocks, newest file position first."""
    size = os.path.getsize(path)
    if size <= FILE_HEADER_SIZE:
        return
    with open(path, "rb") as fh, mmap.mmap(fh.fileno(), 0, access=mmap.ACCESS_READ) as mm:
        def read(off: int, n: int) -> bytes:
            return mm[off:off + n]

        pos = size
        found = 0
        while True:
            hit = mm.rfind(FOURCC_MANI, FILE_HEADER_SIZE, pos)
            if hit < 0:
                return
            pos = hit + 3
            start = hit - 8
            if start >= FILE_HEADER_SIZE:
                try:
                    _, payload, man = read_manifest_block(read, start, size)
                except MaifError:
                    continue
                yield start, man, sha256(payload)
                found += 1
                if limit is not None and found >= limit:
                    return


def check_padding(read: Callable[[int, int], bytes], entry: ManifestEntry) -> bool:
    gap = entry.payload_offset - entry.offset - BLOCK_HEADER_SIZE
    return gap == 0 or not any(read(entry.offset + BLOCK_HEADER_SIZE, gap))


# --------------------------------------------------------------------------
# Reader


class ArtifactReader:
    """Read handle pinned to one manifest version.

    Opening reads only the file header and the manifest block; payloads are
    fetched on demand with positional reads, so a reader is safe to share
    between threads.
    """

    def __init__(self, path: str | os.PathLike, manifest_offset: int | None = None,
                 expected_hash: bytes | None = None):
        self.path = Path(path)
        self._fd = os.open(self.path, os.O_RDONLY)
        self._lock = threading.Lock()
        self.bytes_read = 0
        self._ledger: ProvenanceLedger | None = None
        self._chain_report = None
        self._caches: dict = {}
        try:
            self._open(manifest_offset, expected_hash)
        except BaseException:
            os.close(self._fd)
            raise

    def _open(self, manifest_offset: int | None, expected_hash: bytes | None) -> None:
        size = os.fstat(self._fd).st_size
        self.header = FileHeader.from_bytes(self.pread(0, FILE_HEADER_SIZE))
        if manifest_offset is None:
            if not self.header.has_manifest:
                raise FormatError("artifact has no committed manifest")
            if self.header.manifest_offset + self.header.manifest_length > size:
                raise TruncatedError("manifest extends past end of file")
            manifest_offset = self.header.manifest_offset
            expected_hash = self.header.root_hash
        try:
            hdr, payload, manifest = read_manifest_block(self.pread, manifest_offset, size, expected_hash)
        except TamperError as exc:
            raise RootHashMismatch(str(exc), offset=manifest_offset) from None
        if manifest_offset == self.header.manifest_offset and hdr.block_length != self.header.manifest_length \
                and expected_hash == self.header.root_hash:
            raise FormatError("header manifest_length disagrees with manifest block")
        self.manifest_offset = manifest_offset
        self.manifest_length = hdr.block_length
        self.manifest = manifest
        self.root_hash = sha256(payload)
        self.entries: tuple[ManifestEntry, ...] = manifest.entries
        self.index: dict[bytes, ManifestEntry] = {e.block_id: e for e in manifest.entries}

    # -- plumbing --

    def pread(self, offset: int, n: int) -> bytes:
        data = os.pread(self._fd, n, offset)
        with self._lock:
            self.bytes_read += len(data)
        if len(data) != n:
            raise TruncatedError(f"short read at {offset}: wanted {n}, got {len(data)}")
        return data

    def close(self) -> None:
        if self._fd >= 0:
            os.close(self._fd)
            self._fd = -1

    def __enter__(self) -> "ArtifactReader":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def __del__(self) -> None:
        try:
            self.close()
        except Exception:
            pass

    # -- projections --

    @property
    def manifest_version(self) -> int:
        return self.manifest.manifest_version

    @property
    def file_uuid(self) -> bytes:
        return self.header.file_uuid

    def snapshot(self) -> Snapshot:
        return Snapshot(self.manifest_version, self.manifest_offset, self.root_hash)

    def compute_root_hash(self) -> bytes:
        return self.root_hash

    def list_blocks(self, fourcc: bytes | str | None = None, include_tombstones: bool = False) -> list[ManifestEntry]:
        want = as_fourcc(fourcc) if fourcc is not None else None
        return [e for e in self.entries
                if (include_tombstones or not e.is_tombstone) and (want is None or e.fourcc == want)]

    def entry(self, block_id: bytes) -> ManifestEntry:
        try:
            e = self.index[block_id]
        except KeyError:
            raise UnknownBlockError(f"unknown block {block_id.hex()}") from None
        if e.is_tombstone:
            raise BlockDeletedError(f"block {block_id.hex()} was deleted")
        return e

    # -- block access --

    def read_entry(self, entry: ManifestEntry, verify: bool = True) -> tuple[BlockHeader, bytes]:
        hdr = BlockHeader.from_bytes(self.pread(entry.offset, BLOCK_HEADER_SIZE))
        if (hdr.block_id != entry.block_id or hdr.fourcc != entry.fourcc
                or hdr.block_length != entry.block_length or hdr.flags != entry.flags):
            raise TamperError(f"block header at {entry.offset} disagrees with manifest",
                              block_id=entry.block_id, offset=entry.offset)
        payload = self.pread(entry.payload_offset, entry.payload_length) if entry.payload_length else b""
        if verify:
            digest = sha256(payload)
            if digest != entry.payload_hash or digest != hdr.payload_hash:
                raise TamperError(f"payload hash mismatch for block {entry.block_id.hex()}",
                                  block_id=entry.block_id, offset=entry.offset)
        return hdr, payload

    def get_block(self, block_id: bytes, verify: bool = True) -> tuple[BlockHeader, bytes]:
        return self.read_entry(self.entry(block_id), verify)

    def stream_blocks(self, verify: bool = True, worker_count: int = 1,
                      fourcc: bytes | str | None = None, window: int = 64) -> Iterator[StreamItem]:
        """Yield every live block in manifest order; tamper errors are reported inline."""
        entries = self.list_blocks(fourcc)

        def load(e: ManifestEntry) -> StreamItem:
            try:
                hdr, payload = self.read_entry(e, verify)
                return StreamItem(e, hdr, payload, None)
            except MaifError as exc:
                return StreamItem(e, None, None, exc)

        if worker_count <= 1:
            for e in entries:
                yield load(e)
            return
        with ThreadPoolExecutor(max_workers=worker_count) as pool:
            pending = []
            it = iter(entries)
            for e in it:
                pending.append(pool.submit(load, e))
                if len(pending) >= window:
                    break
            while pending:
                fut = pending.pop(0)
                nxt = next(it, None)
                if nxt is not None:
                    pending.append(pool.submit(load, nxt))
                yield fut.result()

    # -- history --

    def manifest_at(self, offset: int, expected_hash: bytes | None = None) -> tuple[Manifest, bytes]:
        size = os.fstat(self._fd).st_size
        _, payload, man = read_manifest_block(self.pread, offset, size, expected_hash)
        return man, sha256(payload)

    def iter_manifests(self) -> Iterator[tuple[int, Manifest, bytes]]:
        """Walk (offset, manifest, root_hash) from this version back to genesis.

        Raises VersionChainError at the first hop whose predecessor does not
        hash to the recorded prev_manifest_hash.
        """
        off, man, root = self.manifest_offset, self.manifest, self.root_hash
        while True:
            yield off, man, root
            if man.manifest_version == 1:
                if man.prev_manifest_offset != 0 or man.prev_manifest_hash != ZERO_HASH:
                    raise VersionChainError("genesis manifest has a predecessor link", 1, off)
                return
            prev_off = man.prev_manifest_offset
            try:
                prev, prev_root = self.manifest_at(prev_off)
            except MaifError as exc:
                raise VersionChainError(f"manifest v{man.manifest_version - 1} unreadable: {exc}",
                                        man.manifest_version - 1, prev_off) from None
            if prev_root != man.prev_manifest_hash or prev.manifest_version != man.manifest_version - 1:
                raise VersionChainError(f"version chain broken between v{prev.manifest_version} and "
                                        f"v{man.manifest_version}", man.manifest_version - 1, prev_off)
            off, man, root = prev_off, prev, prev_root

    def version_chain(self) -> list[ManifestSummary]:
        return [ManifestSummary(m.manifest_version, off, root, m.created_at, len(m.entries))
                for off, m, root in self.iter_manifests()]

    def historical_entries(self, block_id: bytes) -> list[ManifestEntry]:
        """Distinct stored versions of ``block_id`` across the version chain, oldest first."""
        seen: dict[int, ManifestEntry] = {}
        for _, man, _ in self.iter_manifests():
            for e in man.entries:
                if e.block_id == block_id and not e.is_tombstone:
                    seen.setdefault(e.offset, e)
        return [seen[k] for k in sorted(seen)]

    # -- provenance --

    def ledger(self) -> ProvenanceLedger:
        if self._ledger is None:
            self._ledger = load_ledger(self, self.entries)
        return self._ledger

    def chain_report(self):
        if self._chain_report is None:
            self._chain_report = self.ledger().verify()
        return self._chain_report

    def cache(self, key, factory):
        """Per-reader memo for derived data (indexes, decoded blocks)."""
        with self._lock:
            if key in self._caches:
                return self._caches[key]
        value = factory()
        with self._lock:
            return self._caches.setdefault(key, value)


def load_ledger(reader: ArtifactReader, entries: Sequence[ManifestEntry]) -> ProvenanceLedger:
    ledger = ProvenanceLedger()
    for e in entries:
        if e.is_tombstone:
            continue
        if e.fourcc == FOURCC_IDNT:
            for ident in decode_identities(reader.read_entry(e)[1]):
                ledger.register(ident)
        elif e.fourcc == FOURCC_PROV:
            ledger.records.extend(decode_records(reader.read_entry(e)[1]))
    return ledger


def open_artifact(path: str | os.PathLike) -> ArtifactReader:
    return ArtifactReader(path)


# --------------------------------------------------------------------------
# Writer


class _Lock:
    def __init__(self, path: Path):
        self.path = Path(str(path) + ".lock")
        self._fd = os.open(self.path, os.O_RDWR | os.O_CREAT, 0o644)
        try:
            fcntl.flock(self._fd, fcntl.LOCK_EX | fcntl.LOCK_NB)
        except BlockingIOError:
            os.close(self._fd)
            raise WriterLockedError(f"{path} is locked by another writer") from None

    def release(self) -> None:
        if self._fd >= 0:
            fcntl.flock(self._fd, fcntl.LOCK_UN)
            os.close(self._fd)
            self._fd = -1


@dataclass
class _Pending:
    txid: int
    implicit: bool
    entries: list[ManifestEntry] = field(default_factory=list)
    tombstoned: set = field(default_factory=set)


class ArtifactWriter:
    """Single-writer append handle.

    Blocks are appended immediately but only become visible once a manifest
    referencing them is committed.  With ``wal=True`` (the default) commits go
    through the write-ahead log sidecar; the commit record, not the header
    patch, is the commit point.

    ``on_flush`` is called with a step label after each durable flush
    ("data", "manifest", "wal_commit", "header"); tests use it to inject
    crashes at flush boundaries.
    """

    def __init__(self, path: str | os.PathLike, *, _create: bool, file_uuid: bytes | None = None,
                 truncate: bool = False, wal: bool = True, durable: bool = True,
                 signer: AgentKey | None = None, clock: Callable[[], int] = now_us,
                 max_block_size: int = DEFAULT_MAX_BLOCK_SIZE,
                 on_flush: Callable[[str], None] | None = None):
        self.path = Path(path)
        self.use_wal = wal
        self.durable = durable
        self.signer = signer
        self.clock = clock
        self.max_block_size = max_block_size
        self.on_flush = on_flush
        self._pending: _Pending | None = None
        self._closed = False
        self._lock = _Lock(self.path)
        try:
            if _create:
                self._create(file_uuid, truncate)
            else:
                self._open_existing()
            self._wal = walmod.WriteAheadLog(walmod.wal_path(self.path)) if wal else None
        except BaseException:
            self._lock.release()
            raise
        self._next_txid = (self._wal.max_txid if self._wal else 0) + 1

    # -- construction --

    def _create(self, file_uuid: bytes | None, truncate: bool) -> None:
        if self.path.exists() and not truncate:
            raise FileExistsError(f"{self.path} exists (pass truncate=True to overwrite)")
        if file_uuid is None:
            file_uuid = uuid.uuid4().bytes
        if len(file_uuid) != 16:
            raise ValueError("file_uuid must be 16 bytes")
        self._fh = open(self.path, "w+b")
        walmod.wal_path(self.path).unlink(missing_ok=True)
        self.header = FileHeader(file_uuid)
        self._fh.write(self.header.to_bytes())
        self._sync()
        self._end = FILE_HEADER_SIZE
        self.manifest: Manifest | None = None
        self.manifest_offset = 0
        self.root_hash = ZERO_HASH
        self.ledger = ProvenanceLedger()
        self._committed_records = 0
        self._committed_identities: set[bytes] = set()
        self._entries: dict[bytes, ManifestEntry] = {}

    def _open_existing(self) -> None:
        from .transactions import recover_locked

        snap = recover_locked(self.path)
        with ArtifactReader(self.path) as rd:
            self.header = rd.header
            self.manifest = rd.manifest
            self.manifest_offset = rd.manifest_offset
            self.root_hash = rd.root_hash
            self.ledger = rd.ledger()
        assert snap.root_hash == self.root_hash
        self._committed_records = len(self.ledger.records)
        self._committed_identities = set(self.ledger.identities)
        self._entries = {e.block_id: e for e in self.manifest.entries}
        self._fh = open(self.path, "r+b")
        self._end = self._fh.seek(0, os.SEEK_END)

    # -- io --

    def _sync(self, fh=None) -> None:
        fh = fh or self._fh
        fh.flush()
        if self.durable:
            os.fsync(fh.fileno())

    def _flushed(self, step: str) -> None:
        if self.on_flush is not None:
            self.on_flush(step)

    @property
    def file_uuid(self) -> bytes:
        return self.header.file_uuid

    @property
    def manifest_version(self) -> int:
        return self.manifest.manifest_version if self.manifest else 0

    @property
    def in_transaction(self) -> bool:
        return self._pending is not None and not self._pending.implicit

    def live_entries(self) -> list[ManifestEntry]:
        """Entries the next manifest would contain, staged changes included."""
        merged = dict(self._entries)
        if self._pending:
            for e in self._pending.entries:
                merged[e.block_id] = e
        return sorted(merged.values(), key=lambda e: e.offset)

    def lookup(self, block_id: bytes) -> ManifestEntry | None:
        if self._pending:
            for e in reversed(self._pending.entries):
                if e.block_id == block_id:
                    return e
        return self._entries.get(block_id)

    def read_payload(self, entry: ManifestEntry) -> bytes:
        """Stored payload of a block written by this writer (committed or staged)."""
        self._fh.flush()
        return os.pread(self._fh.fileno(), entry.payload_length, entry.payload_offset)

    # -- transactions --

    def _ensure_tx(self) -> _Pending:
        if self._closed:
            raise MaifError("writer is closed")
        if self._pending is None:
            self._pending = _Pending(self._alloc_txid(), implicit=True)
            self._log(walmod.WalKind.BEGIN, walmod.begin_payload(self.clock()))
        return self._pending

    def _alloc_txid(self) -> int:
        txid = self._next_txid
        self._next_txid += 1
        return txid

    def _log(self, kind: walmod.WalKind, payload: bytes) -> None:
        if self._wal is not None:
            self._wal.append(self._pending.txid, kind, payload)

    def begin(self) -> int:
        if self._closed:
            raise MaifError("writer is closed")
        if self._pending is not None:
            if self._pending.implicit and not self._pending.entries:
                self._pending.implicit = False
                return self._pending.txid
            raise TransactionError("a transaction is already open on this writer")
        self._pending = _Pending(self._alloc_txid(), implicit=False)
        self._log(walmod.WalKind.BEGIN, walmod.begin_payload(self.clock()))
        return self._pending.txid

    def _check_tx(self, txid: int | None) -> _Pending:
        if txid is None:
            return self._ensure_tx()
        if self._pending is None or self._pending.txid != txid:
            raise TransactionError(f"transaction {txid} is not open")
        return self._pending

    def abort(self, txid: int | None = None) -> None:
        pend = self._check_tx(txid) if txid is not None else self._pending
        if pend is None:
            return
        self._log(walmod.WalKind.ABORT, walmod.begin_payload(self.clock()))
        if self._wal is not None:
            self._wal.sync(self.durable)
        # staged records for the aborted transaction are discarded too
        del self.ledger.records[self._committed_records:]
        self._pending = None

    # -- block appends --

    def new_block_id(self) -> bytes:
        return uuid.uuid4().bytes

    def _write_block(self, hdr: BlockHeader, payload, fourcc: bytes) -> tuple[int, int]:
        start = self._end
        poff, length = block_layout(start, len(payload), fourcc)
        hdr = replace(hdr, block_length=length)
        self._fh.seek(start)
        self._fh.write(hdr.to_bytes())
        pad = poff - start - BLOCK_HEADER_SIZE
        if pad:
            self._fh.write(bytes(pad))
        self._fh.write(payload)
        if fourcc == FOURCC_MANI:
            self._fh.write(_TRAILER.pack(len(payload), hdr.payload_hash))
        self._end = start + length
        return start, length

    def append_block(self, fourcc: bytes | str, payload: bytes, flags: int = 0, codec_id: int = 0,
                     uncompressed_length: int | None = None, block_id: bytes | None = None,
                     txid: int | None = None) -> bytes:
        """Write a block and stage it for the next manifest.

        ``payload`` is stored verbatim; compression and encryption are
        applied by the caller.  Reusing a live ``block_id`` stages a
        replacement; the old bytes stay on disk for older versions.
        """
        fourcc = as_fourcc(fourcc)
        if fourcc == FOURCC_MANI:
            raise ValueError("manifest blocks are written by commit")
        payload = memoryview(payload).cast("B") if not isinstance(payload, bytes) else payload
        if len(payload) > self.max_block_size:
            raise BlockTooLargeError(f"block of {len(payload)} bytes exceeds {self.max_block_size}")
        if flags & BlockFlags.TOMBSTONE and len(payload):
            raise ValueError("tombstone blocks carry no payload")
        pend = self._check_tx(txid)
        block_id = block_id or self.new_block_id()
        if len(block_id) != 16:
            raise ValueError("block_id must be 16 bytes")
        digest = sha256(payload)
        ulen = len(payload) if uncompressed_length is None else uncompressed_length
        hdr = BlockHeader(0, fourcc, int(flags), block_id, codec_id, ulen, digest)
        start, length = self._write_block(hdr, payload, fourcc)
        entry = ManifestEntry(block_id, fourcc, start, length, digest, int(flags))
        pend.entries.append(entry)
        self._log(walmod.WalKind.APPEND, walmod.append_payload(start, digest))
        return block_id

    def repoint(self, entry: ManifestEntry, txid: int | None = None) -> None:
        """Stage an existing on-disk block version as the live entry for its id."""
        pend = self._check_tx(txid)
        pend.entries.append(entry)
        self._log(walmod.WalKind.APPEND, walmod.append_payload(entry.offset, entry.payload_hash))

    def delete_block(self, block_id: bytes, txid: int | None = None) -> bytes:
        prev = self.lookup(block_id)
        if prev is None or prev.is_tombstone:
            raise UnknownBlockError(f"unknown block {block_id.hex()}")
        return self.append_block(prev.fourcc, b"", BlockFlags.TOMBSTONE, block_id=block_id, txid=txid)

    def record(self, action: Action, targets: Sequence[bytes], signer: AgentKey | None = None,
               timestamp: int | None = None):
        """Append a provenance record that will be stored with the next commit."""
        signer = signer or self.signer
        if signer is None:
            return None
        self._ensure_tx()
        return self.ledger.append_record(signer, action, targets,
                                         self.clock() if timestamp is None else timestamp)

    # -- commit --

    def _stage_provenance(self, pend: _Pending) -> None:
        new_ids = [i for a, i in self.ledger.identities.items() if a not in self._committed_identities]
        if new_ids:
            self.append_block(FOURCC_IDNT, encode_identities(new_ids), txid=pend.txid)
        new_records = self.ledger.records[self._committed_records:]
        if new_records:
            self.append_block(FOURCC_PROV, encode_records(new_records), txid=pend.txid)

    def commit(self, txid: int | None = None, created_at: int | None = None) -> Snapshot:
        pend = self._check_tx(txid)
        try:
            self._stage_provenance(pend)
            # (1) data blocks durable
            self._sync()
            self._flushed("data")

            entries = dict(self._entries)
            for e in pend.entries:
                entries[e.block_id] = e
            if len(entries) > MAX_MANIFEST_ENTRIES:
                raise MaifError("manifest entry limit exceeded")
            manifest = Manifest(
                manifest_version=self.manifest_version + 1,
                created_at=self.clock() if created_at is None else created_at,
                file_uuid=self.file_uuid,
                prev_manifest_offset=self.manifest_offset,
                prev_manifest_hash=self.root_hash if self.manifest else ZERO_HASH,
                provenance_head_hash=self.ledger.head_hash,
                entries=tuple(sorted(entries.values(), key=lambda e: e.offset)),
            )
            payload = manifest.to_bytes()
            root = sha256(payload)
            hdr = BlockHeader(0, FOURCC_MANI, 0, uuid.UUID(bytes=root[:16]).bytes, 0, len(payload), root)
            moff, mlen = self._write_block(hdr, payload, FOURCC_MANI)
            self._log(walmod.WalKind.MANIFEST, walmod.manifest_payload(moff, mlen, root))
            # (2) manifest durable
            self._sync()
            self._flushed("manifest")

            # (3) commit record durable: the atomic commit point
            if self._wal is not None:
                self._log(walmod.WalKind.COMMIT, walmod.manifest_payload(moff, mlen, root))
                self._wal.sync(self.durable)
                self._flushed("wal_commit")
        except BaseException:
            # nothing became visible; staged bytes are dead space
            del self.ledger.records[self._committed_records:]
            self._pending = None
            raise

        self.manifest, self.manifest_offset, self.root_hash = manifest, moff, root
        self._entries = entries
        self._committed_records = len(self.ledger.records)
        self._committed_identities = set(self.ledger.identities)
        self._pending = None

        # (4) header patch, advisory
        self.header = replace(self.header, manifest_offset=moff, manifest_length=mlen, root_hash=root)
        self._fh.seek(0)
        self._fh.write(self.header.to_bytes())
        self._sync()
        self._fh.seek(self._end)
        self._flushed("header")
        return Snapshot(manifest.manifest_version, moff, root)

    def finalize(self, created_at: int | None = None) -> bytes:
        """Commit everything staged (possibly nothing) and return the new root hash."""
        return self.commit(self._pending.txid if self._pending else None, created_at).root_hash

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        try:
            self._fh.close()
            if self._wal is not None:
                self._wal.close()
        finally:
            self._lock.release()

    def __enter__(self) -> "ArtifactWriter":
        return self

    def __exit__(self, exc_type, *exc) -> None:
        self.close()


def create_artifact(path: str | os.PathLike, file_uuid: bytes | None = None, *, truncate: bool = False,
                    **kwargs) -> ArtifactWriter:
    return ArtifactWriter(path, _create=True, file_uuid=file_uuid, truncate=truncate, **kwargs)


def open_writer(path: str | os.PathLike, **kwargs) -> ArtifactWriter:
    """Reopen an existing artifact for appending (runs crash recovery first)."""
    return ArtifactWriter(path, _create=False, **kwargs)


# Functional aliases matching the operation names used across the package.


def append_block(writer: ArtifactWriter, fourcc, payload, flags=0, codec_id=0, **kw) -> bytes:
    return writer.append_block(fourcc, payload, flags, codec_id, **kw)


def finalize(writer: ArtifactWriter, created_at: int | None = None) -> bytes:
    return writer.finalize(created_at)


def get_block(reader: ArtifactReader, block_id: bytes, verify: bool = True):
    return reader.get_block(block_id, verify)


def stream_blocks(reader: ArtifactReader, verify: bool = True, worker_count: int = 1):
    return reader.stream_blocks(verify, worker_count)
