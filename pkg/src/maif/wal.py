"""Write-ahead log sidecar (``<artifact>.wal``).

The log is a plain stream of records, each encoded as::

    lsn u64 | txid u64 | kind u8 | payload (u32 len + bytes) | crc32 u32

where the CRC covers every preceding byte of the record.  A torn tail (short
read or CRC mismatch) ends the valid prefix; nothing after it is trusted.
"""

from __future__ import annotations

import os
import struct
import zlib
from dataclasses import dataclass
from enum import IntEnum
from pathlib import Path

from .mcbe import Decoder, Encoder

_PREFIX = struct.Struct("<QQBI")
_CRC = struct.Struct("<I")
MAX_WAL_PAYLOAD = 1 << 20


class WalKind(IntEnum):
    BEGIN = 1
    APPEND = 2
    MANIFEST = 3
    COMMIT = 4
    ABORT = 5


@dataclass(frozen=True)
class WalRecord:
    lsn: int
    txid: int
    kind: WalKind
    payload: bytes

    def to_bytes(self) -> bytes:
        body = _PREFIX.pack(self.lsn, self.txid, int(self.kind), len(self.payload)) + self.payload
        return body + _CRC.pack(zlib.crc32(body))

    # Kind-specific payload views.

    @property
    def timestamp(self) -> int:
        """Begin/abort records carry the wall-clock time in microseconds."""
        return Decoder(self.payload).u64()

    @property
    def block_ref(self) -> tuple[int, bytes]:
        d = Decoder(self.payload)
        return d.u64(), d.hash()

    @property
    def manifest_ref(self) -> tuple[int, int, bytes]:
        """(manifest offset, manifest block length, root hash) of a manifest/commit record."""
        d = Decoder(self.payload)
        return d.u64(), d.u64(), d.hash()


def begin_payload(timestamp_us: int) -> bytes:
    return Encoder().u64(timestamp_us).getvalue()


def append_payload(offset: int, payload_hash: bytes) -> bytes:
    return Encoder().u64(offset).hash(payload_hash).getvalue()


def manifest_payload(offset: int, length: int, root_hash: bytes) -> bytes:
    return Encoder().u64(offset).u64(length).hash(root_hash).getvalue()


def parse_wal(data: bytes) -> tuple[list[WalRecord], int]:
    """Decode the valid prefix of a WAL image. Returns (records, valid_length)."""
    records: list[WalRecord] = []
    pos = 0
    last_lsn = -1
    n = len(data)
    while pos + _PREFIX.size <= n:
        lsn, txid, kind, plen = _PREFIX.unpack_from(data, pos)
        end = pos + _PREFIX.size + plen + _CRC.size
        if plen > MAX_WAL_PAYLOAD or end > n:
            break
        body = data[pos:end - _CRC.size]
        (crc,) = _CRC.unpack_from(data, end - _CRC.size)
        if crc != zlib.crc32(body) or lsn <= last_lsn:
            break
        try:
            wkind = WalKind(kind)
        except ValueError:
            break
        records.append(WalRecord(lsn, txid, wkind, bytes(body[_PREFIX.size:])))
        last_lsn = lsn
        pos = end
    return records, pos


def read_wal(path: str | os.PathLike) -> tuple[list[WalRecord], int]:
    try:
        data = Path(path).read_bytes()
    except FileNotFoundError:
        return [], 0
    return parse_wal(data)


def wal_path(artifact_path: str | os.PathLike) -> Path:
    return Path(str(artifact_path) + ".wal")


class WriteAheadLog:
    """Append handle on a WAL sidecar. Records are buffered until ``sync``."""

    def __init__(self, path: str | os.PathLike):
        self.path = Path(path)
        records, valid = read_wal(self.path)
        self._fh = open(self.path, "r+b" if self.path.exists() else "w+b")
        if self._fh.seek(0, os.SEEK_END) != valid:
            self._fh.truncate(valid)
        self._fh.seek(valid)
        self.records = records
        self.next_lsn = records[-1].lsn + 1 if records else 1
        self.max_txid = max((r.txid for r in records), default=0)
        self._pending: list[bytes] = []

    def append(self, txid: int, kind: WalKind, payload: bytes = b"") -> WalRecord:
        rec = WalRecord(self.next_lsn, txid, kind, payload)
        self.next_lsn += 1
        self.max_txid = max(self.max_txid, txid)
        self._pending.append(rec.to_bytes())
        self.records.append(rec)
        return rec

    def write_pending(self) -> None:
        if self._pending:
            self._fh.write(b"".join(self._pending))
            self._pending.clear()

    def sync(self, durable: bool = True) -> None:
        self.write_pending()
        self._fh.flush()
        if durable:
            os.fsync(self._fh.fileno())

    def close(self) -> None:
        if not self._fh.closed:
            self.write_pending()
            self._fh.flush()
            self._fh.close()
