from __future__ import annotations

import hashlib
import os
import struct
import uuid

import pytest

from maif.container import (
    BLOCK_HEADER_SIZE,
    FILE_HEADER_SIZE,
    ArtifactReader,
    BlockHeader,
    FileHeader,
    Manifest,
    ManifestEntry,
    create_artifact,
    open_writer,
)
from maif.errors import (
    BadMagicError,
    BlockDeletedError,
    BlockTooLargeError,
    HeaderCrcError,
    RootHashMismatch,
    TamperError,
    UnknownBlockError,
    VersionChainError,
    WriterLockedError,
)

from conftest import flip_bit

# Reference digests, independent of the package.
SHA256_HELLO = bytes.fromhex("2cf24dba5fb0a30e26e83b2ac5b9e29e1b161e5c1fa7425e73043362938b9824")
SHA256_EMPTY = bytes.fromhex("e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855")


def test_empty_artifact(art):
    with create_artifact(art) as w:
        w.finalize()
    with ArtifactReader(art) as rd:
        assert rd.manifest_version == 1
        assert rd.entries == ()


def test_explicit_uuid_round_trip(art):
    fid = uuid.UUID("12345678-1234-5678-1234-567812345678").bytes
    with create_artifact(art, fid) as w:
        w.finalize()
    with ArtifactReader(art) as rd:
        assert rd.header.file_uuid == fid
        assert rd.manifest.file_uuid == fid


def test_create_in_missing_directory_is_io_error(tmp_path):
    with pytest.raises(OSError):
        create_artifact(tmp_path / "no" / "such" / "dir.maif")


def test_create_refuses_to_clobber(art):
    create_artifact(art).close()
    with pytest.raises(FileExistsError):
        create_artifact(art)


def test_hello_payload_hash(art):
    with create_artifact(art) as w:
        bid = w.append_block("TEXT", b"hello")
        w.finalize()
    with ArtifactReader(art) as rd:
        assert rd.index[bid].payload_hash == SHA256_HELLO
        assert rd.get_block(bid)[1] == b"hello"


def test_empty_payload_block(art):
    with create_artifact(art) as w:
        bid = w.append_block("BDAT", b"")
        w.finalize()
    with ArtifactReader(art) as rd:
        e = rd.index[bid]
        assert e.payload_hash == SHA256_EMPTY
        assert e.payload_length == 0
        assert rd.get_block(bid)[1] == b""


def test_unregistered_fourcc_is_preserved(art):
    with create_artifact(art) as w:
        bid = w.append_block("XXXX", b"opaque")
        w.finalize()
    with ArtifactReader(art) as rd:
        hdr, payload = rd.get_block(bid)
        assert hdr.fourcc == b"XXXX" and payload == b"opaque"


def test_empty_manifest_root_matches_independent_encoding(art):
    fid = bytes(range(16))
    created = 1_700_000_000_000_000
    with create_artifact(art, fid) as w:
        root = w.finalize(created_at=created)
    # version, created_at, uuid, prev offset, prev hash, provenance head, entry count
    canonical = struct.pack("<QQ16sQ32s32sI", 1, created, fid, 0, bytes(32), bytes(32), 0)
    assert root == hashlib.sha256(canonical).digest()


def test_finalize_twice_increments_version(art):
    with create_artifact(art) as w:
        w.append_block("TEXT", b"x")
        w.finalize()
        first = w.live_entries()
        w.finalize()
    with ArtifactReader(art) as rd:
        assert rd.manifest_version == 2
        assert list(rd.entries) == first


def test_identical_content_gives_identical_root(tmp_path):
    roots = []
    for name in ("a", "b"):
        with create_artifact(tmp_path / name, bytes(16)) as w:
            w.append_block("TEXT", b"same", block_id=b"\x01" * 16)
            w.append_block("BDAT", b"\x00\x01", block_id=b"\x02" * 16)
            roots.append(w.finalize(created_at=42))
    assert roots[0] == roots[1]
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()


def test_payloads_are_aligned(art):
    with create_artifact(art) as w:
        for n in (0, 1, 63, 64, 65, 1000):
            w.append_block("BDAT", os.urandom(n))
        w.finalize()
    with ArtifactReader(art) as rd:
        assert all(e.payload_offset % 64 == 0 for e in rd.entries)


def test_manifest_byte_flip_is_root_mismatch(art):
    with create_artifact(art) as w:
        w.append_block("TEXT", b"hello")
        w.finalize()
    with ArtifactReader(art) as rd:
        off = rd.manifest_offset
    flip_bit(art, off + 128 + 5)
    with pytest.raises(TamperError):
        ArtifactReader(art)


def test_open_reads_only_header_and_manifest(art):
    with create_artifact(art) as w:
        for i in range(4):
            w.append_block("BDAT", os.urandom(10_000))
        w.finalize()
    with ArtifactReader(art) as rd:
        assert rd.bytes_read <= FILE_HEADER_SIZE + rd.manifest_length


def test_payload_corruption_always_detected(art):
    with create_artifact(art) as w:
        bid = w.append_block("TEXT", b"some text payload" * 10)
        w.finalize()
    with ArtifactReader(art) as rd:
        e = rd.index[bid]
    for i in range(e.payload_length):
        data = bytearray(art.read_bytes())
        data[e.payload_offset + i] ^= 0x01
        bad = art.with_suffix(".bad")
        bad.write_bytes(data)
        with ArtifactReader(bad) as rd, pytest.raises(TamperError):
            rd.get_block(bid)


def test_tombstoned_block_is_gone(art):
    with create_artifact(art) as w:
        bid = w.append_block("TEXT", b"bye")
        w.finalize()
        w.delete_block(bid)
        w.finalize()
    with ArtifactReader(art) as rd:
        with pytest.raises(BlockDeletedError):
            rd.get_block(bid)
        with pytest.raises(UnknownBlockError):
            rd.get_block(b"\x09" * 16)
        assert rd.list_blocks() == []


def test_stream_clean_and_single_fault(art):
    with create_artifact(art, wal=False, durable=False) as w:
        ids = [w.append_block("BDAT", i.to_bytes(4, "little") * 8) for i in range(1000)]
        w.finalize()
    with ArtifactReader(art) as rd:
        items = list(rd.stream_blocks(verify=True))
        assert len(items) == 1000 and all(it.error is None for it in items)
        victim = rd.index[ids[500]]
    flip_bit(art, victim.payload_offset + 3)
    with ArtifactReader(art) as rd:
        errs = [it for it in rd.stream_blocks(verify=True) if it.error is not None]
    assert len(errs) == 1 and errs[0].entry.block_id == ids[500]


def test_stream_order_independent_of_workers(art):
    with create_artifact(art, wal=False, durable=False) as w:
        for i in range(300):
            w.append_block("BDAT", os.urandom(i % 97))
        w.finalize()
    with ArtifactReader(art) as rd:
        one = [(it.entry.block_id, it.payload) for it in rd.stream_blocks(worker_count=1)]
        eight = [(it.entry.block_id, it.payload) for it in rd.stream_blocks(worker_count=8, window=7)]
    assert one == eight


def test_version_chain_and_break(art):
    with create_artifact(art) as w:
        for i in range(3):
            w.append_block("TEXT", bytes([i]))
            w.commit()
    with ArtifactReader(art) as rd:
        chain = rd.version_chain()
        assert [s.manifest_version for s in chain] == [3, 2, 1]
        v1_off = chain[2].offset
    flip_bit(art, v1_off + 128 + 2)
    with ArtifactReader(art) as rd, pytest.raises(VersionChainError) as ei:
        rd.version_chain()
    assert ei.value.version == 1


def test_list_blocks_filter(art):
    with create_artifact(art) as w:
        for _ in range(3):
            w.append_block("TEXT", b"t")
        for _ in range(2):
            w.append_block("EMBD", b"e")
        w.finalize()
    with ArtifactReader(art) as rd:
        assert len(rd.list_blocks("EMBD")) == 2
        assert len(rd.list_blocks(b"TEXT")) == 3


def test_replacement_keeps_history(art):
    with create_artifact(art) as w:
        bid = w.append_block("TEXT", b"v1")
        w.commit()
        w.append_block("TEXT", b"v2", block_id=bid)
        w.commit()
    with ArtifactReader(art) as rd:
        assert rd.get_block(bid)[1] == b"v2"
        assert len(rd.historical_entries(bid)) == 2


def test_block_size_limit(art):
    with create_artifact(art, max_block_size=10) as w:
        with pytest.raises(BlockTooLargeError):
            w.append_block("BDAT", b"x" * 11)


def test_single_writer_lock(art):
    with create_artifact(art) as w:
        w.finalize()
        with pytest.raises(WriterLockedError):
            open_writer(art)
    with open_writer(art) as w2:
        assert w2.manifest_version == 1


def test_header_structures_round_trip():
    h = FileHeader(b"\x05" * 16, 4096, 300, b"\x07" * 32, 0)
    raw = h.to_bytes()
    assert len(raw) == FILE_HEADER_SIZE and FileHeader.from_bytes(raw) == h
    bad = bytearray(raw)
    bad[0] ^= 1
    with pytest.raises(BadMagicError):
        FileHeader.from_bytes(bytes(bad))
    bad = bytearray(raw)
    bad[40] ^= 1
    with pytest.raises(HeaderCrcError):
        FileHeader.from_bytes(bytes(bad))
    bh = BlockHeader(200, b"TEXT", 0, b"\x01" * 16, 0, 5, b"\x02" * 32)
    braw = bh.to_bytes()
    assert len(braw) == BLOCK_HEADER_SIZE and BlockHeader.from_bytes(braw) == bh
    for i in range(BLOCK_HEADER_SIZE):
        b2 = bytearray(braw)
        b2[i] ^= 0x10
        with pytest.raises(HeaderCrcError):
            BlockHeader.from_bytes(bytes(b2))


def test_manifest_round_trip():
    e = ManifestEntry(b"\x01" * 16, b"TEXT", 96, 150, b"\x03" * 32, 1)
    m = Manifest(2, 99, b"\x02" * 16, 500, b"\x04" * 32, b"\x05" * 32, (e,))
    assert Manifest.from_bytes(m.to_bytes()) == m


def test_reader_open_after_flip_in_header(art):
    with create_artifact(art) as w:
        w.finalize()
    flip_bit(art, 30)
    with pytest.raises(HeaderCrcError):
        ArtifactReader(art)


def test_historical_reader_on_old_manifest(art):
    with create_artifact(art) as w:
        a = w.append_block("TEXT", b"a")
        s1 = w.commit()
        w.append_block("TEXT", b"b")
        w.commit()
    with ArtifactReader(art, s1.manifest_offset, s1.root_hash) as rd:
        assert [e.block_id for e in rd.entries] == [a]
    with pytest.raises(RootHashMismatch):
        ArtifactReader(art, s1.manifest_offset, b"\x00" * 32)
