"""The ``maif`` command-line tool.

Exit codes: 0 ok, 1 validation findings or refused operation, 2 tamper or
integrity failure, 3 I/O error, 4 usage error.  With ``--json`` exactly one
JSON document is written to stdout, including on failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .errors import (
    AuthenticationError,
    FormatError,
    MaifError,
    PermissionDenied,
    RecoveryError,
    TamperError,
    WriterLockedError,
)

EXIT_OK, EXIT_FINDINGS, EXIT_TAMPER, EXIT_IO, EXIT_USAGE = 0, 1, 2, 3, 4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _hex(value: str, size: int | None = None) -> bytes:
    try:
        b = bytes.fromhex(value)
    except ValueError:
        raise UsageError(f"not a hex string: {value!r}") from None
    if size is not None and len(b) != size:
        raise UsageError(f"expected {size} bytes of hex, got {len(b)}")
    return b


def _flag_names(flags: int) -> list[str]:
    from .container import BlockFlags

    return [f.name.lower() for f in BlockFlags if flags & f]


def _iso(us: int) -> str:
    return datetime.fromtimestamp(us / 1e6, tz=timezone.utc).isoformat().replace("+00:00", "Z")


# --------------------------------------------------------------------------
# Shared context


class Context:
    def __init__(self, args):
        self.args = args
        self.json = args.json

    def identity(self, required: bool = False):
        from .provenance import load_key

        path = self.args.identity or os.environ.get("MAIF_IDENTITY")
        if not path:
            if required:
                raise UsageError("an identity is required (--identity or MAIF_IDENTITY)")
            return None
        return load_key(path)

    def keyring(self):
        from .access import Keyring

        path = self.args.keyring or os.environ.get("MAIF_KEYRING")
        return Keyring.load(path) if path else None


# --------------------------------------------------------------------------
# Commands. Each returns (exit_code, document, text).


def cmd_create(ctx: Context, a) -> tuple:
    from .container import create_artifact
    from .provenance import Action

    signer = ctx.identity()
    file_uuid = _hex(a.uuid, 16) if a.uuid else None
    with create_artifact(a.path, file_uuid, truncate=a.force, signer=signer) as w:
        if signer is not None:
            w.record(Action.CREATE, [])
        snap = w.commit()
        doc = {"path": str(a.path), "file_uuid": w.file_uuid.hex(), "manifest_version": snap.manifest_version,
               "root_hash": snap.root_hash.hex()}
    return EXIT_OK, doc, f"created {a.path} (uuid {doc['file_uuid']})"


def _read_input(a) -> bytes:
    if a.text is not None:
        return a.text.encode()
    if a.file is None:
        raise UsageError("give --file or --text")
    return sys.stdin.buffer.read() if a.file == "-" else Path(a.file).read_bytes()


def _load_matrix(path: str) -> np.ndarray:
    p = Path(path)
    if p.suffix == ".npy":
        m = np.load(p, allow_pickle=False)
    else:
        m = np.asarray(json.loads(p.read_text()), dtype=np.float32)
    if m.ndim == 1:
        m = m[None, :]
    return np.asarray(m, dtype=np.float32)


def _load_triples(raw: bytes):
    from .semantic import Triple

    text = raw.decode()
    try:
        items = json.loads(text)
    except json.JSONDecodeError:
        items = [line.split("\t") for line in text.splitlines() if line.strip()]
    out = []
    for it in items:
        if len(it) != 3:
            raise UsageError(f"triple needs 3 fields: {it!r}")
        out.append(Triple(*map(str, it)))
    return out


def cmd_add(ctx: Context, a) -> tuple:
    from .compression import CodecId, codec_from_name, hsc_compress
    from .container import open_writer
    from .payloads import decode_stored, write_payload
    from .provenance import Action
    from .semantic import bind_extensions, encode_embedding_payload, encode_triples

    signer = ctx.identity(required=a.sign)
    if not a.sign:
        signer = None
    codec = codec_from_name(a.compress) if a.compress else CodecId.NONE
    key = None
    if a.encrypt:
        ring = ctx.keyring()
        if ring is None:
            raise UsageError("--encrypt needs a keyring (--keyring or MAIF_KEYRING)")
        key = ring[a.encrypt]
    block_id = _hex(a.block_id, 16) if a.block_id else None

    with open_writer(a.path) as w:
        if a.type == "text":
            fourcc, data = "TEXT", _read_input(a)
            data.decode("utf-8")
        elif a.type == "binary":
            fourcc, data = "BDAT", _read_input(a)
        elif a.type == "triples":
            fourcc, data = "KGRF", encode_triples(_load_triples(_read_input(a)))
        else:
            if not a.file:
                raise UsageError("embeddings need --file (.npy or JSON)")
            m = _load_matrix(a.file)
            ext = {}
            if a.bind:
                src = _hex(a.bind, 16)
                entry = w.lookup(src)
                if entry is None or entry.is_tombstone:
                    raise UsageError(f"--bind block {a.bind} not found")
                from .container import ArtifactReader

                with ArtifactReader(a.path) as rd:
                    hdr, stored = rd.read_entry(entry)
                ext = bind_extensions(src, decode_stored(hdr, stored, ctx.keyring()), m)
            hsc = hsc_compress(m, a.hsc) if a.hsc else None
            fourcc, data = "EMBD", encode_embedding_payload(m, a.normalized, ext, hsc)
        replacing = block_id is not None and w.lookup(block_id) is not None
        bid = write_payload(w, fourcc, data, codec, key, a.encrypt or "", block_id, signer,
                            Action.UPDATE if replacing else Action.APPEND)
        snap = w.commit()
    doc = {"block_id": bid.hex(), "fourcc": fourcc, "bytes": len(data), "manifest_version": snap.manifest_version,
           "root_hash": snap.root_hash.hex()}
    return EXIT_OK, doc, f"added {fourcc} block {bid.hex()} ({len(data)} bytes) -> v{snap.manifest_version}"


def cmd_compress(ctx: Context, a) -> tuple:
    """Rewrite one block as a new version, compressed with a codec or (EMBD only) an HSC tier."""
    from .access import EncryptionEnvelope
    from .compression import CodecId, codec_from_name, hsc_compress
    from .container import FOURCC_EMBD, BlockFlags, open_writer
    from .payloads import decode_stored, write_payload
    from .provenance import Action
    from .semantic import decode_embedding_payload, encode_embedding_payload

    if (a.codec is None) == (a.tier is None):
        raise UsageError("give exactly one of --codec or --tier")
    bid = _hex(a.block, 16)
    signer = ctx.identity() if a.sign else None
    with open_writer(a.path) as w:
        entry = w.lookup(bid)
        if entry is None or entry.is_tombstone:
            raise UsageError(f"block {a.block} not found")
        from .container import ArtifactReader

        with ArtifactReader(a.path) as rd:
            hdr, stored = rd.read_entry(entry)
        ring = ctx.keyring()
        data = decode_stored(hdr, stored, ring)
        key = key_id = None
        if hdr.flags & BlockFlags.ENCRYPTED:
            key_id = EncryptionEnvelope.from_bytes(stored).key_id
            key = ring[key_id]
        codec = CodecId.NONE
        if a.tier is not None:
            if entry.fourcc != FOURCC_EMBD:
                raise UsageError("--tier applies to embedding blocks only")
            block = decode_embedding_payload(data)
            data = encode_embedding_payload(None, block.normalized, block.extensions,
                                            hsc_compress(block.matrix, a.tier))
        else:
            codec = codec_from_name(a.codec)
        before = entry.payload_length
        write_payload(w, entry.fourcc, data, codec, key, key_id or "", bid, signer, Action.UPDATE)
        snap = w.commit()
        after = w.lookup(bid).payload_length
    doc = {"block_id": bid.hex(), "codec": CodecId(codec).name.lower(), "tier": a.tier,
           "stored_before": before, "stored_after": after, "manifest_version": snap.manifest_version,
           "root_hash": snap.root_hash.hex()}
    return EXIT_OK, doc, f"block {bid.hex()}: {before} -> {after} stored bytes (v{snap.manifest_version})"


def cmd_inspect(ctx: Context, a) -> tuple:
    from .container import ArtifactReader

    with ArtifactReader(a.path) as rd:
        blocks = [{"block_id": e.block_id.hex(), "fourcc": e.fourcc.decode("latin-1"), "offset": e.offset,
                   "payload_length": e.payload_length, "flags": _flag_names(e.flags),
                   "payload_hash": e.payload_hash.hex()}
                  for e in rd.list_blocks(include_tombstones=a.all)]
        doc = {"path": str(a.path), "file_uuid": rd.file_uuid.hex(), "manifest_version": rd.manifest_version,
               "manifest_offset": rd.manifest_offset, "root_hash": rd.root_hash.hex(),
               "created_at": rd.manifest.created_at, "provenance_head": rd.manifest.provenance_head_hash.hex(),
               "file_size": os.path.getsize(a.path), "blocks": blocks}
    lines = [f"{a.path}: v{doc['manifest_version']} root {doc['root_hash']}", f"uuid {doc['file_uuid']}"]
    for b in blocks:
        flags = f" [{','.join(b['flags'])}]" if b["flags"] else ""
        lines.append(f"  {b['block_id']} {b['fourcc']} {b['payload_length']:>10} @ {b['offset']}{flags}")
    return EXIT_OK, doc, "\n".join(lines)


def cmd_verify(ctx: Context, a) -> tuple:
    from .validation import validate

    report = validate(a.path, a.level, keyring=ctx.keyring())
    doc = report.to_dict()
    doc["path"] = str(a.path)
    code = EXIT_OK if report.passed else (EXIT_TAMPER if report.tampered else EXIT_FINDINGS)
    lines = [f"{a.path}: {report.verdict} (level {a.level})"]
    for f in report.findings:
        where = f" block {f.block_id.hex()}" if f.block_id else ""
        lines.append(f"  L{f.level} {f.severity}: {f.code}{where}: {f.message}")
    return code, doc, "\n".join(lines)


def _embd_block(rd, arg: str | None):
    from .container import FOURCC_EMBD

    if arg:
        return _hex(arg, 16)
    blocks = rd.list_blocks(FOURCC_EMBD)
    if len(blocks) != 1:
        raise UsageError(f"artifact has {len(blocks)} embedding blocks; pick one with --block")
    return blocks[0].block_id


def cmd_search(ctx: Context, a) -> tuple:
    from .container import ArtifactReader
    from .semantic import HnswIndex, knn_search, read_embeddings

    q = _load_matrix(a.query_vector)[0]
    with ArtifactReader(a.path) as rd:
        bid = _embd_block(rd, a.block)
        if a.ann:
            hits = HnswIndex(read_embeddings(rd, bid).matrix).search(q, a.k)
        else:
            hits = knn_search(rd, bid, q, a.k)
    doc = {"block_id": bid.hex(), "k": a.k, "method": "hnsw" if a.ann else "exact",
           "results": [{"index": i, "score": s} for i, s in hits]}
    return EXIT_OK, doc, "\n".join(f"{i}\t{s:.6f}" for i, s in hits)


def cmd_attention(ctx: Context, a) -> tuple:
    """Each named EMBD block contributes its centroid as one modality embedding."""
    from .container import ArtifactReader
    from .payloads import decode_stored
    from .provenance import trust_score
    from .semantic import acam_weights, decode_embedding_payload

    if len(a.blocks) < 1:
        raise UsageError("name at least one embedding block")
    with ArtifactReader(a.path) as rd:
        vecs, trusts = [], []
        for h in a.blocks:
            bid = _hex(h, 16)
            hdr, stored = rd.get_block(bid)
            m = decode_embedding_payload(decode_stored(hdr, stored, ctx.keyring())).matrix
            vecs.append(np.asarray(m, dtype=np.float64).mean(axis=0))
            trusts.append(trust_score(rd, bid).score)
    dims = {v.shape[0] for v in vecs}
    if len(dims) != 1:
        raise UsageError("attention needs embedding blocks of one dimension")
    w = acam_weights(np.stack(vecs), np.array(trusts), mask_zero_cs=not a.no_mask)
    doc = {"blocks": list(a.blocks), "trust": trusts, "weights": w.tolist()}
    text = "\n".join(" ".join(f"{x:.6f}" for x in row) for row in w)
    return EXIT_OK, doc, text


def cmd_commitment(ctx: Context, a) -> tuple:
    from .container import ArtifactReader
    from .payloads import read_payload
    from .semantic import SemanticCommitment, csb_commit, csb_verify, decode_embedding_payload

    with ArtifactReader(a.path) as rd:
        bid = _embd_block(rd, a.embedding)
        block = decode_embedding_payload(read_payload(rd, bid, ctx.keyring()))
        src = _hex(a.source, 16) if a.source else block.extensions.get("csb_src")
        if src is None:
            raise UsageError("no --source given and the embedding block names none")
        x = read_payload(rd, src, ctx.keyring())
    if a.action == "create":
        com = csb_commit(x, block.matrix, _hex(a.nonce, 32) if a.nonce else None)
        doc = {"embedding": bid.hex(), "source": src.hex(), "nonce": com.nonce.hex(),
               "commitment": com.commitment.hex()}
        return EXIT_OK, doc, f"commitment {doc['commitment']}\nnonce {doc['nonce']}"
    if a.commitment:
        if not a.nonce:
            raise UsageError("--commitment needs --nonce")
        nonce, c = _hex(a.nonce, 32), _hex(a.commitment, 32)
    elif "csb" in block.extensions:
        stored = SemanticCommitment.from_bytes(block.extensions["csb"])
        nonce, c = stored.nonce, stored.commitment
    else:
        raise UsageError("no --commitment given and the embedding block stores none")
    ok = csb_verify(x, block.matrix, nonce, c)
    doc = {"embedding": bid.hex(), "source": src.hex(), "verified": ok}
    return (EXIT_OK if ok else EXIT_TAMPER), doc, "verified" if ok else "commitment does NOT verify"


def cmd_history(ctx: Context, a) -> tuple:
    from .container import ArtifactReader

    with ArtifactReader(a.path) as rd:
        versions = [{"manifest_version": s.manifest_version, "offset": s.offset, "root_hash": s.root_hash.hex(),
                     "created_at": s.created_at, "entries": s.entry_count} for s in rd.version_chain()]
        ledger = rd.ledger()
        report = rd.chain_report()
        records = [{"index": r.record_index, "agent_id": r.agent_id.hex(), "action": r.action.name.lower(),
                    "targets": [t.hex() for t in r.target_block_ids], "timestamp": r.timestamp,
                    "status": st}
                   for r, st in zip(ledger.records, report.statuses)]
    doc = {"versions": versions, "records": records, "chain": report.to_dict()}
    lines = [f"v{v['manifest_version']} {_iso(v['created_at'])} {v['entries']} entries {v['root_hash'][:16]}"
             for v in versions]
    lines += [f"#{r['index']} {_iso(r['timestamp'])} {r['agent_id'][:8]} {r['action']} {r['status']}"
              for r in records]
    code = EXIT_OK if report.valid else EXIT_TAMPER
    return code, doc, "\n".join(lines)


def cmd_recover(ctx: Context, a) -> tuple:
    from .transactions import recover

    snap = recover(a.path)
    doc = {"manifest_version": snap.manifest_version, "manifest_offset": snap.manifest_offset,
           "root_hash": snap.root_hash.hex()}
    return EXIT_OK, doc, f"recovered to v{snap.manifest_version}"


def cmd_repair(ctx: Context, a) -> tuple:
    from .validation import repair

    out = repair(a.path, keep_backup=a.backup)
    doc = out.to_dict()
    code = {"full": EXIT_OK, "partial": EXIT_FINDINGS}.get(out.verdict, EXIT_TAMPER)
    text = "\n".join([f"{out.verdict}: {out.scenario_detected} -> v{out.restored_version}", *out.actions])
    return code, doc, text


def cmd_forensics(ctx: Context, a) -> tuple:
    from .forensics import ForensicConfig, forensic_report

    cfg = ForensicConfig(rapid_ms=a.rapid_ms)
    doc = forensic_report(a.path, cfg, a.clock, ctx.keyring())
    lines = [f"severity {doc['severity']}; {len(doc['findings'])} findings; {len(doc['timeline'])} events"]
    lines += [f"  {f['severity']:6} {f['rule']}: {f['explanation']}" for f in doc["findings"]]
    return (EXIT_FINDINGS if doc["findings"] else EXIT_OK), doc, "\n".join(lines)


_PERMS = {"read": 1, "write": 2, "admin": 4}


def _policy_from_json(obj):
    from .access import AccessPolicy, AccessRule

    rules = []
    for r in obj.get("rules", []):
        principal = None if r.get("principal", "*") == "*" else _hex(r["principal"], 16)
        sel = r.get("selector", "*")
        if sel == "*":
            selector = None
        elif len(sel) == 4:
            selector = sel.encode("ascii")
        else:
            selector = _hex(sel, 16)
        perms = 0
        for p in r.get("permissions", []):
            if p not in _PERMS:
                raise UsageError(f"unknown permission {p!r}")
            perms |= _PERMS[p]
        rules.append(AccessRule(principal, selector, perms))
    return AccessPolicy(int(obj["policy_version"]), tuple(rules))


def _policy_to_json(policy) -> dict:
    def sel(s):
        if s is None:
            return "*"
        return s.decode("latin-1") if len(s) == 4 else s.hex()

    return {"policy_version": policy.policy_version, "default": "deny",
            "rules": [{"principal": r.principal.hex() if r.principal else "*", "selector": sel(r.selector),
                       "permissions": [n for n, v in _PERMS.items() if r.permissions & v]}
                      for r in policy.rules]}


def cmd_policy(ctx: Context, a) -> tuple:
    from .access import current_policy, set_policy
    from .container import ArtifactReader, open_writer

    if a.action == "show":
        with ArtifactReader(a.path) as rd:
            pol = current_policy(rd)
        doc = {"policy": _policy_to_json(pol) if pol else None}
        return EXIT_OK, doc, json.dumps(doc["policy"], indent=2)
    signer = ctx.identity(required=True)
    if not a.file:
        raise UsageError("policy set needs --file")
    pol = _policy_from_json(json.loads(Path(a.file).read_text()))
    with open_writer(a.path) as w:
        bid = set_policy(w, pol, signer)
        snap = w.commit()
    doc = {"block_id": bid.hex(), "policy_version": pol.policy_version, "manifest_version": snap.manifest_version}
    return EXIT_OK, doc, f"policy v{pol.policy_version} stored in block {bid.hex()}"


def cmd_keygen(ctx: Context, a) -> tuple:
    from .provenance import generate_keypair, save_key

    if Path(a.out).exists() and not a.force:
        raise UsageError(f"{a.out} exists (use --force)")
    key = generate_keypair(a.seed, a.name)
    save_key(key, a.out)
    doc = {"path": str(a.out), "agent_id": key.agent_id.hex(), "public_key": key.identity.public_key.hex(),
           "name": a.name}
    return EXIT_OK, doc, f"agent {doc['agent_id']} written to {a.out}"


def cmd_bench(ctx: Context, a) -> tuple:
    from . import bench

    size = int(a.size_mib) << 20
    if a.workload == "stream":
        res = [bench.bench_stream(size=size, verify=v, workers=a.workers, seed=a.seed) for v in (False, True)]
        body = [r.to_dict() for r in res]
    elif a.workload == "acid":
        body = [bench.bench_acid(size=size, seed=a.seed)]
    elif a.workload == "search":
        body = [bench.bench_search(n=a.n, seed=a.seed, ann=a.ann)]
    else:
        body = [bench.bench_compress(c, m, a.seed) for c, m in (("repeat", "deflate"), ("json", "best"),
                                                               ("gmm", "compact"))]
    doc = {"workload": a.workload, "seed": a.seed, "results": body}
    if a.results:
        with open(a.results, "a") as fh:
            for r in body:
                fh.write(json.dumps({"workload": a.workload, **r}, sort_keys=True) + "\n")
    return EXIT_OK, doc, "\n".join(json.dumps(r, sort_keys=True) for r in body)


# --------------------------------------------------------------------------
# Parser


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--json", action="store_true", default=argparse.SUPPRESS, help="emit one JSON document")
    common.add_argument("--identity", default=argparse.SUPPRESS, help="private key file (or MAIF_IDENTITY)")
    common.add_argument("--keyring", default=argparse.SUPPRESS, help="keyring file (or MAIF_KEYRING)")
    common.add_argument("-v", "--verbose", action="count", default=argparse.SUPPRESS)

    p = _Parser(prog="maif", description="Trusted multimodal artifact container tool.")
    p.add_argument("--version", action="version", version=f"maif {__version__}")
    p.add_argument("--json", action="store_true")
    p.add_argument("--identity")
    p.add_argument("--keyring")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def cmd(name, fn, help_):
        sp = sub.add_parser(name, parents=[common], help=help_)
        sp.set_defaults(fn=fn)
        return sp

    sp = cmd("create", cmd_create, "create an empty artifact")
    sp.add_argument("path")
    sp.add_argument("--uuid", help="file uuid as 32 hex digits")
    sp.add_argument("--force", action="store_true", help="overwrite an existing file")

    sp = cmd("add", cmd_add, "append a block")
    sp.add_argument("path")
    sp.add_argument("--type", choices=("text", "binary", "embeddings", "triples"), required=True)
    sp.add_argument("--file", help="input file ('-' for stdin)")
    sp.add_argument("--text", help="inline text payload")
    sp.add_argument("--compress", metavar="CODEC")
    sp.add_argument("--encrypt", metavar="KEY_ID")
    sp.add_argument("--sign", action="store_true", help="record signed provenance")
    sp.add_argument("--block-id", help="replace an existing block id")
    sp.add_argument("--normalized", action="store_true", help="embeddings are unit-norm rows")
    sp.add_argument("--hsc", choices=("compact", "high", "lossless"), help="store embeddings HSC-compressed")
    sp.add_argument("--bind", metavar="BLOCK_ID", help="bind embeddings to a source block with a commitment")

    sp = cmd("inspect", cmd_inspect, "show header, manifest and blocks (read-only)")
    sp.add_argument("path")
    sp.add_argument("--all", action="store_true", help="include tombstones")

    for name in ("verify", "validate"):
        sp = cmd(name, cmd_verify, "validate an artifact")
        sp.add_argument("path")
        sp.add_argument("--level", type=int, choices=(1, 2, 3, 4), default=4)

    sp = cmd("compress", cmd_compress, "rewrite a block compressed")
    sp.add_argument("path")
    sp.add_argument("--block", required=True, help="block id")
    sp.add_argument("--codec", help="none, deflate, lz4, zstd, brotli or lzma")
    sp.add_argument("--tier", choices=("compact", "high", "lossless"), help="HSC tier for embedding blocks")
    sp.add_argument("--sign", action="store_true", help="record signed provenance")

    sp = cmd("search", cmd_search, "top-k cosine search in an embedding block")
    sp.add_argument("path")
    sp.add_argument("--query-vector", required=True, help=".npy or JSON vector")
    sp.add_argument("-k", type=int, default=10)
    sp.add_argument("--block", help="embedding block id")
    sp.add_argument("--ann", action="store_true", help="approximate search with HNSW")

    sp = cmd("attention", cmd_attention, "trust-weighted attention over embedding blocks")
    sp.add_argument("path")
    sp.add_argument("blocks", nargs="+", help="embedding block ids")
    sp.add_argument("--no-mask", action="store_true", help="do not mask zero composite scores")

    sp = cmd("commitment", cmd_commitment, "create or verify a semantic commitment")
    sp.add_argument("action", choices=("create", "verify"))
    sp.add_argument("path")
    sp.add_argument("--embedding", help="embedding block id")
    sp.add_argument("--source", help="source data block id")
    sp.add_argument("--nonce", help="32-byte nonce as hex")
    sp.add_argument("--commitment", help="32-byte commitment as hex")

    sp = cmd("history", cmd_history, "manifest versions and provenance records")
    sp.add_argument("path")

    sp = cmd("recover", cmd_recover, "roll back to the last committed snapshot")
    sp.add_argument("path")

    sp = cmd("repair", cmd_repair, "repair a damaged artifact in place")
    sp.add_argument("path")
    sp.add_argument("--backup", action="store_true", help="keep <path>.bak")

    sp = cmd("forensics", cmd_forensics, "anomaly findings and incident timeline")
    sp.add_argument("path")
    sp.add_argument("--clock", required=True, help="analysis wall clock, ISO 8601")
    sp.add_argument("--rapid-ms", type=float, default=100.0)

    sp = cmd("policy", cmd_policy, "show or set the access policy")
    sp.add_argument("action", choices=("set", "show"))
    sp.add_argument("path")
    sp.add_argument("--file", help="policy JSON for 'set'")

    sp = cmd("keygen", cmd_keygen, "generate an agent signing key")
    sp.add_argument("out")
    sp.add_argument("--name", default="")
    sp.add_argument("--seed", help="deterministic key seed (testing only)")
    sp.add_argument("--force", action="store_true")

    sp = cmd("bench", cmd_bench, "run a benchmark workload")
    sp.add_argument("workload", choices=("stream", "acid", "search", "compress"))
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--size-mib", type=int, default=1024)
    sp.add_argument("--workers", type=int, default=1)
    sp.add_argument("--n", type=int, default=10000)
    sp.add_argument("--ann", action="store_true")
    sp.add_argument("--results", help="append JSON lines to this file")
    return p


def _exit_for(exc: BaseException) -> int:
    if isinstance(exc, UsageError):
        return EXIT_USAGE
    if isinstance(exc, (WriterLockedError, RecoveryError, OSError)):
        return EXIT_IO
    if isinstance(exc, (TamperError, FormatError, AuthenticationError)):
        return EXIT_TAMPER
    if isinstance(exc, PermissionDenied):
        return EXIT_FINDINGS
    return EXIT_FINDINGS


def run(argv=None, stdout=None, stderr=None) -> int:
    stdout = stdout or sys.stdout
    stderr = stderr or sys.stderr
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    want_json = "--json" in argv
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(str(exc), file=stderr)
        if want_json:
            print(json.dumps({"error": str(exc), "exit_code": EXIT_USAGE}, sort_keys=True), file=stdout)
        return EXIT_USAGE
    ctx = Context(args)
    try:
        code, doc, text = args.fn(ctx, args)
    except (MaifError, OSError, UsageError, ValueError, KeyError) as exc:
        code = _exit_for(exc)
        if isinstance(exc, (ValueError, KeyError)) and not isinstance(exc, MaifError):
            code = EXIT_USAGE
        msg = str(exc) or type(exc).__name__
        print(f"maif {args.command}: {msg}", file=stderr)
        if args.json:
            err = {"error": msg, "error_type": type(exc).__name__, "exit_code": code}
            for attr in ("block_id", "offset"):
                v = getattr(exc, attr, None)
                if v is not None:
                    err[attr] = v.hex() if isinstance(v, bytes) else v
            print(json.dumps(err, sort_keys=True), file=stdout)
        return code
    if args.json:
        print(json.dumps(doc, sort_keys=True), file=stdout)
    elif text:
        print(text, file=stdout)
    return code


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
