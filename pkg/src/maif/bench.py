"""Reproducible desk-scale benchmarks.

Every corpus is generated from a seed recorded in the result metadata, so
ratio and recall numbers replay exactly; only timings vary between runs.
"""

from __future__ import annotations

import json
import os
import tempfile
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .compression import (
    CodecId,
    best_codec,
    codec_from_name,
    compress,
    hsc_compress,
    hsc_fidelity_report,
)
from .container import ArtifactReader, create_artifact

MiB = 1 << 20
GiB = 1 << 30


@dataclass
class BenchResult:
    workload: str
    bytes_processed: int
    wall_time: float
    metadata: dict = field(default_factory=dict)

    @property
    def throughput(self) -> float:
        """MB/s with MB = 10**6 bytes."""
        return self.bytes_processed / self.wall_time / 1e6 if self.wall_time > 0 else float("inf")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["throughput"] = self.throughput
        return d


def append_results(path: str | os.PathLike, results) -> None:
    with open(path, "a") as fh:
        for r in results:
            fh.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")


# --------------------------------------------------------------------------
# Corpora


def repeated_bytes(size: int = MiB, seed: int = 0) -> bytes:
    """A single byte value (chosen by seed) repeated ``size`` times."""
    return bytes([int(np.random.default_rng(seed).integers(256))]) * size


_EVENTS = ("heartbeat", "checkpoint", "inference", "ingest")
_STATUS = ("ok", "ok", "ok", "retry")


def json_corpus(records: int = 20000, seed: int = 0) -> bytes:
    """Line-delimited JSON log drawn from a small vocabulary of agents, events and statuses."""
    rng = np.random.default_rng(seed)
    ev = rng.integers(len(_EVENTS), size=records)
    st = rng.integers(len(_STATUS), size=records)
    ag = rng.integers(4, size=records)
    lines = [
        json.dumps({"agent": f"agent-{a}", "event": _EVENTS[e], "status": _STATUS[s],
                    "schema": "maif.log/1", "region": "eu-west"}, sort_keys=True)
        for e, s, a in zip(ev, st, ag)
    ]
    return ("\n".join(lines) + "\n").encode()


def gaussian_mixture(n: int = 10000, d: int = 384, clusters: int = 8, spread: float = 0.15,
                     seed: int = 0) -> np.ndarray:
    """Unit-norm cluster centres plus isotropic noise of expected norm ``spread``."""
    rng = np.random.default_rng(seed)
    centres = rng.normal(size=(clusters, d))
    centres /= np.linalg.norm(centres, axis=1, keepdims=True)
    labels = rng.integers(clusters, size=n)
    noise = rng.normal(scale=spread / np.sqrt(d), size=(n, d))
    return (centres[labels] + noise).astype(np.float32)


def _block_source(total: int, block: int, seed: int):
    rng = np.random.default_rng(seed)
    left = total
    while left > 0:
        n = min(block, left)
        yield rng.bytes(n)
        left -= n


def build_stream_corpus(path: str | os.PathLike, size: int = GiB, block: int = MiB, seed: int = 0) -> Path:
    """Artifact of ``size`` bytes of seeded random BDAT blocks, committed once."""
    path = Path(path)
    with create_artifact(path, truncate=True, wal=False, durable=False) as w:
        for chunk in _block_source(size, block, seed):
            w.append_block("BDAT", chunk)
        w.finalize()
    return path


# --------------------------------------------------------------------------
# Workloads


def bench_stream(path: str | os.PathLike | None = None, size: int = GiB, verify: bool = True,
                 workers: int = 1, seed: int = 0, block: int = MiB) -> BenchResult:
    """Throughput of stream_blocks over an artifact (generated from ``seed`` when no path is given)."""
    tmp = None
    if path is None:
        tmp = tempfile.TemporaryDirectory()
        path = build_stream_corpus(Path(tmp.name) / "stream.maif", size, block, seed)
    try:
        with ArtifactReader(path) as rd:
            t0 = time.perf_counter()
            total = 0
            for item in rd.stream_blocks(verify=verify, worker_count=workers):
                if item.error is not None:
                    raise item.error
                total += len(item.payload)
            wall = time.perf_counter() - t0
        return BenchResult("stream", total, wall,
                           {"seed": seed, "verify": verify, "workers": workers, "block": block,
                            "artifact_bytes": os.path.getsize(path)})
    finally:
        if tmp is not None:
            tmp.cleanup()


def bench_acid(size: int = GiB, block: int = 4 * MiB, commit_every: int = 16, seed: int = 0,
               directory: str | os.PathLike | None = None) -> dict:
    """Same append workload without and with the WAL.

    The baseline writes the blocks with no WAL and a single durable commit at
    the end; the transactional run logs every append and makes a durable
    WAL commit every ``commit_every`` blocks.  Both pay for the same data
    fsync, so the ratio isolates the transactional machinery.
    """
    chunks = list(_block_source(min(size, 64 * MiB), block, seed))
    nblocks = -(-size // block)

    def run(path: Path, wal: bool) -> float:
        t0 = time.perf_counter()
        with create_artifact(path, truncate=True, wal=wal, durable=True) as w:
            for i in range(nblocks):
                w.append_block("BDAT", chunks[i % len(chunks)])
                if wal and (i + 1) % commit_every == 0:
                    w.commit()
            w.finalize()
        return time.perf_counter() - t0

    with tempfile.TemporaryDirectory(dir=directory) as tmp:
        p = Path(tmp) / "acid.maif"
        raw_t = run(p, wal=False)
        p.unlink()
        txn_t = run(p, wal=True)
    written = nblocks * block
    raw, txn = written / raw_t / 1e6, written / txn_t / 1e6
    return {"raw_mbps": raw, "txn_mbps": txn, "overhead_ratio": raw / txn,
            "bytes": written, "seed": seed, "commit_every": commit_every, "block": block}


def bench_search(n: int = 10000, d: int = 384, k: int = 10, queries: int = 50, seed: int = 0,
                 ann: bool = False) -> dict:
    from .semantic import ExactIndex, HnswIndex, HnswParams

    data = gaussian_mixture(n, d, seed=seed)
    rng = np.random.default_rng(seed + 1)
    qs = data[rng.integers(n, size=queries)] + rng.normal(scale=0.01, size=(queries, d)).astype(np.float32)
    exact = ExactIndex(data)
    times = []
    truth = []
    for q in qs:
        t0 = time.perf_counter()
        truth.append([i for i, _ in exact.search(q, k)])
        times.append((time.perf_counter() - t0) * 1000)
    out = {"n": n, "d": d, "k": k, "queries": queries, "seed": seed,
           "mean_ms": float(np.mean(times)), "p99_ms": float(np.percentile(times, 99)), "recall": 1.0}
    if ann:
        t0 = time.perf_counter()
        index = HnswIndex(data, HnswParams(seed=seed))
        out["ann_build_s"] = time.perf_counter() - t0
        hits = 0
        ann_times = []
        for q, t in zip(qs, truth):
            t0 = time.perf_counter()
            got = {i for i, _ in index.search(q, k)}
            ann_times.append((time.perf_counter() - t0) * 1000)
            hits += len(got & set(t))
        out["ann_recall"] = hits / (k * queries)
        out["ann_mean_ms"] = float(np.mean(ann_times))
    return out


def bench_compress(corpus: str = "json", method: str = "best", seed: int = 0) -> dict:
    """``corpus`` is repeat, json or gmm; ``method`` is a codec name, "best", or an HSC tier."""
    if corpus == "gmm":
        x = gaussian_mixture(seed=seed)
        t0 = time.perf_counter()
        art = hsc_compress(x, method if method != "best" else "compact", seed=seed)
        wall = time.perf_counter() - t0
        rep = hsc_fidelity_report(x, art)
        return {"corpus": corpus, "method": method, "tier": art.tier.name.lower(), "seed": seed,
                "ratio": rep.ratio, "mean_cosine": rep.mean_cosine, "mbps": x.nbytes / wall / 1e6}
    data = repeated_bytes(seed=seed) if corpus == "repeat" else json_corpus(seed=seed)
    t0 = time.perf_counter()
    if method == "best":
        codec, out = best_codec(data)
    else:
        codec = codec_from_name(method)
        out = compress(codec, data)
    wall = time.perf_counter() - t0
    return {"corpus": corpus, "method": method, "codec": CodecId(codec).name.lower(), "seed": seed,
            "ratio": len(data) / len(out), "mbps": len(data) / wall / 1e6, "bytes": len(data)}
