"""Embedded semantic layer.

EMBD payload layout (little-endian)::

    n u32 | d u32 | dtype u8 (0 = f32) | normalized u8 | subformat u8 | reserved u8
    ext_len u32 | ext map (MCBE: u32 count, (text key, bytes value)*)
    zero padding to a multiple of 64 | data

``subformat`` 0 stores the raw n x d row-major f32 matrix; 1 stores an HSC
artifact.  Because block payloads are 64-byte aligned on disk, raw matrix
data is 64-byte aligned in the file as well.
"""

from __future__ import annotations

import hashlib
import heapq
import hmac
import math
import secrets
import struct
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .compression import HscArtifact, hsc_decompress
from .container import FOURCC_EMBD, FOURCC_KGRF, ArtifactReader, ArtifactWriter, align_up
from .errors import EmbeddingError, FormatError
from .mcbe import Decoder, Encoder
from .provenance import Action

NORM_TOL = 1e-4
SUBFORMAT_RAW = 0
SUBFORMAT_HSC = 1
_EMBD_FIXED = struct.Struct("<IIBBBBI")


@dataclass
class EmbeddingBlock:
    matrix: np.ndarray
    normalized: bool = False
    extensions: dict[str, bytes] = field(default_factory=dict)
    hsc: HscArtifact | None = None

    @property
    def count(self) -> int:
        return int(self.matrix.shape[0])

    @property
    def dim(self) -> int:
        return int(self.matrix.shape[1])


def _check_matrix(matrix) -> np.ndarray:
    m = np.asarray(matrix)
    if m.ndim != 2:
        raise EmbeddingError(f"embedding matrix must be 2-D, got shape {m.shape}")
    if m.shape[0] >= 1 << 32 or m.shape[1] >= 1 << 32:
        raise EmbeddingError("embedding dimensions overflow u32")
    if m.shape[0] and not np.isfinite(m).all():
        raise EmbeddingError("embedding matrix contains non-finite values")
    return np.ascontiguousarray(m, dtype="<f4")


def check_normalized(m: np.ndarray) -> None:
    norms = np.linalg.norm(m.astype(np.float64), axis=1)
    bad = np.flatnonzero(np.abs(norms - 1.0) > NORM_TOL)
    if bad.size:
        raise EmbeddingError(f"row {bad[0]} has L2 norm {norms[bad[0]]:.6f}, expected unit norm")


def _encode_ext(ext: dict[str, bytes]) -> bytes:
    return Encoder().seq(sorted(ext.items()), lambda e, kv: e.text(kv[0]).bytes(kv[1])).getvalue()


def encode_embedding_payload(matrix, normalized: bool = False, extensions: dict[str, bytes] | None = None,
                             hsc: HscArtifact | None = None) -> bytes:
    ext = _encode_ext(extensions or {})
    if hsc is not None:
        n, d = hsc.shape
        data, sub = hsc.to_bytes(), SUBFORMAT_HSC
    else:
        m = _check_matrix(matrix)
        if normalized:
            check_normalized(m)
        n, d = m.shape
        data, sub = m.tobytes(), SUBFORMAT_RAW
    head = _EMBD_FIXED.pack(n, d, 0, int(bool(normalized)), sub, 0, len(ext)) + ext
    return head + bytes(align_up(len(head)) - len(head)) + data


def parse_embedding_header(payload: bytes) -> tuple[int, int, bool, int, dict[str, bytes], int]:
    """(n, d, normalized, subformat, extensions, data_offset) without touching the data."""
    if len(payload) < _EMBD_FIXED.size:
        raise FormatError("EMBD payload shorter than its fixed header")
    n, d, dtype, norm, sub, _, ext_len = _EMBD_FIXED.unpack_from(payload)
    if dtype != 0:
        raise FormatError(f"unsupported embedding dtype {dtype}")
    if _EMBD_FIXED.size + ext_len > len(payload):
        raise FormatError("EMBD extension map overruns payload")
    dec = Decoder(payload[_EMBD_FIXED.size:_EMBD_FIXED.size + ext_len])
    ext = dict(dec.seq(lambda x: (x.text(), x.bytes())))
    dec.expect_end()
    return n, d, bool(norm), sub, ext, align_up(_EMBD_FIXED.size + ext_len)


def decode_embedding_payload(payload: bytes, check: bool = True) -> EmbeddingBlock:
    n, d, norm, sub, ext, off = parse_embedding_header(payload)
    body = payload[off:]
    if sub == SUBFORMAT_RAW:
        if len(body) != n * d * 4:
            raise FormatError(f"EMBD payload holds {len(body)} data bytes, expected n*d*4 = {n * d * 4}")
        m = np.frombuffer(body, dtype="<f4").reshape(n, d)
        if check and norm and n:
            check_normalized(m)
        return EmbeddingBlock(m, norm, ext)
    if sub == SUBFORMAT_HSC:
        art = HscArtifact.from_bytes(body)
        if art.shape != (n, d):
            raise FormatError("HSC artifact shape disagrees with EMBD header")
        return EmbeddingBlock(hsc_decompress(art), norm, ext, art)
    raise FormatError(f"unknown EMBD subformat {sub}")


def write_embeddings(writer: ArtifactWriter, matrix, normalized: bool = False,
                     extensions: dict[str, bytes] | None = None, hsc: HscArtifact | None = None,
                     block_id: bytes | None = None, signer=None) -> bytes:
    payload = encode_embedding_payload(matrix, normalized, extensions, hsc)
    replacing = block_id is not None and writer.lookup(block_id) is not None
    bid = writer.append_block(FOURCC_EMBD, payload, block_id=block_id)
    writer.record(Action.UPDATE if replacing else Action.APPEND, [bid], signer)
    return bid


def read_embeddings(reader: ArtifactReader, block_id: bytes, verify: bool = True) -> EmbeddingBlock:
    hdr, payload = reader.get_block(block_id, verify)
    if hdr.fourcc != FOURCC_EMBD:
        raise EmbeddingError(f"block {block_id.hex()} is {hdr.fourcc!r}, not EMBD")
    return decode_embedding_payload(payload)


# --------------------------------------------------------------------------
# Exact search


def _normalize_rows(m: np.ndarray) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    norms = np.linalg.norm(m, axis=1, keepdims=True)
    out = np.zeros_like(m)
    np.divide(m, norms, out=out, where=norms > 0)
    return out


class ExactIndex:
    """Brute-force cosine index over an (n, d) matrix, normalized once up front."""

    def __init__(self, matrix: np.ndarray):
        m = np.asarray(matrix)
        if m.ndim != 2 or m.shape[0] == 0:
            raise EmbeddingError("cannot search an empty embedding block")
        self.dim = m.shape[1]
        # Score each distinct row once so duplicates tie exactly; BLAS may
        # round the same row differently at different positions.
        unit = _normalize_rows(m)
        self.unit, self.inverse = np.unique(unit, axis=0, return_inverse=True)
        self.inverse = self.inverse.reshape(-1)
        if len(self.unit) == len(unit):
            self.unit, self.inverse = unit, None

    def search(self, query, k: int) -> list[tuple[int, float]]:
        q = np.asarray(query, dtype=np.float64).reshape(-1)
        if q.shape[0] != self.dim:
            raise EmbeddingError(f"query has dimension {q.shape[0]}, block has {self.dim}")
        if k < 1:
            raise ValueError("k must be >= 1")
        qn = np.linalg.norm(q)
        sims = self.unit @ (q / qn) if qn > 0 else np.zeros(self.unit.shape[0])
        if self.inverse is not None:
            sims = sims[self.inverse]
        k = min(k, sims.shape[0])
        if k < sims.shape[0]:
            part = np.argpartition(-sims, k - 1)[:k]
            # keep every row tied with the k-th score so tie-breaking stays exact
            kth = sims[part].min()
            part = np.flatnonzero(sims >= kth)
        else:
            part = np.arange(sims.shape[0])
        order = part[np.lexsort((part, -sims[part]))][:k]
        return [(int(i), float(sims[i])) for i in order]


def knn(matrix: np.ndarray, query, k: int) -> list[tuple[int, float]]:
    return ExactIndex(matrix).search(query, k)


def knn_search(reader: ArtifactReader, block_id: bytes, query, k: int) -> list[tuple[int, float]]:
    """Exact top-k by cosine; ties broken by lower row index."""
    index = reader.cache(("exact", block_id), lambda: ExactIndex(read_embeddings(reader, block_id).matrix))
    return index.search(query, k)


# --------------------------------------------------------------------------
# Approximate search


@dataclass(frozen=True)
class HnswParams:
    m: int = 16
    ef_construction: int = 100
    ef_search: int = 64
    seed: int = 0


class HnswIndex:
    """Hierarchical navigable small-world graph over cosine distance."""

    def __init__(self, matrix: np.ndarray, params: HnswParams = HnswParams()):
        if params.m < 2 or params.ef_construction < 1 or params.ef_search < 1:
            raise ValueError(f"unsupported HNSW params {params}")
        m = np.asarray(matrix)
        if m.ndim != 2 or m.shape[0] == 0:
            raise EmbeddingError("cannot index an empty embedding block")
        self.params = params
        self.unit = _normalize_rows(m)
        self.dim = m.shape[1]
        self._rng = np.random.default_rng(params.seed)
        self._ml = 1.0 / math.log(params.m)
        self.levels: list[int] = []
        self.graph: list[list[list[int]]] = []  # graph[layer][node] -> neighbours
        self.entry = -1
        for i in range(m.shape[0]):
            self._insert(i)

    def _dist(self, q: np.ndarray, ids) -> np.ndarray:
        return 1.0 - self.unit[ids] @ q

    def _search_layer(self, q: np.ndarray, entries: list[int], ef: int, layer: int) -> list[tuple[float, int]]:
        visited = set(entries)
        d0 = self._dist(q, entries)
        cand = [(float(d), e) for d, e in zip(d0, entries)]
        heapq.heapify(cand)
        best = [(-d, e) for d, e in cand]
        heapq.heapify(best)
        while len(best) > ef:
            heapq.heappop(best)
        adj = self.graph[layer]
        while cand:
            d, node = heapq.heappop(cand)
            if d > -best[0][0] and len(best) >= ef:
                break
            nbrs = [x for x in adj[node] if x not in visited]
            if not nbrs:
                continue
            visited.update(nbrs)
            for dn, nb in zip(self._dist(q, nbrs), nbrs):
                dn = float(dn)
                if len(best) < ef or dn < -best[0][0]:
                    heapq.heappush(cand, (dn, nb))
                    heapq.heappush(best, (-dn, nb))
                    if len(best) > ef:
                        heapq.heappop(best)
        return sorted((-nd, e) for nd, e in best)

    def _select(self, q_id: int, cands: list[tuple[float, int]], m: int) -> list[int]:
        """Neighbour selection heuristic: keep candidates closer to q than to any kept neighbour."""
        ids = [c for _, c in cands]
        if len(ids) <= m:
            return ids
        vecs = self.unit[ids]
        pair = 1.0 - vecs @ vecs.T
        # closest distance from each candidate to any neighbour kept so far
        nearest = np.full(len(ids), np.inf)
        dists = [d for d, _ in cands]
        kept: list[int] = []
        for j in range(len(ids)):
            if len(kept) >= m:
                break
            if nearest[j] < dists[j]:
                continue
            kept.append(j)
            np.minimum(nearest, pair[j], out=nearest)
        if len(kept) < m:
            chosen = set(kept)
            kept += [j for j in range(len(ids)) if j not in chosen][:m - len(kept)]
        return [ids[j] for j in kept]

    def _insert(self, i: int) -> None:
        level = int(-math.log(1.0 - self._rng.random()) * self._ml)
        self.levels.append(level)
        while len(self.graph) <= level:
            self.graph.append([[] for _ in range(len(self.levels) - 1)])
        for layer in self.graph:
            layer.append([])
        if self.entry < 0:
            self.entry = i
            return
        q = self.unit[i]
        ep = [self.entry]
        top = self.levels[self.entry]
        for layer in range(top, level, -1):
            ep = [self._search_layer(q, ep, 1, layer)[0][1]]
        for layer in range(min(level, top), -1, -1):
            found = self._search_layer(q, ep, self.params.ef_construction, layer)
            mmax = self.params.m * 2 if layer == 0 else self.params.m
            nbrs = self._select(i, found, self.params.m)
            self.graph[layer][i] = list(nbrs)
            for nb in nbrs:
                lst = self.graph[layer][nb]
                lst.append(i)
                if len(lst) > mmax:
                    d = self._dist(self.unit[nb], lst)
                    self.graph[layer][nb] = self._select(nb, sorted(zip(d.tolist(), lst)), mmax)
            ep = [e for _, e in found]
        if level > top:
            self.entry = i

    def search(self, query, k: int) -> list[tuple[int, float]]:
        q = np.asarray(query, dtype=np.float64).reshape(-1)
        if q.shape[0] != self.dim:
            raise EmbeddingError(f"query has dimension {q.shape[0]}, index has {self.dim}")
        qn = np.linalg.norm(q)
        q = q / qn if qn > 0 else q
        ep = [self.entry]
        for layer in range(self.levels[self.entry], 0, -1):
            ep = [self._search_layer(q, ep, 1, layer)[0][1]]
        found = self._search_layer(q, ep, max(self.params.ef_search, k), 0)
        res = sorted(((1.0 - d, e) for d, e in found), key=lambda t: (-t[0], t[1]))[:k]
        return [(int(e), float(s)) for s, e in res]


def build_ann_index(reader: ArtifactReader, block_id: bytes, params: HnswParams = HnswParams()) -> HnswIndex:
    return HnswIndex(read_embeddings(reader, block_id).matrix, params)


def ann_search(index: HnswIndex, query, k: int) -> list[tuple[int, float]]:
    return index.search(query, k)


# --------------------------------------------------------------------------
# Adaptive cross-modal attention


def _gram(e: np.ndarray) -> np.ndarray:
    # elementwise products summed per pair, so each entry is rounded the same
    # way wherever its row lands; a BLAS matmul would break exact equivariance
    return (e[:, None, :] * e[None, :, :]).sum(axis=-1)


def composite_score(embeddings: np.ndarray, trusts: np.ndarray) -> np.ndarray:
    """CS(E_i, E_j) = ((cos + 1) / 2) * min(t_i, t_j)."""
    unit = _normalize_rows(embeddings)
    cos = np.clip(_gram(unit), -1.0, 1.0)
    return (cos + 1.0) / 2.0 * np.minimum.outer(trusts, trusts)


def acam_weights(embeddings, trusts, mask_zero_cs: bool = True) -> np.ndarray:
    """Trust-weighted attention matrix over m modality embeddings.

    logit(i, j) = (E_i . E_j / sqrt(d)) * CS(E_i, E_j), softmax over j.  With
    ``mask_zero_cs`` entries whose composite score is zero get weight 0; a
    row where every entry is masked falls back to the unmasked softmax.
    """
    e = np.asarray(embeddings, dtype=np.float64)
    if e.ndim != 2 or e.shape[0] == 0:
        raise ValueError("acam needs a non-empty (m, d) embedding matrix")
    t = np.asarray(trusts, dtype=np.float64).reshape(-1)
    if t.shape[0] != e.shape[0]:
        raise ValueError(f"{e.shape[0]} embeddings but {t.shape[0]} trust scores")
    if ((t < 0) | (t > 1)).any() or not np.isfinite(t).all():
        raise ValueError("trust scores must lie in [0, 1]")
    cs = composite_score(e, t)
    logits = _gram(e) / math.sqrt(e.shape[1]) * cs
    mask = cs > 0 if mask_zero_cs else np.ones_like(cs, dtype=bool)
    mask[~mask.any(axis=1)] = True
    z = np.where(mask, logits, -np.inf)
    z = z - z.max(axis=1, keepdims=True)
    w = np.where(mask, np.exp(z), 0.0)
    # sorted row sums are independent of column order
    return w / np.sort(w, axis=1).sum(axis=1, keepdims=True)


# --------------------------------------------------------------------------
# Cryptographic semantic binding


@dataclass(frozen=True)
class SemanticCommitment:
    commitment: bytes
    nonce: bytes

    def to_bytes(self) -> bytes:
        return self.nonce + self.commitment

    @classmethod
    def from_bytes(cls, b: bytes) -> "SemanticCommitment":
        if len(b) != 64:
            raise FormatError("commitment record must be 64 bytes (nonce || C)")
        return cls(b[32:], b[:32])


def encode_embedding(embedding) -> bytes:
    return np.ascontiguousarray(np.asarray(embedding, dtype="<f4").reshape(-1)).tobytes()


def csb_commit(x: bytes, embedding, nonce: bytes | None = None) -> SemanticCommitment:
    """C = SHA-256(f32le(E(x)) || x || nonce)."""
    nonce = secrets.token_bytes(32) if nonce is None else bytes(nonce)
    if len(nonce) != 32:
        raise ValueError("nonce must be 32 bytes")
    c = hashlib.sha256(encode_embedding(embedding) + bytes(x) + nonce).digest()
    return SemanticCommitment(c, nonce)


def csb_verify(x: bytes, embedding, nonce: bytes, commitment: bytes) -> bool:
    return csb_verify_encoded(x, encode_embedding(embedding), nonce, commitment)


def csb_verify_encoded(x: bytes, encoded: bytes, nonce: bytes, commitment: bytes) -> bool:
    """csb_verify with the embedding already in its f32le byte encoding."""
    if len(nonce) != 32 or len(commitment) != 32:
        return False
    expect = hashlib.sha256(bytes(encoded) + bytes(x) + bytes(nonce)).digest()
    return hmac.compare_digest(expect, bytes(commitment))


def bind_extensions(source_block_id: bytes, x: bytes, matrix, nonce: bytes | None = None) -> dict[str, bytes]:
    """EMBD extension entries binding ``matrix`` to the source block's bytes."""
    com = csb_commit(x, matrix, nonce)
    return {"csb": com.to_bytes(), "csb_src": bytes(source_block_id)}


# --------------------------------------------------------------------------
# Knowledge-graph triples


@dataclass(frozen=True)
class Triple:
    subject: str
    predicate: str
    object: str

    def __post_init__(self):
        if not self.subject or not self.predicate:
            raise ValueError("triples need a non-empty subject and predicate")


WILDCARD = "?"


def encode_triples(triples: Iterable[Triple]) -> bytes:
    return Encoder().seq(triples, lambda e, t: e.text(t.subject).text(t.predicate).text(t.object)).getvalue()


def decode_triples(payload: bytes) -> list[Triple]:
    dec = Decoder(payload)
    out = dec.seq(lambda d: Triple(d.text(), d.text(), d.text()))
    dec.expect_end()
    return out


def add_triples(writer: ArtifactWriter, triples: Sequence[Triple | tuple], signer=None) -> bytes:
    ts = [t if isinstance(t, Triple) else Triple(*t) for t in triples]
    bid = writer.append_block(FOURCC_KGRF, encode_triples(ts))
    writer.record(Action.APPEND, [bid], signer)
    return bid


def _normalize_pattern(pattern) -> tuple:
    if len(pattern) != 3:
        raise ValueError("triple pattern needs exactly three positions")
    out = []
    for p in pattern:
        if p is None or p == WILDCARD:
            out.append(None)
        elif isinstance(p, str):
            out.append(p)
        else:
            raise ValueError(f"malformed pattern element {p!r}")
    return tuple(out)


def match_triples(triples: Iterable[Triple], pattern) -> list[Triple]:
    s, p, o = _normalize_pattern(pattern)
    return [t for t in triples
            if (s is None or t.subject == s) and (p is None or t.predicate == p) and (o is None or t.object == o)]


def query_triples(reader: ArtifactReader, pattern) -> list[Triple]:
    pattern = _normalize_pattern(pattern)
    found: list[Triple] = []
    for entry in reader.list_blocks(FOURCC_KGRF):
        found.extend(match_triples(decode_triples(reader.read_entry(entry)[1]), pattern))
    return found
