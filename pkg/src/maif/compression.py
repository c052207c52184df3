"""Codec framework for block payloads and hierarchical semantic compression (HSC).

Codec ids are part of the file format.  DEFLATE and the identity codec are
always present; the others depend on which optional packages are installed.

HSC compresses an embedding matrix in three stages: k-means clustering,
vector quantization against the resulting codebook, then DEFLATE over the
serialized codebook/codes.  Three tiers trade size for fidelity:

* ``compact``       -- x_hat = centroid[code]
* ``high_fidelity`` -- x_hat = centroid[code] + (q / 127) * scale[code], q int8
* ``lossless``      -- centroid bits XOR row bits, byte-shuffled, bit-exact
"""

from __future__ import annotations

import lzma
import math
import zlib
from dataclasses import dataclass
from enum import IntEnum
from typing import Callable

import numpy as np

from .errors import CodecError, FormatError, UnsupportedCodecError
from .mcbe import Decoder, Encoder

try:
    import zstandard as _zstd
except ImportError:  # optional codec
    _zstd = None
try:
    import lz4.frame as _lz4
except ImportError:
    _lz4 = None
try:
    import brotli as _brotli
except ImportError:
    _brotli = None


class CodecId(IntEnum):
    NONE = 0
    DEFLATE = 1
    LZ4 = 2
    ZSTD = 3
    BROTLI = 4
    LZMA2 = 5


CODEC_NAMES = {
    "none": CodecId.NONE, "deflate": CodecId.DEFLATE, "zlib": CodecId.DEFLATE,
    "lz4": CodecId.LZ4, "zstd": CodecId.ZSTD, "brotli": CodecId.BROTLI,
    "lzma": CodecId.LZMA2, "lzma2": CodecId.LZMA2, "xz": CodecId.LZMA2,
}

_XZ_FILTERS = [{"id": lzma.FILTER_LZMA2, "preset": 9}]


def _codecs() -> dict[CodecId, tuple[Callable[[bytes], bytes], Callable[[bytes], bytes]]]:
    table = {
        CodecId.NONE: (bytes, bytes),
        CodecId.DEFLATE: (lambda b: zlib.compress(b, 9), zlib.decompress),
        CodecId.LZMA2: (lambda b: lzma.compress(b, format=lzma.FORMAT_XZ, filters=_XZ_FILTERS),
                        lambda b: lzma.decompress(b, format=lzma.FORMAT_XZ)),
    }
    if _lz4 is not None:
        table[CodecId.LZ4] = (lambda b: _lz4.compress(b, compression_level=12), _lz4.decompress)
    if _zstd is not None:
        table[CodecId.ZSTD] = (lambda b: _zstd.ZstdCompressor(level=19).compress(b),
                               lambda b: _zstd.ZstdDecompressor().decompress(b, max_output_size=1 << 34))
    if _brotli is not None:
        table[CodecId.BROTLI] = (lambda b: _brotli.compress(b, quality=11), _brotli.decompress)
    return table


_TABLE = _codecs()


def available_codecs() -> list[CodecId]:
    return sorted(_TABLE)


def codec_from_name(name: str | int) -> CodecId:
    if isinstance(name, int):
        return CodecId(name)
    try:
        return CODEC_NAMES[name.lower()]
    except KeyError:
        raise UnsupportedCodecError(f"unknown codec {name!r}") from None


def _lookup(codec_id: int):
    try:
        return _TABLE[CodecId(codec_id)]
    except (ValueError, KeyError):
        raise UnsupportedCodecError(f"codec {codec_id} is not available") from None


def compress(codec_id: int, data: bytes) -> bytes:
    enc, _ = _lookup(codec_id)
    return enc(bytes(data))


def decompress(codec_id: int, data: bytes, expected_len: int | None = None) -> bytes:
    _, dec = _lookup(codec_id)
    try:
        out = dec(bytes(data))
    except Exception as exc:  # each library raises its own error type
        raise CodecError(f"corrupt {CodecId(codec_id).name} stream: {exc}") from None
    if expected_len is not None and len(out) != expected_len:
        raise CodecError(f"decompressed {len(out)} bytes, expected {expected_len}")
    return out


def best_codec(data: bytes, candidates=None) -> tuple[CodecId, bytes]:
    """Smallest output among the available (or given) codecs."""
    best = (CodecId.NONE, bytes(data))
    for cid in candidates or available_codecs():
        if cid == CodecId.NONE:
            continue
        out = compress(cid, data)
        if len(out) < len(best[1]):
            best = (cid, out)
    return best


# --------------------------------------------------------------------------
# k-means


@dataclass
class KMeansResult:
    centroids: np.ndarray  # (k, d) float32
    labels: np.ndarray  # (n,) int64
    iterations: int


def _sq_dists(x: np.ndarray, c: np.ndarray, x_sq: np.ndarray) -> np.ndarray:
    d = x_sq[:, None] - 2.0 * (x @ c.T) + np.einsum("ij,ij->i", c, c)[None, :]
    np.maximum(d, 0.0, out=d)
    return d


def _cluster_sums(x: np.ndarray, labels: np.ndarray, k: int) -> np.ndarray:
    order = np.argsort(labels, kind="stable")
    sorted_labels = labels[order]
    present, starts = np.unique(sorted_labels, return_index=True)
    sums = np.zeros((k, x.shape[1]), dtype=x.dtype)
    sums[present] = np.add.reduceat(x[order], starts, axis=0)
    return sums


def kmeans(x: np.ndarray, k: int, seed: int, max_iter: int = 25, tol: float = 1e-4) -> KMeansResult:
    """Lloyd's algorithm with k-means++ seeding.

    Stops after ``max_iter`` iterations or once no centroid moves more than
    ``tol``.  Seeding stops early when every point already coincides with a
    chosen centre, so duplicate-heavy data yields fewer than ``k`` clusters.
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    rng = np.random.default_rng(seed)
    x_sq = np.einsum("ij,ij->i", x, x)

    centers = [x[rng.integers(n)]]
    closest = _sq_dists(x, centers[0][None, :], x_sq)[:, 0]
    while len(centers) < k:
        total = closest.sum()
        if total <= 0.0:
            break
        idx = rng.choice(n, p=closest / total)
        centers.append(x[idx])
        closest = np.minimum(closest, _sq_dists(x, x[idx][None, :], x_sq)[:, 0])
    c = np.array(centers)

    labels = np.zeros(n, dtype=np.int64)
    it = 0
    for it in range(1, max_iter + 1):
        labels = _sq_dists(x, c, x_sq).argmin(axis=1)
        counts = np.bincount(labels, minlength=len(c))
        sums = _cluster_sums(x, labels, len(c))
        new_c = c.copy()
        nz = counts > 0
        new_c[nz] = sums[nz] / counts[nz, None]
        shift = np.sqrt(((new_c - c) ** 2).sum(axis=1)).max()
        c = new_c
        if shift < tol:
            break
    labels = _sq_dists(x, c, x_sq).argmin(axis=1)
    return KMeansResult(c.astype(np.float32), labels, it)


# --------------------------------------------------------------------------
# HSC


class HscTier(IntEnum):
    LOSSLESS = 0
    HIGH_FIDELITY = 1
    COMPACT = 2


TIER_NAMES = {"lossless": HscTier.LOSSLESS, "high": HscTier.HIGH_FIDELITY,
              "high_fidelity": HscTier.HIGH_FIDELITY, "compact": HscTier.COMPACT}

# escalation order when a tier misses the fidelity target
_ESCALATE = {HscTier.COMPACT: HscTier.HIGH_FIDELITY, HscTier.HIGH_FIDELITY: HscTier.LOSSLESS}


def hsc_cluster_count(n: int) -> int:
    return min(256, max(1, math.ceil(math.sqrt(n))))


@dataclass
class HscArtifact:
    tier: HscTier
    requested_tier: HscTier
    seed: int
    codebook: np.ndarray  # (k, d) float32
    codes: np.ndarray  # (n,) uint8 or uint16
    residual_scales: np.ndarray | None = None  # (k,) float32, high_fidelity
    residuals: np.ndarray | None = None  # (n, d) int8 high_fidelity, (n, d) uint32 xor lossless

    @property
    def k(self) -> int:
        return self.codebook.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return int(self.codes.shape[0]), int(self.codebook.shape[1])

    @property
    def escalated(self) -> bool:
        return self.tier != self.requested_tier

    def to_bytes(self) -> bytes:
        """MCBE serialization, then DEFLATE over the whole record."""
        n, d = self.shape
        enc = Encoder()
        enc.u8(int(self.tier)).u8(int(self.requested_tier)).u16(self.k).u64(self.seed).u32(n).u32(d)
        enc.bytes(self.codebook.astype("<f4").tobytes())
        enc.bytes(self.codes.astype("<u1" if self.k <= 256 else "<u2").tobytes())
        if self.tier == HscTier.HIGH_FIDELITY:
            enc.bytes(self.residual_scales.astype("<f4").tobytes())
            enc.bytes(self.residuals.astype("i1").tobytes())
        elif self.tier == HscTier.LOSSLESS:
            enc.bytes(b"")
            enc.bytes(_shuffle(self.residuals.astype("<u4")))
        else:
            enc.bytes(b"").bytes(b"")
        return zlib.compress(enc.getvalue(), 9)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "HscArtifact":
        try:
            raw = zlib.decompress(blob)
        except zlib.error as exc:
            raise FormatError(f"corrupt HSC stream: {exc}") from None
        dec = Decoder(raw)
        try:
            tier, req = HscTier(dec.u8()), HscTier(dec.u8())
        except ValueError:
            raise FormatError("unknown HSC tier") from None
        k, seed, n, d = dec.u16(), dec.u64(), dec.u32(), dec.u32()
        codebook = np.frombuffer(dec.bytes(), "<f4")
        codes = np.frombuffer(dec.bytes(), "<u1" if k <= 256 else "<u2")
        scales_b, resid_b = dec.bytes(), dec.bytes()
        dec.expect_end()
        if codebook.size != k * d or codes.size != n:
            raise FormatError("HSC codebook/codes size mismatch")
        codebook = codebook.reshape(k, d).astype(np.float32)
        if n and codes.max(initial=0) >= k:
            raise FormatError("HSC code out of range")
        scales = resid = None
        if tier == HscTier.HIGH_FIDELITY:
            scales = np.frombuffer(scales_b, "<f4").astype(np.float32)
            resid = np.frombuffer(resid_b, "i1").reshape(n, d)
            if scales.size != k:
                raise FormatError("HSC residual scale count mismatch")
        elif tier == HscTier.LOSSLESS:
            resid = _unshuffle(resid_b, 4).view("<u4").reshape(n, d)
        return cls(tier, req, seed, codebook, codes.copy(), scales, resid)


def _shuffle(arr: np.ndarray) -> bytes:
    """Group byte planes (all byte-0s, then byte-1s, ...) so DEFLATE sees the runs."""
    b = np.ascontiguousarray(arr).view(np.uint8).reshape(-1, arr.dtype.itemsize)
    return b.T.tobytes()


def _unshuffle(blob: bytes, width: int) -> np.ndarray:
    planes = np.frombuffer(blob, np.uint8)
    if planes.size % width:
        raise FormatError("shuffled buffer length not a multiple of element width")
    return np.ascontiguousarray(planes.reshape(width, -1).T).reshape(-1)


def _row_cosines(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    num = np.einsum("ij,ij->i", a, b)
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    out = np.ones(len(a))
    both = (na > 0) & (nb > 0)
    out[both] = num[both] / (na[both] * nb[both])
    # one zero vector and one non-zero vector share no direction
    out[(na > 0) != (nb > 0)] = 0.0
    # exact reconstructions report exactly 1 rather than a rounded dot product
    out[(a == b).all(axis=1)] = 1.0
    return np.clip(out, -1.0, 1.0)


def _encode_tier(x32: np.ndarray, tier: HscTier, requested: HscTier, seed: int,
                 km: KMeansResult) -> HscArtifact:
    codebook = km.centroids
    k = codebook.shape[0]
    codes = km.labels.astype(np.uint8 if k <= 256 else np.uint16)
    base = codebook[km.labels]
    if tier == HscTier.COMPACT:
        return HscArtifact(tier, requested, seed, codebook, codes)
    if tier == HscTier.HIGH_FIDELITY:
        resid = x32 - base
        scales = np.zeros(k, dtype=np.float32)
        np.maximum.at(scales, km.labels, np.abs(resid).max(axis=1))
        s = scales[km.labels][:, None]
        q = np.zeros_like(resid)
        np.divide(resid, s, out=q, where=s > 0)
        q = np.clip(np.rint(q * 127.0), -127, 127).astype(np.int8)
        return HscArtifact(tier, requested, seed, codebook, codes, scales, q)
    xor = x32.view(np.uint32) ^ np.ascontiguousarray(base).view(np.uint32)
    return HscArtifact(tier, requested, seed, codebook, codes, None, xor)


def hsc_decompress(art: HscArtifact) -> np.ndarray:
    base = art.codebook[art.codes.astype(np.int64)]
    if art.tier == HscTier.COMPACT:
        return base.astype(np.float32)
    if art.tier == HscTier.HIGH_FIDELITY:
        s = art.residual_scales[art.codes.astype(np.int64)][:, None]
        return (base + (art.residuals.astype(np.float32) / np.float32(127.0)) * s).astype(np.float32)
    bits = np.ascontiguousarray(base, dtype=np.float32).view(np.uint32) ^ art.residuals
    return bits.view(np.float32)


def hsc_compress(matrix: np.ndarray, tier: HscTier | str = HscTier.COMPACT, target_fidelity: float = 0.95,
                 seed: int = 0) -> HscArtifact:
    """Compress an (n, d) matrix, escalating the tier until mean cosine >= target_fidelity."""
    if isinstance(tier, str):
        tier = TIER_NAMES[tier]
    x = np.asarray(matrix)
    if x.ndim != 2 or x.shape[0] < 1:
        raise ValueError("HSC needs a non-empty (n, d) matrix")
    if not np.isfinite(x).all():
        raise ValueError("HSC input contains non-finite values")
    x32 = np.ascontiguousarray(x, dtype=np.float32)
    km = kmeans(x32, hsc_cluster_count(x32.shape[0]), seed)
    current = HscTier(tier)
    while True:
        art = _encode_tier(x32, current, HscTier(tier), seed, km)
        if current == HscTier.LOSSLESS:
            return art
        if _row_cosines(x32, hsc_decompress(art)).mean() >= target_fidelity:
            return art
        current = _ESCALATE[current]


@dataclass(frozen=True)
class FidelityReport:
    mean_cosine: float
    min_cosine: float
    ratio: float

    def to_dict(self) -> dict:
        return {"mean_cosine": self.mean_cosine, "min_cosine": self.min_cosine, "ratio": self.ratio}


def hsc_fidelity_report(original: np.ndarray, art: HscArtifact) -> FidelityReport:
    original = np.asarray(original, dtype=np.float32)
    cos = _row_cosines(original, hsc_decompress(art))
    return FidelityReport(float(cos.mean()), float(cos.min()), original.nbytes / len(art.to_bytes()))
