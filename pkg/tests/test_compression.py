from __future__ import annotations

import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from maif.compression import (
    CodecId,
    HscArtifact,
    HscTier,
    available_codecs,
    best_codec,
    codec_from_name,
    compress,
    decompress,
    hsc_cluster_count,
    hsc_compress,
    hsc_decompress,
    hsc_fidelity_report,
    kmeans,
)
from maif.errors import CodecError, UnsupportedCodecError

MiB = 1 << 20


def test_identity_codec():
    data = bytes(range(256)) * 3
    assert compress(CodecId.NONE, data) == data
    assert decompress(CodecId.NONE, data, len(data)) == data


def test_deflate_repeated_bytes():
    data = b"\x5a" * MiB
    out = compress(CodecId.DEFLATE, data)
    assert len(out) <= 5120
    # the stream is a plain zlib container
    assert zlib.decompress(out) == data


def test_mandatory_codecs_present():
    assert {CodecId.NONE, CodecId.DEFLATE} <= set(available_codecs())
    assert codec_from_name("zlib") == CodecId.DEFLATE
    assert codec_from_name(5) == CodecId.LZMA2
    with pytest.raises(UnsupportedCodecError):
        codec_from_name("snappy")


def test_decompress_errors():
    good = compress(CodecId.DEFLATE, b"payload")
    with pytest.raises(CodecError):
        decompress(CodecId.DEFLATE, good[:-3])
    with pytest.raises(CodecError):
        decompress(CodecId.DEFLATE, good, expected_len=3)
    with pytest.raises(UnsupportedCodecError):
        compress(99, b"x")


def test_best_codec_never_expands():
    codec, out = best_codec(b"\x00")
    assert len(out) <= 1
    codec, out = best_codec(b"abc" * 1000)
    assert codec != CodecId.NONE and decompress(codec, out) == b"abc" * 1000


@settings(max_examples=40, deadline=None)
@given(st.binary(min_size=1, max_size=4096), st.sampled_from(available_codecs()))
def test_codec_round_trip(data, codec):
    assert decompress(codec, compress(codec, data), len(data)) == data


# -- k-means and HSC ---------------------------------------------------------


def two_clusters(n=400, d=32, seed=0):
    rng = np.random.default_rng(seed)
    centres = np.zeros((2, d))
    centres[0, 0] = 10.0
    centres[1, 1] = 10.0
    labels = rng.integers(2, size=n)
    return (centres[labels] + rng.normal(scale=0.05, size=(n, d))).astype(np.float32)


def test_cluster_count_rule():
    assert [hsc_cluster_count(n) for n in (1, 2, 100, 101, 65536, 10**6)] == [1, 2, 10, 11, 256, 256]


def test_kmeans_separates_clusters():
    x = two_clusters()
    res = kmeans(x, 2, seed=1)
    assert len(set(res.labels.tolist())) == 2
    near = np.sort(np.abs(res.centroids[:, :2]).max(axis=1))
    assert np.allclose(near, 10.0, atol=0.1)


def test_identical_vectors_compact():
    x = np.tile(np.array([0.3, -1.0, 2.0], dtype=np.float32), (50, 1))
    art = hsc_compress(x, "compact")
    assert art.tier == HscTier.COMPACT
    assert hsc_fidelity_report(x, art).mean_cosine == pytest.approx(1.0, abs=1e-6)


def test_two_clusters_high_fidelity():
    x = two_clusters()
    art = hsc_compress(x, HscTier.HIGH_FIDELITY, target_fidelity=0.99)
    assert art.tier == HscTier.HIGH_FIDELITY
    assert hsc_fidelity_report(x, art).mean_cosine >= 0.99


def test_single_cluster_compact_ratio():
    # one distinct point: the codebook collapses to a single centroid, so the
    # stored size is about 4*d bytes plus one byte code per row before DEFLATE
    centre = np.random.default_rng(0).normal(size=64).astype(np.float32)
    x = np.tile(centre, (1000, 1))
    art = hsc_compress(x, "compact")
    rep = hsc_fidelity_report(x, art)
    assert rep.ratio >= 100
    assert rep.mean_cosine == 1.0


def test_noisy_cluster_uses_full_codebook():
    rng = np.random.default_rng(0)
    x = (rng.normal(size=64) + rng.normal(scale=0.01, size=(1000, 64))).astype(np.float32)
    art = hsc_compress(x, "compact")
    assert art.k == hsc_cluster_count(1000) == 32
    assert hsc_fidelity_report(x, art).ratio > 20


def test_lossless_bit_exact():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(300, 24)).astype(np.float32)
    x[0, 0] = -0.0
    x[1, 1] = np.float32(1e-42)  # subnormal survives
    art = HscArtifact.from_bytes(hsc_compress(x, "lossless").to_bytes())
    assert hsc_decompress(art).tobytes() == x.tobytes()


def test_escalation_is_recorded():
    x = np.random.default_rng(2).normal(size=(200, 48)).astype(np.float32)
    art = hsc_compress(x, "compact", target_fidelity=0.95)
    assert art.requested_tier == HscTier.COMPACT
    assert art.escalated
    assert hsc_fidelity_report(x, art).mean_cosine >= 0.95


def test_artifact_serialization_round_trip_and_determinism():
    x = two_clusters(seed=3)
    a = hsc_compress(x, "high", seed=7)
    b = HscArtifact.from_bytes(a.to_bytes())
    assert b.to_bytes() == a.to_bytes() == hsc_compress(x, "high", seed=7).to_bytes()
    assert np.array_equal(hsc_decompress(a), hsc_decompress(b))
    assert hsc_decompress(b).shape == x.shape


def test_tier_ratio_monotone():
    x = two_clusters(n=1000, seed=4)
    ratios = [hsc_fidelity_report(x, hsc_compress(x, t, target_fidelity=0.0)).ratio
              for t in ("lossless", "high", "compact")]
    assert ratios[0] <= ratios[1] <= ratios[2]


def test_fidelity_report_on_identity():
    x = two_clusters(n=64)
    art = hsc_compress(x, "lossless")
    rep = hsc_fidelity_report(x, art)
    assert rep.mean_cosine == 1.0 and rep.min_cosine == 1.0


def test_hsc_rejects_bad_input():
    with pytest.raises(ValueError):
        hsc_compress(np.array([[np.inf, 0.0]]))
    with pytest.raises(ValueError):
        hsc_compress(np.zeros((0, 4)))


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 40), st.integers(1, 12), st.integers(0, 2**32 - 1))
def test_hsc_shapes_round_trip(n, d, seed):
    x = np.random.default_rng(seed).normal(size=(n, d)).astype(np.float32)
    for tier in HscTier:
        art = HscArtifact.from_bytes(hsc_compress(x, tier, seed=seed).to_bytes())
        assert hsc_decompress(art).shape == (n, d)
    assert hsc_decompress(hsc_compress(x, "lossless", seed=seed)).tobytes() == x.tobytes()
