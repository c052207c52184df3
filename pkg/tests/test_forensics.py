from __future__ import annotations

import numpy as np
import pytest

from maif.access import AccessPolicy, AccessRule, Permission
from maif.container import ArtifactReader, create_artifact
from maif.forensics import (
    AnomalyFinding,
    ForensicConfig,
    analyze_agents,
    analyze_integrity,
    analyze_temporal,
    forensic_report,
    parse_clock,
    reconstruct_timeline,
    report_json,
)
from maif.provenance import Action, ProvenanceRecord
from maif.semantic import write_embeddings

from attacklib import RULES, attack_case, clean_case
from conftest import T0, build_signed, flip_bit, step_clock

A, B, C, D = (bytes([i]) * 16 for i in range(1, 5))


def log(*items):
    """Unsigned records from (agent, action, timestamp[, targets]) tuples."""
    out = []
    for i, it in enumerate(items):
        agent, action, ts = it[:3]
        targets = tuple(it[3]) if len(it) > 3 else ()
        out.append(ProvenanceRecord(i, agent, Action(action), targets, ts, bytes(32)))
    return out


def rules_of(findings):
    return [f.rule for f in findings]


def test_two_updates_50ms_apart_are_rapid():
    found = analyze_temporal(log((A, Action.UPDATE, T0), (A, Action.UPDATE, T0 + 50_000)))
    assert rules_of(found) == ["rapid_ops"]
    assert found[0].subject == A.hex()


def test_rapid_threshold_is_strict_and_per_agent():
    assert analyze_temporal(log((A, Action.UPDATE, T0), (A, Action.UPDATE, T0 + 100_000))) == []
    assert analyze_temporal(log((A, Action.UPDATE, T0), (B, Action.UPDATE, T0 + 10_000))) == []
    assert analyze_temporal(log((A, Action.APPEND, T0), (A, Action.APPEND, T0 + 10_000))) == []
    cfg = ForensicConfig(rapid_ms=200)
    assert rules_of(analyze_temporal(log((A, Action.DELETE, T0), (A, Action.UPDATE, T0 + 150_000)), cfg)) == [
        "rapid_ops"]


def test_timestamp_reversal_at_index_one():
    found = analyze_temporal(log((A, Action.APPEND, T0), (A, Action.APPEND, T0 - 1)))
    assert rules_of(found) == ["timestamp_reversal"]
    assert found[0].evidence == (("record", 1),)


def test_future_timestamp_needs_clock():
    recs = log((A, Action.APPEND, T0 + 301_000_000))
    assert analyze_temporal(recs) == []
    assert rules_of(analyze_temporal(recs, clock_us=T0)) == ["future_timestamp"]
    assert analyze_temporal(log((A, Action.APPEND, T0 + 299_000_000)), clock_us=T0) == []


def test_uniform_log_has_no_burst():
    recs = log(*[(A, Action.APPEND, T0 + i * 60_000_000) for i in range(200)])
    assert analyze_temporal(recs) == []


def test_dense_window_is_a_burst():
    quiet = [(A, Action.APPEND, T0 + i * 60_000_000) for i in range(40)]
    dense = [(B, Action.APPEND, T0 + 41 * 60_000_000 + i * 1000) for i in range(30)]
    found = analyze_temporal(log(*quiet, *dense))
    assert rules_of(found) == ["burst"]
    assert len(found[0].evidence) == 30


def test_excessive_agent_threshold_arithmetic():
    items = []
    t = T0
    for agent, n in ((A, 5), (B, 5), (C, 5), (D, 600)):
        for _ in range(n):
            t += 60_000_000
            items.append((agent, Action.APPEND, t))
    found = analyze_agents(log(*items))
    assert rules_of(found) == ["excessive_agent"]
    assert found[0].subject == D.hex()
    assert "bound 50" in found[0].explanation


def test_small_single_agent_log_is_not_excessive():
    assert analyze_agents(log(*[(A, Action.APPEND, T0 + i) for i in range(49)])) == []


def test_write_by_read_only_agent_is_escalation():
    acls = b"\x0a" * 16
    pol = AccessPolicy(1, (AccessRule(A, None, Permission.READ | Permission.WRITE | Permission.ADMIN),
                          AccessRule(B, None, Permission.READ)))
    recs = log((A, Action.POLICY_CHANGE, T0, [acls]),
               (B, Action.APPEND, T0 + 60_000_000, [b"\x0b" * 16]),
               (A, Action.APPEND, T0 + 120_000_000, [b"\x0c" * 16]),
               (B, Action.SIGN_OFF, T0 + 180_000_000, [b"\x0c" * 16]))
    found = analyze_agents(recs, [(acls, pol)])
    assert rules_of(found) == ["privilege_escalation"]
    assert found[0].evidence == (("record", 1),)


def test_policy_change_without_admin_is_escalation():
    acls1, acls2 = b"\x0a" * 16, b"\x0b" * 16
    pol = AccessPolicy(1, (AccessRule(A, None, Permission.ADMIN), AccessRule(B, None, Permission.WRITE)))
    recs = log((A, Action.POLICY_CHANGE, T0, [acls1]), (B, Action.POLICY_CHANGE, T0 + 1_000_000_000, [acls2]))
    found = analyze_agents(recs, [(acls1, pol)])
    assert rules_of(found) == ["privilege_escalation"]


def test_finding_requires_evidence():
    with pytest.raises(ValueError):
        AnomalyFinding("burst", "x", (), "no evidence")
    assert AnomalyFinding("burst", "x", (("record", 0),), "e").severity == "medium"
    assert AnomalyFinding("hash_mismatch", "x", (("offset", 0),), "e").severity == "high"


# -- artifact-level rules ----------------------------------------------------


def test_clean_artifact_has_no_integrity_findings(art, key):
    build_signed(art, key)
    with ArtifactReader(art) as rd:
        assert analyze_integrity(rd) == []


def test_antipodal_embeddings_drift(art):
    e = np.random.default_rng(0).normal(size=(6, 8)).astype(np.float32)
    with create_artifact(art, clock=step_clock()) as w:
        bid = write_embeddings(w, e)
        w.commit()
        write_embeddings(w, -e, block_id=bid)
        w.commit()
    with ArtifactReader(art) as rd:
        found = analyze_integrity(rd)
    assert rules_of(found) == ["semantic_drift"]
    assert found[0].subject == bid.hex()
    assert "-1.000" in found[0].explanation


def test_corrupted_payload_is_hash_mismatch(art, key):
    ids = build_signed(art, key)
    with ArtifactReader(art) as rd:
        off = rd.entry(ids[2]).payload_offset
    flip_bit(art, off, 3)
    with ArtifactReader(art) as rd:
        found = analyze_integrity(rd)
    assert "hash_mismatch" in rules_of(found)
    assert ids[2].hex() in {f.subject for f in found}


def test_timeline_orders_events(art, key):
    with create_artifact(art, signer=key, clock=step_clock()) as w:
        a = w.append_block("TEXT", b"one")
        w.record(Action.APPEND, [a])
        w.record(Action.SIGN_OFF, [a])
        w.commit()
        b = w.append_block("TEXT", b"two")
        w.record(Action.APPEND, [b])
        w.commit()
    events = reconstruct_timeline(art)
    assert len(events) >= 5
    assert {e.source for e in events} == {"provenance", "manifest", "wal"}
    keys = [(e.timestamp, e.source, e.index) for e in events]
    assert keys == sorted(keys)


def test_report_is_deterministic(art, key):
    build_signed(art, key)
    first = report_json(forensic_report(art, clock="2025-06-16T00:00:00Z"))
    second = report_json(forensic_report(art, clock="2025-06-16T00:00:00Z"))
    assert first == second
    doc = forensic_report(art, clock=parse_clock("2025-06-16T00:00:00Z"))
    assert doc["schema"] == "maif.forensics/1"
    assert doc["findings"] == [] and doc["severity"] == "none"
    assert doc["chain"]["valid"]


def test_report_requires_clock(art, key):
    build_signed(art, key)
    with pytest.raises(ValueError):
        forensic_report(art)


def test_reversal_plus_burst_is_high(art, key, other_key):
    # a quiet history, a dense window, then a record stamped before its predecessor
    with create_artifact(art, signer=key, clock=step_clock()) as w:
        t = T0
        for i in range(40):
            t += 60_000_000
            w.record(Action.APPEND, [w.append_block("TEXT", b"%d" % i)], timestamp=t)
        for i in range(30):
            w.record(Action.APPEND, [w.append_block("TEXT", b"b%d" % i)], other_key, timestamp=t + 1000 * i)
        w.record(Action.APPEND, [], other_key, timestamp=t - 5_000_000)
        w.commit(created_at=t + 60_000_000)
    doc = forensic_report(art, clock=t + 3_600_000_000)
    assert {"timestamp_reversal", "burst"} <= {f["rule"] for f in doc["findings"]}
    assert doc["severity"] == "high"


def test_parse_clock_forms():
    assert parse_clock("1970-01-01T00:00:01Z") == 1_000_000
    assert parse_clock("1970-01-01T00:00:01") == 1_000_000
    assert parse_clock(42) == 42


@pytest.mark.parametrize("rule", RULES)
def test_attack_suite_sample(tmp_path, rule):
    for seed in range(3):
        case = attack_case(tmp_path, rule, seed)
        doc = forensic_report(case.path, clock=case.clock_us)
        assert rule in {f["rule"] for f in doc["findings"]}


def test_clean_corpus_sample(tmp_path):
    for seed in range(5):
        case = clean_case(tmp_path, seed)
        assert forensic_report(case.path, clock=case.clock_us)["findings"] == []
