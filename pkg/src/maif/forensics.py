"""Forensic analysis of provenance chains, version history and WAL records.

Each rule works from what is stored in the artifact and an explicit analysis
clock, so the same artifact and clock always give the same report.
"""

from __future__ import annotations

import json
import os
import statistics
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import wal as walmod
from .access import AccessPolicy, BlockRef, Decision, Permission, check_permission
from .container import FOURCC_ACLS, FOURCC_EMBD, ArtifactReader
from .errors import MaifError
from .provenance import Action, ProvenanceLedger, ProvenanceRecord, verify_chain

REPORT_SCHEMA = "maif.forensics/1"

RULES = ("rapid_ops", "timestamp_reversal", "future_timestamp", "burst", "excessive_agent",
         "privilege_escalation", "hash_mismatch", "semantic_drift")

SEVERITY = {
    "rapid_ops": "medium", "timestamp_reversal": "high", "future_timestamp": "high", "burst": "medium",
    "excessive_agent": "medium", "privilege_escalation": "high", "hash_mismatch": "high",
    "semantic_drift": "medium",
}
_RANK = {"none": 0, "low": 1, "medium": 2, "high": 3}

COMPLEX_ACTIONS = frozenset({Action.UPDATE, Action.DELETE, Action.POLICY_CHANGE})

REQUIRED = {
    Action.CREATE: Permission.WRITE, Action.APPEND: Permission.WRITE, Action.UPDATE: Permission.WRITE,
    Action.DELETE: Permission.WRITE, Action.POLICY_CHANGE: Permission.ADMIN, Action.SIGN_OFF: Permission.READ,
}

SOURCES = ("provenance", "manifest", "wal")


@dataclass(frozen=True)
class ForensicConfig:
    rapid_ms: float = 100.0
    future_tolerance_s: float = 300.0
    burst_window_s: float = 60.0
    burst_sigma: float = 3.0
    burst_min_ops: int = 10
    excessive_floor: int = 50
    excessive_factor: float = 10.0
    drift_threshold: float = 0.5


@dataclass(frozen=True)
class AnomalyFinding:
    rule: str
    subject: str
    evidence: tuple[tuple[str, int], ...]
    explanation: str
    severity: str = ""

    def __post_init__(self):
        if self.rule not in SEVERITY:
            raise ValueError(f"unknown rule {self.rule!r}")
        if not self.evidence:
            raise ValueError("a finding needs at least one evidence pointer")
        if not self.severity:
            object.__setattr__(self, "severity", SEVERITY[self.rule])

    def to_dict(self) -> dict:
        return {"rule": self.rule, "severity": self.severity, "subject": self.subject,
                "evidence": [{"kind": k, "value": v} for k, v in self.evidence],
                "explanation": self.explanation}

    def sort_key(self) -> tuple:
        return (RULES.index(self.rule), self.evidence, self.subject)


@dataclass(frozen=True)
class TimelineEvent:
    timestamp: int
    source: str
    index: int
    action: str
    actor: bytes | None = None
    refs: tuple[str, ...] = ()

    def sort_key(self) -> tuple:
        return (self.timestamp, SOURCES.index(self.source), self.index)

    def to_dict(self) -> dict:
        return {"timestamp": self.timestamp, "source": self.source, "index": self.index, "action": self.action,
                "actor": self.actor.hex() if self.actor else None, "refs": list(self.refs)}


def _records(ledger: ProvenanceLedger | Sequence[ProvenanceRecord]) -> Sequence[ProvenanceRecord]:
    return ledger.records if isinstance(ledger, ProvenanceLedger) else ledger


def _action_name(a: int) -> str:
    try:
        return Action(a).name.lower()
    except ValueError:
        return f"action_{a}"


# --------------------------------------------------------------------------
# Temporal rules


def analyze_temporal(ledger, config: ForensicConfig = ForensicConfig(), clock_us: int | None = None) -> list[AnomalyFinding]:
    """rapid_ops, timestamp_reversal, future_timestamp and burst.

    ``clock_us`` is the analysis wall clock; without it future_timestamp is
    not evaluated.
    """
    recs = _records(ledger)
    out: list[AnomalyFinding] = []

    last_complex: dict[bytes, ProvenanceRecord] = {}
    rapid_us = config.rapid_ms * 1000
    for r in recs:
        if r.action not in COMPLEX_ACTIONS:
            continue
        prev = last_complex.get(r.agent_id)
        if prev is not None and abs(r.timestamp - prev.timestamp) < rapid_us:
            gap = abs(r.timestamp - prev.timestamp) / 1000
            out.append(AnomalyFinding(
                "rapid_ops", r.agent_id.hex(), (("record", prev.record_index), ("record", r.record_index)),
                f"{_action_name(prev.action)} then {_action_name(r.action)} {gap:.1f} ms apart"))
        last_complex[r.agent_id] = r

    for prev, r in zip(recs, recs[1:]):
        if r.timestamp < prev.timestamp:
            out.append(AnomalyFinding(
                "timestamp_reversal", r.agent_id.hex(), (("record", r.record_index),),
                f"timestamp {r.timestamp} precedes the previous record's {prev.timestamp}"))

    if clock_us is not None:
        limit = clock_us + config.future_tolerance_s * 1e6
        for r in recs:
            if r.timestamp > limit:
                out.append(AnomalyFinding(
                    "future_timestamp", r.agent_id.hex(), (("record", r.record_index),),
                    f"timestamp is {(r.timestamp - clock_us) / 1e6:.0f} s after the analysis clock"))

    out.extend(_bursts(recs, config))
    return out


def _bursts(recs: Sequence[ProvenanceRecord], config: ForensicConfig) -> list[AnomalyFinding]:
    if len(recs) < config.burst_min_ops:
        return []
    width = int(config.burst_window_s * 1e6)
    t0 = min(r.timestamp for r in recs)
    buckets: dict[int, list[ProvenanceRecord]] = defaultdict(list)
    for r in recs:
        buckets[(r.timestamp - t0) // width].append(r)
    nwin = max(buckets) + 1
    counts = np.zeros(nwin)
    for w, rs in buckets.items():
        counts[w] = len(rs)
    bound = counts.mean() + config.burst_sigma * counts.std()
    out = []
    for w in sorted(buckets):
        rs = buckets[w]
        if len(rs) >= config.burst_min_ops and len(rs) > bound:
            out.append(AnomalyFinding(
                "burst", f"window@{t0 + w * width}", tuple(("record", r.record_index) for r in rs),
                f"{len(rs)} operations in one {config.burst_window_s:g} s window (bound {bound:.1f})"))
    return out


# --------------------------------------------------------------------------
# Agent rules


def analyze_agents(ledger, policy_history: Sequence[tuple[bytes, AccessPolicy]] = (),
                   config: ForensicConfig = ForensicConfig(),
                   block_kinds: Mapping[bytes, bytes] | None = None) -> list[AnomalyFinding]:
    """excessive_agent and privilege_escalation.

    ``policy_history`` pairs ACLS block ids with their policies.  A policy is
    in force from the record after the policy_change that targets it.
    ``block_kinds`` maps block ids to fourccs so fourcc selectors can match.
    """
    recs = _records(ledger)
    out: list[AnomalyFinding] = []

    counts = Counter(r.agent_id for r in recs)
    if counts:
        bound = max(config.excessive_floor, config.excessive_factor * statistics.median(counts.values()))
        for agent in sorted(counts):
            if counts[agent] > bound:
                idx = [r.record_index for r in recs if r.agent_id == agent]
                out.append(AnomalyFinding(
                    "excessive_agent", agent.hex(), (("record", idx[0]), ("record", idx[-1])),
                    f"{counts[agent]} operations exceeds bound {bound:g}"))

    policies = dict(policy_history)
    kinds = dict(block_kinds or {})
    in_force: AccessPolicy | None = None
    for r in recs:
        need = REQUIRED.get(r.action)
        if in_force is not None and need is not None:
            if r.action == Action.POLICY_CHANGE:
                refs = [BlockRef(None, FOURCC_ACLS)]
            else:
                refs = [BlockRef(b, kinds.get(b)) for b in r.target_block_ids] or [BlockRef(None, None)]
            denied = [ref for ref in refs if check_permission(in_force, r.agent_id, need, ref) != Decision.ALLOW]
            if denied:
                what = denied[0].block_id.hex() if denied[0].block_id else "artifact"
                out.append(AnomalyFinding(
                    "privilege_escalation", r.agent_id.hex(), (("record", r.record_index),),
                    f"{_action_name(r.action)} on {what} needs {need.name.lower()}, "
                    f"denied by policy v{in_force.policy_version}"))
        if r.action == Action.POLICY_CHANGE:
            for b in r.target_block_ids:
                if b in policies:
                    in_force = policies[b]
    return out


# --------------------------------------------------------------------------
# Integrity rules


def _centroid(reader: ArtifactReader, entry, keyring) -> np.ndarray | None:
    from .payloads import decode_stored
    from .semantic import decode_embedding_payload

    try:
        hdr, stored = reader.read_entry(entry)
        m = decode_embedding_payload(decode_stored(hdr, stored, keyring), check=False).matrix
    except (MaifError, ValueError):
        return None
    if not len(m):
        return None
    return np.asarray(m, dtype=np.float64).mean(axis=0)


def analyze_integrity(reader: ArtifactReader, config: ForensicConfig = ForensicConfig(),
                      keyring=None) -> list[AnomalyFinding]:
    """hash_mismatch (mirrors integrity validation) and semantic_drift across EMBD versions."""
    from .validation import validate

    out: list[AnomalyFinding] = []
    report = validate(reader.path, 2)
    for f in report.findings:
        if not f.tamper:
            continue
        subject = f.block_id.hex() if f.block_id else "artifact"
        out.append(AnomalyFinding("hash_mismatch", subject, (("offset", f.offset or 0),), f.message))
    if any(f.severity == "error" and f.code in ("root_hash", "version_chain") for f in report.findings):
        return out

    try:
        ids = {e.block_id for e in reader.entries if e.fourcc == FOURCC_EMBD}
        for _, man, _ in reader.iter_manifests():
            ids.update(e.block_id for e in man.entries if e.fourcc == FOURCC_EMBD)
    except MaifError:
        return out
    for bid in sorted(ids):
        try:
            versions = reader.historical_entries(bid)
        except MaifError:
            continue
        prev = None
        for e in versions:
            c = _centroid(reader, e, keyring)
            if c is None:
                continue
            if prev is not None:
                pe, pc = prev
                denom = np.linalg.norm(c) * np.linalg.norm(pc)
                cos = float(c @ pc / denom) if denom > 0 else 0.0
                if cos < config.drift_threshold:
                    out.append(AnomalyFinding(
                        "semantic_drift", bid.hex(), (("offset", pe.offset), ("offset", e.offset)),
                        f"centroid cosine {cos:.3f} between successive versions"))
            prev = (e, c)
    return out


# --------------------------------------------------------------------------
# Timeline and report


def reconstruct_timeline(path: str | os.PathLike, reader: ArtifactReader | None = None) -> list[TimelineEvent]:
    own = reader is None
    reader = reader or ArtifactReader(path)
    events: list[TimelineEvent] = []
    try:
        for r in reader.ledger().records:
            events.append(TimelineEvent(r.timestamp, "provenance", r.record_index, _action_name(r.action),
                                        r.agent_id, tuple(b.hex() for b in r.target_block_ids)))
        try:
            for _, man, root in reader.iter_manifests():
                events.append(TimelineEvent(man.created_at, "manifest", man.manifest_version,
                                            f"commit v{man.manifest_version}", None, (root.hex(),)))
        except MaifError:
            pass
    finally:
        if own:
            reader.close()
    records, _ = walmod.read_wal(walmod.wal_path(path))
    began: dict[int, int] = {}
    for rec in records:
        if rec.kind == walmod.WalKind.BEGIN:
            began[rec.txid] = rec.timestamp
        elif rec.kind == walmod.WalKind.COMMIT:
            off, _, root = rec.manifest_ref
            events.append(TimelineEvent(began.get(rec.txid, 0), "wal", rec.lsn, f"txn {rec.txid} commit",
                                        None, (f"manifest@{off}", root.hex())))
        elif rec.kind == walmod.WalKind.ABORT:
            events.append(TimelineEvent(rec.timestamp, "wal", rec.lsn, f"txn {rec.txid} abort"))
    events.sort(key=TimelineEvent.sort_key)
    return events


def parse_clock(value: str | int | float | datetime) -> int:
    """Analysis clock as integer microseconds since the epoch."""
    if isinstance(value, datetime):
        dt = value
    elif isinstance(value, (int, float)):
        return int(value)
    else:
        dt = datetime.fromisoformat(value.replace("Z", "+00:00"))
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return int(round(dt.timestamp() * 1e6))


def run_rules(reader: ArtifactReader, config: ForensicConfig, clock_us: int, keyring=None) -> list[AnomalyFinding]:
    findings = analyze_integrity(reader, config, keyring)
    try:
        ledger = reader.ledger()
    except MaifError:
        return sorted(findings, key=AnomalyFinding.sort_key)
    policies: list[tuple[bytes, AccessPolicy]] = []
    kinds: dict[bytes, bytes] = {}
    try:
        for _, man, _ in reader.iter_manifests():
            for e in man.entries:
                kinds.setdefault(e.block_id, e.fourcc)
    except MaifError:
        kinds.update({e.block_id: e.fourcc for e in reader.entries})
    for e in reader.list_blocks(FOURCC_ACLS):
        try:
            policies.append((e.block_id, AccessPolicy.from_bytes(reader.read_entry(e)[1])))
        except MaifError:
            continue
    findings += analyze_temporal(ledger, config, clock_us)
    findings += analyze_agents(ledger, policies, config, kinds)
    return sorted(findings, key=AnomalyFinding.sort_key)


def overall_severity(findings: Iterable[AnomalyFinding]) -> str:
    return max((f.severity for f in findings), key=_RANK.__getitem__, default="none")


def forensic_report(path: str | os.PathLike, config: ForensicConfig = ForensicConfig(), clock=None,
                    keyring=None) -> dict:
    """Timeline, findings and verdicts as a plain dict with stable field names."""
    from .validation import validate

    if clock is None:
        raise ValueError("forensic_report needs an explicit analysis clock")
    clock_us = parse_clock(clock)
    validation = validate(path, 2)
    doc: dict = {"schema": REPORT_SCHEMA, "artifact": Path(path).name, "clock_us": clock_us,
                 "validation": validation.verdict}
    try:
        reader = ArtifactReader(path)
    except MaifError as exc:
        doc.update(chain=None, findings=[], timeline=[], severity="high", error=str(exc))
        return doc
    with reader:
        findings = run_rules(reader, config, clock_us, keyring)
        try:
            ledger = reader.ledger()
            chain = verify_chain(ledger.records, ledger.registry).to_dict()
        except MaifError as exc:
            chain = {"valid": False, "length": 0, "first_invalid": None, "reason": str(exc)}
        timeline = reconstruct_timeline(path, reader)
    doc.update(chain=chain, findings=[f.to_dict() for f in findings],
               timeline=[e.to_dict() for e in timeline], severity=overall_severity(findings))
    return doc


def report_json(doc: dict) -> str:
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))
