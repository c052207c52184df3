"""Lifecycle metadata: version annotations and stored adaptation rules.

Rules are kept verbatim; their ``condition`` is opaque text and nothing here
evaluates it.
"""

from __future__ import annotations

from dataclasses import dataclass

from .container import FOURCC_LIFE, ArtifactReader, ArtifactWriter
from .errors import LifecycleError
from .mcbe import Decoder, Encoder
from .provenance import Action


@dataclass(frozen=True)
class AdaptationRule:
    rule_id: str
    from_state: str
    to_state: str
    condition: str
    created_by: bytes

    def __post_init__(self):
        if self.from_state == self.to_state:
            raise LifecycleError(f"rule {self.rule_id!r}: from_state equals to_state")
        if len(self.created_by) != 16:
            raise LifecycleError("created_by must be a 16-byte agent id")


def encode_lifecycle(annotations: dict[str, str], rules: list[AdaptationRule]) -> bytes:
    ids = [r.rule_id for r in rules]
    if len(set(ids)) != len(ids):
        dup = next(i for i in ids if ids.count(i) > 1)
        raise LifecycleError(f"duplicate rule_id {dup!r}")
    enc = Encoder()
    enc.seq(sorted(annotations.items()), lambda e, kv: e.text(kv[0]).text(kv[1]))
    enc.seq(rules, lambda e, r: e.text(r.rule_id).text(r.from_state).text(r.to_state)
            .text(r.condition).uuid(r.created_by))
    return enc.getvalue()


def decode_lifecycle(payload: bytes) -> tuple[dict[str, str], list[AdaptationRule]]:
    dec = Decoder(payload)
    annotations = dict(dec.seq(lambda d: (d.text(), d.text())))
    rules = dec.seq(lambda d: AdaptationRule(d.text(), d.text(), d.text(), d.text(), d.uuid()))
    dec.expect_end()
    return annotations, rules


def add_lifecycle_metadata(writer: ArtifactWriter, annotations: dict[str, str] | None = None,
                           rules: list[AdaptationRule] | None = None, signer=None) -> bytes:
    bid = writer.append_block(FOURCC_LIFE, encode_lifecycle(annotations or {}, rules or []))
    writer.record(Action.APPEND, [bid], signer)
    return bid


def read_lifecycle(reader: ArtifactReader) -> tuple[dict[str, str], list[AdaptationRule]]:
    """Merge every live LIFE block in file order; later annotations win."""
    annotations: dict[str, str] = {}
    rules: list[AdaptationRule] = []
    for entry in reader.list_blocks(FOURCC_LIFE):
        a, r = decode_lifecycle(reader.read_entry(entry)[1])
        annotations.update(a)
        rules.extend(r)
    return annotations, rules
