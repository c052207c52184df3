from __future__ import annotations

import pytest

from maif.container import ArtifactReader, create_artifact
from maif.errors import LifecycleError
from maif.lifecycle import AdaptationRule, add_lifecycle_metadata, decode_lifecycle, encode_lifecycle, read_lifecycle


def test_rule_round_trip(art, key):
    rule = AdaptationRule("r1", "draft", "published", "reviews >= 2 && score > 0.8", key.agent_id)
    with create_artifact(art, signer=key) as w:
        bid = add_lifecycle_metadata(w, {"version": "1.2"}, [rule])
        w.commit()
    with ArtifactReader(art) as rd:
        ann, rules = read_lifecycle(rd)
        assert ann == {"version": "1.2"} and rules == [rule]
        assert bid in rd.ledger().records[-1].target_block_ids


def test_duplicate_rule_id():
    r = AdaptationRule("r1", "a", "b", "", b"\x00" * 16)
    with pytest.raises(LifecycleError):
        encode_lifecycle({}, [r, AdaptationRule("r1", "b", "c", "", b"\x00" * 16)])


def test_self_transition_rejected():
    with pytest.raises(LifecycleError):
        AdaptationRule("r", "same", "same", "", b"\x00" * 16)


def test_annotations_only():
    assert decode_lifecycle(encode_lifecycle({"owner": "team"}, [])) == ({"owner": "team"}, [])
