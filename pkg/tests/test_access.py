from __future__ import annotations

import os

import pytest

from maif.access import (
    AccessPolicy,
    AccessRule,
    BlockRef,
    Decision,
    Keyring,
    Permission,
    check_permission,
    current_policy,
    decrypt_block_payload,
    encrypt_block_payload,
    set_policy,
)
from maif.container import ArtifactReader, create_artifact, open_writer
from maif.errors import AuthenticationError, PermissionDenied, PolicyError
from maif.payloads import read_payload, write_payload
from maif.provenance import Action

A = b"\xaa" * 16
B = b"\xbb" * 16
TEXT_BLOCK = BlockRef(b"\x01" * 16, b"TEXT")


def test_direct_match_allows():
    pol = AccessPolicy(1, (AccessRule(A, b"TEXT", Permission.READ),))
    assert check_permission(pol, A, Permission.READ, TEXT_BLOCK) == Decision.ALLOW
    assert check_permission(pol, A, Permission.WRITE, TEXT_BLOCK) == Decision.DENY


def test_default_deny():
    pol = AccessPolicy(1, (AccessRule(A, b"TEXT", Permission.READ),))
    assert check_permission(pol, B, Permission.READ, TEXT_BLOCK) == Decision.DENY
    assert check_permission(AccessPolicy(1), A, Permission.READ, TEXT_BLOCK) == Decision.DENY


def test_admin_implies_read_write():
    pol = AccessPolicy(1, (AccessRule(A, None, Permission.ADMIN),))
    for p in (Permission.READ, Permission.WRITE, Permission.ADMIN):
        assert check_permission(pol, A, p, BlockRef(b"\x02" * 16, b"BDAT")) == Decision.ALLOW


def test_first_match_wins():
    pol = AccessPolicy(1, (AccessRule(A, b"\x01" * 16, Permission.NONE), AccessRule(A, None, Permission.ADMIN)))
    assert check_permission(pol, A, Permission.READ, TEXT_BLOCK) == Decision.DENY
    assert check_permission(pol, A, Permission.READ, BlockRef(b"\x03" * 16, b"TEXT")) == Decision.ALLOW


def test_malformed_policy():
    with pytest.raises(PolicyError):
        check_permission("not a policy", A, Permission.READ, TEXT_BLOCK)
    with pytest.raises(PolicyError):
        AccessPolicy.from_bytes(b"\x01\x02")
    with pytest.raises(PolicyError):
        AccessRule(b"short", None, 1)


def test_policy_bytes_round_trip():
    pol = AccessPolicy(7, (AccessRule(A, b"TEXT", 1), AccessRule(None, b"\x05" * 16, 6), AccessRule(B, None, 4)))
    assert AccessPolicy.from_bytes(pol.to_bytes()) == pol


def test_encrypt_round_trip_and_failures():
    key, other = os.urandom(32), os.urandom(32)
    env = encrypt_block_payload(key, b"secret", b"\x01" * 16, "k1")
    assert decrypt_block_payload(key, env, b"\x01" * 16) == b"secret"
    with pytest.raises(AuthenticationError):
        decrypt_block_payload(other, env, b"\x01" * 16)
    with pytest.raises(AuthenticationError):
        decrypt_block_payload(key, env, b"\x02" * 16)


def test_set_policy_lifecycle(art, key, other_key):
    with create_artifact(art, signer=key) as w:
        bid = w.append_block("TEXT", b"x")
        w.record(Action.CREATE, [bid])
        w.commit()
    with open_writer(art) as w:
        with pytest.raises(PermissionDenied):
            set_policy(w, AccessPolicy(1, (AccessRule(other_key.agent_id, None, 4),)), other_key)
        set_policy(w, AccessPolicy(1, (AccessRule(key.agent_id, None, 4), AccessRule(other_key.agent_id, None, 1))), key)
        w.commit()
    with open_writer(art) as w:
        with pytest.raises(PermissionDenied):
            set_policy(w, AccessPolicy(2, ()), other_key)
        with pytest.raises(PolicyError):
            set_policy(w, AccessPolicy(1, ()), key)
        set_policy(w, AccessPolicy(2, (AccessRule(key.agent_id, None, 4),)), key)
        w.commit()
    with ArtifactReader(art) as rd:
        assert current_policy(rd).policy_version == 2
        assert rd.ledger().records[-1].action == Action.POLICY_CHANGE
        assert rd.chain_report().valid


def test_encrypted_compressed_payload(art, tmp_path):
    ring = Keyring({"k1": os.urandom(32)})
    ring.save(tmp_path / "ring")
    ring = Keyring.load(tmp_path / "ring")
    with create_artifact(art) as w:
        bid = write_payload(w, "TEXT", b"confidential " * 100, codec=1, key=ring["k1"], key_id="k1")
        w.commit()
    with ArtifactReader(art) as rd:
        assert read_payload(rd, bid, ring) == b"confidential " * 100
        assert b"confidential" not in rd.get_block(bid)[1]
        with pytest.raises(AuthenticationError):
            read_payload(rd, bid)
        with pytest.raises(AuthenticationError):
            read_payload(rd, bid, Keyring({"k1": os.urandom(32)}))
