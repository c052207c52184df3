"""Block-granular access policies and authenticated encryption.

Policies are first-match, default-deny.  A file format cannot stop an
out-of-band reader, so confidentiality for reads comes from AES-256-GCM with
the block id bound in as associated data.
"""

from __future__ import annotations

import os
import secrets
from dataclasses import dataclass, field
from enum import IntEnum, IntFlag
from pathlib import Path

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from .container import FOURCC_ACLS, ArtifactReader, ArtifactWriter, ManifestEntry
from .errors import AuthenticationError, FormatError, PermissionDenied, PolicyError
from .mcbe import Decoder, Encoder
from .provenance import Action, AgentKey


class Permission(IntFlag):
    NONE = 0
    READ = 1
    WRITE = 2
    ADMIN = 4


class Decision(IntEnum):
    DENY = 0
    ALLOW = 1


def effective(perms: int) -> Permission:
    p = Permission(perms)
    if p & Permission.ADMIN:
        p |= Permission.READ | Permission.WRITE
    return p


@dataclass(frozen=True)
class BlockRef:
    """What a selector is matched against: a block id and its fourcc (either may be unknown)."""

    block_id: bytes | None = None
    fourcc: bytes | None = None

    @classmethod
    def of(cls, entry: ManifestEntry) -> "BlockRef":
        return cls(entry.block_id, entry.fourcc)


# selector kinds
_SEL_ANY, _SEL_FOURCC, _SEL_BLOCK = 0, 1, 2


@dataclass(frozen=True)
class AccessRule:
    principal: bytes | None  # agent_id, None = any agent
    selector: bytes | None  # 4-byte fourcc, 16-byte block id, None = any block
    permissions: int

    def __post_init__(self):
        if self.principal is not None and len(self.principal) != 16:
            raise PolicyError("rule principal must be a 16-byte agent id or wildcard")
        if self.selector is not None and len(self.selector) not in (4, 16):
            raise PolicyError("rule selector must be a fourcc, a block id or wildcard")
        if self.permissions & ~0x7:
            raise PolicyError(f"unknown permission bits {self.permissions:#x}")

    def matches(self, agent_id: bytes, block: BlockRef) -> bool:
        if self.principal is not None and self.principal != agent_id:
            return False
        if self.selector is None:
            return True
        if len(self.selector) == 4:
            return block.fourcc == self.selector
        return block.block_id == self.selector

    def encode(self, enc: Encoder) -> None:
        if self.principal is None:
            enc.u8(0)
        else:
            enc.u8(1).uuid(self.principal)
        if self.selector is None:
            enc.u8(_SEL_ANY)
        elif len(self.selector) == 4:
            enc.u8(_SEL_FOURCC).raw(self.selector, 4)
        else:
            enc.u8(_SEL_BLOCK).uuid(self.selector)
        enc.u8(int(self.permissions))

    @classmethod
    def decode(cls, dec: Decoder) -> "AccessRule":
        tag = dec.u8()
        if tag not in (0, 1):
            raise PolicyError(f"bad principal tag {tag}")
        principal = dec.uuid() if tag == 1 else None
        kind = dec.u8()
        if kind == _SEL_ANY:
            selector = None
        elif kind == _SEL_FOURCC:
            selector = dec.raw(4)
        elif kind == _SEL_BLOCK:
            selector = dec.uuid()
        else:
            raise PolicyError(f"bad selector tag {kind}")
        return cls(principal, selector, dec.u8())


@dataclass(frozen=True)
class AccessPolicy:
    policy_version: int
    rules: tuple[AccessRule, ...] = ()
    default_decision: Decision = Decision.DENY

    def to_bytes(self) -> bytes:
        enc = Encoder().u64(self.policy_version).u8(int(self.default_decision))
        enc.seq(self.rules, lambda e, r: r.encode(e))
        return enc.getvalue()

    @classmethod
    def from_bytes(cls, payload: bytes) -> "AccessPolicy":
        try:
            dec = Decoder(payload)
            version = dec.u64()
            default = dec.u8()
            if default != Decision.DENY:
                raise PolicyError("policies must default to deny")
            rules = tuple(dec.seq(AccessRule.decode))
            dec.expect_end()
        except FormatError as exc:
            raise PolicyError(f"malformed policy: {exc}") from None
        return cls(version, rules)


def check_permission(policy: AccessPolicy, agent_id: bytes, permission: int, block: BlockRef) -> Decision:
    """First rule matching (agent, block) decides; no match denies."""
    if not isinstance(policy, AccessPolicy):
        raise PolicyError("malformed policy")
    want = Permission(permission)
    for rule in policy.rules:
        if rule.matches(agent_id, block):
            return Decision.ALLOW if want & effective(rule.permissions) == want else Decision.DENY
    return Decision.DENY


# --------------------------------------------------------------------------
# Policy storage


def policy_history(reader: ArtifactReader) -> list[tuple[ManifestEntry, AccessPolicy]]:
    """Live ACLS blocks in file order with their decoded policies."""
    return [(e, AccessPolicy.from_bytes(reader.read_entry(e)[1])) for e in reader.list_blocks(FOURCC_ACLS)]


def current_policy(source: ArtifactReader | ArtifactWriter) -> AccessPolicy | None:
    if isinstance(source, ArtifactWriter):
        entries = [e for e in source.live_entries() if e.fourcc == FOURCC_ACLS and not e.is_tombstone]
        policies = [AccessPolicy.from_bytes(source.read_payload(e)) for e in entries]
    else:
        policies = [p for _, p in policy_history(source)]
    return max(policies, key=lambda p: p.policy_version, default=None)


def creator_id(writer: ArtifactWriter) -> bytes | None:
    records = writer.ledger.records
    return records[0].agent_id if records else None


def set_policy(writer: ArtifactWriter, policy: AccessPolicy, signer: AgentKey) -> bytes:
    """Append a new ACLS block; ``signer`` needs admin under the policy in force.

    Before any policy exists the artifact creator (author of the genesis
    provenance record) is the administrator; on an artifact with no records
    the first signer becomes the creator.
    """
    current = current_policy(writer)
    if current is None:
        creator = creator_id(writer)
        if creator is not None and creator != signer.agent_id:
            raise PermissionDenied("only the artifact creator may set the initial policy")
        if creator is None:
            writer.record(Action.CREATE, [], signer)
    else:
        if check_permission(current, signer.agent_id, Permission.ADMIN, BlockRef(None, FOURCC_ACLS)) != Decision.ALLOW:
            raise PermissionDenied("signer lacks admin permission under the current policy")
        if policy.policy_version <= current.policy_version:
            raise PolicyError(f"policy_version must exceed {current.policy_version}")
    bid = writer.append_block(FOURCC_ACLS, policy.to_bytes())
    writer.record(Action.POLICY_CHANGE, [bid], signer)
    return bid


# --------------------------------------------------------------------------
# Encryption


@dataclass(frozen=True)
class EncryptionEnvelope:
    key_id: str
    nonce: bytes
    ciphertext: bytes  # includes the 16-byte GCM tag

    def to_bytes(self) -> bytes:
        return Encoder().text(self.key_id).raw(self.nonce, 12).bytes(self.ciphertext).getvalue()

    @classmethod
    def from_bytes(cls, payload: bytes) -> "EncryptionEnvelope":
        dec = Decoder(payload)
        env = cls(dec.text(), dec.raw(12), dec.bytes())
        dec.expect_end()
        return env


def _aead(key: bytes) -> AESGCM:
    if len(key) != 32:
        raise ValueError("AES-256-GCM needs a 32-byte key")
    return AESGCM(bytes(key))


def encrypt_block_payload(key: bytes, plaintext: bytes, associated_data: bytes, key_id: str = "") -> EncryptionEnvelope:
    nonce = secrets.token_bytes(12)
    return EncryptionEnvelope(key_id, nonce, _aead(key).encrypt(nonce, bytes(plaintext), bytes(associated_data)))


def decrypt_block_payload(key: bytes, envelope: EncryptionEnvelope, associated_data: bytes) -> bytes:
    try:
        return _aead(key).decrypt(envelope.nonce, envelope.ciphertext, bytes(associated_data))
    except InvalidTag:
        raise AuthenticationError("decryption failed: wrong key, tampered ciphertext or wrong block") from None


# --------------------------------------------------------------------------
# Keyring files: "key_id:hex_key" per line


@dataclass
class Keyring:
    keys: dict[str, bytes] = field(default_factory=dict)

    def __getitem__(self, key_id: str) -> bytes:
        try:
            return self.keys[key_id]
        except KeyError:
            raise AuthenticationError(f"no key {key_id!r} in keyring") from None

    def __contains__(self, key_id: str) -> bool:
        return key_id in self.keys

    @classmethod
    def load(cls, path: str | os.PathLike) -> "Keyring":
        keys = {}
        for n, line in enumerate(Path(path).read_text().splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            kid, sep, hexkey = line.partition(":")
            if not sep:
                raise FormatError(f"{path}:{n}: expected key_id:hex_key")
            key = bytes.fromhex(hexkey.strip())
            if len(key) != 32:
                raise FormatError(f"{path}:{n}: key {kid!r} is not 32 bytes")
            keys[kid.strip()] = key
        return cls(keys)

    def save(self, path: str | os.PathLike) -> None:
        body = "".join(f"{k}:{v.hex()}\n" for k, v in sorted(self.keys.items()))
        fd = os.open(path, os.O_WRONLY | os.O_CREAT | os.O_TRUNC, 0o600)
        with os.fdopen(fd, "w") as fh:
            fh.write(body)
