"""Compression and encryption applied around raw block payloads.

Write order is compress, then encrypt; reads undo it in reverse.  The
block's payload hash always covers the stored bytes, so integrity checks
need neither keys nor codecs.
"""

from __future__ import annotations

from .access import EncryptionEnvelope, Keyring, decrypt_block_payload, encrypt_block_payload
from .compression import CodecId, compress, decompress
from .container import ArtifactReader, ArtifactWriter, BlockFlags, as_fourcc
from .errors import AuthenticationError
from .provenance import Action


def write_payload(writer: ArtifactWriter, fourcc, data: bytes, codec: int = CodecId.NONE,
                  key: bytes | None = None, key_id: str = "", block_id: bytes | None = None,
                  signer=None, action: Action | None = None) -> bytes:
    fourcc = as_fourcc(fourcc)
    replacing = block_id is not None and writer.lookup(block_id) is not None
    block_id = block_id or writer.new_block_id()
    flags = 0
    stored = bytes(data)
    if codec != CodecId.NONE:
        stored = compress(codec, stored)
        flags |= BlockFlags.COMPRESSED
    if key is not None:
        stored = encrypt_block_payload(key, stored, block_id, key_id).to_bytes()
        flags |= BlockFlags.ENCRYPTED
    writer.append_block(fourcc, stored, flags, int(codec), uncompressed_length=len(data), block_id=block_id)
    if action is None:
        action = Action.UPDATE if replacing else Action.APPEND
    writer.record(action, [block_id], signer)
    return block_id


def decode_stored(header, stored: bytes, keyring: Keyring | dict | None = None) -> bytes:
    data = stored
    if header.flags & BlockFlags.ENCRYPTED:
        env = EncryptionEnvelope.from_bytes(data)
        if keyring is None:
            raise AuthenticationError(f"block is encrypted with key {env.key_id!r}; no keyring given")
        data = decrypt_block_payload(keyring[env.key_id], env, header.block_id)
    if header.flags & BlockFlags.COMPRESSED:
        data = decompress(header.codec_id, data, header.uncompressed_length)
    return data


def read_payload(reader: ArtifactReader, block_id: bytes, keyring: Keyring | dict | None = None,
                 verify: bool = True) -> bytes:
    header, stored = reader.get_block(block_id, verify)
    return decode_stored(header, stored, keyring)
