"""Exception hierarchy shared by every MAIF module."""

from __future__ import annotations


class MaifError(Exception):
    """Base class for all MAIF errors."""


class FormatError(MaifError):
    """Structurally invalid bytes: bad magic, CRC failure, truncation, bad lengths."""


class BadMagicError(FormatError):
    pass


class HeaderCrcError(FormatError):
    pass


class TruncatedError(FormatError):
    pass


class TamperError(MaifError):
    """A cryptographic hash did not match the bytes it protects."""

    def __init__(self, message: str, block_id: bytes | None = None, offset: int | None = None):
        super().__init__(message)
        self.block_id = block_id
        self.offset = offset


class RootHashMismatch(TamperError):
    pass


class VersionChainError(TamperError):
    def __init__(self, message: str, version: int, offset: int | None = None):
        super().__init__(message, offset=offset)
        self.version = version


class UnknownBlockError(MaifError, KeyError):
    def __str__(self) -> str:  # KeyError repr-quotes its message otherwise
        return str(self.args[0]) if self.args else "unknown block"


class BlockDeletedError(UnknownBlockError):
    pass


class BlockTooLargeError(MaifError):
    pass


class WriterLockedError(MaifError):
    pass


class TransactionError(MaifError):
    pass


class UnknownVersionError(MaifError):
    pass


class RecoveryError(MaifError):
    pass


class UnsupportedCodecError(MaifError):
    pass


class CodecError(MaifError):
    """Corrupt compressed stream or decompressed-length mismatch."""


class AuthenticationError(MaifError):
    """AEAD decryption failed: wrong key, mutated ciphertext or wrong associated data."""


class PermissionDenied(MaifError):
    pass


class PolicyError(MaifError):
    pass


class EmbeddingError(MaifError, ValueError):
    pass


class LifecycleError(MaifError, ValueError):
    pass
