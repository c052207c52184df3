"""MAIF Canonical Binary Encoding.

Fixed-width little-endian integers, ``u32`` length-prefixed byte strings and
UTF-8 text, ``u32`` counted sequences, raw 32-byte hashes and 16-byte UUIDs.
Fields are written in declaration order with no padding, so encoding the same
value twice always yields the same bytes.
"""

from __future__ import annotations

import struct
from typing import Callable, Iterable, TypeVar

from .errors import FormatError, TruncatedError

T = TypeVar("T")

_U8 = struct.Struct("<B")
_U16 = struct.Struct("<H")
_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")
_F32 = struct.Struct("<f")

HASH_LEN = 32
UUID_LEN = 16


class Encoder:
    __slots__ = ("_parts",)

    def __init__(self) -> None:
        self._parts: list[bytes] = []

    def u8(self, v: int) -> "Encoder":
        self._parts.append(_U8.pack(v))
        return self

    def u16(self, v: int) -> "Encoder":
        self._parts.append(_U16.pack(v))
        return self

    def u32(self, v: int) -> "Encoder":
        self._parts.append(_U32.pack(v))
        return self

    def u64(self, v: int) -> "Encoder":
        self._parts.append(_U64.pack(v))
        return self

    def f32(self, v: float) -> "Encoder":
        self._parts.append(_F32.pack(v))
        return self

    def raw(self, b: bytes, length: int | None = None) -> "Encoder":
        if length is not None and len(b) != length:
            raise ValueError(f"expected {length} raw bytes, got {len(b)}")
        self._parts.append(bytes(b))
        return self

    def hash(self, b: bytes) -> "Encoder":
        return self.raw(b, HASH_LEN)

    def uuid(self, b: bytes) -> "Encoder":
        return self.raw(b, UUID_LEN)

    def bytes(self, b: bytes) -> "Encoder":
        self._parts.append(_U32.pack(len(b)))
        self._parts.append(bytes(b))
        return self

    def text(self, s: str) -> "Encoder":
        return self.bytes(s.encode("utf-8"))

    def seq(self, items: Iterable[T], fn: Callable[["Encoder", T], object]) -> "Encoder":
        items = list(items)
        self.u32(len(items))
        for item in items:
            fn(self, item)
        return self

    def getvalue(self) -> bytes:
        return b"".join(self._parts)


class Decoder:
    __slots__ = ("_buf", "pos")

    def __init__(self, buf: bytes | memoryview, pos: int = 0) -> None:
        self._buf = memoryview(buf)
        self.pos = pos

    def _take(self, n: int) -> memoryview:
        end = self.pos + n
        if end > len(self._buf):
            raise TruncatedError(f"MCBE read of {n} bytes at {self.pos} overruns {len(self._buf)}")
        view = self._buf[self.pos:end]
        self.pos = end
        return view

    def u8(self) -> int:
        return _U8.unpack(self._take(1))[0]

    def u16(self) -> int:
        return _U16.unpack(self._take(2))[0]

    def u32(self) -> int:
        return _U32.unpack(self._take(4))[0]

    def u64(self) -> int:
        return _U64.unpack(self._take(8))[0]

    def f32(self) -> float:
        return _F32.unpack(self._take(4))[0]

    def raw(self, n: int) -> bytes:
        return bytes(self._take(n))

    def hash(self) -> bytes:
        return self.raw(HASH_LEN)

    def uuid(self) -> bytes:
        return self.raw(UUID_LEN)

    def bytes(self) -> bytes:
        return self.raw(self.u32())

    def text(self) -> str:
        try:
            return self.bytes().decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"invalid UTF-8 in MCBE text: {exc}") from None

    def seq(self, fn: Callable[["Decoder"], T], max_count: int | None = None) -> list[T]:
        n = self.u32()
        if max_count is not None and n > max_count:
            raise FormatError(f"sequence count {n} exceeds limit {max_count}")
        # every element is at least one byte; reject absurd counts before looping
        if n > len(self._buf) - self.pos and n > 0:
            raise TruncatedError(f"sequence count {n} exceeds remaining bytes")
        return [fn(self) for _ in range(n)]

    @property
    def remaining(self) -> int:
        return len(self._buf) - self.pos

    def expect_end(self) -> None:
        if self.pos != len(self._buf):
            raise FormatError(f"{len(self._buf) - self.pos} trailing bytes after MCBE value")
