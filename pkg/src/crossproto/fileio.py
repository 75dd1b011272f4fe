"""Low-level binary file helpers shared by checkpoint and dataset I/O.

Everything on disk is little-endian.  The three error kinds are split so
callers can distinguish a wrong file from a damaged one.
"""

from __future__ import annotations

import struct

# Largest sane axis length; a u32 above this is treated as corruption.
MAX_DIM = 2**31 - 1


class FileFormatError(ValueError):
    """Base class for structured-file problems."""


class BadMagicError(FileFormatError):
    """File does not start with the expected magic bytes."""


class TruncatedFileError(FileFormatError):
    """File ended in the middle of a declared field."""


class DimOverflowError(FileFormatError):
    """A declared dimension is implausibly large."""


class Reader:
    """Cursor over an in-memory byte blob with truncation checking."""

    def __init__(self, blob: bytes, name: str = "file"):
        self.blob = blob
        self.pos = 0
        self.name = name

    def remaining(self) -> int:
        return len(self.blob) - self.pos

    def take(self, n: int) -> bytes:
        if self.remaining() < n:
            raise TruncatedFileError(
                f"{self.name}: expected {n} more bytes at offset {self.pos}, "
                f"found {self.remaining()}"
            )
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def dim(self, what: str = "dimension") -> int:
        v = self.u32()
        if v > MAX_DIM:
            raise DimOverflowError(f"{self.name}: {what} {v} exceeds {MAX_DIM}")
        return v

    def expect_magic(self, magic: bytes) -> None:
        got = self.take(len(magic))
        if got != magic:
            raise BadMagicError(
                f"{self.name}: bad magic {got!r}, expected {magic!r}"
            )


def pack_u16(v: int) -> bytes:
    return struct.pack("<H", v)


def pack_u32(v: int) -> bytes:
    return struct.pack("<I", v)
