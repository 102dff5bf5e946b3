"""Little-endian binary framing shared by index and checkpoint files."""
from __future__ import annotations

import struct

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK = 0xFFFFFFFFFFFFFFFF


class FormatError(ValueError):
    """Base class for unreadable binary files."""


class BadMagicError(FormatError):
    pass


class VersionError(FormatError):
    pass


class EndiannessError(VersionError):
    """The header looks byte-swapped, i.e. written big-endian."""


class ChecksumError(FormatError):
    pass


class TruncatedFileError(ChecksumError):
    """The file ends before its own structure does.

    A cut-off file also fails the checksum, hence the subclass; a corrupted
    length field that points past the end is reported the same way.
    """


def fnv1a64(data: bytes, h: int = FNV_OFFSET) -> int:
    for byte in data:
        h = ((h ^ byte) * FNV_PRIME) & _MASK
    return h


def seal(body: bytes) -> bytes:
    """Append the FNV-1a 64 trailer."""
    return body + struct.pack("<Q", fnv1a64(body))


def unseal(blob: bytes, magic: bytes, version: int, body_length=None) -> bytes:
    """Validate magic, version and trailer; return the body (header included).

    Checks run in an order that keeps error kinds distinct: a short file is
    reported as truncated, a foreign file as bad magic, a swapped header as an
    endianness problem, and only then is the checksum compared. On a
    checksum failure ``body_length(blob)``, if given, walks the structure;
    a walk that runs off the end marks the file as truncated.
    """
    if len(blob) < len(magic) + 4 + 8:
        raise TruncatedFileError(f"file is only {len(blob)} bytes")
    if blob[: len(magic)] != magic:
        raise BadMagicError(f"expected magic {magic!r}, found {blob[:len(magic)]!r}")
    (found,) = struct.unpack_from("<I", blob, len(magic))
    if found != version:
        (swapped,) = struct.unpack_from(">I", blob, len(magic))
        if swapped == version:
            raise EndiannessError("header is big-endian; this format is little-endian only")
        raise VersionError(f"unsupported format version {found} (expected {version})")
    body, trailer = blob[:-8], blob[-8:]
    (stored,) = struct.unpack("<Q", trailer)
    if fnv1a64(body) != stored:
        if body_length is not None:
            try:
                need = body_length(blob)
            except TruncatedFileError:
                raise TruncatedFileError(f"file is truncated at {len(blob)} bytes") from None
            except (ValueError, KeyError, TypeError, struct.error):
                need = None  # unreadable structure: plain corruption
            if need is not None and need + 8 > len(blob):
                raise TruncatedFileError(f"file is truncated: structure needs {need + 8} bytes, found {len(blob)}")
        raise ChecksumError("checksum mismatch: file is corrupted")
    return body


class Reader:
    """Cursor over a byte buffer that raises :class:`TruncatedFileError` on overrun."""

    def __init__(self, buf: bytes, pos: int = 0):
        self.buf = buf
        self.pos = pos

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedFileError(f"need {n} bytes at offset {self.pos}, have {len(self.buf) - self.pos}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        fmt = "<" + fmt
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def at_end(self) -> bool:
        return self.pos == len(self.buf)
