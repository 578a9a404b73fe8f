"""Shared helpers for the little-endian, CRC32-trailed binary files."""
from __future__ import annotations

import struct
import zlib
from pathlib import Path


class FormatError(Exception):
    """Base class for all on-disk format problems."""


class MagicMismatchError(FormatError):
    pass


class VersionMismatchError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


class ChecksumError(FormatError):
    pass


def seal(payload: bytes) -> bytes:
    """Append the CRC32 of ``payload`` as a little-endian u32."""
    return payload + struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF)


def open_sealed(path, magic: bytes, version: int) -> "Reader":
    """Read a sealed file and validate magic then version.

    The checksum is left to the caller (``Reader.verify``) so that formats with a
    length-bearing header can report truncation before corruption.
    """
    raw = Path(path).read_bytes()
    if len(raw) < len(magic) and magic.startswith(raw):
        raise TruncatedFileError(f"{path}: file ends inside the magic ({len(raw)} bytes)")
    if raw[: len(magic)] != magic:
        raise MagicMismatchError(f"{path}: expected magic {magic!r}, got {raw[:len(magic)]!r}")
    if len(raw) < len(magic) + 8:
        raise TruncatedFileError(f"{path}: file too short ({len(raw)} bytes)")
    (found,) = struct.unpack_from("<I", raw, len(magic))
    if found != version:
        raise VersionMismatchError(f"{path}: unsupported version {found}, expected {version}")
    payload, trailer = raw[:-4], raw[-4:]
    reader = Reader(payload, len(magic) + 4)
    reader.trailer = trailer
    return reader


class Reader:
    def __init__(self, buf: bytes, offset: int = 0):
        self.buf = buf
        self.offset = offset
        self.trailer = b""

    def take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.offset + size > len(self.buf):
            raise TruncatedFileError(f"need {size} bytes at offset {self.offset}, file ends first")
        out = struct.unpack_from(fmt, self.buf, self.offset)
        self.offset += size
        return out

    def take_bytes(self, n: int) -> bytes:
        if self.offset + n > len(self.buf):
            raise TruncatedFileError(f"need {n} bytes at offset {self.offset}, file ends first")
        out = self.buf[self.offset : self.offset + n]
        self.offset += n
        return out

    def verify(self) -> None:
        (crc,) = struct.unpack("<I", self.trailer)
        if crc != zlib.crc32(self.buf) & 0xFFFFFFFF:
            raise ChecksumError("CRC32 mismatch: file is corrupt")

    def finish(self) -> None:
        if self.offset != len(self.buf):
            raise TruncatedFileError(
                f"payload length mismatch: parsed {self.offset} of {len(self.buf)} bytes"
            )
