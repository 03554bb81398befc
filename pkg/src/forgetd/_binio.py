"""Bounds-checked binary reading shared by the checkpoint and ledger formats."""

import struct
import zlib

from forgetd.errors import ChecksumError, TruncatedError


class Reader:
    """Bounds-checked cursor; every short read becomes a TruncatedError."""

    def __init__(self, buf: bytes, what: str):
        self.buf = buf
        self.pos = 0
        self.what = what

    def take(self, n: int, where: str) -> bytes:
        if n < 0 or self.pos + n > len(self.buf):
            raise TruncatedError(f"{self.what} truncated in {where} at byte {self.pos}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, where: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), where))

    def remaining(self) -> int:
        return len(self.buf) - self.pos


def split_crc(buf: bytes, what: str) -> bytes:
    """Verify and strip the trailing CRC32."""
    if len(buf) < 4:
        raise TruncatedError(f"{what} truncated: {len(buf)} bytes")
    body, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    if zlib.crc32(body) != crc:
        raise ChecksumError(f"{what} checksum mismatch")
    return body
