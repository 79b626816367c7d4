"""Little-endian reader for the repository's binary containers."""

import struct
from typing import Tuple

from .errors import FormatError


class ByteReader:
    """Sequential reader that reports the byte offset of every failure.

    Args:
        data: The whole file contents
        what: Container name used in error messages
        error: FormatError subclass raised on failure
    """

    def __init__(self, data: bytes, what: str, error: type = FormatError):
        self.data = data
        self.offset = 0
        self.what = what
        self.error = error

    def take(self, n: int) -> bytes:
        if n < 0 or self.offset + n > len(self.data):
            raise self.error(
                f"truncated {self.what}: wanted {n} bytes, {len(self.data) - self.offset} left",
                self.offset,
            )
        chunk = self.data[self.offset:self.offset + n]
        self.offset += n
        return chunk

    def unpack(self, fmt: str) -> Tuple:
        return struct.unpack("<" + fmt, self.take(struct.calcsize("<" + fmt)))

    def expect(self, magic: bytes) -> None:
        start = self.offset
        found = self.take(len(magic))
        if found != magic:
            raise self.error(f"bad {self.what} magic {found!r}, expected {magic!r}", start)

    def remaining(self) -> int:
        return len(self.data) - self.offset

    def finish(self) -> None:
        if self.offset != len(self.data):
            raise self.error(f"{self.remaining()} trailing bytes after {self.what}", self.offset)
