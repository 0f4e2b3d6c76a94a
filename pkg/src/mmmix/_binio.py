"""Little-endian record reader that reports byte offsets on failure."""
from __future__ import annotations

import struct

import numpy as np

from .errors import FormatError


class Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def need(self, n: int, what: str) -> None:
        if self.pos + n > len(self.data):
            raise FormatError(
                f"truncated file while reading {what}: expected {self.pos + n} bytes, got {len(self.data)}",
                self.pos,
            )

    def magic(self, expected: bytes) -> None:
        self.need(len(expected), "magic")
        got = self.data[self.pos:self.pos + len(expected)]
        if got != expected:
            raise FormatError(f"bad magic {got!r}, expected {expected!r}", self.pos)
        self.pos += len(expected)

    def unpack(self, fmt: str, what: str):
        size = struct.calcsize("<" + fmt)
        self.need(size, what)
        vals = struct.unpack_from("<" + fmt, self.data, self.pos)
        self.pos += size
        return vals[0] if len(vals) == 1 else vals

    def version(self, expected: int) -> None:
        at = self.pos
        v = self.unpack("H", "version")
        if v != expected:
            raise FormatError(f"unsupported version {v}, expected {expected}", at)

    def f64(self, count: int, what: str) -> np.ndarray:
        self.need(8 * count, what)
        arr = np.frombuffer(self.data, dtype="<f8", count=count, offset=self.pos).astype(np.float64)
        self.pos += 8 * count
        return arr

    def finish(self) -> None:
        if self.pos != len(self.data):
            raise FormatError(
                f"trailing bytes: expected length {self.pos}, got {len(self.data)}", self.pos
            )


def f64_bytes(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f8").tobytes()
