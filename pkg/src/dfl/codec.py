"""Canonical binary encoding used for digests, the chain file and wire frames.

Integers are fixed-width big-endian, byte strings and text are u32-length
prefixed, floats are little-endian IEEE-754 doubles.
"""

from __future__ import annotations

import struct

import numpy as np


class DecodeError(ValueError):
    pass


class Writer:
    def __init__(self) -> None:
        self._parts: list[bytes] = []

    def u8(self, value: int) -> "Writer":
        self._parts.append(struct.pack(">B", value))
        return self

    def u32(self, value: int) -> "Writer":
        self._parts.append(struct.pack(">I", value))
        return self

    def u64(self, value: int) -> "Writer":
        self._parts.append(struct.pack(">Q", value))
        return self

    def f64(self, value: float) -> "Writer":
        self._parts.append(struct.pack("<d", value))
        return self

    def raw(self, data: bytes) -> "Writer":
        self._parts.append(data)
        return self

    def blob(self, data: bytes) -> "Writer":
        self.u32(len(data))
        self._parts.append(bytes(data))
        return self

    def text(self, value: str) -> "Writer":
        return self.blob(value.encode("utf-8"))

    def floats(self, values: np.ndarray) -> "Writer":
        arr = np.ascontiguousarray(values, dtype="<f8")
        self.u64(arr.size)
        self._parts.append(arr.tobytes())
        return self

    def getvalue(self) -> bytes:
        return b"".join(self._parts)


class Reader:
    def __init__(self, data: bytes) -> None:
        self._data = memoryview(data)
        self._pos = 0

    def _take(self, n: int) -> memoryview:
        if n < 0 or self._pos + n > len(self._data):
            raise DecodeError(f"truncated input: need {n} bytes at offset {self._pos}")
        chunk = self._data[self._pos:self._pos + n]
        self._pos += n
        return chunk

    def u8(self) -> int:
        return self._take(1)[0]

    def u32(self) -> int:
        return struct.unpack(">I", self._take(4))[0]

    def u64(self) -> int:
        return struct.unpack(">Q", self._take(8))[0]

    def f64(self) -> float:
        return struct.unpack("<d", self._take(8))[0]

    def raw(self, n: int) -> bytes:
        return bytes(self._take(n))

    def blob(self) -> bytes:
        return bytes(self._take(self.u32()))

    def text(self) -> str:
        return self.blob().decode("utf-8")

    def floats(self) -> np.ndarray:
        n = self.u64()
        return np.frombuffer(bytes(self._take(8 * n)), dtype="<f8").astype(np.float64)

    @property
    def remaining(self) -> int:
        return len(self._data) - self._pos

    def expect_end(self) -> None:
        if self.remaining:
            raise DecodeError(f"{self.remaining} trailing bytes")
