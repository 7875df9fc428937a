"""Little-endian binary readers/writers shared by the on-disk formats.

Every container format starts with a 4-byte magic; arrays are stored as raw
little-endian buffers preceded by explicit shape fields, so files are
bit-reproducible for identical inputs.
"""

from __future__ import annotations

import io
import struct

import numpy as np


class FormatError(ValueError):
    """Bad magic, version or truncated payload."""


class Writer:
    def __init__(self) -> None:
        self._buf = io.BytesIO()

    def magic(self, tag: bytes) -> None:
        assert len(tag) == 4
        self._buf.write(tag)

    def u32(self, v: int) -> None:
        self._buf.write(struct.pack("<I", v))

    def u64(self, v: int) -> None:
        self._buf.write(struct.pack("<Q", v))

    def f32(self, v: float) -> None:
        self._buf.write(struct.pack("<f", v))

    def f64(self, v: float) -> None:
        self._buf.write(struct.pack("<d", v))

    def array(self, a: np.ndarray, dtype) -> None:
        a = np.ascontiguousarray(a, dtype=dtype)
        self._buf.write(a.tobytes())

    def text(self, s: str) -> None:
        raw = s.encode("utf-8")
        self.u32(len(raw))
        self._buf.write(raw)

    def block(self, raw: bytes) -> None:
        self.u64(len(raw))
        self._buf.write(raw)

    def getvalue(self) -> bytes:
        return self._buf.getvalue()


class Reader:
    def __init__(self, raw: bytes) -> None:
        self._raw = raw
        self._pos = 0

    def _take(self, n: int) -> bytes:
        if self._pos + n > len(self._raw):
            raise FormatError("truncated payload")
        out = self._raw[self._pos:self._pos + n]
        self._pos += n
        return out

    def magic(self, tag: bytes) -> None:
        got = self._take(4)
        if got != tag:
            raise FormatError(f"bad magic {got!r}, expected {tag!r}")

    def u32(self) -> int:
        return struct.unpack("<I", self._take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self._take(8))[0]

    def f32(self) -> float:
        return struct.unpack("<f", self._take(4))[0]

    def f64(self) -> float:
        return struct.unpack("<d", self._take(8))[0]

    def array(self, shape, dtype) -> np.ndarray:
        dt = np.dtype(dtype)
        n = int(np.prod(shape)) if shape else 1
        raw = self._take(n * dt.itemsize)
        return np.frombuffer(raw, dtype=dt).reshape(shape).copy()

    def text(self) -> str:
        n = self.u32()
        return self._take(n).decode("utf-8")

    def block(self) -> bytes:
        n = self.u64()
        return self._take(n)

    def done(self) -> bool:
        return self._pos == len(self._raw)
