"""Little-endian binary container shared by hub and generator files.

Layout: ``b"MODR"``, u32 version, u8 kind, then a kind-specific payload built
from the primitives below.  Arrays are stored as float32 with a u8 rank and
u32 dims; strings are u32-length-prefixed UTF-8.
"""

from __future__ import annotations

import io
import struct

import numpy as np

from moder.errors import FormatError

MAGIC = b"MODR"
VERSION = 1

KIND_HUB = 1
KIND_GENERATOR = 2


class Writer:
    def __init__(self, kind: int):
        self.buf = io.BytesIO()
        self.buf.write(MAGIC)
        self.u32(VERSION)
        self.u8(kind)

    def u8(self, v: int) -> None:
        self.buf.write(struct.pack("<B", v))

    def u32(self, v: int) -> None:
        self.buf.write(struct.pack("<I", v))

    def i64(self, v: int) -> None:
        self.buf.write(struct.pack("<q", v))

    def u64(self, v: int) -> None:
        self.buf.write(struct.pack("<Q", v))

    def f64(self, v: float) -> None:
        self.buf.write(struct.pack("<d", v))

    def string(self, s: str) -> None:
        data = s.encode("utf-8")
        self.u32(len(data))
        self.buf.write(data)

    def array(self, a) -> None:
        a = np.asarray(a)
        self.u8(a.ndim)
        for n in a.shape:
            self.u32(n)
        self.buf.write(np.ascontiguousarray(a, dtype="<f4").tobytes())

    def getvalue(self) -> bytes:
        return self.buf.getvalue()


class Reader:
    def __init__(self, data: bytes, expected_kind: int):
        self.data = data
        self.pos = 0
        magic = self._take(4)
        if magic != MAGIC:
            raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
        version = self.u32()
        if version != VERSION:
            raise FormatError(f"unsupported version {version}, expected {VERSION}")
        kind = self.u8()
        if kind != expected_kind:
            raise FormatError(f"file kind {kind} != expected {expected_kind}")

    def _take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated file: need {n} bytes at offset {self.pos}, have {len(self.data) - self.pos}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return struct.unpack("<B", self._take(1))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self._take(4))[0]

    def i64(self) -> int:
        return struct.unpack("<q", self._take(8))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self._take(8))[0]

    def f64(self) -> float:
        return struct.unpack("<d", self._take(8))[0]

    def string(self) -> str:
        n = self.u32()
        try:
            return self._take(n).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"invalid UTF-8 string at offset {self.pos - n}") from exc

    def array(self) -> np.ndarray:
        ndim = self.u8()
        if ndim > 4:
            raise FormatError(f"implausible array rank {ndim}")
        shape = tuple(self.u32() for _ in range(ndim))
        count = int(np.prod(shape)) if shape else 1
        raw = self._take(4 * count)
        return np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float64)

    def finish(self) -> None:
        if self.pos != len(self.data):
            raise FormatError(f"{len(self.data) - self.pos} trailing bytes after payload")
