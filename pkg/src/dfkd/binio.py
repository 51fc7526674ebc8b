"""Little-endian record helpers shared by the binary file formats."""

from __future__ import annotations

import struct

import numpy as np


class ByteReader:
    """Sequential reader that raises ``error_cls`` on any short read."""

    def __init__(self, data: bytes, error_cls=ValueError):
        self.data = data
        self.pos = 0
        self.error_cls = error_cls

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.data):
            raise self.error_cls("record ends past the end of the file")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return self.take(1)[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def u64s(self, n: int) -> tuple:
        return struct.unpack(f"<{n}Q", self.take(8 * n))

    def str32(self) -> str:
        return self.take(self.u32()).decode("utf-8")

    def f64_array(self, shape) -> np.ndarray:
        count = int(np.prod(shape, dtype=np.int64)) if len(shape) else 1
        raw = self.take(8 * count)
        return np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)

    def i64_array(self, count: int) -> np.ndarray:
        raw = self.take(8 * count)
        return np.frombuffer(raw, dtype="<i8").astype(np.int64)

    def done(self) -> bool:
        return self.pos == len(self.data)


def pack_str32(text: str) -> bytes:
    raw = text.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def pack_f64_tensor(arr: np.ndarray) -> bytes:
    head = struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype="<f8").tobytes()


def pack_i64_array(arr: np.ndarray) -> bytes:
    return struct.pack("<Q", arr.size) + np.ascontiguousarray(arr, dtype="<i8").tobytes()
