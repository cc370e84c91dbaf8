"""Lossy fixed-point compression of embedding vectors via polyline encoding.

Every coordinate is scaled by ``10**precision``, rounded half away from
zero, zig-zag folded (shift left, invert if negative) and written as 5-bit
little-endian groups offset by 63. Coordinates are encoded independently:
there is no delta chaining between consecutive values.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels

# final chunk of each value is a byte below 63 + 0x20
_TERMINATOR_LIMIT = 95


def quantize(values, precision: int) -> np.ndarray:
    """The values the codec reproduces: round-half-away-from-zero at ``precision`` places."""
    scale = 10.0 ** precision
    s = np.asarray(values, dtype=np.float64) * scale
    q = np.where(s >= 0, np.floor(s + 0.5), -np.floor(-s + 0.5))
    return q / scale


def encode_polyline(v, precision: int = 4) -> bytes:
    row = np.ascontiguousarray(np.asarray(v, dtype=np.float64).reshape(1, -1))
    buf, _ = kernels.polyline_encode_rows(row, precision)
    return buf


def decode_polyline(data: bytes | str, precision: int = 4) -> np.ndarray:
    if isinstance(data, str):
        data = data.encode("ascii")
    raw = np.frombuffer(data, dtype=np.uint8)
    d = int((raw < _TERMINATOR_LIMIT).sum())
    offsets = np.array([0, len(raw)], dtype=np.int64)
    return kernels.polyline_decode_rows(np.ascontiguousarray(raw), offsets, d, precision)[0]


@dataclass(frozen=True)
class EncodedRows:
    """A batch of independently encoded rows sharing one byte buffer."""

    buf: bytes
    offsets: np.ndarray
    dim: int
    precision: int

    def __len__(self) -> int:
        return len(self.offsets) - 1

    @property
    def nbytes(self) -> int:
        return len(self.buf)

    def row(self, i: int) -> bytes:
        return self.buf[self.offsets[i]:self.offsets[i + 1]]


@dataclass(frozen=True)
class PolylineCodec:
    precision: int = 4

    def __post_init__(self):
        if not 1 <= self.precision <= 9:
            raise ValueError(f"precision must be in 1..9, got {self.precision}")

    def encode(self, v) -> bytes:
        return encode_polyline(v, self.precision)

    def decode(self, data) -> np.ndarray:
        return decode_polyline(data, self.precision)

    def encode_rows(self, rows: np.ndarray) -> EncodedRows:
        rows = np.ascontiguousarray(rows, dtype=np.float64)
        if rows.ndim != 2:
            raise ValueError("encode_rows expects a 2-D matrix")
        buf, offsets = kernels.polyline_encode_rows(rows, self.precision)
        return EncodedRows(buf, offsets, rows.shape[1], self.precision)

    def decode_rows(self, enc: EncodedRows, which=None) -> np.ndarray:
        raw = np.frombuffer(enc.buf, dtype=np.uint8)
        if which is None:
            return kernels.polyline_decode_rows(raw, enc.offsets, enc.dim, enc.precision)
        which = np.asarray(which, dtype=np.int64)
        starts, ends = enc.offsets[which], enc.offsets[which + 1]
        lengths = ends - starts
        offsets = np.zeros(len(which) + 1, dtype=np.int64)
        np.cumsum(lengths, out=offsets[1:])
        if len(which) and lengths.sum():
            idx = np.repeat(starts - offsets[:-1], lengths) + np.arange(offsets[-1])
            sub = np.ascontiguousarray(raw[idx])
        else:
            sub = np.zeros(0, dtype=np.uint8)
        return kernels.polyline_decode_rows(sub, offsets, enc.dim, enc.precision)
