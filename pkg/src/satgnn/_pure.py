"""Pure NumPy / Python versions of the compiled kernels.

Selected automatically when ``satgnn._kernels`` is not built, or forced with
``SATGNN_PURE=1``. Results are bit-identical to the compiled versions.
"""
import math

import numpy as np


def csr_matmul(indptr, indices, data, dense, n_rows):
    d = dense.shape[1]
    out = np.zeros((n_rows, d), dtype=np.float64)
    if len(indices) == 0:
        return out
    starts = np.asarray(indptr[:-1], dtype=np.int64)
    lengths = np.diff(indptr)
    # j-th entry of every row at once; keeps the compiled loop's left-to-right
    # order per row (reduceat sums pairwise and drifts by an ulp)
    for j in range(int(lengths.max())):
        rows = np.flatnonzero(lengths > j)
        k = starts[rows] + j
        out[rows] += data[k, None] * dense[indices[k]]
    return out


def _quantize(v, scale):
    s = v * scale
    if s >= 0:
        return int(math.floor(s + 0.5))
    return -int(math.floor(-s + 0.5))


def _encode_int(q, out):
    if q >= 2**31 or q <= -(2**31):
        raise OverflowError("scaled value does not fit in 32 bits")
    u = ~(q << 1) if q < 0 else q << 1
    while u >= 0x20:
        out.append((0x20 | (u & 0x1F)) + 63)
        u >>= 5
    out.append(u + 63)


def polyline_encode_rows(values, precision):
    scale = 10.0 ** precision
    out = bytearray()
    offsets = np.zeros(values.shape[0] + 1, dtype=np.int64)
    for i, row in enumerate(values.tolist()):
        for v in row:
            _encode_int(_quantize(v, scale), out)
        offsets[i + 1] = len(out)
    return bytes(out), offsets


def polyline_decode_rows(buf, offsets, d, precision):
    scale = 10.0 ** precision
    n = len(offsets) - 1
    out = np.empty((n, d), dtype=np.float64)
    buf = bytes(buf)
    for i in range(n):
        pos, end = int(offsets[i]), int(offsets[i + 1])
        j = 0
        while pos < end:
            acc = 0
            shift = 0
            while True:
                if pos >= end or shift > 35:
                    raise ValueError("malformed polyline payload")
                c = buf[pos] - 63
                pos += 1
                if c < 0 or c > 63:
                    raise ValueError("malformed polyline payload")
                acc |= (c & 0x1F) << shift
                shift += 5
                if c < 0x20:
                    break
            if j >= d:
                raise ValueError("malformed polyline payload")
            out[i, j] = (~(acc >> 1) if acc & 1 else acc >> 1) / scale
            j += 1
        if j != d:
            raise ValueError("malformed polyline payload")
    return out
