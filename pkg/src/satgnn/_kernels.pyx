# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot loops: CSR x dense products and the polyline row codec."""

import numpy as np
cimport numpy as cnp
from libc.math cimport floor, fabs, pow

cnp.import_array()


def csr_matmul(const cnp.int64_t[::1] indptr, const cnp.int64_t[::1] indices,
               const double[::1] data, const double[:, ::1] dense, Py_ssize_t n_rows):
    cdef Py_ssize_t d = dense.shape[1]
    out_arr = np.zeros((n_rows, d), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i, k, j, col
    cdef double w
    with nogil:
        for i in range(n_rows):
            for k in range(indptr[i], indptr[i + 1]):
                col = indices[k]
                w = data[k]
                for j in range(d):
                    out[i, j] += w * dense[col, j]
    return out_arr


cdef inline long long _quantize(double v, double scale) nogil:
    cdef double s = v * scale
    if s >= 0:
        return <long long>floor(s + 0.5)
    return -<long long>floor(-s + 0.5)


def polyline_encode_rows(const double[:, ::1] values, int precision):
    """Encode each row independently; returns (buffer bytes, int64 row offsets)."""
    cdef Py_ssize_t n = values.shape[0], d = values.shape[1]
    cdef double scale = pow(10.0, precision)
    buf_arr = np.empty(n * d * 7 + 1, dtype=np.uint8)
    offsets_arr = np.zeros(n + 1, dtype=np.int64)
    cdef unsigned char[::1] buf = buf_arr
    cdef cnp.int64_t[::1] offsets = offsets_arr
    cdef Py_ssize_t i, j, pos = 0
    cdef long long q
    cdef unsigned long long u
    cdef bint overflow = 0
    with nogil:
        for i in range(n):
            for j in range(d):
                q = _quantize(values[i, j], scale)
                if q >= 2147483648LL or q <= -2147483648LL:
                    overflow = 1
                    break
                if q < 0:
                    u = <unsigned long long>(~(q << 1))
                else:
                    u = <unsigned long long>(q << 1)
                while u >= 0x20:
                    buf[pos] = <unsigned char>((0x20 | (u & 0x1f)) + 63)
                    pos += 1
                    u >>= 5
                buf[pos] = <unsigned char>(u + 63)
                pos += 1
            if overflow:
                break
            offsets[i + 1] = pos
    if overflow:
        raise OverflowError("scaled value does not fit in 32 bits")
    return bytes(buf_arr[:pos]), offsets_arr


def polyline_decode_rows(const unsigned char[::1] buf, const cnp.int64_t[::1] offsets,
                         Py_ssize_t d, int precision):
    cdef Py_ssize_t n = offsets.shape[0] - 1
    cdef double scale = pow(10.0, precision)
    out_arr = np.empty((n, d), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i, j, pos, end
    cdef long long acc
    cdef int shift, c
    cdef int bad = 0
    with nogil:
        for i in range(n):
            pos = offsets[i]
            end = offsets[i + 1]
            j = 0
            while pos < end:
                acc = 0
                shift = 0
                while True:
                    if pos >= end or shift > 35:
                        bad = 1
                        break
                    c = buf[pos] - 63
                    pos += 1
                    if c < 0 or c > 63:
                        bad = 1
                        break
                    acc |= (<long long>(c & 0x1f)) << shift
                    shift += 5
                    if c < 0x20:
                        break
                if bad:
                    break
                if j >= d:
                    bad = 1
                    break
                if acc & 1:
                    out[i, j] = (~(acc >> 1)) / scale
                else:
                    out[i, j] = (acc >> 1) / scale
                j += 1
            if bad or j != d:
                bad = 1
                break
    if bad:
        raise ValueError("malformed polyline payload")
    return out_arr
