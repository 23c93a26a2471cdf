# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled run-length / exp-Golomb block coder.

Bit-identical to :mod:`cdre._entropy_py`; see that module for the syntax.
"""

import numpy as np
from libc.stdint cimport uint8_t, uint64_t, int64_t, int32_t
from libc.stdlib cimport malloc, realloc, free

from .errors import MalformedBitstreamError

DEF MAX_PREFIX = 32


cdef struct Writer:
    uint8_t* buf
    Py_ssize_t size
    Py_ssize_t cap
    uint64_t acc
    int nbits


cdef int _grow(Writer* w) except -1:
    cdef Py_ssize_t cap = w.cap * 2 + 64
    cdef uint8_t* nb = <uint8_t*> realloc(w.buf, cap)
    if nb == NULL:
        raise MemoryError()
    w.buf = nb
    w.cap = cap
    return 0


cdef inline int _put(Writer* w, uint64_t value, int n) except -1:
    # n <= 32 so acc never holds more than 39 bits
    w.acc = (w.acc << n) | value
    w.nbits += n
    while w.nbits >= 8:
        w.nbits -= 8
        if w.size == w.cap:
            _grow(w)
        w.buf[w.size] = <uint8_t> ((w.acc >> w.nbits) & 0xFF)
        w.size += 1
    w.acc &= ((<uint64_t> 1) << w.nbits) - 1
    return 0


cdef inline int _ue(Writer* w, uint64_t value) except -1:
    cdef uint64_t v = value + 1
    cdef int n = 0
    cdef uint64_t t = v
    while t:
        n += 1
        t >>= 1
    if n > 1:
        _put(w, 0, n - 1)
    _put(w, v, n)
    return 0


cdef inline int _se(Writer* w, int64_t value) except -1:
    if value > 0:
        return _ue(w, <uint64_t> (2 * value - 1))
    return _ue(w, <uint64_t> (-2 * value))


def encode_blocks(blocks):
    cdef int64_t[:, ::1] b = np.ascontiguousarray(blocks, dtype=np.int64)
    cdef Py_ssize_t n = b.shape[0]
    cdef Py_ssize_t i, j, prev
    cdef int nnz
    cdef Writer w
    w.cap = 64 + n * 16
    w.buf = <uint8_t*> malloc(w.cap)
    if w.buf == NULL:
        raise MemoryError()
    w.size = 0
    w.acc = 0
    w.nbits = 0
    try:
        for i in range(n):
            _se(&w, b[i, 0])
            nnz = 0
            for j in range(1, 64):
                if b[i, j] != 0:
                    nnz += 1
            _ue(&w, nnz)
            prev = 0
            for j in range(1, 64):
                if b[i, j] != 0:
                    _ue(&w, j - prev - 1)
                    _se(&w, b[i, j])
                    prev = j
        if w.nbits:
            _put(&w, 0, 8 - w.nbits)
        return (<char*> w.buf)[:w.size]
    finally:
        free(w.buf)


cdef struct Reader:
    const uint8_t* data
    Py_ssize_t pos
    Py_ssize_t end
    int err


cdef inline int _bit(Reader* r) nogil:
    cdef Py_ssize_t p = r.pos
    if p >= r.end:
        r.err = 1
        return 0
    r.pos = p + 1
    return (r.data[p >> 3] >> (7 - (p & 7))) & 1


cdef inline int64_t _rue(Reader* r) nogil:
    cdef int zeros = 0
    cdef int k
    cdef uint64_t v = 1
    while True:
        k = _bit(r)
        if r.err:
            return 0
        if k:
            break
        zeros += 1
        if zeros > MAX_PREFIX:
            r.err = 2
            return 0
    for k in range(zeros):
        v = (v << 1) | <uint64_t> _bit(r)
        if r.err:
            return 0
    return <int64_t> (v - 1)


cdef inline int64_t _rse(Reader* r) nogil:
    cdef int64_t k = _rue(r)
    if k & 1:
        return (k + 1) >> 1
    return -(k >> 1)


_MESSAGES = {
    1: "malformed bitstream: unexpected end of data",
    2: "malformed bitstream: exp-Golomb prefix too long",
    3: "malformed bitstream: too many coefficients in block",
    4: "malformed bitstream: run exceeds block",
    5: "malformed bitstream: zero level in run",
}


def decode_blocks(data, Py_ssize_t n_blocks, Py_ssize_t base_offset=0):
    cdef bytes raw = bytes(data)
    cdef const uint8_t[::1] view = raw
    out = np.zeros((n_blocks, 64), dtype=np.int32)
    cdef int32_t[:, ::1] o = out
    cdef Reader r
    cdef Py_ssize_t b, pos
    cdef int64_t nnz, t, level
    cdef Py_ssize_t tail
    r.data = &view[0] if raw else NULL
    r.pos = 0
    r.end = 8 * len(raw)
    r.err = 0
    with nogil:
        for b in range(n_blocks):
            o[b, 0] = <int32_t> _rse(&r)
            if r.err:
                break
            nnz = _rue(&r)
            if r.err:
                break
            if nnz > 63:
                r.err = 3
                break
            pos = 0
            for t in range(nnz):
                pos += _rue(&r) + 1
                if r.err:
                    break
                if pos > 63:
                    r.err = 4
                    break
                level = _rse(&r)
                if r.err:
                    break
                if level == 0:
                    r.err = 5
                    break
                o[b, pos] = <int32_t> level
            if r.err:
                break
    if r.err:
        raise MalformedBitstreamError(_MESSAGES[r.err], base_offset + r.pos // 8)
    tail = r.end - r.pos
    if tail >= 8:
        raise MalformedBitstreamError("malformed bitstream: trailing data", base_offset + (r.pos + 7) // 8)
    if tail and view[len(raw) - 1] & ((1 << tail) - 1):
        raise MalformedBitstreamError("malformed bitstream: nonzero padding", base_offset + len(raw) - 1)
    return out
