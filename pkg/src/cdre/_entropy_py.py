"""Pure-Python run-length / exp-Golomb coder for zig-zagged 8x8 blocks.

Block layout: ``blocks[i, 0]`` is the (already predicted) DC value and
``blocks[i, 1:]`` are the 63 AC levels in zig-zag order.

Per block the bit syntax is::

    se(dc)  ue(nnz)  { ue(run) se(level) } * nnz

where ``nnz`` is the count of nonzero AC levels and ``run`` the number of
zeros preceding each one. The stream is MSB-first and zero-padded to a byte.
"""

import numpy as np

from .errors import MalformedBitstreamError

MAX_PREFIX = 32


class _Writer:
    __slots__ = ("out", "acc", "nbits")

    def __init__(self):
        self.out = bytearray()
        self.acc = 0
        self.nbits = 0

    def ue(self, value):
        v = value + 1
        n = v.bit_length()
        # n-1 leading zeros followed by the n-bit value
        self.acc = (self.acc << (2 * n - 1)) | v
        self.nbits += 2 * n - 1
        while self.nbits >= 8:
            self.nbits -= 8
            self.out.append((self.acc >> self.nbits) & 0xFF)
        self.acc &= (1 << self.nbits) - 1

    def se(self, value):
        self.ue(2 * value - 1 if value > 0 else -2 * value)

    def finish(self):
        if self.nbits:
            self.out.append((self.acc << (8 - self.nbits)) & 0xFF)
            self.acc = 0
            self.nbits = 0
        return bytes(self.out)


class _Reader:
    __slots__ = ("data", "pos", "end", "base")

    def __init__(self, data, base):
        self.data = data
        self.pos = 0
        self.end = 8 * len(data)
        self.base = base

    def _fail(self, what):
        raise MalformedBitstreamError(what, self.base + self.pos // 8)

    def bit(self):
        if self.pos >= self.end:
            self._fail("malformed bitstream: unexpected end of data")
        p = self.pos
        self.pos = p + 1
        return (self.data[p >> 3] >> (7 - (p & 7))) & 1

    def ue(self):
        zeros = 0
        while self.bit() == 0:
            zeros += 1
            if zeros > MAX_PREFIX:
                self._fail("malformed bitstream: exp-Golomb prefix too long")
        v = 1
        for _ in range(zeros):
            v = (v << 1) | self.bit()
        return v - 1

    def se(self):
        k = self.ue()
        return (k + 1) >> 1 if k & 1 else -(k >> 1)


def encode_blocks(blocks):
    """Entropy-code an ``[n, 64]`` integer array into bytes."""
    blocks = np.ascontiguousarray(blocks, dtype=np.int64)
    w = _Writer()
    for row in blocks.tolist():
        w.se(row[0])
        nz = [i for i in range(1, 64) if row[i]]
        w.ue(len(nz))
        prev = 0
        for i in nz:
            w.ue(i - prev - 1)
            w.se(row[i])
            prev = i
    return w.finish()


def decode_blocks(data, n_blocks, base_offset=0):
    """Inverse of :func:`encode_blocks`.

    Raises :class:`MalformedBitstreamError` on truncation, impossible run
    lengths, or trailing garbage. ``base_offset`` is added to reported byte
    offsets so callers can point into the enclosing container.
    """
    r = _Reader(bytes(data), base_offset)
    out = np.zeros((n_blocks, 64), dtype=np.int32)
    for b in range(n_blocks):
        out[b, 0] = r.se()
        nnz = r.ue()
        if nnz > 63:
            r._fail("malformed bitstream: too many coefficients in block")
        pos = 0
        for _ in range(nnz):
            pos += r.ue() + 1
            if pos > 63:
                r._fail("malformed bitstream: run exceeds block")
            level = r.se()
            if level == 0:
                r._fail("malformed bitstream: zero level in run")
            out[b, pos] = level
    tail = r.end - r.pos
    if tail >= 8:
        raise MalformedBitstreamError("malformed bitstream: trailing data", base_offset + (r.pos + 7) // 8)
    if tail and r.data[-1] & ((1 << tail) - 1):
        raise MalformedBitstreamError("malformed bitstream: nonzero padding", base_offset + len(r.data) - 1)
    return out
