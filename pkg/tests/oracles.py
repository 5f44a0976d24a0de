"""Reference implementations used by the tests.

Everything here is written from first principles (pure Python loops, exact
rationals, math.fsum) and shares no code with the package.
"""

from __future__ import annotations

import itertools
import math
import struct
from fractions import Fraction


# -- binary16 -------------------------------------------------------------------

def f32_bits(x: float) -> int:
    return struct.unpack("<I", struct.pack("<f", x))[0]


def f32_value(bits: int) -> Fraction:
    """Exact value of a finite float32 bit pattern."""
    sign = -1 if bits >> 31 else 1
    exp = (bits >> 23) & 0xFF
    mant = bits & 0x7FFFFF
    if exp == 0:
        return sign * Fraction(mant, 1 << 149)
    return sign * Fraction(mant | 0x800000, 1) * Fraction(2) ** (exp - 150)


def half_bits(x: float) -> int:
    """binary16 encoding of float32 ``x`` with round-to-nearest-even."""
    bits = f32_bits(x)
    sign = 0x8000 if bits >> 31 else 0
    exp = (bits >> 23) & 0xFF
    if exp == 0xFF:
        return sign | (0x7E00 if bits & 0x7FFFFF else 0x7C00)
    v = abs(f32_value(bits))
    if v == 0:
        return sign
    # exponent E with 2**E <= v < 2**(E+1), clamped to the subnormal range
    e = v.numerator.bit_length() - v.denominator.bit_length()
    if Fraction(2) ** e > v:
        e -= 1
    e = max(e, -14)
    quantum = Fraction(2) ** (e - 10)
    q, rem = divmod(v, quantum)
    q = int(q)
    half = quantum / 2
    if rem > half or (rem == half and q % 2 == 1):
        q += 1
    if q >= 2048:          # carried into the next binade
        q //= 2
        e += 1
    if q < 1024:           # subnormal (only when e == -14)
        return sign | q
    if e + 15 >= 31:
        return sign | 0x7C00
    return sign | ((e + 15) << 10) | (q - 1024)


def half_value(h: int) -> float:
    sign = -1.0 if h & 0x8000 else 1.0
    exp = (h >> 10) & 0x1F
    mant = h & 0x3FF
    if exp == 0x1F:
        return sign * math.inf if mant == 0 else math.nan
    if exp == 0:
        return sign * mant * 2.0 ** -24
    return sign * (1024 + mant) * 2.0 ** (exp - 25)


# -- dense math -------------------------------------------------------------------

def gemm(a, b):
    """Triple loop with an exactly rounded inner sum."""
    m, k, n = len(a), len(b), len(b[0])
    return [[math.fsum(a[i][p] * b[p][j] for p in range(k)) for j in range(n)]
            for i in range(m)]


def row_sums(x):
    return [math.fsum(r) for r in x]


def col_sums(x):
    return [math.fsum(r[j] for r in x) for j in range(len(x[0]))]


def softmax_rows(x):
    out = []
    for r in x:
        m = max(r)
        e = [math.exp(v - m) for v in r]
        s = math.fsum(e)
        out.append([v / s for v in e])
    return out


def conv2d(x, f, c, h, w, r, s, stride, pad):
    """x: N rows of C*H*W (CHW order); f: K rows of C*R*S -> N rows of K*H'*W'."""
    ho = (h + 2 * pad - r) // stride + 1
    wo = (w + 2 * pad - s) // stride + 1
    out = []
    for sample in x:
        row = []
        for k, filt in enumerate(f):
            for oy in range(ho):
                for ox in range(wo):
                    terms = []
                    for ch in range(c):
                        for dy in range(r):
                            for dx in range(s):
                                iy = oy * stride + dy - pad
                                ix = ox * stride + dx - pad
                                if 0 <= iy < h and 0 <= ix < w:
                                    terms.append(sample[(ch * h + iy) * w + ix]
                                                 * filt[(ch * r + dy) * s + dx])
                    row.append(math.fsum(terms))
        out.append(row)
    return out


# -- layouts ------------------------------------------------------------------------

def coverage(rows, cols, tiles):
    """Per-element cover counts for a list of (r0, nr, c0, nc) tiles."""
    grid = [[0] * cols for _ in range(rows)]
    for r0, nr, c0, nc in tiles:
        for i in range(r0, r0 + nr):
            for j in range(c0, c0 + nc):
                if i < rows and j < cols:
                    grid[i][j] += 1
    return grid


def owner_scan(tiles_with_owner, i, j):
    for (r0, nr, c0, nc), w in tiles_with_owner:
        if r0 <= i < r0 + nr and c0 <= j < c0 + nc:
            return w
    raise KeyError((i, j))


# -- pipeline cost model ---------------------------------------------------------

def pipeline_latency(host, device, transfer, overhead, on_device, threads):
    """Host work spread over threads, device work serial, one transfer per side change.

    The batch starts on the host.
    """
    total_host = math.fsum(h for h, d in zip(host, on_device) if not d)
    total_dev = math.fsum(c for c, d in zip(device, on_device) if d)
    changes, side = 0, False
    for d in on_device:
        if d != side:
            changes += 1
            side = d
    return total_host / threads + overhead * (threads - 1) + total_dev + changes * transfer


def pipeline_optimum(host, device, transfer, overhead, max_threads):
    best = math.inf
    for on_device in itertools.product((False, True), repeat=len(host)):
        for t in range(1, max_threads + 1):
            best = min(best, pipeline_latency(host, device, transfer, overhead, on_device, t))
    return best


# -- MLP ----------------------------------------------------------------------------

def mlp_loss(weights, biases, x, labels):
    """Mean softmax cross-entropy of a ReLU MLP, row by row in pure Python."""
    total = []
    for row, y in zip(x, labels):
        h = list(row)
        for l, (w, b) in enumerate(zip(weights, biases)):
            z = [math.fsum([h[i] * w[i][j] for i in range(len(h))] + [b[j]])
                 for j in range(len(b))]
            h = [max(v, 0.0) for v in z] if l < len(weights) - 1 else z
        m = max(h)
        lse = m + math.log(math.fsum(math.exp(v - m) for v in h))
        total.append(lse - h[y])
    return math.fsum(total) / len(total)
