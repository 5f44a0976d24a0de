"""Worker-local numeric kernels.

The ``*_ascending`` variants fix the per-element summation order (ascending
index, one rounding per add), so their results do not depend on how a matrix
is cut into tiles. The fast variants use BLAS / pairwise summation.
"""

from __future__ import annotations

import numpy as np

MASK64 = 0xFFFFFFFFFFFFFFFF
GOLDEN = 0x9E3779B97F4A7C15


def splitmix64(x: int) -> int:
    x = (x + GOLDEN) & MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & MASK64
    return x ^ (x >> 31)


def derived_seed(root: int, worker: int) -> int:
    """Per-worker seed: splitmix64 avalanche of root XOR (worker+1)*GOLDEN."""
    return splitmix64((root ^ ((worker + 1) * GOLDEN)) & MASK64)


def _splitmix64_array(x: np.ndarray) -> np.ndarray:
    x = x + np.uint64(GOLDEN)
    x = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    x = (x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return x ^ (x >> np.uint64(31))


def counter_uniform(stream: int, rows: range, cols: range, ncols: int,
                    low: float, high: float) -> np.ndarray:
    """Uniform values keyed by (stream, global element index), in float64.

    Independent of tiling: element (i, j) always gets the same value.
    """
    i = np.arange(rows.start, rows.stop, dtype=np.uint64)[:, None]
    j = np.arange(cols.start, cols.stop, dtype=np.uint64)[None, :]
    with np.errstate(over="ignore"):
        idx = i * np.uint64(ncols) + j
        bits = _splitmix64_array(idx ^ np.uint64(stream & MASK64))
    u = (bits >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))
    return low + (high - low) * u


def matmul_ascending(a: np.ndarray, b: np.ndarray, dtype) -> np.ndarray:
    """a @ b with every element summed in ascending k order, rounding after each add."""
    acc = np.zeros((a.shape[0], b.shape[1]), dtype=dtype)
    tmp = np.empty_like(acc)
    for k in range(a.shape[1]):
        np.multiply.outer(a[:, k], b[k, :], out=tmp)
        acc += tmp
    return acc


def matmul_fast(a: np.ndarray, b: np.ndarray, dtype) -> np.ndarray:
    return np.matmul(a, b, dtype=dtype)


def row_sums_ascending(x: np.ndarray, dtype) -> np.ndarray:
    acc = np.zeros(x.shape[0], dtype=dtype)
    for j in range(x.shape[1]):
        acc += x[:, j]
    return acc


def col_sums_ascending(x: np.ndarray, dtype) -> np.ndarray:
    acc = np.zeros(x.shape[1], dtype=dtype)
    for i in range(x.shape[0]):
        acc += x[i, :]
    return acc


def softmax_rows(x: np.ndarray, deterministic: bool = True) -> np.ndarray:
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    s = row_sums_ascending(e, e.dtype) if deterministic else e.sum(axis=1, dtype=e.dtype)
    return e / s[:, None]


def conv_out_size(size: int, kernel: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - kernel) // stride + 1


def im2col(sample: np.ndarray, c: int, h: int, w: int, r: int, s: int,
           stride: int, pad: int) -> np.ndarray:
    """Patch matrix of one C*H*W sample: (H'*W') rows x (C*R*S) columns."""
    img = sample.reshape(c, h, w)
    if pad:
        img = np.pad(img, ((0, 0), (pad, pad), (pad, pad)))
    ho = conv_out_size(h, r, stride, pad)
    wo = conv_out_size(w, s, stride, pad)
    cols = np.empty((c, r, s, ho, wo), dtype=sample.dtype)
    for dy in range(r):
        for dx in range(s):
            cols[:, dy, dx] = img[:, dy:dy + stride * ho:stride, dx:dx + stride * wo:stride]
    return cols.reshape(c * r * s, ho * wo).T
