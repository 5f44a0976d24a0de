"""Size-class pooled buffer allocator.

Buffers are never handed back to the OS during a session; freed buffers go to
the free list of their power-of-two size class and are reused first.
"""

from __future__ import annotations

import threading
from collections import defaultdict
from dataclasses import dataclass

import numpy as np

MIN_CLASS = 256


def size_class(nbytes: int) -> int:
    if nbytes <= MIN_CLASS:
        return MIN_CLASS
    return 1 << (nbytes - 1).bit_length()


class Buffer:
    __slots__ = ("raw", "size_class", "in_use")

    def __init__(self, cls_bytes: int):
        self.raw = np.empty(cls_bytes, dtype=np.uint8)
        self.size_class = cls_bytes
        self.in_use = False

    def view(self, dtype, shape) -> np.ndarray:
        dtype = np.dtype(dtype)
        n = int(np.prod(shape)) * dtype.itemsize
        return self.raw[:n].view(dtype).reshape(shape)


@dataclass
class PoolStats:
    allocations_from_os: int = 0
    reuses: int = 0
    frees: int = 0
    bytes_from_os: int = 0
    bytes_in_use: int = 0


class PoolAllocator:
    def __init__(self):
        self._free: dict[int, list[Buffer]] = defaultdict(list)
        self._lock = threading.Lock()
        self.stats = PoolStats()

    def alloc(self, nbytes: int) -> Buffer:
        if nbytes <= 0:
            raise ValueError("zero-byte allocation")
        cls_bytes = size_class(nbytes)
        with self._lock:
            free = self._free[cls_bytes]
            if free:
                buf = free.pop()
                self.stats.reuses += 1
            else:
                buf = Buffer(cls_bytes)
                self.stats.allocations_from_os += 1
                self.stats.bytes_from_os += cls_bytes
            buf.in_use = True
            self.stats.bytes_in_use += cls_bytes
        return buf

    def free(self, buf: Buffer):
        with self._lock:
            if not buf.in_use:
                raise ValueError("double free of pooled buffer")
            buf.in_use = False
            self._free[buf.size_class].append(buf)
            self.stats.frees += 1
            self.stats.bytes_in_use -= buf.size_class

    def array(self, shape, dtype, zero: bool = False) -> tuple[Buffer, np.ndarray]:
        """Allocate a buffer and return it with a typed view of ``shape``."""
        dtype = np.dtype(dtype)
        nbytes = max(1, int(np.prod(shape))) * dtype.itemsize
        buf = self.alloc(nbytes)
        arr = buf.view(dtype, shape)
        if zero:
            arr[...] = 0
        return buf, arr

    def free_list_sizes(self) -> dict[int, int]:
        with self._lock:
            return {k: len(v) for k, v in self._free.items() if v}
