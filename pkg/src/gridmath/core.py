"""Matrix identity, precision, tile extents and layouts.

Everything here is an immutable value shared by the master and every worker.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field, replace
from typing import Iterable, Iterator, Optional, Sequence

import numpy as np


class GridMathError(Exception):
    """Base class for library errors."""


class LayoutError(GridMathError):
    pass


class Precision(enum.IntEnum):
    HALF = 0
    SINGLE = 1
    DOUBLE = 2

    @property
    def nbytes(self) -> int:
        return _WIDTH[self]

    @property
    def dtype(self) -> np.dtype:
        return _DTYPE[self]

    @classmethod
    def parse(cls, name: "str | Precision") -> "Precision":
        if isinstance(name, Precision):
            return name
        return cls[name.upper()]


_WIDTH = {Precision.HALF: 2, Precision.SINGLE: 4, Precision.DOUBLE: 8}
_DTYPE = {
    Precision.HALF: np.dtype("<f2"),
    Precision.SINGLE: np.dtype("<f4"),
    Precision.DOUBLE: np.dtype("<f8"),
}


def compute_dtype(*precisions: Precision) -> np.dtype:
    """Arithmetic type for a set of operands: never below Single."""
    if any(p == Precision.DOUBLE for p in precisions):
        return np.dtype("<f8")
    return np.dtype("<f4")


def to_precision(values: np.ndarray, precision: Precision) -> np.ndarray:
    # numpy's float16 cast rounds to nearest even and overflows to +/-inf
    with np.errstate(over="ignore"):
        return np.asarray(values).astype(precision.dtype)


@dataclass(frozen=True, order=True)
class TileExtent:
    row_start: int
    row_count: int
    col_start: int
    col_count: int

    def __post_init__(self):
        if self.row_count <= 0 or self.col_count <= 0:
            raise LayoutError(f"empty tile extent {self}")
        if self.row_start < 0 or self.col_start < 0:
            raise LayoutError(f"negative tile origin {self}")

    @property
    def row_end(self) -> int:
        return self.row_start + self.row_count

    @property
    def col_end(self) -> int:
        return self.col_start + self.col_count

    @property
    def size(self) -> int:
        return self.row_count * self.col_count

    def contains(self, i: int, j: int) -> bool:
        return self.row_start <= i < self.row_end and self.col_start <= j < self.col_end

    def rect(self) -> tuple[int, int, int, int]:
        return (self.row_start, self.row_end, self.col_start, self.col_end)

    def intersect(self, rect: tuple[int, int, int, int]) -> Optional[tuple[int, int, int, int]]:
        r0 = max(self.row_start, rect[0])
        r1 = min(self.row_end, rect[1])
        c0 = max(self.col_start, rect[2])
        c1 = min(self.col_end, rect[3])
        if r0 >= r1 or c0 >= c1:
            return None
        return (r0, r1, c0, c1)


@dataclass(frozen=True)
class Layout:
    """Ordered list of ``(extent, worker rank)`` pairs."""

    tiles: tuple[tuple[TileExtent, int], ...]

    def __init__(self, tiles: Iterable[tuple[TileExtent, int]]):
        object.__setattr__(self, "tiles", tuple((t, int(w)) for t, w in tiles))

    def __iter__(self) -> Iterator[tuple[TileExtent, int]]:
        return iter(self.tiles)

    def __len__(self) -> int:
        return len(self.tiles)

    @property
    def workers(self) -> list[int]:
        return sorted({w for _, w in self.tiles})

    def owned_by(self, rank: int) -> list[tuple[int, TileExtent]]:
        return [(k, t) for k, (t, w) in enumerate(self.tiles) if w == rank]

    def same_blocks(self, other: "Layout") -> bool:
        return self.tiles == other.tiles


@dataclass(frozen=True)
class Violation:
    kind: str  # "overlap" | "gap" | "out-of-range" | "unknown-worker"
    detail: str


def validate_layout(rows: int, cols: int, layout: Layout,
                    workers: Optional[Sequence[int]] = None) -> "Violation | None":
    """Return the first violated layout invariant, or None when the layout is sound."""
    group = None if workers is None else set(workers)
    for extent, w in layout:
        if extent.row_end > rows or extent.col_end > cols:
            return Violation("out-of-range", f"{extent} exceeds {rows}x{cols}")
        if group is not None and w not in group:
            return Violation("unknown-worker", f"worker {w} not in group {sorted(group)}")
    covered = np.zeros((rows, cols), dtype=np.int32)
    for extent, _ in layout:
        r0, r1, c0, c1 = extent.rect()
        covered[r0:r1, c0:c1] += 1
    over = np.argwhere(covered > 1)
    if len(over):
        i, j = over[0]
        return Violation("overlap", f"element ({i},{j}) covered {covered[i, j]} times")
    gap = np.argwhere(covered == 0)
    if len(gap):
        i, j = gap[0]
        return Violation("gap", f"element ({i},{j}) not covered")
    return None


def _split(n: int, parts: int) -> list[tuple[int, int]]:
    """Near-equal contiguous panels; earlier panels take the remainder. Empty panels dropped."""
    base, extra = divmod(n, parts)
    out, start = [], 0
    for k in range(parts):
        size = base + (1 if k < extra else 0)
        if size:
            out.append((start, size))
        start += size
    return out


def make_row_block_layout(rows: int, cols: int, workers: Sequence[int]) -> Layout:
    if not workers:
        raise LayoutError("empty worker list")
    if rows < 1 or cols < 1:
        raise LayoutError(f"bad shape {rows}x{cols}")
    panels = _split(rows, len(workers))
    return Layout((TileExtent(r0, n, 0, cols), workers[k % len(workers)])
                  for k, (r0, n) in enumerate(panels))


def make_col_block_layout(rows: int, cols: int, workers: Sequence[int]) -> Layout:
    if not workers:
        raise LayoutError("empty worker list")
    if rows < 1 or cols < 1:
        raise LayoutError(f"bad shape {rows}x{cols}")
    panels = _split(cols, len(workers))
    return Layout((TileExtent(0, rows, c0, n), workers[k % len(workers)])
                  for k, (c0, n) in enumerate(panels))


def make_grid_layout(rows: int, cols: int, pr: int, pc: int, workers: Sequence[int]) -> Layout:
    if pr * pc != len(workers):
        raise LayoutError(f"grid {pr}x{pc} needs {pr * pc} workers, got {len(workers)}")
    rpanels = _split(rows, pr)
    cpanels = _split(cols, pc)
    tiles = []
    for a, (r0, rn) in enumerate(rpanels):
        for b, (c0, cn) in enumerate(cpanels):
            tiles.append((TileExtent(r0, rn, c0, cn), workers[a * pc + b]))
    return Layout(tiles)


def make_single_tile_layout(rows: int, cols: int, worker: int = 0) -> Layout:
    return Layout([(TileExtent(0, rows, 0, cols), worker)])


def tile_owner(layout: Layout, i: int, j: int) -> int:
    for extent, w in layout:
        if extent.contains(i, j):
            return w
    raise IndexError(f"index ({i},{j}) not covered by layout")


# -- descriptors -------------------------------------------------------------

_DESC_HEAD = struct.Struct("<QQQBQI")
_DESC_TILE = struct.Struct("<QQQQI")


@dataclass(frozen=True)
class MatrixDescriptor:
    matrix_id: int
    rows: int
    cols: int
    precision: Precision
    layout: Layout = field(compare=True)
    version: int = 0

    @property
    def nbytes(self) -> int:
        return self.rows * self.cols * self.precision.nbytes

    def bumped(self) -> "MatrixDescriptor":
        return replace(self, version=self.version + 1)

    def encode(self) -> bytes:
        parts = [_DESC_HEAD.pack(self.matrix_id, self.rows, self.cols, int(self.precision),
                                 self.version, len(self.layout))]
        for extent, w in self.layout:
            parts.append(_DESC_TILE.pack(extent.row_start, extent.row_count,
                                         extent.col_start, extent.col_count, w))
        return b"".join(parts)

    @classmethod
    def decode(cls, buf: bytes, offset: int = 0) -> tuple["MatrixDescriptor", int]:
        """Decode one descriptor starting at ``offset``; returns it and the end offset."""
        try:
            mid, rows, cols, prec, version, n = _DESC_HEAD.unpack_from(buf, offset)
            offset += _DESC_HEAD.size
            tiles = []
            for _ in range(n):
                r0, rn, c0, cn, w = _DESC_TILE.unpack_from(buf, offset)
                offset += _DESC_TILE.size
                tiles.append((TileExtent(r0, rn, c0, cn), w))
            return cls(mid, rows, cols, Precision(prec), Layout(tiles), version), offset
        except (struct.error, ValueError) as exc:
            raise GridMathError(f"malformed descriptor: {exc}") from exc
