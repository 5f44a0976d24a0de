"""Communication plans computed identically by every endpoint.

A plan is a deterministic list of pieces. Senders walk it to decide what to
push, receivers walk it to know what to expect from each source; because links
are FIFO per source, the k-th message from a source matches the k-th planned
piece from that source.
"""

from __future__ import annotations

import bisect
import functools
import threading
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

from .core import Layout, MatrixDescriptor, TileExtent
from .ops import DATA_HEAD

Rect = tuple[int, int, int, int]  # r0, r1, c0, c1 (half-open)


def rect_shape(rect: Rect) -> tuple[int, int]:
    return rect[1] - rect[0], rect[3] - rect[2]


def merge_intervals(intervals: Iterable[tuple[int, int]]) -> list[tuple[int, int]]:
    out: list[list[int]] = []
    for a, b in sorted(intervals):
        if out and a <= out[-1][1]:
            out[-1][1] = max(out[-1][1], b)
        else:
            out.append([a, b])
    return [(a, b) for a, b in out]


@dataclass(frozen=True)
class Piece:
    src: int
    dst: int
    tile: int       # index of the source tile in the source layout
    rect: Rect      # in source-matrix coordinates
    need: int       # index into the consumer's need list
    label: int = 0  # free-form grouping (k-panel for gemm)


_PLAN_LOCK = threading.RLock()


def shared_memo(fn):
    """lru_cache that computes each key once even when many workers ask at the same time."""
    cached = functools.lru_cache(maxsize=512)(fn)

    @functools.wraps(fn)
    def wrapper(*args):
        with _PLAN_LOCK:
            return cached(*args)

    wrapper.cache_clear = cached.cache_clear
    return wrapper


class IndexedPlan(list):
    """A plan (list of pieces) with per-endpoint views built on first use."""

    _by_src: Optional[dict] = None
    _by_dst: Optional[dict] = None

    def _index(self):
        with _PLAN_LOCK:
            if self._by_src is None:
                self._build()

    def _build(self):
        by_src: dict[int, list] = {}
        by_dst: dict[int, list] = {}
        for idx, p in enumerate(self):
            if p.src != p.dst:
                by_src.setdefault(p.src, []).append((idx, p))
            by_dst.setdefault(p.dst, []).append((idx, p))
        self._by_dst = by_dst
        self._by_src = by_src

    def outgoing(self, me: int) -> list[tuple[int, Piece]]:
        """(index, piece) pairs ``me`` must send to other endpoints."""
        if self._by_src is None:
            self._index()
        return self._by_src.get(me, [])

    def incoming(self, me: int) -> list[tuple[int, Piece]]:
        """(index, piece) pairs delivered to ``me``, local ones included."""
        if self._by_src is None:
            self._index()
        return self._by_dst.get(me, [])


def exchange_plan(src_layout: Layout, needs: dict[int, Sequence[Rect]],
                  labels: Optional[dict[int, Sequence[int]]] = None) -> IndexedPlan:
    pieces = IndexedPlan()
    for dst in sorted(needs):
        for n, rect in enumerate(needs[dst]):
            label = labels[dst][n] if labels else 0
            for t, (extent, owner) in enumerate(src_layout):
                inter = extent.intersect(rect)
                if inter is not None:
                    pieces.append(Piece(owner, dst, t, inter, n, label))
    return pieces


def message_rows(rect: Rect, itemsize: int, limit: int) -> list[tuple[int, int]]:
    """Split a piece into row groups whose body fits within ``limit`` bytes."""
    rows, cols = rect_shape(rect)
    per = max(1, (limit - DATA_HEAD.size) // max(1, cols * itemsize))
    return [(a, min(rows, a + per)) for a in range(0, rows, per)]


def tile_needs(layout: Layout) -> dict[int, list[Rect]]:
    needs: dict[int, list[Rect]] = {}
    for extent, w in layout:
        needs.setdefault(w, []).append(extent.rect())
    return needs


@shared_memo
def remap_plan(src_layout: Layout, target: Layout) -> IndexedPlan:
    """Pieces that move data laid out as ``src_layout`` onto the tiles of ``target``.

    Plans are pure functions of the layouts, so one copy is shared by every
    endpoint in the process.
    """
    return exchange_plan(src_layout, tile_needs(target))


# -- gemm --------------------------------------------------------------------

@dataclass
class ConsumerPlan:
    rank: int
    c_tiles: list[tuple[int, TileExtent]]
    rows: list[tuple[int, int]]   # merged op(A) row intervals
    cols: list[tuple[int, int]]   # merged op(B) column intervals

    def row_offsets(self) -> list[int]:
        out, acc = [], 0
        for a, b in self.rows:
            out.append(acc)
            acc += b - a
        return out

    def col_offsets(self) -> list[int]:
        out, acc = [], 0
        for a, b in self.cols:
            out.append(acc)
            acc += b - a
        return out


@dataclass
class GemmPlan:
    m: int
    n: int
    k: int
    panel: int
    trans_a: bool
    trans_b: bool
    consumers: dict[int, ConsumerPlan]
    a_pieces: list[Piece] = field(default_factory=list)
    b_pieces: list[Piece] = field(default_factory=list)
    pieces: IndexedPlan = field(default_factory=IndexedPlan)  # A pieces then B pieces

    @property
    def panels(self) -> list[tuple[int, int]]:
        return [(k0, min(self.k, k0 + self.panel)) for k0 in range(0, self.k, self.panel)]

    def remote(self) -> list[Piece]:
        return [p for p in self.a_pieces + self.b_pieces if p.src != p.dst]


def gemm_plan(a: MatrixDescriptor, b: MatrixDescriptor, c: MatrixDescriptor,
              trans_a: bool, trans_b: bool, panel: int = 256,
              replica_a: bool = False, replica_b: bool = False) -> GemmPlan:
    """Owner-computes plan: each C-tile owner fetches op(A) rows and op(B) columns
    per k-panel. Only shapes and layouts matter, so plans are memoized."""
    return _gemm_plan(a.rows, a.cols, a.layout, b.rows, b.cols, b.layout, c.layout,
                      bool(trans_a), bool(trans_b), max(1, panel), bool(replica_a), bool(replica_b))


@shared_memo
def _gemm_plan(a_rows, a_cols, a_layout, b_rows, b_cols, b_layout, c_layout,
               trans_a, trans_b, panel, replica_a, replica_b) -> GemmPlan:
    m = a_cols if trans_a else a_rows
    k = a_rows if trans_a else a_cols
    n = b_rows if trans_b else b_cols
    consumers: dict[int, ConsumerPlan] = {}
    for t, (extent, w) in enumerate(c_layout):
        cp = consumers.setdefault(w, ConsumerPlan(w, [], [], []))
        cp.c_tiles.append((t, extent))
    for cp in consumers.values():
        cp.rows = merge_intervals((e.row_start, e.row_end) for _, e in cp.c_tiles)
        cp.cols = merge_intervals((e.col_start, e.col_end) for _, e in cp.c_tiles)
    plan = GemmPlan(m, n, k, max(1, panel), trans_a, trans_b, consumers)
    panels = plan.panels
    if not replica_a:
        needs, labels = {}, {}
        for w, cp in consumers.items():
            rects, labs = [], []
            for r0, r1 in cp.rows:
                for p, (k0, k1) in enumerate(panels):
                    rects.append((k0, k1, r0, r1) if trans_a else (r0, r1, k0, k1))
                    labs.append(p)
            needs[w], labels[w] = rects, labs
        plan.a_pieces = exchange_plan(a_layout, needs, labels)
    if not replica_b:
        needs, labels = {}, {}
        for w, cp in consumers.items():
            rects, labs = [], []
            for c0, c1 in cp.cols:
                for p, (k0, k1) in enumerate(panels):
                    rects.append((c0, c1, k0, k1) if trans_b else (k0, k1, c0, c1))
                    labs.append(p)
            needs[w], labels[w] = rects, labs
        plan.b_pieces = exchange_plan(b_layout, needs, labels)
    plan.pieces = IndexedPlan(plan.a_pieces + plan.b_pieces)
    return plan


# -- replication ---------------------------------------------------------------

def tile_bases(desc: MatrixDescriptor) -> list[int]:
    """Byte offset of each tile in the tile-major serialization of a matrix."""
    return _tile_bases(desc.layout, desc.precision.nbytes)


@shared_memo
def _tile_bases(layout: Layout, esize: int) -> list[int]:
    out, acc = [], 0
    for extent, _ in layout:
        out.append(acc)
        acc += extent.size * esize
    return out


@dataclass(frozen=True)
class Chunk:
    peer: int
    tile: int
    row_a: int   # rows within the tile, half-open
    row_b: int
    offset: int  # tile-major byte offset of the chunk


def replication_chunks(desc: MatrixDescriptor, owner: int, peers: Sequence[int],
                       chunk_bytes: int) -> list[Chunk]:
    """Chunks ``owner`` pushes, interleaved round-robin across peers.

    Chunks hold whole tile rows: at least one row, at most ``chunk_bytes``
    where a row fits.
    """
    esize = desc.precision.nbytes
    bases = tile_bases(desc)
    own: list[tuple[int, int, int]] = []
    for t, (extent, w) in enumerate(desc.layout):
        if w != owner:
            continue
        row_bytes = extent.col_count * esize
        per = max(1, chunk_bytes // row_bytes)
        for a in range(0, extent.row_count, per):
            own.append((t, a, min(extent.row_count, a + per)))
    targets = [p for p in peers if p != owner]
    out = []
    for t, a, b in own:
        row_bytes = desc.layout.tiles[t][0].col_count * esize
        for p in targets:
            out.append(Chunk(p, t, a, b, bases[t] + a * row_bytes))
    return out


def locate_chunk(desc: MatrixDescriptor, offset: int, length: int) -> tuple[int, int, int]:
    """Inverse of the chunk offset: (tile index, first row, end row)."""
    bases = tile_bases(desc)
    t = bisect.bisect_right(bases, offset) - 1
    extent = desc.layout.tiles[t][0]
    row_bytes = extent.col_count * desc.precision.nbytes
    rel = offset - bases[t]
    if rel % row_bytes or length % row_bytes:
        raise ValueError("replication chunk not aligned to tile rows")
    a = rel // row_bytes
    return t, a, a + length // row_bytes


# -- plan-derived traces (for the simulated backend) -----------------------------

def gemm_trace_events(plan: GemmPlan, a_itemsize: int, b_itemsize: int,
                      limit: int) -> list[tuple]:
    """(what, endpoint, info) tuples for the data movement and compute of a gemm.

    Matches what worker execution logs for the same plan, minus control and
    completion traffic.
    """
    events = []
    for pieces, itemsize in ((plan.a_pieces, a_itemsize), (plan.b_pieces, b_itemsize)):
        for p in pieces:
            if p.src == p.dst:
                continue
            cols = p.rect[3] - p.rect[2]
            for a, b in message_rows(p.rect, itemsize, limit):
                nbytes = DATA_HEAD.size + (b - a) * cols * itemsize
                events.append(("send", p.src, (p.dst, 1, nbytes)))
    for w, cp in sorted(plan.consumers.items()):
        for _, e in cp.c_tiles:
            events.append(("compute", w, (e.row_count * e.col_count * plan.k,)))
    return events
