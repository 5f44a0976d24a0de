"""Per-worker runtime: tile store, pooled buffers, replica and metadata caches.

A worker is one thread that owns all of its state. It executes op descriptors
received from the master, exchanges tile pieces with peers directly (every
worker knows every layout, so no master round trips are needed) and pushes
replication chunks between op executions.
"""

from __future__ import annotations

import bisect
import enum
import hashlib
import json
import logging
import struct
import threading
from collections import deque
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import kernels
from .core import (GridMathError, Layout, MatrixDescriptor, TileExtent,
                   compute_dtype, to_precision)
from .endpoint import DEFAULT_TIMEOUT, Endpoint
from .ops import (COMPUTE_OPS, Completion, Elementwise, Op, OpDescriptor, decode_data,
                  encode_data, mutated)
from .planning import (Piece, shared_memo, gemm_plan, locate_chunk, remap_plan,
                       replication_chunks)
from .pool import Buffer, PoolAllocator
from .transport import MASTER, Fabric, Kind, Message

log = logging.getLogger(__name__)

TAG_STRIDE = 4  # tags reserved per op; sub-exchanges use tag + i


class OpError(GridMathError):
    pass


class ReplicaState(enum.Enum):
    PENDING = "pending"
    VALID = "valid"
    STALE = "stale"


@dataclass
class TileSlot:
    extent: TileExtent
    buf: Buffer
    arr: np.ndarray


@dataclass
class ReplicaEntry:
    desc: MatrixDescriptor
    job_tag: int
    state: ReplicaState
    buf: Buffer
    arr: np.ndarray
    received: dict[int, int]        # tile index -> rows received
    remaining: int                  # bytes still expected

    @property
    def matrix_id(self) -> int:
        return self.desc.matrix_id

    @property
    def version(self) -> int:
        return self.desc.version

    def tile_complete(self, t: int) -> bool:
        return self.received.get(t, 0) == self.desc.layout.tiles[t][0].row_count


@dataclass
class OutJob:
    matrix_id: int
    version: int
    chunks: deque = field(default_factory=deque)


class Worker(Endpoint):
    def __init__(self, rank: int, fabric: Fabric, group: list[int],
                 timeout: float = DEFAULT_TIMEOUT):
        super().__init__(fabric, rank, timeout)
        self.rank = rank
        self.group = list(group)
        self.pool = PoolAllocator()
        self.descriptors: dict[int, MatrixDescriptor] = {}
        self.tiles: dict[int, dict[int, TileSlot]] = {}
        self.replicas: dict[int, ReplicaEntry] = {}
        self.out_jobs: dict[int, OutJob] = {}
        self.pipelines: dict[int, list[OpDescriptor]] = {}
        self.recording: Optional[tuple[int, list[OpDescriptor]]] = None
        self.root_seed = 0
        self.seed = kernels.derived_seed(0, rank)
        self._controls: deque[Message] = deque()
        self._scratch: list[Buffer] = []
        self.thread = threading.Thread(target=self.run, name=f"worker-{rank}", daemon=True)

    # -- message loop ------------------------------------------------------------

    def start(self):
        self.thread.start()

    def _stash_msg(self, msg: Message):
        if msg.kind == Kind.CONTROL:
            self._controls.append(msg)
        else:
            super()._stash_msg(msg)

    def _next_control(self) -> Message:
        if self._controls:
            return self._controls.popleft()
        while True:
            msg = self._pull(None)
            if msg.kind == Kind.CONTROL:
                return msg
            self._stash_msg(msg)

    def run(self):
        while True:
            msg = self._next_control()
            try:
                op = OpDescriptor.decode(msg.payload)
            except GridMathError as exc:
                self._complete(msg.tag, Completion(False, str(exc).encode()))
                continue
            if op.opcode == Op.SHUTDOWN:
                self._complete(msg.tag, Completion(True))
                return
            try:
                result = self._run_op(op, msg.tag)
                completion = Completion(True, result or b"")
            except Exception as exc:  # reported to the master; the worker stays up
                if not isinstance(exc, GridMathError):
                    log.exception("worker %d failed on %s", self.rank, op.opcode.name)
                completion = Completion(False, f"{type(exc).__name__}: {exc}".encode())
            finally:
                self._release_scratch()
            self._complete(msg.tag, completion)
            self.progress_job()

    def _complete(self, tag: int, completion: Completion):
        self.fabric.send(Message(Kind.COMPLETION, self.rank, MASTER, completion.encode(), tag))

    def _run_op(self, op: OpDescriptor, tag: int) -> Optional[bytes]:
        if op.opcode in COMPUTE_OPS and self.recording is not None:
            self.recording[1].append(op)
        handler = self._handlers[op.opcode]
        result = handler(self, op, tag)
        for mid in mutated(op):
            self._bump(mid)
        return result

    # -- buffers -----------------------------------------------------------------

    def _tmp(self, shape, dtype) -> np.ndarray:
        buf, arr = self.pool.array(shape, dtype)
        self._scratch.append(buf)
        return arr

    def _release_scratch(self):
        while self._scratch:
            self.pool.free(self._scratch.pop())

    def _desc(self, mid: int) -> MatrixDescriptor:
        try:
            return self.descriptors[mid]
        except KeyError:
            raise OpError(f"unknown matrix {mid}") from None

    def _bump(self, mid: int):
        self.descriptors[mid] = self.descriptors[mid].bumped()
        self._invalidate(mid)

    def _alloc_tiles(self, desc: MatrixDescriptor) -> dict[int, TileSlot]:
        slots = {}
        for t, extent in desc.layout.owned_by(self.rank):
            buf, arr = self.pool.array((extent.row_count, extent.col_count),
                                       desc.precision.dtype, zero=True)
            slots[t] = TileSlot(extent, buf, arr)
        return slots

    def _free_tiles(self, mid: int):
        for slot in self.tiles.pop(mid, {}).values():
            self.pool.free(slot.buf)

    def _region(self, mid: int, t: int, rect) -> np.ndarray:
        slot = self.tiles[mid][t]
        e = slot.extent
        return slot.arr[rect[0] - e.row_start:rect[1] - e.row_start,
                        rect[2] - e.col_start:rect[3] - e.col_start]

    def _reader(self, mid: int):
        return lambda p: self._region(mid, p.tile, p.rect)

    def resident(self) -> list[tuple[int, tuple[int, int, int, int]]]:
        return sorted((mid, (s.extent.row_start, s.extent.row_count,
                             s.extent.col_start, s.extent.col_count))
                      for mid, slots in self.tiles.items() for s in slots.values())

    # -- generic redistribution ------------------------------------------------------

    def _remap_into(self, tag: int, src: MatrixDescriptor, target: Layout,
                    dtype) -> dict[int, np.ndarray]:
        """Copy ``src`` into arrays shaped like this worker's tiles of ``target``.

        Returns {target tile index: array of ``dtype``}; values are converted on
        placement, so narrowing casts round to nearest even.
        """
        mine = target.owned_by(self.rank)
        out = {t: self._tmp((e.row_count, e.col_count), dtype) for t, e in mine}
        order = [t for t, _ in mine]
        plan = remap_plan(src.layout, target)
        self._send_pieces(tag, src.matrix_id, src.version, plan, self._reader(src.matrix_id),
                          src.precision.nbytes)

        def place(idx, p: Piece, a, b, data):
            t = order[p.need]
            e = target.tiles[t][0]
            dst = out[t][p.rect[0] - e.row_start + a:p.rect[0] - e.row_start + b,
                         p.rect[2] - e.col_start:p.rect[3] - e.col_start]
            with np.errstate(over="ignore"):
                dst[...] = data

        self._receive_pieces(tag, plan, self._reader(src.matrix_id), place, src.precision.dtype)
        return out

    def _operand_like(self, tag: int, src: MatrixDescriptor, target: MatrixDescriptor,
                      dtype) -> dict[int, np.ndarray]:
        """``src`` values on this worker's tiles of ``target`` (remapped if layouts differ)."""
        if src.layout.same_blocks(target.layout):
            return {t: self.tiles[src.matrix_id][t].arr.astype(dtype)
                    for t, _ in target.layout.owned_by(self.rank)}
        return self._remap_into(tag, src, target.layout, dtype)

    # -- lifecycle ops -----------------------------------------------------------

    def _op_define(self, op, tag):
        desc, _ = MatrixDescriptor.decode(op.blob)
        if desc.matrix_id in self.descriptors:
            raise OpError(f"matrix {desc.matrix_id} already defined")
        self.descriptors[desc.matrix_id] = desc
        self.tiles[desc.matrix_id] = self._alloc_tiles(desc)

    def _op_destroy(self, op, tag):
        mid = op.matrices[0]
        self._desc(mid)
        self._invalidate(mid)
        entry = self.replicas.pop(mid, None)
        if entry is not None:
            self.pool.free(entry.buf)
        self._free_tiles(mid)
        del self.descriptors[mid]

    def _op_scatter(self, op, tag):
        desc = self._desc(op.matrices[0])
        source = Layout([(TileExtent(0, desc.rows, 0, desc.cols), MASTER)])
        plan = remap_plan(source, desc.layout)
        mine = desc.layout.owned_by(self.rank)
        slots = self.tiles[desc.matrix_id]

        def place(idx, p, a, b, data):
            t = mine[p.need][0]
            e = slots[t].extent
            slots[t].arr[p.rect[0] - e.row_start + a:p.rect[0] - e.row_start + b,
                         p.rect[2] - e.col_start:p.rect[3] - e.col_start] = data

        self._receive_pieces(tag, plan, None, place, desc.precision.dtype)

    def _op_gather(self, op, tag):
        desc = self._desc(op.matrices[0])
        plan = remap_plan(desc.layout, Layout([(TileExtent(0, desc.rows, 0, desc.cols), MASTER)]))
        self._send_pieces(tag, desc.matrix_id, desc.version, plan,
                          self._reader(desc.matrix_id), desc.precision.nbytes)

    def _op_reshape(self, op, tag):
        old = self._desc(op.matrices[0])
        new, _ = MatrixDescriptor.decode(op.blob)
        if (new.rows, new.cols) != (old.rows, old.cols) or new.version != old.version + 1:
            raise OpError("reshape must keep the shape and advance the version by one")
        moved = self._remap_into(tag, old, new.layout, new.precision.dtype)
        slots = self._alloc_tiles(new)
        for t, arr in moved.items():
            slots[t].arr[...] = arr
        self._free_tiles(old.matrix_id)
        self.tiles[old.matrix_id] = slots
        self.descriptors[old.matrix_id] = new
        self._invalidate(old.matrix_id)

    def _op_fill_uniform(self, op, tag):
        desc = self._desc(op.matrices[0])
        stream = op.ints[0] & kernels.MASK64
        low, high = op.scalars
        for slot in self.tiles[desc.matrix_id].values():
            e = slot.extent
            vals = kernels.counter_uniform(stream, range(e.row_start, e.row_end),
                                           range(e.col_start, e.col_end), desc.cols, low, high)
            slot.arr[...] = to_precision(vals, desc.precision)

    def _op_seeds(self, op, tag):
        self.root_seed = op.ints[0] & kernels.MASK64
        self.seed = kernels.derived_seed(self.root_seed, self.rank)
        return struct.pack("<Q", self.seed)

    def _op_checksum(self, op, tag):
        h = hashlib.sha256()
        for mid in sorted(self.descriptors):
            h.update(self.descriptors[mid].encode())
        return h.digest()

    def _op_stats(self, op, tag):
        s = self.pool.stats
        return json.dumps({
            "rank": self.rank,
            "allocations_from_os": s.allocations_from_os,
            "reuses": s.reuses,
            "frees": s.frees,
            "bytes_from_os": s.bytes_from_os,
            "bytes_in_use": s.bytes_in_use,
            "resident_bytes": sum(sl.arr.nbytes for slots in self.tiles.values()
                                  for sl in slots.values()),
            "tiles": self.resident(),
            "replicas": {str(m): [e.version, e.state.value] for m, e in self.replicas.items()},
            "pipelines": {str(p): len(v) for p, v in self.pipelines.items()},
        }).encode()

    # -- metadata cache ----------------------------------------------------------

    def _op_record_begin(self, op, tag):
        if self.recording is not None:
            raise OpError("nested pipeline recording")
        self.recording = (op.ints[0], [])

    def _op_record_end(self, op, tag):
        if self.recording is None:
            raise OpError("no pipeline recording open")
        pid, steps = self.recording
        self.pipelines[pid] = steps
        self.recording = None

    def _op_replay(self, op, tag):
        pid = op.ints[0]
        steps = self.pipelines.get(pid)
        if steps is None:
            raise OpError(f"unknown pipeline {pid}")
        for s, step in enumerate(steps):
            try:
                self._run_op(step, tag + TAG_STRIDE * (s + 1))
            finally:
                self._release_scratch()
            self.progress_job()

    # -- replication --------------------------------------------------------------

    def _op_repl_start(self, op, tag):
        mid = op.matrices[0]
        job_tag, chunk_bytes = op.ints
        desc = self._desc(mid)
        old = self.replicas.get(mid)
        if old is not None and old.version == desc.version and old.state != ReplicaState.STALE:
            return
        if old is not None:
            self.pool.free(old.buf)
        buf, arr = self.pool.array((desc.rows, desc.cols), desc.precision.dtype)
        received, remaining = {}, 0
        for t, (e, w) in enumerate(desc.layout):
            if w == self.rank:
                arr[e.row_start:e.row_end, e.col_start:e.col_end] = self.tiles[mid][t].arr
                received[t] = e.row_count
            else:
                remaining += e.size * desc.precision.nbytes
        entry = ReplicaEntry(desc, job_tag, ReplicaState.PENDING, buf, arr, received, remaining)
        self.replicas[mid] = entry
        self.fabric.trace.log("repl_start", self.rank, mid, desc.version)
        chunks = replication_chunks(desc, self.rank, self.group, chunk_bytes)
        if chunks:
            self.out_jobs[job_tag] = OutJob(mid, desc.version, deque(chunks))
        if remaining == 0:
            self._mark_valid(entry)

    def _op_repl_drain(self, op, tag):
        mid = op.matrices[0]
        job_tag = op.ints[0]
        entry = self.replicas.get(mid)
        self._drain(job_tag)
        if entry is not None and entry.job_tag == job_tag:
            while entry.state == ReplicaState.PENDING:
                self._replica_step(entry)

    def _op_repl_read(self, op, tag):
        mid = op.matrices[0]
        target = op.ints[0]
        if target != self.rank:
            return
        entry = self.replicas.get(mid)
        if entry is None:
            raise OpError(f"no replica of matrix {mid}")
        if entry.state == ReplicaState.PENDING:
            raise OpError("replica pending: await replication completion")
        if entry.state == ReplicaState.STALE or entry.version != self._desc(mid).version:
            raise OpError(f"replica of matrix {mid} is stale")
        self._send_data(MASTER, tag, mid, entry.version, 0, entry.arr)

    def _send_chunk(self, job_tag: int, job: OutJob, chunk):
        rows = self.tiles[job.matrix_id][chunk.tile].arr[chunk.row_a:chunk.row_b]
        body = np.ascontiguousarray(rows).tobytes()
        self.fabric.send(Message(Kind.DATA, self.rank, chunk.peer,
                                 encode_data(job.matrix_id, job.version, chunk.offset, body),
                                 job_tag), body=len(body))

    def progress_job(self):
        """Push at most one outgoing replication chunk (oldest job first)."""
        for job_tag, job in list(self.out_jobs.items()):
            if job.chunks:
                self._send_chunk(job_tag, job, job.chunks.popleft())
                if not job.chunks:
                    del self.out_jobs[job_tag]
                return
            del self.out_jobs[job_tag]

    def _drain(self, job_tag: int):
        job = self.out_jobs.pop(job_tag, None)
        while job is not None and job.chunks:
            self._send_chunk(job_tag, job, job.chunks.popleft())

    def _apply_chunk(self, entry: ReplicaEntry, msg: Message):
        mid, version, offset, body = decode_data(msg.payload)
        if entry.state != ReplicaState.PENDING or version != entry.version:
            return
        t, a, b = locate_chunk(entry.desc, offset, len(body))
        e = entry.desc.layout.tiles[t][0]
        data = np.frombuffer(body, dtype=entry.desc.precision.dtype).reshape(b - a, e.col_count)
        entry.arr[e.row_start + a:e.row_start + b, e.col_start:e.col_end] = data
        entry.received[t] = entry.received.get(t, 0) + (b - a)
        entry.remaining -= len(body)
        if entry.remaining == 0:
            self._mark_valid(entry)

    def _replica_step(self, entry: ReplicaEntry):
        self._apply_chunk(entry, self._recv_tag(entry.job_tag))

    def _mark_valid(self, entry: ReplicaEntry):
        entry.state = ReplicaState.VALID
        self.fabric.trace.log("repl_valid", self.rank, entry.matrix_id, entry.version)
        self._complete(entry.job_tag, Completion(True))

    def _invalidate(self, mid: int):
        entry = self.replicas.get(mid)
        if entry is not None and entry.state != ReplicaState.STALE:
            if entry.state == ReplicaState.PENDING:
                self._complete(entry.job_tag,
                               Completion(False, b"source mutated during replication"))
                self._drop_tag(entry.job_tag)
            entry.state = ReplicaState.STALE
        for job_tag in [t for t, j in self.out_jobs.items() if j.matrix_id == mid]:
            del self.out_jobs[job_tag]

    def _replica_for(self, desc: MatrixDescriptor) -> ReplicaEntry:
        entry = self.replicas.get(desc.matrix_id)
        if entry is None or entry.version != desc.version or entry.state == ReplicaState.STALE:
            raise OpError(f"no current replica of matrix {desc.matrix_id}")
        self._drain(entry.job_tag)
        return entry

    # -- kernels -------------------------------------------------------------------

    def _op_gemm(self, op, tag):
        ia, ib, ic = op.matrices
        trans_a, trans_b, det, rep_a, rep_b = (bool(v) for v in op.ints[:5])
        panel = op.ints[5]
        alpha, beta = op.scalars
        A, B, C = self._desc(ia), self._desc(ib), self._desc(ic)
        m = A.cols if trans_a else A.rows
        k = A.rows if trans_a else A.cols
        kb = B.cols if trans_b else B.rows
        n = B.rows if trans_b else B.cols
        if k != kb or (m, n) != (C.rows, C.cols):
            raise OpError(f"gemm shape mismatch: ({m}x{k}) @ ({kb}x{n}) -> {C.rows}x{C.cols}")
        ctype = compute_dtype(A.precision, B.precision, C.precision)
        plan = gemm_plan(A, B, C, trans_a, trans_b, panel, rep_a, rep_b)
        ent_a = self._replica_for(A) if rep_a else None
        ent_b = self._replica_for(B) if rep_b else None
        # A and B pieces travel under one tag as a single combined plan
        pieces = plan.pieces
        n_a = len(plan.a_pieces)
        self._send_pieces(tag, ia, A.version, pieces, self._reader(ia), A.precision.nbytes,
                          range(n_a))
        self._send_pieces(tag, ib, B.version, pieces, self._reader(ib), B.precision.nbytes,
                          range(n_a, len(pieces)))
        cp = plan.consumers.get(self.rank)
        if cp is None:
            return

        row_pos = _IntervalIndex(cp.rows)
        col_pos = _IntervalIndex(cp.cols)
        a_stage = None if rep_a else self._tmp((row_pos.total, k), ctype)
        b_stage = None if rep_b else self._tmp((k, col_pos.total), ctype)

        def place(idx, p: Piece, a, b, data):
            r0, r1, c0, c1 = p.rect
            if idx < n_a:
                if trans_a:
                    a_stage[row_pos(c0):row_pos(c0) + (c1 - c0), r0 + a:r0 + b] = data.T
                else:
                    a_stage[row_pos(r0 + a):row_pos(r0 + a) + (b - a), c0:c1] = data
            elif trans_b:
                b_stage[c0:c1, col_pos(r0 + a):col_pos(r0 + a) + (b - a)] = data.T
            else:
                b_stage[r0 + a:r0 + b, col_pos(c0):col_pos(c0) + (c1 - c0)] = data

        operand_of = {id(p): (ia if i < n_a else ib)
                      for i, p in self._incoming(pieces) if p.src == self.rank}

        def read_mine(p: Piece):
            return self._region(operand_of[id(p)], p.tile, p.rect)

        def wire(idx):
            return A.precision.dtype if idx < n_a else B.precision.dtype

        def a_rows(r0, r1):
            if ent_a is not None:
                src = ent_a.arr[:, r0:r1].T if trans_a else ent_a.arr[r0:r1, :]
                return src.astype(ctype)
            return a_stage[row_pos(r0):row_pos(r0) + (r1 - r0)]

        def b_cols(c0, c1):
            if ent_b is not None:
                src = ent_b.arr[c0:c1, :].T if trans_b else ent_b.arr[:, c0:c1]
                return src.astype(ctype)
            return b_stage[:, col_pos(c0):col_pos(c0) + (c1 - c0)]

        slots = self.tiles[ic]

        def finish(t, r0, r1, c0, c1, acc):
            e = slots[t].extent
            view = slots[t].arr[r0 - e.row_start:r1 - e.row_start,
                                c0 - e.col_start:c1 - e.col_start]
            res = ctype.type(alpha) * acc
            if beta != 0.0:
                res += ctype.type(beta) * view.astype(ctype)
            with np.errstate(over="ignore"):
                view[...] = res
            self.fabric.record_compute(self.rank, (r1 - r0) * (c1 - c0) * k, "gemm")

        if not det and ent_a is None and ent_b is None:
            self._gemm_arrival_order(tag, plan, pieces, cp, place, read_mine, wire,
                                     a_rows, b_cols, ctype, finish)
            return
        self._receive_pieces(tag, pieces, read_mine, place, wire)
        mult = kernels.matmul_ascending if det else kernels.matmul_fast
        blocks = []
        for t, e in cp.c_tiles:
            for r0, r1, ta in self._replica_splits(ent_a, e.row_start, e.row_end, trans_a, True):
                for c0, c1, tb in self._replica_splits(ent_b, e.col_start, e.col_end, trans_b, False):
                    blocks.append((t, r0, r1, c0, c1, ta, tb))
        # blocks whose replica rows are already here run first; the rest run
        # as soon as the chunks they depend on arrive
        while blocks:
            waiting = []
            for blk in blocks:
                t, r0, r1, c0, c1, ta, tb = blk
                if (all(ent_a.tile_complete(x) for x in ta)
                        and all(ent_b.tile_complete(x) for x in tb)):
                    finish(t, r0, r1, c0, c1, mult(a_rows(r0, r1), b_cols(c0, c1), ctype))
                else:
                    waiting.append(blk)
            blocks = waiting
            if blocks:
                pend = [e for e in (ent_a, ent_b)
                        if e is not None and e.state == ReplicaState.PENDING]
                if not pend:
                    raise OpError("replica incomplete but no transfer pending")
                self._replica_step(pend[0])

    def _replica_splits(self, entry, lo, hi, trans, rows):
        """Cut [lo, hi) at the replica's tile boundaries along one op() axis.

        Each segment lists the replica tiles it depends on.
        """
        if entry is None:
            return [(lo, hi, ())]
        # op(X) rows are stored rows, or stored columns when transposed
        return _splits(entry.desc.layout, lo, hi, rows != trans)

    def _gemm_arrival_order(self, tag, plan, pieces, cp, place, read_mine, wire,
                            a_rows, b_cols, ctype, finish):
        """Fast mode: multiply each k-panel as soon as all of its pieces are in."""
        panels = plan.panels
        left = [0] * len(panels)
        for _, p in self._incoming(pieces):
            left[p.label] += 1
        accs = {t: np.zeros((e.row_count, e.col_count), dtype=ctype) for t, e in cp.c_tiles}

        def run_panel(q):
            k0, k1 = panels[q]
            for t, e in cp.c_tiles:
                ar = a_rows(e.row_start, e.row_end)[:, k0:k1]
                bc = b_cols(e.col_start, e.col_end)[k0:k1]
                accs[t] += kernels.matmul_fast(ar, bc, ctype)

        def on_done(idx, p):
            left[p.label] -= 1
            if left[p.label] == 0:
                run_panel(p.label)

        for q, n_left in enumerate(left):
            if n_left == 0:
                run_panel(q)
        self._receive_pieces(tag, pieces, read_mine, place, wire, on_done)
        for t, e in cp.c_tiles:
            finish(t, e.row_start, e.row_end, e.col_start, e.col_end, accs[t])

    def _op_rowcolsum(self, op, tag):
        ia, ir, icol = op.matrices
        det = bool(op.ints[0])
        alpha = op.scalars[0]
        A, R, Cc = self._desc(ia), self._desc(ir), self._desc(icol)
        if (R.rows, R.cols) != (A.rows, 1) or (Cc.rows, Cc.cols) != (1, A.cols):
            raise OpError("row/col accumulator shapes do not match")
        ctype = compute_dtype(A.precision, R.precision, Cc.precision)
        if det:
            self._rowcolsum_deterministic(tag, A, R, Cc, alpha, ctype)
        else:
            self._rowcolsum_arrival(tag, A, R, Cc, alpha, ctype)

    def _rowcolsum_deterministic(self, tag, A, R, Cc, alpha, ctype):
        # gather full rows at row-accumulator owners, full columns at column owners
        row_needs = Layout((TileExtent(e.row_start, e.row_count, 0, A.cols), w) for e, w in R.layout)
        col_needs = Layout((TileExtent(0, A.rows, e.col_start, e.col_count), w) for e, w in Cc.layout)
        rows = self._remap_into(tag, A, row_needs, ctype)
        cols = self._remap_into(tag + 1, A, col_needs, ctype)
        for t, block in rows.items():
            s = kernels.row_sums_ascending(block, ctype)
            self._accumulate(R, t, s[:, None], alpha, ctype)
            self.fabric.record_compute(self.rank, block.size, "rowsum")
        for t, block in cols.items():
            s = kernels.col_sums_ascending(block, ctype)
            self._accumulate(Cc, t, s[None, :], alpha, ctype)
            self.fabric.record_compute(self.rank, block.size, "colsum")

    def _accumulate(self, D, t, s, alpha, ctype):
        slot = self.tiles[D.matrix_id][t]
        res = slot.arr.astype(ctype) + ctype.type(alpha) * s
        with np.errstate(over="ignore"):
            slot.arr[...] = res

    def _rowcolsum_arrival(self, tag, A, R, Cc, alpha, ctype):
        """Partial sums per tile, added at the accumulator owners in arrival order."""
        mine = A.layout.owned_by(self.rank)
        expect = {tag: 0, tag + 1: 0}
        accs = {}
        for D, t_tag, along in ((R, tag, "rows"), (Cc, tag + 1, "cols")):
            for u, (ue, uw) in enumerate(D.layout):
                if uw == self.rank:
                    accs[(t_tag, u)] = np.zeros(ue.row_count if along == "rows" else ue.col_count,
                                                dtype=ctype)
        # local partials first, sends for remote owners
        for t, e in mine:
            block = self.tiles[A.matrix_id][t].arr.astype(ctype)
            rs = block.sum(axis=1, dtype=ctype)
            cs = block.sum(axis=0, dtype=ctype)
            self.fabric.record_compute(self.rank, 2 * block.size, "rowcolsum")
            for D, t_tag, vec, lo, hi, along in ((R, tag, rs, e.row_start, e.row_end, "rows"),
                                                 (Cc, tag + 1, cs, e.col_start, e.col_end, "cols")):
                for u, (ue, uw) in enumerate(D.layout):
                    u0, u1 = (ue.row_start, ue.row_end) if along == "rows" else (ue.col_start, ue.col_end)
                    a, b = max(lo, u0), min(hi, u1)
                    if a >= b:
                        continue
                    seg = vec[a - lo:b - lo]
                    if uw == self.rank:
                        accs[(t_tag, u)][a - u0:b - u0] += seg
                    else:
                        self._send_data(uw, t_tag, D.matrix_id, D.version, a, seg)
        # expected remote partials
        for D, t_tag, along in ((R, tag, "rows"), (Cc, tag + 1, "cols")):
            for u, (ue, uw) in enumerate(D.layout):
                if uw != self.rank:
                    continue
                u0, u1 = (ue.row_start, ue.row_end) if along == "rows" else (ue.col_start, ue.col_end)
                for e, w in A.layout:
                    lo, hi = (e.row_start, e.row_end) if along == "rows" else (e.col_start, e.col_end)
                    if w != self.rank and max(lo, u0) < min(hi, u1):
                        expect[t_tag] += 1
        for D, t_tag, along in ((R, tag, "rows"), (Cc, tag + 1, "cols")):
            owned = {}
            for u, (ue, uw) in enumerate(D.layout):
                if uw == self.rank:
                    owned[u] = (ue.row_start, ue.row_end) if along == "rows" else (ue.col_start, ue.col_end)
            for _ in range(expect[t_tag]):
                msg = self._recv_tag(t_tag)
                _, _, start, body = decode_data(msg.payload)
                seg = np.frombuffer(body, dtype=ctype)
                for u, (u0, u1) in owned.items():
                    if u0 <= start < u1:
                        accs[(t_tag, u)][start - u0:start - u0 + len(seg)] += seg
                        break
            for u in owned:
                vec = accs[(t_tag, u)]
                self._accumulate(D, u, vec[:, None] if along == "rows" else vec[None, :], alpha, ctype)

    def _op_softmax(self, op, tag):
        A = self._desc(op.matrices[0])
        det = bool(op.ints[0])
        ctype = compute_dtype(A.precision)
        bands = row_bands(A.layout)
        rows = self._remap_into(tag, A, bands, ctype)
        results = {}
        for t, block in rows.items():
            results[t] = kernels.softmax_rows(block, det)
            self.fabric.record_compute(self.rank, 3 * block.size, "softmax")
        # back to A's layout
        plan = remap_plan(bands, A.layout)
        mine = A.layout.owned_by(self.rank)

        def read(p: Piece):
            e = bands.tiles[p.tile][0]
            return results[p.tile][p.rect[0] - e.row_start:p.rect[1] - e.row_start,
                                   p.rect[2] - e.col_start:p.rect[3] - e.col_start]

        slots = self.tiles[A.matrix_id]
        self._send_pieces(tag + 1, A.matrix_id, A.version, plan,
                          lambda p: to_precision(read(p), A.precision), A.precision.nbytes)

        def place(idx, p, a, b, data):
            t = mine[p.need][0]
            e = slots[t].extent
            with np.errstate(over="ignore"):
                slots[t].arr[p.rect[0] - e.row_start + a:p.rect[0] - e.row_start + b,
                             p.rect[2] - e.col_start:p.rect[3] - e.col_start] = data

        self._receive_pieces(tag + 1, plan, lambda p: to_precision(read(p), A.precision),
                             place, A.precision.dtype)

    def _op_elementwise(self, op, tag):
        kind = Elementwise(op.ints[0])
        if kind in (Elementwise.RELU_GRAD, Elementwise.AXPY):
            aux_id, target_id = op.matrices
        elif kind in (Elementwise.ADD, Elementwise.SUB, Elementwise.MUL, Elementwise.COPY):
            target_id, aux_id = op.matrices
        else:
            target_id, aux_id = op.matrices[0], None
        T = self._desc(target_id)
        X = self._desc(aux_id) if aux_id is not None else None
        if X is not None and (X.rows, X.cols) != (T.rows, T.cols):
            raise OpError(f"elementwise shape mismatch {X.rows}x{X.cols} vs {T.rows}x{T.cols}")
        ctype = compute_dtype(T.precision, *(() if X is None else (X.precision,)))
        aux = self._operand_like(tag, X, T, ctype) if X is not None else {}
        s = ctype.type(op.scalars[0]) if op.scalars else None
        for t, slot in self.tiles[target_id].items():
            cur = slot.arr.astype(ctype)
            x = aux.get(t)
            if kind == Elementwise.ADD:
                res = cur + x
            elif kind == Elementwise.SUB:
                res = cur - x
            elif kind == Elementwise.MUL:
                res = cur * x
            elif kind == Elementwise.MUL_SCALAR:
                res = s * cur
            elif kind == Elementwise.RELU:
                res = np.maximum(cur, ctype.type(0))
            elif kind == Elementwise.RELU_GRAD:
                res = np.where(x > 0, cur, ctype.type(0))
            elif kind == Elementwise.AXPY:
                res = s * x + cur
            elif kind == Elementwise.FILL:
                res = np.full_like(cur, s)
            elif kind == Elementwise.COPY:
                res = x
            else:  # pragma: no cover
                raise OpError(f"unknown elementwise op {kind}")
            with np.errstate(over="ignore"):
                slot.arr[...] = res
            self.fabric.record_compute(self.rank, cur.size, kind.name.lower())

    def _op_cast(self, op, tag):
        S, D = self._desc(op.matrices[0]), self._desc(op.matrices[1])
        if (S.rows, S.cols) != (D.rows, D.cols):
            raise OpError("cast shape mismatch")
        vals = self._operand_like(tag, S, D, S.precision.dtype)
        for t, slot in self.tiles[D.matrix_id].items():
            slot.arr[...] = to_precision(vals[t], D.precision)

    def _op_im2col(self, op, tag):
        X, P = self._desc(op.matrices[0]), self._desc(op.matrices[1])
        n, c, h, w, r, s, stride, pad = op.ints
        ho = kernels.conv_out_size(h, r, stride, pad)
        wo = kernels.conv_out_size(w, s, stride, pad)
        hw = ho * wo
        need = Layout((TileExtent(e.row_start // hw, (e.row_end - 1) // hw + 1 - e.row_start // hw,
                                  0, X.cols), owner) for e, owner in P.layout)
        samples = self._remap_into(tag, X, need, X.precision.dtype)
        for t, slot in self.tiles[P.matrix_id].items():
            e = slot.extent
            n0 = e.row_start // hw
            block = samples[t]
            patches = np.concatenate([kernels.im2col(block[i], c, h, w, r, s, stride, pad)
                                      for i in range(block.shape[0])])
            off = e.row_start - n0 * hw
            slot.arr[...] = to_precision(
                patches[off:off + e.row_count, e.col_start:e.col_end], P.precision)

    def _op_col2row(self, op, tag):
        O, Y = self._desc(op.matrices[0]), self._desc(op.matrices[1])
        n, kk, hw = op.ints
        need = Layout((TileExtent(e.row_start * hw, e.row_count * hw, 0, kk), owner)
                      for e, owner in Y.layout)
        blocks = self._remap_into(tag, O, need, O.precision.dtype)
        for t, slot in self.tiles[Y.matrix_id].items():
            e = slot.extent
            b = blocks[t].reshape(e.row_count, hw, kk).transpose(0, 2, 1).reshape(e.row_count, kk * hw)
            slot.arr[...] = to_precision(b[:, e.col_start:e.col_end], Y.precision)

    _handlers = {
        Op.DEFINE: _op_define,
        Op.DESTROY: _op_destroy,
        Op.SCATTER: _op_scatter,
        Op.GATHER: _op_gather,
        Op.RESHAPE: _op_reshape,
        Op.FILL_UNIFORM: _op_fill_uniform,
        Op.SEEDS: _op_seeds,
        Op.CHECKSUM: _op_checksum,
        Op.STATS: _op_stats,
        Op.RECORD_BEGIN: _op_record_begin,
        Op.RECORD_END: _op_record_end,
        Op.REPLAY: _op_replay,
        Op.REPL_START: _op_repl_start,
        Op.REPL_DRAIN: _op_repl_drain,
        Op.REPL_READ: _op_repl_read,
        Op.GEMM: _op_gemm,
        Op.ROWCOLSUM: _op_rowcolsum,
        Op.ELEMENTWISE: _op_elementwise,
        Op.SOFTMAX: _op_softmax,
        Op.CAST: _op_cast,
        Op.IM2COL: _op_im2col,
        Op.COL2ROW: _op_col2row,
    }


@shared_memo
def _splits(layout: Layout, lo: int, hi: int, along_rows: bool):
    def span(e):
        return (e.row_start, e.row_end) if along_rows else (e.col_start, e.col_end)

    cuts = {lo, hi}
    for e, _ in layout:
        cuts.update(x for x in span(e) if lo < x < hi)
    bounds = sorted(cuts)
    out = []
    for a, b in zip(bounds, bounds[1:]):
        deps = tuple(t for t, (e, _) in enumerate(layout)
                     if span(e)[0] < b and a < span(e)[1])
        out.append((a, b, deps))
    return out


@shared_memo
def row_bands(layout: Layout) -> Layout:
    """Full-width row bands cut at every tile row boundary.

    Each band goes to the owner of its leftmost tile, so row-panel layouts map
    onto themselves and need no communication.
    """
    cuts = sorted({x for e, _ in layout for x in (e.row_start, e.row_end)})
    cols = max(e.col_end for e, _ in layout)
    tiles = []
    for a, b in zip(cuts, cuts[1:]):
        owner = next(w for e, w in layout if e.col_start == 0 and e.row_start <= a < e.row_end)
        tiles.append((TileExtent(a, b - a, 0, cols), owner))
    return Layout(tiles)


class _IntervalIndex:
    """Position of a global index inside a concatenation of disjoint intervals."""

    def __init__(self, intervals):
        self.starts = [a for a, _ in intervals]
        self.ends = [b for _, b in intervals]
        self.offsets = []
        acc = 0
        for a, b in intervals:
            self.offsets.append(acc)
            acc += b - a
        self.total = acc

    def __call__(self, x: int) -> int:
        i = bisect.bisect_right(self.starts, x) - 1
        if i < 0 or x >= self.ends[i]:
            raise OpError(f"index {x} outside the consumer plan")
        return self.offsets[i] + x - self.starts[i]
