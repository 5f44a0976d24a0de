"""Master-side library surface.

The session owns the authoritative descriptor table. Every op is broadcast
as a Control message to the whole worker group and the master waits for one
completion per worker before returning, so at each op boundary all workers
hold the same descriptors as the master.
"""

from __future__ import annotations

import enum
import hashlib
import itertools
import json
import logging
import struct
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from . import kernels
from .core import (GridMathError, Layout, MatrixDescriptor, Precision, TileExtent,
                   make_row_block_layout, to_precision, validate_layout)
from .endpoint import DEFAULT_TIMEOUT, Endpoint
from .ops import (COMPUTE_OPS, JOB_TAG_BIT, Completion, Elementwise, Op, OpDescriptor,
                  decode_data, mutated)
from .planning import exchange_plan, tile_needs
from .transport import MASTER, Backend, Fabric, Kind, Message, create_fabric
from .worker import TAG_STRIDE, Worker

log = logging.getLogger(__name__)

DEFAULT_CHUNK_BYTES = 1 << 20
_TAG_LIMIT = JOB_TAG_BIT  # op tags stay below the job-tag half


class WorkerError(GridMathError):
    """An op failed on one or more workers."""


class ReplicationState(enum.Enum):
    IN_FLIGHT = "in_flight"
    DONE = "done"
    FAILED = "failed"


@dataclass
class ReplicationHandle:
    matrix_id: int
    version: int
    job_tag: int
    expected: int
    session: "Session" = field(repr=False)
    ok: int = 0
    errors: list = field(default_factory=list)

    @property
    def state(self) -> ReplicationState:
        if self.errors:
            return ReplicationState.FAILED
        if self.ok == self.expected:
            return ReplicationState.DONE
        return ReplicationState.IN_FLIGHT

    @property
    def settled(self) -> bool:
        return self.ok + len(self.errors) == self.expected

    def wait(self) -> ReplicationState:
        return self.session.wait(self)


class DistMatrix:
    """Handle to a distributed matrix; valid while its session lives."""

    def __init__(self, session: "Session", matrix_id: int):
        self.session = session
        self.matrix_id = matrix_id

    @property
    def descriptor(self) -> MatrixDescriptor:
        return self.session.descriptor(self)

    @property
    def rows(self) -> int:
        return self.descriptor.rows

    @property
    def cols(self) -> int:
        return self.descriptor.cols

    @property
    def shape(self) -> tuple[int, int]:
        d = self.descriptor
        return d.rows, d.cols

    @property
    def precision(self) -> Precision:
        return self.descriptor.precision

    @property
    def layout(self) -> Layout:
        return self.descriptor.layout

    @property
    def version(self) -> int:
        return self.descriptor.version

    def get_data(self) -> np.ndarray:
        return self.session.get_data(self)

    def set_data(self, values):
        self.session.set_data(self, values)

    def __repr__(self):
        return f"DistMatrix(id={self.matrix_id})"


MatrixRef = Union[DistMatrix, int]


def _mid(m: MatrixRef) -> int:
    return m.matrix_id if isinstance(m, (DistMatrix, MatrixDescriptor)) else int(m)


class Session(Endpoint):
    def __init__(self, workers: Union[int, Fabric] = 1, *, backend: Optional[Backend] = None,
                 deterministic: bool = True, root_seed: int = 0,
                 chunk_bytes: int = DEFAULT_CHUNK_BYTES, panel: int = 256,
                 timeout: float = DEFAULT_TIMEOUT):
        fabric = workers if isinstance(workers, Fabric) else create_fabric(int(workers), backend)
        super().__init__(fabric, MASTER, timeout)
        self.group = list(fabric.workers)
        self.deterministic = deterministic
        self.root_seed = root_seed
        self.chunk_bytes = chunk_bytes
        self.panel = panel
        self.descriptors: dict[int, MatrixDescriptor] = {}
        self.pipelines: dict[int, list[OpDescriptor]] = {}
        self.handles: dict[int, ReplicationHandle] = {}      # job tag -> handle
        self.latest_handle: dict[int, ReplicationHandle] = {}  # matrix id -> handle
        self.no_replicate: set[int] = set()  # caller opted these out of replica caching
        self._recording: Optional[tuple[int, list[OpDescriptor]]] = None
        self._ids = itertools.count(1)
        self._next_id_floor = 1
        self._pids = itertools.count(1)
        self._jobs = itertools.count(1)
        self._tag = TAG_STRIDE
        self._conv_cache: dict[tuple, tuple[int, int]] = {}
        self.workers = [Worker(w, fabric, self.group, timeout) for w in self.group]
        for w in self.workers:
            w.start()
        self._closed = False

    # -- plumbing ----------------------------------------------------------------

    @property
    def n_workers(self) -> int:
        return len(self.group)

    def _next_tag(self, steps: int = 1) -> int:
        span = TAG_STRIDE * steps
        if self._tag + span >= _TAG_LIMIT:
            self._tag = TAG_STRIDE
        tag = self._tag
        self._tag += span
        return tag

    def _intercept(self, msg: Message) -> bool:
        if msg.kind == Kind.COMPLETION and msg.tag & JOB_TAG_BIT:
            handle = self.handles.get(msg.tag)
            if handle is not None:
                c = Completion.decode(msg.payload)
                if c.ok:
                    handle.ok += 1
                else:
                    handle.errors.append((msg.source, c.error))
            return True
        return False

    def _issue(self, op: OpDescriptor, steps: int = 1) -> int:
        if self._closed:
            raise GridMathError("session is closed")
        tag = self._next_tag(steps)
        self.fabric.broadcast_control(op.encode(), tag, self.group)
        return tag

    def _collect(self, tag: int) -> list[bytes]:
        results, errors = [None] * len(self.group), []
        for _ in self.group:
            msg = self._recv_tag(tag, Kind.COMPLETION)
            c = Completion.decode(msg.payload)
            if c.ok:
                results[self.group.index(msg.source)] = c.result
            else:
                errors.append(f"worker {msg.source}: {c.error}")
        if errors:
            raise WorkerError("; ".join(sorted(errors)))
        return results

    def _apply_versions(self, op: OpDescriptor):
        for mid in mutated(op):
            self.descriptors[mid] = self.descriptors[mid].bumped()

    def _run(self, op: OpDescriptor) -> list[bytes]:
        """Broadcast a self-contained op, wait for it and track versions."""
        tag = self._issue(op)
        results = self._collect(tag)
        if self._recording is not None and op.opcode in COMPUTE_OPS:
            self._recording[1].append(op)
        self._apply_versions(op)
        return results

    def descriptor(self, m: MatrixRef) -> MatrixDescriptor:
        try:
            return self.descriptors[_mid(m)]
        except KeyError:
            raise GridMathError(f"matrix {_mid(m)} does not exist (destroyed?)") from None

    def handle(self, m: MatrixRef) -> DistMatrix:
        self.descriptor(m)
        return DistMatrix(self, _mid(m))

    # -- lifecycle ----------------------------------------------------------------

    def create_matrix(self, rows: int, cols: int, precision="single",
                      layout: Optional[Layout] = None, *, version: int = 0,
                      replicable: bool = True) -> DistMatrix:
        """Define a zero-filled matrix.

        ``replicable=False`` marks a matrix that must never be cached whole on
        every worker (for example one too large for a single worker's memory);
        replicating it then raises instead of running.
        """
        precision = Precision.parse(precision)
        if layout is None:
            layout = make_row_block_layout(rows, cols, self.group)
        bad = validate_layout(rows, cols, layout, self.group)
        if bad:
            raise GridMathError(f"invalid layout: {bad.kind}: {bad.detail}")
        m = self._define(MatrixDescriptor(next(self._ids), rows, cols, precision, layout, version))
        if not replicable:
            self.no_replicate.add(m.matrix_id)
        return m

    def _define(self, desc: MatrixDescriptor) -> DistMatrix:
        if desc.matrix_id in self.descriptors:
            raise GridMathError(f"matrix id {desc.matrix_id} already in use")
        self._run(OpDescriptor(Op.DEFINE, (desc.matrix_id,), blob=desc.encode()))
        self.descriptors[desc.matrix_id] = desc
        if desc.matrix_id >= self._next_id_floor:
            self._next_id_floor = desc.matrix_id + 1
            self._ids = itertools.count(self._next_id_floor)
        return DistMatrix(self, desc.matrix_id)

    def destroy(self, m: MatrixRef):
        desc = self.descriptor(m)
        self._run(OpDescriptor(Op.DESTROY, (desc.matrix_id,)))
        del self.descriptors[desc.matrix_id]
        self.latest_handle.pop(desc.matrix_id, None)
        self.no_replicate.discard(desc.matrix_id)

    def set_data(self, m: MatrixRef, values):
        desc = self.descriptor(m)
        arr = np.asarray(values)
        if arr.size != desc.rows * desc.cols:
            raise GridMathError(f"expected {desc.rows * desc.cols} values, got {arr.size}")
        full = np.ascontiguousarray(to_precision(arr.reshape(desc.rows, desc.cols), desc.precision))
        op = OpDescriptor(Op.SCATTER, (desc.matrix_id,))
        tag = self._issue(op)
        plan = exchange_plan(Layout([(TileExtent(0, desc.rows, 0, desc.cols), MASTER)]),
                             tile_needs(desc.layout))
        self._send_pieces(tag, desc.matrix_id, desc.version, plan,
                          lambda p: full[p.rect[0]:p.rect[1], p.rect[2]:p.rect[3]],
                          desc.precision.nbytes)
        self._collect(tag)
        self._apply_versions(op)

    def get_data(self, m: MatrixRef) -> np.ndarray:
        """Gather the full matrix (row-major, in its storage precision)."""
        desc = self.descriptor(m)
        tag = self._issue(OpDescriptor(Op.GATHER, (desc.matrix_id,)))
        self._collect(tag)
        out = np.empty((desc.rows, desc.cols), dtype=desc.precision.dtype)
        plan = exchange_plan(desc.layout, {MASTER: [(0, desc.rows, 0, desc.cols)]})

        def place(idx, p, a, b, data):
            out[p.rect[0] + a:p.rect[0] + b, p.rect[2]:p.rect[3]] = data

        self._receive_pieces(tag, plan, None, place, desc.precision.dtype)
        return out

    def reshape(self, m: MatrixRef, layout: Optional[Layout] = None, precision=None):
        """Move ``m`` to a new layout (any subset of the group) and/or precision."""
        old = self.descriptor(m)
        layout = old.layout if layout is None else layout
        prec = old.precision if precision is None else Precision.parse(precision)
        bad = validate_layout(old.rows, old.cols, layout, self.group)
        if bad:
            raise GridMathError(f"invalid layout: {bad.kind}: {bad.detail}")
        new = MatrixDescriptor(old.matrix_id, old.rows, old.cols, prec, layout, old.version + 1)
        self._run(OpDescriptor(Op.RESHAPE, (old.matrix_id,), blob=new.encode()))
        self.descriptors[old.matrix_id] = new

    # -- seeding and consistency ----------------------------------------------------

    def distribute_seeds(self, root_seed: Optional[int] = None) -> list[int]:
        if root_seed is not None:
            self.root_seed = root_seed
        res = self._run(OpDescriptor(Op.SEEDS, ints=(_signed64(self.root_seed),)))
        return [struct.unpack("<Q", r)[0] for r in res]

    def descriptor_checksum(self) -> bytes:
        h = hashlib.sha256()
        for mid in sorted(self.descriptors):
            h.update(self.descriptors[mid].encode())
        return h.digest()

    def checksum_consistent(self) -> bool:
        """True when every worker's descriptor table matches the master's."""
        mine = self.descriptor_checksum()
        return all(r == mine for r in self._run(OpDescriptor(Op.CHECKSUM)))

    def worker_stats(self) -> list[dict]:
        return [json.loads(r) for r in self._run(OpDescriptor(Op.STATS))]

    # -- metadata cache -------------------------------------------------------------

    def begin_record(self) -> int:
        if self._recording is not None:
            raise GridMathError("a pipeline recording is already open")
        pid = next(self._pids)
        self._run(OpDescriptor(Op.RECORD_BEGIN, ints=(pid,)))
        self._recording = (pid, [])
        return pid

    def end_record(self) -> int:
        if self._recording is None:
            raise GridMathError("no pipeline recording is open")
        pid, steps = self._recording
        self._run(OpDescriptor(Op.RECORD_END, ints=(pid,)))
        self._recording = None
        self.pipelines[pid] = steps
        return pid

    def replay(self, pid: int):
        """Run a recorded pipeline with one Control message per worker."""
        steps = self.pipelines.get(pid)
        if steps is None:
            if self._recording is not None and self._recording[0] == pid:
                raise GridMathError(f"pipeline {pid} is still being recorded")
            raise GridMathError(f"unknown pipeline {pid}")
        for step in steps:
            for mid in step.matrices:
                self.descriptor(mid)
        tag = self._issue(OpDescriptor(Op.REPLAY, ints=(pid,)), steps=len(steps) + 1)
        self._collect(tag)
        for step in steps:
            self._apply_versions(step)

    # -- replication ------------------------------------------------------------------

    def replicate_async(self, m: MatrixRef) -> ReplicationHandle:
        desc = self.descriptor(m)
        if desc.matrix_id in self.no_replicate:
            raise GridMathError(f"matrix {desc.matrix_id} was created with replicable=False")
        prev = self.latest_handle.get(desc.matrix_id)
        if prev is not None and prev.version == desc.version and prev.state != ReplicationState.FAILED:
            return prev
        job_tag = JOB_TAG_BIT | (next(self._jobs) & (JOB_TAG_BIT - 1))
        handle = ReplicationHandle(desc.matrix_id, desc.version, job_tag, len(self.group), self)
        self.handles[job_tag] = handle
        self.latest_handle[desc.matrix_id] = handle
        self._run(OpDescriptor(Op.REPL_START, (desc.matrix_id,), (job_tag, self.chunk_bytes)))
        return handle

    def wait(self, handle: ReplicationHandle) -> ReplicationState:
        """Block until every worker has reported on the job."""
        if not handle.settled:
            self._run(OpDescriptor(Op.REPL_DRAIN, (handle.matrix_id,), (handle.job_tag,)))
            while not handle.settled:
                self._stash_msg(self._pull(self.timeout))
        self.handles.pop(handle.job_tag, None)
        return handle.state

    def replicate_sync(self, m: MatrixRef) -> ReplicationHandle:
        handle = self.replicate_async(m)
        if self.wait(handle) != ReplicationState.DONE:
            raise WorkerError(f"replication of matrix {handle.matrix_id} failed: {handle.errors}")
        return handle

    def read_replica(self, m: MatrixRef, worker: int) -> np.ndarray:
        desc = self.descriptor(m)
        tag = self._issue(OpDescriptor(Op.REPL_READ, (desc.matrix_id,), (worker,)))
        self._collect(tag)
        msg = self._recv_tag(tag)
        _, _, _, body = decode_data(msg.payload)
        return np.frombuffer(bytes(body), dtype=desc.precision.dtype).reshape(desc.rows, desc.cols)

    def _require_replica(self, m: MatrixRef):
        desc = self.descriptor(m)
        h = self.latest_handle.get(desc.matrix_id)
        if h is None or h.version != desc.version or h.state == ReplicationState.FAILED:
            raise GridMathError(f"matrix {desc.matrix_id} has no current replication")

    # -- kernels ----------------------------------------------------------------------

    def _det(self, deterministic: Optional[bool]) -> bool:
        return self.deterministic if deterministic is None else deterministic

    def gemm(self, a: MatrixRef, b: MatrixRef, c: MatrixRef, alpha: float = 1.0,
             beta: float = 0.0, trans_a: bool = False, trans_b: bool = False, *,
             deterministic: Optional[bool] = None, replica_a: bool = False,
             replica_b: bool = False):
        """C <- alpha * op(A) @ op(B) + beta * C for any layouts and precisions."""
        A, B, C = self.descriptor(a), self.descriptor(b), self.descriptor(c)
        m, k = (A.cols, A.rows) if trans_a else (A.rows, A.cols)
        kb, n = (B.cols, B.rows) if trans_b else (B.rows, B.cols)
        if k != kb or (m, n) != (C.rows, C.cols):
            raise GridMathError(f"gemm shape mismatch: ({m}x{k}) @ ({kb}x{n}) -> "
                                f"{C.rows}x{C.cols}")
        if C.matrix_id in (A.matrix_id, B.matrix_id):
            raise GridMathError("gemm output must not alias an input")
        if replica_a:
            self._require_replica(A)
        if replica_b:
            self._require_replica(B)
        flags = (int(trans_a), int(trans_b), int(self._det(deterministic)),
                 int(replica_a), int(replica_b), self.panel)
        self._run(OpDescriptor(Op.GEMM, (A.matrix_id, B.matrix_id, C.matrix_id), flags,
                               (float(alpha), float(beta))))

    def add_row_col_sum(self, a: MatrixRef, row_acc: MatrixRef, col_acc: MatrixRef,
                        alpha: float = 1.0, deterministic: Optional[bool] = None):
        """row_acc[i] += alpha * sum_j A[i, j];  col_acc[j] += alpha * sum_i A[i, j]."""
        A, R, C = self.descriptor(a), self.descriptor(row_acc), self.descriptor(col_acc)
        if (R.rows, R.cols) != (A.rows, 1) or (C.rows, C.cols) != (1, A.cols):
            raise GridMathError(f"accumulators must be {A.rows}x1 and 1x{A.cols}")
        if R.matrix_id == C.matrix_id or A.matrix_id in (R.matrix_id, C.matrix_id):
            raise GridMathError("accumulators must be distinct matrices")
        self._run(OpDescriptor(Op.ROWCOLSUM, (A.matrix_id, R.matrix_id, C.matrix_id),
                               (int(self._det(deterministic)),), (float(alpha),)))

    def elementwise(self, kind: Elementwise, *operands: MatrixRef, scalar: float = 0.0):
        kind = Elementwise(kind)
        descs = [self.descriptor(o) for o in operands]
        binary = kind in (Elementwise.ADD, Elementwise.SUB, Elementwise.MUL, Elementwise.COPY,
                          Elementwise.RELU_GRAD, Elementwise.AXPY)
        if len(descs) != (2 if binary else 1):
            raise GridMathError(f"{kind.name.lower()} takes {2 if binary else 1} operand(s)")
        if binary:
            x, y = descs
            if (x.rows, x.cols) != (y.rows, y.cols):
                raise GridMathError(f"shape mismatch {x.rows}x{x.cols} vs {y.rows}x{y.cols}")
            if x.matrix_id == y.matrix_id and kind == Elementwise.COPY:
                return
        self._run(OpDescriptor(Op.ELEMENTWISE, tuple(d.matrix_id for d in descs),
                               (int(kind),), (float(scalar),)))

    def add(self, a: MatrixRef, b: MatrixRef):
        """A <- A + B (B remapped to A's layout when they differ)."""
        self.elementwise(Elementwise.ADD, a, b)

    def sub(self, a: MatrixRef, b: MatrixRef):
        self.elementwise(Elementwise.SUB, a, b)

    def mul(self, a: MatrixRef, b: MatrixRef):
        self.elementwise(Elementwise.MUL, a, b)

    def scale(self, a: MatrixRef, s: float):
        self.elementwise(Elementwise.MUL_SCALAR, a, scalar=s)

    def relu(self, a: MatrixRef):
        self.elementwise(Elementwise.RELU, a)

    def relu_grad(self, x: MatrixRef, g: MatrixRef):
        """G <- G where X > 0, else 0."""
        self.elementwise(Elementwise.RELU_GRAD, x, g)

    def axpy(self, alpha: float, x: MatrixRef, y: MatrixRef):
        """Y <- alpha * X + Y."""
        self.elementwise(Elementwise.AXPY, x, y, scalar=alpha)

    def fill(self, a: MatrixRef, value: float):
        self.elementwise(Elementwise.FILL, a, scalar=value)

    def copy(self, dst: MatrixRef, src: MatrixRef):
        self.elementwise(Elementwise.COPY, dst, src)

    def softmax_rows(self, a: MatrixRef, deterministic: Optional[bool] = None):
        d = self.descriptor(a)
        self._run(OpDescriptor(Op.SOFTMAX, (d.matrix_id,), (int(self._det(deterministic)),)))

    def cast_precision(self, src: MatrixRef, dst: MatrixRef):
        s, d = self.descriptor(src), self.descriptor(dst)
        if (s.rows, s.cols) != (d.rows, d.cols):
            raise GridMathError("cast shape mismatch")
        if s.matrix_id == d.matrix_id:
            raise GridMathError("cast needs distinct source and destination")
        self._run(OpDescriptor(Op.CAST, (s.matrix_id, d.matrix_id)))

    def fill_uniform(self, a: MatrixRef, stream: int, low: float, high: float):
        """Counter-based uniform fill keyed by (stream, element index)."""
        d = self.descriptor(a)
        self._run(OpDescriptor(Op.FILL_UNIFORM, (d.matrix_id,), (_signed64(stream),),
                               (float(low), float(high))))

    def conv2d_forward(self, x: MatrixRef, filters: MatrixRef, y: MatrixRef,
                       image: tuple[int, int, int], kernel: tuple[int, int],
                       stride: int = 1, pad: int = 0, deterministic: Optional[bool] = None):
        """Y (N x K*H'*W') <- conv(X (N x C*H*W), F (K x C*R*S)) via im2col and gemm."""
        X, F, Y = self.descriptor(x), self.descriptor(filters), self.descriptor(y)
        c, h, w = image
        r, s = kernel
        if stride < 1 or pad < 0 or h + 2 * pad < r or w + 2 * pad < s:
            raise GridMathError("inconsistent convolution geometry")
        ho = kernels.conv_out_size(h, r, stride, pad)
        wo = kernels.conv_out_size(w, s, stride, pad)
        n, kk = X.rows, F.rows
        if X.cols != c * h * w or F.cols != c * r * s or (Y.rows, Y.cols) != (n, kk * ho * wo):
            raise GridMathError("inconsistent convolution geometry")
        prec = X.precision if X.precision == Precision.DOUBLE else Precision.SINGLE
        key = (n, c, h, w, kk, r, s, stride, pad, prec)
        if key not in self._conv_cache or any(i not in self.descriptors
                                              for i in self._conv_cache[key]):
            # patch rows are split by sample so each worker lowers whole images
            hw = ho * wo
            bands = [(e.row_start * hw, e.row_count * hw, wk)
                     for e, wk in make_row_block_layout(n, 1, self.group)]
            pm = self.create_matrix(n * hw, c * r * s, prec, Layout(
                (TileExtent(r0, rn, 0, c * r * s), wk) for r0, rn, wk in bands))
            out2 = self.create_matrix(n * hw, kk, prec, Layout(
                (TileExtent(r0, rn, 0, kk), wk) for r0, rn, wk in bands))
            self._conv_cache[key] = (pm.matrix_id, out2.matrix_id)
        pm_id, out_id = self._conv_cache[key]
        self._run(OpDescriptor(Op.IM2COL, (X.matrix_id, pm_id), (n, c, h, w, r, s, stride, pad)))
        self.gemm(pm_id, F.matrix_id, out_id, trans_b=True, deterministic=deterministic)
        self._run(OpDescriptor(Op.COL2ROW, (out_id, Y.matrix_id), (n, kk, ho * wo)))

    # -- checkpoint -------------------------------------------------------------------

    def checkpoint(self, path):
        from .checkpoint import save
        save(self, path)

    # -- shutdown ----------------------------------------------------------------------

    def close(self):
        if self._closed:
            return
        try:
            tag = self._issue(OpDescriptor(Op.SHUTDOWN))
            self._collect(tag)
        finally:
            self._closed = True
            for w in self.workers:
                w.thread.join(timeout=5)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def _signed64(x: int) -> int:
    x &= kernels.MASK64
    return x - (1 << 64) if x >= 1 << 63 else x
