"""Tagged send/receive plumbing shared by the master and the workers."""

from __future__ import annotations

import os
from collections import defaultdict, deque
from typing import Callable, Optional, Sequence

import numpy as np

from .core import GridMathError
from .ops import decode_data, encode_data
from .planning import IndexedPlan, Piece, message_rows
from .transport import Fabric, Kind, Message

DEFAULT_TIMEOUT = float(os.environ.get("GRIDMATH_TIMEOUT", "300"))

# place(index_in_plan, piece, first_row, end_row, rows_of_data)
PlaceFn = Callable[[int, Piece, int, int, np.ndarray], None]
ReadFn = Callable[[Piece], np.ndarray]


class ProtocolError(GridMathError):
    pass


class Endpoint:
    def __init__(self, fabric: Fabric, me: int, timeout: float = DEFAULT_TIMEOUT):
        self.fabric = fabric
        self.me = me
        self.timeout = timeout
        self._stash: dict[tuple[Kind, int], deque[Message]] = defaultdict(deque)
        self._dead: set[int] = set()

    # -- receive ------------------------------------------------------------

    def _intercept(self, msg: Message) -> bool:
        """Hook for messages consumed on arrival; return True if handled."""
        return False

    def _stash_msg(self, msg: Message):
        if msg.tag in self._dead or self._intercept(msg):
            return
        self._stash[(msg.kind, msg.tag)].append(msg)

    def _pull(self, timeout: Optional[float]) -> Message:
        return self.fabric.recv(self.me, timeout=timeout)

    def _recv_tag(self, tag: int, kind: Kind = Kind.DATA) -> Message:
        key = (kind, tag)
        dq = self._stash.get(key)
        if dq:
            msg = dq.popleft()
            if not dq:
                del self._stash[key]
            return msg
        while True:
            msg = self._pull(self.timeout)
            if msg.kind == kind and msg.tag == tag:
                return msg
            self._stash_msg(msg)

    def _drop_tag(self, tag: int):
        self._dead.add(tag)
        for key in [k for k in self._stash if k[1] == tag]:
            del self._stash[key]

    # -- pieces -------------------------------------------------------------

    def _send_data(self, dst: int, tag: int, matrix_id: int, version: int,
                   index: int, data: np.ndarray):
        body = np.ascontiguousarray(data).tobytes()
        self.fabric.send(Message(Kind.DATA, self.me, dst,
                                 encode_data(matrix_id, version, index, body), tag),
                         body=len(body))

    def _outgoing(self, plan: Sequence[Piece]):
        if isinstance(plan, IndexedPlan):
            return plan.outgoing(self.me)
        return [(i, p) for i, p in enumerate(plan) if p.src == self.me and p.dst != self.me]

    def _incoming(self, plan: Sequence[Piece]):
        if isinstance(plan, IndexedPlan):
            return plan.incoming(self.me)
        return [(i, p) for i, p in enumerate(plan) if p.dst == self.me]

    def _send_pieces(self, tag: int, matrix_id: int, version: int, plan: Sequence[Piece],
                     read: ReadFn, itemsize: int, span: Optional[range] = None):
        """Send this endpoint's outgoing pieces (only indices in ``span`` if given)."""
        limit = self.fabric.max_frame
        for idx, p in self._outgoing(plan):
            if span is not None and idx not in span:
                continue
            data = read(p)
            for a, b in message_rows(p.rect, itemsize, limit):
                self._send_data(p.dst, tag, matrix_id, version, idx, data[a:b])

    def _receive_pieces(self, tag: int, plan: Sequence[Piece], read: Optional[ReadFn],
                        place: PlaceFn, wire_dtype, on_done: Optional[Callable[[int, Piece], None]] = None):
        """Collect every piece addressed to this endpoint, in arrival order.

        Local pieces (source == self) are read and placed first. ``wire_dtype``
        is a dtype or a function of the plan index.
        """
        dtype_of = wire_dtype if callable(wire_dtype) else (lambda idx, _d=np.dtype(wire_dtype): _d)
        limit = self.fabric.max_frame
        expected: dict[int, deque] = defaultdict(deque)
        outstanding = 0
        for idx, p in self._incoming(plan):
            if p.src == self.me:
                data = read(p)
                place(idx, p, 0, data.shape[0], data)
                if on_done:
                    on_done(idx, p)
                continue
            parts = message_rows(p.rect, dtype_of(idx).itemsize, limit)
            for k, (a, b) in enumerate(parts):
                expected[p.src].append((idx, p, a, b, k == len(parts) - 1))
                outstanding += 1
        while outstanding:
            msg = self._recv_tag(tag)
            queue_ = expected.get(msg.source)
            if not queue_:
                raise ProtocolError(f"unexpected piece from {msg.source} on tag {tag}")
            idx, p, a, b, last = queue_.popleft()
            _, _, offset, body = decode_data(msg.payload)
            if offset != idx:
                raise ProtocolError(f"piece {offset} arrived where {idx} was planned")
            cols = p.rect[3] - p.rect[2]
            data = np.frombuffer(body, dtype=dtype_of(idx)).reshape(b - a, cols)
            place(idx, p, a, b, data)
            if last and on_done:
                on_done(idx, p)
            outstanding -= 1
