"""Message fabric connecting the master and the workers.

Two backends share one implementation: ``InProcess`` delivers frames through
in-memory queues, ``Simulated`` does the same and additionally charges every
message and every compute event to a virtual clock using an alpha-beta model.
"""

from __future__ import annotations

import enum
import itertools
import math
import os
import queue
import struct
import threading
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Optional, Union

from .core import GridMathError
from .ops import OpDescriptor

MASTER = 0xFFFFFFFF
DEFAULT_MAX_FRAME = 64 * 1024 * 1024

_FRAME = struct.Struct("<BIIIQ")


class TransportError(GridMathError):
    pass


class Kind(enum.IntEnum):
    CONTROL = 0
    DATA = 1
    COMPLETION = 2


def max_frame_size() -> int:
    value = os.environ.get("GRIDMATH_MAX_FRAME")
    return int(value) if value else DEFAULT_MAX_FRAME


@dataclass(frozen=True)
class Message:
    kind: Kind
    source: int
    dest: int
    payload: bytes
    tag: int = 0

    def encode(self) -> bytes:
        return _FRAME.pack(int(self.kind), self.source, self.dest, self.tag,
                           len(self.payload)) + self.payload

    @classmethod
    def decode(cls, frame: bytes) -> "Message":
        if len(frame) < _FRAME.size:
            raise TransportError("short frame")
        kind, src, dst, tag, length = _FRAME.unpack_from(frame)
        payload = bytes(frame[_FRAME.size:])
        if len(payload) != length:
            raise TransportError(f"frame length {length} != payload {len(payload)}")
        return cls(Kind(kind), src, dst, payload, tag)


@dataclass(frozen=True)
class CostModel:
    latency: float = 5e-6          # alpha, seconds per message
    inverse_bandwidth: float = 5e-10  # beta, seconds per byte
    compute_rate: float = 1e9       # elements (multiply-adds) per second per worker

    def __post_init__(self):
        if self.latency < 0 or self.inverse_bandwidth < 0 or self.compute_rate <= 0:
            raise ValueError(f"invalid cost model {self}")

    def message_time(self, nbytes: int) -> float:
        return self.latency + self.inverse_bandwidth * nbytes


@dataclass(frozen=True)
class InProcess:
    pass


@dataclass(frozen=True)
class Simulated:
    cost: CostModel = field(default_factory=CostModel)


Backend = Union[InProcess, Simulated]


@dataclass
class LinkCounters:
    messages: int = 0
    bytes: int = 0


class FabricStats:
    """Per-link, per-kind counters for sent and received traffic.

    ``body`` counts Data payload bytes after the fixed data header, which is the
    quantity of matrix elements actually moved.
    """

    def __init__(self):
        self._lock = threading.Lock()
        self.sent: dict[tuple[int, int, Kind], LinkCounters] = defaultdict(LinkCounters)
        self.received: dict[tuple[int, int, Kind], LinkCounters] = defaultdict(LinkCounters)
        self.body: dict[tuple[int, int], int] = defaultdict(int)

    def _count(self, table, msg: Message):
        c = table[(msg.source, msg.dest, msg.kind)]
        c.messages += 1
        c.bytes += len(msg.payload)

    def on_send(self, msg: Message, body: int = 0):
        with self._lock:
            self._count(self.sent, msg)
            if body:
                self.body[(msg.source, msg.dest)] += body

    def on_recv(self, msg: Message):
        with self._lock:
            self._count(self.received, msg)

    def totals(self, kind: Optional[Kind] = None, received: bool = False,
               dest: Optional[int] = None) -> LinkCounters:
        table = self.received if received else self.sent
        out = LinkCounters()
        with self._lock:
            for (s, d, k), c in table.items():
                if kind is not None and k != kind:
                    continue
                if dest is not None and d != dest:
                    continue
                out.messages += c.messages
                out.bytes += c.bytes
        return out

    def body_bytes(self) -> int:
        with self._lock:
            return sum(self.body.values())

    def snapshot(self) -> dict:
        with self._lock:
            return {
                "sent": {k: (c.messages, c.bytes) for k, c in self.sent.items()},
                "received": {k: (c.messages, c.bytes) for k, c in self.received.items()},
                "body": dict(self.body),
            }


@dataclass(frozen=True)
class Event:
    seq: int
    what: str          # "send", "compute", "repl_start", "repl_valid", "mark", ...
    endpoint: int
    info: tuple = ()


class EventTrace:
    """Globally ordered event log shared by every endpoint of a fabric."""

    def __init__(self):
        self._lock = threading.Lock()
        self._seq = itertools.count()
        self.events: list[Event] = []
        self.enabled = True

    def log(self, what: str, endpoint: int, *info) -> Optional[Event]:
        if not self.enabled:
            return None
        with self._lock:
            ev = Event(next(self._seq), what, endpoint, info)
            self.events.append(ev)
        return ev

    def clear(self):
        with self._lock:
            self.events.clear()

    def mark(self) -> int:
        with self._lock:
            return len(self.events)

    def since(self, mark: int) -> list[Event]:
        with self._lock:
            return list(self.events[mark:])


def simulate_elapsed(events: Iterable[Event], cost: CostModel, workers: Iterable[int]) -> float:
    """Virtual wall time of an event trace.

    Each worker's links are serialized: every message it sends or receives costs
    alpha + beta*bytes on that worker, every compute event costs elements/rate.
    The elapsed time is the maximum per-worker total.
    """
    busy: dict[int, list[float]] = {w: [] for w in workers}
    for ev in events:
        if ev.what == "send":
            dst, nbytes = ev.info[0], ev.info[2]
            t = cost.message_time(nbytes)
            if ev.endpoint in busy:
                busy[ev.endpoint].append(t)
            if dst in busy:
                busy[dst].append(t)
        elif ev.what == "compute":
            if ev.endpoint in busy:
                busy[ev.endpoint].append(ev.info[0] / cost.compute_rate)
    # fsum is exact, so thread interleaving in the trace cannot change the result
    return max((math.fsum(v) for v in busy.values()), default=0.0)


@dataclass(frozen=True)
class Receipt:
    source: int
    dest: int
    kind: Kind
    nbytes: int
    tag: int


class Fabric:
    """Master endpoint plus ``n_workers`` worker endpoints."""

    def __init__(self, n_workers: int, backend: Optional[Backend] = None):
        if n_workers < 1:
            raise TransportError("a fabric needs at least one worker")
        self.n_workers = n_workers
        self.backend = backend or InProcess()
        self.max_frame = max_frame_size()
        self.workers = list(range(n_workers))
        self._queues: dict[int, queue.Queue] = {w: queue.Queue() for w in self.workers}
        self._queues[MASTER] = queue.Queue()
        self._closed: set[int] = set()
        self.stats = FabricStats()
        self.trace = EventTrace()

    @property
    def simulated(self) -> bool:
        return isinstance(self.backend, Simulated)

    def endpoints(self) -> list[int]:
        return [MASTER] + self.workers

    def close(self, endpoint: Optional[int] = None):
        if endpoint is None:
            self._closed.update(self._queues)
        else:
            self._closed.add(endpoint)

    def send(self, msg: Message, body: int = 0) -> Receipt:
        if msg.dest not in self._queues:
            raise TransportError(f"unknown endpoint {msg.dest}")
        if msg.dest in self._closed or msg.source in self._closed:
            raise TransportError(f"endpoint closed ({msg.source} -> {msg.dest})")
        if len(msg.payload) > self.max_frame:
            raise TransportError(f"frame of {len(msg.payload)} bytes exceeds {self.max_frame}")
        if msg.kind == Kind.CONTROL:
            OpDescriptor.decode(msg.payload)
        frame = msg.encode()
        self.stats.on_send(msg, body)
        self.trace.log("send", msg.source, msg.dest, int(msg.kind), len(msg.payload), msg.tag)
        self._queues[msg.dest].put(frame)
        return Receipt(msg.source, msg.dest, msg.kind, len(msg.payload), msg.tag)

    def recv(self, endpoint: int, timeout: Optional[float] = None) -> Message:
        if endpoint in self._closed:
            raise TransportError(f"endpoint {endpoint} closed")
        try:
            frame = self._queues[endpoint].get(timeout=timeout)
        except queue.Empty:
            raise TimeoutError(f"no message for endpoint {endpoint} within {timeout}s") from None
        msg = Message.decode(frame)
        self.stats.on_recv(msg)
        return msg

    def pending(self, endpoint: int) -> int:
        return self._queues[endpoint].qsize()

    def broadcast_control(self, payload: bytes, tag: int = 0,
                          dests: Optional[Iterable[int]] = None) -> list[Receipt]:
        if not payload:
            raise TransportError("control payload must be a valid op descriptor")
        targets = list(self.workers if dests is None else dests)
        for w in targets:
            if w in self._closed:
                raise TransportError(f"endpoint {w} closed")
        return [self.send(Message(Kind.CONTROL, MASTER, w, payload, tag)) for w in targets]

    def record_compute(self, endpoint: int, elements: int, label: str = ""):
        self.trace.log("compute", endpoint, int(elements), label)

    def simulated_elapsed(self, since: int = 0) -> float:
        if not self.simulated:
            raise TransportError("simulated_elapsed requires the Simulated backend")
        return simulate_elapsed(self.trace.since(since), self.backend.cost, self.workers)


def create_fabric(n_workers: int, backend: Optional[Backend] = None) -> Fabric:
    return Fabric(n_workers, backend)
