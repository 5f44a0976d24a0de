"""Parallel data augmentation pipeline with a placement/thread-count tuner.

Samples are byte images. Files hold a u32 C, H, W header followed by the
pixels interleaved as H x W x C; ``Decode`` makes them planar (C x H x W).
Every random choice is drawn from the per-sample seed, so outputs do not
depend on thread count, batch partitioning or stage placement. Data stays in
bytes until a stage needs more precision (lazy promotion).
"""

from __future__ import annotations

import enum
import itertools
import queue
import struct
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Iterator, Optional, Sequence

import numpy as np

from .core import GridMathError
from .kernels import MASK64, splitmix64


class DataloadError(GridMathError):
    pass


class Width(enum.IntEnum):
    """Element type of an inter-stage buffer, ordered by byte width."""
    BYTE = 1
    HALF = 2
    SINGLE = 4

    @property
    def dtype(self) -> np.dtype:
        return np.dtype({1: np.uint8, 2: np.float16, 4: np.float32}[int(self)])


class StageKind(enum.Enum):
    DECODE = "decode"
    CROP = "crop"
    MIRROR = "mirror"
    MEAN_SUBTRACT = "mean"
    SCALE = "scale"


REQUIRED = {
    StageKind.DECODE: Width.BYTE,
    StageKind.CROP: Width.BYTE,
    StageKind.MIRROR: Width.BYTE,
    StageKind.MEAN_SUBTRACT: Width.SINGLE,
    StageKind.SCALE: Width.HALF,
}


class Placement(enum.Enum):
    HOST = "host"
    DEVICE = "device"


@dataclass(frozen=True)
class Stage:
    kind: StageKind
    placement: Placement = Placement.HOST
    out_h: int = 0
    out_w: int = 0
    mean: Optional[np.ndarray] = field(default=None, compare=False)
    factor: float = 1.0
    p: float = 0.5

    @property
    def required(self) -> Width:
        return REQUIRED[self.kind]


def decode() -> Stage:
    return Stage(StageKind.DECODE)


def crop(out_h: int, out_w: int) -> Stage:
    return Stage(StageKind.CROP, out_h=out_h, out_w=out_w)


def mirror(p: float = 0.5) -> Stage:
    return Stage(StageKind.MIRROR, p=p)


def mean_subtract(mean) -> Stage:
    return Stage(StageKind.MEAN_SUBTRACT, mean=np.asarray(mean, dtype=np.float32))


def scale(factor: float) -> Stage:
    return Stage(StageKind.SCALE, factor=factor)


def promotion_plan(stages: Sequence[Stage]) -> list[Width]:
    """Buffer width each stage receives; the last entry is the output width."""
    cur = Width.BYTE
    widths = []
    for st in stages:
        cur = max(cur, st.required)
        widths.append(cur)
    widths.append(cur)
    return widths


# -- per-sample randomness -------------------------------------------------------

def sample_seeds(seed: int, start: int, count: int) -> list[int]:
    """Seeds for samples ``start .. start+count`` of a stream."""
    return [splitmix64((seed ^ splitmix64(i)) & MASK64) for i in range(start, start + count)]


def _uniform(seed: int, stage_index: int, draw: int) -> float:
    x = splitmix64((seed ^ ((stage_index + 1) << 32 | draw)) & MASK64)
    return (x >> 11) * (1.0 / (1 << 53))


# -- stage kernels ------------------------------------------------------------------

def apply_stage(st: Stage, index: int, x: np.ndarray, width: Width, seed: int) -> np.ndarray:
    """Run one stage on one sample; ``x`` is converted to ``width`` first."""
    if x.dtype != width.dtype:
        x = x.astype(width.dtype)
    k = st.kind
    if k == StageKind.DECODE:
        if x.ndim != 3:
            raise DataloadError("decode expects an H x W x C sample")
        return np.ascontiguousarray(x.transpose(2, 0, 1))
    if k == StageKind.CROP:
        c, h, w = x.shape
        if st.out_h > h or st.out_w > w:
            raise DataloadError(f"crop {st.out_h}x{st.out_w} larger than image {h}x{w}")
        y0 = min(h - st.out_h, int(_uniform(seed, index, 0) * (h - st.out_h + 1)))
        x0 = min(w - st.out_w, int(_uniform(seed, index, 1) * (w - st.out_w + 1)))
        return np.ascontiguousarray(x[:, y0:y0 + st.out_h, x0:x0 + st.out_w])
    if k == StageKind.MIRROR:
        if _uniform(seed, index, 0) < st.p:
            return np.ascontiguousarray(x[:, :, ::-1])
        return x
    if k == StageKind.MEAN_SUBTRACT:
        mean = st.mean
        c = x.shape[0]
        if mean.size == c:
            mean = mean.reshape(c, 1, 1)
        elif mean.size == x.size:
            mean = mean.reshape(x.shape)
        else:
            raise DataloadError(f"mean of {mean.size} values does not fit a {x.shape} sample")
        return (x.astype(np.float32) - mean).astype(width.dtype)
    if k == StageKind.SCALE:
        with np.errstate(over="ignore"):
            return (x.astype(np.float32) * np.float32(st.factor)).astype(width.dtype)
    raise DataloadError(f"unknown stage {k}")  # pragma: no cover


def check_stages(stages: Sequence[Stage]):
    if stages and stages[0].kind != StageKind.DECODE:
        raise DataloadError("a non-empty pipeline must start with decode")
    if any(st.kind == StageKind.DECODE for st in stages[1:]):
        raise DataloadError("decode may appear only once")


def run_sample(stages: Sequence[Stage], sample: np.ndarray, seed: int) -> np.ndarray:
    widths = promotion_plan(stages)
    x = sample
    for i, st in enumerate(stages):
        x = apply_stage(st, i, x, widths[i], seed)
    return x


@dataclass
class PipelineConfig:
    stages: list[Stage]
    threads: int = 1
    host_cost: list[float] = field(default_factory=list)    # seconds per batch
    device_cost: list[float] = field(default_factory=list)
    transfer_cost: float = 0.0      # seconds per placement boundary crossing
    thread_overhead: float = 0.0    # seconds per extra host thread

    @property
    def placements(self) -> tuple[Placement, ...]:
        return tuple(st.placement for st in self.stages)

    def with_placements(self, placements: Sequence[Placement], threads: int) -> "PipelineConfig":
        stages = [replace(st, placement=p) for st, p in zip(self.stages, placements)]
        return replace(self, stages=stages, threads=threads)


def run_pipeline(config: PipelineConfig, samples: Sequence[np.ndarray],
                 seeds: Sequence[int]) -> np.ndarray:
    """Augment a batch; returns an N x (C*H*W) matrix in the final buffer width."""
    if len(seeds) != len(samples):
        raise DataloadError("one seed per sample is required")
    check_stages(config.stages)
    stages = config.stages
    if config.threads <= 1 or len(samples) <= 1:
        outs = [run_sample(stages, s, seed) for s, seed in zip(samples, seeds)]
    else:
        with ThreadPoolExecutor(config.threads) as ex:
            outs = list(ex.map(lambda a: run_sample(stages, *a), zip(samples, seeds)))
    width = promotion_plan(stages)[-1]
    if not outs:
        return np.empty((0, 0), dtype=width.dtype)
    return np.stack([o.reshape(-1) for o in outs])


# -- cost model and tuner ----------------------------------------------------------------

def modeled_latency(config: PipelineConfig, placements: Sequence[Placement] = None,
                    threads: Optional[int] = None) -> float:
    """Per-batch latency: host work split over threads, device work, crossings.

    The batch starts on the host; leaving it on the device at the end is free.
    """
    placements = config.placements if placements is None else placements
    threads = config.threads if threads is None else threads
    host = sum(c for c, p in zip(config.host_cost, placements) if p == Placement.HOST)
    dev = sum(c for c, p in zip(config.device_cost, placements) if p == Placement.DEVICE)
    crossings, where = 0, Placement.HOST
    for p in placements:
        if p != where:
            crossings += 1
            where = p
    return host / threads + config.thread_overhead * (threads - 1) + dev \
        + crossings * config.transfer_cost


def iteration_time(config: PipelineConfig, placements, threads, train_time: Optional[float]) -> float:
    """Pipeline latency, or the overlapped iteration time when the training
    step time is known: the slower of the two sides sets the pace."""
    lat = modeled_latency(config, placements, threads)
    return lat if train_time is None else max(lat, train_time)


def _tie_key(placements, threads):
    return threads, sum(p == Placement.DEVICE for p in placements)


def tune(config: PipelineConfig, max_threads: int,
         train_time: Optional[float] = None) -> PipelineConfig:
    """Coordinate descent from all-host with one thread.

    A move either changes the thread count or puts one contiguous run of
    stages on one side (a run of length one is a single-stage flip). Runs
    matter because moving two neighbours one at a time can cost two extra
    crossings where moving them together costs none. Each round takes the
    best move and the search stops when no move improves.

    With ``train_time`` the objective is the overlapped iteration time, so
    once the pipeline keeps up with training no extra threads or device
    stages are added.
    """
    n = len(config.stages)
    cur_p = [Placement.HOST] * n
    cur_t = 1
    cur = iteration_time(config, cur_p, cur_t, train_time)
    while True:
        best = None
        for i in range(n):
            for j in range(i + 1, n + 1):
                for side in (Placement.HOST, Placement.DEVICE):
                    cand = cur_p[:i] + [side] * (j - i) + cur_p[j:]
                    if cand != cur_p:
                        best = _better(best, (iteration_time(config, cand, cur_t, train_time), cand, cur_t))
        for t in range(1, max_threads + 1):
            if t != cur_t:
                best = _better(best, (iteration_time(config, cur_p, t, train_time), cur_p, t))
        if best is None or not best[0] < cur - 1e-12 * max(1.0, abs(cur)):
            return config.with_placements(cur_p, cur_t)
        cur, cur_p, cur_t = best


def _better(a, b):
    if a is None:
        return b
    if b[0] < a[0] or (b[0] == a[0] and _tie_key(b[1], b[2]) < _tie_key(a[1], a[2])):
        return b
    return a


def exhaustive_best(config: PipelineConfig, max_threads: int,
                    train_time: Optional[float] = None) -> tuple[float, list, int]:
    best = None
    for placements in itertools.product((Placement.HOST, Placement.DEVICE),
                                        repeat=len(config.stages)):
        for t in range(1, max_threads + 1):
            best = _better(best, (iteration_time(config, placements, t, train_time), list(placements), t))
    return best


def measure_costs(config: PipelineConfig, samples: Sequence[np.ndarray], seeds: Sequence[int],
                  device_speedup: Sequence[float], repeats: int = 3) -> PipelineConfig:
    """Time each stage on the host; device cost is host cost / speedup."""
    widths = promotion_plan(config.stages)
    host = []
    xs = list(samples)
    for i, st in enumerate(config.stages):
        best = float("inf")
        for _ in range(repeats):
            t0 = time.perf_counter()
            ys = [apply_stage(st, i, x, widths[i], s) for x, s in zip(xs, seeds)]
            best = min(best, time.perf_counter() - t0)
        host.append(best)
        xs = ys
    dev = [h / max(sp, 1e-12) for h, sp in zip(host, device_speedup)]
    return replace(config, host_cost=host, device_cost=dev)


def random_cost_table(rng: np.random.Generator, n_stages: int) -> PipelineConfig:
    """Synthetic tuning problem: host costs, device speedups, transfer costs."""
    kinds = [decode(), crop(1, 1), mirror(), mean_subtract([0.0]), scale(1.0)]
    host = rng.uniform(1.0, 10.0, n_stages)
    dev = host * rng.uniform(0.1, 3.0, n_stages)
    return PipelineConfig([kinds[i % len(kinds)] for i in range(n_stages)], 1,
                          list(host), list(dev), float(rng.uniform(0.0, 4.0)),
                          float(rng.uniform(0.0, 0.5)))


# -- files ------------------------------------------------------------------------

_SAMPLE_HEAD = struct.Struct("<III")


def write_sample(path, pixels_hwc: np.ndarray):
    h, w, c = pixels_hwc.shape
    Path(path).write_bytes(_SAMPLE_HEAD.pack(c, h, w) + np.ascontiguousarray(pixels_hwc, np.uint8).tobytes())


def read_sample(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _SAMPLE_HEAD.size:
        raise DataloadError(f"{path}: truncated sample header")
    c, h, w = _SAMPLE_HEAD.unpack_from(raw)
    body = raw[_SAMPLE_HEAD.size:]
    if len(body) != c * h * w:
        raise DataloadError(f"{path}: expected {c * h * w} pixel bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, c)


def read_mean(path) -> np.ndarray:
    return np.fromfile(path, dtype="<f4")


# -- prefetch -------------------------------------------------------------------------

@dataclass
class PrefetchStats:
    producer_idle: float = 0.0
    consumer_waits: list = field(default_factory=list)
    built: int = 0


class Prefetcher:
    """Double-buffered producer/consumer handoff.

    At most ``depth`` batches exist at once, counting the one the consumer
    holds; the producer builds the next batch while the consumer works on the
    current one. A producer error ends the stream after the good batches.
    """

    _END = object()

    def __init__(self, make_batch: Callable[[int], np.ndarray], n_batches: Optional[int] = None,
                 depth: int = 2):
        if depth < 2:
            raise DataloadError("prefetch depth must be at least 2")
        self._make = make_batch
        self._n = n_batches
        self._slots = threading.Semaphore(depth)
        self._q: queue.Queue = queue.Queue()
        self._holding = False
        self.stats = PrefetchStats()
        self._thread = threading.Thread(target=self._produce, daemon=True)
        self._thread.start()

    def _produce(self):
        for k in itertools.count():
            if self._n is not None and k >= self._n:
                break
            t0 = time.perf_counter()
            self._slots.acquire()
            self.stats.producer_idle += time.perf_counter() - t0
            try:
                batch = self._make(k)
            except StopIteration:
                break
            except BaseException as exc:
                self._q.put(exc)
                return
            self.stats.built += 1
            self._q.put(batch)
        self._q.put(self._END)

    def __iter__(self) -> Iterator[np.ndarray]:
        return self

    def __next__(self) -> np.ndarray:
        if self._holding:
            self._slots.release()
        t0 = time.perf_counter()
        item = self._q.get()
        self.stats.consumer_waits.append(time.perf_counter() - t0)
        if item is self._END:
            self._holding = False
            raise StopIteration
        if isinstance(item, BaseException):
            self._holding = False
            raise item
        self._holding = True
        return item


def prefetch_loop(config: PipelineConfig, source: Iterable[tuple[Sequence[np.ndarray], Sequence[int]]],
                  depth: int = 2) -> Prefetcher:
    """Stream augmented batches from ``source`` (an iterable of (samples, seeds))."""
    it = iter(source)

    def make(_k):
        samples, seeds = next(it)
        return run_pipeline(config, samples, seeds)

    return Prefetcher(make, None, depth)
