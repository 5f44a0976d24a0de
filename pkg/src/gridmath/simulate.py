"""Strong-scaling studies on the simulated fabric.

Two fixed problems are swept over worker counts: a large GEMM whose traffic
and compute come straight from its plan (no data is materialized), and real
training steps of a fixed-batch MLP whose trace is recorded by the fabric.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import MatrixDescriptor, Precision, make_col_block_layout, make_row_block_layout
from .planning import gemm_plan, gemm_trace_events
from .transport import (CostModel, Event, Kind, Simulated, create_fabric, max_frame_size,
                        simulate_elapsed)


@dataclass
class ScalingRow:
    experiment: str
    workers: int
    size: str
    seconds: float
    throughput: float
    control_bytes: int = 0
    data_bytes: int = 0


def gemm_descriptors(size: int, workers: int, precision=Precision.SINGLE):
    """A and C row-block, B column-block over ``workers`` workers."""
    group = list(range(workers))
    a = MatrixDescriptor(1, size, size, precision, make_row_block_layout(size, size, group))
    b = MatrixDescriptor(2, size, size, precision, make_col_block_layout(size, size, group))
    c = MatrixDescriptor(3, size, size, precision, make_row_block_layout(size, size, group))
    return a, b, c


def gemm_events(size: int, workers: int, panel: int = 256, precision=Precision.SINGLE) -> list[Event]:
    a, b, c = gemm_descriptors(size, workers, precision)
    plan = gemm_plan(a, b, c, False, False, panel)
    raw = gemm_trace_events(plan, precision.nbytes, precision.nbytes, max_frame_size())
    return [Event(i, what, ep, info) for i, (what, ep, info) in enumerate(raw)]


def gemm_scaling(cost: CostModel, size: int, worker_counts: Sequence[int],
                 panel: int = 256) -> list[ScalingRow]:
    rows = []
    for p in worker_counts:
        events = gemm_events(size, p, panel)
        t = simulate_elapsed(events, cost, range(p))
        data = sum(ev.info[2] for ev in events if ev.what == "send")
        rows.append(ScalingRow("gemm", p, f"{size}^3", t, 2.0 * size ** 3 / t if t > 0 else float("inf"),
                               0, data))
    return rows


def training_scaling(cost: CostModel, worker_counts: Sequence[int],
                     widths: Sequence[int] = (512, 512, 512, 64), batch: int = 512,
                     seed: int = 0, warmup: int = 1, steps: int = 1) -> list[ScalingRow]:
    """Throughput (samples per virtual second) of steady-state training steps."""
    from . import dnn
    from .session import Session

    ds = dnn.synthetic_digits(batch * (warmup + steps), widths[0], widths[-1], seed=seed)
    rows = []
    for p in worker_counts:
        fabric = create_fabric(p, Simulated(cost))
        with Session(fabric, deterministic=False) as s:
            st = dnn.build_network(s, dnn.mlp(widths), seed, batch=batch, learning_rate=0.01)
            for k in range(warmup):
                dnn.train_step(st, *ds.batch(k, batch))
            mark = fabric.trace.mark()
            before = fabric.stats.snapshot()
            for k in range(warmup, warmup + steps):
                dnn.train_step(st, *ds.batch(k, batch))
            t = fabric.simulated_elapsed(mark)
            after = fabric.stats.snapshot()
        ctl = _kind_bytes(after, Kind.CONTROL) - _kind_bytes(before, Kind.CONTROL)
        data = _kind_bytes(after, Kind.DATA) - _kind_bytes(before, Kind.DATA)
        rows.append(ScalingRow("train", p, "x".join(map(str, widths)) + f"/b{batch}", t,
                               steps * batch / t, ctl, data))
    return rows


def _kind_bytes(snap: dict, kind: Kind) -> int:
    return sum(b for (src, dst, k), (_, b) in snap["sent"].items() if k == int(kind))


def scaling_shape(rows: Sequence[ScalingRow]) -> tuple[bool, bool]:
    """(throughput non-decreasing, marginal gain per added worker strictly decreasing)."""
    p = np.array([r.workers for r in rows], dtype=float)
    t = np.array([r.throughput for r in rows])
    gains = np.diff(t) / np.diff(p)
    return bool(np.all(np.diff(t) >= 0)), bool(np.all(np.diff(gains) < 0))
