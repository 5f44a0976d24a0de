"""Self-check suites run by ``gridmath verify``.

Each suite compares library results against a float64 numpy reference or an
exhaustive search and returns (passed, detail). They are smaller than the
pytest suite so a full run stays well under a minute.
"""

from __future__ import annotations

import tempfile
import time
from pathlib import Path
from typing import Callable

import numpy as np

from . import checkpoint, dataload, dnn
from .core import (Layout, TileExtent, make_col_block_layout, make_grid_layout,
                   make_row_block_layout, make_single_tile_layout, validate_layout)
from .session import ReplicationState, Session
from .transport import Kind, Message, create_fabric


def _layouts(rows, cols, p):
    g = list(range(p))
    out = [make_row_block_layout(rows, cols, g), make_col_block_layout(rows, cols, g),
           make_single_tile_layout(rows, cols, p - 1)]
    if p >= 4 and p % 2 == 0:
        out.append(make_grid_layout(rows, cols, 2, p // 2, g))
    return out


def suite_layout(inject_overlap: bool = False):
    rng = np.random.default_rng(1)
    for _ in range(40):
        rows, cols, p = int(rng.integers(1, 40)), int(rng.integers(1, 40)), int(rng.integers(1, 9))
        for lay in _layouts(rows, cols, p):
            if inject_overlap:
                e, w = lay.tiles[0]
                lay = Layout(list(lay.tiles) + [(TileExtent(e.row_start, 1, e.col_start, 1), w)])
            v = validate_layout(rows, cols, lay, range(p))
            if v is not None:
                return False, f"{rows}x{cols} P={p}: {v.kind}: {v.detail}"
    bad = Layout([(TileExtent(0, 2, 0, 2), 0), (TileExtent(1, 1, 1, 1), 0)])
    if validate_layout(2, 2, bad) is None:
        return False, "overlap not detected"
    gap = Layout([(TileExtent(0, 1, 0, 2), 0)])
    if validate_layout(2, 2, gap) is None:
        return False, "gap not detected"
    return True, "generated layouts sound, faults detected"


def suite_transport(_=False):
    fab = create_fabric(2)
    try:
        for k in range(50):
            fab.send(Message(Kind.DATA, 0, 1, k.to_bytes(4, "little"), 7))
        got = [int.from_bytes(fab.recv(1, timeout=5).payload, "little") for _ in range(50)]
        if got != list(range(50)):
            return False, "per-link order not preserved"
        tot = fab.stats.totals(Kind.DATA)
        if (tot.messages, tot.bytes) != (50, 200):
            return False, f"stats {tot}"
    finally:
        fab.close()
    return True, "fifo and counters ok"


def suite_gemm_oracle(_=False):
    rng = np.random.default_rng(2)
    worst = 0.0
    for case in range(24):
        p = int(rng.choice([1, 2, 4]))
        m, k, n = (int(x) for x in rng.integers(1, 96, 3))
        ta, tb = bool(rng.integers(2)), bool(rng.integers(2))
        with Session(p) as s:
            a_shape = (k, m) if ta else (m, k)
            b_shape = (n, k) if tb else (k, n)
            av = rng.uniform(-1, 1, a_shape)
            bv = rng.uniform(-1, 1, b_shape)
            la = _layouts(*a_shape, p)[case % 3]
            lb = _layouts(*b_shape, p)[(case + 1) % 3]
            a = s.create_matrix(*a_shape, layout=la)
            b = s.create_matrix(*b_shape, layout=lb)
            c = s.create_matrix(m, n)
            a.set_data(av)
            b.set_data(bv)
            s.gemm(a, b, c, trans_a=ta, trans_b=tb, deterministic=bool(case % 2))
            ref = (av.T if ta else av) @ (bv.T if tb else bv)
            err = float(np.max(np.abs(c.get_data() - ref))) if ref.size else 0.0
            tol = 1e-5 * k * max(np.abs(av).max(initial=0), np.abs(bv).max(initial=0)) ** 2
            worst = max(worst, err / tol if tol else 0.0)
            if err > tol:
                return False, f"case {case}: error {err:.3g} > {tol:.3g}"
    return True, f"24 cases, worst error/tolerance {worst:.3g}"


def suite_gemm_layout_independence(_=False):
    rng = np.random.default_rng(3)
    av = rng.standard_normal((37, 300)).astype(np.float32)
    bv = rng.standard_normal((300, 29)).astype(np.float32)
    results = []
    for p in (1, 2, 4):
        for la in _layouts(37, 300, p):
            with Session(p) as s:
                a = s.create_matrix(37, 300, layout=la)
                b = s.create_matrix(300, 29, layout=_layouts(300, 29, p)[1])
                c = s.create_matrix(37, 29, layout=_layouts(37, 29, p)[-1])
                a.set_data(av)
                b.set_data(bv)
                s.gemm(a, b, c, deterministic=True)
                results.append(c.get_data())
    same = all(np.array_equal(results[0], r) for r in results[1:])
    return same, f"{len(results)} layout/P combinations {'identical' if same else 'differ'}"


def suite_kernels(_=False):
    rng = np.random.default_rng(4)
    xv = rng.standard_normal((23, 17))
    with Session(4) as s:
        x = s.create_matrix(23, 17, layout=make_grid_layout(23, 17, 2, 2, range(4)))
        r = s.create_matrix(23, 1)
        c = s.create_matrix(1, 17, layout=make_col_block_layout(1, 17, range(4)))
        x.set_data(xv)
        s.add_row_col_sum(x, r, c)
        xs = xv.astype(np.float32).astype(np.float64)
        if np.max(np.abs(r.get_data()[:, 0] - xs.sum(1))) > 1e-4:
            return False, "row sums"
        if np.max(np.abs(c.get_data()[0] - xs.sum(0))) > 1e-4:
            return False, "column sums"
        s.softmax_rows(x)
        e = np.exp(xs - xs.max(1, keepdims=True))
        if np.max(np.abs(x.get_data() - e / e.sum(1, keepdims=True))) > 1e-6:
            return False, "softmax"
    return True, "row/col sums and softmax match float64"


def suite_replication(_=False):
    p = 4
    with Session(p, chunk_bytes=256) as s:
        m = s.create_matrix(40, 30)
        v = np.random.default_rng(5).standard_normal((40, 30)).astype(np.float32)
        m.set_data(v)
        before = s.fabric.stats.body_bytes()
        h = s.replicate_sync(m)
        moved = s.fabric.stats.body_bytes() - before
        if h.state != ReplicationState.DONE:
            return False, f"state {h.state}"
        for w in range(p):
            if not np.array_equal(s.read_replica(m, w), v):
                return False, f"replica on worker {w} differs"
        want = (p - 1) * v.nbytes
        if moved != want:
            return False, f"moved {moved} bytes, expected {want}"
    return True, "replicas equal, byte count exact"


def suite_metadata_cache(_=False):
    with Session(4) as s:
        x = s.create_matrix(16, 16)
        y = s.create_matrix(16, 16)
        x.set_data(np.ones((16, 16)))

        def pipeline():
            for _ in range(10):
                s.add(y, x)
                s.scale(y, 0.5)

        def ctl():
            return s.fabric.stats.totals(Kind.CONTROL).bytes

        c0 = ctl()
        for _ in range(20):
            pipeline()
        uncached = (ctl() - c0) / 20
        s.begin_record()
        pipeline()
        pid = s.end_record()
        c1 = ctl()
        for _ in range(20):
            s.replay(pid)
        cached = (ctl() - c1) / 20
    ratio = cached / uncached
    return ratio <= 0.10, f"replay control bytes {ratio:.1%} of uncached"


def suite_pool(_=False):
    ds = dnn.synthetic_digits(64, 16, 4, seed=1)
    with Session(2) as s:
        st = dnn.build_network(s, dnn.mlp([16, 12, 4]), 1, batch=16, learning_rate=0.05)
        dnn.train_step(st, *ds.batch(0, 16))
        a0 = sum(w["allocations_from_os"] for w in s.worker_stats())
        for k in range(1, 21):
            dnn.train_step(st, *ds.batch(k % 4, 16))
        a1 = sum(w["allocations_from_os"] for w in s.worker_stats())
    return a1 == a0, f"{a1 - a0} allocations after warmup"


def _train(p, seed=3, steps=4):
    ds = dnn.synthetic_digits(64, 16, 4, seed=seed)
    with Session(p, deterministic=True) as s:
        st = dnn.build_network(s, dnn.mlp([16, 12, 4]), seed, batch=16, learning_rate=0.05)
        losses = [dnn.train_step(st, *ds.batch(k, 16)) for k in range(steps)]
        return losses, [w.get_data() for w in st.weights]


def suite_reproducibility(_=False):
    l1, w1 = _train(1)
    for p in (2, 4):
        lp, wp = _train(p)
        if lp != l1 or not all(np.array_equal(a, b) for a, b in zip(w1, wp)):
            return False, f"P={p} differs from P=1"
    return True, "losses and weights bitwise equal for P=1,2,4"


def suite_checkpoint(_=False):
    with tempfile.TemporaryDirectory() as d:
        path = Path(d) / "ck.bin"
        v = np.random.default_rng(6).standard_normal((21, 13))
        with Session(4) as s:
            m = s.create_matrix(21, 13, "double")
            m.set_data(v)
            s.checkpoint(path)
        with checkpoint.restore(path, 2) as s2:
            got = s2.get_data(m.matrix_id)
    return bool(np.array_equal(got, v)), "restored at P=2"


def suite_tuner(_=False):
    rng = np.random.default_rng(7)
    worst = 1.0
    for _ in range(40):
        cfg = dataload.random_cost_table(rng, int(rng.integers(1, 6)))
        mt = int(rng.integers(1, 9))
        tuned = dataload.tune(cfg, mt)
        best = dataload.exhaustive_best(cfg, mt)[0]
        worst = max(worst, dataload.modeled_latency(tuned) / best)
    return worst <= 1.10, f"worst tuned/optimal {worst:.4f}"


def suite_gradient(_=False):
    ds = dnn.separable_toy(8, 4, seed=2)
    with Session(2) as s:
        st = dnn.build_network(s, dnn.mlp([4, 6, 3]), 2, batch=8, learning_rate=0.1,
                               precision="double")
        err = dnn.gradient_check(st, *ds.batch(0, 8), epsilon=1e-5)
    return err <= 1e-7, f"max relative error {err:.3g} (double)"


SUITES: dict[str, Callable] = {
    "layout": suite_layout,
    "transport": suite_transport,
    "gemm-oracle": suite_gemm_oracle,
    "gemm-layout-independence": suite_gemm_layout_independence,
    "kernels": suite_kernels,
    "replication": suite_replication,
    "metadata-cache": suite_metadata_cache,
    "pool": suite_pool,
    "reproducibility": suite_reproducibility,
    "checkpoint": suite_checkpoint,
    "tuner": suite_tuner,
    "gradient": suite_gradient,
}


def select(prefix=None) -> list[str]:
    if not prefix:
        return list(SUITES)
    return [n for n in SUITES if n == prefix or n.startswith(prefix + "-")]


def run(names, inject_layout_overlap=False, out=print) -> bool:
    ok_all = True
    for name in names:
        t0 = time.perf_counter()
        try:
            ok, detail = SUITES[name](inject_layout_overlap)
        except Exception as exc:  # a crashing suite is a failing suite
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        out(f"{'PASS' if ok else 'FAIL'} {name} ({time.perf_counter() - t0:.1f}s) {detail}")
        ok_all &= ok
    return ok_all
