"""Acceptance suite: one PASS/FAIL line per criterion.

Run with ``pytest tests/test_acceptance.py -q`` (the lines appear in the
terminal summary) or directly with ``python3 tests/test_acceptance.py``.
"""

import sys
import tempfile
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

import make_frozen  # noqa: E402
import oracles  # noqa: E402
from gridmath import (ReplicationState, Session, checkpoint, dataload, dnn,  # noqa: E402
                      make_col_block_layout, make_grid_layout, make_row_block_layout,
                      make_single_tile_layout, simulate)
from gridmath import config as cfgmod  # noqa: E402
from gridmath.transport import MASTER, Kind  # noqa: E402

RESULTS: list[str] = []

# pinned thresholds
GEMM_CASES = 200
GEMM_MAX_DIM = 512
GEMM_REL_TOL = 1e-5
GEMM_BUDGET_S = 120.0
CONTROL_RATIO = 0.10
ROWCOLSUM_TOL = 1e-4
HALF_PARITY_PP = 1.0
HALF_SEEDS = 5
TUNER_TABLES = 100
TUNER_RATIO = 1.10
SCALING_BUDGET_S = 60.0
GRAD_SINGLE = 1e-3
GRAD_DOUBLE = 1e-7


def grid_shape(p):
    return {1: (1, 1), 2: (2, 1), 4: (2, 2), 6: (2, 3), 8: (2, 4)}.get(p)


def layout(kind, rows, cols, p):
    g = list(range(p))
    if kind == "row":
        return make_row_block_layout(rows, cols, g)
    if kind == "col":
        return make_col_block_layout(rows, cols, g)
    if kind == "single":
        return make_single_tile_layout(rows, cols, p - 1)
    pr, pc = grid_shape(p)
    return make_grid_layout(rows, cols, pr, pc, g)


def kinds_for(p):
    return ["row", "col", "single"] + (["grid"] if grid_shape(p) else [])


def put(s, v, lay=None, prec="single"):
    m = s.create_matrix(*v.shape, prec, lay)
    m.set_data(v)
    return m


def record(n, title, fn):
    t0 = time.perf_counter()
    try:
        ok, detail = fn()
    except Exception as exc:
        ok, detail = False, f"raised {type(exc).__name__}: {exc}"
    line = f"{'PASS' if ok else 'FAIL'} criterion {n:2d} {title}: {detail} [{time.perf_counter() - t0:.1f}s]"
    RESULTS.append(line)
    print(line)
    return ok, line


# -- 1 -------------------------------------------------------------------------------

PAIRS = [("row", "grid"), ("grid", "single"), ("single", "row"), ("grid", "grid"),
         ("col", "single"), ("row", "col"), ("single", "grid")]


def _dim(rng):
    # mostly moderate sizes, with the full range represented
    r = rng.random()
    if r < 0.1:
        return GEMM_MAX_DIM
    if r < 0.3:
        return int(rng.integers(1, 9))
    return int(rng.integers(1, GEMM_MAX_DIM + 1))


def crit_gemm_oracle():
    rng = np.random.default_rng(101)
    t0 = time.perf_counter()
    worst, crossed, seen_pairs = 0.0, 0, set()
    for case in range(GEMM_CASES):
        p = (1, 2, 4, 8)[case % 4]
        m, k, n = _dim(rng), _dim(rng), _dim(rng)
        ta, tb = bool(rng.integers(2)), bool(rng.integers(2))
        ka, kb = PAIRS[case % len(PAIRS)]
        seen_pairs.add((ka, kb))
        a_shape = (k, m) if ta else (m, k)
        b_shape = (n, k) if tb else (k, n)
        scale = float(rng.choice([0.5, 1.0, 4.0]))
        av = (rng.uniform(-scale, scale, a_shape)).astype(np.float32)
        bv = (rng.uniform(-scale, scale, b_shape)).astype(np.float32)
        with Session(p) as s:
            A = put(s, av, layout(ka, *a_shape, p))
            B = put(s, bv, layout(kb, *b_shape, p))
            C = s.create_matrix(m, n, layout=layout(kinds_for(p)[case % len(kinds_for(p))], m, n, p))
            s.gemm(A, B, C, trans_a=ta, trans_b=tb, deterministic=bool(case % 2))
            got = C.get_data().astype(np.float64)
        a64 = av.astype(np.float64)
        b64 = bv.astype(np.float64)
        a64 = a64.T if ta else a64
        b64 = b64.T if tb else b64
        ref = a64 @ b64
        if m * k * n <= 20000:
            # the float64 reference itself against exact-sum loops
            slow = np.array(oracles.gemm(a64.tolist(), b64.tolist()))
            if not np.allclose(ref, slow, rtol=1e-12, atol=1e-12):
                return False, f"case {case}: float64 reference disagrees with fsum loops"
            crossed += 1
        max_elt = max(np.abs(av).max(), np.abs(bv).max())
        tol = GEMM_REL_TOL * k * max_elt ** 2
        err = float(np.max(np.abs(got - ref)))
        worst = max(worst, err / tol)
        if err > tol:
            return False, f"case {case} (P={p}, {m}x{k}x{n}, {ka}/{kb}): error {err:.3g} > {tol:.3g}"
    elapsed = time.perf_counter() - t0
    ok = elapsed < GEMM_BUDGET_S and len(seen_pairs) >= 5
    return ok, (f"{GEMM_CASES} cases, {len(seen_pairs)} layout pairs, worst error/tolerance {worst:.3g}, "
                f"{crossed} references cross-checked, {elapsed:.1f}s (budget {GEMM_BUDGET_S:.0f}s)")


# -- 2 -------------------------------------------------------------------------------

WORKERS = (1, 2, 3, 4, 8)


def _variants(shape_a, shape_out):
    for p in WORKERS:
        for i, ka in enumerate(kinds_for(p)):
            ks = kinds_for(p)
            yield p, layout(ka, *shape_a, p), layout(ks[(i + 1) % len(ks)], *shape_out, p)


def _all_bitwise_equal(results):
    first = results[0]
    return all(r.tobytes() == first.tobytes() for r in results[1:])


def crit_layout_independence():
    inp = make_frozen.inputs()
    rng = np.random.default_rng(102)
    counts, bad = {}, []

    gemm_a = rng.standard_normal((37, 300)).astype(np.float32)
    gemm_b = rng.standard_normal((300, 29)).astype(np.float32)
    out = []
    for p, la, lc in _variants((37, 300), (37, 29)):
        for kb in kinds_for(p):
            with Session(p) as s:
                C = s.create_matrix(37, 29, layout=lc)
                s.gemm(put(s, gemm_a, la), put(s, gemm_b, layout(kb, 300, 29, p)), C, deterministic=True)
                out.append(C.get_data())
    counts["gemm"] = len(out)
    if not _all_bitwise_equal(out):
        bad.append("gemm")

    x = inp["sum_x"]
    rows, cols = [], []
    for p, la, lc in _variants((50, 70), (1, 70)):
        with Session(p) as s:
            r = s.create_matrix(50, 1, layout=layout("row", 50, 1, p))
            c = s.create_matrix(1, 70, layout=lc)
            s.add_row_col_sum(put(s, x, la), r, c, deterministic=True)
            rows.append(r.get_data())
            cols.append(c.get_data())
    counts["addRowColSum"] = len(rows)
    if not (_all_bitwise_equal(rows) and _all_bitwise_equal(cols)):
        bad.append("addRowColSum")

    out = []
    for p, la, _ in _variants((12, 9), (12, 9)):
        with Session(p) as s:
            m = put(s, inp["soft_x"], la)
            s.softmax_rows(m, deterministic=True)
            out.append(m.get_data())
    counts["softmaxRows"] = len(out)
    if not _all_bitwise_equal(out):
        bad.append("softmaxRows")

    out = []
    for p, la, ly in _variants((2, 192), (2, 256)):
        for kf in kinds_for(p):
            with Session(p) as s:
                y = s.create_matrix(2, 256, layout=ly)
                s.conv2d_forward(put(s, inp["conv_x"], la), put(s, inp["conv_f"], layout(kf, 4, 27, p)),
                                 y, (3, 8, 8), (3, 3), 1, 1, deterministic=True)
                out.append(y.get_data())
    counts["conv2dForward"] = len(out)
    if not _all_bitwise_equal(out):
        bad.append("conv2dForward")

    summary = ", ".join(f"{k} {v}" for k, v in counts.items())
    if bad:
        return False, f"not bitwise identical: {', '.join(bad)} ({summary} runs, P in {WORKERS})"
    return True, f"bitwise identical across layouts and P in {WORKERS} ({summary} runs)"


# -- 3 -------------------------------------------------------------------------------

def crit_metadata_cache():
    with Session(4) as s:
        x, y = s.create_matrix(16, 16), s.create_matrix(16, 16)
        x.set_data(np.ones((16, 16)))

        def pipeline():
            for _ in range(10):
                s.add(y, x)
                s.scale(y, 0.5)

        def ctl():
            return s.fabric.stats.totals(Kind.CONTROL).bytes

        c0 = ctl()
        for _ in range(100):
            pipeline()
        uncached = ctl() - c0
        c1 = ctl()
        s.begin_record()
        pipeline()
        pid = s.end_record()
        for _ in range(100):
            s.replay(pid)
        cached = ctl() - c1
    ratio = cached / uncached
    return ratio <= CONTROL_RATIO, (f"recording plus 100 replays used {cached} control bytes, "
                                     f"100 direct runs {uncached} ({ratio:.2%}, limit {CONTROL_RATIO:.0%})")


# -- 4 -------------------------------------------------------------------------------

FORWARD_LABELS = {"gemm", "relu", "softmax"}


def _replica_checks():
    rng = np.random.default_rng(104)
    n = 0
    for p in (1, 2, 3, 4, 8):
        for kind in kinds_for(p):
            for prec in ("half", "single", "double"):
                r, c = int(rng.integers(1, 60)), int(rng.integers(1, 60))
                with Session(p, chunk_bytes=int(rng.integers(16, 512))) as s:
                    m = put(s, rng.standard_normal((r, c)), layout(kind, r, c, p), prec)
                    before = s.fabric.stats.body_bytes()
                    h = s.replicate_async(m)
                    if s.wait(h) != ReplicationState.DONE:
                        return False, f"P={p} {kind} {prec}: {h.state}"
                    moved = s.fabric.stats.body_bytes() - before
                    if moved != (p - 1) * m.descriptor.nbytes:
                        return False, f"P={p} {kind} {prec}: moved {moved} bytes"
                    src = m.get_data()
                    for w in range(p):
                        if s.read_replica(m, w).tobytes() != src.tobytes():
                            return False, f"P={p} {kind} {prec}: replica on {w} differs"
                n += 1
    return True, f"{n} replications exact in content and bytes"


def _overlap_windows():
    widths, batch, p = (32, 24, 16, 4), 32, 4
    ds = dnn.synthetic_digits(batch * 8, widths[0], widths[-1], seed=1)
    with Session(p, chunk_bytes=256) as s:
        st = dnn.build_network(s, dnn.mlp(widths), 1, batch=batch)
        tr = s.fabric.trace
        for k in range(2):
            dnn.train_step(st, *ds.batch(k, batch))
        marks = []
        for k in range(2, 7):
            marks.append((tr.log("mark", MASTER, "step").seq, {q.matrix_id: q.version for q in st.parameters()}))
            dnn.train_step(st, *ds.batch(k, batch))
        events = list(tr.events)
    windows = checked = 0
    for mark, versions in marks:
        # these versions began replicating at the end of the previous step
        fwd = []
        for e in events:
            if e.seq <= mark or e.what != "compute":
                continue
            if e.info[1] not in FORWARD_LABELS:
                break
            fwd.append(e.seq)
        for mid, ver in versions.items():
            key = (mid, ver)
            starts = [e.seq for e in events if e.what == "repl_start" and e.info == key]
            ends = [e.seq for e in events if e.what == "repl_valid" and e.info == key]
            if not starts or len(ends) < p - 1:
                return False, 0, f"matrix {mid} v{ver}: incomplete window"
            lo, hi = min(starts), max(ends)
            windows += 1
            if any(lo < f < hi for f in fwd):
                checked += 1
    return checked == windows, windows, f"{checked}/{windows} steady-state windows contain forward compute"


def crit_replication():
    ok1, d1 = _replica_checks()
    ok2, _, d2 = _overlap_windows()
    return ok1 and ok2, f"{d1}; {d2}"


# -- 5 -------------------------------------------------------------------------------

def crit_pool():
    ds = dnn.synthetic_digits(64, 16, 4, seed=5)
    x, y = ds.batch(0, 16)
    with Session(4) as s:
        st = dnn.build_network(s, dnn.mlp([16, 12, 8, 4]), 5, batch=16)
        dnn.train_step(st, x, y)
        a0 = sum(w["allocations_from_os"] for w in s.worker_stats())
        r0 = sum(w["reuses"] for w in s.worker_stats())
        for _ in range(100):
            dnn.train_step(st, x, y)
        a1 = sum(w["allocations_from_os"] for w in s.worker_stats())
        r1 = sum(w["reuses"] for w in s.worker_stats())
    return a1 == a0, f"{a1 - a0} allocations from the OS and {r1 - r0} pool reuses over 100 iterations"


# -- 6 -------------------------------------------------------------------------------

def _trained(p, seed=13, steps=20):
    ds = dnn.synthetic_digits(320, 20, 5, seed=seed)
    with Session(p, deterministic=True) as s:
        st = dnn.build_network(s, dnn.mlp([20, 16, 5]), seed, batch=16)
        for k in range(steps):
            dnn.train_step(st, *ds.batch(k, 16))
        return b"".join(m.get_data().tobytes() for m in st.parameters())


def crit_reproducibility():
    base = _trained(1)
    if _trained(1) != base:
        return False, "two P=1 runs differ"
    for p in (2, 4):
        if _trained(p) != base:
            return False, f"P={p} weights differ from P=1"
    inp = make_frozen.inputs()
    x = inp["sum_x"]
    xs = x.astype(np.float32).astype(np.float64).tolist()
    want_r, want_c = np.array(oracles.row_sums(xs)), np.array(oracles.col_sums(xs))
    worst, outs = 0.0, []
    for _ in range(3):
        with Session(4, deterministic=False) as s:
            a = put(s, x, make_grid_layout(50, 70, 2, 2, range(4)))
            r = s.create_matrix(50, 1)
            c = s.create_matrix(1, 70, layout=make_col_block_layout(1, 70, range(4)))
            s.add_row_col_sum(a, r, c)
            rv, cv = r.get_data()[:, 0], c.get_data()[0]
        worst = max(worst, np.abs(rv - want_r).max(), np.abs(cv - want_c).max())
        outs.append(rv.tobytes() + cv.tobytes())
    varied = "varied" if len(set(outs)) > 1 else "did not vary"
    return worst <= ROWCOLSUM_TOL, (f"weights bitwise equal for reruns and P=1,2,4 after 20 steps; "
                                     f"fast row/col sums within {worst:.2g} of the oracle "
                                     f"(limit {ROWCOLSUM_TOL:g}), {varied} across 3 runs")


# -- 7 -------------------------------------------------------------------------------

def crit_half_parity():
    gaps, accs = [], []
    for seed in range(HALF_SEEDS):
        # one draw so the held-out rows share class prototypes with training
        full = dnn.synthetic_digits(1280 + 2000, 64, 10, seed=seed)
        train = dnn.Dataset(full.features[:1280], full.labels[:1280], 10)
        xt, yt = full.features[1280:], full.labels[1280:]
        with Session(2) as s:
            st = dnn.build_network(s, dnn.mlp([64, 48, 10]), seed, batch=32, learning_rate=0.1)
            for k in range(40):
                dnn.train_step(st, *train.batch(k, 32))
            single = float(np.mean(dnn.predict(st, xt) == yt))
            half = float(np.mean(dnn.infer_mixed_half(st, xt) == yt))
        gaps.append(abs(single - half) * 100)
        accs.append(single)
    ok = max(gaps) <= HALF_PARITY_PP and min(accs) > 0.5
    return ok, (f"{HALF_SEEDS} seeds, single-mode accuracy {min(accs):.1%}..{max(accs):.1%}, "
                f"largest gap {max(gaps):.2f} pp (limit {HALF_PARITY_PP} pp)")


# -- 8 -------------------------------------------------------------------------------

def crit_tuner():
    rng = np.random.default_rng(108)
    worst = 1.0
    for _ in range(TUNER_TABLES):
        cfg = dataload.random_cost_table(rng, int(rng.integers(1, 6)))
        mt = int(rng.integers(1, 9))
        tuned = dataload.tune(cfg, mt)
        best = oracles.pipeline_optimum(cfg.host_cost, cfg.device_cost, cfg.transfer_cost,
                                        cfg.thread_overhead, mt)
        worst = max(worst, dataload.modeled_latency(tuned) / best)
    return worst <= TUNER_RATIO, f"{TUNER_TABLES} tables, worst tuned/optimal {worst:.4f} (limit {TUNER_RATIO})"


# -- 9 -------------------------------------------------------------------------------

def crit_scaling():
    cfg = cfgmod.load(cfgmod.SIMULATED_CFG)
    cost = cfgmod.cost_model(cfg)
    counts = cfg["worker-counts"]
    size = cfg["sizes"][0]
    t0 = time.perf_counter()
    gemm = simulate.gemm_scaling(cost, size, counts)
    train = simulate.training_scaling(cost, counts)
    elapsed = time.perf_counter() - t0
    g_mono, g_dim = simulate.scaling_shape(gemm)
    t_mono, t_dim = simulate.scaling_shape(train)
    ok = g_mono and g_dim and t_mono and t_dim and elapsed < SCALING_BUDGET_S and counts[-1] == 64
    return ok, (f"P={counts[0]}..{counts[-1]}: gemm monotone={g_mono} diminishing={g_dim} "
                f"({gemm[0].throughput:.3g}->{gemm[-1].throughput:.3g}), training monotone={t_mono} "
                f"diminishing={t_dim} ({train[0].throughput:.3g}->{train[-1].throughput:.3g}), "
                f"{elapsed:.1f}s to simulate (budget {SCALING_BUDGET_S:.0f}s)")


# -- 10 ------------------------------------------------------------------------------

def crit_gradient():
    widths = [8, 12, 6]
    n_params = sum(a * b + b for a, b in zip(widths, widths[1:]))
    ds = dnn.synthetic_digits(16, widths[0], widths[-1], seed=10)
    errs = {}
    for prec in ("single", "double"):
        with Session(3) as s:
            st = dnn.build_network(s, dnn.mlp(widths), 10, batch=16, precision=prec)
            errs[prec] = dnn.gradient_check(st, *ds.batch(0, 16), epsilon=1e-5)
    ok = n_params <= 500 and errs["single"] <= GRAD_SINGLE and errs["double"] <= GRAD_DOUBLE
    return ok, (f"{n_params} parameters, max relative error {errs['single']:.2g} single "
                f"(limit {GRAD_SINGLE:g}), {errs['double']:.2g} double (limit {GRAD_DOUBLE:g})")


# -- 11 ------------------------------------------------------------------------------

def crit_checkpoint():
    rng = np.random.default_rng(111)
    with tempfile.TemporaryDirectory() as d:
        path = Path(d) / "state.ck"
        want = {}
        with Session(4, root_seed=21) as s:
            for i, (prec, kind) in enumerate([("half", "grid"), ("single", "row"), ("double", "col"),
                                               ("single", "single"), ("double", "grid")]):
                r, c = int(rng.integers(1, 40)), int(rng.integers(1, 40))
                m = put(s, rng.standard_normal((r, c)) * 10, layout(kind, r, c, 4), prec)
                for _ in range(i):
                    s.scale(m, 1.5)
                want[m.matrix_id] = (m.get_data().tobytes(), m.version, m.descriptor.precision)
            s.checkpoint(path)
        for p in (4, 1, 2, 3, 8):
            with checkpoint.restore(path, p) as r:
                if r.root_seed != 21:
                    return False, f"P={p}: root seed lost"
                for mid, (raw, ver, prec) in want.items():
                    d_ = r.descriptor(mid)
                    if r.get_data(mid).tobytes() != raw or d_.version != ver or d_.precision != prec:
                        return False, f"P={p}: matrix {mid} differs"
    return True, f"{len(want)} matrices bitwise identical after restore at P=4,1,2,3,8"


CRITERIA = [
    (1, "gemm matches float64 oracle", crit_gemm_oracle),
    (2, "kernels independent of layout and P", crit_layout_independence),
    (3, "recorded pipelines cut control traffic", crit_metadata_cache),
    (4, "replication exact and overlapped", crit_replication),
    (5, "no OS allocations after warmup", crit_pool),
    (6, "reproducible training", crit_reproducibility),
    (7, "mixed half inference parity", crit_half_parity),
    (8, "tuner near exhaustive optimum", crit_tuner),
    (9, "simulated strong-scaling shape", crit_scaling),
    (10, "gradients match finite differences", crit_gradient),
    (11, "checkpoint round trip", crit_checkpoint),
]


@pytest.mark.parametrize("n,title,fn", CRITERIA, ids=[f"c{n:02d}" for n, _, _ in CRITERIA])
def test_criterion(n, title, fn):
    ok, line = record(n, title, fn)
    assert ok, line


if __name__ == "__main__":
    results = [record(n, title, fn)[0] for n, title, fn in CRITERIA]
    print(f"{sum(results)}/{len(results)} criteria passed")
    sys.exit(0 if all(results) else 1)
