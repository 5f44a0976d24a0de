"""Command-line harness: verification, benchmarks, training demo, tuning, scaling."""

from __future__ import annotations

import argparse
import csv
import os
import sys
import time
from dataclasses import asdict, fields

import numpy as np

from . import config as cfgmod
from . import dataload, dnn, simulate, verify
from .config import ConfigError
from .core import GridMathError
from .session import Session
from .transport import Kind, Simulated

BENCH_FIELDS = ["experiment", "workers", "size", "seconds", "throughput", "control_bytes",
                "data_bytes", "pool_allocations", "pool_reuses", "seed", "config_hash", "status"]

STAGE_NAMES = {
    "decode": dataload.decode,
    "crop": lambda: dataload.crop(1, 1),
    "mirror": dataload.mirror,
    "mean-subtract": lambda: dataload.mean_subtract([0.0]),
    "scale": lambda: dataload.scale(1.0),
}


def default_workers() -> int:
    env = os.environ.get("GRIDMATH_WORKERS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError(f"GRIDMATH_WORKERS must be an integer, got {env!r}") from None
    return 1


def _backend(name: str, cfg: dict):
    name = (name or "inprocess").lower()
    if name in ("inprocess", "in-process"):
        return None
    if name == "simulated":
        return Simulated(cfgmod.cost_model(cfg))
    raise ConfigError(f"unknown backend {name!r} (inprocess or simulated)")


def _csv_out(path):
    return open(path, "w", newline="") if path else sys.stdout


# -- verify -------------------------------------------------------------------------

def cmd_verify(args) -> int:
    names = verify.select(args.suite)
    if not names:
        print(f"no suite matches {args.suite!r}; known: {', '.join(verify.SUITES)}", file=sys.stderr)
        return 2
    ok = verify.run(names, args.inject_layout_overlap)
    print("all suites passed" if ok else "FAILED")
    return 0 if ok else 1


# -- bench-gemm ---------------------------------------------------------------------

def _bench_row(size, p, backend, cfg, seed, chash):
    rng = np.random.default_rng(seed)
    row = dict(experiment="gemm", workers=p, size=f"{size}^3", seed=seed, config_hash=chash)
    try:
        with Session(p, backend=_backend(backend, cfg), deterministic=cfg.get("deterministic", True),
                     panel=cfg.get("panel", 256)) as s:
            a = s.create_matrix(size, size)
            b = s.create_matrix(size, size)
            c = s.create_matrix(size, size)
            a.set_data(rng.uniform(-1, 1, (size, size)))
            b.set_data(rng.uniform(-1, 1, (size, size)))
            stats0 = s.fabric.stats.snapshot()
            mark = s.fabric.trace.mark()
            t0 = time.perf_counter()
            s.gemm(a, b, c)
            wall = time.perf_counter() - t0
            secs = s.fabric.simulated_elapsed(mark) if backend == "simulated" else wall
            stats1 = s.fabric.stats.snapshot()
            pool = s.worker_stats()
        row.update(seconds=secs, throughput=2.0 * size ** 3 / secs if secs > 0 else float("inf"),
                   control_bytes=_delta(stats0, stats1, Kind.CONTROL),
                   data_bytes=_delta(stats0, stats1, Kind.DATA),
                   pool_allocations=sum(w["allocations_from_os"] for w in pool),
                   pool_reuses=sum(w["reuses"] for w in pool), status="ok")
    except MemoryError:
        row.update(status="out-of-memory")
    except GridMathError as exc:
        if "MemoryError" not in str(exc):
            raise
        row.update(status="out-of-memory")
    return row


def _delta(s0, s1, kind):
    return simulate._kind_bytes(s1, kind) - simulate._kind_bytes(s0, kind)


def cmd_bench_gemm(args) -> int:
    cfg = cfgmod.load(args.config) if args.config else {}
    sizes = args.sizes if args.sizes is not None else cfg.get("sizes", [])
    workers = args.workers or cfg.get("worker-counts") or [cfg.get("workers", default_workers())]
    backend = args.backend or cfg.get("backend", "inprocess")
    seed = cfg.get("seed", 0) if args.seed is None else args.seed
    for n in sizes:
        if n < 64:
            raise ConfigError(f"gemm sizes must be >= 64, got {n}")
    chash = cfgmod.config_hash({**cfg, "sizes": list(sizes), "worker-counts": list(workers),
                                "backend": backend, "seed": seed})
    out = _csv_out(args.out)
    w = csv.DictWriter(out, BENCH_FIELDS, restval="")
    w.writeheader()
    for n in sizes:
        for p in workers:
            w.writerow(_bench_row(n, p, backend, cfg, seed, chash))
            out.flush()
    if out is not sys.stdout:
        out.close()
    return 0


# -- train-demo ---------------------------------------------------------------------

def cmd_train_demo(args) -> int:
    cfg = cfgmod.load(args.config)
    if args.workers is not None:
        cfg["workers"] = args.workers
    if args.deterministic:
        cfg["deterministic"] = True
    if args.log:
        cfg["log"] = args.log
    workers = cfg.get("workers", default_workers())
    widths = cfg.get("widths", [64, 32, 10])
    batch = cfg.get("batch", 32)
    steps = cfg.get("steps", 20)
    seed = cfg.get("seed", 0)
    if "dataset" in cfg:
        ds = dnn.read_dataset(cfg["dataset"])
    else:
        ds = dnn.synthetic_digits(cfg.get("samples", batch * steps), widths[0], widths[-1], seed=seed)
    backend = cfg.get("backend", "inprocess")
    with Session(workers, backend=_backend(backend, cfg), deterministic=cfg.get("deterministic", True),
                 root_seed=seed, chunk_bytes=cfg.get("chunk-size", 1 << 20),
                 panel=cfg.get("panel", 256)) as s:
        st = dnn.build_network(s, dnn.mlp(widths), seed, batch=batch,
                               learning_rate=cfg.get("learning-rate", 0.05))
        rows = dnn.train(st, ds, steps, cfg.get("log"), simulated=backend == "simulated")
    if not cfg.get("log"):
        w = csv.writer(sys.stdout)
        w.writerow(["iteration", "loss", "elapsedSeconds", "fps"])
        for it, loss, el, fps in rows:
            w.writerow([it, repr(float(loss)), f"{el:.6f}", f"{fps:.3f}"])
    first, last = rows[0][1], rows[-1][1]
    print(f"config {cfgmod.config_hash(cfg)}: loss {first:.6f} -> {last:.6f} over {len(rows)} steps",
          file=sys.stderr)
    return 0


# -- tune-pipeline --------------------------------------------------------------------

def pipeline_from_config(cfg: dict) -> tuple[dataload.PipelineConfig, int]:
    names = cfg.get("stages")
    if not names:
        raise ConfigError("cost table needs a 'stages' line")
    try:
        stages = [STAGE_NAMES[n]() for n in names]
    except KeyError as exc:
        raise ConfigError(f"unknown stage {exc.args[0]!r}; known: {', '.join(STAGE_NAMES)}") from None
    host, device = cfg.get("host", []), cfg.get("device", [])
    if len(host) != len(stages) or len(device) != len(stages):
        raise ConfigError("'host' and 'device' need one cost per stage")
    pc = dataload.PipelineConfig(stages, 1, list(host), list(device), cfg.get("transfer", 0.0),
                                 cfg.get("thread-overhead", 0.0))
    return pc, cfg.get("max-threads", 8)


def cmd_tune_pipeline(args) -> int:
    cfg = cfgmod.load(args.cost_table)
    pc, max_threads = pipeline_from_config(cfg)
    tuned = dataload.tune(pc, max_threads, cfg.get("train-time"))
    names = cfg["stages"]
    print("stage,placement")
    for n, p in zip(names, tuned.placements):
        print(f"{n},{p.name.lower()}")
    print(f"threads,{tuned.threads}")
    print(f"latency,{dataload.modeled_latency(tuned)!r}")
    return 0


# -- simulate-scaling ----------------------------------------------------------------

def cmd_simulate_scaling(args) -> int:
    cfg = cfgmod.load(args.config) if args.config else cfgmod.load(cfgmod.SIMULATED_CFG)
    cost = cfgmod.cost_model(cfg)
    counts = args.workers or cfg.get("worker-counts", [1, 2, 4, 8, 16, 32, 64])
    size = (cfg.get("sizes") or [4096])[0]
    chash = cfgmod.config_hash(cfg)
    rows = []
    if args.experiment in ("gemm", "all"):
        rows += simulate.gemm_scaling(cost, size, counts, cfg.get("panel", 256))
    if args.experiment in ("train", "all"):
        rows += simulate.training_scaling(cost, counts, seed=cfg.get("seed", 0))
    out = _csv_out(args.out)
    names = [f.name for f in fields(simulate.ScalingRow)]
    w = csv.writer(out)
    w.writerow(names + ["config_hash"])
    for r in rows:
        d = asdict(r)
        w.writerow([d[n] for n in names] + [chash])
    if out is not sys.stdout:
        out.close()
    for exp in ("gemm", "train"):
        sel = [r for r in rows if r.experiment == exp]
        if len(sel) > 1:
            mono, dim = simulate.scaling_shape(sel)
            print(f"{exp}: monotone={mono} diminishing={dim}", file=sys.stderr)
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="gridmath", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    v = sub.add_parser("verify", help="run the self-check suites")
    v.add_argument("--suite", help="run only suites with this name or prefix (e.g. gemm)")
    v.add_argument("--inject-layout-overlap", action="store_true",
                   help="corrupt generated layouts so the layout suite must fail")
    v.set_defaults(func=cmd_verify)

    b = sub.add_parser("bench-gemm", help="time distributed GEMM, one CSV row per (size, P)")
    b.add_argument("--sizes", type=int, nargs="*", help="matrix sizes (>= 64); may be empty")
    b.add_argument("--workers", type=int, nargs="+", help="worker counts")
    b.add_argument("--backend", choices=["inprocess", "simulated"])
    b.add_argument("--seed", type=int)
    b.add_argument("--config", help="key=value file (sizes, worker-counts, alpha, beta, ...)")
    b.add_argument("--out", help="CSV path (default stdout)")
    b.set_defaults(func=cmd_bench_gemm)

    t = sub.add_parser("train-demo", help="train the MLP demo from a config file")
    t.add_argument("config")
    t.add_argument("--workers", type=int)
    t.add_argument("--deterministic", action="store_true")
    t.add_argument("--log", help="CSV log path (overrides the config)")
    t.set_defaults(func=cmd_train_demo)

    p = sub.add_parser("tune-pipeline", help="pick stage placements and thread count")
    p.add_argument("cost_table")
    p.set_defaults(func=cmd_tune_pipeline)

    s = sub.add_parser("simulate-scaling", help="strong scaling on the simulated fabric")
    s.add_argument("--config", help="cost model file (default: the pinned simulated.cfg)")
    s.add_argument("--workers", type=int, nargs="+")
    s.add_argument("--experiment", choices=["gemm", "train", "all"], default="all")
    s.add_argument("--out", help="CSV path (default stdout)")
    s.set_defaults(func=cmd_simulate_scaling)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (GridMathError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
