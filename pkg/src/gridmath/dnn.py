"""Hybrid-parallel MLP trainer built on the session API.

Weights and biases are split by columns across the workers (model
parallelism) and replicated before each forward pass; activations are split
by batch rows (data parallelism). After the SGD update every parameter starts
an asynchronous replication that the next forward pass consumes, so transfers
overlap with forward compute.
"""

from __future__ import annotations

import csv
import enum
import logging
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import (GridMathError, Precision, make_col_block_layout, make_row_block_layout)
from .kernels import MASK64, splitmix64
from .session import DistMatrix, ReplicationState, Session

log = logging.getLogger(__name__)


class LayerKind(enum.Enum):
    FULLY_CONNECTED = "fc"
    RELU = "relu"
    SOFTMAX_LOSS = "softmax_loss"


@dataclass(frozen=True)
class LayerSpec:
    kind: LayerKind
    n_in: int = 0
    n_out: int = 0


def mlp(widths: Sequence[int]) -> list[LayerSpec]:
    """FC/ReLU stack ending in softmax loss, e.g. mlp([784, 256, 64, 10])."""
    specs = []
    for i, (a, b) in enumerate(zip(widths, widths[1:])):
        specs.append(LayerSpec(LayerKind.FULLY_CONNECTED, a, b))
        if i < len(widths) - 2:
            specs.append(LayerSpec(LayerKind.RELU))
    specs.append(LayerSpec(LayerKind.SOFTMAX_LOSS))
    return specs


def widths_of(specs: Sequence[LayerSpec]) -> list[int]:
    """Check that specs compose and return the layer widths."""
    fcs = [s for s in specs if s.kind == LayerKind.FULLY_CONNECTED]
    if not fcs or specs[-1].kind != LayerKind.SOFTMAX_LOSS:
        raise GridMathError("network needs fully connected layers and a final softmax loss")
    widths = [fcs[0].n_in]
    prev = None
    for s in specs[:-1]:
        if s.kind == LayerKind.FULLY_CONNECTED:
            if s.n_in != widths[-1] or s.n_in < 1 or s.n_out < 1:
                raise GridMathError(f"layer {s.n_in}->{s.n_out} does not follow width {widths[-1]}")
            if prev is not None and prev != LayerKind.RELU:
                raise GridMathError("consecutive fully connected layers need a ReLU between them")
            widths.append(s.n_out)
        elif s.kind == LayerKind.RELU:
            if prev != LayerKind.FULLY_CONNECTED:
                raise GridMathError("ReLU must follow a fully connected layer")
        else:
            raise GridMathError("softmax loss must be the last layer")
        prev = s.kind
    if prev != LayerKind.FULLY_CONNECTED:
        raise GridMathError("the last hidden block must be fully connected")
    return widths


def init_stream(seed: int, what: int) -> int:
    return splitmix64((seed ^ splitmix64(what)) & MASK64)


@dataclass
class TrainState:
    session: Session
    widths: list[int]
    batch: int
    learning_rate: float
    precision: Precision
    weights: list[DistMatrix]
    biases: list[DistMatrix]
    grads_w: list[DistMatrix]
    grads_b: list[DistMatrix]
    acts: list[DistMatrix]        # acts[0] is the input batch, acts[l] the layer-l output
    deltas: list[DistMatrix]      # deltas[l]: gradient w.r.t. layer-l pre-activation
    labels: DistMatrix            # one-hot
    ones: DistMatrix
    row_acc: DistMatrix
    col_acc: DistMatrix
    row_scratch: DistMatrix
    masked: DistMatrix
    iteration: int = 0
    pipelines: dict = field(default_factory=dict)
    handles: list = field(default_factory=list)
    record: bool = True

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def parameters(self) -> list[DistMatrix]:
        return [m for pair in zip(self.weights, self.biases) for m in pair]


def build_network(session: Session, specs: Sequence[LayerSpec], seed: int, *, batch: int,
                  learning_rate: float = 0.1, precision="single",
                  record: bool = True) -> TrainState:
    widths = widths_of(specs)
    prec = Precision.parse(precision)
    group = session.group
    s = session
    session.distribute_seeds(seed)

    def rows(n, cols):
        return s.create_matrix(n, cols, prec, make_row_block_layout(n, cols, group))

    weights, biases, gw, gb = [], [], [], []
    for l, (a, b) in enumerate(zip(widths, widths[1:])):
        w = s.create_matrix(a, b, prec, make_col_block_layout(a, b, group))
        bias = s.create_matrix(1, b, prec, make_col_block_layout(1, b, group))
        bound = 1.0 / np.sqrt(a)
        s.fill_uniform(w, init_stream(seed, 2 * l), -bound, bound)
        s.fill_uniform(bias, init_stream(seed, 2 * l + 1), -bound, bound)
        weights.append(w)
        biases.append(bias)
        gw.append(s.create_matrix(a, b, prec, make_col_block_layout(a, b, group)))
        gb.append(s.create_matrix(1, b, prec, make_col_block_layout(1, b, group)))
    acts = [rows(batch, wd) for wd in widths]
    deltas = [None] + [rows(batch, wd) for wd in widths[1:]]
    ones = rows(batch, 1)
    s.fill(ones, 1.0)
    state = TrainState(
        s, widths, batch, learning_rate, prec, weights, biases, gw, gb, acts, deltas,
        labels=rows(batch, widths[-1]), ones=ones, row_acc=rows(batch, 1),
        col_acc=s.create_matrix(1, widths[-1], prec, make_col_block_layout(1, widths[-1], group)),
        row_scratch=rows(batch, 1), masked=rows(batch, widths[-1]), record=record)
    for p in state.parameters():
        s.replicate_sync(p)
    return state


def one_hot(labels: np.ndarray, classes: int) -> np.ndarray:
    out = np.zeros((len(labels), classes))
    out[np.arange(len(labels)), np.asarray(labels, dtype=np.int64)] = 1.0
    return out


# -- step pieces --------------------------------------------------------------------

def _forward(st: TrainState):
    s = st.session
    for l in range(st.n_layers):
        z = st.acts[l + 1]
        s.gemm(st.acts[l], st.weights[l], z, replica_b=True)
        s.gemm(st.ones, st.biases[l], z, beta=1.0, replica_b=True)
        if l < st.n_layers - 1:
            s.relu(z)
        else:
            s.softmax_rows(z)


def _loss_ops(st: TrainState):
    s = st.session
    s.fill(st.row_acc, 0.0)
    s.fill(st.col_acc, 0.0)
    s.copy(st.masked, st.acts[-1])
    s.mul(st.masked, st.labels)
    s.add_row_col_sum(st.masked, st.row_acc, st.col_acc)


def _backward(st: TrainState):
    s = st.session
    L = st.n_layers
    dz = st.deltas[L]
    s.copy(dz, st.acts[L])
    s.sub(dz, st.labels)
    s.scale(dz, 1.0 / st.batch)
    for l in range(L, 0, -1):
        dz = st.deltas[l]
        s.gemm(st.acts[l - 1], dz, st.grads_w[l - 1], trans_a=True)
        s.fill(st.grads_b[l - 1], 0.0)
        s.add_row_col_sum(dz, st.row_scratch, st.grads_b[l - 1])
        if l > 1:
            prev = st.deltas[l - 1]
            s.gemm(dz, st.weights[l - 1], prev, trans_b=True, replica_b=True)
            s.relu_grad(st.acts[l - 1], prev)


def _update(st: TrainState):
    s = st.session
    for l in range(st.n_layers - 1, -1, -1):
        s.axpy(-st.learning_rate, st.grads_w[l], st.weights[l])
        s.axpy(-st.learning_rate, st.grads_b[l], st.biases[l])


def _run_recorded(st: TrainState, name: str, fn):
    s = st.session
    if not st.record:
        fn(st)
        return
    pid = st.pipelines.get(name)
    if pid is None:
        s.begin_record()
        try:
            fn(st)
        finally:
            st.pipelines[name] = s.end_record()
    else:
        s.replay(pid)


def _await_replicas(st: TrainState):
    for h in st.handles:
        state = st.session.wait(h)
        if state != ReplicationState.DONE:
            raise GridMathError(f"parameter replication failed for matrix {h.matrix_id}: {h.errors}")
    st.handles = []


def _load(st: TrainState, x: np.ndarray, labels: np.ndarray):
    x = np.asarray(x)
    if x.shape != (st.batch, st.widths[0]):
        raise GridMathError(f"batch must be {st.batch}x{st.widths[0]}, got {x.shape}")
    if len(labels) != st.batch:
        raise GridMathError("batch rows and label count differ")
    st.acts[0].set_data(x)
    st.labels.set_data(one_hot(labels, st.widths[-1]))


def _loss_value(st: TrainState) -> float:
    picked = st.row_acc.get_data().astype(np.float64)[:, 0]
    with np.errstate(divide="ignore"):
        return float(-np.mean(np.log(picked)))


def train_step(st: TrainState, x: np.ndarray, labels: np.ndarray) -> float:
    """One SGD step; returns the loss of the batch before the update."""
    _load(st, x, labels)
    _run_recorded(st, "forward", _forward)
    # the replicas started after the previous update were consumed by the
    # forward pass; collect their completions now
    _await_replicas(st)
    _run_recorded(st, "loss", _loss_ops)
    loss = _loss_value(st)
    _run_recorded(st, "backward", _backward)
    _run_recorded(st, "update", _update)
    st.handles = [st.session.replicate_async(p) for p in st.parameters()]
    st.iteration += 1
    return loss


def gradients(st: TrainState, x: np.ndarray, labels: np.ndarray):
    """Analytic gradients from the distributed network: (loss, [dW], [db])."""
    _load(st, x, labels)
    _forward(st)
    _await_replicas(st)
    _loss_ops(st)
    loss = _loss_value(st)
    _backward(st)
    return (loss, [g.get_data().astype(np.float64) for g in st.grads_w],
            [g.get_data().astype(np.float64)[0] for g in st.grads_b])


# -- serial references ----------------------------------------------------------------

def serial_loss(weights: Sequence[np.ndarray], biases: Sequence[np.ndarray],
                x: np.ndarray, labels: np.ndarray) -> float:
    """Double-precision loss of the same network, computed in one place."""
    h = np.asarray(x, dtype=np.float64)
    for l, (w, b) in enumerate(zip(weights, biases)):
        h = h @ w + b
        if l < len(weights) - 1:
            h = np.maximum(h, 0.0)
    h = h - h.max(axis=1, keepdims=True)
    logp = h - np.log(np.exp(h).sum(axis=1, keepdims=True))
    return float(-np.mean(logp[np.arange(len(labels)), labels]))


def gradient_check(st: TrainState, x: np.ndarray, labels: np.ndarray,
                   epsilon: float = 1e-5) -> float:
    """Max relative error of analytic gradients against central differences.

    The finite differences use a Double serial forward pass at the network's
    current parameters. The error of each parameter is |a - f| / max(|a|, |f|),
    taken as 0 where both are below 1e-12.
    """
    n_params = sum(a * b + b for a, b in zip(st.widths, st.widths[1:]))
    if n_params > 500:
        raise GridMathError(f"gradient check is meant for <= 500 parameters, got {n_params}")
    labels = np.asarray(labels, dtype=np.int64)
    _, gws, gbs = gradients(st, x, labels)
    ws = [w.get_data().astype(np.float64) for w in st.weights]
    bs = [b.get_data().astype(np.float64)[0] for b in st.biases]
    worst = 0.0
    for params, grads in ((ws, gws), (bs, gbs)):
        for p, g in zip(params, grads):
            flat, gflat = p.reshape(-1), g.reshape(-1)
            for i in range(flat.size):
                keep = flat[i]
                flat[i] = keep + epsilon
                up = serial_loss(ws, bs, x, labels)
                flat[i] = keep - epsilon
                down = serial_loss(ws, bs, x, labels)
                flat[i] = keep
                fd = (up - down) / (2 * epsilon)
                denom = max(abs(fd), abs(gflat[i]))
                if denom > 1e-12:
                    worst = max(worst, abs(fd - gflat[i]) / denom)
    return worst


# -- inference -----------------------------------------------------------------------

def _infer(st: TrainState, x: np.ndarray, half: bool) -> np.ndarray:
    s = st.session
    x = np.asarray(x)
    if x.shape[0] == 0:
        return np.zeros(0, dtype=np.int64)
    n = x.shape[0]
    group = s.group
    made = []

    def new(rows, cols, prec, layout):
        m = s.create_matrix(rows, cols, prec, layout)
        made.append(m)
        return m

    try:
        params = []
        for w, b in zip(st.weights, st.biases):
            if half:
                wh = new(w.rows, w.cols, Precision.HALF, w.layout)
                bh = new(b.rows, b.cols, Precision.HALF, b.layout)
                s.cast_precision(w, wh)
                s.cast_precision(b, bh)
                params.append((wh, bh))
            else:
                params.append((w, b))
        act_prec = st.precision
        h = new(n, st.widths[0], act_prec, make_row_block_layout(n, st.widths[0], group))
        h.set_data(x)
        ones = new(n, 1, act_prec, make_row_block_layout(n, 1, group))
        s.fill(ones, 1.0)
        for l, (w, b) in enumerate(params):
            z = new(n, w.cols, act_prec, make_row_block_layout(n, w.cols, group))
            s.gemm(h, w, z)
            s.gemm(ones, b, z, beta=1.0)
            if l < len(params) - 1:
                s.relu(z)
            h = z
        return np.argmax(h.get_data(), axis=1)
    finally:
        for m in made:
            s.destroy(m)


def predict(st: TrainState, x: np.ndarray) -> np.ndarray:
    return _infer(st, x, half=False)


def infer_mixed_half(st: TrainState, x: np.ndarray) -> np.ndarray:
    """Predictions with parameters stored in Half and compute in Single."""
    return _infer(st, x, half=True)


# -- datasets ----------------------------------------------------------------------------

_DS_HEAD = struct.Struct("<III")


@dataclass
class Dataset:
    features: np.ndarray   # count x dim, float32
    labels: np.ndarray     # count, int64
    classes: int

    def __len__(self) -> int:
        return len(self.labels)

    def batch(self, k: int, size: int) -> tuple[np.ndarray, np.ndarray]:
        """The k-th batch, wrapping around the dataset."""
        idx = (np.arange(size) + k * size) % len(self)
        return self.features[idx], self.labels[idx]


def write_dataset(path, ds: Dataset):
    with open(path, "wb") as fh:
        fh.write(_DS_HEAD.pack(len(ds), ds.features.shape[1], ds.classes))
        fh.write(np.ascontiguousarray(ds.features, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(ds.labels, dtype="<u4").tobytes())


def read_dataset(path) -> Dataset:
    raw = Path(path).read_bytes()
    if len(raw) < _DS_HEAD.size:
        raise GridMathError(f"{path}: truncated dataset header")
    count, dim, classes = _DS_HEAD.unpack_from(raw)
    need = _DS_HEAD.size + count * dim * 4 + count * 4
    if len(raw) != need:
        raise GridMathError(f"{path}: expected {need} bytes, found {len(raw)}")
    feats = np.frombuffer(raw, dtype="<f4", count=count * dim, offset=_DS_HEAD.size)
    labels = np.frombuffer(raw, dtype="<u4", count=count, offset=_DS_HEAD.size + count * dim * 4)
    if count and labels.max() >= classes:
        raise GridMathError(f"{path}: label out of range")
    return Dataset(feats.reshape(count, dim).astype(np.float32), labels.astype(np.int64), classes)


def synthetic_digits(count: int, dim: int = 64, classes: int = 10, seed: int = 0,
                     noise: float = 0.6) -> Dataset:
    """Noisy class prototypes: a stand-in for a small digit dataset."""
    rng = np.random.default_rng(seed)
    protos = rng.uniform(0.0, 1.0, (classes, dim)) * (rng.uniform(size=(classes, dim)) < 0.4)
    labels = rng.integers(0, classes, count)
    feats = protos[labels] + noise * rng.standard_normal((count, dim)) * 0.5
    return Dataset(feats.astype(np.float32), labels.astype(np.int64), classes)


def separable_toy(count: int, dim: int = 4, seed: int = 0) -> Dataset:
    """Two linearly separable classes with a margin."""
    rng = np.random.default_rng(seed)
    w = rng.standard_normal(dim)
    w /= np.linalg.norm(w)
    x = rng.standard_normal((count, dim))
    margin = x @ w
    x += np.outer(np.where(margin >= 0, 0.5, -0.5), w)
    labels = (x @ w >= 0).astype(np.int64)
    return Dataset(x.astype(np.float32), labels, 2)


# -- driver -----------------------------------------------------------------------------

def train(st: TrainState, ds: Dataset, steps: int, log_path=None, simulated: bool = False):
    """Train for ``steps`` batches fed through the prefetch handoff.

    Returns rows of (iteration, loss, elapsedSeconds, fps); with a simulated
    fabric the elapsed time is virtual.
    """
    from .dataload import Prefetcher

    s = st.session
    feed = Prefetcher(lambda k: ds.batch(k, st.batch), n_batches=steps)
    rows = []
    t0 = time.perf_counter()
    mark = s.fabric.trace.mark()
    for k, (x, y) in enumerate(feed):
        loss = train_step(st, x, y)
        if simulated:
            elapsed = s.fabric.simulated_elapsed(mark)
        else:
            elapsed = time.perf_counter() - t0
        fps = (k + 1) * st.batch / elapsed if elapsed > 0 else float("inf")
        rows.append((st.iteration, loss, elapsed, fps))
    if log_path is not None:
        write_log(log_path, rows)
    return rows


def write_log(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "loss", "elapsedSeconds", "fps"])
        for it, loss, el, fps in rows:
            w.writerow([it, repr(float(loss)), f"{el:.6f}", f"{fps:.3f}"])
