"""Wire encodings for op descriptors, data pieces and completions."""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass

from .core import GridMathError


class Op(enum.IntEnum):
    DEFINE = 1
    DESTROY = 2
    SCATTER = 3
    GATHER = 4
    RESHAPE = 5
    FILL_UNIFORM = 6
    SEEDS = 7
    CHECKSUM = 8
    STATS = 9
    SHUTDOWN = 10
    RECORD_BEGIN = 11
    RECORD_END = 12
    REPLAY = 13
    REPL_START = 14
    REPL_DRAIN = 15
    REPL_READ = 16
    # compute ops: recordable
    GEMM = 32
    ROWCOLSUM = 33
    ELEMENTWISE = 34
    SOFTMAX = 35
    CAST = 36
    IM2COL = 37
    COL2ROW = 38


COMPUTE_OPS = frozenset({Op.GEMM, Op.ROWCOLSUM, Op.ELEMENTWISE, Op.SOFTMAX, Op.CAST,
                         Op.IM2COL, Op.COL2ROW, Op.FILL_UNIFORM})


class Elementwise(enum.IntEnum):
    ADD = 0        # A <- A + B
    SUB = 1        # A <- A - B
    MUL_SCALAR = 2  # A <- s * A
    RELU = 3       # A <- max(A, 0)
    RELU_GRAD = 4  # G <- G * [X > 0]   operands (X, G)
    AXPY = 5       # Y <- a * X + Y     operands (X, Y)
    MUL = 6        # A <- A * B (Hadamard)
    FILL = 7       # A <- s
    COPY = 8       # A <- B


# ids of the matrices an op writes; each gets version + 1 (reshape sets its own)
def mutated(op: "OpDescriptor") -> tuple[int, ...]:
    code = op.opcode
    m = op.matrices
    if code in (Op.SCATTER, Op.FILL_UNIFORM, Op.SOFTMAX):
        return (m[0],)
    if code == Op.GEMM:
        return (m[2],)
    if code == Op.ROWCOLSUM:
        return (m[1], m[2])
    if code == Op.ELEMENTWISE:
        kind = Elementwise(op.ints[0])
        if kind in (Elementwise.RELU_GRAD, Elementwise.AXPY):
            return (m[1],)
        return (m[0],)
    if code in (Op.CAST, Op.IM2COL, Op.COL2ROW):
        return (m[1],)
    return ()


_OP_HEAD = struct.Struct("<HHHHI")


@dataclass(frozen=True)
class OpDescriptor:
    opcode: Op
    matrices: tuple[int, ...] = ()
    ints: tuple[int, ...] = ()
    scalars: tuple[float, ...] = ()
    blob: bytes = b""

    def encode(self) -> bytes:
        head = _OP_HEAD.pack(int(self.opcode), len(self.matrices), len(self.ints),
                             len(self.scalars), len(self.blob))
        body = struct.pack(f"<{len(self.matrices)}Q{len(self.ints)}q{len(self.scalars)}d",
                           *self.matrices, *self.ints, *self.scalars)
        return head + body + self.blob

    @classmethod
    def decode(cls, buf: bytes) -> "OpDescriptor":
        try:
            code, nm, ni, ns, nb = _OP_HEAD.unpack_from(buf)
            fmt = f"<{nm}Q{ni}q{ns}d"
            vals = struct.unpack_from(fmt, buf, _OP_HEAD.size)
            start = _OP_HEAD.size + struct.calcsize(fmt)
            blob = bytes(buf[start:start + nb])
            if len(blob) != nb or start + nb != len(buf):
                raise GridMathError("op descriptor length mismatch")
            return cls(Op(code), tuple(vals[:nm]), tuple(vals[nm:nm + ni]),
                       tuple(vals[nm + ni:]), blob)
        except (struct.error, ValueError) as exc:
            raise GridMathError(f"malformed op descriptor: {exc}") from exc


# Data piece header: matrix id, version, offset, length
DATA_HEAD = struct.Struct("<QQQI")

# replication job tags live in their own half of the tag space
JOB_TAG_BIT = 0x80000000


def encode_data(matrix_id: int, version: int, offset: int, body: bytes) -> bytes:
    return DATA_HEAD.pack(matrix_id, version, offset, len(body)) + body


def decode_data(payload: bytes) -> tuple[int, int, int, memoryview]:
    mid, version, offset, length = DATA_HEAD.unpack_from(payload)
    body = memoryview(payload)[DATA_HEAD.size:DATA_HEAD.size + length]
    if len(body) != length:
        raise GridMathError("truncated data piece")
    return mid, version, offset, body


_COMPLETION = struct.Struct("<BI")


@dataclass(frozen=True)
class Completion:
    ok: bool
    result: bytes = b""

    def encode(self) -> bytes:
        return _COMPLETION.pack(0 if self.ok else 1, len(self.result)) + self.result

    @classmethod
    def decode(cls, buf: bytes) -> "Completion":
        status, n = _COMPLETION.unpack_from(buf)
        return cls(status == 0, bytes(buf[_COMPLETION.size:_COMPLETION.size + n]))

    @property
    def error(self) -> str:
        return "" if self.ok else self.result.decode("utf-8", "replace")
