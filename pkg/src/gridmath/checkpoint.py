"""Checkpoint files.

Layout (little-endian): b"DMCK", u32 format version, u64 root seed, u32
matrix count, then per matrix its descriptor encoding followed by the
row-major payload in storage precision, and finally a CRC32 of every byte
after the magic.
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path
from typing import Union

import numpy as np

from .core import GridMathError, MatrixDescriptor, make_row_block_layout
from .session import Session
from .transport import Fabric

MAGIC = b"DMCK"
FORMAT_VERSION = 1
_HEAD = struct.Struct("<IQI")
_CRC = struct.Struct("<I")


class CheckpointError(GridMathError):
    pass


def save(session: Session, path: Union[str, Path]):
    """Write every live matrix of a quiescent session."""
    body = [_HEAD.pack(FORMAT_VERSION, session.root_seed & 0xFFFFFFFFFFFFFFFF,
                       len(session.descriptors))]
    for mid in sorted(session.descriptors):
        desc = session.descriptors[mid]
        body.append(desc.encode())
        body.append(np.ascontiguousarray(session.get_data(mid)).tobytes())
    payload = b"".join(body)
    Path(path).write_bytes(MAGIC + payload + _CRC.pack(zlib.crc32(payload)))


def read(path: Union[str, Path]) -> tuple[int, list[tuple[MatrixDescriptor, np.ndarray]]]:
    """Parse and verify a checkpoint; returns (root seed, [(descriptor, values)])."""
    raw = Path(path).read_bytes()
    if len(raw) < len(MAGIC) + _HEAD.size + _CRC.size or raw[:4] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic or truncated)")
    payload, (crc,) = raw[4:-_CRC.size], _CRC.unpack(raw[-_CRC.size:])
    if zlib.crc32(payload) != crc:
        raise CheckpointError("checkpoint is corrupt (CRC mismatch)")
    version, seed, count = _HEAD.unpack_from(payload)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format version {version}")
    offset = _HEAD.size
    out = []
    try:
        for _ in range(count):
            desc, offset = MatrixDescriptor.decode(payload, offset)
            n = desc.nbytes
            if offset + n > len(payload):
                raise CheckpointError("checkpoint payload truncated")
            values = np.frombuffer(payload, dtype=desc.precision.dtype, count=desc.rows * desc.cols,
                                   offset=offset).reshape(desc.rows, desc.cols)
            offset += n
            out.append((desc, values))
    except GridMathError as exc:
        raise CheckpointError(f"checkpoint is corrupt: {exc}") from exc
    if offset != len(payload):
        raise CheckpointError("trailing bytes in checkpoint")
    return seed, out


def restore(path: Union[str, Path], workers: Union[int, Fabric], **session_kw) -> Session:
    """Open a new session holding the checkpointed matrices.

    Matrix ids and versions are kept. Layouts that name workers outside the new
    group are replaced by a row-block layout over the whole group.
    """
    seed, matrices = read(path)
    session = Session(workers, root_seed=seed, **session_kw)
    try:
        group = set(session.group)
        for desc, values in matrices:
            layout = desc.layout
            if not set(layout.workers) <= group:
                layout = make_row_block_layout(desc.rows, desc.cols, session.group)
            # version 0 means never written, i.e. all zeros; otherwise the
            # scatter below brings the version back to its saved value
            start = max(0, desc.version - 1)
            m = session._define(MatrixDescriptor(desc.matrix_id, desc.rows, desc.cols,
                                                 desc.precision, layout, start))
            if desc.version > 0:
                session.set_data(m, values)
    except BaseException:
        session.close()
        raise
    return session
