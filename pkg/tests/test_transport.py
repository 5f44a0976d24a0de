import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gridmath.core import make_row_block_layout
from gridmath.ops import Op, OpDescriptor
from gridmath.simulate import gemm_events
from gridmath.transport import (MASTER, CostModel, Event, Kind, Message, Simulated,
                                TransportError, create_fabric, simulate_elapsed)


def noop() -> bytes:
    return OpDescriptor(Op.STATS).encode()


def test_fabric_sizes():
    assert create_fabric(1).workers == [0]
    f = create_fabric(4)
    assert f.workers == [0, 1, 2, 3]
    assert f.stats.totals().messages == 0 and f.stats.totals().bytes == 0


def test_send_recv_roundtrip():
    f = create_fabric(2)
    payload = bytes(range(256)) * 3
    f.send(Message(Kind.DATA, 0, 1, payload, 9))
    m = f.recv(1, timeout=1)
    assert (m.payload, m.tag, m.source, m.kind) == (payload, 9, 0, Kind.DATA)


def test_link_order():
    f = create_fabric(2)
    f.send(Message(Kind.DATA, MASTER, 1, b"A"))
    f.send(Message(Kind.DATA, MASTER, 1, b"B"))
    assert [f.recv(1, 1).payload for _ in range(2)] == [b"A", b"B"]


def test_byte_counts_random_sizes(rng):
    f = create_fabric(3)
    sizes = [int(s) for s in rng.integers(0, 5000, 100)]
    for k, n in enumerate(sizes):
        f.send(Message(Kind.DATA, k % 3, (k + 1) % 3, b"x" * n))
    assert f.stats.totals(Kind.DATA).bytes == sum(sizes)
    assert f.stats.totals(Kind.DATA).messages == 100


def test_broadcast_counts():
    f = create_fabric(4)
    f.broadcast_control(noop())
    assert f.stats.totals(Kind.CONTROL).messages == 4
    for _ in range(6):
        f.broadcast_control(noop())
    assert f.stats.totals(Kind.CONTROL).messages == 7 * 4


def test_empty_control_rejected():
    f = create_fabric(2)
    with pytest.raises(TransportError):
        f.broadcast_control(b"")


def test_closed_endpoint_and_oversize(monkeypatch):
    f = create_fabric(2)
    f.close(1)
    with pytest.raises(TransportError):
        f.send(Message(Kind.DATA, 0, 1, b"x"))
    monkeypatch.setenv("GRIDMATH_MAX_FRAME", "16")
    g = create_fabric(1)
    with pytest.raises(TransportError):
        g.send(Message(Kind.DATA, MASTER, 0, b"x" * 17))


def test_recv_timeout():
    with pytest.raises(TimeoutError):
        create_fabric(1).recv(0, timeout=0.01)


def test_simulated_message_cost(frozen):
    cost = CostModel(1e-6, 1e-9)
    f = create_fabric(2, Simulated(cost))
    f.send(Message(Kind.DATA, 0, 1, b"\0" * 1048576))
    assert f.simulated_elapsed() == pytest.approx(frozen["one_mib_time"], rel=1e-12)
    assert frozen["one_mib_time"] == pytest.approx(1.049e-3, abs=1e-6)


def test_elapsed_empty_and_one_kib(frozen):
    cost = CostModel(5e-6, 5e-10)
    assert simulate_elapsed([], cost, [0, 1]) == 0.0
    ev = [Event(0, "send", 0, (1, int(Kind.DATA), 1024, 0))]
    assert simulate_elapsed(ev, cost, [0, 1]) == pytest.approx(frozen["one_kib_time_pinned"], rel=1e-12)


def test_gemm_trace_elapsed_non_increasing():
    cost = CostModel(5e-6, 5e-10, 1e9)
    times = [simulate_elapsed(gemm_events(1024, p), cost, range(p)) for p in (1, 2, 4)]
    assert times[0] >= times[1] >= times[2]


def test_body_bytes_tracked_separately():
    f = create_fabric(2)
    f.send(Message(Kind.DATA, 0, 1, b"h" * 28 + b"b" * 100), body=100)
    assert f.stats.body_bytes() == 100
    assert f.stats.totals(Kind.DATA).bytes == 128


@settings(max_examples=100, deadline=None)
@given(st.sampled_from(list(Kind)), st.integers(0, 2**32 - 1), st.integers(0, 2**32 - 1),
       st.integers(0, 2**32 - 1), st.binary(max_size=300))
def test_frame_roundtrip(kind, src, dst, tag, payload):
    m = Message(kind, src, dst, payload, tag)
    assert Message.decode(m.encode()) == m


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 2), st.integers(0, 2), st.integers(0, 64)), max_size=40))
def test_per_link_fifo_and_counts(sends):
    f = create_fabric(3)
    expect = {}
    for k, (s, d, n) in enumerate(sends):
        body = k.to_bytes(4, "little") + b"z" * n
        f.send(Message(Kind.DATA, s, d, body))
        expect.setdefault(d, []).append(body)
    for d, bodies in expect.items():
        assert [f.recv(d, 1).payload for _ in bodies] == bodies
    assert f.stats.totals(Kind.DATA, received=True).bytes == sum(4 + n for _, _, n in sends)


def test_row_block_layout_helper_importable():
    # the simulated gemm uses the same constructors as the runtime
    assert len(make_row_block_layout(8, 8, range(4))) == 4
