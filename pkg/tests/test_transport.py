import socket
import struct
import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedlorar.engine import ClientUpdate, records_to_jsonl, run_federated
from fedlorar.errors import ClientDisconnected, MalformedFrame, TruncatedFrame, VersionMismatch, WireError
from fedlorar.tensor import as_vector
from fedlorar.transport import (
    GlobalModel,
    Hello,
    RunAborted,
    Shutdown,
    Update,
    decode,
    encode,
    run_client,
    run_server,
    send_message,
)

finite = st.floats(allow_nan=False, allow_infinity=False)


def test_frame_sizes():
    assert encode(Shutdown()) == b"\x03\x00\x00\x00\x04\x01\x00"
    frame = encode(GlobalModel(0, as_vector([1.0])))
    assert len(frame) == 23
    assert frame == struct.pack("<IBHIId", 19, 1, 1, 0, 1, 1.0)


def test_update_layout():
    u = ClientUpdate(3, as_vector([0.5, -0.5]), 12.0, 40, (1.0, 0.7))
    frame = encode(Update(7, u))
    assert frame[:7] == struct.pack("<IBH", len(frame) - 4, 2, 1)
    assert struct.unpack_from("<IIId", frame, 7) == (7, 3, 40, 12.0)
    assert decode(frame) == Update(7, u)


@settings(max_examples=100)
@given(
    st.integers(0, 2**32 - 1),
    st.lists(finite, min_size=1, max_size=20),
    st.lists(finite, max_size=5),
    st.floats(0, 1e6),
    st.integers(1, 2**32 - 1),
)
def test_round_trips(t, delta, losses, wlr, size):
    msgs = [
        GlobalModel(t, as_vector(delta)),
        Update(t, ClientUpdate(t % 1000, as_vector(delta), wlr, size, tuple(losses))),
        Hello(t, size),
        Shutdown(),
    ]
    for msg in msgs:
        assert decode(encode(msg)) == msg


def test_decode_errors():
    good = encode(GlobalModel(1, as_vector([1.0, 2.0])))
    with pytest.raises(TruncatedFrame):
        decode(good[:-3])
    with pytest.raises(TruncatedFrame):
        decode(good[:2])
    with pytest.raises(MalformedFrame):
        decode(good + b"\x00")
    with pytest.raises(VersionMismatch):
        decode(encode(Shutdown(), version=2))
    with pytest.raises(MalformedFrame):
        decode(struct.pack("<IBH", 3, 9, 1))
    with pytest.raises(MalformedFrame):
        decode(struct.pack("<IBHIId", 19, 1, 1, 0, 1, float("nan")))
    with pytest.raises(MalformedFrame):
        decode(struct.pack("<IBHII", 11, 1, 1, 0, 5))
    with pytest.raises(MalformedFrame):
        encode(GlobalModel(0, np.array([np.inf])))


@settings(max_examples=300)
@given(st.binary(max_size=80))
def test_decode_raises_only_wire_errors(data):
    try:
        decode(data)
    except WireError:
        pass


@settings(max_examples=200)
@given(st.data())
def test_mutated_frames_raise_only_wire_errors(data):
    frame = bytearray(encode(Update(2, ClientUpdate(1, as_vector([0.25, 3.0]), 1.5, 9, (0.9, 0.4)))))
    for _ in range(data.draw(st.integers(1, 4))):
        i = data.draw(st.integers(0, len(frame) - 1))
        frame[i] = data.draw(st.integers(0, 255))
    try:
        decode(bytes(frame))
    except WireError:
        pass


def _serve_in_thread(**kw):
    ready = threading.Event()
    box = {}

    def on_listening(addr):
        box["addr"] = addr
        ready.set()

    def target():
        try:
            box["result"] = run_server(("127.0.0.1", 0), on_listening=on_listening, **kw)
        except Exception as exc:  # surfaced by the test below
            box["error"] = exc
            ready.set()

    th = threading.Thread(target=target)
    th.start()
    assert ready.wait(10)
    return th, box


def test_socket_run_matches_in_process(small_model, small_population, small_algo):
    algo = small_algo("fedopt", "lorar", rounds=3)
    sizes = [d.size for d in small_population]
    th, box = _serve_in_thread(algo=algo, population_sizes=sizes, seed=4, model=small_model,
                               dev_population=small_population, eval_every=2, accept_timeout=10)
    clients = [
        threading.Thread(target=run_client, args=(box["addr"], d.client_id, d, algo, 4, small_model, sizes))
        for d in small_population
    ]
    for c in clients:
        c.start()
    for c in clients:
        c.join(30)
    th.join(30)
    assert "error" not in box
    local = run_federated(algo, small_population, seed=4, eval_every=2, model=small_model)
    assert records_to_jsonl(box["result"].records) == records_to_jsonl(local.records)
    assert np.array_equal(box["result"].final, local.final)


def test_client_dropping_out_aborts_the_run(small_model, small_population, small_algo):
    algo = small_algo(rounds=3)
    sizes = [d.size for d in small_population[:2]]
    th, box = _serve_in_thread(algo=algo, population_sizes=sizes, seed=0, model=small_model, accept_timeout=10)
    good = threading.Thread(target=run_client,
                            args=(box["addr"], 0, small_population[0], algo, 0, small_model, sizes))
    good.start()
    with socket.create_connection(box["addr"]) as sock:
        send_message(sock, Hello(1, sizes[1]))
        sock.recv(7)  # first bytes of the round-0 model, then hang up
    th.join(30)
    good.join(30)
    assert isinstance(box.get("error"), RunAborted)
    assert isinstance(box["error"], ClientDisconnected)
    assert box["error"].records == []
