"""Binary wire format and TCP runners for the round protocol.

Frame layout (all integers unsigned little-endian, reals IEEE-754 float64 LE)::

    u32 length      bytes that follow this field (tag + version + payload)
    u8  tag         1 GlobalModel, 2 Update, 3 Hello, 4 Shutdown
    u16 version     PROTOCOL_VERSION
    ...payload

Payloads::

    GlobalModel  u32 round, vec weights
    Update       u32 round, u32 client_id, u32 train_size,
                 f64 weighted_loss_reduction, vec delta, vec epoch_losses
    Hello        u32 client_id, u32 train_size
    Shutdown     (empty)

    vec          u32 dim, then dim x f64
"""

from __future__ import annotations

import logging
import queue
import socket
import struct
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence, Union

import numpy as np

from . import models
from .datagen import ClientDataset
from .engine import (
    AlgorithmSpec,
    ClientUpdate,
    Evaluator,
    FederatedResult,
    RoundRecord,
    local_training,
    round_seed,
    serve_rounds,
)
from .errors import (
    ClientDisconnected,
    InvalidSpec,
    MalformedFrame,
    PayloadTooLarge,
    ProtocolError,
    TruncatedFrame,
    VersionMismatch,
    WireError,
)
from .models import ModelSpec
from .tensor import ParamVector, as_vector

log = logging.getLogger(__name__)

PROTOCOL_VERSION = 1
MAX_FRAME = 2**31 - 1

TAG_GLOBAL_MODEL = 1
TAG_UPDATE = 2
TAG_HELLO = 3
TAG_SHUTDOWN = 4

_HEAD = struct.Struct("<IBH")
_U32 = struct.Struct("<I")
_F64 = struct.Struct("<d")


@dataclass(frozen=True)
class GlobalModel:
    round_index: int
    weights: ParamVector

    def __eq__(self, other):
        return (
            isinstance(other, GlobalModel)
            and self.round_index == other.round_index
            and np.array_equal(self.weights, other.weights)
        )


@dataclass(frozen=True)
class Update:
    round_index: int
    update: ClientUpdate

    def __eq__(self, other):
        if not isinstance(other, Update) or self.round_index != other.round_index:
            return False
        a, b = self.update, other.update
        return (
            a.client_id == b.client_id
            and a.train_size == b.train_size
            and a.weighted_loss_reduction == b.weighted_loss_reduction
            and tuple(a.epoch_losses) == tuple(b.epoch_losses)
            and np.array_equal(a.delta, b.delta)
        )


@dataclass(frozen=True)
class Hello:
    client_id: int
    train_size: int


@dataclass(frozen=True)
class Shutdown:
    pass


Message = Union[GlobalModel, Update, Hello, Shutdown]


def _u32(value: int, what: str) -> bytes:
    if not 0 <= int(value) < 2**32:
        raise MalformedFrame(f"{what}={value} does not fit in u32")
    return _U32.pack(int(value))


def _vec(values) -> bytes:
    arr = np.asarray(values, dtype="<f8")
    if arr.ndim != 1:
        raise MalformedFrame("vectors must be one-dimensional")
    if not np.all(np.isfinite(arr)):
        raise MalformedFrame("vectors must be finite")
    return _u32(arr.size, "dim") + arr.tobytes()


def encode(msg: Message, version: int = PROTOCOL_VERSION) -> bytes:
    """Serialize ``msg`` to one length-prefixed frame."""
    if isinstance(msg, GlobalModel):
        tag, payload = TAG_GLOBAL_MODEL, _u32(msg.round_index, "round") + _vec(msg.weights)
    elif isinstance(msg, Update):
        u = msg.update
        if not np.isfinite(u.weighted_loss_reduction):
            raise MalformedFrame("weighted_loss_reduction must be finite")
        payload = b"".join([
            _u32(msg.round_index, "round"),
            _u32(u.client_id, "client_id"),
            _u32(u.train_size, "train_size"),
            _F64.pack(u.weighted_loss_reduction),
            _vec(u.delta),
            _vec(u.epoch_losses),
        ])
        tag = TAG_UPDATE
    elif isinstance(msg, Hello):
        tag, payload = TAG_HELLO, _u32(msg.client_id, "client_id") + _u32(msg.train_size, "train_size")
    elif isinstance(msg, Shutdown):
        tag, payload = TAG_SHUTDOWN, b""
    else:
        raise TypeError(f"cannot encode {type(msg).__name__}")
    length = 3 + len(payload)
    if length > MAX_FRAME:
        raise PayloadTooLarge(f"frame of {length} bytes exceeds {MAX_FRAME}")
    return _HEAD.pack(length, tag, version) + payload


class _Reader:
    def __init__(self, data: memoryview):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> memoryview:
        if self.pos + n > len(self.data):
            raise MalformedFrame("payload shorter than its declared contents")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return _U32.unpack(self.take(4))[0]

    def f64(self) -> float:
        value = _F64.unpack(self.take(8))[0]
        if not np.isfinite(value):
            raise MalformedFrame("non-finite scalar")
        return value

    def vec(self, allow_empty: bool = False) -> np.ndarray:
        dim = self.u32()
        if dim == 0 and not allow_empty:
            raise MalformedFrame("vector of dimension 0")
        if dim > (len(self.data) - self.pos) // 8:
            raise MalformedFrame(f"vector dim {dim} exceeds the remaining payload")
        arr = np.frombuffer(self.take(8 * dim), dtype="<f8").astype(np.float64)
        if not np.all(np.isfinite(arr)):
            raise MalformedFrame("non-finite vector entry")
        return arr

    def done(self) -> None:
        if self.pos != len(self.data):
            raise MalformedFrame(f"{len(self.data) - self.pos} trailing payload bytes")


def frame_length(header: bytes) -> int:
    """Validate a 4-byte length prefix and return the number of bytes that follow."""
    if len(header) < 4:
        raise TruncatedFrame("need 4 bytes for the length prefix")
    length = _U32.unpack(header[:4])[0]
    if length < 3:
        raise MalformedFrame(f"frame length {length} is shorter than tag + version")
    if length > MAX_FRAME:
        raise MalformedFrame(f"frame length {length} exceeds {MAX_FRAME}")
    return length


def decode(data: bytes) -> Message:
    """Parse exactly one frame. Every failure is a ``WireError`` subclass."""
    buf = memoryview(bytes(data))
    length = frame_length(buf[:4])
    if len(buf) < 4 + length:
        raise TruncatedFrame(f"frame declares {length} bytes, {len(buf) - 4} available")
    if len(buf) > 4 + length:
        raise MalformedFrame(f"{len(buf) - 4 - length} bytes after the end of the frame")
    _, tag, version = _HEAD.unpack(buf[:7])
    if version != PROTOCOL_VERSION:
        raise VersionMismatch(f"peer speaks protocol {version}, expected {PROTOCOL_VERSION}")
    r = _Reader(buf[7:])
    try:
        if tag == TAG_GLOBAL_MODEL:
            t = r.u32()
            msg = GlobalModel(t, as_vector(r.vec()))
        elif tag == TAG_UPDATE:
            t, cid, size = r.u32(), r.u32(), r.u32()
            wlr = r.f64()
            delta = as_vector(r.vec())
            losses = tuple(float(x) for x in r.vec(allow_empty=True))
            msg = Update(t, ClientUpdate(cid, delta, wlr, size, losses))
        elif tag == TAG_HELLO:
            msg = Hello(r.u32(), r.u32())
        elif tag == TAG_SHUTDOWN:
            msg = Shutdown()
        else:
            raise MalformedFrame(f"unknown tag {tag}")
    except InvalidSpec as exc:
        raise MalformedFrame(str(exc)) from exc
    r.done()
    return msg


# -- sockets ----------------------------------------------------------------

def _recv_exact(sock: socket.socket, n: int) -> bytes:
    chunks = []
    remaining = n
    while remaining:
        chunk = sock.recv(min(remaining, 1 << 20))
        if not chunk:
            raise ClientDisconnected("peer closed the connection")
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)


def recv_message(sock: socket.socket) -> Message:
    head = _recv_exact(sock, 4)
    body = _recv_exact(sock, frame_length(head))
    return decode(head + body)


def send_message(sock: socket.socket, msg: Message) -> None:
    sock.sendall(encode(msg))


def parse_addr(addr: str | tuple[str, int]) -> tuple[str, int]:
    if isinstance(addr, tuple):
        return addr
    host, _, port = addr.rpartition(":")
    return host or "127.0.0.1", int(port)


class RunAborted(ClientDisconnected):
    """A client dropped mid-run. ``records`` holds the rounds that completed."""

    def __init__(self, message: str, records: list[RoundRecord]):
        super().__init__(message)
        self.records = records


def run_server(
    bind_addr: str | tuple[str, int],
    algo: AlgorithmSpec,
    population_sizes: Sequence[int],
    seed: int,
    model: ModelSpec,
    dev_population: Sequence[ClientDataset] | None = None,
    eval_every: int = 5,
    on_record: Callable[[RoundRecord], None] | None = None,
    on_listening: Callable[[tuple[str, int]], None] | None = None,
    accept_timeout: float = 60.0,
    round_timeout: float | None = None,
) -> FederatedResult:
    """Coordinate ``len(population_sizes)`` TCP clients through ``algo.rounds`` rounds.

    Each connection gets a reader thread that forwards frames to one queue;
    the calling thread is the aggregator and waits for every client's update
    of round ``t`` before aggregating. ``dev_population`` supplies the dev
    splits the server scores the global model on.
    """
    expected = len(population_sizes)
    inbox: queue.Queue = queue.Queue()
    conns: dict[int, socket.socket] = {}
    records: list[RoundRecord] = []

    listener = socket.create_server(parse_addr(bind_addr))
    listener.settimeout(accept_timeout)
    if on_listening is not None:
        on_listening(listener.getsockname()[:2])
    log.info("server listening on %s, waiting for %d clients", listener.getsockname()[:2], expected)

    def reader(cid: int, sock: socket.socket) -> None:
        try:
            while True:
                inbox.put((cid, recv_message(sock)))
        except (WireError, OSError) as exc:
            inbox.put((cid, exc))

    try:
        while len(conns) < expected:
            try:
                sock, peer = listener.accept()
            except socket.timeout as exc:
                raise ClientDisconnected(f"only {len(conns)} of {expected} clients connected") from exc
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            sock.settimeout(accept_timeout)
            hello = recv_message(sock)
            sock.settimeout(None)
            if not isinstance(hello, Hello):
                raise ProtocolError(f"expected Hello from {peer}, got {type(hello).__name__}")
            cid = hello.client_id
            if cid >= expected or cid in conns:
                raise ProtocolError(f"unexpected or duplicate client id {cid}")
            if hello.train_size != population_sizes[cid]:
                raise ProtocolError(f"client {cid} reports |D|={hello.train_size}, expected {population_sizes[cid]}")
            conns[cid] = sock
            log.info("client %d connected from %s", cid, peer)
        for cid, sock in conns.items():
            threading.Thread(target=reader, args=(cid, sock), daemon=True).start()

        def train_round(t: int, w: ParamVector) -> list[ClientUpdate]:
            frame = encode(GlobalModel(t, w))
            for sock in conns.values():
                sock.sendall(frame)
            got: dict[int, ClientUpdate] = {}
            while len(got) < expected:
                try:
                    cid, msg = inbox.get(timeout=round_timeout)
                except queue.Empty as exc:
                    raise ClientDisconnected(f"round {t} timed out waiting for updates") from exc
                if isinstance(msg, Exception):
                    raise ClientDisconnected(f"client {cid} failed in round {t}: {msg}") from msg
                if not isinstance(msg, Update) or msg.round_index != t or msg.update.client_id != cid:
                    raise ProtocolError(f"client {cid} sent an out-of-sequence message in round {t}")
                got[cid] = msg.update
            return [got[c] for c in sorted(got)]

        def keep(record: RoundRecord) -> None:
            records.append(record)
            if on_record is not None:
                on_record(record)

        evaluate: Evaluator | None = None
        if dev_population is not None and model.is_classifier:
            from .engine import dev_evaluator

            evaluate = dev_evaluator(model, dev_population)
        init_w = models.init_params(model, seed)
        try:
            return serve_rounds(algo, init_w, train_round, evaluate, eval_every, keep)
        except ClientDisconnected as exc:
            raise RunAborted(str(exc), list(records)) from exc
    finally:
        for sock in conns.values():
            try:
                sock.sendall(encode(Shutdown()))
            except OSError:
                pass
            sock.close()
        listener.close()


def run_client(
    server_addr: str | tuple[str, int],
    client_id: int,
    dataset: ClientDataset,
    algo: AlgorithmSpec,
    seed: int,
    model: ModelSpec,
    sizes: Sequence[int] | None = None,
    connect_timeout: float = 30.0,
) -> int:
    """Serve local training for one client until the server says Shutdown.

    Returns the number of rounds trained.
    """
    addr = parse_addr(server_addr)
    deadline = time.monotonic() + connect_timeout
    while True:
        try:
            sock = socket.create_connection(addr, timeout=connect_timeout)
            break
        except OSError:
            if time.monotonic() > deadline:
                raise
            time.sleep(0.05)
    sock.settimeout(None)
    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    rounds = 0
    with sock:
        send_message(sock, Hello(client_id, dataset.size))
        while True:
            msg = recv_message(sock)
            if isinstance(msg, Shutdown):
                return rounds
            if not isinstance(msg, GlobalModel):
                raise ProtocolError(f"client {client_id} got unexpected {type(msg).__name__}")
            t = msg.round_index
            update = local_training(client_id, msg.weights, dataset, algo, round_seed(seed, t, client_id), model, sizes)
            send_message(sock, Update(t, update))
            rounds += 1
