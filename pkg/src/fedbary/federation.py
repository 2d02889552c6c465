"""Coordinator/client protocol for the dual method.

Frames are a 4-byte big-endian length followed by a UTF-8 JSON object with
a ``type`` field. Per round every client sends one ``report`` holding its K
aggregates (or ``[k, value]`` pairs for a batch) and the coordinator sends
one identical ``broadcast`` with the selection flags. Nothing else a client
knows ever leaves it: no particles, particle counts, weights or local
multipliers.

Handshake: the client sends ``hello`` with its id and K; the coordinator
checks K and answers ``hello`` with the public run configuration (M, step
size, momentum, seed and the first batch). A ``stop`` ends the session.
"""

from __future__ import annotations

import json
import math
import os
import queue
import socket
import struct
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Sequence, Union

import numpy as np

from .dual import (
    ClientReport,
    Coordinator,
    DualState,
    HyperParams,
    LocalDevice,
    SolveResult,
    finish,
)
from .measures import CostProfile, ProblemInstance, build_cost_profile

HEADER = struct.Struct(">I")
DEFAULT_TIMEOUT = 30.0
LISTEN_ENV = "FEDBARY_LISTEN"


class ProtocolError(RuntimeError):
    def __init__(self, message: str, offset: Optional[int] = None):
        super().__init__(message if offset is None else f"{message} (byte offset {offset})")
        self.offset = offset


class HandshakeError(ProtocolError):
    pass


class ClientTimeoutError(ProtocolError):
    def __init__(self, client_id: int, round_: int):
        super().__init__(f"client {client_id} timed out in round {round_}; round aborted")
        self.client_id = client_id
        self.round = round_


# -------------------------------------------------------------------- messages


@dataclass(frozen=True)
class Hello:
    client_id: int
    K: int
    round: int = -1
    config: Optional[dict] = None


@dataclass(frozen=True)
class Report:
    """Dense ``t`` is a tuple of K floats; sparse ``t`` holds ``(k, value)`` pairs."""

    round: int
    client_id: int
    t: tuple

    @property
    def sparse(self) -> bool:
        return bool(self.t) and isinstance(self.t[0], tuple)

    @classmethod
    def from_client(cls, rep: ClientReport) -> "Report":
        if rep.batch is None:
            t = tuple(float(x) for x in rep.t)
        else:
            t = tuple((int(k), float(rep.t[k])) for k in rep.batch)
        return cls(rep.round, rep.client_id, t)

    def to_client(self, K: int) -> ClientReport:
        if not self.sparse:
            if len(self.t) != K:
                raise ProtocolError(f"report from client {self.client_id} has {len(self.t)} entries, expected {K}")
            return ClientReport(self.client_id, self.round, np.array(self.t, dtype=np.float64))
        t = np.full(K, np.nan)
        batch = np.array([k for k, _ in self.t], dtype=np.intp)
        t[batch] = [v for _, v in self.t]
        return ClientReport(self.client_id, self.round, t, batch)


@dataclass(frozen=True)
class Broadcast:
    """Selection flags of a round; ``batch`` announces the next round's candidates."""

    round: int
    gamma: tuple
    done: bool
    batch: Optional[tuple] = None


@dataclass(frozen=True)
class Stop:
    reason: str
    round: int = -1


Message = Union[Hello, Report, Broadcast, Stop]


def to_body(msg: Message) -> dict:
    if isinstance(msg, Report):
        t = [list(p) for p in msg.t] if msg.sparse else list(msg.t)
        return {"type": "report", "round": msg.round, "client_id": msg.client_id, "t": t}
    if isinstance(msg, Broadcast):
        body = {"type": "broadcast", "round": msg.round, "gamma": list(msg.gamma), "done": msg.done}
        body["batch"] = None if msg.batch is None else list(msg.batch)
        return body
    if isinstance(msg, Hello):
        body = {"type": "hello", "round": msg.round, "client_id": msg.client_id, "K": msg.K}
        if msg.config is not None:
            body["config"] = msg.config
        return body
    if isinstance(msg, Stop):
        return {"type": "stop", "round": msg.round, "reason": msg.reason}
    raise TypeError(f"not a protocol message: {msg!r}")


def from_body(body: Any) -> Message:
    if not isinstance(body, dict) or "type" not in body:
        raise ProtocolError("frame body is not a typed JSON object", 4)
    kind = body["type"]
    try:
        if kind == "report":
            raw = body["t"]
            if raw and isinstance(raw[0], list):
                t = tuple((int(k), float(v)) for k, v in raw)
            else:
                t = tuple(float(v) for v in raw)
            return Report(int(body["round"]), int(body["client_id"]), t)
        if kind == "broadcast":
            batch = body.get("batch")
            return Broadcast(
                int(body["round"]),
                tuple(int(g) for g in body["gamma"]),
                bool(body["done"]),
                None if batch is None else tuple(int(k) for k in batch),
            )
        if kind == "hello":
            return Hello(int(body["client_id"]), int(body["K"]), int(body.get("round", -1)), body.get("config"))
        if kind == "stop":
            return Stop(str(body["reason"]), int(body.get("round", -1)))
    except (KeyError, TypeError, ValueError) as exc:
        raise ProtocolError(f"bad {kind} message: {exc!r}", 4) from exc
    raise ProtocolError(f"unknown message type {kind!r}", 4)


def encode(msg: Message) -> bytes:
    payload = json.dumps(to_body(msg), separators=(",", ":"), allow_nan=False).encode()
    return HEADER.pack(len(payload)) + payload


def decode_body(frame: bytes) -> dict:
    if len(frame) < HEADER.size:
        raise ProtocolError("incomplete frame", len(frame))
    (n,) = HEADER.unpack_from(frame)
    end = HEADER.size + n
    if len(frame) < end:
        raise ProtocolError("incomplete frame", len(frame))
    if len(frame) > end:
        raise ProtocolError("trailing bytes after frame", end)
    try:
        return json.loads(frame[HEADER.size : end].decode())
    except UnicodeDecodeError as exc:
        raise ProtocolError("frame is not UTF-8", HEADER.size + exc.start) from exc
    except json.JSONDecodeError as exc:
        raise ProtocolError(f"malformed JSON: {exc.msg}", HEADER.size + exc.pos) from exc


def decode(frame: bytes) -> Message:
    return from_body(decode_body(frame))


class FrameBuffer:
    """Reassembles frames from an arbitrary byte stream."""

    def __init__(self):
        self._buf = bytearray()

    def feed(self, data: bytes) -> list[bytes]:
        self._buf.extend(data)
        frames = []
        while len(self._buf) >= HEADER.size:
            (n,) = HEADER.unpack_from(self._buf)
            if len(self._buf) < HEADER.size + n:
                break
            frames.append(bytes(self._buf[: HEADER.size + n]))
            del self._buf[: HEADER.size + n]
        return frames

    @property
    def pending(self) -> int:
        return len(self._buf)


# -------------------------------------------------------------------- round log


@dataclass
class LogRecord:
    dir: str
    round: int
    bytes: int
    msg: dict


@dataclass
class RoundLog:
    """Append-only record of every frame the coordinator sent or received."""

    records: list[LogRecord] = field(default_factory=list)

    def append(self, direction: str, frame: bytes, body: Optional[dict] = None) -> None:
        body = body if body is not None else decode_body(frame)
        self.records.append(LogRecord(direction, int(body.get("round", -1)), len(frame), body))

    def __len__(self) -> int:
        return len(self.records)

    def save(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            for r in self.records:
                fh.write(json.dumps({"dir": r.dir, "round": r.round, "bytes": r.bytes, "msg": r.msg}) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "RoundLog":
        log = cls()
        with open(path) as fh:
            for line in fh:
                if line.strip():
                    d = json.loads(line)
                    log.records.append(LogRecord(d["dir"], d["round"], d["bytes"], d["msg"]))
        return log

    def upstream_bytes(self) -> dict[tuple[int, int], int]:
        """Bytes of report traffic keyed by ``(round, client_id)``."""
        out: dict[tuple[int, int], int] = {}
        for r in self.records:
            if r.dir == "up" and r.msg.get("type") == "report":
                key = (r.round, r.msg.get("client_id"))
                out[key] = out.get(key, 0) + r.bytes
        return out

    def data_messages(self, round_: int) -> list[LogRecord]:
        return [r for r in self.records if r.round == round_ and r.msg.get("type") in ("report", "broadcast")]


# -------------------------------------------------------------------- channels


class QueueChannel:
    """One end of an in-process byte pipe."""

    def __init__(self, inbox: queue.Queue, outbox: queue.Queue):
        self.inbox = inbox
        self.outbox = outbox

    @classmethod
    def pair(cls) -> tuple["QueueChannel", "QueueChannel"]:
        a, b = queue.Queue(), queue.Queue()
        return cls(a, b), cls(b, a)

    def send(self, frame: bytes) -> None:
        self.outbox.put(frame)

    def recv(self, timeout: Optional[float] = None) -> bytes:
        try:
            return self.inbox.get(timeout=timeout)
        except queue.Empty:
            raise TimeoutError from None

    def close(self) -> None:
        pass


class SocketChannel:
    def __init__(self, sock: socket.socket):
        self.sock = sock
        self.sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)

    def send(self, frame: bytes) -> None:
        self.sock.sendall(frame)

    def _read(self, n: int, got: int = 0) -> bytes:
        chunks = []
        while n:
            chunk = self.sock.recv(n)
            if not chunk:
                raise ProtocolError("connection closed mid-frame: incomplete frame", got)
            chunks.append(chunk)
            n -= len(chunk)
            got += len(chunk)
        return b"".join(chunks)

    def recv(self, timeout: Optional[float] = None) -> bytes:
        self.sock.settimeout(timeout)
        try:
            head = self._read(HEADER.size)
            (n,) = HEADER.unpack(head)
            return head + self._read(n, HEADER.size)
        except socket.timeout:
            raise TimeoutError from None

    def close(self) -> None:
        try:
            self.sock.close()
        except OSError:
            pass


def parse_address(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    if not port.isdigit():
        raise ValueError(f"bad address {text!r}, expected host:port")
    return host, int(port)


# ------------------------------------------------------------------ client role


def serve_client(
    channel,
    client_id: int,
    cost_block: np.ndarray,
    weight: float,
    timeout: float = DEFAULT_TIMEOUT,
) -> LocalDevice:
    """Run one client session until the coordinator stops it.

    ``weight`` is the client's own mixture weight; it is combined with the
    announced M locally and never sent.
    """
    K = cost_block.shape[1]
    channel.send(encode(Hello(client_id, K)))
    msg = decode(channel.recv(timeout))
    if isinstance(msg, Stop):
        raise HandshakeError(f"client {client_id} rejected: {msg.reason}")
    if not isinstance(msg, Hello) or msg.config is None or msg.K != K:
        raise HandshakeError(f"client {client_id}: unexpected handshake reply {msg!r}")
    cfg = msg.config
    device = LocalDevice(client_id, cost_block, weight / cfg["M"], cfg["alpha0"], cfg["kappa2"], cfg["seed"])
    batch = None if cfg.get("batch") is None else np.array(cfg["batch"], dtype=np.intp)
    j = 0
    while True:
        channel.send(encode(Report.from_client(device.report(j, batch))))
        msg = decode(channel.recv(timeout))
        if isinstance(msg, Stop):
            break
        if not isinstance(msg, Broadcast) or msg.round != j or len(msg.gamma) != K:
            raise ProtocolError(f"client {client_id}: unexpected message in round {j}: {type(msg).__name__}")
        if msg.done:
            end = decode(channel.recv(timeout))
            if not isinstance(end, Stop):
                raise ProtocolError(f"client {client_id}: expected stop after final broadcast")
            break
        device.update(j, np.array(msg.gamma, dtype=np.int8), batch)
        batch = None if msg.batch is None else np.array(msg.batch, dtype=np.intp)
        j += 1
    channel.close()
    return device


# ------------------------------------------------------------- coordinator role


class FederatedCoordinator:
    """Drives rounds over a set of client channels.

    Holds only public data: K, M and the hyperparameters. Reports are
    reduced in client-id order whatever order they arrive in.
    """

    def __init__(self, K: int, M: int, n_clients: int, hyper: HyperParams, timeout: float = DEFAULT_TIMEOUT,
                 theta0: float = 0.0):
        self.core = Coordinator(K, M, hyper, theta0)
        self.K = K
        self.M = M
        self.n_clients = n_clients
        self.hyper = hyper
        self.timeout = timeout
        self.log = RoundLog()
        self.channels: dict[int, Any] = {}
        self.stop_reason = "maxiter"
        self._batch = None

    def _recv(self, channel, client_id: int, round_: int) -> tuple[Message, bytes]:
        try:
            frame = channel.recv(self.timeout)
        except TimeoutError:
            raise ClientTimeoutError(client_id, round_) from None
        body = decode_body(frame)
        self.log.append("up", frame, body)
        return from_body(body), frame

    def _send(self, channel, msg: Message) -> None:
        frame = encode(msg)
        channel.send(frame)
        self.log.append("down", frame)

    def handshake(self, channels: Sequence[Any]) -> None:
        self._batch = self.core.batch_for(0)
        config = {
            "M": self.M,
            "alpha0": self.hyper.alpha0,
            "kappa2": self.hyper.kappa2,
            "seed": self.hyper.seed,
            "batch": None if self._batch is None else [int(k) for k in self._batch],
        }
        for pos, ch in enumerate(channels):
            msg, _ = self._recv(ch, pos, -1)
            if not isinstance(msg, Hello):
                self._send(ch, Stop("expected hello"))
                raise HandshakeError(f"connection {pos}: expected hello, got {type(msg).__name__}")
            if msg.K != self.K:
                self._send(ch, Stop(f"K mismatch: coordinator has {self.K}"))
                raise HandshakeError(f"client {msg.client_id}: K mismatch ({msg.K} != {self.K})")
            if not 0 <= msg.client_id < self.n_clients or msg.client_id in self.channels:
                self._send(ch, Stop("bad or duplicate client id"))
                raise HandshakeError(f"bad or duplicate client id {msg.client_id}")
            self.channels[msg.client_id] = ch
            self._send(ch, Hello(msg.client_id, self.K, -1, config))

    def run_round(self, j: int):
        """Gather reports, select, step ``theta0`` and broadcast. Returns the outcome."""
        start = time.perf_counter()
        batch = self._batch
        reports = []
        for cid in sorted(self.channels):
            msg, _ = self._recv(self.channels[cid], cid, j)
            if isinstance(msg, Stop):
                raise ProtocolError(f"client {cid} stopped: {msg.reason}")
            if not isinstance(msg, Report) or msg.round != j or msg.client_id != cid:
                raise ProtocolError(f"client {cid}: expected report for round {j}")
            rep = msg.to_client(self.K)
            expected = None if batch is None else list(batch)
            got = None if rep.batch is None else list(rep.batch)
            if expected != got:
                raise ProtocolError(f"client {cid}: report does not cover the announced batch")
            reports.append(rep)
        outcome = self.core.process(j, reports, batch)
        self._batch = None if outcome.done else self.core.batch_for(j + 1)
        nxt = None if self._batch is None else tuple(int(k) for k in self._batch)
        bc = Broadcast(j, tuple(int(g) for g in outcome.selection.gamma), outcome.done, nxt)
        frame = encode(bc)
        for cid in sorted(self.channels):
            self.channels[cid].send(frame)
            self.log.append("down", frame)
        self.core.history[-1].wall_ms = (time.perf_counter() - start) * 1e3
        return outcome

    def run(self) -> str:
        for j in range(self.hyper.maxiter):
            outcome = self.run_round(j)
            if outcome.done:
                self.stop_reason = outcome.reason or "maxiter"
                break
        self.stop(self.stop_reason)
        return self.stop_reason

    def stop(self, reason: str) -> None:
        last = self.core.history[-1].iter if self.core.history else -1
        for cid in sorted(self.channels):
            try:
                self._send(self.channels[cid], Stop(reason, last))
            except OSError:
                pass


@dataclass
class FederatedRun:
    result: SolveResult
    log: RoundLog


def _client_jobs(instance: ProblemInstance, costs: CostProfile):
    return [(s, costs[s], instance.clients[s].weight) for s in range(instance.N)]


def run_federated(
    instance: ProblemInstance,
    hyper: Optional[HyperParams] = None,
    transport: str = "inprocess",
    timeout: float = DEFAULT_TIMEOUT,
    host: str = "127.0.0.1",
    theta0: float = 0.0,
    arrival_order: Optional[Sequence[int]] = None,
) -> FederatedRun:
    """All-in-one federated solve: clients run as worker threads.

    ``transport`` is ``"inprocess"`` (byte queues) or ``"tcp"`` (loopback
    sockets). ``arrival_order`` permutes the order in which client
    connections are handed to the coordinator.
    """
    hyper = hyper or HyperParams()
    costs = build_cost_profile(instance)
    coord = FederatedCoordinator(instance.K, instance.M, instance.N, hyper, timeout, theta0)
    order = list(range(instance.N)) if arrival_order is None else list(arrival_order)
    jobs = _client_jobs(instance, costs)

    with ThreadPoolExecutor(max_workers=instance.N) as pool:
        if transport == "inprocess":
            ends = [QueueChannel.pair() for _ in jobs]
            futures = [
                pool.submit(serve_client, ends[s][1], s, block, w, timeout) for s, block, w in jobs
            ]
            coord_channels = [ends[s][0] for s in order]
        elif transport == "tcp":
            server = socket.create_server((host, 0))
            server.settimeout(timeout)
            port = server.getsockname()[1]
            futures = []
            coord_channels = []
            try:
                for s in order:
                    _, block, w = jobs[s]
                    futures.append(pool.submit(_tcp_client, host, port, s, block, w, timeout))
                    conn, _ = server.accept()
                    coord_channels.append(SocketChannel(conn))
            finally:
                server.close()
        else:
            raise ValueError(f"unknown transport {transport!r}")
        try:
            coord.handshake(coord_channels)
            reason = coord.run()
        except Exception:
            coord.stop("aborted")
            raise
        finally:
            if transport == "tcp":
                for ch in coord_channels:
                    ch.close()
        devices = [f.result(timeout=timeout) for f in futures]

    devices.sort(key=lambda d: d.client_id)
    state = DualState(coord.core.theta0, [d.theta for d in devices], coord.core.m0, [d.m for d in devices])
    result = finish(instance, costs, coord.core, reason, hyper, state)
    return FederatedRun(result, coord.log)


def _tcp_client(host: str, port: int, client_id: int, block: np.ndarray, weight: float, timeout: float) -> LocalDevice:
    sock = socket.create_connection((host or "127.0.0.1", port), timeout=timeout)
    return serve_client(SocketChannel(sock), client_id, block, weight, timeout)


def coordinate_tcp(
    instance: ProblemInstance,
    hyper: HyperParams,
    listen: Optional[str] = None,
    timeout: float = DEFAULT_TIMEOUT,
    ready: Optional[threading.Event] = None,
) -> FederatedRun:
    """Coordinator for clients running in separate processes.

    Only K, M and the candidates are used during the rounds; the instance's
    client data is read afterwards to score the recovered support.
    """
    listen = listen or os.environ.get(LISTEN_ENV, "127.0.0.1:7001")
    host, port = parse_address(listen)
    coord = FederatedCoordinator(instance.K, instance.M, instance.N, hyper, timeout)
    server = socket.create_server((host, port))
    server.settimeout(timeout)
    if ready is not None:
        ready.set()
    channels = []
    try:
        for _ in range(instance.N):
            conn, _ = server.accept()
            channels.append(SocketChannel(conn))
    except socket.timeout:
        raise ProtocolError(f"only {len(channels)} of {instance.N} clients connected") from None
    finally:
        server.close()
    try:
        coord.handshake(channels)
        reason = coord.run()
    except Exception:
        coord.stop("aborted")
        raise
    finally:
        for ch in channels:
            ch.close()
    result = finish(instance, build_cost_profile(instance), coord.core, reason, hyper)
    return FederatedRun(result, coord.log)


def client_tcp(instance: ProblemInstance, client_id: int, connect: str, timeout: float = DEFAULT_TIMEOUT,
               retry_s: float = 10.0) -> LocalDevice:
    """One client process: computes its own costs and talks to the coordinator."""
    from .measures import pairwise_cost

    host, port = parse_address(connect)
    client = instance.clients[client_id]
    block = pairwise_cost(client.cloud.points, instance.candidates.points, instance.p)
    deadline = time.monotonic() + retry_s
    while True:
        try:
            sock = socket.create_connection((host or "127.0.0.1", port), timeout=timeout)
            break
        except ConnectionRefusedError:
            if time.monotonic() > deadline:
                raise
            time.sleep(0.1)
    return serve_client(SocketChannel(sock), client_id, block, client.weight, timeout)


# ---------------------------------------------------------------- privacy audit

UPSTREAM_FIELDS = {
    "report": {"type", "round", "client_id", "t"},
    "hello": {"type", "round", "client_id", "K"},
}


@dataclass
class AuditReport:
    passed: bool
    failures: list[tuple[int, str]]
    upstream_messages: int
    reals_per_report: dict[int, int]

    def summary(self) -> str:
        if self.passed:
            sizes = sorted(set(self.reals_per_report.values()))
            return f"PASS: {self.upstream_messages} upstream messages, reals per report {sizes}"
        first = self.failures[0]
        return f"FAIL: {len(self.failures)} violations; first at message {first[0]}: {first[1]}"


def _is_real(x: Any) -> bool:
    return isinstance(x, (int, float)) and not isinstance(x, bool) and math.isfinite(x)


def privacy_audit(log: RoundLog, instance: ProblemInstance) -> AuditReport:
    """Check every client-to-coordinator message against the disclosure rules.

    A report may only carry ``type``, ``round``, ``client_id`` and ``t``;
    ``t`` must be K reals, or ``[k, value]`` pairs matching the announced
    batch. A hello may only carry the public K. The audit is field-level:
    it does not estimate what could be inferred from the reported values.
    """
    K, N = instance.K, instance.N
    failures: list[tuple[int, str]] = []
    reals: dict[int, int] = {}
    announced: dict[int, Optional[int]] = {}
    n_up = 0
    for idx, rec in enumerate(log.records):
        msg = rec.msg
        kind = msg.get("type")
        if rec.dir == "down":
            if kind == "hello":
                cfg = msg.get("config") or {}
                announced[0] = None if cfg.get("batch") is None else len(cfg["batch"])
            elif kind == "broadcast":
                b = msg.get("batch")
                announced[msg["round"] + 1] = None if b is None else len(b)
            continue
        n_up += 1
        allowed = UPSTREAM_FIELDS.get(kind)
        if allowed is None:
            failures.append((idx, f"unexpected upstream message type {kind!r}"))
            continue
        extra = set(msg) - allowed
        if extra:
            failures.append((idx, f"disallowed fields {sorted(extra)} in {kind}"))
            continue
        cid = msg.get("client_id")
        if not isinstance(cid, int) or isinstance(cid, bool) or not 0 <= cid < N:
            failures.append((idx, f"client_id {cid!r} is not a small integer id"))
            continue
        if kind == "hello":
            if msg.get("K") != K:
                failures.append((idx, f"hello carries {msg.get('K')!r} instead of the public K={K}"))
            continue
        t = msg.get("t")
        if not isinstance(t, list):
            failures.append((idx, "report payload is not a list"))
            continue
        batch_len = announced.get(msg.get("round"), None)
        if t and isinstance(t[0], list):
            ok = all(
                len(p) == 2 and isinstance(p[0], int) and 0 <= p[0] < K and _is_real(p[1]) for p in t
            )
            if not ok:
                failures.append((idx, "sparse report entries must be [candidate index, real]"))
                continue
            if batch_len is not None and len(t) != batch_len:
                failures.append((idx, f"sparse report has {len(t)} entries, batch announced {batch_len}"))
                continue
            reals[idx] = len(t)
        else:
            if len(t) != K or not all(_is_real(x) for x in t):
                failures.append((idx, f"dense report must be exactly K={K} finite reals, got {len(t)}"))
                continue
            reals[idx] = len(t)
    return AuditReport(not failures, failures, n_up, reals)
