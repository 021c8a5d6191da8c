"""Message transport for SPMD rank programs.

Ranks communicate exclusively through byte payloads addressed by
``(source, destination, tag)``.  Each such channel is FIFO, which gives two
load-bearing properties:

* collectives built from point-to-point sends need no sequence numbers as
  long as every rank issues them in the same program order, and
* the message trace is deterministic by construction: per-channel message
  sequences depend only on each rank's program order, never on thread or
  process interleaving, so traces of identical runs are byte-identical.

Two backends share the same :class:`Endpoint` interface: an in-process
backend running ranks as threads (the default; compiled kernels release the
GIL so force phases genuinely overlap), and a socket backend running ranks
as separate processes connected by a full TCP mesh.

Tags below :data:`TAG_LIMIT` are free for applications; higher values are
reserved for the collectives.  By convention a request sent with tag ``t``
is answered on tag ``t + 1`` (see :meth:`Endpoint.try_serve`).
"""

from __future__ import annotations

import hashlib
import pickle
import socket
import struct
import threading
import time
from collections import defaultdict, deque
from typing import Callable, Optional

#: application tags must stay below this; collectives use the space above.
TAG_LIMIT = 0xF000

_BCAST = 0xF001
_GATHER = 0xF002
_SCATTER = 0xF003
_REDUCE = 0xF004
_BARRIER_IN = 0xF005
_BARRIER_OUT = 0xF006
_DONE = 0xF007
_RELEASE = 0xF008
#: socket backend only: sent before closing so peers can tell a finished
#: rank from a crashed one.
_BYE = 0xFFFE

#: seconds a blocking receive waits before declaring the run wedged.
DEFAULT_TIMEOUT = 120.0

_FRAME = struct.Struct("<IHI")  # payload length, tag, source rank
_HELLO = struct.Struct("<I")


class TransportError(RuntimeError):
    """Protocol misuse or a peer failure."""


class TransportTimeout(TransportError):
    """A blocking receive exceeded its deadline."""


def payload_digest(payload: bytes) -> str:
    return hashlib.blake2b(payload, digest_size=8).hexdigest()


class _Mailbox:
    """One rank's incoming queues: ``(source, tag) -> deque of payloads``."""

    def __init__(self) -> None:
        self.cond = threading.Condition()
        self.queues: dict[tuple[int, int], deque[bytes]] = defaultdict(deque)

    def put(self, src: int, tag: int, payload: bytes) -> None:
        with self.cond:
            self.queues[(src, tag)].append(payload)
            self.cond.notify_all()

    def take(self, src: int, tag: int) -> Optional[bytes]:
        with self.cond:
            q = self.queues.get((src, tag))
            return q.popleft() if q else None

    def has_any(self) -> bool:
        return any(self.queues.values())


class Endpoint:
    """One rank's view of the network; collectives are shared across backends.

    Subclasses provide the point-to-point primitives (:meth:`send`,
    :meth:`try_recv`, :meth:`_wait`, :meth:`_check_failed`).
    """

    rank: int
    size: int
    timeout: float

    # -- primitives -------------------------------------------------------

    def send(self, dst: int, tag: int, payload: bytes) -> None:
        raise NotImplementedError

    def try_recv(self, src: int, tag: int) -> Optional[bytes]:
        raise NotImplementedError

    def _wait(self, timeout: float) -> None:
        """Block until any message may have arrived, up to ``timeout``."""
        raise NotImplementedError

    def _check_failed(self) -> None:
        raise NotImplementedError

    def _src_finished(self, src: int) -> bool:
        """Whether the peer has shut down cleanly (no more messages coming)."""
        return False

    def set_phase(self, name: str) -> None:
        raise NotImplementedError

    def local_stats(self) -> dict[str, tuple[int, int]]:
        """Per-phase (message count, byte count) sent by this rank."""
        raise NotImplementedError

    def _check_send(self, dst: int, tag: int) -> None:
        if dst == self.rank:
            raise TransportError(f"rank {self.rank} sent to itself")
        if not 0 <= dst < self.size:
            raise TransportError(f"destination {dst} out of range")
        if not 0 <= tag <= 0xFFFF:
            raise TransportError(f"tag {tag} out of range")

    # -- blocking receive -------------------------------------------------

    def recv(self, src: int, tag: int, timeout: Optional[float] = None) -> bytes:
        """Next payload on the (src, tag) channel, in send order."""
        deadline = time.monotonic() + (self.timeout if timeout is None else timeout)
        while True:
            self._check_failed()
            finished = self._src_finished(src)  # read before draining the queue
            got = self.try_recv(src, tag)
            if got is not None:
                return got
            if finished:
                raise TransportError(
                    f"rank {src} has finished; tag {tag} will never arrive"
                )
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise TransportTimeout(
                    f"rank {self.rank} timed out receiving tag {tag} from rank {src}"
                )
            self._wait(min(remaining, 0.05))

    # -- serving ----------------------------------------------------------

    def try_serve(self, tag: int, handler: Callable[[int, bytes], Optional[bytes]]) -> bool:
        """Answer one pending request, if any.

        Scans sources in rank order for a message with ``tag``; the handler's
        non-None return value is sent back to the requester on ``tag + 1``.
        Returns whether a request was served.
        """
        for src in range(self.size):
            if src == self.rank:
                continue
            payload = self.try_recv(src, tag)
            if payload is not None:
                reply = handler(src, payload)
                if reply is not None:
                    self.send(src, tag + 1, reply)
                return True
        return False

    # -- collectives ------------------------------------------------------

    def broadcast(self, root: int, payload: Optional[bytes] = None) -> bytes:
        if self.rank == root:
            assert payload is not None
            for dst in range(self.size):
                if dst != root:
                    self.send(dst, _BCAST, payload)
            return payload
        return self.recv(root, _BCAST)

    def gather(self, root: int, payload: bytes) -> Optional[list[bytes]]:
        """Every rank's payload, in rank order, at the root (None elsewhere)."""
        if self.rank == root:
            out = []
            for src in range(self.size):
                out.append(payload if src == root else self.recv(src, _GATHER))
            return out
        self.send(root, _GATHER, payload)
        return None

    def scatter(self, root: int, payloads: Optional[list[bytes]] = None) -> bytes:
        """Rank r receives ``payloads[r]``; sizes may differ per rank."""
        if self.rank == root:
            assert payloads is not None and len(payloads) == self.size
            for dst in range(self.size):
                if dst != root:
                    self.send(dst, _SCATTER, payloads[dst])
            return payloads[root]
        return self.recv(root, _SCATTER)

    def reduce(
        self, root: int, value: bytes, op: Callable[[bytes, bytes], bytes]
    ) -> Optional[bytes]:
        """Binomial-tree reduction; ``op`` combines (lower rank, higher rank).

        The combination tree is fixed by rank numbering, so the result is
        deterministic even for non-associative floating-point ops.
        """
        rel = (self.rank - root) % self.size
        k = 1
        while k < self.size:
            if rel & k:
                self.send((rel - k + root) % self.size, _REDUCE, value)
                return None
            partner = rel + k
            if partner < self.size:
                got = self.recv((partner + root) % self.size, _REDUCE)
                value = op(value, got)
            k <<= 1
        return value

    def allreduce(self, value: bytes, op: Callable[[bytes, bytes], bytes]) -> bytes:
        reduced = self.reduce(0, value, op)
        return self.broadcast(0, reduced)

    def barrier(self) -> None:
        if self.rank == 0:
            for src in range(1, self.size):
                self.recv(src, _BARRIER_IN)
            for dst in range(1, self.size):
                self.send(dst, _BARRIER_OUT, b"")
        else:
            self.send(0, _BARRIER_IN, b"")
            self.recv(0, _BARRIER_OUT)

    def done_consensus(self, serve: Optional[Callable[[], bool]] = None) -> None:
        """Block until every rank has called this, serving requests meanwhile.

        Used by request/reply protocols: a rank that finished its own work
        must keep answering peers until all ranks are done.  Rank 0 collects
        one token from every other rank, then releases everyone.
        """
        if self.rank == 0:
            waiting = set(range(1, self.size))
            deadline = time.monotonic() + self.timeout
            while waiting:
                self._check_failed()
                progressed = False
                for src in list(waiting):
                    if self.try_recv(src, _DONE) is not None:
                        waiting.discard(src)
                        progressed = True
                if serve is not None and serve():
                    progressed = True
                if not progressed:
                    if time.monotonic() > deadline:
                        raise TransportTimeout(
                            f"consensus stalled; still waiting on ranks {sorted(waiting)}"
                        )
                    self._wait(0.005)
            for dst in range(1, self.size):
                self.send(dst, _RELEASE, b"")
        else:
            self.send(0, _DONE, b"")
            deadline = time.monotonic() + self.timeout
            while True:
                self._check_failed()
                if self.try_recv(0, _RELEASE) is not None:
                    return
                if not (serve is not None and serve()):
                    if time.monotonic() > deadline:
                        raise TransportTimeout("consensus release never arrived")
                    self._wait(0.005)


class InProcNetwork:
    """Shared state for ranks running as threads in one process."""

    def __init__(self, ranks: int, record_trace: bool = False, timeout: float = DEFAULT_TIMEOUT):
        if ranks < 1:
            raise ValueError("need at least one rank")
        self.ranks = ranks
        self.timeout = timeout
        self._mailboxes = [_Mailbox() for _ in range(ranks)]
        self._stats: list[dict[str, list[int]]] = [
            defaultdict(lambda: [0, 0]) for _ in range(ranks)
        ]
        self._phase = ["other"] * ranks
        self._trace: Optional[dict[tuple[int, int, int], list[tuple[int, str]]]] = (
            defaultdict(list) if record_trace else None
        )
        self._trace_lock = threading.Lock()
        self._failure: Optional[str] = None

    def endpoint(self, rank: int) -> "InProcEndpoint":
        if not 0 <= rank < self.ranks:
            raise ValueError(f"rank {rank} out of range")
        return InProcEndpoint(self, rank)

    def fail(self, message: str) -> None:
        """Mark the run failed and wake every blocked receiver."""
        self._failure = self._failure or message
        for box in self._mailboxes:
            with box.cond:
                box.cond.notify_all()

    def deliver(self, src: int, dst: int, tag: int, payload: bytes, phase: str) -> None:
        stat = self._stats[src][phase]
        stat[0] += 1
        stat[1] += len(payload)
        if self._trace is not None:
            with self._trace_lock:
                self._trace[(src, dst, tag)].append((len(payload), payload_digest(payload)))
        self._mailboxes[dst].put(src, tag, payload)

    def stats(self) -> dict[int, dict[str, tuple[int, int]]]:
        return {
            r: {phase: (c[0], c[1]) for phase, c in per.items()}
            for r, per in enumerate(self._stats)
        }

    def trace_lines(self) -> list[str]:
        """Canonical trace: per-channel sequences, channels in sorted order."""
        if self._trace is None:
            raise TransportError("network was created without record_trace")
        lines = []
        for (src, dst, tag) in sorted(self._trace):
            for seq, (nbytes, digest) in enumerate(self._trace[(src, dst, tag)]):
                lines.append(f"{src}->{dst} tag={tag} seq={seq} bytes={nbytes} {digest}")
        return lines


class InProcEndpoint(Endpoint):
    def __init__(self, net: InProcNetwork, rank: int):
        self.net = net
        self.rank = rank
        self.size = net.ranks
        self.timeout = net.timeout
        self._box = net._mailboxes[rank]

    def send(self, dst: int, tag: int, payload: bytes) -> None:
        self._check_send(dst, tag)
        self.net.deliver(self.rank, dst, tag, bytes(payload), self.net._phase[self.rank])

    def try_recv(self, src: int, tag: int) -> Optional[bytes]:
        return self._box.take(src, tag)

    def _wait(self, timeout: float) -> None:
        with self._box.cond:
            if not self._box.has_any():
                self._box.cond.wait(timeout)

    def _check_failed(self) -> None:
        if self.net._failure is not None:
            raise TransportError(f"peer failure: {self.net._failure}")

    def set_phase(self, name: str) -> None:
        self.net._phase[self.rank] = name

    def local_stats(self) -> dict[str, tuple[int, int]]:
        return {phase: (c[0], c[1]) for phase, c in self.net._stats[self.rank].items()}


def run_spmd(
    ranks: int,
    fn: Callable[..., object],
    *args,
    record_trace: bool = False,
    timeout: float = DEFAULT_TIMEOUT,
) -> tuple[list, InProcNetwork]:
    """Run ``fn(endpoint, *args)`` on every rank as threads; return results.

    If any rank raises, the run is aborted (blocked receives on other ranks
    raise instead of deadlocking) and the first error is re-raised.
    """
    net = InProcNetwork(ranks, record_trace=record_trace, timeout=timeout)
    results: list = [None] * ranks
    errors: list[tuple[int, BaseException]] = []

    def runner(rank: int) -> None:
        try:
            results[rank] = fn(net.endpoint(rank), *args)
        except BaseException as exc:  # propagate to the caller, wake peers
            errors.append((rank, exc))
            net.fail(f"rank {rank}: {exc!r}")

    threads = [
        threading.Thread(target=runner, args=(r,), name=f"rank-{r}", daemon=True)
        for r in range(ranks)
    ]
    for t in threads:
        t.start()
    for t in threads:
        t.join(timeout + 60.0)
        if t.is_alive():
            net.fail("a rank thread hung")
            raise TransportError(f"{t.name} did not finish")
    if errors:
        # prefer the root cause over secondary "peer failure" aborts
        primary = [
            (r, e)
            for r, e in errors
            if not (isinstance(e, TransportError) and "peer failure" in str(e))
        ]
        rank, exc = min(primary or errors, key=lambda e: e[0])
        raise exc
    return results, net


# -- socket backend --------------------------------------------------------


class SocketEndpoint(Endpoint):
    """One rank process, connected to every peer by a TCP stream.

    A reader thread per peer demultiplexes frames into the local mailbox;
    sends write frames directly.  Statistics and traces are local to the
    process and shipped back to the parent when the rank function returns.
    """

    def __init__(self, rank: int, size: int, peers: dict[int, socket.socket], timeout: float):
        self.rank = rank
        self.size = size
        self.timeout = timeout
        self._peers = peers
        self._box = _Mailbox()
        self._phase = "other"
        self._stats: dict[str, list[int]] = defaultdict(lambda: [0, 0])
        self._trace: dict[tuple[int, int, int], list[tuple[int, str]]] = defaultdict(list)
        self._failure: Optional[str] = None
        self._closing = False
        self._finished = {p: False for p in peers}
        self._send_locks = {p: threading.Lock() for p in peers}
        self._readers = [
            threading.Thread(target=self._reader, args=(p,), daemon=True) for p in peers
        ]
        for t in self._readers:
            t.start()

    def _reader(self, peer: int) -> None:
        sock = self._peers[peer]
        try:
            while True:
                header = _recv_exact(sock, _FRAME.size)
                if header is None:
                    break
                length, tag, src = _FRAME.unpack(header)
                payload = _recv_exact(sock, length) if length else b""
                if payload is None:
                    break
                if tag == _BYE:
                    self._finished[peer] = True
                    with self._box.cond:
                        self._box.cond.notify_all()
                    continue
                self._box.put(src, tag, payload)
        except OSError:
            pass
        # EOF after a bye (or during our own shutdown) is a clean exit;
        # EOF without one means the peer process died mid-protocol
        if not self._closing and not self._finished[peer]:
            self._failure = self._failure or f"connection to rank {peer} lost"
            with self._box.cond:
                self._box.cond.notify_all()

    def send(self, dst: int, tag: int, payload: bytes) -> None:
        self._check_send(dst, tag)
        payload = bytes(payload)
        stat = self._stats[self._phase]
        stat[0] += 1
        stat[1] += len(payload)
        self._trace[(self.rank, dst, tag)].append((len(payload), payload_digest(payload)))
        frame = _FRAME.pack(len(payload), tag, self.rank)
        with self._send_locks[dst]:
            self._peers[dst].sendall(frame + payload)

    def try_recv(self, src: int, tag: int) -> Optional[bytes]:
        return self._box.take(src, tag)

    def _wait(self, timeout: float) -> None:
        with self._box.cond:
            if not self._box.has_any():
                self._box.cond.wait(timeout)

    def _check_failed(self) -> None:
        if self._failure is not None:
            raise TransportError(f"peer failure: {self._failure}")

    def _src_finished(self, src: int) -> bool:
        return self._finished.get(src, False)

    def set_phase(self, name: str) -> None:
        self._phase = name

    def local_stats(self) -> dict[str, tuple[int, int]]:
        return {phase: (c[0], c[1]) for phase, c in self._stats.items()}

    def close(self) -> None:
        self._closing = True
        for dst, sock in self._peers.items():
            try:
                with self._send_locks[dst]:
                    sock.sendall(_FRAME.pack(0, _BYE, self.rank))
                sock.shutdown(socket.SHUT_WR)
            except OSError:
                pass
        for t in self._readers:
            t.join(10.0)
        for sock in self._peers.values():
            sock.close()


def _recv_exact(sock: socket.socket, n: int) -> Optional[bytes]:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            return None
        buf.extend(chunk)
    return bytes(buf)


def _mesh_connect(
    rank: int, size: int, listener: socket.socket, ports: list[int]
) -> dict[int, socket.socket]:
    """Full mesh: connect to lower ranks, accept from higher ranks."""
    peers: dict[int, socket.socket] = {}
    for lower in range(rank):
        s = socket.create_connection(("127.0.0.1", ports[lower]), timeout=30.0)
        s.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        s.sendall(_HELLO.pack(rank))
        peers[lower] = s
    for _ in range(size - 1 - rank):
        s, _addr = listener.accept()
        s.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        hello = _recv_exact(s, _HELLO.size)
        if hello is None:
            raise TransportError("peer vanished during rendezvous")
        peers[_HELLO.unpack(hello)[0]] = s
    listener.close()
    return peers


def _socket_worker(rank, size, listener, ports, fn, args, timeout, pipe):
    outcome: dict = {}
    ep = None
    try:
        peers = _mesh_connect(rank, size, listener, ports)
        ep = SocketEndpoint(rank, size, peers, timeout)
        result = fn(ep, *args)
        outcome = {
            "result": result,
            "stats": ep.local_stats(),
            "trace": dict(ep._trace),
        }
    except BaseException as exc:
        outcome = {"error": f"rank {rank}: {exc!r}"}
    finally:
        if ep is not None:
            ep.close()
        pipe.send(pickle.dumps(outcome))
        pipe.close()


class SocketRunReport:
    """Stats and trace for a socket run, mirroring :class:`InProcNetwork`."""

    def __init__(self, per_rank_stats, merged_trace):
        self._stats = per_rank_stats
        self._trace = merged_trace

    def stats(self):
        return self._stats

    def trace_lines(self) -> list[str]:
        lines = []
        for (src, dst, tag) in sorted(self._trace):
            for seq, (nbytes, digest) in enumerate(self._trace[(src, dst, tag)]):
                lines.append(f"{src}->{dst} tag={tag} seq={seq} bytes={nbytes} {digest}")
        return lines


def run_spmd_sockets(
    ranks: int,
    fn: Callable[..., object],
    *args,
    timeout: float = DEFAULT_TIMEOUT,
) -> tuple[list, SocketRunReport]:
    """Run ``fn(endpoint, *args)`` as one process per rank over TCP."""
    import multiprocessing

    ctx = multiprocessing.get_context("fork")
    listeners = []
    ports = []
    for _ in range(ranks):
        s = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        s.bind(("127.0.0.1", 0))
        s.listen(ranks)
        listeners.append(s)
        ports.append(s.getsockname()[1])

    procs = []
    pipes = []
    for r in range(ranks):
        parent, child = ctx.Pipe()
        p = ctx.Process(
            target=_socket_worker,
            args=(r, ranks, listeners[r], ports, fn, args, timeout, child),
            daemon=True,
        )
        p.start()
        child.close()
        procs.append(p)
        pipes.append(parent)
    for s in listeners:
        s.close()

    outcomes = []
    for r, pipe in enumerate(pipes):
        if pipe.poll(timeout + 60.0):
            outcomes.append(pickle.loads(pipe.recv()))
        else:
            outcomes.append({"error": f"rank {r}: no result (hung?)"})
        pipe.close()
    for p in procs:
        p.join(10.0)
        if p.is_alive():
            p.terminate()

    errors = [o["error"] for o in outcomes if "error" in o]
    if errors:
        raise TransportError("; ".join(errors))
    results = [o["result"] for o in outcomes]
    stats = {r: o["stats"] for r, o in enumerate(outcomes)}
    merged: dict = {}
    for o in outcomes:
        merged.update(o["trace"])
    return results, SocketRunReport(stats, merged)
