"""Messaging layer: point-to-point, collectives, consensus, determinism."""

import struct
import threading
import time

import numpy as np
import pytest

from nbsim.transport import (
    InProcNetwork,
    TransportError,
    TransportTimeout,
    run_spmd,
    run_spmd_sockets,
)


def f8(x: float) -> bytes:
    return struct.pack("<d", x)


def unf8(b: bytes) -> float:
    return struct.unpack("<d", b)[0]


class TestPointToPoint:
    def test_ping_pong(self):
        def fn(ep):
            if ep.rank == 0:
                ep.send(1, 4, b"ping")
                return ep.recv(1, 6)
            got = ep.recv(0, 4)
            ep.send(0, 6, got + b"-pong")
            return got

        results, _ = run_spmd(2, fn)
        assert results == [b"ping-pong", b"ping"]

    def test_channel_is_fifo(self):
        def fn(ep):
            if ep.rank == 0:
                for i in range(200):
                    ep.send(1, 2, struct.pack("<i", i))
                return None
            return [struct.unpack("<i", ep.recv(0, 2))[0] for _ in range(200)]

        results, _ = run_spmd(2, fn)
        assert results[1] == list(range(200))

    def test_tags_are_independent_channels(self):
        def fn(ep):
            if ep.rank == 0:
                ep.send(1, 10, b"a")
                ep.send(1, 12, b"b")
                ep.send(1, 10, b"c")
                return None
            # receive the tag-12 message first although it was sent second
            first = ep.recv(0, 12)
            return [first, ep.recv(0, 10), ep.recv(0, 10)]

        results, _ = run_spmd(2, fn)
        assert results[1] == [b"b", b"a", b"c"]

    def test_try_recv_nonblocking(self):
        def fn(ep):
            if ep.rank == 0:
                assert ep.try_recv(1, 2) is None
                ep.send(1, 8, b"")
                got = ep.recv(1, 2)
                assert ep.try_recv(1, 2) is None
                return got
            ep.recv(0, 8)  # wait until rank 0 has checked its empty queue
            ep.send(0, 2, b"x")
            return None

        results, _ = run_spmd(2, fn)
        assert results[0] == b"x"

    def test_self_send_rejected(self):
        def fn(ep):
            with pytest.raises(TransportError, match="itself"):
                ep.send(ep.rank, 2, b"oops")

        run_spmd(1, fn)

    def test_recv_timeout(self):
        def fn(ep):
            if ep.rank == 0:
                with pytest.raises(TransportTimeout):
                    ep.recv(1, 2, timeout=0.05)

        run_spmd(2, fn, timeout=5.0)

    def test_peer_failure_unblocks_and_propagates(self):
        def fn(ep):
            if ep.rank == 0:
                ep.recv(1, 2)  # never sent; must abort, not deadlock
            else:
                raise ValueError("deliberate rank failure")

        with pytest.raises(ValueError, match="deliberate"):
            run_spmd(2, fn, timeout=30.0)


class TestCollectives:
    @pytest.mark.parametrize("ranks,root", [(2, 0), (4, 0), (4, 3), (5, 2)])
    def test_broadcast(self, ranks, root):
        def fn(ep):
            payload = b"hello" if ep.rank == root else None
            return ep.broadcast(root, payload)

        results, _ = run_spmd(ranks, fn)
        assert results == [b"hello"] * ranks

    @pytest.mark.parametrize("ranks,root", [(3, 0), (4, 2)])
    def test_gather_irregular_sizes(self, ranks, root):
        def fn(ep):
            return ep.gather(root, bytes([ep.rank]) * ep.rank)

        results, _ = run_spmd(ranks, fn)
        for r, res in enumerate(results):
            if r == root:
                assert res == [bytes([i]) * i for i in range(ranks)]
            else:
                assert res is None

    @pytest.mark.parametrize("ranks,root", [(3, 0), (5, 4)])
    def test_scatter_irregular_sizes(self, ranks, root):
        def fn(ep):
            payloads = None
            if ep.rank == root:
                payloads = [bytes([i]) * (i + 1) for i in range(ranks)]
            return ep.scatter(root, payloads)

        results, _ = run_spmd(ranks, fn)
        assert results == [bytes([i]) * (i + 1) for i in range(ranks)]

    @pytest.mark.parametrize(
        "ranks,root,expected",
        [
            (4, 0, b"0|1|2|3"),
            (5, 0, b"0|1|2|3|4"),
            (7, 0, b"0|1|2|3|4|5|6"),
            (4, 2, b"2|3|0|1"),
        ],
    )
    def test_reduce_combination_order_is_fixed(self, ranks, root, expected):
        # the binomial tree always combines (lower relative rank, higher),
        # pinning the floating-point combination order of real reductions
        def fn(ep):
            out = ep.reduce(root, str(ep.rank).encode(), lambda a, b: a + b"|" + b)
            return out

        results, _ = run_spmd(ranks, fn)
        for r, res in enumerate(results):
            assert res == (expected if r == root else None)

    def test_allreduce_max(self):
        def fn(ep):
            op = lambda a, b: f8(max(unf8(a), unf8(b)))
            return unf8(ep.allreduce(f8(float(ep.rank * 7 % 5)), op))

        results, _ = run_spmd(5, fn)
        assert results == [4.0] * 5  # max of {0,2,4,1,3}

    def test_barrier_orders_phases(self):
        log: list[str] = []
        lock = threading.Lock()

        def fn(ep):
            with lock:
                log.append(f"pre{ep.rank}")
            ep.barrier()
            with lock:
                log.append(f"post{ep.rank}")

        run_spmd(4, fn)
        first_post = next(i for i, e in enumerate(log) if e.startswith("post"))
        assert all(e.startswith("pre") for e in log[:first_post])
        assert len([e for e in log if e.startswith("pre")]) == 4


class TestServing:
    def test_request_reply(self):
        def fn(ep):
            if ep.rank == 1:
                ep.send(0, 20, struct.pack("<i", 9))
                return struct.unpack("<i", ep.recv(0, 21))[0]
            served = False
            while not served:
                served = ep.try_serve(
                    20, lambda src, p: struct.pack("<i", struct.unpack("<i", p)[0] ** 2)
                )
            return None

        results, _ = run_spmd(2, fn)
        assert results[1] == 81

    def test_done_consensus_serves_until_everyone_finishes(self):
        # rank 0 finishes instantly but must keep answering rank 1's
        # requests from inside the consensus loop
        def fn(ep):
            def handler(src, payload):
                return payload * 2

            if ep.rank == 0:
                ep.done_consensus(serve=lambda: ep.try_serve(30, handler))
                return None
            answers = []
            for i in range(5):
                time.sleep(0.01)
                ep.send(0, 30, bytes([i]))
                answers.append(ep.recv(0, 31))
            ep.done_consensus(serve=lambda: ep.try_serve(30, handler))
            return answers

        results, _ = run_spmd(2, fn)
        assert results[1] == [bytes([i, i]) for i in range(5)]

    def test_done_consensus_three_ranks(self):
        def fn(ep):
            if ep.rank == 2:
                time.sleep(0.05)
            ep.done_consensus()
            return ep.rank

        results, _ = run_spmd(3, fn)
        assert results == [0, 1, 2]


class TestAccountingAndTrace:
    def test_phase_attribution(self):
        def fn(ep):
            if ep.rank == 0:
                ep.set_phase("build")
                ep.send(1, 2, b"xxxx")
                ep.send(1, 2, b"yy")
                ep.set_phase("force")
                ep.send(1, 4, b"z")
            else:
                ep.recv(0, 2)
                ep.recv(0, 2)
                ep.recv(0, 4)
            return ep.local_stats()

        results, net = run_spmd(2, fn)
        assert results[0]["build"] == (2, 6)
        assert results[0]["force"] == (1, 1)
        assert net.stats()[0]["build"] == (2, 6)
        assert net.stats()[1] == {}

    def trace_scenario(self, stagger: float):
        def fn(ep):
            if ep.rank != 2:
                time.sleep(stagger * ep.rank)
                for i in range(3):
                    ep.send(2, 2, bytes([ep.rank, i]))
            else:
                for src in (0, 1):
                    for _ in range(3):
                        ep.recv(src, 2)
            ep.barrier()
            ep.allreduce(f8(ep.rank), lambda a, b: f8(unf8(a) + unf8(b)))

        _, net = run_spmd(3, fn, record_trace=True)
        return net.trace_lines()

    def test_trace_is_deterministic_across_interleavings(self):
        # staggering the senders changes the arrival interleaving but not
        # the per-channel sequences, so the canonical trace is identical
        a = self.trace_scenario(0.0)
        b = self.trace_scenario(0.02)
        assert a == b
        assert len(a) > 0

    def test_trace_reflects_payload_content(self):
        def fn(payload, ep):
            if ep.rank == 0:
                ep.send(1, 2, payload)
            else:
                ep.recv(0, 2)

        _, net1 = run_spmd(2, lambda ep: fn(b"aaaa", ep), record_trace=True)
        _, net2 = run_spmd(2, lambda ep: fn(b"aaab", ep), record_trace=True)
        assert net1.trace_lines() != net2.trace_lines()

    def test_trace_requires_recording(self):
        _, net = run_spmd(2, lambda ep: ep.barrier())
        with pytest.raises(TransportError, match="record_trace"):
            net.trace_lines()


def _socket_fn(ep):
    ep.set_phase("exchange")
    if ep.rank == 0:
        ep.send(1, 2, b"over-tcp")
    elif ep.rank == 1:
        assert ep.recv(0, 2) == b"over-tcp"
    gathered = ep.gather(0, bytes([ep.rank + 65]))
    total = unf8(ep.allreduce(f8(float(ep.rank)), lambda a, b: f8(unf8(a) + unf8(b))))
    ep.barrier()
    return gathered, total


class TestSocketBackend:
    def test_mesh_collectives_and_results(self):
        results, report = run_spmd_sockets(3, _socket_fn, timeout=60.0)
        assert results[0] == ([b"A", b"B", b"C"], 3.0)
        assert results[1] == (None, 3.0)
        assert report.stats()[0]["exchange"][0] >= 1
        assert any("tag=2" in line for line in report.trace_lines())

    def test_trace_matches_inproc(self):
        _, inproc = run_spmd(3, _socket_fn, record_trace=True)
        _, sock = run_spmd_sockets(3, _socket_fn, timeout=60.0)
        assert sock.trace_lines() == inproc.trace_lines()
