"""Time-stepping drivers for eight stages of parallelizing the force solver.

Every driver advances the same two-cluster initial condition with the same
kick-drift-kick leapfrog; they differ only in how a step obtains
accelerations:

0. ring direct sum -- body packets circulate around the rank ring and every
   pair interacts explicitly.
1. central tree -- bodies gather on rank 0, which builds the full octree and
   broadcasts it; each rank then walks its own bodies.
2. merged tree -- each rank builds an octree over its own bodies and a
   reduction merges them into the full tree before the broadcast.
3. sorted bodies -- a gather/sort/scatter pass first makes every rank's
   bodies contiguous in Morton order, so the local trees merge along thin
   shared spines.
4. cost balance -- the sorted partitions split on measured per-body
   interaction counts instead of equal counts.
5. in-place decomposition -- sorting and cost balancing run via neighbour
   exchanges; body payloads no longer funnel through rank 0.
6. hashed tree -- ranks keep only their own subtrees plus exchanged branch
   nodes, fetching remote children on demand while the walk blocks.
7. asynchronous walk -- like 6, but remote fetches overlap with continued
   local walking instead of blocking.

Stages 1 through 6 produce bit-identical trajectories: they all evaluate the
same tree walk against the same global octree, only the division of labour
changes.  Stage 7 reorders a few floating-point accumulations and stage 0
sums pairs in ring order, so both agree to roundoff instead.

Each step runs its phases in a fixed order -- decompose, build, share,
force, integrate -- and both wall time and message traffic are accounted to
the phase in progress.
"""

from __future__ import annotations

import struct
import time
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .decomposition import costzones, parallel_costzones, parallel_sort
from .flattree import FlatTree
from .hashed import (
    build_hashed,
    distribute_branch_nodes,
    make_child_server,
    traverse_async,
    traverse_sync,
)
from .initcond import two_clusters
from .integrator import drift, kick
from .morton import BOUNDS_PAD, DomainBounds, morton_key, morton_keys, sort_order
from .octree import OctCell, deserialize, leaf_cells, merge, serialize
from .physics import Bodies, accelerations_from_sources, direct_accelerations
from .transport import DEFAULT_TIMEOUT, Endpoint, run_spmd, run_spmd_sockets

__all__ = ["SimConfig", "SimResult", "simulate", "PHASES", "ALGORITHM_NAMES"]

PHASES = ("decompose", "build", "share", "force", "integrate", "other")

ALGORITHM_NAMES = {
    0: "ring direct sum",
    1: "central tree",
    2: "merged tree",
    3: "sorted bodies",
    4: "cost balance",
    5: "in-place decomposition",
    6: "hashed tree",
    7: "asynchronous walk",
}

# ring round-trip payloads (stage 0); 0xD0xx/0xE0xx belong to other modules
RING_TAG = 0xC001

_F64 = struct.Struct("<d")
_I64 = struct.Struct("<q")


@dataclass(frozen=True)
class SimConfig:
    """One simulation run: problem size, algorithm stage, and step control."""

    n: int
    algorithm: int = 7
    ranks: int = 1
    theta: float = 0.5
    dt: float = 0.01
    steps: int = 500
    eps: float = 0.05
    seed: int = 1

    def __post_init__(self) -> None:
        if self.algorithm not in ALGORITHM_NAMES:
            raise ValueError(f"algorithm must be 0..7, got {self.algorithm}")
        if self.n < 4:
            raise ValueError(f"need at least 4 bodies, got n={self.n}")
        if self.ranks < 1:
            raise ValueError(f"ranks must be positive, got {self.ranks}")
        if self.n < self.ranks:
            raise ValueError(
                f"every rank needs at least one body: n={self.n} < ranks={self.ranks}"
            )
        if not 0.0 <= self.theta:
            raise ValueError(f"theta must be non-negative, got {self.theta}")
        if not self.dt > 0.0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if self.steps < 0:
            raise ValueError(f"steps must be non-negative, got {self.steps}")
        if self.eps < 0.0:
            raise ValueError(f"eps must be non-negative, got {self.eps}")


@dataclass
class SimResult:
    """Aggregated outcome of a run: final state plus per-rank accounting."""

    config: SimConfig
    bodies: Bodies  # final global state, rank chunks concatenated in order
    phase_seconds: list[dict[str, float]]  # per rank
    message_stats: dict  # rank -> phase -> (messages, bytes)
    requests: int  # child-batch requests across all ranks (stages 6/7)
    snapshots: list[tuple[float, Bodies]]
    trace_lines: Optional[list[str]]
    wall_seconds: float

    @property
    def work_total(self) -> int:
        """Interaction-weighted work recorded by the final force pass."""
        return int(self.bodies.work.sum())

    def phase_totals(self) -> dict[str, tuple[int, int]]:
        """Messages and bytes sent per phase, summed over ranks."""
        totals = {phase: [0, 0] for phase in PHASES}
        for per_rank in self.message_stats.values():
            for phase, (msgs, nbytes) in per_rank.items():
                totals.setdefault(phase, [0, 0])
                totals[phase][0] += msgs
                totals[phase][1] += nbytes
        return {phase: (m, b) for phase, (m, b) in totals.items()}


class _PhaseClock:
    """Accumulates monotonic wall time per phase and tags message traffic.

    Entering a phase both charges the elapsed interval to the previous phase
    and switches the endpoint's accounting phase, so timing and message
    stats always agree on where a step's work happened.
    """

    def __init__(self, ep: Endpoint) -> None:
        self.ep = ep
        self.seconds = {phase: 0.0 for phase in PHASES}
        self._current = "other"
        self._mark = time.monotonic()
        ep.set_phase("other")

    def enter(self, phase: str) -> None:
        now = time.monotonic()
        self.seconds[self._current] += now - self._mark
        self._current = phase
        self._mark = now
        self.ep.set_phase(phase)

    def finish(self) -> dict[str, float]:
        self.enter("other")
        return dict(self.seconds)


@dataclass
class _RankResult:
    bodies: Bodies
    phase_seconds: dict[str, float]
    requests: int
    snapshots: list[tuple[float, bytes]]  # non-empty on rank 0 only


# -- shared helpers --------------------------------------------------------


def _even_cuts(n: int, parts: int) -> np.ndarray:
    """Contiguous near-equal counts; the first n % parts chunks get one extra."""
    sizes = np.full(parts, n // parts, dtype=np.int64)
    sizes[: n % parts] += 1
    return np.concatenate(([0], np.cumsum(sizes)))


def _initial_chunk(cfg: SimConfig, rank: int, size: int) -> Bodies:
    """This rank's slice of the deterministic initial condition.

    Every rank generates the same global body list from the seed and keeps a
    contiguous slice, so startup needs no messages at all.
    """
    allb = two_clusters(cfg.n, cfg.seed)
    cuts = _even_cuts(cfg.n, size)
    return allb.take(slice(int(cuts[rank]), int(cuts[rank + 1])))


def _shared_bounds(ep: Endpoint, positions: np.ndarray) -> DomainBounds:
    """Bounds of the global body cloud, bit-identical on every rank."""
    local = float(np.max(np.abs(positions))) if positions.size else 0.0
    blob = ep.allreduce(
        _F64.pack(local), lambda a, b: _F64.pack(max(_F64.unpack(a)[0], _F64.unpack(b)[0]))
    )
    extreme = _F64.unpack(blob)[0]
    return DomainBounds(BOUNDS_PAD * extreme if extreme > 0.0 else 1.0)


def _allreduce_min(ep: Endpoint, value: int) -> int:
    blob = ep.allreduce(
        _I64.pack(value), lambda a, b: _I64.pack(min(_I64.unpack(a)[0], _I64.unpack(b)[0]))
    )
    return _I64.unpack(blob)[0]


def _tree_bytes(bodies: Bodies, bounds: DomainBounds) -> bytes:
    """Serialized octree (with moments) over the given bodies."""
    order = sort_order(morton_keys(bodies.position, bounds))
    return build_hashed(bodies.take(order), bounds).to_serial_bytes()


def _restore_leaf_keys(root: OctCell) -> OctCell:
    """Requantize leaf body keys after deserialization.

    The wire format drops per-body Morton keys (a walk never needs them),
    but merging does: splitting a leaf routes both bodies by key bits.  The
    root side is exactly twice the bounds half-extent, so requantizing from
    the positions reproduces the original keys bit-for-bit.
    """
    bounds = DomainBounds(0.5 * root.side)
    for _, leaf in leaf_cells(root):
        leaf.body_key = morton_key(leaf.body_pos, bounds)
    return root


def _merge_blobs(lo: bytes, hi: bytes) -> bytes:
    """Reduction operator: merge two serialized octrees."""
    return serialize(
        merge(_restore_leaf_keys(deserialize(lo)), _restore_leaf_keys(deserialize(hi)))
    )


def _pack_sources(masses: np.ndarray, positions: np.ndarray) -> bytes:
    return (
        _I64.pack(len(masses))
        + masses.astype("<f8").tobytes()
        + positions.astype("<f8").tobytes()
    )


def _unpack_sources(blob: bytes) -> tuple[np.ndarray, np.ndarray]:
    (n,) = _I64.unpack_from(blob, 0)
    masses = np.frombuffer(blob, dtype="<f8", count=n, offset=8)
    positions = np.frombuffer(blob, dtype="<f8", count=3 * n, offset=8 + 8 * n)
    return masses, positions.reshape(n, 3)


# -- decomposition strategies ---------------------------------------------


class _StaticDecompose:
    """Ownership never changes: each rank keeps its initial slice."""

    def __init__(self, ep: Endpoint, cfg: SimConfig, clock: _PhaseClock) -> None:
        del ep, cfg, clock

    def __call__(self, local: Bodies) -> Bodies:
        return local


class _GatherDecompose:
    """Funnel every body through rank 0: sort by Morton key, cut, scatter.

    With ``balance`` the cuts come from the cost-zone split of the measured
    per-body work; otherwise counts are near-equal.
    """

    def __init__(
        self, ep: Endpoint, cfg: SimConfig, clock: _PhaseClock, balance: bool
    ) -> None:
        self.ep = ep
        self.balance = balance

    def __call__(self, local: Bodies) -> Bodies:
        ep = self.ep
        blobs = ep.gather(0, local.pack())
        parts = None
        if ep.rank == 0:
            allb = Bodies.concat([Bodies.unpack(b) for b in blobs])
            bounds = DomainBounds.from_positions(allb.position)
            allb = allb.take(sort_order(morton_keys(allb.position, bounds)))
            if self.balance:
                cuts = costzones(allb.work, ep.size)
            else:
                cuts = _even_cuts(len(allb), ep.size)
            parts = [
                allb.take(slice(int(cuts[r]), int(cuts[r + 1]))).pack()
                for r in range(ep.size)
            ]
        return Bodies.unpack(ep.scatter(0, parts))


class _ParallelDecompose:
    """Sort and rebalance in place with neighbour exchanges only.

    Remembers the step's global domain bounds so the tree build can reuse
    exactly the keys the sort was based on.
    """

    def __init__(self, ep: Endpoint, cfg: SimConfig, clock: _PhaseClock) -> None:
        self.ep = ep
        self.bounds: Optional[DomainBounds] = None

    def __call__(self, local: Bodies) -> Bodies:
        ep = self.ep
        self.bounds = _shared_bounds(ep, local.position)
        keys = morton_keys(local.position, self.bounds)
        fewest = _allreduce_min(ep, len(local))
        width = min(64, max(1, (fewest - 1) // 2))
        _, local = parallel_sort(ep, keys, local, k=width)
        _, local = parallel_costzones(ep, local.work, local)
        return local


# -- force strategies ------------------------------------------------------


class _RingForces:
    """Direct summation; every rank's packet visits every other rank once."""

    def __init__(self, ep: Endpoint, cfg: SimConfig, clock: _PhaseClock) -> None:
        self.ep = ep
        self.cfg = cfg
        self.clock = clock

    def __call__(self, local: Bodies, record_work: bool) -> int:
        ep, cfg = self.ep, self.cfg
        self.clock.enter("force")
        acc = direct_accelerations(local.mass, local.position, cfg.eps)
        masses, positions = local.mass, local.position
        for _ in range(ep.size - 1):
            ep.send((ep.rank + 1) % ep.size, RING_TAG, _pack_sources(masses, positions))
            masses, positions = _unpack_sources(ep.recv((ep.rank - 1) % ep.size, RING_TAG))
            acc += accelerations_from_sources(local.position, masses, positions, cfg.eps)
        local.acceleration[:] = acc
        if record_work:
            local.work[:] = cfg.n - 1  # every pair interacts, nothing is skipped
        return 0


class _BroadcastTreeForces:
    """Build one global octree, broadcast it, walk own bodies against it.

    ``merged=False`` gathers the bodies and builds serially on rank 0;
    ``merged=True`` builds per-rank trees and merge-reduces them.  Both
    yield byte-identical trees, so every stage from 1 to 5 walks exactly
    the same structure.
    """

    def __init__(
        self, ep: Endpoint, cfg: SimConfig, clock: _PhaseClock, merged: bool
    ) -> None:
        self.ep = ep
        self.cfg = cfg
        self.clock = clock
        self.merged = merged

    def __call__(self, local: Bodies, record_work: bool) -> int:
        ep, cfg, clock = self.ep, self.cfg, self.clock
        clock.enter("build")
        tree_blob = None
        if self.merged:
            bounds = _shared_bounds(ep, local.position)
            mine = _tree_bytes(local, bounds)
            clock.enter("share")
            reduced = ep.reduce(0, mine, _merge_blobs)
            if ep.rank == 0:
                flat = FlatTree.from_cell(deserialize(reduced))
                flat.compute_moments()
                tree_blob = flat.to_bytes()
        else:
            blobs = ep.gather(0, local.pack())
            if ep.rank == 0:
                allb = Bodies.concat([Bodies.unpack(b) for b in blobs])
                tree_blob = _tree_bytes(allb, DomainBounds.from_positions(allb.position))
            clock.enter("share")
        tree_blob = ep.broadcast(0, tree_blob)
        flat = FlatTree.from_bytes(tree_blob)
        clock.enter("force")
        acc, work = flat.traverse(local.position, cfg.theta, cfg.eps)
        local.acceleration[:] = acc
        if record_work:
            local.work[:] = work
        return 0


class _HashedForces:
    """Distributed tree: exchange branch nodes, fetch children on demand."""

    def __init__(
        self,
        ep: Endpoint,
        cfg: SimConfig,
        clock: _PhaseClock,
        decompose: _ParallelDecompose,
        asynchronous: bool,
    ) -> None:
        self.ep = ep
        self.cfg = cfg
        self.clock = clock
        self.decompose = decompose
        self.asynchronous = asynchronous

    def __call__(self, local: Bodies, record_work: bool) -> int:
        ep, cfg, clock = self.ep, self.cfg, self.clock
        clock.enter("build")
        tree = build_hashed(local, self.decompose.bounds)
        clock.enter("share")
        distribute_branch_nodes(ep, tree, local)
        clock.enter("force")
        serve = make_child_server(ep, tree)
        if self.asynchronous:
            acc, work, requests, _ = traverse_async(
                ep, tree, local.position, cfg.theta, cfg.eps, serve
            )
        else:
            acc, work, requests = traverse_sync(
                ep, tree, local.position, cfg.theta, cfg.eps, serve
            )
        ep.done_consensus(serve)
        local.acceleration[:] = acc
        if record_work:
            local.work[:] = work
        return requests


def _make_pipeline(
    ep: Endpoint, cfg: SimConfig, clock: _PhaseClock
) -> tuple[Callable[[Bodies], Bodies], Callable[[Bodies, bool], int]]:
    stage = cfg.algorithm
    if stage == 0:
        return _StaticDecompose(ep, cfg, clock), _RingForces(ep, cfg, clock)
    if stage == 1:
        return _StaticDecompose(ep, cfg, clock), _BroadcastTreeForces(
            ep, cfg, clock, merged=False
        )
    if stage == 2:
        return _StaticDecompose(ep, cfg, clock), _BroadcastTreeForces(
            ep, cfg, clock, merged=True
        )
    if stage in (3, 4):
        return _GatherDecompose(ep, cfg, clock, balance=stage == 4), _BroadcastTreeForces(
            ep, cfg, clock, merged=True
        )
    if stage == 5:
        return _ParallelDecompose(ep, cfg, clock), _BroadcastTreeForces(
            ep, cfg, clock, merged=True
        )
    decompose = _ParallelDecompose(ep, cfg, clock)
    return decompose, _HashedForces(ep, cfg, clock, decompose, asynchronous=stage == 7)


def _take_snapshot(
    ep: Endpoint,
    clock: _PhaseClock,
    local: Bodies,
    t: float,
    snaps: list[tuple[float, bytes]],
) -> None:
    clock.enter("other")
    blobs = ep.gather(0, local.pack())
    if ep.rank == 0:
        snaps.append((t, Bodies.concat([Bodies.unpack(b) for b in blobs]).pack()))


def _drive(ep: Endpoint, cfg: SimConfig, snapshot_every: Optional[int]) -> _RankResult:
    """The per-rank body of every driver: one shared leapfrog loop."""
    clock = _PhaseClock(ep)
    local = _initial_chunk(cfg, ep.rank, ep.size)
    local.work[:] = 1  # the first decomposition balances on counts
    decompose, forces = _make_pipeline(ep, cfg, clock)

    clock.enter("decompose")
    local = decompose(local)
    requests = forces(local, record_work=False)  # accelerations for the first kick
    snaps: list[tuple[float, bytes]] = []
    if snapshot_every:
        _take_snapshot(ep, clock, local, 0.0, snaps)

    for step in range(1, cfg.steps + 1):
        clock.enter("integrate")
        kick(local, 0.5 * cfg.dt)
        drift(local, cfg.dt)
        clock.enter("decompose")
        local = decompose(local)
        requests += forces(local, record_work=True)
        clock.enter("integrate")
        kick(local, 0.5 * cfg.dt)
        if snapshot_every and step % snapshot_every == 0:
            _take_snapshot(ep, clock, local, step * cfg.dt, snaps)

    return _RankResult(local, clock.finish(), requests, snaps)


def simulate(
    cfg: SimConfig,
    *,
    transport: str = "inproc",
    record_trace: bool = False,
    snapshot_every: Optional[int] = None,
    timeout: float = DEFAULT_TIMEOUT,
) -> SimResult:
    """Run one configuration to completion and gather the global outcome.

    ``transport`` selects threads sharing a process ("inproc") or one
    process per rank over TCP ("socket").  ``snapshot_every`` records the
    global body state at t = 0 and after every that-many steps.
    """
    if snapshot_every is not None and snapshot_every < 1:
        raise ValueError(f"snapshot interval must be positive, got {snapshot_every}")
    started = time.monotonic()
    if transport == "inproc":
        results, net = run_spmd(
            cfg.ranks, _drive, cfg, snapshot_every, record_trace=record_trace, timeout=timeout
        )
        stats = net.stats()
        trace = net.trace_lines() if record_trace else None
    elif transport == "socket":
        results, report = run_spmd_sockets(
            cfg.ranks, _drive, cfg, snapshot_every, timeout=timeout
        )
        stats = report.stats()
        trace = report.trace_lines() if record_trace else None
    else:
        raise ValueError(f"unknown transport {transport!r} (expected inproc or socket)")
    wall = time.monotonic() - started

    bodies = Bodies.concat([r.bodies for r in results])
    snapshots = [(t, Bodies.unpack(blob)) for t, blob in results[0].snapshots]
    return SimResult(
        config=cfg,
        bodies=bodies,
        phase_seconds=[r.phase_seconds for r in results],
        message_stats=stats,
        requests=sum(r.requests for r in results),
        snapshots=snapshots,
        trace_lines=trace,
        wall_seconds=wall,
    )
