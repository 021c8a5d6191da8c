"""Load-balanced partitioning of bodies across ranks.

Three pieces: a serial work partitioner (:func:`costzones`), a distributed
block odd-even sort that keeps bodies attached to their keys
(:func:`parallel_sort`), and a distributed single-sweep rebalancer
(:func:`parallel_costzones`) that shifts whole boundary runs between
adjacent ranks.

All three cut the globally key-sorted body sequence into contiguous runs,
so rank r's bodies always precede rank r+1's in key order.  A body whose
work straddles a cut is committed to the lower zone, which makes the
distributed rebalance land on exactly the same boundaries the serial
partitioner would pick.
"""

from __future__ import annotations

import struct
from typing import Optional

import numpy as np

from .physics import Bodies
from .transport import Endpoint

#: message tags this module claims (applications should avoid 0xE000-0xEFFF)
SORT_BLOCK_TAG = 0xE010
COST_HANDOFF_TAG = 0xE020
COST_PULL_TAG = 0xE022

_I64 = struct.Struct("<q")
_HANDOFF = struct.Struct("<Bq")  # mode (0 push / 1 pull), cumulative work


def costzones(works: np.ndarray, zones: int) -> np.ndarray:
    """Cut a work sequence into contiguous zones of near-equal total work.

    Returns ``zones + 1`` boundaries; zone k owns ``[Z[k], Z[k+1])``.  Zone k
    ends with the first body whose cumulative work reaches ``(k+1)/zones`` of
    the total (the straddling body is included), and the last zone takes the
    remainder.
    """
    works = np.asarray(works, dtype=np.int64)
    n = len(works)
    if zones < 1:
        raise ValueError("need at least one zone")
    if zones > n:
        raise ValueError(f"cannot cut {n} bodies into {zones} zones")
    if np.any(works < 0):
        raise ValueError("work estimates must be non-negative")
    prefix = np.cumsum(works)
    total = int(prefix[-1])
    # k*total is an exact integer in float64 for any realistic work sum, so
    # ties at exact zone multiples commit the straddling body to the left
    targets = np.arange(1, zones) * total / zones
    cuts = np.searchsorted(prefix, targets, side="left") + 1
    return np.concatenate(([0], cuts, [n])).astype(np.int64)


def _pack_block(keys: np.ndarray, works: Optional[np.ndarray], bodies: Optional[Bodies]) -> bytes:
    parts = [_I64.pack(len(keys)), keys.tobytes()]
    if works is not None:
        parts.append(np.ascontiguousarray(works, dtype=np.int64).tobytes())
    if bodies is not None:
        parts.append(bodies.pack())
    return b"".join(parts)


def _unpack_block(payload: bytes, key_dtype, with_works: bool, with_bodies: bool):
    (n,) = _I64.unpack_from(payload, 0)
    offset = _I64.size
    keys = np.frombuffer(payload, dtype=key_dtype, count=n, offset=offset).copy()
    offset += keys.nbytes
    works = None
    if with_works:
        works = np.frombuffer(payload, dtype=np.int64, count=n, offset=offset).copy()
        offset += works.nbytes
    bodies = None
    if with_bodies:
        bodies = Bodies.unpack(payload[offset:])
    return keys, works, bodies


def parallel_sort(
    ep: Endpoint,
    keys: np.ndarray,
    bodies: Optional[Bodies] = None,
    k: int = 64,
) -> tuple[np.ndarray, Optional[Bodies]]:
    """Sort a distributed sequence so every key on rank r <= those on r+1.

    Block odd-even transposition: alternating phases pair each rank with its
    right or left neighbour; the pair exchanges the left rank's k largest and
    the right rank's k smallest elements, and each side keeps its half of the
    merged 2k block.  Repeats until a full sweep changes nothing anywhere
    (OR-reduced).  Local element counts never change, and bodies travel with
    their keys.
    """
    keys = np.asarray(keys)
    n = len(keys)
    if bodies is not None and len(bodies) != n:
        raise ValueError("bodies and keys must align")
    if k < 1:
        raise ValueError("exchange width must be positive")
    if ep.size > 1 and n <= 2 * k:
        raise ValueError(
            f"partition too small for exchange width: {n} elements <= 2k = {2 * k}"
        )

    order = np.argsort(keys, kind="stable")
    keys = keys[order]
    if bodies is not None:
        bodies = bodies.take(order)
    if ep.size == 1:
        return keys, bodies

    total = _allreduce_sum(ep, n)
    max_sweeps = total // k + 2 * ep.size + 4

    def exchange(phase: int) -> bool:
        nonlocal keys, bodies
        if ep.rank % 2 == phase % 2:
            partner, am_left = ep.rank + 1, True
        else:
            partner, am_left = ep.rank - 1, False
        if not 0 <= partner < ep.size:
            return False
        mine = slice(n - k, n) if am_left else slice(0, k)
        my_keys = keys[mine]
        my_bodies = bodies.take(np.arange(n)[mine]) if bodies is not None else None
        ep.send(partner, SORT_BLOCK_TAG, _pack_block(my_keys, None, my_bodies))
        their_keys, _, their_bodies = _unpack_block(
            ep.recv(partner, SORT_BLOCK_TAG), keys.dtype, False, bodies is not None
        )
        # both sides order the union identically: lower rank's block first,
        # stable, so ties split consistently and the halves are disjoint
        if am_left:
            union_keys = np.concatenate([my_keys, their_keys])
        else:
            union_keys = np.concatenate([their_keys, my_keys])
        union_order = np.argsort(union_keys, kind="stable")
        take = union_order[:k] if am_left else union_order[k:]
        new_keys = union_keys[take]
        if np.array_equal(new_keys, my_keys):
            return False
        keys[mine] = new_keys
        if bodies is not None:
            union_bodies = (
                Bodies.concat([my_bodies, their_bodies])
                if am_left
                else Bodies.concat([their_bodies, my_bodies])
            )
            picked = union_bodies.take(take)
            # splice the replacement block in, then re-sort the whole rank
            resort = np.argsort(keys, kind="stable")
            lower = bodies.take(np.arange(0, n - k)) if am_left else picked
            upper = picked if am_left else bodies.take(np.arange(k, n))
            bodies = Bodies.concat([lower, upper]).take(resort)
            keys = keys[resort]
        else:
            keys = np.sort(keys, kind="stable")
        return True

    for _ in range(max_sweeps):
        changed = exchange(0)
        changed = exchange(1) or changed
        if not _allreduce_or(ep, changed):
            return keys, bodies
    raise RuntimeError("distributed sort failed to converge")


def parallel_costzones(
    ep: Endpoint,
    works: np.ndarray,
    bodies: Optional[Bodies] = None,
) -> tuple[np.ndarray, Optional[Bodies]]:
    """Rebalance a globally sorted distribution to near-equal work per rank.

    One left-to-right sweep over the rank boundaries: at boundary k, rank k
    either pushes its suffix beyond the zone target to rank k+1 (prepended
    there) or pulls a prefix back from rank k+1 (appended here).  The
    resulting boundaries equal what :func:`costzones` would compute on the
    concatenated work sequence; concatenation order and total work are
    conserved exactly.

    Raises "partition exhausted" if any rank would end up with zero bodies
    (a single adjacent-exchange sweep cannot rebalance past an empty rank).
    """
    works = np.ascontiguousarray(works, dtype=np.int64)
    if np.any(works < 0):
        raise ValueError("work estimates must be non-negative")
    if bodies is not None and len(bodies) != len(works):
        raise ValueError("bodies and works must align")
    if ep.size == 1:
        return works, bodies

    total = _allreduce_sum(ep, int(works.sum()))
    wpref = 0  # cumulative work owned by ranks left of this one
    for k in range(ep.size - 1):
        target = (k + 1) * total / ep.size
        if ep.rank == k:
            prefix = wpref + np.cumsum(works)
            if wpref >= target:
                cut = 0
            else:
                j = int(np.searchsorted(prefix, target, side="left"))
                cut = j + 1 if j < len(works) else -1
            if cut == 0:
                raise ValueError(f"partition exhausted at boundary {k}")
            if cut > 0:  # push the suffix (possibly empty) to the right
                handoff = int(prefix[cut - 1])
                suffix_idx = np.arange(cut, len(works))
                payload = _HANDOFF.pack(0, handoff) + _pack_block(
                    works[suffix_idx],
                    None,
                    bodies.take(suffix_idx) if bodies is not None else None,
                )
                ep.send(k + 1, COST_HANDOFF_TAG, payload)
                works = works[:cut]
                if bodies is not None:
                    bodies = bodies.take(np.arange(cut))
            else:  # even all my work falls short: pull from the right
                have = int(prefix[-1]) if len(works) else wpref
                ep.send(k + 1, COST_HANDOFF_TAG, _HANDOFF.pack(1, have))
                got_w, _, got_b = _unpack_block(
                    ep.recv(k + 1, COST_PULL_TAG), np.int64, False, bodies is not None
                )
                works = np.concatenate([works, got_w])
                if bodies is not None:
                    bodies = Bodies.concat([bodies, got_b])
        elif ep.rank == k + 1:
            payload = ep.recv(k, COST_HANDOFF_TAG)
            mode, cum = _HANDOFF.unpack_from(payload, 0)
            if mode == 0:  # pushed bodies arrive in front of mine
                got_w, _, got_b = _unpack_block(
                    payload[_HANDOFF.size :], np.int64, False, bodies is not None
                )
                works = np.concatenate([got_w, works])
                if bodies is not None:
                    bodies = Bodies.concat([got_b, bodies])
                wpref = cum
            else:  # the left rank pulls my prefix through the zone target
                prefix = cum + np.cumsum(works)
                j = int(np.searchsorted(prefix, target, side="left"))
                give = j + 1
                if give >= len(works):
                    raise ValueError(f"partition exhausted at boundary {k}")
                idx = np.arange(give)
                ep.send(
                    k,
                    COST_PULL_TAG,
                    _pack_block(
                        works[idx], None, bodies.take(idx) if bodies is not None else None
                    ),
                )
                works = works[give:]
                if bodies is not None:
                    bodies = bodies.take(np.arange(give, len(bodies)))
                wpref = int(prefix[give - 1])
        ep.barrier()
    if len(works) == 0:
        raise ValueError("partition exhausted: a rank ended with zero bodies")
    return works, bodies


def _allreduce_sum(ep: Endpoint, value: int) -> int:
    out = ep.allreduce(
        _I64.pack(int(value)),
        lambda a, b: _I64.pack(_I64.unpack(a)[0] + _I64.unpack(b)[0]),
    )
    return _I64.unpack(out)[0]


def _allreduce_or(ep: Endpoint, flag: bool) -> bool:
    out = ep.allreduce(
        _I64.pack(1 if flag else 0),
        lambda a, b: _I64.pack(_I64.unpack(a)[0] | _I64.unpack(b)[0]),
    )
    return bool(_I64.unpack(out)[0])
