"""Hash-addressed octree and the branch-node protocol for distributed trees.

Each rank keeps its cells in flat arrays (the same layout the compiled
kernels in :mod:`nbsim.flattree` consume) indexed by a chained hash table
over hierarchical octal keys: the root has key 1 and child ``i`` of key
``k`` has key ``(k << 3) | i``, so a key spells out a cell's whole octant
path and doubles as its identity on every rank.

The distribution protocol has three steps.  Each rank first trades one
boundary body with each Morton-order neighbour and inserts the copies into
its local tree, which forces the same leaf splits the full tree would
have.  It then finds its *branch nodes* -- the coarsest cells whose
domains hold none of those copies, hence only its own bodies -- and
broadcasts them.  Receivers splice the arrivals in, fill in any missing
ancestors, and recombine moments bottom-up, leaving every rank with a tree
whose cells agree bit-for-bit with a serial build over all bodies.  Cells
below another rank's branch nodes stay remote until a traversal requests
them as child batches from their owner.
"""

from __future__ import annotations

import struct
import time
from collections import deque
from typing import Callable, Optional

import numba
import numpy as np

from .flattree import _STACK_CAP, _moments_kernel
from .morton import MORTON_BITS, DomainBounds, morton_key, morton_keys
from .octree import _HEADER, _MAGIC, _RECORD, MAX_DEPTH, WORK_PC, WORK_PP
from .physics import Bodies
from .transport import Endpoint, TransportTimeout

__all__ = [
    "ROOT_KEY",
    "LOCAL_OWNER",
    "REMOTE_CHILD",
    "HashedTree",
    "key_level",
    "child_key",
    "parent_key",
    "key_slot",
    "body_key_to_cell_key",
    "cell_geometry",
    "build_hashed",
    "insert_neighbour_body",
    "branch_node_indices",
    "distribute_branch_nodes",
    "recombine_dirty",
    "make_child_server",
    "fetch_children",
    "insert_child_batch",
    "traverse_sync",
    "traverse_async",
]

#: hierarchical key of the root cell.
ROOT_KEY = 1

#: ``owner`` value for cells built from this rank's own bodies.
LOCAL_OWNER = -1

#: ``children`` sentinel: the owner has a child in this slot, this rank does not.
REMOTE_CHILD = -2

#: initial hash-table size; doubled whenever the load factor would pass 1.
TABLE_SLOTS = 4096

#: point-to-point tags used by this module (replies use request tag + 1).
NEIGHBOUR_TAG = 0xD001
CHILD_REQUEST_TAG = 0xD010

_NEIGHBOUR_BODY = struct.Struct("<4d")  # mass, x, y, z
_SET_HEADER = struct.Struct("<q")  # number of keyed records that follow
_KEY = struct.Struct("<Q")
_BATCH_HEADER = struct.Struct("<QB")  # parent key + child presence mask

# ---------------------------------------------------------------------------
# hierarchical keys


def key_level(key: int) -> int:
    """Depth of the cell a key addresses (the root is level 0)."""
    key = int(key)
    if key < 1:
        raise ValueError(f"invalid cell key {key}")
    bits = key.bit_length() - 1
    if bits % 3:
        raise ValueError(f"invalid cell key {key:#o}: not a whole number of levels")
    return bits // 3


def child_key(key: int, slot: int) -> int:
    """Key of the child in ``slot``; refuses to go past the depth cap."""
    if not 0 <= slot <= 7:
        raise ValueError(f"child slot {slot} outside [0, 7]")
    if key_level(key) >= MAX_DEPTH:
        raise ValueError(f"child of {int(key):#o} would exceed the depth cap {MAX_DEPTH}")
    return (int(key) << 3) | slot


def parent_key(key: int) -> int:
    """Key of the enclosing cell; the root has none."""
    if int(key) == ROOT_KEY:
        raise ValueError("the root cell has no parent")
    key_level(key)  # validates the key shape
    return int(key) >> 3


def key_slot(key: int) -> int:
    """Slot this cell occupies in its parent."""
    if int(key) == ROOT_KEY:
        raise ValueError("the root cell occupies no slot")
    return int(key) & 7


def body_key_to_cell_key(spatial_key: int, level: int) -> int:
    """Key of the level-``level`` cell containing a body's spatial key.

    The body's interleaved key is truncated to ``level`` octant triplets and
    prefixed with the root's leading 1 bit, so bodies address tree cells
    directly without any coordinate round trip.
    """
    if not 0 <= level <= MORTON_BITS:
        raise ValueError(f"cell level {level} outside [0, {MORTON_BITS}]")
    return (1 << (3 * level)) | (int(spatial_key) >> (3 * (MORTON_BITS - level)))


def cell_geometry(key: int, bounds: DomainBounds) -> tuple[np.ndarray, float]:
    """Centre and side length of the cell a key addresses.

    Walks the octant path from the root applying the same child-offset
    arithmetic every build in this package uses, so equal keys yield
    bit-identical geometry on every rank.
    """
    level = key_level(key)
    key = int(key)
    centre = np.zeros(3)
    side = 2.0 * bounds.half_extent
    for lvl in range(level - 1, -1, -1):
        slot = (key >> (3 * lvl)) & 7
        half = 0.25 * side
        centre[0] += half if slot & 4 else -half
        centre[1] += half if slot & 2 else -half
        centre[2] += half if slot & 1 else -half
        side = 0.5 * side
    return centre, side


# ---------------------------------------------------------------------------
# the cell store


class HashedTree:
    """One rank's cell store: flat arrays plus a chained hash table.

    ``children[i, s]`` holds the child's cell index, ``-1`` when the slot is
    empty, or :data:`REMOTE_CHILD` when the owner has a child there that this
    rank has not fetched.  ``owner[i]`` is :data:`LOCAL_OWNER` for cells built
    from local bodies and the source rank for cells that arrived over the
    wire.  Leaves (count == 1) carry their body as (mass, com).  ``ncopy[i]``
    counts neighbour-body copies inside the cell's domain and ``dirty[i]``
    flags cells whose moments must be recombined from their children.
    """

    def __init__(self, bounds: DomainBounds, capacity: int = 64):
        capacity = max(int(capacity), 1)
        self.bounds = bounds
        self.n_cells = 0
        self.key = np.zeros(capacity, dtype=np.uint64)
        self.level = np.zeros(capacity, dtype=np.int8)
        self.centre = np.zeros((capacity, 3))
        self.side = np.zeros(capacity)
        self.mass = np.zeros(capacity)
        self.com = np.zeros((capacity, 3))
        self.quad = np.zeros((capacity, 6))
        self.count = np.zeros(capacity, dtype=np.int64)
        self.children = np.full((capacity, 8), -1, dtype=np.int32)
        self.owner = np.full(capacity, LOCAL_OWNER, dtype=np.int32)
        self.ncopy = np.zeros(capacity, dtype=np.uint8)
        self.dirty = np.zeros(capacity, dtype=bool)
        self.table_slots = TABLE_SLOTS
        self.heads = np.full(TABLE_SLOTS, -1, dtype=np.int32)
        self.chain = np.full(capacity, -1, dtype=np.int32)

    def __len__(self) -> int:
        return self.n_cells

    # -- hash table ---------------------------------------------------------

    def lookup(self, key: int) -> int:
        """Cell index for a key, or -1 when absent."""
        idx = int(self.heads[int(key) & (self.table_slots - 1)])
        want = np.uint64(key)
        while idx >= 0 and self.key[idx] != want:
            idx = int(self.chain[idx])
        return idx

    def mean_probe_length(self) -> float:
        """Average chain position (1-based) when looking up every stored key."""
        if self.n_cells == 0:
            return 0.0
        return float(_probe_kernel(self.key[: self.n_cells], self.heads, self.chain))

    def _grow_cells(self) -> None:
        cap = 2 * len(self.key)

        def ext(arr: np.ndarray, fill=0) -> np.ndarray:
            out = np.full((cap,) + arr.shape[1:], fill, dtype=arr.dtype)
            out[: len(arr)] = arr
            return out

        self.key = ext(self.key)
        self.level = ext(self.level)
        self.centre = ext(self.centre)
        self.side = ext(self.side)
        self.mass = ext(self.mass)
        self.com = ext(self.com)
        self.quad = ext(self.quad)
        self.count = ext(self.count)
        self.children = ext(self.children, -1)
        self.owner = ext(self.owner, LOCAL_OWNER)
        self.ncopy = ext(self.ncopy)
        self.dirty = ext(self.dirty, False)
        self.chain = ext(self.chain, -1)

    def _rehash(self) -> None:
        self.table_slots *= 2
        self.heads = np.full(self.table_slots, -1, dtype=np.int32)
        self.chain[: self.n_cells] = -1
        _hash_fill(self.key[: self.n_cells], self.heads, self.chain)

    def add_cell(
        self,
        key: int,
        centre: np.ndarray,
        side: float,
        *,
        mass: float = 0.0,
        com=(0.0, 0.0, 0.0),
        quad=None,
        count: int = 0,
        owner: int = LOCAL_OWNER,
        children_mask: int = 0,
        dirty: bool = False,
    ) -> int:
        """Append one cell and hash it; duplicate keys are rejected."""
        if self.lookup(key) >= 0:
            raise KeyError(f"key collision: cell {int(key):#o} is already present")
        idx = self.n_cells
        if idx == len(self.key):
            self._grow_cells()
        self.key[idx] = key
        self.level[idx] = key_level(key)
        self.centre[idx] = centre
        self.side[idx] = side
        self.mass[idx] = mass
        self.com[idx] = com
        self.quad[idx] = 0.0 if quad is None else quad
        self.count[idx] = count
        row = self.children[idx]
        row[:] = -1
        for s in range(8):
            if children_mask & (1 << s):
                row[s] = REMOTE_CHILD
        self.owner[idx] = owner
        self.ncopy[idx] = 0
        self.dirty[idx] = dirty
        self.n_cells += 1
        if self.n_cells > self.table_slots:
            self._rehash()
        else:
            h = int(key) & (self.table_slots - 1)
            self.chain[idx] = self.heads[h]
            self.heads[h] = idx
        return idx

    # -- wire helpers -------------------------------------------------------

    def local_child_mask(self, idx: int) -> int:
        """Slots whose child cell is held locally."""
        mask = 0
        for s in range(8):
            if self.children[idx, s] >= 0:
                mask |= 1 << s
        return mask

    def child_mask(self, idx: int) -> int:
        """Slots where the cell has a child in the full tree, local or not."""
        mask = 0
        for s in range(8):
            if self.children[idx, s] != -1:
                mask |= 1 << s
        return mask

    def has_remote_children(self, idx: int) -> bool:
        return bool(np.any(self.children[idx] == REMOTE_CHILD))

    def pack_record(self, idx: int) -> bytes:
        """One cell in the shared record layout used by every tree wire format."""
        q = self.quad[idx]
        return _RECORD.pack(
            self.centre[idx, 0],
            self.centre[idx, 1],
            self.centre[idx, 2],
            self.side[idx],
            self.mass[idx],
            self.com[idx, 0],
            self.com[idx, 1],
            self.com[idx, 2],
            q[0],
            q[1],
            q[2],
            q[3],
            q[4],
            q[5],
            int(self.count[idx]),
            self.child_mask(idx),
        )

    def to_serial_bytes(self) -> bytes:
        """Pre-order wire bytes, identical to serializing a linked build.

        Only valid while every child is held locally; placeholders for
        remote cells cannot be serialized.
        """
        chunks = []
        n = 0
        stack = [0] if self.n_cells else []
        while stack:
            i = stack.pop()
            chunks.append(self.pack_record(i))
            n += 1
            for s in range(7, -1, -1):
                c = int(self.children[i, s])
                if c == REMOTE_CHILD:
                    raise ValueError(
                        f"cell {int(self.key[i]):#o} has unfetched children; "
                        "the tree cannot be serialized"
                    )
                if c >= 0:
                    stack.append(c)
        return _HEADER.pack(_MAGIC, n) + b"".join(chunks)


# ---------------------------------------------------------------------------
# compiled helpers


@numba.njit(cache=True)
def _hash_fill(keys, heads, chain):  # pragma: no cover
    mask = np.uint64(heads.shape[0] - 1)
    for i in range(keys.shape[0]):
        h = np.int64(keys[i] & mask)
        chain[i] = heads[h]
        heads[h] = np.int32(i)


@numba.njit(cache=True)
def _probe_kernel(keys, heads, chain):  # pragma: no cover
    mask = np.uint64(heads.shape[0] - 1)
    total = 0
    for i in range(keys.shape[0]):
        idx = heads[np.int64(keys[i] & mask)]
        steps = 1
        while keys[idx] != keys[i]:
            idx = chain[idx]
            steps += 1
        total += steps
    return total / keys.shape[0]


@numba.njit(cache=True, nogil=True)
def _lcp_levels(keys):  # pragma: no cover
    """Number of leading octant levels each adjacent sorted key pair shares."""
    n = keys.shape[0]
    out = np.empty(n - 1, dtype=np.int64)
    for i in range(n - 1):
        x = keys[i] ^ keys[i + 1]
        bits = 0
        while x != np.uint64(0):
            x >>= np.uint64(1)
            bits += 1
        out[i] = MORTON_BITS - (bits + 2) // 3
    return out


@numba.njit(cache=True, nogil=True)
def _build_kernel(
    keys, lcp, depth, bmass, bpos, half_extent, key, level, centre, side, mass, com, count, children
):  # pragma: no cover
    n = keys.shape[0]
    open_idx = np.empty(MORTON_BITS + 1, dtype=np.int64)
    lo = np.empty(key.shape[0], dtype=np.int64)
    key[0] = 1
    level[0] = 0
    centre[0, 0] = 0.0
    centre[0, 1] = 0.0
    centre[0, 2] = 0.0
    side[0] = 2.0 * half_extent
    lo[0] = 0
    open_idx[0] = 0
    top = 0
    nxt = 1
    for i in range(n):
        start = lcp[i - 1] if i > 0 else 0
        while top > start:
            idx = open_idx[top]
            count[idx] = i - lo[idx]
            top -= 1
        k = keys[i]
        for lvl in range(start + 1, depth[i] + 1):
            parent = open_idx[lvl - 1]
            shift = np.uint64(3 * (MORTON_BITS - lvl))
            prefix = k >> shift
            slot = np.int64(prefix & np.uint64(7))
            idx = nxt
            nxt += 1
            key[idx] = prefix | (np.uint64(1) << np.uint64(3 * lvl))
            level[idx] = np.int8(lvl)
            half = 0.25 * side[parent]
            centre[idx, 0] = centre[parent, 0] + (half if (slot & 4) != 0 else -half)
            centre[idx, 1] = centre[parent, 1] + (half if (slot & 2) != 0 else -half)
            centre[idx, 2] = centre[parent, 2] + (half if (slot & 1) != 0 else -half)
            side[idx] = 0.5 * side[parent]
            children[parent, slot] = np.int32(idx)
            lo[idx] = i
            open_idx[lvl] = idx
            top = lvl
        leaf = open_idx[top]
        mass[leaf] = bmass[i]
        com[leaf, 0] = bpos[i, 0]
        com[leaf, 1] = bpos[i, 1]
        com[leaf, 2] = bpos[i, 2]
    while top >= 0:
        idx = open_idx[top]
        count[idx] = n - lo[idx]
        top -= 1


# ---------------------------------------------------------------------------
# building


def build_hashed(bodies: Bodies, bounds: DomainBounds) -> HashedTree:
    """Hashed tree over Morton-sorted bodies, with moments computed.

    Bodies must arrive sorted by spatial key (the distributed drivers sort
    first) with all keys distinct; two bodies sharing every key level cannot
    be separated and are rejected just like in the linked build.  The cells
    come out in pre-order with children visited in slot order, so the array
    layout matches a flattened linked build exactly.
    """
    n = len(bodies)
    side0 = 2.0 * bounds.half_extent
    if n == 0:
        tree = HashedTree(bounds, 1)
        tree.add_cell(ROOT_KEY, np.zeros(3), side0)
        return tree
    keys = morton_keys(bodies.position, bounds)
    if n == 1:
        tree = HashedTree(bounds, 1)
        tree.add_cell(
            ROOT_KEY,
            np.zeros(3),
            side0,
            mass=float(bodies.mass[0]),
            com=bodies.position[0],
            count=1,
        )
        return tree
    if np.any(keys[1:] < keys[:-1]):
        raise ValueError("bodies must be sorted by spatial key for a hashed build")
    dup = np.flatnonzero(keys[1:] == keys[:-1])
    if len(dup):
        raise ValueError(
            f"two bodies share the level-{MAX_DEPTH} cell at key {int(keys[dup[0]]):#o}; "
            "positions are closer than the tree resolution"
        )
    lcp = _lcp_levels(keys)
    depth = np.empty(n, dtype=np.int64)
    depth[0] = lcp[0] + 1
    depth[-1] = lcp[-1] + 1
    if n > 2:
        depth[1:-1] = np.maximum(lcp[:-1], lcp[1:]) + 1
    total = 1 + int(depth[0]) + int(np.sum(depth[1:] - lcp))
    tree = HashedTree(bounds, total)
    _build_kernel(
        keys,
        lcp,
        depth,
        bodies.mass,
        bodies.position,
        bounds.half_extent,
        tree.key,
        tree.level,
        tree.centre,
        tree.side,
        tree.mass,
        tree.com,
        tree.count,
        tree.children,
    )
    tree.n_cells = total
    while total > tree.table_slots:
        tree.table_slots *= 2
    tree.heads = np.full(tree.table_slots, -1, dtype=np.int32)
    _hash_fill(tree.key[:total], tree.heads, tree.chain)
    _moments_kernel(
        tree.children[:total], tree.count[:total], tree.mass[:total], tree.com[:total], tree.quad[:total]
    )
    return tree


def _attach_child(
    tree: HashedTree, parent: int, slot: int, *, count: int = 0, ncopy: int = 0, dirty: bool = False
) -> int:
    """Create an empty child cell under ``parent`` and link it in."""
    assert tree.children[parent, slot] == -1
    half = 0.25 * float(tree.side[parent])
    centre = np.array(
        [
            tree.centre[parent, 0] + (half if slot & 4 else -half),
            tree.centre[parent, 1] + (half if slot & 2 else -half),
            tree.centre[parent, 2] + (half if slot & 1 else -half),
        ]
    )
    idx = tree.add_cell(
        child_key(int(tree.key[parent]), slot), centre, 0.5 * float(tree.side[parent]), count=count, dirty=dirty
    )
    tree.ncopy[idx] = ncopy
    tree.children[parent, slot] = idx
    return idx


def insert_neighbour_body(tree: HashedTree, mass: float, position: np.ndarray) -> None:
    """Insert a copy of an adjacent rank's boundary body, splitting as needed.

    Copies force the leaf splits the full tree would have near partition
    boundaries.  Every cell whose domain gains the copy is flagged (``ncopy``
    and ``dirty``) so branch-node search and moment recombination can tell
    local content from copies; the copy's own leaf is flagged but clean.
    """
    position = np.asarray(position, dtype=np.float64)
    bkey = morton_key(position, tree.bounds)
    if tree.n_cells == 0:
        raise ValueError("cannot insert into an unbuilt tree")
    if int(tree.count[0]) == 0:
        tree.count[0] = 1
        tree.mass[0] = mass
        tree.com[0] = position
        tree.ncopy[0] = 1
        return
    idx = 0
    depth = 0
    while True:
        cnt = int(tree.count[idx])
        if cnt == 1:
            old_key = morton_key(tree.com[idx], tree.bounds)
            if old_key == bkey:
                raise ValueError(
                    f"two bodies share the level-{MAX_DEPTH} cell at key {bkey:#o}; "
                    "positions are closer than the tree resolution"
                )
            old_mass = float(tree.mass[idx])
            old_pos = tree.com[idx].copy()
            tree.count[idx] = 2
            tree.ncopy[idx] += 1
            tree.dirty[idx] = True
            while True:
                depth += 1
                s_new = (bkey >> (3 * (MORTON_BITS - depth))) & 7
                s_old = (old_key >> (3 * (MORTON_BITS - depth))) & 7
                if s_new != s_old:
                    cidx = _attach_child(tree, idx, s_old, count=1)
                    tree.mass[cidx] = old_mass
                    tree.com[cidx] = old_pos
                    nidx = _attach_child(tree, idx, s_new, count=1, ncopy=1)
                    tree.mass[nidx] = mass
                    tree.com[nidx] = position
                    return
                idx = _attach_child(tree, idx, s_new, count=2, ncopy=1, dirty=True)
        else:
            tree.count[idx] = cnt + 1
            tree.ncopy[idx] += 1
            tree.dirty[idx] = True
            depth += 1
            slot = (bkey >> (3 * (MORTON_BITS - depth))) & 7
            child = int(tree.children[idx, slot])
            if child == REMOTE_CHILD:
                raise ValueError(
                    f"cannot insert through the unfetched child {slot} of {int(tree.key[idx]):#o}"
                )
            if child < 0:
                cidx = _attach_child(tree, idx, slot, count=1, ncopy=1)
                tree.mass[cidx] = mass
                tree.com[cidx] = position
                return
            idx = child


# ---------------------------------------------------------------------------
# branch nodes and their exchange


def branch_node_indices(tree: HashedTree) -> list[int]:
    """Indices of the coarsest cells free of neighbour-body copies.

    Found by depth-first descent: a copy-free cell is emitted and not
    opened; cells containing copies are opened.  With no copies at all the
    root itself is the single branch node.  A copy's own leaf has no
    children and contributes nothing.
    """
    if tree.n_cells == 0 or int(tree.count[0]) == 0:
        return []
    out: list[int] = []
    stack = [0]
    while stack:
        idx = stack.pop()
        if tree.ncopy[idx] == 0:
            out.append(idx)
            continue
        for s in range(7, -1, -1):
            c = int(tree.children[idx, s])
            if c >= 0:
                stack.append(c)
    return out


def pack_branch_nodes(tree: HashedTree, indices: list[int]) -> bytes:
    """Wire payload for a branch-node set: count, then key + record each."""
    chunks = [_SET_HEADER.pack(len(indices))]
    for idx in indices:
        chunks.append(_KEY.pack(int(tree.key[idx])))
        chunks.append(tree.pack_record(idx))
    return b"".join(chunks)


def _mark_dirty_upwards(tree: HashedTree, idx: int) -> None:
    """Flag a cell and its ancestors for recombination, stopping at flagged ones."""
    while idx >= 0 and not tree.dirty[idx]:
        tree.dirty[idx] = True
        k = int(tree.key[idx])
        if k == ROOT_KEY:
            break
        idx = tree.lookup(parent_key(k))


def _insert_remote_cell(tree: HashedTree, src: int, key: int, vals: tuple) -> int:
    """Splice one received branch node into the local tree."""
    centre = np.array(vals[0:3])
    side = vals[3]
    mass = vals[4]
    com = np.array(vals[5:8])
    quad = np.array(vals[8:14])
    cnt = int(vals[14])
    mask = int(vals[15])
    idx = tree.lookup(key)
    if idx >= 0:
        # only a neighbour-copy leaf can share a key with an incoming cell
        if not (int(tree.count[idx]) == 1 and tree.ncopy[idx] == 1):
            raise ValueError(f"incoming cell {key:#o} collides with local content")
        if tree.side[idx] != side or not np.array_equal(tree.centre[idx], centre):
            raise ValueError(f"cell geometry mismatch for key {key:#o}")
        tree.mass[idx] = mass
        tree.com[idx] = com
        tree.quad[idx] = quad
        tree.count[idx] = cnt
        tree.owner[idx] = src
        tree.ncopy[idx] = 0
        tree.dirty[idx] = False
        row = tree.children[idx]
        row[:] = -1
        for s in range(8):
            if mask & (1 << s):
                row[s] = REMOTE_CHILD
        # ancestors were flagged when the copy body was inserted
        return idx
    idx = tree.add_cell(
        key, centre, side, mass=mass, com=com, quad=quad, count=cnt, owner=src, children_mask=mask
    )
    # link into existing ancestors, creating any missing ones along the way
    ck, cidx = key, idx
    while True:
        pk = parent_key(ck)
        slot = ck & 7
        pidx = tree.lookup(pk)
        if pidx >= 0:
            if tree.children[pidx, slot] != -1:
                raise ValueError(f"incoming cell {key:#o} collides under {pk:#o}")
            tree.children[pidx, slot] = cidx
            _mark_dirty_upwards(tree, pidx)
            return idx
        pcentre, pside = cell_geometry(pk, tree.bounds)
        pidx = tree.add_cell(pk, pcentre, pside, owner=src, dirty=True)
        tree.children[pidx, slot] = cidx
        ck, cidx = pk, pidx


def insert_branch_set(tree: HashedTree, src: int, blob: bytes) -> list[int]:
    """Insert one rank's broadcast branch nodes; returns their cell indices."""
    (n_nodes,) = _SET_HEADER.unpack_from(blob, 0)
    off = _SET_HEADER.size
    out = []
    for _ in range(n_nodes):
        (key,) = _KEY.unpack_from(blob, off)
        off += _KEY.size
        vals = _RECORD.unpack_from(blob, off)
        off += _RECORD.size
        out.append(_insert_remote_cell(tree, src, int(key), vals))
    if off != len(blob):
        raise ValueError("branch-node payload has trailing data")
    return out


def recombine_dirty(tree: HashedTree) -> int:
    """Recompute counts and moments of flagged cells from their children.

    Children are combined in slot order with the same scalar operations as
    the compiled moment pass, so a cell recombined from serially-exact
    children matches the serial tree's cell bit-for-bit.  Returns the number
    of cells recombined.
    """
    n = tree.n_cells
    idxs = np.flatnonzero(tree.dirty[:n])
    if not len(idxs):
        return 0
    order = idxs[np.argsort(tree.level[idxs], kind="stable")][::-1]  # deepest first
    for idx in order:
        row = tree.children[idx]
        cnt = 0
        total = 0.0
        cx = cy = cz = 0.0
        for s in range(8):
            c = int(row[s])
            if c == REMOTE_CHILD:
                raise ValueError(
                    f"cell {int(tree.key[idx]):#o} still has unfetched children; cannot recombine"
                )
            if c < 0:
                continue
            cnt += int(tree.count[c])
            m = float(tree.mass[c])
            if m == 0.0:
                continue
            total += m
            cx += m * tree.com[c, 0]
            cy += m * tree.com[c, 1]
            cz += m * tree.com[c, 2]
        assert cnt >= 2, f"cell {int(tree.key[idx]):#o} recombined to fewer than two bodies"
        tree.count[idx] = cnt
        tree.ncopy[idx] = 0
        tree.dirty[idx] = False
        if total == 0.0:
            tree.mass[idx] = 0.0
            tree.com[idx] = 0.0
            tree.quad[idx] = 0.0
            continue
        cx /= total
        cy /= total
        cz /= total
        qxx = qxy = qxz = qyy = qyz = qzz = 0.0
        for s in range(8):
            c = int(row[s])
            if c < 0:
                continue
            m = float(tree.mass[c])
            if m == 0.0:
                continue
            dx = tree.com[c, 0] - cx
            dy = tree.com[c, 1] - cy
            dz = tree.com[c, 2] - cz
            d2 = dx * dx + dy * dy + dz * dz
            qxx += tree.quad[c, 0] + m * (3.0 * (dx * dx) - d2)
            qxy += tree.quad[c, 1] + m * (3.0 * (dx * dy) - 0.0)
            qxz += tree.quad[c, 2] + m * (3.0 * (dx * dz) - 0.0)
            qyy += tree.quad[c, 3] + m * (3.0 * (dy * dy) - d2)
            qyz += tree.quad[c, 4] + m * (3.0 * (dy * dz) - 0.0)
            qzz += tree.quad[c, 5] + m * (3.0 * (dz * dz) - d2)
        tree.mass[idx] = total
        tree.com[idx] = (cx, cy, cz)
        tree.quad[idx] = (qxx, qxy, qxz, qyy, qyz, qzz)
    return len(order)


def distribute_branch_nodes(ep: Endpoint, tree: HashedTree, bodies: Bodies) -> list[int]:
    """Neighbour-body exchange, branch-node broadcast, and tree splicing.

    Each rank sends its first body to the rank on its left and its last body
    to the rank on its right (in Morton order), inserts the copies it
    receives, broadcasts its branch nodes, splices in everyone else's, and
    recombines moments.  Afterwards every locally held cell agrees
    bit-for-bit with the serial tree over all bodies; cells below other
    ranks' branch nodes remain remote placeholders.  Returns the local
    branch-node keys.  A single rank exchanges nothing and its tree is
    untouched.
    """
    rank, size = ep.rank, ep.size
    if size == 1:
        return [int(tree.key[i]) for i in branch_node_indices(tree)]
    n = len(bodies)
    if n == 0:
        raise ValueError("every rank needs at least one body to exchange neighbours")
    if rank - 1 >= 0:
        ep.send(rank - 1, NEIGHBOUR_TAG, _NEIGHBOUR_BODY.pack(bodies.mass[0], *bodies.position[0]))
        m, x, y, z = _NEIGHBOUR_BODY.unpack(ep.recv(rank - 1, NEIGHBOUR_TAG))
        insert_neighbour_body(tree, m, np.array([x, y, z]))
    if rank + 1 < size:
        ep.send(rank + 1, NEIGHBOUR_TAG, _NEIGHBOUR_BODY.pack(bodies.mass[n - 1], *bodies.position[n - 1]))
        m, x, y, z = _NEIGHBOUR_BODY.unpack(ep.recv(rank + 1, NEIGHBOUR_TAG))
        insert_neighbour_body(tree, m, np.array([x, y, z]))
    mine = branch_node_indices(tree)
    keys = [int(tree.key[i]) for i in mine]
    payload = pack_branch_nodes(tree, mine)
    for src in range(size):
        if src == rank:
            ep.broadcast(src, payload)
        else:
            insert_branch_set(tree, src, ep.broadcast(src))
    recombine_dirty(tree)
    return keys


# ---------------------------------------------------------------------------
# child-batch requests


def make_child_server(ep: Endpoint, tree: HashedTree) -> Callable[[], bool]:
    """Serving closure answering one pending child-batch request per call."""

    def handler(src: int, payload: bytes) -> bytes:
        (key,) = _KEY.unpack(payload)
        idx = tree.lookup(int(key))
        if idx < 0 or int(tree.count[idx]) <= 1:
            raise ValueError(f"rank {ep.rank} has no children to serve for cell {int(key):#o}")
        mask = 0
        chunks = []
        for s in range(8):
            c = int(tree.children[idx, s])
            if c == REMOTE_CHILD:
                raise ValueError(f"rank {ep.rank} does not own the children of {int(key):#o}")
            if c >= 0:
                mask |= 1 << s
                chunks.append(tree.pack_record(c))
        return _BATCH_HEADER.pack(int(key), mask) + b"".join(chunks)

    def serve() -> bool:
        return ep.try_serve(CHILD_REQUEST_TAG, handler)

    return serve


def insert_child_batch(tree: HashedTree, owner: int, payload: bytes) -> int:
    """Install a served child batch under its parent; returns the parent index."""
    key, mask = _BATCH_HEADER.unpack_from(payload, 0)
    key = int(key)
    off = _BATCH_HEADER.size
    pidx = tree.lookup(key)
    if pidx < 0:
        raise ValueError(f"child batch for unknown cell {key:#o}")
    for s in range(8):
        have = int(tree.children[pidx, s])
        if mask & (1 << s):
            if have != REMOTE_CHILD:
                raise ValueError(f"unexpected child in slot {s} of batch for {key:#o}")
            vals = _RECORD.unpack_from(payload, off)
            off += _RECORD.size
            cidx = tree.add_cell(
                child_key(key, s),
                np.array(vals[0:3]),
                vals[3],
                mass=vals[4],
                com=np.array(vals[5:8]),
                quad=np.array(vals[8:14]),
                count=int(vals[14]),
                owner=owner,
                children_mask=int(vals[15]),
            )
            tree.children[pidx, s] = cidx
        elif have == REMOTE_CHILD:
            raise ValueError(f"batch for {key:#o} is missing the child in slot {s}")
    if off != len(payload):
        raise ValueError("child batch has trailing data")
    return pidx


def fetch_children(ep: Endpoint, tree: HashedTree, idx: int, serve: Callable[[], bool]) -> None:
    """Blocking child-batch request, serving peers' requests while waiting.

    Serving while blocked is what keeps two ranks that request from each
    other at the same time from deadlocking.
    """
    owner = int(tree.owner[idx])
    if owner < 0:
        raise ValueError(f"cell {int(tree.key[idx]):#o} has remote children but no owner")
    ep.send(owner, CHILD_REQUEST_TAG, _KEY.pack(int(tree.key[idx])))
    deadline = time.monotonic() + ep.timeout
    while True:
        got = ep.try_recv(owner, CHILD_REQUEST_TAG + 1)
        if got is not None:
            insert_child_batch(tree, owner, got)
            return
        if not serve():
            if time.monotonic() > deadline:
                raise TransportTimeout(
                    f"rank {ep.rank} timed out awaiting children of {int(tree.key[idx]):#o}"
                )
            ep._wait(0.002)


# ---------------------------------------------------------------------------
# traversal


@numba.njit(cache=True, nogil=True)
def _walk_kernel(
    children, count, side, mass, com, quad, px, py, pz, theta, eps, stack, top, acc, work
):  # pragma: no cover
    """Resumable force walk over one body's stack.

    Returns ``(top, frontier)``: ``frontier`` is -1 when the stack drained,
    otherwise the index of a cell that must be opened but whose children are
    not all local.  The frontier cell is not re-pushed; the caller resolves
    its children and pushes it back, which re-runs the same (deterministic)
    distance test and keeps the decision sequence identical to an
    uninterrupted walk.
    """
    e2 = eps * eps
    ax = acc[0]
    ay = acc[1]
    az = acc[2]
    w = work[0]
    frontier = np.int64(-1)
    while top > 0:
        top -= 1
        i = stack[top]
        dx = px - com[i, 0]
        dy = py - com[i, 1]
        dz = pz - com[i, 2]
        d2 = dx * dx + dy * dy + dz * dz
        if count[i] == 1:
            if d2 == 0.0:
                continue  # the body itself
            denom = (d2 + e2) ** 1.5
            ax += (-mass[i] * dx) / denom
            ay += (-mass[i] * dy) / denom
            az += (-mass[i] * dz) / denom
            w += WORK_PP
        elif d2 > 0.0 and side[i] < theta * np.sqrt(d2):
            r1 = np.sqrt(d2)
            qrx = quad[i, 0] * dx + quad[i, 1] * dy + quad[i, 2] * dz
            qry = quad[i, 1] * dx + quad[i, 3] * dy + quad[i, 4] * dz
            qrz = quad[i, 2] * dx + quad[i, 4] * dy + quad[i, 5] * dz
            rqr = dx * qrx + dy * qry + dz * qrz
            mono = -mass[i] / (d2 * r1)
            c5 = d2 * d2 * r1
            c7 = 2.5 * rqr / (d2 * d2 * d2 * r1)
            ax += mono * dx + qrx / c5 - c7 * dx
            ay += mono * dy + qry / c5 - c7 * dy
            az += mono * dz + qrz / c5 - c7 * dz
            w += WORK_PC
        else:
            remote = False
            for s in range(8):
                if children[i, s] == REMOTE_CHILD:
                    remote = True
                    break
            if remote:
                frontier = i
                break
            for s in range(7, -1, -1):
                c = children[i, s]
                if c >= 0:
                    stack[top] = c
                    top += 1
    acc[0] = ax
    acc[1] = ay
    acc[2] = az
    work[0] = w
    return top, frontier


@numba.njit(cache=True, nogil=True)
def _walk_traced_kernel(
    children, count, side, mass, com, quad, keys, px, py, pz, theta, eps, stack, top, acc, work, kinds, ikeys
):  # pragma: no cover
    """Like the plain walk but records (kind, cell key) per interaction."""
    e2 = eps * eps
    ax = acc[0]
    ay = acc[1]
    az = acc[2]
    w = work[0]
    used = 0
    frontier = np.int64(-1)
    while top > 0:
        top -= 1
        i = stack[top]
        dx = px - com[i, 0]
        dy = py - com[i, 1]
        dz = pz - com[i, 2]
        d2 = dx * dx + dy * dy + dz * dz
        if count[i] == 1:
            if d2 == 0.0:
                continue
            denom = (d2 + e2) ** 1.5
            ax += (-mass[i] * dx) / denom
            ay += (-mass[i] * dy) / denom
            az += (-mass[i] * dz) / denom
            w += WORK_PP
            kinds[used] = 1
            ikeys[used] = keys[i]
            used += 1
        elif d2 > 0.0 and side[i] < theta * np.sqrt(d2):
            r1 = np.sqrt(d2)
            qrx = quad[i, 0] * dx + quad[i, 1] * dy + quad[i, 2] * dz
            qry = quad[i, 1] * dx + quad[i, 3] * dy + quad[i, 4] * dz
            qrz = quad[i, 2] * dx + quad[i, 4] * dy + quad[i, 5] * dz
            rqr = dx * qrx + dy * qry + dz * qrz
            mono = -mass[i] / (d2 * r1)
            c5 = d2 * d2 * r1
            c7 = 2.5 * rqr / (d2 * d2 * d2 * r1)
            ax += mono * dx + qrx / c5 - c7 * dx
            ay += mono * dy + qry / c5 - c7 * dy
            az += mono * dz + qrz / c5 - c7 * dz
            w += WORK_PC
            kinds[used] = 2
            ikeys[used] = keys[i]
            used += 1
        else:
            remote = False
            for s in range(8):
                if children[i, s] == REMOTE_CHILD:
                    remote = True
                    break
            if remote:
                frontier = i
                break
            for s in range(7, -1, -1):
                c = children[i, s]
                if c >= 0:
                    stack[top] = c
                    top += 1
    acc[0] = ax
    acc[1] = ay
    acc[2] = az
    work[0] = w
    return top, frontier, used


def _seed_stack(tree: HashedTree, stack: np.ndarray) -> int:
    """Start a walk at the root's children (or the root when it is a leaf)."""
    if tree.n_cells == 0 or int(tree.count[0]) == 0:
        return 0
    if int(tree.count[0]) == 1:
        stack[0] = 0
        return 1
    top = 0
    for s in range(7, -1, -1):
        c = int(tree.children[0, s])
        if c == REMOTE_CHILD:
            raise ValueError("the root's children must be local before traversing")
        if c >= 0:
            stack[top] = c
            top += 1
    return top


def traverse_sync(
    ep: Optional[Endpoint],
    tree: HashedTree,
    positions: np.ndarray,
    theta: float,
    eps: float,
    serve: Optional[Callable[[], bool]] = None,
) -> tuple[np.ndarray, np.ndarray, int]:
    """Forces on the given bodies, blocking on each remote frontier.

    Whenever the walk must open a cell whose children live on another rank
    it requests the child batch, serves peers while waiting, splices the
    children in, and resumes.  The decision sequence and accumulation order
    are identical to a serial walk of the full tree, so the accelerations
    agree bit-for-bit with a serial run.  Returns (accelerations, per-body
    work, number of child requests sent).
    """
    positions = np.ascontiguousarray(positions, dtype=np.float64).reshape(-1, 3)
    nb = len(positions)
    acc = np.zeros((nb, 3))
    work = np.zeros(nb, dtype=np.int64)
    stack = np.empty(_STACK_CAP, dtype=np.int64)
    a3 = np.zeros(3)
    w1 = np.zeros(1, dtype=np.int64)
    requests = 0
    for b in range(nb):
        top = _seed_stack(tree, stack)
        a3[:] = 0.0
        w1[0] = 0
        while True:
            n = tree.n_cells
            top, frontier = _walk_kernel(
                tree.children[:n],
                tree.count[:n],
                tree.side[:n],
                tree.mass[:n],
                tree.com[:n],
                tree.quad[:n],
                positions[b, 0],
                positions[b, 1],
                positions[b, 2],
                theta,
                eps,
                stack,
                top,
                a3,
                w1,
            )
            if frontier < 0:
                break
            fetch_children(ep, tree, int(frontier), serve)
            requests += 1
            stack[top] = frontier
            top += 1
        acc[b] = a3
        work[b] = w1[0]
    return acc, work, requests


def traverse_async(
    ep: Optional[Endpoint],
    tree: HashedTree,
    positions: np.ndarray,
    theta: float,
    eps: float,
    serve: Optional[Callable[[], bool]] = None,
    collect_trace: bool = False,
) -> tuple[np.ndarray, np.ndarray, int, Optional[list]]:
    """Latency-hiding force walk with a walk queue and a defer queue per body.

    Hitting a cell with remote children sends the child request (once per
    cell, across all bodies), defers the cell, and keeps walking; deferred
    cells are resolved -- serving peers and draining any replies that have
    already arrived -- only once the walk queue runs dry.  The interaction
    multiset per body matches the blocking walk; only the accumulation order
    differs, so accelerations agree to roundoff rather than bit-for-bit.
    Returns (accelerations, per-body work, requests sent, traces), where
    traces is a per-body list of ``("pp"|"pc", cell key)`` pairs when
    ``collect_trace`` is set and None otherwise.
    """
    positions = np.ascontiguousarray(positions, dtype=np.float64).reshape(-1, 3)
    nb = len(positions)
    acc = np.zeros((nb, 3))
    work = np.zeros(nb, dtype=np.int64)
    stack = np.empty(_STACK_CAP, dtype=np.int64)
    a3 = np.zeros(3)
    w1 = np.zeros(1, dtype=np.int64)
    requests = 0
    outstanding: dict[int, int] = {}  # frontier cell index -> owner rank
    traces: Optional[list] = [] if collect_trace else None
    trace_b: list = []

    def poll_replies() -> bool:
        drained = False
        for owner in set(outstanding.values()):
            while True:
                got = ep.try_recv(owner, CHILD_REQUEST_TAG + 1)
                if got is None:
                    break
                pidx = insert_child_batch(tree, owner, got)
                outstanding.pop(pidx, None)
                drained = True
        return drained

    def run_chunk(b: int, top: int, walk: deque, defer: deque) -> None:
        nonlocal requests
        while True:
            n = tree.n_cells
            args = (
                tree.children[:n],
                tree.count[:n],
                tree.side[:n],
                tree.mass[:n],
                tree.com[:n],
                tree.quad[:n],
            )
            pos = (positions[b, 0], positions[b, 1], positions[b, 2])
            if collect_trace:
                kinds = np.empty(n + 8, dtype=np.int8)
                ikeys = np.empty(n + 8, dtype=np.uint64)
                top, frontier, used = _walk_traced_kernel(
                    *args, tree.key[:n], *pos, theta, eps, stack, top, a3, w1, kinds, ikeys
                )
                trace_b.extend(
                    ("pp" if kinds[i] == 1 else "pc", int(ikeys[i])) for i in range(used)
                )
            else:
                top, frontier = _walk_kernel(*args, *pos, theta, eps, stack, top, a3, w1)
            if frontier < 0:
                return
            frontier = int(frontier)
            # everything still pending on the stack keeps its order in the queue
            for j in range(top - 1, -1, -1):
                walk.append(int(stack[j]))
            top = 0
            if frontier not in outstanding:
                if serve is not None:
                    serve()  # answer anyone already waiting on us before asking
                owner = int(tree.owner[frontier])
                if owner < 0:
                    raise ValueError(
                        f"cell {int(tree.key[frontier]):#o} has remote children but no owner"
                    )
                ep.send(owner, CHILD_REQUEST_TAG, _KEY.pack(int(tree.key[frontier])))
                outstanding[frontier] = owner
                requests += 1
            defer.append(frontier)
            return

    for b in range(nb):
        a3[:] = 0.0
        w1[0] = 0
        trace_b = []
        walk: deque = deque()
        defer: deque = deque()
        top = _seed_stack(tree, stack)
        run_chunk(b, top, walk, defer)
        while walk or defer:
            poll_replies()
            if walk:
                i = walk.popleft()
                stack[0] = i
                run_chunk(b, 1, walk, defer)
                continue
            i = defer.popleft()
            if i in outstanding:
                deadline = time.monotonic() + ep.timeout
                while i in outstanding:
                    if poll_replies():
                        continue
                    if serve is not None and serve():
                        continue
                    if time.monotonic() > deadline:
                        raise TransportTimeout(
                            f"rank {ep.rank} timed out awaiting children of {int(tree.key[i]):#o}"
                        )
                    ep._wait(0.002)
            stack[0] = i
            run_chunk(b, 1, walk, defer)
        acc[b] = a3
        work[b] = w1[0]
        if collect_trace:
            traces.append(trace_b)
    return acc, work, requests, traces
