"""Explicit linked octree over a cubic domain.

Cells subdivide by Morton-key bits, so the structure is a pure function of
the body key set: insertion order never matters and independently built
subtrees merge into exactly the tree a serial build would produce.  A leaf
holds exactly one body; two bodies whose keys agree through all 21 levels
cannot be separated and are rejected.

Child slots use the key octant convention: bit 2 = upper x half, bit 1 =
upper y, bit 0 = upper z.
"""

from __future__ import annotations

import struct
from typing import Callable, Iterator, Optional

import numpy as np

from .morton import MORTON_BITS, DomainBounds, morton_keys
from .physics import Bodies, MassMoments, combine_moments, pairwise_accel

#: traversal work units: one per body-body interaction, two per body-cell.
WORK_PP = 1
WORK_PC = 2

#: maximum subdivision depth; equals the per-axis key resolution.
MAX_DEPTH = MORTON_BITS

#: serialized cell record: centre, side, mass, com, 6 unique quadrupole
#: entries (xx, xy, xz, yy, yz, zz), count, child mask.  Little-endian.
_RECORD = struct.Struct("<3d d d 3d 6d q B")
_HEADER = struct.Struct("<4s q")
_MAGIC = b"OCT1"


class OctCell:
    """One octree cell: a leaf holding a single body, or an internal cell."""

    __slots__ = (
        "centre",
        "side",
        "children",
        "count",
        "mass",
        "com",
        "quad",
        "body_mass",
        "body_pos",
        "body_key",
    )

    def __init__(self, centre: np.ndarray, side: float):
        self.centre = np.asarray(centre, dtype=np.float64)
        self.side = float(side)
        self.children: Optional[list[Optional["OctCell"]]] = None
        self.count = 0
        self.mass = 0.0
        self.com = np.zeros(3)
        self.quad = np.zeros((3, 3))
        self.body_mass = 0.0
        self.body_pos = np.zeros(3)
        self.body_key = 0

    @property
    def is_leaf(self) -> bool:
        return self.count == 1

    @property
    def child_mask(self) -> int:
        if self.children is None:
            return 0
        mask = 0
        for s, c in enumerate(self.children):
            if c is not None:
                mask |= 1 << s
        return mask

    def child_cell(self, slot: int) -> "OctCell":
        """Geometry of the given child slot (does not create it in the tree)."""
        offs = np.array(
            [1.0 if slot & 4 else -1.0, 1.0 if slot & 2 else -1.0, 1.0 if slot & 1 else -1.0]
        )
        return OctCell(self.centre + 0.25 * self.side * offs, 0.5 * self.side)

    def __repr__(self) -> str:  # debugging aid only
        kind = "leaf" if self.is_leaf else f"cell[{self.count}]"
        return f"<{kind} side={self.side:.3g} centre={self.centre.round(3).tolist()}>"


def _octant(key: int, depth: int) -> int:
    """Key triplet selecting the child slot at the given depth (1-based)."""
    return (key >> (3 * (MORTON_BITS - depth))) & 7


def root_cell(bounds: DomainBounds) -> OctCell:
    """Empty root covering the whole quantization cube."""
    return OctCell(np.zeros(3), 2.0 * bounds.half_extent)


def build(bodies: Bodies, bounds: DomainBounds) -> OctCell:
    """Insertion build; returns the root even for zero bodies.

    Raises if a position falls outside the bounds cube or if two bodies share
    all 21 key levels (closer than the tree can resolve).
    """
    root = root_cell(bounds)
    keys = morton_keys(bodies.position, bounds)
    for i in range(len(bodies)):
        insert_body(root, float(bodies.mass[i]), bodies.position[i].copy(), int(keys[i]))
    return root


def insert_body(root: OctCell, mass: float, position: np.ndarray, key: int) -> None:
    """Insert one body (given its precomputed key) under the root."""
    _insert(root, 0, mass, position, key)


def _insert(cell: OctCell, depth: int, mass: float, pos: np.ndarray, key: int) -> None:
    if cell.count == 0:
        cell.count = 1
        cell.body_mass = mass
        cell.body_pos = pos
        cell.body_key = key
        return
    if cell.is_leaf:
        if cell.body_key == key:
            raise ValueError(
                f"two bodies share the level-{MAX_DEPTH} cell at key {key:#o}; "
                "positions are closer than the tree resolution"
            )
        old = (cell.body_mass, cell.body_pos, cell.body_key)
        cell.children = [None] * 8
        cell.body_mass, cell.body_pos, cell.body_key = 0.0, np.zeros(3), 0
        cell.count = 0
        _insert_below(cell, depth, *old)
        _insert_below(cell, depth, mass, pos, key)
        cell.count = 2
        return
    cell.count += 1
    _insert_below(cell, depth, mass, pos, key)


def _insert_below(cell: OctCell, depth: int, mass: float, pos: np.ndarray, key: int) -> None:
    if depth + 1 > MAX_DEPTH:
        raise ValueError(f"tree depth cap {MAX_DEPTH} exceeded at key {key:#o}")
    slot = _octant(key, depth + 1)
    child = cell.children[slot]
    if child is None:
        child = cell.child_cell(slot)
        cell.children[slot] = child
    count_before = child.count
    _insert(child, depth + 1, mass, pos, key)
    # _insert manages subtree counts; nothing further to do here
    assert child.count == count_before + 1


def compute_moments(cell: OctCell) -> MassMoments:
    """Bottom-up monopole + quadrupole computation, stored on each cell."""
    if cell.count == 0:
        mom = MassMoments.zero()
    elif cell.is_leaf:
        mom = MassMoments(cell.body_mass, cell.body_pos.copy(), np.zeros((3, 3)))
    else:
        parts = [compute_moments(c) for c in cell.children if c is not None]
        mom = combine_moments(parts)
    cell.mass, cell.com, cell.quad = mom.mass, mom.com, mom.quad
    return mom


def merge(a: OctCell, b: OctCell, visited: Optional[list[int]] = None) -> OctCell:
    """Merge tree b into tree a and return a.

    Whole subtrees of b are grafted where a has an empty slot, so merging two
    trees built from disjoint Morton ranges touches only the cells along
    their shared spine.  ``visited`` (a one-element list) accumulates the
    number of cells the merge actually walks, for cost audits.
    """
    if a.side != b.side or not np.array_equal(a.centre, b.centre):
        raise ValueError("merge requires identical root geometry")
    _merge(a, b, 0, visited if visited is not None else [0])
    return a


def _merge(a: OctCell, b: OctCell, depth: int, visited: list[int]) -> None:
    visited[0] += 1
    if b.count == 0:
        return
    if a.count == 0:
        a.children = b.children
        a.count = b.count
        a.body_mass, a.body_pos, a.body_key = b.body_mass, b.body_pos, b.body_key
        return
    if a.is_leaf and b.is_leaf:
        _insert(a, depth, b.body_mass, b.body_pos, b.body_key)
        return
    if a.is_leaf:
        # adopt b's subtree, then re-insert a's body into it
        old = (a.body_mass, a.body_pos, a.body_key)
        a.children = b.children
        a.count = b.count
        a.body_mass, a.body_pos, a.body_key = 0.0, np.zeros(3), 0
        _insert(a, depth, *old)
        return
    if b.is_leaf:
        _insert(a, depth, b.body_mass, b.body_pos, b.body_key)
        return
    a.count += b.count
    for slot in range(8):
        bc = b.children[slot]
        if bc is None:
            continue
        ac = a.children[slot]
        if ac is None:
            a.children[slot] = bc  # graft: subtree moves wholesale
        else:
            _merge(ac, bc, depth + 1, visited)


def serialize(cell: OctCell) -> bytes:
    """Pre-order byte encoding of a (sub)tree.

    Fixed record layout per cell: centre, side, mass, com, six unique
    quadrupole entries, count, child mask; all reals are 64-bit little-endian
    so round-trips are bit-exact.  Leaves carry the body as (mass, com).
    """
    out = [b""]  # placeholder for header
    n = [0]

    def walk(c: OctCell) -> None:
        n[0] += 1
        if c.is_leaf:
            mass, com = c.body_mass, c.body_pos
        else:
            mass, com = c.mass, c.com
        q = c.quad
        out.append(
            _RECORD.pack(
                c.centre[0],
                c.centre[1],
                c.centre[2],
                c.side,
                mass,
                com[0],
                com[1],
                com[2],
                q[0, 0],
                q[0, 1],
                q[0, 2],
                q[1, 1],
                q[1, 2],
                q[2, 2],
                c.count,
                c.child_mask,
            )
        )
        if c.children is not None:
            for child in c.children:
                if child is not None:
                    walk(child)

    walk(cell)
    out[0] = _HEADER.pack(_MAGIC, n[0])
    return b"".join(out)


def deserialize(blob: bytes) -> OctCell:
    """Rebuild a linked tree from :func:`serialize` output."""
    magic, n = _HEADER.unpack_from(blob, 0)
    if magic != _MAGIC:
        raise ValueError("not a serialized octree")
    offset = [_HEADER.size]
    cells_read = [0]

    def read() -> OctCell:
        vals = _RECORD.unpack_from(blob, offset[0])
        offset[0] += _RECORD.size
        cells_read[0] += 1
        cell = OctCell(np.array(vals[0:3]), vals[3])
        mass, com = vals[4], np.array(vals[5:8])
        qxx, qxy, qxz, qyy, qyz, qzz = vals[8:14]
        cell.count = vals[14]
        mask = vals[15]
        cell.quad = np.array([[qxx, qxy, qxz], [qxy, qyy, qyz], [qxz, qyz, qzz]])
        if cell.count == 1:
            cell.body_mass, cell.body_pos = mass, com
            cell.body_key = 0  # keys are not carried on the wire
        else:
            cell.mass, cell.com = mass, com
        if mask:
            cell.children = [None] * 8
            for slot in range(8):
                if mask & (1 << slot):
                    cell.children[slot] = read()
        return cell

    root = read()
    if cells_read[0] != n or offset[0] != len(blob):
        raise ValueError("serialized tree truncated or trailing data")
    return root


def traverse_accel(
    root: OctCell,
    position: np.ndarray,
    theta: float,
    eps: float,
    trace: Optional[list[tuple[str, int]]] = None,
) -> tuple[np.ndarray, int]:
    """Acceleration on a test position from a tree with computed moments.

    The multipole acceptance criterion compares cell side l against the
    distance d to the cell's center of mass: l/d < theta takes the cell as a
    whole (ties open).  Work is WORK_PP per body-body interaction plus
    WORK_PC per body-cell interaction.  A leaf at exactly ``position`` is the
    body itself and contributes neither force nor work.

    ``trace``, when given, receives ("pp"|"pc", path_key) per interaction,
    where path_key is the cell's octant path with a leading 1 bit.
    """
    position = np.asarray(position, dtype=np.float64)
    acc = np.zeros(3)
    work = 0

    def visit(cell: OctCell, path: int) -> None:
        nonlocal work
        if cell.is_leaf:
            if np.array_equal(cell.body_pos, position):
                return
            acc[:] += pairwise_accel(position, cell.body_pos, cell.body_mass, eps)
            work += WORK_PP
            if trace is not None:
                trace.append(("pp", path))
            return
        d = position - cell.com
        d2 = float(d[0] * d[0] + d[1] * d[1] + d[2] * d[2])
        if d2 > 0.0 and cell.side < theta * np.sqrt(d2):
            # scalar arithmetic in the same order as the compiled kernels,
            # so both paths produce bit-identical accelerations
            r1 = np.sqrt(d2)
            q = cell.quad
            qr0 = q[0, 0] * d[0] + q[0, 1] * d[1] + q[0, 2] * d[2]
            qr1 = q[0, 1] * d[0] + q[1, 1] * d[1] + q[1, 2] * d[2]
            qr2 = q[0, 2] * d[0] + q[1, 2] * d[1] + q[2, 2] * d[2]
            rqr = d[0] * qr0 + d[1] * qr1 + d[2] * qr2
            mono = -cell.mass / (d2 * r1)
            c5 = d2 * d2 * r1
            c7 = 2.5 * rqr / (d2 * d2 * d2 * r1)
            acc[0] += mono * d[0] + qr0 / c5 - c7 * d[0]
            acc[1] += mono * d[1] + qr1 / c5 - c7 * d[1]
            acc[2] += mono * d[2] + qr2 / c5 - c7 * d[2]
            work += WORK_PC
            if trace is not None:
                trace.append(("pc", path))
            return
        for slot in range(8):
            child = cell.children[slot]
            if child is not None:
                visit(child, (path << 3) | slot)

    if root.count == 0:
        return acc, 0
    if root.is_leaf:
        visit(root, 1)
    else:
        # the walk starts at the root's children: the root cell itself is
        # never taken as a single interaction
        for slot in range(8):
            child = root.children[slot]
            if child is not None:
                visit(child, (1 << 3) | slot)
    return acc, work


def leaf_cells(root: OctCell) -> Iterator[tuple[int, OctCell]]:
    """Yield (path_key, leaf) pairs in pre-order."""

    def walk(cell: OctCell, path: int) -> Iterator[tuple[int, OctCell]]:
        if cell.is_leaf:
            yield path, cell
        elif cell.children is not None:
            for slot in range(8):
                child = cell.children[slot]
                if child is not None:
                    yield from walk(child, (path << 3) | slot)

    if root.count:
        yield from walk(root, 1)


def structurally_equal(
    a: OctCell,
    b: OctCell,
    moment_tol: Optional[float] = None,
    report: Optional[Callable[[str], None]] = None,
) -> bool:
    """Same shape, counts and leaf bodies; optionally same moments within tol."""

    def fail(msg: str) -> bool:
        if report is not None:
            report(msg)
        return False

    def eq(x: OctCell, y: OctCell, path: int) -> bool:
        if x.side != y.side or not np.array_equal(x.centre, y.centre):
            return fail(f"geometry differs at {path:#o}")
        if x.count != y.count or x.child_mask != y.child_mask:
            return fail(f"count/mask differ at {path:#o}: {x.count}/{x.child_mask:#04x} vs {y.count}/{y.child_mask:#04x}")
        if x.is_leaf:
            if x.body_mass != y.body_mass or not np.array_equal(x.body_pos, y.body_pos):
                return fail(f"leaf body differs at {path:#o}")
            return True
        if moment_tol is not None:
            scale = max(abs(x.mass), 1e-300)
            if abs(x.mass - y.mass) > moment_tol * scale:
                return fail(f"mass differs at {path:#o}")
            if np.any(np.abs(x.com - y.com) > moment_tol * max(1.0, float(np.abs(x.com).max()))):
                return fail(f"com differs at {path:#o}")
            qscale = max(1.0, float(np.abs(x.quad).max()))
            if np.any(np.abs(x.quad - y.quad) > moment_tol * qscale):
                return fail(f"quad differs at {path:#o}")
        if x.children is None:
            return True
        for slot in range(8):
            cx, cy = x.children[slot], y.children[slot]
            if (cx is None) != (cy is None):
                return fail(f"child presence differs at {path:#o} slot {slot}")
            if cx is not None and not eq(cx, cy, (path << 3) | slot):
                return False
        return True

    return eq(a, b, 1)
