"""Array-backed octree mirror and the compiled kernels that run on it.

The linked tree in :mod:`nbsim.octree` is the structural reference: easy to
build, merge and reason about.  For the per-step hot loops (moments, batched
traversal) the same tree is flattened into contiguous arrays in pre-order and
handed to ``numba`` kernels compiled with ``nogil=True``, so rank threads
evaluate forces genuinely in parallel.  Kernels mirror the reference
implementations operation-for-operation; equivalence tests hold them to
bit-level agreement.
"""

from __future__ import annotations

import numba
import numpy as np

from .morton import MORTON_BITS
from .octree import _HEADER, _MAGIC, _RECORD, OctCell, WORK_PC, WORK_PP

_REC_DTYPE = np.dtype(
    [
        ("centre", "<f8", 3),
        ("side", "<f8"),
        ("mass", "<f8"),
        ("com", "<f8", 3),
        ("quad", "<f8", 6),
        ("count", "<i8"),
        ("mask", "u1"),
    ]
)
assert _REC_DTYPE.itemsize == _RECORD.size


class FlatTree:
    """Pre-order arrays for one octree; ``children[i, s] == -1`` means absent.

    ``quad`` stores the six unique entries (xx, xy, xz, yy, yz, zz).  Leaves
    keep the body as (mass, com), which lets the traversal kernel treat body
    and cell interactions through the same fields.
    """

    def __init__(self, centre, side, mass, com, quad, count, children):
        self.centre = centre
        self.side = side
        self.mass = mass
        self.com = com
        self.quad = quad
        self.count = count
        self.children = children

    def __len__(self) -> int:
        return len(self.count)

    @classmethod
    def from_cell(cls, root: OctCell) -> "FlatTree":
        cells: list[OctCell] = []

        def walk(c: OctCell) -> None:
            cells.append(c)
            if c.children is not None:
                for child in c.children:
                    if child is not None:
                        walk(child)

        walk(root)
        n = len(cells)
        centre = np.empty((n, 3))
        side = np.empty(n)
        mass = np.empty(n)
        com = np.empty((n, 3))
        quad = np.empty((n, 6))
        count = np.empty(n, dtype=np.int64)
        children = np.full((n, 8), -1, dtype=np.int32)

        index = {id(c): i for i, c in enumerate(cells)}
        for i, c in enumerate(cells):
            centre[i] = c.centre
            side[i] = c.side
            count[i] = c.count
            if c.is_leaf:
                mass[i] = c.body_mass
                com[i] = c.body_pos
            else:
                mass[i] = c.mass
                com[i] = c.com
            q = c.quad
            quad[i] = (q[0, 0], q[0, 1], q[0, 2], q[1, 1], q[1, 2], q[2, 2])
            if c.children is not None:
                for s, child in enumerate(c.children):
                    if child is not None:
                        children[i, s] = index[id(child)]
        return cls(centre, side, mass, com, quad, count, children)

    def to_bytes(self) -> bytes:
        """Identical bytes to serializing the linked tree this mirrors."""
        rec = np.empty(len(self), dtype=_REC_DTYPE)
        rec["centre"] = self.centre
        rec["side"] = self.side
        rec["mass"] = self.mass
        rec["com"] = self.com
        rec["quad"] = self.quad
        rec["count"] = self.count
        mask = np.zeros(len(self), dtype=np.uint8)
        for s in range(8):
            mask |= ((self.children[:, s] >= 0) << s).astype(np.uint8)
        rec["mask"] = mask
        return _HEADER.pack(_MAGIC, len(self)) + rec.tobytes()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "FlatTree":
        magic, n = _HEADER.unpack_from(blob, 0)
        if magic != _MAGIC:
            raise ValueError("not a serialized octree")
        rec = np.frombuffer(blob, dtype=_REC_DTYPE, count=n, offset=_HEADER.size)
        children = np.full((n, 8), -1, dtype=np.int32)
        # pre-order: each record's children follow it in slot order
        stack: list[tuple[int, list[int]]] = []
        slots_of = lambda m: [s for s in range(8) if m & (1 << s)]
        if n:
            stack.append((0, slots_of(int(rec["mask"][0]))))
        for i in range(1, n):
            while stack and not stack[-1][1]:
                stack.pop()
            if not stack:
                raise ValueError("serialized tree truncated or trailing data")
            parent, pending = stack[-1]
            children[parent, pending.pop(0)] = i
            stack.append((i, slots_of(int(rec["mask"][i]))))
        return cls(
            np.ascontiguousarray(rec["centre"], dtype=np.float64),
            np.ascontiguousarray(rec["side"], dtype=np.float64),
            np.ascontiguousarray(rec["mass"], dtype=np.float64),
            np.ascontiguousarray(rec["com"], dtype=np.float64),
            np.ascontiguousarray(rec["quad"], dtype=np.float64),
            np.ascontiguousarray(rec["count"], dtype=np.int64),
            children,
        )

    def compute_moments(self) -> None:
        _moments_kernel(self.children, self.count, self.mass, self.com, self.quad)

    def traverse(self, positions: np.ndarray, theta: float, eps: float):
        """Accelerations and work counts for a batch of target positions.

        A leaf whose body sits exactly at the target position is the target
        itself and is skipped.  Visit order matches the recursive reference
        (children in slot order, depth first), so sums agree bit-for-bit.
        """
        positions = np.ascontiguousarray(positions, dtype=np.float64).reshape(-1, 3)
        acc = np.zeros_like(positions)
        work = np.zeros(len(positions), dtype=np.int64)
        if len(self) and self.count[0] > 0:
            _traverse_kernel(
                self.children,
                self.count,
                self.side,
                self.mass,
                self.com,
                self.quad,
                positions,
                float(theta),
                float(eps),
                acc,
                work,
            )
        return acc, work

    def traverse_traced(self, position: np.ndarray, theta: float, eps: float):
        """Single-body traversal that also returns the interaction list.

        Returns (acc, work, [(kind, path_key), ...]) with kind "pp" or "pc";
        path keys match :func:`nbsim.octree.traverse_accel` traces.
        """
        position = np.ascontiguousarray(position, dtype=np.float64)
        acc = np.zeros((1, 3))
        work = np.zeros(1, dtype=np.int64)
        cap = 4 * len(self) + 64
        kinds = np.zeros(cap, dtype=np.int8)
        paths = np.zeros(cap, dtype=np.uint64)
        used = 0
        if len(self) and self.count[0] > 0:
            used = _traverse_traced_kernel(
                self.children,
                self.count,
                self.side,
                self.mass,
                self.com,
                self.quad,
                position,
                float(theta),
                float(eps),
                acc,
                work,
                kinds,
                paths,
            )
        trace = [("pp" if kinds[i] == 1 else "pc", int(paths[i])) for i in range(used)]
        return acc[0], int(work[0]), trace


@numba.njit(cache=True, nogil=True)
def _moments_kernel(children, count, mass, com, quad):  # pragma: no cover
    n = count.shape[0]
    for i in range(n - 1, -1, -1):
        if count[i] <= 1:
            continue  # leaves carry the body; empty cells stay zero
        total = 0.0
        cx = cy = cz = 0.0
        for s in range(8):
            c = children[i, s]
            if c < 0 or mass[c] == 0.0:
                continue
            m = mass[c]
            total += m
            cx += m * com[c, 0]
            cy += m * com[c, 1]
            cz += m * com[c, 2]
        if total == 0.0:
            mass[i] = 0.0
            com[i, 0] = com[i, 1] = com[i, 2] = 0.0
            for k in range(6):
                quad[i, k] = 0.0
            continue
        cx /= total
        cy /= total
        cz /= total
        qxx = qxy = qxz = qyy = qyz = qzz = 0.0
        for s in range(8):
            c = children[i, s]
            if c < 0 or mass[c] == 0.0:
                continue
            m = mass[c]
            dx = com[c, 0] - cx
            dy = com[c, 1] - cy
            dz = com[c, 2] - cz
            d2 = dx * dx + dy * dy + dz * dz
            qxx += quad[c, 0] + m * (3.0 * (dx * dx) - d2)
            qxy += quad[c, 1] + m * (3.0 * (dx * dy) - 0.0)
            qxz += quad[c, 2] + m * (3.0 * (dx * dz) - 0.0)
            qyy += quad[c, 3] + m * (3.0 * (dy * dy) - d2)
            qyz += quad[c, 4] + m * (3.0 * (dy * dz) - 0.0)
            qzz += quad[c, 5] + m * (3.0 * (dz * dz) - d2)
        mass[i] = total
        com[i, 0] = cx
        com[i, 1] = cy
        com[i, 2] = cz
        quad[i, 0] = qxx
        quad[i, 1] = qxy
        quad[i, 2] = qxz
        quad[i, 3] = qyy
        quad[i, 4] = qyz
        quad[i, 5] = qzz


_STACK_CAP = 8 * MORTON_BITS + 8


@numba.njit(cache=True, nogil=True)
def _traverse_kernel(
    children, count, side, mass, com, quad, positions, theta, eps, acc, work
):  # pragma: no cover
    e2 = eps * eps
    stack = np.empty(_STACK_CAP, dtype=np.int64)
    for b in range(positions.shape[0]):
        px = positions[b, 0]
        py = positions[b, 1]
        pz = positions[b, 2]
        ax = ay = az = 0.0
        w = 0
        top = 0
        if count[0] == 1:
            stack[top] = 0
            top += 1
        else:
            for s in range(7, -1, -1):
                c = children[0, s]
                if c >= 0:
                    stack[top] = c
                    top += 1
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
                for s in range(7, -1, -1):
                    c = children[i, s]
                    if c >= 0:
                        stack[top] = c
                        top += 1
        acc[b, 0] = ax
        acc[b, 1] = ay
        acc[b, 2] = az
        work[b] = w


@numba.njit(cache=True, nogil=True)
def _traverse_traced_kernel(
    children, count, side, mass, com, quad, position, theta, eps, acc, work, kinds, paths
):  # pragma: no cover
    e2 = eps * eps
    stack = np.empty(_STACK_CAP, dtype=np.int64)
    pstack = np.empty(_STACK_CAP, dtype=np.uint64)
    px = position[0]
    py = position[1]
    pz = position[2]
    ax = ay = az = 0.0
    w = 0
    used = 0
    top = 0
    if count[0] == 1:
        stack[top] = 0
        pstack[top] = 1
        top += 1
    else:
        for s in range(7, -1, -1):
            c = children[0, s]
            if c >= 0:
                stack[top] = c
                pstack[top] = (1 << 3) | s
                top += 1
    while top > 0:
        top -= 1
        i = stack[top]
        path = pstack[top]
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
            paths[used] = path
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
            paths[used] = path
            used += 1
        else:
            for s in range(7, -1, -1):
                c = children[i, s]
                if c >= 0:
                    stack[top] = c
                    pstack[top] = (path << np.uint64(3)) | np.uint64(s)
                    top += 1
    acc[0, 0] = ax
    acc[0, 1] = ay
    acc[0, 2] = az
    work[0] = w
    return used
