"""Morton (Z-order) keys over a cubic domain.

Positions are quantized to 21 bits per axis inside a cube ``[-R, R)^3`` and
interleaved into a 63-bit key with x as the most significant axis.  21 levels
of 3 bits each is the native resolution of every octree in this package, so a
key doubles as the full octant path of a body.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

#: bits per axis; 3 * MORTON_BITS = 63 fits a signed or unsigned 64-bit int.
MORTON_BITS = 21

#: padding factor applied when deriving bounds from positions, so that the
#: extreme body lands strictly inside the half-open cube.
BOUNDS_PAD = 1.001


@dataclass(frozen=True)
class DomainBounds:
    """Cubic domain ``[-R, R)`` per axis with half-extent ``R > 0``."""

    half_extent: float

    def __post_init__(self) -> None:
        if not self.half_extent > 0.0:
            raise ValueError(f"half_extent must be positive, got {self.half_extent}")

    @classmethod
    def from_positions(cls, positions: np.ndarray) -> "DomainBounds":
        """Smallest padded cube containing every position.

        The pad keeps the largest coordinate strictly below R; a degenerate
        all-zero cloud falls back to a unit cube.
        """
        positions = np.asarray(positions, dtype=np.float64)
        extreme = float(np.max(np.abs(positions))) if positions.size else 0.0
        return cls(BOUNDS_PAD * extreme if extreme > 0.0 else 1.0)


def quantize(coord: float, bounds: DomainBounds) -> int:
    """Map a coordinate to its 21-bit cell index along one axis.

    Floor quantization over ``[-R, R)``: cell ``i`` covers
    ``[-R + i*2R/2^21, -R + (i+1)*2R/2^21)``, so a body sitting exactly on a
    splitting plane belongs to the upper cell.
    """
    r = bounds.half_extent
    if not -r <= coord or not coord < r:
        raise ValueError(f"coordinate {coord} outside domain [-{r}, {r})")
    i = int(np.floor((coord + r) / (2.0 * r) * (1 << MORTON_BITS)))
    # floating-point roundoff at the upper edge may land on 2^21
    return min(max(i, 0), (1 << MORTON_BITS) - 1)


def _spread(v: np.ndarray) -> np.ndarray:
    """Spread the low 21 bits of each value, inserting two zeros between bits."""
    v = v.astype(np.uint64) & np.uint64(0x1FFFFF)
    v = (v | (v << np.uint64(32))) & np.uint64(0x1F00000000FFFF)
    v = (v | (v << np.uint64(16))) & np.uint64(0x1F0000FF0000FF)
    v = (v | (v << np.uint64(8))) & np.uint64(0x100F00F00F00F00F)
    v = (v | (v << np.uint64(4))) & np.uint64(0x10C30C30C30C30C3)
    v = (v | (v << np.uint64(2))) & np.uint64(0x1249249249249249)
    return v


def interleave(ix: int, iy: int, iz: int) -> int:
    """Interleave three 21-bit indices into a 63-bit key.

    Bit ``3k+2`` of the key is bit ``k`` of x, ``3k+1`` of y, ``3k`` of z:
    x is the most significant axis, then y, then z.
    """
    for name, v in (("ix", ix), ("iy", iy), ("iz", iz)):
        if not 0 <= v < (1 << MORTON_BITS):
            raise ValueError(f"{name}={v} outside [0, 2^{MORTON_BITS})")
    a = _spread(np.asarray([ix, iy, iz]))
    return int((a[0] << np.uint64(2)) | (a[1] << np.uint64(1)) | a[2])


def interleave2(ix: int, iy: int) -> int:
    """Two-dimensional variant (x more significant); used by planar tests."""
    key = 0
    for k in range(MORTON_BITS):
        key |= ((ix >> k) & 1) << (2 * k + 1)
        key |= ((iy >> k) & 1) << (2 * k)
    return key


def deinterleave(key: int) -> tuple[int, int, int]:
    """Inverse of :func:`interleave` (bit loop; used for checks, not speed)."""
    ix = iy = iz = 0
    for k in range(MORTON_BITS):
        ix |= ((key >> (3 * k + 2)) & 1) << k
        iy |= ((key >> (3 * k + 1)) & 1) << k
        iz |= ((key >> (3 * k)) & 1) << k
    return ix, iy, iz


def morton_key(position: np.ndarray, bounds: DomainBounds) -> int:
    """63-bit key of a single position."""
    x, y, z = (quantize(float(c), bounds) for c in np.asarray(position))
    return interleave(x, y, z)


def morton_keys(positions: np.ndarray, bounds: DomainBounds) -> np.ndarray:
    """Vectorized keys for an ``(n, 3)`` position array.

    Raises on any coordinate outside the domain, like :func:`quantize`.
    """
    positions = np.asarray(positions, dtype=np.float64)
    r = bounds.half_extent
    if positions.size and (positions.min() < -r or positions.max() >= r):
        bad = positions[(np.abs(positions) >= r).any(axis=1)][0]
        raise ValueError(f"position {bad} outside domain [-{r}, {r})")
    scaled = np.floor((positions + r) / (2.0 * r) * (1 << MORTON_BITS))
    cells = np.clip(scaled, 0, (1 << MORTON_BITS) - 1).astype(np.uint64)
    return (
        (_spread(cells[:, 0]) << np.uint64(2))
        | (_spread(cells[:, 1]) << np.uint64(1))
        | _spread(cells[:, 2])
    )


def sort_order(keys: np.ndarray) -> np.ndarray:
    """Permutation sorting keys ascending, ties broken by original index."""
    return np.argsort(keys, kind="stable")
