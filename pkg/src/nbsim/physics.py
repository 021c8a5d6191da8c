"""Pure gravitational kernels: pairwise forces, multipole moments, energies.

Units are dimensionless with G = 1 throughout.  Forces follow a Plummer
softening: the pair potential is -m_i m_j (r^2 + eps^2)^(-1/2) and the
acceleration kernel is its exact negative gradient, so softened dynamics
conserve the softened total energy.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numba
import numpy as np


@dataclass
class Bodies:
    """Structure-of-arrays container for a set of point masses.

    ``work`` holds the per-body interaction count of the most recent force
    evaluation; decompositions balance on it.
    """

    mass: np.ndarray
    position: np.ndarray
    velocity: np.ndarray
    acceleration: np.ndarray = field(default=None)  # type: ignore[assignment]
    work: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        n = len(self.mass)
        self.mass = np.ascontiguousarray(self.mass, dtype=np.float64)
        self.position = np.ascontiguousarray(self.position, dtype=np.float64)
        self.velocity = np.ascontiguousarray(self.velocity, dtype=np.float64)
        if self.acceleration is None:
            self.acceleration = np.zeros((n, 3))
        if self.work is None:
            self.work = np.zeros(n, dtype=np.int64)
        self.acceleration = np.ascontiguousarray(self.acceleration, dtype=np.float64)
        self.work = np.ascontiguousarray(self.work, dtype=np.int64)
        if self.position.shape != (n, 3) or self.velocity.shape != (n, 3):
            raise ValueError("position/velocity must have shape (n, 3)")
        if self.acceleration.shape != (n, 3) or self.work.shape != (n,):
            raise ValueError("acceleration/work shapes inconsistent with mass")
        if np.any(self.work < 0):
            raise ValueError("work counts must be non-negative")

    def __len__(self) -> int:
        return len(self.mass)

    @classmethod
    def zeros(cls, n: int) -> "Bodies":
        return cls(np.zeros(n), np.zeros((n, 3)), np.zeros((n, 3)))

    def copy(self) -> "Bodies":
        return Bodies(
            self.mass.copy(),
            self.position.copy(),
            self.velocity.copy(),
            self.acceleration.copy(),
            self.work.copy(),
        )

    def take(self, indices) -> "Bodies":
        """New container holding the selected bodies (copies)."""
        return Bodies(
            self.mass[indices].copy(),
            self.position[indices].copy(),
            self.velocity[indices].copy(),
            self.acceleration[indices].copy(),
            self.work[indices].copy(),
        )

    @staticmethod
    def concat(parts: list["Bodies"]) -> "Bodies":
        if not parts:
            return Bodies.zeros(0)
        return Bodies(
            np.concatenate([p.mass for p in parts]),
            np.concatenate([p.position for p in parts]),
            np.concatenate([p.velocity for p in parts]),
            np.concatenate([p.acceleration for p in parts]),
            np.concatenate([p.work for p in parts]),
        )

    def pack(self) -> bytes:
        """Columnar little-endian encoding (mass, position, velocity, work).

        Accelerations are deliberately dropped; they are recomputed after any
        exchange.  Round-trips bit-exactly through :meth:`unpack`.
        """
        n = len(self)
        return b"".join(
            (
                struct.pack("<q", n),
                self.mass.astype("<f8").tobytes(),
                self.position.astype("<f8").tobytes(),
                self.velocity.astype("<f8").tobytes(),
                self.work.astype("<i8").tobytes(),
            )
        )

    @classmethod
    def unpack(cls, blob: bytes) -> "Bodies":
        (n,) = struct.unpack_from("<q", blob, 0)
        off = 8

        def column(count, dtype):
            nonlocal off
            arr = np.frombuffer(blob, dtype=dtype, count=count, offset=off).copy()
            off += arr.nbytes
            return arr

        mass = column(n, "<f8")
        pos = column(3 * n, "<f8").reshape(n, 3)
        vel = column(3 * n, "<f8").reshape(n, 3)
        work = column(n, "<i8")
        return cls(mass, pos, vel, np.zeros((n, 3)), work)


@dataclass
class MassMoments:
    """Monopole + quadrupole of a mass distribution about its center of mass.

    ``quad`` is the symmetric traceless tensor Q_ab = sum m (3 x_a x_b -
    delta_ab |x|^2) with x measured from ``com``.  The dipole vanishes in this
    frame and is not stored.  A zero-mass distribution has zeroed fields.
    """

    mass: float
    com: np.ndarray
    quad: np.ndarray

    @classmethod
    def zero(cls) -> "MassMoments":
        return cls(0.0, np.zeros(3), np.zeros((3, 3)))


def pairwise_accel(pos_i: np.ndarray, pos_j: np.ndarray, m_j: float, eps: float) -> np.ndarray:
    """Softened acceleration of a body at pos_i due to a mass m_j at pos_j.

    With eps = 0 and coincident positions the zero vector is returned: a body
    exerts no force on itself, and zero is the safe identity.
    """
    d = np.asarray(pos_i, dtype=np.float64) - np.asarray(pos_j, dtype=np.float64)
    # explicit sum: BLAS dot may fuse multiply-adds, and the compiled tree
    # kernels must reproduce this arithmetic bit-for-bit
    r2 = float(d[0] * d[0] + d[1] * d[1] + d[2] * d[2])
    if r2 == 0.0:
        return np.zeros(3)
    return -m_j * d / (r2 + eps * eps) ** 1.5


def moments_from_bodies(masses: np.ndarray, positions: np.ndarray) -> MassMoments:
    """Exact moments of a finite set of point masses."""
    masses = np.asarray(masses, dtype=np.float64)
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    total = float(masses.sum())
    if total == 0.0:
        return MassMoments.zero()
    com = (masses[:, None] * positions).sum(axis=0) / total
    rel = positions - com
    r2 = np.einsum("ij,ij->i", rel, rel)
    quad = 3.0 * np.einsum("i,ia,ib->ab", masses, rel, rel)
    quad -= np.diag(np.full(3, float(masses @ r2)))
    return MassMoments(total, com, quad)


def combine_moments(parts: list[MassMoments]) -> MassMoments:
    """Moments of a union of distributions via the parallel-axis shift.

    Each part's quadrupole is translated from its own com to the combined com:
    Q += m (3 d d^T - |d|^2 I) with d the com offset.  Zero-mass parts are
    ignored.  Exact: combining equals recomputing from the raw bodies.
    """
    live = [p for p in parts if p.mass != 0.0]
    if not live:
        return MassMoments.zero()
    total = 0.0
    com = np.zeros(3)
    for p in live:
        total += p.mass
        com += p.mass * p.com
    com /= total
    quad = np.zeros((3, 3))
    for p in live:
        d = p.com - com
        d2 = float(d[0] * d[0] + d[1] * d[1] + d[2] * d[2])
        quad += p.quad + p.mass * (3.0 * np.outer(d, d) - d2 * np.eye(3))
    return MassMoments(total, com, quad)


def cell_accel(position: np.ndarray, moments: MassMoments) -> np.ndarray:
    """Acceleration at ``position`` from a cell's monopole + quadrupole.

    The expansion of the (unsoftened) potential about the com is
    phi(r) = -M/r - (r.Q.r)/(2 r^5); this returns its exact negative gradient:

        a = -M r / r^3 + (Q r) / r^5 - (5/2) (r.Q.r) r / r^7

    Cell interactions are never softened; softening only regularises body-body
    close encounters.  Raises if ``position`` coincides with the com.
    """
    r = np.asarray(position, dtype=np.float64) - moments.com
    r2 = float(r @ r)
    if r2 == 0.0:
        raise ValueError("field point coincides with cell center of mass")
    r1 = np.sqrt(r2)
    qr = moments.quad @ r
    rqr = float(r @ qr)
    return (-moments.mass / (r2 * r1)) * r + qr / (r2 * r2 * r1) - (2.5 * rqr / (r2 * r2 * r2 * r1)) * r


@numba.njit(cache=True, nogil=True)
def _accel_all_pairs(mass, pos, eps):  # pragma: no cover - exercised via wrapper
    n = pos.shape[0]
    acc = np.zeros((n, 3))
    e2 = eps * eps
    for i in range(n):
        ax = ay = az = 0.0
        xi = pos[i, 0]
        yi = pos[i, 1]
        zi = pos[i, 2]
        for j in range(n):
            if i == j:
                continue
            dx = xi - pos[j, 0]
            dy = yi - pos[j, 1]
            dz = zi - pos[j, 2]
            r2 = dx * dx + dy * dy + dz * dz
            if r2 == 0.0:
                continue
            w = mass[j] / ((r2 + e2) * np.sqrt(r2 + e2))
            ax -= w * dx
            ay -= w * dy
            az -= w * dz
        acc[i, 0] = ax
        acc[i, 1] = ay
        acc[i, 2] = az
    return acc


@numba.njit(cache=True, nogil=True)
def _accel_from_sources(pos_t, mass_s, pos_s, eps):  # pragma: no cover
    n = pos_t.shape[0]
    m = pos_s.shape[0]
    acc = np.zeros((n, 3))
    e2 = eps * eps
    for i in range(n):
        ax = ay = az = 0.0
        xi = pos_t[i, 0]
        yi = pos_t[i, 1]
        zi = pos_t[i, 2]
        for j in range(m):
            dx = xi - pos_s[j, 0]
            dy = yi - pos_s[j, 1]
            dz = zi - pos_s[j, 2]
            r2 = dx * dx + dy * dy + dz * dz
            if r2 == 0.0:
                continue
            w = mass_s[j] / ((r2 + e2) * np.sqrt(r2 + e2))
            ax -= w * dx
            ay -= w * dy
            az -= w * dz
        acc[i, 0] = ax
        acc[i, 1] = ay
        acc[i, 2] = az
    return acc


@numba.njit(cache=True, nogil=True)
def _potential_pairs(mass, pos, eps):  # pragma: no cover
    n = pos.shape[0]
    e2 = eps * eps
    pot = 0.0
    for i in range(n):
        for j in range(i + 1, n):
            dx = pos[i, 0] - pos[j, 0]
            dy = pos[i, 1] - pos[j, 1]
            dz = pos[i, 2] - pos[j, 2]
            r2 = dx * dx + dy * dy + dz * dz
            pot -= mass[i] * mass[j] / np.sqrt(r2 + e2)
    return pot


def direct_accelerations(masses: np.ndarray, positions: np.ndarray, eps: float) -> np.ndarray:
    """All-pairs softened accelerations, O(n^2); the oracle every tree answer
    is judged against."""
    return _accel_all_pairs(
        np.ascontiguousarray(masses, dtype=np.float64),
        np.ascontiguousarray(positions, dtype=np.float64),
        float(eps),
    )


def accelerations_from_sources(
    target_positions: np.ndarray,
    source_masses: np.ndarray,
    source_positions: np.ndarray,
    eps: float,
) -> np.ndarray:
    """Accelerations on targets due to an independent set of sources.

    Coincident target/source pairs contribute zero, so a body list may be
    passed as its own source chunk.
    """
    return _accel_from_sources(
        np.ascontiguousarray(target_positions, dtype=np.float64),
        np.ascontiguousarray(source_masses, dtype=np.float64),
        np.ascontiguousarray(source_positions, dtype=np.float64),
        float(eps),
    )


def kinetic_energy(bodies: Bodies) -> float:
    v2 = np.einsum("ij,ij->i", bodies.velocity, bodies.velocity)
    return 0.5 * float(bodies.mass @ v2)


def potential_energy(bodies: Bodies, eps: float = 0.0) -> float:
    """Sum over unordered pairs of -m_i m_j (r^2 + eps^2)^(-1/2)."""
    return float(_potential_pairs(bodies.mass, bodies.position, float(eps)))


def total_energy(bodies: Bodies, eps: float = 0.0) -> float:
    return kinetic_energy(bodies) + potential_energy(bodies, eps)
