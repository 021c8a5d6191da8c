"""Kick-drift-kick (velocity Verlet) leapfrog integration.

The integrator is agnostic about where accelerations come from: a *provider*
callback recomputes ``bodies.acceleration`` in place from current positions.
In the distributed drivers that callback is the whole decompose/build/share/
force pipeline, which keeps the time-stepping logic in exactly one place.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

from .physics import Bodies

AccelProvider = Callable[[Bodies], None]


@dataclass(frozen=True)
class TimeStep:
    """Fixed step size dt over a total integration time t_end."""

    dt: float
    t_end: float

    def __post_init__(self) -> None:
        if not self.dt > 0.0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if self.t_end < 0.0:
            raise ValueError(f"t_end must be non-negative, got {self.t_end}")

    @property
    def steps(self) -> int:
        return round(self.t_end / self.dt)


def kick(bodies: Bodies, dt: float) -> None:
    """Advance velocities by current accelerations over dt."""
    bodies.velocity += bodies.acceleration * dt


def drift(bodies: Bodies, dt: float) -> None:
    """Advance positions by current velocities over dt."""
    bodies.position += bodies.velocity * dt


def kdk_step(bodies: Bodies, dt: float, accel_provider: AccelProvider) -> None:
    """One second-order, time-symmetric leapfrog step.

    Precondition: ``bodies.acceleration`` already reflects current positions
    (call the provider once before the first step to bootstrap).  On return
    the accelerations hold the values for the new positions, so steps chain
    without recomputation.
    """
    kick(bodies, 0.5 * dt)
    drift(bodies, dt)
    accel_provider(bodies)
    kick(bodies, 0.5 * dt)
