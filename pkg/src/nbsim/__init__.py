"""Gravitational N-body simulation with serial and distributed Barnes-Hut treecodes.

The package is organised around small, independently testable layers:

- :mod:`nbsim.physics`       pairwise kernels, multipole moments, energies
- :mod:`nbsim.integrator`    kick-drift-kick leapfrog
- :mod:`nbsim.initcond`      deterministic Plummer-model generators
- :mod:`nbsim.morton`        Morton (Z-order) keys over a cubic domain
- :mod:`nbsim.octree`        explicit linked octree: build, merge, serialize
- :mod:`nbsim.flattree`      array-backed octree mirror plus compiled kernels
- :mod:`nbsim.hashed`        hashed (linear) octree and branch-node protocol
- :mod:`nbsim.transport`     message-passing ranks, collectives, accounting
- :mod:`nbsim.decomposition` costzones and distributed sorting
- :mod:`nbsim.simulation`    the eight drivers V0..V7
- :mod:`nbsim.harness`       CLI, snapshots, reports, scaling studies
"""

__version__ = "0.1.0"
