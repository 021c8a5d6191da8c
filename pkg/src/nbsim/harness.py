"""Command-line front end: run a configuration, audit it, report it.

The harness owns everything around a simulation that is not the simulation
itself: argument parsing, the energy audit (always an O(N^2) direct sum --
the tree's own numbers are never trusted to judge the tree), snapshot files,
the plain-text run report, and the scaling study grid.

Report lines are stable ``key = value`` pairs.  Timing keys all start with
``time_`` or ``wall_``; everything else is deterministic for a given
configuration, so two identical runs must produce identical reports once
those lines are stripped.
"""

from __future__ import annotations

import argparse
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .initcond import two_clusters
from .physics import Bodies, total_energy
from .simulation import (
    ALGORITHM_NAMES,
    PHASES,
    SimConfig,
    SimResult,
    simulate,
)
from .transport import DEFAULT_TIMEOUT

__all__ = [
    "RunReport",
    "run_and_report",
    "emit_snapshot",
    "read_snapshot",
    "scaling_study",
    "scaling_csv",
    "main",
]


# -- snapshots -------------------------------------------------------------


def emit_snapshot(path, t: float, bodies: Bodies) -> None:
    """Write one plain-text state file: header, then one body per line.

    Values are written with ``repr``, i.e. the shortest digit string that
    round-trips the exact float64, so reading the file back loses nothing.
    """
    lines = [f"# t={t!r} n={len(bodies)}"]
    for i in range(len(bodies)):
        vals = (bodies.mass[i], *bodies.position[i], *bodies.velocity[i])
        lines.append(",".join(repr(float(v)) for v in vals))
    Path(path).write_text("\n".join(lines) + "\n")


def read_snapshot(path) -> tuple[float, Bodies]:
    """Inverse of :func:`emit_snapshot`, bit-exact."""
    text = Path(path).read_text().splitlines()
    header = text[0]
    if not header.startswith("# t="):
        raise ValueError(f"not a snapshot file: header {header!r}")
    t_part, n_part = header[2:].split(" ")
    t = float(t_part.removeprefix("t="))
    n = int(n_part.removeprefix("n="))
    rows = [line.split(",") for line in text[1 : n + 1]]
    if len(rows) != n:
        raise ValueError(f"snapshot holds {len(rows)} rows, header says {n}")
    data = np.array([[float(v) for v in row] for row in rows], dtype=np.float64).reshape(n, 7)
    return t, Bodies(data[:, 0], data[:, 1:4], data[:, 4:7])


# -- run report ------------------------------------------------------------


@dataclass
class RunReport:
    """Everything a finished run is judged by, in a fixed schema."""

    config: SimConfig
    transport: str
    energy_initial: float
    energy_final: float
    drift_percent: float
    child_requests: int
    message_totals: dict  # phase -> (messages, bytes); every phase present
    audits: list[tuple[float, float]] = field(default_factory=list)  # (t, energy)
    phase_seconds: list[dict] = field(default_factory=list)  # per rank
    wall_seconds: float = 0.0

    def lines(self) -> list[str]:
        cfg = self.config
        out = [
            f"algorithm = {cfg.algorithm}",
            f"algorithm_name = {ALGORITHM_NAMES[cfg.algorithm]}",
            f"n = {cfg.n}",
            f"ranks = {cfg.ranks}",
            f"theta = {cfg.theta!r}",
            f"dt = {cfg.dt!r}",
            f"steps = {cfg.steps}",
            f"eps = {cfg.eps!r}",
            f"seed = {cfg.seed}",
            f"transport = {self.transport}",
            f"energy_initial = {self.energy_initial!r}",
            f"energy_final = {self.energy_final!r}",
            f"energy_drift_percent = {self.drift_percent!r}",
            f"child_requests = {self.child_requests}",
        ]
        for phase in PHASES:
            msgs, nbytes = self.message_totals.get(phase, (0, 0))
            out.append(f"msgs_{phase} = {msgs}")
            out.append(f"bytes_{phase} = {nbytes}")
        for i, (t, energy) in enumerate(self.audits):
            out.append(f"audit_{i}_t = {t!r}")
            out.append(f"audit_{i}_energy = {energy!r}")
        for rank, per_phase in enumerate(self.phase_seconds):
            for phase in PHASES:
                out.append(f"time_rank{rank}_{phase} = {per_phase.get(phase, 0.0):.6f}")
        for phase in PHASES:
            span = max((p.get(phase, 0.0) for p in self.phase_seconds), default=0.0)
            out.append(f"time_max_{phase} = {span:.6f}")
        out.append(f"wall_seconds = {self.wall_seconds:.6f}")
        return out

    def to_text(self) -> str:
        return "\n".join(self.lines()) + "\n"

    def deterministic_text(self) -> str:
        """The report with every timing line removed; identical runs must agree."""
        kept = [
            line
            for line in self.lines()
            if not line.startswith(("time_", "wall_"))
        ]
        return "\n".join(kept) + "\n"


def run_and_report(
    cfg: SimConfig,
    *,
    transport: str = "inproc",
    snapshot_every: Optional[int] = None,
    audit_every: Optional[int] = None,
    record_trace: bool = False,
    timeout: float = DEFAULT_TIMEOUT,
) -> tuple[RunReport, SimResult]:
    """Run one configuration and audit it against the direct sum.

    The initial and final energies always come from the O(N^2) oracle;
    ``audit_every`` adds intermediate direct-sum audits every that many
    steps.  Snapshot collection and audits share one gather interval.
    """
    collect = snapshot_every
    if audit_every:
        collect = audit_every if collect is None else math.gcd(collect, audit_every)
    result = simulate(
        cfg,
        transport=transport,
        record_trace=record_trace,
        snapshot_every=collect,
        timeout=timeout,
    )

    energy_initial = total_energy(two_clusters(cfg.n, cfg.seed), cfg.eps)
    energy_final = total_energy(result.bodies, cfg.eps)
    drift = 100.0 * (energy_final - energy_initial) / abs(energy_initial)

    audits: list[tuple[float, float]] = []
    if audit_every:
        for t, state in result.snapshots:
            step = round(t / cfg.dt)
            if step % audit_every == 0:
                audits.append((t, total_energy(state, cfg.eps)))
    if snapshot_every:
        result.snapshots = [
            (t, state)
            for t, state in result.snapshots
            if round(t / cfg.dt) % snapshot_every == 0
        ]
    else:
        result.snapshots = []

    report = RunReport(
        config=cfg,
        transport=transport,
        energy_initial=energy_initial,
        energy_final=energy_final,
        drift_percent=drift,
        child_requests=result.requests,
        message_totals=result.phase_totals(),
        audits=audits,
        phase_seconds=result.phase_seconds,
        wall_seconds=result.wall_seconds,
    )
    return report, result


# -- scaling study ---------------------------------------------------------

_SCALING_COLUMNS = (
    "algorithm",
    "n",
    "ranks",
    "wall_time",
    "speedup_vs_ranks1",
    "parallel_cost",
    "error",
)


def scaling_study(
    algorithms: Sequence[int],
    n: int,
    ranks_list: Sequence[int],
    *,
    theta: float = 0.5,
    dt: float = 0.01,
    steps: int = 10,
    eps: float = 0.05,
    seed: int = 1,
    transport: str = "inproc",
    timeout: float = DEFAULT_TIMEOUT,
) -> list[dict]:
    """Wall-time grid over algorithms x rank counts at fixed problem size.

    A failed cell is recorded with its error and zeroed metrics, and the
    sweep continues.  Speedup is measured against the same algorithm's
    ranks=1 cell (1.0 by construction there, 0 if that cell is missing);
    ``parallel_cost`` is ranks * wall_time / n, the per-body resource bill.
    """
    rows: list[dict] = []
    for algorithm in algorithms:
        base_wall: Optional[float] = None
        for ranks in ranks_list:
            row = {
                "algorithm": algorithm,
                "n": n,
                "ranks": ranks,
                "wall_time": 0.0,
                "speedup_vs_ranks1": 0.0,
                "parallel_cost": 0.0,
                "error": "",
            }
            try:
                cfg = SimConfig(
                    n=n, algorithm=algorithm, ranks=ranks,
                    theta=theta, dt=dt, steps=steps, eps=eps, seed=seed,
                )
                result = simulate(cfg, transport=transport, timeout=timeout)
            except Exception as exc:
                row["error"] = str(exc)
                rows.append(row)
                continue
            wall = result.wall_seconds
            if ranks == 1:
                base_wall = wall
            row["wall_time"] = wall
            row["speedup_vs_ranks1"] = base_wall / wall if base_wall else 0.0
            row["parallel_cost"] = ranks * wall / n
            rows.append(row)
    return rows


def scaling_csv(rows: list[dict]) -> str:
    lines = [",".join(_SCALING_COLUMNS)]
    for row in rows:
        lines.append(",".join(str(row[c]) for c in _SCALING_COLUMNS))
    return "\n".join(lines) + "\n"


# -- command line ----------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="nbsim",
        description="Run a distributed Barnes-Hut N-body simulation and report on it.",
    )
    p.add_argument("--algorithm", type=int, required=True, choices=sorted(ALGORITHM_NAMES),
                   help="parallelization stage (0=ring direct ... 7=asynchronous walk)")
    p.add_argument("--n", type=int, required=True, help="number of bodies")
    p.add_argument("--ranks", type=int, default=1, help="number of ranks (default 1)")
    p.add_argument("--theta", type=float, default=0.5, help="opening angle (default 0.5)")
    p.add_argument("--dt", type=float, default=0.01, help="time step (default 0.01)")
    p.add_argument("--steps", type=int, default=500, help="number of steps (default 500)")
    p.add_argument("--eps", type=float, default=0.05, help="softening length (default 0.05)")
    p.add_argument("--seed", type=int, default=1, help="random seed (default 1)")
    p.add_argument("--transport", choices=("inproc", "socket"), default="inproc",
                   help="in-process threads or one process per rank over TCP")
    p.add_argument("--snapshot-every", type=int, default=None, metavar="K",
                   help="write the global state every K steps (requires --out)")
    p.add_argument("--audit-every", type=int, default=None, metavar="K",
                   help="direct-sum energy audit every K steps")
    p.add_argument("--trace", action="store_true",
                   help="record the full message trace (requires --out)")
    p.add_argument("--out", type=Path, default=None, metavar="DIR",
                   help="directory for the report, snapshot, and trace files")
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    if args.snapshot_every is not None and args.snapshot_every < 1:
        parser.error("--snapshot-every must be positive")
    if args.audit_every is not None and args.audit_every < 1:
        parser.error("--audit-every must be positive")
    if args.snapshot_every is not None and args.out is None:
        parser.error("--snapshot-every requires --out")
    if args.trace and args.out is None:
        parser.error("--trace requires --out")
    try:
        cfg = SimConfig(
            n=args.n,
            algorithm=args.algorithm,
            ranks=args.ranks,
            theta=args.theta,
            dt=args.dt,
            steps=args.steps,
            eps=args.eps,
            seed=args.seed,
        )
    except ValueError as exc:
        parser.error(str(exc))

    try:
        report, result = run_and_report(
            cfg,
            transport=args.transport,
            snapshot_every=args.snapshot_every,
            audit_every=args.audit_every,
            record_trace=args.trace,
        )
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1

    text = report.to_text()
    sys.stdout.write(text)
    if args.out is not None:
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / "report.txt").write_text(text)
        for t, state in result.snapshots:
            step = round(t / cfg.dt)
            emit_snapshot(args.out / f"snapshot_{step:06d}.csv", t, state)
        if args.trace:
            (args.out / "trace.txt").write_text("\n".join(result.trace_lines) + "\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
