"""Simulated tiled many-core with an invade / infect / retreat resource lifecycle.

Applications acquire processing elements (PEs) with :meth:`ResourceRuntime.invade`,
charge work against them with :meth:`ResourceRuntime.infect` and hand them back
with :meth:`ResourceRuntime.retreat`.  Other applications on the chip are not
simulated individually; their demand is an exogenous step-function
:class:`LoadTrace` of busy PE counts.

Simulated time is kept in integer microseconds.  Load traces are specified in
integer milliseconds.
"""

from __future__ import annotations

import bisect
import itertools
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping, Optional

US_PER_MS = 1000


class RuntimeStateError(RuntimeError):
    """Operation not allowed in the claim's or runtime's current state."""


class ClaimState(Enum):
    INVADED = "invaded"
    INFECTED = "infected"
    RETREATED = "retreated"


@dataclass(frozen=True)
class Topology:
    tiles: int = 8
    pes_per_tile: int = 4
    max_grantable_pes: Optional[int] = None

    def __post_init__(self):
        if self.tiles < 0 or self.pes_per_tile < 0:
            raise ValueError("tile and PE counts must be non-negative")
        if self.max_grantable_pes is not None and self.max_grantable_pes < 0:
            raise ValueError("max_grantable_pes must be non-negative")

    @property
    def total_pes(self) -> int:
        return self.tiles * self.pes_per_tile

    @property
    def grant_cap(self) -> int:
        if self.max_grantable_pes is None:
            return self.total_pes
        return min(self.max_grantable_pes, self.total_pes)

    def tile_of(self, pe: int) -> int:
        return pe // self.pes_per_tile


@dataclass(frozen=True)
class ParallelEfficiency:
    """Fraction of ideal linear speedup reached on ``n`` PEs.

    ``eta(1) == 1`` and ``eta(n) = 1 / (1 + gamma * (n - 1))`` unless a
    calibrated per-count table overrides it.
    """

    gamma: float = 0.02
    table: Optional[Mapping[int, float]] = None

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("gamma must be non-negative")
        if self.table:
            for n, v in self.table.items():
                if n < 1 or not 0 < v <= 1:
                    raise ValueError(f"bad efficiency table entry {n}: {v}")

    def __call__(self, n: int) -> float:
        if n < 1:
            raise ValueError("efficiency is undefined for fewer than one PE")
        if self.table and n in self.table:
            return float(self.table[n])
        if n == 1:
            return 1.0
        return 1.0 / (1.0 + self.gamma * (n - 1))

    def speedup(self, n: int) -> float:
        return n * self(n) if n >= 1 else 0.0

    def pes_for(self, serial_ms: float, deadline_ms: float, limit: int) -> int:
        """Smallest PE count in ``1..limit`` finishing ``serial_ms`` of work by the deadline.

        Returns ``limit`` if no count up to it is fast enough and 0 for no work.
        """
        if deadline_ms <= 0:
            raise ValueError("deadline must be positive")
        if serial_ms <= 0:
            return 0
        for n in range(1, limit + 1):
            if self.speedup(n) * deadline_ms >= serial_ms:
                return n
        return limit


@dataclass(frozen=True)
class ResourceRequest:
    pe_count: int
    requester: str = "app"

    def __post_init__(self):
        if self.pe_count < 1:
            raise ValueError("a request must ask for at least one PE")


@dataclass(frozen=True)
class Workload:
    """Serial work: ``work_units`` units at ``cost_per_unit_ms`` each on one PE."""

    work_units: float
    cost_per_unit_ms: float = 1.0

    @property
    def serial_ms(self) -> float:
        return self.work_units * self.cost_per_unit_ms


@dataclass(eq=False)
class ResourceClaim:
    claim_id: int
    owner: str
    requested: int
    granted_pes: tuple[int, ...]
    granted_at_us: int
    state: ClaimState = ClaimState.INVADED

    @property
    def size(self) -> int:
        return len(self.granted_pes)

    @property
    def live(self) -> bool:
        return self.state is not ClaimState.RETREATED


@dataclass(frozen=True)
class LoadTrace:
    """Busy-PE step function; repeats with period ``duration_ms``."""

    entries: tuple[tuple[int, int], ...]
    duration_ms: Optional[int] = None
    _times_us: tuple[int, ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        entries = tuple((int(t), int(b)) for t, b in self.entries)
        if not entries:
            raise ValueError("load trace needs at least one entry")
        times = tuple(t for t, _ in entries)
        if times[0] < 0:
            raise ValueError("trace times must be non-negative")
        for a, b in zip(times, times[1:]):
            if b <= a:
                raise ValueError(f"trace times must be strictly increasing ({a} then {b})")
        if any(b < 0 for _, b in entries):
            raise ValueError("busy PE counts must be non-negative")
        duration = self.duration_ms
        if duration is None:
            step = times[-1] - times[-2] if len(times) > 1 else 1
            duration = times[-1] + step
        if duration <= times[-1]:
            raise ValueError("trace duration must exceed the last entry time")
        object.__setattr__(self, "entries", entries)
        object.__setattr__(self, "duration_ms", int(duration))
        object.__setattr__(self, "_times_us", tuple(t * US_PER_MS for t in times))

    @classmethod
    def constant(cls, busy: int, duration_ms: int = 1000) -> "LoadTrace":
        return cls(((0, busy),), duration_ms)

    @classmethod
    def square_wave(
        cls, low: int, high: int, half_period_ms: int, duration_ms: int
    ) -> "LoadTrace":
        """Alternating ``low`` / ``high`` phases starting with ``low``."""
        levels = itertools.cycle((low, high))
        entries = [(t, next(levels)) for t in range(0, duration_ms, half_period_ms)]
        return cls(tuple(entries), duration_ms)

    @property
    def max_busy(self) -> int:
        return max(b for _, b in self.entries)

    def busy_at(self, now_us: int) -> int:
        t_us = int(now_us) % (self.duration_ms * US_PER_MS)
        i = bisect.bisect_right(self._times_us, t_us) - 1
        # before the first entry the previous cycle's last level still holds
        return self.entries[i][1]

    def check_against(self, topology: Topology) -> None:
        if self.max_busy > topology.total_pes:
            raise ValueError(
                f"trace has {self.max_busy} busy PEs but topology only has "
                f"{topology.total_pes}"
            )


class ResourceRuntime:
    """Single-timeline PE allocator backed by a background load trace."""

    def __init__(
        self,
        topology: Topology,
        trace: LoadTrace,
        efficiency: Optional[ParallelEfficiency] = None,
    ):
        if topology is None or trace is None:
            raise RuntimeStateError("runtime needs both a topology and a load trace")
        trace.check_against(topology)
        self.topology = topology
        self.trace = trace
        self.efficiency = efficiency or ParallelEfficiency()
        self._held: dict[int, int] = {}  # pe -> claim id
        self._claims: dict[int, ResourceClaim] = {}
        self._ids = itertools.count()

    @property
    def held_pes(self) -> int:
        return len(self._held)

    @property
    def live_claims(self) -> list[ResourceClaim]:
        return list(self._claims.values())

    def effective_busy(self, now_us: int) -> int:
        """Background PEs actually occupied; capped by what claims leave free."""
        return min(self.trace.busy_at(now_us), self.topology.total_pes - self.held_pes)

    def idle_pes(self, now_us: int) -> int:
        return max(0, self.topology.total_pes - self.trace.busy_at(now_us) - self.held_pes)

    def invade(self, request: ResourceRequest, now_us: int) -> ResourceClaim:
        cap_left = max(0, self.topology.grant_cap - self.held_pes)
        n = min(request.pe_count, self.idle_pes(now_us), cap_left)
        pes = self._pick(n)
        claim = ResourceClaim(
            claim_id=next(self._ids),
            owner=request.requester,
            requested=request.pe_count,
            granted_pes=pes,
            granted_at_us=now_us,
        )
        for pe in pes:
            self._held[pe] = claim.claim_id
        self._claims[claim.claim_id] = claim
        return claim

    def infect(self, claim: ResourceClaim, workload: Workload) -> int:
        """Charge ``workload`` to ``claim``; returns the simulated duration in µs."""
        if claim.state is ClaimState.RETREATED:
            raise RuntimeStateError(f"claim {claim.claim_id} already retreated")
        if claim.claim_id not in self._claims:
            raise RuntimeStateError(f"claim {claim.claim_id} is not owned by this runtime")
        if claim.size == 0:
            raise RuntimeStateError("cannot infect a claim holding zero PEs")
        claim.state = ClaimState.INFECTED
        return parallel_duration_us(workload.serial_ms, claim.size, self.efficiency)

    def retreat(self, claim: ResourceClaim) -> int:
        if claim.state is ClaimState.RETREATED:
            raise RuntimeStateError(f"claim {claim.claim_id} already retreated")
        if self._claims.pop(claim.claim_id, None) is None:
            raise RuntimeStateError(f"claim {claim.claim_id} is not owned by this runtime")
        for pe in claim.granted_pes:
            del self._held[pe]
        claim.state = ClaimState.RETREATED
        return claim.size

    def _pick(self, n: int) -> tuple[int, ...]:
        # best fit per tile: prefer a tile whose free PEs just cover the rest,
        # otherwise drain the emptiest tile; ties go to the lower tile index
        ppt = self.topology.pes_per_tile
        free = [
            [pe for pe in range(t * ppt, (t + 1) * ppt) if pe not in self._held]
            for t in range(self.topology.tiles)
        ]
        picked: list[int] = []
        remaining = n
        while remaining > 0:
            fits = [t for t in range(len(free)) if len(free[t]) >= remaining]
            if fits:
                t = min(fits, key=lambda t: (len(free[t]), t))
                take = remaining
            else:
                t = max(range(len(free)), key=lambda t: (len(free[t]), -t))
                take = len(free[t])
            picked.extend(free[t][:take])
            free[t] = free[t][take:]
            remaining -= take
        return tuple(sorted(picked))


def parallel_duration_us(serial_ms: float, n_pes: int, efficiency: ParallelEfficiency) -> int:
    """Simulated wall time of ``serial_ms`` split over ``n_pes``, rounded up to µs."""
    if n_pes < 1:
        raise ValueError("need at least one PE")
    exact = serial_ms * US_PER_MS / (n_pes * efficiency(n_pes))
    # absorb float noise so work sized to fit a deadline never rounds past it
    return max(0, math.ceil(exact - 1e-6))


def load_topology(cfg: Mapping) -> tuple[Topology, ParallelEfficiency]:
    """Build topology and efficiency model from a parsed config mapping."""
    known = {"tiles", "pes_per_tile", "max_grantable_pes", "eta_gamma", "eta_table"}
    unknown = set(cfg) - known
    if unknown:
        raise ValueError(f"unknown topology keys: {sorted(unknown)}")
    topo = Topology(
        tiles=int(cfg.get("tiles", 8)),
        pes_per_tile=int(cfg.get("pes_per_tile", 4)),
        max_grantable_pes=(
            None if cfg.get("max_grantable_pes") is None else int(cfg["max_grantable_pes"])
        ),
    )
    table = cfg.get("eta_table")
    eff = ParallelEfficiency(
        gamma=float(cfg.get("eta_gamma", 0.02)),
        table={int(k): float(v) for k, v in table.items()} if table else None,
    )
    return topo, eff

