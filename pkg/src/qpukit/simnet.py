"""Deterministic discrete-event simulation of sites, latency and byte metering.

Everything runs on one logical thread against a single virtual clock measured
in milliseconds. Events are totally ordered by ``(due, seq)`` where ``seq`` is
assigned in scheduling order, which gives per-stream FIFO delivery for free
whenever two messages share a latency.
"""

from __future__ import annotations

import enum
import heapq
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

DEFAULT_INTRA_SITE_MS = 1.0
DEFAULT_CROSS_SITE_MS = 50.0
DEFAULT_INTRA_SITE_COST = 0.0
DEFAULT_CROSS_SITE_COST = 1.0
CONTROL_MESSAGE_BYTES = 32


class SiteKind(str, enum.Enum):
    DATA_CENTER = "DATA_CENTER"
    EDGE = "EDGE"


@dataclass(frozen=True)
class Site:
    name: str
    kind: SiteKind = SiteKind.DATA_CENTER


class NetworkError(ValueError):
    pass


class NetworkModel:
    """Sites plus symmetric pairwise latency and per-byte cost.

    Pairs not listed explicitly fall back to the intra/cross-site defaults.
    """

    def __init__(
        self,
        sites: Iterable[Site],
        latency_ms: Mapping[tuple[str, str], float] | None = None,
        per_byte_cost: Mapping[tuple[str, str], float] | None = None,
        *,
        intra_site_ms: float = DEFAULT_INTRA_SITE_MS,
        cross_site_ms: float = DEFAULT_CROSS_SITE_MS,
        intra_site_cost: float = DEFAULT_INTRA_SITE_COST,
        cross_site_cost: float = DEFAULT_CROSS_SITE_COST,
    ):
        self.sites: dict[str, Site] = {}
        for site in sites:
            if site.name in self.sites:
                raise NetworkError(f"duplicate site {site.name!r}")
            self.sites[site.name] = site
        self.intra_site_ms = float(intra_site_ms)
        self.cross_site_ms = float(cross_site_ms)
        self.intra_site_cost = float(intra_site_cost)
        self.cross_site_cost = float(cross_site_cost)
        self._latency: dict[frozenset, float] = {}
        self._cost: dict[frozenset, float] = {}
        for (a, b), ms in (latency_ms or {}).items():
            self._latency[self._pair(a, b)] = float(ms)
        for (a, b), cost in (per_byte_cost or {}).items():
            self._cost[self._pair(a, b)] = float(cost)
        self.check()

    def _pair(self, a: str, b: str) -> frozenset:
        for name in (a, b):
            if name not in self.sites:
                raise NetworkError(f"unknown site {name!r}")
        return frozenset((a, b))

    def latency(self, a: str, b: str) -> float:
        pair = self._pair(a, b)
        if pair in self._latency:
            return self._latency[pair]
        return self.intra_site_ms if a == b else self.cross_site_ms

    def cost_per_byte(self, a: str, b: str) -> float:
        pair = self._pair(a, b)
        if pair in self._cost:
            return self._cost[pair]
        return self.intra_site_cost if a == b else self.cross_site_cost

    def check(self) -> None:
        names = list(self.sites)
        for a in names:
            for b in names:
                ms = self.latency(a, b)
                if not (ms > 0 and math.isfinite(ms)):
                    raise NetworkError(f"latency {a}<->{b} must be positive and finite, got {ms}")
                if self.cost_per_byte(a, b) < 0:
                    raise NetworkError(f"negative cost for {a}<->{b}")
            for b in names:
                if a != b and not self.latency(a, a) < self.latency(a, b):
                    raise NetworkError(f"intra-site latency at {a} must be below latency to {b}")

    def sites_of_kind(self, kind: SiteKind) -> list[str]:
        return [s.name for s in self.sites.values() if s.kind == kind]

    @classmethod
    def two_site(cls, dc: str = "dc", edge: str = "edge", **kwargs) -> "NetworkModel":
        return cls([Site(dc, SiteKind.DATA_CENTER), Site(edge, SiteKind.EDGE)], **kwargs)


@dataclass
class Meter:
    """Bytes and message counts per ordered site pair, plus accumulated cost."""

    bytes: dict[tuple[str, str], int] = field(default_factory=dict)
    messages: dict[tuple[str, str], int] = field(default_factory=dict)
    cost: float = 0.0

    def record(self, src: str, dst: str, nbytes: int, cost_per_byte: float) -> None:
        pair = (src, dst)
        self.bytes[pair] = self.bytes.get(pair, 0) + nbytes
        self.messages[pair] = self.messages.get(pair, 0) + 1
        self.cost += nbytes * cost_per_byte

    @property
    def cross_site_bytes(self) -> dict[tuple[str, str], int]:
        return {pair: n for pair, n in sorted(self.bytes.items()) if pair[0] != pair[1]}

    @property
    def cross_site_total(self) -> int:
        return sum(self.cross_site_bytes.values())

    @property
    def total_bytes(self) -> int:
        return sum(self.bytes.values())


@dataclass(order=True)
class Event:
    due: float
    seq: int
    action: Callable[[], None] = field(compare=False)
    kind: str = field(default="timer", compare=False)
    src: str = field(default="-", compare=False)
    dst: str = field(default="-", compare=False)
    nbytes: int = field(default=0, compare=False)


class Scheduler:
    """Virtual-time event loop.

    ``trace`` collects one line per processed event: time, src, dst, kind, bytes.
    """

    def __init__(self, network: NetworkModel | None = None, *, trace: bool = False):
        self.network = network
        self.meter = Meter()
        self.now = 0.0
        self._queue: list[Event] = []
        self._seq = 0
        self.events_processed = 0
        self.limit_exceeded = False
        self.trace_enabled = trace
        self.trace: list[str] = []

    def schedule(
        self,
        delay_ms: float,
        action: Callable[[], None],
        *,
        kind: str = "timer",
        src: str = "-",
        dst: str = "-",
        nbytes: int = 0,
    ) -> Event:
        if delay_ms < 0:
            raise ValueError("delay must be >= 0")
        event = Event(self.now + delay_ms, self._seq, action, kind, src, dst, nbytes)
        self._seq += 1
        heapq.heappush(self._queue, event)
        return event

    def send(
        self,
        src_site: str,
        dst_site: str,
        nbytes: int,
        deliver: Callable[[], None],
        *,
        kind: str = "message",
    ) -> Event:
        if self.network is None:
            raise NetworkError("scheduler has no network model")
        latency = self.network.latency(src_site, dst_site)
        self.meter.record(src_site, dst_site, nbytes, self.network.cost_per_byte(src_site, dst_site))
        return self.schedule(latency, deliver, kind=kind, src=src_site, dst=dst_site, nbytes=nbytes)

    @property
    def pending(self) -> int:
        return len(self._queue)

    def step(self) -> bool:
        if not self._queue:
            return False
        event = heapq.heappop(self._queue)
        self.now = event.due
        self.events_processed += 1
        if self.trace_enabled:
            self.trace.append(
                f"{event.due:.3f} {event.src} {event.dst} {event.kind} {event.nbytes}"
            )
        event.action()
        return True

    def run_until_quiescent(self, limit: float | None = None) -> float:
        """Process events in order until none remain or the next is past ``limit``.

        Sets ``limit_exceeded`` when stopping with events still queued.
        """
        self.limit_exceeded = False
        while self._queue:
            if limit is not None and self._queue[0].due > limit:
                self.limit_exceeded = True
                self.now = max(self.now, limit)
                break
            self.step()
        return self.now

    def advance(self, delay_ms: float) -> float:
        """Move the clock forward by ``delay_ms``, processing anything due on the way."""
        self.schedule(delay_ms, lambda: None, kind="advance")
        return self.run_until_quiescent()
