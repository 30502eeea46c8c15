from __future__ import annotations

from dataclasses import dataclass, field, replace

from ..core import QPU, Capability, Mode, Query, RecordKind, StreamHandle, StreamRecord
from .state import CacheState

DEFAULT_TTL_MS = 500.0
DEFAULT_CAPACITY = 128


@dataclass
class _Fill:
    key: str
    response: StreamHandle
    entries: list = field(default_factory=list)
    started_at: float = 0.0


class CacheQPU(QPU):
    """Caches snapshot query results; misses are forwarded to a child.

    Entries older than ``ttl_ms`` are never served; beyond ``capacity`` the
    least recently used entry is evicted. Results ending in ERROR are not kept.
    """

    kind = "cache"

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.cache = CacheState(
            float(self.config.get("ttl_ms", DEFAULT_TTL_MS)),
            int(self.config.get("capacity", DEFAULT_CAPACITY)),
        )
        self.hits = 0
        self.misses = 0
        self._fills: dict[int, _Fill] = {}
        self._by_response: dict[int, StreamHandle] = {}
        # (response id, fill time, serve time) per hit
        self.served: list[tuple[int, float, float]] = []

    @staticmethod
    def derive_capabilities(config, child_caps, tables) -> list[Capability]:
        out = []
        for child in child_caps:
            for cap in child_caps[child]:
                restricted = replace(cap, supports_subscribe=False)
                if restricted not in out:
                    out.append(restricted)
        return out

    @property
    def hit_rate(self) -> float | None:
        total = self.hits + self.misses
        return None if total == 0 else self.hits / total

    def process_query(self, q: Query, response: StreamHandle) -> None:
        key = q.canonical_key()
        hit = self.cache.get(key, self.now)
        if hit is not None:
            entries, filled_at = hit
            self.hits += 1
            self.served.append((response.id, filled_at, self.now))
            for row in entries:
                self.emit(response, StreamRecord.snapshot(row))
            self.emit(response, StreamRecord.end_of_snapshot())
            return
        self.misses += 1
        downstream = self.query_child(self.route(q), replace(q, mode=Mode.SNAPSHOT))
        self._fills[downstream.id] = _Fill(key, response, started_at=self.now)
        self._by_response[response.id] = downstream

    def callback(self, source: StreamHandle, rec: StreamRecord) -> None:
        fill = self._fills.get(source.id)
        if fill is None:
            return
        if rec.kind == RecordKind.SNAPSHOT:
            fill.entries.append(rec.payload)
            self.emit(fill.response, rec)
        elif rec.kind == RecordKind.END_OF_SNAPSHOT:
            self._done(source, fill)
            self.cache.put(fill.key, fill.entries, self.now)
            self.emit(fill.response, rec)
        elif rec.kind == RecordKind.ERROR:
            self._done(source, fill)
            self.emit_error(fill.response, rec)

    def _done(self, source: StreamHandle, fill: _Fill) -> None:
        del self._fills[source.id]
        self._by_response.pop(fill.response.id, None)

    def on_close(self, handle: StreamHandle) -> None:
        downstream = self._by_response.pop(handle.id, None)
        if downstream is not None:
            self._fills.pop(downstream.id, None)
            self.runtime.close(downstream)
