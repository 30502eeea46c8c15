from __future__ import annotations

from dataclasses import dataclass, field, replace

from ..core import QPU, Capability, Query, RecordKind, StreamHandle, StreamRecord, row_matches
from .base import CapabilityError, ConfigError


def parse_predicate(terms) -> tuple:
    out = []
    for term in terms or ():
        if isinstance(term, dict):
            term = (term.get("attribute"), term.get("op"), term.get("value"))
        if len(term) != 3:
            raise ConfigError(f"bad predicate term {term!r}")
        out.append(tuple(term))
    return tuple(out)


@dataclass
class _Pass:
    response: StreamHandle
    passed: set = field(default_factory=set)


class FilterQPU(QPU):
    """Stateless selection and projection over a child's stream.

    Only per-stream bookkeeping is kept: which keys have been let through, so
    an update that stops matching can be turned into a delete.
    """

    kind = "filter"

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.predicate = parse_predicate(self.config.get("predicate"))
        projection = self.config.get("projection")
        self.projection = None if projection is None else tuple(projection)
        self._filter = Query("", predicate=self.predicate)
        self._streams: dict[int, _Pass] = {}
        self._by_response: dict[int, StreamHandle] = {}

    @staticmethod
    def derive_capabilities(config, child_caps, tables) -> list[Capability]:
        predicate = parse_predicate(config.get("predicate"))
        projection = config.get("projection")
        out = []
        for child in child_caps:
            for cap in child_caps[child]:
                if any(term[0] not in cap.indexed_attributes for term in predicate):
                    continue
                indexed = cap.indexed_attributes
                if projection is not None:
                    indexed = indexed & frozenset(projection)
                out.append(replace(cap, indexed_attributes=indexed))
        if not out:
            raise CapabilityError(f"no child exposes {sorted({t[0] for t in predicate})}")
        return out

    def passes(self, row) -> bool:
        return row_matches(self._filter, row)

    def process_query(self, q: Query, response: StreamHandle) -> None:
        downstream = self.query_child(self.route(q), replace(q, projection=None))
        self._streams[downstream.id] = _Pass(response)
        self._by_response[response.id] = downstream

    def _out(self, response: StreamHandle, rec: StreamRecord) -> None:
        if rec.payload is not None and rec.kind in (RecordKind.SNAPSHOT, RecordKind.DELTA_UPSERT):
            rec = replace(rec, payload=rec.payload.project(self.projection))
        self.emit(response, rec)

    def callback(self, source: StreamHandle, rec: StreamRecord) -> None:
        stream = self._streams.get(source.id)
        if stream is None:
            return
        response = stream.response
        if rec.kind == RecordKind.ERROR:
            self.emit_error(response, rec)
            return
        if rec.kind == RecordKind.END_OF_SNAPSHOT:
            self._out(response, rec)
            if not response.query.subscribe:
                self._drop(source)
            return
        key = rec.payload.key
        if rec.kind in (RecordKind.SNAPSHOT, RecordKind.DELTA_UPSERT):
            if self.passes(rec.payload):
                stream.passed.add(key)
                self._out(response, rec)
            elif key in stream.passed:
                stream.passed.discard(key)
                self._out(response, StreamRecord.delete(key, rec.payload.ts, rec.origin_write_ts))
        elif key in stream.passed:
            stream.passed.discard(key)
            self._out(response, rec)

    def _drop(self, source: StreamHandle) -> None:
        stream = self._streams.pop(source.id, None)
        if stream is not None:
            self._by_response.pop(stream.response.id, None)

    def on_close(self, handle: StreamHandle) -> None:
        downstream = self._by_response.pop(handle.id, None)
        if downstream is not None:
            self._streams.pop(downstream.id, None)
            self.runtime.close(downstream)
