from __future__ import annotations

from ..core import TAGS, Capability, ErrorCode, Mode, Query, QpuError, RecordKind, Row, StreamRecord
from .base import CapabilityError, StatefulQPU, find_capability
from .state import TopKState

DEFAULT_K = 10


class TopKQPU(StatefulQPU):
    """Materialized top-K per tag, ranked by an order attribute (descending).

    A query for a tag set merges the per-tag views. Subscribers get a delta
    only when their merged answer actually changes.
    """

    kind = "topk"

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.k = int(self.config.get("k", DEFAULT_K))
        self.order_attribute = self.config.get("order_attribute", "price")
        self.state = TopKState(self.k, self.order_attribute)
        self._answers: dict[int, dict[str, Row]] = {}

    @staticmethod
    def derive_capabilities(config, child_caps, tables) -> list[Capability]:
        k = int(config.get("k", DEFAULT_K))
        if k < 1:
            raise CapabilityError("k must be >= 1")
        order = config.get("order_attribute", "price")
        _, cap = find_capability(child_caps, child_caps, config.get("table"), needs=(TAGS, order))
        if not cap.supports_subscribe:
            raise CapabilityError(f"child serving {cap.table} cannot stream changes")
        return [Capability(
            table=cap.table,
            indexed_attributes=frozenset({TAGS, order}),
            supports_order_limit=True,
            supports_subscribe=True,
            key=cap.key,
            orderings=frozenset({(order, True)}),
            max_limit=k,
        )]

    def open_build_streams(self) -> None:
        q = Query(self.capabilities[0].table, mode=Mode.SNAPSHOT_AND_SUBSCRIBE)
        self.subscribe_child(self.route(q), q, "source")

    def check_query(self, q: Query) -> None:
        if q.limit is not None and q.limit > self.k:
            raise QpuError(ErrorCode.CAPABILITY_MISMATCH, f"limit {q.limit} > k={self.k}")

    def snapshot_rows(self, q: Query) -> list[Row]:
        return self.state.answer(q.tag_filter, q.limit)

    def on_subscribe(self, q: Query, response) -> None:
        self._answers[response.id] = {row.key: row for row in self.state.answer(q.tag_filter, q.limit)}

    def on_close(self, handle) -> None:
        super().on_close(handle)
        self._answers.pop(handle.id, None)

    def apply(self, role: str, rec: StreamRecord) -> None:
        row = rec.payload
        if rec.kind in (RecordKind.SNAPSHOT, RecordKind.DELTA_UPSERT):
            self.state.upsert(row)
        else:
            self.state.delete(row.key)
        if rec.kind.is_delta:
            self._publish(rec)

    def _publish(self, rec: StreamRecord) -> None:
        for q, response in list(self.subscribers.values()):
            before = self._answers.get(response.id, {})
            after = {r.key: r for r in self.state.answer(q.tag_filter, q.limit)}
            for key in sorted(before.keys() - after.keys()):
                self.emit(response, StreamRecord.delete(key, rec.payload.ts, rec.origin_write_ts))
            for row in after.values():
                old = before.get(row.key)
                if old is None or old.get(self.order_attribute) != row.get(self.order_attribute):
                    self.emit(response, StreamRecord.upsert(row, rec.origin_write_ts))
            self._answers[response.id] = after
