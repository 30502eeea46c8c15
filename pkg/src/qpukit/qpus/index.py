from __future__ import annotations

from ..core import TAGS, Capability, Mode, Query, RecordKind, Row, StreamRecord
from .base import CapabilityError, StatefulQPU, find_capability
from .state import IndexState


class IndexQPU(StatefulQPU):
    """Inverted index over a tag-set column.

    Builds from a snapshot-and-subscribe stream on the child serving the
    indexed table, then answers tag lookups from the index.
    """

    kind = "index"

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.table = self.config["table"]
        self.state = IndexState(self.config.get("attribute", TAGS))

    @staticmethod
    def derive_capabilities(config, child_caps, tables) -> list[Capability]:
        attribute = config.get("attribute", TAGS)
        _, cap = find_capability(child_caps, child_caps, config["table"], needs=(attribute,))
        if not cap.supports_subscribe:
            raise CapabilityError(f"child serving {config['table']} cannot stream changes")
        return [Capability(
            table=config["table"],
            indexed_attributes=frozenset({attribute}),
            supports_subscribe=True,
            key=cap.key,
        )]

    def open_build_streams(self) -> None:
        q = Query(self.table, mode=Mode.SNAPSHOT_AND_SUBSCRIBE)
        self.subscribe_child(self.route(q), q, "source")

    def snapshot_rows(self, q: Query) -> list[Row]:
        return [self.state.rows[k] for k in self.state.lookup(q.tag_filter)]

    def apply(self, role: str, rec: StreamRecord) -> None:
        row = rec.payload
        if rec.kind in (RecordKind.SNAPSHOT, RecordKind.DELTA_UPSERT):
            indexed = Row(row.key, {self.state.attribute: frozenset(row.get(self.state.attribute, ()))}, row.ts)
            old, new = self.state.upsert(indexed)
        else:
            old, new = self.state.delete(row.key, row.ts.value)
        if rec.kind.is_delta and old is not new:
            self.notify(row.key, old, new, rec.origin_write_ts)
