from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

from ..core import (
    QPU,
    Capability,
    ErrorCode,
    Query,
    RecordKind,
    StreamHandle,
    StreamRecord,
    row_matches,
    serialized_size,
)
from ..simnet import CONTROL_MESSAGE_BYTES
from ..storage import Subscription
from .base import ConfigError


@dataclass
class _Feed:
    query: Query
    response: StreamHandle
    matched: set = field(default_factory=set)
    subscription: Optional[Subscription] = None

    @property
    def filtered(self) -> bool:
        return bool(self.query.tag_filter or self.query.predicate)


class DataStoreDriver(QPU):
    """Connects the DAG to the storage tier.

    Answers a query with the matching rows, then (in subscribe mode) keeps
    publishing the changes that affect the result. Rows that stop matching the
    query are turned into deletes. Storage access crosses the network from the
    store's site to the driver's site.
    """

    kind = "dsd"

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.feeds: dict[int, _Feed] = {}

    @staticmethod
    def derive_capabilities(config, child_caps, tables) -> list[Capability]:
        out = []
        for name in config["tables"]:
            if name not in tables:
                raise ConfigError(f"dsd serves unknown table {name!r}")
            table = tables[name]
            out.append(Capability(
                table=name,
                indexed_attributes=frozenset(table.kinds) | {table.key_attribute},
                supports_order_limit=False,
                supports_subscribe=True,
                key=table.key_attribute,
                supports_predicate=True,
            ))
        return out

    @property
    def store(self):
        return self.runtime.store

    def process_query(self, q: Query, response: StreamHandle) -> None:
        feed = _Feed(q, response)
        self.feeds[response.id] = feed
        store = self.store
        self.runtime.scheduler.send(
            self.site, store.site, CONTROL_MESSAGE_BYTES,
            lambda: self._read(feed), kind="storage-read",
        )

    def _read(self, feed: _Feed) -> None:
        """Runs at the storage site: scan, then attach a change feed at the same instant."""
        if feed.response.closed:
            return
        store = self.store
        if feed.query.table not in store.tables:
            self._ship(feed, StreamRecord.error(ErrorCode.UNKNOWN_TABLE, feed.query.table))
            return
        for row in store.scan(feed.query.table):
            if row_matches(feed.query, row):
                self._ship(feed, StreamRecord.snapshot(row))
        self._ship(feed, StreamRecord.end_of_snapshot())
        if feed.query.subscribe:
            feed.subscription = store.subscribe(
                feed.query.table, store.max_ts, lambda rec: self._ship(feed, rec)
            )

    def _ship(self, feed: _Feed, rec: StreamRecord) -> None:
        self.runtime.scheduler.send(
            self.store.site, self.site, serialized_size(rec),
            lambda: self._forward(feed, rec), kind=f"storage:{rec.kind.value}",
        )

    def _forward(self, feed: _Feed, rec: StreamRecord) -> None:
        response = feed.response
        if response.closed:
            return
        if rec.kind in (RecordKind.SNAPSHOT, RecordKind.END_OF_SNAPSHOT, RecordKind.ERROR):
            if rec.kind == RecordKind.SNAPSHOT:
                feed.matched.add(rec.payload.key)
            self.emit(response, rec)
            if rec.kind != RecordKind.SNAPSHOT and not feed.query.subscribe:
                self.feeds.pop(response.id, None)
            return
        key = rec.payload.key
        if rec.kind == RecordKind.DELTA_UPSERT:
            if row_matches(feed.query, rec.payload):
                feed.matched.add(key)
                self.emit(response, rec)
            elif key in feed.matched:
                feed.matched.discard(key)
                self.emit(response, StreamRecord.delete(key, rec.payload.ts, rec.origin_write_ts))
        else:
            if key in feed.matched or not feed.filtered:
                feed.matched.discard(key)
                self.emit(response, rec)

    def callback(self, source: StreamHandle, rec: StreamRecord) -> None:
        # a driver has no QPU children
        pass

    def on_close(self, handle: StreamHandle) -> None:
        feed = self.feeds.pop(handle.id, None)
        if feed is not None and feed.subscription is not None:
            feed.subscription.cancel()
