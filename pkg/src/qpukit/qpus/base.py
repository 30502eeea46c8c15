from __future__ import annotations

from typing import Mapping, Optional

from ..core import (
    QPU,
    Capability,
    ErrorCode,
    LogicalTimestamp,
    Query,
    QpuError,
    RecordKind,
    Row,
    StreamHandle,
    StreamRecord,
    row_matches,
)


class CapabilityError(QpuError):
    """Raised while deriving capabilities when children cannot support a unit."""

    def __init__(self, message: str):
        super().__init__(ErrorCode.CAPABILITY_MISMATCH, message)


class ConfigError(QpuError):
    def __init__(self, message: str):
        super().__init__(ErrorCode.CONFIG_ERROR, message)


def find_capability(child_caps: Mapping[str, list[Capability]], children,
                    table: Optional[str] = None, needs=()) -> tuple[str, Capability]:
    """First (child, capability) for ``table`` exposing every attribute in ``needs``."""
    for child in children:
        for cap in child_caps.get(child, ()):
            if table is not None and cap.table != table:
                continue
            if set(needs) <= cap.indexed_attributes:
                return child, cap
    what = f"table {table!r}" if table else "any table"
    raise CapabilityError(f"no child offers {what} with attributes {sorted(needs)}")


class StatefulQPU(QPU):
    """Shared plumbing for units that build state from build-time subscriptions.

    Queries that arrive before every build stream has reached
    END_OF_SNAPSHOT are queued and answered once the build completes.
    Subscribed consumers are tracked and fed key-level deltas.
    """

    stateful = True

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self._building: set[int] = set()
        self._build_handles: dict[int, str] = {}
        self._started = False
        self._queued: list[tuple[Query, StreamHandle]] = []
        self.subscribers: dict[int, tuple[Query, StreamHandle]] = {}
        self.failure: Optional[StreamRecord] = None

    @property
    def ready(self) -> bool:
        return self._started and not self._building

    def subscribe_child(self, child_id: str, q: Query, role: str) -> StreamHandle:
        handle = self.query_child(child_id, q)
        self._building.add(handle.id)
        self._build_handles[handle.id] = role
        return handle

    def start(self) -> None:
        self._started = True
        self.open_build_streams()

    def open_build_streams(self) -> None:
        raise NotImplementedError

    # -- query side --

    def process_query(self, q: Query, response: StreamHandle) -> None:
        if self.failure is not None:
            self.emit_error(response, self.failure)
        elif not self.ready:
            self._queued.append((q, response))
        else:
            self._answer(q, response)

    def _answer(self, q: Query, response: StreamHandle) -> None:
        self.check_query(q)
        for row in self.snapshot_rows(q):
            self.emit(response, StreamRecord.snapshot(row))
        self.emit(response, StreamRecord.end_of_snapshot())
        if q.subscribe:
            self.subscribers[response.id] = (q, response)
            self.on_subscribe(q, response)

    def check_query(self, q: Query) -> None:
        """Hook for class-specific query checks beyond the capability match."""

    def on_subscribe(self, q: Query, response: StreamHandle) -> None:
        pass

    def snapshot_rows(self, q: Query) -> list[Row]:
        raise NotImplementedError

    def on_close(self, handle: StreamHandle) -> None:
        self.subscribers.pop(handle.id, None)
        self._queued = [(q, h) for q, h in self._queued if h.id != handle.id]

    # -- callback side --

    def callback(self, source: StreamHandle, rec: StreamRecord) -> None:
        role = self._build_handles.get(source.id)
        if role is None:
            return
        if rec.kind == RecordKind.ERROR:
            self._fail(rec)
            return
        if rec.kind == RecordKind.END_OF_SNAPSHOT:
            self._building.discard(source.id)
            if self.ready:
                queued, self._queued = self._queued, []
                for q, response in queued:
                    if not response.closed:
                        self._run_guarded(q, response)
            return
        self.apply(role, rec)

    def _run_guarded(self, q: Query, response: StreamHandle) -> None:
        try:
            self._answer(q, response)
        except QpuError as exc:
            self.emit_error(response, StreamRecord.error(exc.code, exc.message))

    def apply(self, role: str, rec: StreamRecord) -> None:
        raise NotImplementedError

    def _fail(self, rec: StreamRecord) -> None:
        self.failure = rec
        for _, response in list(self.subscribers.values()) + self._queued:
            self.emit_error(response, rec)
        self.subscribers.clear()
        self._queued = []

    def notify(self, key: str, old: Optional[Row], new: Optional[Row],
               origin: Optional[LogicalTimestamp]) -> None:
        """Send each subscriber the delta implied by ``key`` moving from ``old`` to ``new``."""
        for q, response in list(self.subscribers.values()):
            before = old is not None and row_matches(q, old)
            after = new is not None and row_matches(q, new)
            if after:
                if before and old.attributes == new.attributes:
                    continue
                self.emit(response, StreamRecord.upsert(new, origin))
            elif before:
                ts = new.ts if new is not None else (origin or old.ts)
                self.emit(response, StreamRecord.delete(key, ts, origin))
