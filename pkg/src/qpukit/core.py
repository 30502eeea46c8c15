"""Query Processing Unit contract, stream protocol and capability routing.

A QPU is an isolated event handler living on a site. Clients and parent QPUs
call its query API through :meth:`Runtime.open_query`, which establishes a
:class:`StreamHandle`. The producer pushes :class:`StreamRecord` objects onto
the handle following the grammar ``SNAPSHOT* END_OF_SNAPSHOT DELTA*`` (an
``ERROR`` record may terminate a stream at any point). Every record travels
through the simulated network, so delivery is delayed and metered.
"""

from __future__ import annotations

import enum
import itertools
import operator
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Iterable, Mapping, Optional, Union

from .simnet import CONTROL_MESSAGE_BYTES, Scheduler

TAGS = "tags"

AttributeValue = Union[str, int, frozenset]


class ErrorCode(str, enum.Enum):
    CAPABILITY_MISMATCH = "CAPABILITY_MISMATCH"
    TARGET_DOWN = "TARGET_DOWN"
    PROTOCOL_VIOLATION = "PROTOCOL_VIOLATION"
    STREAM_CLOSED = "STREAM_CLOSED"
    CHILD_NOT_DECLARED = "CHILD_NOT_DECLARED"
    NOT_A_ROOT = "NOT_A_ROOT"
    UNKNOWN_TABLE = "UNKNOWN_TABLE"
    SCHEMA_MISMATCH = "SCHEMA_MISMATCH"
    DUPLICATE_TABLE = "DUPLICATE_TABLE"
    CONFIG_ERROR = "CONFIG_ERROR"
    INVALID_QUERY = "INVALID_QUERY"


class QpuError(Exception):
    def __init__(self, code: ErrorCode, message: str = ""):
        super().__init__(f"{code.value}: {message}" if message else code.value)
        self.code = code
        self.message = message


@dataclass(frozen=True, order=True)
class LogicalTimestamp:
    value: int
    origin_site: str = field(default="", compare=False)
    wall: float = field(default=0.0, compare=False)


ZERO_TS = LogicalTimestamp(0)


@dataclass(frozen=True)
class Row:
    """A keyed tuple. ``ts`` is the newest base write this row reflects."""

    key: str
    attributes: Mapping[str, AttributeValue] = field(default_factory=dict)
    ts: LogicalTimestamp = ZERO_TS

    def __post_init__(self):
        if not self.key:
            raise ValueError("row key must be non-empty")

    def get(self, name: str, default: Any = None) -> Any:
        return self.attributes.get(name, default)

    def merged(self, other: "Row") -> "Row":
        return Row(self.key, {**self.attributes, **other.attributes}, max(self.ts, other.ts))

    def project(self, names: Iterable[str] | None) -> "Row":
        if names is None:
            return self
        keep = set(names)
        return Row(self.key, {k: v for k, v in self.attributes.items() if k in keep}, self.ts)


class RecordKind(str, enum.Enum):
    SNAPSHOT = "SNAPSHOT"
    END_OF_SNAPSHOT = "END_OF_SNAPSHOT"
    DELTA_UPSERT = "DELTA_UPSERT"
    DELTA_DELETE = "DELTA_DELETE"
    ERROR = "ERROR"

    @property
    def is_delta(self) -> bool:
        return self in (RecordKind.DELTA_UPSERT, RecordKind.DELTA_DELETE)


@dataclass(frozen=True)
class StreamRecord:
    kind: RecordKind
    payload: Optional[Row] = None
    origin_write_ts: Optional[LogicalTimestamp] = None

    @classmethod
    def snapshot(cls, row: Row) -> "StreamRecord":
        return cls(RecordKind.SNAPSHOT, row)

    @classmethod
    def end_of_snapshot(cls) -> "StreamRecord":
        return cls(RecordKind.END_OF_SNAPSHOT)

    @classmethod
    def upsert(cls, row: Row, origin: LogicalTimestamp | None) -> "StreamRecord":
        return cls(RecordKind.DELTA_UPSERT, row, origin)

    @classmethod
    def delete(cls, key: str, ts: LogicalTimestamp, origin: LogicalTimestamp | None) -> "StreamRecord":
        return cls(RecordKind.DELTA_DELETE, Row(key, {}, ts), origin)

    @classmethod
    def error(cls, code: ErrorCode | str, message: str = "") -> "StreamRecord":
        code = code.value if isinstance(code, ErrorCode) else code
        return cls(RecordKind.ERROR, Row("error", {"code": code, "message": message}))


def serialized_size(rec: StreamRecord) -> int:
    """Bytes charged for one record: 24 fixed, 8 per integer, UTF-8 length of strings and tags."""
    size = 24
    row = rec.payload
    if row is None:
        return size
    size += len(row.key.encode())
    for value in row.attributes.values():
        if isinstance(value, (frozenset, set)):
            size += sum(len(tag.encode()) for tag in value)
        elif isinstance(value, str):
            size += len(value.encode())
        else:
            size += 8
    return size


# -- queries -----------------------------------------------------------------

_COMPARATORS: dict[str, Callable[[Any, Any], bool]] = {
    "=": operator.eq,
    "<": operator.lt,
    ">": operator.gt,
    "<=": operator.le,
    ">=": operator.ge,
}


class Mode(str, enum.Enum):
    SNAPSHOT = "SNAPSHOT"
    SNAPSHOT_AND_SUBSCRIBE = "SNAPSHOT_AND_SUBSCRIBE"


@dataclass(frozen=True)
class Query:
    table: str
    tag_filter: frozenset = frozenset()
    predicate: tuple = ()
    projection: Optional[tuple] = None
    order_by: Optional[tuple] = None
    limit: Optional[int] = None
    mode: Mode = Mode.SNAPSHOT

    def __post_init__(self):
        object.__setattr__(self, "tag_filter", frozenset(self.tag_filter))
        object.__setattr__(self, "predicate", tuple(tuple(term) for term in self.predicate))
        if self.projection is not None:
            object.__setattr__(self, "projection", tuple(self.projection))
        if self.order_by is not None:
            object.__setattr__(self, "order_by", tuple(self.order_by))

    def problems(self) -> list[str]:
        out = []
        if self.limit is not None:
            if self.order_by is None:
                out.append("limit requires order_by")
            if not isinstance(self.limit, int) or self.limit < 1:
                out.append("limit must be a positive integer")
        for term in self.predicate:
            if len(term) != 3 or term[1] not in _COMPARATORS:
                out.append(f"bad predicate term {term!r}")
        if self.order_by is not None and len(self.order_by) != 2:
            out.append("order_by must be (attribute, descending)")
        return out

    def validate(self) -> "Query":
        problems = self.problems()
        if problems:
            raise QpuError(ErrorCode.INVALID_QUERY, "; ".join(problems))
        return self

    @property
    def subscribe(self) -> bool:
        return self.mode == Mode.SNAPSHOT_AND_SUBSCRIBE

    def referenced_attributes(self) -> set[str]:
        attrs = {term[0] for term in self.predicate}
        if self.tag_filter:
            attrs.add(TAGS)
        if self.order_by is not None:
            attrs.add(self.order_by[0])
        return attrs

    def canonical_key(self) -> str:
        parts = [
            self.table,
            "tags=" + ",".join(sorted(self.tag_filter)),
            "pred=" + ",".join(sorted(f"{a}{op}{v!r}" for a, op, v in self.predicate)),
            "proj=" + ("*" if self.projection is None else ",".join(sorted(self.projection))),
            "order=" + ("" if self.order_by is None else f"{self.order_by[0]}:{'desc' if self.order_by[1] else 'asc'}"),
            f"limit={self.limit or ''}",
            self.mode.value,
        ]
        return "|".join(parts)


def row_matches(q: Query, row: Row) -> bool:
    """Tag intersection (empty filter matches all) and every predicate term."""
    if q.tag_filter and not (q.tag_filter & frozenset(row.get(TAGS, ()))):
        return False
    for attr, op, value in q.predicate:
        have = row.get(attr)
        if have is None:
            return False
        try:
            if not _COMPARATORS[op](have, value):
                return False
        except TypeError:
            return False
    return True


# -- capabilities ------------------------------------------------------------


@dataclass(frozen=True)
class Capability:
    """What a QPU can answer for one source table.

    ``orderings`` lists the (attribute, descending) orders it can rank by and
    ``max_limit`` bounds the limit it can serve; both are empty/None when the
    unit cannot order at all.
    """

    table: str
    indexed_attributes: frozenset = frozenset()
    supports_order_limit: bool = False
    supports_subscribe: bool = True
    key: str = "key"
    supports_predicate: bool = False
    orderings: frozenset = frozenset()
    max_limit: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "indexed_attributes", frozenset(self.indexed_attributes))
        object.__setattr__(self, "orderings", frozenset(tuple(o) for o in self.orderings))

    def to_dict(self) -> dict:
        return {
            "table": self.table,
            "key": self.key,
            "indexed_attributes": sorted(self.indexed_attributes),
            "supports_order_limit": self.supports_order_limit,
            "supports_subscribe": self.supports_subscribe,
            "supports_predicate": self.supports_predicate,
            "orderings": sorted([a, bool(d)] for a, d in self.orderings),
            "max_limit": self.max_limit,
        }


def match_capability(q: Query, c: Capability) -> bool:
    if q.table != c.table:
        return False
    if q.tag_filter and TAGS not in c.indexed_attributes:
        return False
    if q.predicate:
        if not c.supports_predicate:
            return False
        if any(term[0] not in c.indexed_attributes for term in q.predicate):
            return False
    if q.order_by is not None:
        if not c.supports_order_limit or q.order_by[0] not in c.indexed_attributes:
            return False
        if c.orderings and (q.order_by[0], bool(q.order_by[1])) not in c.orderings:
            return False
    if q.limit is not None:
        if not c.supports_order_limit:
            return False
        if c.max_limit is not None and q.limit > c.max_limit:
            return False
    if q.subscribe and not c.supports_subscribe:
        return False
    return True


@dataclass(frozen=True)
class QpuRef:
    id: str
    site: str
    capabilities: tuple = ()

    @property
    def capability(self) -> Capability | None:
        return self.capabilities[0] if self.capabilities else None

    def accepts(self, q: Query) -> bool:
        return any(match_capability(q, c) for c in self.capabilities)


# -- streams -----------------------------------------------------------------


class StreamState(str, enum.Enum):
    OPEN = "OPEN"
    SNAPSHOT_DONE = "SNAPSHOT_DONE"
    CLOSED = "CLOSED"


def advance_protocol(state: StreamState, kind: RecordKind) -> StreamState:
    """Next state after ``kind`` on a stream in ``state``; raises on grammar violations."""
    if state == StreamState.CLOSED:
        raise QpuError(ErrorCode.STREAM_CLOSED, f"{kind.value} on closed stream")
    if kind == RecordKind.ERROR:
        return StreamState.CLOSED
    if state == StreamState.OPEN:
        if kind == RecordKind.SNAPSHOT:
            return state
        if kind == RecordKind.END_OF_SNAPSHOT:
            return StreamState.SNAPSHOT_DONE
        raise QpuError(ErrorCode.PROTOCOL_VIOLATION, f"{kind.value} before END_OF_SNAPSHOT")
    if kind.is_delta:
        return state
    raise QpuError(ErrorCode.PROTOCOL_VIOLATION, f"{kind.value} after END_OF_SNAPSHOT")


@dataclass(eq=False)
class StreamHandle:
    id: int
    upstream: str  # producer (the queried QPU)
    downstream: str  # consumer (client or parent QPU)
    query: Query
    state: StreamState = StreamState.OPEN
    consumer_closed: bool = False
    started: bool = False

    @property
    def closed(self) -> bool:
        return self.state == StreamState.CLOSED

    def __repr__(self) -> str:
        return f"<stream {self.id} {self.downstream}->{self.upstream} {self.state.value}>"


class ProtocolMonitor:
    """Checks delivered record sequences per stream against the stream grammar.

    Emission already rejects violations; this watches the consumer side so a
    bug anywhere between emit and delivery still shows up.
    """

    # every monitor created in the process reports here; the test suite asserts it stays empty
    global_violations: list[str] = []
    global_records = 0

    def __init__(self):
        self._states: dict[int, StreamState] = {}
        self.violations: list[str] = []
        self.records_seen = 0

    def observe(self, handle: StreamHandle, rec: StreamRecord) -> None:
        self.records_seen += 1
        ProtocolMonitor.global_records += 1
        state = self._states.get(handle.id, StreamState.OPEN)
        try:
            self._states[handle.id] = advance_protocol(state, rec.kind)
        except QpuError as exc:
            msg = f"stream {handle.id}: {exc}"
            self.violations.append(msg)
            ProtocolMonitor.global_violations.append(msg)


class Endpoint:
    """Anything that can consume a stream: a QPU or a client."""

    id: str
    site: str

    def callback(self, source: StreamHandle, rec: StreamRecord) -> None:
        raise NotImplementedError


class Runtime:
    """Owns the scheduler, registered QPUs and every open stream."""

    def __init__(self, scheduler: Scheduler, *, roots: Iterable[str] = (), store=None):
        self.scheduler = scheduler
        self.store = store
        self.qpus: dict[str, QPU] = {}
        self.roots = set(roots)
        self.monitor = ProtocolMonitor()
        self.handles: dict[int, StreamHandle] = {}
        self._consumers: dict[int, Endpoint] = {}
        self._ids = itertools.count(1)
        self._apply_hooks: list[Callable[[str, StreamRecord, float], None]] = []

    @property
    def now(self) -> float:
        return self.scheduler.now

    def register(self, qpu: "QPU") -> None:
        if qpu.id in self.qpus:
            raise QpuError(ErrorCode.CONFIG_ERROR, f"duplicate qpu id {qpu.id!r}")
        self.qpus[qpu.id] = qpu
        qpu.runtime = self

    def ref(self, qpu_id: str) -> QpuRef:
        qpu = self.qpus[qpu_id]
        return QpuRef(qpu.id, qpu.site, tuple(qpu.capabilities))

    def add_apply_hook(self, hook: Callable[[str, StreamRecord, float], None]) -> None:
        """``hook(qpu_id, record, now)`` runs after a QPU has handled a delta record."""
        self._apply_hooks.append(hook)

    # -- query API --

    def open_query(self, target_id: str, q: Query, caller: Endpoint) -> StreamHandle:
        problems = q.problems()
        if problems:
            raise QpuError(ErrorCode.CAPABILITY_MISMATCH, "; ".join(problems))
        target = self.qpus.get(target_id)
        if target is None:
            raise QpuError(ErrorCode.TARGET_DOWN, f"{target_id!r} is not deployed")
        if isinstance(caller, QPU):
            if target_id not in caller.children:
                raise QpuError(ErrorCode.CHILD_NOT_DECLARED, f"{caller.id} -> {target_id}")
        elif self.roots and target_id not in self.roots:
            raise QpuError(ErrorCode.NOT_A_ROOT, f"{target_id!r} is not a root")
        if not any(match_capability(q, c) for c in target.capabilities):
            raise QpuError(ErrorCode.CAPABILITY_MISMATCH, f"{target_id} cannot answer {q.canonical_key()}")
        handle = StreamHandle(next(self._ids), target_id, caller.id, q)
        self.handles[handle.id] = handle
        self._consumers[handle.id] = caller
        self.scheduler.send(
            caller.site, target.site, CONTROL_MESSAGE_BYTES,
            lambda: self._start(handle, target), kind="open",
        )
        return handle

    def consumer_of(self, handle: StreamHandle) -> Endpoint:
        return self._consumers[handle.id]

    def _start(self, handle: StreamHandle, target: "QPU") -> None:
        if handle.closed:
            return
        handle.started = True
        try:
            target.process_query(handle.query, handle)
        except QpuError as exc:
            if not handle.closed:
                self.emit(handle, StreamRecord.error(exc.code, exc.message))

    def emit(self, handle: StreamHandle, rec: StreamRecord) -> None:
        handle.state = advance_protocol(handle.state, rec.kind)
        consumer = self._consumers[handle.id]
        producer = self.qpus[handle.upstream]
        self.scheduler.send(
            producer.site, consumer.site, serialized_size(rec),
            lambda: self._deliver(handle, consumer, rec), kind=f"record:{rec.kind.value}",
        )
        if rec.kind == RecordKind.END_OF_SNAPSHOT and not handle.query.subscribe:
            handle.state = StreamState.CLOSED

    def _deliver(self, handle: StreamHandle, consumer: Endpoint, rec: StreamRecord) -> None:
        if handle.consumer_closed:
            return
        self.monitor.observe(handle, rec)
        consumer.callback(handle, rec)
        if rec.kind.is_delta and isinstance(consumer, QPU):
            for hook in self._apply_hooks:
                hook(consumer.id, rec, self.now)

    def finish(self, handle: StreamHandle) -> None:
        """Producer-side close; records already in flight are still delivered."""
        handle.state = StreamState.CLOSED

    def close(self, handle: StreamHandle) -> None:
        """Consumer-side close. Idempotent; cancels the producer's work for the stream."""
        if handle.consumer_closed:
            return
        handle.consumer_closed = True
        was_closed = handle.closed
        handle.state = StreamState.CLOSED
        consumer = self._consumers[handle.id]
        producer = self.qpus.get(handle.upstream)
        if producer is None:
            return
        self.scheduler.meter.record(
            consumer.site, producer.site, CONTROL_MESSAGE_BYTES,
            self.scheduler.network.cost_per_byte(consumer.site, producer.site),
        )
        if handle.started and not was_closed:
            producer.on_close(handle)

    def open_streams(self) -> list[StreamHandle]:
        return [h for h in self.handles.values() if not h.closed]


class QPU(Endpoint):
    """Base class for every QPU implementation.

    Subclasses implement :meth:`process_query` and :meth:`callback` and may
    override :meth:`start` to open build-time subscriptions. The runtime hands
    them one event at a time; they touch only their own state.
    """

    kind = "qpu"
    stateful = False

    def __init__(self, qpu_id: str, site: str, config: Mapping | None = None,
                 children: Iterable[str] = (), capabilities: Iterable[Capability] = ()):
        self.id = qpu_id
        self.site = site
        self.config = dict(config or {})
        self.children = list(children)
        self.capabilities = list(capabilities)
        self.runtime: Runtime | None = None

    @property
    def now(self) -> float:
        return self.runtime.now

    @property
    def ready(self) -> bool:
        return True

    def start(self) -> None:
        """Called once at deploy time."""

    def process_query(self, q: Query, response: StreamHandle) -> None:
        raise NotImplementedError

    def callback(self, source: StreamHandle, rec: StreamRecord) -> None:
        raise NotImplementedError

    def on_close(self, handle: StreamHandle) -> None:
        """The consumer of ``handle`` went away."""

    # -- helpers for subclasses --

    def query_child(self, child_id: str, q: Query) -> StreamHandle:
        return self.runtime.open_query(child_id, q, self)

    def route(self, q: Query) -> str:
        """First declared child whose capability answers ``q``."""
        for child in self.children:
            qpu = self.runtime.qpus.get(child)
            if qpu is not None and any(match_capability(q, c) for c in qpu.capabilities):
                return child
        raise QpuError(ErrorCode.CAPABILITY_MISMATCH, f"{self.id}: no child answers {q.canonical_key()}")

    def emit(self, handle: StreamHandle, rec: StreamRecord) -> None:
        if rec.payload is not None and rec.kind in (RecordKind.SNAPSHOT, RecordKind.DELTA_UPSERT):
            rec = replace(rec, payload=rec.payload.project(handle.query.projection))
        self.runtime.emit(handle, rec)

    def emit_error(self, handle: StreamHandle, rec: StreamRecord) -> None:
        if not handle.closed:
            self.runtime.emit(handle, rec)


class Client(Endpoint):
    """A query issuer on some site. Collects each response until it completes."""

    def __init__(self, runtime: Runtime, client_id: str, site: str):
        self.runtime = runtime
        self.id = client_id
        self.site = site
        self._pending: dict[int, "Response"] = {}

    def query(self, target_id: str, q: Query,
              on_done: Callable[["Response"], None] | None = None) -> "Response":
        response = Response(q, issued_at=self.runtime.now)
        handle = self.runtime.open_query(target_id, q, self)
        response.handle = handle
        response.on_done = on_done
        self._pending[handle.id] = response
        return response

    def callback(self, source: StreamHandle, rec: StreamRecord) -> None:
        response = self._pending.get(source.id)
        if response is None:
            return
        response.records.append(rec)
        if rec.kind == RecordKind.SNAPSHOT:
            response.rows.append(rec.payload)
        elif rec.kind.is_delta:
            response.deltas.append(rec)
        elif rec.kind == RecordKind.ERROR:
            response.error = rec.payload.get("code")
            response.completed_at = self.runtime.now
            self._finish(source, response)
            return
        if rec.kind == RecordKind.END_OF_SNAPSHOT:
            response.completed_at = self.runtime.now
            if not source.query.subscribe:
                self._finish(source, response)
            elif response.on_done:
                response.on_done(response)

    def _finish(self, handle: StreamHandle, response: "Response") -> None:
        self._pending.pop(handle.id, None)
        if response.on_done:
            response.on_done(response)

    def close(self, response: "Response") -> None:
        self._pending.pop(response.handle.id, None)
        self.runtime.close(response.handle)


@dataclass(eq=False)
class Response:
    query: Query
    issued_at: float
    handle: Optional[StreamHandle] = None
    rows: list = field(default_factory=list)
    deltas: list = field(default_factory=list)
    records: list = field(default_factory=list)
    completed_at: Optional[float] = None
    error: Optional[str] = None
    on_done: Optional[Callable] = None

    @property
    def done(self) -> bool:
        return self.completed_at is not None

    @property
    def latency(self) -> float | None:
        return None if self.completed_at is None else self.completed_at - self.issued_at
