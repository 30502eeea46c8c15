"""In-memory base-data store with a committed change log and change feeds."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Optional

from .core import (
    ErrorCode,
    LogicalTimestamp,
    QpuError,
    Row,
    StreamRecord,
    ZERO_TS,
)
from .simnet import Scheduler


class ValueKind(str, enum.Enum):
    STRING = "string"
    INT = "int"
    PRICE = "price"
    TAGS = "tags"

    def accepts(self, value) -> bool:
        if self in (ValueKind.INT, ValueKind.PRICE):
            return isinstance(value, int) and not isinstance(value, bool)
        if self == ValueKind.STRING:
            return isinstance(value, str)
        return isinstance(value, frozenset) and all(isinstance(t, str) for t in value)


@dataclass(frozen=True)
class TableDef:
    name: str
    key_attribute: str
    attributes: tuple = ()  # (name, ValueKind) pairs

    def __post_init__(self):
        attrs = tuple((name, ValueKind(kind)) for name, kind in self.attributes)
        object.__setattr__(self, "attributes", attrs)
        names = [name for name, _ in attrs]
        if len(set(names)) != len(names) or self.key_attribute in names:
            raise QpuError(ErrorCode.SCHEMA_MISMATCH, f"attribute names of {self.name} must be unique")

    @property
    def kinds(self) -> dict[str, ValueKind]:
        return dict(self.attributes)

    def coerce(self, attributes: Mapping) -> dict:
        """Normalise raw values (lists of tags become frozensets) and check them."""
        kinds = self.kinds
        out = {}
        for name, value in attributes.items():
            if name not in kinds:
                raise QpuError(ErrorCode.SCHEMA_MISMATCH, f"{self.name} has no attribute {name!r}")
            if kinds[name] == ValueKind.TAGS and isinstance(value, (list, tuple, set)):
                if len(set(value)) != len(value):
                    raise QpuError(ErrorCode.SCHEMA_MISMATCH, f"duplicate tags in {value!r}")
                value = frozenset(value)
            if not kinds[name].accepts(value):
                raise QpuError(ErrorCode.SCHEMA_MISMATCH, f"{self.name}.{name}: bad value {value!r}")
            out[name] = value
        return out


ADS = TableDef("Ads", "ad_id", (("tags", ValueKind.TAGS),))
PRICES = TableDef("Prices", "ad_id", (("price", ValueKind.PRICE),))


class WriteKind(str, enum.Enum):
    UPSERT = "UPSERT"
    DELETE = "DELETE"


@dataclass(frozen=True)
class WriteOp:
    table: str
    kind: WriteKind
    key: str
    attributes: Mapping = field(default_factory=dict)
    ts: Optional[LogicalTimestamp] = None

    @classmethod
    def upsert(cls, table: str, key: str, **attributes) -> "WriteOp":
        return cls(table, WriteKind.UPSERT, key, attributes)

    @classmethod
    def delete(cls, table: str, key: str) -> "WriteOp":
        return cls(table, WriteKind.DELETE, key)

    def to_record(self) -> StreamRecord:
        if self.kind == WriteKind.UPSERT:
            return StreamRecord.upsert(Row(self.key, dict(self.attributes), self.ts), self.ts)
        return StreamRecord.delete(self.key, self.ts, self.ts)


class Subscription:
    """Change feed over one table; replays the log suffix then follows it live.

    Entries are pushed one scheduler step at a time from a cursor into the
    log, so writes landing mid-replay are picked up exactly once and in order.
    """

    def __init__(self, store: "Store", table: str, since: int, sink: Callable[[StreamRecord], None]):
        self.store = store
        self.table = table
        self.cursor = since
        self.sink = sink
        self.active = True
        self._scheduled = False
        self._position = store._log_position_after(since)

    def cancel(self) -> None:
        self.active = False
        if self in self.store._subscriptions:
            self.store._subscriptions.remove(self)

    def _kick(self) -> None:
        if self.active and not self._scheduled and self._position < len(self.store.log):
            self._scheduled = True
            self.store.scheduler.schedule(0, self._pump, kind="pump", src=self.store.site, dst=self.store.site)

    def _pump(self) -> None:
        self._scheduled = False
        log = self.store.log
        while self.active and self._position < len(log):
            op = log[self._position]
            self._position += 1
            self.cursor = op.ts.value
            if op.table == self.table:
                self.sink(op.to_record())
                break
        self._kick()


class Store:
    """Single-site, totally ordered in-memory storage tier."""

    def __init__(self, scheduler: Scheduler, site: str = "dc"):
        self.scheduler = scheduler
        self.site = site
        self.tables: dict[str, TableDef] = {}
        self.rows: dict[str, dict[str, Row]] = {}
        self.log: list[WriteOp] = []
        self._next_ts = 1
        self._subscriptions: list[Subscription] = []

    def create_table(self, table: TableDef) -> None:
        if table.name in self.tables:
            raise QpuError(ErrorCode.DUPLICATE_TABLE, table.name)
        self.tables[table.name] = table
        self.rows[table.name] = {}

    def _table(self, name: str) -> TableDef:
        try:
            return self.tables[name]
        except KeyError:
            raise QpuError(ErrorCode.UNKNOWN_TABLE, name) from None

    @property
    def max_ts(self) -> LogicalTimestamp:
        return self.log[-1].ts if self.log else ZERO_TS

    def write(self, op: WriteOp) -> LogicalTimestamp:
        table = self._table(op.table)
        attributes = table.coerce(op.attributes) if op.kind == WriteKind.UPSERT else {}
        if op.kind == WriteKind.UPSERT and set(attributes) != set(table.kinds):
            raise QpuError(ErrorCode.SCHEMA_MISMATCH, f"upsert into {op.table} must set {sorted(table.kinds)}")
        ts = LogicalTimestamp(self._next_ts, self.site, self.scheduler.now)
        self._next_ts += 1
        committed = WriteOp(op.table, op.kind, op.key, attributes, ts)
        self.log.append(committed)
        rows = self.rows[op.table]
        if op.kind == WriteKind.UPSERT:
            rows[op.key] = Row(op.key, attributes, ts)
        else:
            rows.pop(op.key, None)
        for sub in self._subscriptions:
            sub._kick()
        return ts

    def scan(self, table: str, as_of: LogicalTimestamp | None = None) -> list[Row]:
        """Live rows sorted by key; with ``as_of`` the state is rebuilt from the log prefix."""
        self._table(table)
        if as_of is None:
            rows = self.rows[table]
        else:
            rows = {}
            for op in self.log:
                if op.ts.value > as_of.value:
                    break
                if op.table != table:
                    continue
                if op.kind == WriteKind.UPSERT:
                    rows[op.key] = Row(op.key, dict(op.attributes), op.ts)
                else:
                    rows.pop(op.key, None)
        return [rows[k] for k in sorted(rows)]

    def subscribe(self, table: str, since: LogicalTimestamp | int,
                  sink: Callable[[StreamRecord], None]) -> Subscription:
        self._table(table)
        since_value = since.value if isinstance(since, LogicalTimestamp) else int(since)
        if since_value > self.max_ts.value:
            raise ValueError(f"since={since_value} is ahead of the log")
        sub = Subscription(self, table, since_value, sink)
        self._subscriptions.append(sub)
        sub._kick()
        return sub

    def _log_position_after(self, since: int) -> int:
        # ts values are 1..n in log order
        return max(0, min(since, len(self.log)))

    def load(self, data: Mapping[str, Iterable[Mapping]]) -> None:
        """Commit fixture rows given as ``{table: [{key_attr: ..., attr: ...}, ...]}``."""
        for name in sorted(data):
            table = self._table(name)
            for raw in data[name]:
                raw = dict(raw)
                key = raw.pop(table.key_attribute)
                self.write(WriteOp(name, WriteKind.UPSERT, str(key), raw))


def fold_log(log: Iterable[WriteOp], table: str) -> dict[str, dict]:
    """Left fold of upserts/deletes for one table: key -> attributes."""
    state: dict[str, dict] = {}
    for op in log:
        if op.table != table:
            continue
        if op.kind == WriteKind.UPSERT:
            state[op.key] = dict(op.attributes)
        else:
            state.pop(op.key, None)
    return state

