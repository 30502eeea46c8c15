from __future__ import annotations

from ..core import Capability, Mode, Query, RecordKind, Row, StreamRecord, row_matches
from .base import CapabilityError, ConfigError, StatefulQPU, find_capability
from .state import JoinState

SIDES = ("left", "right")


def _side(config, side):
    spec = config.get(side)
    if not isinstance(spec, dict) or "child" not in spec or "table" not in spec:
        raise ConfigError(f"join needs a '{side}' block with 'child' and 'table'")
    return spec["child"], spec["table"]


class JoinQPU(StatefulQPU):
    """Inner equi-join of two children on the row key.

    Output rows carry both sides' attributes and the newer of the two
    timestamps. A side's change is only visible upstream while its partner
    exists.
    """

    kind = "join"

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.state = JoinState()

    @staticmethod
    def derive_capabilities(config, child_caps, tables) -> list[Capability]:
        caps = []
        for side in SIDES:
            child, table = _side(config, side)
            if child not in child_caps:
                raise ConfigError(f"join {side} child {child!r} is not a declared child")
            _, cap = find_capability(child_caps, [child], table)
            if cap.key != config["key"]:
                raise CapabilityError(f"{side} side {table} is keyed by {cap.key!r}, not {config['key']!r}")
            if not cap.supports_subscribe:
                raise CapabilityError(f"{side} side {table} cannot stream changes")
            caps.append(cap)
        left, right = caps
        return [Capability(
            table=config.get("table") or f"{left.table}_{right.table}",
            indexed_attributes=left.indexed_attributes | right.indexed_attributes | {config["key"]},
            supports_subscribe=True,
            supports_predicate=True,
            key=config["key"],
        )]

    def open_build_streams(self) -> None:
        for side in SIDES:
            child, table = _side(self.config, side)
            self.subscribe_child(child, Query(table, mode=Mode.SNAPSHOT_AND_SUBSCRIBE), side)

    def snapshot_rows(self, q: Query) -> list[Row]:
        return [row for row in self.state.view().values() if row_matches(q, row)]

    def apply(self, role: str, rec: StreamRecord) -> None:
        row = rec.payload
        keep = row if rec.kind in (RecordKind.SNAPSHOT, RecordKind.DELTA_UPSERT) else None
        old, new = self.state.apply(role, row.key, keep)
        if rec.kind.is_delta:
            self.notify(row.key, old, new, rec.origin_write_ts)
