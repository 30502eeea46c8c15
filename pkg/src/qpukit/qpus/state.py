"""Incrementally maintained state structures behind the stateful QPUs.

These are plain data structures with no knowledge of streams or the
simulator, so they can be checked directly against recomputation.
"""

from __future__ import annotations

import bisect
from collections import OrderedDict
from typing import Iterable, Optional

from ..core import TAGS, Row


class IndexState:
    """Inverted index from tag to keys, with a per-key applied-timestamp high-water mark."""

    def __init__(self, attribute: str = TAGS):
        self.attribute = attribute
        self.by_tag: dict[str, set[str]] = {}
        self.rows: dict[str, Row] = {}
        self.applied: dict[str, int] = {}

    def _stale(self, key: str, ts_value: int) -> bool:
        return ts_value < self.applied.get(key, 0)

    def upsert(self, row: Row) -> tuple[Optional[Row], Optional[Row]]:
        """Re-tag ``row.key``; returns (old, new). Stale writes are ignored."""
        old = self.rows.get(row.key)
        if self._stale(row.key, row.ts.value):
            return old, old
        self.applied[row.key] = row.ts.value
        if old is not None:
            self._unlink(old)
        self.rows[row.key] = row
        for tag in row.get(self.attribute, ()):
            self.by_tag.setdefault(tag, set()).add(row.key)
        return old, row

    def delete(self, key: str, ts_value: int = 0) -> tuple[Optional[Row], Optional[Row]]:
        old = self.rows.get(key)
        if self._stale(key, ts_value):
            return old, old
        self.applied[key] = max(ts_value, self.applied.get(key, 0))
        if old is None:
            return None, None
        self._unlink(old)
        del self.rows[key]
        return old, None

    def _unlink(self, row: Row) -> None:
        for tag in row.get(self.attribute, ()):
            keys = self.by_tag.get(tag)
            if keys is not None:
                keys.discard(row.key)
                if not keys:
                    del self.by_tag[tag]

    def lookup(self, tags: Iterable[str]) -> list[str]:
        """Sorted keys carrying any of ``tags``; an empty tag set matches every key."""
        tags = set(tags)
        if not tags:
            return sorted(self.rows)
        found: set[str] = set()
        for tag in tags:
            found |= self.by_tag.get(tag, set())
        return sorted(found)

    def as_map(self) -> dict[str, frozenset]:
        return {tag: frozenset(keys) for tag, keys in self.by_tag.items()}


class JoinState:
    """Inner equi-join of two keyed sides."""

    def __init__(self):
        self.left: dict[str, Row] = {}
        self.right: dict[str, Row] = {}

    def joined(self, key: str) -> Optional[Row]:
        left, right = self.left.get(key), self.right.get(key)
        if left is None or right is None:
            return None
        return left.merged(right)

    def apply(self, side: str, key: str, row: Optional[Row]) -> tuple[Optional[Row], Optional[Row]]:
        """Set (or with ``row=None`` remove) one side's row; returns joined (old, new)."""
        rows = self.left if side == "left" else self.right
        old = self.joined(key)
        if row is None:
            rows.pop(key, None)
        else:
            rows[key] = row
        return old, self.joined(key)

    def view(self) -> dict[str, Row]:
        return {k: self.joined(k) for k in sorted(self.left.keys() & self.right.keys())}


class TopKState:
    """Per-tag ordered structures over every row, ranked by (value desc, key asc).

    The full ordering is kept rather than just K entries so deletions and
    value drops never need a downstream re-query. ``None`` indexes the
    structure over all rows, used for queries with an empty tag filter.
    """

    def __init__(self, k: int, order_attribute: str = "price", tag_attribute: str = TAGS):
        if k < 1:
            raise ValueError("k must be >= 1")
        self.k = k
        self.order_attribute = order_attribute
        self.tag_attribute = tag_attribute
        self.rows: dict[str, Row] = {}
        self.by_tag: dict[Optional[str], list[tuple[int, str]]] = {None: []}

    def _entry(self, row: Row) -> tuple[int, str]:
        return (-row.get(self.order_attribute), row.key)

    def _groups(self, row: Row):
        yield None
        yield from row.get(self.tag_attribute, ())

    def upsert(self, row: Row) -> None:
        if row.get(self.order_attribute) is None:
            self.delete(row.key)
            return
        self.delete(row.key)
        self.rows[row.key] = row
        entry = self._entry(row)
        for group in self._groups(row):
            bisect.insort(self.by_tag.setdefault(group, []), entry)

    def delete(self, key: str) -> None:
        old = self.rows.pop(key, None)
        if old is None:
            return
        entry = self._entry(old)
        for group in self._groups(old):
            entries = self.by_tag[group]
            del entries[bisect.bisect_left(entries, entry)]
            if not entries and group is not None:
                del self.by_tag[group]

    def view(self, tag: Optional[str]) -> list[tuple[int, str]]:
        """The exposed first-K entries for one tag."""
        return self.by_tag.get(tag, [])[: self.k]

    def answer(self, tags: Iterable[str], limit: Optional[int] = None) -> list[Row]:
        """Merge the per-tag views of ``tags``, dedupe, re-rank, truncate."""
        limit = self.k if limit is None else limit
        if limit > self.k:
            raise ValueError(f"limit {limit} exceeds configured k={self.k}")
        tags = set(tags)
        groups = sorted(tags) if tags else [None]
        merged = set()
        for group in groups:
            merged.update(self.view(group))
        return [self.rows[key] for _, key in sorted(merged)[:limit]]

    def ordered(self) -> dict[Optional[str], list[tuple[int, str]]]:
        return {g: list(v) for g, v in self.by_tag.items() if v or g is None}


class CacheState:
    """LRU map from canonical query key to (entries, fill time)."""

    def __init__(self, ttl_ms: float, capacity: int):
        self.ttl_ms = ttl_ms
        self.capacity = capacity
        self._entries: OrderedDict[str, tuple[list, float]] = OrderedDict()

    def __len__(self) -> int:
        return len(self._entries)

    def get(self, key: str, now: float) -> Optional[tuple[list, float]]:
        hit = self._entries.get(key)
        if hit is None:
            return None
        if now - hit[1] > self.ttl_ms:
            del self._entries[key]
            return None
        self._entries.move_to_end(key)
        return hit

    def put(self, key: str, entries: list, now: float) -> None:
        if self.capacity <= 0:
            return
        self._entries[key] = (list(entries), now)
        self._entries.move_to_end(key)
        while len(self._entries) > self.capacity:
            self._entries.popitem(last=False)

    def keys(self) -> list[str]:
        return list(self._entries)
