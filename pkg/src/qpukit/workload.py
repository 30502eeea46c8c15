"""Ad-serving workloads, the brute-force query oracle, and run metrics."""

from __future__ import annotations

import csv
import io
import json
import math
import random
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .core import Mode, Query, Response, Row
from .simnet import Scheduler
from .storage import Store, WriteOp
from .topology import Deployment, TopologySpec, deploy, iter_reachable, load_topology

CSV_FORMAT_VERSION = 1
CSV_COLUMNS = (
    "topology", "seed", "query_rate", "update_rate", "queries", "writes",
    "p50_ms", "p95_ms", "max_ms", "mean_lag_ms", "p95_lag_ms",
    "stale_result_fraction", "cross_site_bytes", "total_cost", "cache_hit_rate",
)

FIXTURE = {
    "Ads": (
        {"ad_id": "a1", "tags": ("sports", "cars")},
        {"ad_id": "a2", "tags": ("sports",)},
        {"ad_id": "a3", "tags": ("news",)},
        {"ad_id": "a4", "tags": ("cars", "news")},
        {"ad_id": "a5", "tags": ("sports", "news")},
    ),
    "Prices": (
        {"ad_id": "a1", "price": 10},
        {"ad_id": "a2", "price": 50},
        {"ad_id": "a3", "price": 30},
        {"ad_id": "a4", "price": 40},
        {"ad_id": "a5", "price": 20},
    ),
}


class LimitExceeded(RuntimeError):
    pass


class OracleError(ValueError):
    pass


@dataclass(frozen=True)
class WorkloadSpec:
    num_ads: int = 50
    tag_universe: int = 8
    tags_per_ad: tuple = (1, 3)
    price_range: tuple = (1, 100)
    duration_ms: float = 10_000.0
    query_rate: float = 100.0
    update_rate: float = 1.0
    query_tags: tuple = (1, 2)
    k: int = 5
    extra_keys: int = 5
    delete_fraction: float = 0.1
    client_site: str = "edge"
    advertiser_site: str = "dc"
    root: Optional[str] = None
    seed: int = 1

    def __post_init__(self):
        for name in ("tags_per_ad", "price_range", "query_tags"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if self.query_rate < 0 or self.update_rate < 0:
            raise ValueError("rates must be >= 0")
        if self.duration_ms <= 0:
            raise ValueError("duration must be > 0")
        if self.k < 1:
            raise ValueError("k must be >= 1")

    @classmethod
    def from_dict(cls, data: Mapping) -> "WorkloadSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known - {"name"}
        if unknown:
            raise ValueError(f"unknown workload fields: {sorted(unknown)}")
        return cls(**{k: v for k, v in data.items() if k in known})

    @classmethod
    def load(cls, path) -> "WorkloadSpec":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def tags(self) -> list[str]:
        return [f"t{i}" for i in range(self.tag_universe)]

    @property
    def keys(self) -> list[str]:
        return [f"ad{i:03d}" for i in range(self.num_ads + self.extra_keys)]


@dataclass(frozen=True)
class ScheduledEvent:
    time: float
    kind: str  # "query" or "write"
    write: Optional[WriteOp] = None
    tags: frozenset = frozenset()
    k: int = 0


@dataclass
class Schedule:
    initial: dict
    events: list

    @property
    def writes(self) -> list[ScheduledEvent]:
        return [e for e in self.events if e.kind == "write"]

    @property
    def queries(self) -> list[ScheduledEvent]:
        return [e for e in self.events if e.kind == "query"]


def _arrivals(rate: float, duration_ms: float, rng: random.Random) -> list[float]:
    """Fixed-rate arrivals, each jittered uniformly inside its own slot."""
    if rate <= 0:
        return []
    interval = 1000.0 / rate
    count = int(math.floor(duration_ms * rate / 1000.0 + 1e-9))
    return [(i + rng.random()) * interval for i in range(count)]


def _random_tags(rng: random.Random, universe: list[str], bounds: tuple) -> frozenset:
    lo, hi = bounds
    n = min(rng.randint(lo, hi), len(universe))
    return frozenset(rng.sample(universe, n))


def generate(spec: WorkloadSpec) -> Schedule:
    """Deterministic initial load plus timed queries and writes.

    Queries, writes and the initial load draw from separate seeded streams so
    changing one rate leaves the other streams untouched.
    """
    tags = spec.tags
    init_rng = random.Random(f"{spec.seed}:initial")
    initial = {"Ads": [], "Prices": []}
    for key in spec.keys[: spec.num_ads]:
        initial["Ads"].append({"ad_id": key, "tags": sorted(_random_tags(init_rng, tags, spec.tags_per_ad))})
        initial["Prices"].append({"ad_id": key, "price": init_rng.randint(*spec.price_range)})

    events = []
    q_rng = random.Random(f"{spec.seed}:queries")
    for t in _arrivals(spec.query_rate, spec.duration_ms, q_rng):
        events.append(ScheduledEvent(t, "query", tags=_random_tags(q_rng, tags, spec.query_tags), k=spec.k))

    w_rng = random.Random(f"{spec.seed}:writes")
    for t in _arrivals(spec.update_rate, spec.duration_ms, w_rng):
        table = w_rng.choice(("Ads", "Prices"))
        key = w_rng.choice(spec.keys)
        if w_rng.random() < spec.delete_fraction:
            op = WriteOp.delete(table, key)
        elif table == "Ads":
            op = WriteOp.upsert("Ads", key, tags=_random_tags(w_rng, tags, spec.tags_per_ad))
        else:
            op = WriteOp.upsert("Prices", key, price=w_rng.randint(*spec.price_range))
        events.append(ScheduledEvent(t, "write", write=op))

    events.sort(key=lambda e: (e.time, e.kind))
    return Schedule(initial, events)


# -- oracle ------------------------------------------------------------------


def _rows_of(snapshot, table: str) -> dict[str, dict]:
    out = {}
    for row in snapshot.get(table, ()):
        if isinstance(row, Row):
            out[row.key] = dict(row.attributes)
        else:
            row = dict(row)
            out[str(row.pop("ad_id"))] = row
    return out


def oracle_eval(snapshot: Mapping[str, Iterable], q: Query) -> list[tuple[str, int]]:
    """Brute-force answer of the ad query over base tables ``Ads`` and ``Prices``.

    Filter ads whose tags intersect the query's tags (no tags: all ads),
    inner-join with prices, apply price comparisons, sort by price (ties by
    ascending key) and cut at the limit.
    """
    ads = _rows_of(snapshot, "Ads")
    prices = _rows_of(snapshot, "Prices")
    wanted = set(q.tag_filter)
    checks = []
    for attr, op, value in q.predicate:
        if attr != "price":
            raise OracleError(f"unknown attribute {attr!r} in predicate")
        checks.append((op, value))
    descending = True
    if q.order_by is not None:
        if q.order_by[0] != "price":
            raise OracleError(f"unknown attribute {q.order_by[0]!r} in order_by")
        descending = bool(q.order_by[1])

    out = []
    for key, ad in ads.items():
        if key not in prices:
            continue
        if wanted and not wanted.intersection(ad.get("tags", ())):
            continue
        price = prices[key]["price"]
        ok = True
        for op, value in checks:
            ok = ok and {
                "=": price == value, "<": price < value, ">": price > value,
                "<=": price <= value, ">=": price >= value,
            }[op]
        if ok:
            out.append((key, price))
    out.sort(key=lambda kp: ((-kp[1] if descending else kp[1]), kp[0]))
    if q.limit is not None:
        out = out[: q.limit]
    return out


def store_snapshot(store: Store) -> dict[str, list[Row]]:
    return {name: store.scan(name) for name in ("Ads", "Prices") if name in store.tables}


def response_pairs(response: Response, order_attribute: str = "price") -> list[tuple[str, int]]:
    return [(row.key, row.get(order_attribute)) for row in response.rows]


# -- metrics -----------------------------------------------------------------


@dataclass
class QueryRecord:
    issued_at: float
    tags: tuple
    k: int
    expected: list
    completed_at: Optional[float] = None
    result: Optional[list] = None
    error: Optional[str] = None

    @property
    def latency(self) -> Optional[float]:
        return None if self.completed_at is None else self.completed_at - self.issued_at

    @property
    def stale(self) -> bool:
        return self.error is None and self.result != self.expected


@dataclass(frozen=True)
class StalenessSample:
    write_ts: int
    committed_at: float
    visible_at: float

    @property
    def lag(self) -> float:
        return self.visible_at - self.committed_at


def _round(x: Optional[float]) -> Optional[float]:
    return None if x is None else round(float(x), 6)


def _percentile(values: Sequence[float], q: float) -> Optional[float]:
    return None if not values else _round(np.percentile(np.asarray(values, dtype=float), q))


@dataclass
class MetricsReport:
    topology: str
    seed: int
    query_rate: float
    update_rate: float
    queries: int
    writes: int
    errors: int
    p50_ms: Optional[float]
    p95_ms: Optional[float]
    max_ms: Optional[float]
    mean_lag_ms: Optional[float]
    p95_lag_ms: Optional[float]
    lag_samples: int
    lag_probe: str
    stale_result_fraction: float
    cross_site_bytes: int
    bytes_by_pair: dict
    total_cost: float
    cache_hit_rate: Optional[float]
    build_cross_site_bytes: int = 0
    events: int = 0

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    def csv_row(self) -> list:
        data = asdict(self)
        return ["" if data[c] is None else data[c] for c in CSV_COLUMNS]

    def to_csv(self) -> str:
        return rows_to_csv([self])


def rows_to_csv(reports: Sequence[MetricsReport], extra: Sequence[tuple[str, Sequence]] = ()) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow([name for name, _ in extra] + list(CSV_COLUMNS))
    for i, report in enumerate(reports):
        writer.writerow([values[i] for _, values in extra] + report.csv_row())
    return buf.getvalue()


# -- experiments -------------------------------------------------------------


@dataclass
class RunResult:
    report: MetricsReport
    deployment: Deployment
    schedule: Schedule
    queries: list = field(default_factory=list)
    lag: list = field(default_factory=list)

    @property
    def trace(self) -> list[str]:
        return self.deployment.scheduler.trace


def lag_probe(spec: TopologySpec, root: str) -> str:
    """The QPU whose state application counts as 'visible': nearest top-K, else nearest stateful unit."""
    reachable = list(iter_reachable(spec, root))
    for cls in ("topk", "join", "index"):
        for q in reachable:
            if q.cls == cls:
                return q.id
    return root


def _as_spec(topology) -> TopologySpec:
    return topology if isinstance(topology, TopologySpec) else load_topology(topology)


def run_experiment(topology, workload: WorkloadSpec, *, trace: bool = False,
                   limit_ms: Optional[float] = None, cold_cache: bool = False) -> RunResult:
    """Deploy, build, replay the workload, drain, and aggregate metrics.

    ``cold_cache`` sets every cache's capacity to zero so each query misses.
    """
    spec = _as_spec(topology)
    if cold_cache:
        spec = spec.with_class_config("cache", capacity=0)
    root = workload.root or spec.roots[0]
    if root not in spec.roots:
        raise ValueError(f"{root!r} is not a root of the topology")
    for site in (workload.client_site, workload.advertiser_site):
        if site not in spec.network.sites:
            raise ValueError(f"workload site {site!r} is not in the topology's network")

    schedule = generate(workload)
    scheduler = Scheduler(spec.network, trace=trace)
    store = Store(scheduler, spec.storage_site)
    for table in spec.tables.values():
        store.create_table(table)
    store.load(schedule.initial)
    dep = deploy(spec, scheduler, store)
    scheduler.run_until_quiescent(limit_ms)
    if scheduler.limit_exceeded or not dep.ready:
        raise LimitExceeded(f"graph not ready by {scheduler.now} ms")
    t0 = scheduler.now
    bytes_at_t0 = dict(scheduler.meter.bytes)
    cost_at_t0 = scheduler.meter.cost

    probe = lag_probe(spec, root)
    visible: dict[int, StalenessSample] = {}

    def on_apply(qpu_id, rec, now):
        ts = rec.origin_write_ts
        if qpu_id == probe and ts is not None and ts.value not in visible:
            visible[ts.value] = StalenessSample(ts.value, ts.wall, now)

    dep.runtime.add_apply_hook(on_apply)
    table = dep.root_table(root)
    client = dep.client(workload.client_site)
    records: list[QueryRecord] = []
    write_ts: list[int] = []

    def issue(event: ScheduledEvent):
        q = Query(table, event.tags, order_by=("price", True), limit=event.k, mode=Mode.SNAPSHOT)
        record = QueryRecord(scheduler.now, tuple(sorted(event.tags)), event.k,
                             oracle_eval(store_snapshot(store), q))
        records.append(record)

        def done(response: Response):
            record.completed_at = response.completed_at
            record.error = response.error
            record.result = response_pairs(response)

        client.query(root, q, done)

    def commit(op: WriteOp):
        write_ts.append(store.write(op).value)

    for event in schedule.events:
        if event.kind == "query":
            scheduler.schedule(event.time, lambda e=event: issue(e), kind="query",
                               src=workload.client_site, dst=workload.client_site)
        else:
            scheduler.schedule(
                event.time,
                lambda e=event: scheduler.send(workload.advertiser_site, store.site, 24,
                                               lambda: commit(e.write), kind="write"),
                kind="advertiser", src=workload.advertiser_site, dst=workload.advertiser_site,
            )
    horizon = None if limit_ms is None else t0 + limit_ms
    scheduler.run_until_quiescent(horizon)
    if scheduler.limit_exceeded:
        raise LimitExceeded(f"events remain at {scheduler.now} ms")

    window = {pair: n - bytes_at_t0.get(pair, 0) for pair, n in scheduler.meter.bytes.items()}
    window = {pair: n for pair, n in window.items() if n}
    cross = {f"{a}->{b}": n for (a, b), n in sorted(window.items()) if a != b}
    done_records = [r for r in records if r.completed_at is not None]
    ok = [r for r in done_records if r.error is None]
    latencies = [r.latency for r in done_records]
    lags = [s.lag for s in sorted(visible.values(), key=lambda s: s.write_ts)]
    caches = dep.find("cache")
    hits = sum(c.hits for c in caches)
    lookups = hits + sum(c.misses for c in caches)
    report = MetricsReport(
        topology=spec.name or "topology",
        seed=workload.seed,
        query_rate=workload.query_rate,
        update_rate=workload.update_rate,
        queries=len(done_records),
        writes=len(write_ts),
        errors=len(done_records) - len(ok),
        p50_ms=_percentile(latencies, 50),
        p95_ms=_percentile(latencies, 95),
        max_ms=_round(max(latencies)) if latencies else None,
        mean_lag_ms=_round(sum(lags) / len(lags)) if lags else None,
        p95_lag_ms=_percentile(lags, 95),
        lag_samples=len(lags),
        lag_probe=probe,
        stale_result_fraction=_round(sum(r.stale for r in ok) / len(ok)) if ok else 0.0,
        cross_site_bytes=sum(cross.values()),
        bytes_by_pair=cross,
        total_cost=_round(scheduler.meter.cost - cost_at_t0),
        cache_hit_rate=_round(hits / lookups) if lookups else None,
        build_cross_site_bytes=sum(n for (a, b), n in bytes_at_t0.items() if a != b),
        events=scheduler.events_processed,
    )
    lag_list = sorted(visible.values(), key=lambda s: s.write_ts)
    return RunResult(report, dep, schedule, records, lag_list)


def quiesced_queries(workload: WorkloadSpec, count: int = 12, max_k: int = 10) -> list[tuple[frozenset, int]]:
    """Tag sets and limits for post-run checks: every single tag, the empty set, and random pairs."""
    rng = random.Random(f"{workload.seed}:check")
    tags = workload.tags
    out = [(frozenset(), rng.randint(1, max_k))]
    out += [(frozenset({t}), rng.randint(1, max_k)) for t in tags]
    for _ in range(count):
        out.append((_random_tags(rng, tags, (1, min(3, len(tags)))), rng.randint(1, max_k)))
    return out


def check_quiesced(result: RunResult, queries: Iterable[tuple[frozenset, int]],
                   site: Optional[str] = None) -> list[tuple]:
    """Query every root after draining; returns (root, tags, k, got, expected) for each mismatch.

    The clock is first moved past the largest cache ttl so no entry filled
    before the last write can be served.
    """
    dep = result.deployment
    scheduler = dep.scheduler
    ttl = max((c.cache.ttl_ms for c in dep.find("cache")), default=0.0)
    scheduler.advance(ttl + 1.0)
    mismatches = []
    pending = []
    expected_base = store_snapshot(dep.store)
    for root in dep.roots:
        table = dep.root_table(root)
        client_site = site or dep.qpus[root].site
        for tags, k in queries:
            q = Query(table, tags, order_by=("price", True), limit=k)
            pending.append((root, tags, k, dep.query(root, q, client_site), oracle_eval(expected_base, q)))
    scheduler.run_until_quiescent()
    for root, tags, k, response, expected in pending:
        got = response_pairs(response) if response.error is None else response.error
        if got != expected:
            mismatches.append((root, sorted(tags), k, got, expected))
    return mismatches


@dataclass(frozen=True)
class SweepPoint:
    label: str
    overrides: Mapping
    sort_value: float


def ratio_points(ratios: Sequence[str], hold: str, base_rate: float) -> list[SweepPoint]:
    """Turn ``"q:w"`` ratios into rate pairs with either the query or the update rate held fixed."""
    points = []
    for ratio in ratios:
        q_part, w_part = (float(x) for x in ratio.split(":"))
        if hold == "query":
            rates = {"query_rate": base_rate, "update_rate": base_rate * w_part / q_part}
            varied = rates["update_rate"]
        elif hold == "update":
            rates = {"query_rate": base_rate * q_part / w_part, "update_rate": base_rate}
            varied = rates["query_rate"]
        else:
            raise ValueError("hold must be 'query' or 'update'")
        points.append(SweepPoint(ratio, rates, varied))
    return points


def param_points(param: str, values: Sequence[float]) -> list[SweepPoint]:
    defaults = {f.name: f.default for f in fields(WorkloadSpec)}
    if param not in defaults or not isinstance(defaults[param], (int, float)):
        raise ValueError(f"unknown numeric workload parameter {param!r}")
    integral = isinstance(defaults[param], int)
    points = []
    for v in values:
        if integral:
            if float(v) != int(v):
                raise ValueError(f"{param} takes integers, got {v}")
            v = int(v)
        points.append(SweepPoint(f"{param}={v:g}", {param: v}, float(v)))
    return points


@dataclass
class SweepRow:
    topology: str
    point: SweepPoint
    report: MetricsReport


def sweep(topologies: Sequence, template: WorkloadSpec, points: Sequence[SweepPoint],
          *, limit_ms: Optional[float] = None, cold_cache: bool = False) -> list[SweepRow]:
    """One run per (topology, point), all with the template's seed, sorted by (topology, varied value)."""
    rows = []
    for topology in topologies:
        spec = _as_spec(topology)
        for point in points:
            workload = replace(template, **point.overrides)
            result = run_experiment(spec, workload, limit_ms=limit_ms, cold_cache=cold_cache)
            rows.append(SweepRow(spec.name or "topology", point, result.report))
    rows.sort(key=lambda r: (r.topology, r.point.sort_value))
    return rows


def sweep_csv(rows: Sequence[SweepRow]) -> str:
    return rows_to_csv(
        [r.report for r in rows],
        extra=[("point", [r.point.label for r in rows]), ("varied_value", [r.point.sort_value for r in rows])],
    )
