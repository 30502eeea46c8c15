"""Declarative QPU graphs: parse, validate, deploy.

A topology document is JSON with ``format_version``, ``network``, optional
``tables``, ``qpus`` and ``roots`` sections. See ``docs/formats.md`` for the
field reference.
"""

from __future__ import annotations

import copy
import graphlib
import json
import re
from dataclasses import dataclass, field, replace
from typing import Any, Iterable, Mapping, Optional

from .core import Client, QpuError, Query, Response, Runtime
from .qpus import QPU_CLASSES
from .qpus.cache import DEFAULT_CAPACITY, DEFAULT_TTL_MS
from .qpus.topk import DEFAULT_K
from .simnet import (
    DEFAULT_CROSS_SITE_COST,
    DEFAULT_CROSS_SITE_MS,
    DEFAULT_INTRA_SITE_COST,
    DEFAULT_INTRA_SITE_MS,
    NetworkError,
    NetworkModel,
    Scheduler,
    Site,
    SiteKind,
)
from .storage import ADS, PRICES, Store, TableDef

FORMAT_VERSION = 1

CLASS_DEFAULTS: dict[str, dict] = {
    "dsd": {},
    "index": {"attribute": "tags"},
    "join": {},
    "topk": {"k": DEFAULT_K, "order_attribute": "price"},
    "cache": {"ttl_ms": DEFAULT_TTL_MS, "capacity": DEFAULT_CAPACITY},
    "filter": {"predicate": [], "projection": None},
}


class ParseError(ValueError):
    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line else message)


@dataclass(frozen=True)
class QpuSpec:
    id: str
    cls: str
    site: str
    config: Mapping[str, Any] = field(default_factory=dict)
    children: tuple = ()


@dataclass(frozen=True)
class TopologySpec:
    network: NetworkModel
    storage_site: str
    tables: Mapping[str, TableDef]
    qpus: tuple
    roots: tuple
    format_version: int = FORMAT_VERSION
    name: str = ""

    def qpu(self, qpu_id: str) -> QpuSpec:
        for q in self.qpus:
            if q.id == qpu_id:
                return q
        raise KeyError(qpu_id)

    def with_sites(self, placement: Mapping[str, str]) -> "TopologySpec":
        return replace(self, qpus=tuple(
            replace(q, site=placement.get(q.id, q.site)) for q in self.qpus
        ))

    def with_class_config(self, cls: str, **updates) -> "TopologySpec":
        return replace(self, qpus=tuple(
            replace(q, config={**q.config, **updates}) if q.cls == cls else q for q in self.qpus
        ))


# -- parsing -----------------------------------------------------------------


def _line_of(text: str, needle: str) -> Optional[int]:
    idx = text.find(needle)
    return None if idx < 0 else text.count("\n", 0, idx) + 1


def _require(obj: Mapping, key: str, where: str, text: str, hint: str = ""):
    if not isinstance(obj, Mapping) or key not in obj:
        raise ParseError(f"{where}: missing field '{key}'", _line_of(text, hint) if hint else None)
    return obj[key]


def _parse_network(net: Mapping, text: str) -> tuple[NetworkModel, str]:
    sites_raw = _require(net, "sites", "network", text, '"network"')
    if not isinstance(sites_raw, list) or not sites_raw:
        raise ParseError("network.sites must be a non-empty list", _line_of(text, '"sites"'))
    sites = []
    for i, raw in enumerate(sites_raw):
        name = _require(raw, "name", f"network.sites[{i}]", text, '"sites"')
        try:
            kind = SiteKind(raw.get("kind", "DATA_CENTER"))
        except ValueError:
            raise ParseError(f"site {name!r}: unknown kind {raw.get('kind')!r}", _line_of(text, f'"{name}"')) from None
        sites.append(Site(name, kind))
    latency, cost = {}, {}
    for link in net.get("links", []):
        pair = (_require(link, "a", "network.links", text), _require(link, "b", "network.links", text))
        if "latency_ms" in link:
            latency[pair] = link["latency_ms"]
        if "cost_per_byte" in link:
            cost[pair] = link["cost_per_byte"]
    try:
        model = NetworkModel(
            sites, latency, cost,
            intra_site_ms=net.get("intra_site_latency_ms", DEFAULT_INTRA_SITE_MS),
            cross_site_ms=net.get("cross_site_latency_ms", DEFAULT_CROSS_SITE_MS),
            intra_site_cost=net.get("intra_site_cost_per_byte", DEFAULT_INTRA_SITE_COST),
            cross_site_cost=net.get("cross_site_cost_per_byte", DEFAULT_CROSS_SITE_COST),
        )
    except (NetworkError, TypeError) as exc:
        raise ParseError(f"network: {exc}", _line_of(text, '"network"')) from None
    dcs = model.sites_of_kind(SiteKind.DATA_CENTER)
    storage_site = net.get("storage_site", dcs[0] if dcs else sites[0].name)
    return model, storage_site


def _parse_tables(raw, text: str) -> dict[str, TableDef]:
    if raw is None:
        return {ADS.name: ADS, PRICES.name: PRICES}
    tables = {}
    for i, t in enumerate(raw):
        name = _require(t, "name", f"tables[{i}]", text, '"tables"')
        key = _require(t, "key", f"tables[{i}]", text, f'"{name}"')
        try:
            tables[name] = TableDef(name, key, tuple(t.get("attributes", {}).items()))
        except (QpuError, ValueError) as exc:
            raise ParseError(f"table {name}: {exc}", _line_of(text, f'"{name}"')) from None
    return tables


def parse_topology(text: str, name: str = "") -> TopologySpec:
    """Parse a topology document, filling class and network defaults."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, exc.lineno) from None
    if not isinstance(doc, dict):
        raise ParseError("topology must be a JSON object", 1)
    version = doc.get("format_version", FORMAT_VERSION)
    if version != FORMAT_VERSION:
        raise ParseError(f"unsupported format_version {version!r}", _line_of(text, '"format_version"'))
    network, storage_site = _parse_network(_require(doc, "network", "topology", text), text)
    tables = _parse_tables(doc.get("tables"), text)
    qpus_raw = _require(doc, "qpus", "topology", text)
    if not isinstance(qpus_raw, list):
        raise ParseError("qpus must be a list", _line_of(text, '"qpus"'))
    qpus = []
    for i, raw in enumerate(qpus_raw):
        if not isinstance(raw, dict):
            raise ParseError(f"qpus[{i}] must be an object", _line_of(text, '"qpus"'))
        qpu_id = _require(raw, "id", f"qpus[{i}]", text, '"qpus"')
        hint = f'"{qpu_id}"'
        cls = _require(raw, "class", f"qpu {qpu_id!r}", text, hint)
        if cls not in QPU_CLASSES:
            raise ParseError(f"qpu {qpu_id!r}: unknown class {cls!r}", _line_of(text, hint))
        site = _require(raw, "site", f"qpu {qpu_id!r}", text, hint)
        config = {**copy.deepcopy(CLASS_DEFAULTS[cls]), **raw.get("config", {})}
        children = raw.get("children", [])
        if not isinstance(children, list):
            raise ParseError(f"qpu {qpu_id!r}: children must be a list", _line_of(text, hint))
        qpus.append(QpuSpec(qpu_id, cls, site, config, tuple(children)))
    roots = doc.get("roots")
    if roots is None:
        referenced = {c for q in qpus for c in q.children}
        roots = [q.id for q in qpus if q.id not in referenced]
    return TopologySpec(network, storage_site, tables, tuple(qpus), tuple(roots), version, name)


def load_topology(path) -> TopologySpec:
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    stem = re.sub(r"\.json$", "", str(path).replace("\\", "/").rsplit("/", 1)[-1])
    return parse_topology(text, name=stem)


# -- validation --------------------------------------------------------------


@dataclass(frozen=True)
class Issue:
    code: str
    qpu: str
    message: str


@dataclass
class ValidationReport:
    errors: list = field(default_factory=list)
    capabilities: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return not self.errors

    def add(self, code: str, qpu: str, message: str) -> None:
        self.errors.append(Issue(code, qpu, message))

    def codes(self) -> set[str]:
        return {e.code for e in self.errors}

    def to_json(self) -> dict:
        return {
            "ok": self.ok,
            "errors": [{"code": e.code, "qpu": e.qpu, "message": e.message} for e in self.errors],
            "capabilities": {
                qid: [c.to_dict() for c in caps] for qid, caps in sorted(self.capabilities.items())
            },
        }

    def to_text(self) -> str:
        lines = ["topology OK" if self.ok else f"topology has {len(self.errors)} error(s)"]
        for e in self.errors:
            lines.append(f"  {e.code} [{e.qpu}] {e.message}")
        for qid, caps in sorted(self.capabilities.items()):
            for c in caps:
                extra = []
                if c.supports_order_limit:
                    extra.append(f"order/limit<={c.max_limit}" if c.max_limit else "order/limit")
                if c.supports_subscribe:
                    extra.append("subscribe")
                if c.supports_predicate:
                    extra.append("predicate")
                attrs = ",".join(sorted(c.indexed_attributes))
                lines.append(f"  {qid}: {c.table}({attrs}) {' '.join(extra)}".rstrip())
        return "\n".join(lines)


def validate(spec: TopologySpec) -> ValidationReport:
    report = ValidationReport()
    by_id: dict[str, QpuSpec] = {}
    for q in spec.qpus:
        if q.id in by_id:
            report.add("ERR_DUPLICATE_ID", q.id, "id used more than once")
        by_id[q.id] = q
    if spec.storage_site not in spec.network.sites:
        report.add("ERR_SITE", "-", f"storage site {spec.storage_site!r} is not a network site")

    graph: dict[str, list[str]] = {}
    for q in by_id.values():
        if q.site not in spec.network.sites:
            report.add("ERR_SITE", q.id, f"unknown site {q.site!r}")
        known = []
        for child in q.children:
            if child not in by_id:
                report.add("ERR_UNKNOWN_CHILD", q.id, f"child {child!r} is not defined")
            else:
                known.append(child)
        graph[q.id] = known
        n = len(q.children)
        if q.cls == "dsd" and n:
            report.add("ERR_ARITY", q.id, "dsd takes no QPU children")
        elif q.cls == "join" and n != 2:
            report.add("ERR_ARITY", q.id, f"join needs exactly 2 children, has {n}")
        elif q.cls != "dsd" and n < 1:
            report.add("ERR_ARITY", q.id, f"{q.cls} needs at least one child")

    order: list[str] = []
    try:
        order = list(graphlib.TopologicalSorter(graph).static_order())
    except graphlib.CycleError as exc:
        cycle = exc.args[1]
        report.add("ERR_CYCLE", cycle[0], "cycle: " + " -> ".join(cycle))

    if not spec.roots:
        report.add("ERR_ROOT", "-", "no roots")
    for root in spec.roots:
        if root not in by_id:
            report.add("ERR_ROOT", root, "root is not defined")
        elif order and not _reaches_driver(root, by_id, graph):
            report.add("ERR_ROOT", root, "root does not reach a dsd leaf")

    broken = {e.qpu for e in report.errors}
    for qid in order:
        q = by_id[qid]
        if qid in broken or any(c not in report.capabilities for c in q.children):
            continue
        child_caps = {c: report.capabilities[c] for c in q.children}
        try:
            report.capabilities[qid] = QPU_CLASSES[q.cls].derive_capabilities(q.config, child_caps, spec.tables)
        except QpuError as exc:
            code = "ERR_CAPABILITY" if exc.code.value == "CAPABILITY_MISMATCH" else "ERR_CONFIG"
            report.add(code, qid, exc.message)
        except (KeyError, TypeError, ValueError) as exc:
            report.add("ERR_CONFIG", qid, f"bad config: {exc}")
    return report


def _reaches_driver(start: str, by_id, graph) -> bool:
    stack, seen = [start], set()
    while stack:
        node = stack.pop()
        if node in seen:
            continue
        seen.add(node)
        if by_id[node].cls == "dsd":
            return True
        stack.extend(graph.get(node, ()))
    return False


# -- deployment --------------------------------------------------------------


class Deployment:
    """A running QPU graph on a simulator."""

    def __init__(self, spec: TopologySpec, runtime: Runtime, report: ValidationReport):
        self.spec = spec
        self.runtime = runtime
        self.report = report
        self._clients: dict[str, Client] = {}

    @property
    def scheduler(self) -> Scheduler:
        return self.runtime.scheduler

    @property
    def store(self) -> Store:
        return self.runtime.store

    @property
    def qpus(self):
        return self.runtime.qpus

    @property
    def roots(self) -> tuple:
        return self.spec.roots

    @property
    def ready(self) -> bool:
        return all(q.ready for q in self.runtime.qpus.values())

    def client(self, site: str) -> Client:
        if site not in self._clients:
            self._clients[site] = Client(self.runtime, f"client@{site}", site)
        return self._clients[site]

    def query(self, root: str, q: Query, site: str, on_done=None) -> Response:
        return self.client(site).query(root, q, on_done)

    def root_table(self, root: str) -> str:
        return self.report.capabilities[root][0].table

    def find(self, cls: str) -> list:
        return [q for q in self.runtime.qpus.values() if q.kind == cls]


class DeployError(RuntimeError):
    pass


def deploy(spec: TopologySpec, scheduler: Optional[Scheduler] = None,
           store: Optional[Store] = None) -> Deployment:
    """Instantiate every QPU on its site and open build-time subscriptions."""
    report = validate(spec)
    if not report.ok:
        raise DeployError("cannot deploy an invalid topology:\n" + report.to_text())
    if scheduler is None:
        scheduler = Scheduler(spec.network)
    elif scheduler.network is None:
        scheduler.network = spec.network
    if store is None:
        store = Store(scheduler, spec.storage_site)
        for table in spec.tables.values():
            store.create_table(table)
    runtime = Runtime(scheduler, roots=spec.roots, store=store)
    by_id = {q.id: q for q in spec.qpus}
    order = list(graphlib.TopologicalSorter({q.id: list(q.children) for q in spec.qpus}).static_order())
    for qid in order:
        q = by_id[qid]
        cls = QPU_CLASSES[q.cls]
        runtime.register(cls(q.id, q.site, q.config, q.children, report.capabilities[qid]))
    for qid in order:
        runtime.qpus[qid].start()
    return Deployment(spec, runtime, report)


def iter_reachable(spec: TopologySpec, root: str) -> Iterable[QpuSpec]:
    """Breadth-first walk from ``root`` down through children."""
    by_id = {q.id: q for q in spec.qpus}
    queue, seen = [root], set()
    while queue:
        qid = queue.pop(0)
        if qid in seen:
            continue
        seen.add(qid)
        yield by_id[qid]
        queue.extend(by_id[qid].children)
