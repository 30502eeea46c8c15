import json
from pathlib import Path

import pytest

from qpukit.core import ProtocolMonitor
from qpukit.storage import ADS, PRICES, Store
from qpukit.topology import deploy, parse_topology
from qpukit.workload import FIXTURE

ROOT = Path(__file__).resolve().parents[1]
CONFIGS = ROOT / "configs"
FIG2A = CONFIGS / "fig2a.json"
FIG2B = CONFIGS / "fig2b.json"


@pytest.fixture(autouse=True)
def protocol_guard():
    """Every stream in every test must follow SNAPSHOT* END_OF_SNAPSHOT DELTA*."""
    before = len(ProtocolMonitor.global_violations)
    yield
    assert ProtocolMonitor.global_violations[before:] == []


NETWORK = {
    "sites": [{"name": "dc", "kind": "DATA_CENTER"}, {"name": "edge", "kind": "EDGE"}],
    "storage_site": "dc",
}


def topology(qpus, roots=None, network=None):
    doc = {"format_version": 1, "network": network or NETWORK, "qpus": qpus}
    if roots is not None:
        doc["roots"] = roots
    return parse_topology(json.dumps(doc), name="test")


def dsd(site="dc", tables=("Ads", "Prices"), qid="dsd"):
    return {"id": qid, "class": "dsd", "site": site, "config": {"tables": list(tables)}, "children": []}


def index(site="dc", child="dsd", qid="index"):
    return {"id": qid, "class": "index", "site": site, "config": {"table": "Ads"}, "children": [child]}


def join(site="dc", left="index", right="dsd", qid="join"):
    return {
        "id": qid, "class": "join", "site": site,
        "config": {"key": "ad_id", "table": "AdPrices",
                   "left": {"child": left, "table": "Ads"},
                   "right": {"child": right, "table": "Prices"}},
        "children": sorted({left, right}) if left != right else [left, right],
    }


def topk(site="dc", child="join", k=10, qid="topk"):
    return {"id": qid, "class": "topk", "site": site, "config": {"k": k}, "children": [child]}


def cache(site="edge", child="topk", ttl_ms=500, capacity=128, qid="cache"):
    return {"id": qid, "class": "cache", "site": site,
            "config": {"ttl_ms": ttl_ms, "capacity": capacity}, "children": [child]}


def case_study(topk_site="edge", with_cache=False, k=10):
    qpus = [dsd(), index(), join(), topk(site=topk_site, k=k)]
    if with_cache:
        qpus.append(cache())
    return topology(qpus, roots=["cache" if with_cache else "topk"])


def running(spec, data=FIXTURE):
    """Deploy ``spec`` over ``data`` (loaded before deployment) and wait for readiness."""
    from qpukit.simnet import Scheduler

    scheduler = Scheduler(spec.network, trace=True)
    store = Store(scheduler, spec.storage_site)
    for table in spec.tables.values():
        store.create_table(table)
    if data:
        store.load(data)
    dep = deploy(spec, scheduler, store)
    scheduler.run_until_quiescent()
    assert dep.ready
    return dep


def fixture_rows():
    ads = {r["ad_id"]: frozenset(r["tags"]) for r in FIXTURE["Ads"]}
    prices = {r["ad_id"]: r["price"] for r in FIXTURE["Prices"]}
    return ads, prices


@pytest.fixture
def fixture_tables():
    return fixture_rows()


@pytest.fixture
def empty_store():
    from qpukit.simnet import NetworkModel, Scheduler

    scheduler = Scheduler(NetworkModel.two_site())
    store = Store(scheduler, "dc")
    store.create_table(ADS)
    store.create_table(PRICES)
    return store


# -- acceptance summary ------------------------------------------------------

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    violations = len(ProtocolMonitor.global_violations)
    suite_line = (f"CRITERION 7 (suite-wide) {'PASS' if violations == 0 else 'FAIL'}: "
                  f"{violations} grammar violations in {ProtocolMonitor.global_records} delivered records")
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in ACCEPTANCE_LINES + [suite_line]:
        terminalreporter.write_line(line)
