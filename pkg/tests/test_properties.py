"""Randomized invariants of the incremental QPUs."""

import random

from hypothesis import given, settings
from hypothesis import strategies as st

from qpukit.core import LogicalTimestamp, Mode, Query, RecordKind, Row
from qpukit.qpus import TopKState
from qpukit.storage import WriteOp
from qpukit.topology import load_topology
from qpukit.workload import WorkloadSpec, oracle_eval, run_experiment, store_snapshot

from . import oracles
from .conftest import FIG2A, case_study, dsd, index, join, running, topology

KEYS = [f"k{i:02d}" for i in range(50)]
TAGS = [f"t{i}" for i in range(8)]

write_ops = st.lists(
    st.one_of(
        st.builds(lambda k, tags: WriteOp.upsert("Ads", k, tags=frozenset(tags)),
                  st.sampled_from(KEYS), st.sets(st.sampled_from(TAGS), max_size=3)),
        st.builds(lambda k, p: WriteOp.upsert("Prices", k, price=p),
                  st.sampled_from(KEYS), st.integers(0, 30)),
        st.builds(lambda t, k: WriteOp.delete(t, k), st.sampled_from(["Ads", "Prices"]),
                  st.sampled_from(KEYS)),
    ),
    max_size=200,
)

def replay(dep, ops, seed=0):
    """Commit ``ops`` at random virtual times so they overlap in-flight propagation."""
    rng = random.Random(seed)
    t = 0.0
    for op in ops:
        t += rng.choice([0.0, 0.5, 3.0, 60.0])
        dep.scheduler.schedule(t, lambda op=op: dep.store.write(op))
    dep.scheduler.run_until_quiescent()


@settings(max_examples=30, deadline=None)
@given(write_ops, st.integers(0, 3))
def test_state_converges_to_recomputation(ops, seed):
    dep = running(load_topology(FIG2A), data=None)
    replay(dep, ops, seed)
    ads, prices = oracles.base_tables(dep.store)
    assert dep.qpus["index"].state.as_map() == oracles.index_map(ads)
    view = {k: (r.get("tags"), r.get("price")) for k, r in dep.qpus["join"].state.view().items()}
    assert view == oracles.joined(ads, prices)
    assert dep.qpus["topk"].state.ordered() == oracles.per_tag_orders(ads, prices)


@settings(max_examples=200, deadline=None)
@given(st.dictionaries(st.sampled_from(KEYS),
                       st.tuples(st.sets(st.sampled_from(TAGS), max_size=3), st.integers(0, 20)),
                       max_size=50),
       st.sets(st.sampled_from(TAGS), max_size=4), st.integers(1, 10))
def test_merged_per_tag_views_equal_brute_force(data, tags, k):
    state = TopKState(k)
    for key, (ktags, price) in data.items():
        state.upsert(Row(key, {"tags": frozenset(ktags), "price": price}, LogicalTimestamp(1)))
    ads = {key: frozenset(t) for key, (t, _) in data.items()}
    prices = {key: p for key, (_, p) in data.items()}
    got = [(r.key, r.get("price")) for r in state.answer(tags, k)]
    assert got == oracles.topk(ads, prices, tags, k)


@settings(max_examples=30, deadline=None)
@given(write_ops.filter(bool), st.sets(st.sampled_from(TAGS), min_size=1, max_size=2), st.integers(1, 4))
def test_topk_subscription_deltas_are_minimal_and_complete(ops, tags, k):
    dep = running(case_study(k=4), data=None)
    response = dep.query("topk", Query("AdPrices", tags, order_by=("price", True), limit=k,
                                       mode=Mode.SNAPSHOT_AND_SUBSCRIBE), "edge")
    dep.scheduler.run_until_quiescent()
    answer = {key: p for key, p in oracles.topk(*oracles.base_tables(dep.store), tags, k)}
    state = {r.key: r.get("price") for r in response.rows}
    assert state == answer
    for op in ops:
        seen = len(response.deltas)
        ts = dep.store.write(op)
        dep.scheduler.run_until_quiescent()
        new_answer = dict(oracles.topk(*oracles.base_tables(dep.store), tags, k))
        emitted = response.deltas[seen:]
        assert all(d.origin_write_ts == ts for d in emitted)
        if new_answer == answer:
            assert emitted == []
        for d in emitted:
            if d.kind == RecordKind.DELTA_UPSERT:
                state[d.payload.key] = d.payload.get("price")
            else:
                state.pop(d.payload.key, None)
        assert state == new_answer
        answer = new_answer


@settings(max_examples=30, deadline=None)
@given(write_ops, st.integers(0, 30), st.sampled_from([">", "<=", "="]))
def test_filter_commutes_with_folding(ops, bound, op):
    qpus = [dsd(), index(), join(),
            {"id": "filter", "class": "filter", "site": "edge",
             "config": {"predicate": [["price", op, bound]]}, "children": ["join"]}]
    dep = running(topology(qpus, roots=["filter"]), data=None)
    response = dep.query("filter", Query("AdPrices", mode=Mode.SNAPSHOT_AND_SUBSCRIBE), "edge")
    dep.scheduler.run_until_quiescent()
    replay(dep, ops)
    state = {r.key: r.get("price") for r in response.rows}
    for d in response.deltas:
        if d.kind == RecordKind.DELTA_UPSERT:
            state[d.payload.key] = d.payload.get("price")
        else:
            state.pop(d.payload.key, None)
    check = {">": lambda p: p > bound, "<=": lambda p: p <= bound, "=": lambda p: p == bound}[op]
    ads, prices = oracles.base_tables(dep.store)
    assert state == {k: p for k, (_, p) in oracles.joined(ads, prices).items() if check(p)}


@settings(max_examples=20, deadline=None)
@given(write_ops.filter(bool), st.integers(0, 5))
def test_cache_serves_some_recent_oracle_answer(ops, seed):
    spec = case_study(topk_site="dc", with_cache=True)
    dep = running(spec, data=None)
    ttl = dep.qpus["cache"].cache.ttl_ms
    rng = random.Random(seed)
    probes = []
    t = 0.0
    for op in ops:
        t += rng.choice([1.0, 20.0, 120.0])
        dep.scheduler.schedule(t, lambda op=op: dep.store.write(op))
        tags = frozenset(rng.sample(TAGS, 1))
        q = Query("AdPrices", tags, order_by=("price", True), limit=3)
        dep.scheduler.schedule(t + rng.random() * 40, lambda q=q: probes.append(dep.query("cache", q, "edge")))
    dep.scheduler.run_until_quiescent()

    # every state the base tables passed through, with the interval it was current
    log = dep.store.log
    ends = [op.ts.wall for op in log[1:]] + [float("inf")]
    served = {rid: (filled, at) for rid, filled, at in dep.qpus["cache"].served}
    for response in probes:
        assert response.error is None
        got = [(r.key, r.get("price")) for r in response.rows]
        if response.handle.id in served:
            filled, at = served[response.handle.id]
            assert at - filled <= ttl
        else:
            filled = response.completed_at
        # the fill reflects the topk state, itself at most a few intra-DC hops behind the store
        window_start = filled - 200.0
        candidates = [{"Ads": [], "Prices": []}] if not log or log[0].ts.wall >= window_start else []
        for op, end in zip(log, ends):
            if end >= window_start and op.ts.wall <= filled:
                candidates.append(store_snapshot_as_of(dep.store, op.ts))
        assert any(oracle_eval(snap, response.query) == got for snap in candidates), got


def store_snapshot_as_of(store, ts):
    return {name: store.scan(name, as_of=ts) for name in ("Ads", "Prices")}


def test_concurrent_root_queries_are_isolated():
    """Queries interleaved with writes each see one consistent top-K state."""
    dep = running(load_topology(FIG2A))
    qpu = dep.qpus["topk"]
    observed = {}
    original = qpu._answer

    def answer(q, response):
        rows = qpu.state.rows
        ads = {k: r.get("tags") for k, r in rows.items()}
        prices = {k: r.get("price") for k, r in rows.items()}
        observed[response.id] = oracles.topk(ads, prices, q.tag_filter, q.limit)
        original(q, response)

    qpu._answer = answer
    rng = random.Random(7)
    responses = []
    for i in range(200):
        t = i * 2.0
        tags = frozenset(rng.sample(["sports", "news", "cars", "tech"], 2))
        q = Query("AdPrices", tags, order_by=("price", True), limit=3)
        dep.scheduler.schedule(t, lambda q=q: responses.extend([dep.query("topk", q, "edge"),
                                                                 dep.query("topk", q, "edge")]))
        key = rng.choice(["a1", "a2", "a3", "a4", "a5", "a6"])
        op = (WriteOp.upsert("Prices", key, price=rng.randint(1, 99)) if rng.random() < 0.7
              else WriteOp.upsert("Ads", key, tags=frozenset(rng.sample(["sports", "news", "cars", "tech"], 2))))
        dep.scheduler.schedule(t + 1.0, lambda op=op: dep.store.write(op))
    dep.scheduler.run_until_quiescent()
    assert len(responses) == 400
    for a, b in zip(responses[::2], responses[1::2]):
        pairs = [[(r.key, r.get("price")) for r in x.rows] for x in (a, b)]
        assert pairs[0] == pairs[1] == observed[a.handle.id] == observed[b.handle.id]


def test_convergence_after_full_workload():
    result = run_experiment(FIG2A, WorkloadSpec(num_ads=30, duration_ms=3000, query_rate=20, update_rate=60))
    dep = result.deployment
    ads, prices = oracles.base_tables(dep.store)
    assert dep.qpus["topk"].state.ordered() == oracles.per_tag_orders(ads, prices)
    snapshot = store_snapshot(dep.store)
    assert {r.key for r in snapshot["Ads"]} == set(ads)
