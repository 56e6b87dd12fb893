import random
import threading

import pytest

from taiji.agents import RuleStub
from taiji.algebra import QueryPlan, ResultSet, as_multiset, output_columns, scan
from taiji.host import ExecutionError, HostSettings, SchemaMismatchError, assemble, partition
from taiji.language import ExpressionSyntaxError, parse_expression
from taiji.querylog import QueryLog
from taiji.reference import interpret, world_from
from taiji.routing import default_routing, route
from taiji.servers.storage import LakeStore
from taiji.servers.vision import LabelOracle

from plans import CATALOG, host_over, host_with, random_expression, small_lake


@pytest.fixture(scope="module")
def lake():
    store, oracle, host = host_with(7, 30)
    yield store, oracle, host
    host.close()


def test_seeded_plans_match_reference(lake):
    store, oracle, host = lake
    world = world_from(store, oracle)
    for seed in range(25):
        p = parse_expression(random_expression(random.Random(seed)), CATALOG)
        rs, _ = host.execute(p)
        assert as_multiset(rs) == as_multiset(interpret(p, world)), seed


def test_unoptimised_run_matches_too(lake):
    store, oracle, host = lake
    p = parse_expression(random_expression(random.Random(99)), CATALOG)
    rs, trace = host.execute(p, optimize=False)
    assert as_multiset(rs) == as_multiset(interpret(p, world_from(store, oracle)))
    assert trace.candidates == [trace.chosen]


def test_trace_covers_every_node_once(lake):
    _, _, host = lake
    for seed in range(10):
        rs, trace = host.execute(random_expression(random.Random(seed)))
        p = parse_expression(trace.expression, CATALOG)
        assert len(trace.nodes) == len(p.node_ids())
        assert trace.chosen in trace.candidates
        assert trace.nodes[trace.sink].card_out == len(rs)
        longest = max(t.end for t in trace.nodes.values())
        assert trace.total_ms >= longest * 1000.0 - 1e-6


def test_log_written_once_per_call_including_errors():
    store, oracle = small_lake(1, 10)
    qlog = QueryLog()
    host = host_over(store, oracle, query_log=qlog)
    try:
        host.execute("scan(furniture) | limit(3)")
        with pytest.raises(ExpressionSyntaxError):
            host.execute("scan(furniture) | limit(", mode="expression")
        with pytest.raises(Exception):
            host.execute("scan(furniture) | filter(weight < 3)")
        outcomes = [e.outcome for e in qlog.entries()]
        assert outcomes == ["ok", "error", "error"]
        assert qlog.entries()[0].plan is not None and qlog.entries()[1].plan is None
    finally:
        host.close()


class SlowLake(LakeStore):
    def snapshot(self, name):
        if name == "furniture":
            threading.Event().wait(0.3)
        return super().snapshot(name)


def test_independent_branches_overlap():
    store, oracle = small_lake(2, 30)
    slow = SlowLake(tables=[store.table("furniture"), store.table("image")])
    provider = LabelOracle(oracle.labels, cost_per_item=0.004)
    host = host_over(slow, provider)
    try:
        p = parse_expression('scan(image) | sem_match(image, "a chair", 0.5) | '
                             'join(scan(furniture), image.fid == furniture.id)', CATALOG)
        _, trace = host.execute(p, optimize=False)
        by_kind = {p.op(n).kind.value: t for n, t in trace.nodes.items() if n in p.ops}
        a, b = by_kind["SemMatch"], next(t for n, t in trace.nodes.items()
                                         if p.op(n).kind.value == "Scan" and p.op(n).dataset.id == "furniture")
        assert a.server == "image-server" and b.server == "rel-server"
        assert a.start < b.end and b.start < a.end
    finally:
        host.close()


def test_unreachable_image_server_names_semmatch_node():
    store, oracle, host = host_with(3, 15, HostSettings(call_timeout=2))
    try:
        host.catalog.servers["image-server"].client.close()
        p = parse_expression('scan(image) | sem_match(image, "a chair", 0.5)', CATALOG)
        with pytest.raises(ExecutionError) as err:
            host.execute(p, optimize=False)
        sem = next(n for n, op in p.nodes if op.kind.value == "SemMatch")
        scan_node = next(n for n, op in p.nodes if op.kind.value == "Scan")
        assert err.value.node == sem and err.value.server == "image-server"
        assert scan_node in err.value.trace.nodes and sem not in err.value.trace.nodes
        assert host.log.entries()[-1].outcome == "error"
    finally:
        host.close()


def test_sem_join_carries_record_and_image(lake):
    store, oracle, host = lake
    q = ('scan(furniture) | filter(category != "desk") | '
         'sem_join(scan(photos), image, "images with a {furniture.category}", 0.5)')
    rs, _ = host.execute(q)
    photos = [r[0] for r in interpret(parse_expression("scan(photos)", CATALOG), world_from(store, oracle)).rows]
    want = [f + (ref,) for f in store.table("furniture").rows if f[2] != "desk"
            for ref in photos if oracle.truth(ref, f"images with a {f[2]}")]
    assert as_multiset(rs) == as_multiset(ResultSet(rs.columns, tuple(want)))
    assert rs.columns[:5] == tuple(f"furniture.{c}" for c in ("id", "title", "category", "material", "price"))
    assert rs.columns[-1] == "photos.item"


def test_empty_branch_gives_empty_result(lake):
    _, _, host = lake
    rs, _ = host.execute("scan(furniture) | filter(price < 0) | join(scan(image), furniture.id == image.fid)")
    assert len(rs) == 0 and rs.columns[-1] == "image.fid"


def test_natural_language_goes_through_the_agent():
    store, oracle = small_lake(4, 25)
    host = host_over(store, oracle, agent=RuleStub())
    try:
        rs, trace = host.execute("Find a set of two chairs")
        p = parse_expression(trace.expression, CATALOG)
        assert as_multiset(rs) == as_multiset(interpret(p, world_from(store, oracle)))
        assert trace.translate_ms > 0
    finally:
        host.close()
    with pytest.raises(ValueError):
        host_over(store, oracle).translate("Find a set of two chairs", mode="nl")


def test_concurrent_execute_calls(lake):
    store, oracle, host = lake
    world = world_from(store, oracle)
    exprs = [random_expression(random.Random(200 + i)) for i in range(8)]
    want = [as_multiset(interpret(parse_expression(e, CATALOG), world)) for e in exprs]
    got = [None] * len(exprs)

    def go(i):
        got[i] = as_multiset(host.execute(exprs[i])[0])

    threads = [threading.Thread(target=go, args=(i,)) for i in range(len(exprs))]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert got == want


def test_partition_chains_fragments():
    p = parse_expression('scan(furniture) | filter(price < 100) | join(scan(image) | '
                         'sem_match(image, "a chair", 0.5), furniture.id == image.fid)', CATALOG)
    frags = partition(p, route(p, default_routing()))
    assert sorted(len(f.nodes) for f in frags) == [1, 1, 3]
    tops = {f.top for f in frags}
    for f in frags:
        assert set(f.external) <= tops - {f.top}
        assert [p.inputs(n)[0] for n in f.nodes[1:]] == f.nodes[:-1]


def test_assemble_identity_and_schema_check():
    p = QueryPlan.chain(scan(CATALOG["furniture"]))
    cols = output_columns(p)[p.sink]
    rs = ResultSet(cols, ((1, "a", "chair", "oak", 1.0),))
    assert assemble({p.sink: rs}, p) is rs
    with pytest.raises(SchemaMismatchError):
        assemble({p.sink: ResultSet(("x",), ((1,),))}, p)


def test_large_intermediate_streams_in_pages():
    store, oracle, host = host_with(5, 400)
    try:
        rs, _ = host.execute("scan(image) | join(scan(furniture), image.fid == furniture.id)", optimize=False)
        assert len(rs) == len(store.table("image").rows) > 256
    finally:
        host.close()
