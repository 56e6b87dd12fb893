import json
import random
import threading
from collections import Counter
from http.server import BaseHTTPRequestHandler, HTTPServer

import numpy as np
import pytest

from taiji import expr as E
from taiji.algebra import ItemRef, Modality, OpKind, QueryPlan, ResultSet, encode_value, filter_, join, scan
from taiji.filtered_index import Condition
from taiji.language import parse_expression
from taiji.mcp.server import ToolError
from taiji.mcp.client import MCPClient, RpcCallError
from taiji.mcp import protocol as P
from taiji.mcp.transport import inprocess_pipe
from taiji.servers.relational import UnsupportedOperatorError, make_relational_server, rel_execute
from taiji.servers.storage import LakeStore, SchemaError, Table, UnknownTableError
from taiji.servers.vector import (UnindexedDatasetError, VectorDataset, VectorService, make_vector_server,
                                  sem_match)
from taiji.servers.vision import (LabelOracle, NoisyOracle, PredicateCompileError, ProviderUnavailable,
                                  RemoteModel, UnresolvableItemError, compile_predicate, extract_value,
                                  image_match, make_image_server)

from plans import CATALOG, FURNITURE_COLUMNS, IMAGE_COLUMNS, IMAGE_REFS, small_lake

FIVE = [(1, "oak chair", "chair", "oak", 150.0), (2, "pine stool", "stool", "pine", 40.0),
        (3, "teak table", "table", "teak", 300.0), (4, "ash bench", "bench", "ash", 99.5),
        (5, "elm desk", "desk", "elm", 100.0)]


def five_store():
    imgs = [(ItemRef("photos", f"p{f}_{j}", Modality.IMAGE), f) for f in (1, 2, 4) for j in range(2)]
    return LakeStore(tables=[Table("furniture", FURNITURE_COLUMNS, list(FIVE)),
                             Table("image", IMAGE_COLUMNS, imgs, dict(IMAGE_REFS))])


def run(text, store):
    return rel_execute(parse_expression(text, CATALOG), store)


def test_filter_by_hand():
    out = run("scan(furniture) | filter(price < 100)", five_store())
    assert [r[0] for r in out.rows] == [2, 4]


def test_filter_true_is_identity():
    p = QueryPlan.chain(scan(CATALOG["furniture"]), filter_(E.Const(True)))
    assert rel_execute(p, five_store()).rows == tuple(FIVE)


def test_join_matches_nested_loop():
    store = five_store()
    out = run("scan(furniture) | join(scan(image), furniture.id == image.fid)", store)
    want = [f + i for f in FIVE for i in store.table("image").rows if f[0] == i[1]]
    assert Counter(out.rows) == Counter(want) and len(out) == 6


def test_join_keys_either_way_round():
    store = five_store()
    a = run("scan(furniture) | join(scan(image), furniture.id == image.fid)", store)
    b = run("scan(furniture) | join(scan(image), image.fid == furniture.id)", store)
    assert a.rows == b.rows


def test_limit_keeps_prefix_and_project_selects():
    out = run("scan(furniture) | limit(2) | project(title, furniture.price)", five_store())
    assert out.rows == (("oak chair", 150.0), ("pine stool", 40.0))


def test_relational_errors():
    store = five_store()
    with pytest.raises(ToolError) as err:
        run("scan(furniture) | filter(weight < 3)", store)
    assert err.value.data["type"] == "UnknownColumnError" and "weight" in err.value.message
    with pytest.raises(UnknownTableError):
        store.table("nope")
    with pytest.raises(UnsupportedOperatorError):
        run('scan(furniture) | sem_match(image, "a chair", 0.5)', store)


def test_type_mismatch_is_reported():
    with pytest.raises(Exception) as err:
        run('scan(furniture) | filter(price < "cheap")', five_store())
    assert "price" in str(err.value) or "str" in str(err.value)


def test_tables_round_trip_through_files(tmp_path):
    store, _ = small_lake(2, 15, directory=tmp_path)
    from taiji.servers.storage import write_table
    for name in store.names():
        write_table(store.table(name), tmp_path)
    again = LakeStore(tmp_path)
    for name in store.names():
        assert again.table(name).rows == store.table(name).rows
        assert again.table(name).columns == store.table(name).columns


def test_schema_checks():
    with pytest.raises(SchemaError):
        Table("t", (("a", "decimal"),))
    with pytest.raises(SchemaError):
        Table("t", (("img", "item-ref"),))
    with pytest.raises(SchemaError):
        Table("t", (("a", "int"),), [("x",)])


def test_semistructured_jsonl(tmp_path):
    from taiji.servers.storage import write_table
    t = Table("events", (("k", "int"), ("tag", "string")), [(1, "a"), (2, None)], modality=Modality.SEMI_STRUCTURED)
    write_table(t, tmp_path)
    assert (tmp_path / "events.jsonl").exists()
    assert LakeStore(tmp_path).table("events").rows == [(1, "a"), (2, None)]


def test_insert_emits_change_and_validates():
    store = five_store()
    seen = []
    store.listeners.append(lambda name, ch: seen.append((name, ch["kind"], ch["count"])))
    store.insert("furniture", [(6, "new", "chair", "oak", 1.0)])
    with pytest.raises(SchemaError):
        store.insert("furniture", [(7, "bad")])
    store.delete("furniture", lambda r: r[0] != 6)
    assert seen == [("furniture", "insert", 1), ("furniture", "delete", 1)]


def oracle():
    return LabelOracle({"two": {"chair": 2}, "one": {"chair": 1, "sofa": 1}, "blk": {"black chair": 1, "table": 1}})


def ref(i):
    return ItemRef("photos", i, Modality.IMAGE)


def test_image_match_examples():
    out = image_match([ref("two"), ref("one")], "images with two chairs", oracle())
    assert out.rows == ((ref("two"), True, 1.0), (ref("one"), False, 1.0))


def test_predicate_grammar():
    p = compile_predicate("images with a black chair and two tables")
    assert [(r.object, r.min_count, r.color) for r in p.required] == [("chair", 1, "black"), ("table", 2, None)]
    assert compile_predicate("Images with table and chair.").evaluate({"table": 1, "chair": 1})
    for bad in ("", "images with", "images with two spaceships", "images with big red chair"):
        with pytest.raises(PredicateCompileError):
            compile_predicate(bad)


def test_extract_counts():
    labels = {"black chair": 2, "chair": 1, "table": 1}
    assert extract_value(labels, "chair") == 3
    assert extract_value(labels, "black_chair") == 2
    assert extract_value(labels, "objects") == 4


def test_unresolvable_item():
    with pytest.raises(UnresolvableItemError):
        image_match([ref("ghost")], "images with a chair", oracle())


def test_noisy_flip_rate():
    labels = {f"i{k}": {"chair": 1} for k in range(1000)}
    noisy = NoisyOracle(labels, 0.1, seed=3)
    out = image_match([ref(f"i{k}") for k in range(1000)], "images with a chair", noisy)
    flipped = sum(1 for _, v, _ in out.rows if not v)
    assert abs(flipped / 1000 - 0.1) <= 0.03
    again = image_match([ref(f"i{k}") for k in range(1000)], "images with a chair", noisy)
    assert again.rows == out.rows and out.rows[0][2] == pytest.approx(0.9)


class _Vision(BaseHTTPRequestHandler):
    def do_POST(self):
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        reply = {"verdict": body["item"]["id"] == "yes", "confidence": 0.8} if "predicate" in body else \
            {"values": {f: 3 for f in body["fields"]}}
        data = json.dumps(reply).encode()
        self.send_response(200)
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def log_message(self, *a):
        pass


def test_remote_model_protocol():
    httpd = HTTPServer(("127.0.0.1", 0), _Vision)
    threading.Thread(target=httpd.serve_forever, daemon=True).start()
    try:
        m = RemoteModel(f"http://127.0.0.1:{httpd.server_address[1]}/v")
        assert m.classify(ref("yes"), "images with a chair") == (True, 0.8)
        assert m.extract(ref("x"), ["chair"]) == {"chair": 3}
    finally:
        httpd.shutdown()
    with pytest.raises(ProviderUnavailable):
        RemoteModel("http://127.0.0.1:9/v", timeout=2).classify(ref("x"), "images with a chair")


def call(server, tool, args):
    c = MCPClient(inprocess_pipe(server), timeout=10)
    try:
        return c.call_tool(tool, args)
    finally:
        c.close()


def test_image_server_tools_and_errors():
    srv = make_image_server(oracle())
    out = ResultSet.from_json(call(srv, "image.match", {"items": ["two", "one"], "predicate": "two chairs"}))
    assert [r[1] for r in out.rows] == [True, False]
    ext = ResultSet.from_json(call(srv, "image.extract", {"items": ["blk"], "fields": ["black_chair", "table"]}))
    assert ext.rows[0][1:] == (1, 1)
    with pytest.raises(RpcCallError) as err:
        call(srv, "image.match", {"items": ["two"], "predicate": "two spaceships"})
    assert err.value.code == P.INVALID_PARAMS
    with pytest.raises(RpcCallError) as err:
        call(srv, "image.match", {"items": ["ghost"], "predicate": "a chair"})
    assert err.value.code == P.TOOL_ERROR


def test_execute_fragment_with_handle_inputs():
    store, labels = small_lake(1, 20)
    rel, img = make_relational_server(store), make_image_server(labels)
    rc, ic = MCPClient(inprocess_pipe(rel), timeout=10), MCPClient(inprocess_pipe(img), timeout=10)
    try:
        frag = QueryPlan.chain(scan(CATALOG["image"]))
        r = rc.call_tool("rel.execute", {"fragment": frag.to_json()})
        page = rc.call_tool("results.page", {"handle": r["handle"], "start": 0})
        rows = page["rows"]
        up = ic.call_tool("results.put", {"columns": page["columns"], "rows": rows})
        match = parse_expression('scan(image) | sem_match(image, "images with a chair", 0.5)', CATALOG)
        node = next(n for n, op in match.nodes if op.kind is OpKind.SEM_MATCH)
        src = next(n for n, op in match.nodes if op.kind is OpKind.SCAN)
        sub = QueryPlan(((node, match.op(node)),), ((src, node),), node)
        out = ic.call_tool("image.execute", {"fragment": sub.to_json(), "inputs": {src: up["handle"]}})
        got = ResultSet.from_json(ic.call_tool("results.page", {"handle": out["handle"]}))
        want = [r for r in store.table("image").rows if labels.truth(r[0], "images with a chair")]
        assert [tuple(r) for r in got.rows] == want
        assert out["stats"][node]["card"] == len(want)
        with pytest.raises(RpcCallError):
            ic.call_tool("image.execute", {"fragment": sub.to_json(), "inputs": {src: "image-server:999"}})
    finally:
        rc.close()
        ic.close()


def test_execute_error_names_node():
    store = five_store()
    srv = make_relational_server(store)
    p = parse_expression("scan(furniture) | filter(weight < 3)", CATALOG)
    with pytest.raises(RpcCallError) as err:
        call(srv, "rel.execute", {"fragment": p.to_json()})
    bad = next(n for n, op in p.nodes if op.kind is OpKind.FILTER)
    assert err.value.data["node"] == bad


def test_bad_delete_predicate_is_invalid_params():
    with pytest.raises(RpcCallError) as err:
        call(make_relational_server(five_store()), "rel.delete", {"table": "furniture", "predicate": {"x": 1}})
    assert err.value.code == P.INVALID_PARAMS


def vector_service(n=200, seed=0):
    rng = np.random.default_rng(seed)
    svc = VectorService()
    svc.add_dataset(VectorDataset("docs", attributes=("tag",), filterable=("tag",)))
    docs = [{"id": f"d{i}", "text": f"doc {i}", "embedding": rng.normal(size=16).tolist(),
             "metadata": {"tag": int(rng.integers(5))}} for i in range(n)]
    svc.upsert("docs", docs)
    return svc, docs


def test_sem_match_identity_vector():
    svc, docs = vector_service()
    out = sem_match(docs[17]["embedding"], svc.dataset("docs"), 3)
    assert out.rows[0][0].item == "d17" and out.rows[0][1] == pytest.approx(1.0, abs=1e-6)


def test_sem_match_single_match_filter():
    svc, docs = vector_service(50)
    svc.upsert("docs", [{"id": "lonely", "embedding": [1.0] * 16, "metadata": {"tag": 99}}])
    out = sem_match([0.5] * 16, svc.dataset("docs"), 10, Condition.eq("tag", 99))
    assert [r[0].item for r in out.rows] == ["lonely"]


def test_sem_match_equals_brute_force():
    svc, docs = vector_service()
    idx = svc.dataset("docs").require_index()
    rng = np.random.default_rng(5)
    for _ in range(20):
        q = rng.normal(size=16)
        cond = Condition.eq("tag", int(rng.integers(5)))
        got = [r[0].item for r in sem_match(q, svc.dataset("docs"), 10, cond).rows]
        assert got == [i for i, _ in idx.brute_force(q, 10, cond)]


def test_sem_match_errors():
    svc, _ = vector_service(20)
    with pytest.raises(ValueError):
        sem_match([0.0] * 16, svc.dataset("docs"), 0)
    svc.add_dataset(VectorDataset("empty"))
    with pytest.raises(UnindexedDatasetError):
        sem_match([0.0] * 16, svc.dataset("empty"), 1)


def test_vector_server_upsert_notifies_and_searches():
    svc = VectorService()
    srv = make_vector_server(svc)
    c = MCPClient(inprocess_pipe(srv), timeout=10)
    try:
        c.call_tool("vec.upsert", {"dataset": "notes", "records": [
            {"id": "a", "text": "oak chair with black legs"}, {"id": "b", "text": "glass table"}]})
        got = []
        c.subscribe("lake://notes", got.append)
        c.call_tool("vec.upsert", {"dataset": "notes", "records": [{"id": "c", "text": "walnut bookcase"}]})
        out = ResultSet.from_json(c.call_tool("vec.sem_match", {"dataset": "notes", "query": "black oak chair", "k": 1}))
        assert out.rows[0][0].item == "a"
        import time
        end = time.time() + 5
        while not got and time.time() < end:
            time.sleep(0.01)
        assert got and got[0]["change"]["count"] == 1
        with pytest.raises(RpcCallError):
            c.call_tool("vec.sem_match", {"dataset": "nowhere", "query": "x"})
    finally:
        c.close()


def test_vector_service_persists_with_scorers(tmp_path):
    from taiji.refresher import RidgeScorer
    svc, _ = vector_service(30)
    svc.scorers["docs"] = RidgeScorer(2).fit([1.0, 0.0], 1.0)
    svc.save(tmp_path)
    again = VectorService()
    again.load(tmp_path)
    assert again.dataset("docs").require_index().ids == svc.dataset("docs").require_index().ids
    assert np.allclose(again.scorers["docs"].weights, svc.scorers["docs"].weights)


def test_retrieve_runs_the_loop():
    svc = VectorService()
    svc.add_dataset(VectorDataset("notes"))
    texts = ["oak chair", "oak chair black", "glass table", "red sofa", "oak table", "black lamp"]
    svc.upsert("notes", [{"id": f"n{i}", "text": t} for i, t in enumerate(texts)])
    srv = make_vector_server(svc)
    out = call(srv, "vec.retrieve", {"dataset": "notes", "task": {"query": "oak chair", "k": 2, "threshold": 0.3}})
    assert 1 <= out["iterations"] <= 4 and len(out["trace"]) == out["iterations"]
    items = [r[0]["$ref"][1] for r in out["results"]["rows"]]
    assert items[0] in ("n0", "n1")
