import json
import random
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from taiji.agents import AgentUnreachable, RemoteAgent, RuleStub, UntranslatableError, translate_nl
from taiji.algebra import DatasetRef, Modality, OpKind, QueryPlan, plan_signature, scan, sem_match
from taiji.language import (ArityError, ExpressionSyntaxError, UnknownDatasetError, UnknownOperatorError,
                            parse_expression, render)
from taiji.routing import RoutingTable, UnroutableError, default_routing, route

from plans import CATALOG, random_expression


def kinds(plan):
    return [op.kind for _, op in plan.nodes]


def test_four_stage_chain():
    p = parse_expression('scan(furniture) | filter(category == "chairs") | '
                         'sem_match(image, "two chairs", 0.5) | limit(10)', CATALOG)
    assert len(p.nodes) == 4
    assert sorted(kinds(p)) == sorted([OpKind.SCAN, OpKind.FILTER, OpKind.SEM_MATCH, OpKind.LIMIT])
    assert p.op(p.sink).kind is OpKind.LIMIT and p.op(p.sink).count == 10


def test_unknown_dataset_named():
    with pytest.raises(UnknownDatasetError, match="nosuch"):
        parse_expression("scan(nosuch)", CATALOG)


def test_nested_scan_join():
    p = parse_expression("scan(furniture) | join(scan(image), furniture.id == image.fid)", CATALOG)
    assert len(p.nodes) == 3
    assert len(p.inputs(p.sink)) == 2 and p.op(p.sink).keys == ("furniture.id", "image.fid")


def test_syntax_error_carries_offset():
    with pytest.raises(ExpressionSyntaxError) as err:
        parse_expression("scan(furniture) | filter(price <)", CATALOG)
    assert err.value.offset == len("scan(furniture) | filter(price <")


def test_unknown_operator_and_arity():
    with pytest.raises(UnknownOperatorError):
        parse_expression("scan(furniture) | frobnicate(1)", CATALOG)
    with pytest.raises(ArityError):
        parse_expression("limit(3)", CATALOG)
    with pytest.raises(ArityError):
        parse_expression("scan(furniture) | scan(image)", CATALOG)


def test_render_round_trip_simple():
    text = 'scan(furniture) | filter(price < 100 and not title contains "set") | limit(3)'
    p = parse_expression(text, CATALOG)
    assert plan_signature(parse_expression(render(p), CATALOG)) == plan_signature(p)


@settings(max_examples=80, deadline=None)
@given(st.integers(0, 100_000))
def test_render_round_trip(seed):
    p = parse_expression(random_expression(random.Random(seed)), CATALOG)
    assert plan_signature(parse_expression(render(p), CATALOG)) == plan_signature(p)


def sem_texts(plan):
    return [op.text for _, op in plan.nodes if op.kind is OpKind.SEM_MATCH]


def test_rule_stub_workload_questions():
    stub = RuleStub()
    q1 = translate_nl("Find a set of two chairs", stub, CATALOG)
    assert sem_texts(q1) == ["images with two chairs"]
    q2 = translate_nl("Find a black leather chair", stub, CATALOG)
    assert sem_texts(q2) == ["images with a black chair"]
    q3 = translate_nl("Find a set of wood table and chair", stub, CATALOG)
    assert sem_texts(q3) == ["images with table and chair"]


def test_rule_stub_is_pure():
    a = translate_nl("Find a black leather chair", RuleStub(), CATALOG)
    b = translate_nl("Find a black leather chair", RuleStub(), CATALOG)
    assert a == b


def test_empty_query_is_untranslatable():
    with pytest.raises(UntranslatableError):
        translate_nl("", RuleStub(), CATALOG)


class Scripted:
    def __init__(self, outputs):
        self.outputs = list(outputs)
        self.repairs = []

    def translate(self, query, catalog, repair=None):
        self.repairs.append(repair)
        return self.outputs.pop(0)


def test_one_repair_round_trip():
    agent = Scripted(["scan(furniture | limit(1)", "scan(furniture) | limit(1)"])
    plan = translate_nl("anything", agent, CATALOG)
    assert plan.op(plan.sink).count == 1
    assert agent.repairs[0] is None and "byte" in agent.repairs[1]


def test_repair_bounded_at_one():
    agent = Scripted(["bad(", "worse(", "scan(furniture)"])
    with pytest.raises(UntranslatableError):
        translate_nl("anything", agent, CATALOG)
    assert len(agent.outputs) == 1


class _Chat(BaseHTTPRequestHandler):
    seen = []

    def do_POST(self):
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        _Chat.seen.append((body, self.headers.get("Authorization")))
        reply = {"choices": [{"message": {"content": "```\nscan(furniture) | limit(2)\n```"}}]}
        data = json.dumps(reply).encode()
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def log_message(self, *args):
        pass


def test_remote_agent_speaks_chat_completion():
    httpd = HTTPServer(("127.0.0.1", 0), _Chat)
    threading.Thread(target=httpd.serve_forever, daemon=True).start()
    try:
        agent = RemoteAgent(f"http://127.0.0.1:{httpd.server_address[1]}/v1/chat", "k3y", "m")
        plan = translate_nl("two rows of furniture", agent, CATALOG)
        assert plan.op(plan.sink).count == 2
        body, auth = _Chat.seen[-1]
        assert auth == "Bearer k3y" and body["model"] == "m"
        prompt = body["messages"][0]["content"]
        assert "furniture" in prompt and "sem_match" in prompt and "two rows of furniture" in prompt
    finally:
        httpd.shutdown()


def test_remote_agent_unreachable():
    with pytest.raises(AgentUnreachable):
        translate_nl("x", RemoteAgent("http://127.0.0.1:9/none", timeout=2), CATALOG)


def test_route_relational_filter_and_image_match():
    p = parse_expression('scan(furniture) | filter(price < 3) | join(scan(image), furniture.id == image.fid)'
                         ' | sem_match(image, "a chair", 0.5)', CATALOG)
    r = route(p, default_routing())
    for node, op in p.nodes:
        if op.kind in (OpKind.FILTER, OpKind.JOIN, OpKind.SCAN):
            assert r[node] == "rel-server"
        if op.kind is OpKind.SEM_MATCH:
            assert r[node] == "image-server"


def test_route_never_picks_an_intermediate():
    table = default_routing()
    for seed in range(30):
        p = parse_expression(random_expression(random.Random(seed)), CATALOG)
        assert all(table.is_leaf(s) for s in route(p, table).values())


def test_unroutable_modality():
    table = RoutingTable(entries={(OpKind.SCAN, Modality.RELATIONAL): "rel-server"},
                         capabilities={"rel-server": {(OpKind.SCAN, Modality.RELATIONAL)}})
    p = QueryPlan.chain(scan(CATALOG["furniture"]), sem_match(Modality.IMAGE, "a chair"))
    with pytest.raises(UnroutableError) as err:
        route(p, table)
    assert err.value.node == "n1"


def test_hierarchy_must_be_a_tree():
    with pytest.raises(ValueError):
        RoutingTable(hierarchy={"a": ["b"], "b": ["a"]})
    with pytest.raises(ValueError):
        RoutingTable(hierarchy={"a": ["c"], "b": ["c"]})


def test_semistructured_delegates_to_relational_engine():
    cat = dict(CATALOG, events=DatasetRef("events", Modality.SEMI_STRUCTURED, "lake://events", (("k", "int"),)))
    p = parse_expression("scan(events) | filter(k > 1)", cat)
    assert set(route(p, default_routing()).values()) == {"rel-server"}
