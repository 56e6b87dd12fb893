import json
import sys
import threading
import time

import pytest
from hypothesis import given, settings

from taiji.mcp import protocol as P
from taiji.mcp.client import CallTimeout, MCPClient, RpcCallError
from taiji.mcp.transport import HttpTransport, inprocess_pipe, serve_http_background, subprocess_pipe

from mcp_harness import messages, script, toy_server


def wait_for(pred, timeout=5.0):
    end = time.time() + timeout
    while time.time() < end:
        if pred():
            return True
        time.sleep(0.01)
    return pred()


@settings(max_examples=300, deadline=None)
@given(messages)
def test_round_trip(msg):
    assert P.decode(P.encode(msg)) == msg


def test_request_literal():
    doc = json.loads(P.encode(P.Request(1, "tools/call", {"name": "rel.filter"})))
    assert doc["jsonrpc"] == "2.0" and doc["id"] == 1


def test_encoding_is_canonical():
    a = P.encode(P.Request(1, "m", {"b": 1, "a": 2}))
    assert a == b'{"id":1,"jsonrpc":"2.0","method":"m","params":{"a":2,"b":1}}'


@pytest.mark.parametrize("raw,code", [
    ('{"jsonrpc":"1.0","id":1,"method":"x"}', P.INVALID_REQUEST),
    ('{"id":1,"method":"x"}', P.INVALID_REQUEST),
    ("{not json", P.PARSE_ERROR),
    ('{"jsonrpc":"2.0","result":1}', P.INVALID_REQUEST),
    ('{"jsonrpc":"2.0","id":true,"method":"x"}', P.INVALID_REQUEST),
    ('[1,2]', P.INVALID_REQUEST),
])
def test_decode_errors(raw, code):
    with pytest.raises(P.ProtocolError) as err:
        P.decode(raw)
    assert err.value.code == code


def test_unknown_fields_ignored():
    msg = P.decode('{"jsonrpc":"2.0","id":3,"method":"m","params":{},"extra":1}')
    assert msg == P.Request(3, "m", {})


@pytest.fixture
def client():
    c = MCPClient(inprocess_pipe(toy_server()), timeout=5)
    c.initialize()
    yield c
    c.close()


def test_call_and_errors(client):
    assert client.call_tool("add", {"a": 2, "b": 3}) == {"sum": 5}
    with pytest.raises(RpcCallError) as err:
        client.call_tool("nope")
    assert err.value.code == P.METHOD_NOT_FOUND
    with pytest.raises(RpcCallError) as err:
        client.call_tool("fail", {"why": "broken", "node": "n4"})
    assert err.value.code == P.TOOL_ERROR and "broken" in str(err.value) and err.value.data == {"node": "n4"}


def test_unknown_method(client):
    with pytest.raises(RpcCallError) as err:
        client.request("no/such")
    assert err.value.code == P.METHOD_NOT_FOUND


def test_timeout():
    c = MCPClient(inprocess_pipe(toy_server()), timeout=0.2)
    try:
        with pytest.raises(CallTimeout):
            c.call_tool("sleep", {"s": 1.0})
    finally:
        c.close()


def test_interleaved_calls_match_their_callers(client):
    results = {}

    def slow():
        results["slow"] = client.call_tool("wait")

    t = threading.Thread(target=slow)
    t.start()
    time.sleep(0.05)
    results["fast"] = client.call_tool("add", {"a": 1, "b": 1})
    client.call_tool("release")
    t.join(5)
    assert results == {"slow": {"waited": True}, "fast": {"sum": 2}}


def test_responses_are_a_permutation_of_requests(client):
    threads = [threading.Thread(target=client.call_tool, args=("add", {"a": i, "b": 1})) for i in range(20)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    sent = [m.id for d, m in client.wire_log if d == "out" and isinstance(m, P.Request)]
    got = [m.id for d, m in client.wire_log if d == "in" and isinstance(m, P.Response)]
    assert sorted(sent) == sorted(got) and len(set(sent)) == len(sent)


def test_tool_list(client):
    names = {t["name"] for t in client.list_tools()}
    assert {"add", "echo", "fail"} <= names


def test_subscription_contract():
    srv = toy_server()
    a = MCPClient(inprocess_pipe(srv), timeout=5)
    b = MCPClient(inprocess_pipe(srv), timeout=5)
    got = {"a": [], "b": []}
    try:
        srv.resource_changed("lake://furniture")          # before anyone subscribed
        a.subscribe("lake://furniture", got["a"].append)
        first = a.subscribe("lake://furniture")           # idempotent
        b.subscribe("lake://furniture", got["b"].append)
        assert len(srv.subscribers("lake://furniture")) == 2
        assert first["uri"] == "lake://furniture"
        assert srv.resource_changed("lake://furniture", {"kind": "insert"}) == 2
        assert wait_for(lambda: len(got["a"]) == 1 and len(got["b"]) == 1)
        assert got["a"][0]["uri"] == "lake://furniture" and got["a"][0]["version"] == 2
        assert b.unsubscribe("lake://furniture")
        srv.resource_changed("lake://furniture")
        assert wait_for(lambda: len(got["a"]) == 2)
        time.sleep(0.1)
        assert len(got["b"]) == 1
        with pytest.raises(RpcCallError):
            a.subscribe("lake://nowhere")
    finally:
        a.close()
        b.close()


def test_delivery_count_is_subscribers_times_changes():
    srv = toy_server()
    inboxes = [[] for _ in range(4)]
    for box in inboxes:
        srv.subscribe("lake://image", srv.open_session(box.append))
    for _ in range(7):
        srv.resource_changed("lake://image")
    assert sum(len(b) for b in inboxes) == 4 * 7


def test_closed_session_stops_delivery():
    srv = toy_server()
    box = []
    s = srv.open_session(box.append)
    srv.subscribe("lake://image", s)
    srv.close_session(s)
    assert srv.resource_changed("lake://image") == 0


def decoded(client):
    return [(d, P.encode(m)) for d, m in client.wire_log]


def test_transport_equivalence_pipe_http():
    pipe = MCPClient(inprocess_pipe(toy_server()), timeout=5)
    httpd, url = serve_http_background(toy_server())
    http = MCPClient(HttpTransport(url), timeout=5)
    try:
        a, b = script(pipe), script(http)
        assert a == b
        assert decoded(pipe) == decoded(http)
    finally:
        pipe.close()
        http.close()
        httpd.shutdown()


def test_http_notifications():
    srv = toy_server()
    httpd, url = serve_http_background(srv)
    c = MCPClient(HttpTransport(url), timeout=5)
    got = []
    try:
        c.subscribe("lake://image", got.append)
        srv.resource_changed("lake://image")
        assert wait_for(lambda: len(got) == 1)
    finally:
        c.close()
        httpd.shutdown()


SERVE_TOY = ("import sys; sys.path.insert(0, {path!r}); from mcp_harness import toy_server; "
             "from taiji.mcp.transport import serve_stdio; serve_stdio(toy_server())")


def test_subprocess_pipe_matches_in_process():
    import os
    path = os.path.dirname(__file__)
    proc = MCPClient(subprocess_pipe([sys.executable, "-c", SERVE_TOY.format(path=path)]), timeout=20)
    local = MCPClient(inprocess_pipe(toy_server()), timeout=5)
    try:
        assert script(proc, 15) == script(local, 15)
    finally:
        proc.close()
        local.close()
