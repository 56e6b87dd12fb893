"""The host: catalog, planning, routed dispatch, assembly and logging.

``Host.execute`` takes an expression, a natural-language question or a
ready plan; it translates, samples unprofiled predicates, picks the
cheapest candidate plan, routes every node to a leaf server and runs the
plan as *fragments*. A fragment is a maximal run of nodes on one server in
which each node feeds only the next; fragments start as soon as their
inputs exist, so independent branches run concurrently. Results move by
handle: on the same server the handle is passed along, across servers the
host copies it page by page.
"""

from __future__ import annotations

import logging
import random
import threading
import time
from concurrent.futures import FIRST_COMPLETED, Future, ThreadPoolExecutor, wait
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, Optional, Sequence

from . import algebra as A
from .agents import AgentClient, translate_nl
from .algebra import OpKind, QueryPlan, ResultSet, output_columns, plan_signature, topological_order
from .language import ExpressionSyntaxError, UnknownOperatorError, parse_expression, render
from .mcp import protocol as P
from .mcp.client import CallTimeout, MCPClient, RpcCallError
from .mcp.transport import TransportClosed
from .planner import DEFAULT_SAMPLE_SIZE, CostModel, choose_plan, enumerate_candidates, predicate_chains, sample_operator
from .querylog import QueryLog, QueryLogEntry
from .routing import RoutingTable, default_routing, route
from .servers.common import PAGE_SIZE
from .servers.relational import evaluate_node

log = logging.getLogger(__name__)


class ExecutionError(RuntimeError):
    """A fragment failed; ``trace`` holds every node completed before."""

    def __init__(self, message: str, node: str = "", server: str = "", trace: Optional["ExecutionTrace"] = None,
                 code: int = P.TOOL_ERROR):
        super().__init__(message)
        self.node = node
        self.server = server
        self.trace = trace
        self.code = code


class SchemaMismatchError(ValueError):
    pass


class CatalogError(LookupError):
    pass


@dataclass
class ServerEntry:
    id: str
    address: str
    client: MCPClient
    tools: list[str] = field(default_factory=list)

    @property
    def execute_tool(self) -> str:
        names = [t for t in self.tools if t.endswith(".execute")]
        if len(names) != 1:
            raise CatalogError(f"server {self.id} advertises {len(names)} execute tools")
        return names[0]


@dataclass
class Catalog:
    datasets: dict[str, A.DatasetRef]
    servers: dict[str, ServerEntry]
    routing: RoutingTable

    def check(self) -> "Catalog":
        for ds in self.datasets.values():
            try:
                leaf = self.routing.resolve(OpKind.SCAN, ds.modality, ds.id)
            except LookupError as exc:
                raise CatalogError(f"dataset {ds.id}: {exc}") from exc
            if leaf not in self.servers:
                raise CatalogError(f"dataset {ds.id} routes to unregistered server {leaf}")
        return self

    @classmethod
    def discover(cls, servers: Mapping[str, ServerEntry], routing: Optional[RoutingTable] = None) -> "Catalog":
        """Ask every server for its tools and datasets."""
        datasets: dict[str, A.DatasetRef] = {}
        for entry in servers.values():
            entry.tools = [t["name"] for t in entry.client.list_tools()]
            if "catalog.datasets" in entry.tools:
                for doc in entry.client.call_tool("catalog.datasets")["datasets"]:
                    ds = A.DatasetRef.from_json(doc)
                    datasets.setdefault(ds.id, ds)
        return cls(datasets, dict(servers), routing or default_routing()).check()

    def close(self) -> None:
        for entry in self.servers.values():
            try:
                entry.client.close()
            except Exception:  # pragma: no cover - best effort
                pass


@dataclass
class NodeTrace:
    node: str
    server: str
    ms: float
    card_in: list[int]
    card_out: int
    start: float  # seconds since the execute call began
    end: float
    fragment: int
    loop_trace: Any = None

    def to_json(self) -> dict:
        return {"node": self.node, "server": self.server, "ms": self.ms, "in": self.card_in,
                "out": self.card_out, "start": self.start, "end": self.end, "fragment": self.fragment,
                "loop_trace": self.loop_trace}


@dataclass
class ExecutionTrace:
    nodes: dict[str, NodeTrace] = field(default_factory=dict)
    total_ms: float = 0.0
    translate_ms: float = 0.0
    plan_ms: float = 0.0
    execute_ms: float = 0.0
    expression: str = ""
    chosen: str = ""
    candidates: list[str] = field(default_factory=list)
    estimated_cost: float = 0.0
    error: str = ""
    sink: str = ""

    def to_json(self) -> dict:
        return {"nodes": {k: v.to_json() for k, v in self.nodes.items()}, "total_ms": self.total_ms,
                "translate_ms": self.translate_ms, "plan_ms": self.plan_ms, "execute_ms": self.execute_ms,
                "expression": self.expression, "chosen": self.chosen, "candidates": self.candidates,
                "estimated_cost": self.estimated_cost, "error": self.error, "sink": self.sink}


@dataclass
class Fragment:
    index: int
    server: str
    nodes: list[str]
    external: list[str]  # producing nodes outside the fragment, in first-use order

    @property
    def top(self) -> str:
        return self.nodes[-1]


def partition(plan: QueryPlan, assignment: Mapping[str, str]) -> list[Fragment]:
    """Group nodes into fragments, numbered by their first node.

    A node joins the fragment of its first input when both run on the same
    server and that input has no other consumer. Every fragment is then a
    chain whose only externally visible output is its top node. A fragment
    may consume one numbered after it (the join's right input); the
    scheduler orders them by their ``external`` dependencies.
    """
    frag_of: dict[str, int] = {}
    frags: list[Fragment] = []
    for node in topological_order(plan):
        ins = plan.inputs(node)
        if ins and assignment[ins[0]] == assignment[node] and plan.consumers(ins[0]) == [node] \
                and frags[frag_of[ins[0]]].top == ins[0]:
            f = frags[frag_of[ins[0]]]
            f.nodes.append(node)
        else:
            f = Fragment(len(frags), assignment[node], [node], [])
            frags.append(f)
        frag_of[node] = f.index
        for u in ins:
            if frag_of[u] != f.index and u not in f.external:
                f.external.append(u)
    return frags


def fragment_plan(plan: QueryPlan, frag: Fragment) -> QueryPlan:
    members = set(frag.nodes)
    ops = plan.ops
    return QueryPlan(tuple((n, ops[n]) for n in frag.nodes),
                     tuple((u, v) for u, v in plan.edges if v in members), frag.top)


def assemble(results: Mapping[str, ResultSet], plan: QueryPlan) -> ResultSet:
    """Result of the plan's sink, computing tuple-level sinks from their
    inputs when the sink itself was not shipped; checks the sink schema."""
    expected = output_columns(plan)
    ops = plan.ops

    def get(node: str) -> ResultSet:
        if node in results:
            rs = results[node]
        else:
            op = ops[node]
            if op.kind not in (OpKind.FILTER, OpKind.PROJECT, OpKind.LIMIT, OpKind.JOIN):
                raise KeyError(f"no result for node {node} ({op.kind.value})")
            rs = evaluate_node(None, op, [get(u) for u in plan.inputs(node)])
        if tuple(rs.columns) != tuple(expected[node]):
            raise SchemaMismatchError(f"node {node}: columns {list(rs.columns)} != {list(expected[node])}")
        return rs

    return get(plan.sink)


def _transport_failure(exc: BaseException) -> bool:
    return isinstance(exc, (CallTimeout, TransportClosed)) or (
        isinstance(exc, RpcCallError) and exc.code == P.TRANSPORT_ERROR)


@dataclass
class HostSettings:
    workers: int = 8
    sample_size: int = DEFAULT_SAMPLE_SIZE
    seed: int = 0
    optimize: bool = True
    call_timeout: float = 60.0


class Host:
    def __init__(self, catalog: Catalog, model: Optional[CostModel] = None, agent: Optional[AgentClient] = None,
                 settings: HostSettings = HostSettings(), query_log: Optional[QueryLog] = None,
                 clarify: Optional[Callable[[dict], Any]] = None):
        self.catalog = catalog
        self.model = model or CostModel()
        self.agent = agent
        self.settings = settings
        self.log = query_log if query_log is not None else QueryLog()
        self.clarify = clarify or (lambda _params: "proceed")
        self._pool = ThreadPoolExecutor(max_workers=max(1, settings.workers), thread_name_prefix="taiji-host")
        self._cache_lock = threading.Lock()
        self._cards: dict[str, tuple[float, int]] = {}

    # -- clients
    def answer_clarify(self, params: Any) -> Any:
        """Handler for the servers' ``host/clarify`` callback."""
        return self.clarify(params)

    def _call(self, server: str, tool: str, args: dict) -> Any:
        client = self.catalog.servers[server].client
        try:
            return client.call_tool(tool, args, timeout=self.settings.call_timeout)
        except Exception as exc:
            if not _transport_failure(exc):
                raise
            log.warning("%s %s: %s; retrying once", server, tool, exc)
            return client.call_tool(tool, args, timeout=self.settings.call_timeout)

    def fetch(self, server: str, handle: str) -> ResultSet:
        rows: list[tuple] = []
        start = 0
        while True:
            doc = self._call(server, "results.page", {"handle": handle, "start": start, "size": PAGE_SIZE})
            page = ResultSet.from_json(doc)
            rows.extend(page.rows)
            start += len(page)
            if start >= doc["total"] or not page.rows:
                return ResultSet(page.columns, tuple(rows), page.provenance)

    def upload(self, server: str, rs: ResultSet) -> str:
        doc = rs.to_json()
        first = doc["rows"][:PAGE_SIZE]
        handle = self._call(server, "results.put", {"columns": doc["columns"], "rows": first,
                                                    "provenance": rs.provenance})["handle"]
        for i in range(PAGE_SIZE, len(doc["rows"]), PAGE_SIZE):
            self._call(server, "results.put", {"handle": handle, "rows": doc["rows"][i:i + PAGE_SIZE]})
        return handle

    def transfer(self, src: str, handle: str, dst: str) -> str:
        """Copy a stored result between servers one page at a time."""
        start, dst_handle = 0, None
        while True:
            doc = self._call(src, "results.page", {"handle": handle, "start": start, "size": PAGE_SIZE})
            if dst_handle is None:
                dst_handle = self._call(dst, "results.put", {"columns": doc["columns"], "rows": doc["rows"],
                                                             "provenance": doc.get("provenance", "")})["handle"]
            elif doc["rows"]:
                self._call(dst, "results.put", {"handle": dst_handle, "rows": doc["rows"]})
            start += len(doc["rows"])
            if start >= doc["total"] or not doc["rows"]:
                return dst_handle

    # -- plan execution
    def run_plan(self, plan: QueryPlan, trace: Optional[ExecutionTrace] = None,
                 keep: bool = False) -> ResultSet:
        """Execute a (chosen) plan across the servers and return its sink.

        Fail-fast: the first fragment error stops scheduling; fragments
        already running finish and are traced before the error is raised.
        """
        trace = trace if trace is not None else ExecutionTrace()
        trace.sink = plan.sink
        assignment = route(plan, self.catalog.routing)
        for server in set(assignment.values()):
            if server not in self.catalog.servers:
                node = next(n for n, s in assignment.items() if s == server)
                raise ExecutionError(f"node {node} routes to unregistered server {server}", node, server, trace)
        frags = partition(plan, assignment)
        producer = {f.top: f for f in frags}
        deps = {f.index: {producer[u].index for u in f.external} for f in frags}
        handles: dict[int, str] = {}
        copies: dict[tuple[int, str], str] = {}
        t0 = time.perf_counter()
        lock = threading.Lock()

        def run(f: Fragment) -> tuple[str, dict, float, float]:
            start = time.perf_counter() - t0
            inputs = {}
            for u in f.external:
                src = producer[u]
                if src.server == f.server:
                    inputs[u] = handles[src.index]
                else:
                    key = (src.index, f.server)
                    with lock:
                        have = copies.get(key)
                    if have is None:
                        have = self.transfer(src.server, handles[src.index], f.server)
                        with lock:
                            copies[key] = have
                    inputs[u] = have
            out = self._call(f.server, self.catalog.servers[f.server].execute_tool,
                             {"fragment": fragment_plan(plan, f).to_json(), "inputs": inputs})
            return out["handle"], out.get("stats", {}), start, time.perf_counter() - t0

        pending = {f.index: f for f in frags}
        running: dict[Future, Fragment] = {}
        failure: Optional[tuple[Fragment, BaseException]] = None
        while pending or running:
            if failure is None:
                for idx in sorted(pending):
                    if deps[idx] <= handles.keys():
                        f = pending.pop(idx)
                        running[self._pool.submit(run, f)] = f
            if not running:
                break
            done, _ = wait(list(running), return_when=FIRST_COMPLETED)
            for fut in done:
                f = running.pop(fut)
                try:
                    handle, stats, start, end = fut.result()
                except BaseException as exc:  # noqa: BLE001 - reported below
                    if failure is None:
                        failure = (f, exc)
                    continue
                handles[f.index] = handle
                for node in f.nodes:
                    st = stats.get(node, {})
                    trace.nodes[node] = NodeTrace(node, f.server, float(st.get("ms", 0.0)),
                                                  list(st.get("in", [])), int(st.get("card", 0)),
                                                  start, end, f.index, st.get("loop"))
        try:
            if failure is not None:
                f, exc = failure
                data = getattr(exc, "data", None)
                node = data.get("node") if isinstance(data, dict) and data.get("node") in f.nodes else f.top
                code = getattr(exc, "code", P.TRANSPORT_ERROR)
                raise ExecutionError(f"node {node} ({plan.op(node).kind.value}) on {f.server} failed: {exc}",
                                     node, f.server, trace, code) from exc
            sink_frag = producer[plan.sink]
            rs = self.fetch(sink_frag.server, handles[sink_frag.index])
            return assemble({plan.sink: rs}, plan)
        finally:
            if not keep:
                servers = {f.index: f.server for f in frags}
                self._release([(servers[i], h) for i, h in handles.items()]
                              + [(s, h) for (_, s), h in copies.items()])

    def _release(self, drops: Sequence[tuple[str, str]]) -> None:
        for server, handle in drops:
            try:
                self.catalog.servers[server].client.call_tool("results.drop", {"handle": handle}, timeout=5)
            except Exception:  # best effort; the server may be gone
                pass

    # -- planning
    def _sub_plan(self, plan: QueryPlan, node: str) -> QueryPlan:
        keep, stack = set(), [node]
        while stack:
            n = stack.pop()
            if n not in keep:
                keep.add(n)
                stack.extend(plan.inputs(n))
        return QueryPlan(tuple((n, op) for n, op in plan.nodes if n in keep),
                         tuple((u, v) for u, v in plan.edges if u in keep and v in keep), node)

    def base_cardinalities(self, plan: QueryPlan) -> dict[str, float]:
        out = {}
        for node, op in plan.nodes:
            if op.kind is not OpKind.SCAN or op.dataset.id in out:
                continue
            key = op.dataset.id
            with self._cache_lock:
                hit = self._cards.get(key)
            if hit is not None and time.time() - hit[0] <= self.model.ttl_seconds:
                out[key] = float(hit[1])
                continue
            n = len(self.run_plan(QueryPlan(((node, op),), (), node)))
            with self._cache_lock:
                self._cards[key] = (time.time(), n)
            out[key] = float(n)
        return out

    def sample(self, plan: QueryPlan) -> int:
        """Profile every predicate the cost model has no fresh profile for.

        For each predicate chain, the sub-plan below it is executed once, a
        seeded sample of its output is uploaded to each predicate's server,
        and the predicate is run over it alone. Returns profiles written.
        """
        written = 0
        ops = plan.ops
        assignment = route(plan, self.catalog.routing)
        for chain in predicate_chains(plan):
            todo = [n for n in chain if self.model.needs_sampling(ops[n].signature())]
            if not todo:
                continue
            base = plan.inputs(chain[0])[0]
            rows = self.run_plan(self._sub_plan(plan, base))
            if not len(rows):
                continue
            rng = random.Random(f"{self.settings.seed}|{plan_signature(self._sub_plan(plan, base))}")
            k = min(self.settings.sample_size, len(rows))
            sample = ResultSet(rows.columns, tuple(rng.sample(list(rows.rows), k)), rows.provenance)
            for node in todo:
                server = assignment[node]

                def executor(op, tuples, server=server, node=node):
                    handle = self.upload(server, sample)
                    frag = QueryPlan(((node, op),), (("input", node),), node)
                    out = self._call(server, self.catalog.servers[server].execute_tool,
                                     {"fragment": frag.to_json(), "inputs": {"input": handle}})
                    self._release([(server, handle), (server, out["handle"])])
                    return int(out["count"])

                self.model.put(sample_operator(ops[node], sample.rows, executor))
                written += 1
        return written

    def plan(self, plan: QueryPlan, trace: ExecutionTrace, optimize: bool) -> QueryPlan:
        A.check_plan(plan)
        if not optimize:
            trace.chosen = plan_signature(plan)
            trace.candidates = [trace.chosen]
            return plan
        self.sample(plan)
        cards = self.base_cardinalities(plan)
        cands = enumerate_candidates(plan, self.model)
        chosen, est = choose_plan(plan, self.model, cards, cands)
        trace.candidates = [plan_signature(c) for c in cands]
        trace.chosen = plan_signature(chosen)
        trace.estimated_cost = est.total_latency
        return chosen

    def translate(self, query: str, mode: str = "auto") -> QueryPlan:
        if mode not in ("auto", "expression", "nl"):
            raise ValueError(f"unknown query mode {mode!r}")
        if mode != "nl":
            try:
                return parse_expression(query, self.catalog.datasets)
            except (ExpressionSyntaxError, UnknownOperatorError):
                # prose fails to parse either way; hand it to the agent in auto mode
                if mode == "expression" or self.agent is None:
                    raise
        if self.agent is None:
            raise ValueError("natural-language queries need an agent")
        return translate_nl(query, self.agent, self.catalog.datasets)

    def execute(self, query: str | QueryPlan, mode: str = "auto",
                optimize: Optional[bool] = None) -> tuple[ResultSet, ExecutionTrace]:
        trace = ExecutionTrace()
        t0 = time.perf_counter()
        text = query if isinstance(query, str) else ""
        plan: Optional[QueryPlan] = None
        outcome, err = "error", ""
        try:
            if isinstance(query, QueryPlan):
                plan = query
            else:
                plan = self.translate(query, mode)
                trace.translate_ms = (time.perf_counter() - t0) * 1000.0
            t1 = time.perf_counter()
            plan = self.plan(plan, trace, self.settings.optimize if optimize is None else optimize)
            trace.plan_ms = (time.perf_counter() - t1) * 1000.0
            trace.expression = render(plan)
            t2 = time.perf_counter()
            rs = self.run_plan(plan, trace)
            trace.execute_ms = (time.perf_counter() - t2) * 1000.0
            outcome = "ok"
            return rs, trace
        except ExecutionError as exc:
            err = str(exc)
            exc.trace = trace
            raise
        except Exception as exc:
            err = f"{type(exc).__name__}: {exc}"
            raise
        finally:
            trace.total_ms = (time.perf_counter() - t0) * 1000.0
            trace.error = err
            sig = ""
            if plan is not None:
                try:
                    sig = plan_signature(plan)
                except Exception:
                    sig = ""
            self.log.append(QueryLogEntry(time.time(), text, sig, outcome, trace.total_ms,
                                          plan.to_json() if plan is not None else None, err))

    def close(self) -> None:
        self._pool.shutdown(wait=True)
        self.catalog.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
