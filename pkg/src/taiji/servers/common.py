"""Plumbing shared by the modality servers.

Host and servers exchange intermediate results by handle. A server keeps
every result it produces in a :class:`ResultStore`; the host pulls it in
pages (``results.page``) and pushes it to the next server in pages
(``results.put``), so no single message carries more than one page.

A *fragment* is a sub-plan whose edges may start at node ids outside the
fragment; those are the fragment's external inputs, supplied by handle.
"""

from __future__ import annotations

import itertools
import re
import threading
import time
from typing import Callable, Mapping, Optional

from ..algebra import ItemRef, Modality, Operator, QueryPlan, ResultSet, decode_value
from ..expr import resolve_column
from ..mcp.server import MCPServer, ToolContext, ToolError
from ..mcp import protocol as P

PAGE_SIZE = 256


class ResultStore:
    """Handle-addressed result sets, filled page by page."""

    def __init__(self, prefix: str):
        self.prefix = prefix
        self._ids = itertools.count(1)
        self._lock = threading.Lock()
        self._columns: dict[str, tuple[str, ...]] = {}
        self._rows: dict[str, list[tuple]] = {}
        self._provenance: dict[str, str] = {}

    def put(self, rs: ResultSet) -> str:
        h = self.open(rs.columns, rs.provenance)
        with self._lock:
            self._rows[h].extend(rs.rows)
        return h

    def open(self, columns, provenance: str = "") -> str:
        with self._lock:
            h = f"{self.prefix}:{next(self._ids)}"
            self._columns[h] = tuple(columns)
            self._rows[h] = []
            self._provenance[h] = provenance
        return h

    def append(self, handle: str, rows) -> int:
        with self._lock:
            if handle not in self._rows:
                raise KeyError(handle)
            width = len(self._columns[handle])
            for r in rows:
                if len(r) != width:
                    raise ValueError(f"row arity {len(r)} != {width}")
            self._rows[handle].extend(tuple(r) for r in rows)
            return len(self._rows[handle])

    def get(self, handle: str) -> ResultSet:
        with self._lock:
            if handle not in self._rows:
                raise KeyError(handle)
            return ResultSet(self._columns[handle], tuple(self._rows[handle]), self._provenance[handle])

    def page(self, handle: str, start: int, size: int = PAGE_SIZE) -> tuple[ResultSet, int]:
        with self._lock:
            if handle not in self._rows:
                raise KeyError(handle)
            rows = self._rows[handle]
            return ResultSet(self._columns[handle], tuple(rows[start:start + size]),
                             self._provenance[handle]), len(rows)

    def drop(self, handle: str) -> None:
        with self._lock:
            self._rows.pop(handle, None)
            self._columns.pop(handle, None)
            self._provenance.pop(handle, None)

    def __len__(self) -> int:
        return len(self._rows)


def install_result_tools(server: MCPServer, store: ResultStore) -> None:
    def put(args, _ctx):
        """Create (no handle) or extend (handle given) a stored result."""
        rows = [tuple(decode_value(v) for v in r) for r in args.get("rows", [])]
        handle = args.get("handle")
        try:
            if handle is None:
                handle = store.open(args["columns"], args.get("provenance", ""))
            total = store.append(handle, rows)
        except KeyError:
            raise ToolError(f"unknown result handle {handle!r}", P.INVALID_PARAMS)
        except ValueError as exc:
            raise ToolError(str(exc), P.INVALID_PARAMS)
        return {"handle": handle, "count": total}

    def page(args, _ctx):
        handle = args.get("handle")
        start = int(args.get("start", 0))
        size = min(int(args.get("size", PAGE_SIZE)), PAGE_SIZE)
        try:
            rs, total = store.page(handle, start, size)
        except KeyError:
            raise ToolError(f"unknown result handle {handle!r}", P.INVALID_PARAMS)
        doc = rs.to_json()
        doc["total"] = total
        doc["start"] = start
        return doc

    def drop(args, _ctx):
        store.drop(args.get("handle"))
        return {"dropped": True}

    server.add_tool("results.put", put, description="Upload one page of an intermediate result.")
    server.add_tool("results.page", page, description="Download one page of a stored result.")
    server.add_tool("results.drop", drop, description="Release a stored result.")


def fragment_order(fragment: QueryPlan, external: set[str]) -> list[str]:
    """Topological order of the fragment's own nodes, ignoring external inputs."""
    own = fragment.node_ids()
    indeg = {n: 0 for n in own}
    for u, v in fragment.edges:
        if v not in indeg:
            raise ToolError(f"edge into unknown node {v!r}", P.INVALID_PARAMS)
        if u in indeg:
            indeg[v] += 1
        elif u not in external:
            raise ToolError(f"fragment input {u!r} was not supplied", P.INVALID_PARAMS)
    ready = sorted(n for n, d in indeg.items() if d == 0)
    order = []
    while ready:
        u = ready.pop(0)
        order.append(u)
        for a, b in fragment.edges:
            if a == u:
                indeg[b] -= 1
                if indeg[b] == 0:
                    ready.append(b)
        ready.sort()
    if len(order) != len(own):
        raise ToolError("fragment contains a cycle", P.INVALID_PARAMS)
    return order


Evaluator = Callable[[str, Operator, list[ResultSet]], ResultSet]


def run_fragment(fragment: QueryPlan, inputs: Mapping[str, ResultSet], evaluate: Evaluator,
                 stats: Optional[dict] = None) -> ResultSet:
    """Evaluate ``fragment`` node by node; returns the sink's result.

    ``stats`` receives ``{node: {"card": rows out, "ms": wall ms}}``.
    """
    results: dict[str, ResultSet] = dict(inputs)
    ops = fragment.ops
    for node in fragment_order(fragment, set(inputs)):
        t0 = time.perf_counter()
        ins = [results[u] for u in fragment.inputs(node)]
        try:
            results[node] = evaluate(node, ops[node], ins)
        except ToolError as exc:
            data = dict(exc.data or {})
            data.setdefault("node", node)
            raise ToolError(exc.message, exc.code, data) from exc
        except Exception as exc:
            raise ToolError(f"{type(exc).__name__}: {exc}", P.TOOL_ERROR,
                            {"node": node, "type": type(exc).__name__}) from exc
        if stats is not None:
            stats[node] = {"card": len(results[node]), "ms": (time.perf_counter() - t0) * 1000.0,
                           "in": [len(r) for r in ins]}
    return results[fragment.sink]


def install_execute_tool(server: MCPServer, name: str, store: ResultStore, evaluate_factory) -> None:
    """``<name>``: run a fragment whose external inputs are result handles.

    ``evaluate_factory(ctx)`` returns the node evaluator for one call, so
    evaluators can reach the calling session (clarification callbacks).
    """

    def execute(args, ctx: ToolContext):
        try:
            fragment = QueryPlan.from_json(args["fragment"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ToolError(f"malformed fragment: {exc}", P.INVALID_PARAMS)
        inputs = {}
        for node, handle in (args.get("inputs") or {}).items():
            try:
                inputs[node] = store.get(handle)
            except KeyError:
                raise ToolError(f"unknown result handle {handle!r}", P.INVALID_PARAMS)
        stats: dict = {}
        rs = run_fragment(fragment, inputs, evaluate_factory(ctx), stats)
        handle = store.put(rs)
        return {"handle": handle, "columns": list(rs.columns), "count": len(rs), "stats": stats}

    server.add_tool(name, execute, description="Execute a plan fragment; inputs and output by handle.")


def item_refs_of(row: tuple, modality: Modality) -> list[ItemRef]:
    return [v for v in row if isinstance(v, ItemRef) and v.modality is modality]


def fill_placeholders(text: str, columns: tuple[str, ...], row: tuple) -> str:
    """Replace ``{column}`` markers with the row's values (SemJoin predicates)."""
    def sub(m):
        idx = resolve_column(m.group(1), columns)
        return str(row[idx])

    return re.sub(r"\{([A-Za-z_][\w.]*)\}", sub, text)


def install_catalog_tool(server: MCPServer, list_datasets: Callable[[], list]) -> None:
    """``catalog.datasets``: the DatasetRefs this server can scan."""
    server.add_tool("catalog.datasets", lambda _a, _c: {"datasets": [d.to_json() for d in list_datasets()]},
                    description="Datasets served here.")
