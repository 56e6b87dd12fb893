"""Relational engine and its MCP server.

Evaluates Scan, Filter, Project, Limit and Join over a :class:`LakeStore`.
Join is an inner equi-join (hash join, probe side = left input, output in
left-then-right order, matching a nested loop).
"""

from __future__ import annotations

import logging
from typing import Mapping, Optional

from .. import expr as E
from ..algebra import (ItemRef, Modality, OpKind, Operator, QueryPlan, RELATIONAL_KINDS,
                       ResultSet, decode_value, encode_value)
from ..mcp import protocol as P
from ..mcp.server import MCPServer, ToolError
from .common import (ResultStore, install_catalog_tool, install_execute_tool, install_result_tools,
                     run_fragment)
from .storage import LakeStore, Table, UnknownTableError

log = logging.getLogger(__name__)


class UnsupportedOperatorError(ValueError):
    pass


def _join_indices(keys: tuple[str, str], left: tuple[str, ...], right: tuple[str, ...]) -> tuple[int, int]:
    a, b = keys
    try:
        return E.resolve_column(a, left), E.resolve_column(b, right)
    except KeyError:
        pass
    # Written the other way round: ``image.fid == furniture.id``.
    try:
        return E.resolve_column(b, left), E.resolve_column(a, right)
    except KeyError:
        raise E.UnknownColumnError(f"{a} / {b}", left + right) from None


def _hashable(v):
    if isinstance(v, float) and v.is_integer():
        return int(v)
    return v


def scan_table(store: LakeStore, op: Operator) -> ResultSet:
    name = op.dataset.id
    table, rows = store.snapshot(name)
    cols = tuple(f"{name}.{c}" for c in table.column_names)
    return ResultSet(cols, rows, provenance=f"lake://{name}")


def evaluate_node(store: LakeStore, op: Operator, ins: list[ResultSet]) -> ResultSet:
    k = op.kind
    if k is OpKind.SCAN:
        return scan_table(store, op)
    if k is OpKind.FILTER:
        src = ins[0]
        test = E.compile_predicate(op.predicate, src.columns)
        return ResultSet(src.columns, tuple(r for r in src.rows if test(r)), src.provenance)
    if k is OpKind.PROJECT:
        src = ins[0]
        idx = [E.resolve_column(c, src.columns) for c in op.columns]
        return ResultSet(tuple(src.columns[i] for i in idx),
                         tuple(tuple(r[i] for i in idx) for r in src.rows), src.provenance)
    if k is OpKind.LIMIT:
        src = ins[0]
        return ResultSet(src.columns, src.rows[:op.count], src.provenance)
    if k is OpKind.JOIN:
        left, right = ins
        li, ri = _join_indices(op.keys, left.columns, right.columns)
        buckets: dict = {}
        for r in right.rows:
            key = r[ri]
            if key is not None:
                buckets.setdefault(_hashable(key), []).append(r)
        out = []
        for l in left.rows:
            key = l[li]
            if key is None:
                continue
            for r in buckets.get(_hashable(key), ()):
                out.append(l + r)
        return ResultSet(left.columns + right.columns, tuple(out))
    raise UnsupportedOperatorError(f"relational engine cannot evaluate {k.value}")


def rel_execute(fragment: QueryPlan, store: LakeStore, inputs: Optional[Mapping[str, ResultSet]] = None,
                stats: Optional[dict] = None) -> ResultSet:
    """Evaluate a relational fragment; ``stats`` collects per-node cardinalities."""
    for node, op in fragment.nodes:
        if op.kind not in RELATIONAL_KINDS:
            raise UnsupportedOperatorError(f"node {node}: {op.kind.value} is not relational")
    return run_fragment(fragment, inputs or {}, lambda _n, op, ins: evaluate_node(store, op, ins), stats)


def _decode_row(table: Table, values: list) -> tuple:
    out = []
    for v, (col, typ) in zip(values, table.columns):
        v = decode_value(v)
        if typ == "item-ref" and isinstance(v, str):
            ref = table.refs[col]
            v = ItemRef(ref["dataset"], v, Modality.parse(ref["modality"]))
        if typ == "float" and isinstance(v, int) and not isinstance(v, bool):
            v = float(v)
        out.append(v)
    return tuple(out)


def make_relational_server(store: LakeStore, server_id: str = "rel-server") -> MCPServer:
    server = MCPServer(server_id, "relational engine over CSV / JSON-lines tables")
    results = ResultStore(server_id)
    install_result_tools(server, results)

    def evaluator(_ctx):
        def run(node, op, ins):
            if op.kind not in RELATIONAL_KINDS:
                raise ToolError(f"{op.kind.value} is not served here", P.INVALID_PARAMS, {"node": node})
            try:
                return evaluate_node(store, op, ins)
            except UnknownTableError as exc:
                raise ToolError(str(exc), P.TOOL_ERROR, {"node": node, "type": "UnknownTable"})
        return run

    install_execute_tool(server, "rel.execute", results, evaluator)

    def insert(args, _ctx):
        table = store.table(args["table"])
        rows = [_decode_row(table, r) for r in args.get("rows", [])]
        try:
            n = store.insert(table.name, rows)
        except ValueError as exc:
            raise ToolError(str(exc), P.INVALID_PARAMS)
        return {"inserted": n}

    def delete(args, _ctx):
        table = store.table(args["table"])
        try:
            pred = E.from_json(args["predicate"])
            test = E.compile_predicate(pred, table.column_names)
        except (ValueError, KeyError, TypeError) as exc:
            raise ToolError(f"bad predicate: {exc}", P.INVALID_PARAMS)
        return {"deleted": store.delete(table.name, lambda r: not test(r))}

    def describe(_args, _ctx):
        out = []
        for name in store.names():
            t = store.table(name)
            out.append({"name": name, "modality": t.modality.value, "columns": [list(c) for c in t.columns],
                        "rows": len(t.rows), "refs": t.refs})
        return {"tables": out}

    install_catalog_tool(server, lambda: [store.table(n).dataset_ref() for n in store.names()])
    server.add_tool("rel.insert", insert, description="Append rows to a table.", exclusive=True)
    server.add_tool("rel.delete", delete, description="Delete rows matching a predicate.", exclusive=True)
    server.add_tool("rel.describe", describe, description="List tables and schemas.")
    for name in store.names():
        server.add_resource(f"lake://{name}", name)

    def changed(name, change):
        doc = dict(change)
        doc["rows"] = [[encode_value(v) for v in r] for r in change.get("rows", ())]
        server.resource_changed(f"lake://{name}", doc)

    store.listeners.append(changed)
    return server


__all__ = ["rel_execute", "evaluate_node", "make_relational_server", "UnsupportedOperatorError"]
