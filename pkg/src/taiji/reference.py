"""Single-threaded reference interpreter.

A deliberately naive evaluator used as the oracle for the distributed
engine: nested-loop joins, predicates interpreted by walking the expression
tree against a name -> value mapping, one node at a time in topological
order. It shares data access with the engine (through :class:`World`) but
none of its evaluation code.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Any, Callable, Mapping, Optional, Sequence

from . import expr as E
from .algebra import DatasetRef, ItemRef, Modality, OpKind, QueryPlan, ResultSet, topological_order


@dataclass
class World:
    """Data access for the interpreter.

    ``scan(ref)`` returns (columns, rows); ``classify(item, text)`` returns
    (verdict, confidence); ``extract(item, fields)`` a field -> value dict;
    ``similarity(item, text)`` a cosine score.
    """

    scan: Callable[[DatasetRef], tuple[Sequence[str], Sequence[tuple]]]
    classify: Optional[Callable[[ItemRef, str], tuple[bool, float]]] = None
    extract: Optional[Callable[[ItemRef, Sequence[str]], dict]] = None
    similarity: Optional[Callable[[ItemRef, str], float]] = None


def world_from(store=None, provider=None, vectors=None) -> World:
    """World over the reference servers' data: a LakeStore, a vision
    provider and a VectorService (each optional)."""

    def scan(ref: DatasetRef):
        if ref.modality is Modality.IMAGE:
            ids = provider.items()
            width = len(ref.columns)
            return ref.columns, [(ItemRef(ref.id, i, Modality.IMAGE),) + (None,) * (width - 1) for i in ids]
        if ref.modality in (Modality.TEXT, Modality.VECTOR):
            ds = vectors.dataset(ref.id)
            idx = ds.require_index()
            cols = [f"{ds.name}.item", f"{ds.name}.text"] + [f"{ds.name}.{a}" for a in ds.attributes]
            rows = [(ItemRef(ds.name, rid, ds.modality), ds.texts.get(rid, ""))
                    + tuple(idx.metadata[i].get(a) for a in ds.attributes) for i, rid in enumerate(idx.ids)]
            return cols, rows
        t = store.table(ref.id)
        return [f"{t.name}.{c}" for c, _ in t.columns], list(t.rows)

    def similarity(item: ItemRef, text: str) -> float:
        ds = vectors.dataset(item.dataset)
        return float(ds.vector_of(item.item) @ vectors.embedder.embed(text))

    return World(scan,
                 provider.classify if provider is not None else None,
                 provider.extract if provider is not None else None,
                 similarity if vectors is not None else None)


def _lookup(name: str, row: Mapping[str, Any]) -> Any:
    if name in row:
        return row[name]
    hits = [k for k in row if k.endswith("." + name)]
    if len(hits) != 1:
        raise E.UnknownColumnError(name, tuple(row))
    return row[hits[0]]


def _num(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _cmp(op: str, a, b) -> bool:
    if a is None or b is None:
        return False
    if op == "contains":
        if not (isinstance(a, str) and isinstance(b, str)):
            raise E.PredicateTypeError("contains on non-strings")
        return a.find(b) >= 0
    if not ((_num(a) and _num(b)) or type(a) is type(b)):
        raise E.PredicateTypeError(f"{type(a).__name__} vs {type(b).__name__}")
    if op in ("==", "!="):
        return (a == b) == (op == "==")
    if isinstance(a, bool) or not isinstance(a, (int, float, str)):
        raise E.PredicateTypeError("ordering on unordered type")
    return {"<": a < b, "<=": a <= b, ">": a > b, ">=": a >= b}[op]


def eval_predicate(p: E.Expr, row: Mapping[str, Any]) -> bool:
    if isinstance(p, E.Const):
        return bool(p.value)
    if isinstance(p, E.And):
        return eval_predicate(p.left, row) and eval_predicate(p.right, row)
    if isinstance(p, E.Or):
        return eval_predicate(p.left, row) or eval_predicate(p.right, row)
    if isinstance(p, E.Not):
        return not eval_predicate(p.operand, row)
    side = lambda t: _lookup(t.name, row) if isinstance(t, E.Col) else t.value  # noqa: E731
    return _cmp(p.op, side(p.left), side(p.right))


def _refs(row: tuple, modalities) -> list[ItemRef]:
    return [v for v in row if isinstance(v, ItemRef) and v.modality in modalities]


def _fill(text: str, cols: Sequence[str], row: tuple) -> str:
    named = dict(zip(cols, row))
    return re.sub(r"\{([A-Za-z_][\w.]*)\}", lambda m: str(_lookup(m.group(1), named)), text)


def interpret(plan: QueryPlan, world: World) -> ResultSet:
    """Evaluate ``plan`` sequentially; returns the sink's result."""
    ops = plan.ops
    res: dict[str, tuple[list[str], list[tuple]]] = {}
    for node in topological_order(plan):
        op = ops[node]
        ins = [res[u] for u in plan.inputs(node)]
        k = op.kind
        if k is OpKind.SCAN:
            cols, rows = world.scan(op.dataset)
            res[node] = (list(cols), [tuple(r) for r in rows])
        elif k is OpKind.FILTER:
            cols, rows = ins[0]
            res[node] = (cols, [r for r in rows if eval_predicate(op.predicate, dict(zip(cols, r)))])
        elif k is OpKind.PROJECT:
            cols, rows = ins[0]
            picked = []
            for c in op.columns:
                if c in cols:
                    picked.append(cols.index(c))
                else:
                    hits = [i for i, x in enumerate(cols) if x.endswith("." + c)]
                    if len(hits) != 1:
                        raise E.UnknownColumnError(c, tuple(cols))
                    picked.append(hits[0])
            res[node] = ([cols[i] for i in picked], [tuple(r[i] for i in picked) for r in rows])
        elif k is OpKind.LIMIT:
            cols, rows = ins[0]
            res[node] = (cols, rows[:op.count])
        elif k is OpKind.JOIN:
            (lc, lrows), (rc, rrows) = ins
            a, b = op.keys
            try:
                _lookup(a, dict.fromkeys(lc))
                _lookup(b, dict.fromkeys(rc))
                lk, rk = a, b
            except KeyError:
                lk, rk = b, a
            out = []
            for l in lrows:
                lv = _lookup(lk, dict(zip(lc, l)))
                for r in rrows:
                    rv = _lookup(rk, dict(zip(rc, r)))
                    if lv is not None and rv is not None and lv == rv:
                        out.append(l + r)
            res[node] = (lc + rc, out)
        elif k is OpKind.SEM_MATCH:
            cols, rows = ins[0]
            if op.modality is Modality.IMAGE:
                def ok(r):
                    for it in _refs(r, (Modality.IMAGE,)):
                        v, c = world.classify(it, op.text)
                        if v and c >= op.threshold:
                            return True
                    return False
            else:
                def ok(r):
                    return any(world.similarity(it, op.text) >= op.threshold
                               for it in _refs(r, (Modality.TEXT, Modality.VECTOR)))
            res[node] = (cols, [r for r in rows if ok(r)])
        elif k is OpKind.SEM_JOIN:
            (lc, lrows), (rc, rrows) = ins
            out = []
            for l in lrows:
                text = _fill(op.text, lc, l)
                for r in rrows:
                    hit = False
                    for it in _refs(r, (Modality.IMAGE,)):
                        v, c = world.classify(it, text)
                        if v and c >= op.threshold:
                            hit = True
                            break
                    if hit:
                        out.append(l + r)
            res[node] = (lc + rc, out)
        elif k is OpKind.SEM_EXTRACT:
            cols, rows = ins[0]
            out = []
            for r in rows:
                refs = _refs(r, (Modality.IMAGE,))
                vals = world.extract(refs[0], op.fields) if refs else {}
                out.append(r + tuple(vals.get(f) for f in op.fields))
            res[node] = (cols + [f"extract.{f}" for f in op.fields], out)
        else:  # pragma: no cover
            raise ValueError(f"unknown operator {k}")
    cols, rows = res[plan.sink]
    return ResultSet(tuple(cols), tuple(rows))
