"""Semantic operator hierarchy, query-plan DAGs and result sets.

Everything here is an immutable value. Plans are validated structurally by
:func:`validate_plan`; execution order and canonical signatures are derived
from the DAG alone, so two plans that differ only in node ids are the same
plan.
"""

from __future__ import annotations

import enum
import heapq
import json
from dataclasses import dataclass, field, replace
from typing import Any, Iterable, Iterator, Optional

from . import expr as E


class Modality(str, enum.Enum):
    RELATIONAL = "Relational"
    SEMI_STRUCTURED = "SemiStructured"
    TEXT = "Text"
    IMAGE = "Image"
    VECTOR = "Vector"

    @classmethod
    def parse(cls, text: str) -> "Modality":
        key = text.strip().lower().replace("-", "").replace("_", "")
        for m in cls:
            if m.value.lower() == key:
                return m
        aliases = {"rel": cls.RELATIONAL, "table": cls.RELATIONAL, "json": cls.SEMI_STRUCTURED,
                   "semi": cls.SEMI_STRUCTURED, "img": cls.IMAGE, "vec": cls.VECTOR}
        if key in aliases:
            return aliases[key]
        raise ValueError(f"unknown modality {text!r}")

    @property
    def token(self) -> str:
        """Lower-case spelling used in the expression language."""
        return {
            Modality.RELATIONAL: "relational",
            Modality.SEMI_STRUCTURED: "semistructured",
            Modality.TEXT: "text",
            Modality.IMAGE: "image",
            Modality.VECTOR: "vector",
        }[self]


@dataclass(frozen=True)
class DatasetRef:
    id: str
    modality: Modality
    uri: str
    schema: tuple[tuple[str, str], ...] = ()

    def __post_init__(self):
        if not self.uri:
            raise ValueError(f"dataset {self.id!r} has an empty uri")

    @property
    def columns(self) -> tuple[str, ...]:
        """Qualified column names produced by scanning this dataset.

        Item collections (text, vector, image) lead with an ``item`` column
        holding the item reference; their schema lists metadata columns.
        """
        cols = tuple(f"{self.id}.{name}" for name, _ in self.schema)
        if self.modality in ITEM_MODALITIES and f"{self.id}.item" not in cols:
            cols = (f"{self.id}.item",) + cols
        return cols

    def to_json(self) -> dict:
        return {"id": self.id, "modality": self.modality.value, "uri": self.uri,
                "schema": [list(c) for c in self.schema]}

    @classmethod
    def from_json(cls, doc: dict) -> "DatasetRef":
        return cls(doc["id"], Modality(doc["modality"]), doc["uri"],
                   tuple((c[0], c[1]) for c in doc.get("schema", ())))


@dataclass(frozen=True, order=True)
class ItemRef:
    """Reference to one item (image, document, vector) of a dataset."""

    dataset: str
    item: str
    modality: Modality = Modality.IMAGE

    def __str__(self) -> str:
        return f"{self.dataset}/{self.item}"


ITEM_MODALITIES = frozenset({Modality.TEXT, Modality.VECTOR, Modality.IMAGE})


class OpKind(str, enum.Enum):
    SCAN = "Scan"
    FILTER = "Filter"
    PROJECT = "Project"
    LIMIT = "Limit"
    JOIN = "Join"
    SEM_MATCH = "SemMatch"
    SEM_JOIN = "SemJoin"
    SEM_EXTRACT = "SemExtract"


ARITY = {
    OpKind.SCAN: 0,
    OpKind.FILTER: 1,
    OpKind.PROJECT: 1,
    OpKind.LIMIT: 1,
    OpKind.JOIN: 2,
    OpKind.SEM_MATCH: 1,
    OpKind.SEM_JOIN: 2,
    OpKind.SEM_EXTRACT: 1,
}

RELATIONAL_KINDS = frozenset({OpKind.SCAN, OpKind.FILTER, OpKind.PROJECT, OpKind.LIMIT, OpKind.JOIN})
SEMANTIC_KINDS = frozenset({OpKind.SEM_MATCH, OpKind.SEM_JOIN, OpKind.SEM_EXTRACT})
# Unary operators that only drop tuples and therefore commute with each other.
PREDICATE_KINDS = frozenset({OpKind.FILTER, OpKind.SEM_MATCH})


@dataclass(frozen=True)
class Operator:
    """One node's operation. Only the fields relevant to ``kind`` are set."""

    kind: OpKind
    dataset: Optional[DatasetRef] = None
    predicate: Optional[E.Expr] = None
    columns: tuple[str, ...] = ()
    count: Optional[int] = None
    keys: Optional[tuple[str, str]] = None
    modality: Optional[Modality] = None
    text: Optional[str] = None
    threshold: Optional[float] = None
    fields: tuple[str, ...] = ()

    @property
    def arity(self) -> int:
        return ARITY[self.kind]

    def param_problems(self) -> list[str]:
        k = self.kind
        out = []
        if k is OpKind.SCAN and self.dataset is None:
            out.append("Scan without dataset")
        if k is OpKind.FILTER and self.predicate is None:
            out.append("Filter without predicate")
        if k is OpKind.PROJECT and not self.columns:
            out.append("Project without columns")
        if k is OpKind.LIMIT and (self.count is None or self.count < 0):
            out.append("Limit count must be >= 0")
        if k is OpKind.JOIN and (self.keys is None or len(self.keys) != 2):
            out.append("Join needs an equality key pair")
        if k in SEMANTIC_KINDS:
            if self.modality is None:
                out.append(f"{k.value} without modality")
            if k is not OpKind.SEM_EXTRACT:
                if not self.text:
                    out.append(f"{k.value} without predicate text")
                if self.threshold is None or not 0.0 <= self.threshold <= 1.0:
                    out.append(f"{k.value} threshold must lie in [0, 1]")
            elif not self.fields:
                out.append("SemExtract without fields")
        return out

    def signature(self) -> str:
        """Canonical rendering of the operator, independent of its inputs."""
        k = self.kind
        if k is OpKind.SCAN:
            return f"scan({self.dataset.id})"
        if k is OpKind.FILTER:
            return f"filter({self.predicate.render()})"
        if k is OpKind.PROJECT:
            return f"project({', '.join(self.columns)})"
        if k is OpKind.LIMIT:
            return f"limit({self.count})"
        if k is OpKind.JOIN:
            return f"join({self.keys[0]} == {self.keys[1]})"
        text = json.dumps(self.text, ensure_ascii=False)
        if k is OpKind.SEM_MATCH:
            return f"sem_match({self.modality.token}, {text}, {self.threshold!r})"
        if k is OpKind.SEM_JOIN:
            return f"sem_join({self.modality.token}, {text}, {self.threshold!r})"
        return f"sem_extract({self.modality.token}, {', '.join(self.fields)})"

    def to_json(self) -> dict:
        doc: dict[str, Any] = {"kind": self.kind.value}
        if self.dataset is not None:
            doc["dataset"] = self.dataset.to_json()
        if self.predicate is not None:
            doc["predicate"] = E.to_json(self.predicate)
        if self.columns:
            doc["columns"] = list(self.columns)
        if self.count is not None:
            doc["count"] = self.count
        if self.keys is not None:
            doc["keys"] = list(self.keys)
        if self.modality is not None:
            doc["modality"] = self.modality.value
        if self.text is not None:
            doc["text"] = self.text
        if self.threshold is not None:
            doc["threshold"] = self.threshold
        if self.fields:
            doc["fields"] = list(self.fields)
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> "Operator":
        return cls(
            kind=OpKind(doc["kind"]),
            dataset=DatasetRef.from_json(doc["dataset"]) if "dataset" in doc else None,
            predicate=E.from_json(doc["predicate"]) if "predicate" in doc else None,
            columns=tuple(doc.get("columns", ())),
            count=doc.get("count"),
            keys=tuple(doc["keys"]) if "keys" in doc else None,
            modality=Modality(doc["modality"]) if "modality" in doc else None,
            text=doc.get("text"),
            threshold=doc.get("threshold"),
            fields=tuple(doc.get("fields", ())),
        )


# Convenience constructors, mostly for tests and the parser.
def scan(ds: DatasetRef) -> Operator:
    return Operator(OpKind.SCAN, dataset=ds)


def filter_(pred: E.Expr) -> Operator:
    return Operator(OpKind.FILTER, predicate=pred)


def project(*cols: str) -> Operator:
    return Operator(OpKind.PROJECT, columns=tuple(cols))


def limit(n: int) -> Operator:
    return Operator(OpKind.LIMIT, count=n)


def join(left_key: str, right_key: str) -> Operator:
    return Operator(OpKind.JOIN, keys=(left_key, right_key))


def sem_match(modality: Modality, text: str, threshold: float = 0.5) -> Operator:
    return Operator(OpKind.SEM_MATCH, modality=modality, text=text, threshold=threshold)


def sem_join(modality: Modality, text: str, threshold: float = 0.5) -> Operator:
    return Operator(OpKind.SEM_JOIN, modality=modality, text=text, threshold=threshold)


def sem_extract(modality: Modality, *fields: str) -> Operator:
    return Operator(OpKind.SEM_EXTRACT, modality=modality, fields=tuple(fields))


class InvalidPlanError(ValueError):
    def __init__(self, violations: list[str]):
        super().__init__("; ".join(violations))
        self.violations = violations


@dataclass(frozen=True)
class QueryPlan:
    nodes: tuple[tuple[str, Operator], ...]
    edges: tuple[tuple[str, str], ...]
    sink: str

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple((str(i), op) for i, op in self.nodes))
        object.__setattr__(self, "edges", tuple((str(u), str(v)) for u, v in self.edges))

    @property
    def ops(self) -> dict[str, Operator]:
        return dict(self.nodes)

    def op(self, node_id: str) -> Operator:
        for i, op in self.nodes:
            if i == node_id:
                return op
        raise KeyError(node_id)

    def inputs(self, node_id: str) -> list[str]:
        """Upstream node ids of ``node_id`` in edge-list order (left before right)."""
        return [u for u, v in self.edges if v == node_id]

    def consumers(self, node_id: str) -> list[str]:
        return [v for u, v in self.edges if u == node_id]

    def node_ids(self) -> list[str]:
        return [i for i, _ in self.nodes]

    @classmethod
    def chain(cls, *ops: Operator, prefix: str = "n") -> "QueryPlan":
        ids = [f"{prefix}{i}" for i in range(len(ops))]
        edges = [(ids[i], ids[i + 1]) for i in range(len(ops) - 1)]
        return cls(tuple(zip(ids, ops)), tuple(edges), ids[-1])

    def to_json(self) -> dict:
        return {
            "nodes": [{"id": i, "op": op.to_json()} for i, op in self.nodes],
            "edges": [list(e) for e in self.edges],
            "sink": self.sink,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True, separators=(",", ":"), ensure_ascii=False)

    @classmethod
    def from_json(cls, doc: dict) -> "QueryPlan":
        return cls(
            tuple((n["id"], Operator.from_json(n["op"])) for n in doc["nodes"]),
            tuple((e[0], e[1]) for e in doc["edges"]),
            doc["sink"],
        )

    def relabel(self, mapping: dict[str, str]) -> "QueryPlan":
        return QueryPlan(
            tuple((mapping[i], op) for i, op in self.nodes),
            tuple((mapping[u], mapping[v]) for u, v in self.edges),
            mapping[self.sink],
        )


def _find_cycle(ids: list[str], edges: Iterable[tuple[str, str]]) -> Optional[list[str]]:
    succ: dict[str, list[str]] = {i: [] for i in ids}
    for u, v in edges:
        if u in succ and v in succ:
            succ[u].append(v)
    color = dict.fromkeys(ids, 0)
    for root in sorted(ids):
        if color[root]:
            continue
        stack = [(root, iter(succ[root]))]
        path = [root]
        color[root] = 1
        while stack:
            node, it = stack[-1]
            nxt = next(it, None)
            if nxt is None:
                color[node] = 2
                stack.pop()
                path.pop()
            elif color[nxt] == 1:
                return path[path.index(nxt):]
            elif color[nxt] == 0:
                color[nxt] = 1
                stack.append((nxt, iter(succ[nxt])))
                path.append(nxt)
    return None


def validate_plan(plan: QueryPlan) -> list[str]:
    """Return the list of violated plan invariants; an empty list means ok."""
    problems: list[str] = []
    ids = plan.node_ids()
    seen: set[str] = set()
    for i in ids:
        if i in seen:
            problems.append(f"duplicate node id {i}")
        seen.add(i)
    for u, v in plan.edges:
        for end in (u, v):
            if end not in seen:
                problems.append(f"edge {u}->{v} references unknown node {end}")
    if plan.sink not in seen:
        problems.append(f"sink {plan.sink} is not a node")
    if problems:
        return problems

    cycle = _find_cycle(ids, plan.edges)
    if cycle:
        problems.append(f"cycle through {cycle[0]} ({' -> '.join(cycle + [cycle[0]])})")

    for i, op in plan.nodes:
        n_in = len(plan.inputs(i))
        if n_in != op.arity:
            problems.append(f"arity mismatch at node {i}: {op.kind.value} expects {op.arity} input(s), has {n_in}")
        for p in op.param_problems():
            problems.append(f"bad parameters at node {i}: {p}")

    terminal = [i for i in ids if not plan.consumers(i)]
    if len(terminal) != 1 or terminal[0] != plan.sink:
        problems.append(f"expected exactly one sink with out-degree 0 ({plan.sink}), found {terminal}")

    if not cycle:
        ops = plan.ops
        grounded: dict[str, bool] = {}
        for i in _kahn(plan, key=lambda n: n):
            ins = plan.inputs(i)
            grounded[i] = ops[i].kind is OpKind.SCAN or (bool(ins) and all(grounded[u] for u in ins))
        for i in ids:
            if not grounded.get(i, False):
                problems.append(f"node {i} is not reachable from a Scan")
    return problems


def check_plan(plan: QueryPlan) -> QueryPlan:
    problems = validate_plan(plan)
    if problems:
        raise InvalidPlanError(problems)
    return plan


def _kahn(plan: QueryPlan, key) -> list[str]:
    indeg = {i: 0 for i in plan.node_ids()}
    succ: dict[str, list[str]] = {i: [] for i in indeg}
    for u, v in plan.edges:
        indeg[v] += 1
        succ[u].append(v)
    heap = [(key(i), i) for i, d in indeg.items() if d == 0]
    heapq.heapify(heap)
    order = []
    while heap:
        _, u = heapq.heappop(heap)
        order.append(u)
        for v in succ[u]:
            indeg[v] -= 1
            if indeg[v] == 0:
                heapq.heappush(heap, (key(v), v))
    return order


def node_signatures(plan: QueryPlan) -> dict[str, str]:
    """Canonical signature of the sub-plan rooted at every node."""
    ops = plan.ops
    memo: dict[str, str] = {}

    def sig(i: str) -> str:
        if i not in memo:
            ins = plan.inputs(i)
            body = ops[i].signature()
            memo[i] = body if not ins else body + "[" + ", ".join(sig(u) for u in ins) + "]"
        return memo[i]

    # Iterative warm-up in topological order keeps recursion shallow on long chains.
    for i in _kahn(plan, key=lambda n: n):
        sig(i)
    return memo


def topological_order(plan: QueryPlan) -> list[str]:
    """Node ids so every edge points forward; ties broken by sub-plan signature."""
    check_plan(plan)
    sigs = node_signatures(plan)
    return _kahn(plan, key=lambda n: sigs[n])


def plan_signature(plan: QueryPlan) -> str:
    check_plan(plan)
    return node_signatures(plan)[plan.sink]


def output_columns(plan: QueryPlan) -> dict[str, tuple[str, ...]]:
    """Statically derived output columns of every node."""
    ops = plan.ops
    out: dict[str, tuple[str, ...]] = {}
    for node in topological_order(plan):
        op = ops[node]
        ins = [out[u] for u in plan.inputs(node)]
        if op.kind is OpKind.SCAN:
            out[node] = op.dataset.columns
        elif op.kind is OpKind.PROJECT:
            cols = []
            for c in op.columns:
                try:
                    cols.append(ins[0][E.resolve_column(c, ins[0])])
                except KeyError:
                    cols.append(c)
            out[node] = tuple(cols)
        elif op.kind in (OpKind.JOIN, OpKind.SEM_JOIN):
            out[node] = ins[0] + ins[1]
        elif op.kind is OpKind.SEM_EXTRACT:
            out[node] = ins[0] + tuple(f"extract.{f}" for f in op.fields)
        else:
            out[node] = ins[0]
    return out


# ---------------------------------------------------------------- results

def encode_value(v: Any) -> Any:
    if isinstance(v, ItemRef):
        return {"$ref": [v.dataset, v.item, v.modality.value]}
    if isinstance(v, dict):
        return {"$rec": {k: encode_value(x) for k, x in v.items()}}
    return v


def decode_value(v: Any) -> Any:
    if isinstance(v, dict):
        if "$ref" in v:
            ds, item, mod = v["$ref"]
            return ItemRef(ds, item, Modality(mod))
        if "$rec" in v:
            return {k: decode_value(x) for k, x in v["$rec"].items()}
    return v


@dataclass(frozen=True)
class ResultSet:
    """Ordered result tuples sharing one column list."""

    columns: tuple[str, ...]
    rows: tuple[tuple, ...] = ()
    provenance: str = ""

    def __post_init__(self):
        object.__setattr__(self, "columns", tuple(self.columns))
        object.__setattr__(self, "rows", tuple(tuple(r) for r in self.rows))
        width = len(self.columns)
        for r in self.rows:
            if len(r) != width:
                raise ValueError(f"row arity {len(r)} != column arity {width}")

    def __len__(self) -> int:
        return len(self.rows)

    def __iter__(self) -> Iterator[tuple]:
        return iter(self.rows)

    def tuples(self) -> Iterator[list[tuple[str, Any]]]:
        """Rows as (name, value) cell lists."""
        for r in self.rows:
            yield list(zip(self.columns, r))

    def column(self, name: str) -> list[Any]:
        idx = E.resolve_column(name, self.columns)
        return [r[idx] for r in self.rows]

    def item_refs(self) -> Iterator[ItemRef]:
        for r in self.rows:
            for v in r:
                if isinstance(v, ItemRef):
                    yield v

    def with_provenance(self, provenance: str) -> "ResultSet":
        return replace(self, provenance=provenance)

    def page(self, start: int, size: int) -> "ResultSet":
        return ResultSet(self.columns, self.rows[start:start + size], self.provenance)

    def to_json(self) -> dict:
        return {
            "columns": list(self.columns),
            "rows": [[encode_value(v) for v in r] for r in self.rows],
            "provenance": self.provenance,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "ResultSet":
        return cls(tuple(doc["columns"]),
                   tuple(tuple(decode_value(v) for v in r) for r in doc["rows"]),
                   doc.get("provenance", ""))


def as_multiset(rs: ResultSet) -> dict[str, int]:
    """Order-insensitive fingerprint of the rows, for equivalence checks."""
    counts: dict[str, int] = {}
    for r in rs.rows:
        key = json.dumps([encode_value(v) for v in r], sort_keys=True, default=str)
        counts[key] = counts.get(key, 0) + 1
    return counts


@dataclass
class PlanBuilder:
    """Incremental plan construction with automatic node ids."""

    prefix: str = "n"
    _nodes: list = field(default_factory=list)
    _edges: list = field(default_factory=list)

    def add(self, op: Operator, *inputs: str) -> str:
        node_id = f"{self.prefix}{len(self._nodes)}"
        self._nodes.append((node_id, op))
        self._edges.extend((u, node_id) for u in inputs)
        return node_id

    def build(self, sink: Optional[str] = None) -> QueryPlan:
        return QueryPlan(tuple(self._nodes), tuple(self._edges), sink or self._nodes[-1][0])
