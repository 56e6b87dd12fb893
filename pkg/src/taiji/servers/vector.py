"""Vector / text MCP server backed by the filtered index.

Each dataset is a collection of items (id, text, metadata, embedding).
Indexes are immutable snapshots: ``vec.upsert`` builds the next snapshot
under the server's exclusive latch and swaps it in.
"""

from __future__ import annotations

import json
import logging
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Optional, Sequence

import numpy as np

from ..algebra import DatasetRef, ItemRef, Modality, OpKind, Operator, ResultSet
from ..embedding import HashingEmbedder
from ..filtered_index import Condition, FilteredVectorIndex, HnswParams, VectorRecord
from ..loop import EvidenceScore, LoopConfig, RetrievalTask, run_loop
from ..mcp import protocol as P
from ..mcp.server import MCPServer, ToolContext, ToolError
from .common import (ResultStore, install_catalog_tool, install_execute_tool, install_result_tools,
                     item_refs_of)

log = logging.getLogger(__name__)

VECTOR_MODALITIES = (Modality.TEXT, Modality.VECTOR)


class UnindexedDatasetError(KeyError):
    def __str__(self) -> str:
        return f"dataset {self.args[0]!r} is not indexed"


@dataclass
class VectorDataset:
    name: str
    modality: Modality = Modality.TEXT
    attributes: tuple[str, ...] = ()
    filterable: tuple[str, ...] = ()
    params: HnswParams = HnswParams()
    texts: dict[str, str] = field(default_factory=dict)
    index: Optional[FilteredVectorIndex] = None

    def dataset_ref(self) -> DatasetRef:
        schema = (("text", "string"),) + tuple((a, "string") for a in self.attributes)
        return DatasetRef(self.name, self.modality, f"lake://{self.name}", schema)

    def require_index(self) -> FilteredVectorIndex:
        if self.index is None:
            raise UnindexedDatasetError(self.name)
        return self.index

    def vector_of(self, item: str) -> np.ndarray:
        idx = self.require_index()
        try:
            return idx.vectors[idx.id_to_idx[item]]
        except KeyError:
            raise KeyError(f"unknown item {self.name}/{item}") from None

    def upsert(self, records: Sequence[VectorRecord], texts: Mapping[str, str]) -> None:
        if self.index is None:
            self.index = FilteredVectorIndex.build(records, self.params, self.filterable)
        else:
            self.index = self.index.upsert(records)
        self.texts.update(texts)


def sem_match(query: str | Sequence[float], dataset: VectorDataset, k: int,
              filter: Optional[Condition] = None, embedder: Optional[HashingEmbedder] = None) -> ResultSet:
    """Top-k items of ``dataset`` passing ``filter``, by descending cosine."""
    if k < 1:
        raise ValueError("k must be >= 1")
    idx = dataset.require_index()
    if isinstance(query, str):
        if embedder is None:
            raise ValueError("text queries need an embedder")
        q = embedder.embed(query)
    else:
        q = np.asarray(query, dtype=np.float64)
    hits = idx.search_filtered(q, k, filter)
    rows = tuple((ItemRef(dataset.name, i, dataset.modality), s) for i, s in hits)
    return ResultSet(("item", "score"), rows, provenance=f"vec.sem_match:{dataset.name}")


class VectorService:
    """Datasets plus the retrieval executor used by the feedback loop."""

    def __init__(self, embedder: Optional[HashingEmbedder] = None):
        self.embedder = embedder or HashingEmbedder()
        self.datasets: dict[str, VectorDataset] = {}
        self.scorers: dict[str, Any] = {}  # name -> RidgeScorer, persisted with the indexes
        self.lock = threading.Lock()

    def dataset(self, name: str) -> VectorDataset:
        try:
            return self.datasets[name]
        except KeyError:
            raise UnindexedDatasetError(name) from None

    def add_dataset(self, ds: VectorDataset) -> VectorDataset:
        self.datasets[ds.name] = ds
        return ds

    def upsert(self, name: str, docs: Sequence[Mapping[str, Any]]) -> int:
        ds = self.dataset(name)
        records, texts = [], {}
        for d in docs:
            rid = str(d["id"])
            text = d.get("text", "")
            emb = d.get("embedding")
            vec = np.asarray(emb, dtype=np.float64) if emb is not None else self.embedder.embed(text)
            records.append(VectorRecord(rid, vec, dict(d.get("metadata", {}))))
            texts[rid] = text
        ds.upsert(records, texts)
        return len(records)

    def retrieve_once(self, task: RetrievalTask) -> tuple[ResultSet, list[float]]:
        """Executor for the loop: candidate pool, threshold, diversity, rerank."""
        ds = self.dataset(task.dataset)
        idx = ds.require_index()
        cond = Condition.from_json(task.filter)
        q = self.embedder.embed(" ".join(task.terms) if task.rerank else task.query)
        pool = idx.search_filtered(q, task.pool + 1, cond, ef=max(64, 2 * (task.pool + 1)))
        cands = []
        for rid, s in pool:
            if s < task.threshold:
                continue
            text = ds.texts.get(rid, "")
            bonus = 0.0
            if task.rerank:
                toks = set(text.lower().split())
                bonus = 0.05 * sum(1 for t in task.terms if t in toks)
            cands.append((s + bonus, s, rid, text))
        if task.rerank:
            cands.sort(key=lambda c: (-c[0], c[2]))
        kept, rest = [], []
        for c in cands:
            if len(kept) < task.k and (task.diversity is None or all(
                    float(ds.vector_of(c[2]) @ ds.vector_of(o[2])) <= task.diversity for o in kept)):
                kept.append(c)
            else:
                rest.append(c)
        rows = tuple((ItemRef(ds.name, rid, ds.modality), s, text, ds.vector_of(rid).tolist())
                     for _, s, rid, text in kept)
        rs = ResultSet(("item", "score", "text", "vector"), rows, provenance=f"vec.retrieve:{ds.name}")
        return rs, [c[1] for c in rest]

    def evaluate(self, op: Operator, ins: list[ResultSet]) -> ResultSet:
        if op.kind is OpKind.SCAN:
            ds = self.dataset(op.dataset.id)
            idx = ds.require_index()
            rows = []
            for i, rid in enumerate(idx.ids):
                md = idx.metadata[i]
                rows.append((ItemRef(ds.name, rid, ds.modality), ds.texts.get(rid, ""))
                            + tuple(md.get(a) for a in ds.attributes))
            cols = (f"{ds.name}.item", f"{ds.name}.text") + tuple(f"{ds.name}.{a}" for a in ds.attributes)
            return ResultSet(cols, tuple(rows), provenance=f"lake://{ds.name}")
        if op.kind is OpKind.SEM_MATCH:
            src = ins[0]
            q = self.embedder.embed(op.text)
            memo: dict[ItemRef, float] = {}

            def sim(ref: ItemRef) -> float:
                if ref not in memo:
                    memo[ref] = float(self.dataset(ref.dataset).vector_of(ref.item) @ q)
                return memo[ref]

            keep = tuple(r for r in src.rows
                         if any(sim(ref) >= op.threshold for m in VECTOR_MODALITIES for ref in item_refs_of(r, m)))
            return ResultSet(src.columns, keep, src.provenance)
        raise ToolError(f"vector server cannot evaluate {op.kind.value}", P.INVALID_PARAMS)

    # -- persistence: one index file plus a JSON sidecar per dataset
    def save(self, directory: str | Path) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        for name, ds in self.datasets.items():
            if ds.index is not None:
                ds.index.save(d / f"{name}.tjfx")
            meta = {"name": name, "modality": ds.modality.value, "attributes": list(ds.attributes),
                    "filterable": list(ds.filterable), "texts": ds.texts}
            (d / f"{name}.vec.json").write_text(json.dumps(meta, sort_keys=True))
        for name, scorer in self.scorers.items():
            scorer.save(d / f"{name}.ridge.json")

    def load(self, directory: str | Path) -> None:
        d = Path(directory)
        for meta_path in sorted(d.glob("*.vec.json")):
            meta = json.loads(meta_path.read_text())
            ds = VectorDataset(meta["name"], Modality(meta["modality"]), tuple(meta["attributes"]),
                               tuple(meta["filterable"]), texts=dict(meta["texts"]))
            idx_path = d / f"{ds.name}.tjfx"
            if idx_path.exists():
                ds.index = FilteredVectorIndex.load(idx_path)
                ds.params = ds.index.params
            self.datasets[ds.name] = ds
        from ..refresher import RidgeScorer
        for p in sorted(d.glob("*.ridge.json")):
            self.scorers[p.name[:-len(".ridge.json")]] = RidgeScorer.load(p)


def make_vector_server(service: VectorService, server_id: str = "vector-server",
                       loop_config: LoopConfig = LoopConfig()) -> MCPServer:
    server = MCPServer(server_id, "filtered vector search and iterative retrieval")
    results = ResultStore(server_id)
    install_result_tools(server, results)

    def evaluator(_ctx):
        def run(node, op, ins):
            if op.kind is not OpKind.SCAN and op.modality not in VECTOR_MODALITIES:
                raise ToolError(f"{op.kind.value} on {op.modality} is not served here", P.INVALID_PARAMS)
            try:
                return service.evaluate(op, ins)
            except UnindexedDatasetError as exc:
                raise ToolError(str(exc), P.TOOL_ERROR, {"node": node, "type": "UnindexedDataset"})
        return run

    install_execute_tool(server, "vec.execute", results, evaluator)

    def upsert(args, _ctx):
        name = args["dataset"]
        if name not in service.datasets:
            if not args.get("create", True):
                raise ToolError(f"unknown dataset {name!r}", P.INVALID_PARAMS)
            service.add_dataset(VectorDataset(name, Modality.parse(args.get("modality", "Text")),
                                              tuple(args.get("attributes", ())),
                                              tuple(args.get("filterable", ()))))
            server.add_resource(f"lake://{name}", name)
        try:
            n = service.upsert(name, args.get("records", []))
        except ValueError as exc:
            raise ToolError(str(exc), P.INVALID_PARAMS)
        server.resource_changed(f"lake://{name}", {"kind": "insert", "count": n})
        return {"upserted": n, "size": len(service.dataset(name).require_index())}

    def match(args, _ctx):
        try:
            ds = service.dataset(args["dataset"])
            query = args.get("embedding") if args.get("embedding") is not None else args.get("query")
            if query is None:
                raise ToolError("query or embedding required", P.INVALID_PARAMS)
            return sem_match(query, ds, int(args.get("k", 10)), Condition.from_json(args.get("filter")),
                             service.embedder).to_json()
        except UnindexedDatasetError as exc:
            raise ToolError(str(exc), P.TOOL_ERROR)
        except ValueError as exc:
            raise ToolError(str(exc), P.INVALID_PARAMS)

    def retrieve(args, ctx: ToolContext):
        doc = dict(args["task"])
        doc.setdefault("dataset", args.get("dataset", ""))
        task = RetrievalTask.from_json(doc)
        cfg = LoopConfig.from_dict(args["config"]) if args.get("config") else loop_config

        def clarify(t: RetrievalTask, sc: EvidenceScore) -> str:
            if ctx.session is None:
                return "proceed"
            try:
                reply = ctx.request_client("host/clarify", {"task": t.to_json(), "score": sc.to_json()},
                                           timeout=10.0)
            except (ToolError, TimeoutError) as exc:
                log.info("clarification unavailable: %s", exc)
                return "proceed"
            if isinstance(reply, dict):
                return str(reply.get("predicate") or "proceed")
            return str(reply or "proceed")

        try:
            out = run_loop(task, service.retrieve_once, cfg, clarify)
        except UnindexedDatasetError as exc:
            raise ToolError(str(exc), P.TOOL_ERROR)
        rs = ResultSet(("item", "score", "text"), tuple(r[:3] for r in out.results.rows), out.results.provenance)
        return {"results": rs.to_json(), "score": out.score.to_json(), "iterations": out.iterations,
                "trace": out.trace}

    install_catalog_tool(server, lambda: [ds.dataset_ref() for ds in service.datasets.values()])
    server.add_tool("vec.upsert", upsert, description="Insert or replace vector records.", exclusive=True)
    server.add_tool("vec.sem_match", match, description="Filtered top-k similarity search.")
    server.add_tool("vec.retrieve", retrieve, description="Iterative retrieval with feedback scoring.")
    for name in service.datasets:
        server.add_resource(f"lake://{name}", name)
    return server
