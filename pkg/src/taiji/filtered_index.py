"""Proximity-graph ANN index with condition-aware edge augmentation.

The base structure is a hierarchical navigable small-world graph over
cosine similarity. For every registered filter condition the index keeps an
augmentation: extra edges among the records satisfying the condition, so the
subgraph induced by the condition stays connected and dense enough to search
without leaving it.

Augmentation construction (our own rule; nothing here is prescribed
elsewhere):

1. Restrict the base layer-0 edges to the subset.
2. Every subset node whose induced degree fell below
   ``min(M, its base degree, |subset| - 1)`` is linked to its nearest subset
   neighbours (exact, by blocked matrix products) until it is back at that
   target. Filtering that removes nothing therefore adds nothing.
3. Remaining connected components are bridged through their closest
   cross-component pair until one component is left.
"""

from __future__ import annotations

import heapq
import io
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Optional, Sequence

import numpy as np

MAGIC = b"TJFX"
FORMAT_VERSION = 1


class IndexError_(ValueError):
    """Invalid index input (dimension mismatch, duplicate id, ...)."""


DimensionMismatch = IndexError_


@dataclass(frozen=True)
class VectorRecord:
    id: str
    embedding: Sequence[float]
    metadata: Mapping[str, Any] = field(default_factory=dict)


@dataclass(frozen=True)
class Condition:
    """Equality (``op="eq"``) or closed-range (``op="range"``) test on one attribute."""

    attribute: str
    op: str = "eq"
    value: Any = None
    low: Any = None
    high: Any = None

    def __post_init__(self):
        if self.op not in ("eq", "range"):
            raise ValueError(f"unsupported condition op {self.op!r}")

    @classmethod
    def eq(cls, attribute: str, value: Any) -> "Condition":
        return cls(attribute, "eq", value=value)

    @classmethod
    def between(cls, attribute: str, low: Any = None, high: Any = None) -> "Condition":
        return cls(attribute, "range", low=low, high=high)

    def matches(self, metadata: Mapping[str, Any]) -> bool:
        if self.attribute not in metadata:
            return False
        v = metadata[self.attribute]
        if self.op == "eq":
            return v == self.value
        if v is None:
            return False
        try:
            return (self.low is None or v >= self.low) and (self.high is None or v <= self.high)
        except TypeError:
            return False

    @property
    def key(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True)

    def to_json(self) -> dict:
        if self.op == "eq":
            return {"attribute": self.attribute, "op": "eq", "value": self.value}
        return {"attribute": self.attribute, "op": "range", "low": self.low, "high": self.high}

    @classmethod
    def from_json(cls, doc: Optional[dict]) -> Optional["Condition"]:
        if not doc:
            return None
        if doc.get("op", "eq") == "eq":
            return cls.eq(doc["attribute"], doc.get("value"))
        return cls.between(doc["attribute"], doc.get("low"), doc.get("high"))


@dataclass(frozen=True)
class HnswParams:
    M: int = 16
    ef_construction: int = 128
    ef_search: int = 64
    seed: int = 0

    @property
    def max_base_degree(self) -> int:
        return 2 * self.M


@dataclass
class ConditionAugmentation:
    condition: Condition
    members: np.ndarray            # sorted record indices satisfying the condition
    extra_edges: dict[int, list[int]]  # symmetric adjacency over members
    entries: list[int]             # search entry points inside the subset
    adjacency: dict[int, np.ndarray] = field(default_factory=dict, repr=False)

    @property
    def extra_edge_count(self) -> int:
        return sum(len(v) for v in self.extra_edges.values()) // 2


def _normalize(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    norms[norms == 0] = 1.0
    return x / norms


class FilteredVectorIndex:
    """HNSW graph plus per-condition augmentations.

    The object is treated as an immutable snapshot once built: ``upsert``
    returns a new index so concurrent searches on the old one stay valid.
    """

    def __init__(self, dim: int, params: HnswParams = HnswParams()):
        self.dim = dim
        self.params = params
        self.ids: list[str] = []
        self.id_to_idx: dict[str, int] = {}
        self.metadata: list[dict] = []
        self.vectors = np.zeros((0, dim), dtype=np.float64)
        self.levels: list[int] = []
        self.layers: list[dict[int, list[int]]] = []  # layer -> node -> neighbours
        self.entry_point: int = -1
        self.augmentations: dict[str, ConditionAugmentation] = {}
        self.filterable: tuple[str, ...] = ()
        self._rng = np.random.default_rng(params.seed)
        self._mask_cache: dict[str, np.ndarray] = {}

    # ------------------------------------------------------------ build
    @classmethod
    def build(cls, records: Sequence[VectorRecord], params: HnswParams = HnswParams(),
              filterable: Iterable[str] = ()) -> "FilteredVectorIndex":
        if not records:
            raise IndexError_("cannot build an index from zero records")
        dim = len(records[0].embedding)
        idx = cls(dim, params)
        idx._insert_many(records)
        idx.filterable = tuple(filterable)
        idx.rebuild_augmentations()
        return idx

    def __len__(self) -> int:
        return len(self.ids)

    def _insert_many(self, records: Sequence[VectorRecord]) -> None:
        seen = set(self.id_to_idx)
        for r in records:
            if len(r.embedding) != self.dim:
                raise IndexError_(f"record {r.id!r} has dimension {len(r.embedding)}, expected {self.dim}")
            if r.id in seen:
                raise IndexError_(f"duplicate record id {r.id!r}")
            seen.add(r.id)
        new = _normalize(np.asarray([r.embedding for r in records], dtype=np.float64))
        start = len(self.ids)
        self.vectors = np.vstack([self.vectors, new]) if start else new
        self._vec32 = self.vectors.astype(np.float32)
        for offset, r in enumerate(records):
            i = start + offset
            self.ids.append(r.id)
            self.id_to_idx[r.id] = i
            self.metadata.append(dict(r.metadata))
            self._insert(i)
        self._mask_cache.clear()

    def _random_level(self) -> int:
        ml = 1.0 / math.log(max(self.params.M, 2))
        u = self._rng.random()
        return int(-math.log(max(u, 1e-300)) * ml)

    def _max_degree(self, layer: int) -> int:
        return self.params.max_base_degree if layer == 0 else self.params.M

    def _insert(self, i: int) -> None:
        level = self._random_level()
        self.levels.append(level)
        while len(self.layers) <= level:
            self.layers.append({})
        for layer in range(level + 1):
            self.layers[layer][i] = []
        if self.entry_point < 0:
            self.entry_point = i
            return
        q = self._vec32[i]
        ep = [self.entry_point]
        top = self.levels[self.entry_point]
        for layer in range(top, level, -1):
            ep = [self._greedy(q, ep[0], layer)]
        for layer in range(min(level, top), -1, -1):
            found = self._search_layer(q, ep, self.params.ef_construction, self.layers[layer])
            found.sort(reverse=True)
            neigh = self._select(q, found, self.params.M)
            adj = self.layers[layer]
            adj[i] = neigh
            cap = self._max_degree(layer)
            for n in neigh:
                lst = adj[n]
                lst.append(i)
                if len(lst) > cap:
                    sims = self._vec32[lst] @ self._vec32[n]
                    cands = sorted(zip(sims.tolist(), lst), reverse=True)
                    adj[n] = self._select(self._vec32[n], cands, cap)
            ep = [idx for _, idx in found]
        if level > top:
            self.entry_point = i

    def _select(self, q: np.ndarray, cands: list[tuple[float, int]], m: int) -> list[int]:
        """Diversity heuristic: keep a candidate only if it is closer to the
        query than to every neighbour already kept; top up with the pruned
        ones so nodes keep ``m`` links when they can."""
        if len(cands) <= m:
            return [c for _, c in cands]
        ids = [c for _, c in cands]
        qs = [s for s, _ in cands]
        V = self._vec32[ids]
        pair = (V @ V.T).tolist()
        kept: list[int] = []
        pruned: list[int] = []
        for j, s in enumerate(qs):
            if len(kept) >= m:
                break
            row = pair[j]
            if any(row[r] > s for r in kept):
                pruned.append(j)
            else:
                kept.append(j)
        for j in pruned:
            if len(kept) >= m:
                break
            kept.append(j)
        return [ids[j] for j in kept]

    def _greedy(self, q: np.ndarray, ep: int, layer: int) -> int:
        X = self._vec32
        adj = self.layers[layer]
        cur, cur_s = ep, float(X[ep] @ q)
        improved = True
        while improved:
            improved = False
            nb = adj[cur]
            if not nb:
                break
            sims = X[nb] @ q
            j = int(np.argmax(sims))
            if sims[j] > cur_s:
                cur, cur_s = nb[j], float(sims[j])
                improved = True
        return cur

    def _search_layer(self, q: np.ndarray, entries: Sequence[int], ef: int, adj,
                      allowed: Optional[np.ndarray] = None) -> list[tuple[float, int]]:
        """Beam search. ``allowed`` (boolean mask) limits which nodes may enter
        the result set; other nodes are still traversed as routing nodes."""
        X = self._vec32
        visited = set(entries)
        sims = (X[list(entries)] @ q).tolist()
        cand = [(-s, e) for s, e in zip(sims, entries)]
        heapq.heapify(cand)
        res = [(s, e) for s, e in zip(sims, entries) if allowed is None or allowed[e]]
        heapq.heapify(res)
        while len(res) > ef:
            heapq.heappop(res)
        while cand:
            neg, u = heapq.heappop(cand)
            if len(res) >= ef and -neg < res[0][0]:
                break
            nb = [v for v in adj[u] if v not in visited]
            if not nb:
                continue
            visited.update(nb)
            s_nb = (X[nb] @ q).tolist()
            worst = res[0][0] if len(res) >= ef else -math.inf
            for sv, v in zip(s_nb, nb):
                if sv > worst:
                    heapq.heappush(cand, (-sv, v))
                    if allowed is None or allowed[v]:
                        heapq.heappush(res, (sv, v))
                        if len(res) > ef:
                            heapq.heappop(res)
                        if len(res) >= ef:
                            worst = res[0][0]
        return res

    # ------------------------------------------------------------ search
    def _descend(self, q: np.ndarray) -> int:
        ep = self.entry_point
        for layer in range(self.levels[ep], 0, -1):
            ep = self._greedy(q, ep, layer)
        return ep

    def _query_vec(self, query: Sequence[float]) -> np.ndarray:
        q = np.asarray(query, dtype=np.float64)
        if q.shape != (self.dim,):
            raise IndexError_(f"query has shape {q.shape}, expected ({self.dim},)")
        return _normalize(q).astype(np.float32)

    def _finish(self, res: list[tuple[float, int]], k: int) -> list[tuple[str, float]]:
        top = sorted(res, key=lambda t: (-t[0], t[1]))[:k]
        return [(self.ids[i], float(np.clip(s, -1.0, 1.0))) for s, i in top]

    def search(self, query: Sequence[float], k: int, ef: Optional[int] = None) -> list[tuple[str, float]]:
        if k < 1:
            raise ValueError("k must be >= 1")
        q = self._query_vec(query)
        ef = max(ef or self.params.ef_search, k)
        res = self._search_layer(q, [self._descend(q)], ef, self.layers[0])
        return self._finish(res, k)

    def mask(self, condition: Optional[Condition]) -> np.ndarray:
        if condition is None:
            return np.ones(len(self.ids), dtype=bool)
        key = condition.key
        m = self._mask_cache.get(key)
        if m is None:
            m = np.fromiter((condition.matches(md) for md in self.metadata), dtype=bool, count=len(self.ids))
            self._mask_cache[key] = m
        return m

    def search_filtered(self, query: Sequence[float], k: int, condition: Optional[Condition],
                        ef: Optional[int] = None) -> list[tuple[str, float]]:
        """Top-k records satisfying ``condition`` by descending cosine similarity."""
        if condition is None:
            return self.search(query, k, ef)
        if k < 1:
            raise ValueError("k must be >= 1")
        allowed = self.mask(condition)
        if not allowed.any():
            return []
        q = self._query_vec(query)
        ef = max(ef or self.params.ef_search, k)
        aug = self.augmentations.get(condition.key)
        if aug is not None:
            ep = self._descend(q)
            entries = list(aug.entries)
            if allowed[ep] and ep not in entries:
                entries.append(ep)
            res = self._search_layer(q, entries, ef, aug.adjacency)
        else:
            res = self._search_layer(q, [self._descend(q)], ef, self.layers[0], allowed=allowed)
        return self._finish(res, k)

    def search_postfilter(self, query: Sequence[float], k: int, condition: Optional[Condition],
                          ef: Optional[int] = None) -> list[tuple[str, float]]:
        """Baseline: unfiltered beam search of width ``ef``, then drop
        non-compliant results."""
        q = self._query_vec(query)
        ef = max(ef or self.params.ef_search, k)
        res = self._search_layer(q, [self._descend(q)], ef, self.layers[0])
        allowed = self.mask(condition)
        return self._finish([(s, i) for s, i in res if allowed[i]], k)

    def brute_force(self, query: Sequence[float], k: int, condition: Optional[Condition] = None) -> list[tuple[str, float]]:
        q = _normalize(np.asarray(query, dtype=np.float64))
        allowed = np.flatnonzero(self.mask(condition))
        if allowed.size == 0:
            return []
        sims = self.vectors[allowed] @ q
        order = np.lexsort((allowed, -sims))[:k]
        return [(self.ids[allowed[j]], float(sims[j])) for j in order]

    # ------------------------------------------------------------ augmentation
    def induced_base_adjacency(self, members: np.ndarray) -> dict[int, list[int]]:
        inside = np.zeros(len(self.ids), dtype=bool)
        inside[members] = True
        base = self.layers[0]
        return {int(u): [v for v in base[int(u)] if inside[v]] for u in members}

    def augment(self, condition: Condition) -> ConditionAugmentation:
        """Build (and register) the augmentation for ``condition``."""
        if not any(condition.attribute in md for md in self.metadata):
            raise KeyError(f"unknown attribute {condition.attribute!r}")
        members = np.flatnonzero(self.mask(condition))
        aug = _build_augmentation(self, condition, members)
        self.augmentations[condition.key] = aug
        return aug

    def rebuild_augmentations(self) -> None:
        self.augmentations = {}
        for attr in self.filterable:
            values = sorted({md[attr] for md in self.metadata if attr in md}, key=repr)
            for v in values:
                self.augment(Condition.eq(attr, v))

    def upsert(self, records: Sequence[VectorRecord]) -> "FilteredVectorIndex":
        """New snapshot including ``records``. Replacing an existing id
        rebuilds the graph from scratch (the graph has no deletions)."""
        existing = [r for r in records if r.id in self.id_to_idx]
        if existing:
            replaced = {r.id: r for r in records}
            merged = [replaced.pop(rid, VectorRecord(rid, self.vectors[i], self.metadata[i]))
                      for i, rid in enumerate(self.ids)]
            merged.extend(replaced.values())
            return FilteredVectorIndex.build(merged, self.params, self.filterable)
        clone = self._clone()
        clone._insert_many(list(records))
        clone.rebuild_augmentations()
        return clone

    def _clone(self) -> "FilteredVectorIndex":
        c = FilteredVectorIndex(self.dim, self.params)
        c.ids = list(self.ids)
        c.id_to_idx = dict(self.id_to_idx)
        c.metadata = [dict(m) for m in self.metadata]
        c.vectors = self.vectors.copy()
        c._vec32 = self._vec32.copy()
        c.levels = list(self.levels)
        c.layers = [{u: list(v) for u, v in layer.items()} for layer in self.layers]
        c.entry_point = self.entry_point
        c.filterable = self.filterable
        c._rng = np.random.default_rng(self._rng.bit_generator.state["state"]["state"] % (2**63))
        return c

    # ------------------------------------------------------------ persistence
    def save(self, path: str | Path) -> None:
        buf = io.BytesIO()
        p = self.params
        buf.write(MAGIC)
        buf.write(struct.pack("<HIIIIqiii", FORMAT_VERSION, self.dim, p.M, p.ef_construction,
                              p.ef_search, p.seed, len(self.ids), len(self.layers), len(self.augmentations)))
        _write_blob(buf, json.dumps({"filterable": list(self.filterable), "entry_point": self.entry_point}).encode())
        # record block
        _write_blob(buf, json.dumps(self.ids).encode())
        _write_blob(buf, json.dumps(self.metadata, sort_keys=True, default=str).encode())
        buf.write(np.asarray(self.levels, dtype="<i4").tobytes())
        buf.write(self.vectors.astype("<f8").tobytes())
        # adjacency blocks
        for layer in self.layers:
            _write_adjacency(buf, layer)
        # augmentation blocks
        for key in sorted(self.augmentations):
            aug = self.augmentations[key]
            _write_blob(buf, json.dumps(aug.condition.to_json(), sort_keys=True).encode())
            _write_ints(buf, aug.members)
            _write_ints(buf, aug.entries)
            _write_adjacency(buf, aug.extra_edges)
        Path(path).write_bytes(buf.getvalue())

    @classmethod
    def load(cls, path: str | Path) -> "FilteredVectorIndex":
        buf = io.BytesIO(Path(path).read_bytes())
        if buf.read(4) != MAGIC:
            raise IndexError_("not a filtered-index file")
        head = struct.Struct("<HIIIIqiii")
        version, dim, M, efc, efs, seed, n, n_layers, n_aug = head.unpack(buf.read(head.size))
        if version != FORMAT_VERSION:
            raise IndexError_(f"unsupported index format version {version}")
        idx = cls(dim, HnswParams(M, efc, efs, seed))
        extra = json.loads(_read_blob(buf))
        idx.filterable = tuple(extra["filterable"])
        idx.entry_point = extra["entry_point"]
        idx.ids = json.loads(_read_blob(buf))
        idx.id_to_idx = {r: i for i, r in enumerate(idx.ids)}
        idx.metadata = json.loads(_read_blob(buf))
        idx.levels = np.frombuffer(buf.read(4 * n), dtype="<i4").astype(int).tolist()
        idx.vectors = np.frombuffer(buf.read(8 * n * dim), dtype="<f8").reshape(n, dim).copy()
        idx._vec32 = idx.vectors.astype(np.float32)
        idx.layers = [_read_adjacency(buf) for _ in range(n_layers)]
        for _ in range(n_aug):
            cond = Condition.from_json(json.loads(_read_blob(buf)))
            members = np.asarray(_read_ints(buf), dtype=np.int64)
            entries = _read_ints(buf)
            extra_edges = _read_adjacency(buf)
            aug = ConditionAugmentation(cond, members, extra_edges, entries)
            aug.adjacency = _merged_adjacency(idx, members, extra_edges)
            idx.augmentations[cond.key] = aug
        return idx


def _write_blob(buf, data: bytes) -> None:
    buf.write(struct.pack("<I", len(data)))
    buf.write(data)


def _read_blob(buf) -> bytes:
    (n,) = struct.unpack("<I", buf.read(4))
    return buf.read(n)


def _write_ints(buf, values) -> None:
    arr = np.asarray(list(values), dtype="<i4")
    buf.write(struct.pack("<I", arr.size))
    buf.write(arr.tobytes())


def _read_ints(buf) -> list[int]:
    (n,) = struct.unpack("<I", buf.read(4))
    return np.frombuffer(buf.read(4 * n), dtype="<i4").astype(int).tolist()


def _write_adjacency(buf, adj: Mapping[int, list[int]]) -> None:
    buf.write(struct.pack("<I", len(adj)))
    for u in sorted(adj):
        _write_ints(buf, [u] + list(adj[u]))


def _read_adjacency(buf) -> dict[int, list[int]]:
    (n,) = struct.unpack("<I", buf.read(4))
    out = {}
    for _ in range(n):
        row = _read_ints(buf)
        out[row[0]] = row[1:]
    return out


# ---------------------------------------------------------------- augmentation

class _UnionFind:
    def __init__(self, items: Iterable[int]):
        self.parent = {i: i for i in items}

    def find(self, x: int) -> int:
        root = x
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[x] != root:
            self.parent[x], x = root, self.parent[x]
        return root

    def union(self, a: int, b: int) -> bool:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return False
        if ra > rb:
            ra, rb = rb, ra
        self.parent[rb] = ra
        return True


def _knn_within(vectors: np.ndarray, k: int, block: int = 1024) -> np.ndarray:
    """Exact k nearest neighbours (by cosine) of every row among the rows,
    excluding itself; returns local row indices sorted by similarity."""
    n = vectors.shape[0]
    k = min(k, n - 1)
    out = np.empty((n, k), dtype=np.int64)
    if k <= 0:
        return out
    for start in range(0, n, block):
        sims = vectors[start:start + block] @ vectors.T
        rows = np.arange(sims.shape[0])
        sims[rows, rows + start] = -np.inf
        part = np.argpartition(-sims, k - 1, axis=1)[:, :k]
        part_sims = np.take_along_axis(sims, part, axis=1)
        order = np.lexsort((part, -part_sims), axis=1)
        out[start:start + block] = np.take_along_axis(part, order, axis=1)
    return out


def _merged_adjacency(index: FilteredVectorIndex, members: np.ndarray,
                      extra: Mapping[int, list[int]]) -> dict[int, np.ndarray]:
    """Induced base edges made symmetric, plus the extra edges. Pruning
    leaves base edges one-directional, and the subset must be reachable
    from any entry, not merely weakly connected."""
    induced = index.induced_base_adjacency(members)
    merged = {u: list(vs) + list(extra.get(u, ())) for u, vs in induced.items()}
    for u, vs in induced.items():
        for v in vs:
            merged[v].append(u)
    return {u: list(dict.fromkeys(vs)) for u, vs in merged.items()}


def _build_augmentation(index: FilteredVectorIndex, condition: Condition,
                        members: np.ndarray) -> ConditionAugmentation:
    M = index.params.M
    size = len(members)
    extra: dict[int, list[int]] = {}
    if size == 0:
        return ConditionAugmentation(condition, members, extra, [])
    induced = index.induced_base_adjacency(members)
    neighbours = {u: set(vs) for u, vs in induced.items()}

    def link(a: int, b: int) -> None:
        neighbours[a].add(b)
        neighbours[b].add(a)
        extra.setdefault(a, []).append(b)
        extra.setdefault(b, []).append(a)

    base = index.layers[0]
    targets = {int(u): min(M, len(base[int(u)]), size - 1) for u in members}
    starved = [u for u in members.tolist() if len(neighbours[u]) < targets[u]]
    if starved:
        sub = index.vectors[members]
        knn = _knn_within(sub, min(M, size - 1) + M)
        local = {int(u): j for j, u in enumerate(members.tolist())}
        for u in starved:
            for j in knn[local[u]]:
                if len(neighbours[u]) >= targets[u]:
                    break
                v = int(members[j])
                if v not in neighbours[u]:
                    link(u, v)

    # Bridge components through their closest cross-component pair.
    uf = _UnionFind(members.tolist())
    for u, vs in neighbours.items():
        for v in vs:
            uf.union(u, v)
    while True:
        comps: dict[int, list[int]] = {}
        for u in members.tolist():
            comps.setdefault(uf.find(u), []).append(u)
        if len(comps) <= 1:
            break
        groups = sorted(comps.values(), key=lambda g: (len(g), g[0]))
        small = np.asarray(groups[0])
        rest = np.asarray([u for g in groups[1:] for u in g])
        sims = index.vectors[small] @ index.vectors[rest].T
        a, b = np.unravel_index(int(np.argmax(sims)), sims.shape)
        u, v = int(small[a]), int(rest[b])
        link(u, v)
        uf.union(u, v)

    # Entry points: a deterministic spread of members.
    n_entries = min(size, 8)
    entries = [int(members[int(j)]) for j in np.linspace(0, size - 1, n_entries).round().astype(int)]
    entries = list(dict.fromkeys(entries))
    aug = ConditionAugmentation(condition, members, {u: sorted(vs) for u, vs in extra.items()}, entries)
    aug.adjacency = _merged_adjacency(index, members, aug.extra_edges)
    return aug


def recall_at_k(found: Sequence[str], truth: Sequence[str]) -> float:
    if not truth:
        return 1.0
    return len(set(found) & set(truth)) / len(truth)


@dataclass
class RecallReport:
    per_query: list[float]
    baseline_per_query: list[float]

    @property
    def mean(self) -> float:
        return float(np.mean(self.per_query)) if self.per_query else 0.0

    @property
    def baseline_mean(self) -> float:
        return float(np.mean(self.baseline_per_query)) if self.baseline_per_query else 0.0


def recall_eval(index: FilteredVectorIndex, workload: Sequence[tuple[Sequence[float], Optional[Condition]]],
                k: int, ef: Optional[int] = None) -> RecallReport:
    """Recall of filtered search and of the post-filter baseline against the
    exact filtered top-k, per query."""
    if not workload:
        raise ValueError("workload must not be empty")
    ours, base = [], []
    for q, cond in workload:
        truth = [i for i, _ in index.brute_force(q, k, cond)]
        ours.append(recall_at_k([i for i, _ in index.search_filtered(q, k, cond, ef)], truth))
        base.append(recall_at_k([i for i, _ in index.search_postfilter(q, k, cond, ef)], truth))
    return RecallReport(ours, base)
