"""Lake enrichment over a local document corpus.

Pipeline: load documents, drop near-duplicates (MinHash over token
shingles OR embedding cosine, closed transitively), fingerprint concepts
with SimHash, extract entities with a gazetteer, keep knowledge units that
at least two unrelated sources corroborate, and index them in a JSON-lines
catalog queryable by modality, credibility and time with recency decay.
"""

from __future__ import annotations

import hashlib
import json
import math
import random
import re
from collections import Counter
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Mapping, Optional, Protocol, Sequence

import numpy as np

from .algebra import Modality
from .embedding import HashingEmbedder, tokenize

MERSENNE = (1 << 31) - 1
DEFAULT_SHINGLE = 3
DEFAULT_PERMUTATIONS = 128
DEFAULT_TAU_MINHASH = 0.8
DEFAULT_TAU_EMBED = 0.9
SECONDS_PER_DAY = 86400.0


class DocumentTooShortError(ValueError):
    pass


def parse_time(v) -> Optional[float]:
    """Epoch seconds from a number or an ISO-8601 string (UTC if naive)."""
    if v is None or v == "":
        return None
    if isinstance(v, (int, float)):
        return float(v)
    dt = datetime.fromisoformat(str(v).replace("Z", "+00:00"))
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return dt.timestamp()


@dataclass(frozen=True)
class Document:
    id: str
    source: str
    fetched_at: float
    published_at: Optional[float] = None
    modality: Modality = Modality.TEXT
    sections: tuple[tuple[str, str], ...] = ()

    @property
    def text(self) -> str:
        return "\n".join(f"{h}\n{b}" if h else b for h, b in self.sections)

    @property
    def body(self) -> str:
        return "\n".join(b for _, b in self.sections)

    @property
    def timestamp(self) -> float:
        return self.published_at if self.published_at is not None else self.fetched_at

    @classmethod
    def from_json(cls, doc: dict) -> "Document":
        secs = []
        for s in doc.get("sections", ()):
            if isinstance(s, dict):
                secs.append((str(s.get("heading", "")), str(s.get("body", ""))))
            else:
                secs.append((str(s[0]), str(s[1])))
        if not secs and doc.get("text"):
            secs.append(("", str(doc["text"])))
        return cls(str(doc["id"]), str(doc["source"]), parse_time(doc.get("fetched_at")) or 0.0,
                   parse_time(doc.get("published_at")), Modality.parse(doc.get("modality", "Text")), tuple(secs))

    def to_json(self) -> dict:
        return {"id": self.id, "source": self.source, "fetched_at": self.fetched_at,
                "published_at": self.published_at, "modality": self.modality.value,
                "sections": [{"heading": h, "body": b} for h, b in self.sections]}


def load_corpus(directory: str | Path) -> list[Document]:
    """One JSON document per ``*.json`` file; ids must be unique."""
    docs, seen = [], set()
    for p in sorted(Path(directory).glob("*.json")):
        d = Document.from_json(json.loads(p.read_text(encoding="utf-8")))
        if d.id in seen:
            raise ValueError(f"duplicate document id {d.id!r} ({p.name})")
        seen.add(d.id)
        docs.append(d)
    return docs


def _text(doc: Document | str) -> str:
    return doc if isinstance(doc, str) else doc.text


# ---------------------------------------------------------------- MinHash

def shingles(tokens: Sequence[str], n: int) -> set[str]:
    return {" ".join(tokens[i:i + n]) for i in range(len(tokens) - n + 1)}


def _shingle_hash(s: str) -> int:
    return int.from_bytes(hashlib.blake2b(s.encode(), digest_size=8).digest(), "little") % MERSENNE


def _permutations(h: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    rng = random.Random(f"minhash|{seed}|{h}")
    a = np.array([rng.randrange(1, MERSENNE) for _ in range(h)], dtype=np.int64)
    b = np.array([rng.randrange(0, MERSENNE) for _ in range(h)], dtype=np.int64)
    return a, b


@dataclass(frozen=True)
class MinHashSignature:
    values: tuple[int, ...]
    seed: int = 0
    n: int = DEFAULT_SHINGLE

    def __len__(self) -> int:
        return len(self.values)


def minhash(doc: Document | str, n: int = DEFAULT_SHINGLE, h: int = DEFAULT_PERMUTATIONS,
            seed: int = 0) -> MinHashSignature:
    """Per-permutation minimum of ``(a x + b) mod (2^31 - 1)`` over the
    hashed token n-gram shingles."""
    if n < 1 or h < 1:
        raise ValueError("n and h must be >= 1")
    tokens = tokenize(_text(doc))
    if len(tokens) < n:
        raise DocumentTooShortError(f"{len(tokens)} tokens, shingle size {n}")
    xs = np.fromiter((_shingle_hash(s) for s in shingles(tokens, n)), dtype=np.int64)
    a, b = _permutations(h, seed)
    mins = ((a[:, None] * xs[None, :] + b[:, None]) % MERSENNE).min(axis=1)
    return MinHashSignature(tuple(int(v) for v in mins), seed, n)


def estimate_jaccard(a: MinHashSignature, b: MinHashSignature) -> float:
    if len(a) != len(b) or a.seed != b.seed or a.n != b.n:
        raise ValueError("signatures come from different hash families")
    return sum(x == y for x, y in zip(a.values, b.values)) / len(a)


def exact_jaccard(a: Document | str, b: Document | str, n: int = DEFAULT_SHINGLE) -> float:
    sa, sb = shingles(tokenize(_text(a)), n), shingles(tokenize(_text(b)), n)
    if not sa and not sb:
        return 1.0
    return len(sa & sb) / len(sa | sb)


# ---------------------------------------------------------------- SimHash

@dataclass(frozen=True)
class SimHashFingerprint:
    bits: int
    width: int = 64


def simhash(doc: Document | str, width: int = 64) -> SimHashFingerprint:
    """Sign of the term-frequency weighted sum of per-token hash bits."""
    counts = Counter(tokenize(_text(doc)))
    if not counts:
        raise ValueError("empty document")
    acc = np.zeros(width, dtype=np.float64)
    shifts = np.arange(width, dtype=np.uint64)
    for tok, tf in counts.items():
        hv = np.uint64(int.from_bytes(hashlib.blake2b(tok.encode(), digest_size=8).digest(), "little"))
        bits = (hv >> shifts) & np.uint64(1)
        acc += np.where(bits == 1, float(tf), -float(tf))
    out = 0
    for i in range(width):
        if acc[i] > 0:
            out |= 1 << i
    return SimHashFingerprint(out, width)


def hamming(a: SimHashFingerprint, b: SimHashFingerprint) -> int:
    if a.width != b.width:
        raise ValueError("fingerprints of different widths")
    return bin(a.bits ^ b.bits).count("1")


def nearest_fingerprint(fp: SimHashFingerprint, others: Mapping[str, SimHashFingerprint]) -> tuple[str, int]:
    """Closest fingerprint (by Hamming distance, ties by id)."""
    if not others:
        raise ValueError("no fingerprints to compare against")
    return min(((k, hamming(fp, v)) for k, v in others.items()), key=lambda kv: (kv[1], kv[0]))


# ---------------------------------------------------------------- dedup

@dataclass
class DedupResult:
    clusters: list[list[str]]         # member ids, each sorted; clusters ordered by representative
    representatives: list[str]
    assignment: dict[str, int]        # doc id -> cluster index

    def representative_of(self, doc_id: str) -> str:
        return self.representatives[self.assignment[doc_id]]


class _UnionFind:
    def __init__(self, n: int):
        self.parent = list(range(n))

    def find(self, i: int) -> int:
        while self.parent[i] != i:
            self.parent[i] = self.parent[self.parent[i]]
            i = self.parent[i]
        return i

    def union(self, i: int, j: int) -> None:
        ri, rj = self.find(i), self.find(j)
        if ri != rj:
            self.parent[max(ri, rj)] = min(ri, rj)


def similarity_edges(docs: Sequence[Document], tau_minhash: float = DEFAULT_TAU_MINHASH,
                     tau_embed: float = DEFAULT_TAU_EMBED, n: int = DEFAULT_SHINGLE,
                     h: int = DEFAULT_PERMUTATIONS, seed: int = 0,
                     embedder: Optional[HashingEmbedder] = None, block: int = 256) -> np.ndarray:
    """Boolean adjacency: MinHash estimate >= tau_minhash OR cosine >= tau_embed.

    Documents too short to shingle only take part through the embedding.
    """
    if not (0.0 <= tau_minhash <= 1.0 and 0.0 <= tau_embed <= 1.0):
        raise ValueError("thresholds must lie in [0, 1]")
    N = len(docs)
    embedder = embedder or HashingEmbedder()
    E = embedder.embed_many([d.text for d in docs]) if N else np.zeros((0, 1))
    adj = (E @ E.T) >= tau_embed - 1e-12
    sigs = np.zeros((N, h), dtype=np.int64)
    ok = np.zeros(N, dtype=bool)
    for i, d in enumerate(docs):
        try:
            sigs[i] = minhash(d, n, h, seed).values
            ok[i] = True
        except DocumentTooShortError:
            pass
    need = int(math.ceil(tau_minhash * h - 1e-9))
    for s in range(0, N, block):
        match = (sigs[s:s + block, None, :] == sigs[None, :, :]).sum(axis=2)
        adj[s:s + block] |= (match >= need) & ok[s:s + block, None] & ok[None, :]
    np.fill_diagonal(adj, False)
    return adj


def dedup(docs: Sequence[Document], tau_minhash: float = DEFAULT_TAU_MINHASH,
          tau_embed: float = DEFAULT_TAU_EMBED, n: int = DEFAULT_SHINGLE, h: int = DEFAULT_PERMUTATIONS,
          seed: int = 0, embedder: Optional[HashingEmbedder] = None) -> DedupResult:
    """Connected components of the similarity graph; each cluster is
    represented by its earliest-published document (ties by id)."""
    adj = similarity_edges(docs, tau_minhash, tau_embed, n, h, seed, embedder)
    uf = _UnionFind(len(docs))
    for i, j in zip(*np.nonzero(np.triu(adj, 1))):
        uf.union(int(i), int(j))
    groups: dict[int, list[int]] = {}
    for i in range(len(docs)):
        groups.setdefault(uf.find(i), []).append(i)
    reps = []
    for members in groups.values():
        rep = min(members, key=lambda i: (docs[i].timestamp, docs[i].id))
        reps.append((docs[rep].id, sorted(docs[i].id for i in members)))
    reps.sort()
    assignment = {doc_id: k for k, (_, ids) in enumerate(reps) for doc_id in ids}
    return DedupResult([ids for _, ids in reps], [r for r, _ in reps], assignment)


# ---------------------------------------------------------------- entities

@dataclass(frozen=True)
class Entity:
    name: str
    type: str
    start: int
    end: int


class EntityProvider(Protocol):
    def extract(self, text: str) -> list[Entity]: ...


class Gazetteer:
    """Deterministic longest-match dictionary tagger (word boundaries,
    case-insensitive by default)."""

    def __init__(self, entries: Mapping[str, str], case_sensitive: bool = False):
        self.entries = dict(entries)
        self.case_sensitive = case_sensitive
        self._canon = {(k if case_sensitive else k.lower()): k for k in self.entries}
        names = sorted(self.entries, key=lambda k: (-len(k), k))
        flags = 0 if case_sensitive else re.IGNORECASE
        self._re = re.compile(r"(?<!\w)(?:" + "|".join(re.escape(k) for k in names) + r")(?!\w)", flags) \
            if names else None

    @classmethod
    def from_file(cls, path: str | Path) -> "Gazetteer":
        return cls(json.loads(Path(path).read_text(encoding="utf-8")))

    def extract(self, text: str) -> list[Entity]:
        if self._re is None:
            return []
        out = []
        for m in self._re.finditer(text):
            key = m.group(0) if self.case_sensitive else m.group(0).lower()
            name = self._canon[key]
            out.append(Entity(name, self.entries[name], m.start(), m.end()))
        return out


def extract_entities(doc: Document | str, provider: EntityProvider) -> list[Entity]:
    return provider.extract(_text(doc))


# ---------------------------------------------------------------- corroboration

class Status:
    CANDIDATE = "candidate"
    RETAINED = "retained"
    REJECTED = "rejected"


@dataclass(frozen=True)
class KnowledgeUnit:
    id: str
    content: str
    entities: tuple[tuple[str, str], ...]
    sources: frozenset[str]
    modality: Modality = Modality.TEXT
    credibility: float = 0.5
    published_at: Optional[float] = None
    fetched_at: float = 0.0
    status: str = Status.CANDIDATE
    documents: tuple[str, ...] = ()

    @property
    def timestamp(self) -> float:
        return self.published_at if self.published_at is not None else self.fetched_at

    def to_json(self) -> dict:
        return {"id": self.id, "content": self.content, "entities": [list(e) for e in self.entities],
                "sources": sorted(self.sources), "modality": self.modality.value,
                "credibility": self.credibility, "published_at": self.published_at,
                "fetched_at": self.fetched_at, "status": self.status, "documents": list(self.documents)}

    @classmethod
    def from_json(cls, doc: dict) -> "KnowledgeUnit":
        return cls(doc["id"], doc["content"], tuple(tuple(e) for e in doc["entities"]),
                   frozenset(doc["sources"]), Modality(doc["modality"]), float(doc["credibility"]),
                   doc.get("published_at"), float(doc.get("fetched_at", 0.0)), doc["status"],
                   tuple(doc.get("documents", ())))


@dataclass
class SourcePolicy:
    """Which source pairs are related (mirrors, syndication) and how
    credible each source is. Pairs not listed are unrelated."""

    related: set[frozenset] = field(default_factory=set)
    credibility: dict[str, float] = field(default_factory=dict)
    default_credibility: float = 0.5

    def is_related(self, a: str, b: str) -> bool:
        return a == b or frozenset((a, b)) in self.related

    def credibility_of(self, sources: Iterable[str]) -> float:
        vals = [self.credibility.get(s, self.default_credibility) for s in sources]
        return max(vals) if vals else 0.0

    @classmethod
    def from_json(cls, doc: dict) -> "SourcePolicy":
        return cls({frozenset(p) for p in doc.get("related", ())},
                   {k: float(v) for k, v in (doc.get("credibility") or {}).items()},
                   float(doc.get("default_credibility", 0.5)))


def corroborate(unit: KnowledgeUnit, relatedness: SourcePolicy | Mapping) -> str:
    """``retained`` iff two of the unit's sources are unrelated."""
    if not unit.sources:
        raise ValueError("a knowledge unit needs at least one source")
    if isinstance(relatedness, SourcePolicy):
        related = relatedness.is_related
    else:
        def related(a, b):
            return a == b or bool(relatedness.get(frozenset((a, b)), False))
    srcs = sorted(unit.sources)
    for i, a in enumerate(srcs):
        for b in srcs[i + 1:]:
            if not related(a, b):
                return Status.RETAINED
    return Status.REJECTED


def _sentence_with(text: str, span: tuple[int, int]) -> str:
    start = max(text.rfind(".", 0, span[0]), text.rfind("\n", 0, span[0])) + 1
    ends = [i for i in (text.find(".", span[1]), text.find("\n", span[1])) if i >= 0]
    end = min(ends) + 1 if ends else len(text)
    return text[start:end].strip()


def build_units(docs: Sequence[Document], clusters: DedupResult, provider: EntityProvider,
                policy: SourcePolicy) -> list[KnowledgeUnit]:
    """One unit per extracted entity name.

    Its content is the sentence mentioning it in the earliest
    representative document; its sources are the sources of every document
    (duplicates included) in a cluster whose representative mentions it.
    Relatedness is left to the policy, so mirrored copies do not count twice.
    """
    by_id = {d.id: d for d in docs}
    mentions: dict[str, list[tuple[Document, Entity]]] = {}
    for k, rep_id in enumerate(clusters.representatives):
        rep = by_id[rep_id]
        for ent in extract_entities(rep, provider):
            mentions.setdefault(ent.name, []).append((rep, ent))
    units = []
    for name in sorted(mentions):
        hits = sorted(mentions[name], key=lambda de: (de[0].timestamp, de[0].id, de[1].start))
        first_doc, first_ent = hits[0]
        members = sorted({m for d, _ in hits for m in clusters.clusters[clusters.assignment[d.id]]})
        sources = frozenset(by_id[m].source for m in members)
        unit = KnowledgeUnit(
            id="ku-" + hashlib.sha256(name.encode()).hexdigest()[:12],
            content=_sentence_with(first_doc.text, (first_ent.start, first_ent.end)),
            entities=((name, first_ent.type),),
            sources=sources,
            modality=first_doc.modality,
            credibility=policy.credibility_of(sources),
            published_at=first_doc.published_at,
            fetched_at=first_doc.fetched_at,
            documents=tuple(members),
        )
        units.append(replace(unit, status=corroborate(unit, policy)))
    return units


# ---------------------------------------------------------------- catalog

class KnowledgeCatalog:
    """Retained knowledge units, persisted as JSON lines (single writer)."""

    def __init__(self, path: Optional[str | Path] = None):
        self.path = Path(path) if path is not None else None
        self.units: dict[str, KnowledgeUnit] = {}
        if self.path is not None and self.path.exists():
            for line in self.path.read_text(encoding="utf-8").splitlines():
                if line.strip():
                    u = KnowledgeUnit.from_json(json.loads(line))
                    self.units[u.id] = u

    def add(self, units: Iterable[KnowledgeUnit]) -> list[KnowledgeUnit]:
        added = []
        for u in units:
            if u.status != Status.RETAINED:
                raise ValueError(f"unit {u.id} is {u.status}, only retained units are indexed")
            self.units[u.id] = u
            added.append(u)
        self.save()
        return added

    def remove(self, unit_id: str) -> KnowledgeUnit:
        u = self.units.pop(unit_id)
        self.save()
        return u

    def save(self) -> None:
        if self.path is None:
            return
        self.path.parent.mkdir(parents=True, exist_ok=True)
        lines = [json.dumps(self.units[k].to_json(), sort_keys=True) for k in sorted(self.units)]
        self.path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")

    def query(self, modality: Optional[Modality] = None, min_credibility: float = 0.0,
              window: tuple[Optional[float], Optional[float]] = (None, None),
              decay: float = 0.0, now: Optional[float] = None) -> list[tuple[KnowledgeUnit, float]]:
        """Units on every axis, scored ``credibility * exp(-decay * age_days)``,
        best first (ties by id). ``window`` bounds the unit timestamp,
        inclusive; ``now`` defaults to the newest unit's timestamp."""
        lo, hi = window
        pool = [u for u in self.units.values()
                if (modality is None or u.modality is modality) and u.credibility >= min_credibility
                and (lo is None or u.timestamp >= lo) and (hi is None or u.timestamp <= hi)]
        if not pool:
            return []
        ref = now if now is not None else max(u.timestamp for u in self.units.values())
        scored = [(u, u.credibility * math.exp(-decay * max(0.0, ref - u.timestamp) / SECONDS_PER_DAY))
                  for u in pool]
        scored.sort(key=lambda us: (-us[1], us[0].id))
        return scored

    def __len__(self) -> int:
        return len(self.units)


def index_knowledge(units: Iterable[KnowledgeUnit], path: Optional[str | Path] = None) -> KnowledgeCatalog:
    cat = KnowledgeCatalog(path)
    cat.add(units)
    return cat


# ---------------------------------------------------------------- pipeline

@dataclass
class AugmentReport:
    documents: int
    clusters: int
    units: list[KnowledgeUnit]
    fingerprints: dict[str, SimHashFingerprint]
    novelty: dict[str, int]  # representative id -> Hamming distance to nearest other representative

    @property
    def retained(self) -> list[KnowledgeUnit]:
        return [u for u in self.units if u.status == Status.RETAINED]

    def summary(self) -> dict:
        return {"documents": self.documents, "clusters": self.clusters, "units": len(self.units),
                "retained": len(self.retained),
                "rejected": len(self.units) - len(self.retained)}


def augment(docs: Sequence[Document], provider: EntityProvider, policy: SourcePolicy = SourcePolicy(),
            catalog: Optional[KnowledgeCatalog] = None, tau_minhash: float = DEFAULT_TAU_MINHASH,
            tau_embed: float = DEFAULT_TAU_EMBED, seed: int = 0) -> AugmentReport:
    docs = [d for d in docs if d.body.strip()]
    clusters = dedup(docs, tau_minhash, tau_embed, seed=seed)
    by_id = {d.id: d for d in docs}
    fps = {r: simhash(by_id[r]) for r in clusters.representatives}
    novelty = {r: nearest_fingerprint(fp, {k: v for k, v in fps.items() if k != r})[1]
               for r, fp in fps.items()} if len(fps) > 1 else {}
    units = build_units(docs, clusters, provider, policy)
    if catalog is not None:
        catalog.add(u for u in units if u.status == Status.RETAINED)
    return AugmentReport(len(docs), len(clusters.clusters), units, fps, novelty)
