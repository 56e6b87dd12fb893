"""Workload fixture generator and end-to-end benchmark runner.

The fixture lake mirrors the three-query furniture workload: a
``furniture`` table of 3000 listings, an ``image`` table linking listings to
photos, and a label file describing what each photo shows. Relational
predicates select exactly the target intermediate sizes by construction,
and every photo of a selected listing is built to match or not match the
query's image predicate, so the ground truth is known without running the
engine.

Precision and recall are measured over image items: the retrieved set is
every photo reference in the result rows, the truth set every photo of a
selected listing built to match.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
import platform
import random
import sys
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import yaml

from .algebra import ItemRef, Modality, OpKind, QueryPlan
from .host import Catalog, Host, HostSettings, ServerEntry
from .mcp.client import MCPClient
from .mcp.transport import inprocess_pipe
from .scoring import precision_recall
from .servers.relational import make_relational_server
from .servers.storage import LakeStore
from .servers.vision import LabelOracle, NoisyOracle, make_image_server


class InfeasibleSpecError(ValueError):
    pass


@dataclass(frozen=True)
class QuerySpec:
    id: str
    nl: str
    expression: str
    image_predicate: str
    size: int
    group: str  # which listing profile the relational predicate selects


def _expr(filter_text: str, image_predicate: str) -> str:
    return (f"scan(furniture) | filter({filter_text}) | join(scan(image), furniture.id == image.fid)"
            f" | sem_match(image, {json.dumps(image_predicate)}, 0.5)")


DEFAULT_QUERIES = (
    QuerySpec("Q1", "Find a set of two chairs",
              _expr('category == "chair" and title contains "set"', "images with two chairs"),
              "images with two chairs", 33, "chair_set"),
    QuerySpec("Q2", "Find a black leather chair",
              _expr('category == "chair" and material == "leather"', "images with a black chair"),
              "images with a black chair", 126, "leather_chair"),
    QuerySpec("Q3", "Find a set of wood table and chair",
              _expr('title contains "set" and material == "wood"', "images with table and chair"),
              "images with table and chair", 347, "wood_set"),
)


@dataclass(frozen=True)
class WorkloadSpec:
    queries: tuple[QuerySpec, ...] = DEFAULT_QUERIES
    noise: float = 0.0
    seed: int = 0
    rows: int = 3000
    images_per_row: int = 64   # photos per selected listing
    match_rate: float = 0.6    # fraction of those built to match
    cost_per_item: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.noise < 1.0:
            raise InfeasibleSpecError("noise must lie in [0, 1)")
        if sum(q.size for q in self.queries) > self.rows:
            raise InfeasibleSpecError("target intermediate sizes exceed the row count")
        groups = [q.group for q in self.queries]
        if len(set(groups)) != len(groups) or not set(groups) <= set(_GROUPS):
            raise InfeasibleSpecError(f"each query needs a distinct group from {sorted(_GROUPS)}")
        if self.images_per_row < 1 or not 0.0 < self.match_rate <= 1.0:
            raise InfeasibleSpecError("images_per_row >= 1 and match_rate in (0, 1] required")

    def to_json(self) -> dict:
        doc = asdict(self)
        doc["queries"] = [asdict(q) for q in self.queries]
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> "WorkloadSpec":
        doc = dict(doc)
        if "queries" in doc:
            doc["queries"] = tuple(QuerySpec(**q) for q in doc["queries"])
        return cls(**doc)

    @classmethod
    def load(cls, path: str | Path) -> "WorkloadSpec":
        return cls.from_json(yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {})


# Listing profiles. Titles never contain the substring "set" unless the
# profile demands it, and only the chair profiles use category "chair".
_GROUPS = {
    "chair_set": dict(category="chair", materials=("metal", "fabric", "plastic", "velvet"), set=True),
    "leather_chair": dict(category="chair", materials=("leather",), set=False),
    "wood_set": dict(category="table", materials=("wood",), set=True),
}
_OTHER_CATEGORIES = ("sofa", "desk", "bed", "lamp", "dresser", "cabinet", "shelf", "stool", "bench",
                     "table", "chair")
_OTHER_MATERIALS = ("metal", "fabric", "plastic", "glass", "wood", "leather", "velvet", "rattan")
_COLORS = ("black", "white", "brown", "gray", "red", "blue", "green", "beige")
_ADJECTIVES = ("modern", "vintage", "rustic", "classic", "compact", "sturdy", "elegant", "cozy")

# Per image predicate: label sets built to match and built not to match.
_GALLERIES = {
    "images with two chairs": (
        ({"chair": 2}, {"chair": 2, "table": 1}, {"chair": 3}, {"chair": 4, "rug": 1}),
        ({"chair": 1}, {"chair": 1, "table": 1}, {"table": 1, "lamp": 1}, {"sofa": 1}),
    ),
    "images with a black chair": (
        ({"black chair": 1}, {"black chair": 1, "table": 1}, {"black chair": 2}, {"black chair": 1, "white chair": 1}),
        ({"brown chair": 1}, {"white chair": 2}, {"black table": 1, "gray chair": 1}, {"chair": 1}),
    ),
    "images with table and chair": (
        ({"table": 1, "chair": 1}, {"table": 1, "chair": 4}, {"brown table": 1, "brown chair": 2},
         {"table": 1, "chair": 2, "lamp": 1}),
        ({"table": 1}, {"chair": 2}, {"table": 1, "bench": 2}, {"chair": 1, "rug": 1}),
    ),
}


def _title(rng: random.Random, category: str, material: str, is_set: bool) -> str:
    adj = rng.choice(_ADJECTIVES)
    if is_set:
        return f"{adj} {material} {category} set of {rng.randint(2, 6)}"
    return f"{adj} {material} {category}"


def _price(rng: random.Random) -> float:
    return round(rng.uniform(20, 1500), 2)


@dataclass
class Fixture:
    directory: Path
    truth: dict[str, list[str]]          # query id -> matching photo ids
    selected: dict[str, list[int]]       # query id -> listing ids passing the relational predicate
    spec: WorkloadSpec


def generate_fixture(spec: WorkloadSpec, directory: str | Path) -> Fixture:
    """Write the fixture lake into ``directory`` (deterministic in the seed)."""
    out = Path(directory)
    lake = out / "lake"
    lake.mkdir(parents=True, exist_ok=True)
    rng = random.Random(spec.seed)
    for q in spec.queries:
        if q.image_predicate not in _GALLERIES:
            raise InfeasibleSpecError(f"{q.id}: no gallery for image predicate {q.image_predicate!r}")

    # Positions of the selected listings are a seeded shuffle of all ids.
    ids = list(range(1, spec.rows + 1))
    order = ids[:]
    rng.shuffle(order)
    assigned: dict[int, QuerySpec] = {}
    pos = 0
    for q in spec.queries:
        for lid in order[pos:pos + q.size]:
            assigned[lid] = q
        pos += q.size

    furniture, images, labels = [], [], {}
    truth: dict[str, list[str]] = {q.id: [] for q in spec.queries}
    selected: dict[str, list[int]] = {q.id: [] for q in spec.queries}
    photo = 0

    def new_photo(lid: int, lab: dict) -> str:
        nonlocal photo
        photo += 1
        pid = f"p{photo:06d}"
        labels[pid] = lab
        images.append((pid, lid))
        return pid

    for lid in ids:
        q = assigned.get(lid)
        color = rng.choice(_COLORS)
        if q is not None:
            g = _GROUPS[q.group]
            material = rng.choice(g["materials"])
            furniture.append((lid, _title(rng, g["category"], material, g["set"]), g["category"], color,
                              material, _price(rng)))
            selected[q.id].append(lid)
            yes, no = _GALLERIES[q.image_predicate]
            for _ in range(spec.images_per_row):
                if rng.random() < spec.match_rate:
                    truth[q.id].append(new_photo(lid, dict(rng.choice(yes))))
                else:
                    new_photo(lid, dict(rng.choice(no)))
        else:
            while True:
                category = rng.choice(_OTHER_CATEGORIES)
                material = rng.choice(_OTHER_MATERIALS)
                if not (category == "chair" and material == "leather"):
                    break
            furniture.append((lid, _title(rng, category, material, False), category, color, material,
                              _price(rng)))
            for _ in range(rng.randint(1, 4)):
                new_photo(lid, {f"{color} {category}" if category in ("chair", "table", "sofa") else category: 1})

    _write_csv(lake / "furniture.csv", ("id", "title", "category", "color", "material", "price"), furniture)
    _write_json(lake / "furniture.schema.json", {
        "name": "furniture", "modality": "Relational", "refs": {},
        "columns": [["id", "int"], ["title", "string"], ["category", "string"], ["color", "string"],
                    ["material", "string"], ["price", "float"]]})
    _write_csv(lake / "image.csv", ("img", "fid"), images)
    _write_json(lake / "image.schema.json", {
        "name": "image", "modality": "Relational",
        "refs": {"img": {"dataset": "photos", "modality": "Image"}},
        "columns": [["img", "item-ref"], ["fid", "int"]]})
    _write_json(lake / "photos.labels.json", labels)
    _write_json(out / "truth.json", {"truth": truth, "selected": selected})
    _write_json(out / "spec.json", spec.to_json())
    (out / "config.yaml").write_text(yaml.safe_dump({
        "servers": [{"id": "rel-server", "kind": "relational", "lake": "lake"},
                    {"id": "image-server", "kind": "image", "labels": "lake/photos.labels.json",
                     "noise": spec.noise, "seed": spec.seed, "cost_per_item": spec.cost_per_item}],
        "planner": {"sample_size": 32, "seed": spec.seed},
        "host": {"workers": 8},
    }, sort_keys=True), encoding="utf-8")
    return Fixture(out, truth, selected, spec)


def _write_csv(path: Path, header: Sequence[str], rows) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def load_truth(directory: str | Path) -> tuple[dict[str, list[str]], dict[str, list[int]]]:
    doc = json.loads((Path(directory) / "truth.json").read_text(encoding="utf-8"))
    return doc["truth"], {k: [int(x) for x in v] for k, v in doc["selected"].items()}


# ---------------------------------------------------------------- running

@dataclass
class QueryReport:
    id: str
    precision: float
    recall: float
    latency_ms: float
    intermediate_size: int
    retrieved: int
    truth: int
    translate_ms: float = 0.0
    plan_ms: float = 0.0
    execute_ms: float = 0.0
    error: str = ""


@dataclass
class BenchReport:
    queries: list[QueryReport]
    seed: int
    noise: float
    environment: dict = field(default_factory=dict)
    complete: bool = True

    def to_json(self) -> dict:
        return {"seed": self.seed, "noise": self.noise, "environment": self.environment,
                "complete": self.complete, "queries": [asdict(q) for q in self.queries]}

    def table(self) -> str:
        head = f"{'query':<6}{'size':>6}{'retrieved':>11}{'truth':>7}{'precision':>11}{'recall':>8}{'latency ms':>12}"
        lines = [head, "-" * len(head)]
        for q in self.queries:
            lines.append(f"{q.id:<6}{q.intermediate_size:>6}{q.retrieved:>11}{q.truth:>7}"
                         f"{q.precision:>11.4f}{q.recall:>8.4f}{q.latency_ms:>12.1f}"
                         + (f"  ERROR {q.error}" if q.error else ""))
        return "\n".join(lines)


def environment() -> dict:
    return {"python": sys.version.split()[0], "platform": platform.platform(), "numpy": np.__version__,
            "cpus": os.cpu_count()}


def make_provider(spec: WorkloadSpec, lake: Path):
    oracle = LabelOracle.from_file(lake / "photos.labels.json", spec.cost_per_item)
    if spec.noise > 0:
        return NoisyOracle(oracle.labels, spec.noise, spec.seed, spec.cost_per_item)
    return oracle


def local_host(lake: str | Path, provider, settings: HostSettings = HostSettings(), agent=None) -> Host:
    """Host over in-process relational and image servers on ``lake``."""
    servers = {"rel-server": make_relational_server(LakeStore(lake)),
               "image-server": make_image_server(provider)}
    entries = {}
    for sid, srv in servers.items():
        client = MCPClient(inprocess_pipe(srv), timeout=settings.call_timeout, name=f"host->{sid}")
        client.initialize()
        entries[sid] = ServerEntry(sid, "inproc", client)
    return Host(Catalog.discover(entries), agent=agent, settings=settings)


def photos_of(rows) -> list[str]:
    out = []
    for r in rows:
        for v in r:
            if isinstance(v, ItemRef) and v.modality is Modality.IMAGE:
                out.append(v.item)
    return out


def run(spec: WorkloadSpec, directory: str | Path, provider=None, agent=None,
        raw_dir: Optional[str | Path] = None, host: Optional[Host] = None) -> BenchReport:
    """Run every query sequentially and score it against the fixture truth.

    Raw retrieved photo ids are written to ``raw_dir`` (one JSON file per
    query) when given, for independent re-scoring.
    """
    directory = Path(directory)
    truth, _selected = load_truth(directory)
    provider = provider if provider is not None else make_provider(spec, directory / "lake")
    own = host is None
    host = host or local_host(directory / "lake", provider, HostSettings(seed=spec.seed), agent)
    report = BenchReport([], spec.seed, spec.noise, environment())
    try:
        for q in spec.queries:
            t0 = time.perf_counter()
            try:
                if agent is not None:
                    rs, trace = host.execute(q.nl, mode="nl")
                else:
                    rs, trace = host.execute(q.expression, mode="expression")
            except Exception as exc:
                report.queries.append(QueryReport(q.id, 0.0, 0.0, (time.perf_counter() - t0) * 1000.0, 0, 0,
                                                  len(truth[q.id]), error=str(exc)))
                report.complete = False
                break
            latency = (time.perf_counter() - t0) * 1000.0
            retrieved = photos_of(rs.rows)
            p, r = precision_recall(retrieved, truth[q.id])
            inter = _intermediate(trace, host.log.entries()[-1].plan)
            report.queries.append(QueryReport(q.id, p, r, latency, inter, len(set(retrieved)), len(truth[q.id]),
                                              trace.translate_ms, trace.plan_ms, trace.execute_ms))
            if raw_dir is not None:
                raw = Path(raw_dir)
                raw.mkdir(parents=True, exist_ok=True)
                _write_json(raw / f"{q.id}.json", {"query": q.id, "retrieved": sorted(set(retrieved))})
    finally:
        if own:
            host.close()
    return report


def _intermediate(trace, plan_doc: dict) -> int:
    """Listings passing the relational predicate: the Filter node's output."""
    for node, op in QueryPlan.from_json(plan_doc).nodes:
        if op.kind is OpKind.FILTER and node in trace.nodes:
            return trace.nodes[node].card_out
    return 0


def write_report(report: BenchReport, out: str | Path) -> tuple[Path, Path]:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    jp, tp = out / "report.json", out / "report.txt"
    _write_json(jp, report.to_json())
    tp.write_text(report.table() + "\n", encoding="utf-8")
    return jp, tp


def fixture_digest(directory: str | Path) -> str:
    """SHA-256 over every fixture file, for determinism checks."""
    h = hashlib.sha256()
    base = Path(directory)
    for p in sorted(base.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(base)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def with_noise(spec: WorkloadSpec, noise: float, seed: Optional[int] = None) -> WorkloadSpec:
    return replace(spec, noise=noise, seed=spec.seed if seed is None else seed)
