"""Image predicates, vision providers and the image MCP server.

Predicates are short English phrases over furniture photos, compiled by a
small grammar::

    predicate := ["images" "with"] term (("and" | ",") term)*
    term      := [count] [color] object

so "images with two chairs" requires at least two chairs and "images with a
black chair" at least one chair whose label carries the colour black.
Image labels are multisets such as ``{"black chair": 1, "table": 1}``.
"""

from __future__ import annotations

import hashlib
import json
import re
import threading
import time
import urllib.error
import urllib.request
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Mapping, Optional, Protocol, Sequence

from ..algebra import DatasetRef, ItemRef, Modality, OpKind, Operator, ResultSet
from ..mcp import protocol as P
from ..mcp.server import MCPServer, ToolError
from .common import (ResultStore, fill_placeholders, install_catalog_tool, install_execute_tool,
                     install_result_tools, item_refs_of)

COUNT_WORDS = {"a": 1, "an": 1, "one": 1, "two": 2, "three": 3, "four": 4, "five": 5,
               "six": 6, "seven": 7, "eight": 8, "nine": 9, "ten": 10}
COLORS = ("black", "white", "brown", "gray", "grey", "red", "blue", "green", "beige",
          "yellow", "orange", "pink", "purple", "tan", "walnut")
OBJECTS = ("chair", "table", "sofa", "couch", "desk", "bed", "lamp", "dresser", "cabinet",
           "shelf", "stool", "bench", "ottoman", "mirror", "rug", "bookcase", "nightstand",
           "wardrobe", "armchair", "loveseat", "futon", "recliner")
_IRREGULAR = {"shelves": "shelf", "benches": "bench", "couches": "couch"}
_PREFIXES = ("images with", "image with", "photos with", "photo with", "pictures with", "picture with",
             "images of", "image of", "photos of", "photo of")


class PredicateCompileError(ValueError):
    pass


class UnresolvableItemError(KeyError):
    def __init__(self, item: ItemRef):
        super().__init__(str(item))
        self.item = item

    def __str__(self) -> str:
        return f"unresolvable item {self.item}"


class ProviderUnavailable(ConnectionError):
    pass


def singular(word: str) -> Optional[str]:
    w = word.lower()
    if w in OBJECTS:
        return w
    if w in _IRREGULAR:
        return _IRREGULAR[w]
    if w.endswith("s") and w[:-1] in OBJECTS:
        return w[:-1]
    return None


def plural(obj: str) -> str:
    for p, s in _IRREGULAR.items():
        if s == obj:
            return p
    return obj + "s"


@dataclass(frozen=True)
class Requirement:
    object: str
    min_count: int = 1
    color: Optional[str] = None

    def satisfied_by(self, labels: Mapping[str, int]) -> bool:
        return count_matching(labels, self.object, self.color) >= self.min_count


@dataclass(frozen=True)
class ImagePredicate:
    text: str
    required: tuple[Requirement, ...]

    def evaluate(self, labels: Mapping[str, int]) -> bool:
        return all(r.satisfied_by(labels) for r in self.required)


def _normalise_color(c: Optional[str]) -> Optional[str]:
    return "gray" if c == "grey" else c


def parse_label(label: str) -> tuple[Optional[str], Optional[str]]:
    """``"black chair"`` -> ("black", "chair"); unknown objects give (..., None)."""
    words = label.lower().split()
    if not words:
        return None, None
    obj = singular(words[-1])
    color = next((w for w in words[:-1] if w in COLORS), None)
    return _normalise_color(color), obj


def count_matching(labels: Mapping[str, int], obj: str, color: Optional[str] = None) -> int:
    total = 0
    for label, n in labels.items():
        lc, lo = parse_label(label)
        if lo == obj and (color is None or lc == color):
            total += int(n)
    return total


@lru_cache(maxsize=4096)
def compile_predicate(text: str) -> ImagePredicate:
    body = " ".join(text.lower().strip().rstrip(".").split())
    for prefix in _PREFIXES:
        if body.startswith(prefix + " "):
            body = body[len(prefix) + 1:]
            break
    if not body:
        raise PredicateCompileError(f"empty image predicate {text!r}")
    reqs = []
    for part in re.split(r"\s*(?:,|\band\b)\s*", body):
        if not part:
            continue
        words = part.split()
        count, color = 1, None
        i = 0
        if words[i] in COUNT_WORDS or words[i].isdigit():
            count = int(words[i]) if words[i].isdigit() else COUNT_WORDS[words[i]]
            i += 1
        if i < len(words) and words[i] in COLORS:
            color = _normalise_color(words[i])
            i += 1
        if i != len(words) - 1:
            raise PredicateCompileError(f"cannot compile term {part!r} of {text!r}")
        obj = singular(words[i])
        if obj is None:
            raise PredicateCompileError(f"unknown object {words[i]!r} in {text!r}")
        reqs.append(Requirement(obj, count, color))
    if not reqs:
        raise PredicateCompileError(f"no terms in image predicate {text!r}")
    return ImagePredicate(text, tuple(reqs))


def extract_value(labels: Mapping[str, int], field: str) -> int:
    """Value of a SemExtract field: object count, optionally colour-qualified;
    ``objects`` counts everything."""
    f = field.lower().replace("_", " ").strip()
    if f in ("objects", "count"):
        return sum(int(n) for n in labels.values())
    color, obj = parse_label(f)
    if obj is None:
        raise PredicateCompileError(f"cannot extract field {field!r}")
    return count_matching(labels, obj, color)


# ---------------------------------------------------------------- providers

class VisionProvider(Protocol):
    def classify(self, item: ItemRef, predicate: str) -> tuple[bool, float]: ...

    def extract(self, item: ItemRef, fields: Sequence[str]) -> dict: ...


class LabelOracle:
    """Ground-truth provider over a label fixture ``{item id: {label: count}}``.

    ``cost_per_item`` (seconds) simulates model latency per classification.
    """

    def __init__(self, labels: Mapping[str, Mapping[str, int]], cost_per_item: float = 0.0):
        self.labels = {str(k): dict(v) for k, v in labels.items()}
        self.cost_per_item = cost_per_item
        self.calls = 0
        self._lock = threading.Lock()

    @classmethod
    def from_file(cls, path: str | Path, cost_per_item: float = 0.0) -> "LabelOracle":
        return cls(json.loads(Path(path).read_text()), cost_per_item)

    def items(self) -> list[str]:
        return sorted(self.labels)

    def _labels(self, item: ItemRef) -> dict:
        try:
            return self.labels[item.item]
        except KeyError:
            raise UnresolvableItemError(item) from None

    def _spend(self) -> None:
        with self._lock:
            self.calls += 1
        if self.cost_per_item > 0:
            time.sleep(self.cost_per_item)

    def truth(self, item: ItemRef, predicate: str) -> bool:
        return compile_predicate(predicate).evaluate(self._labels(item))

    def classify(self, item: ItemRef, predicate: str) -> tuple[bool, float]:
        verdict = self.truth(item, predicate)
        self._spend()
        return verdict, 1.0

    def extract(self, item: ItemRef, fields: Sequence[str]) -> dict:
        labels = self._labels(item)
        self._spend()
        return {f: extract_value(labels, f) for f in fields}


def flip_draw(seed: int, item: ItemRef, predicate: str) -> float:
    """Uniform [0, 1) draw fixed by (seed, item, predicate)."""
    h = hashlib.blake2b(f"{seed}|{item.dataset}/{item.item}|{predicate}".encode(), digest_size=8)
    return int.from_bytes(h.digest(), "big") / 2.0**64


class NoisyOracle(LabelOracle):
    """LabelOracle whose verdicts flip independently with probability ``epsilon``.

    The flip for a given (item, predicate) is a deterministic function of the
    seed, so repeated calls agree. Confidence is ``1 - epsilon``.
    """

    def __init__(self, labels: Mapping[str, Mapping[str, int]], epsilon: float, seed: int = 0,
                 cost_per_item: float = 0.0):
        if not 0.0 <= epsilon < 1.0:
            raise ValueError("epsilon must lie in [0, 1)")
        super().__init__(labels, cost_per_item)
        self.epsilon = epsilon
        self.seed = seed

    def flipped(self, item: ItemRef, predicate: str) -> bool:
        return flip_draw(self.seed, item, predicate) < self.epsilon

    def classify(self, item: ItemRef, predicate: str) -> tuple[bool, float]:
        verdict = self.truth(item, predicate)
        self._spend()
        if self.flipped(item, predicate):
            verdict = not verdict
        return verdict, 1.0 - self.epsilon


class RemoteModel:
    """HTTP vision model.

    ``POST endpoint`` with ``{"item": {"dataset", "id"}, "predicate": str}``
    answers ``{"verdict": bool, "confidence": float}``; with ``"fields"``
    instead of ``"predicate"`` it answers ``{"values": {field: value}}``.
    """

    def __init__(self, endpoint: str, api_key: Optional[str] = None, timeout: float = 30.0):
        self.endpoint = endpoint
        self.api_key = api_key
        self.timeout = timeout

    def _post(self, body: dict) -> dict:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        req = urllib.request.Request(self.endpoint, json.dumps(body).encode(), headers, method="POST")
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                return json.loads(resp.read())
        except (urllib.error.URLError, OSError, json.JSONDecodeError) as exc:
            raise ProviderUnavailable(f"{self.endpoint}: {exc}") from exc

    def classify(self, item: ItemRef, predicate: str) -> tuple[bool, float]:
        doc = self._post({"item": {"dataset": item.dataset, "id": item.item}, "predicate": predicate})
        conf = float(doc.get("confidence", 1.0))
        return bool(doc["verdict"]), min(max(conf, 0.0), 1.0)

    def extract(self, item: ItemRef, fields: Sequence[str]) -> dict:
        doc = self._post({"item": {"dataset": item.dataset, "id": item.item}, "fields": list(fields)})
        return dict(doc.get("values", {}))


# ---------------------------------------------------------------- operations

MATCH_COLUMNS = ("item", "verdict", "confidence")


def image_match(items: Sequence[ItemRef], predicate: str, provider: VisionProvider) -> ResultSet:
    """One row per input item, in input order."""
    compile_predicate(predicate)
    rows = []
    for it in items:
        verdict, conf = provider.classify(it, predicate)
        rows.append((it, bool(verdict), float(conf)))
    return ResultSet(MATCH_COLUMNS, tuple(rows), provenance="image.match")


class _Classifier:
    """Per-call memo so an image shared by several tuples is classified once."""

    def __init__(self, provider: VisionProvider):
        self.provider = provider
        self.memo: dict[tuple[ItemRef, str], tuple[bool, float]] = {}

    def passes(self, item: ItemRef, predicate: str, threshold: float) -> bool:
        key = (item, predicate)
        if key not in self.memo:
            self.memo[key] = self.provider.classify(item, predicate)
        verdict, conf = self.memo[key]
        return bool(verdict) and conf >= threshold


def evaluate_image_node(provider: VisionProvider, op: Operator, ins: list[ResultSet],
                        items_of=None) -> ResultSet:
    k = op.kind
    cls = _Classifier(provider)
    if k is OpKind.SCAN:
        if items_of is None:
            raise ToolError("image scans need an item listing", P.TOOL_ERROR)
        ds = op.dataset
        extra = len(ds.columns) - 1
        rows = tuple((ItemRef(ds.id, i, Modality.IMAGE),) + (None,) * extra for i in items_of(ds.id))
        return ResultSet(ds.columns, rows, provenance=ds.uri)
    if k is OpKind.SEM_MATCH:
        src = ins[0]
        compile_predicate(op.text)
        keep = tuple(r for r in src.rows
                     if any(cls.passes(it, op.text, op.threshold) for it in item_refs_of(r, Modality.IMAGE)))
        return ResultSet(src.columns, keep, src.provenance)
    if k is OpKind.SEM_JOIN:
        left, right = ins
        out = []
        for l in left.rows:
            text = fill_placeholders(op.text, left.columns, l)
            compile_predicate(text)
            for r in right.rows:
                if any(cls.passes(it, text, op.threshold) for it in item_refs_of(r, Modality.IMAGE)):
                    out.append(l + r)
        return ResultSet(left.columns + right.columns, tuple(out))
    if k is OpKind.SEM_EXTRACT:
        src = ins[0]
        rows = []
        for r in src.rows:
            refs = item_refs_of(r, Modality.IMAGE)
            vals = provider.extract(refs[0], op.fields) if refs else {}
            rows.append(r + tuple(vals.get(f) for f in op.fields))
        return ResultSet(src.columns + tuple(f"extract.{f}" for f in op.fields), tuple(rows), src.provenance)
    raise ToolError(f"image server cannot evaluate {k.value}", P.INVALID_PARAMS)


def image_dataset_ref(name: str) -> DatasetRef:
    return DatasetRef(name, Modality.IMAGE, f"lake://{name}")


def make_image_server(provider: VisionProvider, server_id: str = "image-server",
                      datasets: Sequence[str] = ("photos",)) -> MCPServer:
    server = MCPServer(server_id, "image predicate evaluation over a vision provider")
    results = ResultStore(server_id)
    install_result_tools(server, results)

    def items_of(dataset: str) -> list[str]:
        lister = getattr(provider, "items", None)
        if lister is None:
            raise ToolError(f"provider cannot list items of {dataset!r}", P.TOOL_ERROR)
        return lister()

    def evaluator(_ctx):
        def run(node, op, ins):
            if op.kind is not OpKind.SCAN and op.modality is not Modality.IMAGE:
                raise ToolError(f"{op.kind.value} on {op.modality} is not served here", P.INVALID_PARAMS)
            try:
                return evaluate_image_node(provider, op, ins, items_of)
            except PredicateCompileError as exc:
                raise ToolError(str(exc), P.INVALID_PARAMS, {"node": node})
            except UnresolvableItemError as exc:
                raise ToolError(str(exc), P.TOOL_ERROR, {"node": node, "type": "UnresolvableItem"})
            except ProviderUnavailable as exc:
                raise ToolError(str(exc), P.TOOL_ERROR, {"node": node, "type": "ProviderUnavailable"})
        return run

    install_execute_tool(server, "image.execute", results, evaluator)

    def _items(args) -> list[ItemRef]:
        out = []
        for it in args.get("items", []):
            if isinstance(it, dict) and "$ref" in it:
                ds, item, _ = it["$ref"]
            elif isinstance(it, dict):
                ds, item = it.get("dataset", "photos"), it["id"]
            else:
                ds, item = "photos", str(it)
            out.append(ItemRef(ds, str(item), Modality.IMAGE))
        return out

    def match(args, _ctx):
        try:
            return image_match(_items(args), args["predicate"], provider).to_json()
        except PredicateCompileError as exc:
            raise ToolError(str(exc), P.INVALID_PARAMS)
        except (UnresolvableItemError, ProviderUnavailable) as exc:
            raise ToolError(str(exc), P.TOOL_ERROR)

    def extract(args, _ctx):
        fields = list(args.get("fields", []))
        rows = []
        try:
            for it in _items(args):
                vals = provider.extract(it, fields)
                rows.append((it,) + tuple(vals.get(f) for f in fields))
        except (PredicateCompileError, UnresolvableItemError, ProviderUnavailable) as exc:
            raise ToolError(str(exc), P.TOOL_ERROR)
        return ResultSet(("item",) + tuple(fields), tuple(rows)).to_json()

    install_catalog_tool(server, lambda: [image_dataset_ref(ds) for ds in datasets])
    server.add_tool("image.match", match, description="Classify images against a predicate.")
    server.add_tool("image.extract", extract, description="Extract object counts from images.")
    for ds in datasets:
        server.add_resource(f"lake://{ds}", ds)
    return server
