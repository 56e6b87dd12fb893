"""Model refresh bookkeeping driven by resource subscriptions.

Three job kinds cover the three data operations: *Reinforce* (importance
weighted intents mined from the query log), *Insert* (instruction samples
synthesized from new data) and *Unlearn* (sample ids to forget). Jobs are
declarative; external trainers consume them from a JSON-lines outbox.

:class:`RidgeScorer` is the in-tree model whose deletion is exact: it
keeps the inverse of the regularized Gram matrix and applies rank-one
Sherman-Morrison updates for every added or removed sample.
"""

from __future__ import annotations

import hashlib
import json
import logging
import threading
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Optional, Sequence

import numpy as np

from . import expr as E
from .algebra import Operator, QueryPlan, decode_value, plan_signature
from .augmentor import KnowledgeUnit, Status
from .querylog import QueryLog, QueryLogEntry

log = logging.getLogger(__name__)


# ---------------------------------------------------------------- intents

def _strip_expr(e: E.Expr) -> E.Expr:
    if isinstance(e, E.Cmp):
        def term(t):
            return E.Lit("?") if isinstance(t, E.Lit) else t
        return E.Cmp(e.op, term(e.left), term(e.right))
    if isinstance(e, E.And):
        return E.And(_strip_expr(e.left), _strip_expr(e.right))
    if isinstance(e, E.Or):
        return E.Or(_strip_expr(e.left), _strip_expr(e.right))
    if isinstance(e, E.Not):
        return E.Not(_strip_expr(e.operand))
    return e


def intent_of(plan: QueryPlan) -> str:
    """Plan signature with every literal (constants, predicate texts,
    thresholds, limit counts) replaced by a placeholder."""
    nodes = []
    for node, op in plan.nodes:
        doc = op.to_json()
        if "text" in doc:
            doc["text"] = "?"
        if "threshold" in doc:
            doc["threshold"] = 0.0
        if "count" in doc:
            doc["count"] = 0
        stripped = Operator.from_json(doc)
        if stripped.predicate is not None:
            stripped = Operator.from_json({**doc, "predicate": E.to_json(_strip_expr(stripped.predicate))})
        nodes.append((node, stripped))
    return plan_signature(QueryPlan(tuple(nodes), plan.edges, plan.sink))


def analyze_intents(log: QueryLog | Iterable[QueryLogEntry],
                    window: Optional[tuple[float, float]] = None) -> list[tuple[str, float]]:
    """Intent patterns in ``window`` (inclusive timestamps) with frequency
    weights summing to 1, heaviest first (ties by pattern). Entries
    without a plan are skipped."""
    lo, hi = window if window is not None else (float("-inf"), float("inf"))
    entries = log.entries(lo, hi) if isinstance(log, QueryLog) else [e for e in log if lo <= e.timestamp <= hi]
    counts = Counter(intent_of(QueryPlan.from_json(e.plan)) for e in entries if e.plan)
    total = sum(counts.values())
    if not total:
        return []
    return sorted(((k, v / total) for k, v in counts.items()), key=lambda kv: (-kv[1], kv[0]))


# ---------------------------------------------------------------- samples

TEMPLATES = (
    ("Passage: {content}\nWhat does the lake record about {subject}?", "{content}"),
    ("State the fact about {subject} given in this passage: {content}", "{content}"),
)


@dataclass(frozen=True)
class Sample:
    prompt: str
    target: str
    weight: float = 1.0

    @property
    def id(self) -> str:
        return hashlib.sha256(json.dumps([self.prompt, self.target]).encode()).hexdigest()[:16]

    def to_json(self) -> dict:
        return {"id": self.id, "input": self.prompt, "target": self.target, "weight": self.weight}


def synthesize_insert_samples(units: Sequence[KnowledgeUnit],
                              templates: Sequence[tuple[str, str]] = TEMPLATES) -> list[Sample]:
    """One instruction sample per (unit, template)."""
    out = []
    for u in units:
        if u.status != Status.RETAINED:
            raise ValueError(f"unit {u.id} is {u.status}; only retained units become samples")
        subject = ", ".join(name for name, _ in u.entities) or u.id
        for prompt, target in templates:
            out.append(Sample(prompt.format(subject=subject, content=u.content),
                              target.format(subject=subject, content=u.content)))
    return out


def synthesize_row_samples(table: str, columns: Sequence[str], rows: Sequence[Sequence[Any]],
                           templates: Sequence[tuple[str, str]] = TEMPLATES) -> list[Sample]:
    """Instruction samples for structured tuples: the tuple renders as
    ``col: value`` pairs and its first column names the subject."""
    out = []
    for r in rows:
        vals = [decode_value(v) for v in r]
        content = f"{table} record: " + "; ".join(f"{c}: {v}" for c, v in zip(columns, vals))
        subject = f"{table} {columns[0]}={vals[0]}" if columns else table
        for prompt, target in templates:
            out.append(Sample(prompt.format(subject=subject, content=content),
                              target.format(subject=subject, content=content)))
    return out


# ---------------------------------------------------------------- ridge scorer

class UnknownSampleError(KeyError):
    pass


class SingularDowndateError(ArithmeticError):
    pass


def _sample_key(x: np.ndarray, y: float) -> str:
    return hashlib.sha256(np.asarray(x, dtype=np.float64).tobytes() + np.float64(y).tobytes()).hexdigest()


class RidgeScorer:
    """Linear scorer ``w = (X^T X + lam I)^-1 X^T y`` with exact add/remove.

    The inverse is maintained by rank-one updates; the weights then get one
    step of iterative refinement against the exactly accumulated Gram
    summary, which keeps them at closed-form accuracy after long sequences
    of updates.
    """

    def __init__(self, dim: int, lam: float = 1e-3):
        if dim < 1:
            raise ValueError("dim must be >= 1")
        if lam <= 0:
            raise ValueError("the regularizer must be positive")
        self.dim = dim
        self.lam = float(lam)
        self.gram = np.zeros((dim, dim))
        self.targets = np.zeros(dim)
        self.inverse = np.eye(dim) / self.lam
        self.weights = np.zeros(dim)
        self.seen: Counter = Counter()
        self._lock = threading.Lock()

    def _refresh(self) -> None:
        w = self.inverse @ self.targets
        residual = self.targets - (self.gram @ w + self.lam * w)
        self.weights = w + self.inverse @ residual

    def _check(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64).reshape(-1)
        if x.shape != (self.dim,):
            raise ValueError(f"expected a {self.dim}-vector, got shape {x.shape}")
        return x

    def fit(self, x, y: float) -> "RidgeScorer":
        x = self._check(x)
        with self._lock:
            Ax = self.inverse @ x
            self.inverse -= np.outer(Ax, Ax) / (1.0 + x @ Ax)
            self.gram += np.outer(x, x)
            self.targets += y * x
            self.seen[_sample_key(x, y)] += 1
            self._refresh()
        return self

    def fit_many(self, X, Y) -> "RidgeScorer":
        for x, y in zip(np.asarray(X, dtype=np.float64), np.asarray(Y, dtype=np.float64)):
            self.fit(x, float(y))
        return self

    def unlearn(self, x, y: float) -> "RidgeScorer":
        """Remove one previously fitted sample (rank-one downdate)."""
        x = self._check(x)
        key = _sample_key(x, y)
        with self._lock:
            if self.seen[key] <= 0:
                raise UnknownSampleError("sample was never fitted (or already removed)")
            Ax = self.inverse @ x
            denom = 1.0 - x @ Ax
            if denom <= 1e-12:
                raise SingularDowndateError(f"downdate denominator {denom:.3e}")
            self.inverse += np.outer(Ax, Ax) / denom
            self.gram -= np.outer(x, x)
            self.targets -= y * x
            self.seen[key] -= 1
            if not self.seen[key]:
                del self.seen[key]
            self._refresh()
        return self

    refit = fit

    def predict(self, X) -> np.ndarray:
        return np.asarray(X, dtype=np.float64) @ self.weights

    def to_json(self) -> dict:
        return {"dim": self.dim, "lam": self.lam, "gram": self.gram.tolist(), "targets": self.targets.tolist(),
                "inverse": self.inverse.tolist(), "seen": dict(self.seen)}

    @classmethod
    def from_json(cls, doc: dict) -> "RidgeScorer":
        s = cls(int(doc["dim"]), float(doc["lam"]))
        s.gram = np.asarray(doc["gram"], dtype=np.float64)
        s.targets = np.asarray(doc["targets"], dtype=np.float64)
        s.inverse = np.asarray(doc["inverse"], dtype=np.float64)
        s.seen = Counter(doc.get("seen", {}))
        s._refresh()
        return s

    def save(self, path: str | Path) -> None:
        p = Path(path)
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(json.dumps(self.to_json()), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "RidgeScorer":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def ridge_closed_form(X, Y, lam: float) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64).reshape(-1, np.shape(X)[-1] if np.ndim(X) > 1 else 1)
    d = X.shape[1]
    return np.linalg.solve(X.T @ X + lam * np.eye(d), X.T @ np.asarray(Y, dtype=np.float64))


# ---------------------------------------------------------------- jobs

JOB_KINDS = ("Reinforce", "Insert", "Unlearn")


@dataclass(frozen=True)
class RefreshJob:
    kind: str
    samples: tuple[tuple[str, str, float], ...]  # (input, target, weight)
    target_server: str
    idempotency_key: str
    sample_ids: tuple[str, ...] = ()
    cause: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.kind not in JOB_KINDS:
            raise ValueError(f"job kind must be one of {JOB_KINDS}")
        if any(w < 0 for _, _, w in self.samples):
            raise ValueError("sample weights must be >= 0")
        if self.kind == "Reinforce" and self.samples and abs(sum(w for _, _, w in self.samples) - 1.0) > 1e-9:
            raise ValueError("Reinforce weights must sum to 1")

    def to_json(self) -> dict:
        return {"kind": self.kind, "samples": [list(s) for s in self.samples], "target_server": self.target_server,
                "idempotency_key": self.idempotency_key, "sample_ids": list(self.sample_ids),
                "cause": self.cause}

    @classmethod
    def from_json(cls, doc: dict) -> "RefreshJob":
        return cls(doc["kind"], tuple((s[0], s[1], float(s[2])) for s in doc["samples"]), doc["target_server"],
                   doc["idempotency_key"], tuple(doc.get("sample_ids", ())), dict(doc.get("cause", {})))


def make_job(kind: str, samples: Sequence[tuple[str, str, float]], target_server: str,
             cause: Mapping, sample_ids: Sequence[str] = ()) -> RefreshJob:
    """Build a job whose key is the SHA-256 of its canonical content."""
    body = {"kind": kind, "samples": [list(s) for s in samples], "target_server": target_server,
            "sample_ids": list(sample_ids), "cause": dict(cause)}
    key = hashlib.sha256(json.dumps(body, sort_keys=True, default=str).encode()).hexdigest()
    return RefreshJob(kind, tuple(tuple(s) for s in samples), target_server, key, tuple(sample_ids), dict(cause))


class Outbox:
    """JSON-lines job outbox with set semantics on idempotency keys."""

    def __init__(self, path: Optional[str | Path] = None):
        self.path = Path(path) if path is not None else None
        self._records: list[dict] = []
        self._keys: set[str] = set()
        self._lock = threading.Lock()
        if self.path is not None and self.path.exists():
            for line in self.path.read_text(encoding="utf-8").splitlines():
                if line.strip():
                    rec = json.loads(line)
                    self._records.append(rec)
                    self._keys.add(rec["job"]["idempotency_key"])

    def _flush(self) -> None:
        if self.path is None:
            return
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in self._records), encoding="utf-8")

    def put(self, job: RefreshJob) -> bool:
        """Enqueue unless a job with the same key was ever enqueued."""
        with self._lock:
            if job.idempotency_key in self._keys:
                return False
            self._keys.add(job.idempotency_key)
            self._records.append({"state": "pending", "job": job.to_json()})
            self._flush()
            return True

    def pending(self) -> list[RefreshJob]:
        with self._lock:
            return [RefreshJob.from_json(r["job"]) for r in self._records if r["state"] == "pending"]

    def drain(self, handler: Optional[Callable[[RefreshJob], None]] = None) -> list[RefreshJob]:
        """Hand every pending job to ``handler`` and mark it drained. A job
        whose handler raises stays pending."""
        done = []
        with self._lock:
            for r in self._records:
                if r["state"] != "pending":
                    continue
                job = RefreshJob.from_json(r["job"])
                if handler is not None:
                    try:
                        handler(job)
                    except Exception as exc:
                        log.warning("job %s failed: %s", job.idempotency_key[:12], exc)
                        continue
                r["state"] = "drained"
                done.append(job)
            self._flush()
        return done

    def __len__(self) -> int:
        return len(self._records)


# ---------------------------------------------------------------- dispatch

@dataclass
class RefreshContext:
    """What the notification handler needs besides the notification.

    ``servers`` maps resource uri prefixes (``lake://furniture``) to the
    server publishing them; ``log`` supplies the Reinforce window.
    """

    servers: dict[str, str] = field(default_factory=dict)
    log: Optional[QueryLog] = None
    outbox: Outbox = field(default_factory=Outbox)
    templates: Sequence[tuple[str, str]] = TEMPLATES

    def server_for(self, uri: str) -> Optional[str]:
        best = None
        for prefix, sid in self.servers.items():
            if uri.startswith(prefix) and (best is None or len(prefix) > len(best[0])):
                best = (prefix, sid)
        return best[1] if best else None


LOG_URI = "log://queries"


def on_resource_change(notification: Mapping, context: RefreshContext) -> Optional[RefreshJob]:
    """Turn one ``resources/updated`` notification into a job and enqueue it.

    Returns the job (also when it was a duplicate), or None for an
    unmatched uri or a change kind with nothing to do.
    """
    uri = notification.get("uri", "")
    server = context.server_for(uri)
    if server is None:
        log.warning("ignoring change on unmatched uri %r", uri)
        return None
    change = dict(notification.get("change") or {})
    kind = change.get("kind")
    cause = {"uri": uri, "version": notification.get("version"), "kind": kind}
    if uri == LOG_URI or kind == "rollover":
        if context.log is None:
            return None
        lo, hi = change.get("since", float("-inf")), change.get("until", float("inf"))
        intents = analyze_intents(context.log, (lo, hi))
        if not intents:
            return None
        cause.update(since=lo, until=hi)
        job = make_job("Reinforce", [(pattern, "", w) for pattern, w in intents], server, cause)
    elif kind in ("insert", "delete"):
        if "units" in change:
            units = [KnowledgeUnit.from_json(u) for u in change["units"]]
            samples = synthesize_insert_samples(units, context.templates)
        else:
            table = uri.split("://", 1)[-1]
            samples = synthesize_row_samples(table, change.get("columns", ()), change.get("rows", ()),
                                             context.templates)
        if kind == "insert":
            job = make_job("Insert", [(s.prompt, s.target, s.weight) for s in samples], server, cause,
                           [s.id for s in samples])
        else:
            job = make_job("Unlearn", [], server, cause, [s.id for s in samples])
    else:
        log.info("no refresh needed for %r change on %s", kind, uri)
        return None
    context.outbox.put(job)
    return job


def attach(client, uris: Sequence[str], context: RefreshContext, server_id: str) -> None:
    """Subscribe ``client`` to ``uris`` and route their notifications here.

    Notifications from one client arrive on its reader thread in order, so
    each subscription has a single consumer.
    """
    for uri in uris:
        context.servers.setdefault(uri, server_id)
        client.subscribe(uri, lambda params: on_resource_change(params, context))
