"""Feedback-driven retrieval loop: score, refine, repeat.

Scoring dimensions, all in [0, 1]:

* coverage: fraction of the task's terms found in at least one result text;
* redundancy: mean pairwise cosine similarity of result vectors (0 below two
  results);
* ambiguity: ``1 - (s_k - s_{k+1}) / s_k`` with ``s_k`` the last kept score
  and ``s_{k+1}`` the best candidate left out (0 when nothing was left out);
* informativeness: mean result score.

``composite = w . (coverage, 1 - redundancy, 1 - ambiguity, informativeness)``.

Refinement is a fixed rule table, first match wins: low coverage broadens
the task, high redundancy asks for diversity, high ambiguity widens the
candidate pool and re-ranks, anything else asks the host for clarification.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from .algebra import ResultSet
from .embedding import tokenize

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RetrievalTask:
    query: str
    terms: tuple[str, ...]
    term_weights: tuple[float, ...] = ()
    k: int = 10
    threshold: float = 0.5          # minimum similarity a result must reach
    fetch: int = 0                  # candidate pool; 0 means k
    diversity: Optional[float] = None  # max pairwise similarity among results
    rerank: bool = False
    dataset: str = ""
    filter: Optional[dict] = None

    def __post_init__(self):
        if not self.terms:
            raise ValueError("a retrieval task needs at least one predicate term")
        if self.term_weights and len(self.term_weights) != len(self.terms):
            raise ValueError("one weight per term")
        if self.k < 1:
            raise ValueError("k must be >= 1")

    @classmethod
    def from_query(cls, query: str, **kw) -> "RetrievalTask":
        terms = tuple(dict.fromkeys(tokenize(query)))
        return cls(query, terms, **kw)

    @property
    def weights(self) -> tuple[float, ...]:
        return self.term_weights or (1.0,) * len(self.terms)

    @property
    def pool(self) -> int:
        return max(self.fetch, self.k)

    def to_json(self) -> dict:
        return {"query": self.query, "terms": list(self.terms), "term_weights": list(self.term_weights),
                "k": self.k, "threshold": self.threshold, "fetch": self.fetch,
                "diversity": self.diversity, "rerank": self.rerank, "dataset": self.dataset,
                "filter": self.filter}

    @classmethod
    def from_json(cls, doc: dict) -> "RetrievalTask":
        terms = doc.get("terms") or tokenize(doc["query"])
        return cls(doc["query"], tuple(dict.fromkeys(terms)), tuple(doc.get("term_weights") or ()),
                   int(doc.get("k", 10)), float(doc.get("threshold", 0.5)), int(doc.get("fetch", 0)),
                   doc.get("diversity"), bool(doc.get("rerank", False)), doc.get("dataset", ""),
                   doc.get("filter"))


@dataclass(frozen=True)
class LoopConfig:
    weights: tuple[float, float, float, float] = (0.4, 0.2, 0.2, 0.2)
    threshold: float = 0.7
    budget: int = 4
    delta: float = 0.1
    coverage_min: float = 0.5
    redundancy_max: float = 0.8
    ambiguity_max: float = 0.8

    def __post_init__(self):
        if len(self.weights) != 4 or any(w < 0 for w in self.weights):
            raise ValueError("four non-negative weights required")
        if not math.isclose(sum(self.weights), 1.0, abs_tol=1e-9):
            raise ValueError("weights must sum to 1")
        if self.budget < 1:
            raise ValueError("budget must be >= 1")

    @classmethod
    def from_dict(cls, doc: dict) -> "LoopConfig":
        doc = dict(doc)
        if "weights" in doc:
            doc["weights"] = tuple(doc["weights"])
        return cls(**doc)


@dataclass(frozen=True)
class EvidenceScore:
    coverage: float
    redundancy: float
    ambiguity: float
    informativeness: float
    composite: float

    def to_json(self) -> dict:
        return {"coverage": self.coverage, "redundancy": self.redundancy, "ambiguity": self.ambiguity,
                "informativeness": self.informativeness, "composite": self.composite}


def _clip(x: float) -> float:
    return float(min(1.0, max(0.0, x)))


def composite_of(cov: float, red: float, amb: float, inf: float,
                 weights: Sequence[float] = LoopConfig.weights) -> float:
    w = weights
    return _clip(w[0] * cov + w[1] * (1 - red) + w[2] * (1 - amb) + w[3] * inf)


def score(results: ResultSet, task: RetrievalTask, overflow: Sequence[float] = (),
          weights: Sequence[float] = LoopConfig.weights) -> EvidenceScore:
    """Score a result set with columns ``score`` and optionally ``text`` and
    ``vector``; ``overflow`` holds the scores of candidates that did not make
    the cut, best first."""
    n = len(results)
    if n == 0:
        return EvidenceScore(0.0, 0.0, 0.0, 0.0, composite_of(0.0, 0.0, 0.0, 0.0, weights))
    cols = results.columns
    scores = [float(s) for s in results.column("score")]
    if "text" in cols:
        seen = set()
        for t in results.column("text"):
            seen.update(tokenize(str(t)))
        hit = sum(1 for term in task.terms if set(tokenize(term)) <= seen)
        coverage = hit / len(task.terms)
    else:
        coverage = 0.0
    redundancy = 0.0
    if "vector" in cols and n >= 2:
        V = np.asarray(results.column("vector"), dtype=np.float64)
        norms = np.linalg.norm(V, axis=1, keepdims=True)
        norms[norms == 0] = 1.0
        V = V / norms
        S = V @ V.T
        iu = np.triu_indices(n, 1)
        redundancy = _clip(float(S[iu].mean()))
    ambiguity = 0.0
    if overflow:
        s_k = min(scores)
        s_next = float(overflow[0])
        margin = (s_k - s_next) / s_k if s_k > 1e-12 else 0.0
        ambiguity = _clip(1.0 - _clip(margin))
    informativeness = _clip(sum(scores) / n)
    return EvidenceScore(coverage, redundancy, ambiguity, informativeness,
                         composite_of(coverage, redundancy, ambiguity, informativeness, weights))


@dataclass
class RefinementState:
    task: RetrievalTask
    budget: int
    threshold: float
    iteration: int = 0
    best: Optional[tuple[ResultSet, EvidenceScore]] = None
    history: list[tuple[RetrievalTask, EvidenceScore]] = field(default_factory=list)

    def record(self, task: RetrievalTask, results: ResultSet, sc: EvidenceScore) -> None:
        self.iteration += 1
        self.history.append((task, sc))
        if self.best is None or sc.composite > self.best[1].composite:
            self.best = (results, sc)


@dataclass(frozen=True)
class Refinement:
    rule: str  # broaden | diversify | rerank | clarify
    task: RetrievalTask
    detail: str = ""


def refine(state: RefinementState, sc: EvidenceScore, config: LoopConfig = LoopConfig()) -> Refinement:
    t = state.task
    if sc.coverage < config.coverage_min:
        if t.threshold > 0:
            new = round(max(0.0, t.threshold - config.delta), 10)
            return Refinement("broaden", replace(t, threshold=new), f"threshold {t.threshold} -> {new}")
        if len(t.terms) > 1:
            w = t.weights
            drop = min(range(len(t.terms)), key=lambda i: (w[i], -i))
            terms = t.terms[:drop] + t.terms[drop + 1:]
            weights = (w[:drop] + w[drop + 1:]) if t.term_weights else ()
            return Refinement("broaden", replace(t, terms=terms, term_weights=weights),
                              f"dropped term {t.terms[drop]!r}")
    if sc.redundancy > config.redundancy_max:
        cap = round(max(0.0, (t.diversity if t.diversity is not None else 1.0) - config.delta), 10)
        return Refinement("diversify", replace(t, diversity=cap), f"pairwise similarity <= {cap}")
    if sc.ambiguity > config.ambiguity_max:
        fetch = 2 * t.pool
        return Refinement("rerank", replace(t, fetch=fetch, rerank=True), f"candidate pool {fetch}")
    return Refinement("clarify", t, "all dimensions nominal, composite below threshold")


class LoopAborted(RuntimeError):
    def __init__(self, message: str, history: list):
        super().__init__(message)
        self.history = history


@dataclass
class LoopResult:
    results: ResultSet
    score: EvidenceScore
    iterations: int
    history: list[tuple[RetrievalTask, EvidenceScore]]
    trace: list[dict]

    def trace_json(self) -> str:
        return json.dumps(self.trace, sort_keys=True)


# An executor returns the kept results and the scores of the runners-up.
Executor = Callable[[RetrievalTask], tuple[ResultSet, Sequence[float]]]
# A clarifier gets the task and the latest score; it returns an amended
# query string or the literal "proceed".
Clarifier = Callable[[RetrievalTask, EvidenceScore], str]


def run_loop(task: RetrievalTask, executor: Executor, config: LoopConfig = LoopConfig(),
             clarify: Optional[Clarifier] = None) -> LoopResult:
    """Iterate until the composite reaches the threshold or the budget runs
    out; returns the best result set seen."""
    state = RefinementState(task, config.budget, config.threshold)
    trace: list[dict] = []
    while state.iteration < config.budget:
        current = state.task
        try:
            results, overflow = executor(current)
        except Exception as exc:
            raise LoopAborted(f"executor failed at iteration {state.iteration + 1}: {exc}",
                              list(state.history)) from exc
        sc = score(results, current, overflow, config.weights)
        state.record(current, results, sc)
        entry = {"iteration": state.iteration, "task": current.to_json(), "score": sc.to_json(),
                 "results": len(results)}
        trace.append(entry)
        if sc.composite >= config.threshold or state.iteration >= config.budget:
            break
        ref = refine(state, sc, config)
        entry["refinement"] = {"rule": ref.rule, "detail": ref.detail}
        nxt = ref.task
        if ref.rule == "clarify" and clarify is not None:
            answer = clarify(current, sc)
            entry["clarification"] = answer
            if answer and answer.strip().lower() != "proceed":
                nxt = replace(current, query=answer, terms=tuple(dict.fromkeys(tokenize(answer))) or current.terms,
                              term_weights=())
        state.task = nxt
    best_rs, best_sc = state.best
    return LoopResult(best_rs, best_sc, state.iteration, state.history, trace)
