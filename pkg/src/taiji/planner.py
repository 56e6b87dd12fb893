"""Sampling-based cost optimizer.

Operators are profiled on small samples (selectivity and per-tuple wall
time); the profiles feed a latency cost model that propagates cardinalities
through a plan. Candidate plans come from reordering runs of commuting
predicate operators and pushing filters below joins; the cheapest candidate
wins, ties going to the smaller canonical signature.
"""

from __future__ import annotations

import itertools
import json
import math
import threading
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Optional, Sequence

from . import expr as E
from .algebra import (
    PREDICATE_KINDS,
    OpKind,
    Operator,
    QueryPlan,
    check_plan,
    node_signatures,
    output_columns,
    plan_signature,
    topological_order,
)

DEFAULT_SAMPLE_SIZE = 32
DEFAULT_JOIN_SELECTIVITY = 0.1
DEFAULT_TTL_SECONDS = 600.0
EXHAUSTIVE_CHAIN_LIMIT = 6


@dataclass(frozen=True)
class CostProfile:
    operator_signature: str
    sample_size: int
    selectivity: float
    per_tuple_latency: float  # microseconds
    measured_at: float = 0.0  # unix seconds

    def __post_init__(self):
        if self.sample_size < 1:
            raise ValueError("sample_size must be >= 1")
        if not 0.0 <= self.selectivity <= 1.0:
            raise ValueError("selectivity must lie in [0, 1]")
        if self.per_tuple_latency < 0:
            raise ValueError("per_tuple_latency must be >= 0")


def smoothed_selectivity(passed: int, sampled: int) -> float:
    """Laplace-smoothed pass rate; never exactly 0 or 1."""
    return (passed + 1) / (sampled + 2)


def sample_operator(
    op: Operator,
    sample: Sequence,
    executor: Callable[[Operator, Sequence], Sequence],
    clock: Callable[[], float] = time.perf_counter,
) -> CostProfile:
    """Run ``op`` on ``sample`` through ``executor`` and profile it.

    ``executor`` returns the tuples that pass; its exceptions propagate.
    """
    k = len(sample)
    if k < 1:
        raise ValueError("sample must hold at least one tuple")
    start = clock()
    passed = executor(op, sample)
    elapsed = clock() - start
    n_pass = passed if isinstance(passed, int) else len(passed)
    return CostProfile(
        operator_signature=op.signature(),
        sample_size=k,
        selectivity=smoothed_selectivity(n_pass, k),
        per_tuple_latency=max(elapsed, 0.0) * 1e6 / k,
        measured_at=time.time(),
    )


class CostModel:
    """Profiles keyed by operator signature, with a fallback default.

    Reads are lock-free dictionary lookups; writers serialize on a lock and
    swap in a new mapping so readers always see a consistent snapshot.
    """

    def __init__(
        self,
        profiles: Optional[Mapping[str, CostProfile]] = None,
        default_profile: Optional[CostProfile] = None,
        join_selectivity: float = DEFAULT_JOIN_SELECTIVITY,
        ttl_seconds: float = DEFAULT_TTL_SECONDS,
    ):
        self._profiles: dict[str, CostProfile] = dict(profiles or {})
        self.default_profile = default_profile or CostProfile("*", 1, 0.5, 1.0)
        self.join_selectivity = join_selectivity
        self.ttl_seconds = ttl_seconds
        self._write_lock = threading.Lock()

    @property
    def profiles(self) -> Mapping[str, CostProfile]:
        return self._profiles

    def get(self, signature: str) -> Optional[CostProfile]:
        return self._profiles.get(signature)

    def lookup(self, signature: str) -> CostProfile:
        return self._profiles.get(signature, self.default_profile)

    def put(self, profile: CostProfile) -> None:
        with self._write_lock:
            updated = dict(self._profiles)
            updated[profile.operator_signature] = profile
            self._profiles = updated

    def needs_sampling(self, signature: str, now: Optional[float] = None) -> bool:
        prof = self._profiles.get(signature)
        if prof is None:
            return True
        now = time.time() if now is None else now
        return now - prof.measured_at > self.ttl_seconds

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for sig in sorted(self._profiles):
                fh.write(json.dumps(asdict(self._profiles[sig]), sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path, **kwargs) -> "CostModel":
        model = cls(**kwargs)
        p = Path(path)
        if p.exists():
            with open(p, encoding="utf-8") as fh:
                for line in fh:
                    if line.strip():
                        model.put(CostProfile(**json.loads(line)))
        return model


@dataclass
class PlanCostEstimate:
    plan: QueryPlan
    total_latency: float
    per_node: dict[str, tuple[float, float]] = field(default_factory=dict)
    output_cardinality: dict[str, float] = field(default_factory=dict)


def estimate_cost(plan: QueryPlan, model: CostModel, base_cardinalities: Mapping[str, float]) -> PlanCostEstimate:
    """Propagate cardinalities in topological order and sum node latencies.

    Per node, latency = input cardinality x per-tuple latency. Scans,
    projections and limits cost nothing unless they have been profiled, so
    the default profile only prices operators that do real work.
    """
    ops = plan.ops
    out_card: dict[str, float] = {}
    per_node: dict[str, tuple[float, float]] = {}
    for node in topological_order(plan):
        op = ops[node]
        sig = op.signature()
        prof = model.get(sig)
        ins = [out_card[u] for u in plan.inputs(node)]
        k = op.kind
        if k is OpKind.SCAN:
            n_in = float(base_cardinalities[op.dataset.id])
            n_out = n_in
            lat = n_in * prof.per_tuple_latency if prof else 0.0
        elif k in (OpKind.PROJECT, OpKind.LIMIT):
            n_in = ins[0]
            n_out = n_in if k is OpKind.PROJECT else min(n_in, float(op.count))
            lat = n_in * prof.per_tuple_latency if prof else 0.0
        elif k is OpKind.JOIN:
            n_in = ins[0] + ins[1]
            sel = prof.selectivity if prof else model.join_selectivity
            n_out = ins[0] * ins[1] * sel
            lat = n_in * (prof or model.default_profile).per_tuple_latency
        elif k is OpKind.SEM_JOIN:
            n_in = ins[0] * ins[1]
            p = prof or model.default_profile
            n_out = n_in * p.selectivity
            lat = n_in * p.per_tuple_latency
        else:
            n_in = ins[0]
            p = prof or model.default_profile
            n_out = n_in if k is OpKind.SEM_EXTRACT else n_in * p.selectivity
            lat = n_in * p.per_tuple_latency
        out_card[node] = n_out
        per_node[node] = (n_in, lat)
    total = math.fsum(lat for _, lat in per_node.values())
    return PlanCostEstimate(plan, total, per_node, out_card)


# ------------------------------------------------------------ candidates

def predicate_chains(plan: QueryPlan) -> list[list[str]]:
    """Maximal runs of consecutive Filter/SemMatch nodes, bottom to top."""
    ops = plan.ops
    is_pred = {n: ops[n].kind in PREDICATE_KINDS for n in ops}

    def linked(lower: str, upper: str) -> bool:
        return is_pred[lower] and is_pred[upper] and plan.consumers(lower) == [upper]

    chains = []
    for node in topological_order(plan):
        if not is_pred[node]:
            continue
        below = plan.inputs(node)[0]
        if linked(below, node):
            continue  # not the bottom of its run
        chain = [node]
        while True:
            cons = plan.consumers(chain[-1])
            if len(cons) == 1 and linked(chain[-1], cons[0]):
                chain.append(cons[0])
            else:
                break
        chains.append(chain)
    return chains


def reorder_chain(plan: QueryPlan, chain: list[str], order: Sequence[str]) -> QueryPlan:
    """Rewire ``chain`` so its nodes appear bottom-to-top as ``order``."""
    pos = {n: i for i, n in enumerate(chain)}
    members = set(chain)
    new_edges = []
    for u, v in plan.edges:
        if u in members and v in members:
            new_edges.append((order[pos[u]], order[pos[v]]))
        elif v in members:
            new_edges.append((u, order[0]))
        elif u in members:
            new_edges.append((order[-1], v))
        else:
            new_edges.append((u, v))
    sink = order[-1] if plan.sink == chain[-1] else plan.sink
    return QueryPlan(plan.nodes, tuple(new_edges), sink)


def push_filters_below_joins(plan: QueryPlan) -> QueryPlan:
    """Move every Filter sitting in the run directly above a Join onto the
    join side that supplies all of its columns."""
    ops = plan.ops
    changed = True
    while changed:
        changed = False
        cols = output_columns(plan)
        for chain in predicate_chains(plan):
            base = plan.inputs(chain[0])[0]
            if ops[base].kind is not OpKind.JOIN:
                continue
            left, right = plan.inputs(base)
            n_left = len(cols[left])
            for node in chain:
                op = ops[node]
                if op.kind is not OpKind.FILTER:
                    continue
                sides = set()
                try:
                    for c in E.columns(op.predicate):
                        sides.add(0 if E.resolve_column(c, cols[base]) < n_left else 1)
                except KeyError:
                    continue
                if len(sides) != 1:
                    continue
                side = left if sides == {0} else right
                plan = _detach_and_insert(plan, node, below=base, above=side)
                changed = True
                break
            if changed:
                break
    return plan


def _detach_and_insert(plan: QueryPlan, node: str, below: str, above: str) -> QueryPlan:
    """Remove unary ``node`` from its position and splice it onto the edge
    ``above -> below``."""
    (src,) = plan.inputs(node)
    edges = []
    for u, v in plan.edges:
        if v == node:
            continue
        if u == node:
            edges.append((src, v))
        elif u == above and v == below:
            edges.append((above, node))
            edges.append((node, below))
        else:
            edges.append((u, v))
    sink = src if plan.sink == node else plan.sink
    return QueryPlan(plan.nodes, tuple(edges), sink)


def _greedy_order(plan: QueryPlan, chain: list[str], model: Optional[CostModel]) -> list[str]:
    """Classic predicate ordering: highest (1 - selectivity) / cost first."""
    model = model or CostModel()
    sigs = node_signatures(plan)
    ops = plan.ops

    def rank(n: str) -> tuple:
        p = model.lookup(ops[n].signature())
        drop = 1.0 - p.selectivity
        r = math.inf if p.per_tuple_latency == 0 else drop / p.per_tuple_latency
        return (-r, ops[n].signature(), sigs[n])

    return sorted(chain, key=rank)


def enumerate_candidates(plan: QueryPlan, model: Optional[CostModel] = None) -> list[QueryPlan]:
    """Semantically equivalent plans, deduplicated by signature.

    Chains of up to six commuting predicates are permuted exhaustively;
    longer chains contribute their original order and a greedy order.
    """
    check_plan(plan)
    variants = [plan]
    pushed = push_filters_below_joins(plan)
    if plan_signature(pushed) != plan_signature(plan):
        variants.append(pushed)

    out: dict[str, QueryPlan] = {}
    for variant in variants:
        chains = predicate_chains(variant)
        choices = []
        for chain in chains:
            if len(chain) <= EXHAUSTIVE_CHAIN_LIMIT:
                choices.append(list(itertools.permutations(chain)))
            else:
                choices.append([tuple(chain), tuple(_greedy_order(variant, chain, model))])
        for combo in itertools.product(*choices):
            cand = variant
            for chain, order in zip(chains, combo):
                cand = reorder_chain(cand, chain, order)
            out.setdefault(plan_signature(cand), cand)
    return [out[s] for s in sorted(out)]


def choose_plan(
    plan: QueryPlan,
    model: CostModel,
    base_cardinalities: Mapping[str, float],
    candidates: Optional[Iterable[QueryPlan]] = None,
) -> tuple[QueryPlan, PlanCostEstimate]:
    """Cheapest candidate; equal costs resolve to the least signature."""
    cands = list(candidates) if candidates is not None else enumerate_candidates(plan, model)
    scored = [(estimate_cost(c, model, base_cardinalities), plan_signature(c)) for c in cands]
    best_cost = min(est.total_latency for est, _ in scored)
    tol = 1e-9 * max(1.0, abs(best_cost))
    est, _ = min(((est, sig) for est, sig in scored if est.total_latency <= best_cost + tol),
                 key=lambda pair: pair[1])
    return est.plan, est
