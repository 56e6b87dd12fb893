"""Operator-to-server routing over a hierarchy of servers."""

from __future__ import annotations

from dataclasses import dataclass, field

from .algebra import Modality, OpKind, QueryPlan, check_plan, topological_order


class UnroutableError(LookupError):
    def __init__(self, node: str, kind: OpKind, modality: Modality, reason: str = "no route"):
        super().__init__(f"cannot route node {node}: {kind.value} on {modality.value} ({reason})")
        self.node = node
        self.kind = kind
        self.modality = modality


@dataclass
class RoutingTable:
    """Maps (operator kind, modality) to a server id.

    ``hierarchy`` maps an intermediate server to its children. A leaf
    server's ``capabilities`` list the pairs it executes itself; an
    intermediate server delegates to the first child (in sorted order) whose
    subtree can execute the pair.
    """

    entries: dict[tuple[OpKind, Modality], str] = field(default_factory=dict)
    hierarchy: dict[str, list[str]] = field(default_factory=dict)
    capabilities: dict[str, set[tuple[OpKind, Modality]]] = field(default_factory=dict)

    def __post_init__(self):
        parents: dict[str, str] = {}
        for parent, children in self.hierarchy.items():
            for c in children:
                if c in parents:
                    raise ValueError(f"server {c} has two parents ({parents[c]}, {parent})")
                parents[c] = parent
        # Reject cycles: walking up from any node must terminate.
        for start in parents:
            seen = {start}
            node = start
            while node in parents:
                node = parents[node]
                if node in seen:
                    raise ValueError(f"routing hierarchy has a cycle through {node}")
                seen.add(node)

    def is_leaf(self, server: str) -> bool:
        return not self.hierarchy.get(server)

    def covers(self, server: str, pair: tuple[OpKind, Modality]) -> bool:
        if self.is_leaf(server):
            return pair in self.capabilities.get(server, set())
        return any(self.covers(c, pair) for c in self.hierarchy[server])

    def resolve(self, kind: OpKind, modality: Modality, node: str = "?") -> str:
        pair = (kind, modality)
        server = self.entries.get(pair)
        if server is None:
            raise UnroutableError(node, kind, modality)
        while not self.is_leaf(server):
            for child in sorted(self.hierarchy[server]):
                if self.covers(child, pair):
                    server = child
                    break
            else:
                raise UnroutableError(node, kind, modality, f"no child of {server} handles it")
        if self.capabilities and pair not in self.capabilities.get(server, set()):
            raise UnroutableError(node, kind, modality, f"leaf {server} does not handle it")
        return server


def node_modalities(plan: QueryPlan) -> dict[str, Modality]:
    """Modality each node operates on.

    Scans take their dataset's modality, semantic operators their declared
    one, and every other operator inherits from its first input.
    """
    ops = plan.ops
    out: dict[str, Modality] = {}
    for node in topological_order(plan):
        op = ops[node]
        if op.kind is OpKind.SCAN:
            out[node] = op.dataset.modality
        elif op.modality is not None:
            out[node] = op.modality
        else:
            out[node] = out[plan.inputs(node)[0]]
    return out


def route(plan: QueryPlan, table: RoutingTable) -> dict[str, str]:
    """Assign every node to a leaf server."""
    check_plan(plan)
    mods = node_modalities(plan)
    ops = plan.ops
    return {node: table.resolve(ops[node].kind, mods[node], node) for node in plan.node_ids()}


def default_routing() -> RoutingTable:
    """The reference federation: relational, vector and image leaf servers.

    Unstructured modalities go through an intermediate ``unstructured``
    server; semi-structured data is delegated by ``semistructured`` to the
    relational engine, which reads JSON-lines tables. Tuple-level operators
    (filter, project, limit, join) always run on the relational engine,
    whatever modality their input came from.
    """
    tuple_kinds = (OpKind.FILTER, OpKind.PROJECT, OpKind.LIMIT, OpKind.JOIN)
    entries: dict[tuple[OpKind, Modality], str] = {}
    caps: dict[str, set] = {"rel-server": set(), "image-server": set(), "vector-server": set()}

    entries[(OpKind.SCAN, Modality.RELATIONAL)] = "rel-server"
    entries[(OpKind.SCAN, Modality.SEMI_STRUCTURED)] = "semistructured"
    caps["rel-server"].update({(OpKind.SCAN, Modality.RELATIONAL), (OpKind.SCAN, Modality.SEMI_STRUCTURED)})
    for m in (Modality.TEXT, Modality.VECTOR):
        entries[(OpKind.SCAN, m)] = "unstructured"
        caps["vector-server"].add((OpKind.SCAN, m))
    for k in tuple_kinds:
        for m in Modality:
            entries[(k, m)] = "semistructured" if m is Modality.SEMI_STRUCTURED else "rel-server"
            caps["rel-server"].add((k, m))
    entries[(OpKind.SCAN, Modality.IMAGE)] = "unstructured"
    caps["image-server"].add((OpKind.SCAN, Modality.IMAGE))
    for k in (OpKind.SEM_MATCH, OpKind.SEM_JOIN, OpKind.SEM_EXTRACT):
        entries[(k, Modality.IMAGE)] = "unstructured"
        caps["image-server"].add((k, Modality.IMAGE))
    for m in (Modality.TEXT, Modality.VECTOR):
        entries[(OpKind.SEM_MATCH, m)] = "unstructured"
        caps["vector-server"].add((OpKind.SEM_MATCH, m))
    return RoutingTable(
        entries=entries,
        hierarchy={"unstructured": ["image-server", "vector-server"], "semistructured": ["rel-server"]},
        capabilities=caps,
    )
