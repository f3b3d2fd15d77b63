"""Subtask bank, prerequisite ontology and plan expansion.

The bank is the append-only vocabulary of canonical subtask strings. The
ontology is a directed graph ``required -> dependent`` whose edges survive a
Wilson lower-bound filter over repeated oracle answers. Expanding a goal plan
collects every goal's transitive prerequisites and enumerates topological
orders of the induced subgraph.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import networkx as nx

from .oracle import Oracle
from .tasks import Instruction

log = logging.getLogger(__name__)


class ExpansionError(ValueError):
    pass


class SubtaskBank:
    """Insertion-ordered set of canonical subtask strings; ids are positions."""

    def __init__(self, canonicals: Iterable[str] = ()):
        self._items: list[str] = []
        self._index: dict[str, int] = {}
        for c in canonicals:
            self.add(c)

    def add(self, canonical: str) -> int:
        if canonical not in self._index:
            self._index[canonical] = len(self._items)
            self._items.append(canonical)
        return self._index[canonical]

    def id_of(self, canonical: str) -> int:
        return self._index[canonical]

    def __contains__(self, canonical: str) -> bool:
        return canonical in self._index

    def __getitem__(self, i: int) -> str:
        return self._items[i]

    def __len__(self) -> int:
        return len(self._items)

    def __iter__(self):
        return iter(self._items)

    def __eq__(self, other) -> bool:
        return isinstance(other, SubtaskBank) and self._items == other._items

    @property
    def items(self) -> list[str]:
        return list(self._items)


def build_bank(
    dataset: Sequence[Instruction], oracle: Oracle
) -> tuple[SubtaskBank, dict[int, tuple[int, ...]]]:
    """Extract goals per instruction (id order), growing the bank as we go."""
    if not dataset:
        raise ValueError("dataset is empty")
    bank = SubtaskBank()
    goal_plans: dict[int, tuple[int, ...]] = {}
    for ins in sorted(dataset, key=lambda i: i.id):
        goals = oracle.extract_goals(ins, bank.items)
        if not goals:
            log.warning("instruction %d produced no goals; excluded", ins.id)
            continue
        ids = []
        for g in goals:
            gid = bank.add(g)
            if gid not in ids:
                ids.append(gid)
        goal_plans[ins.id] = tuple(ids)
    return bank, goal_plans


def wilson_lower_bound(p_hat: float, n: int, z: float = 1.96) -> float:
    if n < 1:
        raise ValueError("Wilson bound needs n >= 1")
    if not 0.0 <= p_hat <= 1.0:
        raise ValueError("p_hat must lie in [0, 1]")
    z2 = z * z
    centre = p_hat + z2 / (2 * n)
    margin = z * math.sqrt(p_hat * (1 - p_hat) / n + z2 / (4 * n * n))
    lb = (centre - margin) / (1 + z2 / n)
    return min(max(lb, 0.0), 1.0)


@dataclass(frozen=True)
class Edge:
    p_hat: float
    wilson_lb: float


@dataclass
class OntologyGraph:
    vertices: list[str]
    edges: dict[tuple[int, int], Edge] = field(default_factory=dict)

    def __post_init__(self):
        self._parents: dict[int, list[int]] | None = None

    def parents(self, v: int) -> list[int]:
        if self._parents is None:
            par: dict[int, list[int]] = {i: [] for i in range(len(self.vertices))}
            for r, t in sorted(self.edges):
                par[t].append(r)
            self._parents = par
        return self._parents[v]

    def invalidate(self) -> None:
        self._parents = None

    def edge_set(self) -> set[tuple[int, int]]:
        return set(self.edges)

    def is_acyclic(self) -> bool:
        return nx.is_directed_acyclic_graph(self._nx())

    def _nx(self) -> nx.DiGraph:
        g = nx.DiGraph()
        g.add_nodes_from(range(len(self.vertices)))
        g.add_edges_from(self.edges)
        return g

    def to_json(self) -> dict:
        return {
            "vertices": [{"id": i, "canonical": c} for i, c in enumerate(self.vertices)],
            "edges": [
                {"from": r, "to": t, "p_hat": e.p_hat, "wilson_lb": e.wilson_lb}
                for (r, t), e in sorted(self.edges.items())
            ],
        }

    @classmethod
    def from_json(cls, doc: Mapping) -> "OntologyGraph":
        verts = [v["canonical"] for v in sorted(doc["vertices"], key=lambda v: v["id"])]
        edges = {(e["from"], e["to"]): Edge(e["p_hat"], e["wilson_lb"]) for e in doc["edges"]}
        return cls(verts, edges)


def prune_cycles(graph: OntologyGraph) -> list[tuple[int, int]]:
    """Delete the weakest edge on any cycle until none remain; returns deletions."""
    removed = []
    while True:
        g = graph._nx()
        on_cycle = []
        for comp in nx.strongly_connected_components(g):
            if len(comp) < 2:
                continue
            on_cycle.extend((r, t) for (r, t) in graph.edges if r in comp and t in comp)
        if not on_cycle:
            break
        worst = min(on_cycle, key=lambda e: (graph.edges[e].wilson_lb, e))
        del graph.edges[worst]
        removed.append(worst)
    graph.invalidate()
    return removed


def build_ontology(
    bank: SubtaskBank,
    oracle: Oracle,
    n_queries: int = 20,
    tau_wilson: float = 0.5,
    z: float = 1.96,
    *,
    accumulate_passes: bool = False,
) -> OntologyGraph:
    """Two-pass prerequisite estimation with Wilson filtering and cycle pruning.

    Pass 1 asks about the whole bank, pass 2 only about candidates seen in
    pass 1. By default the estimate uses pass-2 counts alone; with
    ``accumulate_passes`` it pools both passes over ``2 * n_queries``.
    """
    if len(bank) < 2:
        raise ValueError("need at least two subtasks to build an ontology")
    if n_queries < 1:
        raise ValueError("n_queries must be positive")
    names = bank.items
    graph = OntologyGraph(names)
    for t, target in enumerate(names):
        first: dict[str, int] = {}
        cands = [c for c in names if c != target]
        for i in range(n_queries):
            for r in oracle.query_prereqs(target, cands, i):
                first[r] = first.get(r, 0) + 1
        second: dict[str, int] = {}
        cands2 = [c for c in names if first.get(c, 0) > 0]
        if cands2:
            for i in range(n_queries):
                for r in oracle.query_prereqs(target, cands2, n_queries + i):
                    second[r] = second.get(r, 0) + 1
        for r_name in cands2:
            if accumulate_passes:
                k, n = first.get(r_name, 0) + second.get(r_name, 0), 2 * n_queries
            else:
                k, n = second.get(r_name, 0), n_queries
            p_hat = k / n
            lb = wilson_lower_bound(p_hat, n, z)
            if lb >= tau_wilson:
                graph.edges[(bank.id_of(r_name), t)] = Edge(p_hat, lb)
    removed = prune_cycles(graph)
    if removed:
        log.info("pruned %d cyclic edges: %s", len(removed), removed)
    return graph


def prereq_closure(s: int, graph: OntologyGraph) -> set[int]:
    """Every vertex with a directed path into ``s`` (``s`` excluded)."""
    if not 0 <= s < len(graph.vertices):
        raise KeyError(s)
    seen: set[int] = set()
    stack = list(graph.parents(s))
    while stack:
        v = stack.pop()
        if v in seen:
            continue
        seen.add(v)
        stack.extend(graph.parents(v))
    seen.discard(s)
    return seen


@dataclass(frozen=True)
class ExpandedPlan:
    instruction_id: int
    steps: tuple[int, ...]
    variant: int

    def to_json(self, bank: Sequence[str]) -> dict:
        return {"instruction_id": self.instruction_id, "variant": self.variant,
                "steps": [bank[s] for s in self.steps]}


def _enumerate_orders(
    vertices: Sequence[int], preds: Mapping[int, set[int]], limit: int
) -> list[tuple[int, ...]]:
    """Topological orders in lexicographic id order, truncated at ``limit``."""
    order: list[int] = []
    placed: set[int] = set()
    out: list[tuple[int, ...]] = []
    todo = sorted(vertices)

    def rec() -> None:
        if len(out) >= limit:
            return
        if len(order) == len(todo):
            out.append(tuple(order))
            return
        for v in todo:
            if v in placed or not preds[v] <= placed:
                continue
            placed.add(v)
            order.append(v)
            rec()
            order.pop()
            placed.discard(v)
            if len(out) >= limit:
                return

    rec()
    return out


def plan_constraints(
    goals: Sequence[int], graph: OntologyGraph, *, goal_order: bool = True
) -> tuple[list[int], dict[int, set[int]]]:
    """Vertex set U and predecessor sets for the induced subgraph G[U]."""
    missing = [g for g in goals if not 0 <= g < len(graph.vertices)]
    if missing:
        raise ExpansionError(f"goals not in ontology: {missing}")
    universe: set[int] = set(goals)
    for g in goals:
        universe |= prereq_closure(g, graph)
    preds = {v: {p for p in graph.parents(v) if p in universe} for v in universe}
    if goal_order:
        for a, b in zip(goals, goals[1:]):
            if a != b:
                preds[b].add(a)
    return sorted(universe), preds


def expand_plan(
    instruction_id: int,
    goal_plan: Sequence[int],
    graph: OntologyGraph,
    max_variants: int = 20,
    *,
    goal_order: bool = True,
) -> list[ExpandedPlan]:
    universe, preds = plan_constraints(goal_plan, graph, goal_order=goal_order)
    orders = _enumerate_orders(universe, preds, max_variants)
    if not orders and goal_order:
        log.warning("instruction %d: goal order contradicts the ontology; relaxing it",
                    instruction_id)
        universe, preds = plan_constraints(goal_plan, graph, goal_order=False)
        orders = _enumerate_orders(universe, preds, max_variants)
    if not orders:
        raise ExpansionError(f"instruction {instruction_id}: prerequisite graph is cyclic")
    return [ExpandedPlan(instruction_id, o, i) for i, o in enumerate(orders)]


def is_topological(steps: Sequence[int], preds: Mapping[int, set[int]]) -> bool:
    pos = {v: i for i, v in enumerate(steps)}
    if len(pos) != len(steps) or set(pos) != set(preds):
        return False
    return all(pos[p] < pos[v] for v, ps in preds.items() for p in ps)


def expand_all(
    goal_plans: Mapping[int, Sequence[int]],
    graph: OntologyGraph | None,
    max_variants: int = 20,
) -> dict[int, list[ExpandedPlan]]:
    """Plan pool for every instruction; with no graph, plans are the goals as-is."""
    pool: dict[int, list[ExpandedPlan]] = {}
    for iid in sorted(goal_plans):
        goals = tuple(goal_plans[iid])
        if graph is None:
            pool[iid] = [ExpandedPlan(iid, goals, 0)]
        else:
            pool[iid] = expand_plan(iid, goals, graph, max_variants)
    return pool


def oversampling(bank: SubtaskBank, n_reference: int) -> int:
    """How many more bank entries than reference subtasks were produced."""
    return len(bank) - n_reference


def save_ontology(path, graph: OntologyGraph) -> None:
    with open(path, "w") as fh:
        json.dump(graph.to_json(), fh, indent=1, sort_keys=True)


def load_ontology(path) -> OntologyGraph:
    with open(path) as fh:
        return OntologyGraph.from_json(json.load(fh))


def save_plan_pool(path, pool: Mapping[int, Sequence[ExpandedPlan]], bank: Sequence[str]) -> None:
    with open(path, "w") as fh:
        for iid in sorted(pool):
            for p in pool[iid]:
                fh.write(json.dumps(p.to_json(bank), sort_keys=True) + "\n")


def load_plan_pool(path, bank: SubtaskBank) -> dict[int, list[ExpandedPlan]]:
    pool: dict[int, list[ExpandedPlan]] = {}
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            steps = tuple(bank.id_of(s) for s in rec["steps"])
            pool.setdefault(rec["instruction_id"], []).append(
                ExpandedPlan(rec["instruction_id"], steps, rec["variant"]))
    return pool
