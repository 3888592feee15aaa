"""Scene-graph data model, detector post-processing and reification.

A :class:`SceneGraph` holds labeled object nodes and directed predicate edges.
:func:`postprocess_detection` turns raw detector output (objects with
confidences plus per-pair predicate scores) into a clean graph, and
:func:`reify` turns every predicate edge into its own node so that encoder and
decoder see a single homogeneous node set.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .errors import DataError, LabelSpaceError, ValidationError


@dataclass(frozen=True)
class BoundingBox:
    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValidationError(f"bounding box needs positive width and height, got {self}")

    def as_list(self) -> List[float]:
        return [self.x, self.y, self.w, self.h]


@dataclass(frozen=True)
class ObjectNode:
    id: int
    label: str
    confidence: float = 1.0
    bbox: Optional[BoundingBox] = None

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ValidationError(f"object {self.id}: confidence {self.confidence} outside [0, 1]")


@dataclass(frozen=True)
class RelationEdge:
    src: int
    dst: int
    predicate: str
    confidence: float = 1.0

    def __post_init__(self):
        if self.src == self.dst:
            raise ValidationError(f"relation {self.predicate!r} links node {self.src} to itself")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValidationError(f"relation {self.src}->{self.dst}: confidence {self.confidence} outside [0, 1]")


@dataclass(frozen=True)
class PairScores:
    """Detector predicate distribution for one ordered object pair."""

    src: int
    dst: int
    scores: Mapping[str, float]


@dataclass(frozen=True)
class SceneGraph:
    nodes: Tuple[ObjectNode, ...] = ()
    edges: Tuple[RelationEdge, ...] = ()
    image_id: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(self.nodes))
        object.__setattr__(self, "edges", tuple(self.edges))

    @property
    def node_ids(self) -> List[int]:
        return [n.id for n in self.nodes]

    def validate(self) -> "SceneGraph":
        ids = self.node_ids
        if len(set(ids)) != len(ids):
            raise ValidationError(f"duplicate node ids in graph {self.image_id}")
        known = set(ids)
        for e in self.edges:
            for end in (e.src, e.dst):
                if end not in known:
                    raise ValidationError(
                        f"relation {e.src}->{e.dst} ({e.predicate!r}) points to missing node {end}"
                    )
        return self


class LabelSpace:
    """Ordered object and predicate vocabularies with stable indices."""

    def __init__(self, objects: Sequence[str], predicates: Sequence[str]):
        self.objects = list(objects)
        self.predicates = list(predicates)
        for kind, labels in (("object", self.objects), ("predicate", self.predicates)):
            if len(set(labels)) != len(labels):
                raise LabelSpaceError(f"duplicate {kind} labels")
        self._obj = {lab: i for i, lab in enumerate(self.objects)}
        self._pred = {lab: i for i, lab in enumerate(self.predicates)}

    def __eq__(self, other):
        return isinstance(other, LabelSpace) and (self.objects, self.predicates) == (other.objects, other.predicates)

    def object_index(self, label: str) -> int:
        try:
            return self._obj[label]
        except KeyError:
            raise LabelSpaceError(f"unknown object label {label!r}") from None

    def predicate_index(self, label: str) -> int:
        try:
            return self._pred[label]
        except KeyError:
            raise LabelSpaceError(f"unknown predicate label {label!r}") from None

    def has_object(self, label: str) -> bool:
        return label in self._obj

    def has_predicate(self, label: str) -> bool:
        return label in self._pred

    def node_index(self, label: str, kind: str) -> int:
        """Row in the joint table: objects first, then predicates."""
        if kind == "object":
            return self.object_index(label)
        return len(self.objects) + self.predicate_index(label)

    @property
    def size(self) -> int:
        return len(self.objects) + len(self.predicates)

    def check_graph(self, g: SceneGraph) -> None:
        for n in g.nodes:
            self.object_index(n.label)
        for e in g.edges:
            self.predicate_index(e.predicate)


# ------------------------------------------------------------------ reification


@dataclass(frozen=True)
class ReifiedNode:
    id: int
    label: str
    kind: str  # "object" or "relation"


@dataclass
class ReifiedGraph:
    """Graph where every predicate is a node; adjacency is undirected.

    ``neighbors[i]`` is the neighborhood of node ``i`` and always contains
    ``i`` itself. ``provenance[i]`` is ``("object", node_id)`` or
    ``("relation", edge_position)`` pointing back into the source graph.
    """

    nodes: List[ReifiedNode]
    neighbors: List[frozenset]
    provenance: List[Tuple[str, int]] = field(default_factory=list)

    def __len__(self):
        return len(self.nodes)

    @property
    def labels(self) -> List[Tuple[str, str]]:
        return [(n.label, n.kind) for n in self.nodes]

    def adjacency(self) -> np.ndarray:
        n = len(self.nodes)
        adj = np.zeros((n, n), dtype=bool)
        for i, nb in enumerate(self.neighbors):
            adj[i, list(nb)] = True
        return adj

    def object_count(self) -> int:
        return sum(1 for n in self.nodes if n.kind == "object")


def reify(g: SceneGraph) -> ReifiedGraph:
    """Replace each edge (u, p, v) by a relation node r with links u-r and r-v."""
    g.validate()
    position = {}
    nodes, provenance = [], []
    for n in g.nodes:
        position[n.id] = len(nodes)
        nodes.append(ReifiedNode(len(nodes), n.label, "object"))
        provenance.append(("object", n.id))
    links = [{i} for i in range(len(nodes))]
    for k, e in enumerate(g.edges):
        r = len(nodes)
        nodes.append(ReifiedNode(r, e.predicate, "relation"))
        provenance.append(("relation", k))
        links.append({r})
        for end in (position[e.src], position[e.dst]):
            links[r].add(end)
            links[end].add(r)
    return ReifiedGraph(nodes, [frozenset(s) for s in links], provenance)


# ------------------------------------------------------------- post-processing


def select_relationships(pairs: Sequence[PairScores], label_space: LabelSpace) -> List[RelationEdge]:
    """Keep the most probable predicate per pair; ties go to the lower label index."""
    edges = []
    for pair in pairs:
        if not pair.scores:
            raise DataError(f"pair {pair.src}->{pair.dst} has no predicate scores")
        best = min(
            pair.scores.items(),
            key=lambda kv: (-kv[1], label_space.predicate_index(kv[0])),
        )
        edges.append(RelationEdge(pair.src, pair.dst, best[0], float(best[1])))
    return edges


def prune_by_confidence(g: SceneGraph, threshold: float) -> SceneGraph:
    if not 0.0 <= threshold <= 1.0:
        raise ValidationError(f"confidence threshold {threshold} outside [0, 1]")
    kept = [n for n in g.nodes if n.confidence >= threshold]
    ids = {n.id for n in kept}
    edges = [e for e in g.edges if e.src in ids and e.dst in ids]
    return SceneGraph(kept, edges, g.image_id)


def dedup(g: SceneGraph) -> SceneGraph:
    """Merge nodes with identical (label, bbox) and identical relations.

    Survivors are the most confident instance (first one on ties) and keep the
    position of the first occurrence of their group.
    """
    groups: Dict[tuple, List[ObjectNode]] = {}
    for n in g.nodes:
        groups.setdefault((n.label, n.bbox), []).append(n)
    survivor_of = {}
    keep = set()
    for members in groups.values():
        best = max(members, key=lambda n: n.confidence)  # max keeps the first maximum
        keep.add(best.id)
        for m in members:
            survivor_of[m.id] = best.id
    first_pos = {}
    for pos, n in enumerate(g.nodes):
        first_pos.setdefault(survivor_of[n.id], pos)
    nodes = sorted((n for n in g.nodes if n.id in keep), key=lambda n: first_pos[n.id])

    best_edge: Dict[tuple, RelationEdge] = {}
    order: List[tuple] = []
    for e in g.edges:
        src, dst = survivor_of.get(e.src, e.src), survivor_of.get(e.dst, e.dst)
        if src == dst:
            continue
        key = (src, dst, e.predicate)
        moved = replace(e, src=src, dst=dst)
        if key not in best_edge:
            order.append(key)
            best_edge[key] = moved
        elif moved.confidence > best_edge[key].confidence:
            best_edge[key] = moved
    return SceneGraph(nodes, [best_edge[k] for k in order], g.image_id)


def cap_size(g: SceneGraph, max_nodes: int) -> SceneGraph:
    """Drop the least confident objects (higher id first on ties) down to ``max_nodes``."""
    if max_nodes < 2:
        raise ValidationError(f"max_nodes must be at least 2, got {max_nodes}")
    if len(g.nodes) <= max_nodes:
        return g
    ranked = sorted(g.nodes, key=lambda n: (-n.confidence, n.id))
    ids = {n.id for n in ranked[:max_nodes]}
    nodes = [n for n in g.nodes if n.id in ids]
    edges = [e for e in g.edges if e.src in ids and e.dst in ids]
    return SceneGraph(nodes, edges, g.image_id)


def validate_min_nodes(g: SceneGraph) -> bool:
    """True when the graph has at least two object nodes."""
    return len(g.nodes) >= 2


def postprocess_detection(
    nodes: Sequence[ObjectNode],
    pairs: Sequence[PairScores],
    threshold: float,
    max_nodes: int,
    label_space: LabelSpace,
    image_id: Optional[int] = None,
) -> Optional[SceneGraph]:
    """Threshold, pick predicates, dedup, cap; ``None`` when fewer than two objects remain."""
    pruned = prune_by_confidence(SceneGraph(nodes, (), image_id), threshold)
    alive = {n.id for n in pruned.nodes}
    edges = select_relationships([p for p in pairs if p.src in alive and p.dst in alive], label_space)
    g = SceneGraph(pruned.nodes, edges, image_id).validate()
    g = cap_size(dedup(g), max_nodes)
    return g if validate_min_nodes(g) else None


def with_gold_confidence(g: SceneGraph) -> SceneGraph:
    """Gold annotations enter the pipeline with confidence 1.0 everywhere."""
    return SceneGraph(
        [replace(n, confidence=1.0) for n in g.nodes],
        [replace(e, confidence=1.0) for e in g.edges],
        g.image_id,
    )


def corrupt_labels(
    g: SceneGraph, fraction: float, label_space: LabelSpace, rng: np.random.Generator
) -> SceneGraph:
    """Replace the labels of a random ``fraction`` of nodes (objects and predicates).

    Each chosen node gets a label drawn uniformly from its own kind's label list.
    """
    slots = [("object", i) for i in range(len(g.nodes))] + [("relation", k) for k in range(len(g.edges))]
    n_pick = int(round(fraction * len(slots)))
    picked = rng.choice(len(slots), size=n_pick, replace=False) if n_pick else []
    nodes, edges = list(g.nodes), list(g.edges)
    for s in sorted(int(p) for p in picked):
        kind, i = slots[s]
        if kind == "object":
            nodes[i] = replace(nodes[i], label=label_space.objects[rng.integers(len(label_space.objects))])
        else:
            edges[i] = replace(edges[i], predicate=label_space.predicates[rng.integers(len(label_space.predicates))])
    return SceneGraph(nodes, edges, g.image_id)
