"""Seeded random scene graphs shared by property tests."""

import numpy as np

from graphcap.scene_graph import BoundingBox, LabelSpace, ObjectNode, PairScores, RelationEdge, SceneGraph

OBJECTS = ["dog", "cat", "man", "table", "tree", "car"]
PREDICATES = ["on", "near", "under", "in"]
LABELS = LabelSpace(OBJECTS, PREDICATES)
BOXES = [BoundingBox(0, 0, 10, 10), BoundingBox(5, 5, 20, 10), BoundingBox(1, 2, 3, 4)]


def random_graph(rng: np.random.Generator, max_nodes: int = 8, max_edges: int = 10) -> SceneGraph:
    """Small graphs with repeated labels and boxes so dedup has work to do.

    Confidences are drawn from a coarse grid to create ties.
    """
    n = int(rng.integers(0, max_nodes + 1))
    ids = rng.permutation(100)[:n]
    nodes = [
        ObjectNode(int(i), OBJECTS[rng.integers(3)], float(rng.integers(0, 11)) / 10, BOXES[rng.integers(len(BOXES))])
        for i in ids
    ]
    edges = []
    if n >= 2:
        for _ in range(int(rng.integers(0, max_edges + 1))):
            s, d = rng.choice(n, size=2, replace=False)
            edges.append(RelationEdge(int(ids[s]), int(ids[d]), PREDICATES[rng.integers(len(PREDICATES))],
                                      float(rng.integers(0, 11)) / 10))
    return SceneGraph(nodes, edges, image_id=int(rng.integers(1000)))


def random_pairs(rng: np.random.Generator, g: SceneGraph, k: int = 4):
    ids = [n.id for n in g.nodes]
    pairs = []
    if len(ids) < 2:
        return pairs
    for _ in range(k):
        s, d = rng.choice(len(ids), size=2, replace=False)
        scores = {p: float(rng.integers(0, 5)) / 4 for p in PREDICATES}
        pairs.append(PairScores(ids[s], ids[d], scores))
    return pairs


def numeric_grad(f, x, h=1e-4):
    """Five-point central differences of scalar ``f()`` w.r.t. array ``x`` (mutated in place).

    The fourth-order stencil keeps truncation error far below roundoff, so
    the oracle resolves gradients down to about 1e-12. Differences are taken
    pairwise so a constant ``f`` yields exactly zero.
    """
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = x[i]
        vals = []
        for k in (2, 1, -1, -2):
            x[i] = orig + k * h
            vals.append(f())
        x[i] = orig
        f2, f1, m1, m2 = vals
        g[i] = ((m2 - f2) + 8 * (f1 - m1)) / (12 * h)
    return g
