"""Reify a small scene graph and push raw detections through post-processing."""

import numpy as np

from graphcap.scene_graph import (BoundingBox, LabelSpace, ObjectNode, PairScores, RelationEdge, SceneGraph,
                                  postprocess_detection, reify)

labels = LabelSpace(["clock", "tower", "sky", "bird"], ["on", "in", "near"])

g = SceneGraph([ObjectNode(0, "clock"), ObjectNode(1, "tower"), ObjectNode(2, "sky")],
               [RelationEdge(0, 1, "on"), RelationEdge(1, 2, "in")])
r = reify(g)
print([n.label for n in r.nodes])  # objects first, then one node per edge
print(r.adjacency().astype(int))   # undirected, with self-loops

box = BoundingBox(10, 10, 40, 40)
raw = [
    ObjectNode(0, "clock", 0.9, box),
    ObjectNode(1, "clock", 0.6, box),             # duplicate of node 0
    ObjectNode(2, "tower", 0.7, BoundingBox(0, 0, 80, 200)),
    ObjectNode(3, "bird", 0.25, BoundingBox(5, 5, 4, 4)),  # below threshold
]
pairs = [PairScores(0, 2, {"on": 0.8, "near": 0.2}),
         PairScores(1, 2, {"on": 0.6, "in": 0.4}),
         PairScores(3, 2, {"near": 0.9})]

for t in (0.2, 0.4, 0.8):
    out = postprocess_detection(raw, pairs, t, max_nodes=3, label_space=labels)
    if out is None:
        print(t, "rejected (fewer than two objects)")
    else:
        print(t, [(n.id, n.label) for n in out.nodes], [(e.src, e.predicate, e.dst) for e in out.edges])

print(np.round(reify(out or g).adjacency().sum(1), 1))
