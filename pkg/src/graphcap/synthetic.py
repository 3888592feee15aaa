"""Small synthetic scene-graph corpora for demos and tests.

Every record is a two-object graph ``subject --predicate--> object`` with the
caption "a <subject> <predicate> the <object> ." No two records share the same
unordered object pair, so the caption is recoverable from the node label
multiset alone (mean pooling and undirected GAT edges lose direction).
"""

from __future__ import annotations

from itertools import combinations
from typing import List, Tuple

import numpy as np

from .data import DatasetRecord
from .scene_graph import BoundingBox, LabelSpace, ObjectNode, PairScores, RelationEdge

OBJECTS = [
    "dog", "cat", "table", "man", "horse", "tree", "car", "bird", "rock", "boat", "kite", "clock",
    "sky", "building", "street", "chair", "bench", "umbrella", "plate", "pizza", "woman", "train",
    "sign", "water", "bus", "fence", "grass", "window", "door", "lamp",
]
PREDICATES = ["on", "near", "under", "behind", "beside", "above", "with", "in"]


def _box(rng: np.random.Generator) -> BoundingBox:
    x, y = rng.integers(0, 400, size=2)
    w, h = rng.integers(10, 200, size=2)
    return BoundingBox(float(x), float(y), float(w), float(h))


def caption_for(subject: str, predicate: str, obj: str) -> str:
    return f"a {subject} {predicate} the {obj}."


def toy_corpus(n: int, n_objects: int = 12, n_predicates: int = 5, seed: int = 0,
               start_id: int = 0) -> Tuple[List[DatasetRecord], LabelSpace]:
    """``n`` gold records over the first ``n_objects`` objects and ``n_predicates`` predicates."""
    objects, predicates = OBJECTS[:n_objects], PREDICATES[:n_predicates]
    pairs = list(combinations(range(n_objects), 2))
    if n > len(pairs):
        raise ValueError(f"only {len(pairs)} distinct object pairs available for {n} records")
    rng = np.random.default_rng(seed)
    chosen = rng.choice(len(pairs), size=n, replace=False)
    records = []
    for k, c in enumerate(chosen):
        i, j = pairs[int(c)]
        if rng.random() < 0.5:
            i, j = j, i
        pred = predicates[int(rng.integers(n_predicates))]
        nodes = [ObjectNode(0, objects[i], 1.0, _box(rng)), ObjectNode(1, objects[j], 1.0, _box(rng))]
        records.append(DatasetRecord(start_id + k, nodes, [caption_for(objects[i], pred, objects[j])],
                                     [RelationEdge(0, 1, pred, 1.0)]))
    return records, LabelSpace(objects, predicates)


def sweep_fixture(n_train: int = 16, n_val: int = 8, seed: int = 0):
    """Corpus whose best detector threshold is 0.4 by construction.

    Training holds two-object records (captions describe the pair) plus
    four-object records whose captions describe both pairs, so the training
    max graph size is 4. Validation records are detector outputs for
    ``n_val`` of the two-object training graphs: the true pair has confidences
    in (0.4, 0.6) and two extra noise objects sit in [0.2, 0.4). Threshold
    0.4 recovers the gold graph exactly, 0.2 adds the noise, and 0.6/0.8
    reject every record.

    Returns ``(train_records, val_records, label_space)``.
    """
    rng = np.random.default_rng(seed)
    objects, predicates = OBJECTS[:16], PREDICATES[:4]
    pairs = list(combinations(range(len(objects)), 2))
    chosen = [pairs[int(c)] for c in rng.choice(len(pairs), size=n_train, replace=False)]
    train, val = [], []
    triples = []
    for k, (i, j) in enumerate(chosen):
        pred = predicates[int(rng.integers(len(predicates)))]
        triples.append((i, pred, j))
        nodes = [ObjectNode(0, objects[i], 1.0, _box(rng)), ObjectNode(1, objects[j], 1.0, _box(rng))]
        train.append(DatasetRecord(k, nodes, [caption_for(objects[i], pred, objects[j])],
                                   [RelationEdge(0, 1, pred, 1.0)]))
    # four-object records: two training triples side by side
    for k in range(n_train // 2):
        (a, p, b), (c, q, d) = triples[2 * k], triples[2 * k + 1]
        nodes = [ObjectNode(m, objects[x], 1.0, _box(rng)) for m, x in enumerate((a, b, c, d))]
        text = caption_for(objects[a], p, objects[b])[:-1] + " and " + caption_for(objects[c], q, objects[d])
        train.append(DatasetRecord(1000 + k, nodes, [text], [RelationEdge(0, 1, p), RelationEdge(2, 3, q)]))
    for k in range(n_val):
        i, pred, j = triples[k]
        noise = [x for x in rng.permutation(len(objects)) if x not in (i, j)][:2]
        labels = [i, j] + noise
        confs = [rng.uniform(0.45, 0.58), rng.uniform(0.45, 0.58), rng.uniform(0.2, 0.38), rng.uniform(0.2, 0.38)]
        nodes = [ObjectNode(m, objects[x], float(cf), _box(rng)) for m, (x, cf) in enumerate(zip(labels, confs))]
        noise_pred = predicates[int(rng.integers(len(predicates)))]
        scores = [
            PairScores(0, 1, {pred: 0.8, **{p: 0.2 / (len(predicates) - 1) for p in predicates if p != pred}}),
            PairScores(2, 3, {noise_pred: 0.7, **{p: 0.3 / (len(predicates) - 1) for p in predicates if p != noise_pred}}),
            PairScores(0, 2, {predicates[0]: 0.4, predicates[1]: 0.6}),
        ]
        val.append(DatasetRecord(2000 + k, nodes, [caption_for(objects[i], pred, objects[j])], None, scores))
    return train, val, LabelSpace(objects, predicates)
