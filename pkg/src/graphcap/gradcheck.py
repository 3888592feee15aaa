"""Finite-difference check of the full captioning loss on a tiny model."""

from __future__ import annotations

from typing import List, Tuple

import numpy as np

from .autodiff import GradientReport, finite_difference_check
from .model import CaptionModel, ModelConfig, init_model
from .scene_graph import LabelSpace, ObjectNode, ReifiedGraph, RelationEdge, SceneGraph, reify
from .training import teacher_forced_loss

TINY = dict(embed_dim=8, hidden_dim=16, attn_dim=8)
TINY_VOCAB = 20
TOLERANCE = 1e-4


def tiny_problem(variant: str, seed: int = 0, batch: int = 3,
                 scale: float = 0.5) -> Tuple[CaptionModel, LabelSpace, List[ReifiedGraph], List[List[int]]]:
    """A seeded tiny model and ``batch`` 4-node graphs with random captions.

    Graphs use disjoint labels: a label present in every graph shifts all
    pooled vectors alike, which batch norm cancels exactly, leaving a zero
    gradient that finite differences only see as roundoff. Weights are redrawn
    with std ``scale`` so no gradient sits near the roundoff floor.
    """
    rng = np.random.default_rng(seed)
    labels = LabelSpace([f"obj{i}" for i in range(3 * batch)], [f"rel{i}" for i in range(batch)])
    model = init_model(ModelConfig.for_variant(variant, labels.size, TINY_VOCAB, **TINY), seed=seed)
    for p in model.parameters().values():
        p.data[...] = rng.normal(0.0, scale, size=p.shape)
    graphs, captions = [], []
    for b in range(batch):
        objs = rng.permutation(3) + 3 * b
        nodes = [ObjectNode(k, labels.objects[o]) for k, o in enumerate(objs)]
        edge = RelationEdge(0, int(rng.integers(1, 3)), labels.predicates[b])
        graphs.append(reify(SceneGraph(nodes, [edge])))
        captions.append([int(t) for t in rng.integers(4, TINY_VOCAB, size=int(rng.integers(3, 7)))])
    return model, labels, graphs, captions


def check_variant(variant: str, seed: int = 0, eps: float = 1e-5, max_coords: int = 200) -> GradientReport:
    """Gradient check in training mode with dropout masks frozen by reseeding."""
    model, labels, graphs, captions = tiny_problem(variant, seed)

    def loss_fn(params):
        rng = np.random.default_rng(seed + 1)
        return teacher_forced_loss(model, graphs, captions, labels, training=True, rng=rng)

    return finite_difference_check(loss_fn, model.parameters(), eps=eps, max_coords=max_coords, seed=seed)
