"""Node embedding and the graph-attention encoder.

Node vectors for a batch of graphs are stacked into one (N x D) matrix; the
graphs are kept apart by a block-diagonal adjacency mask, so a batch behaves
exactly like independent per-graph passes.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DimensionError
from .scene_graph import LabelSpace, ReifiedGraph


@dataclass
class GatLayerParams:
    W: Tensor  # (D_out, D_in)
    a: Tensor  # (2 * D_out,)

    @property
    def in_width(self) -> int:
        return self.W.shape[1]

    @property
    def out_width(self) -> int:
        return self.W.shape[0]


@dataclass
class GraphBatch:
    """Several reified graphs flattened into one node list.

    ``node_index`` holds each node's row in the joint label table,
    ``segments`` maps every node to its graph, ``adjacency`` is block diagonal.
    """

    node_index: np.ndarray
    segments: np.ndarray
    adjacency: np.ndarray
    count: int

    @property
    def membership(self) -> np.ndarray:
        """(count x N) boolean mask: node n belongs to graph b."""
        return self.segments[None, :] == np.arange(self.count)[:, None]


def batch_graphs(graphs: Sequence[ReifiedGraph], label_space: LabelSpace) -> GraphBatch:
    index, segments = [], []
    sizes = [len(g) for g in graphs]
    if any(s == 0 for s in sizes):
        raise DimensionError("cannot encode an empty graph")
    total = int(np.sum(sizes)) if sizes else 0
    adjacency = np.zeros((total, total), dtype=bool)
    offset = 0
    for b, g in enumerate(graphs):
        for node in g.nodes:
            index.append(label_space.node_index(node.label, node.kind))
            segments.append(b)
        n = len(g)
        adjacency[offset:offset + n, offset:offset + n] = g.adjacency()
        offset += n
    return GraphBatch(np.asarray(index, dtype=np.int64), np.asarray(segments, dtype=np.int64), adjacency, len(graphs))


def embed_nodes(graph: ReifiedGraph, table: Tensor, label_space: LabelSpace) -> Tensor:
    """Rows of the node embedding table for each node of ``graph`` (n x D)."""
    rows = [label_space.node_index(node.label, node.kind) for node in graph.nodes]
    return ad.embedding_lookup(table, np.asarray(rows, dtype=np.int64))


def attention_coefficients(V: Tensor, layer: GatLayerParams, adjacency: np.ndarray,
                           slope: float = ad.LEAKY_SLOPE, Wv: Optional[Tensor] = None) -> Tensor:
    """(n x n) matrix whose row i holds alpha_ij over the neighborhood of i, zero elsewhere.

    alpha_ij = softmax_j( LeakyReLU(a . [W v_i || W v_j]) ) restricted to j in N_i.
    """
    if Wv is None:
        Wv = ad.matmul(V, ad.transpose(layer.W))
    d = layer.out_width
    src = ad.matmul(Wv, layer.a[:d])
    dst = ad.matmul(Wv, layer.a[d:])
    n = V.shape[0]
    scores = ad.leaky_relu(ad.add(ad.reshape(src, (n, 1)), ad.reshape(dst, (1, n))), slope)
    return ad.softmax_rows(scores, mask=adjacency)


def gat_layer_forward(V: Tensor, adjacency: np.ndarray, layer: GatLayerParams, dropout_rate: float = 0.25,
                      training: bool = False, rng: Optional[np.random.Generator] = None,
                      slope: float = ad.LEAKY_SLOPE) -> Tensor:
    """v'_i = sigmoid(sum_j alpha_ij W v_j), dropout on W v_j before the sum."""
    if V.ndim != 2 or V.shape[1] != layer.in_width:
        raise DimensionError(f"GAT layer expects (n, {layer.in_width}) input, got {V.shape}")
    if layer.a.shape != (2 * layer.out_width,):
        raise DimensionError(f"attention vector shape {layer.a.shape} does not match W {layer.W.shape}")
    Wv = ad.matmul(V, ad.transpose(layer.W))
    alpha = attention_coefficients(V, layer, adjacency, slope, Wv=Wv)
    feats = ad.dropout(Wv, dropout_rate, training, rng)
    return ad.sigmoid(ad.matmul(alpha, feats))


def encode(V: Tensor, adjacency: np.ndarray, layers: List[GatLayerParams], dropout_rate: float = 0.25,
           training: bool = False, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Apply the GAT layers in sequence; no layers means no encoding."""
    for k in range(1, len(layers)):
        if layers[k].in_width != layers[k - 1].out_width:
            raise ConfigError(
                f"GAT layer {k} takes width {layers[k].in_width} but layer {k - 1} produces {layers[k - 1].out_width}"
            )
    for layer in layers:
        V = gat_layer_forward(V, adjacency, layer, dropout_rate, training, rng)
    return V
