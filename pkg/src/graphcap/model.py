"""Model container tying the node table, GAT stack, decoder and batch norm together."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import BatchNormState, Tensor
from .decoder import MLP, DecodeConfig, DecoderParams, DecoderRun, decode_batch, decoder_tensors
from .encoder import GatLayerParams, GraphBatch, batch_graphs, encode
from .errors import ConfigError
from .scene_graph import LabelSpace, ReifiedGraph

VARIANTS = {
    "base": (False, False),
    "att": (False, True),
    "enc": (True, False),
    "enc_att": (True, True),
}
VARIANT_NAMES = {
    "base": "G-LSTM",
    "att": "G-LSTM+att",
    "enc": "G-LSTM+enc",
    "enc_att": "G-LSTM+enc+att",
}


@dataclass
class ModelConfig:
    node_vocab: int
    word_vocab: int
    embed_dim: int = 512
    hidden_dim: int = 1024
    attn_dim: Optional[int] = None
    gat_layers: int = 0
    attention: bool = False
    gat_dropout: float = 0.25
    decoder_dropout: float = 0.5
    dtype: str = "float64"

    def __post_init__(self):
        if self.attn_dim is None:
            self.attn_dim = self.embed_dim
        for name in ("node_vocab", "word_vocab", "embed_dim", "hidden_dim", "attn_dim"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.gat_layers < 0:
            raise ConfigError("gat_layers cannot be negative")
        for name in ("gat_dropout", "decoder_dropout"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ConfigError(f"{name} must lie in [0, 1)")
        if self.dtype not in ("float64", "float32"):
            raise ConfigError(f"unsupported dtype {self.dtype!r}")

    @classmethod
    def for_variant(cls, variant: str, node_vocab: int, word_vocab: int, **dims) -> "ModelConfig":
        if variant not in VARIANTS:
            raise ConfigError(f"unknown variant {variant!r}; choose from {sorted(VARIANTS)}")
        enc, att = VARIANTS[variant]
        layers = dims.pop("gat_layers", 2)
        return cls(node_vocab, word_vocab, gat_layers=layers if enc else 0, attention=att, **dims)

    @property
    def variant(self) -> str:
        enc, att = self.gat_layers > 0, self.attention
        return {v: k for k, v in VARIANTS.items()}[(enc, att)]


class CaptionModel:
    """All trainable tensors plus batch-norm running statistics."""

    def __init__(self, config: ModelConfig, node_embed: Tensor, gat: List[GatLayerParams],
                 decoder: DecoderParams, bn: BatchNormState):
        self.config = config
        self.node_embed = node_embed
        self.gat = gat
        self.decoder = decoder
        self.bn = bn

    @property
    def variant_name(self) -> str:
        return VARIANT_NAMES[self.config.variant]

    def parameters(self) -> Dict[str, Tensor]:
        """Trainable tensors by stable checkpoint name."""
        named = {"node_embed": self.node_embed}
        for k, layer in enumerate(self.gat):
            named[f"gat/{k}/W"] = layer.W
            named[f"gat/{k}/a"] = layer.a
        named.update(decoder_tensors(self.decoder))
        named["bn/gamma"] = self.bn.gamma
        named["bn/beta"] = self.bn.beta
        return named

    def buffers(self) -> Dict[str, np.ndarray]:
        return {"bn/running_mean": self.bn.running_mean, "bn/running_var": self.bn.running_var}

    def encode(self, batch: GraphBatch, training: bool = False,
               rng: Optional[np.random.Generator] = None) -> Tensor:
        V = ad.embedding_lookup(self.node_embed, batch.node_index)
        return encode(V, batch.adjacency, self.gat, self.config.gat_dropout, training, rng)

    def start(self, batch: GraphBatch, training: bool = False,
              rng: Optional[np.random.Generator] = None) -> DecoderRun:
        V = self.encode(batch, training, rng)
        return DecoderRun(V, batch.segments, batch.count, self.decoder, self.bn, training,
                          self.config.decoder_dropout, rng)

    def generate(self, graphs: Sequence[ReifiedGraph], label_space: LabelSpace,
                 config: DecodeConfig = DecodeConfig(), rng: Optional[np.random.Generator] = None,
                 chunk: int = 64) -> List[List[int]]:
        """Decode token ids for each graph (eval mode), ``chunk`` graphs at a time."""
        out: List[List[int]] = []
        for i in range(0, len(graphs), chunk):
            batch = batch_graphs(graphs[i:i + chunk], label_space)
            with ad.no_grad():
                V = self.encode(batch, training=False)
            out.extend(decode_batch(V, batch.segments, batch.count, self.decoder, self.bn, config, rng))
        return out


def init_model(config: ModelConfig, seed: int = 0) -> CaptionModel:
    """Seeded initialisation.

    Recurrent weights uniform(-0.08, 0.08), projections normal with std
    1/sqrt(fan_in), embeddings normal with std 0.1, biases zero.
    """
    rng = np.random.default_rng(seed)
    dtype = np.float64 if config.dtype == "float64" else np.float32
    D, H, A = config.embed_dim, config.hidden_dim, config.attn_dim

    def param(arr):
        return Tensor(np.asarray(arr, dtype=dtype), requires_grad=True)

    def proj(rows, cols):
        return param(rng.normal(0.0, 1.0 / np.sqrt(cols), size=(rows, cols)))

    def zeros(*shape):
        return param(np.zeros(shape))

    node_embed = param(rng.normal(0.0, 0.1, size=(config.node_vocab, D)))
    gat = [GatLayerParams(proj(D, D), param(rng.normal(0.0, 1.0 / np.sqrt(2 * D), size=2 * D)))
           for _ in range(config.gat_layers)]
    in_width = 2 * D if config.attention else D
    word_embed = param(rng.normal(0.0, 0.1, size=(config.word_vocab, D)))
    W_x = param(rng.uniform(-0.08, 0.08, size=(4 * H, in_width)))
    W_h = param(rng.uniform(-0.08, 0.08, size=(4 * H, H)))
    b = zeros(4 * H)
    psi_h = MLP(proj(H, D), zeros(H), proj(H, H), zeros(H))
    psi_c = MLP(proj(H, D), zeros(H), proj(H, H), zeros(H))
    P_o = proj(config.word_vocab, D)
    P_h = proj(D, H)
    extra = {}
    if config.attention:
        extra = dict(P_z=proj(D, D), W_a=proj(A, D), U_a=proj(A, H), w_e=param(rng.normal(0.0, 1.0 / np.sqrt(A), size=A)))
    decoder = DecoderParams(word_embed, W_x, W_h, b, psi_h, psi_c, P_o, P_h, **extra)
    bn = BatchNormState.create(D, dtype=dtype)
    return CaptionModel(config, node_embed, gat, decoder, bn)


def model_from_tensors(tensors: Dict[str, np.ndarray], gat_dropout: float = 0.25,
                       decoder_dropout: float = 0.5) -> CaptionModel:
    """Rebuild a model from named arrays; variant and widths follow from the names and shapes."""
    def t(name):
        if name not in tensors:
            raise ConfigError(f"checkpoint is missing tensor {name!r}")
        return Tensor(tensors[name], requires_grad=True, dtype=tensors[name].dtype)

    node = t("node_embed")
    D = node.shape[1]
    n_layers = 0
    while f"gat/{n_layers}/W" in tensors:
        n_layers += 1
    attention = "att/W_a" in tensors
    word = t("word_embed")
    H = tensors["lstm/W_h"].shape[1]
    A = tensors["att/W_a"].shape[0] if attention else D
    dtype = "float64" if node.data.dtype == np.float64 else "float32"
    config = ModelConfig(node.shape[0], word.shape[0], D, H, A, n_layers, attention, gat_dropout, decoder_dropout, dtype)
    gat = [GatLayerParams(t(f"gat/{k}/W"), t(f"gat/{k}/a")) for k in range(n_layers)]
    mlps = {p: MLP(t(f"{p}/W1"), t(f"{p}/b1"), t(f"{p}/W2"), t(f"{p}/b2")) for p in ("psi_h", "psi_c")}
    extra = {}
    if attention:
        extra = dict(P_z=t("P_z"), W_a=t("att/W_a"), U_a=t("att/U_a"), w_e=t("att/w_e"))
    decoder = DecoderParams(word, t("lstm/W_x"), t("lstm/W_h"), t("lstm/b"), mlps["psi_h"], mlps["psi_c"],
                            t("P_o"), t("P_h"), **extra)
    bn = BatchNormState(t("bn/gamma"), t("bn/beta"), tensors["bn/running_mean"].copy(),
                        tensors["bn/running_var"].copy())
    return CaptionModel(config, node, gat, decoder, bn)
