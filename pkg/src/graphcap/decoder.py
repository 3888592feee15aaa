"""LSTM caption decoder conditioned on graph node vectors.

All functions work on a batch: ``V`` is the (N x D) node matrix of every graph
in the batch and ``membership`` the (B x N) mask telling which nodes belong to
which caption. Shapes below use B for batch, H for hidden width, D for
embedding width and A for the attention MLP width.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import BatchNormState, Tensor
from .data import END, PAD, START, UNK
from .errors import ConfigError, DimensionError, ValidationError, VocabularyError


@dataclass
class MLP:
    """affine -> tanh -> affine."""

    W1: Tensor
    b1: Tensor
    W2: Tensor
    b2: Tensor

    def __call__(self, x: Tensor) -> Tensor:
        hidden = ad.tanh(ad.add(ad.matmul(x, ad.transpose(self.W1)), self.b1))
        return ad.add(ad.matmul(hidden, ad.transpose(self.W2)), self.b2)


@dataclass
class DecoderParams:
    word_embed: Tensor  # E_W, one D-row per vocabulary entry
    W_x: Tensor  # (4H, D [+ D])
    W_h: Tensor  # (4H, H)
    b: Tensor  # (4H,); gate order i, f, o, g
    psi_h: MLP
    psi_c: MLP
    P_o: Tensor  # (V_w, D)
    P_h: Tensor  # (D, H)
    P_z: Optional[Tensor] = None  # (D, D), attention only
    W_a: Optional[Tensor] = None  # (A, D)
    U_a: Optional[Tensor] = None  # (A, H)
    w_e: Optional[Tensor] = None  # (A,)

    @property
    def attention(self) -> bool:
        return self.W_a is not None

    @property
    def hidden(self) -> int:
        return self.W_h.shape[1]

    @property
    def vocab_size(self) -> int:
        return self.word_embed.shape[0]


@dataclass
class DecodeConfig:
    max_len: int = 20
    mode: str = "greedy"
    temperature: float = 1.0
    start: int = START
    end: int = END
    pad: int = PAD
    unk: int = UNK

    def __post_init__(self):
        if self.max_len < 1:
            raise ConfigError(f"max_len must be at least 1, got {self.max_len}")
        if self.mode not in ("greedy", "sample"):
            raise ConfigError(f"unknown decode mode {self.mode!r}")
        if self.mode == "sample" and not self.temperature > 0:
            raise ConfigError(f"sampling temperature must be positive, got {self.temperature}")


def init_states(V: Tensor, segments: np.ndarray, count: int, params: DecoderParams,
                bn_state: Optional[BatchNormState], training: bool) -> Tuple[Tensor, Tensor]:
    """h0 = psi_h(BN(mean_i v_i)), c0 = psi_c(BN(mean_i v_i)) per graph."""
    if V.shape[0] == 0:
        raise ValidationError("cannot initialise the decoder from an empty graph")
    pooled = ad.segment_mean(V, segments, count)
    if bn_state is not None:
        pooled = ad.batch_norm(pooled, bn_state, training)
    return params.psi_h(pooled), params.psi_c(pooled)


def lstm_step(x: Tensor, h: Tensor, c: Tensor, W_x: Tensor, W_h: Tensor, b: Tensor,
              W_xT: Optional[Tensor] = None, W_hT: Optional[Tensor] = None) -> Tuple[Tensor, Tensor]:
    """One LSTM step; pre-transposed weights may be passed to skip the transpose."""
    H = h.shape[-1]
    if x.shape[-1] != W_x.shape[1] or W_h.shape != (4 * H, H):
        raise DimensionError(f"lstm_step: input {x.shape} / hidden {h.shape} do not fit weights {W_x.shape}, {W_h.shape}")
    W_xT = ad.transpose(W_x) if W_xT is None else W_xT
    W_hT = ad.transpose(W_h) if W_hT is None else W_hT
    z = ad.add(ad.add(ad.matmul(x, W_xT), ad.matmul(h, W_hT)), b)
    gates = ad.sigmoid(z[..., : 3 * H])
    i, f, o = gates[..., :H], gates[..., H:2 * H], gates[..., 2 * H:]
    g = ad.tanh(z[..., 3 * H:])
    c_new = ad.add(ad.mul(f, c), ad.mul(i, g))
    h_new = ad.mul(o, ad.tanh(c_new))
    return h_new, c_new


def attend(V: Tensor, h: Tensor, params: DecoderParams, membership: Optional[np.ndarray] = None,
           VA: Optional[Tensor] = None) -> Tuple[Tensor, Tensor]:
    """Additive attention: e_bi = w_e . tanh(W_a v_i + U_a h_b); z_b = sum_i alpha_bi v_i.

    ``membership`` restricts each row to its own graph's nodes. Returns
    ``(z, alpha)`` with shapes (B, D) and (B, N).
    """
    n = V.shape[0]
    B = h.shape[0]
    if membership is None:
        membership = np.ones((B, n), dtype=bool)
    if VA is None:
        VA = ad.matmul(V, ad.transpose(params.W_a))
    A = VA.shape[1]
    HU = ad.matmul(h, ad.transpose(params.U_a))
    pre = ad.tanh(ad.add(ad.reshape(VA, (1, n, A)), ad.reshape(HU, (B, 1, A))))
    e = ad.reshape(ad.matmul(ad.reshape(pre, (B * n, A)), params.w_e), (B, n))
    alpha = ad.softmax_rows(e, mask=membership)
    return ad.matmul(alpha, V), alpha


def output_logits(prev_embed: Tensor, h: Tensor, params: DecoderParams, z: Optional[Tensor] = None,
                  dropout_rate: float = 0.5, training: bool = False,
                  rng: Optional[np.random.Generator] = None) -> Tensor:
    """P_o tanh(E_W y_prev + P_h h [+ P_z z]) for a batch of rows."""
    h = ad.dropout(h, dropout_rate, training, rng)
    inner = ad.add(prev_embed, ad.matmul(h, ad.transpose(params.P_h)))
    if z is not None:
        inner = ad.add(inner, ad.matmul(z, ad.transpose(params.P_z)))
    return ad.matmul(ad.tanh(inner), ad.transpose(params.P_o))


def output_distribution(y_prev, h: Tensor, params: DecoderParams, z: Optional[Tensor] = None,
                        dropout_rate: float = 0.5, training: bool = False,
                        rng: Optional[np.random.Generator] = None) -> Tensor:
    """Probability over the vocabulary of the next token given the previous one."""
    prev = ad.embedding_lookup(params.word_embed, np.asarray(y_prev, dtype=np.int64))
    return ad.softmax_rows(output_logits(prev, h, params, z, dropout_rate, training, rng))


class DecoderRun:
    """Carries decoder state across time steps for one batch.

    Shared by teacher forcing and free-running decoding so both apply the
    exact same per-step computation.
    """

    def __init__(self, V: Tensor, segments: np.ndarray, count: int, params: DecoderParams,
                 bn_state: Optional[BatchNormState], training: bool, dropout_rate: float = 0.5,
                 rng: Optional[np.random.Generator] = None):
        self.V = V
        self.params = params
        self.training = training
        self.dropout_rate = dropout_rate
        self.rng = rng
        self.membership = segments[None, :] == np.arange(count)[:, None]
        self.h, self.c = init_states(V, segments, count, params, bn_state, training)
        self.W_xT = ad.transpose(params.W_x)
        self.W_hT = ad.transpose(params.W_h)
        self.VA = ad.matmul(V, ad.transpose(params.W_a)) if params.attention else None
        self.alphas: List[np.ndarray] = []

    def step(self, y_prev: np.ndarray) -> Tensor:
        """Advance one step from tokens ``y_prev`` (B,), returning logits (B, V_w)."""
        p = self.params
        emb = ad.embedding_lookup(p.word_embed, y_prev)
        z = None
        x = emb
        if p.attention:
            z, alpha = attend(self.V, self.h, p, self.membership, VA=self.VA)
            self.alphas.append(alpha.data)
            x = ad.concat([emb, z], axis=-1)
        self.h, self.c = lstm_step(x, self.h, self.c, p.W_x, p.W_h, p.b, self.W_xT, self.W_hT)
        return output_logits(emb, self.h, p, z, self.dropout_rate, self.training, self.rng)


def _check_token(y: int, params: DecoderParams):
    if not 0 <= y < params.vocab_size:
        raise VocabularyError(f"token id {y} outside vocabulary of size {params.vocab_size}")


def decode_batch(V: Tensor, segments: np.ndarray, count: int, params: DecoderParams,
                 bn_state: Optional[BatchNormState], config: DecodeConfig,
                 rng: Optional[np.random.Generator] = None) -> List[List[int]]:
    """Free-running decoding of ``count`` graphs at once (eval mode).

    Greedy mode picks the argmax (lowest id on ties); sample mode draws from
    softmax(logits / temperature). Start and end tokens are not returned.
    """
    if config.mode == "sample" and rng is None:
        raise ConfigError("sampling needs a random generator")
    with ad.no_grad():
        run = DecoderRun(V, segments, count, params, bn_state, training=False)
        y = np.full(count, config.start, dtype=np.int64)
        done = np.zeros(count, dtype=bool)
        out: List[List[int]] = [[] for _ in range(count)]
        for _ in range(config.max_len + 1):
            logits = run.step(y).data
            if config.mode == "greedy":
                y = np.argmax(logits, axis=-1)
            else:
                probs = ad._masked_softmax_np(logits / config.temperature, None)
                u = rng.random(count)
                cdf = np.cumsum(probs, axis=-1)
                y = np.minimum((cdf < u[:, None]).sum(axis=-1), probs.shape[-1] - 1)
            for b in range(count):
                if done[b]:
                    continue
                if y[b] == config.end or len(out[b]) >= config.max_len:
                    done[b] = True
                else:
                    out[b].append(int(y[b]))
            if done.all():
                break
        return out


def greedy_decode(V: Tensor, params: DecoderParams, bn_state: Optional[BatchNormState],
                  config: DecodeConfig) -> List[int]:
    """Decode one graph's node matrix ``V`` (n x D) with argmax steps."""
    cfg = DecodeConfig(**{**config.__dict__, "mode": "greedy"})
    return decode_batch(V, np.zeros(V.shape[0], dtype=np.int64), 1, params, bn_state, cfg)[0]


def sample_decode(V: Tensor, params: DecoderParams, bn_state: Optional[BatchNormState],
                  config: DecodeConfig, rng: np.random.Generator) -> List[int]:
    cfg = DecodeConfig(**{**config.__dict__, "mode": "sample"})
    return decode_batch(V, np.zeros(V.shape[0], dtype=np.int64), 1, params, bn_state, cfg, rng)[0]


def decoder_tensors(params: DecoderParams) -> Dict[str, Tensor]:
    named = {
        "word_embed": params.word_embed,
        "lstm/W_x": params.W_x,
        "lstm/W_h": params.W_h,
        "lstm/b": params.b,
    }
    for prefix, mlp in (("psi_h", params.psi_h), ("psi_c", params.psi_c)):
        named.update({f"{prefix}/W1": mlp.W1, f"{prefix}/b1": mlp.b1, f"{prefix}/W2": mlp.W2, f"{prefix}/b2": mlp.b2})
    named.update({"P_o": params.P_o, "P_h": params.P_h})
    if params.attention:
        named.update({"P_z": params.P_z, "att/W_a": params.W_a, "att/U_a": params.U_a, "att/w_e": params.w_e})
    return named
