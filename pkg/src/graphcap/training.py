"""Teacher-forced maximum-likelihood training with Adam."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import END, PAD, START
from .encoder import GraphBatch, batch_graphs
from .errors import ConfigError, DataError, NumericError, VocabularyError
from .model import CaptionModel
from .scene_graph import LabelSpace, ReifiedGraph

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 10
    batch_size: int = 32
    seed: int = 0
    clip_norm: Optional[float] = None
    max_steps: Optional[int] = None

    def __post_init__(self):
        if self.lr < 0:
            raise ConfigError(f"learning rate must be non-negative, got {self.lr}")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be at least 2 (batch norm needs two samples)")
        if self.epochs < 0:
            raise ConfigError("epochs cannot be negative")


@dataclass
class AdamState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def zeros_like(cls, params: Dict[str, Tensor]) -> "AdamState":
        return cls({k: np.zeros_like(p.data) for k, p in params.items()},
                   {k: np.zeros_like(p.data) for k, p in params.items()}, 0)

    def to_tensors(self) -> Dict[str, np.ndarray]:
        out = {"adam/step": np.array(float(self.step))}
        out.update({f"adam/m/{k}": a for k, a in self.m.items()})
        out.update({f"adam/v/{k}": a for k, a in self.v.items()})
        return out

    @classmethod
    def from_tensors(cls, tensors: Dict[str, np.ndarray]) -> "AdamState":
        m = {k[len("adam/m/"):]: a for k, a in tensors.items() if k.startswith("adam/m/")}
        v = {k[len("adam/v/"):]: a for k, a in tensors.items() if k.startswith("adam/v/")}
        return cls(m, v, int(tensors["adam/step"]))


def adam_step(params: Dict[str, Tensor], grads: Dict[str, np.ndarray], state: AdamState,
              config: TrainConfig) -> AdamState:
    """Bias-corrected Adam update applied in place to ``params``."""
    missing = [k for k in params if k not in grads]
    if missing:
        raise ConfigError(f"no gradient for {missing[0]!r}")
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for {name!r} at step {state.step + 1}")
    if config.clip_norm is not None:
        total = np.sqrt(np.sum([np.sum(g * g) for g in grads.values()]))
        if total > config.clip_norm:
            grads = {k: g * (config.clip_norm / total) for k, g in grads.items()}
    state.step += 1
    t = state.step
    b1, b2 = config.beta1, config.beta2
    for name, p in params.items():
        g = grads[name]
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        p.data -= config.lr * m_hat / (np.sqrt(v_hat) + config.eps)
    return state


def _caption_arrays(captions: Sequence[Sequence[int]], vocab_size: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    for cap in captions:
        if len(cap) == 0:
            raise DataError("cannot train on an empty caption")
        for y in cap:
            if not 0 <= y < vocab_size:
                raise VocabularyError(f"token id {y} outside vocabulary of size {vocab_size}")
    steps = max(len(c) for c in captions) + 1
    B = len(captions)
    inputs = np.full((B, steps), PAD, dtype=np.int64)
    targets = np.full((B, steps), PAD, dtype=np.int64)
    weights = np.zeros((B, steps))
    for b, cap in enumerate(captions):
        seq_in = [START] + list(cap)
        seq_out = list(cap) + [END]
        inputs[b, :len(seq_in)] = seq_in
        targets[b, :len(seq_out)] = seq_out
        weights[b, :len(seq_out)] = 1.0 / len(seq_out)
    return inputs, targets, weights


def batch_loss(model: CaptionModel, batch: GraphBatch, captions: Sequence[Sequence[int]],
               training: bool = False, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Mean over captions of the per-token negative log-likelihood.

    Gold previous tokens are fed at every step; padding positions carry zero
    weight.
    """
    inputs, targets, weights = _caption_arrays(captions, model.decoder.vocab_size)
    dtype = model.node_embed.data.dtype
    run = model.start(batch, training, rng)
    rows = np.arange(len(captions))
    total = None
    for t in range(inputs.shape[1]):
        logits = run.step(inputs[:, t])
        logp = ad.log_softmax(logits)
        picked = logp[rows, targets[:, t]]
        term = ad.sum(ad.mul(picked, weights[:, t].astype(dtype)))
        total = term if total is None else ad.add(total, term)
    return ad.mul(total, -1.0 / len(captions))


def teacher_forced_loss(model: CaptionModel, graphs, captions, label_space: LabelSpace,
                        training: bool = False, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Loss for one graph/caption pair or for parallel lists of them."""
    if isinstance(graphs, ReifiedGraph):
        graphs, captions = [graphs], [captions]
    return batch_loss(model, batch_graphs(graphs, label_space), captions, training, rng)


@dataclass
class EpochLog:
    epoch: int
    loss: float
    steps: int
    val_meteor: Optional[float] = None

    def line(self) -> str:
        val = "" if self.val_meteor is None else repr(self.val_meteor)
        return f"{self.epoch}\t{self.loss!r}\t{self.steps}\t{val}"


@dataclass
class TrainResult:
    history: List[EpochLog]
    state: AdamState
    step_losses: List[float]


class _PreparedGraph:
    __slots__ = ("node_index", "adjacency")

    def __init__(self, graph: ReifiedGraph, label_space: LabelSpace):
        one = batch_graphs([graph], label_space)
        self.node_index = one.node_index
        self.adjacency = one.adjacency


def _stack(parts: Sequence[_PreparedGraph]) -> GraphBatch:
    sizes = [len(p.node_index) for p in parts]
    total = sum(sizes)
    adjacency = np.zeros((total, total), dtype=bool)
    offset = 0
    for p, n in zip(parts, sizes):
        adjacency[offset:offset + n, offset:offset + n] = p.adjacency
        offset += n
    segments = np.repeat(np.arange(len(parts)), sizes)
    return GraphBatch(np.concatenate([p.node_index for p in parts]), segments, adjacency, len(parts))


def make_batches(n: int, batch_size: int, rng: np.random.Generator) -> List[np.ndarray]:
    """Shuffled index chunks; a trailing singleton joins the previous chunk."""
    order = rng.permutation(n)
    chunks = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    if len(chunks) > 1 and len(chunks[-1]) == 1:
        last = chunks.pop()
        chunks[-1] = np.concatenate([chunks[-1], last])
    return chunks


def train(model: CaptionModel, samples: Sequence[Tuple[ReifiedGraph, Sequence[int]]], label_space: LabelSpace,
          config: TrainConfig, state: Optional[AdamState] = None,
          validate: Optional[Callable[[CaptionModel], float]] = None,
          on_epoch: Optional[Callable[[EpochLog, CaptionModel, AdamState], None]] = None) -> TrainResult:
    """Train ``model`` in place on (reified graph, token ids) samples.

    Each epoch shuffles with a generator derived from ``config.seed`` and runs
    one Adam step per batch. ``validate`` (if given) is called after every
    epoch and its score logged; ``on_epoch`` receives every epoch log.
    """
    if len(samples) < 2:
        raise DataError(f"training needs at least 2 samples, got {len(samples)}")
    if config.lr == 0:
        log.warning("learning rate is 0: parameters will not change")
    params = model.parameters()
    state = state or AdamState.zeros_like(params)
    prepared = [_PreparedGraph(g, label_space) for g, _ in samples]
    captions = [list(c) for _, c in samples]
    shuffle_rng = np.random.default_rng([config.seed, 0])
    dropout_rng = np.random.default_rng([config.seed, 1])
    history: List[EpochLog] = []
    step_losses: List[float] = []
    for epoch in range(1, config.epochs + 1):
        losses = []
        for idx in make_batches(len(samples), config.batch_size, shuffle_rng):
            for p in params.values():
                p.grad = None
            batch = _stack([prepared[i] for i in idx])
            loss = batch_loss(model, batch, [captions[i] for i in idx], training=True, rng=dropout_rng)
            value = loss.item()
            if not np.isfinite(value):
                raise NumericError(f"non-finite loss at epoch {epoch}, step {state.step + 1}")
            grads = ad.backward(loss)
            adam_step(params, {k: grads[p] for k, p in params.items()}, state, config)
            losses.append(value)
            step_losses.append(value)
            if config.max_steps is not None and len(step_losses) >= config.max_steps:
                break
        entry = EpochLog(epoch, float(np.mean(losses)), len(losses))
        if validate is not None:
            entry.val_meteor = float(validate(model))
        history.append(entry)
        log.info("epoch %d loss %.6f%s", epoch, entry.loss,
                 "" if entry.val_meteor is None else f" val METEOR {entry.val_meteor:.4f}")
        if on_epoch is not None:
            on_epoch(entry, model, state)
        if config.max_steps is not None and len(step_losses) >= config.max_steps:
            break
    return TrainResult(history, state, step_losses)


def dataset_loss(model: CaptionModel, samples, label_space: LabelSpace, chunk: int = 64) -> float:
    """Eval-mode mean loss over samples (weighted by chunk size)."""
    total = 0.0
    with ad.no_grad():
        for i in range(0, len(samples), chunk):
            part = samples[i:i + chunk]
            loss = teacher_forced_loss(model, [g for g, _ in part], [c for _, c in part], label_space)
            total += loss.item() * len(part)
    return total / len(samples)
