"""Evaluation harness: build graphs, decode, score against all references."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .data import DatasetRecord, Vocabulary, tokenize
from .decoder import DecodeConfig
from .errors import DataError
from .metrics import EvalRecord, MetricReport, score_records
from .model import CaptionModel
from .scene_graph import (
    LabelSpace,
    SceneGraph,
    postprocess_detection,
    reify,
    validate_min_nodes,
    with_gold_confidence,
)

log = logging.getLogger(__name__)

DEFAULT_THRESHOLDS = (0.2, 0.4, 0.6, 0.8)


def build_graph(record: DatasetRecord, source: str, label_space: LabelSpace, threshold: float = 0.4,
                max_nodes: Optional[int] = None) -> Tuple[Optional[SceneGraph], str]:
    """Graph for ``record`` plus a rejection reason (empty when accepted)."""
    if source == "gold":
        g = with_gold_confidence(record.gold_graph())
        if not validate_min_nodes(g):
            return None, f"fewer than two object nodes ({len(g.nodes)})"
        return g, ""
    if source == "detection":
        cap = max_nodes if max_nodes is not None else max(len(record.objects), 2)
        g = postprocess_detection(record.objects, record.detection_pairs(), threshold, cap, label_space,
                                  record.image_id)
        if g is None:
            return None, f"fewer than two object nodes after post-processing at threshold {threshold}"
        return g, ""
    raise ValueError(f"unknown graph source {source!r}")


@dataclass
class EvaluationResult:
    report: MetricReport
    captions: List[Tuple[int, str]] = field(default_factory=list)
    rejected: List[Tuple[int, str]] = field(default_factory=list)


def evaluate_model(model: CaptionModel, records: Sequence[DatasetRecord], label_space: LabelSpace,
                   vocab: Vocabulary, source: str = "gold", threshold: float = 0.4,
                   max_nodes: Optional[int] = None, decode: DecodeConfig = DecodeConfig(),
                   transform: Optional[Callable[[SceneGraph], SceneGraph]] = None,
                   rng: Optional[np.random.Generator] = None, allow_empty: bool = False) -> EvaluationResult:
    """Decode every accepted record and score it against all of its captions.

    Records whose graph has fewer than two objects are skipped and counted.
    ``transform`` is applied to each accepted graph before decoding.
    """
    if not records:
        raise DataError("evaluation split is empty")
    accepted: List[DatasetRecord] = []
    graphs = []
    rejected: List[Tuple[int, str]] = []
    for r in records:
        g, reason = build_graph(r, source, label_space, threshold, max_nodes)
        if g is None:
            rejected.append((r.image_id, reason))
            continue
        if transform is not None:
            g = transform(g)
        accepted.append(r)
        graphs.append(reify(g))
    label = model.variant_name
    if not accepted:
        if allow_empty:
            return EvaluationResult(MetricReport([0.0] * 4, 0.0, 0, len(rejected), label), [], rejected)
        raise DataError(f"all {len(rejected)} evaluation records were rejected")
    outputs = model.generate(graphs, label_space, decode, rng)
    eval_records, captions = [], []
    for r, ids in zip(accepted, outputs):
        words = vocab.decode(ids)
        captions.append((r.image_id, " ".join(words)))
        eval_records.append(EvalRecord(r.image_id, words, [tokenize(c) for c in r.captions]))
    report = score_records(eval_records, len(rejected), label)
    return EvaluationResult(report, captions, rejected)


@dataclass
class SweepResult:
    scores: Dict[float, float]
    selected: float
    accepted: Dict[float, int] = field(default_factory=dict)

    def to_text(self) -> str:
        lines = [f"threshold={t:g}\tmeteor={s!r}\taccepted={self.accepted.get(t, 0)}"
                 for t, s in self.scores.items()]
        lines.append(f"selected={self.selected:g}")
        return "\n".join(lines) + "\n"

    @staticmethod
    def parse(text: str) -> Tuple[Dict[float, float], float]:
        scores, selected = {}, None
        for line in text.splitlines():
            fields = dict(part.split("=", 1) for part in line.split("\t") if "=" in part)
            if "threshold" in fields:
                scores[float(fields["threshold"])] = float(fields["meteor"])
            elif "selected" in fields:
                selected = float(fields["selected"])
        return scores, selected


def select_threshold(scores: Dict[float, float]) -> float:
    """Highest score wins; ties go to the lower threshold."""
    return min(scores, key=lambda t: (-scores[t], t))


def sweep_thresholds(model: CaptionModel, records: Sequence[DatasetRecord], label_space: LabelSpace,
                     vocab: Vocabulary, thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
                     max_nodes: Optional[int] = None, decode: DecodeConfig = DecodeConfig()) -> SweepResult:
    """Validation METEOR of the detection path at each threshold.

    A threshold that rejects every record scores 0; the sweep only fails when
    that happens for all thresholds.
    """
    if len(set(thresholds)) != len(thresholds):
        raise ValueError("thresholds must be distinct")
    if any(not 0.0 <= t <= 1.0 for t in thresholds):
        raise ValueError("thresholds must lie in [0, 1]")
    scores, accepted = {}, {}
    for t in thresholds:
        res = evaluate_model(model, records, label_space, vocab, "detection", t, max_nodes, decode, allow_empty=True)
        accepted[t] = res.report.samples
        if res.report.samples == 0:
            log.warning("threshold %g rejected all %d records; scoring it as 0", t, len(records))
        scores[t] = res.report.meteor
    if not any(accepted.values()):
        raise DataError("every threshold rejected every validation record")
    return SweepResult(scores, select_threshold(scores), accepted)


def validation_meteor(model: CaptionModel, records: Sequence[DatasetRecord], label_space: LabelSpace,
                      vocab: Vocabulary, decode: DecodeConfig = DecodeConfig()) -> float:
    res = evaluate_model(model, records, label_space, vocab, "gold", decode=decode)
    return res.report.meteor


__all__ = ["build_graph", "evaluate_model", "sweep_thresholds", "select_threshold", "SweepResult",
           "EvaluationResult", "validation_meteor", "DEFAULT_THRESHOLDS"]
