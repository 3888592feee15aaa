"""Corpus BLEU and an exact+stem METEOR variant, both multi-reference.

``meteor_lite`` follows the METEOR scoring formulas but aligns with exact and
Porter-stem matches only (no synonym or paraphrase tables), so its absolute
values are not comparable to the official METEOR tool.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from functools import lru_cache
from typing import List, Sequence, Tuple

from nltk.stem.porter import PorterStemmer

from .errors import DataError

_stemmer = PorterStemmer()


@lru_cache(maxsize=65536)
def stem(token: str) -> str:
    return _stemmer.stem(token)


@dataclass
class EvalRecord:
    image_id: int
    hypothesis: List[str]
    references: List[List[str]]

    def __post_init__(self):
        if not self.references:
            raise DataError(f"record {self.image_id} needs at least one reference")


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _closest_ref_length(hyp_len: int, refs: Sequence[Sequence[str]]) -> int:
    return min((len(r) for r in refs), key=lambda L: (abs(L - hyp_len), L))


def bleu_corpus(records: Sequence[EvalRecord], max_n: int = 4) -> List[float]:
    """[B-1, ..., B-max_n] with clipped n-gram precision and corpus brevity penalty."""
    if not records:
        raise DataError("BLEU needs at least one record")
    if not 1 <= max_n <= 4:
        raise ValueError("max_n must be between 1 and 4")
    matched = [0] * (max_n + 1)
    possible = [0] * (max_n + 1)
    hyp_len = ref_len = 0
    for rec in records:
        hyp = rec.hypothesis
        hyp_len += len(hyp)
        ref_len += _closest_ref_length(len(hyp), rec.references)
        for n in range(1, max_n + 1):
            counts = _ngrams(hyp, n)
            ceiling: Counter = Counter()
            for ref in rec.references:
                ceiling |= _ngrams(ref, n)
            matched[n] += sum(min(c, ceiling[g]) for g, c in counts.items())
            possible[n] += sum(counts.values())
    if hyp_len == 0:
        return [0.0] * max_n
    bp = min(1.0, math.exp(1 - ref_len / hyp_len))
    scores, log_sum = [], 0.0
    for n in range(1, max_n + 1):
        if matched[n] == 0 or log_sum == -math.inf:
            log_sum = -math.inf
            scores.append(0.0)
            continue
        log_sum += math.log(matched[n] / possible[n])
        scores.append(bp * math.exp(log_sum / n))
    return scores


def align(hypothesis: Sequence[str], reference: Sequence[str]) -> List[Tuple[int, int]]:
    """Greedy left-to-right unigram alignment: exact matches first, then stems."""
    used = [False] * len(reference)
    pairs = {}
    for key in (lambda t: t, stem):
        ref_keys = [key(t) for t in reference]
        for i, tok in enumerate(hypothesis):
            if i in pairs:
                continue
            k = key(tok)
            for j, rk in enumerate(ref_keys):
                if not used[j] and rk == k:
                    used[j] = True
                    pairs[i] = j
                    break
    return sorted(pairs.items())


def count_chunks(alignment: Sequence[Tuple[int, int]]) -> int:
    chunks = 0
    prev = None
    for h, r in alignment:
        if prev is None or h != prev[0] + 1 or r != prev[1] + 1:
            chunks += 1
        prev = (h, r)
    return chunks


def meteor_single(hypothesis: Sequence[str], reference: Sequence[str], alpha: float = 0.9,
                  beta: float = 3.0, gamma: float = 0.5) -> float:
    alignment = align(hypothesis, reference)
    m = len(alignment)
    if m == 0:
        return 0.0
    precision, recall = m / len(hypothesis), m / len(reference)
    fmean = precision * recall / (alpha * precision + (1 - alpha) * recall)
    penalty = gamma * (count_chunks(alignment) / m) ** beta
    return fmean * (1 - penalty)


def meteor_lite(record: EvalRecord, alpha: float = 0.9, beta: float = 3.0, gamma: float = 0.5) -> float:
    """Best score over the record's references."""
    return max(meteor_single(record.hypothesis, ref, alpha, beta, gamma) for ref in record.references)


def meteor_corpus(records: Sequence[EvalRecord], **params) -> float:
    if not records:
        raise DataError("METEOR needs at least one record")
    return math.fsum(meteor_lite(r, **params) for r in records) / len(records)


METRIC_KEYS = ("B-1", "B-2", "B-3", "B-4", "METEOR")


@dataclass
class MetricReport:
    bleu: List[float]
    meteor: float
    samples: int
    rejected: int = 0
    label: str = ""
    extra: dict = field(default_factory=dict)

    def scores(self) -> dict:
        """Scores on the 0-100 scale used in result tables."""
        vals = dict(zip(METRIC_KEYS[:4], self.bleu))
        vals["METEOR"] = self.meteor
        return {k: 100.0 * v for k, v in vals.items()}

    def to_kv(self) -> str:
        return "".join(f"{k}={v:.4f}\n" for k, v in self.scores().items())

    def to_table(self) -> str:
        header = "| Model | " + " | ".join(METRIC_KEYS) + " |"
        rule = "|" + "---|" * (len(METRIC_KEYS) + 1)
        row = f"| {self.label or '-'} | " + " | ".join(f"{v:.2f}" for v in self.scores().values()) + " |"
        foot = f"\nsamples scored: {self.samples}, rejected: {self.rejected}\n"
        return "\n".join([header, rule, row]) + foot


def parse_kv(text: str) -> dict:
    out = {}
    for line in text.splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            out[k.strip()] = float(v)
    return out


def score_records(records: Sequence[EvalRecord], rejected: int = 0, label: str = "") -> MetricReport:
    return MetricReport(bleu_corpus(records, 4), meteor_corpus(records), len(records), rejected, label)
