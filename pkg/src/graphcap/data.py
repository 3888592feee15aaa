"""Dataset records, tokenization, vocabulary and split statistics.

Dataset files are UTF-8 with one JSON object per line::

    {"schema": 1, "image_id": 7,
     "objects": [{"id": 0, "label": "clock", "confidence": 0.9, "bbox": [10, 4, 30, 30]}, ...],
     "relations": [{"src": 0, "dst": 1, "predicate": "in", "confidence": 1.0}, ...],
     "captions": ["a clock tower is in the gray sky."]}

Detector output uses ``relation_scores`` (``[{"src", "dst", "scores": {predicate: prob}}]``)
instead of ``relations``.
"""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Union

from .errors import DataError, FormatError, GraphcapError, ValidationError, VocabularyError
from .scene_graph import (
    BoundingBox,
    LabelSpace,
    ObjectNode,
    PairScores,
    RelationEdge,
    SceneGraph,
)

SCHEMA_VERSION = 1

PAD, START, END, UNK = 0, 1, 2, 3
RESERVED = ("<pad>", "<start>", "<end>", "<unk>")

_TOKEN = re.compile(r"'[^\W_]+|[.,!?;:\"()']|[^\s.,!?;:\"()']+")


def tokenize(caption: str) -> List[str]:
    """Lowercase, split on whitespace and split off punctuation.

    An apostrophe followed by letters stays attached to them, so contractions
    split at the apostrophe ("don't" -> "don", "'t").
    """
    return _TOKEN.findall(caption.lower())


class Vocabulary:
    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tuple(tokens[:4]) != RESERVED:
            raise FormatError(f"vocabulary must start with the reserved tokens {RESERVED}")
        if len(set(tokens)) != len(tokens):
            raise FormatError("vocabulary has duplicate tokens")
        self.tokens = tokens
        self.index = {t: i for i, t in enumerate(tokens)}

    def __len__(self):
        return len(self.tokens)

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def encode(self, tokens: Iterable[str], strict: bool = False) -> List[int]:
        ids = []
        for t in tokens:
            i = self.index.get(t)
            if i is None:
                if strict:
                    raise VocabularyError(f"token {t!r} not in vocabulary")
                i = UNK
            ids.append(i)
        return ids

    def decode(self, ids: Iterable[int]) -> List[str]:
        return [self.tokens[i] for i in ids if i not in (PAD, START, END)]

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        return cls(lines)


def build_vocab(captions: Iterable[str]) -> Vocabulary:
    """Every distinct token, most frequent first, ties in lexicographic order."""
    counts = Counter()
    n = 0
    for caption in captions:
        counts.update(tokenize(caption))
        n += 1
    if n == 0:
        raise DataError("cannot build a vocabulary from an empty corpus")
    words = sorted((t for t in counts if t not in RESERVED), key=lambda t: (-counts[t], t))
    return Vocabulary(list(RESERVED) + words)


# ---------------------------------------------------------------------- records


@dataclass
class DatasetRecord:
    image_id: int
    objects: List[ObjectNode]
    captions: List[str] = field(default_factory=list)
    relations: Optional[List[RelationEdge]] = None
    relation_scores: Optional[List[PairScores]] = None

    @property
    def is_detection(self) -> bool:
        return self.relation_scores is not None

    def gold_graph(self) -> SceneGraph:
        if self.relations is None:
            raise DataError(f"record {self.image_id} carries detector scores, not gold relations")
        return SceneGraph(self.objects, self.relations, self.image_id)

    def detection_pairs(self) -> List[PairScores]:
        if self.relation_scores is not None:
            return list(self.relation_scores)
        return [PairScores(e.src, e.dst, {e.predicate: e.confidence}) for e in self.relations or []]

    def to_json(self) -> dict:
        obj = {"schema": SCHEMA_VERSION, "image_id": self.image_id, "objects": []}
        for n in self.objects:
            o = {"id": n.id, "label": n.label, "confidence": n.confidence}
            if n.bbox is not None:
                o["bbox"] = n.bbox.as_list()
            obj["objects"].append(o)
        if self.relation_scores is not None:
            obj["relation_scores"] = [{"src": p.src, "dst": p.dst, "scores": dict(p.scores)} for p in self.relation_scores]
        else:
            obj["relations"] = [
                {"src": e.src, "dst": e.dst, "predicate": e.predicate, "confidence": e.confidence}
                for e in self.relations or []
            ]
        obj["captions"] = list(self.captions)
        return obj


def parse_record(obj: dict, label_space: Optional[LabelSpace] = None) -> DatasetRecord:
    if not isinstance(obj, dict):
        raise DataError("record must be a JSON object")
    if obj.get("schema") != SCHEMA_VERSION:
        raise FormatError(f"unsupported schema {obj.get('schema')!r} (expected {SCHEMA_VERSION})")
    try:
        objects = []
        for o in obj["objects"]:
            bbox = BoundingBox(*map(float, o["bbox"])) if o.get("bbox") is not None else None
            objects.append(ObjectNode(int(o["id"]), str(o["label"]), float(o.get("confidence", 1.0)), bbox))
        relations = scores = None
        if "relation_scores" in obj:
            scores = [
                PairScores(int(p["src"]), int(p["dst"]), {str(k): float(v) for k, v in p["scores"].items()})
                for p in obj["relation_scores"]
            ]
        else:
            relations = [
                RelationEdge(int(r["src"]), int(r["dst"]), str(r["predicate"]), float(r.get("confidence", 1.0)))
                for r in obj.get("relations", [])
            ]
        captions = [str(c) for c in obj.get("captions", [])]
        image_id = int(obj["image_id"])
    except (KeyError, TypeError, ValueError) as e:
        raise DataError(f"malformed record: {e!r}") from None
    record = DatasetRecord(image_id, objects, captions, relations, scores)
    # endpoint and id checks
    SceneGraph(objects, relations or [], image_id).validate()
    ids = {n.id for n in objects}
    for p in scores or []:
        if p.src not in ids or p.dst not in ids:
            raise ValidationError(f"relation scores {p.src}->{p.dst} point to a missing object")
    if label_space is not None:
        for n in objects:
            label_space.object_index(n.label)
        for e in relations or []:
            label_space.predicate_index(e.predicate)
        for p in scores or []:
            for pred in p.scores:
                label_space.predicate_index(pred)
    return record


def load_split(path: Union[str, Path], label_space: Optional[LabelSpace] = None) -> List[DatasetRecord]:
    """Read a line-delimited split; errors name the offending line."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such file: {path}")
    records = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataError(f"{path}:{lineno}: invalid JSON ({e.msg})") from None
            try:
                records.append(parse_record(obj, label_space))
            except GraphcapError as e:
                raise type(e)(f"{path}:{lineno}: {e}") from None
    return records


def write_split(records: Iterable[DatasetRecord], path: Union[str, Path]) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r.to_json(), sort_keys=True) + "\n")


# ----------------------------------------------------------------- label spaces


def derive_label_space(records: Iterable[DatasetRecord]) -> LabelSpace:
    objects, predicates = set(), set()
    for r in records:
        objects.update(n.label for n in r.objects)
        predicates.update(e.predicate for e in r.relations or [])
        for p in r.relation_scores or []:
            predicates.update(p.scores)
    return LabelSpace(sorted(objects), sorted(predicates))


def load_label_space(objects_path, predicates_path) -> LabelSpace:
    def read(p):
        return [line.strip() for line in Path(p).read_text(encoding="utf-8").splitlines() if line.strip()]

    return LabelSpace(read(objects_path), read(predicates_path))


def save_label_space(ls: LabelSpace, objects_path, predicates_path) -> None:
    Path(objects_path).write_text("\n".join(ls.objects) + "\n", encoding="utf-8")
    Path(predicates_path).write_text("\n".join(ls.predicates) + "\n", encoding="utf-8")


# ------------------------------------------------------------ samples and stats


@dataclass(frozen=True)
class CaptionSample:
    image_id: int
    graph: SceneGraph
    caption: str


def make_training_pairs(records: Sequence[DatasetRecord], mode: str = "train"):
    """One sample per (record, caption) in train mode.

    In eval mode every record yields ``(record, [reference token lists])``.
    """
    if mode == "eval":
        return [(r, [tokenize(c) for c in r.captions]) for r in records]
    samples = []
    for r in records:
        if not r.captions:
            raise DataError(f"record {r.image_id} has no captions")
        g = r.gold_graph()
        samples.extend(CaptionSample(r.image_id, g, c) for c in r.captions)
    return samples


@dataclass
class DatasetStats:
    split_counts: Dict[str, int] = field(default_factory=dict)
    pair_count: int = 0
    mean_captions: float = 0.0
    max_nodes: int = 0

    def to_text(self) -> str:
        lines = [f"records.{k}={v}" for k, v in sorted(self.split_counts.items())]
        lines += [f"pairs={self.pair_count}", f"mean_captions={self.mean_captions!r}", f"max_nodes={self.max_nodes}"]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "DatasetStats":
        stats = cls()
        for line in text.splitlines():
            if "=" not in line:
                continue
            key, value = (s.strip() for s in line.split("=", 1))
            if key.startswith("records."):
                stats.split_counts[key[len("records."):]] = int(value)
            elif key == "pairs":
                stats.pair_count = int(value)
            elif key == "mean_captions":
                stats.mean_captions = float(value)
            elif key == "max_nodes":
                stats.max_nodes = int(value)
        return stats


def compute_stats(records: Sequence[DatasetRecord], split: str = "train") -> DatasetStats:
    if not records:
        return DatasetStats({split: 0}, 0, 0.0, 0)
    pairs = sum(len(r.captions) for r in records)
    return DatasetStats(
        split_counts={split: len(records)},
        pair_count=pairs,
        mean_captions=pairs / len(records),
        max_nodes=max(len(r.objects) for r in records),
    )


def encode_caption(vocab: Vocabulary, caption: str) -> List[int]:
    return vocab.encode(tokenize(caption))


def caption_text(vocab: Vocabulary, ids: Sequence[int]) -> str:
    return " ".join(vocab.decode(ids))


def reference_tokens(record: DatasetRecord) -> List[List[str]]:
    return [tokenize(c) for c in record.captions]


__all__ = [
    "CaptionSample", "DatasetRecord", "DatasetStats", "Vocabulary", "build_vocab", "compute_stats",
    "derive_label_space", "load_label_space", "load_split", "make_training_pairs", "parse_record",
    "save_label_space", "tokenize", "write_split", "PAD", "START", "END", "UNK", "RESERVED",
]
