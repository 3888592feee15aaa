"""Command-line tooling: prepare, train, generate, evaluate, sweep, gradcheck.

Exit codes: 0 success, 1 usage, 2 data or format problem, 3 numeric failure.
Settings may come from a ``key = value`` file given with ``--config``;
command-line flags override it.
"""

from __future__ import annotations

import argparse
import logging
import shutil
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .data import (
    DatasetStats,
    Vocabulary,
    build_vocab,
    compute_stats,
    derive_label_space,
    encode_caption,
    load_label_space,
    load_split,
    make_training_pairs,
    save_label_space,
)
from .decoder import DecodeConfig
from .errors import ConfigError, GraphcapError, NumericError
from .evaluation import DEFAULT_THRESHOLDS, build_graph, evaluate_model, sweep_thresholds
from .model import VARIANT_NAMES, VARIANTS, ModelConfig, init_model
from .scene_graph import reify
from .training import EpochLog, TrainConfig, train

log = logging.getLogger("graphcap")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
PREPARED_FILES = ("vocab.txt", "objects.txt", "predicates.txt", "stats.txt")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


# Options shared by subcommands. Defaults live here rather than in argparse
# so that a config file can sit between the two.
DEFAULTS = {
    "train": None,
    "val": None,
    "test": None,
    "checkpoint": None,
    "prepared": None,
    "objects": None,
    "predicates": None,
    "variant": "base",
    "seed": 0,
    "lr": 1e-4,
    "epochs": 10,
    "batch": 32,
    "max_len": 20,
    "mode": "greedy",
    "temp": 1.0,
    "threshold": 0.4,
    "thresholds": ",".join(f"{t:g}" for t in DEFAULT_THRESHOLDS),
    "dim": 512,
    "hidden": 1024,
    "attn_dim": None,
    "gat_layers": 2,
    "source": "gold",
    "max_nodes": None,
    "out": ".",
}

_TYPES = {
    "seed": int, "epochs": int, "batch": int, "max_len": int, "dim": int, "hidden": int, "attn_dim": int,
    "gat_layers": int, "max_nodes": int, "lr": float, "temp": float, "threshold": float,
}


def read_config(path: str) -> Dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    p = Path(path)
    if not p.exists():
        raise UsageError(f"config file not found: {p}")
    values = {}
    for lineno, raw in enumerate(p.read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{p}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key.replace("-", "_")] = value
    return values


def _common(p: argparse.ArgumentParser, *names: str):
    flags = {
        "config": dict(help="key = value settings file (flags override it)"),
        "train": dict(help="training split (JSON lines)"),
        "val": dict(help="validation split"),
        "test": dict(help="split to decode or score"),
        "variant": dict(choices=sorted(VARIANTS)),
        "seed": dict(type=int),
        "lr": dict(type=float),
        "epochs": dict(type=int),
        "batch": dict(type=int),
        "max_len": dict(type=int),
        "mode": dict(choices=["greedy", "sample"]),
        "temp": dict(type=float),
        "threshold": dict(type=float),
        "thresholds": dict(help="comma-separated list"),
        "checkpoint": dict(),
        "prepared": dict(help="directory written by 'prepare' (default: next to the checkpoint)"),
        "objects": dict(help="object label list, one per line"),
        "predicates": dict(help="predicate label list, one per line"),
        "dim": dict(type=int, help="node and word embedding width D"),
        "hidden": dict(type=int, help="LSTM hidden size H"),
        "attn_dim": dict(type=int, help="attention width A (default D)"),
        "gat_layers": dict(type=int),
        "source": dict(choices=["gold", "detection"]),
        "max_nodes": dict(type=int),
        "out": dict(help="output directory"),
    }
    for name in ("config",) + names:
        p.add_argument("--" + name.replace("_", "-"), dest=name, default=None, **flags[name])


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="graphcap", description="Scene-graph captioning tools.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("prepare", help="build vocabulary, label lists and stats")
    _common(p, "train", "val", "test", "objects", "predicates", "out")

    p = sub.add_parser("train", help="train one model variant")
    _common(p, "train", "val", "prepared", "variant", "seed", "lr", "epochs", "batch", "dim", "hidden",
            "attn_dim", "gat_layers", "max_len", "out")

    p = sub.add_parser("generate", help="caption every record of a split")
    _common(p, "test", "checkpoint", "prepared", "source", "threshold", "max_nodes", "max_len", "mode",
            "temp", "seed", "out")

    p = sub.add_parser("evaluate", help="BLEU and METEOR on a split")
    _common(p, "test", "checkpoint", "prepared", "source", "threshold", "max_nodes", "max_len", "out")

    p = sub.add_parser("sweep", help="pick the detector confidence threshold on validation METEOR")
    _common(p, "val", "checkpoint", "prepared", "thresholds", "max_nodes", "max_len", "out")

    p = sub.add_parser("gradcheck", help="finite-difference check of a tiny model")
    _common(p, "variant", "seed", "out")
    return parser


def resolve(args: argparse.Namespace) -> argparse.Namespace:
    """Merge defaults, then the config file, then explicit flags."""
    merged = dict(DEFAULTS)
    if args.config:
        for key, value in read_config(args.config).items():
            try:
                merged[key] = _TYPES[key](value) if key in _TYPES else value
            except ValueError:
                raise UsageError(f"config value for {key!r} is not a valid {_TYPES[key].__name__}") from None
    merged.update({k: v for k, v in vars(args).items() if v is not None})
    if merged["variant"] not in VARIANTS:
        raise UsageError(f"unknown variant {merged['variant']!r}")
    return argparse.Namespace(**merged)


def _require(cfg, *names):
    for n in names:
        if not getattr(cfg, n, None):
            raise UsageError(f"--{n.replace('_', '-')} is required for '{cfg.command}'")


def _out_dir(cfg) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _prepared_dir(cfg) -> Path:
    if getattr(cfg, "prepared", None):
        return Path(cfg.prepared)
    if getattr(cfg, "checkpoint", None):
        return Path(cfg.checkpoint).parent
    raise UsageError("--prepared is required")


def load_prepared(directory: Path):
    missing = [f for f in PREPARED_FILES[:3] if not (directory / f).exists()]
    if missing:
        raise FileNotFoundError(f"{directory / missing[0]} not found; run 'graphcap prepare' first")
    vocab = Vocabulary.load(directory / "vocab.txt")
    labels = load_label_space(directory / "objects.txt", directory / "predicates.txt")
    return vocab, labels


def _decode_config(cfg) -> DecodeConfig:
    return DecodeConfig(max_len=cfg.max_len, mode=getattr(cfg, "mode", "greedy"),
                        temperature=getattr(cfg, "temp", 1.0))


# --------------------------------------------------------------------- commands


def cmd_prepare(cfg) -> int:
    _require(cfg, "train")
    out = _out_dir(cfg)
    splits = {"train": load_split(cfg.train)}
    for name in ("val", "test"):
        if getattr(cfg, name):
            splits[name] = load_split(getattr(cfg, name))
    if cfg.objects or cfg.predicates:
        _require(cfg, "objects", "predicates")
        labels = load_label_space(cfg.objects, cfg.predicates)
        for records in splits.values():
            for r in records:
                labels.check_graph(r.gold_graph())
    else:
        labels = derive_label_space(r for records in splits.values() for r in records)
    vocab = build_vocab(c for r in splits["train"] for c in r.captions)
    stats = DatasetStats()
    for name, records in splits.items():
        s = compute_stats(records, name)
        stats.split_counts.update(s.split_counts)
        if name == "train":
            stats.pair_count, stats.mean_captions, stats.max_nodes = s.pair_count, s.mean_captions, s.max_nodes
    vocab.save(out / "vocab.txt")
    save_label_space(labels, out / "objects.txt", out / "predicates.txt")
    (out / "stats.txt").write_text(stats.to_text(), encoding="utf-8")
    print(f"training pairs: {stats.pair_count} from {stats.split_counts['train']} records")
    print(f"vocabulary: {len(vocab)} tokens; labels: {len(labels.objects)} objects, "
          f"{len(labels.predicates)} predicates; max graph size {stats.max_nodes}")
    return EXIT_OK


def _reified_samples(records, vocab: Vocabulary):
    return [(reify(s.graph), encode_caption(vocab, s.caption)) for s in make_training_pairs(records)]


def cmd_train(cfg) -> int:
    _require(cfg, "train")
    out = _out_dir(cfg)
    prepared = Path(cfg.prepared) if cfg.prepared else out
    vocab, labels = load_prepared(prepared)
    train_records = load_split(cfg.train, labels)
    val_records = load_split(cfg.val, labels) if cfg.val else None
    samples = _reified_samples(train_records, vocab)

    mcfg = ModelConfig.for_variant(cfg.variant, labels.size, len(vocab), embed_dim=cfg.dim,
                                   hidden_dim=cfg.hidden, attn_dim=cfg.attn_dim, gat_layers=cfg.gat_layers)
    model = init_model(mcfg, seed=cfg.seed)
    tcfg = TrainConfig(lr=cfg.lr, epochs=cfg.epochs, batch_size=cfg.batch, seed=cfg.seed)
    decode = DecodeConfig(max_len=cfg.max_len)
    if prepared != out:
        for name in PREPARED_FILES:
            if (prepared / name).exists():
                shutil.copyfile(prepared / name, out / name)

    validate = None
    if val_records:
        def validate(m):
            return evaluate_model(m, val_records, labels, vocab, "gold", decode=decode).report.meteor

    log_path = out / "train_log.tsv"
    best = {"score": None}

    def on_epoch(entry: EpochLog, m, state):
        with log_path.open("a", encoding="utf-8") as fh:
            fh.write(entry.line() + "\n")
        print(f"[{VARIANT_NAMES[cfg.variant]}] epoch {entry.epoch} loss {entry.loss:.4f}"
              + ("" if entry.val_meteor is None else f" val METEOR {entry.val_meteor:.4f}"))
        score = entry.val_meteor if entry.val_meteor is not None else -entry.loss
        if best["score"] is None or score > best["score"]:
            best["score"] = score
            save_checkpoint(out / "best.gcap", m, state)

    log_path.write_text("epoch\tloss\tsteps\tval_meteor\n", encoding="utf-8")
    result = train(model, samples, labels, tcfg, validate=validate, on_epoch=on_epoch)
    save_checkpoint(out / "final.gcap", model, result.state)
    if not result.history:
        save_checkpoint(out / "best.gcap", model, result.state)
    print(f"wrote {out / 'final.gcap'} and {out / 'best.gcap'}")
    return EXIT_OK


def _load_for_inference(cfg):
    _require(cfg, "checkpoint")
    vocab, labels = load_prepared(_prepared_dir(cfg))
    model, _ = load_checkpoint(cfg.checkpoint)
    return model, vocab, labels


def cmd_generate(cfg) -> int:
    _require(cfg, "test")
    model, vocab, labels = _load_for_inference(cfg)
    records = load_split(cfg.test, labels)
    out = _out_dir(cfg)
    accepted, graphs, rejected = [], [], []
    for r in records:
        g, reason = build_graph(r, cfg.source, labels, cfg.threshold, cfg.max_nodes)
        if g is None:
            rejected.append((r.image_id, reason))
        else:
            accepted.append(r.image_id)
            graphs.append(reify(g))
    rng = np.random.default_rng(cfg.seed)
    outputs = model.generate(graphs, labels, _decode_config(cfg), rng) if graphs else []
    with (out / "captions.tsv").open("w", encoding="utf-8") as fh:
        for image_id, ids in zip(accepted, outputs):
            fh.write(f"{image_id}\t{' '.join(vocab.decode(ids))}\n")
    with (out / "rejected.tsv").open("w", encoding="utf-8") as fh:
        for image_id, reason in rejected:
            fh.write(f"{image_id}\t{reason}\n")
    print(f"captioned {len(accepted)} records, rejected {len(rejected)}")
    return EXIT_OK


def cmd_evaluate(cfg) -> int:
    _require(cfg, "test")
    model, vocab, labels = _load_for_inference(cfg)
    records = load_split(cfg.test, labels)
    res = evaluate_model(model, records, labels, vocab, cfg.source, cfg.threshold, cfg.max_nodes,
                         DecodeConfig(max_len=cfg.max_len))
    out = _out_dir(cfg)
    (out / "metrics.txt").write_text(res.report.to_kv(), encoding="utf-8")
    (out / "report.md").write_text(res.report.to_table(), encoding="utf-8")
    print(res.report.to_table(), end="")
    return EXIT_OK


def parse_thresholds(text) -> List[float]:
    if isinstance(text, (list, tuple)):
        return [float(t) for t in text]
    try:
        return [float(t) for t in str(text).split(",") if t.strip()]
    except ValueError:
        raise UsageError(f"--thresholds must be comma-separated numbers, got {text!r}") from None


def cmd_sweep(cfg) -> int:
    _require(cfg, "val")
    thresholds = parse_thresholds(cfg.thresholds)
    if not thresholds:
        raise UsageError("--thresholds is empty")
    model, vocab, labels = _load_for_inference(cfg)
    records = load_split(cfg.val, labels)
    result = sweep_thresholds(model, records, labels, vocab, thresholds, cfg.max_nodes,
                              DecodeConfig(max_len=cfg.max_len))
    out = _out_dir(cfg)
    (out / "sweep.txt").write_text(result.to_text(), encoding="utf-8")
    print(result.to_text(), end="")
    return EXIT_OK


def cmd_gradcheck(cfg) -> int:
    from .gradcheck import TOLERANCE, check_variant

    report = check_variant(cfg.variant, seed=cfg.seed)
    lines = [f"{name}\t{err:.3e}\t{report.coords_checked.get(name, 0)}" for name, err in report.per_param.items()]
    lines.append(f"max\t{report.max_error:.3e}\t{report.worst}")
    text = "\n".join(lines) + "\n"
    print(f"[{VARIANT_NAMES[cfg.variant]}] parameter\tmax_rel_error\tcoords")
    print(text, end="")
    if cfg.out != DEFAULTS["out"]:
        (_out_dir(cfg) / f"gradcheck_{cfg.variant}.txt").write_text(text, encoding="utf-8")
    if not report.max_error < TOLERANCE:
        raise NumericError(f"gradient check failed: worst parameter {report.worst} "
                           f"(relative error {report.max_error:.3e} >= {TOLERANCE:g})")
    return EXIT_OK


COMMANDS = {
    "prepare": cmd_prepare,
    "train": cmd_train,
    "generate": cmd_generate,
    "evaluate": cmd_evaluate,
    "sweep": cmd_sweep,
    "gradcheck": cmd_gradcheck,
}


def exit_code(err: BaseException) -> int:
    if isinstance(err, (UsageError, ConfigError)):
        return EXIT_USAGE
    if isinstance(err, NumericError):
        return EXIT_NUMERIC
    return EXIT_DATA


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = resolve(args)
        return COMMANDS[cfg.command](cfg)
    except (UsageError, GraphcapError, OSError) as err:
        print(f"graphcap: error: {err}", file=sys.stderr)
        return exit_code(err)


if __name__ == "__main__":
    sys.exit(main())
