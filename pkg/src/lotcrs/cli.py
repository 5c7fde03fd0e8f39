"""Command-line interface: ``lotcrs <command> [flags]``."""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from collections.abc import Sequence
from pathlib import Path
from typing import TextIO

from . import synthetic
from .corpus import (
    SEEKER,
    RECOMMENDER,
    Conversation,
    CorpusError,
    Utterance,
    corpus_stats,
    frequency_table,
    load_catalog,
    load_conversations,
    write_catalog,
    write_conversations,
)
from .metrics import MetricError, evaluate_model
from .neuralcore.checkpoint import Checkpoint, CheckpointError
from .objectives import ObjectiveError
from .pipeline import (
    PipelineError,
    TrainConfig,
    finetune_generation,
    finetune_recommendation,
    generate_response,
    make_vocabulary,
    pretrain,
    recommend,
    train_teacher,
)
from .retrieval import DenseIndex, RetrievalError, build_index
from .simulator import (
    DEFAULT_TEMPLATES,
    SimulationError,
    extract_attributes,
    load_lexicon,
    load_templates,
    simulate_balanced_corpus,
    write_attributes,
    write_templates,
)

log = logging.getLogger("lotcrs")

SIM_KEYS = {"target_freq": 8, "attr_k": 10}
_TRAIN_KEYS = {f.name for f in dataclasses.fields(TrainConfig)}

# --epochs / --lr address the stage being run.
_STAGE = {
    "pretrain": ("pretrain_epochs", "lr_pretrain"),
    "train-teacher": ("teacher_epochs", "lr_teacher"),
    "finetune-rec": ("rec_epochs", "lr_rec"),
    "finetune-gen": ("gen_epochs", "lr_gen"),
}

_FLAG_KEYS = {
    "seed": "seed",
    "lambda1": "lambda1",
    "lambda2": "lambda2",
    "gamma": "gamma",
    "retrieval_k": "retrieval_k",
    "mask_rate": "mask_rate",
    "tau": "tau",
    "tail_threshold": "tail_threshold",
    "target_freq": "target_freq",
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _common(p: argparse.ArgumentParser, *flags: str) -> None:
    p.add_argument("--config", type=Path, help="JSON file of configuration overrides")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", type=Path)
    for f in flags:
        if f in ("catalog", "conversations", "sim-corpus", "templates", "test", "checkpoint", "teacher",
                 "index", "gen-checkpoint", "response-index", "lexicon"):
            p.add_argument(f"--{f}", type=Path)
        elif f in ("epochs", "batch-size", "retrieval-k", "tail-threshold", "target-freq", "attr-k"):
            p.add_argument(f"--{f}", type=int)
        else:
            p.add_argument(f"--{f}", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="lotcrs", description="Long-tail conversational recommendation toolkit")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True
    train_flags = ("epochs", "batch-size", "lr", "tau")

    p = sub.add_parser("synth-world", help="write a Zipf-skewed synthetic catalog and dialogue corpus")
    _common(p)
    p.add_argument("--n-items", type=int, default=50)
    p.add_argument("--n-conversations", type=int, default=400)
    p.add_argument("--exponent", type=float, default=1.2)
    p.add_argument("--test-fraction", type=float, default=0.2)

    p = sub.add_parser("simulate", help="extract attributes and simulate a balanced corpus")
    _common(p, "catalog", "templates", "lexicon", "target-freq", "attr-k")

    p = sub.add_parser("pretrain", help="pre-train on the simulated corpus and build retrieval indexes")
    _common(p, "catalog", "conversations", "sim-corpus", "mask-rate", *train_flags)

    p = sub.add_parser("train-teacher", help="train the teacher recommender on simulated data")
    _common(p, "catalog", "sim-corpus", "checkpoint", *train_flags)

    p = sub.add_parser("finetune-rec", help="fine-tune the recommender")
    _common(p, "catalog", "conversations", "sim-corpus", "checkpoint", "teacher", "index",
            "lambda1", "lambda2", "gamma", "retrieval-k", *train_flags)

    p = sub.add_parser("finetune-gen", help="fine-tune the response template generator")
    _common(p, "catalog", "conversations", "checkpoint", "response-index", "retrieval-k", *train_flags)

    p = sub.add_parser("evaluate", help="score a fine-tuned model on a test split")
    _common(p, "catalog", "conversations", "test", "checkpoint", "index", "gen-checkpoint",
            "response-index", "tail-threshold", "gamma", "retrieval-k")

    p = sub.add_parser("stats", help="print corpus statistics")
    _common(p, "catalog", "conversations", "tail-threshold")

    p = sub.add_parser("chat", help="interactive recommendation session")
    _common(p, "catalog", "checkpoint", "index", "gen-checkpoint", "response-index", "gamma", "retrieval-k")
    return parser


def resolve_config(args: argparse.Namespace) -> dict:
    """Defaults, then the input checkpoint's settings, then the config file, then command-line flags."""
    cfg = {**TrainConfig().to_dict(), **SIM_KEYS}
    base = getattr(args, "checkpoint", None)
    if base is not None and base.is_file():
        cfg.update(Checkpoint.load(base).config or {})
    if args.config is not None:
        try:
            data = json.loads(args.config.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise PipelineError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(data, dict):
            raise PipelineError(f"config {args.config} must hold a JSON object")
        unknown = sorted(set(data) - set(cfg))
        if unknown:
            raise PipelineError(f"unknown config keys: {', '.join(unknown)}")
        cfg.update(data)
    for flag, key in _FLAG_KEYS.items():
        v = getattr(args, flag, None)
        if v is not None:
            cfg[key] = v
    stage = _STAGE.get(args.command)
    if stage:
        if getattr(args, "epochs", None) is not None:
            cfg[stage[0]] = args.epochs
        if getattr(args, "lr", None) is not None:
            cfg[stage[1]] = args.lr
    if getattr(args, "batch_size", None) is not None:
        cfg["gen_batch_size" if args.command == "finetune-gen" else "batch_size"] = args.batch_size
    if getattr(args, "attr_k", None) is not None:
        cfg["attr_k"] = args.attr_k
    for key in SIM_KEYS:
        if not isinstance(cfg[key], int) or cfg[key] < 1:
            raise PipelineError(f"{key} must be a positive integer")
    train_config(cfg)
    return cfg


def train_config(cfg: dict) -> TrainConfig:
    return TrainConfig.from_dict({k: v for k, v in cfg.items() if k in _TRAIN_KEYS})


def _require(args, *names: str) -> None:
    missing = [n for n in names if getattr(args, n.replace("-", "_"), None) is None]
    if missing:
        raise UsageError(f"{args.command}: missing required flag(s): " + ", ".join(f"--{m}" for m in missing))


def _out(args) -> Path:
    _require(args, "out")
    args.out.mkdir(parents=True, exist_ok=True)
    return args.out


def _write_snapshot(args, cfg: dict) -> None:
    paths = {
        k: str(v)
        for k, v in sorted(vars(args).items())
        if isinstance(v, Path) and k not in ("out", "config")
    }
    extras = {
        k: v for k, v in sorted(vars(args).items())
        if k in ("n_items", "n_conversations", "exponent", "test_fraction")
    }
    snap = {"command": args.command, "inputs": paths, "config": cfg, **extras}
    (args.out / "config.json").write_text(json.dumps(snap, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# -- commands ------------------------------------------------------------------


def cmd_synth_world(args, cfg, stdout) -> None:
    out = _out(args)
    world = synthetic.make_world(args.n_items, args.n_conversations, args.exponent, cfg["seed"])
    train, test = synthetic.split(world.conversations, args.test_fraction, cfg["seed"])
    write_catalog(out / "catalog.jsonl", world.catalog)
    write_conversations(out / "train.jsonl", train)
    write_conversations(out / "test.jsonl", test)
    (out / "lexicon.txt").write_text("\n".join(sorted(world.lexicon)) + "\n", encoding="utf-8")
    print(f"wrote {len(world.catalog)} items, {len(train)} train and {len(test)} test conversations to {out}",
          file=stdout)


def cmd_simulate(args, cfg, stdout) -> None:
    _require(args, "catalog")
    out = _out(args)
    catalog = load_catalog(args.catalog)
    templates = load_templates(args.templates) if args.templates else DEFAULT_TEMPLATES
    lexicon = load_lexicon(args.lexicon) if args.lexicon else None
    attrs = extract_attributes(catalog, cfg["attr_k"], lexicon)
    sim = simulate_balanced_corpus(catalog, attrs, templates, cfg["target_freq"], cfg["seed"])
    write_attributes(out / "attributes.jsonl", attrs)
    write_templates(out / "templates.json", templates)
    write_conversations(out / "sim_corpus.jsonl", sim)
    print(f"simulated {len(sim)} conversations", file=stdout)


def _sim(args, catalog):
    return load_conversations(args.sim_corpus, catalog)


def cmd_pretrain(args, cfg, stdout) -> None:
    _require(args, "catalog", "sim-corpus")
    out = _out(args)
    tc = train_config(cfg)
    catalog = load_catalog(args.catalog)
    sim = _sim(args, catalog)
    corpora = [sim]
    if args.conversations is not None:
        corpora.insert(0, load_conversations(args.conversations, catalog))
    vocab = make_vocabulary(corpora, catalog)
    ckpt, hist = pretrain(sim, tc, vocab, catalog.ids)
    ckpt.save(out / "pretrained.ckpt")
    hist.write(out / "pretrain_metrics.jsonl")
    build_index(sim, ckpt.params, vocab, "user_repr", tc.max_len).save(out / "sim_index.idx")
    build_index(sim, ckpt.params, vocab, "response_repr", tc.max_len).save(out / "response_index.idx")
    print(f"pretrained: final loss {hist.curve('total')[-1]:.4f}" if hist.records else "pretrained: 0 epochs",
          file=stdout)


def _load_ckpt(path: Path, *stages: str) -> Checkpoint:
    ckpt = Checkpoint.load(path)
    if stages and ckpt.stage not in stages:
        raise CheckpointError(f"{path}: expected a {' or '.join(stages)} checkpoint, got {ckpt.stage}")
    return ckpt


def cmd_train_teacher(args, cfg, stdout) -> None:
    _require(args, "catalog", "sim-corpus", "checkpoint")
    out = _out(args)
    catalog = load_catalog(args.catalog)
    base = _load_ckpt(args.checkpoint)
    ckpt, hist = train_teacher(_sim(args, catalog), train_config(cfg), base.vocab, base.item_ids)
    ckpt.save(out / "teacher.ckpt")
    hist.write(out / "teacher_metrics.jsonl")
    print("teacher trained", file=stdout)


def cmd_finetune_rec(args, cfg, stdout) -> None:
    _require(args, "catalog", "conversations", "checkpoint")
    out = _out(args)
    tc = train_config(cfg)
    catalog = load_catalog(args.catalog)
    real = load_conversations(args.conversations, catalog)
    base = _load_ckpt(args.checkpoint, "init", "pretrained")
    index = DenseIndex.load(args.index, base.checksum) if args.index else None
    teacher = _load_ckpt(args.teacher, "teacher") if args.teacher else None
    sim = _sim(args, catalog) if args.sim_corpus else None
    ckpt, hist = finetune_recommendation(real, index, teacher, base, tc, sim)
    ckpt.save(out / "finetuned_rec.ckpt")
    hist.write(out / "finetune_rec_metrics.jsonl")
    print(f"fine-tuned recommender: final loss {hist.curve('total')[-1]:.4f}" if hist.records
          else "fine-tuned recommender: 0 epochs", file=stdout)


def cmd_finetune_gen(args, cfg, stdout) -> None:
    _require(args, "catalog", "conversations", "checkpoint")
    out = _out(args)
    catalog = load_catalog(args.catalog)
    real = load_conversations(args.conversations, catalog)
    base = _load_ckpt(args.checkpoint, "init", "pretrained")
    index = DenseIndex.load(args.response_index, base.checksum) if args.response_index else None
    ckpt, hist = finetune_generation(real, index, base, train_config(cfg))
    ckpt.save(out / "finetuned_gen.ckpt")
    hist.write(out / "finetune_gen_metrics.jsonl")
    print("fine-tuned generator", file=stdout)


def _index_for(path: Path | None, ckpt: Checkpoint) -> DenseIndex | None:
    """Indexes are built from the pretrained parent of a fine-tuned checkpoint."""
    if path is None:
        return None
    return DenseIndex.load(path, ckpt.parent or ckpt.checksum)


def cmd_evaluate(args, cfg, stdout) -> None:
    _require(args, "catalog", "conversations", "test", "checkpoint")
    out = _out(args)
    tc = train_config(cfg)
    catalog = load_catalog(args.catalog)
    train = load_conversations(args.conversations, catalog)
    test = load_conversations(args.test, catalog)
    ckpt = _load_ckpt(args.checkpoint, "finetuned_rec", "teacher")
    gen = _load_ckpt(args.gen_checkpoint, "finetuned_gen") if args.gen_checkpoint else None
    report = evaluate_model(
        ckpt,
        _index_for(args.index, ckpt),
        test,
        frequency_table(train, catalog, tc.tail_threshold),
        gen_checkpoint=gen,
        response_index=_index_for(args.response_index, gen) if gen else None,
        config=tc,
    )
    (out / "report.json").write_text(report.to_json() + "\n", encoding="utf-8")
    print(report.render_table(), file=stdout)


def cmd_stats(args, cfg, stdout) -> None:
    _require(args, "catalog", "conversations")
    catalog = load_catalog(args.catalog)
    convs = load_conversations(args.conversations, catalog, require_target=False)
    print(corpus_stats(convs, catalog), file=stdout)
    freq = frequency_table(convs, catalog, cfg["tail_threshold"])
    print(f"tail items (< {freq.tail_threshold}): {len(freq.tail_set)}", file=stdout)


def chat_repl(
    rec: Checkpoint,
    sim_index: DenseIndex | None,
    gen: Checkpoint | None,
    response_index: DenseIndex | None,
    config: TrainConfig,
    stdin: TextIO,
    stdout: TextIO,
) -> None:
    """Line-by-line session: each seeker line yields the top-3 items and a filled response."""
    turns: list[Utterance] = []
    names = rec.vocab.item_names
    for line in stdin:
        text = line.strip()
        if not text:
            continue
        if text == "/quit":
            break
        if text == "/reset":
            turns = []
            print("[context cleared]", file=stdout)
            continue
        turns.append(Utterance(SEEKER, text, tuple(rec.vocab.find_items(text))))
        conv = Conversation("chat", tuple(turns))
        top = recommend(conv, rec, sim_index, 3, config)
        print("top-3: " + "; ".join(names.get(i, i) for i in top), file=stdout)
        reply = generate_response(conv, gen, response_index, top, config) if gen else f"i recommend {names[top[0]]} ."
        print(f"bot: {reply}", file=stdout)
        if reply:
            turns.append(Utterance(RECOMMENDER, reply, tuple(i for i in top if names.get(i, "") in reply)))


def cmd_chat(args, cfg, stdout, stdin=None) -> None:
    _require(args, "checkpoint")
    rec = _load_ckpt(args.checkpoint, "finetuned_rec", "teacher")
    gen = _load_ckpt(args.gen_checkpoint, "finetuned_gen") if args.gen_checkpoint else None
    chat_repl(
        rec,
        _index_for(args.index, rec),
        gen,
        _index_for(args.response_index, gen) if gen else None,
        train_config(cfg),
        stdin or sys.stdin,
        stdout,
    )


COMMANDS = {
    "synth-world": cmd_synth_world,
    "simulate": cmd_simulate,
    "pretrain": cmd_pretrain,
    "train-teacher": cmd_train_teacher,
    "finetune-rec": cmd_finetune_rec,
    "finetune-gen": cmd_finetune_gen,
    "evaluate": cmd_evaluate,
    "stats": cmd_stats,
    "chat": cmd_chat,
}

_VALIDATION_ERRORS = (
    CorpusError,
    SimulationError,
    PipelineError,
    ObjectiveError,
    RetrievalError,
    CheckpointError,
    MetricError,
    OSError,
    ValueError,
    FloatingPointError,
)


def _setup_logging() -> None:
    level = os.environ.get("LOTCRS_LOG", "warn").lower()
    levels = {"error": logging.ERROR, "warn": logging.WARNING, "warning": logging.WARNING,
              "info": logging.INFO, "debug": logging.DEBUG}
    logging.basicConfig(level=levels.get(level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr)


def dispatch(argv: Sequence[str] | None = None, stdin: TextIO | None = None, stdout: TextIO | None = None) -> int:
    """Run one command; returns 0 on success, 2 on usage errors, 1 on validation errors."""
    stdout = stdout or sys.stdout
    try:
        args = build_parser().parse_args(argv)
        cfg = resolve_config(args)
        if args.out is not None:
            args.out.mkdir(parents=True, exist_ok=True)
            _write_snapshot(args, cfg)
        if args.command == "chat":
            cmd_chat(args, cfg, stdout, stdin)
        else:
            COMMANDS[args.command](args, cfg, stdout)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except _VALIDATION_ERRORS as exc:
        print(f"error: {str(exc).splitlines()[0] if str(exc) else type(exc).__name__}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    _setup_logging()
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
