"""Drive every CLI command on a tiny world, with paths relative to the working directory."""
import io
import json
import os
from pathlib import Path

from lotcrs.cli import dispatch

SMALL = {
    "dim": 12,
    "max_len": 32,
    "max_response_len": 12,
    "pretrain_epochs": 2,
    "teacher_epochs": 2,
    "rec_epochs": 2,
    "gen_epochs": 2,
    "batch_size": 8,
    "gen_batch_size": 8,
}

STEPS = [
    ["synth-world", "--n-items", "12", "--n-conversations", "60", "--out", "w"],
    ["simulate", "--catalog", "w/catalog.jsonl", "--lexicon", "w/lexicon.txt", "--target-freq", "3", "--out", "sim"],
    ["pretrain", "--catalog", "w/catalog.jsonl", "--conversations", "w/train.jsonl",
     "--sim-corpus", "sim/sim_corpus.jsonl", "--config", "small.json", "--out", "pre"],
    ["train-teacher", "--catalog", "w/catalog.jsonl", "--sim-corpus", "sim/sim_corpus.jsonl",
     "--checkpoint", "pre/pretrained.ckpt", "--config", "small.json", "--out", "teach"],
    ["finetune-rec", "--catalog", "w/catalog.jsonl", "--conversations", "w/train.jsonl",
     "--sim-corpus", "sim/sim_corpus.jsonl", "--checkpoint", "pre/pretrained.ckpt",
     "--teacher", "teach/teacher.ckpt", "--index", "pre/sim_index.idx", "--config", "small.json", "--out", "rec"],
    ["finetune-gen", "--catalog", "w/catalog.jsonl", "--conversations", "w/train.jsonl",
     "--checkpoint", "pre/pretrained.ckpt", "--response-index", "pre/response_index.idx",
     "--config", "small.json", "--out", "gen"],
    ["evaluate", "--catalog", "w/catalog.jsonl", "--conversations", "w/train.jsonl", "--test", "w/test.jsonl",
     "--checkpoint", "rec/finetuned_rec.ckpt", "--index", "pre/sim_index.idx",
     "--gen-checkpoint", "gen/finetuned_gen.ckpt", "--response-index", "pre/response_index.idx",
     "--config", "small.json", "--out", "ev"],
]

CHAT = ["chat", "--catalog", "w/catalog.jsonl", "--checkpoint", "rec/finetuned_rec.ckpt",
        "--index", "pre/sim_index.idx", "--gen-checkpoint", "gen/finetuned_gen.ckpt",
        "--response-index", "pre/response_index.idx", "--config", "small.json"]


def run_all(root: Path, seed: int = 0) -> dict[str, int]:
    """Run every step inside ``root``; returns exit codes by command."""
    root.mkdir(parents=True, exist_ok=True)
    (root / "small.json").write_text(json.dumps(SMALL))
    here = os.getcwd()
    os.chdir(root)
    try:
        return {s[0]: dispatch([*s, "--seed", str(seed)], stdout=io.StringIO()) for s in STEPS}
    finally:
        os.chdir(here)


def chat(root: Path, lines: str) -> tuple[int, str]:
    out = io.StringIO()
    here = os.getcwd()
    os.chdir(root)
    try:
        code = dispatch(CHAT, stdin=io.StringIO(lines), stdout=out)
    finally:
        os.chdir(here)
    return code, out.getvalue()


def artifacts(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}
