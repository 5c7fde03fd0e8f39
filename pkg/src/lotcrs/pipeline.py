"""Training stages and inference: pre-training, teacher, fine-tuning, ranking, generation."""
from __future__ import annotations

import dataclasses
import json
import logging
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .corpus import Conversation, ItemCatalog
from .neuralcore.checkpoint import Checkpoint
from .neuralcore.model import ModelParams, context_ids, decode_logits, encoder_forward, tokenize_with_flags
from .neuralcore.optim import Adam
from .neuralcore.vocab import ITEM, SEP, Vocabulary, template_tokens
from .objectives import (
    GenBatch,
    ObjectiveError,
    cca_model_loss,
    contrastive_pair_indices,
    dmp_loss,
    gen_model_loss,
    mask_tokens,
    rec_forward,
    rec_model_loss,
)
from .retrieval import DenseIndex, RetrievalError, fuse_prompt, fuse_user, retrieve_payloads, topk_rows

log = logging.getLogger(__name__)


class PipelineError(ValueError):
    pass


@dataclass
class TrainConfig:
    seed: int = 0
    dim: int = 64
    max_len: int = 48
    max_response_len: int = 24
    pretrain_epochs: int = 10
    teacher_epochs: int = 40
    rec_epochs: int = 20
    gen_epochs: int = 30
    batch_size: int = 32
    gen_batch_size: int = 16
    lr_pretrain: float = 5e-3
    lr_teacher: float = 1e-2
    lr_rec: float = 1e-3
    lr_gen: float = 1e-2
    lambda1: float = 1.0
    lambda2: float = 0.1
    gamma: float = 0.5
    retrieval_k: int = 5
    mask_rate: float = 0.15
    tau: float = 0.1
    tail_threshold: int = 4
    ce_mode: str = "literal"
    cca_include_positive: bool = True
    prompt_first_only: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("lr_pretrain", "lr_teacher", "lr_rec", "lr_gen", "tau", "mask_rate"):
            if not getattr(self, name) > 0:
                raise PipelineError(f"{name} must be positive")
        if self.mask_rate > 1:
            raise PipelineError("mask_rate must be at most 1")
        if self.batch_size < 2 or self.gen_batch_size < 2:
            raise PipelineError("batch sizes must be at least 2")
        for name in ("lambda1", "lambda2", "gamma"):
            if getattr(self, name) < 0:
                raise PipelineError(f"{name} must be non-negative")
        for name in ("pretrain_epochs", "teacher_epochs", "rec_epochs", "gen_epochs"):
            if getattr(self, name) < 0:
                raise PipelineError(f"{name} must be non-negative")
        if self.retrieval_k < 1 or self.dim < 1 or self.max_len < 2 or self.max_response_len < 1:
            raise PipelineError("retrieval_k, dim, max_len and max_response_len must be positive")
        if self.ce_mode not in ("literal", "softmax"):
            raise PipelineError(f"unknown ce_mode {self.ce_mode!r}")
        if self.tail_threshold < 1:
            raise PipelineError("tail_threshold must be at least 1")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> TrainConfig:
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise PipelineError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**data)

    def replace(self, **changes) -> TrainConfig:
        return dataclasses.replace(self, **changes)


@dataclass
class History:
    """Per-epoch mean losses, one record per (epoch, loss name)."""

    records: list[dict] = field(default_factory=list)

    def add(self, epoch: int, values: dict[str, list[float]]) -> None:
        for name in sorted(values):
            self.records.append({"epoch": epoch, "loss_name": name, "value": float(np.mean(values[name]))})

    def curve(self, name: str) -> list[float]:
        return [r["value"] for r in self.records if r["loss_name"] == name]

    def write(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for r in self.records:
                fh.write(json.dumps(r, sort_keys=True) + "\n")


# Independent streams so switching one component off leaves the others' draws unchanged.
_STREAMS = ("init", "order", "mask", "pairs", "teacher_init")


def _streams(seed: int) -> dict[str, np.random.Generator]:
    children = np.random.SeedSequence(seed).spawn(len(_STREAMS))
    return {name: np.random.default_rng(c) for name, c in zip(_STREAMS, children)}


def _init_seed(seed: int, stream: str) -> int:
    return int(_streams(seed)[stream].integers(2**31))


def _positions_needed(config: TrainConfig) -> int:
    return config.max_len + config.max_response_len + 2


def init_checkpoint(vocab: Vocabulary, item_ids: Sequence[str], config: TrainConfig, stream: str = "init") -> Checkpoint:
    """Randomly initialised model; the starting point of pre-training and of the no-pre-training ablation."""
    params = ModelParams.init(
        len(vocab), len(item_ids), config.dim, _positions_needed(config), seed=_init_seed(config.seed, stream)
    )
    return Checkpoint(params, vocab, list(item_ids), "init", config.to_dict())


def _batches(n: int, size: int, rng: np.random.Generator) -> list[np.ndarray]:
    perm = rng.permutation(n)
    return [perm[s : s + size] for s in range(0, n, size)]


def _targets(corpus: Sequence[Conversation]) -> list[str]:
    out = []
    for c in corpus:
        if not c.target_items:
            raise PipelineError(f"conversation {c.id} has no target item")
        out.append(c.target_items[0])
    return out


def _check_finite(loss: float, stage: str, epoch: int) -> None:
    if not np.isfinite(loss):
        raise FloatingPointError(f"{stage}: non-finite loss at epoch {epoch}")


def pretrain(
    sim_corpus: Sequence[Conversation],
    config: TrainConfig,
    vocab: Vocabulary,
    item_ids: Sequence[str],
    start: Checkpoint | None = None,
) -> tuple[Checkpoint, History]:
    """Masked item/attribute prediction plus contrastive alignment, equally weighted per batch."""
    if not sim_corpus:
        raise PipelineError("pre-training needs a non-empty simulated corpus")
    targets = _targets(sim_corpus)
    counts: dict[str, int] = {}
    for t in targets:
        counts[t] = counts.get(t, 0) + 1
    n_pairable = sum(1 for c in counts.values() if c >= 2)
    if n_pairable < 2:
        raise PipelineError("pre-training needs at least two items with two or more conversations each")
    cca_b = min(config.batch_size, n_pairable)
    ckpt = start or init_checkpoint(vocab, item_ids, config)
    params = ckpt.params.copy()
    full = [tokenize_with_flags(c, vocab, config.max_len) for c in sim_corpus]
    ctx = [context_ids(c, vocab, config.max_len) for c in sim_corpus]
    rng = _streams(config.seed)
    opt = Adam(params, config.lr_pretrain)
    hist = History()
    for epoch in range(config.pretrain_epochs):
        vals: dict[str, list[float]] = {"dmp": [], "cca": [], "total": []}
        for idx in _batches(len(sim_corpus), config.batch_size, rng["order"]):
            mb = mask_tokens([full[i][0] for i in idx], [full[i][1] for i in idx], config.mask_rate,
                             vocab.mask_id, rng["mask"])
            l_dmp, grads = dmp_loss(mb, params)
            l_dmp /= len(idx)
            for g in grads.values():
                g /= len(idx)
            pairs = contrastive_pair_indices(targets, cca_b, rng["pairs"])
            l_cca, cgrads = cca_model_loss(
                params, [ctx[a] for a, _ in pairs], [ctx[b] for _, b in pairs], config.tau,
                config.cca_include_positive,
            )
            for n, g in cgrads.items():
                grads[n] += g
            total = l_dmp + l_cca
            _check_finite(total, "pretrain", epoch)
            opt.step(grads)
            vals["dmp"].append(l_dmp)
            vals["cca"].append(l_cca)
            vals["total"].append(total)
        hist.add(epoch, vals)
        log.info("pretrain epoch %d loss %.4f", epoch, np.mean(vals["total"]))
    out = Checkpoint(params, vocab, list(item_ids), "pretrained", config.to_dict(), parent=ckpt.checksum)
    return out, hist


def _labels(corpus: Sequence[Conversation], item_ids: Sequence[str]) -> np.ndarray:
    pos = {i: k for k, i in enumerate(item_ids)}
    Y = np.zeros((len(corpus), len(item_ids)))
    for r, c in enumerate(corpus):
        if not c.target_items:
            raise PipelineError(f"conversation {c.id} has no target item")
        for t in c.target_items:
            if t not in pos:
                raise PipelineError(f"conversation {c.id}: unknown target item {t!r}")
            Y[r, pos[t]] = 1.0
    return Y


def train_teacher(
    sim_corpus: Sequence[Conversation], config: TrainConfig, vocab: Vocabulary, item_ids: Sequence[str]
) -> tuple[Checkpoint, History]:
    """Independent recommender trained with softmax cross-entropy on simulated conversations only."""
    if not sim_corpus:
        raise PipelineError("teacher training needs a non-empty simulated corpus")
    ckpt = init_checkpoint(vocab, item_ids, config, stream="teacher_init")
    params = ckpt.params.copy()
    ctx = [context_ids(c, vocab, config.max_len) for c in sim_corpus]
    Y = _labels(sim_corpus, item_ids)
    rng = _streams(config.seed + 1)
    opt = Adam(params, config.lr_teacher)
    hist = History()
    for epoch in range(config.teacher_epochs):
        vals: dict[str, list[float]] = {"ce": []}
        for idx in _batches(len(ctx), config.batch_size, rng["order"]):
            parts, grads = rec_model_loss(params, [ctx[i] for i in idx], Y[idx], ce_mode="softmax")
            _check_finite(parts.total, "teacher", epoch)
            opt.step(grads)
            vals["ce"].append(parts.ce)
        hist.add(epoch, vals)
        log.info("teacher epoch %d loss %.4f", epoch, np.mean(vals["ce"]))
    return Checkpoint(params, vocab, list(item_ids), "teacher", config.to_dict()), hist


def soft_labels(teacher: Checkpoint, corpus: Sequence[Conversation], max_len: int, batch_size: int = 64) -> np.ndarray:
    """Teacher item distributions for each conversation context (rows sum to 1)."""
    ctx = [context_ids(c, teacher.vocab, max_len) for c in corpus]
    rows = [rec_forward(teacher.params, ctx[s : s + batch_size]).probs for s in range(0, len(ctx), batch_size)]
    return np.concatenate(rows) if rows else np.zeros((0, teacher.params.n_items))


def _check_index(index: DenseIndex | None, ckpt: Checkpoint, kind: str) -> None:
    if index is None:
        return
    if index.payload_kind != kind:
        raise RetrievalError(f"expected a {kind} index, got {index.payload_kind}")
    if index.model_checksum != ckpt.checksum:
        raise RetrievalError("index was built from a different model than the checkpoint")
    if index.dim != ckpt.params.d:
        raise RetrievalError(f"index dimension {index.dim} does not match model dimension {ckpt.params.d}")


def _retriever(index: DenseIndex | None, k: int) -> Callable[[np.ndarray], np.ndarray] | None:
    if index is None:
        return None
    return lambda Q: retrieve_payloads(index, Q, k)


def finetune_recommendation(
    real_corpus: Sequence[Conversation],
    sim_index: DenseIndex | None,
    teacher: Checkpoint | None,
    checkpoint: Checkpoint,
    config: TrainConfig,
    sim_corpus: Sequence[Conversation] | None = None,
) -> tuple[Checkpoint, History]:
    """Joint objective ``CE + lambda1 * KL(teacher) + lambda2 * CCA`` with retrieval-fused user vectors.

    A component is dropped entirely when its weight is zero or its input
    (index, teacher, simulated corpus) is missing.
    """
    if checkpoint.stage not in ("init", "pretrained"):
        raise PipelineError(f"fine-tuning starts from an init or pretrained checkpoint, got {checkpoint.stage}")
    if not real_corpus:
        raise PipelineError("fine-tuning needs a non-empty corpus")
    _check_index(sim_index, checkpoint, "user_repr")
    use_retrieval = sim_index is not None and config.gamma > 0
    use_soft = teacher is not None and config.lambda1 > 0
    use_cca = sim_corpus is not None and config.lambda2 > 0
    if teacher is not None and teacher.item_ids != checkpoint.item_ids:
        raise PipelineError("teacher and checkpoint disagree on the item set")
    vocab = checkpoint.vocab
    params = checkpoint.params.copy()
    ctx = [context_ids(c, vocab, config.max_len) for c in real_corpus]
    Y = _labels(real_corpus, checkpoint.item_ids)
    soft = soft_labels(teacher, real_corpus, config.max_len) if use_soft else None
    if use_cca:
        sim_targets = _targets(sim_corpus)
        sim_ctx = [context_ids(c, vocab, config.max_len) for c in sim_corpus]
        n_pairable = len({t for t in sim_targets if sim_targets.count(t) >= 2})
        cca_b = min(config.batch_size, n_pairable)
        if cca_b < 2:
            raise ObjectiveError("simulated corpus has too few repeated targets for contrastive pairs")
    retriever = _retriever(sim_index, config.retrieval_k) if use_retrieval else None
    rng = _streams(config.seed)
    opt = Adam(params, config.lr_rec)
    hist = History()
    for epoch in range(config.rec_epochs):
        vals: dict[str, list[float]] = {"total": [], "ce": []}
        if use_soft:
            vals["kl"] = []
        if use_cca:
            vals["cca"] = []
        for idx in _batches(len(ctx), config.batch_size, rng["order"]):
            pairs = None
            if use_cca:
                pi = contrastive_pair_indices(sim_targets, cca_b, rng["pairs"])
                pairs = ([sim_ctx[a] for a, _ in pi], [sim_ctx[b] for _, b in pi])
            parts, grads = rec_model_loss(
                params,
                [ctx[i] for i in idx],
                Y[idx],
                gamma=config.gamma if use_retrieval else 0.0,
                soft_labels=soft[idx] if use_soft else None,
                lambda1=config.lambda1,
                cca_pairs=pairs,
                lambda2=config.lambda2,
                tau=config.tau,
                ce_mode=config.ce_mode,
                include_positive=config.cca_include_positive,
                retriever=retriever,
            )
            _check_finite(parts.total, "finetune-rec", epoch)
            opt.step(grads)
            vals["total"].append(parts.total)
            vals["ce"].append(parts.ce)
            if use_soft:
                vals["kl"].append(parts.soft)
            if use_cca:
                vals["cca"].append(parts.cca)
        hist.add(epoch, vals)
        log.info("finetune-rec epoch %d loss %.4f", epoch, np.mean(vals["total"]))
    out = Checkpoint(params, vocab, list(checkpoint.item_ids), "finetuned_rec", config.to_dict(),
                     parent=checkpoint.checksum)
    return out, hist


# -- inference ---------------------------------------------------------------------


def rank_items(logits: np.ndarray, item_ids: Sequence[str], k_items: int) -> list[str]:
    """Top ``k_items`` ids by score descending, ties broken by item id."""
    if k_items < 1:
        raise ValueError("k_items must be a positive integer")
    logits = np.asarray(logits, dtype=np.float64)
    id_rank = np.argsort(np.argsort(np.array(item_ids, dtype=object), kind="stable"), kind="stable")
    order = np.lexsort((id_rank, -logits))
    return [item_ids[i] for i in order[: min(k_items, len(item_ids))]]


def item_logits(conv: Conversation, checkpoint: Checkpoint, sim_index: DenseIndex | None, config: TrainConfig) -> np.ndarray:
    """Scores ``u~ . e_i`` for every item; softmax of these is the preference distribution."""
    ids = context_ids(conv, checkpoint.vocab, config.max_len)
    H, _ = encoder_forward(checkpoint.params, [ids])
    u = H[0, 0]
    if sim_index is not None and config.gamma > 0:
        order, _ = topk_rows(sim_index, u, config.retrieval_k)
        u = fuse_user(u, sim_index.payloads[order], checkpoint.params["w1"], config.gamma)
    return checkpoint.params["item_emb"] @ u


def recommend(
    conv: Conversation,
    checkpoint: Checkpoint,
    sim_index: DenseIndex | None,
    k_items: int,
    config: TrainConfig | None = None,
) -> list[str]:
    """Ranked item ids for the conversation so far."""
    if k_items < 1:
        raise ValueError("k_items must be a positive integer")
    config = config or (TrainConfig.from_dict(checkpoint.config) if checkpoint.config else TrainConfig())
    return rank_items(item_logits(conv, checkpoint, sim_index, config), checkpoint.item_ids, k_items)


def response_template_ids(conv: Conversation, vocab: Vocabulary, max_len: int) -> list[int]:
    """Gold response as template token ids followed by the end token."""
    if conv.response is None:
        raise PipelineError(f"conversation {conv.id} has no final recommender turn")
    toks = template_tokens(conv.response.text, vocab.item_names.values())
    return [*vocab.encode(toks)[:max_len], vocab.sep_id]


def finetune_generation(
    real_corpus: Sequence[Conversation],
    response_index: DenseIndex | None,
    checkpoint: Checkpoint,
    config: TrainConfig,
) -> tuple[Checkpoint, History]:
    """Train the decoder to emit the ``[ITEM]`` response template from retrieval-fused prompts."""
    if checkpoint.stage not in ("init", "pretrained"):
        raise PipelineError(f"fine-tuning starts from an init or pretrained checkpoint, got {checkpoint.stage}")
    _check_index(response_index, checkpoint, "response_repr")
    data = [c for c in real_corpus if c.response is not None]
    if not data:
        raise PipelineError("no conversation ends with a recommender turn")
    vocab = checkpoint.vocab
    params = checkpoint.params.copy()
    ctx = [context_ids(c, vocab, config.max_len) for c in data]
    resp = [response_template_ids(c, vocab, config.max_response_len) for c in data]
    retriever = _retriever(response_index, config.retrieval_k)
    rng = _streams(config.seed + 2)
    opt = Adam(params, config.lr_gen)
    hist = History()
    for epoch in range(config.gen_epochs):
        vals: dict[str, list[float]] = {"nll": []}
        for idx in _batches(len(ctx), config.gen_batch_size, rng["order"]):
            batch = GenBatch([ctx[i] for i in idx], [resp[i] for i in idx], None, vocab.cls_id)
            loss, grads = gen_model_loss(params, batch, config.prompt_first_only, retriever)
            _check_finite(loss, "finetune-gen", epoch)
            opt.step(grads)
            vals["nll"].append(loss)
        hist.add(epoch, vals)
        log.info("finetune-gen epoch %d loss %.4f", epoch, np.mean(vals["nll"]))
    out = Checkpoint(params, vocab, list(checkpoint.item_ids), "finetuned_gen", config.to_dict(),
                     parent=checkpoint.checksum)
    return out, hist


def decode_template(
    conv: Conversation, checkpoint: Checkpoint, response_index: DenseIndex | None, config: TrainConfig
) -> list[str]:
    """Greedy decode of the response template tokens (end token excluded)."""
    vocab, params = checkpoint.vocab, checkpoint.params
    ids = context_ids(conv, vocab, config.max_len)
    H, _ = encoder_forward(params, [ids])
    states = H[0]
    if response_index is not None:
        order, _ = topk_rows(response_index, states[0], config.retrieval_k)
        states = fuse_prompt(states, response_index.payloads[order], params["w2"], config.prompt_first_only)
    out = [vocab.cls_id]
    for _ in range(config.max_response_len):
        nxt = int(np.argmax(decode_logits(states, out, params)[-1]))
        if nxt == vocab.sep_id:
            break
        out.append(nxt)
    return vocab.decode(out[1:])


def fill_template(template: str | Sequence[str], names: Sequence[str]) -> str:
    """Replace each ``[ITEM]`` left to right with ranks 1, 2, ...; extra slots reuse rank 1."""
    toks = template.split() if isinstance(template, str) else list(template)
    n_slots = sum(t == ITEM for t in toks)
    if n_slots and not names:
        raise ValueError("template has [ITEM] slots but no recommendations were given")
    out, k = [], 0
    for t in toks:
        if t == ITEM:
            out.append(names[k] if k < len(names) else names[0])
            k += 1
        else:
            out.append(t)
    return " ".join(out)


def generate_response(
    conv: Conversation,
    checkpoint: Checkpoint,
    response_index: DenseIndex | None,
    recommendations: Sequence[str],
    config: TrainConfig | None = None,
) -> str:
    """Decode a template and fill it with the recommended items' names."""
    config = config or (TrainConfig.from_dict(checkpoint.config) if checkpoint.config else TrainConfig())
    toks = [t for t in decode_template(conv, checkpoint, response_index, config) if t != SEP]
    if not toks:
        log.warning("degenerate decode for conversation %s", conv.id)
        return ""
    names = [checkpoint.vocab.item_names.get(r, r) for r in recommendations]
    return fill_template(toks, names)


def make_vocabulary(corpora: Sequence[Sequence[Conversation]], catalog: ItemCatalog) -> Vocabulary:
    return Vocabulary.build(corpora, catalog)


__all__ = [
    "TrainConfig",
    "History",
    "PipelineError",
    "init_checkpoint",
    "pretrain",
    "train_teacher",
    "soft_labels",
    "finetune_recommendation",
    "recommend",
    "rank_items",
    "item_logits",
    "finetune_generation",
    "decode_template",
    "fill_template",
    "generate_response",
    "response_template_ids",
    "make_vocabulary",
]
