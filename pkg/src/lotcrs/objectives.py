"""Training objectives with analytic gradients.

Primitive losses work on plain arrays (probabilities, vectors). The
``*_model_loss`` functions chain them through the encoder/decoder and return
gradients for every parameter; those are what training and grad checks use.
"""
from __future__ import annotations

import logging
from collections import defaultdict
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np

from .corpus import Conversation
from .neuralcore import _kernels as K
from .neuralcore.model import (
    ModelParams,
    decoder_backward,
    decoder_forward,
    encoder_backward,
    encoder_forward,
)
from .retrieval import (
    fuse_prompt_backward,
    fuse_prompt_forward,
    fuse_user_backward,
    fuse_user_forward,
)

log = logging.getLogger(__name__)

PROB_CLAMP = 1e-12


class ObjectiveError(ValueError):
    pass


# -- batches -----------------------------------------------------------------


@dataclass
class MaskedBatch:
    corrupted_ids: list[list[int]]
    masked_positions: list[list[int]]
    gold_tokens: list[list[int]]
    n_forced: int = 0

    @property
    def n_masked(self) -> int:
        return sum(len(p) for p in self.masked_positions)


@dataclass
class ContrastiveBatch:
    h1: np.ndarray
    h2: np.ndarray
    tau: float = 0.1
    include_positive: bool = True

    def __post_init__(self):
        self.h1 = np.asarray(self.h1, dtype=np.float64)
        self.h2 = np.asarray(self.h2, dtype=np.float64)
        if self.h1.shape != self.h2.shape or self.h1.ndim != 2:
            raise ObjectiveError("anchors and positives must be matching B x d matrices")
        if self.h1.shape[0] < 2:
            raise ObjectiveError("contrastive batch needs B >= 2")
        if self.tau <= 0:
            raise ObjectiveError("temperature must be positive")


@dataclass
class RecBatch:
    probs: np.ndarray
    labels: np.ndarray
    soft_labels: np.ndarray | None = None
    lambda1: float = 1.0
    lambda2: float = 0.1

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.float64)
        if self.soft_labels is not None:
            self.soft_labels = np.asarray(self.soft_labels, dtype=np.float64)


@dataclass
class GenBatch:
    contexts: list[list[int]]
    responses: list[list[int]]
    retrieved: np.ndarray | None = None
    bos_id: int = 0

    def __post_init__(self):
        if any(len(r) < 1 for r in self.responses):
            raise ObjectiveError("empty response in generation batch")
        if len(self.contexts) != len(self.responses):
            raise ObjectiveError("contexts and responses differ in count")

    @property
    def lengths(self) -> list[int]:
        return [len(r) for r in self.responses]


# -- masking -----------------------------------------------------------------


def mask_tokens(
    ids: Sequence[Sequence[int]],
    eligible: Sequence[Sequence[bool]],
    mask_rate: float,
    mask_id: int,
    rng: np.random.Generator | int,
) -> MaskedBatch:
    """Mask each eligible position with probability ``mask_rate``; at least one per sequence."""
    if not 0 < mask_rate <= 1:
        raise ObjectiveError("mask_rate must lie in (0, 1]")
    rng = np.random.default_rng(rng)
    corrupted, positions, gold = [], [], []
    forced = 0
    for seq, flags in zip(ids, eligible):
        cand = np.flatnonzero(np.asarray(flags, dtype=bool))
        if cand.size == 0:
            raise ObjectiveError("sequence has no maskable item or attribute token")
        chosen = cand[rng.random(cand.size) < mask_rate]
        if chosen.size == 0:
            chosen = cand[[int(rng.integers(cand.size))]]
            forced += 1
        seq = list(seq)
        gold.append([seq[p] for p in chosen])
        for p in chosen:
            seq[p] = mask_id
        corrupted.append(seq)
        positions.append([int(p) for p in chosen])
    return MaskedBatch(corrupted, positions, gold, forced)


# -- primitive losses ----------------------------------------------------------


def _log_softmax(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=-1, keepdims=True)
    return z - m - np.log(np.exp(z - m).sum(axis=-1, keepdims=True))


def softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def token_nll(logits: np.ndarray, gold: Sequence[int]) -> tuple[float, np.ndarray]:
    """Summed -log softmax(logits)[gold] over rows, and d/dlogits."""
    if not np.isfinite(logits).all():
        raise ObjectiveError("non-finite logits")
    logp = _log_softmax(logits)
    rows = np.arange(len(gold))
    loss = -float(logp[rows, gold].sum())
    grad = np.exp(logp)
    grad[rows, gold] -= 1.0
    return loss, grad


def cca_loss(batch: ContrastiveBatch) -> tuple[float, np.ndarray, np.ndarray]:
    """In-batch InfoNCE on cosine similarity; returns (loss, dL/dh1, dL/dh2)."""
    h1, h2, tau = batch.h1, batch.h2, batch.tau
    n1 = np.linalg.norm(h1, axis=1, keepdims=True)
    n2 = np.linalg.norm(h2, axis=1, keepdims=True)
    if (n1 == 0).any() or (n2 == 0).any():
        raise ObjectiveError("zero-norm representation: cosine similarity undefined")
    u1, u2 = h1 / n1, h2 / n2
    S = (u1 @ u2.T) / tau
    B = S.shape[0]
    eye = np.eye(B, dtype=bool)
    allowed = np.ones_like(eye) if batch.include_positive else ~eye
    P = K.masked_softmax(S, allowed)
    m = np.where(allowed, S, -np.inf).max(axis=1, keepdims=True)
    lse = (m + np.log(np.where(allowed, np.exp(S - m), 0.0).sum(axis=1, keepdims=True)))[:, 0]
    loss = float(np.mean(lse - np.diag(S)))
    dS = (P - eye) / B
    du1 = dS @ u2 / tau
    du2 = dS.T @ u1 / tau
    dh1 = (du1 - u1 * (u1 * du1).sum(axis=1, keepdims=True)) / n1
    dh2 = (du2 - u2 * (u2 * du2).sum(axis=1, keepdims=True)) / n2
    return loss, dh1, dh2


def _check_probs(probs: np.ndarray) -> None:
    if not np.isfinite(probs).all() or (probs < 0).any() or (probs > 1).any():
        raise ObjectiveError("probabilities must lie in [0, 1]")


def rec_ce_loss(batch: RecBatch, mode: str = "literal") -> tuple[float, np.ndarray]:
    """Recommendation cross-entropy and d/dprobs.

    ``literal`` sums binary cross-entropy over every (instance, item) cell;
    ``softmax`` keeps only the -y log p terms.
    """
    probs, y = batch.probs, batch.labels
    _check_probs(probs)
    if probs.shape != y.shape:
        raise ObjectiveError("probs and labels differ in shape")
    p = np.clip(probs, PROB_CLAMP, 1.0 - PROB_CLAMP)
    inside = (probs >= PROB_CLAMP) & (probs <= 1.0 - PROB_CLAMP)
    if mode == "literal":
        loss = -float((y * np.log(p) + (1.0 - y) * np.log1p(-p)).sum())
        grad = -y / p + (1.0 - y) / (1.0 - p)
    elif mode == "softmax":
        loss = -float((y * np.log(p)).sum())
        grad = -y / p
    else:
        raise ObjectiveError(f"unknown CE mode {mode!r}")
    return loss, np.where(inside, grad, 0.0)


@dataclass
class Diagnostics:
    counts: dict[str, int] = field(default_factory=lambda: defaultdict(int))

    def note(self, event: str, n: int = 1) -> None:
        if n:
            self.counts[event] += n
            log.debug("diagnostic %s x%d", event, n)


DIAGNOSTICS = Diagnostics()


def soft_label_kl(batch: RecBatch) -> tuple[float, np.ndarray]:
    """Sum over instances of KL(teacher || student), and d/dprobs."""
    probs, t = batch.probs, batch.soft_labels
    if t is None:
        raise ObjectiveError("batch carries no soft labels")
    _check_probs(probs)
    clamped = (probs < PROB_CLAMP) & (t > 0)
    if clamped.any():
        DIAGNOSTICS.note("kl_clamp", int(clamped.sum()))
    p = np.maximum(probs, PROB_CLAMP)
    pos = t > 0
    loss = float(np.where(pos, t * (np.log(np.where(pos, t, 1.0)) - np.log(p)), 0.0).sum())
    grad = np.where(probs >= PROB_CLAMP, -t / p, 0.0)
    return loss, grad


def joint_rec_loss(ce: float, soft: float, cca: float, lambda1: float, lambda2: float) -> float:
    if lambda1 < 0 or lambda2 < 0:
        raise ObjectiveError("loss weights must be non-negative")
    for v in (ce, soft, cca):
        if not np.isfinite(v):
            raise ObjectiveError("non-finite component loss")
    return ce + lambda1 * soft + lambda2 * cca


def gen_nll_loss(
    batch: GenBatch, prompt_vectors: Sequence[np.ndarray | None], params: ModelParams
) -> tuple[float, dict[str, np.ndarray], list[np.ndarray]]:
    """Teacher-forced response NLL averaged over responses.

    Returns (loss, parameter gradients, per-response prompt gradients).
    """
    inputs = [[batch.bos_id, *r[:-1]] for r in batch.responses]
    logits, cache = decoder_forward(params, prompt_vectors, inputs)
    n = len(batch.responses)
    loss = 0.0
    dlogits = []
    for z, gold in zip(logits, batch.responses):
        l, g = token_nll(z, gold)
        loss += l
        dlogits.append(g / n)
    grads = params.zero_grads()
    dprompts = decoder_backward(params, cache, dlogits, grads)
    return loss / n, grads, dprompts


# -- contrastive pairs -----------------------------------------------------------


def contrastive_pair_indices(
    targets: Sequence[str], batch_size: int, rng: np.random.Generator | int
) -> list[tuple[int, int]]:
    """``batch_size`` index pairs sharing a target, every pair a different target."""
    rng = np.random.default_rng(rng)
    groups: dict[str, list[int]] = defaultdict(list)
    for k, t in enumerate(targets):
        groups[t].append(k)
    eligible = sorted(t for t, g in groups.items() if len(g) >= 2)
    skipped = len(groups) - len(eligible)
    if skipped:
        log.warning("skipping %d items with fewer than 2 conversations for contrastive pairs", skipped)
        DIAGNOSTICS.note("pair_skipped", skipped)
    if len(eligible) < batch_size:
        raise ObjectiveError(
            f"only {len(eligible)} items have two conversations; contrastive batch needs {batch_size}"
        )
    picked = rng.choice(len(eligible), size=batch_size, replace=False)
    pairs = []
    for j in picked:
        g = groups[eligible[j]]
        a, b = rng.choice(len(g), size=2, replace=False)
        pairs.append((g[a], g[b]))
    return pairs


def sample_contrastive_pairs(
    sim_corpus: Sequence[Conversation], batch_size: int, rng_seed: np.random.Generator | int
) -> list[tuple[Conversation, Conversation]]:
    targets = [c.target_items[0] if c.target_items else "" for c in sim_corpus]
    return [(sim_corpus[a], sim_corpus[b]) for a, b in contrastive_pair_indices(targets, batch_size, rng_seed)]


# -- model-level losses ------------------------------------------------------------


def dmp_loss(batch: MaskedBatch, params: ModelParams) -> tuple[float, dict[str, np.ndarray]]:
    """Summed NLL of the gold tokens at masked positions."""
    H, cache = encoder_forward(params, batch.corrupted_ids)
    head = params["mlm_head"]
    grads = params.zero_grads()
    dH = np.zeros_like(H)
    loss = 0.0
    for b, (pos, gold) in enumerate(zip(batch.masked_positions, batch.gold_tokens)):
        if not pos:
            continue
        states = H[b, pos]
        l, g = token_nll(states @ head, gold)
        loss += l
        grads["mlm_head"] += states.T @ g
        dH[b, pos] += g @ head.T
    encoder_backward(params, cache, dH, grads)
    return loss, grads


def cca_model_loss(
    params: ModelParams,
    ids1: Sequence[Sequence[int]],
    ids2: Sequence[Sequence[int]],
    tau: float,
    include_positive: bool = True,
) -> tuple[float, dict[str, np.ndarray]]:
    """Contrastive loss on [CLS] vectors of paired conversations."""
    B = len(ids1)
    H, cache = encoder_forward(params, [*ids1, *ids2])
    cls = H[:, 0, :]
    loss, dh1, dh2 = cca_loss(ContrastiveBatch(cls[:B], cls[B:], tau, include_positive))
    dH = np.zeros_like(H)
    dH[:B, 0] = dh1
    dH[B:, 0] = dh2
    grads = params.zero_grads()
    encoder_backward(params, cache, dH, grads)
    return loss, grads


@dataclass
class RecForward:
    probs: np.ndarray
    user: np.ndarray
    fused: np.ndarray
    alpha: np.ndarray | None
    enc_cache: object
    fuse_cache: object
    H_shape: tuple


def rec_forward(
    params: ModelParams,
    ctx_ids: Sequence[Sequence[int]],
    retrieved: np.ndarray | None = None,
    gamma: float = 0.0,
    retriever=None,
) -> RecForward:
    """Context -> [CLS] user vector -> optional retrieval fusion -> item softmax.

    ``retriever`` maps the (B, d) user vectors to retrieved (B, k, d) vectors;
    it is used when ``retrieved`` is not given and treated as a constant.
    """
    H, enc_cache = encoder_forward(params, ctx_ids)
    U = H[:, 0, :].copy()
    if retrieved is None and retriever is not None:
        retrieved = retriever(U)
    if retrieved is None:
        fused, alpha, fcache = U, None, None
    else:
        fused, alpha, fcache = fuse_user_forward(U, retrieved, params["w1"], gamma)
    probs = softmax(fused @ params["item_emb"].T)
    return RecForward(probs, U, fused, alpha, enc_cache, fcache, H.shape)


def rec_backward(
    params: ModelParams, fwd: RecForward, dprobs: np.ndarray, gamma: float, grads: dict[str, np.ndarray]
) -> None:
    dlogits = K.softmax_backward(fwd.probs, dprobs)
    grads["item_emb"] += dlogits.T @ fwd.fused
    dfused = dlogits @ params["item_emb"]
    if fwd.fuse_cache is None:
        dU = dfused
    else:
        dU, dW1 = fuse_user_backward(dfused, fwd.fuse_cache, params["w1"], gamma)
        grads["w1"] += dW1
    dH = np.zeros(fwd.H_shape)
    dH[:, 0, :] = dU
    encoder_backward(params, fwd.enc_cache, dH, grads)


@dataclass
class RecLossParts:
    total: float
    ce: float
    soft: float = 0.0
    cca: float = 0.0


def rec_model_loss(
    params: ModelParams,
    ctx_ids: Sequence[Sequence[int]],
    labels: np.ndarray,
    *,
    retrieved: np.ndarray | None = None,
    gamma: float = 0.0,
    soft_labels: np.ndarray | None = None,
    lambda1: float = 0.0,
    cca_pairs: tuple[Sequence[Sequence[int]], Sequence[Sequence[int]]] | None = None,
    lambda2: float = 0.0,
    tau: float = 0.1,
    ce_mode: str = "literal",
    include_positive: bool = True,
    retriever=None,
) -> tuple[RecLossParts, dict[str, np.ndarray]]:
    """Joint recommendation loss ``CE + lambda1 * KL + lambda2 * CCA`` with gradients.

    Components whose inputs are ``None`` are not computed at all.
    """
    fwd = rec_forward(params, ctx_ids, retrieved, gamma, retriever)
    batch = RecBatch(fwd.probs, labels, soft_labels, lambda1, lambda2)
    ce, dprobs = rec_ce_loss(batch, ce_mode)
    soft = cca = 0.0
    if soft_labels is not None:
        soft, dsoft = soft_label_kl(batch)
        dprobs = dprobs + lambda1 * dsoft
    grads = params.zero_grads()
    rec_backward(params, fwd, dprobs, gamma, grads)
    if cca_pairs is not None:
        cca, cgrads = cca_model_loss(params, cca_pairs[0], cca_pairs[1], tau, include_positive)
        for n, g in cgrads.items():
            grads[n] += lambda2 * g
    total = joint_rec_loss(ce, soft, cca, lambda1 if soft_labels is not None else 0.0,
                           lambda2 if cca_pairs is not None else 0.0)
    return RecLossParts(total, ce, soft, cca), grads


def gen_model_loss(
    params: ModelParams, batch: GenBatch, first_only: bool = False, retriever=None
) -> tuple[float, dict[str, np.ndarray]]:
    """Encode contexts, fuse retrieved response vectors into prompts, decode."""
    H, enc_cache = encoder_forward(params, batch.contexts)
    lengths = [len(c) for c in batch.contexts]
    retrieved = batch.retrieved
    if retrieved is None and retriever is not None:
        retrieved = retriever(H[:, 0, :].copy())
    if retrieved is not None:
        fused, _, fcache = fuse_prompt_forward(H, retrieved, params["w2"], first_only)
    else:
        fused, fcache = H, None
    prompts = [fused[b, : lengths[b]] for b in range(len(lengths))]
    loss, grads, dprompts = gen_nll_loss(batch, prompts, params)
    dfused = np.zeros_like(H)
    for b, g in enumerate(dprompts):
        dfused[b, : lengths[b]] = g
    if fcache is not None:
        dH, dW2 = fuse_prompt_backward(dfused, fcache, params["w2"])
        grads["w2"] += dW2
    else:
        dH = dfused
    encoder_backward(params, enc_cache, dH, grads)
    return loss, grads


__all__ = [
    "MaskedBatch",
    "ContrastiveBatch",
    "RecBatch",
    "GenBatch",
    "ObjectiveError",
    "mask_tokens",
    "dmp_loss",
    "cca_loss",
    "rec_ce_loss",
    "soft_label_kl",
    "joint_rec_loss",
    "gen_nll_loss",
    "sample_contrastive_pairs",
    "contrastive_pair_indices",
    "cca_model_loss",
    "rec_forward",
    "rec_backward",
    "rec_model_loss",
    "gen_model_loss",
    "softmax",
    "DIAGNOSTICS",
]
