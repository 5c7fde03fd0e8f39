"""Loss closures and random batches for finite-difference gradient checks."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .neuralcore.model import ModelParams
from .objectives import (
    GenBatch,
    MaskedBatch,
    RecBatch,
    cca_model_loss,
    dmp_loss,
    gen_model_loss,
    mask_tokens,
    rec_backward,
    rec_forward,
    rec_model_loss,
    soft_label_kl,
)


@dataclass
class CCAInputs:
    ids1: list[list[int]]
    ids2: list[list[int]]
    tau: float = 0.1


@dataclass
class RecInputs:
    ctx_ids: list[list[int]]
    labels: np.ndarray
    retrieved: np.ndarray | None = None
    gamma: float = 0.5
    soft_labels: np.ndarray | None = None
    lambda1: float = 1.0
    cca: CCAInputs | None = None
    lambda2: float = 0.1


def _quadratic(params: ModelParams):
    loss = math.fsum(float(x) * float(x) for t in params.tensors.values() for x in t.reshape(-1))
    return loss, {n: 2 * t for n, t in params.tensors.items()}


def _soft_only(params: ModelParams, b: RecInputs):
    fwd = rec_forward(params, b.ctx_ids, b.retrieved, b.gamma)
    loss, dprobs = soft_label_kl(RecBatch(fwd.probs, b.labels, b.soft_labels))
    grads = params.zero_grads()
    rec_backward(params, fwd, dprobs, b.gamma, grads)
    return loss, grads


def loss_closure(kind: str, batch):
    if kind == "quadratic":
        return _quadratic
    if kind == "dmp":
        return lambda p: dmp_loss(batch, p)
    if kind == "cca":
        return lambda p: cca_model_loss(p, batch.ids1, batch.ids2, batch.tau)
    if kind == "rec_ce":
        return lambda p: (lambda r: (r[0].total, r[1]))(
            rec_model_loss(p, batch.ctx_ids, batch.labels, retrieved=batch.retrieved, gamma=batch.gamma)
        )
    if kind == "soft_kl":
        return lambda p: _soft_only(p, batch)
    if kind == "joint_rec":
        def joint(p):
            parts, grads = rec_model_loss(
                p,
                batch.ctx_ids,
                batch.labels,
                retrieved=batch.retrieved,
                gamma=batch.gamma,
                soft_labels=batch.soft_labels,
                lambda1=batch.lambda1,
                cca_pairs=None if batch.cca is None else (batch.cca.ids1, batch.cca.ids2),
                lambda2=batch.lambda2,
                tau=batch.cca.tau if batch.cca else 0.1,
            )
            return parts.total, grads
        return joint
    if kind == "gen_nll":
        return lambda p: gen_model_loss(p, batch)
    raise ValueError(f"unknown loss kind {kind!r}")


# Per-tensor scales for the check's operating point. At the training init
# (uniform +-0.1) many attention gradients sit near 1e-8, below what a
# float64 central difference at eps=1e-5 resolves (noise ~ ulp(loss)/eps).
CHECK_SCALES = {
    "tok_emb": 0.5,
    "q": 0.3,
    "k": 0.5,
    "v": 0.5,
    "o": 0.2,
    "mlm_head": 0.2,
    "lm_head": 0.1,
    "item_emb": 0.3,
    "w1": 0.01,
    "w2": 0.03,
}


def check_params(vocab_size: int, n_items: int, d: int = 64, max_len: int = 32, seed: int = 0) -> ModelParams:
    """Random parameters with well-resolved gradients for finite-difference checks."""
    rng = np.random.default_rng(seed)
    shapes = ModelParams.expected_shapes(vocab_size, n_items, d)
    tensors = {}
    for name, shape in shapes.items():
        key = name.split("_")[1] if name.startswith(("enc_", "dec_")) else name
        tensors[name] = rng.uniform(-CHECK_SCALES[key], CHECK_SCALES[key], size=shape)
    return ModelParams(tensors, max_len)


def probe_params(seed: int = 0) -> ModelParams:
    """Tiny parameter set for the quadratic probe.

    Magnitudes lie in [0.5, 1] so every gradient 2x is far above the
    central-difference noise ulp(loss)/eps.
    """
    rng = np.random.default_rng(seed)
    tensors = {
        n: rng.uniform(0.5, 1.0, size=s) * rng.choice([-1.0, 1.0], size=s)
        for n, s in ModelParams.expected_shapes(4, 2, 2).items()
    }
    return ModelParams(tensors, 4)


def _random_seqs(rng, n, V, lo=3, hi=10, first=0):
    return [[first, *rng.integers(5, V, size=int(rng.integers(lo, hi))).tolist()] for _ in range(n)]


def random_batch(kind: str, params: ModelParams, seed: int = 0, batch_size: int = 4, k: int = 3):
    """A small random batch for ``kind`` (at most 8 sequences of length <= 16)."""
    rng = np.random.default_rng(seed)
    V, m, d = params.vocab_size, params.n_items, params.d
    B = batch_size
    if kind == "quadratic":
        return None
    if kind == "dmp":
        seqs = _random_seqs(rng, B, V, hi=14)
        flags = [[False] + [bool(x) for x in rng.random(len(s) - 1) < 0.4] for s in seqs]
        for f in flags:
            f[1] = True
        return mask_tokens(seqs, flags, 0.3, mask_id=2, rng=rng)
    if kind == "cca":
        return CCAInputs(_random_seqs(rng, B, V), _random_seqs(rng, B, V), tau=0.1)
    if kind in ("rec_ce", "soft_kl", "joint_rec"):
        labels = np.zeros((B, m))
        labels[np.arange(B), rng.integers(0, m, size=B)] = 1.0
        soft = rng.dirichlet(np.ones(m), size=B)
        return RecInputs(
            ctx_ids=_random_seqs(rng, B, V),
            labels=labels,
            retrieved=rng.normal(size=(B, k, d)) * 0.5,
            gamma=0.5,
            soft_labels=soft,
            lambda1=0.5,
            cca=CCAInputs(_random_seqs(rng, B, V), _random_seqs(rng, B, V), tau=0.1) if kind == "joint_rec" else None,
            lambda2=0.5,
        )
    if kind == "gen_nll":
        ctx = _random_seqs(rng, B, V, hi=8)
        resp = [rng.integers(5, V, size=int(rng.integers(1, 6))).tolist() for _ in range(B)]
        return GenBatch(ctx, resp, retrieved=rng.normal(size=(B, k, d)) * 0.5, bos_id=0)
    raise ValueError(f"unknown loss kind {kind!r}")
