"""Exact dense retrieval over simulated conversations and cross-attention fusion.

``fuse_user`` enriches a user vector u with retrieved vectors u'_j::

    alpha = softmax_j(u^T W1 u'_j),   u~ = u + gamma * sum_j alpha_j u'_j

``fuse_prompt`` applies the same attention (without gamma) to each context
token state with W2, producing the decoder's soft prompts.
"""
from __future__ import annotations

import json
import struct
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .corpus import Conversation
from .neuralcore import _kernels as K
from .neuralcore.model import ModelParams, context_ids, encode_cls
from .neuralcore.vocab import CLS, SEP, Vocabulary, template_tokens

PAYLOAD_KINDS = ("user_repr", "response_repr")
MAGIC = b"LOTCRSIX"
FORMAT_VERSION = 1


class RetrievalError(ValueError):
    pass


def _unit_rows(x: np.ndarray, ids: Sequence[str]) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1)
    bad = np.flatnonzero(norms == 0)
    if bad.size:
        raise RetrievalError(f"zero-norm vector for conversation {ids[bad[0]]!r}")
    return x / norms[:, None]


@dataclass(frozen=True, eq=False)
class DenseIndex:
    ids: tuple[str, ...]
    keys: np.ndarray
    payloads: np.ndarray
    payload_kind: str
    model_checksum: str = ""
    payload_tokens: tuple[tuple[str, ...], ...] = ()
    unit_keys: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.payload_kind not in PAYLOAD_KINDS:
            raise RetrievalError(f"unknown payload kind {self.payload_kind!r}")
        keys = np.array(self.keys, dtype=np.float64)
        payloads = np.array(self.payloads, dtype=np.float64)
        if keys.ndim != 2 or keys.shape[0] < 1:
            raise RetrievalError("index needs at least one vector")
        if payloads.shape != keys.shape or len(self.ids) != keys.shape[0]:
            raise RetrievalError("ids, keys and payloads disagree in size")
        if len(set(self.ids)) != len(self.ids):
            raise RetrievalError("duplicate ids in index")
        unit = _unit_rows(keys, self.ids)
        for arr in (keys, payloads, unit):
            arr.setflags(write=False)
        object.__setattr__(self, "keys", keys)
        object.__setattr__(self, "payloads", payloads)
        object.__setattr__(self, "unit_keys", unit)
        object.__setattr__(self, "ids", tuple(self.ids))

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def dim(self) -> int:
        return self.keys.shape[1]

    def save(self, path: str | Path) -> None:
        header = {
            "version": FORMAT_VERSION,
            "n": len(self),
            "d": self.dim,
            "payload_kind": self.payload_kind,
            "model_checksum": self.model_checksum,
            "ids": list(self.ids),
            "payload_tokens": [list(t) for t in self.payload_tokens],
        }
        blob = json.dumps(header, sort_keys=True, ensure_ascii=False).encode("utf-8")
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<IQ", FORMAT_VERSION, len(blob)))
            fh.write(blob)
            fh.write(np.ascontiguousarray(self.keys, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(self.payloads, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path: str | Path, expected_checksum: str | None = None) -> DenseIndex:
        with open(path, "rb") as fh:
            data = fh.read()
        if data[: len(MAGIC)] != MAGIC:
            raise RetrievalError(f"{path}: not an index file")
        off = len(MAGIC)
        version, hlen = struct.unpack_from("<IQ", data, off)
        if version != FORMAT_VERSION:
            raise RetrievalError(f"{path}: unsupported index version {version}")
        off += struct.calcsize("<IQ")
        header = json.loads(data[off : off + hlen].decode("utf-8"))
        off += hlen
        n, d = header["n"], header["d"]
        if len(data) - off != 2 * n * d * 8:
            raise RetrievalError(f"{path}: body size does not match header ({n}x{d})")
        keys = np.frombuffer(data, dtype="<f8", count=n * d, offset=off).reshape(n, d)
        payloads = np.frombuffer(data, dtype="<f8", count=n * d, offset=off + n * d * 8).reshape(n, d)
        if expected_checksum is not None and header["model_checksum"] != expected_checksum:
            raise RetrievalError(
                f"{path}: index was built by model {header['model_checksum'][:12]}, "
                f"checkpoint is {expected_checksum[:12]}"
            )
        return cls(
            ids=tuple(header["ids"]),
            keys=keys,
            payloads=payloads,
            payload_kind=header["payload_kind"],
            model_checksum=header["model_checksum"],
            payload_tokens=tuple(tuple(t) for t in header["payload_tokens"]),
        )


@dataclass(frozen=True)
class RetrievalResult:
    entries: tuple[tuple[str, np.ndarray, float], ...]

    @property
    def ids(self) -> list[str]:
        return [e[0] for e in self.entries]

    @property
    def scores(self) -> np.ndarray:
        return np.array([e[2] for e in self.entries])

    @property
    def vectors(self) -> np.ndarray:
        return np.stack([e[1] for e in self.entries])


def response_ids(conv: Conversation, vocab: Vocabulary, max_len: int) -> list[int]:
    """``[CLS]`` + response template tokens + ``[SEP]``, truncated to ``max_len``."""
    toks = template_tokens(conv.response.text, vocab.item_names.values()) if conv.response else []
    ids = [vocab.cls_id, *vocab.encode(toks)][: max_len - 1]
    return [*ids, vocab.sep_id]


def build_index(
    sim_corpus: Sequence[Conversation],
    params: ModelParams,
    vocab: Vocabulary,
    payload_kind: str = "user_repr",
    max_len: int = 64,
    batch_size: int = 64,
) -> DenseIndex:
    """One [CLS] context vector per simulated conversation.

    For ``response_repr`` the payload is the [CLS] encoding of the
    conversation's final recommender turn (item names as ``[ITEM]``).
    """
    if not sim_corpus:
        raise RetrievalError("cannot build an index over an empty corpus")
    if payload_kind not in PAYLOAD_KINDS:
        raise RetrievalError(f"unknown payload kind {payload_kind!r}")
    names = list(vocab.item_names.values())
    ctx = [context_ids(c, vocab, max_len) for c in sim_corpus]
    keys = np.concatenate([encode_cls(params, ctx[s : s + batch_size]) for s in range(0, len(ctx), batch_size)])
    tokens: tuple = ()
    if payload_kind == "response_repr":
        resp = [response_ids(c, vocab, max_len) for c in sim_corpus]
        payloads = np.concatenate(
            [encode_cls(params, resp[s : s + batch_size]) for s in range(0, len(resp), batch_size)]
        )
        tokens = tuple(
            tuple(template_tokens(c.response.text, names)) if c.response else () for c in sim_corpus
        )
    else:
        payloads = keys
    return DenseIndex(
        ids=tuple(c.id for c in sim_corpus),
        keys=keys,
        payloads=payloads,
        payload_kind=payload_kind,
        model_checksum=params.checksum(),
        payload_tokens=tokens,
    )


def _unit_query(query: np.ndarray, d: int) -> np.ndarray:
    q = np.asarray(query, dtype=np.float64).reshape(-1)
    if q.shape[0] != d:
        raise RetrievalError(f"query has dimension {q.shape[0]}, index has {d}")
    if not np.isfinite(q).all():
        raise RetrievalError("query is not finite")
    norm = np.linalg.norm(q)
    if norm == 0:
        raise RetrievalError("zero-norm query")
    return q / norm


def topk_rows(index: DenseIndex, query: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Row indices and cosine scores of the ``k`` nearest keys."""
    if k <= 0:
        raise RetrievalError("k must be positive")
    scores = K.cosine_scores(index.unit_keys, _unit_query(query, index.dim))
    order = K.topk_order(scores, k)
    return order, scores[order]


def topk(index: DenseIndex, query: np.ndarray, k: int) -> RetrievalResult:
    order, scores = topk_rows(index, query, k)
    return RetrievalResult(
        tuple((index.ids[r], index.payloads[r], float(s)) for r, s in zip(order, scores))
    )


def retrieve_payloads(index: DenseIndex, queries: np.ndarray, k: int) -> np.ndarray:
    """Payload vectors of the top-``k`` hits for each query row: (B, min(k, N), d)."""
    return np.stack([index.payloads[topk_rows(index, q, k)[0]] for q in queries])


# -- fusion ------------------------------------------------------------------------


def _softmax_last(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _check_fusion(vec_dim: int, retrieved: np.ndarray, W: np.ndarray) -> None:
    if retrieved.shape[-2] < 1:
        raise RetrievalError("fusion needs at least one retrieved vector")
    if retrieved.shape[-1] != vec_dim or W.shape != (vec_dim, vec_dim):
        raise RetrievalError(
            f"dimension mismatch: vectors {vec_dim}, retrieved {retrieved.shape[-1]}, matrix {W.shape}"
        )


def fuse_user_forward(U: np.ndarray, R: np.ndarray, W1: np.ndarray, gamma: float):
    """Batched user fusion. U: (B, d), R: (B, k, d). Returns (U~, alpha, cache)."""
    _check_fusion(U.shape[-1], R, W1)
    logits = np.einsum("bd,bkd->bk", U @ W1, R)
    alpha = _softmax_last(logits)
    fused = U + gamma * np.einsum("bk,bkd->bd", alpha, R)
    return fused, alpha, (U, R, alpha)


def fuse_user_backward(dfused: np.ndarray, cache, W1: np.ndarray, gamma: float):
    U, R, alpha = cache
    dalpha = gamma * np.einsum("bd,bkd->bk", dfused, R)
    ds = alpha * (dalpha - (dalpha * alpha).sum(axis=-1, keepdims=True))
    dU = dfused + np.einsum("bk,bkd->bd", ds, R @ W1.T)
    dW1 = np.einsum("bd,bk,bke->de", U, ds, R)
    return dU, dW1


def fuse_user(u: np.ndarray, retrieved: np.ndarray, W1: np.ndarray, gamma: float) -> np.ndarray:
    u = np.asarray(u, dtype=np.float64)
    R = np.atleast_2d(np.asarray(retrieved, dtype=np.float64))
    if u.ndim != 1:
        raise RetrievalError("u must be a vector")
    fused, _, _ = fuse_user_forward(u[None], R[None], np.asarray(W1, dtype=np.float64), gamma)
    return fused[0]


def fuse_prompt_forward(Hs: np.ndarray, R: np.ndarray, W2: np.ndarray, first_only: bool = False):
    """Batched prompt fusion. Hs: (B, L, d), R: (B, k, d)."""
    _check_fusion(Hs.shape[-1], R, W2)
    logits = np.einsum("bld,bkd->blk", Hs @ W2, R)
    beta = _softmax_last(logits)
    add = beta @ R
    if first_only:
        add[:, 1:] = 0.0
    return Hs + add, beta, (Hs, R, beta, first_only)


def fuse_prompt_backward(dfused: np.ndarray, cache, W2: np.ndarray):
    Hs, R, beta, first_only = cache
    dbeta = dfused @ R.transpose(0, 2, 1)
    if first_only:
        dbeta[:, 1:] = 0.0
    ds = beta * (dbeta - (dbeta * beta).sum(axis=-1, keepdims=True))
    dH = dfused + ds @ (R @ W2.T)
    dW2 = np.einsum("bld,blk,bke->de", Hs, ds, R)
    return dH, dW2


def fuse_prompt(token_states: np.ndarray, retrieved: np.ndarray, W2: np.ndarray, first_only: bool = False) -> np.ndarray:
    Hs = np.asarray(token_states, dtype=np.float64)
    R = np.atleast_2d(np.asarray(retrieved, dtype=np.float64))
    if Hs.ndim != 2:
        raise RetrievalError("token_states must be an L x d matrix")
    fused, _, _ = fuse_prompt_forward(Hs[None], R[None], np.asarray(W2, dtype=np.float64), first_only)
    return fused[0]


__all__ = [
    "DenseIndex",
    "RetrievalResult",
    "RetrievalError",
    "build_index",
    "topk",
    "topk_rows",
    "retrieve_payloads",
    "fuse_user",
    "fuse_user_forward",
    "fuse_user_backward",
    "fuse_prompt",
    "fuse_prompt_forward",
    "fuse_prompt_backward",
    "response_ids",
]
