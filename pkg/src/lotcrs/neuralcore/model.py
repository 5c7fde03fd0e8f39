"""Single-block attention encoder/decoder with hand-written backward passes.

Everything is float64. Batches are lists of variable-length id sequences,
right-padded internally; padded keys are masked out so padding never leaks
into valid positions or into gradients.
"""
from __future__ import annotations

import hashlib
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from ..corpus import Conversation
from . import _kernels as K
from .vocab import Vocabulary

PARAM_NAMES = (
    "tok_emb",
    "enc_q",
    "enc_k",
    "enc_v",
    "enc_o",
    "dec_q",
    "dec_k",
    "dec_v",
    "dec_o",
    "mlm_head",
    "lm_head",
    "item_emb",
    "w1",
    "w2",
)

DEFAULT_DIM = 64
DEFAULT_MAX_LEN = 128
INIT_SCALE = 0.1


def sinusoidal_positions(max_len: int, d: int) -> np.ndarray:
    pos = np.arange(max_len, dtype=np.float64)[:, None]
    rate = np.power(10000.0, -np.arange(0, d, 2, dtype=np.float64) / d)
    pe = np.zeros((max_len, d))
    pe[:, 0::2] = np.sin(pos * rate)
    pe[:, 1::2] = np.cos(pos * rate[: d // 2])
    return pe


class ModelParams:
    """All trainable matrices, keyed by name, plus the fixed position table."""

    def __init__(self, tensors: dict[str, np.ndarray], max_len: int = DEFAULT_MAX_LEN):
        missing = [n for n in PARAM_NAMES if n not in tensors]
        if missing:
            raise ValueError(f"missing parameters: {missing}")
        self.tensors = {n: np.ascontiguousarray(tensors[n], dtype=np.float64) for n in PARAM_NAMES}
        self.max_len = int(max_len)
        V, d = self.tensors["tok_emb"].shape
        m = self.tensors["item_emb"].shape[0]
        for name, shape in self.expected_shapes(V, m, d).items():
            if self.tensors[name].shape != shape:
                raise ValueError(f"parameter {name} has shape {self.tensors[name].shape}, expected {shape}")
        self.pos = sinusoidal_positions(self.max_len, d)

    @staticmethod
    def expected_shapes(V: int, m: int, d: int) -> dict[str, tuple[int, int]]:
        sq = (d, d)
        return {
            "tok_emb": (V, d),
            "enc_q": sq, "enc_k": sq, "enc_v": sq, "enc_o": sq,
            "dec_q": sq, "dec_k": sq, "dec_v": sq, "dec_o": sq,
            "mlm_head": (d, V),
            "lm_head": (d, V),
            "item_emb": (m, d),
            "w1": sq,
            "w2": sq,
        }

    @classmethod
    def init(cls, vocab_size: int, n_items: int, d: int = DEFAULT_DIM, max_len: int = DEFAULT_MAX_LEN, seed: int = 0):
        rng = np.random.default_rng(seed)
        shapes = cls.expected_shapes(vocab_size, n_items, d)
        return cls({n: rng.uniform(-INIT_SCALE, INIT_SCALE, size=shapes[n]) for n in PARAM_NAMES}, max_len)

    @classmethod
    def zeros(cls, vocab_size: int, n_items: int, d: int = DEFAULT_DIM, max_len: int = DEFAULT_MAX_LEN):
        shapes = cls.expected_shapes(vocab_size, n_items, d)
        return cls({n: np.zeros(shapes[n]) for n in PARAM_NAMES}, max_len)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    @property
    def d(self) -> int:
        return self.tensors["tok_emb"].shape[1]

    @property
    def vocab_size(self) -> int:
        return self.tensors["tok_emb"].shape[0]

    @property
    def n_items(self) -> int:
        return self.tensors["item_emb"].shape[0]

    def copy(self) -> ModelParams:
        return ModelParams({n: t.copy() for n, t in self.tensors.items()}, self.max_len)

    def zero_grads(self) -> dict[str, np.ndarray]:
        return {n: np.zeros_like(t) for n, t in self.tensors.items()}

    def checksum(self) -> str:
        h = hashlib.sha256()
        h.update(str(self.max_len).encode())
        for n in PARAM_NAMES:
            t = self.tensors[n]
            h.update(n.encode())
            h.update(str(t.shape).encode())
            h.update(t.tobytes())
        return h.hexdigest()

    def all_finite(self) -> bool:
        return all(np.isfinite(t).all() for t in self.tensors.values())

    def equals(self, other: ModelParams) -> bool:
        return self.max_len == other.max_len and all(
            np.array_equal(self.tensors[n], other.tensors[n]) for n in PARAM_NAMES
        )


@dataclass
class EncodedContext:
    token_states: np.ndarray
    cls_vector: np.ndarray


# -- tokenization --------------------------------------------------------------


def tokenize_with_flags(conv: Conversation, vocab: Vocabulary, max_len: int) -> tuple[list[int], list[bool]]:
    """Token ids and a maskable-position flag per id (item/attribute tokens)."""
    if max_len < 2:
        raise ValueError("max_len must be at least 2")
    ids, flags = [], []
    for utt in conv.turns:
        toks, fl = vocab.utterance_tokens(utt)
        ids.extend(vocab.encode(toks))
        flags.extend(fl)
        ids.append(vocab.sep_id)
        flags.append(False)
    keep = max_len - 1
    if len(ids) > keep:
        ids, flags = ids[-keep:], flags[-keep:]
    return [vocab.cls_id, *ids], [False, *flags]


def tokenize(conv: Conversation, vocab: Vocabulary, max_len: int) -> list[int]:
    return tokenize_with_flags(conv, vocab, max_len)[0]


def context_ids(conv: Conversation, vocab: Vocabulary, max_len: int) -> list[int]:
    """Ids of the history preceding the final recommender turn."""
    return tokenize(conv.with_turns(conv.context), vocab, max_len)


# -- attention block -------------------------------------------------------------


def attention_forward(X, wq, wk, wv, wo, mask):
    scale = 1.0 / np.sqrt(X.shape[-1])
    Q = X @ wq
    Kt = X @ wk
    Vv = X @ wv
    S = (Q @ Kt.transpose(0, 2, 1)) * scale
    A = K.masked_softmax(S, mask)
    Z = A @ Vv
    H = X + Z @ wo
    return H, (X, Q, Kt, Vv, A, Z, scale)


def attention_backward(dH, cache, wq, wk, wv, wo):
    X, Q, Kt, Vv, A, Z, scale = cache
    dX = dH.copy()
    dwo = np.einsum("bld,ble->de", Z, dH)
    dZ = dH @ wo.T
    dA = dZ @ Vv.transpose(0, 2, 1)
    dVv = A.transpose(0, 2, 1) @ dZ
    dS = K.softmax_backward(A, dA) * scale
    dQ = dS @ Kt
    dK = dS.transpose(0, 2, 1) @ Q
    dwq = np.einsum("bld,ble->de", X, dQ)
    dwk = np.einsum("bld,ble->de", X, dK)
    dwv = np.einsum("bld,ble->de", X, dVv)
    dX += dQ @ wq.T + dK @ wk.T + dVv @ wv.T
    return dX, dwq, dwk, dwv, dwo


def _check_ids(ids: Sequence[int], V: int) -> np.ndarray:
    arr = np.asarray(ids, dtype=np.int64)
    if arr.size and (arr.min() < 0 or arr.max() >= V):
        bad = int(arr[(arr < 0) | (arr >= V)][0])
        raise IndexError(f"token id {bad} outside vocabulary of size {V}")
    return arr


# -- encoder --------------------------------------------------------------------


@dataclass
class EncoderCache:
    ids: list[np.ndarray]
    lengths: np.ndarray
    attn: tuple


def encoder_forward(params: ModelParams, batch: Sequence[Sequence[int]]) -> tuple[np.ndarray, EncoderCache]:
    """Encode a batch of id sequences; returns states of shape (B, L, d)."""
    V, d = params.vocab_size, params.d
    arrays = [_check_ids(ids, V) for ids in batch]
    lengths = np.array([a.size for a in arrays])
    if lengths.min() < 1:
        raise ValueError("cannot encode an empty sequence")
    L = int(lengths.max())
    if L > params.max_len:
        raise ValueError(f"sequence length {L} exceeds max_len {params.max_len}")
    B = len(arrays)
    X = np.zeros((B, L, d))
    for b, a in enumerate(arrays):
        X[b, : a.size] = params["tok_emb"][a]
    X += params.pos[:L]
    valid = np.arange(L)[None, :] < lengths[:, None]
    mask = np.broadcast_to(valid[:, None, :], (B, L, L))
    H, cache = attention_forward(X, params["enc_q"], params["enc_k"], params["enc_v"], params["enc_o"], mask)
    return H, EncoderCache(arrays, lengths, cache)


def encoder_backward(params: ModelParams, cache: EncoderCache, dH: np.ndarray, grads: dict[str, np.ndarray]) -> None:
    dX, dwq, dwk, dwv, dwo = attention_backward(
        dH, cache.attn, params["enc_q"], params["enc_k"], params["enc_v"], params["enc_o"]
    )
    grads["enc_q"] += dwq
    grads["enc_k"] += dwk
    grads["enc_v"] += dwv
    grads["enc_o"] += dwo
    for b, a in enumerate(cache.ids):
        np.add.at(grads["tok_emb"], a, dX[b, : a.size])


def encode_context(ids: Sequence[int], params: ModelParams) -> EncodedContext:
    H, _ = encoder_forward(params, [ids])
    states = H[0]
    return EncodedContext(states, states[0].copy())


def encode_cls(params: ModelParams, batch: Sequence[Sequence[int]]) -> np.ndarray:
    H, _ = encoder_forward(params, batch)
    return H[:, 0, :].copy()


# -- decoder --------------------------------------------------------------------


@dataclass
class DecoderCache:
    ids: list[np.ndarray]
    n_prompt: np.ndarray
    total: np.ndarray
    H: np.ndarray
    attn: tuple


def decoder_forward(
    params: ModelParams, prompts: Sequence[np.ndarray], batch: Sequence[Sequence[int]]
) -> tuple[list[np.ndarray], DecoderCache]:
    """Causal decoding over ``[prompt vectors ; token embeddings]``.

    Returns one (L_b, V) logit matrix per sequence: row j scores the token
    that follows input position j.
    """
    V, d = params.vocab_size, params.d
    arrays = [_check_ids(ids, V) for ids in batch]
    P = np.array([0 if p is None else np.asarray(p).reshape(-1, d).shape[0] for p in prompts])
    lengths = np.array([a.size for a in arrays])
    total = P + lengths
    T = int(total.max())
    if T > params.max_len:
        raise ValueError(f"prompt + sequence length {T} exceeds decoder max length {params.max_len}")
    B = len(arrays)
    Y = np.zeros((B, T, d))
    for b, a in enumerate(arrays):
        if P[b]:
            Y[b, : P[b]] = np.asarray(prompts[b]).reshape(-1, d)
        Y[b, P[b] : total[b]] = params["tok_emb"][a]
    Y += params.pos[:T]
    causal = np.tril(np.ones((T, T), dtype=bool))
    valid = np.arange(T)[None, :] < total[:, None]
    mask = causal[None, :, :] & valid[:, None, :]
    H, cache = attention_forward(Y, params["dec_q"], params["dec_k"], params["dec_v"], params["dec_o"], mask)
    logits = [H[b, P[b] : total[b]] @ params["lm_head"] for b in range(B)]
    return logits, DecoderCache(arrays, P, total, H, cache)


def decoder_backward(
    params: ModelParams, cache: DecoderCache, dlogits: Sequence[np.ndarray], grads: dict[str, np.ndarray]
) -> list[np.ndarray]:
    """Accumulate decoder gradients; returns the gradient for each prompt block."""
    H = cache.H
    dH = np.zeros_like(H)
    for b, g in enumerate(dlogits):
        rows = slice(cache.n_prompt[b], cache.total[b])
        grads["lm_head"] += H[b, rows].T @ g
        dH[b, rows] = g @ params["lm_head"].T
    dY, dwq, dwk, dwv, dwo = attention_backward(
        dH, cache.attn, params["dec_q"], params["dec_k"], params["dec_v"], params["dec_o"]
    )
    grads["dec_q"] += dwq
    grads["dec_k"] += dwk
    grads["dec_v"] += dwv
    grads["dec_o"] += dwo
    dprompts = []
    for b, a in enumerate(cache.ids):
        p = cache.n_prompt[b]
        np.add.at(grads["tok_emb"], a, dY[b, p : cache.total[b]])
        dprompts.append(dY[b, :p].copy())
    return dprompts


def decode_logits(prompt_vectors: np.ndarray | None, ids: Sequence[int], params: ModelParams) -> np.ndarray:
    logits, _ = decoder_forward(params, [prompt_vectors], [ids])
    return logits[0]
