"""Hot inner loops: masked attention softmax, its backward, cosine scan.

Each kernel has a numba and a pure-numpy body. ``LOTCRS_NUMBA=0`` (or a
missing numba) selects numpy. Both paths agree to ~1e-15 but are not
guaranteed bit-identical to each other; each path alone is deterministic.
"""
from __future__ import annotations

import os

import numpy as np

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False


def _env_wants_numba() -> bool:
    return os.environ.get("LOTCRS_NUMBA", "1").strip().lower() not in {"0", "false", "no", "off"}


USE_NUMBA = HAVE_NUMBA and _env_wants_numba()


# -- numpy bodies ------------------------------------------------------------


def masked_softmax_np(scores: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Row softmax over the last axis, restricted to ``mask`` entries.

    Rows with no allowed entry come back all zero.
    """
    s = np.where(mask, scores, -np.inf)
    mx = s.max(axis=-1, keepdims=True)
    mx = np.where(np.isfinite(mx), mx, 0.0)
    e = np.where(mask, np.exp(s - mx), 0.0)
    z = e.sum(axis=-1, keepdims=True)
    return np.divide(e, z, out=np.zeros_like(e), where=z > 0)


def softmax_backward_np(probs: np.ndarray, grad: np.ndarray) -> np.ndarray:
    return probs * (grad - (grad * probs).sum(axis=-1, keepdims=True))


def cosine_scores_np(unit_rows: np.ndarray, unit_query: np.ndarray) -> np.ndarray:
    return unit_rows @ unit_query


def topk_order_np(scores: np.ndarray, k: int) -> np.ndarray:
    # lexsort: last key is primary -> descending score, then ascending row
    order = np.lexsort((np.arange(scores.shape[0]), -scores))
    return order[:k]


# -- numba bodies ------------------------------------------------------------

if HAVE_NUMBA:

    @numba.njit(cache=True)
    def _masked_softmax_nb(scores, mask):
        flat_s = scores.reshape(-1, scores.shape[-1])
        flat_m = mask.reshape(-1, mask.shape[-1])
        out = np.zeros_like(flat_s)
        n, L = flat_s.shape
        for r in range(n):
            mx = -np.inf
            for c in range(L):
                if flat_m[r, c] and flat_s[r, c] > mx:
                    mx = flat_s[r, c]
            if mx == -np.inf:
                continue
            z = 0.0
            for c in range(L):
                if flat_m[r, c]:
                    v = np.exp(flat_s[r, c] - mx)
                    out[r, c] = v
                    z += v
            for c in range(L):
                out[r, c] /= z
        return out.reshape(scores.shape)

    @numba.njit(cache=True)
    def _softmax_backward_nb(probs, grad):
        flat_p = probs.reshape(-1, probs.shape[-1])
        flat_g = grad.reshape(-1, grad.shape[-1])
        out = np.empty_like(flat_p)
        n, L = flat_p.shape
        for r in range(n):
            dot = 0.0
            for c in range(L):
                dot += flat_p[r, c] * flat_g[r, c]
            for c in range(L):
                out[r, c] = flat_p[r, c] * (flat_g[r, c] - dot)
        return out.reshape(probs.shape)

    @numba.njit(cache=True)
    def _cosine_scores_nb(unit_rows, unit_query):
        n, d = unit_rows.shape
        out = np.empty(n)
        for r in range(n):
            acc = 0.0
            for c in range(d):
                acc += unit_rows[r, c] * unit_query[c]
            out[r] = acc
        return out

    @numba.njit(cache=True)
    def _topk_order_nb(scores, k):
        # partial selection sort: O(n k), k is small
        n = scores.shape[0]
        taken = np.zeros(n, dtype=np.bool_)
        out = np.empty(k, dtype=np.int64)
        for j in range(k):
            best = -1
            for r in range(n):
                if taken[r]:
                    continue
                if best < 0 or scores[r] > scores[best]:
                    best = r
            taken[best] = True
            out[j] = best
        return out


def masked_softmax(scores: np.ndarray, mask: np.ndarray) -> np.ndarray:
    if USE_NUMBA:
        return _masked_softmax_nb(np.ascontiguousarray(scores), np.ascontiguousarray(mask))
    return masked_softmax_np(scores, mask)


def softmax_backward(probs: np.ndarray, grad: np.ndarray) -> np.ndarray:
    if USE_NUMBA:
        return _softmax_backward_nb(np.ascontiguousarray(probs), np.ascontiguousarray(grad))
    return softmax_backward_np(probs, grad)


def cosine_scores(unit_rows: np.ndarray, unit_query: np.ndarray) -> np.ndarray:
    # BLAS matvec beats the jitted loop (see benchmarks/bench_kernels.py); both paths use it.
    return cosine_scores_np(unit_rows, unit_query)


def topk_order(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` best scores, descending, ties by lower index."""
    k = min(int(k), scores.shape[0])
    if USE_NUMBA:
        return _topk_order_nb(np.ascontiguousarray(scores, dtype=np.float64), k)
    return topk_order_np(scores, k)


def backend() -> str:
    return "numba" if USE_NUMBA else "numpy"
