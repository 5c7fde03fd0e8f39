"""Time the numba kernels against their numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--repeat 20]

Also reports the largest absolute difference between the two paths.
"""
from __future__ import annotations

import argparse
import timeit

import numpy as np

from lotcrs.neuralcore import _kernels as K


def cases(rng: np.random.Generator):
    B, L, n, d = 32, 64, 20000, 64
    scores = rng.normal(size=(B, L, L))
    mask = np.tril(np.ones((L, L), dtype=bool))[None].repeat(B, axis=0)
    probs = K.masked_softmax_np(scores, mask)
    grad = rng.normal(size=probs.shape)
    rows = rng.normal(size=(n, d))
    rows /= np.linalg.norm(rows, axis=1, keepdims=True)
    q = rng.normal(size=d)
    q /= np.linalg.norm(q)
    flat = rows @ q
    return {
        "masked_softmax (32x64x64)": (K.masked_softmax_np, K._masked_softmax_nb, (scores, mask)),
        "softmax_backward (32x64x64)": (K.softmax_backward_np, K._softmax_backward_nb, (probs, grad)),
        "cosine_scores (20000x64)": (K.cosine_scores_np, K._cosine_scores_nb, (rows, q)),
        "topk_order (20000, k=10)": (K.topk_order_np, K._topk_order_nb, (flat, 10)),
    }


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    if not K.HAVE_NUMBA:
        raise SystemExit("numba is not installed")
    rng = np.random.default_rng(args.seed)
    print(f"{'kernel':32s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s} {'max |diff|':>11s}")
    for name, (f_np, f_nb, a) in cases(rng).items():
        f_nb(*a)  # compile outside the timing
        t_np = min(timeit.repeat(lambda: f_np(*a), number=1, repeat=args.repeat)) * 1e3
        t_nb = min(timeit.repeat(lambda: f_nb(*a), number=1, repeat=args.repeat)) * 1e3
        diff = float(np.max(np.abs(np.asarray(f_np(*a), dtype=float) - np.asarray(f_nb(*a), dtype=float))))
        print(f"{name:32s} {t_np:10.3f} {t_nb:10.3f} {t_np / t_nb:8.2f} {diff:11.2e}")


if __name__ == "__main__":
    main()
