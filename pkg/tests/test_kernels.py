import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lotcrs.neuralcore import _kernels as K

needs_numba = pytest.mark.skipif(not K.HAVE_NUMBA, reason="numba not installed")


@needs_numba
@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_numba_and_numpy_agree(seed):
    rng = np.random.default_rng(seed)
    B, L = int(rng.integers(1, 4)), int(rng.integers(1, 9))
    s = rng.normal(size=(B, L, L)) * 5
    m = rng.random((B, L, L)) < 0.7
    m[0, 0] = False  # a fully masked row must come out as zeros
    p_np = K.masked_softmax_np(s, m)
    p_nb = K._masked_softmax_nb(s, m)
    np.testing.assert_allclose(p_nb, p_np, rtol=0, atol=1e-14)
    assert not p_np[0, 0].any()
    g = rng.normal(size=s.shape)
    np.testing.assert_allclose(K._softmax_backward_nb(p_np, g), K.softmax_backward_np(p_np, g), rtol=0, atol=1e-13)
    rows = rng.normal(size=(int(rng.integers(1, 50)), 6))
    q = rng.normal(size=6)
    np.testing.assert_allclose(K._cosine_scores_nb(rows, q), K.cosine_scores_np(rows, q), rtol=0, atol=1e-13)
    sc = np.round(rng.normal(size=rows.shape[0]), 1)  # rounding forces ties
    k = int(rng.integers(1, sc.size + 1))
    assert K._topk_order_nb(sc, k).tolist() == K.topk_order_np(sc, k).tolist()


def test_topk_clamps_k():
    assert K.topk_order(np.array([0.1, 0.3, 0.2]), 10).tolist() == [1, 2, 0]


def test_env_switch_selects_numpy():
    env = {**os.environ, "LOTCRS_NUMBA": "0"}
    out = subprocess.run(
        [sys.executable, "-c", "from lotcrs.neuralcore import _kernels as K; print(K.backend())"],
        env=env, capture_output=True, text=True, check=True,
    )
    assert out.stdout.strip() == "numpy"
