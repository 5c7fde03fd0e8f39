import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lotcrs.neuralcore import Adam, ModelParams
from lotcrs.objectives import (
    ContrastiveBatch,
    GenBatch,
    ObjectiveError,
    RecBatch,
    cca_loss,
    contrastive_pair_indices,
    dmp_loss,
    gen_model_loss,
    gen_nll_loss,
    joint_rec_loss,
    mask_tokens,
    rec_ce_loss,
    sample_contrastive_pairs,
    soft_label_kl,
)


def test_mask_rate_one_masks_everything():
    mb = mask_tokens([[0, 5, 6, 7]], [[False, True, False, True]], 1.0, 2, 0)
    assert mb.masked_positions == [[1, 3]]
    assert mb.corrupted_ids == [[0, 2, 6, 2]]
    assert mb.gold_tokens == [[5, 7]]


def test_mask_deterministic_and_floor():
    a = mask_tokens([[0, 5, 6]] * 20, [[False, True, True]] * 20, 0.01, 2, 3)
    b = mask_tokens([[0, 5, 6]] * 20, [[False, True, True]] * 20, 0.01, 2, 3)
    assert a == b
    assert all(len(p) >= 1 for p in a.masked_positions)
    assert a.n_forced > 0
    with pytest.raises(ObjectiveError):
        mask_tokens([[0, 5]], [[False, False]], 0.5, 2, 0)


def test_mask_rate_monte_carlo():
    seqs, flags = [list(range(21))] * 10000, [[False] + [True] * 20] * 10000
    mb = mask_tokens(seqs, flags, 0.15, 2, 0)
    frac = (mb.n_masked - mb.n_forced) / (20 * 10000)
    assert 0.14 <= frac <= 0.17


def test_dmp_uniform_and_perfect():
    p = ModelParams.init(10, 2, d=4, max_len=8, seed=0)
    p.tensors["mlm_head"][:] = 0.0
    mb = mask_tokens([[0, 5, 6, 7]], [[False, True, False, True]], 1.0, 2, 0)
    loss, _ = dmp_loss(mb, p)
    assert loss == pytest.approx(2 * math.log(10), abs=1e-12)


def test_dmp_matches_oracle():
    p = ModelParams.init(12, 2, d=6, max_len=8, seed=1)
    mb = mask_tokens([[0, 5, 6, 7], [0, 8, 9]], [[False, True, True, True], [False, True, True]], 0.5, 2, 4)
    from lotcrs.neuralcore.model import encoder_forward

    H, _ = encoder_forward(p, mb.corrupted_ids)
    expect = 0.0
    for b, (pos, gold) in enumerate(zip(mb.masked_positions, mb.gold_tokens)):
        for q, g in zip(pos, gold):
            z = H[b, q] @ p["mlm_head"]
            expect += -(z[g] - np.log(np.exp(z).sum()))
    assert dmp_loss(mb, p)[0] == pytest.approx(expect, abs=1e-10)


def test_cca_hand_example():
    e1, e2 = np.array([1.0, 0.0]), np.array([0.0, 1.0])
    loss, _, _ = cca_loss(ContrastiveBatch(np.stack([e1, e2]), np.stack([e1, e2]), tau=1.0))
    assert loss == pytest.approx(math.log(1 + math.exp(-1)), abs=1e-12)
    assert loss == pytest.approx(0.3133, abs=1e-4)


def test_cca_identical_vectors_is_log_b():
    h = np.ones((4, 3))
    assert cca_loss(ContrastiveBatch(h, h, tau=0.5))[0] == pytest.approx(math.log(4), abs=1e-12)


def test_cca_errors():
    with pytest.raises(ObjectiveError):
        cca_loss(ContrastiveBatch(np.zeros((2, 3)), np.ones((2, 3))))
    with pytest.raises(ObjectiveError):
        ContrastiveBatch(np.ones((1, 3)), np.ones((1, 3)))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.01, 100.0))
def test_cca_scale_invariant(seed, c):
    rng = np.random.default_rng(seed)
    h1, h2 = rng.normal(size=(4, 5)), rng.normal(size=(4, 5))
    a = cca_loss(ContrastiveBatch(h1, h2, 0.2))[0]
    b = cca_loss(ContrastiveBatch(h1 * c, h2 * c, 0.2))[0]
    assert abs(a - b) < 1e-12
    assert a >= 0


def test_rec_ce_hand_example():
    loss, _ = rec_ce_loss(RecBatch([[0.5, 0.5]], [[1.0, 0.0]]))
    assert loss == pytest.approx(2 * math.log(2), abs=1e-12)
    loss, _ = rec_ce_loss(RecBatch([[1.0, 0.0]], [[1.0, 0.0]]))
    assert loss < 1e-11
    with pytest.raises(ObjectiveError):
        rec_ce_loss(RecBatch([[1.5, -0.5]], [[1.0, 0.0]]))


def test_rec_ce_matches_double_sum():
    rng = np.random.default_rng(0)
    for _ in range(20):
        p = rng.dirichlet(np.ones(5), size=3)
        y = np.zeros((3, 5))
        y[np.arange(3), rng.integers(0, 5, 3)] = 1
        expect = -sum(
            y[j, i] * math.log(p[j, i]) + (1 - y[j, i]) * math.log(1 - p[j, i]) for j in range(3) for i in range(5)
        )
        assert rec_ce_loss(RecBatch(p, y))[0] == pytest.approx(expect, abs=1e-10)


def test_kl_examples():
    loss, _ = soft_label_kl(RecBatch([[0.25, 0.75]], [[1.0, 0.0]], [[0.5, 0.5]]))
    assert loss == pytest.approx(0.5 * math.log(2) + 0.5 * math.log(2 / 3), abs=1e-12)
    assert loss == pytest.approx(0.1438, abs=1e-4)
    same = soft_label_kl(RecBatch([[0.3, 0.7]], [[1.0, 0.0]], [[0.3, 0.7]]))[0]
    assert same == pytest.approx(0.0, abs=1e-15)


def test_kl_nonnegative_sweep():
    rng = np.random.default_rng(1)
    for _ in range(1000):
        p, t = rng.dirichlet(np.ones(4)), rng.dirichlet(np.ones(4) * 0.5)
        assert soft_label_kl(RecBatch([p], [[1, 0, 0, 0]], [t]))[0] >= -1e-15


def test_joint_arithmetic():
    assert joint_rec_loss(1.0, 2.0, 3.0, 0.5, 0.1) == pytest.approx(2.3, abs=1e-15)
    assert joint_rec_loss(1.0, 2.0, 3.0, 0.0, 0.0) == 1.0
    with pytest.raises(ObjectiveError):
        joint_rec_loss(1.0, 2.0, 3.0, -1.0, 0.0)


def test_gen_uniform():
    p = ModelParams.init(4, 2, d=4, max_len=8, seed=0)
    p.tensors["lm_head"][:] = 0.0
    loss, _, _ = gen_nll_loss(GenBatch([[0, 1]], [[2, 3]], None, 0), [None], p)
    assert loss == pytest.approx(2 * math.log(4), abs=1e-12)
    with pytest.raises(ObjectiveError):
        GenBatch([[0]], [[]])


def test_gen_matches_per_token_oracle():
    from lotcrs.neuralcore.model import decode_logits

    p = ModelParams.init(9, 2, d=6, max_len=16, seed=2)
    rng = np.random.default_rng(0)
    prompts = [rng.normal(size=(2, 6)), rng.normal(size=(3, 6))]
    resp = [[3, 4, 5], [6]]
    loss, _, _ = gen_nll_loss(GenBatch([[0], [0]], resp, None, 1), prompts, p)
    expect = 0.0
    for pr, r in zip(prompts, resp):
        z = decode_logits(pr, [1, *r[:-1]], p)
        expect += -sum(z[j, r[j]] - np.log(np.exp(z[j]).sum()) for j in range(len(r)))
    assert loss == pytest.approx(expect / 2, abs=1e-10)


def test_one_adam_step_reduces_dmp_and_gen():
    p = ModelParams.init(12, 2, d=8, max_len=16, seed=0)
    mb = mask_tokens([[0, 5, 6, 7]], [[False, True, True, True]], 0.5, 2, 0)
    before, g = dmp_loss(mb, p)
    Adam(p, 1e-3).step(g)
    assert dmp_loss(mb, p)[0] < before
    gb = GenBatch([[0, 5, 6]], [[7, 8, 1]], np.ones((1, 2, 8)) * 0.1, 0)
    before, g = gen_model_loss(p, gb)
    Adam(p, 1e-3).step(g)
    assert gen_model_loss(p, gb)[0] < before


def test_pairs_exhaustive_and_distinct():
    targets = ["a", "a", "b", "b", "c", "c"]
    pairs = contrastive_pair_indices(targets, 3, 0)
    assert sorted(targets[a] for a, _ in pairs) == ["a", "b", "c"]
    rng = np.random.default_rng(5)
    targets = [t for t in "abcdefgh" for _ in range(3)] + ["z"]
    for _ in range(1000):
        pairs = contrastive_pair_indices(targets, 5, rng)
        assert len({targets[a] for a, _ in pairs}) == 5
        assert all(a != b and targets[a] == targets[b] for a, b in pairs)
    assert contrastive_pair_indices(targets, 4, 9) == contrastive_pair_indices(targets, 4, 9)
    with pytest.raises(ObjectiveError):
        contrastive_pair_indices(targets, 9, 0)


def test_sample_pairs_on_conversations():
    from lotcrs.corpus import Conversation, Utterance

    convs = [Conversation(f"c{k}", (Utterance("seeker", "hi"),), (t,)) for k, t in enumerate("aabb")]
    pairs = sample_contrastive_pairs(convs, 2, 0)
    assert all(x.target_items == y.target_items and x.id != y.id for x, y in pairs)
