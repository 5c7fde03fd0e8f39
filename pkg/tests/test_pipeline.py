import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from _reference import reduced_finetune
from lotcrs.corpus import RECOMMENDER, SEEKER, Conversation, Utterance
from lotcrs.neuralcore.vocab import template_tokens
from lotcrs.pipeline import (
    History,
    PipelineError,
    TrainConfig,
    finetune_generation,
    finetune_recommendation,
    decode_template,
    fill_template,
    generate_response,
    init_checkpoint,
    pretrain,
    rank_items,
    recommend,
    soft_labels,
    train_teacher,
)
from lotcrs.retrieval import RetrievalError, build_index


# -- config -------------------------------------------------------------------------


def test_config_roundtrip_and_validation():
    c = TrainConfig(seed=3, gamma=0.2)
    assert TrainConfig.from_dict(c.to_dict()) == c
    with pytest.raises(Exception, match="nope"):
        TrainConfig.from_dict({**c.to_dict(), "nope": 1})
    for bad in ({"lambda1": -1.0}, {"tau": 0.0}, {"mask_rate": 1.5}, {"dim": 0}, {"ce_mode": "x"}):
        with pytest.raises(Exception):
            TrainConfig(**bad)


def test_history_jsonl(tmp_path):
    h = History()
    h.add(0, {"ce": [1.0, 3.0]})
    h.add(1, {"ce": [1.0]})
    assert h.curve("ce") == [2.0, 1.0]
    h.write(tmp_path / "m.jsonl")
    lines = (tmp_path / "m.jsonl").read_text().splitlines()
    assert lines[0] == '{"epoch": 0, "loss_name": "ce", "value": 2.0}'


# -- ranking ------------------------------------------------------------------------


def test_rank_items_worked_example():
    # logits 0 and ln 2 -> probabilities 1/3 and 2/3
    assert rank_items(np.array([0.0, math.log(2.0)]), ["a", "b"], 1) == ["b"]
    assert rank_items(np.zeros(4), ["d", "b", "c", "a"], 3) == ["a", "b", "c"]
    assert rank_items(np.array([1.0, 2.0]), ["x", "y"], 10) == ["y", "x"]
    with pytest.raises(ValueError):
        rank_items(np.zeros(2), ["a", "b"], 0)


@settings(max_examples=60)
@given(st.lists(st.integers(-8, 8), min_size=1, max_size=15), st.integers(-6, 6), st.integers(1, 20))
def test_rank_items_shift_invariant(ints, shift, k):
    logits = np.array(ints, dtype=np.float64) / 4.0  # dyadic, so shifts are exact
    ids = [f"i{j:02d}" for j in range(len(ints))]
    assert rank_items(logits, ids, k) == rank_items(logits + shift / 2.0, ids, k)
    expect = sorted(ids, key=lambda i: (-logits[ids.index(i)], i))[:k]
    assert rank_items(logits, ids, k) == expect


# -- templates ----------------------------------------------------------------------


def test_fill_template_contract():
    assert fill_template("i recommend [ITEM] .", ["Pretty Woman (1990)"]) == "i recommend Pretty Woman (1990) ."
    assert fill_template("[ITEM] or [ITEM] or [ITEM]", ["A", "B"]) == "A or B or A"
    assert fill_template("hello there", []) == "hello there"
    with pytest.raises(ValueError):
        fill_template("try [ITEM]", [])


def test_response_preprocessing_replaces_names():
    toks = template_tokens("I recommend Pretty Woman (1990).", ["Pretty Woman (1990)"])
    assert " ".join(toks) == "i recommend [ITEM] ."


# -- training -----------------------------------------------------------------------


def test_pretrain_deterministic_and_decreasing(world):
    cfg = world.config.replace(pretrain_epochs=12)
    a, ha = pretrain(world.sim, cfg, world.vocab, world.ids)
    b, hb = pretrain(world.sim, cfg, world.vocab, world.ids)
    assert a.checksum == b.checksum
    assert ha.records == hb.records
    total = ha.curve("total")
    assert np.mean(total[-3:]) < np.mean(total[:3])
    assert a.parent == init_checkpoint(world.vocab, world.ids, cfg).checksum


def test_pretrain_rejects_unpairable_corpus(world):
    one_each = {c.target_items[0]: c for c in world.sim}
    with pytest.raises(PipelineError):
        pretrain(list(one_each.values()), world.config, world.vocab, world.ids)
    with pytest.raises(PipelineError):
        pretrain([], world.config, world.vocab, world.ids)


def test_teacher_soft_labels_are_distributions(world):
    teacher, h = train_teacher(world.sim, world.config, world.vocab, world.ids)
    S = soft_labels(teacher, world.train, world.config.max_len)
    assert S.shape == (len(world.train), len(world.ids))
    np.testing.assert_allclose(S.sum(axis=1), 1.0, atol=1e-12)
    assert (S > 0).all()


@pytest.fixture(scope="module")
def staged(world):
    cfg = world.config
    pre, _ = pretrain(world.sim, cfg, world.vocab, world.ids)
    teacher, _ = train_teacher(world.sim, cfg, world.vocab, world.ids)
    index = build_index(world.sim, pre.params, world.vocab, "user_repr", cfg.max_len)
    return pre, teacher, index


def _epoch_means(losses, epochs):
    return np.asarray(losses).reshape(epochs, -1).mean(axis=1)


ABLATIONS = {
    "gamma=0": dict(gamma=0.0),
    "lambda1=0": dict(lambda1=0.0),
    "lambda2=0": dict(lambda2=0.0),
    "all=0": dict(gamma=0.0, lambda1=0.0, lambda2=0.0),
}


@pytest.mark.parametrize("name", list(ABLATIONS))
def test_ablation_identity(world, staged, name):
    pre, teacher, index = staged
    cfg = world.config.replace(**ABLATIONS[name])
    ck, hist = finetune_recommendation(world.train, index, teacher, pre, cfg, sim_corpus=world.sim)
    ref_losses, ref_params = reduced_finetune(
        world.train,
        pre,
        cfg,
        index=index if cfg.gamma > 0 else None,
        teacher_probs=soft_labels(teacher, world.train, cfg.max_len) if cfg.lambda1 > 0 else None,
        sim=world.sim if cfg.lambda2 > 0 else None,
    )
    got = hist.curve("total")
    assert len(got) == cfg.rec_epochs
    np.testing.assert_allclose(got, _epoch_means(ref_losses, cfg.rec_epochs), rtol=0, atol=1e-9)
    for n in ck.params.tensors:
        np.testing.assert_allclose(ck.params[n], ref_params[n], rtol=0, atol=1e-9)


def test_full_objective_matches_reference(world, staged):
    pre, teacher, index = staged
    cfg = world.config
    _, hist = finetune_recommendation(world.train, index, teacher, pre, cfg, sim_corpus=world.sim)
    ref, _ = reduced_finetune(world.train, pre, cfg, index=index,
                              teacher_probs=soft_labels(teacher, world.train, cfg.max_len), sim=world.sim)
    np.testing.assert_allclose(hist.curve("total"), _epoch_means(ref, cfg.rec_epochs), rtol=0, atol=1e-9)
    assert {r["loss_name"] for r in hist.records} == {"total", "ce", "kl", "cca"}


def test_finetune_rejects_foreign_index(world, staged):
    pre, teacher, index = staged
    fresh = init_checkpoint(world.vocab, world.ids, world.config)
    with pytest.raises(RetrievalError):
        finetune_recommendation(world.train, index, teacher, fresh, world.config)


def test_recommend_shape_and_determinism(world, staged):
    pre, teacher, index = staged
    ck, _ = finetune_recommendation(world.train, index, teacher, pre, world.config, sim_corpus=world.sim)
    assert ck.parent == pre.checksum
    conv = world.test[0]
    top = recommend(conv, ck, index, 5)
    assert len(top) == 5 and len(set(top)) == 5 and set(top) <= set(world.ids)
    assert recommend(conv, ck, index, 5) == top
    assert recommend(conv, ck, index, 100) == recommend(conv, ck, index, len(world.ids))


def _memo_corpus():
    names = ["Pretty Woman (1990)", "Big (1988)", "Heat (1995)", "Alien (1979)", "Fargo (1996)"]
    lines = [
        "I recommend {}.",
        "You will love {} for sure.",
        "Try {} tonight.",
        "Maybe {} fits.",
        "Watch {} or {}.",
    ]
    asks = ["i want a romance", "scary films are my thing", "show me a western", "any space adventure",
            "something funny tonight"]
    convs = []
    for j, (n, line, ask) in enumerate(zip(names, lines, asks)):
        text = line.format(n, names[0]) if line.count("{}") == 2 else line.format(n)
        items = (f"m{j}", "m0") if line.count("{}") == 2 else (f"m{j}",)
        turns = (Utterance(SEEKER, ask), Utterance(RECOMMENDER, text, items=items))
        convs.append(Conversation(f"c{j}", turns, (f"m{j}",), "real"))
    return names, convs


def test_generation_memorizes_five_examples():
    from lotcrs.corpus import Item, ItemCatalog
    from lotcrs.pipeline import make_vocabulary

    names, convs = _memo_corpus()
    catalog = ItemCatalog([Item(f"m{j}", n, "", (), ()) for j, n in enumerate(names)])
    vocab = make_vocabulary([convs], catalog)
    cfg = TrainConfig(dim=32, max_len=16, max_response_len=10, gen_epochs=200, gen_batch_size=5, lr_gen=1e-2)
    ck, hist = finetune_generation(convs, None, init_checkpoint(vocab, catalog.ids, cfg), cfg)
    assert hist.curve("nll")[-1] < 0.05 * hist.curve("nll")[0]
    for c in convs:
        gold = template_tokens(c.response.text, names)
        assert decode_template(c, ck, None, cfg) == gold
    out = generate_response(convs[0], ck, None, ["m3"], cfg)
    assert out == "i recommend Alien (1979) ."
