import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lotcrs.corpus import FrequencyTable
from lotcrs.metrics import (
    REPORT_KEYS,
    MetricError,
    build_report,
    coverage_at_k,
    distinct_n,
    recall_at_k,
    tail_coverage_at_k,
)


def test_worked_examples():
    lists = [["a", "b"], ["c", "a"]]
    assert coverage_at_k(lists, ["a", "b", "c", "d"], 2) == 0.75
    freq = FrequencyTable({"a": 10, "b": 1, "c": 9, "d": 0}, 4)
    assert tail_coverage_at_k(lists, freq, 2) == 0.5
    assert tail_coverage_at_k(lists, freq, 1) == 0.0
    assert distinct_n(["the cat sat", "a dog ran"], 2) == 2.0
    assert distinct_n(["the cat", "the cat"], 2) == 0.5
    assert distinct_n([["a", "b", "a", "b"], ["a", "b"]], 2) == 1.0
    assert recall_at_k([["x", "y"], ["z", "y"], ["q", "r"]], [{"y"}, {"z"}, {"r"}], 2) == 1.0
    assert recall_at_k([["x", "y"], ["z", "y"], ["q", "r"]], [{"y"}, {"z"}, {"w"}], 2) == 2 / 3


def test_errors():
    with pytest.raises(MetricError):
        recall_at_k([], [], 1)
    with pytest.raises(MetricError):
        recall_at_k([["a"]], [], 1)
    with pytest.raises(MetricError):
        coverage_at_k([["a"]], ["a"], 0)
    with pytest.raises(MetricError, match="outside"):
        coverage_at_k([["z"]], ["a"], 1)
    with pytest.raises(MetricError, match="tail set is empty"):
        tail_coverage_at_k([["a"]], FrequencyTable({"a": 9}, 4), 1)
    with pytest.raises(MetricError):
        distinct_n([], 2)


# Independent oracles, written as literal set arithmetic.


def _o_recall(lists, gold, k):
    return math.fsum(1.0 if any(i in g for i in L[:k]) else 0.0 for L, g in zip(lists, gold)) / len(lists)


def _o_cov(lists, items, k):
    return len(set().union(*(set(L[:k]) for L in lists))) / len(set(items))


def _o_tail(lists, counts, thr, k):
    tail = {i for i in counts if counts[i] < thr}
    return len(tail & set().union(*(set(L[:k]) for L in lists))) / len(tail)


def _o_dist(resps, n):
    grams = set()
    for r in resps:
        w = r.split()
        for j in range(len(w) - n + 1):
            grams.add(" ".join(w[j : j + n]))
    return len(grams) / len(resps)


def test_metrics_match_oracles_on_100_runs():
    rng = np.random.default_rng(7)
    words = ["a", "b", "c", "d", "e"]
    for _ in range(100):
        n_items = int(rng.integers(5, 80))
        items = [f"i{j}" for j in range(n_items)]
        counts = {i: int(rng.integers(0, 10)) for i in items}
        counts[items[0]] = 0  # keep the tail non-empty
        freq = FrequencyTable(counts, 4)
        n = int(rng.integers(1, 30))
        lists = [list(rng.permutation(items)[: int(rng.integers(1, n_items + 1))]) for _ in range(n)]
        gold = [set(rng.choice(items, size=int(rng.integers(1, 3)), replace=False)) for _ in range(n)]
        resps = [" ".join(rng.choice(words, size=int(rng.integers(0, 9)))) for _ in range(n)]
        for k in (1, 3, 10, 50):
            assert abs(recall_at_k(lists, gold, k) - _o_recall(lists, gold, k)) <= 1e-12
            assert abs(coverage_at_k(lists, items, k) - _o_cov(lists, items, k)) <= 1e-12
            assert abs(tail_coverage_at_k(lists, freq, k) - _o_tail(lists, counts, 4, k)) <= 1e-12
        for m in (1, 2, 3, 4):
            assert abs(distinct_n(resps, m) - _o_dist(resps, m)) <= 1e-12


@settings(max_examples=50)
@given(st.data())
def test_monotone_in_k(data):
    items = [f"i{j}" for j in range(12)]
    lists = data.draw(st.lists(st.permutations(items), min_size=1, max_size=6))
    gold = [data.draw(st.sets(st.sampled_from(items), min_size=1, max_size=2)) for _ in lists]
    freq = FrequencyTable({i: j for j, i in enumerate(items)}, 4)
    for f in (
        lambda k: recall_at_k(lists, gold, k),
        lambda k: coverage_at_k(lists, items, k),
        lambda k: tail_coverage_at_k(lists, freq, k),
    ):
        vals = [f(k) for k in range(1, 14)]
        assert all(a <= b for a, b in zip(vals, vals[1:]))
        assert 0.0 <= vals[0] and vals[-1] <= 1.0


def test_report_json_and_table():
    freq = FrequencyTable({"a": 0, "b": 9}, 4)
    rep = build_report([["a", "b"]], [{"b"}], ["a", "b"], freq, responses=["x y z"])
    assert list(rep.values) == list(REPORT_KEYS)
    doc = json.loads(rep.to_json())
    assert doc["metrics"]["R@1"] == 0.0 and doc["metrics"]["R@10"] == 1.0
    assert doc["n_tail_items"] == 1
    assert rep["Dist-2"] == 2.0
    lines = rep.render_table().splitlines()
    assert len(lines) == 2 and "TC@10" in lines[0]
    bare = build_report([["a", "b"]], [{"b"}], ["a", "b"], freq)
    assert math.isnan(bare["Dist-3"])
