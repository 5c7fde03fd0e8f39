"""Recall, coverage, long-tail coverage and response diversity."""
from __future__ import annotations

import json
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field

from .corpus import Conversation, FrequencyTable, tokenize_text

REPORT_KEYS = ("R@1", "R@10", "R@50", "C@10", "C@50", "TC@10", "TC@50", "Dist-2", "Dist-3", "Dist-4")


class MetricError(ValueError):
    pass


def _check_k(k: int) -> None:
    if k < 1:
        raise MetricError("k must be a positive integer")


def recall_at_k(lists: Sequence[Sequence[str]], gold: Sequence[Iterable[str]], k: int) -> float:
    """Share of instances with any gold item in their top-k list."""
    _check_k(k)
    if not lists:
        raise MetricError("recall over an empty instance set")
    if len(lists) != len(gold):
        raise MetricError(f"{len(lists)} lists for {len(gold)} gold sets")
    hits = sum(1 for L, g in zip(lists, gold) if set(L[:k]) & set(g))
    return hits / len(lists)


def coverage_at_k(lists: Sequence[Sequence[str]], items: Iterable[str], k: int) -> float:
    """Fraction of the item set appearing in the union of top-k lists."""
    _check_k(k)
    items = set(items)
    if not items:
        raise MetricError("coverage over an empty item set")
    seen = {i for L in lists for i in L[:k]}
    unknown = seen - items
    if unknown:
        raise MetricError(f"recommended items outside the item set: {sorted(unknown)[:3]}")
    return len(seen) / len(items)


def tail_coverage_at_k(lists: Sequence[Sequence[str]], freq: FrequencyTable, k: int) -> float:
    """Fraction of long-tail items appearing in the union of top-k lists."""
    _check_k(k)
    tail = freq.tail_set
    if not tail:
        raise MetricError(f"tail set is empty at threshold {freq.tail_threshold}; tail coverage is undefined")
    seen = {i for L in lists for i in L[:k] if i in tail}
    return len(seen) / len(tail)


def distinct_n(responses: Sequence[Sequence[str] | str], n: int) -> float:
    """Distinct word n-grams across all responses, divided by the number of responses."""
    if n < 1:
        raise MetricError("n must be at least 1")
    if not responses:
        raise MetricError("distinct-n over an empty response set")
    grams = set()
    for r in responses:
        toks = r.split() if isinstance(r, str) else list(r)
        grams.update(tuple(toks[j : j + n]) for j in range(len(toks) - n + 1))
    return len(grams) / len(responses)


@dataclass
class EvalReport:
    values: dict[str, float]
    tail_threshold: int
    n_instances: int
    n_items: int
    n_tail_items: int
    extra: dict[str, float] = field(default_factory=dict)

    def __getitem__(self, key: str) -> float:
        return self.values[key]

    def to_json(self) -> str:
        return json.dumps(
            {
                "metrics": self.values,
                "tail_threshold": self.tail_threshold,
                "n_instances": self.n_instances,
                "n_items": self.n_items,
                "n_tail_items": self.n_tail_items,
            },
            sort_keys=True,
        )

    def render_table(self) -> str:
        keys = list(self.values)
        width = max(8, *(len(k) for k in keys))
        head = " ".join(k.rjust(width) for k in keys)
        row = " ".join(f"{self.values[k]:.4f}".rjust(width) for k in keys)
        return f"{head}\n{row}"


def build_report(
    lists: Sequence[Sequence[str]],
    gold: Sequence[Iterable[str]],
    item_ids: Sequence[str],
    freq: FrequencyTable,
    responses: Sequence[Sequence[str] | str] | None = None,
) -> EvalReport:
    values = {
        "R@1": recall_at_k(lists, gold, 1),
        "R@10": recall_at_k(lists, gold, 10),
        "R@50": recall_at_k(lists, gold, 50),
        "C@10": coverage_at_k(lists, item_ids, 10),
        "C@50": coverage_at_k(lists, item_ids, 50),
        "TC@10": tail_coverage_at_k(lists, freq, 10),
        "TC@50": tail_coverage_at_k(lists, freq, 50),
    }
    for n in (2, 3, 4):
        values[f"Dist-{n}"] = distinct_n(responses, n) if responses is not None else float("nan")
    return EvalReport(values, freq.tail_threshold, len(lists), len(item_ids), len(freq.tail_set))


def evaluate_model(
    checkpoint,
    sim_index,
    test_corpus: Sequence[Conversation],
    freq: FrequencyTable,
    ks: Sequence[int] = (1, 10, 50),
    gen_checkpoint=None,
    response_index=None,
    config=None,
) -> EvalReport:
    """Recommend at ``max(ks)`` for every test conversation and score the lists.

    Distinct-n is computed over decoded responses when a generation
    checkpoint is given, and is NaN otherwise.
    """
    from .pipeline import TrainConfig, generate_response, recommend

    if not test_corpus:
        raise MetricError("empty test corpus")
    config = config or (TrainConfig.from_dict(checkpoint.config) if checkpoint.config else TrainConfig())
    top = max(ks)
    lists = [recommend(c, checkpoint, sim_index, top, config) for c in test_corpus]
    gold = [c.target_items for c in test_corpus]
    responses = None
    if gen_checkpoint is not None:
        responses = [
            tokenize_text(generate_response(c, gen_checkpoint, response_index, L, config))
            for c, L in zip(test_corpus, lists)
        ]
    return build_report(lists, gold, checkpoint.item_ids, freq, responses)


__all__ = [
    "REPORT_KEYS",
    "MetricError",
    "recall_at_k",
    "coverage_at_k",
    "tail_coverage_at_k",
    "distinct_n",
    "EvalReport",
    "build_report",
    "evaluate_model",
]
