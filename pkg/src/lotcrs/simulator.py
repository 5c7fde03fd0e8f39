"""Balanced conversation simulation.

Item attributes come from TF-IDF over each item's description and reviews.
A conversation thread starts from the target's most widespread attribute and
adds further attributes in random order until exactly one item matches; the
thread is then rendered through seeker/recommender templates.
"""
from __future__ import annotations

import json
import logging
import math
from collections import Counter
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import (
    RECOMMENDER,
    SEEKER,
    Conversation,
    CorpusError,
    ItemCatalog,
    Utterance,
    tokenize_text,
)

log = logging.getLogger(__name__)

SEEKER_SLOT = "[X]"
RECOMMENDER_SLOT = "[Y]"


class SimulationError(ValueError):
    pass


@dataclass(frozen=True)
class AttributeSet:
    item_id: str
    ranked_attributes: tuple[tuple[str, float], ...]

    @property
    def tokens(self) -> tuple[str, ...]:
        return tuple(tok for tok, _ in self.ranked_attributes)


@dataclass(frozen=True)
class ConversationThread:
    attributes: tuple[str, ...]
    target_item: str


@dataclass(frozen=True)
class TemplateSet:
    seeker_patterns: tuple[str, ...]
    recommender_patterns: tuple[str, ...]

    def __post_init__(self):
        for role, slot, patterns in (
            (SEEKER, SEEKER_SLOT, self.seeker_patterns),
            (RECOMMENDER, RECOMMENDER_SLOT, self.recommender_patterns),
        ):
            if len(patterns) < 4:
                raise SimulationError(f"need at least 4 {role} patterns, got {len(patterns)}")
            for p in patterns:
                if p.count(slot) != 1 or p.count(SEEKER_SLOT) + p.count(RECOMMENDER_SLOT) != 1:
                    raise SimulationError(f"{role} pattern must contain exactly one {slot}: {p!r}")


DEFAULT_TEMPLATES = TemplateSet(
    seeker_patterns=(
        "Can you recommend me a movie about [X]?",
        "I am looking for something with [X].",
        "I would like to watch a film with [X].",
        "Do you know any movies about [X]?",
        "Something with [X] would be great.",
    ),
    recommender_patterns=(
        "I recommend the movie [Y].",
        "You might enjoy [Y].",
        "How about [Y]?",
        "You should watch [Y].",
        "I think [Y] would suit you.",
    ),
)


def load_templates(path: str | Path) -> TemplateSet:
    seeker, recommender = [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SimulationError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from None
            role, pattern = rec.get("role"), rec.get("pattern")
            if not isinstance(pattern, str):
                raise SimulationError(f"{path}:{lineno}: missing 'pattern'")
            if role == SEEKER:
                seeker.append(pattern)
            elif role == RECOMMENDER:
                recommender.append(pattern)
            else:
                raise SimulationError(f"{path}:{lineno}: unknown role {role!r}")
    return TemplateSet(tuple(seeker), tuple(recommender))


def write_templates(path: str | Path, templates: TemplateSet) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p in templates.seeker_patterns:
            fh.write(json.dumps({"role": SEEKER, "pattern": p}) + "\n")
        for p in templates.recommender_patterns:
            fh.write(json.dumps({"role": RECOMMENDER, "pattern": p}) + "\n")


def load_lexicon(path: str | Path) -> frozenset[str]:
    with open(path, encoding="utf-8") as fh:
        return frozenset(w.strip().lower() for w in fh if w.strip())


def _word_tokens(text: str) -> list[str]:
    return [t for t in tokenize_text(text) if t[0].isalnum()]


def extract_attributes(
    catalog: ItemCatalog, k: int = 10, lexicon: Iterable[str] | None = None
) -> dict[str, AttributeSet]:
    """Top-``k`` tokens per item by raw tf times ln(N/df); ties go to the smaller token."""
    if k <= 0:
        raise SimulationError("k must be a positive integer")
    lex = None if lexicon is None else frozenset(lexicon)
    term_counts: dict[str, Counter] = {}
    for item in catalog:
        tokens = _word_tokens(item.text)
        if not tokens:
            raise SimulationError(f"item {item.id!r} has no description or review text")
        term_counts[item.id] = Counter(tokens)
    n_docs = len(catalog)
    df: Counter = Counter()
    for counts in term_counts.values():
        df.update(counts.keys())

    out = {}
    for item_id, counts in term_counts.items():
        scored = [
            (tok, tf * math.log(n_docs / df[tok]))
            for tok, tf in counts.items()
            if lex is None or tok in lex
        ]
        scored.sort(key=lambda ts: (-ts[1], ts[0]))
        out[item_id] = AttributeSet(item_id, tuple(scored[:k]))
    return out


def attribute_document_frequency(attrs: Mapping[str, AttributeSet]) -> Counter:
    df: Counter = Counter()
    for aset in attrs.values():
        df.update(set(aset.tokens))
    return df


def _matching_items(attrs: Mapping[str, AttributeSet], required: Sequence[str], names: Mapping[str, str]) -> list[str]:
    need = set(required)
    return [
        item_id
        for item_id, aset in attrs.items()
        if need <= set(aset.tokens) | ({names[item_id]} if item_id in names else set())
    ]


def build_thread(
    attrs: Mapping[str, AttributeSet],
    target: str,
    rng_seed: int | np.random.SeedSequence,
    *,
    item_names: Mapping[str, str] | None = None,
    _df: Counter | None = None,
) -> ConversationThread:
    if target not in attrs:
        raise SimulationError(f"item {target!r} has no attribute set")
    own = attrs[target].tokens
    if not own:
        raise SimulationError(f"item {target!r} has no attributes")
    df = _df if _df is not None else attribute_document_frequency(attrs)
    start = min(own, key=lambda tok: (-df[tok], tok))
    rest = sorted(set(own) - {start})
    rng = np.random.default_rng(rng_seed)
    rest = [rest[j] for j in rng.permutation(len(rest))]

    thread = [start]
    candidates = {i for i, a in attrs.items() if start in a.tokens}
    for tok in rest:
        if len(candidates) == 1:
            break
        thread.append(tok)
        candidates = {i for i in candidates if tok in attrs[i].tokens}
    if len(candidates) > 1:
        name = (item_names or {}).get(target, target)
        thread.append(name)
    return ConversationThread(tuple(thread), target)


def thread_is_sound(thread: ConversationThread, attrs: Mapping[str, AttributeSet], names: Mapping[str, str]) -> bool:
    return _matching_items(attrs, thread.attributes, names) == [thread.target_item]


def _fill(pattern: str, slot: str, value: str) -> str:
    return pattern.replace(slot, value)


def render_conversation(
    thread: ConversationThread,
    templates: TemplateSet,
    rng_seed: int | np.random.SeedSequence,
    *,
    catalog: ItemCatalog,
    attrs: Mapping[str, AttributeSet],
    conv_id: str | None = None,
) -> Conversation:
    """Render ``thread`` into alternating seeker/recommender turns.

    Seeker turn t mentions attribute t. Between seeker turns the recommender
    suggests a non-target item holding every attribute mentioned so far,
    preferring one that also holds the upcoming attribute. The last turn
    recommends the target.
    """
    if not templates.seeker_patterns or not templates.recommender_patterns:
        raise SimulationError("empty template set")
    rng = np.random.default_rng(rng_seed)
    names = {it.id: it.name for it in catalog}
    target = thread.target_item
    turns: list[Utterance] = []
    attributes = thread.attributes
    for t, attr in enumerate(attributes):
        if t > 0:
            prefix = attributes[:t]
            pool = [i for i in _matching_items(attrs, prefix, names) if i != target]
            better = [i for i in pool if i in _matching_items(attrs, attributes[: t + 1], names)]
            pool = sorted(better or pool)
            if not pool:
                raise SimulationError(f"thread for {target!r} is not minimal at attribute {attr!r}")
            cand = pool[int(rng.integers(len(pool)))]
            pattern = templates.recommender_patterns[int(rng.integers(len(templates.recommender_patterns)))]
            turns.append(Utterance(RECOMMENDER, _fill(pattern, RECOMMENDER_SLOT, names[cand]), (cand,), ()))
        pattern = templates.seeker_patterns[int(rng.integers(len(templates.seeker_patterns)))]
        turns.append(Utterance(SEEKER, _fill(pattern, SEEKER_SLOT, attr), (), (attr,)))
    pattern = templates.recommender_patterns[int(rng.integers(len(templates.recommender_patterns)))]
    turns.append(Utterance(RECOMMENDER, _fill(pattern, RECOMMENDER_SLOT, names[target]), (target,), ()))
    return Conversation(
        id=conv_id or f"sim-{target}",
        turns=tuple(turns),
        target_items=(target,),
        origin="simulated",
    )


def consistency_violations(conv: Conversation, attrs: Mapping[str, AttributeSet], names: Mapping[str, str]) -> list[str]:
    """Check the co-occurrence rules of a rendered conversation.

    Items mentioned together must share an attribute, and the attribute of a
    seeker turn must belong to the item of the following recommender turn.
    """
    def item_attrs(i):
        return set(attrs[i].tokens) | {names[i]}

    problems = []
    mentioned = [i for turn in conv.turns for i in turn.items]
    for a in range(len(mentioned)):
        for b in range(a + 1, len(mentioned)):
            if not item_attrs(mentioned[a]) & item_attrs(mentioned[b]):
                problems.append(f"{mentioned[a]} and {mentioned[b]} share no attribute")
    for t, turn in enumerate(conv.turns):
        if turn.role != SEEKER or t + 1 >= len(conv.turns):
            continue
        for attr in turn.attributes:
            for i in conv.turns[t + 1].items:
                if attr not in item_attrs(i):
                    problems.append(f"attribute {attr!r} at turn {t} not held by {i} at turn {t + 1}")
    return problems


def simulate_balanced_corpus(
    catalog: ItemCatalog,
    attrs: Mapping[str, AttributeSet],
    templates: TemplateSet = DEFAULT_TEMPLATES,
    target_freq: int = 4,
    rng_seed: int = 0,
) -> list[Conversation]:
    """Simulate ``target_freq`` conversations per catalog item, each targeting that item."""
    if target_freq <= 0:
        raise SimulationError("target_freq must be a positive integer")
    missing = [i for i in catalog.ids if i not in attrs]
    if missing:
        raise SimulationError(f"items without attribute sets: {missing[:5]}")
    names = {it.id: it.name for it in catalog}
    df = attribute_document_frequency(attrs)
    root = np.random.SeedSequence(rng_seed)
    convs = []
    for item_id, item_seq in zip(sorted(catalog.ids), root.spawn(len(catalog))):
        for replica, seq in enumerate(item_seq.spawn(target_freq)):
            thread_seed, render_seed = seq.spawn(2)
            thread = build_thread(attrs, item_id, thread_seed, item_names=names, _df=df)
            convs.append(
                render_conversation(
                    thread,
                    templates,
                    render_seed,
                    catalog=catalog,
                    attrs=attrs,
                    conv_id=f"sim-{item_id}-{replica}",
                )
            )
    log.info("simulated %d conversations over %d items", len(convs), len(catalog))
    return convs


def write_attributes(path: str | Path, attrs: Mapping[str, AttributeSet]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for item_id in sorted(attrs):
            rec = {"item_id": item_id, "attributes": [[t, s] for t, s in attrs[item_id].ranked_attributes]}
            fh.write(json.dumps(rec) + "\n")


def load_attributes(path: str | Path) -> dict[str, AttributeSet]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                out[rec["item_id"]] = AttributeSet(
                    rec["item_id"], tuple((str(t), float(s)) for t, s in rec["attributes"])
                )
    return out


__all__ = [
    "AttributeSet",
    "ConversationThread",
    "TemplateSet",
    "DEFAULT_TEMPLATES",
    "SimulationError",
    "extract_attributes",
    "build_thread",
    "render_conversation",
    "simulate_balanced_corpus",
    "consistency_violations",
    "thread_is_sound",
    "load_templates",
    "write_templates",
    "load_lexicon",
    "load_attributes",
    "write_attributes",
    "attribute_document_frequency",
]
