"""A small synthetic movie world with popularity-skewed dialogues.

Every item has a latent attribute signature (genre, mood, era and two lead
actors). Descriptions wrap the signature in filler words shared by every
item, so the filler carries zero inverse document frequency. Dialogue
targets follow a finite Zipf law over a random popularity ranking, which
gives the long-tailed target distribution the fine-tuning stage has to fight.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import RECOMMENDER, SEEKER, Conversation, Item, ItemCatalog, Utterance

GENRES = ("comedy", "drama", "horror", "western", "musical", "thriller", "romance", "scifi")
MOODS = ("gritty", "uplifting", "dark", "quirky", "tender", "tense")
ERAS = ("fifties", "sixties", "seventies", "eighties", "nineties")
ACTORS = (
    "roberts", "gere", "hanks", "streep", "pacino", "keaton", "hepburn", "stewart", "bogart", "bacall",
    "newman", "redford", "fonda", "dunaway", "nicholson", "foster", "freeman", "weaver", "caine", "close",
    "olivier", "leigh", "brando", "kelly",
)
TITLE_A = ("silent", "golden", "broken", "hidden", "last", "crimson", "midnight", "lonely", "wild", "paper")
TITLE_B = ("river", "garden", "station", "letter", "harbor", "mountain", "promise", "season", "mirror", "road")

SEEKER_LINES = (
    "I am in the mood for something {a}.",
    "Can you suggest a {a} movie?",
    "I really like films with {a}.",
    "Maybe something {a} would be nice.",
    "Ideally it should be {a} too.",
)
ASK_LINES = (
    "Sure, anything else you care about?",
    "Got it. What else do you like?",
    "Okay, tell me more.",
    "Interesting choice, any other preference?",
)
FINAL_LINES = (
    "I recommend {n}.",
    "You should watch {n}.",
    "How about {n}?",
    "Then {n} is a great pick.",
)


@dataclass(frozen=True)
class SyntheticWorld:
    catalog: ItemCatalog
    conversations: list[Conversation]
    popularity: dict[str, float]

    @property
    def lexicon(self) -> frozenset[str]:
        return frozenset(a for it in self.catalog for a in it.attributes)


def make_catalog(n_items: int = 50, rng_seed: int = 0) -> ItemCatalog:
    """Items with distinct (genre, mood, era, actor, actor) signatures."""
    rng = np.random.default_rng(rng_seed)
    if n_items > len(TITLE_A) * len(TITLE_B):
        raise ValueError(f"at most {len(TITLE_A) * len(TITLE_B)} synthetic items")
    titles = rng.permutation(len(TITLE_A) * len(TITLE_B))[:n_items]
    seen, items = set(), []
    while len(items) < n_items:
        sig = (
            GENRES[rng.integers(len(GENRES))],
            MOODS[rng.integers(len(MOODS))],
            ERAS[rng.integers(len(ERAS))],
            *sorted(ACTORS[j] for j in rng.choice(len(ACTORS), size=2, replace=False)),
        )
        if sig in seen:
            continue
        seen.add(sig)
        k = len(items)
        t = int(titles[k])
        year = 1950 + 10 * ERAS.index(sig[2]) + int(rng.integers(10))
        genre, mood, era, a1, a2 = sig
        items.append(
            Item(
                id=f"m{k:03d}",
                name=f"The {TITLE_A[t // len(TITLE_B)].title()} {TITLE_B[t % len(TITLE_B)].title()} ({year})",
                description=f"A {mood} {genre} film from the {era} starring {a1} and {a2}.",
                reviews=(f"This {genre} film with {a1} is {mood} and the story is set in the {era}.",),
                attributes=sig,
            )
        )
    return ItemCatalog(items)


def zipf_weights(n: int, exponent: float) -> np.ndarray:
    w = np.arange(1, n + 1, dtype=np.float64) ** -exponent
    return w / w.sum()


def _phrase(attr: str) -> str:
    return attr if attr not in ACTORS else f"{attr} in it"


def make_conversations(
    catalog: ItemCatalog,
    n_conversations: int = 400,
    exponent: float = 1.2,
    rng_seed: int = 0,
    n_clues: tuple[int, int] = (2, 3),
) -> tuple[list[Conversation], dict[str, float]]:
    """Seeker turns reveal a few of the target's attributes; the last turn names it."""
    rng = np.random.default_rng(rng_seed)
    ids = catalog.ids
    ranking = rng.permutation(len(ids))
    p = zipf_weights(len(ids), exponent)
    popularity = {ids[r]: float(p[k]) for k, r in enumerate(ranking)}
    probs = np.array([popularity[i] for i in ids])
    convs = []
    for c in range(n_conversations):
        target = ids[int(rng.choice(len(ids), p=probs))]
        attrs = list(catalog[target].attributes)
        n = int(rng.integers(n_clues[0], n_clues[1] + 1))
        clues = [attrs[j] for j in rng.choice(len(attrs), size=n, replace=False)]
        turns = []
        for j, a in enumerate(clues):
            turns.append(Utterance(SEEKER, SEEKER_LINES[rng.integers(len(SEEKER_LINES))].format(a=_phrase(a)),
                                   attributes=(a,)))
            if j < len(clues) - 1:
                turns.append(Utterance(RECOMMENDER, ASK_LINES[rng.integers(len(ASK_LINES))]))
        name = catalog[target].name
        turns.append(Utterance(RECOMMENDER, FINAL_LINES[rng.integers(len(FINAL_LINES))].format(n=name),
                               items=(target,)))
        convs.append(Conversation(f"real-{c:04d}", tuple(turns), (target,), "real"))
    return convs, popularity


def make_world(
    n_items: int = 50, n_conversations: int = 400, exponent: float = 1.2, rng_seed: int = 0
) -> SyntheticWorld:
    cat_seed, conv_seed = np.random.SeedSequence(rng_seed).spawn(2)
    catalog = make_catalog(n_items, int(cat_seed.generate_state(1)[0]))
    convs, pop = make_conversations(catalog, n_conversations, exponent, int(conv_seed.generate_state(1)[0]))
    return SyntheticWorld(catalog, convs, pop)


def split(convs: list[Conversation], test_fraction: float = 0.2, rng_seed: int = 0):
    """Random train/test split; returns (train, test) preserving original order within each."""
    if not 0 < test_fraction < 1:
        raise ValueError("test_fraction must lie in (0, 1)")
    rng = np.random.default_rng(rng_seed)
    n_test = int(round(len(convs) * test_fraction))
    test_idx = set(rng.permutation(len(convs))[:n_test].tolist())
    train = [c for k, c in enumerate(convs) if k not in test_idx]
    test = [c for k, c in enumerate(convs) if k in test_idx]
    return train, test


__all__ = ["SyntheticWorld", "make_catalog", "make_conversations", "make_world", "split", "zipf_weights"]
