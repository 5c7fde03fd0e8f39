"""Item catalogs, conversation datasets and item frequency statistics.

Both file formats are JSON Lines, one record per line::

    catalog.jsonl        {"id", "name", "description", "reviews", "attributes"?}
    conversations.jsonl  {"id", "turns": [{"role", "text", "items", "attributes"}],
                          "target_items", "origin"}
"""
from __future__ import annotations

import json
import re
from collections.abc import Iterable, Iterator, Sequence
from dataclasses import dataclass, field
from pathlib import Path

SEEKER = "seeker"
RECOMMENDER = "recommender"
ROLES = (SEEKER, RECOMMENDER)
ORIGINS = ("real", "simulated")

SPECIAL_TOKENS = ("[CLS]", "[SEP]", "[MASK]", "[ITEM]", "[UNK]")
DEFAULT_TAIL_THRESHOLD = 4

_TOKEN_RE = re.compile(
    r"\[(?:cls|sep|mask|item|unk)\]|[a-z0-9]+(?:'[a-z]+)?|[^\sa-z0-9]",
    re.IGNORECASE,
)


class CorpusError(ValueError):
    """Raised for malformed or inconsistent corpus data."""


def tokenize_text(text: str) -> list[str]:
    """Lowercase and split on whitespace/punctuation, keeping bracketed specials whole."""
    out = []
    for tok in _TOKEN_RE.findall(text):
        if tok.startswith("[") and len(tok) > 1:
            out.append(tok.upper())
        else:
            out.append(tok.lower())
    return out


@dataclass(frozen=True)
class Item:
    id: str
    name: str
    description: str = ""
    reviews: tuple[str, ...] = ()
    attributes: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.id:
            raise CorpusError("item id must be non-empty")
        if not self.name or not self.name.strip():
            raise CorpusError(f"item {self.id!r} has an empty name")

    @property
    def text(self) -> str:
        return " ".join([self.description, *self.reviews]).strip()

    def to_json(self) -> dict:
        rec = {
            "id": self.id,
            "name": self.name,
            "description": self.description,
            "reviews": list(self.reviews),
        }
        if self.attributes:
            rec["attributes"] = list(self.attributes)
        return rec


class ItemCatalog:
    """Ordered, immutable collection of items with unique ids."""

    def __init__(self, items: Iterable[Item]):
        self._items: tuple[Item, ...] = tuple(items)
        self._by_id: dict[str, Item] = {}
        for it in self._items:
            if it.id in self._by_id:
                raise CorpusError(f"duplicate item id {it.id!r}")
            self._by_id[it.id] = it
        self._index = {it.id: k for k, it in enumerate(self._items)}

    def __len__(self) -> int:
        return len(self._items)

    def __iter__(self) -> Iterator[Item]:
        return iter(self._items)

    def __contains__(self, item_id: object) -> bool:
        return item_id in self._by_id

    def __getitem__(self, item_id: str) -> Item:
        return self._by_id[item_id]

    def __eq__(self, other: object) -> bool:
        return isinstance(other, ItemCatalog) and self._items == other._items

    @property
    def ids(self) -> list[str]:
        return [it.id for it in self._items]

    def index_of(self, item_id: str) -> int:
        """Row of ``item_id`` in the item embedding matrix."""
        return self._index[item_id]

    def with_attributes(self, attrs: dict[str, Sequence[str]]) -> ItemCatalog:
        return ItemCatalog(
            Item(it.id, it.name, it.description, it.reviews, tuple(attrs.get(it.id, it.attributes)))
            for it in self._items
        )


@dataclass(frozen=True)
class Utterance:
    role: str
    text: str
    items: tuple[str, ...] = ()
    attributes: tuple[str, ...] = ()

    def __post_init__(self):
        if self.role not in ROLES:
            raise CorpusError(f"unknown role {self.role!r}")
        if not tokenize_text(self.text):
            raise CorpusError("utterance has no tokens")

    @property
    def tokens(self) -> list[str]:
        return tokenize_text(self.text)

    def to_json(self) -> dict:
        return {
            "role": self.role,
            "text": self.text,
            "items": list(self.items),
            "attributes": list(self.attributes),
        }


@dataclass(frozen=True)
class Conversation:
    id: str
    turns: tuple[Utterance, ...]
    target_items: tuple[str, ...] = ()
    origin: str = "real"

    def __post_init__(self):
        if self.origin not in ORIGINS:
            raise CorpusError(f"conversation {self.id!r}: unknown origin {self.origin!r}")

    @property
    def context(self) -> tuple[Utterance, ...]:
        """History preceding the final recommender turn."""
        if self.turns and self.turns[-1].role == RECOMMENDER:
            return self.turns[:-1]
        return self.turns

    @property
    def response(self) -> Utterance | None:
        if self.turns and self.turns[-1].role == RECOMMENDER:
            return self.turns[-1]
        return None

    def with_turns(self, turns: Sequence[Utterance]) -> Conversation:
        return Conversation(self.id, tuple(turns), self.target_items, self.origin)

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "turns": [t.to_json() for t in self.turns],
            "target_items": list(self.target_items),
            "origin": self.origin,
        }


@dataclass(frozen=True)
class CorpusStats:
    n_dialogs: int
    n_utterances: int
    n_items: int

    def __str__(self) -> str:
        return f"dialogs={self.n_dialogs:,} utterances={self.n_utterances:,} items={self.n_items:,}"


@dataclass(frozen=True)
class FrequencyTable:
    counts: dict[str, int]
    tail_threshold: int = DEFAULT_TAIL_THRESHOLD

    def __post_init__(self):
        if self.tail_threshold < 1:
            raise CorpusError("tail_threshold must be a positive integer")

    @property
    def tail_set(self) -> frozenset[str]:
        return frozenset(i for i, c in self.counts.items() if c < self.tail_threshold)

    def with_threshold(self, tail_threshold: int) -> FrequencyTable:
        return FrequencyTable(dict(self.counts), tail_threshold)


# -- reading / writing ------------------------------------------------------


def _read_jsonl(path: str | Path) -> Iterator[tuple[int, dict]]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from None
            if not isinstance(rec, dict):
                raise CorpusError(f"{path}:{lineno}: expected a JSON object")
            yield lineno, rec


def write_jsonl(path: str | Path, records: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(json.dumps(rec, ensure_ascii=False, sort_keys=False))
            fh.write("\n")


def _str_list(rec: dict, key: str, where: str) -> tuple[str, ...]:
    value = rec.get(key, [])
    if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
        raise CorpusError(f"{where}: field {key!r} must be a list of strings")
    return tuple(value)


def parse_item(rec: dict, where: str = "record") -> Item:
    for key in ("id", "name"):
        if not isinstance(rec.get(key), str):
            raise CorpusError(f"{where}: missing or non-string field {key!r}")
    try:
        return Item(
            id=rec["id"],
            name=rec["name"],
            description=str(rec.get("description", "")),
            reviews=_str_list(rec, "reviews", where),
            attributes=_str_list(rec, "attributes", where),
        )
    except CorpusError as exc:
        raise CorpusError(f"{where}: {exc}") from None


def load_catalog(path: str | Path) -> ItemCatalog:
    items = []
    seen: dict[str, int] = {}
    for lineno, rec in _read_jsonl(path):
        item = parse_item(rec, f"{path}:{lineno}")
        if item.id in seen:
            raise CorpusError(
                f"{path}:{lineno}: duplicate item id {item.id!r} (first seen on line {seen[item.id]})"
            )
        seen[item.id] = lineno
        items.append(item)
    return ItemCatalog(items)


def write_catalog(path: str | Path, catalog: ItemCatalog) -> None:
    write_jsonl(path, (it.to_json() for it in catalog))


def validate_conversation(conv: Conversation, catalog: ItemCatalog, *, require_target: bool = True) -> None:
    for k, turn in enumerate(conv.turns):
        expected = ROLES[k % 2]
        if turn.role != expected:
            raise CorpusError(
                f"conversation {conv.id!r}: turn {k} has role {turn.role!r}, expected {expected!r} "
                "(roles must alternate starting with seeker)"
            )
        for item_id in turn.items:
            if item_id not in catalog:
                raise CorpusError(f"conversation {conv.id!r}: unknown item id {item_id!r}")
    for item_id in conv.target_items:
        if item_id not in catalog:
            raise CorpusError(f"conversation {conv.id!r}: unknown item id {item_id!r}")
    if require_target and not conv.target_items:
        raise CorpusError(f"conversation {conv.id!r}: no target items")


def parse_conversation(rec: dict, where: str = "record") -> Conversation:
    if not isinstance(rec.get("id"), str):
        raise CorpusError(f"{where}: missing or non-string field 'id'")
    turns_raw = rec.get("turns")
    if not isinstance(turns_raw, list):
        raise CorpusError(f"{where}: field 'turns' must be a list")
    turns = []
    for k, t in enumerate(turns_raw):
        if not isinstance(t, dict) or not isinstance(t.get("text"), str):
            raise CorpusError(f"{where}: turn {k} is malformed")
        try:
            turns.append(
                Utterance(
                    role=t.get("role"),
                    text=t["text"],
                    items=_str_list(t, "items", where),
                    attributes=_str_list(t, "attributes", where),
                )
            )
        except CorpusError as exc:
            raise CorpusError(f"{where}: turn {k}: {exc}") from None
    try:
        return Conversation(
            id=rec["id"],
            turns=tuple(turns),
            target_items=_str_list(rec, "target_items", where),
            origin=rec.get("origin", "real"),
        )
    except CorpusError as exc:
        raise CorpusError(f"{where}: {exc}") from None


def load_conversations(
    path: str | Path, catalog: ItemCatalog, *, require_target: bool = True
) -> list[Conversation]:
    convs = []
    for lineno, rec in _read_jsonl(path):
        conv = parse_conversation(rec, f"{path}:{lineno}")
        try:
            validate_conversation(conv, catalog, require_target=require_target)
        except CorpusError as exc:
            raise CorpusError(f"{path}:{lineno}: {exc}") from None
        convs.append(conv)
    return convs


def write_conversations(path: str | Path, convs: Iterable[Conversation]) -> None:
    write_jsonl(path, (c.to_json() for c in convs))


# -- statistics --------------------------------------------------------------


def corpus_stats(convs: Sequence[Conversation], catalog: ItemCatalog) -> CorpusStats:
    return CorpusStats(
        n_dialogs=len(convs),
        n_utterances=sum(len(c.turns) for c in convs),
        n_items=len(catalog),
    )


def frequency_table(
    convs: Iterable[Conversation],
    catalog: ItemCatalog,
    tail_threshold: int = DEFAULT_TAIL_THRESHOLD,
) -> FrequencyTable:
    """Count how often each catalog item is mentioned or recommended in ``convs``."""
    counts = dict.fromkeys(catalog.ids, 0)
    for conv in convs:
        for turn in conv.turns:
            for item_id in turn.items:
                counts[item_id] += 1
    return FrequencyTable(counts, tail_threshold)


__all__ = [
    "SEEKER",
    "RECOMMENDER",
    "SPECIAL_TOKENS",
    "DEFAULT_TAIL_THRESHOLD",
    "CorpusError",
    "Item",
    "ItemCatalog",
    "Utterance",
    "Conversation",
    "CorpusStats",
    "FrequencyTable",
    "tokenize_text",
    "load_catalog",
    "write_catalog",
    "load_conversations",
    "write_conversations",
    "validate_conversation",
    "parse_item",
    "parse_conversation",
    "corpus_stats",
    "frequency_table",
]
