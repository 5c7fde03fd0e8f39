from __future__ import annotations

import re
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field

from ..corpus import SPECIAL_TOKENS, Conversation, ItemCatalog, Utterance, tokenize_text

CLS, SEP, MASK, ITEM, UNK = SPECIAL_TOKENS


def item_token(item_id: str) -> str:
    return "@" + item_id


def name_pattern(names: Iterable[str]) -> re.Pattern | None:
    """Case-insensitive alternation over ``names``, longest first."""
    uniq = sorted({n for n in names if n.strip()}, key=lambda n: (-len(n), n))
    if not uniq:
        return None
    return re.compile("|".join(re.escape(n) for n in uniq), re.IGNORECASE)


def split_on_names(text: str, pattern: re.Pattern | None) -> list[tuple[str, str | None]]:
    """Split ``text`` into (chunk, matched_name) pieces; plain chunks have ``None``."""
    if pattern is None:
        return [(text, None)]
    out, pos = [], 0
    for m in pattern.finditer(text):
        if m.start() > pos:
            out.append((text[pos : m.start()], None))
        out.append((m.group(0), m.group(0)))
        pos = m.end()
    if pos < len(text):
        out.append((text[pos:], None))
    return out


def template_tokens(text: str, names: Iterable[str]) -> list[str]:
    """Tokens of ``text`` with every item name replaced by ``[ITEM]``."""
    out = []
    for chunk, name in split_on_names(text, name_pattern(names)):
        out.extend([ITEM] if name is not None else tokenize_text(chunk))
    return out


@dataclass
class Vocabulary:
    """Token to id map. Specials first, then one entity token per item, then words."""

    tokens: list[str]
    item_names: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        self.index = {t: k for k, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")
        for s in SPECIAL_TOKENS:
            if s not in self.index:
                raise ValueError(f"vocabulary lacks special token {s}")
        self._name_to_item = {}
        for item_id, name in self.item_names.items():
            self._name_to_item.setdefault(name.lower(), item_id)
        self._pattern = name_pattern(self.item_names.values())

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Vocabulary) and self.tokens == other.tokens and self.item_names == other.item_names

    def id(self, token: str) -> int:
        return self.index.get(token, self.index[UNK])

    @property
    def cls_id(self) -> int:
        return self.index[CLS]

    @property
    def sep_id(self) -> int:
        return self.index[SEP]

    @property
    def mask_id(self) -> int:
        return self.index[MASK]

    @property
    def item_slot_id(self) -> int:
        return self.index[ITEM]

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self.id(t) for t in tokens]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.tokens[i] for i in ids]

    def item_for_name(self, name: str) -> str | None:
        return self._name_to_item.get(name.lower())

    def find_items(self, text: str) -> list[str]:
        """Catalog items whose names occur in ``text``."""
        found = []
        for _, name in split_on_names(text, self._pattern):
            if name is not None:
                item_id = self.item_for_name(name)
                if item_id is not None and item_id not in found:
                    found.append(item_id)
        return found

    def utterance_tokens(self, utt: Utterance) -> tuple[list[str], list[bool]]:
        """Tokens of one utterance with item names as entity tokens.

        The flag list marks item and attribute tokens (the maskable ones).
        """
        names = [self.item_names[i] for i in utt.items if i in self.item_names]
        attr_words = {w for a in utt.attributes for w in tokenize_text(a) if w[0].isalnum()}
        toks, flags = [], []
        for chunk, name in split_on_names(utt.text, name_pattern(names)):
            if name is not None:
                item_id = next((i for i in utt.items if self.item_names.get(i, "").lower() == name.lower()), None)
                if item_id is not None:
                    toks.append(item_token(item_id))
                    flags.append(True)
                    continue
            for t in tokenize_text(chunk):
                toks.append(t)
                flags.append(t in attr_words)
        return toks, flags

    @classmethod
    def build(cls, corpora: Iterable[Iterable[Conversation]], catalog: ItemCatalog) -> Vocabulary:
        names = {it.id: it.name for it in catalog}
        proto = cls(list(SPECIAL_TOKENS), names)
        words: set[str] = set()
        for convs in corpora:
            for conv in convs:
                for utt in conv.turns:
                    toks, _ = proto.utterance_tokens(utt)
                    words.update(toks)
                    words.update(template_tokens(utt.text, [names[i] for i in utt.items if i in names]))
        entity = [item_token(i) for i in catalog.ids]
        rest = sorted(words - set(SPECIAL_TOKENS) - set(entity))
        return cls(list(SPECIAL_TOKENS) + entity + rest, names)

    def to_json(self) -> dict:
        return {"tokens": self.tokens, "item_names": self.item_names}

    @classmethod
    def from_json(cls, rec: Mapping) -> Vocabulary:
        return cls(list(rec["tokens"]), dict(rec["item_names"]))
