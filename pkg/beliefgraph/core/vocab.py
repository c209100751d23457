#!/usr/bin/env python3
"""
Vocabulary module for the belief-graph laboratory.
Handles the entity/relation vocabulary of knowledge graphs and the word
vocabulary used by the text models.
"""

import hashlib
import re
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Sequence, Tuple

from beliefgraph.errors import DomainError

RELATION_NAMES: Tuple[str, ...] = (
    "north_of", "south_of", "east_of", "west_of",
    "at", "in", "on", "is", "part_of", "needs",
)

ROOMS: Tuple[str, ...] = (
    "kitchen", "pantry", "corridor", "living room", "bedroom",
    "bathroom", "backyard", "garden", "shed",
)
FURNITURE: Tuple[str, ...] = (
    "fridge", "counter", "table", "stove", "oven", "bbq", "shelf",
    "toolbox", "workbench",
)
DOORS: Tuple[str, ...] = ("wooden door", "screen door", "sliding door")
INGREDIENTS: Tuple[str, ...] = (
    "carrot", "red apple", "yellow potato", "white onion",
    "red hot pepper", "purple potato", "block of cheese",
)
STATE_WORDS: Tuple[str, ...] = (
    "open", "closed", "sliced", "diced", "chopped", "fried", "roasted",
    "grilled",
)

ENTITY_NAMES: Tuple[str, ...] = (
    ("player",) + ROOMS + ("cookbook", "meal", "knife") + FURNITURE
    + DOORS + INGREDIENTS + STATE_WORDS
)

# Special tokens of the word vocabulary
PAD = "<pad>"
UNK = "<unk>"
BOS = "<s>"
EOS = "</s>"
SEP = "<|>"
SPECIAL_TOKENS: Tuple[str, ...] = (PAD, UNK, BOS, EOS, SEP)

_PUNCTUATION = re.compile(r"([.,!?;:\"()])")


def tokenize(text: str) -> List[str]:
    """Lowercase and split on whitespace after isolating punctuation

    Args:
        text: Raw text

    Returns:
        List of tokens
    """
    return _PUNCTUATION.sub(r" \1 ", text).lower().split()


@dataclass(frozen=True)
class Vocab:
    """Entity and relation vocabulary of the knowledge graphs"""

    entities: Tuple[str, ...] = ENTITY_NAMES
    relations: Tuple[str, ...] = RELATION_NAMES
    capacity: int = 40
    _entity_index: Dict[str, int] = field(init=False, repr=False, compare=False)
    _relation_index: Dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        entities = tuple(self.entities)
        relations = tuple(self.relations)
        object.__setattr__(self, "entities", entities)
        object.__setattr__(self, "relations", relations)
        if len(set(entities)) != len(entities):
            raise DomainError("entity names must be unique")
        if len(set(relations)) != len(relations):
            raise DomainError("relation names must be unique")
        if len(relations) != len(RELATION_NAMES):
            raise DomainError(f"expected {len(RELATION_NAMES)} base relations, got {len(relations)}")
        if len(entities) > self.capacity:
            raise DomainError(f"{len(entities)} entities exceed capacity {self.capacity}")
        object.__setattr__(self, "_entity_index", {n: i for i, n in enumerate(entities)})
        object.__setattr__(self, "_relation_index", {n: i for i, n in enumerate(relations)})

    @property
    def num_relations(self) -> int:
        return len(self.relations)

    def entity_index(self, name: str) -> int:
        try:
            return self._entity_index[name]
        except KeyError:
            raise DomainError(f"unknown entity: {name!r}") from None

    def relation_index(self, name: str) -> int:
        try:
            return self._relation_index[name]
        except KeyError:
            raise DomainError(f"unknown relation: {name!r}") from None

    def has_entity(self, name: str) -> bool:
        return name in self._entity_index

    def has_relation(self, name: str) -> bool:
        return name in self._relation_index

    def channel_labels(self) -> List[List[str]]:
        """Word labels of the 2R adjacency channels (inverse channels get 'reverse')"""
        base = [name.split("_") for name in self.relations]
        return base + [words + ["reverse"] for words in base]

    def fingerprint(self) -> str:
        """Stable hash identifying this vocabulary"""
        payload = "\n".join(self.entities) + "\x00" + "\n".join(self.relations) + f"\x00{self.capacity}"
        return hashlib.sha1(payload.encode("utf-8")).hexdigest()


class WordVocab:
    """Class for mapping text tokens to embedding indices"""

    def __init__(self, words: Iterable[str]):
        """Initialize the word vocabulary

        Args:
            words: Tokens to include; special tokens are always placed first
        """
        rest = sorted(set(words) - set(SPECIAL_TOKENS))
        self.words: List[str] = list(SPECIAL_TOKENS) + rest
        self.index: Dict[str, int] = {w: i for i, w in enumerate(self.words)}

    def __len__(self) -> int:
        return len(self.words)

    def __eq__(self, other) -> bool:
        return isinstance(other, WordVocab) and self.words == other.words

    @property
    def pad_id(self) -> int:
        return self.index[PAD]

    @property
    def unk_id(self) -> int:
        return self.index[UNK]

    @property
    def bos_id(self) -> int:
        return self.index[BOS]

    @property
    def eos_id(self) -> int:
        return self.index[EOS]

    def encode(self, tokens: Sequence[str]) -> List[int]:
        unk = self.unk_id
        return [self.index.get(t, unk) for t in tokens]

    def decode(self, ids: Iterable[int]) -> List[str]:
        return [self.words[int(i)] for i in ids]
