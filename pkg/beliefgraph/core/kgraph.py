#!/usr/bin/env python3
"""
Knowledge graph module for the belief-graph laboratory.
Handles discrete and continuous graph representations and the
add/delete update-command language (parse, serialize, apply, diff).
"""

import logging
from dataclasses import dataclass
from typing import FrozenSet, Iterable, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from beliefgraph.core.vocab import BOS, EOS, SEP, Vocab
from beliefgraph.errors import DomainError

logger = logging.getLogger(__name__)

# (head, tail, relation) index triple
Triple = Tuple[int, int, int]
# (head, tail, relation) name triple
NamedTriple = Tuple[str, str, str]

VERBS = ("add", "delete")


@dataclass(frozen=True)
class DiscreteGraph:
    """Set of (head, tail, relation) index triples over a vocabulary"""

    vocab: Vocab
    triples: FrozenSet[Triple] = frozenset()

    def __post_init__(self):
        triples = frozenset((int(h), int(t), int(r)) for h, t, r in self.triples)
        n_ent = len(self.vocab.entities)
        n_rel = self.vocab.num_relations
        for h, t, r in triples:
            if not (0 <= h < n_ent and 0 <= t < n_ent and 0 <= r < n_rel):
                raise DomainError(f"triple {(h, t, r)} outside vocabulary bounds")
        object.__setattr__(self, "triples", triples)

    @classmethod
    def from_names(cls, vocab: Vocab, facts: Iterable[NamedTriple]) -> "DiscreteGraph":
        return cls(vocab, frozenset(
            (vocab.entity_index(h), vocab.entity_index(t), vocab.relation_index(r))
            for h, t, r in facts
        ))

    @classmethod
    def from_list(cls, vocab: Vocab, rows: Iterable[Sequence[int]]) -> "DiscreteGraph":
        return cls(vocab, frozenset(tuple(row) for row in rows))

    def to_list(self) -> List[List[int]]:
        """Sorted index triples, the JSON form of the graph"""
        return [list(t) for t in sorted(self.triples)]

    def named(self) -> List[NamedTriple]:
        ents, rels = self.vocab.entities, self.vocab.relations
        return sorted((ents[h], ents[t], rels[r]) for h, t, r in self.triples)

    def entities(self) -> FrozenSet[int]:
        return frozenset(i for h, t, _ in self.triples for i in (h, t))

    def with_triples(self, triples: Iterable[Triple]) -> "DiscreteGraph":
        return DiscreteGraph(self.vocab, frozenset(triples))

    def __len__(self) -> int:
        return len(self.triples)

    def __iter__(self):
        return iter(sorted(self.triples))

    def __contains__(self, item) -> bool:
        if item and isinstance(item[0], str):
            try:
                item = (self.vocab.entity_index(item[0]), self.vocab.entity_index(item[1]),
                        self.vocab.relation_index(item[2]))
            except DomainError:
                return False
        return tuple(item) in self.triples


@dataclass(frozen=True)
class BeliefGraph:
    """Real adjacency tensor of shape (2R, N, N) with entries in [-1, 1]

    Channels 0..R-1 hold base relations, channel r+R the inverse of
    channel r. An edge head->tail is stored at [r][head][tail].
    """

    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, copy=True)
        if values.ndim != 3 or values.shape[1] != values.shape[2] or values.shape[0] % 2:
            raise DomainError(f"belief tensor must have shape (2R, N, N), got {values.shape}")
        if not np.all(np.isfinite(values)) or np.any(np.abs(values) > 1.0):
            raise DomainError("belief entries must lie in [-1, 1]")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def num_relations(self) -> int:
        return self.values.shape[0] // 2

    @property
    def num_nodes(self) -> int:
        return self.values.shape[1]

    def relation_slice(self, vocab: Vocab, relation: str) -> np.ndarray:
        return self.values[vocab.relation_index(relation)]

    def __eq__(self, other) -> bool:
        return isinstance(other, BeliefGraph) and np.array_equal(self.values, other.values)

    __hash__ = None


class UpdateCommand(NamedTuple):
    """Single add/delete edge command"""

    verb: str
    node1: str
    node2: str
    relation: str

    def tokens(self) -> List[str]:
        return [self.verb] + self.node1.split() + self.node2.split() + [self.relation]


@dataclass(frozen=True)
class CommandSequence:
    """Ordered list of update commands"""

    commands: Tuple[UpdateCommand, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "commands", tuple(UpdateCommand(*c) for c in self.commands))

    def __len__(self) -> int:
        return len(self.commands)

    def __iter__(self):
        return iter(self.commands)

    def canonical(self) -> "CommandSequence":
        """All adds before all deletes, each group sorted by (node1, node2, relation)"""
        key = lambda c: (c.node1, c.node2, c.relation)
        adds = sorted((c for c in self.commands if c.verb == "add"), key=key)
        deletes = sorted((c for c in self.commands if c.verb == "delete"), key=key)
        return CommandSequence(tuple(adds + deletes))


def _split_nodes(middle: Sequence[str], vocab: Vocab) -> Optional[Tuple[str, str]]:
    """Split node tokens into (node1, node2) by longest node1 prefix"""
    for cut in range(len(middle) - 1, 0, -1):
        node1 = " ".join(middle[:cut])
        if not vocab.has_entity(node1):
            continue
        node2 = " ".join(middle[cut:])
        if vocab.has_entity(node2):
            return node1, node2
    return None


def parse_commands(tokens: Sequence[str], vocab: Vocab) -> Tuple[CommandSequence, int]:
    """Decode a command token string

    Args:
        tokens: Token list, normally framed by <s> ... </s>
        vocab: Vocabulary resolving node and relation names

    Returns:
        Tuple of (decoded commands, number of dropped segments)
    """
    tokens = list(tokens)
    if tokens and tokens[0] == BOS:
        tokens = tokens[1:]
    if EOS in tokens:
        tokens = tokens[:tokens.index(EOS)]

    segments: List[List[str]] = [[]]
    for token in tokens:
        if token == SEP:
            segments.append([])
        else:
            segments[-1].append(token)

    commands = []
    dropped = 0
    for segment in segments:
        if not segment:
            continue
        nodes = None
        if len(segment) >= 4 and segment[0] in VERBS and vocab.has_relation(segment[-1]):
            nodes = _split_nodes(segment[1:-1], vocab)
        if nodes is None:
            dropped += 1
            logger.debug("dropped unparsable command segment: %s", " ".join(segment))
            continue
        commands.append(UpdateCommand(segment[0], nodes[0], nodes[1], segment[-1]))
    return CommandSequence(tuple(commands)), dropped


def serialize_commands(seq: CommandSequence, vocab: Vocab, canonical: bool = True) -> List[str]:
    """Encode commands as a token string

    Args:
        seq: Commands to encode
        vocab: Vocabulary the names must resolve in
        canonical: Apply canonical ordering first (otherwise keep the given order)

    Returns:
        Token list "<s> cmd <|> cmd ... </s>"
    """
    for cmd in seq:
        if cmd.verb not in VERBS:
            raise DomainError(f"unknown verb: {cmd.verb!r}")
        vocab.entity_index(cmd.node1)
        vocab.entity_index(cmd.node2)
        vocab.relation_index(cmd.relation)
    if canonical:
        seq = seq.canonical()
    tokens = [BOS]
    for k, cmd in enumerate(seq):
        if k:
            tokens.append(SEP)
        tokens.extend(cmd.tokens())
    tokens.append(EOS)
    return tokens


def apply_commands(g: DiscreteGraph, seq: CommandSequence) -> DiscreteGraph:
    """Apply commands in order; deleting a missing edge is ignored"""
    vocab = g.vocab
    triples = set(g.triples)
    for cmd in seq:
        triple = (vocab.entity_index(cmd.node1), vocab.entity_index(cmd.node2),
                  vocab.relation_index(cmd.relation))
        if cmd.verb == "add":
            triples.add(triple)
        elif cmd.verb == "delete":
            triples.discard(triple)
        else:
            raise DomainError(f"unknown verb: {cmd.verb!r}")
    return g.with_triples(triples)


def diff_to_commands(g_prev: DiscreteGraph, g_next: DiscreteGraph) -> CommandSequence:
    """Commands turning g_prev into g_next, in canonical order"""
    if g_prev.vocab != g_next.vocab:
        raise DomainError("graphs are defined over different vocabularies")
    ents, rels = g_prev.vocab.entities, g_prev.vocab.relations
    commands = [UpdateCommand("add", ents[h], ents[t], rels[r])
                for h, t, r in g_next.triples - g_prev.triples]
    commands += [UpdateCommand("delete", ents[h], ents[t], rels[r])
                 for h, t, r in g_prev.triples - g_next.triples]
    return CommandSequence(tuple(commands)).canonical()


def half_to_full(h2: np.ndarray) -> np.ndarray:
    """Stack base channels with their transposes along the channel axis"""
    return np.concatenate([h2, np.swapaxes(h2, -1, -2)], axis=-3)


def from_half_tensor(h2: np.ndarray) -> BeliefGraph:
    """Build a belief graph from R base channels

    Args:
        h2: Array of shape (R, N, N) with entries in [-1, 1]

    Returns:
        BeliefGraph with forced transpose channels
    """
    h2 = np.asarray(h2)
    if h2.ndim != 3 or h2.shape[1] != h2.shape[2]:
        raise DomainError(f"half tensor must have shape (R, N, N), got {h2.shape}")
    if not np.all(np.isfinite(h2)) or np.any(np.abs(h2) > 1.0):
        raise DomainError("half tensor entries must lie in [-1, 1]")
    return BeliefGraph(half_to_full(h2))


def to_dense(g: DiscreteGraph, dtype=np.float32) -> BeliefGraph:
    """Binary adjacency tensor of a discrete graph (1.0 on the edge and its inverse)"""
    vocab = g.vocab
    n_rel, n = vocab.num_relations, vocab.capacity
    values = np.zeros((2 * n_rel, n, n), dtype=dtype)
    for h, t, r in g.triples:
        values[r, h, t] = 1.0
        values[r + n_rel, t, h] = 1.0
    return BeliefGraph(values)
