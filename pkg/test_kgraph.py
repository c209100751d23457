#!/usr/bin/env python3
"""
Tests for graphs and the update-command language.
"""

import numpy as np
import pytest

from beliefgraph.core.kgraph import (
    BeliefGraph, CommandSequence, DiscreteGraph, UpdateCommand, apply_commands, diff_to_commands,
    from_half_tensor, parse_commands, serialize_commands, to_dense,
)
from beliefgraph.errors import DomainError

TRANSITION_COMMANDS = CommandSequence((
    ("add", "player", "shed", "at"),
    ("add", "shed", "backyard", "west_of"),
    ("add", "wooden door", "shed", "east_of"),
    ("add", "toolbox", "shed", "in"),
    ("add", "toolbox", "closed", "is"),
    ("add", "workbench", "shed", "in"),
    ("delete", "player", "backyard", "at"),
))
TRANSITION_TEXT = (
    "<s> add player shed at <|> add shed backyard west_of <|> add wooden door shed east_of <|> "
    "add toolbox shed in <|> add toolbox closed is <|> add workbench shed in <|> "
    "delete player backyard at </s>"
)


def random_graph(vocab, rng, size):
    n_ent, n_rel = len(vocab.entities), vocab.num_relations
    return DiscreteGraph(vocab, frozenset(
        (int(rng.integers(n_ent)), int(rng.integers(n_ent)), int(rng.integers(n_rel))) for _ in range(size)
    ))


def test_parse_two_commands(vocab):
    tokens = "<s> add player shed at <|> delete player backyard at </s>".split()
    seq, dropped = parse_commands(tokens, vocab)
    assert dropped == 0
    assert list(seq) == [UpdateCommand("add", "player", "shed", "at"),
                         UpdateCommand("delete", "player", "backyard", "at")]


def test_parse_multi_token_node(vocab):
    seq, _ = parse_commands("<s> add wooden door shed east_of </s>".split(), vocab)
    assert list(seq) == [UpdateCommand("add", "wooden door", "shed", "east_of")]


def test_parse_empty_and_truncated(vocab):
    assert len(parse_commands(["<s>", "</s>"], vocab)[0]) == 0
    seq, dropped = parse_commands("<s> add player kitchen at <|> add red".split(), vocab)
    assert list(seq) == [UpdateCommand("add", "player", "kitchen", "at")]
    assert dropped == 1


def test_parse_drops_garbage_segments(vocab):
    seq, dropped = parse_commands("<s> jump player kitchen at <|> add nowhere kitchen at <|> </s>".split(), vocab)
    assert len(seq) == 0
    assert dropped == 2


def test_transition_serializes_in_given_order(vocab):
    tokens = serialize_commands(TRANSITION_COMMANDS, vocab, canonical=False)
    assert " ".join(tokens) == TRANSITION_TEXT


def test_canonical_order_puts_adds_first_sorted(vocab):
    shuffled = CommandSequence(tuple(reversed(TRANSITION_COMMANDS.commands)))
    tokens = serialize_commands(shuffled, vocab)
    text = " ".join(tokens)
    assert text.index("delete") > text.rindex("add ")
    seq, _ = parse_commands(tokens, vocab)
    adds = [(c.node1, c.node2, c.relation) for c in seq if c.verb == "add"]
    assert adds == sorted(adds)
    assert seq == TRANSITION_COMMANDS.canonical()


def test_serialize_empty(vocab):
    assert serialize_commands(CommandSequence(), vocab) == ["<s>", "</s>"]


def test_serialize_rejects_unknown_names(vocab):
    with pytest.raises(DomainError):
        serialize_commands(CommandSequence((("add", "dragon", "kitchen", "at"),)), vocab)
    with pytest.raises(DomainError):
        serialize_commands(CommandSequence((("add", "player", "kitchen", "under"),)), vocab)


def test_parse_serialize_round_trip(vocab, rng):
    for _ in range(500):
        g, h = random_graph(vocab, rng, 4), random_graph(vocab, rng, 4)
        seq = diff_to_commands(g, h)
        parsed, dropped = parse_commands(serialize_commands(seq, vocab), vocab)
        assert dropped == 0
        assert parsed == seq.canonical()
        assert serialize_commands(parsed, vocab) == serialize_commands(seq, vocab)


def test_apply_ignores_missing_delete(vocab):
    g = DiscreteGraph.from_names(vocab, [("carrot", "fridge", "in")])
    out = apply_commands(g, CommandSequence((("delete", "knife", "table", "on"),)))
    assert out == g


def test_apply_is_idempotent(vocab):
    seq = CommandSequence((("add", "player", "shed", "at"), ("add", "player", "shed", "at")))
    once = apply_commands(DiscreteGraph(vocab), seq)
    assert once.named() == [("player", "shed", "at")]
    assert apply_commands(once, seq) == once


def test_diff_round_trip(vocab, rng):
    for _ in range(1000):
        g, h = random_graph(vocab, rng, int(rng.integers(0, 6))), random_graph(vocab, rng, int(rng.integers(0, 6)))
        assert apply_commands(g, diff_to_commands(g, h)) == h


def test_diff_location_change(vocab):
    g = DiscreteGraph.from_names(vocab, [("player", "backyard", "at")])
    h = DiscreteGraph.from_names(vocab, [("player", "shed", "at")])
    assert list(diff_to_commands(g, h)) == [UpdateCommand("add", "player", "shed", "at"),
                                             UpdateCommand("delete", "player", "backyard", "at")]
    assert len(diff_to_commands(g, g)) == 0


def test_discrete_graph_bounds(vocab):
    with pytest.raises(DomainError):
        DiscreteGraph(vocab, frozenset({(0, 0, 99)}))
    g = DiscreteGraph.from_names(vocab, [("carrot", "fridge", "in")])
    assert ("carrot", "fridge", "in") in g
    assert ("dragon", "fridge", "in") not in g
    assert DiscreteGraph.from_list(vocab, g.to_list()) == g


def test_from_half_tensor_transposes(vocab, rng):
    h2 = rng.uniform(-1, 1, size=(vocab.num_relations, 6, 6))
    belief = from_half_tensor(h2)
    r = vocab.num_relations
    for c in range(r):
        assert np.array_equal(belief.values[c + r], belief.values[c].T)
    zero = from_half_tensor(np.zeros((r, 3, 3)))
    assert not zero.values.any()
    point = np.zeros((r, 3, 3))
    point[2, 0, 1] = 0.3
    assert from_half_tensor(point).values[2 + r, 1, 0] == pytest.approx(0.3)


def test_belief_range_checked(vocab):
    with pytest.raises(DomainError):
        from_half_tensor(np.full((vocab.num_relations, 2, 2), 1.5))
    with pytest.raises(DomainError):
        BeliefGraph(np.zeros((3, 2, 2)))


def test_belief_is_read_only():
    belief = BeliefGraph(np.zeros((2, 2, 2)))
    with pytest.raises(ValueError):
        belief.values[0, 0, 0] = 1.0


def test_to_dense(vocab, rng):
    assert not to_dense(DiscreteGraph(vocab)).values.any()
    one = to_dense(DiscreteGraph.from_names(vocab, [("carrot", "kitchen", "at")]))
    assert np.count_nonzero(one.values) == 2
    g, h = random_graph(vocab, rng, 5), random_graph(vocab, rng, 5)
    assert to_dense(apply_commands(g, diff_to_commands(g, h))) == to_dense(h)
    values = to_dense(h).values
    r = vocab.num_relations
    assert all(np.array_equal(values[c + r], values[c].T) for c in range(r))
