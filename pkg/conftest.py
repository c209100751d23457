#!/usr/bin/env python3
"""
Shared test fixtures for the belief-graph laboratory.
"""

import numpy as np
import pytest

from beliefgraph.config import ModelConfig
from beliefgraph.core.corpus import group_episodes
from beliefgraph.core.vocab import Vocab
from beliefgraph.core.worldgen import build_word_vocab, collect_transitions, generate_game


@pytest.fixture(scope="session")
def vocab():
    return Vocab()


@pytest.fixture(scope="session")
def wvocab(vocab):
    return build_word_vocab(vocab)


@pytest.fixture
def tiny_config():
    return ModelConfig(hidden=8, word_dim=8, node_dim=8, relation_dim=4, graph_layers=1, bases=2,
                       conv_layers=1, kernel=3, decoder_max_len=20, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def level1_games():
    return [generate_game(1, seed) for seed in range(3)]


@pytest.fixture(scope="session")
def small_episodes(level1_games, vocab):
    return group_episodes(collect_transitions(level1_games, 0.0, 0, vocab))
