#!/usr/bin/env python3
"""
Updater module for the belief-graph laboratory.
Handles the recurrent continuous graph updater and the heads it is
pretrained with (observation generation, contrastive discrimination),
the command-generation discrete updater and the recurrent text model.
"""

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from beliefgraph.config import ModelConfig
from beliefgraph.core.kgraph import (
    BeliefGraph, DiscreteGraph, apply_commands, parse_commands, to_dense,
)
from beliefgraph.core.vocab import Vocab, WordVocab
from beliefgraph.models.decoder import DecoderModel, Memory, greedy_decode
from beliefgraph.models.encoders import Aggregator, GraphEncoder, TextEncoder, pad_batch
from beliefgraph.nn.layers import MLP, Embedding, GRUCell, Module, Parameter, uniform_init
from beliefgraph.nn.tensor import Tensor, as_tensor, concat, masked_mean, no_grad

logger = logging.getLogger(__name__)

# Action paired with the first observation of an episode
RESTART = ("restart",)


def word_embedding(config: ModelConfig, wvocab: WordVocab, rng: np.random.Generator) -> Embedding:
    words = Embedding(len(wvocab), config.word_dim, rng)
    if config.word_vectors:
        words.load_vectors(config.word_vectors, wvocab.words, freeze=True)
    return words


@dataclass(frozen=True)
class UpdaterState:
    """Recurrent memory h_t and the belief graph decoded from it"""

    h: np.ndarray
    belief: BeliefGraph


class GraphUpdater(Module):
    """Class for maintaining a continuous belief graph from text"""

    def __init__(self, config: ModelConfig, vocab: Vocab, wvocab: WordVocab, rng: np.random.Generator):
        """Initialize the graph updater

        Args:
            config: Model dimensions
            vocab: Entity and relation vocabulary
            wvocab: Word vocabulary
            rng: Parameter initializer
        """
        self.vocab = vocab
        self.wvocab = wvocab
        self.hidden = config.hidden
        self.num_relations = vocab.num_relations
        self.num_nodes = vocab.capacity
        self.words = word_embedding(config, wvocab, rng)
        self.text_encoder = TextEncoder(config, self.words, rng)
        self.graph_encoder = GraphEncoder(config, vocab, wvocab, self.words, rng)
        self.aggregator = Aggregator(config.hidden, rng)
        self.rnn = GRUCell(4 * config.hidden, config.hidden, rng)
        size = self.num_relations * self.num_nodes * self.num_nodes
        self.f_d = MLP([config.hidden, config.hidden, size], rng)

    def f_delta(self, h_graph: Tensor, h_obs: Tensor, obs_mask: np.ndarray,
                h_action: Tensor, action_mask: np.ndarray) -> Tensor:
        """Graph-change summary from the previous graph and the new text

        Args:
            h_graph: Node representations of the previous belief (B, N, H)
            h_obs: Observation token representations (B, Lo, H)
            obs_mask: (B, Lo)
            h_action: Action token representations (B, La, H)
            action_mask: (B, La)

        Returns:
            Tensor (B, 4H)
        """
        obs = self.aggregator(h_obs, obs_mask, h_graph)
        act = self.aggregator(h_action, action_mask, h_graph)
        return concat([
            masked_mean(obs.text_by_graph, obs_mask),
            obs.graph_by_text.mean(axis=1),
            masked_mean(act.text_by_graph, action_mask),
            act.graph_by_text.mean(axis=1),
        ], axis=-1)

    def decode_belief(self, h: Tensor) -> Tensor:
        """Belief tensor (B, 2R, N, N) with inverse channels forced to the transposes"""
        b = h.shape[0]
        half = self.f_d(h).tanh().reshape(b, self.num_relations, self.num_nodes, self.num_nodes)
        return concat([half, half.swapaxes(-1, -2)], axis=1)

    def initial(self, batch: int) -> Tuple[Tensor, Tensor]:
        h = Tensor(np.zeros((batch, self.hidden)))
        return h, self.decode_belief(h)

    def step(self, h: Tensor, belief: Tensor, obs_ids: np.ndarray, obs_mask: np.ndarray,
             action_ids: np.ndarray, action_mask: np.ndarray) -> Tuple[Tensor, Tensor]:
        """One belief update

        Returns:
            Tuple of (h_t (B, H), belief_t (B, 2R, N, N))
        """
        h_next, belief_next, _ = self.step_with_action(h, belief, obs_ids, obs_mask, action_ids, action_mask)
        return h_next, belief_next

    def step_with_action(self, h: Tensor, belief: Tensor, obs_ids: np.ndarray, obs_mask: np.ndarray,
                         action_ids: np.ndarray, action_mask: np.ndarray) -> Tuple[Tensor, Tensor, Tensor]:
        """Same as step, also returning the action token representations"""
        h_graph = self.graph_encoder(belief)
        h_obs = self.text_encoder(obs_ids, obs_mask)
        h_action = self.text_encoder(action_ids, action_mask)
        h_next = self.rnn(self.f_delta(h_graph, h_obs, obs_mask, h_action, action_mask), as_tensor(h))
        return h_next, self.decode_belief(h_next), h_action

    def initial_state(self) -> UpdaterState:
        with no_grad():
            h, belief = self.initial(1)
        return UpdaterState(h.data[0].copy(), BeliefGraph(belief.data[0]))

    def update_belief(self, state: UpdaterState, obs_tokens: Sequence[str],
                      action_tokens: Sequence[str]) -> UpdaterState:
        """Fold one (action, observation) pair into the belief, without gradients"""
        obs_ids, obs_mask = pad_batch(self.wvocab, [list(obs_tokens)])
        act_ids, act_mask = pad_batch(self.wvocab, [list(action_tokens)])
        with no_grad():
            h, belief = self.step(Tensor(state.h[None]), Tensor(state.belief.values[None]),
                                  obs_ids, obs_mask, act_ids, act_mask)
        return UpdaterState(h.data[0].copy(), BeliefGraph(belief.data[0]))


class ObservationGenerator(Module):
    """Graph updater paired with a decoder that reconstructs observations"""

    role = "updater-og"

    def __init__(self, config: ModelConfig, vocab: Vocab, wvocab: WordVocab, rng: np.random.Generator):
        self.updater = GraphUpdater(config, vocab, wvocab, rng)
        self.decoder = DecoderModel(config, len(wvocab), self.updater.words, rng)

    def memories(self, belief: Tensor, h_action: Tensor, action_mask: np.ndarray) -> List[Memory]:
        h_graph = self.updater.graph_encoder(belief)
        return [(h_graph, np.ones(h_graph.shape[:2])), (h_action, action_mask)]


class Discriminator(Module):
    """Bilinear score between pooled text and pooled graph representations"""

    def __init__(self, hidden: int, rng: np.random.Generator):
        self.weight = Parameter(uniform_init(rng, hidden, (hidden, hidden)))
        self.bias = Parameter(np.zeros(1))

    def forward(self, text: Tensor, graph: Tensor) -> Tensor:
        """Logits (B,); the probability of a true pair is their sigmoid"""
        return ((text @ self.weight) * graph).sum(axis=-1) + self.bias


class ContrastiveModel(Module):
    """Graph updater paired with a true/corrupted observation discriminator"""

    role = "updater-coc"

    def __init__(self, config: ModelConfig, vocab: Vocab, wvocab: WordVocab, rng: np.random.Generator):
        self.updater = GraphUpdater(config, vocab, wvocab, rng)
        self.discriminator = Discriminator(config.hidden, rng)

    def pooled_graph(self, belief: Tensor) -> Tensor:
        return self.updater.graph_encoder(belief).mean(axis=1)

    def score(self, graph: Tensor, obs_ids: np.ndarray, obs_mask: np.ndarray) -> Tensor:
        """Logits (B,) that each observation belongs with its pooled graph (B, H)"""
        text = masked_mean(self.updater.text_encoder(obs_ids, obs_mask), obs_mask)
        return self.discriminator(text, graph)


class CommandGenerator(Module):
    """Sequence-to-sequence model emitting graph update commands"""

    role = "updater-cg"

    def __init__(self, config: ModelConfig, vocab: Vocab, wvocab: WordVocab, rng: np.random.Generator):
        self.vocab = vocab
        self.wvocab = wvocab
        self.words = word_embedding(config, wvocab, rng)
        self.text_encoder = TextEncoder(config, self.words, rng)
        self.graph_encoder = GraphEncoder(config, vocab, wvocab, self.words, rng)
        self.aggregator = Aggregator(config.hidden, rng)
        self.decoder = DecoderModel(config, len(wvocab), self.words, rng)
        self.max_len = config.decoder_max_len

    def memories(self, graphs: Sequence[DiscreteGraph], texts: Sequence[Sequence[str]]) -> List[Memory]:
        """Encode previous graphs and "action observation" texts into decoder memories"""
        adj = np.stack([to_dense(g).values for g in graphs])
        ids, mask = pad_batch(self.wvocab, [list(t) for t in texts])
        h_graph = self.graph_encoder(adj)
        h_text = self.text_encoder(ids, mask)
        reps = self.aggregator(h_text, mask, h_graph)
        return [(reps.graph_by_text, np.ones(h_graph.shape[:2])), (reps.text_by_graph, mask)]

    def generate_commands(self, g_prev: DiscreteGraph, obs_tokens: Sequence[str],
                          action_tokens: Sequence[str], max_len: Optional[int] = None) -> List[str]:
        with no_grad():
            memories = self.memories([g_prev], [command_context(obs_tokens, action_tokens)])
            return greedy_decode(self.decoder, self.wvocab, memories, max_len or self.max_len)[0]


def command_context(obs_tokens: Sequence[str], action_tokens: Sequence[str]) -> List[str]:
    return list(action_tokens) + list(obs_tokens)


def discrete_update(model, g_prev: DiscreteGraph, obs_tokens: Sequence[str],
                    action_tokens: Sequence[str]) -> DiscreteGraph:
    """Decode update commands and apply them to the previous graph

    Args:
        model: Anything with `vocab` and `generate_commands(g_prev, obs, action)`
        g_prev: Previous discrete belief
        obs_tokens: Observation O_t
        action_tokens: Action A_{t-1}

    Returns:
        Next discrete belief; unparsable segments are skipped
    """
    tokens = model.generate_commands(g_prev, obs_tokens, action_tokens)
    commands, dropped = parse_commands(tokens, model.vocab)
    if dropped:
        logger.debug("skipped %d malformed command segments", dropped)
    return apply_commands(g_prev, commands)


class RecurrentTextModel(Module):
    """Recurrent state over pooled text, decoded back into observations"""

    role = "drqn-og"

    def __init__(self, config: ModelConfig, wvocab: WordVocab, rng: np.random.Generator):
        self.wvocab = wvocab
        self.hidden = config.hidden
        self.words = word_embedding(config, wvocab, rng)
        self.text_encoder = TextEncoder(config, self.words, rng)
        self.rnn = GRUCell(2 * config.hidden, config.hidden, rng)
        self.decoder = DecoderModel(config, len(wvocab), self.words, rng)

    def initial(self, batch: int) -> Tensor:
        return Tensor(np.zeros((batch, self.hidden)))

    def step(self, h: Tensor, obs_ids: np.ndarray, obs_mask: np.ndarray,
             action_ids: np.ndarray, action_mask: np.ndarray) -> Tuple[Tensor, Tensor]:
        """Returns (h_t, action token representations)"""
        obs = masked_mean(self.text_encoder(obs_ids, obs_mask), obs_mask)
        h_action = self.text_encoder(action_ids, action_mask)
        pooled = masked_mean(h_action, action_mask)
        return self.rnn(concat([obs, pooled], axis=-1), as_tensor(h)), h_action

    def memories(self, h: Tensor, h_action: Tensor, action_mask: np.ndarray) -> List[Memory]:
        b = h.shape[0]
        return [(h.reshape(b, 1, self.hidden), np.ones((b, 1))), (h_action, action_mask)]

    def update_state(self, h: np.ndarray, obs_tokens: Sequence[str], action_tokens: Sequence[str]) -> np.ndarray:
        obs_ids, obs_mask = pad_batch(self.wvocab, [list(obs_tokens)])
        act_ids, act_mask = pad_batch(self.wvocab, [list(action_tokens)])
        with no_grad():
            h_next, _ = self.step(Tensor(h[None]), obs_ids, obs_mask, act_ids, act_mask)
        return h_next.data[0].copy()
