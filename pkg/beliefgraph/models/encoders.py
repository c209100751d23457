#!/usr/bin/env python3
"""
Encoders module for the belief-graph laboratory.
Handles the relation-aware graph encoder, the convolutional transformer
text encoder, the bidirectional attention aggregator and the candidate
scorer, plus token batching helpers.
"""

import logging
from typing import NamedTuple, Optional, Sequence, Tuple

import numpy as np

from beliefgraph.config import ModelConfig
from beliefgraph.core.vocab import PAD, Vocab, WordVocab, tokenize
from beliefgraph.errors import DomainError
from beliefgraph.nn.layers import (
    MLP, Attention, Conv1d, Embedding, GRUCell, LayerNorm, Linear, Module, Parameter,
    check_nonempty, masked_rows, sinusoidal_encoding, uniform_init,
)
from beliefgraph.nn.tensor import Tensor, as_tensor, concat, expand, masked_mean, softmax

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Token batching

def pad_batch(wvocab: WordVocab, sequences: Sequence[Sequence[str]]) -> Tuple[np.ndarray, np.ndarray]:
    """Encode token lists into (B, L) ids and a 0/1 mask"""
    length = max([len(s) for s in sequences] + [1])
    ids = np.full((len(sequences), length), wvocab.pad_id, dtype=np.int64)
    mask = np.zeros((len(sequences), length))
    for i, seq in enumerate(sequences):
        ids[i, :len(seq)] = wvocab.encode(seq)
        mask[i, :len(seq)] = 1.0
    return ids, mask


def pad_candidates(wvocab: WordVocab, candidate_lists: Sequence[Sequence[Sequence[str]]]
                   ) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Encode per-example candidate lists

    Returns:
        Tuple of ids (B, C, Lc), token mask (B, C, Lc) and candidate mask (B, C).
        Padding candidates hold a single unmasked <pad> token.
    """
    count = max(len(c) for c in candidate_lists)
    length = max([len(t) for cands in candidate_lists for t in cands] + [1])
    b = len(candidate_lists)
    ids = np.full((b, count, length), wvocab.pad_id, dtype=np.int64)
    token_mask = np.zeros((b, count, length))
    token_mask[:, :, 0] = 1.0
    cand_mask = np.zeros((b, count))
    for i, cands in enumerate(candidate_lists):
        for j, tokens in enumerate(cands):
            ids[i, j, :len(tokens)] = wvocab.encode(tokens)
            token_mask[i, j, :len(tokens)] = 1.0
            cand_mask[i, j] = 1.0
    return ids, token_mask, cand_mask


def name_table(wvocab: WordVocab, names: Sequence[str], rows: int) -> Tuple[np.ndarray, np.ndarray]:
    """Token ids of names (one per row); missing rows hold a single <pad>"""
    token_lists = [tokenize(n.replace("_", " ")) for n in names]
    token_lists += [[PAD]] * (rows - len(token_lists))
    return pad_batch(wvocab, token_lists)


# ---------------------------------------------------------------------------
# Graph encoder

class RGCNLayer(Module):
    """Relation-aware graph convolution with basis-decomposed weights and a highway gate"""

    def __init__(self, hidden: int, rel_in: int, channels: int, bases: int, rng: np.random.Generator):
        self.hidden = hidden
        self.channels = channels
        self.bases = Parameter(uniform_init(rng, hidden + rel_in, (bases, hidden + rel_in, hidden)))
        self.coefficients = Parameter(uniform_init(rng, bases, (channels, bases)))
        self.self_map = Linear(hidden + rel_in, hidden, rng)
        self.gate = Linear(hidden, hidden, rng)

    def forward(self, adj: Tensor, h: Tensor, relations: Tensor) -> Tensor:
        """One propagation step

        Args:
            adj: Adjacency (B, 2R, N, N), edge head->tail at [r, head, tail]
            h: Node states (B, N, H)
            relations: Relation representations E (2R, Dr)

        Returns:
            Node states (B, N, H)
        """
        b, channels, n, _ = adj.shape
        hidden, rel_in = self.hidden, relations.shape[-1]
        flat_bases = self.bases.reshape(self.bases.shape[0], -1)
        weights = (self.coefficients @ flat_bases).reshape(channels, hidden + rel_in, hidden)
        w_node = weights[:, :hidden, :]
        w_rel = weights[:, hidden:, :]

        incoming = adj.swapaxes(-1, -2)
        messages = (incoming @ h.reshape(b, 1, n, hidden)) @ w_node
        node_term = messages.sum(axis=1)
        rel_messages = (relations.reshape(channels, 1, rel_in) @ w_rel).reshape(channels, hidden)
        degree = incoming.sum(axis=-1)
        rel_term = degree.swapaxes(1, 2) @ rel_messages

        mean_relation = relations.mean(axis=0).reshape(1, 1, rel_in)
        self_term = self.self_map(concat([h, expand(mean_relation, (b, n, rel_in))], axis=-1))

        updated = (node_term + rel_term + self_term).tanh()
        gate = self.gate(updated).sigmoid()
        return gate * updated + (1.0 - gate) * h


class GraphEncoder(Module):
    """Class for encoding belief tensors into node representations"""

    def __init__(self, config: ModelConfig, vocab: Vocab, wvocab: WordVocab, words: Embedding,
                 rng: np.random.Generator):
        """Initialize the graph encoder

        Args:
            config: Model dimensions
            vocab: Entity and relation vocabulary (N = vocab.capacity)
            wvocab: Word vocabulary of the shared word embedding
            words: Word embedding table shared with the text side
            rng: Parameter initializer
        """
        self.num_nodes = vocab.capacity
        self.channels = 2 * vocab.num_relations
        self.words = words
        self.node_embedding = Embedding(self.num_nodes, config.node_dim, rng)
        self.relation_embedding = Embedding(self.channels, config.relation_dim, rng)
        self.input_map = Linear(config.node_dim + words.dim, config.hidden, rng)
        rel_in = config.relation_dim + words.dim
        self.layers = [RGCNLayer(config.hidden, rel_in, self.channels, config.bases, rng)
                       for _ in range(config.graph_layers)]
        self.node_ids, self.node_mask = name_table(wvocab, vocab.entities, self.num_nodes)
        labels = [" ".join(words_) for words_ in vocab.channel_labels()]
        self.label_ids, self.label_mask = name_table(wvocab, labels, self.channels)

    def initial_features(self) -> Tensor:
        """h0 = tanh(W [node embedding; mean name word embedding]), shape (N, H)"""
        nodes = self.node_embedding(np.arange(self.num_nodes))
        names = masked_mean(self.words(self.node_ids), self.node_mask)
        return self.input_map(concat([nodes, names], axis=-1)).tanh()

    def relation_features(self) -> Tensor:
        rels = self.relation_embedding(np.arange(self.channels))
        labels = masked_mean(self.words(self.label_ids), self.label_mask)
        return concat([rels, labels], axis=-1)

    def forward(self, adj, features: Optional[Tensor] = None) -> Tensor:
        """Encode a batch of adjacency tensors

        Args:
            adj: (B, 2R, N, N) array or Tensor
            features: Optional initial node states (N, H) or (B, N, H)

        Returns:
            Node representations (B, N, H)
        """
        adj = as_tensor(adj)
        if adj.ndim != 4 or adj.shape[1] != self.channels:
            raise DomainError(f"expected (B, {self.channels}, N, N) adjacency, got {adj.shape}")
        b, _, n, _ = adj.shape
        h = self.initial_features() if features is None else as_tensor(features)
        if h.ndim == 2:
            h = expand(h.reshape(1, n, h.shape[-1]), (b, n, h.shape[-1]))
        relations = self.relation_features()
        for layer in self.layers:
            h = layer(adj, h, relations)
        return h


# ---------------------------------------------------------------------------
# Text encoder

class TextEncoder(Module):
    """Class for encoding token sequences with a convolutional transformer block"""

    def __init__(self, config: ModelConfig, words: Embedding, rng: np.random.Generator):
        self.words = words
        self.input_map = Linear(words.dim, config.hidden, rng)
        self.convs = [Conv1d(config.hidden, config.hidden, config.kernel, rng)
                      for _ in range(config.conv_layers)]
        self.conv_norms = [LayerNorm(config.hidden) for _ in range(config.conv_layers)]
        self.attention = Attention(config.hidden, rng)
        self.attention_norm = LayerNorm(config.hidden)
        self.mlp = MLP([config.hidden, config.hidden, config.hidden], rng)
        self.mlp_norm = LayerNorm(config.hidden)
        self.hidden = config.hidden

    def forward(self, ids: np.ndarray, mask: np.ndarray) -> Tensor:
        """Encode (B, L) token ids into (B, L, H); masked rows are zero"""
        check_nonempty(mask)
        positions = sinusoidal_encoding(ids.shape[-1], self.hidden)
        x = masked_rows(self.input_map(self.words(ids)) + positions, mask)
        for conv, norm in zip(self.convs, self.conv_norms):
            x = masked_rows(norm(x + conv(x).relu()), mask)
        x = masked_rows(self.attention_norm(x + self.attention(x, mask=mask)), mask)
        return masked_rows(self.mlp_norm(x + self.mlp(x)), mask)


# ---------------------------------------------------------------------------
# Aggregator

class AggregatedReps(NamedTuple):
    text_by_graph: Tensor  # (B, L, H)
    graph_by_text: Tensor  # (B, N, H)
    graph_attention: Tensor  # softmax over nodes (B, L, N)
    text_attention: Tensor  # softmax over tokens (B, L, N)


class Aggregator(Module):
    """Bidirectional attention between a text sequence and graph nodes"""

    def __init__(self, hidden: int, rng: np.random.Generator):
        self.text_map = Linear(hidden, hidden, rng)
        self.graph_map = Linear(hidden, hidden, rng)
        self.w_text = Parameter(uniform_init(rng, 3 * hidden, (hidden, 1)))
        self.w_graph = Parameter(uniform_init(rng, 3 * hidden, (hidden, 1)))
        self.w_joint = Parameter(uniform_init(rng, 3 * hidden, (hidden,)))
        self.text_out = Linear(4 * hidden, hidden, rng)
        self.graph_out = Linear(4 * hidden, hidden, rng)

    def similarity(self, o: Tensor, g: Tensor) -> Tensor:
        return (o @ self.w_text) + (g @ self.w_graph).swapaxes(1, 2) + (o * self.w_joint) @ g.swapaxes(1, 2)

    def forward(self, h_text: Tensor, text_mask: np.ndarray, h_graph: Tensor,
                graph_mask: Optional[np.ndarray] = None) -> AggregatedReps:
        """Attend text to graph and graph to text

        Args:
            h_text: (B, L, H)
            text_mask: (B, L)
            h_graph: (B, N, H)
            graph_mask: (B, N), all ones by default

        Returns:
            AggregatedReps
        """
        b, n = h_graph.shape[0], h_graph.shape[1]
        text_mask = np.asarray(text_mask, dtype=float)
        graph_mask = np.ones((b, n)) if graph_mask is None else np.asarray(graph_mask, dtype=float)
        o = self.text_map(h_text)
        g = self.graph_map(h_graph)
        sim = self.similarity(o, g)
        s_graph = softmax(sim, axis=2, mask=graph_mask[:, None, :])
        s_text = softmax(sim, axis=1, mask=text_mask[:, :, None])
        s_text_t = s_text.swapaxes(1, 2)

        p = s_graph @ g
        q = s_graph @ (s_text_t @ o)
        text_by_graph = masked_rows(self.text_out(concat([o, p, o * p, o * q], axis=-1)), text_mask)

        p2 = s_text_t @ o
        q2 = s_text_t @ (s_graph @ g)
        graph_by_text = masked_rows(self.graph_out(concat([g, p2, g * p2, g * q2], axis=-1)), graph_mask)
        return AggregatedReps(text_by_graph, graph_by_text, s_graph, s_text)


# ---------------------------------------------------------------------------
# Scorer

class ActionScorer(Module):
    """Scores each candidate from pooled state and candidate representations"""

    def __init__(self, hidden: int, rng: np.random.Generator, recurrent: bool = False):
        self.attention = Attention(hidden, rng)
        self.norm = LayerNorm(hidden)
        self.rnn = GRUCell(hidden, hidden, rng) if recurrent else None
        self.mlp = MLP([2 * hidden, hidden, 1], rng)
        self.hidden = hidden

    def forward(self, state: Tensor, state_mask: np.ndarray, candidates: Tensor, token_mask: np.ndarray,
                recurrent_state: Optional[Tensor] = None) -> Tuple[Tensor, Optional[Tensor]]:
        """Score candidates

        Args:
            state: State representations (B, Ls, H)
            state_mask: (B, Ls)
            candidates: Candidate token representations (B, C, Lc, H)
            token_mask: (B, C, Lc)
            recurrent_state: Previous policy state (B, H) for recurrent scorers

        Returns:
            Tuple of (scores (B, C), next policy state or None)
        """
        b, c = candidates.shape[0], candidates.shape[1]
        attended = self.norm(state + self.attention(state, mask=state_mask))
        pooled = masked_mean(attended, state_mask)
        next_state = None
        if self.rnn is not None:
            previous = recurrent_state if recurrent_state is not None else Tensor(np.zeros((b, self.hidden)))
            pooled = self.rnn(pooled, previous)
            next_state = pooled
        cands = masked_mean(candidates, token_mask)
        joined = concat([expand(pooled.reshape(b, 1, self.hidden), (b, c, self.hidden)), cands], axis=-1)
        return self.mlp(joined).reshape(b, c), next_state


def state_representation(h_graph: Optional[Tensor], h_text: Optional[Tensor], text_mask: Optional[np.ndarray],
                         aggregator: Optional[Aggregator]) -> Tuple[Tensor, np.ndarray]:
    """Pick the scorer input from the available representations

    Graph only gives the node states, text only gives the token states, and
    both give the aggregated pair joined along the sequence axis.
    """
    if h_graph is not None and h_text is None:
        return h_graph, np.ones(h_graph.shape[:2])
    if h_graph is None and h_text is not None:
        return h_text, text_mask
    if h_graph is None:
        raise DomainError("scorer needs graph or text input")
    reps = aggregator(h_text, text_mask, h_graph)
    graph_mask = np.ones(h_graph.shape[:2])
    joined = concat([reps.text_by_graph, reps.graph_by_text], axis=1)
    return joined, np.concatenate([text_mask, graph_mask], axis=1)


def encode_candidates(encoder: TextEncoder, ids: np.ndarray, token_mask: np.ndarray) -> Tensor:
    """Encode (B, C, Lc) candidate ids into (B, C, Lc, H)"""
    b, c, length = ids.shape
    reps = encoder(ids.reshape(b * c, length), token_mask.reshape(b * c, length))
    return reps.reshape(b, c, length, reps.shape[-1])

