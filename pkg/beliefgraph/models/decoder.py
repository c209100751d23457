#!/usr/bin/env python3
"""
Decoder module for the belief-graph laboratory.
Handles the transformer decoder block shared by observation generation
and command generation: teacher-forced token likelihoods and greedy
decoding.
"""

import logging
from typing import List, Sequence, Tuple

import numpy as np

from beliefgraph.config import ModelConfig
from beliefgraph.core.vocab import BOS, EOS, WordVocab
from beliefgraph.errors import DomainError
from beliefgraph.nn.layers import MLP, Attention, Embedding, LayerNorm, Linear, Module, masked_rows, sinusoidal_encoding
from beliefgraph.nn.tensor import Tensor, log_softmax, no_grad, softmax

logger = logging.getLogger(__name__)

# (representations (B, M, H), 0/1 mask (B, M))
Memory = Tuple[Tensor, np.ndarray]


class DecoderModel(Module):
    """Class for decoding token sequences conditioned on two memories"""

    def __init__(self, config: ModelConfig, vocab_size: int, words: Embedding, rng: np.random.Generator):
        """Initialize the decoder

        Args:
            config: Model dimensions
            vocab_size: Output vocabulary size |V|
            words: Input word embedding (shared with the encoders that feed it)
            rng: Parameter initializer
        """
        hidden = config.hidden
        self.words = words
        self.hidden = hidden
        self.input_map = Linear(words.dim, hidden, rng)
        self.self_attention = Attention(hidden, rng)
        self.self_norm = LayerNorm(hidden)
        self.first_attention = Attention(hidden, rng)
        self.first_norm = LayerNorm(hidden)
        self.second_attention = Attention(hidden, rng)
        self.second_norm = LayerNorm(hidden)
        self.mlp = MLP([hidden, hidden, hidden, hidden], rng)
        self.mlp_norm = LayerNorm(hidden)
        self.output = Linear(hidden, vocab_size, rng)

    @property
    def vocab_size(self) -> int:
        return self.output.weight.shape[1]

    def forward(self, ids: np.ndarray, mask: np.ndarray, memories: Sequence[Memory]) -> Tensor:
        """Next-token logits for every prefix position

        Args:
            ids: Decoder input ids (B, L), starting with <s>
            mask: 0/1 token mask (B, L)
            memories: (first, second) memory pairs to cross-attend to

        Returns:
            Logits (B, L, |V|)
        """
        if len(memories) != 2:
            raise DomainError(f"decoder expects 2 memories, got {len(memories)}")
        mask = np.asarray(mask, dtype=float)
        positions = sinusoidal_encoding(ids.shape[-1], self.hidden)
        x = masked_rows(self.input_map(self.words(ids)) + positions, mask)
        x = self.self_norm(x + self.self_attention(x, mask=mask, causal=True))
        (first, first_mask), (second, second_mask) = memories
        x = self.first_norm(x + self.first_attention(x, memory=first, mask=first_mask))
        x = self.second_norm(x + self.second_attention(x, memory=second, mask=second_mask))
        x = self.mlp_norm(x + self.mlp(x))
        return self.output(masked_rows(x, mask))


def teacher_forcing(wvocab: WordVocab, sequences: Sequence[Sequence[str]]
                    ) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Shifted decoder inputs and targets for token sequences

    Args:
        wvocab: Word vocabulary
        sequences: Target token lists without framing tokens

    Returns:
        Tuple of (input ids, input mask, target ids, target mask), each (B, L+1);
        inputs are "<s> w1 .. wn" and targets "w1 .. wn </s>"
    """
    length = max(len(s) for s in sequences) + 1
    b = len(sequences)
    in_ids = np.full((b, length), wvocab.pad_id, dtype=np.int64)
    out_ids = np.full((b, length), wvocab.pad_id, dtype=np.int64)
    mask = np.zeros((b, length))
    for i, seq in enumerate(sequences):
        encoded = wvocab.encode(list(seq))
        in_ids[i, :len(encoded) + 1] = [wvocab.bos_id] + encoded
        out_ids[i, :len(encoded) + 1] = encoded + [wvocab.eos_id]
        mask[i, :len(encoded) + 1] = 1.0
    return in_ids, mask, out_ids, mask.copy()


def strip_framing(tokens: Sequence[str]) -> List[str]:
    """Drop a leading <s> and everything from </s> on"""
    tokens = list(tokens)
    if tokens and tokens[0] == BOS:
        tokens = tokens[1:]
    if EOS in tokens:
        tokens = tokens[:tokens.index(EOS)]
    return tokens


def token_nll(logits: Tensor, targets: np.ndarray, mask: np.ndarray) -> Tensor:
    """Summed negative log-likelihood of the targets per example

    Args:
        logits: (B, L, |V|)
        targets: Target ids (B, L)
        mask: 0/1 weights (B, L)

    Returns:
        Tensor (B,)
    """
    b, length = targets.shape
    log_probs = log_softmax(logits, axis=-1)
    rows = np.repeat(np.arange(b), length)
    cols = np.tile(np.arange(length), b)
    picked = log_probs[rows, cols, targets.reshape(-1)].reshape(b, length)
    return -(picked * np.asarray(mask, dtype=float)).sum(axis=1)


def next_token_distribution(decoder: DecoderModel, ids: np.ndarray, mask: np.ndarray,
                            memories: Sequence[Memory]) -> Tensor:
    """Distribution (B, |V|) over the token following each prefix

    The prefix of example b ends at the last unmasked position of mask[b].
    """
    logits = decoder(ids, mask, memories)
    last = np.asarray(mask).sum(axis=1).astype(np.int64) - 1
    picked = logits[np.arange(ids.shape[0]), last]
    return softmax(picked, axis=-1)


def greedy_decode(decoder: DecoderModel, wvocab: WordVocab, memories: Sequence[Memory],
                  max_len: int = 200) -> List[List[str]]:
    """Decode token by token from <s>, always picking the most likely token

    Args:
        decoder: Trained decoder
        wvocab: Word vocabulary of the output layer
        memories: Conditioning memories for a batch of B examples
        max_len: Cap on generated tokens (excluding <s>)

    Returns:
        B token lists, each starting with <s> and ending with </s> unless capped
    """
    b = memories[0][0].shape[0]
    ids = np.full((b, 1), wvocab.bos_id, dtype=np.int64)
    finished = np.zeros(b, dtype=bool)
    with no_grad():
        for _ in range(max_len):
            logits = decoder(ids, np.ones(ids.shape), memories)
            choice = np.argmax(logits.data[:, -1], axis=-1)
            choice = np.where(finished, wvocab.pad_id, choice)
            ids = np.concatenate([ids, choice[:, None]], axis=1)
            finished |= choice == wvocab.eos_id
            if finished.all():
                break
    results = []
    for row in ids:
        tokens = wvocab.decode(row)
        if EOS in tokens:
            tokens = tokens[:tokens.index(EOS) + 1]
        results.append(tokens)
    return results
