#!/usr/bin/env python3
"""
Selector module for the belief-graph laboratory.
Handles the agent variants and the action-selector Q-network that scores
candidate commands from text and/or graph inputs.
"""

import logging
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from beliefgraph.agent.replay import Snapshot
from beliefgraph.config import ModelConfig
from beliefgraph.core.kgraph import BeliefGraph, DiscreteGraph, to_dense
from beliefgraph.core.vocab import Vocab, WordVocab
from beliefgraph.errors import DomainError
from beliefgraph.models.encoders import (
    ActionScorer, Aggregator, GraphEncoder, TextEncoder, encode_candidates, pad_batch,
    pad_candidates, state_representation,
)
from beliefgraph.models.updater import word_embedding
from beliefgraph.nn.layers import Module
from beliefgraph.nn.tensor import Tensor

logger = logging.getLogger(__name__)

ENCODER_PREFIXES = ("words.", "graph_encoder.", "text_encoder.")


@dataclass(frozen=True)
class AgentVariant:
    """Inputs and policy shape of one agent kind"""

    name: str
    graph_source: Optional[str] = None  # "belief", "discrete", "full" or None
    use_text: bool = False
    recurrent: bool = False
    count_bonus: bool = False
    updater_role: Optional[str] = None

    @property
    def uses_graph(self) -> bool:
        return self.graph_source is not None


VARIANTS: Dict[str, AgentVariant] = {
    "gata-og": AgentVariant("gata-og", graph_source="belief", updater_role="updater-og"),
    "gata-coc": AgentVariant("gata-coc", graph_source="belief", updater_role="updater-coc"),
    "gata-gtp": AgentVariant("gata-gtp", graph_source="discrete", updater_role="updater-cg"),
    "gata-gtf": AgentVariant("gata-gtf", graph_source="full"),
    "tr-dqn": AgentVariant("tr-dqn", use_text=True),
    "tr-drqn": AgentVariant("tr-drqn", use_text=True, recurrent=True),
    "tr-drqn+": AgentVariant("tr-drqn+", use_text=True, recurrent=True, count_bonus=True),
}


def resolve_variant(name: str, use_text: bool = False) -> AgentVariant:
    """Look up a variant; graph variants take the text input flag"""
    try:
        variant = VARIANTS[name]
    except KeyError:
        raise DomainError(f"unknown agent variant {name!r}; expected one of {sorted(VARIANTS)}") from None
    if variant.uses_graph and use_text:
        variant = replace(variant, use_text=True)
    return variant


def _adjacency(graph) -> np.ndarray:
    if isinstance(graph, BeliefGraph):
        return graph.values
    if isinstance(graph, DiscreteGraph):
        return to_dense(graph).values
    raise DomainError(f"snapshot holds no graph for a graph-consuming selector: {graph!r}")


class ActionSelector(Module):
    """Class for scoring candidate actions of a batch of snapshots"""

    def __init__(self, variant: AgentVariant, config: ModelConfig, vocab: Vocab, wvocab: WordVocab,
                 rng: np.random.Generator):
        self.variant = variant
        self.wvocab = wvocab
        self.words = word_embedding(config, wvocab, rng)
        self.text_encoder = TextEncoder(config, self.words, rng)
        self.graph_encoder = GraphEncoder(config, vocab, wvocab, self.words, rng) if variant.uses_graph else None
        both = variant.uses_graph and variant.use_text
        self.aggregator = Aggregator(config.hidden, rng) if both else None
        self.scorer = ActionScorer(config.hidden, rng, recurrent=variant.recurrent)

    def q_values(self, snapshots: Sequence[Snapshot], recurrent_state: Optional[Tensor] = None
                 ) -> Tuple[Tensor, np.ndarray, Optional[Tensor]]:
        """Score every candidate of every snapshot

        Args:
            snapshots: Batch of B snapshots, each with at least one candidate
            recurrent_state: Policy state (B, H) of recurrent variants

        Returns:
            Tuple of (Q values (B, C), candidate mask (B, C), next policy state)
        """
        if any(not s.candidates for s in snapshots):
            raise DomainError("cannot score a snapshot without candidates")
        h_graph = h_text = text_mask = None
        if self.graph_encoder is not None:
            h_graph = self.graph_encoder(np.stack([_adjacency(s.graph) for s in snapshots]))
        if self.variant.use_text:
            ids, text_mask = pad_batch(self.wvocab, [s.obs for s in snapshots])
            h_text = self.text_encoder(ids, text_mask)
        state, state_mask = state_representation(h_graph, h_text, text_mask, self.aggregator)
        ids, token_mask, cand_mask = pad_candidates(self.wvocab, [s.candidates for s in snapshots])
        candidates = encode_candidates(self.text_encoder, ids, token_mask)
        scores, next_state = self.scorer(state, state_mask, candidates, token_mask, recurrent_state)
        return scores, cand_mask, next_state


def transfer_encoders(selector: Module, state: Dict[str, np.ndarray], source_prefix: str = "",
                      freeze: bool = False) -> List[str]:
    """Copy pretrained word, graph and text encoder weights into the selector

    Args:
        selector: Target network
        state: Checkpoint arrays
        source_prefix: Prefix of the encoders inside the checkpoint ("updater." for updaters)
        freeze: Keep the copied parameters fixed afterwards

    Returns:
        Selector parameter names that were filled
    """
    params = dict(selector.named_parameters())
    copied = []
    for name, value in sorted(state.items()):
        if not name.startswith(source_prefix):
            continue
        target = name[len(source_prefix):]
        if not target.startswith(ENCODER_PREFIXES) or target not in params:
            continue
        if params[target].data.shape != value.shape:
            logger.warning("skipping %s: shape %s vs %s", target, value.shape, params[target].data.shape)
            continue
        params[target].data = np.array(value, dtype=params[target].data.dtype)
        if freeze:
            params[target].trainable = False
        copied.append(target)
    logger.info("initialized %d selector parameters from checkpoint", len(copied))
    return copied
