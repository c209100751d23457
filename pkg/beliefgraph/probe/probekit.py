#!/usr/bin/env python3
"""
Probe module for the belief-graph laboratory.
Handles the relation-prediction probe over belief graphs: dataset
construction along walkthroughs, a linear multi-label probe, exact-match
and F1 metrics, and adjacency-slice heatmap export.
"""

import csv
import logging
import os
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Set, Tuple

import matplotlib
matplotlib.use('Agg')
import matplotlib.pyplot as plt
import numpy as np
from tqdm import tqdm

from beliefgraph.agent.trainer import TruthTracker, UpdaterTracker
from beliefgraph.config import ProbeConfig
from beliefgraph.core.kgraph import BeliefGraph, DiscreteGraph, to_dense
from beliefgraph.core.vocab import Vocab
from beliefgraph.core.worldgen import GameSpec, entity_kind, ground_truth_seen, reset, step, walkthrough
from beliefgraph.errors import DomainError
from beliefgraph.models.encoders import name_table
from beliefgraph.models.updater import RESTART
from beliefgraph.nn.layers import Linear, Module
from beliefgraph.nn.optim import Adam
from beliefgraph.nn.tensor import Tensor, bce_with_logits, masked_mean, no_grad

logger = logging.getLogger(__name__)

PROBE_SOURCES = ("ground-truth", "random", "belief-og", "belief-coc", "drqn")
MODEL_SOURCES = ("belief-og", "belief-coc", "drqn")
METRIC_NAMES = ("em_pos", "em_neg", "em_avg", "f1_pos", "f1_neg", "f1_avg")

Pair = Tuple[int, int]


@dataclass(frozen=True, eq=False)
class ProbeSample:
    game_id: str
    step: int
    pair: Pair
    features: np.ndarray
    label: np.ndarray
    positive: bool


@dataclass
class ProbeDataset:
    train: List[ProbeSample]
    test: List[ProbeSample]

    @property
    def input_dim(self) -> int:
        samples = self.train or self.test
        if not samples:
            raise DomainError("empty probe dataset")
        return int(samples[0].features.size)


# ---------------------------------------------------------------------------
# Graph sources

class RandomSource:
    """Standard-normal adjacency tensors, one fixed draw per game step

    The draw of a step depends only on the seed, the game and the step
    index, so replaying a walkthrough yields the same tensors.
    """

    def __init__(self, shape: Tuple[int, ...], seed: int):
        self.shape = shape
        self.seed = seed
        self.rng: Optional[np.random.Generator] = None
        self.values: Optional[np.ndarray] = None

    def _draw(self) -> np.ndarray:
        self.values = self.rng.standard_normal(self.shape)
        return self.values

    def reset(self, state, obs):
        spec = state.spec
        self.rng = np.random.default_rng([self.seed, spec.difficulty, spec.level, spec.seed])
        return self._draw()

    def update(self, state, obs, action):
        if self.rng is None:
            raise DomainError("random source used before reset")
        return self._draw()


class RecurrentSource:
    """Post-update recurrent state of a recurrent text model"""

    def __init__(self, model):
        self.model = model
        self.h: Optional[np.ndarray] = None

    def reset(self, state, obs):
        self.h = self.model.update_state(np.zeros(self.model.hidden), obs, RESTART)
        return self.h

    def update(self, state, obs, action):
        self.h = self.model.update_state(self.h, obs, action)
        return self.h


def graph_source(source: str, vocab: Vocab, model=None, seed: int = 0):
    """Tracker producing the probed representation at each step"""
    if source not in PROBE_SOURCES:
        raise DomainError(f"unknown probe source {source!r}; expected one of {PROBE_SOURCES}")
    if source in MODEL_SOURCES and model is None:
        raise DomainError(f"probe source {source!r} needs a pretrained model")
    if source == "ground-truth":
        return TruthTracker(vocab, "seen")
    if source == "random":
        return RandomSource((2 * vocab.num_relations, vocab.capacity, vocab.capacity), seed)
    if source == "drqn":
        return RecurrentSource(model)
    return UpdaterTracker(model.updater)


def node_embeddings(source: str, vocab: Vocab, model=None, dim: int = 16, seed: int = 0) -> np.ndarray:
    """Frozen node embeddings (N, D) paired with the graph slice of a probe input

    Updater sources use the updater's initial node features and the
    recurrent source uses mean name-word embeddings. The ground-truth source
    gets a fixed random draw. The random source gets zeros, so its inputs
    carry no node identity.
    """
    with no_grad():
        if source in ("belief-og", "belief-coc"):
            return model.updater.graph_encoder.initial_features().data.copy()
        if source == "drqn":
            ids, mask = name_table(model.wvocab, vocab.entities, vocab.capacity)
            return masked_mean(model.words(ids), mask).data.copy()
    if source == "random":
        return np.zeros((vocab.capacity, dim))
    return np.random.default_rng(seed + 1).standard_normal((vocab.capacity, dim))


def _dense_of(graph) -> np.ndarray:
    if isinstance(graph, DiscreteGraph):
        return to_dense(graph, np.float64).values
    if isinstance(graph, BeliefGraph):
        return graph.values
    return np.asarray(graph)


def pair_features(graph: np.ndarray, embeddings: np.ndarray, i: int, j: int) -> np.ndarray:
    """[slice (i, j) over all channels; h_i; h_j], or [state; h_i; h_j] for vector states"""
    context = graph[:, i, j] if graph.ndim == 3 else graph.reshape(-1)
    return np.concatenate([np.asarray(context, dtype=float), embeddings[i], embeddings[j]])


# ---------------------------------------------------------------------------
# Dataset

def pair_labels(seen: DiscreteGraph) -> Dict[Pair, np.ndarray]:
    """Multi-hot base-relation labels of every related (head, tail) pair"""
    labels: Dict[Pair, np.ndarray] = {}
    n_rel = seen.vocab.num_relations
    for h, t, r in seen:
        labels.setdefault((h, t), np.zeros(n_rel))[r] = 1.0
    return labels


def plausible_negative(pair: Pair, candidates: Sequence[int], related: Set[Pair],
                       vocab: Vocab, rng: np.random.Generator) -> Optional[Pair]:
    """A node pair of the same entity kinds as `pair` with no relation in either direction

    Args:
        pair: Positive (head, tail)
        candidates: Entity indices present in the game
        related: Pairs holding some relation at this step
        vocab: Entity names
        rng: Sampler

    Returns:
        A pair, or None when no such pair exists
    """
    head_kind = entity_kind(vocab.entities[pair[0]])
    tail_kind = entity_kind(vocab.entities[pair[1]])
    heads = [e for e in candidates if entity_kind(vocab.entities[e]) == head_kind]
    tails = [e for e in candidates if entity_kind(vocab.entities[e]) == tail_kind]
    options = [(a, b) for a in heads for b in tails
               if a != b and (a, b) not in related and (b, a) not in related]
    if not options:
        return None
    return options[int(rng.integers(len(options)))]


def probe_samples(specs: Sequence[GameSpec], source, embeddings: np.ndarray, vocab: Vocab,
                  rng: np.random.Generator, show_progress: bool = False) -> List[ProbeSample]:
    """Follow each walkthrough and emit positive and matched negative samples per step"""
    samples: List[ProbeSample] = []
    n_rel = vocab.num_relations
    for spec in tqdm(specs, desc="probe data", disable=not show_progress):
        state, obs, _ = reset(spec)
        graph = source.reset(state, obs.tokens)
        present = sorted({vocab.entity_index(name) for fact in state.facts for name in fact[:2]})
        actions = walkthrough(spec)
        for t in range(len(actions) + 1):
            if t:
                state, obs, _, _, _ = step(state, actions[t - 1])
                graph = source.update(state, obs.tokens, actions[t - 1].tokens)
            dense = _dense_of(graph)
            labels = pair_labels(ground_truth_seen(state, vocab))
            related = set(labels)
            for pair in sorted(labels):
                samples.append(ProbeSample(spec.game_id, t, pair, pair_features(dense, embeddings, *pair),
                                           labels[pair], True))
                negative = plausible_negative(pair, present, related, vocab, rng)
                if negative is not None:
                    samples.append(ProbeSample(spec.game_id, t, negative,
                                               pair_features(dense, embeddings, *negative),
                                               np.zeros(n_rel), False))
    return samples


def build_probe_dataset(train_specs: Sequence[GameSpec], test_specs: Sequence[GameSpec], source: str,
                        vocab: Vocab, model=None, seed: int = 0, show_progress: bool = False) -> ProbeDataset:
    """Probe samples along the walkthroughs of disjoint training and test games

    Args:
        train_specs: Games of the training split
        test_specs: Games of the test split
        source: One of PROBE_SOURCES
        vocab: Entity and relation vocabulary
        model: Pretrained model for the belief and recurrent sources
        seed: Seed of negative sampling and of the random draws

    Returns:
        ProbeDataset
    """
    overlap = {s.game_id for s in train_specs} & {s.game_id for s in test_specs}
    if overlap:
        raise DomainError(f"probe splits share games: {sorted(overlap)}")
    embeddings = node_embeddings(source, vocab, model, seed=seed)
    rng = np.random.default_rng(seed)
    train = probe_samples(train_specs, graph_source(source, vocab, model, seed), embeddings, vocab, rng,
                          show_progress)
    test = probe_samples(test_specs, graph_source(source, vocab, model, seed), embeddings, vocab, rng,
                         show_progress)
    logger.info("probe dataset (%s): %d train and %d test samples", source, len(train), len(test))
    return ProbeDataset(train, test)


# ---------------------------------------------------------------------------
# Probe

class ProbeModel(Module):
    """Class for a linear map from a probe input to relation logits"""

    def __init__(self, input_dim: int, num_relations: int, rng: np.random.Generator):
        self.linear = Linear(input_dim, num_relations, rng)
        self.linear.weight.data = np.zeros_like(self.linear.weight.data)

    def forward(self, features: np.ndarray) -> Tensor:
        return self.linear(Tensor(features))


def _stack(samples: Sequence[ProbeSample]) -> Tuple[np.ndarray, np.ndarray]:
    return np.stack([s.features for s in samples]), np.stack([s.label for s in samples])


def train_probe(samples: Sequence[ProbeSample], config: Optional[ProbeConfig] = None,
                show_progress: bool = False) -> Tuple[ProbeModel, List[float]]:
    """Fit the linear probe with binary cross-entropy

    Args:
        samples: Training samples
        config: Epochs, learning rate, batch size and seed
        show_progress: Show a progress bar

    Returns:
        Tuple of (probe, mean training loss per epoch)
    """
    if not samples:
        raise DomainError("cannot train a probe on an empty dataset")
    config = config or ProbeConfig()
    rng = np.random.default_rng(config.seed)
    features, labels = _stack(samples)
    model = ProbeModel(features.shape[1], labels.shape[1], rng)
    optimizer = Adam(model.parameters(), lr=config.lr)
    history = []
    for epoch in tqdm(range(config.epochs), desc="probe", disable=not show_progress):
        order = rng.permutation(len(samples))
        total = 0.0
        for start in range(0, len(order), config.batch_size):
            batch = order[start:start + config.batch_size]
            loss = bce_with_logits(model(features[batch]), labels[batch]).mean()
            loss.backward()
            optimizer.step()
            optimizer.zero_grad()
            total += loss.item() * len(batch)
        history.append(total / len(samples))
        logger.info("probe epoch %d: loss %.4f", epoch + 1, history[-1])
    return model, history


def predict(model: ProbeModel, samples: Sequence[ProbeSample], threshold: float = 0.5) -> np.ndarray:
    """0/1 label predictions; a label is on when its probability exceeds the threshold"""
    features, _ = _stack(samples)
    with no_grad():
        logits = model(features).data
    return (1.0 / (1.0 + np.exp(-logits)) > threshold).astype(int)


def _sample_f1(pred: np.ndarray, gold: np.ndarray) -> float:
    tp = float(np.sum((pred == 1) & (gold == 1)))
    predicted, actual = float(pred.sum()), float(gold.sum())
    if predicted == 0 and actual == 0:
        return 1.0
    if tp == 0:
        return 0.0
    precision, recall = tp / predicted, tp / actual
    return 2 * precision * recall / (precision + recall)


def probe_metrics(predictions: np.ndarray, labels: np.ndarray, positive: Sequence[bool]
                  ) -> Dict[str, Optional[float]]:
    """Exact match and sample-averaged F1, per polarity and averaged

    F1 is averaged over samples rather than over labels, since label-wise F1
    is undefined on negatives, whose labels are all zero. A polarity without
    samples reports None and is left out of the averages.
    """
    predictions = np.asarray(predictions).astype(int)
    labels = np.asarray(labels).astype(int)
    positive = np.asarray(positive, dtype=bool)
    if len(labels) == 0:
        raise DomainError("cannot score an empty probe dataset")
    metrics: Dict[str, Optional[float]] = {}
    for suffix, rows in (("pos", positive), ("neg", ~positive)):
        if not rows.any():
            metrics[f"em_{suffix}"] = metrics[f"f1_{suffix}"] = None
            continue
        exact = np.all(predictions[rows] == labels[rows], axis=1)
        metrics[f"em_{suffix}"] = float(exact.mean())
        metrics[f"f1_{suffix}"] = float(np.mean([_sample_f1(p, g) for p, g in zip(predictions[rows], labels[rows])]))
    for kind in ("em", "f1"):
        present = [metrics[f"{kind}_{s}"] for s in ("pos", "neg") if metrics[f"{kind}_{s}"] is not None]
        metrics[f"{kind}_avg"] = float(np.mean(present))
    return {name: metrics[name] for name in METRIC_NAMES}


def eval_probe(model: ProbeModel, samples: Sequence[ProbeSample], threshold: float = 0.5
               ) -> Dict[str, Optional[float]]:
    if not samples:
        raise DomainError("cannot score an empty probe dataset")
    _, labels = _stack(samples)
    return probe_metrics(predict(model, samples, threshold), labels, [s.positive for s in samples])


# ---------------------------------------------------------------------------
# Heatmaps

def heatmap_name(source: str, relation: str, game_id: str, step_index: int) -> str:
    return f"{source}.{relation}.{game_id}.{step_index}"


def node_labels(vocab: Vocab) -> List[str]:
    return list(vocab.entities) + [f"#{i}" for i in range(len(vocab.entities), vocab.capacity)]


def mean_adjacency(graphs: Sequence) -> np.ndarray:
    """Mean adjacency tensor over beliefs or discrete graphs"""
    if not graphs:
        raise DomainError("mean over no graphs")
    return np.mean([_dense_of(g) for g in graphs], axis=0)


def export_heatmap(graph, vocab: Vocab, relation: str, directory: str, name: str,
                   mean: Optional[np.ndarray] = None) -> Tuple[str, str]:
    """Write one relation slice as a labeled CSV grid and a PNG image

    Args:
        graph: BeliefGraph, DiscreteGraph or (2R, N, N) array
        vocab: Supplies the relation index and node labels
        relation: Base relation name
        directory: Output directory
        name: File stem, see heatmap_name
        mean: Optional mean adjacency tensor subtracted first

    Returns:
        Tuple of (csv path, png path)
    """
    if not vocab.has_relation(relation):
        raise DomainError(f"unknown relation: {relation!r}")
    values = _dense_of(graph)
    if mean is not None:
        values = values - mean
    grid = values[vocab.relation_index(relation)]
    labels = node_labels(vocab)
    os.makedirs(directory, exist_ok=True)
    csv_path = os.path.join(directory, f"{name}.csv")
    png_path = os.path.join(directory, f"{name}.png")

    with open(csv_path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow([""] + labels)
        for label, row in zip(labels, grid):
            writer.writerow([label] + [repr(float(v)) for v in row])

    limit = max(float(np.abs(grid).max()), 1e-6)
    fig, ax = plt.subplots(figsize=(12, 12))
    image = ax.imshow(grid, cmap="coolwarm", vmin=-limit, vmax=limit)
    ax.set_xticks(range(len(labels)))
    ax.set_yticks(range(len(labels)))
    ax.set_xticklabels(labels, rotation=90, fontsize=6)
    ax.set_yticklabels(labels, fontsize=6)
    ax.set_title(name)
    fig.colorbar(image, ax=ax, fraction=0.046)
    fig.tight_layout()
    fig.savefig(png_path, dpi=100)
    plt.close(fig)
    logger.debug("wrote heatmap %s", csv_path)
    return csv_path, png_path


def read_heatmap(path: str) -> Tuple[List[str], np.ndarray]:
    """Labels and values of a heatmap CSV"""
    with open(path, encoding="utf-8", newline="") as f:
        rows = list(csv.reader(f))
    if not rows:
        raise DomainError(f"empty heatmap file: {path}")
    labels = rows[0][1:]
    values = np.array([[float(v) for v in row[1:]] for row in rows[1:]])
    return labels, values


def walkthrough_graphs(spec: GameSpec, source: str, vocab: Vocab, model=None, seed: int = 0) -> List:
    """Representations after each walkthrough step of one game, starting at the reset"""
    tracker = graph_source(source, vocab, model, seed)
    state, obs, _ = reset(spec)
    graphs = [tracker.reset(state, obs.tokens)]
    for action in walkthrough(spec):
        state, obs, _, _, _ = step(state, action)
        graphs.append(tracker.update(state, obs.tokens, action.tokens))
    return graphs
