#!/usr/bin/env python3
"""
Pretraining module for the belief-graph laboratory.
Handles the self-supervised objectives of the graph updaters (observation
generation, contrastive observation classification, command generation)
and of the standalone graph encoder (action prediction, state prediction,
corrupted-node discrimination), with truncated backpropagation through
episode windows.
"""

import logging
from collections import Counter
from dataclasses import dataclass
from typing import Callable, Dict, Iterator, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from beliefgraph.config import ModelConfig, PretrainConfig
from beliefgraph.core.kgraph import DiscreteGraph, diff_to_commands, serialize_commands, to_dense
from beliefgraph.core.vocab import Vocab, WordVocab
from beliefgraph.core.worldgen import (
    ActionCandidate, GameSpec, TransitionRecord, ground_truth_full,
    ground_truth_seen, reset, step,
)
from beliefgraph.errors import CorpusError, DomainError
from beliefgraph.models.decoder import greedy_decode, strip_framing, teacher_forcing, token_nll
from beliefgraph.models.encoders import (
    GraphEncoder, TextEncoder, encode_candidates, pad_batch, pad_candidates,
)
from beliefgraph.models.updater import (
    RESTART, CommandGenerator, ContrastiveModel, ObservationGenerator, RecurrentTextModel,
    command_context, discrete_update, word_embedding,
)
from beliefgraph.nn.layers import MLP, Linear, Module, Parameter, uniform_init
from beliefgraph.nn.optim import RAdam
from beliefgraph.nn.tensor import (
    Tensor, bce_with_logits, concat, expand, log_softmax, masked_mean, no_grad,
)

logger = logging.getLogger(__name__)

UPDATER_TASKS = ("og", "coc", "cg", "og-drqn")
ENCODER_TASKS = ("ap", "sp", "dgi")
GRAPH_TYPES = ("seen", "full")


# ---------------------------------------------------------------------------
# Episode batches

class StepBatch(NamedTuple):
    """Step t of every episode in a batch"""

    obs: List[Tuple[str, ...]]
    actions: List[Tuple[str, ...]]
    mask: np.ndarray  # (B,) 1 where the episode is still running


@dataclass
class PretrainBatch:
    """Episodes laid side by side, one column per episode, in step order"""

    steps: List[StepBatch]

    @property
    def size(self) -> int:
        return len(self.steps[0].obs) if self.steps else 0

    def windows(self, unroll: int) -> Iterator[List[StepBatch]]:
        if unroll < 1:
            raise DomainError(f"unroll must be positive, got {unroll}")
        for start in range(0, len(self.steps), unroll):
            yield self.steps[start:start + unroll]


def episode_steps(episode: Sequence[TransitionRecord]) -> List[Tuple[Tuple[str, ...], Tuple[str, ...]]]:
    """(action, observation) pairs of an episode, opened by a virtual restart step"""
    steps = [(RESTART, tuple(episode[0].obs_prev.tokens))]
    steps += [(tuple(r.action), tuple(r.obs.tokens)) for r in episode]
    return steps


def make_batch(episodes: Sequence[Sequence[TransitionRecord]]) -> PretrainBatch:
    sequences = [episode_steps(ep) for ep in episodes]
    length = max(len(s) for s in sequences)
    steps = []
    for t in range(length):
        obs, actions = [], []
        mask = np.zeros(len(sequences))
        for i, seq in enumerate(sequences):
            if t < len(seq):
                actions.append(seq[t][0])
                obs.append(seq[t][1])
                mask[i] = 1.0
            else:
                actions.append(RESTART)
                obs.append(RESTART)
        steps.append(StepBatch(obs, actions, mask))
    return PretrainBatch(steps)


def make_batches(episodes: Sequence[Sequence[TransitionRecord]], batch_size: int,
                 rng: Optional[np.random.Generator] = None) -> List[PretrainBatch]:
    order = np.arange(len(episodes)) if rng is None else rng.permutation(len(episodes))
    return [make_batch([episodes[i] for i in order[start:start + batch_size]])
            for start in range(0, len(order), batch_size)]


def _check_corpus(episodes: Sequence) -> None:
    if not episodes:
        raise DomainError("empty corpus")


class WindowResult(NamedTuple):
    loss: Optional[Tensor]  # summed loss over the window
    weight: float  # number of loss terms (tokens or samples)
    carry: object  # recurrent state handed to the next window
    correct: float = 0.0
    seen: float = 0.0


def _detach(carry):
    if isinstance(carry, tuple):
        return tuple(c.detach() for c in carry)
    return carry.detach()


def _encode(wvocab: WordVocab, step_batch: StepBatch):
    obs_ids, obs_mask = pad_batch(wvocab, step_batch.obs)
    act_ids, act_mask = pad_batch(wvocab, step_batch.actions)
    return obs_ids, obs_mask, act_ids, act_mask


def _add(total: Optional[Tensor], term: Tensor) -> Tensor:
    return term if total is None else total + term


# ---------------------------------------------------------------------------
# Window losses

def og_window_loss(model: ObservationGenerator, carry, steps: Sequence[StepBatch]) -> WindowResult:
    """Teacher-forced observation likelihood over consecutive steps

    Args:
        model: Updater with its observation decoder
        carry: (h, belief) entering the window
        steps: Consecutive step batches

    Returns:
        WindowResult with the summed token NLL and the token count
    """
    h, belief = carry
    wvocab = model.updater.wvocab
    total, weight = None, 0.0
    for step_batch in steps:
        obs_ids, obs_mask, act_ids, act_mask = _encode(wvocab, step_batch)
        h, belief, h_action = model.updater.step_with_action(h, belief, obs_ids, obs_mask, act_ids, act_mask)
        in_ids, in_mask, out_ids, out_mask = teacher_forcing(wvocab, step_batch.obs)
        out_mask = out_mask * step_batch.mask[:, None]
        logits = model.decoder(in_ids, in_mask, model.memories(belief, h_action, act_mask))
        total = _add(total, token_nll(logits, out_ids, out_mask).sum())
        weight += float(out_mask.sum())
    return WindowResult(total, weight, (h, belief))


def og_drqn_window_loss(model: RecurrentTextModel, carry, steps: Sequence[StepBatch]) -> WindowResult:
    """Observation likelihood decoded from the recurrent text state"""
    h = carry
    total, weight = None, 0.0
    for step_batch in steps:
        obs_ids, obs_mask, act_ids, act_mask = _encode(model.wvocab, step_batch)
        h, h_action = model.step(h, obs_ids, obs_mask, act_ids, act_mask)
        in_ids, in_mask, out_ids, out_mask = teacher_forcing(model.wvocab, step_batch.obs)
        out_mask = out_mask * step_batch.mask[:, None]
        logits = model.decoder(in_ids, in_mask, model.memories(h, h_action, act_mask))
        total = _add(total, token_nll(logits, out_ids, out_mask).sum())
        weight += float(out_mask.sum())
    return WindowResult(total, weight, h)


def sample_negatives(pool: Sequence[Tuple[str, ...]], positives: Sequence[Tuple[str, ...]],
                     rng: np.random.Generator) -> List[Tuple[str, ...]]:
    """Uniform draws from the observation pool, redrawn while equal to the positive"""
    if len(set(pool)) < 2:
        raise DomainError("contrastive training needs at least 2 distinct observations")
    negatives = []
    for positive in positives:
        while True:
            candidate = pool[int(rng.integers(len(pool)))]
            if candidate != positive:
                break
        negatives.append(candidate)
    return negatives


def coc_window_loss(model: ContrastiveModel, carry, steps: Sequence[StepBatch],
                    negatives: Sequence[Sequence[Tuple[str, ...]]]) -> WindowResult:
    """Binary cross-entropy of true against corrupted observations

    Args:
        model: Updater with its discriminator
        carry: (h, belief) entering the window
        steps: Consecutive step batches
        negatives: One corrupted observation per example for every step

    Returns:
        WindowResult with summed BCE, sample count and discrimination accuracy counts
    """
    h, belief = carry
    wvocab = model.updater.wvocab
    total, weight, correct = None, 0.0, 0.0
    for step_batch, negative in zip(steps, negatives):
        obs_ids, obs_mask, act_ids, act_mask = _encode(wvocab, step_batch)
        h, belief = model.updater.step(h, belief, obs_ids, obs_mask, act_ids, act_mask)
        neg_ids, neg_mask = pad_batch(wvocab, negative)
        graph = model.pooled_graph(belief)
        pos_logits = model.score(graph, obs_ids, obs_mask)
        neg_logits = model.score(graph, neg_ids, neg_mask)
        mask = step_batch.mask
        ones = np.ones(mask.shape)
        loss = (bce_with_logits(pos_logits, ones) * mask).sum() + (bce_with_logits(neg_logits, 0 * ones) * mask).sum()
        total = _add(total, loss)
        weight += 2.0 * float(mask.sum())
        correct += float(((pos_logits.data > 0) * mask).sum() + ((neg_logits.data <= 0) * mask).sum())
    return WindowResult(total, weight, (h, belief), correct, weight)


def run_windows(model: Module, batch: PretrainBatch, unroll: int, window_fn: Callable,
                optimizer: Optional[RAdam] = None) -> Tuple[float, float, float, float]:
    """Push one batch through consecutive windows, detaching state between them

    Args:
        model: Model whose `initial_carry(batch)` opens every episode
        batch: Episode batch
        unroll: Window length in steps
        window_fn: `(model, carry, steps) -> WindowResult`
        optimizer: Step after every window when given (training)

    Returns:
        Tuple of (summed loss, loss terms, correct, seen)
    """
    carry = initial_carry(model, batch.size)
    loss_sum = weight = correct = seen = 0.0
    for steps in batch.windows(unroll):
        result = window_fn(model, carry, steps)
        if result.weight > 0:
            if optimizer is not None:
                (result.loss * (1.0 / result.weight)).backward()
                optimizer.step()
                optimizer.zero_grad()
            loss_sum += result.loss.item()
            weight += result.weight
        correct += result.correct
        seen += result.seen
        carry = _detach(result.carry)
    return loss_sum, weight, correct, seen


def initial_carry(model: Module, batch: int):
    if isinstance(model, RecurrentTextModel):
        return model.initial(batch)
    return model.updater.initial(batch)


# ---------------------------------------------------------------------------
# Metrics

def token_f1(predicted: Sequence[str], reference: Sequence[str]) -> float:
    """Bag-of-tokens F1; two empty sequences score 1"""
    if not predicted and not reference:
        return 1.0
    overlap = sum((Counter(predicted) & Counter(reference)).values())
    if overlap == 0:
        return 0.0
    precision = overlap / len(predicted)
    recall = overlap / len(reference)
    return 2 * precision * recall / (precision + recall)


def graph_f1(predicted: DiscreteGraph, reference: DiscreteGraph) -> float:
    """Triple-level F1; two empty graphs score 1"""
    if not predicted.triples and not reference.triples:
        return 1.0
    overlap = len(predicted.triples & reference.triples)
    if overlap == 0:
        return 0.0
    precision = overlap / len(predicted.triples)
    recall = overlap / len(reference.triples)
    return 2 * precision * recall / (precision + recall)


def og_decode_f1(model, batch: PretrainBatch, limit: int) -> List[float]:
    """Greedy-reconstruction F1 of the first `limit` running steps of a batch"""
    scores: List[float] = []
    wvocab = model.wvocab if isinstance(model, RecurrentTextModel) else model.updater.wvocab
    carry = initial_carry(model, batch.size)
    with no_grad():
        for step_batch in batch.steps:
            if len(scores) >= limit:
                break
            obs_ids, obs_mask, act_ids, act_mask = _encode(wvocab, step_batch)
            if isinstance(model, RecurrentTextModel):
                carry, h_action = model.step(carry, obs_ids, obs_mask, act_ids, act_mask)
                memories = model.memories(carry, h_action, act_mask)
            else:
                h, belief, h_action = model.updater.step_with_action(*carry, obs_ids, obs_mask, act_ids, act_mask)
                carry = (h, belief)
                memories = model.memories(belief, h_action, act_mask)
            longest = max(len(o) for o in step_batch.obs)
            decoded = greedy_decode(model.decoder, wvocab, memories, max_len=longest + 10)
            for tokens, reference, running in zip(decoded, step_batch.obs, step_batch.mask):
                if running and len(scores) < limit:
                    scores.append(token_f1(strip_framing(tokens), reference))
    return scores


# ---------------------------------------------------------------------------
# Updater pretraining

def _fit_sequences(model: Module, train: Sequence, valid: Sequence, config: PretrainConfig,
                   window_factory: Callable[[np.random.Generator, bool], Callable], desc: str,
                   validate_extra: Optional[Callable[[List[PretrainBatch]], Dict[str, float]]] = None,
                   show_progress: bool = False) -> List[Dict[str, float]]:
    rng = np.random.default_rng(config.seed)
    optimizer = RAdam(model.trainable_parameters(), lr=config.lr, clip=config.clip)
    valid_batches = make_batches(valid, config.batch_size) if valid else []
    history = []
    for epoch in range(config.epochs):
        batches = make_batches(train, config.batch_size, rng)
        loss_sum = weight = 0.0
        for batch in tqdm(batches, desc=f"{desc} epoch {epoch + 1}", disable=not show_progress):
            loss, count, _, _ = run_windows(model, batch, config.unroll, window_factory(rng, True), optimizer)
            loss_sum += loss
            weight += count
        row = {"epoch": epoch + 1, "train_loss": loss_sum / max(weight, 1.0)}
        if valid_batches:
            v_loss = v_weight = v_correct = v_seen = 0.0
            with no_grad():
                for batch in valid_batches:
                    loss, count, correct, seen = run_windows(model, batch, config.unroll, window_factory(rng, False))
                    v_loss += loss
                    v_weight += count
                    v_correct += correct
                    v_seen += seen
            row["valid_loss"] = v_loss / max(v_weight, 1.0)
            if v_seen:
                row["valid_accuracy"] = v_correct / v_seen
            if validate_extra is not None:
                row.update(validate_extra(valid_batches))
        logger.info("%s epoch %d: %s", desc, epoch + 1,
                    ", ".join(f"{k}={v:.4f}" for k, v in row.items() if k != "epoch"))
        history.append(row)
    return history


def pretrain_og(train: Sequence[Sequence[TransitionRecord]], valid: Sequence[Sequence[TransitionRecord]],
                vocab: Vocab, wvocab: WordVocab, model_config: ModelConfig, config: PretrainConfig,
                model: Optional[ObservationGenerator] = None, decode_samples: int = 50,
                show_progress: bool = False) -> Tuple[ObservationGenerator, List[Dict[str, float]]]:
    """Train the graph updater by reconstructing each observation from the belief

    Args:
        train: Training episodes
        valid: Validation episodes (may be empty)
        vocab: Entity and relation vocabulary
        wvocab: Word vocabulary
        model_config: Model dimensions
        config: Pretraining schedule
        model: Model to continue training (a fresh one by default)
        decode_samples: Validation steps scored by greedy-decoding F1
        show_progress: Show a progress bar

    Returns:
        Tuple of (trained model, per-epoch history)
    """
    _check_corpus(train)
    model = model or ObservationGenerator(model_config, vocab, wvocab, np.random.default_rng(model_config.seed))

    def extra(batches: List[PretrainBatch]) -> Dict[str, float]:
        scores: List[float] = []
        for batch in batches:
            scores += og_decode_f1(model, batch, decode_samples - len(scores))
            if len(scores) >= decode_samples:
                break
        return {"valid_f1": float(np.mean(scores))} if scores else {}

    history = _fit_sequences(model, train, valid, config, lambda rng, training: og_window_loss, "og",
                             extra if decode_samples else None, show_progress)
    return model, history


def pretrain_og_drqn(train, valid, wvocab: WordVocab, model_config: ModelConfig, config: PretrainConfig,
                     model: Optional[RecurrentTextModel] = None, show_progress: bool = False
                     ) -> Tuple[RecurrentTextModel, List[Dict[str, float]]]:
    """Train the recurrent text model with the observation-generation objective"""
    _check_corpus(train)
    model = model or RecurrentTextModel(model_config, wvocab, np.random.default_rng(model_config.seed))
    history = _fit_sequences(model, train, valid, config, lambda rng, training: og_drqn_window_loss,
                             "og-drqn", None, show_progress)
    return model, history


def observation_pool(episodes: Sequence[Sequence[TransitionRecord]]) -> List[Tuple[str, ...]]:
    """Every observation of the corpus, first observations included"""
    pool = []
    for episode in episodes:
        pool.extend(obs for _, obs in episode_steps(episode))
    return pool


def pretrain_coc(train: Sequence[Sequence[TransitionRecord]], valid: Sequence[Sequence[TransitionRecord]],
                 vocab: Vocab, wvocab: WordVocab, model_config: ModelConfig, config: PretrainConfig,
                 model: Optional[ContrastiveModel] = None, show_progress: bool = False
                 ) -> Tuple[ContrastiveModel, List[Dict[str, float]]]:
    """Train the graph updater to tell true observations from random corpus ones

    Training negatives come from the training observations only. Validation
    draws from both splits and measures accuracy with threshold 0.5 on the
    held-out episodes.
    """
    _check_corpus(train)
    model = model or ContrastiveModel(model_config, vocab, wvocab, np.random.default_rng(model_config.seed))
    train_pool = observation_pool(train)
    if len(set(train_pool)) < 2:
        raise DomainError("contrastive training needs at least 2 distinct observations")
    valid_pool = train_pool + observation_pool(valid)

    def factory(rng: np.random.Generator, training: bool) -> Callable:
        pool = train_pool if training else valid_pool

        def window(m, carry, steps):
            negatives = [sample_negatives(pool, s.obs, rng) for s in steps]
            return coc_window_loss(m, carry, steps, negatives)
        return window

    history = _fit_sequences(model, train, valid, config, factory, "coc", None, show_progress)
    return model, history


# ---------------------------------------------------------------------------
# Command generation

class CommandExample(NamedTuple):
    g_prev: DiscreteGraph
    action: Tuple[str, ...]
    obs: Tuple[str, ...]
    g_next: DiscreteGraph


def command_examples(episodes: Sequence[Sequence[TransitionRecord]], vocab: Vocab) -> List[CommandExample]:
    """Seen-graph transitions, each episode opened by a restart step from the empty graph"""
    examples = []
    for episode in episodes:
        first = episode[0]
        examples.append(CommandExample(DiscreteGraph(vocab), RESTART, tuple(first.obs_prev.tokens), first.gseen_prev))
        for r in episode:
            examples.append(CommandExample(r.gseen_prev, tuple(r.action), tuple(r.obs.tokens), r.gseen))
    return examples


def command_target(example: CommandExample, vocab: Vocab) -> List[str]:
    """Framed command string turning g_prev into g_next"""
    return serialize_commands(diff_to_commands(example.g_prev, example.g_next), vocab)


class ExampleResult(NamedTuple):
    loss: Tensor
    weight: float
    correct: float = 0.0
    seen: float = 0.0


def cg_loss(model: CommandGenerator, examples: Sequence[CommandExample], rng=None) -> ExampleResult:
    """Teacher-forced NLL of the target command strings"""
    memories = model.memories([e.g_prev for e in examples], [command_context(e.obs, e.action) for e in examples])
    targets = [strip_framing(command_target(e, model.vocab)) for e in examples]
    in_ids, in_mask, out_ids, out_mask = teacher_forcing(model.wvocab, targets)
    logits = model.decoder(in_ids, in_mask, memories)
    return ExampleResult(token_nll(logits, out_ids, out_mask).sum(), float(out_mask.sum()))


def _fit_examples(model: Module, train: Sequence, valid: Sequence, config: PretrainConfig,
                  loss_fn: Callable, desc: str,
                  validate_extra: Optional[Callable[[], Dict[str, float]]] = None,
                  show_progress: bool = False) -> List[Dict[str, float]]:
    rng = np.random.default_rng(config.seed)
    optimizer = RAdam(model.trainable_parameters(), lr=config.lr, clip=config.clip)
    history = []
    for epoch in range(config.epochs):
        order = rng.permutation(len(train))
        loss_sum = weight = 0.0
        starts = range(0, len(order), config.batch_size)
        for start in tqdm(starts, desc=f"{desc} epoch {epoch + 1}", disable=not show_progress):
            chunk = [train[i] for i in order[start:start + config.batch_size]]
            result = loss_fn(model, chunk, rng)
            if result.weight <= 0:
                continue
            (result.loss * (1.0 / result.weight)).backward()
            optimizer.step()
            optimizer.zero_grad()
            loss_sum += result.loss.item()
            weight += result.weight
        row = {"epoch": epoch + 1, "train_loss": loss_sum / max(weight, 1.0)}
        if valid:
            v_loss = v_weight = v_correct = v_seen = 0.0
            with no_grad():
                for start in range(0, len(valid), config.batch_size):
                    result = loss_fn(model, valid[start:start + config.batch_size], rng)
                    v_loss += result.loss.item()
                    v_weight += result.weight
                    v_correct += result.correct
                    v_seen += result.seen
            row["valid_loss"] = v_loss / max(v_weight, 1.0)
            if v_seen:
                row["valid_accuracy"] = v_correct / v_seen
            if validate_extra is not None:
                row.update(validate_extra())
        logger.info("%s epoch %d: %s", desc, epoch + 1,
                    ", ".join(f"{k}={v:.4f}" for k, v in row.items() if k != "epoch"))
        history.append(row)
    return history


def pretrain_cg(train: Sequence[Sequence[TransitionRecord]], valid: Sequence[Sequence[TransitionRecord]],
                vocab: Vocab, wvocab: WordVocab, model_config: ModelConfig, config: PretrainConfig,
                model: Optional[CommandGenerator] = None, decode_samples: int = 50,
                show_progress: bool = False) -> Tuple[CommandGenerator, List[Dict[str, float]]]:
    """Train the discrete updater to emit the commands of each seen-graph change

    Validation reports token NLL and the triple F1 of greedily decoded
    updates applied to the previous seen graph.
    """
    _check_corpus(train)
    model = model or CommandGenerator(model_config, vocab, wvocab, np.random.default_rng(model_config.seed))
    train_examples = command_examples(train, vocab)
    valid_examples = command_examples(valid, vocab) if valid else []

    def extra() -> Dict[str, float]:
        scores = [graph_f1(discrete_update(model, e.g_prev, e.obs, e.action), e.g_next)
                  for e in valid_examples[:decode_samples]]
        return {"valid_graph_f1": float(np.mean(scores))} if scores else {}

    history = _fit_examples(model, train_examples, valid_examples, config, cg_loss, "cg",
                            extra if decode_samples else None, show_progress)
    return model, history


# ---------------------------------------------------------------------------
# Graph encoder pretraining

def _graph_of(record: TransitionRecord, graph_type: str, previous: bool) -> DiscreteGraph:
    if graph_type == "seen":
        return record.gseen_prev if previous else record.gseen
    graph = record.gfull_prev if previous else record.gfull
    if graph is None:
        raise CorpusError(f"record {record.game_id}/{record.t} has no full previous graph")
    return graph


def _dense(graphs: Sequence[DiscreteGraph]) -> np.ndarray:
    return np.stack([to_dense(g).values for g in graphs])


class GraphPretrainModel(Module):
    """Graph encoder with the head of one pretraining task"""

    def __init__(self, task: str, config: ModelConfig, vocab: Vocab, wvocab: WordVocab,
                 rng: np.random.Generator):
        if task not in ENCODER_TASKS:
            raise DomainError(f"unknown graph encoder task: {task!r}")
        hidden = config.hidden
        self.task = task
        self.vocab = vocab
        self.wvocab = wvocab
        self.words = word_embedding(config, wvocab, rng)
        self.graph_encoder = GraphEncoder(config, vocab, wvocab, self.words, rng)
        self.text_encoder = TextEncoder(config, self.words, rng) if task != "dgi" else None
        if task == "dgi":
            self.dgi_weight = Parameter(uniform_init(rng, hidden, (hidden, hidden)))
        else:
            self.query_map = Linear(2 * hidden, hidden, rng)
            self.scorer = MLP([2 * hidden, hidden, 1], rng)

    @property
    def role(self) -> str:
        return f"genc-{self.task}"

    def pooled(self, graphs: Sequence[DiscreteGraph]) -> Tensor:
        return self.graph_encoder(_dense(graphs)).mean(axis=1)

    def rank(self, query: Tensor, candidates: Tensor, cand_mask: np.ndarray, labels: Sequence[int]) -> ExampleResult:
        b, c, hidden = candidates.shape
        joined = concat([expand(query.reshape(b, 1, hidden), (b, c, hidden)), candidates], axis=-1)
        scores = self.scorer(joined).reshape(b, c)
        log_probs = log_softmax(scores, axis=-1, mask=cand_mask)
        labels = np.asarray(labels, dtype=np.int64)
        nll = -log_probs[np.arange(b), labels].sum()
        masked = np.where(cand_mask > 0, scores.data, -np.inf)
        correct = float(np.sum(np.argmax(masked, axis=-1) == labels))
        return ExampleResult(nll, float(b), correct, float(b))


class ActionExample(NamedTuple):
    g_prev: DiscreteGraph
    g_next: DiscreteGraph
    candidates: Tuple[Tuple[str, ...], ...]
    label: int


class StateExample(NamedTuple):
    g_prev: DiscreteGraph
    action: Tuple[str, ...]
    candidates: Tuple[DiscreteGraph, ...]
    label: int


def action_examples(records: Sequence[TransitionRecord], graph_type: str) -> List[ActionExample]:
    examples = []
    for r in records:
        if tuple(r.action) in r.candidates:
            examples.append(ActionExample(_graph_of(r, graph_type, True), _graph_of(r, graph_type, False),
                                          tuple(r.candidates), list(r.candidates).index(tuple(r.action))))
    return examples


def state_examples(episodes: Sequence[Sequence[TransitionRecord]], specs: Dict[str, GameSpec],
                   graph_type: str, vocab: Vocab) -> List[StateExample]:
    """Replay each episode and collect the distinct graphs every candidate would lead to"""
    truth = ground_truth_seen if graph_type == "seen" else ground_truth_full
    examples = []
    for episode in episodes:
        game_id = episode[0].game_id
        if game_id not in specs:
            raise CorpusError(f"no game spec for {game_id}")
        state, _, candidates = reset(specs[game_id])
        for record in episode:
            graphs: List[DiscreteGraph] = []
            for candidate in candidates:
                graph = truth(step(state, candidate)[0], vocab)
                if graph not in graphs:
                    graphs.append(graph)
            target = _graph_of(record, graph_type, False)
            if target not in graphs:
                raise CorpusError(f"replay of {game_id} diverged at step {record.t}")
            if len(graphs) > 1:
                examples.append(StateExample(_graph_of(record, graph_type, True), tuple(record.action),
                                             tuple(graphs), graphs.index(target)))
            state, _, _, _, candidates = step(state, ActionCandidate(tuple(record.action)))
    return examples


def ap_loss(model: GraphPretrainModel, examples: Sequence[ActionExample], rng=None) -> ExampleResult:
    """Cross-entropy of the taken action among the candidates, given both graphs"""
    prev = model.pooled([e.g_prev for e in examples])
    nxt = model.pooled([e.g_next for e in examples])
    query = model.query_map(concat([prev, nxt], axis=-1)).tanh()
    ids, token_mask, cand_mask = pad_candidates(model.wvocab, [e.candidates for e in examples])
    cands = masked_mean(encode_candidates(model.text_encoder, ids, token_mask), token_mask)
    return model.rank(query, cands, cand_mask, [e.label for e in examples])


def sp_loss(model: GraphPretrainModel, examples: Sequence[StateExample], rng=None) -> ExampleResult:
    """Cross-entropy of the true next graph among the reachable ones, given graph and action"""
    prev = model.pooled([e.g_prev for e in examples])
    act_ids, act_mask = pad_batch(model.wvocab, [e.action for e in examples])
    action = masked_mean(model.text_encoder(act_ids, act_mask), act_mask)
    query = model.query_map(concat([prev, action], axis=-1)).tanh()

    flat = [g for e in examples for g in e.candidates]
    pooled = model.pooled(flat)
    count = max(len(e.candidates) for e in examples)
    index = np.zeros((len(examples), count), dtype=np.int64)
    cand_mask = np.zeros((len(examples), count))
    offset = 0
    for i, e in enumerate(examples):
        index[i, :len(e.candidates)] = np.arange(offset, offset + len(e.candidates))
        cand_mask[i, :len(e.candidates)] = 1.0
        offset += len(e.candidates)
    return model.rank(query, pooled[index], cand_mask, [e.label for e in examples])


def corrupt_features(features: Tensor, batch: int, rng: np.random.Generator) -> Tensor:
    """Row-shuffled copies (B, N, H) of the initial node features (N, H)"""
    n = features.shape[0]
    perms = np.stack([rng.permutation(n) for _ in range(batch)])
    return features[perms]


def dgi_loss(model: GraphPretrainModel, graphs: Sequence[DiscreteGraph],
             rng: np.random.Generator) -> ExampleResult:
    """Discriminate node states of true graphs from those computed on shuffled features"""
    adj = _dense(graphs)
    b = adj.shape[0]
    encoder = model.graph_encoder
    features = encoder.initial_features()
    positive = encoder(adj, features)
    negative = encoder(adj, corrupt_features(features, b, rng))
    summary = positive.mean(axis=1).sigmoid()
    hidden = summary.shape[-1]
    summary = summary.reshape(b, 1, hidden)
    pos_logits = ((positive @ model.dgi_weight) * summary).sum(axis=-1)
    neg_logits = ((negative @ model.dgi_weight) * summary).sum(axis=-1)
    ones = np.ones(pos_logits.shape)
    loss = bce_with_logits(pos_logits, ones).sum() + bce_with_logits(neg_logits, 0 * ones).sum()
    correct = float(np.sum(pos_logits.data > 0) + np.sum(neg_logits.data <= 0))
    return ExampleResult(loss, 2.0 * ones.size, correct, 2.0 * ones.size)


def pretrain_graph_encoder(task: str, train: Sequence[Sequence[TransitionRecord]],
                           valid: Sequence[Sequence[TransitionRecord]], vocab: Vocab, wvocab: WordVocab,
                           model_config: ModelConfig, config: PretrainConfig,
                           specs: Optional[Dict[str, GameSpec]] = None, show_progress: bool = False
                           ) -> Tuple[GraphPretrainModel, List[Dict[str, float]]]:
    """Pretrain a graph encoder with action prediction, state prediction or DGI

    Args:
        task: "ap", "sp" or "dgi"
        train: Training episodes
        valid: Validation episodes
        vocab: Entity and relation vocabulary
        wvocab: Word vocabulary
        model_config: Model dimensions
        config: Pretraining schedule; `graph_type` picks seen or full graphs
        specs: Game specs by id, needed to replay games for state prediction

    Returns:
        Tuple of (model, per-epoch history with held-out accuracy)
    """
    if task not in ENCODER_TASKS:
        raise DomainError(f"unknown graph encoder task: {task!r}")
    if config.graph_type not in GRAPH_TYPES:
        raise DomainError(f"graph_type must be one of {GRAPH_TYPES}, got {config.graph_type!r}")
    _check_corpus(train)
    model = GraphPretrainModel(task, model_config, vocab, wvocab, np.random.default_rng(model_config.seed))
    train_records = [r for ep in train for r in ep]
    valid_records = [r for ep in valid for r in ep]
    if task == "ap":
        train_set = action_examples(train_records, config.graph_type)
        valid_set = action_examples(valid_records, config.graph_type)
        loss_fn = ap_loss
    elif task == "sp":
        if specs is None:
            raise DomainError("state prediction needs the game specs")
        train_set = state_examples(train, specs, config.graph_type, vocab)
        valid_set = state_examples(valid, specs, config.graph_type, vocab)
        loss_fn = sp_loss
    else:
        train_set = _unique_graphs(train_records, config.graph_type)
        valid_set = _unique_graphs(valid_records, config.graph_type)
        loss_fn = dgi_loss
    if not train_set:
        raise DomainError(f"no {task} training examples in corpus")
    history = _fit_examples(model, train_set, valid_set, config, loss_fn, task, None, show_progress)
    return model, history


def _unique_graphs(records: Sequence[TransitionRecord], graph_type: str) -> List[DiscreteGraph]:
    graphs = []
    seen = set()
    for r in records:
        graph = _graph_of(r, graph_type, False)
        if graph.triples not in seen:
            seen.add(graph.triples)
            graphs.append(graph)
    return graphs
