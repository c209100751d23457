#!/usr/bin/env python3
"""
Trainer module for the belief-graph laboratory.
Handles the action selector's reinforcement-learning loop: epsilon-greedy
play with belief tracking, prioritized n-step Double-Q learning, the
trajectory filter, patience-based best-policy restoring and evaluation.
"""

import copy
import csv
import logging
import math
import os
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
from tqdm import tqdm

from beliefgraph.agent.replay import PrioritizedReplay, ReplayItem, Snapshot
from beliefgraph.agent.selector import ActionSelector
from beliefgraph.config import TrainConfig
from beliefgraph.core.kgraph import DiscreteGraph
from beliefgraph.core.vocab import Vocab
from beliefgraph.core.worldgen import GameSpec, GameState, ground_truth_full, ground_truth_seen, reset, step
from beliefgraph.errors import DomainError
from beliefgraph.models.updater import RESTART, CommandGenerator, GraphUpdater, discrete_update
from beliefgraph.nn.layers import Module
from beliefgraph.nn.optim import RAdam
from beliefgraph.nn.tensor import Tensor, concat, no_grad, smooth_l1

logger = logging.getLogger(__name__)

CURVE_FIELDS = ("episode", "train_score", "valid_score", "epsilon", "loss")


# ---------------------------------------------------------------------------
# Action choice and targets

def select_action(scores, epsilon: float, rng: np.random.Generator, mask: Optional[np.ndarray] = None) -> int:
    """Epsilon-greedy choice over candidate scores

    Args:
        scores: Scores (C,) as an array or Tensor
        epsilon: Probability of a uniform random candidate
        rng: Sampler
        mask: Optional 0/1 validity mask (C,)

    Returns:
        Candidate index; ties go to the lowest index
    """
    values = np.asarray(scores.data if isinstance(scores, Tensor) else scores, dtype=float).reshape(-1)
    valid = np.flatnonzero(mask > 0) if mask is not None else np.arange(values.size)
    if valid.size == 0:
        raise DomainError("no candidate to choose from")
    if rng.random() < epsilon:
        return int(valid[rng.integers(valid.size)])
    return int(valid[np.argmax(values[valid])])


def nstep_double_q_target(rewards: Sequence[Sequence[float]], terminal: Sequence[bool],
                          q_online_next: np.ndarray, q_target_next: np.ndarray,
                          next_mask: np.ndarray, gamma: float) -> np.ndarray:
    """Multi-step Double-Q targets

    Args:
        rewards: Per item, the m <= n rewards r_t .. r_{t+m-1}
        terminal: Per item, whether the episode ended within those m steps
        q_online_next: Online Q values at s_{t+m} (B, C)
        q_target_next: Target-network Q values at s_{t+m} (B, C)
        next_mask: Candidate mask at s_{t+m} (B, C)
        gamma: Discount

    Returns:
        Targets (B,)
    """
    targets = np.zeros(len(rewards))
    for i, (chain, done) in enumerate(zip(rewards, terminal)):
        value = sum(gamma ** k * r for k, r in enumerate(chain))
        if not done:
            online = np.where(next_mask[i] > 0, q_online_next[i], -np.inf)
            value += gamma ** len(chain) * q_target_next[i, int(np.argmax(online))]
        targets[i] = value
    return targets


def count_bonus(key: str, counts: Counter, lambda_c: float, gamma_c: float, training: bool) -> float:
    """Episodic exploration bonus lambda_c * count ** -gamma_c (0 outside training)"""
    if not training:
        return 0.0
    counts[key] += 1
    return lambda_c * counts[key] ** (-gamma_c)


def epsilon_at(episode: int, config: TrainConfig) -> float:
    fraction = min(1.0, episode / max(config.epsilon_anneal, 1))
    return config.epsilon_start + (config.epsilon_end - config.epsilon_start) * fraction


def beta_at(episode: int, config: TrainConfig) -> float:
    fraction = min(1.0, episode / max(config.nb_episodes, 1))
    return config.beta_start + (config.beta_end - config.beta_start) * fraction


class BestPolicyKeeper:
    """Class for keeping the best parameters and restoring them after stalls"""

    def __init__(self, module: Module, patience: int):
        self.module = module
        self.patience = patience
        self.best_score = -math.inf
        self.best_state: Optional[Dict[str, np.ndarray]] = None
        self.failures = 0

    def update(self, score: float) -> str:
        """Record an evaluation score

        Returns:
            "improved", "stalled" or "restored"
        """
        if score > self.best_score:
            self.best_score = score
            self.best_state = self.module.state_dict()
            self.failures = 0
            return "improved"
        self.failures += 1
        if self.failures >= self.patience and self.best_state is not None:
            self.module.load_state_dict(self.best_state)
            self.failures = 0
            logger.info("restored best policy (score %.4f)", self.best_score)
            return "restored"
        return "stalled"


# ---------------------------------------------------------------------------
# Belief trackers

class NullTracker:
    """No graph input"""

    def reset(self, state: GameState, obs: Sequence[str]):
        return None

    def update(self, state: GameState, obs: Sequence[str], action: Sequence[str]):
        return None


class TruthTracker(NullTracker):
    """Ground-truth graphs straight from the engine"""

    def __init__(self, vocab: Vocab, graph_type: str = "full"):
        if graph_type not in ("seen", "full"):
            raise DomainError(f"graph_type must be seen or full, got {graph_type!r}")
        self.vocab = vocab
        self.truth = ground_truth_full if graph_type == "full" else ground_truth_seen

    def reset(self, state, obs):
        return self.truth(state, self.vocab)

    def update(self, state, obs, action):
        return self.truth(state, self.vocab)


class UpdaterTracker(NullTracker):
    """Continuous beliefs from a frozen graph updater"""

    def __init__(self, updater: GraphUpdater):
        self.updater = updater
        self.state = None

    def reset(self, state, obs):
        self.state = self.updater.update_belief(self.updater.initial_state(), obs, RESTART)
        return self.state.belief

    def update(self, state, obs, action):
        self.state = self.updater.update_belief(self.state, obs, action)
        return self.state.belief


class CommandTracker(NullTracker):
    """Discrete beliefs from a frozen command generator"""

    def __init__(self, model: CommandGenerator):
        self.model = model
        self.graph: Optional[DiscreteGraph] = None

    def reset(self, state, obs):
        self.graph = discrete_update(self.model, DiscreteGraph(self.model.vocab), obs, RESTART)
        return self.graph

    def update(self, state, obs, action):
        self.graph = discrete_update(self.model, self.graph, obs, action)
        return self.graph


Tracker = Union[NullTracker, TruthTracker, UpdaterTracker, CommandTracker]


# ---------------------------------------------------------------------------
# Episodes

@dataclass
class EpisodeResult:
    game_id: str
    score: int
    max_score: int
    steps: int
    won: bool
    items: List[ReplayItem] = field(default_factory=list)

    @property
    def normalized(self) -> float:
        return self.score / self.max_score if self.max_score else 0.0


def run_episode(selector: ActionSelector, tracker: Tracker, spec: GameSpec, epsilon: float,
                rng: np.random.Generator, max_steps: int, episode: int = 0, training: bool = False,
                config: Optional[TrainConfig] = None) -> EpisodeResult:
    """Play one game with an epsilon-greedy policy

    Args:
        selector: Q-network
        tracker: Source of the graph input
        spec: Game to play
        epsilon: Exploration rate
        rng: Sampler
        max_steps: Step cap
        episode: Episode index stored in replay items
        training: Add the count bonus (when the variant uses it)
        config: Count-bonus constants

    Returns:
        EpisodeResult with the replay items of the episode
    """
    variant = selector.variant
    state, obs, candidates = reset(spec)
    with no_grad():
        snapshot = Snapshot(obs.tokens, tuple(c.tokens for c in candidates), tracker.reset(state, obs.tokens))
    counts: Counter = Counter()
    bonus_on = variant.count_bonus and training and config is not None
    if bonus_on:
        counts[obs.text] += 1
    recurrent = None
    items: List[ReplayItem] = []
    for t in range(max_steps):
        with no_grad():
            scores, mask, recurrent = selector.q_values([snapshot], recurrent)
        index = select_action(scores.data[0], epsilon, rng, mask[0])
        action = candidates[index]
        state, obs, reward, done, candidates = step(state, action)
        with no_grad():
            graph = tracker.update(state, obs.tokens, action.tokens)
        bonus = count_bonus(obs.text, counts, config.count_lambda, config.count_gamma, True) if bonus_on else 0.0
        next_snapshot = Snapshot(obs.tokens, tuple(c.tokens for c in candidates), graph)
        items.append(ReplayItem(snapshot, index, float(reward) + bonus, next_snapshot, done, episode, t))
        snapshot = next_snapshot
        if done:
            break
    return EpisodeResult(spec.game_id, state.score, spec.max_score, len(items), state.status == "won", items)


def evaluate(selector: ActionSelector, tracker: Tracker, games: Sequence[GameSpec], max_steps: int = 50,
             seed: int = 0) -> float:
    """Mean normalized score of greedy play, one episode per game"""
    if not games:
        raise DomainError("empty game set")
    rng = np.random.default_rng(seed)
    scores = [run_episode(selector, tracker, spec, 0.0, rng, max_steps).normalized for spec in games]
    return float(np.mean(scores))


def evaluate_random(games: Sequence[GameSpec], seed: int = 0, max_steps: int = 50) -> float:
    """Mean normalized score of uniformly random play"""
    if not games:
        raise DomainError("empty game set")
    rng = np.random.default_rng(seed)
    scores = []
    for spec in games:
        state, _, candidates = reset(spec)
        for _ in range(max_steps):
            state, _, _, done, candidates = step(state, candidates[int(rng.integers(len(candidates)))])
            if done:
                break
        scores.append(state.score / spec.max_score)
    return float(np.mean(scores))


# ---------------------------------------------------------------------------
# Learning

class LearnResult(NamedTuple):
    loss: float
    td_errors: np.ndarray


def _bootstrap(q_net, snapshots: Sequence[Snapshot], needed: Sequence[bool]
               ) -> Tuple[np.ndarray, np.ndarray]:
    """Q values and masks at bootstrap states; rows that are not needed stay zero"""
    rows = [i for i, flag in enumerate(needed) if flag]
    if not rows:
        return np.zeros((len(snapshots), 1)), np.ones((len(snapshots), 1))
    with no_grad():
        q, mask, _ = q_net.q_values([snapshots[i] for i in rows])
    values = np.zeros((len(snapshots), q.shape[1]))
    masks = np.ones((len(snapshots), q.shape[1]))
    values[rows] = q.data
    masks[rows] = mask
    return values, masks


def learn_step(online, target, replay: PrioritizedReplay, optimizer: RAdam, batch_size: int, gamma: float,
               rng: np.random.Generator, beta: float = 0.4, n_min: int = 1, n_max: int = 3) -> LearnResult:
    """One prioritized n-step Double-Q update

    Args:
        online: Network with `q_values(snapshots)` that is being trained
        target: Network of the same kind used to evaluate bootstrap actions
        replay: Buffer to sample from
        optimizer: Optimizer over the online parameters
        batch_size: Sampled items
        gamma: Discount
        rng: Sampler of items and return lengths
        beta: Importance-sampling exponent
        n_min: Shortest return
        n_max: Longest return

    Returns:
        LearnResult with the mean loss and the TD errors
    """
    indices, items, weights = replay.sample(batch_size, rng, beta)
    chains = [replay.following(i, int(rng.integers(n_min, n_max + 1))) for i in indices]
    rewards = [[it.reward for it in chain] for chain in chains]
    terminal = [chain[-1].done for chain in chains]
    bootstrap = [chain[-1].next_state for chain in chains]
    needed = [not done for done in terminal]
    q_online_next, next_mask = _bootstrap(online, bootstrap, needed)
    q_target_next, _ = _bootstrap(target, bootstrap, needed)
    targets = nstep_double_q_target(rewards, terminal, q_online_next, q_target_next, next_mask, gamma)

    scores, _, _ = online.q_values([it.state for it in items])
    actions = np.array([it.action for it in items])
    chosen = scores[np.arange(len(items)), actions]
    td = targets - chosen.data
    loss = (smooth_l1(chosen - targets) * weights).mean()
    loss.backward()
    optimizer.step()
    optimizer.zero_grad()
    replay.update_priorities(indices, td)
    return LearnResult(loss.item(), td)


def learn_step_recurrent(online: ActionSelector, target: ActionSelector, replay: PrioritizedReplay,
                         optimizer: RAdam, batch_size: int, gamma: float, rng: np.random.Generator,
                         beta: float = 0.4, burn_in: int = 4, update_length: int = 4) -> LearnResult:
    """Double-Q update over sampled sequences for recurrent policies

    The first `burn_in` steps of each sequence only warm up the recurrent
    state; the following `update_length` steps carry one-step targets.
    """
    indices, _, weights = replay.sample(batch_size, rng, beta)
    sequences = [replay.sequence(i, burn_in + update_length) for i in indices]
    length = max(len(s) for s in sequences)
    b = len(sequences)

    def snapshot_at(seq: List[ReplayItem], k: int) -> Snapshot:
        if k < len(seq):
            return seq[k].state
        last = seq[-1]
        return last.state if last.done else last.next_state

    # Position length holds the bootstrap state of the final item
    states = [[snapshot_at(seq, k) for seq in sequences] for k in range(length + 1)]
    learn = np.zeros((length, b))
    for j, seq in enumerate(sequences):
        learn[min(burn_in, len(seq) - 1):len(seq), j] = 1.0

    def unroll(net, with_grad: bool):
        h = None
        outputs = []
        for k, snapshots in enumerate(states):
            if with_grad:
                q, mask, h = net.q_values(snapshots, h)
            else:
                with no_grad():
                    q, mask, h = net.q_values(snapshots, h)
            if h is not None and (k < burn_in or not with_grad):
                h = h.detach()
            outputs.append((q, mask))
        return outputs

    online_out = unroll(online, True)
    target_out = unroll(target, False)
    losses = []
    td_sum = np.zeros(b)
    td_count = np.zeros(b)
    for k in range(length):
        if not learn[k].any():
            continue
        items = [seq[min(k, len(seq) - 1)] for seq in sequences]
        rewards = [[it.reward] for it in items]
        terminal = [it.done for it in items]
        q_next, mask_next = online_out[k + 1]
        q_target_next, _ = target_out[k + 1]
        targets = nstep_double_q_target(rewards, terminal, q_next.data, q_target_next.data, mask_next, gamma)
        q, _ = online_out[k]
        chosen = q[np.arange(b), np.array([it.action for it in items])]
        td = (targets - chosen.data) * learn[k]
        td_sum += np.abs(td)
        td_count += learn[k]
        losses.append((smooth_l1(chosen - targets) * (weights * learn[k])).sum())
    total = concat([l.reshape(1) for l in losses]).sum() * (1.0 / float(learn.sum()))
    total.backward()
    optimizer.step()
    optimizer.zero_grad()
    td_mean = td_sum / np.maximum(td_count, 1.0)
    replay.update_priorities(indices, td_mean)
    return LearnResult(total.item(), td_mean)


# ---------------------------------------------------------------------------
# Training loop

@dataclass
class TrainResult:
    best_score: float
    best_state: Optional[Dict[str, np.ndarray]]
    curves: List[Dict[str, float]]


def write_curves(path: str, rows: Sequence[Dict[str, float]]) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=CURVE_FIELDS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: ("" if row.get(k) is None else row[k]) for k in CURVE_FIELDS})


def train(selector: ActionSelector, tracker: Tracker, train_games: Sequence[GameSpec],
          valid_games: Sequence[GameSpec], config: TrainConfig, curves_path: Optional[str] = None,
          show_progress: bool = False,
          on_eval: Optional[Callable[[int, float], None]] = None) -> TrainResult:
    """Train the action selector

    Every episode samples a training game and plays it epsilon-greedily,
    the trajectory goes through the replay filter, and after warmup the
    network learns once per `update_every` collected steps. The target
    network is synchronized every `target_sync` episodes; every
    `eval_every` episodes the policy is evaluated on the validation games,
    the best parameters are kept and restored after `patience` evaluations
    without improvement.

    Args:
        selector: Online Q-network (trained in place)
        tracker: Source of the graph input
        train_games: Training game set
        valid_games: Validation game set (training games when empty)
        config: Schedule constants
        curves_path: CSV file for the learning curves
        show_progress: Show a progress bar
        on_eval: Callback receiving (episode, validation score)

    Returns:
        TrainResult
    """
    if not train_games:
        raise DomainError("empty game set")
    valid_games = list(valid_games) or list(train_games)
    rng = np.random.default_rng(config.seed)
    target = copy.deepcopy(selector)
    target.freeze()
    replay = PrioritizedReplay(config.buffer_capacity, config.priority_alpha, config.tolerance, config.filter_mode)
    optimizer = RAdam(selector.trainable_parameters(), lr=config.lr, clip=config.clip)
    keeper = BestPolicyKeeper(selector, config.patience)
    recurrent = selector.variant.recurrent
    pending_steps = 0
    recent_scores: List[float] = []
    recent_losses: List[float] = []
    curves: List[Dict[str, float]] = []

    for episode in tqdm(range(config.nb_episodes), desc="train", disable=not show_progress):
        epsilon = epsilon_at(episode, config)
        spec = train_games[int(rng.integers(len(train_games)))]
        result = run_episode(selector, tracker, spec, epsilon, rng, config.max_steps, episode, True, config)
        recent_scores.append(result.normalized)
        replay.push(result.items)
        if episode >= config.warmup:
            pending_steps += result.steps

        if episode >= config.warmup and len(replay) >= config.batch_size:
            updates, pending_steps = divmod(pending_steps, config.update_every)
            beta = beta_at(episode, config)
            for _ in range(updates):
                if recurrent:
                    outcome = learn_step_recurrent(selector, target, replay, optimizer, config.batch_size,
                                                   config.gamma, rng, beta, config.burn_in, config.update_length)
                else:
                    outcome = learn_step(selector, target, replay, optimizer, config.batch_size, config.gamma,
                                         rng, beta, config.n_min, config.n_max)
                recent_losses.append(outcome.loss)

        if (episode + 1) % config.target_sync == 0:
            target.load_state_dict(selector.state_dict())

        if (episode + 1) % config.eval_every == 0:
            valid_score = evaluate(selector, tracker, valid_games, config.max_steps, config.seed)
            status = keeper.update(valid_score)
            row = {
                "episode": episode + 1,
                "train_score": float(np.mean(recent_scores)),
                "valid_score": valid_score,
                "epsilon": epsilon,
                "loss": float(np.mean(recent_losses)) if recent_losses else None,
            }
            curves.append(row)
            logger.info("episode %d: train %.3f valid %.3f epsilon %.3f (%s)", episode + 1,
                        row["train_score"], valid_score, epsilon, status)
            if curves_path:
                write_curves(curves_path, curves)
            if on_eval is not None:
                on_eval(episode + 1, valid_score)
            recent_scores, recent_losses = [], []

    if keeper.best_state is None:
        keeper.best_state = selector.state_dict()
        keeper.best_score = evaluate(selector, tracker, valid_games, config.max_steps, config.seed)
    return TrainResult(keeper.best_score, keeper.best_state, curves)
