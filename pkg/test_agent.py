#!/usr/bin/env python3
"""
Tests for replay, the action selector and the reinforcement-learning loop.
"""

import copy
import csv
import dataclasses
import hashlib
from collections import Counter

import numpy as np
import pytest

from beliefgraph.agent.replay import PrioritizedReplay, ReplayItem, Snapshot
import beliefgraph.agent.trainer as trainer_module
from beliefgraph.agent.selector import ActionSelector, resolve_variant, transfer_encoders
from beliefgraph.agent.trainer import (
    CURVE_FIELDS, BestPolicyKeeper, LearnResult, NullTracker, TruthTracker, UpdaterTracker, beta_at, count_bonus,
    epsilon_at, evaluate, evaluate_random, learn_step, learn_step_recurrent, nstep_double_q_target,
    run_episode, select_action, train,
)
from beliefgraph.config import TrainConfig
from beliefgraph.core.kgraph import BeliefGraph, DiscreteGraph
from beliefgraph.errors import DomainError
from beliefgraph.models.updater import GraphUpdater, ObservationGenerator
from beliefgraph.nn.layers import Linear, Module, Parameter
from beliefgraph.nn.optim import RAdam


def item(reward=0.0, episode=0, step=0, done=False, obs=("s",), action=0):
    snapshot = Snapshot(obs, (("go",), ("stay",)))
    return ReplayItem(snapshot, action, reward, snapshot, done, episode, step)


def trajectory(rewards, episode):
    return [item(r, episode, t, t == len(rewards) - 1) for t, r in enumerate(rewards)]


class TabularQ(Module):
    """Q table indexed by the first observation token"""

    def __init__(self, states, actions):
        self.index = {s: i for i, s in enumerate(states)}
        self.table = Parameter(np.zeros((len(states), actions)))

    def q_values(self, snapshots, recurrent_state=None):
        rows = np.array([self.index[s.obs[0]] for s in snapshots])
        return self.table[rows], np.ones((len(rows), self.table.shape[1])), None


def chain_episode(episode):
    """s0 -go-> s1 -go-> end, with reward 1 on the last move"""
    cands = (("go",), ("stay",))
    s0, s1 = Snapshot(("s0",), cands), Snapshot(("s1",), cands)
    return [ReplayItem(s0, 0, 0.0, s1, False, episode, 0), ReplayItem(s1, 0, 1.0, s1, True, episode, 1)]


def tiny_selector(name, tiny_config, vocab, wvocab, seed=0):
    return ActionSelector(resolve_variant(name), tiny_config, vocab, wvocab, np.random.default_rng(seed))


def test_select_action_greedy_and_masked(rng):
    assert select_action([1.0, 3.0, 3.0], 0.0, rng) == 1
    assert select_action([5.0], 0.0, rng) == 0
    assert select_action([9.0, 1.0, 2.0], 0.0, rng, mask=np.array([0, 1, 1])) == 2
    with pytest.raises(DomainError):
        select_action([1.0, 2.0], 0.0, rng, mask=np.zeros(2))


def test_select_action_uniform_exploration(rng):
    counts = Counter(select_action([0.0, 9.0, 1.0, 2.0], 1.0, rng) for _ in range(10000))
    assert set(counts) == {0, 1, 2, 3}
    assert all(abs(c - 2500) < 250 for c in counts.values())


def test_nstep_double_q_target():
    gamma = 0.9
    q_online = np.array([[0.5, 3.0, 1.0]])
    q_target = np.array([[10.0, 2.0, 30.0]])
    ones = np.ones((1, 3))
    assert nstep_double_q_target([[1.0]], [False], q_online, q_target, ones, gamma)[0] == pytest.approx(2.8)
    assert nstep_double_q_target([[1.5]], [True], q_online, q_target, ones, gamma)[0] == pytest.approx(1.5)
    expected = 1.0 + gamma * 0.0 + gamma ** 2 * 2.0 + gamma ** 3 * 2.0
    assert nstep_double_q_target([[1.0, 0.0, 2.0]], [False], q_online, q_target, ones, gamma)[0] == \
        pytest.approx(expected)
    masked = np.array([[1.0, 0.0, 1.0]])
    assert nstep_double_q_target([[0.0]], [False], q_online, q_target, masked, gamma)[0] == pytest.approx(27.0)


def test_nstep_target_matches_scripted_trace():
    gamma = 0.9
    rewards = [0.5, -1.0, 2.0, 4.0]
    q_next = np.array([[1.0, 7.0]])
    q_target = np.array([[3.0, 5.0]])
    for n in (1, 2, 3):
        brute = 0.0
        for k in range(n):
            brute += gamma ** k * rewards[k]
        brute += gamma ** n * 5.0
        got = nstep_double_q_target([rewards[:n]], [False], q_next, q_target, np.ones((1, 2)), gamma)[0]
        assert got == pytest.approx(brute)


def test_count_bonus():
    counts = Counter()
    assert count_bonus("a", counts, 0.1, 0.5, True) == pytest.approx(0.1)
    assert count_bonus("a", counts, 0.1, 0.5, True) == pytest.approx(0.1 / np.sqrt(2))
    assert count_bonus("a", counts, 0.1, 0.5, False) == 0.0
    assert counts["a"] == 2


def test_schedules():
    config = TrainConfig(epsilon_start=1.0, epsilon_end=0.1, epsilon_anneal=100, nb_episodes=10)
    assert epsilon_at(0, config) == 1.0
    assert epsilon_at(50, config) == pytest.approx(0.55)
    assert epsilon_at(500, config) == pytest.approx(0.1)
    assert beta_at(0, config) == pytest.approx(0.4)
    assert beta_at(10, config) == pytest.approx(1.0)


def test_best_policy_keeper_restores(rng):
    layer = Linear(2, 2, rng)
    keeper = BestPolicyKeeper(layer, patience=2)
    assert keeper.update(0.5) == "improved"
    best = layer.weight.data.copy()
    layer.weight.data = layer.weight.data + 1.0
    assert keeper.update(0.4) == "stalled"
    assert keeper.update(0.5) == "restored"
    assert np.array_equal(layer.weight.data, best)
    assert keeper.update(0.6) == "improved"


def test_replay_filter():
    replay = PrioritizedReplay(100, tolerance=0.1)
    assert replay.push(trajectory([1.0, 1.0], 0))
    assert replay.mean_reward() == pytest.approx(1.0)
    assert not replay.push(trajectory([0.05, 0.05], 1))
    assert replay.push(trajectory([0.2, 0.2], 2))
    assert not replay.push([])
    assert len(replay) == 4


def test_replay_episode_filter_mode():
    replay = PrioritizedReplay(100, tolerance=0.5, filter_mode="episode")
    replay.push(trajectory([1.0, 1.0], 0))
    assert replay.mean_reward() == pytest.approx(2.0)
    assert not replay.push(trajectory([0.5, 0.5], 1))
    assert replay.push(trajectory([0.5, 0.6], 2))


def test_replay_rejects_bad_settings():
    with pytest.raises(DomainError):
        PrioritizedReplay(0)
    with pytest.raises(DomainError):
        PrioritizedReplay(10, filter_mode="game")
    with pytest.raises(DomainError):
        PrioritizedReplay(10).sample(1, np.random.default_rng(0))


def test_replay_evicts_oldest():
    replay = PrioritizedReplay(3)
    replay.add_trajectory(trajectory([1.0, 2.0, 3.0, 4.0, 5.0], 0))
    assert len(replay) == 3
    assert sorted(it.reward for it in replay.items) == [3.0, 4.0, 5.0]
    assert replay.mean_reward() == pytest.approx(4.0)


def test_replay_sampling_follows_priorities():
    replay = PrioritizedReplay(10, alpha=0.6)
    replay.add_trajectory([item(episode=0), item(episode=1)])
    replay.update_priorities([0, 1], [1.0, 2.0 ** (1 / 0.6)])
    assert replay.probabilities() == pytest.approx([1 / 3, 2 / 3], rel=1e-4)
    rng = np.random.default_rng(0)
    counts = np.zeros(2)
    for _ in range(25000):
        indices, _, weights = replay.sample(2, rng)
        np.add.at(counts, indices, 1)
        assert weights.max() == pytest.approx(1.0)
    assert counts[1] / counts[0] == pytest.approx(2.0, rel=0.05)


def test_replay_new_items_get_max_priority():
    replay = PrioritizedReplay(10)
    replay.add_trajectory([item(episode=0), item(episode=1)])
    replay.update_priorities([0, 1], [0.5, 3.0])
    replay.add_trajectory([item(episode=2)])
    assert replay.priorities[2] == pytest.approx(3.0 + 1e-6)


def test_replay_sequences_stop_at_episode_end():
    replay = PrioritizedReplay(10)
    replay.add_trajectory(trajectory([0.0, 0.0, 1.0], 0))
    replay.add_trajectory(trajectory([0.0, 1.0], 1))
    assert [it.step for it in replay.sequence(0, 10)] == [0, 1, 2]
    assert [it.step for it in replay.following(1, 3)] == [1, 2]
    assert [it.episode for it in replay.following(3, 3)] == [1, 1]
    assert len(replay.following(0, 1)) == 1


@pytest.mark.parametrize("n_max", [1, 3])
def test_learn_step_solves_chain(n_max):
    online = TabularQ(["s0", "s1"], 2)
    replay = PrioritizedReplay(100)
    for episode in range(5):
        replay.add_trajectory(chain_episode(episode))
    optimizer = RAdam(online.trainable_parameters(), lr=0.05)
    rng = np.random.default_rng(0)
    for _ in range(800):
        result = learn_step(online, online, replay, optimizer, 4, 0.9, rng, n_min=1, n_max=n_max)
    assert online.table.data[1, 0] == pytest.approx(1.0, abs=0.1)
    assert online.table.data[0, 0] == pytest.approx(0.9, abs=0.1)
    assert online.table.data[0, 1] == 0.0
    assert result.td_errors.shape == (4,)


def test_variants(tiny_config, vocab, wvocab):
    assert resolve_variant("gata-coc", use_text=True).use_text
    assert not resolve_variant("tr-dqn").uses_graph
    with pytest.raises(DomainError):
        resolve_variant("gata-xyz")
    selector = tiny_selector("gata-gtf", tiny_config, vocab, wvocab)
    with pytest.raises(DomainError):
        selector.q_values([Snapshot(("x",), (("go",),), None)])
    with pytest.raises(DomainError):
        selector.q_values([Snapshot(("x",), (), DiscreteGraph(vocab))])


def test_run_episode_with_text_agent(tiny_config, vocab, wvocab, level1_games):
    selector = tiny_selector("tr-dqn", tiny_config, vocab, wvocab)
    spec = level1_games[0]
    result = run_episode(selector, NullTracker(), spec, 1.0, np.random.default_rng(1), max_steps=6, episode=7)
    assert 1 <= result.steps <= 6
    assert [it.step for it in result.items] == list(range(result.steps))
    assert all(it.episode == 7 for it in result.items)
    assert all(0 <= it.action < len(it.state.candidates) for it in result.items)
    for a, b in zip(result.items, result.items[1:]):
        assert a.next_state is b.state
    assert 0 <= result.score <= spec.max_score
    assert 0.0 <= evaluate(selector, NullTracker(), level1_games[:2], max_steps=4) <= 1.0


def test_run_episode_with_graph_sources(tiny_config, vocab, wvocab, level1_games, rng):
    spec = level1_games[1]
    selector = tiny_selector("gata-gtf", tiny_config, vocab, wvocab)
    result = run_episode(selector, TruthTracker(vocab, "full"), spec, 0.5, rng, max_steps=3)
    assert all(isinstance(it.state.graph, DiscreteGraph) for it in result.items)

    updater = GraphUpdater(tiny_config, vocab, wvocab, np.random.default_rng(4)).freeze()
    selector = tiny_selector("gata-og", tiny_config, vocab, wvocab)
    result = run_episode(selector, UpdaterTracker(updater), spec, 0.5, rng, max_steps=3)
    assert all(isinstance(it.next_state.graph, BeliefGraph) for it in result.items)


def test_count_bonus_only_in_training(tiny_config, vocab, wvocab, level1_games):
    selector = tiny_selector("tr-drqn+", tiny_config, vocab, wvocab)
    config = TrainConfig(count_lambda=0.1, count_gamma=0.5)
    spec = level1_games[0]
    trained = run_episode(selector, NullTracker(), spec, 1.0, np.random.default_rng(2), 5, training=True,
                          config=config)
    assert all(it.reward > 0 for it in trained.items)
    plain = run_episode(selector, NullTracker(), spec, 1.0, np.random.default_rng(2), 5)
    assert len(plain.items) == len(trained.items)
    assert all(a.reward > b.reward for a, b in zip(trained.items, plain.items))
    assert all(float(b.reward).is_integer() for b in plain.items)


def test_evaluate_random(level1_games):
    score = evaluate_random(level1_games, seed=3, max_steps=20)
    assert 0.0 <= score <= 1.0
    assert evaluate_random(level1_games, seed=3, max_steps=20) == score
    with pytest.raises(DomainError):
        evaluate_random([])


def test_learn_step_on_selector(tiny_config, vocab, wvocab, level1_games):
    selector = tiny_selector("tr-dqn", tiny_config, vocab, wvocab)
    target = copy.deepcopy(selector).freeze()
    replay = PrioritizedReplay(100)
    result = run_episode(selector, NullTracker(), level1_games[0], 1.0, np.random.default_rng(0), 5)
    replay.add_trajectory(result.items)
    optimizer = RAdam(selector.trainable_parameters(), lr=1e-3)
    before = selector.scorer.mlp.layers[-1].weight.data.copy()
    outcome = learn_step(selector, target, replay, optimizer, 2, 0.9, np.random.default_rng(0))
    assert np.isfinite(outcome.loss)
    assert not np.array_equal(before, selector.scorer.mlp.layers[-1].weight.data)


def test_learn_step_recurrent(tiny_config, vocab, wvocab, level1_games):
    selector = tiny_selector("tr-drqn", tiny_config, vocab, wvocab)
    target = copy.deepcopy(selector).freeze()
    replay = PrioritizedReplay(100)
    for episode, spec in enumerate(level1_games[:2]):
        result = run_episode(selector, NullTracker(), spec, 1.0, np.random.default_rng(episode), 5, episode)
        replay.add_trajectory(result.items)
    optimizer = RAdam(selector.trainable_parameters(), lr=1e-3)
    outcome = learn_step_recurrent(selector, target, replay, optimizer, 2, 0.9, np.random.default_rng(0),
                                   burn_in=1, update_length=2)
    assert np.isfinite(outcome.loss)
    assert outcome.td_errors.shape == (2,)
    assert np.all(replay.priorities[:len(replay)] > 0)


def test_transfer_encoders(tiny_config, vocab, wvocab):
    source = ObservationGenerator(tiny_config, vocab, wvocab, np.random.default_rng(5))
    selector = tiny_selector("gata-og", tiny_config, vocab, wvocab)
    state = source.state_dict()
    copied = transfer_encoders(selector, state, "updater.", freeze=True)
    assert "words.weight" in copied
    assert any(name.startswith("graph_encoder.") for name in copied)
    assert any(name.startswith("text_encoder.") for name in copied)
    assert not any(name.startswith("scorer.") for name in copied)
    params = dict(selector.named_parameters())
    assert np.array_equal(params["words.weight"].data, state["updater.words.weight"])
    assert not params["words.weight"].trainable
    assert params["scorer.mlp.layers.0.weight"].trainable


def test_short_training_run(tmp_path, tiny_config, vocab, wvocab, level1_games):
    config = TrainConfig(agent="tr-dqn", nb_episodes=4, eval_every=2, warmup=1, batch_size=2, update_every=3,
                         target_sync=2, max_steps=6, patience=1, buffer_capacity=100, epsilon_anneal=4)
    selector = tiny_selector("tr-dqn", tiny_config, vocab, wvocab)
    seen = []
    path = str(tmp_path / "curves.csv")
    result = train(selector, NullTracker(), level1_games[:2], level1_games[2:], config, curves_path=path,
                   on_eval=lambda episode, score: seen.append(episode))
    assert seen == [2, 4]
    assert [row["episode"] for row in result.curves] == [2, 4]
    assert result.best_state is not None
    assert 0.0 <= result.best_score <= 1.0
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    assert tuple(rows[0]) == CURVE_FIELDS
    assert len(rows) == 2


def test_short_recurrent_training_run(tiny_config, vocab, wvocab, level1_games):
    config = TrainConfig(agent="tr-drqn", nb_episodes=3, eval_every=3, warmup=0, batch_size=2, update_every=4,
                         target_sync=1, max_steps=5, buffer_capacity=50, burn_in=1, update_length=2)
    selector = tiny_selector("tr-drqn", tiny_config, vocab, wvocab)
    result = train(selector, NullTracker(), level1_games, [], config)
    assert len(result.curves) == 1
    with pytest.raises(DomainError):
        train(selector, NullTracker(), [], [], config)


def parameter_hash(module):
    digest = hashlib.sha1()
    for name, array in sorted(module.state_dict().items()):
        digest.update(name.encode("utf-8"))
        digest.update(np.ascontiguousarray(array).tobytes())
    return digest.hexdigest()


def test_no_update_backlog_from_warmup(monkeypatch, tiny_config, vocab, wvocab, level1_games):
    config = TrainConfig(agent="tr-dqn", nb_episodes=4, eval_every=100, warmup=2, batch_size=1, update_every=2,
                         target_sync=100, max_steps=5, buffer_capacity=100)
    steps, calls = [], []
    real_run_episode = trainer_module.run_episode

    def recording_run_episode(*args, **kwargs):
        result = real_run_episode(*args, **kwargs)
        steps.append(result.steps)
        return result

    def counting_learn_step(*args, **kwargs):
        calls.append(1)
        return LearnResult(0.0, np.zeros(1))

    monkeypatch.setattr(trainer_module, "run_episode", recording_run_episode)
    monkeypatch.setattr(trainer_module, "learn_step", counting_learn_step)
    train(tiny_selector("tr-dqn", tiny_config, vocab, wvocab), NullTracker(), level1_games, [], config)
    training_steps = steps[:config.nb_episodes]
    assert len(training_steps) == 4
    assert len(calls) == sum(training_steps[2:]) // 2


def test_target_matches_online_after_sync(monkeypatch, tiny_config, vocab, wvocab, level1_games):
    config = TrainConfig(agent="tr-dqn", nb_episodes=3, eval_every=100, warmup=0, batch_size=2, update_every=1,
                         target_sync=1, max_steps=5, buffer_capacity=100)
    selector = tiny_selector("tr-dqn", tiny_config, vocab, wvocab)
    initial = selector.state_dict()
    targets = []
    real_learn_step = trainer_module.learn_step

    def capturing_learn_step(online, target, *args, **kwargs):
        targets.append(target)
        return real_learn_step(online, target, *args, **kwargs)

    monkeypatch.setattr(trainer_module, "learn_step", capturing_learn_step)
    train(selector, NullTracker(), level1_games, [], config)
    assert targets
    target = targets[-1]
    assert not any(p.trainable for p in target.parameters())
    online = selector.state_dict()
    synced = target.state_dict()
    assert set(synced) == set(online)
    assert all(np.array_equal(synced[name], online[name]) for name in online)
    assert any(not np.array_equal(initial[name], online[name]) for name in online)


def test_training_leaves_frozen_updater_untouched(tiny_config, vocab, wvocab, level1_games):
    updater = GraphUpdater(tiny_config, vocab, wvocab, np.random.default_rng(6)).freeze()
    before = parameter_hash(updater)
    config = TrainConfig(agent="gata-og", nb_episodes=2, eval_every=2, warmup=0, batch_size=2, update_every=1,
                         target_sync=1, max_steps=3, buffer_capacity=50)
    train(tiny_selector("gata-og", tiny_config, vocab, wvocab), UpdaterTracker(updater), level1_games[:1], [],
          config)
    assert parameter_hash(updater) == before


def test_replay_snapshots_survive_later_steps(tiny_config, vocab, wvocab, level1_games):
    updater = GraphUpdater(tiny_config, vocab, wvocab, np.random.default_rng(7)).freeze()
    tracker = UpdaterTracker(updater)
    selector = tiny_selector("gata-og", tiny_config, vocab, wvocab)
    replay = PrioritizedReplay(100)
    first = run_episode(selector, tracker, level1_games[0], 1.0, np.random.default_rng(8), max_steps=4)
    replay.add_trajectory(first.items)
    stored = [(it.state.obs, it.state.candidates, it.state.graph.values.copy()) for it in replay.items[:len(replay)]]

    run_episode(selector, tracker, level1_games[0], 1.0, np.random.default_rng(9), max_steps=4, episode=1)
    for (obs, candidates, values), it in zip(stored, replay.items[:len(replay)]):
        assert it.state.obs == obs and it.state.candidates == candidates
        assert np.array_equal(it.state.graph.values, values)

    snapshot = replay.items[0].state
    with pytest.raises(dataclasses.FrozenInstanceError):
        snapshot.obs = ("changed",)
    with pytest.raises(ValueError):
        snapshot.graph.values[0, 0, 0] = 0.5
