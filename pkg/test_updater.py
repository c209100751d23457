#!/usr/bin/env python3
"""
Tests for the decoder, the graph updaters and their pretraining objectives.
"""

import math

import numpy as np
import pytest

import beliefgraph.models.pretrain as pretrain_module
from beliefgraph.config import PretrainConfig
from beliefgraph.core.kgraph import DiscreteGraph
from beliefgraph.core.vocab import BOS, EOS
from beliefgraph.errors import DomainError
from beliefgraph.models.decoder import DecoderModel, greedy_decode, strip_framing, teacher_forcing, token_nll
from beliefgraph.models.encoders import pad_batch
from beliefgraph.models.pretrain import (
    RESTART, PretrainBatch, coc_window_loss, command_examples, command_target, corrupt_features, episode_steps,
    graph_f1, initial_carry, make_batch, observation_pool, og_window_loss, pretrain_cg, pretrain_coc,
    pretrain_graph_encoder, pretrain_og, pretrain_og_drqn, run_windows, sample_negatives, token_f1,
)
from beliefgraph.models.updater import (
    CommandGenerator, ContrastiveModel, GraphUpdater, ObservationGenerator, RecurrentTextModel, discrete_update,
)
from beliefgraph.nn.gradcheck import grad_check
from beliefgraph.nn.layers import Embedding
from beliefgraph.nn.tensor import Tensor, precision

KITCHEN = ("you", "are", "in", "the", "kitchen", ".")


@pytest.fixture
def quick():
    return PretrainConfig(epochs=1, batch_size=2, unroll=3, lr=1e-3, seed=0)


class FixedCommands:
    """Stand-in generator that always emits the same command tokens"""

    def __init__(self, vocab, text):
        self.vocab = vocab
        self.tokens = text.split()

    def generate_commands(self, g_prev, obs_tokens, action_tokens):
        return list(self.tokens)


def build_decoder(tiny_config, wvocab, rng):
    words = Embedding(len(wvocab), tiny_config.word_dim, rng)
    return DecoderModel(tiny_config, len(wvocab), words, rng)


def memories(rng, hidden):
    return [(Tensor(rng.normal(size=(1, 3, hidden))), np.ones((1, 3))),
            (Tensor(rng.normal(size=(1, 2, hidden))), np.ones((1, 2)))]


def test_teacher_forcing(wvocab):
    in_ids, in_mask, out_ids, out_mask = teacher_forcing(wvocab, [["open", "fridge"], ["go"]])
    assert in_ids.shape == out_ids.shape == (2, 3)
    assert wvocab.decode(in_ids[0]) == [BOS, "open", "fridge"]
    assert wvocab.decode(out_ids[0]) == ["open", "fridge", EOS]
    assert wvocab.decode(out_ids[1, :2]) == ["go", EOS]
    assert np.array_equal(out_mask, [[1, 1, 1], [1, 1, 0]])


def test_strip_framing():
    assert strip_framing([BOS, "a", "b", EOS, "c"]) == ["a", "b"]
    assert strip_framing(["a"]) == ["a"]
    assert strip_framing([BOS, EOS]) == []


def test_token_nll_matches_log_softmax(rng):
    logits = rng.normal(size=(1, 2, 5))
    nll = token_nll(Tensor(logits), np.array([[3, 1]]), np.array([[1.0, 0.0]]))
    row = logits[0, 0]
    expected = -(row[3] - math.log(np.exp(row).sum()))
    assert nll.numpy()[0] == pytest.approx(expected, rel=1e-4)


def test_decoder_needs_two_memories(tiny_config, wvocab, rng):
    decoder = build_decoder(tiny_config, wvocab, rng)
    ids = np.full((1, 2), wvocab.bos_id)
    with pytest.raises(DomainError):
        decoder(ids, np.ones((1, 2)), memories(rng, tiny_config.hidden)[:1])
    logits = decoder(ids, np.ones((1, 2)), memories(rng, tiny_config.hidden))
    assert logits.shape == (1, 2, len(wvocab))


def test_greedy_decode_is_capped(tiny_config, wvocab, rng):
    decoder = build_decoder(tiny_config, wvocab, rng)
    mems = memories(rng, tiny_config.hidden)
    decoded = greedy_decode(decoder, wvocab, mems, max_len=5)
    assert len(decoded) == 1
    assert decoded[0][0] == BOS
    assert len(decoded[0]) <= 6
    assert greedy_decode(decoder, wvocab, mems, max_len=5) == decoded


def test_updater_belief_is_bounded_and_transposed(tiny_config, vocab, wvocab, rng):
    updater = GraphUpdater(tiny_config, vocab, wvocab, rng)
    state = updater.initial_state()
    assert not state.h.any()
    r = vocab.num_relations
    nxt = updater.update_belief(state, KITCHEN, RESTART)
    values = nxt.belief.values
    assert values.shape == (2 * r, vocab.capacity, vocab.capacity)
    assert np.all(np.abs(values) <= 1.0)
    for c in range(r):
        assert np.array_equal(values[c + r], values[c].T)
    assert not np.array_equal(nxt.h, state.h)
    assert np.array_equal(updater.update_belief(state, KITCHEN, RESTART).h, nxt.h)


def test_og_window_backpropagates(tiny_config, vocab, wvocab, rng, small_episodes):
    model = ObservationGenerator(tiny_config, vocab, wvocab, rng)
    batch = make_batch(small_episodes[:1])
    result = og_window_loss(model, model.updater.initial(1), batch.steps[:2])
    assert result.weight > 0
    result.loss.backward()
    assert np.abs(model.updater.rnn.input_map.weight.gradient).sum() > 0
    assert np.abs(model.updater.f_d.layers[-1].weight.gradient).sum() > 0
    assert np.abs(model.decoder.output.weight.gradient).sum() > 0


def test_belief_chain_gradients(tiny_config, vocab, wvocab):
    with precision("float64"):
        rng = np.random.default_rng(5)
        updater = GraphUpdater(tiny_config, vocab, wvocab, rng)
        r, n = vocab.num_relations, vocab.capacity
        h = Tensor(rng.normal(size=(1, tiny_config.hidden)), requires_grad=True)
        belief = Tensor(updater.decode_belief(Tensor(rng.normal(size=(1, tiny_config.hidden)))).data)
        w_belief = rng.normal(size=(1, 2 * r, n, n))
        w_h = rng.normal(size=(1, tiny_config.hidden))
        obs_ids, obs_mask = pad_batch(wvocab, [list(KITCHEN)])
        act_ids, act_mask = pad_batch(wvocab, [["open", "fridge"]])

        def decoded():
            return (updater.decode_belief(h) * Tensor(w_belief)).sum()

        def stepped():
            h_next, b_next = updater.step(h, belief, obs_ids, obs_mask, act_ids, act_mask)
            return (h_next * Tensor(w_h)).sum() + (b_next * Tensor(w_belief)).sum()

        assert grad_check(decoded, [h, updater.f_d.layers[-1].weight], max_coords=20) < 1e-4
        assert grad_check(stepped, [h, updater.rnn.input_map.weight, updater.aggregator.w_joint],
                          max_coords=15) < 1e-4


def test_pretraining_loss_gradients(tiny_config, vocab, wvocab, small_episodes):
    with precision("float64"):
        steps = make_batch(small_episodes[:1]).steps[:2]
        og = ObservationGenerator(tiny_config, vocab, wvocab, np.random.default_rng(8))

        def og_loss():
            return og_window_loss(og, og.updater.initial(1), steps).loss

        assert grad_check(og_loss, [og.decoder.output.weight, og.updater.f_d.layers[-1].weight],
                          max_coords=10) < 1e-4

        coc = ContrastiveModel(tiny_config, vocab, wvocab, np.random.default_rng(9))
        negatives = [[tuple(reversed(KITCHEN))] for _ in steps]

        def coc_loss():
            return coc_window_loss(coc, coc.updater.initial(1), steps, negatives).loss

        assert grad_check(coc_loss, [coc.discriminator.weight, coc.updater.graph_encoder.layers[0].bases],
                          max_coords=10) < 1e-4


def test_episode_batches(small_episodes):
    first = small_episodes[0]
    steps = episode_steps(first)
    assert steps[0][0] == RESTART
    assert len(steps) == len(first) + 1
    batch = make_batch([first, first[:2]])
    assert batch.size == 2
    assert len(batch.steps) == len(first) + 1
    assert batch.steps[3].mask.tolist() == [1.0, 0.0]
    assert batch.steps[3].obs[1] == RESTART
    with pytest.raises(DomainError):
        list(batch.windows(0))
    assert sum(len(w) for w in batch.windows(3)) == len(batch.steps)


class RecordingOptimizer:
    """Keeps the gradients of every step instead of applying them"""

    def __init__(self, model):
        self.named = model.named_parameters()
        self.steps = []

    def step(self):
        self.steps.append({name: p.gradient.copy() for name, p in self.named})

    def zero_grad(self):
        for _, p in self.named:
            p.grad = None


def test_window_split_matches_single_unroll(tiny_config, vocab, wvocab, small_episodes):
    episode = next(ep for ep in small_episodes if len(ep) >= 4)
    batch = PretrainBatch(make_batch([episode]).steps[:5])
    assert len(batch.steps) == 5
    model = ObservationGenerator(tiny_config, vocab, wvocab, np.random.default_rng(12))
    recorder = RecordingOptimizer(model)
    loss_sum, weight, _, _ = run_windows(model, batch, 5, og_window_loss, recorder)
    assert len(recorder.steps) == 1

    whole = og_window_loss(model, initial_carry(model, 1), batch.steps)
    (whole.loss * (1.0 / whole.weight)).backward()
    assert whole.weight == weight
    assert whole.loss.item() == pytest.approx(loss_sum, rel=1e-5)
    for name, p in model.named_parameters():
        assert np.allclose(p.gradient, recorder.steps[0][name], atol=1e-6), name

    split_sum, split_weight, _, _ = run_windows(model, batch, 2, og_window_loss)
    assert split_weight == weight
    assert split_sum == pytest.approx(loss_sum, rel=1e-5)


def test_sample_negatives(rng):
    pool = [("a",), ("b",), ("a",)]
    assert sample_negatives(pool, [("a",)] * 10, rng) == [("b",)] * 10
    with pytest.raises(DomainError):
        sample_negatives([("a",), ("a",)], [("a",)], rng)


def test_f1_metrics(vocab):
    assert token_f1(["a", "b"], ["a"]) == pytest.approx(2 / 3)
    assert token_f1([], []) == 1.0
    assert token_f1(["a"], ["b"]) == 0.0
    x = DiscreteGraph.from_names(vocab, [("player", "kitchen", "at")])
    xy = DiscreteGraph.from_names(vocab, [("player", "kitchen", "at"), ("carrot", "fridge", "in")])
    assert graph_f1(xy, x) == pytest.approx(2 / 3)
    assert graph_f1(DiscreteGraph(vocab), DiscreteGraph(vocab)) == 1.0


def test_command_examples_open_from_empty_graph(small_episodes, vocab):
    examples = command_examples(small_episodes[:1], vocab)
    assert len(examples) == len(small_episodes[0]) + 1
    first = examples[0]
    assert first.action == RESTART and len(first.g_prev) == 0
    target = command_target(first, vocab)
    assert target[0] == BOS and target[-1] == EOS
    assert "delete" not in target


def test_discrete_update_applies_and_skips(vocab):
    g = DiscreteGraph.from_names(vocab, [("player", "backyard", "at")])
    moved = discrete_update(FixedCommands(vocab, "<s> add player shed at <|> delete player backyard at </s>"),
                            g, ("shed",), ("go", "east"))
    assert moved.named() == [("player", "shed", "at")]
    same = discrete_update(FixedCommands(vocab, "<s> fly player moon at </s>"), g, ("x",), ("y",))
    assert same == g


def test_untrained_command_generator_yields_a_graph(tiny_config, vocab, wvocab, rng):
    model = CommandGenerator(tiny_config, vocab, wvocab, rng)
    tokens = model.generate_commands(DiscreteGraph(vocab), KITCHEN, RESTART)
    assert tokens[0] == BOS
    assert isinstance(discrete_update(model, DiscreteGraph(vocab), KITCHEN, RESTART), DiscreteGraph)


def test_recurrent_text_state(tiny_config, wvocab, rng):
    model = RecurrentTextModel(tiny_config, wvocab, rng)
    h = model.update_state(np.zeros(tiny_config.hidden), KITCHEN, RESTART)
    assert h.shape == (tiny_config.hidden,)
    assert np.all(np.abs(h) <= 1.0)


def test_corrupt_features_permutes_rows(rng):
    features = Tensor(np.arange(12.0).reshape(4, 3))
    shuffled = corrupt_features(features, 2, rng).numpy()
    assert shuffled.shape == (2, 4, 3)
    for b in range(2):
        assert sorted(map(tuple, shuffled[b])) == sorted(map(tuple, features.numpy()))


def test_pretrain_og_smoke(small_episodes, vocab, wvocab, tiny_config, quick):
    model, history = pretrain_og(small_episodes[:2], small_episodes[2:], vocab, wvocab, tiny_config, quick,
                                 decode_samples=2)
    assert isinstance(model, ObservationGenerator)
    assert len(history) == 1
    row = history[0]
    assert math.isfinite(row["train_loss"]) and math.isfinite(row["valid_loss"])
    assert 0.0 <= row["valid_f1"] <= 1.0


def test_pretrain_coc_smoke(small_episodes, vocab, wvocab, tiny_config, quick):
    _, history = pretrain_coc(small_episodes[:2], small_episodes[2:], vocab, wvocab, tiny_config, quick)
    assert 0.0 <= history[0]["valid_accuracy"] <= 1.0


def test_coc_training_negatives_exclude_validation(monkeypatch, small_episodes, vocab, wvocab, tiny_config,
                                                    quick):
    train, valid = small_episodes[:2], small_episodes[2:]
    valid_only = set(observation_pool(valid)) - set(observation_pool(train))
    assert valid_only
    pools = []
    real_sample_negatives = pretrain_module.sample_negatives

    def recording(pool, positives, rng):
        pools.append(pool)
        return real_sample_negatives(pool, positives, rng)

    monkeypatch.setattr(pretrain_module, "sample_negatives", recording)
    pretrain_coc(train, valid, vocab, wvocab, tiny_config, quick)
    assert not valid_only & set(pools[0])
    assert any(valid_only & set(pool) for pool in pools)


def test_pretrain_cg_smoke(small_episodes, vocab, wvocab, tiny_config, quick):
    model, history = pretrain_cg(small_episodes[:2], small_episodes[2:], vocab, wvocab, tiny_config, quick,
                                 decode_samples=2)
    assert model.role == "updater-cg"
    assert 0.0 <= history[0]["valid_graph_f1"] <= 1.0


def test_pretrain_og_drqn_smoke(small_episodes, wvocab, tiny_config, quick):
    model, history = pretrain_og_drqn(small_episodes[:2], [], wvocab, tiny_config, quick)
    assert model.role == "drqn-og"
    assert "valid_loss" not in history[0]


@pytest.mark.parametrize("task", ["ap", "sp", "dgi"])
def test_pretrain_graph_encoder_smoke(task, small_episodes, level1_games, vocab, wvocab, tiny_config, quick):
    specs = {spec.game_id: spec for spec in level1_games}
    model, history = pretrain_graph_encoder(task, small_episodes[:2], small_episodes[2:], vocab, wvocab,
                                            tiny_config, quick, specs=specs)
    assert model.role == f"genc-{task}"
    assert 0.0 <= history[0]["valid_accuracy"] <= 1.0


def test_pretrain_graph_encoder_full_graphs(small_episodes, vocab, wvocab, tiny_config):
    config = PretrainConfig(epochs=1, batch_size=4, graph_type="full")
    _, history = pretrain_graph_encoder("ap", small_episodes[:1], [], vocab, wvocab, tiny_config, config)
    assert math.isfinite(history[0]["train_loss"])


def test_pretrain_rejects_bad_input(small_episodes, vocab, wvocab, tiny_config, quick):
    with pytest.raises(DomainError):
        pretrain_og([], [], vocab, wvocab, tiny_config, quick)
    with pytest.raises(DomainError):
        pretrain_graph_encoder("xx", small_episodes, [], vocab, wvocab, tiny_config, quick)
    with pytest.raises(DomainError):
        pretrain_graph_encoder("sp", small_episodes, [], vocab, wvocab, tiny_config, quick)
    with pytest.raises(DomainError):
        pretrain_graph_encoder("ap", small_episodes, [], vocab, wvocab, tiny_config,
                               PretrainConfig(graph_type="partial"))


@pytest.mark.slow
def test_og_loss_decreases(small_episodes, vocab, wvocab, tiny_config):
    config = PretrainConfig(epochs=8, batch_size=2, unroll=3, lr=1e-2, seed=0)
    _, history = pretrain_og(small_episodes, [], vocab, wvocab, tiny_config, config, decode_samples=0)
    assert history[-1]["train_loss"] < history[0]["train_loss"]
