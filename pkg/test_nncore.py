#!/usr/bin/env python3
"""
Tests for the numpy autodiff core, layers, optimizers and checkpoints.
"""

import numpy as np
import pytest

from beliefgraph.errors import CheckpointError, DomainError
from beliefgraph.nn.checkpoint import load_checkpoint, save_checkpoint
from beliefgraph.nn.gradcheck import grad_check
from beliefgraph.nn.layers import MLP, Attention, Embedding, GRUCell, LayerNorm, Linear, Module, Parameter
from beliefgraph.nn.layers import Conv1d as ConvLayer
from beliefgraph.nn.optim import Adam, RAdam, clip_grad_norm
from beliefgraph.nn.tensor import (
    Tensor, attention, bce_with_logits, concat, conv1d, embedding, log_softmax, masked_mean, no_grad,
    precision, smooth_l1, softmax, stack,
)
from beliefgraph.nn.tensor import Normalize

TOLERANCE = 1e-4


@pytest.fixture
def f64():
    with precision("float64"):
        yield


def leaf(rng, *shape):
    return Tensor(rng.normal(size=shape), requires_grad=True)


def weighted(out, seed=7):
    return (out * Tensor(np.random.default_rng(seed).normal(size=out.shape))).sum()


def test_default_dtype_and_precision():
    assert Tensor([1, 2]).dtype == np.float32
    with precision("float64"):
        assert Tensor([1, 2]).dtype == np.float64
    assert Tensor([1, 2]).dtype == np.float32
    with pytest.raises(DomainError):
        with precision("float16"):
            pass


def test_grad_check_refuses_float32(rng):
    x = leaf(rng, 3)
    with pytest.raises(DomainError):
        grad_check(lambda: (x * x).sum(), x)


def test_arithmetic_gradients(f64, rng):
    x, y = leaf(rng, 3, 4), leaf(rng, 3, 4)
    assert grad_check(lambda: weighted(x * y - x / (y * y + 1.0) + 2.0 * x), [x, y]) < TOLERANCE
    a, b = leaf(rng, 3, 1), leaf(rng, 1, 4)
    c = Tensor(rng.normal(size=(3, 4)))
    assert grad_check(lambda: ((a + b) * c).sum(), [a, b]) < TOLERANCE


def test_matmul_and_nonlinearities(f64, rng):
    x, w = leaf(rng, 2, 3, 4), leaf(rng, 4, 5)
    c = Tensor(rng.normal(size=(2, 3, 5)))
    for f in (lambda: ((x @ w).tanh() * c).sum(),
              lambda: ((x @ w).sigmoid() * c).sum(),
              lambda: ((x @ w).relu() * c).sum(),
              lambda: ((x @ w * 0.1).exp() * c).sum(),
              lambda: (((x @ w) * (x @ w) + 1.0).log() * c).sum()):
        assert grad_check(f, [x, w]) < TOLERANCE


def test_shape_gradients(f64, rng):
    x, y = leaf(rng, 2, 3), leaf(rng, 2, 3)
    c = Tensor(rng.normal(size=(3, 2)))
    assert grad_check(lambda: (x.transpose() * c).sum(), x) < TOLERANCE
    assert grad_check(lambda: (x.reshape(3, 2) * c).sum(), x) < TOLERANCE
    assert grad_check(lambda: weighted(concat([x, y], axis=1)), [x, y]) < TOLERANCE
    assert grad_check(lambda: weighted(stack([x, y], axis=0)), [x, y]) < TOLERANCE
    assert grad_check(lambda: weighted(x.mean(axis=0)), x) < TOLERANCE


def test_indexing_accumulates(f64, rng):
    x = leaf(rng, 4, 3)
    index = np.array([0, 0, 2])
    assert grad_check(lambda: weighted(x[index]), x) < TOLERANCE
    x.grad = None
    x[index].sum().backward()
    assert np.array_equal(x.grad[:, 0], [2.0, 0.0, 1.0, 0.0])
    table = leaf(rng, 5, 3)
    ids = np.array([[1, 1], [4, 0]])
    assert grad_check(lambda: weighted(embedding(table, ids)), table) < TOLERANCE


def test_softmax_family(f64, rng):
    x = leaf(rng, 2, 4)
    mask = np.array([[1, 1, 0, 1], [0, 1, 1, 0]])
    assert grad_check(lambda: weighted(softmax(x, mask=mask)), x) < TOLERANCE
    assert grad_check(lambda: weighted(log_softmax(x, mask=mask)), x) < TOLERANCE
    probs = softmax(x, mask=mask).numpy()
    assert probs[0, 2] == 0.0 and probs[1, 0] == 0.0
    assert np.allclose(probs.sum(axis=-1), 1.0)
    with pytest.raises(DomainError):
        softmax(x, mask=np.array([[0, 0, 0, 0], [1, 1, 1, 1]]))


def test_losses_and_norms(f64, rng):
    x = leaf(rng, 3, 5)
    targets = (rng.uniform(size=(3, 5)) > 0.5).astype(float)
    assert grad_check(lambda: smooth_l1(x * 2.0).sum(), x) < TOLERANCE
    assert grad_check(lambda: bce_with_logits(x, targets).sum(), x) < TOLERANCE
    assert grad_check(lambda: weighted(Normalize.apply(x)), x) < TOLERANCE
    mask = np.array([1, 0, 1])
    assert grad_check(lambda: weighted(masked_mean(x.transpose(), np.array([1, 0, 1, 1, 0]))), x) < TOLERANCE
    with pytest.raises(DomainError):
        masked_mean(x, mask * 0)


def test_conv_and_attention(f64, rng):
    x, w = leaf(rng, 2, 5, 3), leaf(rng, 3, 3, 4)
    assert grad_check(lambda: weighted(conv1d(x, w)), [x, w]) < TOLERANCE
    with pytest.raises(DomainError):
        conv1d(x, leaf(rng, 2, 3, 4))
    q, k, v = leaf(rng, 2, 3, 4), leaf(rng, 2, 5, 4), leaf(rng, 2, 5, 4)
    mask = np.array([[1, 1, 1, 0, 0], [1, 0, 1, 1, 1]])
    assert grad_check(lambda: weighted(attention(q, k, v, mask=mask)), [q, k, v]) < TOLERANCE


def test_layer_gradients(f64, rng):
    x = leaf(rng, 2, 4)
    h = leaf(rng, 2, 6)
    linear = Linear(4, 3, rng)
    gru = GRUCell(4, 6, rng)
    mlp = MLP([4, 5, 2], rng)
    norm = LayerNorm(4)
    assert grad_check(lambda: weighted(linear(x)), [x, linear.weight, linear.bias]) < TOLERANCE
    assert grad_check(lambda: weighted(gru(x, h)), [x, h, gru.input_map.weight]) < TOLERANCE
    assert grad_check(lambda: weighted(mlp(x)), [x] + mlp.parameters()) < TOLERANCE
    assert grad_check(lambda: weighted(norm(x)), [x, norm.gamma]) < TOLERANCE

    seq = leaf(rng, 2, 5, 4)
    attend = Attention(4, rng)
    conv = ConvLayer(4, 3, 3, rng)
    mask = np.array([[1, 1, 1, 1, 0], [1, 1, 0, 0, 0]])
    assert grad_check(lambda: weighted(attend(seq, mask=mask, causal=True)), [seq]) < TOLERANCE
    assert grad_check(lambda: weighted(conv(seq)), [seq, conv.weight]) < TOLERANCE


def test_no_grad_and_detach(rng):
    x = leaf(rng, 3)
    with no_grad():
        y = x * 2.0
    assert not y.requires_grad
    z = (x * 2.0).detach()
    assert not z.requires_grad
    with pytest.raises(DomainError):
        (x * 2.0).backward()
    with pytest.raises(DomainError):
        x.item()


def test_broadcast_gradient_sums_back(rng):
    a, b = leaf(rng, 3, 1), leaf(rng, 1, 4)
    (a + b).sum().backward()
    assert np.allclose(a.grad, 4.0)
    assert np.allclose(b.grad, 3.0)


class Stack(Module):
    def __init__(self, rng):
        self.first = Linear(2, 3, rng)
        self.blocks = [Linear(3, 3, rng), Linear(3, 1, rng)]

    def forward(self, x):
        x = self.first(x)
        for block in self.blocks:
            x = block(x)
        return x


def test_module_tree(rng):
    model = Stack(rng)
    names = [name for name, _ in model.named_parameters()]
    assert len(names) == 6
    assert "blocks.1.bias" in names and "first.weight" in names
    assert model.num_parameters() == 2 * 3 + 3 + 3 * 3 + 3 + 3 + 1
    model.freeze()
    assert model.trainable_parameters() == []
    model.unfreeze()
    assert len(model.trainable_parameters()) == 6


def test_state_dict_loading(rng):
    source, target = Stack(rng), Stack(np.random.default_rng(99))
    assert sorted(target.load_state_dict(source.state_dict())) == sorted(source.state_dict())
    x = Tensor(rng.normal(size=(4, 2)))
    assert np.array_equal(source(x).numpy(), target(x).numpy())

    partial = {"first.weight": source.first.weight.data}
    with pytest.raises(CheckpointError):
        target.load_state_dict(partial)
    assert target.load_state_dict(partial, strict=False) == ["first.weight"]
    with pytest.raises(CheckpointError):
        target.load_state_dict({"first.weight": np.zeros((3, 3))}, strict=False)


def test_embedding_vectors(tmp_path, rng):
    table = Embedding(3, 3, rng)
    path = tmp_path / "vectors.txt"
    path.write_text("a 1 2 3\nb 4 5\nzzz 1 1 1\n")
    assert table.load_vectors(str(path), ["a", "b", "c"]) == 1
    assert np.array_equal(table.weight.data[0], [1.0, 2.0, 3.0])
    assert not table.weight.trainable


def test_clip_grad_norm():
    p = Parameter(np.zeros(2))
    p.grad = np.array([3.0, 4.0])
    assert clip_grad_norm([p], 1.0) == pytest.approx(5.0)
    assert np.linalg.norm(p.grad) == pytest.approx(1.0, rel=1e-5)
    assert clip_grad_norm([p], 0.0) == pytest.approx(1.0, rel=1e-5)


@pytest.mark.parametrize("optimizer", [RAdam, Adam])
def test_optimizers_minimize_quadratic(optimizer):
    w = Parameter(np.zeros(3))
    frozen = Parameter(np.ones(2), trainable=False)
    opt = optimizer([w, frozen], lr=0.1)
    for _ in range(600):
        opt.zero_grad()
        loss = ((w - 3.0) * (w - 3.0)).sum()
        loss.backward()
        opt.step()
    assert np.allclose(w.data, 3.0, atol=0.05)
    assert np.array_equal(frozen.data, [1.0, 1.0])


def test_checkpoint_round_trip(tmp_path, rng):
    model = Stack(rng)
    state = model.state_dict()
    state["counts"] = np.arange(6, dtype=np.int64).reshape(2, 3)
    state["wide"] = rng.normal(size=(2, 2))
    path = str(tmp_path / "ckpt" / "agent.bgnn")
    save_checkpoint(path, state, "agent", {"variant": "gata"})
    loaded, metadata = load_checkpoint(path, role="agent")
    assert sorted(loaded) == sorted(state)
    for name, value in state.items():
        assert loaded[name].dtype == value.dtype
        assert np.array_equal(loaded[name], value)
    assert metadata["role"] == "agent" and metadata["variant"] == "gata"
    assert metadata["format_version"] == 1


def test_checkpoint_rejects_bad_input(tmp_path, rng):
    path = str(tmp_path / "model.bgnn")
    save_checkpoint(path, {"w": np.zeros(2, dtype=np.float32)}, "updater-og")
    with pytest.raises(CheckpointError):
        load_checkpoint(path, role="agent")
    with pytest.raises(CheckpointError):
        load_checkpoint(str(tmp_path / "absent.bgnn"))
    bad = tmp_path / "bad.bgnn"
    bad.write_bytes(b"XXXX" + bytes(16))
    with pytest.raises(CheckpointError):
        load_checkpoint(str(bad))
    bad.write_bytes(b"BG")
    with pytest.raises(CheckpointError):
        load_checkpoint(str(bad))
