#!/usr/bin/env python3
"""
Layers module for the belief-graph laboratory.
Handles parameters, module trees and the standard layers the encoders
and decoders are built from.
"""

import logging
import math
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from beliefgraph.errors import CheckpointError, DomainError
from beliefgraph.nn.tensor import (
    Normalize, Tensor, as_tensor, attention, conv1d, default_dtype, embedding,
)

logger = logging.getLogger(__name__)


class Parameter(Tensor):
    """Trainable (or frozen) leaf tensor"""

    def __init__(self, data, trainable: bool = True):
        super().__init__(data, requires_grad=trainable)

    @property
    def trainable(self) -> bool:
        return self.requires_grad

    @trainable.setter
    def trainable(self, value: bool) -> None:
        self.requires_grad = bool(value)
        if not value:
            self.grad = None

    @property
    def gradient(self) -> np.ndarray:
        """Accumulated gradient (zeros for frozen or untouched parameters)"""
        return self.grad if self.grad is not None else np.zeros_like(self.data)


def uniform_init(rng: np.random.Generator, fan_in: int, shape: Tuple[int, ...]) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Module:
    """Base class of parameterized layers

    Parameters and sub-modules are discovered from instance attributes,
    including lists of modules.
    """

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def _children(self) -> Iterator[Tuple[str, object]]:
        for name, value in vars(self).items():
            if isinstance(value, (Parameter, Module)):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, (Parameter, Module)):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = "") -> List[Tuple[str, Parameter]]:
        """All parameters with dotted names, shared ones listed once"""
        found: List[Tuple[str, Parameter]] = []
        seen = set()
        stack = [(prefix, self)]
        while stack:
            path, module = stack.pop(0)
            for name, child in module._children():
                full = f"{path}{name}"
                if isinstance(child, Parameter):
                    if id(child) not in seen:
                        seen.add(id(child))
                        found.append((full, child))
                else:
                    stack.append((f"{full}.", child))
        return found

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def trainable_parameters(self) -> List[Parameter]:
        return [p for p in self.parameters() if p.trainable]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def freeze(self) -> "Module":
        for p in self.parameters():
            p.trainable = False
        return self

    def unfreeze(self) -> "Module":
        for p in self.parameters():
            p.trainable = True
        return self

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray], strict: bool = True) -> List[str]:
        """Copy arrays into matching parameters

        Args:
            state: Parameter arrays by dotted name
            strict: Require an exact key match

        Returns:
            Names that were loaded
        """
        params = dict(self.named_parameters())
        if strict:
            missing = sorted(set(params) - set(state))
            unexpected = sorted(set(state) - set(params))
            if missing or unexpected:
                raise CheckpointError(f"state mismatch: missing {missing}, unexpected {unexpected}")
        loaded = []
        for name, value in state.items():
            if name not in params:
                continue
            param = params[name]
            if param.data.shape != value.shape:
                raise CheckpointError(f"shape mismatch for {name}: {value.shape} vs {param.data.shape}")
            param.data = np.array(value, dtype=param.data.dtype)
            loaded.append(name)
        return loaded

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.parameters()))


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, bias: bool = True):
        self.weight = Parameter(uniform_init(rng, in_dim, (in_dim, out_dim)))
        self.bias = Parameter(np.zeros(out_dim)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        shape = x.shape
        out = x.reshape(-1, shape[-1]) @ self.weight
        if self.bias is not None:
            out = out + self.bias
        return out.reshape(shape[:-1] + (self.weight.shape[1],))


class Embedding(Module):
    """Lookup table with an optional plain-text vector loader"""

    def __init__(self, num: int, dim: int, rng: np.random.Generator):
        self.weight = Parameter(rng.normal(0.0, 1.0 / math.sqrt(dim), size=(num, dim)))

    @property
    def dim(self) -> int:
        return self.weight.shape[1]

    def forward(self, ids) -> Tensor:
        return embedding(self.weight, ids)

    def load_vectors(self, path: str, words: Sequence[str], freeze: bool = True) -> int:
        """Fill rows from a `word v1 ... vD` text file

        Args:
            path: Vector file
            words: Row order of the table
            freeze: Stop training the table afterwards

        Returns:
            Number of rows filled
        """
        index = {w: i for i, w in enumerate(words)}
        data = self.weight.data.copy()
        filled = 0
        with open(path, "r", encoding="utf-8") as f:
            for line in f:
                parts = line.rstrip().split(" ")
                if len(parts) != self.dim + 1 or parts[0] not in index:
                    continue
                data[index[parts[0]]] = np.asarray(parts[1:], dtype=data.dtype)
                filled += 1
        self.weight.data = data
        if freeze:
            self.weight.trainable = False
        logger.info("loaded %d/%d word vectors from %s", filled, len(words), path)
        return filled


class LayerNorm(Module):
    def __init__(self, dim: int):
        self.gamma = Parameter(np.ones(dim))
        self.beta = Parameter(np.zeros(dim))

    def forward(self, x: Tensor) -> Tensor:
        return Normalize.apply(x) * self.gamma + self.beta


class Conv1d(Module):
    """Same-padded convolution over the sequence axis of (B, L, C) inputs"""

    def __init__(self, in_dim: int, out_dim: int, kernel: int, rng: np.random.Generator):
        self.weight = Parameter(uniform_init(rng, in_dim * kernel, (kernel, in_dim, out_dim)))
        self.bias = Parameter(np.zeros(out_dim))

    def forward(self, x: Tensor) -> Tensor:
        return conv1d(x, self.weight) + self.bias


class Attention(Module):
    """Single-head attention with query/key/value projections"""

    def __init__(self, dim: int, rng: np.random.Generator):
        self.query = Linear(dim, dim, rng)
        self.key = Linear(dim, dim, rng)
        self.value = Linear(dim, dim, rng)

    def forward(self, x: Tensor, memory: Optional[Tensor] = None, mask=None,
                causal: bool = False) -> Tensor:
        """Attend from x (B, Lq, H) over memory (B, Lk, H), or over x itself

        Args:
            x: Queries
            memory: Keys and values; defaults to x
            mask: 0/1 key mask (B, Lk)
            causal: Hide later positions (self-attention only)

        Returns:
            Tensor (B, Lq, H)
        """
        memory = x if memory is None else memory
        lq, lk = x.shape[-2], memory.shape[-2]
        full = np.ones(x.shape[:-2] + (lq, lk))
        if mask is not None:
            full = full * np.expand_dims(np.asarray(mask, dtype=full.dtype), -2)
        if causal:
            full = full * np.tril(np.ones((lq, lk)))
        return attention(self.query(x), self.key(memory), self.value(memory), mask=full)


class GRUCell(Module):
    """Gated recurrent cell"""

    def __init__(self, in_dim: int, hidden: int, rng: np.random.Generator):
        self.input_map = Linear(in_dim, 3 * hidden, rng)
        self.hidden_map = Linear(hidden, 3 * hidden, rng)
        self.hidden = hidden

    def forward(self, x: Tensor, h: Tensor) -> Tensor:
        return gru_step(x, h, self)


def gru_step(x: Tensor, h: Tensor, cell: GRUCell) -> Tensor:
    """One gated recurrent update

    Args:
        x: Input (B, D)
        h: Previous state (B, H)
        cell: Parameters

    Returns:
        Next state (B, H)
    """
    h = as_tensor(h)
    size = cell.hidden
    gx = cell.input_map(as_tensor(x))
    gh = cell.hidden_map(h)
    reset = (gx[:, :size] + gh[:, :size]).sigmoid()
    update = (gx[:, size:2 * size] + gh[:, size:2 * size]).sigmoid()
    candidate = (gx[:, 2 * size:] + reset * gh[:, 2 * size:]).tanh()
    return (1.0 - update) * candidate + update * h


class MLP(Module):
    """Stack of linear layers with ReLU between them"""

    def __init__(self, dims: Sequence[int], rng: np.random.Generator):
        self.layers = [Linear(a, b, rng) for a, b in zip(dims[:-1], dims[1:])]

    def forward(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = x.relu()
        return x


def sinusoidal_encoding(length: int, dim: int) -> np.ndarray:
    """Fixed sinusoidal position table (length, dim)"""
    position = np.arange(length)[:, None]
    rate = np.exp(-math.log(10000.0) * (np.arange(0, dim, 2) / dim))
    table = np.zeros((length, dim))
    table[:, 0::2] = np.sin(position * rate)
    table[:, 1::2] = np.cos(position * rate[: dim // 2])
    return table.astype(default_dtype())


def masked_rows(x: Tensor, mask) -> Tensor:
    """Zero the rows of x (..., L, H) where mask (..., L) is 0"""
    return x * np.expand_dims(np.asarray(mask, dtype=default_dtype()), -1)


def check_nonempty(mask) -> None:
    mask = np.asarray(mask)
    if mask.size == 0 or not np.all(mask.reshape(-1, mask.shape[-1]).any(axis=-1)):
        raise DomainError("empty input sequence")

