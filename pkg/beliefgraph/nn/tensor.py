#!/usr/bin/env python3
"""
Tensor module for the belief-graph laboratory.
Handles dense numpy-backed tensors with reverse-mode gradients over a
fixed catalog of primitive functions.
"""

import contextlib
import math
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from beliefgraph.errors import DomainError

_STATE = {"dtype": np.float32, "grad": True}

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence]


def default_dtype():
    return _STATE["dtype"]


@contextlib.contextmanager
def precision(name: str):
    """Switch the default floating dtype ("float32" or "float64")"""
    if name not in ("float32", "float64"):
        raise DomainError(f"unsupported precision: {name!r}")
    previous = _STATE["dtype"]
    _STATE["dtype"] = np.dtype(name).type
    try:
        yield
    finally:
        _STATE["dtype"] = previous


@contextlib.contextmanager
def no_grad():
    """Disable graph recording"""
    previous = _STATE["grad"]
    _STATE["grad"] = False
    try:
        yield
    finally:
        _STATE["grad"] = previous


def grad_enabled() -> bool:
    return _STATE["grad"]


class Tensor:
    """Class for holding an array and its place in the computation graph"""

    def __init__(self, data: ArrayLike, requires_grad: bool = False):
        """Initialize the tensor

        Args:
            data: Array data; floating data is cast to the default dtype
            requires_grad: Whether gradients should reach this tensor
        """
        if isinstance(data, Tensor):
            data = data.data
        array = np.asarray(data)
        if array.dtype.kind != "f" or array.dtype != default_dtype():
            array = array.astype(default_dtype())
        self.data: np.ndarray = array
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._ctx: Optional["Function"] = None

    # -- introspection ---------------------------------------------------

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise DomainError(f"item needs a single value, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- gradients -------------------------------------------------------

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every leaf that requires gradients"""
        if self.data.size != 1:
            raise DomainError(f"backward needs a scalar, got shape {self.shape}")
        order: List[Tensor] = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            if node._ctx is not None:
                for parent in node._ctx.parents:
                    if parent.requires_grad and id(parent) not in visited:
                        stack.append((parent, False))

        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            grad = grads.pop(id(node), None)
            if grad is None:
                continue
            if node._ctx is None:
                node.grad = grad.copy() if node.grad is None else node.grad + grad
                continue
            for parent, parent_grad in zip(node._ctx.parents, node._ctx.backward(grad)):
                if parent_grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = parent_grad if key not in grads else grads[key] + parent_grad

    # -- operators -------------------------------------------------------

    def __add__(self, other): return Add.apply(self, as_tensor(other))
    def __radd__(self, other): return Add.apply(as_tensor(other), self)
    def __sub__(self, other): return Sub.apply(self, as_tensor(other))
    def __rsub__(self, other): return Sub.apply(as_tensor(other), self)
    def __mul__(self, other): return Mul.apply(self, as_tensor(other))
    def __rmul__(self, other): return Mul.apply(as_tensor(other), self)
    def __truediv__(self, other): return Div.apply(self, as_tensor(other))
    def __rtruediv__(self, other): return Div.apply(as_tensor(other), self)
    def __neg__(self): return Neg.apply(self)
    def __matmul__(self, other): return MatMul.apply(self, as_tensor(other))
    def __getitem__(self, index): return GetItem.apply(self, index=index)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return Sum.apply(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        if axis is None:
            count = self.data.size
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            count = int(np.prod([self.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return Transpose.apply(self, axes=axes or None)

    def swapaxes(self, a: int, b: int) -> "Tensor":
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return self.transpose(tuple(axes))

    def tanh(self): return Tanh.apply(self)
    def relu(self): return Relu.apply(self)
    def sigmoid(self): return Sigmoid.apply(self)
    def exp(self): return Exp.apply(self)
    def log(self): return Log.apply(self)


def as_tensor(value: ArrayLike) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back to the operand shape"""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Function:
    """Base class of differentiable primitives"""

    def __init__(self, *parents: Tensor):
        self.parents = parents

    def forward(self, *args, **kwargs) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        raise NotImplementedError

    @classmethod
    def apply(cls, *parents: Tensor, **kwargs) -> Tensor:
        ctx = cls(*parents)
        out = Tensor(ctx.forward(*[p.data for p in parents], **kwargs))
        if grad_enabled() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._ctx = ctx
        return out


# -- elementwise arithmetic -------------------------------------------------

class Add(Function):
    def forward(self, a, b):
        self.shapes = (a.shape, b.shape)
        return a + b

    def backward(self, grad):
        return _unbroadcast(grad, self.shapes[0]), _unbroadcast(grad, self.shapes[1])


class Sub(Function):
    def forward(self, a, b):
        self.shapes = (a.shape, b.shape)
        return a - b

    def backward(self, grad):
        return _unbroadcast(grad, self.shapes[0]), _unbroadcast(-grad, self.shapes[1])


class Mul(Function):
    def forward(self, a, b):
        self.a, self.b = a, b
        return a * b

    def backward(self, grad):
        return _unbroadcast(grad * self.b, self.a.shape), _unbroadcast(grad * self.a, self.b.shape)


class Div(Function):
    def forward(self, a, b):
        self.a, self.b = a, b
        return a / b

    def backward(self, grad):
        return (_unbroadcast(grad / self.b, self.a.shape),
                _unbroadcast(-grad * self.a / (self.b * self.b), self.b.shape))


class Neg(Function):
    def forward(self, a):
        return -a

    def backward(self, grad):
        return (-grad,)


class MatMul(Function):
    """Batched matrix product over the last two axes"""

    def forward(self, a, b):
        if a.ndim < 2 or b.ndim < 2:
            raise DomainError("matmul operands need at least 2 dimensions")
        self.a, self.b = a, b
        return a @ b

    def backward(self, grad):
        ga = grad @ np.swapaxes(self.b, -1, -2)
        gb = np.swapaxes(self.a, -1, -2) @ grad
        return _unbroadcast(ga, self.a.shape), _unbroadcast(gb, self.b.shape)


# -- activations --------------------------------------------------------------

class Tanh(Function):
    def forward(self, a):
        self.y = np.tanh(a)
        return self.y

    def backward(self, grad):
        return (grad * (1.0 - self.y * self.y),)


class Relu(Function):
    def forward(self, a):
        self.positive = a > 0
        return np.where(self.positive, a, 0.0).astype(a.dtype)

    def backward(self, grad):
        return (grad * self.positive,)


def _sigmoid(a: np.ndarray) -> np.ndarray:
    return np.exp(-np.logaddexp(0.0, -a)).astype(a.dtype)


class Sigmoid(Function):
    def forward(self, a):
        self.y = _sigmoid(a)
        return self.y

    def backward(self, grad):
        return (grad * self.y * (1.0 - self.y),)


class Exp(Function):
    def forward(self, a):
        self.y = np.exp(a)
        return self.y

    def backward(self, grad):
        return (grad * self.y,)


class Log(Function):
    def forward(self, a):
        self.a = a
        return np.log(a)

    def backward(self, grad):
        return (grad / self.a,)


# -- shape and reduction --------------------------------------------------------

class Sum(Function):
    def forward(self, a, axis=None, keepdims=False):
        self.shape, self.axis, self.keepdims = a.shape, axis, keepdims
        return np.asarray(a.sum(axis=axis, keepdims=keepdims))

    def backward(self, grad):
        if self.axis is not None and not self.keepdims:
            axes = self.axis if isinstance(self.axis, tuple) else (self.axis,)
            axes = sorted(a % len(self.shape) for a in axes)
            for a in axes:
                grad = np.expand_dims(grad, a)
        return (np.broadcast_to(grad, self.shape).copy(),)


class Reshape(Function):
    def forward(self, a, shape):
        self.shape = a.shape
        return a.reshape(shape)

    def backward(self, grad):
        return (grad.reshape(self.shape),)


class Transpose(Function):
    def forward(self, a, axes=None):
        self.axes = tuple(axes) if axes is not None else tuple(reversed(range(a.ndim)))
        return np.transpose(a, self.axes)

    def backward(self, grad):
        return (np.transpose(grad, np.argsort(self.axes)),)


class Concat(Function):
    def forward(self, *arrays, axis=0):
        self.axis = axis
        self.sizes = [a.shape[axis] for a in arrays]
        return np.concatenate(arrays, axis=axis)

    def backward(self, grad):
        splits = np.cumsum(self.sizes)[:-1]
        return tuple(np.split(grad, splits, axis=self.axis))


class GetItem(Function):
    """Basic and advanced indexing; repeated indices accumulate"""

    def forward(self, a, index=None):
        self.shape, self.index = a.shape, index
        self.dtype = a.dtype
        return np.array(a[index])

    def backward(self, grad):
        out = np.zeros(self.shape, dtype=self.dtype)
        np.add.at(out, self.index, grad)
        return (out,)


class Take(Function):
    """Row lookup of an embedding table by integer ids of any shape"""

    def forward(self, table, ids=None):
        self.ids = np.asarray(ids, dtype=np.int64)
        self.shape = table.shape
        self.dtype = table.dtype
        return table[self.ids]

    def backward(self, grad):
        out = np.zeros(self.shape, dtype=self.dtype)
        np.add.at(out, self.ids.reshape(-1), grad.reshape(-1, self.shape[-1]))
        return (out,)


# -- normalizations and losses -----------------------------------------------------

def _prepare_mask(mask, shape, axis) -> Optional[np.ndarray]:
    if mask is None:
        return None
    mask = np.broadcast_to(np.asarray(mask) > 0, shape)
    if not np.all(mask.any(axis=axis)):
        raise DomainError("softmax over a fully masked axis")
    return mask


class Softmax(Function):
    """Softmax along an axis; masked positions get probability 0"""

    def forward(self, a, axis=-1, mask=None):
        self.axis = axis
        mask = _prepare_mask(mask, a.shape, axis)
        if mask is not None:
            a = np.where(mask, a, -np.inf)
        shifted = a - np.max(a, axis=axis, keepdims=True)
        e = np.exp(shifted)
        self.y = (e / e.sum(axis=axis, keepdims=True)).astype(self.parents[0].dtype)
        return self.y

    def backward(self, grad):
        y = self.y
        return (y * (grad - (grad * y).sum(axis=self.axis, keepdims=True)),)


class LogSoftmax(Function):
    """Log-softmax along an axis; masked positions output 0 and get no gradient"""

    def forward(self, a, axis=-1, mask=None):
        self.axis = axis
        self.mask = _prepare_mask(mask, a.shape, axis)
        if self.mask is not None:
            a = np.where(self.mask, a, -np.inf)
        shifted = a - np.max(a, axis=axis, keepdims=True)
        logz = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
        out = shifted - logz
        self.p = np.exp(out)
        if self.mask is not None:
            out = np.where(self.mask, out, 0.0)
        return out.astype(self.parents[0].dtype)

    def backward(self, grad):
        if self.mask is not None:
            grad = np.where(self.mask, grad, 0.0)
        return (grad - self.p * grad.sum(axis=self.axis, keepdims=True),)


class Normalize(Function):
    """Zero-mean, unit-variance normalization over the last axis"""

    def forward(self, a, eps=1e-5):
        mu = a.mean(axis=-1, keepdims=True)
        var = a.var(axis=-1, keepdims=True)
        self.inv = 1.0 / np.sqrt(var + eps)
        self.xhat = (a - mu) * self.inv
        return self.xhat

    def backward(self, grad):
        xhat = self.xhat
        g_mean = grad.mean(axis=-1, keepdims=True)
        gx_mean = (grad * xhat).mean(axis=-1, keepdims=True)
        return (self.inv * (grad - g_mean - xhat * gx_mean),)


class Conv1d(Function):
    """Same-padded 1-D convolution of (B, L, Cin) by a (K, Cin, Cout) kernel"""

    def forward(self, x, w):
        k = w.shape[0]
        if k % 2 == 0:
            raise DomainError("convolution kernel size must be odd")
        self.pad = k // 2
        self.length = x.shape[1]
        padded = np.pad(x, ((0, 0), (self.pad, self.pad), (0, 0)))
        self.cols = np.stack([padded[:, i:i + self.length] for i in range(k)], axis=2)
        self.w = w
        return np.einsum("blkc,kco->blo", self.cols, w)

    def backward(self, grad):
        gw = np.einsum("blkc,blo->kco", self.cols, grad)
        gcols = np.einsum("blo,kco->blkc", grad, self.w)
        b, _, k, c = gcols.shape
        gpad = np.zeros((b, self.length + 2 * self.pad, c), dtype=grad.dtype)
        for i in range(k):
            gpad[:, i:i + self.length] += gcols[:, :, i]
        return gpad[:, self.pad:self.pad + self.length], gw


class SmoothL1(Function):
    """Elementwise Huber loss with threshold 1"""

    def forward(self, a):
        self.a = a
        absolute = np.abs(a)
        return np.where(absolute < 1.0, 0.5 * a * a, absolute - 0.5).astype(a.dtype)

    def backward(self, grad):
        return (grad * np.clip(self.a, -1.0, 1.0),)


class BCEWithLogits(Function):
    """Elementwise binary cross-entropy on logits against constant targets"""

    def forward(self, a, targets=None):
        self.a = a
        self.targets = np.asarray(targets, dtype=a.dtype)
        return (np.maximum(a, 0.0) - a * self.targets + np.log1p(np.exp(-np.abs(a)))).astype(a.dtype)

    def backward(self, grad):
        return (grad * (_sigmoid(self.a) - self.targets),)


# -- functional helpers ------------------------------------------------------------

def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return Concat.apply(*[as_tensor(t) for t in tensors], axis=axis)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = []
    for t in tensors:
        shape = list(t.shape)
        shape.insert(axis if axis >= 0 else len(shape) + 1 + axis, 1)
        parts.append(t.reshape(tuple(shape)))
    return concat(parts, axis=axis)


def expand(t: Tensor, shape: Tuple[int, ...]) -> Tensor:
    """Broadcast t to shape; gradients sum back"""
    return t + Tensor(np.zeros(shape))


def softmax(x: Tensor, axis: int = -1, mask=None) -> Tensor:
    return Softmax.apply(x, axis=axis, mask=mask)


def log_softmax(x: Tensor, axis: int = -1, mask=None) -> Tensor:
    return LogSoftmax.apply(x, axis=axis, mask=mask)


def embedding(table: Tensor, ids) -> Tensor:
    return Take.apply(table, ids=ids)


def conv1d(x: Tensor, w: Tensor) -> Tensor:
    return Conv1d.apply(x, w)


def smooth_l1(x: Tensor) -> Tensor:
    return SmoothL1.apply(x)


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    return BCEWithLogits.apply(logits, targets=targets)


def masked_mean(x: Tensor, mask) -> Tensor:
    """Mean over the second-to-last axis counting only rows where mask is 1

    Args:
        x: Tensor (..., L, H)
        mask: 0/1 array (..., L)

    Returns:
        Tensor (..., H)
    """
    mask = np.asarray(mask, dtype=default_dtype())
    counts = mask.sum(axis=-1, keepdims=True)
    if np.any(counts == 0):
        raise DomainError("masked mean over an all-zero mask")
    weights = np.expand_dims(mask / counts, -1)
    return (x * weights).sum(axis=-2)


def attention(q: Tensor, k: Tensor, v: Tensor, mask=None) -> Tensor:
    """Scaled dot-product attention

    Args:
        q: Queries (..., Lq, H)
        k: Keys (..., Lk, H)
        v: Values (..., Lk, H)
        mask: 0/1 array broadcastable to (..., Lq, Lk); a (..., Lk) mask is
            applied to every query

    Returns:
        Tensor (..., Lq, H)
    """
    scores = (q @ k.swapaxes(-1, -2)) * (1.0 / math.sqrt(q.shape[-1]))
    if mask is not None:
        mask = np.asarray(mask)
        if mask.ndim == scores.ndim - 1:
            mask = np.expand_dims(mask, -2)
    return softmax(scores, axis=-1, mask=mask) @ v
