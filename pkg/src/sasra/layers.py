"""Parameterized building blocks on top of :mod:`sasra.tensor`."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Rng, Tensor


class Module:
    """Minimal parameter container; submodules and Tensors found by attribute walk."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key in sorted(vars(self)):
            val = vars(self)[key]
            name = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def _param(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def uniform_init(rng: Rng, shape, fan_in: int) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return _param(rng.uniform(-bound, bound, shape))


class Linear(Module):
    def __init__(self, rng: Rng, d_in: int, d_out: int, bias: bool = True):
        self.weight = uniform_init(rng, (d_in, d_out), d_in)
        self.bias = _param(np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class Embedding(Module):
    def __init__(self, rng: Rng, n: int, dim: int):
        self.table = _param(rng.normal(0.0, 0.02, (n, dim)))

    def __call__(self, ids) -> Tensor:
        return T.embedding_lookup(self.table, ids)


class LayerNorm(Module):
    def __init__(self, dim: int):
        self.gamma = _param(np.ones(dim))
        self.beta = _param(np.zeros(dim))

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta)


class Conv2d(Module):
    def __init__(self, rng: Rng, c_in: int, c_out: int, kernel: int, stride: int = 1,
                 padding: int = 0):
        fan_in = kernel * kernel * c_in
        self.weight = uniform_init(rng, (kernel, kernel, c_in, c_out), fan_in)
        self.bias = _param(np.zeros(c_out))
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class MultiHeadAttention(Module):
    def __init__(self, rng: Rng, width: int, n_h: int):
        if width % n_h:
            raise ValueError(f"model width {width} is not divisible by head count {n_h}")
        self.n_h = n_h
        self.q = Linear(rng, width, width)
        self.k = Linear(rng, width, width)
        self.v = Linear(rng, width, width)
        self.o = Linear(rng, width, width)

    def params(self) -> dict:
        return {"wq": self.q.weight, "bq": self.q.bias, "wk": self.k.weight, "bk": self.k.bias,
                "wv": self.v.weight, "bv": self.v.bias, "wo": self.o.weight, "bo": self.o.bias}

    def __call__(self, q: Tensor, k: Tensor, v: Tensor, mask=None):
        return T.multi_head_attention(q, k, v, self.n_h, self.params(), mask)


class FeedForward(Module):
    def __init__(self, rng: Rng, width: int, hidden: int):
        self.fc1 = Linear(rng, width, hidden)
        self.fc2 = Linear(rng, hidden, width)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.relu(self.fc1(x)))


class TransformerBlock(Module):
    """Post-norm block: attention + residual + norm, then FF + residual + norm.

    Self-attention when called with ``context=None``; otherwise queries come
    from ``x`` and keys from ``context``.  Values default to keys.
    """

    def __init__(self, rng: Rng, width: int, n_h: int, ff: int):
        self.attn = MultiHeadAttention(rng, width, n_h)
        self.norm1 = LayerNorm(width)
        self.ff = FeedForward(rng, width, ff)
        self.norm2 = LayerNorm(width)
        self.last_weights: Tensor | None = None

    def __call__(self, x: Tensor, context: Tensor | None = None, values: Tensor | None = None,
                 mask=None, keys: Tensor | None = None) -> Tensor:
        k = keys if keys is not None else (context if context is not None else x)
        v = values if values is not None else (context if context is not None else x)
        a, w = self.attn(x, k, v, mask)
        self.last_weights = w
        h = self.norm1(T.add(x, a))
        return self.norm2(T.add(h, self.ff(h)))


class GRUCell(Module):
    """Single-layer gated recurrent unit (reset gate applied to the hidden projection)."""

    def __init__(self, rng: Rng, d_in: int, hidden: int):
        self.hidden = hidden
        self.wx = uniform_init(rng, (d_in, 3 * hidden), d_in)
        self.wh = uniform_init(rng, (hidden, 3 * hidden), hidden)
        self.bx = _param(np.zeros(3 * hidden))
        self.bh = _param(np.zeros(3 * hidden))

    def input_gates(self, x: Tensor) -> Tensor:
        """Input projection; may be computed for a whole sequence at once."""
        return T.linear(x, self.wx, self.bx)

    def __call__(self, x: Tensor, h: Tensor) -> Tensor:
        return self.cell(self.input_gates(x), h)

    def cell(self, gx: Tensor, h: Tensor) -> Tensor:
        H = self.hidden
        gh = T.linear(h, self.wh, self.bh)
        r = T.sigmoid(gx[..., :H] + gh[..., :H])
        z = T.sigmoid(gx[..., H:2 * H] + gh[..., H:2 * H])
        n = T.tanh(gx[..., 2 * H:] + r * gh[..., 2 * H:])
        return (1.0 - z) * n + z * h


class MLP(Module):
    def __init__(self, rng: Rng, d_in: int, hidden: int, d_out: int):
        self.fc1 = Linear(rng, d_in, hidden)
        self.fc2 = Linear(rng, hidden, d_out)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.relu(self.fc1(x)))
