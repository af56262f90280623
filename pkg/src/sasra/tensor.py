"""Dense arrays with reverse-mode automatic differentiation.

Every op is vectorized over numpy arrays; the graph records one closure per
op and ``backward`` walks it in reverse topological order.  Values are
immutable after creation, only ``grad`` buffers change.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

_DEFAULT_DTYPE = np.float64
_GRAD_ENABLED = True


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class NonFiniteError(FloatingPointError):
    """Raised when an op that forbids non-finite input receives one."""


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported precision {dtype!r}; use float32 or float64")
    _DEFAULT_DTYPE = dtype


def get_default_dtype():
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (evaluation rollouts)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Rng:
    """Seeded generator backed by numpy's PCG64 bit generator.

    PCG64 is a permuted congruential generator with 128-bit state; numpy
    guarantees a stable stream for a given seed across platforms.
    """

    algorithm = "PCG64"

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.gen = np.random.Generator(np.random.PCG64(self.seed))

    def uniform(self, low, high, size=None):
        return self.gen.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.gen.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size)

    def random(self, size=None):
        return self.gen.random(size)

    def permutation(self, n):
        return self.gen.permutation(n)

    def choice(self, a, size=None, replace=True, p=None):
        return self.gen.choice(a, size=size, replace=replace, p=p)

    def spawn(self, key: int) -> "Rng":
        """Derive an independent child stream from (seed, key)."""
        ss = np.random.SeedSequence([self.seed, int(key)])
        return Rng(int(ss.generate_state(1, dtype=np.uint64)[0]))

    def get_state(self) -> dict:
        return self.gen.bit_generator.state

    def set_state(self, state: dict) -> None:
        self.gen.bit_generator.state = state


class Tensor:
    """A node in the autodiff graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad: bool = False, *, _parents=(), _backward=None,
                 op: str = "", name: str | None = None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype or _DEFAULT_DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = _parents
        self._backward: Callable[[np.ndarray], None] | None = _backward
        self.op = op
        self.name = name

    # -- basic properties ---------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op or 'leaf'}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # -- graph --------------------------------------------------------------
    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, grad: np.ndarray | None = None) -> None:
        backward(self, grad)

    # -- operator sugar -------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def swapaxes(self, a, b):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))


TensorNode = Tensor


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    if needs:
        return Tensor(data, requires_grad=True, _parents=tuple(parents),
                      _backward=backward_fn, op=op, dtype=data.dtype)
    return Tensor(data, op=op, dtype=data.dtype)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    ndiff = g.ndim - len(shape)
    if ndiff > 0:
        g = g.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def backward(loss: Tensor, grad: np.ndarray | None = None) -> None:
    """Accumulate dloss/dleaf into ``.grad`` of every requires_grad node."""
    if grad is None:
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        grad = np.ones_like(loss.data)
    # iterative topological sort; each node visited once
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    grads: dict[int, np.ndarray] = {id(loss): np.asarray(grad, dtype=loss.data.dtype)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node._accumulate(g)
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), bw, "add")


residual_add = add


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(out, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(out, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def bw(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(out, (a, b), bw, "div")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return _make(out, (x,), lambda g: (g * 0.5 / out,), "sqrt")


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _make(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def sigmoid(x: Tensor) -> Tensor:
    out = 1.0 / (1.0 + np.exp(-x.data))
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def clamp_min(x: Tensor, lo: float) -> Tensor:
    mask = x.data > lo
    return _make(np.where(mask, x.data, lo), (x,), lambda g: (g * mask,), "clamp_min")


# ---------------------------------------------------------------------------
# reductions and shape manipulation
# ---------------------------------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    out = []
    for a in axis:
        if not -ndim <= a < ndim:
            raise ShapeError(f"axis {a} out of range for {ndim}-d tensor")
        out.append(a % ndim)
    return tuple(out)


def tsum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape),)

    return _make(np.asarray(out), (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return tsum(x, axes, keepdims) * (1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)
    return _make(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


def _is_basic_index(idx) -> bool:
    if not isinstance(idx, tuple):
        idx = (idx,)
    return all(isinstance(i, (int, slice, type(None), type(Ellipsis))) for i in idx)


def getitem(x: Tensor, idx) -> Tensor:
    out = x.data[idx]
    basic = _is_basic_index(idx)

    def bw(g):
        full = np.zeros_like(x.data)
        if basic:
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _make(np.array(out), (x,), bw, "getitem")


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = [as_tensor(t) for t in xs]
    if not xs:
        raise ShapeError("concat of an empty list")
    ax = axis % xs[0].ndim
    for t in xs[1:]:
        if t.ndim != xs[0].ndim or any(
                t.shape[i] != xs[0].shape[i] for i in range(t.ndim) if i != ax):
            raise ShapeError(f"concat shapes disagree off axis {axis}: "
                             f"{[t.shape for t in xs]}")
    out = np.concatenate([t.data for t in xs], axis=ax)
    splits = np.cumsum([t.shape[ax] for t in xs])[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=ax))

    return _make(out, xs, bw, "concat")


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(t) for t in xs]
    out = np.stack([t.data for t in xs], axis=axis)

    def bw(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _make(out, xs, bw, "stack")


def broadcast_to(x: Tensor, shape) -> Tensor:
    out = np.broadcast_to(x.data, shape)
    return _make(np.array(out), (x,), lambda g: (_unbroadcast(g, x.shape),), "broadcast")


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape} "
                         f"({a.shape[-1]} != {b.shape[-2]})")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError as exc:
        raise ShapeError(f"matmul batch dimensions not broadcastable: "
                         f"{a.shape[:-2]} vs {b.shape[:-2]}") from exc
    out = a.data @ b.data

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), bw, "matmul")


# ---------------------------------------------------------------------------
# neural primitives
# ---------------------------------------------------------------------------

def _check_finite(x: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"{what}: non-finite input")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    _check_finite(x.data, "softmax")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), bw, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    _check_finite(x.data, "log_softmax")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    sm = np.exp(out)

    def bw(g):
        return (g - sm * g.sum(axis=axis, keepdims=True),)

    return _make(out, (x,), bw, "log_softmax")


def layer_norm(x: Tensor, gamma: Tensor | None = None, beta: Tensor | None = None,
               eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply the optional affine map."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def bw(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = g * xhat
        return (inv * (g - gm - xhat * gx.mean(axis=-1, keepdims=True)),)

    out = _make(xhat, (x,), bw, "layer_norm")
    if gamma is not None:
        out = out * gamma
    if beta is not None:
        out = out + beta
    return out


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """x[..., in] @ weight[in, out] + bias[out]."""
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear: input width {x.shape[-1]} != weight rows {weight.shape[0]}")
    if x.ndim == 1:
        y = matmul(x.reshape(1, -1), weight).reshape(weight.shape[1])
    else:
        y = matmul(x, weight)
    return y + bias if bias is not None else y


def one_hot(ids, n: int) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        raise ShapeError(f"one_hot ids must lie in [0, {n})")
    out = np.zeros(ids.shape + (n,), dtype=_DEFAULT_DTYPE)
    np.put_along_axis(out, ids[..., None], 1.0, axis=-1)
    return Tensor(out)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding ids must lie in [0, {table.shape[0]})")
    out = table.data[ids]

    def bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        return (full,)

    return _make(out, (table,), bw, "embedding")


def _pad_hw(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int = 0) -> Tensor:
    """2-D convolution over NHWC input with a (kh, kw, c_in, c_out) kernel."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects NHWC input and 4-d kernel, got {x.shape}, {weight.shape}")
    n, h, w, c = x.shape
    kh, kw, ci, co = weight.shape
    if ci != c:
        raise ShapeError(f"conv2d: input has {c} channels, kernel expects {ci}")
    if stride < 1 or padding < 0:
        raise ShapeError("conv2d: stride must be >=1 and padding >=0")
    xp = _pad_hw(x.data, padding)
    hp, wp = h + 2 * padding, w + 2 * padding
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    cols = np.empty((n, oh, ow, kh, kw, c), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = xp[:, i:i + stride * oh:stride, j:j + stride * ow:stride, :]
    cols2 = cols.reshape(n * oh * ow, kh * kw * c)
    wmat = weight.data.reshape(kh * kw * c, co)
    out = (cols2 @ wmat).reshape(n, oh, ow, co)
    parents: tuple = (x, weight)
    if bias is not None:
        out = out + bias.data
        parents = (x, weight, bias)

    def bw(g):
        g2 = g.reshape(n * oh * ow, co)
        gw = (cols2.T @ g2).reshape(weight.shape)
        gx = None
        if x.requires_grad:
            gcols = (g2 @ wmat.T).reshape(n, oh, ow, kh, kw, c)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i:i + stride * oh:stride, j:j + stride * ow:stride, :] += gcols[:, :, :, i, j, :]
            gx = gxp[:, padding:padding + h, padding:padding + w, :] if padding else gxp
        res = [gx, gw]
        if bias is not None:
            res.append(g2.sum(axis=0))
        return tuple(res)

    return _make(out, parents, bw, "conv2d")


def _adaptive_bins(n_in: int, n_out: int) -> list[tuple[int, int]]:
    return [((i * n_in) // n_out, -((-(i + 1) * n_in) // n_out)) for i in range(n_out)]


def adaptive_avg_pool2d(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Average NHWC input over out_h x out_w near-equal (possibly overlapping) bins."""
    if x.ndim != 4:
        raise ShapeError(f"adaptive_avg_pool2d expects NHWC input, got {x.shape}")
    n, h, w, c = x.shape
    if out_h < 1 or out_w < 1 or out_h > h or out_w > w:
        raise ShapeError(f"adaptive_avg_pool2d: cannot pool {h}x{w} to {out_h}x{out_w}")
    rows, cols = _adaptive_bins(h, out_h), _adaptive_bins(w, out_w)
    # pooling is linear: build the (out, in) averaging matrices once
    ph = np.zeros((out_h, h))
    for i, (a, b) in enumerate(rows):
        ph[i, a:b] = 1.0 / (b - a)
    pw = np.zeros((out_w, w))
    for j, (a, b) in enumerate(cols):
        pw[j, a:b] = 1.0 / (b - a)
    ph = ph.astype(x.data.dtype)
    pw = pw.astype(x.data.dtype)
    out = np.einsum("ih,nhwc,jw->nijc", ph, x.data, pw, optimize=True)

    def bw(g):
        return (np.einsum("ih,nijc,jw->nhwc", ph, g, pw, optimize=True),)

    return _make(out, (x,), bw, "adaptive_avg_pool2d")


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------

MASK_FILL = -1e30


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None = None):
    """softmax(q k^T / sqrt(d_k)) v over the last two axes.

    ``mask`` is boolean, broadcastable to the score shape, True where a key
    may be attended.  Returns (output, weights).
    """
    dk = q.shape[-1]
    scores = matmul(q, k.swapaxes(-1, -2)) * (1.0 / math.sqrt(dk))
    if mask is not None:
        scores = add(scores, Tensor(np.where(mask, 0.0, MASK_FILL)))
    weights = softmax(scores, axis=-1)
    return matmul(weights, v), weights


def split_heads(x: Tensor, n_h: int) -> Tensor:
    *lead, L, d = x.shape
    return x.reshape(*lead, L, n_h, d // n_h).swapaxes(-2, -3)


def merge_heads(x: Tensor) -> Tensor:
    *lead, n_h, L, dh = x.shape
    return x.swapaxes(-2, -3).reshape(*lead, L, n_h * dh)


def multi_head_attention(q_in: Tensor, k_in: Tensor, v_in: Tensor, n_h: int, params: dict,
                         mask: np.ndarray | None = None):
    """Project, split into heads, attend, concatenate and project with W^h.

    ``params`` holds ``wq, wk, wv, wo`` (width x width) and optional biases
    ``bq, bk, bv, bo``.  Returns (output, per-head weights [..., n_h, Lq, Lk]).
    """
    width = params["wq"].shape[1]
    if n_h < 1 or width % n_h:
        raise ValueError(f"model width {width} is not divisible by head count {n_h}")
    if k_in.shape[-2] != v_in.shape[-2]:
        raise ShapeError(f"keys ({k_in.shape[-2]}) and values ({v_in.shape[-2]}) "
                         "must have the same sequence length")
    q = linear(q_in, params["wq"], params.get("bq"))
    k = linear(k_in, params["wk"], params.get("bk"))
    v = linear(v_in, params["wv"], params.get("bv"))
    qh, kh, vh = split_heads(q, n_h), split_heads(k, n_h), split_heads(v, n_h)
    if mask is not None:
        mask = np.asarray(mask)
        if mask.ndim < 2:
            mask = mask[None, :]  # a plain key mask applies to every query
        mask = np.expand_dims(mask, -3)
    heads, weights = scaled_dot_attention(qh, kh, vh, mask)
    return linear(merge_heads(heads), params["wo"], params.get("bo")), weights


def sinusoidal_encoding(positions, width: int) -> np.ndarray:
    """Fixed sin/cos encoding, one row per position."""
    pos = np.asarray(positions, dtype=np.float64)[..., None]
    i = np.arange(width // 2, dtype=np.float64)
    freq = np.exp(-math.log(10000.0) * 2.0 * i / width)
    pe = np.zeros(pos.shape[:-1] + (width,))
    pe[..., 0:2 * len(i):2] = np.sin(pos * freq)
    pe[..., 1:2 * len(i):2] = np.cos(pos * freq)
    return pe.astype(_DEFAULT_DTYPE)


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
