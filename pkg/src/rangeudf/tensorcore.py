"""Dense numpy tensors with a reverse-mode gradient tape.

Only what the network needs: broadcasting elementwise math, matmul-style
linear layers, gathers, set pooling, a couple of losses and ADAM.

Operations are recorded only while a :class:`Tape` is active, so inference
runs at plain numpy speed::

    with Tape() as tape:
        loss = l1_loss(linear(x, W, b), y)
    tape.backward(loss)
    W.grad  # dloss/dW
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import EmptySetError, ShapeError, ValidationError

DEFAULT_DTYPE = np.float32
LEAKY_SLOPE = 0.2


class Tensor:
    """An n-d array plus autodiff bookkeeping."""

    __slots__ = ("data", "grad", "requires_grad", "name", "is_leaf")

    def __init__(self, data, requires_grad: bool = False, name: str = "", dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and arr.dtype.kind in "iub":
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self.is_leaf = True

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, dtype={self.data.dtype})"

    # operator sugar
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

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, key):
        return index(self, key)


class Parameter(Tensor):
    """A named, trainable leaf tensor."""

    __slots__ = ()

    def __init__(self, data, name: str = "", dtype=DEFAULT_DTYPE):
        super().__init__(np.array(data, dtype=dtype), requires_grad=True, name=name)
        self.grad = np.zeros_like(self.data)


# ---------------------------------------------------------------------------
# tape


@dataclass
class _Node:
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], tuple]


class Tape:
    """Wengert list of the ops executed while the tape is active.

    Execution order is a topological order of the graph, so walking the list
    backwards visits each node once, after all of its consumers.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def backward(self, out: Tensor, seed: np.ndarray | None = None) -> None:
        if seed is None:
            if out.data.size != 1:
                raise ShapeError("backward needs a scalar output or an explicit seed")
            seed = np.ones_like(out.data)
        grads: dict[int, np.ndarray] = {id(out): np.asarray(seed, dtype=out.data.dtype)}
        if out.is_leaf:
            _accumulate_leaf(out, grads[id(out)])
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                if inp.is_leaf:
                    _accumulate_leaf(inp, gi)
                else:
                    key = id(inp)
                    prev = grads.get(key)
                    grads[key] = gi if prev is None else prev + gi


_TAPES: list[Tape] = []


def _accumulate_leaf(t: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=t.data.dtype).reshape(t.data.shape)
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad += g


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, _as_tensor(b, a)
    return _as_tensor(a, b), b


def _record(out_data: np.ndarray, inputs: Sequence[Tensor], backward) -> Tensor:
    needs = bool(_TAPES) and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        _TAPES[-1].nodes.append(_Node(out, tuple(inputs), backward))
        out.is_leaf = False
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# kink log: lets grad_check skip finite differences that straddle a kink

_KINK_LOG: list[list[np.ndarray]] = []


def _log_kink(mask: np.ndarray) -> None:
    if _KINK_LOG:
        _KINK_LOG[-1].append(mask)


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return _record(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return _record(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    return _record(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    y = ad / bd
    return _record(
        y,
        (a, b),
        lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * y / bd, bd.shape)),
    )


def sqrt(a: Tensor) -> Tensor:
    y = np.sqrt(a.data)
    # zero has no finite derivative; report 0 there instead of inf
    safe = np.where(y > 0, y, 1.0)
    return _record(y, (a,), lambda g: (np.where(y > 0, g / (2 * safe), 0.0).astype(y.dtype),))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _record(y, (a,), lambda g: (g * y,))


def abs_(a: Tensor) -> Tensor:
    s = np.sign(a.data)
    _log_kink(a.data > 0)
    return _record(np.abs(a.data), (a,), lambda g: (g * s,))


def minimum(a: Tensor, c: float) -> Tensor:
    """Elementwise min(a, c) for a constant c; gradient flows where a < c."""
    keep = a.data < c
    _log_kink(keep)
    return _record(np.minimum(a.data, c), (a,), lambda g: (g * keep,))


def relu(x: Tensor) -> Tensor:
    # subgradient at 0 takes the positive branch
    pos = x.data >= 0
    _log_kink(pos)
    return _record(np.where(pos, x.data, 0).astype(x.data.dtype), (x,), lambda g: (g * pos,))


def leaky_relu(x: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    pos = x.data >= 0
    _log_kink(pos)
    scale = np.where(pos, 1.0, slope).astype(x.data.dtype)
    return _record(x.data * scale, (x,), lambda g: (g * scale,))


# ---------------------------------------------------------------------------
# shape ops


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _record(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def broadcast_to(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _record(np.broadcast_to(a.data, shape), (a,), lambda g: (_unbroadcast(g, old),))


def index(a: Tensor, key) -> Tensor:
    """Basic (slice/int) indexing."""
    old_shape, dt = a.shape, a.data.dtype

    def back(g):
        full = np.zeros(old_shape, dtype=dt)
        full[key] += g
        return (full,)

    return _record(a.data[key], (a,), back)


def concat(parts: Sequence, axis: int = -1) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record(np.concatenate([p.data for p in parts], axis=axis), parts, back)


def take_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    """Gather rows of a 2-d tensor: out[...] = a[idx[...]]."""
    if a.ndim != 2:
        raise ShapeError(f"take_rows expects a 2-d tensor, got shape {a.shape}")
    idx = np.asarray(idx)
    n, d = a.shape

    def back(g):
        flat = idx.reshape(-1)
        m = flat.size
        scatter = sp.csr_matrix(
            (np.ones(m, dtype=g.dtype), (flat, np.arange(m))), shape=(n, m)
        )
        return (np.asarray(scatter @ g.reshape(m, d)),)

    return _record(a.data[idx], (a,), back)


# ---------------------------------------------------------------------------
# reductions (f64 accumulation)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    y = a.data.sum(axis=axis, keepdims=keepdims, dtype=np.float64).astype(a.data.dtype)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).astype(a.data.dtype),)

    return _record(y, (a,), back)


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return mul(sum_(a, axis=axis), 1.0 / n)


def weighted_mean(a: Tensor, w: np.ndarray) -> Tensor:
    """sum(w * a) / sum(w) for a constant weight array; 0 when sum(w) = 0."""
    total = float(np.sum(w, dtype=np.float64))
    if total == 0.0:
        return Tensor(np.zeros((), dtype=a.data.dtype))
    return mul(sum_(mul(a, w.astype(a.data.dtype))), 1.0 / total)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _record(y, (a,), back)


# ---------------------------------------------------------------------------
# layers


def linear(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    """y = x @ W + b over the last axis of x."""
    x = _as_tensor(x)
    if W.ndim != 2 or x.shape[-1] != W.shape[0]:
        raise ShapeError(f"linear: input {x.shape} vs weight {W.shape}")
    if b is not None and b.shape != (W.shape[1],):
        raise ShapeError(f"linear: bias {b.shape} vs weight {W.shape}")
    xd, Wd = x.data, W.data
    y = xd @ Wd
    if b is not None:
        y = y + b.data
    n_in, n_out = Wd.shape

    def back(g):
        g2 = g.reshape(-1, n_out)
        gx = (g @ Wd.T) if x.requires_grad else None
        gW = xd.reshape(-1, n_in).T @ g2
        gb = g2.sum(axis=0) if b is not None else None
        return (gx, gW, gb)

    inputs = (x, W) if b is None else (x, W, b)
    return _record(y, inputs, back)


def attset_pool(X: Tensor, A_w: Tensor, A_b: Tensor) -> Tensor:
    """Attention set pooling over axis -2.

    Per-element logits ``X @ A_w + A_b`` are softmaxed across the set per
    channel and used to weight the elements: out[..., d] = sum_k a[k, d] X[k, d].
    """
    if X.ndim < 2:
        raise ShapeError(f"attset_pool expects [..., K, D], got {X.shape}")
    if X.shape[-2] == 0:
        raise EmptySetError("attset_pool over an empty set")
    alpha = softmax(linear(X, A_w, A_b), axis=-2)
    return sum_(mul(alpha, X), axis=-2)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Per-row cross entropy -log softmax(logits)[label]; returns shape logits.shape[:-1]."""
    labels = np.asarray(labels)
    C = logits.shape[-1]
    if labels.shape != logits.shape[:-1]:
        raise ShapeError(f"labels {labels.shape} vs logits {logits.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise ValidationError(f"label out of range [0, {C})")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    picked = np.take_along_axis(logp, labels[..., None].astype(np.int64), axis=-1)[..., 0]

    def back(g):
        p = np.exp(logp)
        np.put_along_axis(
            p,
            labels[..., None].astype(np.int64),
            np.take_along_axis(p, labels[..., None].astype(np.int64), axis=-1) - 1.0,
            axis=-1,
        )
        return (p * g[..., None],)

    return _record(-picked, (logits,), back)


def l1_loss(pred: Tensor, target) -> Tensor:
    target = _as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"l1_loss: {pred.shape} vs {target.shape}")
    return mean(abs_(sub(pred, target)))


# ---------------------------------------------------------------------------
# init + optimizer


def init_linear(rng: np.random.Generator, n_in: int, n_out: int,
                name: str) -> tuple[Parameter, Parameter]:
    """Weights and bias uniform in +-1/sqrt(n_in).

    The wider He-style range lets the first ADAM steps push the ReLU distance
    output below zero on every query, after which it never recovers.
    """
    bound = 1.0 / math.sqrt(n_in)
    W = Parameter(rng.uniform(-bound, bound, size=(n_in, n_out)), name=f"{name}.W")
    b = Parameter(rng.uniform(-bound, bound, size=n_out), name=f"{name}.b")
    return W, b


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: Sequence[Parameter], grads: Sequence[np.ndarray] | None,
              state: AdamState, lr: float = 1e-3, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    """In-place ADAM update with bias correction. ``grads=None`` reads ``p.grad``."""
    if grads is None:
        grads = [p.grad for p in params]
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for p, g in zip(params, grads):
        if g is None:
            continue
        m = state.m.get(p.name)
        if m is None:
            m = state.m[p.name] = np.zeros_like(p.data)
            state.v[p.name] = np.zeros_like(p.data)
        v = state.v[p.name]
        if m.shape != p.data.shape:
            raise ShapeError(f"adam state for {p.name} has shape {m.shape}, param {p.data.shape}")
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        step = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        p.data -= step.astype(p.data.dtype)
    return state


def zero_grads(params: Iterable[Parameter]) -> None:
    for p in params:
        p.zero_grad()


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-3,
               floor: float = 1e-6, max_entries: int | None = None, seed: int = 0) -> float:
    """Max relative error between tape gradients and central differences.

    Runs in float64: parameters are promoted for the duration of the check and
    restored afterwards. The relative error is taken per tensor in the infinity
    norm, ``max|a - n| / max(max|a|, max|n|, floor)``; the floor keeps
    structurally-zero gradients (e.g. a bias a softmax is invariant to) from
    dividing rounding noise by zero. Entries whose +/-h perturbation
    flips the side of any kink (relu, abs, min) are skipped.

    With ``max_entries`` set, each tensor larger than that is probed at a
    seeded random subset of its entries; the rest are left out of the check.
    """
    saved = [p.data for p in params]
    saved_grad = [p.grad for p in params]
    try:
        for p in params:
            p.data = p.data.astype(np.float64)
            p.grad = None
            p.requires_grad = True
        with Tape() as tape:
            _KINK_LOG.append([])
            try:
                out = f()
            finally:
                base_kinks = _KINK_LOG.pop()
        if out.data.size != 1:
            raise ShapeError("grad_check needs a scalar function")
        tape.backward(out)

        def probe() -> tuple[float, list[np.ndarray]]:
            _KINK_LOG.append([])
            try:
                val = float(f().data)
            finally:
                kinks = _KINK_LOG.pop()
            return val, kinks

        def same(k):
            return len(k) == len(base_kinks) and all(
                np.array_equal(a, b) for a, b in zip(k, base_kinks)
            )

        worst = 0.0
        for p in params:
            analytic = np.zeros_like(p.data) if p.grad is None else p.grad
            numeric = np.zeros_like(p.data)
            flat = p.data.reshape(-1)
            if max_entries is not None and flat.size > max_entries:
                probe_at = np.random.default_rng(seed).choice(flat.size, max_entries, replace=False)
                valid = np.zeros(p.data.shape, dtype=bool)
                valid.flat[probe_at] = True
            else:
                probe_at = range(flat.size)
                valid = np.ones(p.data.shape, dtype=bool)
            for i in probe_at:
                orig = flat[i]
                flat[i] = orig + h
                fp, kp = probe()
                flat[i] = orig - h
                fm, km = probe()
                flat[i] = orig
                numeric.flat[i] = (fp - fm) / (2 * h)
                valid.flat[i] = same(kp) and same(km)
            a, n = analytic[valid], numeric[valid]
            if a.size == 0:
                continue
            scale = max(np.abs(a).max(), np.abs(n).max(), floor)
            worst = max(worst, float(np.abs(a - n).max() / scale))
        return worst
    finally:
        for p, d, g in zip(params, saved, saved_grad):
            p.data = d
            p.grad = g


# ---------------------------------------------------------------------------
# parameter holders


@dataclass
class Dense:
    W: Parameter
    b: Parameter

    @classmethod
    def init(cls, rng: np.random.Generator, n_in: int, n_out: int, name: str) -> "Dense":
        return cls(*init_linear(rng, n_in, n_out, name))

    def __call__(self, x) -> Tensor:
        return linear(x, self.W, self.b)

    @property
    def shape(self) -> tuple[int, int]:
        return self.W.shape

    def parameters(self) -> list[Parameter]:
        return [self.W, self.b]


@dataclass
class AttSet:
    """Per-channel attention pooling over a set axis (see :func:`attset_pool`)."""

    A_w: Parameter
    A_b: Parameter

    @classmethod
    def init(cls, rng: np.random.Generator, dim: int, name: str) -> "AttSet":
        return cls(*init_linear(rng, dim, dim, name))

    def __call__(self, X: Tensor) -> Tensor:
        return attset_pool(X, self.A_w, self.A_b)

    @property
    def dim(self) -> int:
        return self.A_w.shape[0]

    def parameters(self) -> list[Parameter]:
        return [self.A_w, self.A_b]
