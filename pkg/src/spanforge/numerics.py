"""Dense-array reverse-mode autodiff and the AdamW optimizer.

Every differentiable op creates a new :class:`Tensor`. When a :class:`Tape` is
active and at least one input requires a gradient, the op is appended to the
tape together with a closure mapping the output gradient to input gradients.
Outside a tape nothing is recorded, which is how inference runs.
"""
from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError, DimensionError, NumericError

_DEFAULT_DTYPE = np.float32
_TAPES: list["Tape"] = []

GELU_C = math.sqrt(2.0 / math.pi)
GELU_K = 0.044715


def default_dtype():
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype new tensors are created with (gradient checks run in float64)."""
    global _DEFAULT_DTYPE
    prev = _DEFAULT_DTYPE
    _DEFAULT_DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        _DEFAULT_DTYPE = prev


def make_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.Generator(np.random.PCG64(seed))


def split_rng(seed: int, n: int) -> list[np.random.Generator]:
    """Independent child streams derived from one seed."""
    children = np.random.SeedSequence(seed).spawn(n)
    return [np.random.Generator(np.random.PCG64(c)) for c in children]


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        self.data = np.array(data, dtype=dtype or _DEFAULT_DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name

    @classmethod
    def _wrap(cls, arr, requires_grad):
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.grad = None
        t.name = None
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self):
        return self.data

    def __repr__(self):
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other, self)))

    def __rsub__(self, other):
        return add(as_tensor(other, self), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    @property
    def T(self):
        return transpose(self)


@dataclass
class _Op:
    inputs: tuple
    output: Tensor
    backward: object


class Tape:
    """Ordered record of differentiable ops; creation order is a topological order."""

    def __init__(self):
        self.ops: list[_Op] = []

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.pop()
        return False

    def __len__(self):
        return len(self.ops)

    def backward(self, loss: Tensor, params=None) -> dict:
        """Propagate d(loss)/d(node) back to the leaves.

        Leaf tensors with ``requires_grad`` get ``.grad`` set (overwritten, not
        accumulated). Tensors in ``params`` that the loss does not reach get zeros.
        Returns a dict mapping each leaf tensor to its gradient.
        """
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads = {id(loss): np.ones_like(loss.data)}
        nodes = {id(loss): loss}
        produced = set()
        for op in reversed(self.ops):
            key = id(op.output)
            produced.add(key)
            g = grads.pop(key, None)
            if g is None:
                continue
            for inp, gi in zip(op.inputs, op.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                k = id(inp)
                if k in grads:
                    grads[k] = grads[k] + gi
                else:
                    grads[k] = gi
                    nodes[k] = inp
        out = {}
        for k, g in grads.items():
            if k in produced:
                continue
            t = nodes[k]
            t.grad = np.asarray(g, dtype=t.data.dtype).reshape(t.shape)
            out[t] = t.grad
        for p in params or ():
            if p not in out:
                p.grad = np.zeros_like(p.data)
                out[p] = p.grad
        return out


def backward(loss: Tensor, tape: Tape, params=None) -> dict:
    return tape.backward(loss, params)


def _result(data, inputs, backward_fn) -> Tensor:
    tracked = bool(_TAPES) and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(data, tracked)
    if tracked:
        _TAPES[-1].ops.append(_Op(tuple(inputs), out, backward_fn))
    return out


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else _DEFAULT_DTYPE
    return Tensor(x, dtype=dtype)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a)
    try:
        data = a.data + b.data
    except ValueError as exc:
        raise DimensionError(f"add: cannot broadcast {a.shape} with {b.shape}") from exc
    sa, sb = a.shape, b.shape
    return _result(data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a)
    try:
        data = a.data * b.data
    except ValueError as exc:
        raise DimensionError(f"mul: cannot broadcast {a.shape} with {b.shape}") from exc
    ad, bd = a.data, b.data
    return _result(data, (a, b), lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,))


def scale(a: Tensor, c: float) -> Tensor:
    c = a.data.dtype.type(c)
    return _result(a.data * c, (a,), lambda g: (g * c,))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _result(y, (x,), lambda g: (g * (1.0 - y * y),))


def gelu(x: Tensor) -> Tensor:
    """tanh-approximated GELU: 0.5 x (1 + tanh(c (x + k x^3))), c = sqrt(2/pi), k = 0.044715."""
    xd = x.data
    t = np.tanh(GELU_C * (xd + GELU_K * xd ** 3))
    y = 0.5 * xd * (1.0 + t)

    def bw(g):
        dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * xd * xd)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * dt),)

    return _result(y.astype(xd.dtype), (x,), bw)


def dropout(x: Tensor, p: float, rng=None, training: bool = True) -> Tensor:
    """Inverted dropout; identity when ``training`` is False or ``p == 0``."""
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout probability must lie in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ConfigError("dropout in training mode needs a seeded generator")
    keep = (rng.random(x.shape) >= p).astype(x.data.dtype) * x.data.dtype.type(1.0 / (1.0 - p))
    return _result(x.data * keep, (x,), lambda g: (g * keep,))


def elementwise(x: Tensor, kind: str, other=None, *, p: float = 0.0, rng=None, training: bool = True) -> Tensor:
    if kind == "gelu":
        return gelu(x)
    if kind == "add":
        return add(x, other)
    if kind == "mul":
        return mul(x, other)
    if kind == "dropout":
        return dropout(x, p, rng, training)
    raise ConfigError(f"unknown elementwise kind {kind!r}")


# ------------------------------------------------------------------- shaping

def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(range(x.ndim - 2)) + (x.ndim - 1, x.ndim - 2)
    inv = tuple(np.argsort(axes))
    return _result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def getitem(x: Tensor, key) -> Tensor:
    shape, dtype = x.shape, x.data.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, key, g)
        return (full,)

    return _result(np.array(x.data[key]), (x,), bw)


def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids)
    shape, dtype = table.shape, table.data.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, shape[-1]))
        return (full,)

    return _result(table.data[ids], (table,), bw)


# ---------------------------------------------------------------- reductions

def sum_all(x: Tensor) -> Tensor:
    dtype = x.data.dtype
    total = np.asarray(x.data.sum(dtype=np.float64), dtype=dtype)
    return _result(total, (x,), lambda g: (np.broadcast_to(g, x.shape).astype(dtype),))


def mean_all(x: Tensor) -> Tensor:
    return scale(sum_all(x), 1.0 / max(x.data.size, 1))


# ------------------------------------------------------------------- linear

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; ``b`` may be a single vector or a shared 2-D matrix."""
    a = as_tensor(a)
    b = as_tensor(b, a)
    if a.ndim < 2 or b.ndim < 1:
        raise DimensionError(f"matmul needs a matrix on the left: {a.shape} x {b.shape}")
    inner_b = b.shape[0] if b.ndim == 1 else b.shape[-2]
    if a.shape[-1] != inner_b:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    try:
        data = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise DimensionError(f"matmul batch dimensions differ: {a.shape} x {b.shape}") from exc
    ad, bd = a.data, b.data
    k = ad.shape[-1]

    def bw(g):
        if bd.ndim == 1:
            ga = g[..., None] * bd
            gb = ad.reshape(-1, k).T @ g.reshape(-1)
            return ga, gb
        ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape)
        if bd.ndim == 2:
            gb = ad.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape)
        return ga, gb

    return _result(data, (a, b), bw)


# ----------------------------------------------------------------- softmaxes

def _masked(x: Tensor, mask):
    if not np.isfinite(x.data).all():
        raise NumericError("softmax input contains non-finite values")
    if mask is None:
        return x.data, None
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    if not mask.any(axis=-1).all():
        raise NumericError("softmax row has no valid position")
    return np.where(mask, x.data, -np.inf), mask


def softmax_rows(x: Tensor, mask=None) -> Tensor:
    """Softmax over the last axis. ``mask`` marks valid entries; the rest get probability exactly 0."""
    z, _ = _masked(x, mask)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    p = (e / e.sum(axis=-1, keepdims=True, dtype=np.float64)).astype(x.data.dtype)
    return _result(p, (x,), lambda g: (p * (g - (g * p).sum(axis=-1, keepdims=True)),))


def log_softmax_rows(x: Tensor, mask=None) -> Tensor:
    z, m = _masked(x, mask)
    shifted = z - z.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True, dtype=np.float64))
    out = (shifted - lse).astype(x.data.dtype)
    p = np.exp(out)

    def bw(g):
        gv = g if m is None else np.where(m, g, 0.0)
        return ((gv - p * gv.sum(axis=-1, keepdims=True)).astype(g.dtype),)

    return _result(out, (x,), bw)


def nll_pick(p: Tensor, index) -> Tensor:
    """``-log p[index]`` for a probability row, or row-wise for a batch of rows."""
    n = p.shape[-1]
    idx = np.asarray(index)
    if idx.ndim != p.ndim - 1 or (idx.ndim and idx.shape != p.shape[:-1]):
        raise DimensionError(f"nll_pick: index shape {idx.shape} does not match rows of {p.shape}")
    if np.any(idx < 0) or np.any(idx >= n):
        raise IndexError(f"nll_pick: index {index} out of range for {n} positions")
    rows = np.arange(idx.size).reshape(idx.shape) if idx.ndim else ()
    key = (rows, idx) if idx.ndim else (int(idx),)
    tiny = np.finfo(p.data.dtype).tiny
    picked = np.maximum(p.data[key], tiny)
    out = -np.log(picked)
    shape, dtype = p.shape, p.data.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        full[key] = -g / picked
        return (full,)

    return _result(np.asarray(out, dtype=dtype), (p,), bw)


def lowrank_frobenius_sq(A: Tensor, B: Tensor) -> Tensor:
    """``||B A^T||_F^2`` with the closed-form gradients ``2 B (A^T A)`` and ``2 A (B^T B)``."""
    if A.ndim != 2 or B.ndim != 2 or A.shape[1] != B.shape[1]:
        raise DimensionError(f"low-rank factors disagree: A {A.shape}, B {B.shape}")
    a = A.data.astype(np.float64)
    b = B.data.astype(np.float64)
    ata, btb = a.T @ a, b.T @ b
    value = np.asarray((ata * btb).sum(), dtype=A.data.dtype)
    return _result(value, (A, B), lambda g: ((2.0 * g * (a @ btb)).astype(A.data.dtype),
                                             (2.0 * g * (b @ ata)).astype(B.data.dtype)))


# -------------------------------------------------------------- normalization

def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-12) -> Tensor:
    if eps <= 0:
        raise ConfigError("layer_norm eps must be positive")
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layer_norm: gamma {gamma.shape} / beta {beta.shape} vs feature size {d}")
    dtype = x.data.dtype
    x64 = x.data.astype(np.float64)
    xc = x64 - x64.mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * rstd
    out = (xhat * gamma.data + beta.data).astype(dtype)

    def bw(g):
        g64 = g.astype(np.float64)
        gx_hat = g64 * gamma.data
        gx = rstd * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                     - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return (gx.astype(dtype), (g64 * xhat).sum(axis=lead).astype(dtype), g64.sum(axis=lead).astype(dtype))

    return _result(out, (x, gamma, beta), bw)


# ------------------------------------------------------------------- AdamW

@dataclass
class AdamWState:
    lr: float = 3e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params, **hyper) -> "AdamWState":
        state = cls(**hyper)
        state.m = [np.zeros(p.shape, dtype=np.float64) for p in params]
        state.v = [np.zeros(p.shape, dtype=np.float64) for p in params]
        return state


def adamw_step(params, grads, state: AdamWState) -> AdamWState:
    """One AdamW update in place; weight decay acts on the weights directly, not via the gradient."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise DimensionError(f"adamw_step: {len(params)} params, {len(grads)} grads, {len(state.m)} moment slots")
    state.step += 1
    b1, b2, lr = state.beta1, state.beta2, state.lr
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = np.zeros(p.shape)
        if np.shape(g) != p.shape or state.m[i].shape != p.shape:
            raise DimensionError(f"adamw_step: param {p.shape} vs grad {np.shape(g)} vs state {state.m[i].shape}")
        g = np.asarray(g, dtype=np.float64)
        w = p.data.astype(np.float64)
        w = w * (1.0 - lr * state.weight_decay)
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g
        w = w - lr * (state.m[i] / c1) / (np.sqrt(state.v[i] / c2) + state.eps)
        p.data[...] = w.astype(p.data.dtype)
    return state
