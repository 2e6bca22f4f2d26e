"""Minimal dense tensors with tape-based reverse-mode autodiff.

Everything the models need is here: a numpy-backed ``Tensor``, a ``Tape`` that
records differentiable ops inside a ``with Tape():`` block, counter-based
``RngStream`` randomness, the loss primitives, and an Adam step.

Ops outside an active tape (or on tensors that do not require grad) produce
plain results with no recording, which is how inference runs.
"""
from __future__ import annotations

import hashlib
import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float32


class NonFiniteError(FloatingPointError):
    """A forward op produced NaN or Inf."""


class TapeError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# tape

_local = threading.local()


def _active_tape() -> "Tape | None":
    return getattr(_local, "tape", None)


class Tape:
    """Execution-ordered record of differentiable ops.

    Only one tape is active per thread. Backward replays the record in
    exact reverse and may run once; ``reset`` makes the tape reusable.
    """

    def __init__(self) -> None:
        self.nodes: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []
        self.consumed = False
        self._prev: Tape | None = None

    def __enter__(self) -> "Tape":
        self._prev = _active_tape()
        _local.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _local.tape = self._prev
        self._prev = None

    def record(self, out: "Tensor", backward_fn: Callable[[np.ndarray], None]) -> None:
        if self.consumed:
            raise TapeError("tape already consumed by backward; call reset() first")
        out._tape = self
        self.nodes.append((out, backward_fn))

    def reset(self) -> None:
        for out, _ in self.nodes:
            out._tape = None
        self.nodes = []
        self.consumed = False


class no_grad:
    """Suspend recording inside the block (the active tape is kept aside)."""

    def __enter__(self) -> None:
        self._saved = _active_tape()
        _local.tape = None

    def __exit__(self, *exc) -> None:
        _local.tape = self._saved


# --------------------------------------------------------------------------
# tensor


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_tape", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else DTYPE)
        self.data: np.ndarray = np.ascontiguousarray(arr)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._tape: Tape | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __add__(self, other):
        return add(self, _wrap(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _wrap(other, self))

    def __rsub__(self, other):
        return sub(_wrap(other, self), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _wrap(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype), dtype=like.data.dtype)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    if not np.isfinite(np.add.reduce(data, axis=None)):
        raise NonFiniteError("non-finite value produced by forward op")
    out = Tensor(data, dtype=data.dtype)
    tape = _active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        tape.record(out, backward_fn)
    return out


def _accum(t: Tensor, g: np.ndarray, fresh: bool = False) -> None:
    """Add ``g`` into ``t.grad``; ``fresh`` arrays are owned by nobody else and may be adopted."""
    if not t.requires_grad:
        return
    if g.dtype != t.data.dtype:
        g = g.astype(t.data.dtype)
        fresh = True
    if t.grad is None:
        t.grad = g if fresh and g.flags.c_contiguous and g.shape == t.shape else np.array(g, copy=True).reshape(t.shape)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every tensor upstream of ``loss``."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None:
        raise TapeError("loss is not on an active tape (dangling)")
    if tape.consumed:
        raise TapeError("backward called twice on the same tape without reset")
    loss.grad = np.ones_like(loss.data)
    for out, fn in reversed(tape.nodes):
        if out.grad is not None:
            fn(out.grad)
    tape.consumed = True
    # drop closures and intermediate grads now; they pin every activation
    for out, _ in tape.nodes:
        if out is not loss:
            out.grad = None
    tape.nodes = []


# --------------------------------------------------------------------------
# elementwise and shape ops


def add(a: Tensor, b: Tensor) -> Tensor:
    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _result(a.data + b.data, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(-g, b.shape))

    return _result(a.data - b.data, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    def bw(g):
        _accum(a, _unbroadcast(g * b.data, a.shape))
        _accum(b, _unbroadcast(g * a.data, b.shape))

    return _result(a.data * b.data, (a, b), bw)


def scale(a: Tensor, c: float) -> Tensor:
    c = a.data.dtype.type(c)

    def bw(g):
        _accum(a, g * c, True)

    return _result(a.data * c, (a,), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes, numpy broadcasting rules."""
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul needs tensors with at least 2 dims")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch {a.shape} x {b.shape}")
    if b.ndim == 2 and a.ndim > 2:
        # stacked rows times one matrix: a single GEMM in both directions
        n, k = b.shape
        a2 = a.data.reshape(-1, n)

        def bw_flat(g):
            g2 = g.reshape(-1, k)
            if a.requires_grad:
                _accum(a, (g2 @ b.data.T).reshape(a.shape), True)
            if b.requires_grad:
                _accum(b, a2.T @ g2, True)

        return _result((a2 @ b.data).reshape(*a.shape[:-1], k), (a, b), bw_flat)

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return _result(a.data @ b.data, (a, b), bw)


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    """Permute axes; default swaps the last two."""
    if axes is None:
        axes = list(range(a.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bw(g):
        _accum(a, np.transpose(g, inv))

    return _result(np.ascontiguousarray(np.transpose(a.data, axes)), (a,), bw)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    def bw(g):
        _accum(a, g.reshape(a.shape))

    return _result(a.data.reshape(shape), (a,), bw)


def sum_all(a: Tensor) -> Tensor:
    def bw(g):
        _accum(a, np.broadcast_to(g, a.shape))

    return _result(np.asarray(a.data.sum(dtype=np.float64), dtype=a.data.dtype), (a,), bw)


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    if axis is None:
        n = a.data.size

        def bw(g):
            _accum(a, np.broadcast_to(g / n, a.shape))

        return _result(np.asarray(a.data.mean(dtype=np.float64), dtype=a.data.dtype), (a,), bw)
    n = a.shape[axis]

    def bw_axis(g):
        _accum(a, np.broadcast_to(np.expand_dims(g, axis) / n, a.shape))

    return _result(a.data.mean(axis=axis, dtype=np.float64).astype(a.data.dtype), (a,), bw_axis)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def bw(g):
        _accum(a, g * out * (1.0 - out), True)

    return _result(out, (a,), bw)


_GELU_C = math.sqrt(2.0 / math.pi)


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient passes where the input is strictly inside."""
    inside = (a.data > lo) & (a.data < hi)

    def bw(g):
        _accum(a, g * inside, True)

    return _result(np.clip(a.data, lo, hi), (a,), bw)


def gelu(a: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    x = a.data
    f = x.dtype.type
    x2 = x * x
    t = np.tanh(f(_GELU_C) * x * (f(1.0) + f(0.044715) * x2))
    out = f(0.5) * x * (f(1.0) + t)

    def bw(g):
        dinner = f(_GELU_C) * (f(1.0) + f(3 * 0.044715) * x2)
        _accum(a, g * (f(0.5) * (f(1.0) + t) + f(0.5) * x * (f(1.0) - t * t) * dinner), True)

    return _result(out.astype(x.dtype, copy=False), (a,), bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.data
    mu = d.mean(axis=-1, keepdims=True)
    xc = d - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gamma.data + beta.data

    def bw(g):
        if gamma.requires_grad:
            _accum(gamma, _unbroadcast(g * xhat, gamma.shape))
        if beta.requires_grad:
            _accum(beta, _unbroadcast(g, beta.shape))
        if x.requires_grad:
            gx = g * gamma.data
            dx = (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True)) * rstd
            _accum(x, dx, True)

    return _result(out.astype(d.dtype, copy=False), (x, gamma, beta), bw)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError("embedding id out of range")

    def bw(g):
        if table.requires_grad:
            gt = np.zeros_like(table.data)
            np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
            _accum(table, gt)

    return _result(table.data[ids], (table,), bw)


def concat_rows(parts: Sequence[Tensor], axis: int = -2) -> Tensor:
    """Concatenate along ``axis`` (rows of the last matrix by default)."""
    parts = list(parts)
    ax = axis % parts[0].ndim
    sizes = [p.shape[ax] for p in parts]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
            if p.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[ax] = slice(lo, hi)
                _accum(p, g[tuple(sl)])

    return _result(np.concatenate([p.data for p in parts], axis=ax), parts, bw)


def split_rows(x: Tensor, sizes: Sequence[int], axis: int = -2) -> list[Tensor]:
    ax = axis % x.ndim
    if sum(sizes) != x.shape[ax]:
        raise ValueError(f"split sizes {sizes} do not cover axis of length {x.shape[ax]}")
    out = []
    lo = 0
    for n in sizes:
        out.append(take_slice(x, lo, lo + n, axis=ax))
        lo += n
    return out


def take_slice(x: Tensor, lo: int, hi: int, axis: int = -2) -> Tensor:
    ax = axis % x.ndim
    sl = [slice(None)] * x.ndim
    sl[ax] = slice(lo, hi)
    sl = tuple(sl)

    def bw(g):
        gx = np.zeros_like(x.data)
        gx[sl] = g
        _accum(x, gx, True)

    return _result(np.ascontiguousarray(x.data[sl]), (x,), bw)


def broadcast_rows(x: Tensor, shape: Sequence[int]) -> Tensor:
    def bw(g):
        _accum(x, _unbroadcast(g, x.shape))

    return _result(np.ascontiguousarray(np.broadcast_to(x.data, tuple(shape))), (x,), bw)


# --------------------------------------------------------------------------
# softmax family


def _check_temperature(temperature: float) -> None:
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")


def softmax_t(x: Tensor, temperature: float = 1.0, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """softmax(x / temperature) along ``axis``.

    ``mask`` (broadcastable boolean, True = keep) gives excluded entries an
    exact zero probability.
    """
    _check_temperature(temperature)
    f = x.data.dtype.type
    z = x.data * f(1.0 / temperature) if temperature != 1.0 else x.data.copy()
    if mask is not None:
        z += np.where(mask, f(0.0), f(-np.inf))
    z -= z.max(axis=axis, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=axis, keepdims=True)
    out = z

    def bw(g):
        gx = g * out
        gx -= out * gx.sum(axis=axis, keepdims=True)
        if temperature != 1.0:
            gx *= f(1.0 / temperature)
        _accum(x, gx, True)

    return _result(out, (x,), bw)


def log_softmax_t(x: Tensor, temperature: float = 1.0, axis: int = -1) -> Tensor:
    _check_temperature(temperature)
    z = x.data / x.data.dtype.type(temperature)
    z = z - z.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    sm = np.exp(out)

    def bw(g):
        _accum(x, (g - sm * g.sum(axis=axis, keepdims=True)) / temperature)

    return _result(out, (x,), bw)


def _log_softmax_np(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


# --------------------------------------------------------------------------
# losses (accumulated in float64, emitted in the input dtype)


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-probability of ``targets`` under ``softmax(logits)``.

    ``logits`` is (..., V) and ``targets`` an integer array matching the
    leading shape.
    """
    tg = np.asarray(targets, dtype=np.int64)
    V = logits.shape[-1]
    if tg.shape != logits.shape[:-1]:
        raise ValueError(f"targets shape {tg.shape} does not match logits rows {logits.shape[:-1]}")
    if tg.size and (tg.min() < 0 or tg.max() >= V):
        raise IndexError("target id out of vocabulary range")
    z = logits.data.astype(np.float64)
    logp = _log_softmax_np(z)
    flat = logp.reshape(-1, V)
    idx = tg.reshape(-1)
    n = idx.size
    loss = -flat[np.arange(n), idx].mean()

    def bw(g):
        p = np.exp(flat)
        p[np.arange(n), idx] -= 1.0
        _accum(logits, (g * p / n).reshape(logits.shape))

    return _result(np.asarray(loss, dtype=logits.data.dtype), (logits,), bw)


def cross_entropy_np(logits: np.ndarray, targets) -> float:
    """Gradient-free cross entropy, float64 throughout."""
    tg = np.asarray(targets, dtype=np.int64).reshape(-1)
    logp = _log_softmax_np(np.asarray(logits, dtype=np.float64)).reshape(-1, logits.shape[-1])
    return float(-logp[np.arange(tg.size), tg].mean())


def mse(a: Tensor, b: Tensor, weights: Tensor | np.ndarray | None = None) -> Tensor:
    """Row-wise squared error: (1/N) sum_i w_i ||a_i - b_i||^2.

    Rows are the second-to-last axis; any leading axes are averaged too.
    Without weights every row counts 1.
    """
    if a.shape != b.shape:
        raise ValueError(f"mse shape mismatch {a.shape} vs {b.shape}")
    diff = a.data.astype(np.float64) - b.data.astype(np.float64)
    sq = (diff * diff).sum(axis=-1)
    n_rows = sq.size
    if weights is None:
        w = np.ones_like(sq)
    else:
        w0 = np.asarray(weights.data if isinstance(weights, Tensor) else weights, dtype=np.float64)
        try:
            w = np.broadcast_to(w0, sq.shape)
        except ValueError:
            raise ValueError(f"weights shape {w0.shape} does not match row shape {sq.shape}") from None
    loss = (w * sq).sum() / n_rows
    wt = weights if isinstance(weights, Tensor) else None

    def bw(g):
        g = float(np.asarray(g).reshape(()))
        if a.requires_grad or b.requires_grad:
            ga = (2.0 * g / n_rows) * w[..., None] * diff
            _accum(a, ga)
            _accum(b, -ga)
        if wt is not None and wt.requires_grad:
            _accum(wt, _unbroadcast(g * sq / n_rows, wt.shape))

    parents = (a, b) if wt is None else (a, b, wt)
    return _result(np.asarray(loss, dtype=a.data.dtype), parents, bw)


def kl_div(p_logits: Tensor, q_logits: Tensor, temperature: float = 1.0) -> Tensor:
    """KL(softmax(p/T) || softmax(q/T)) summed over the vocab, averaged over rows.

    The target side ``p_logits`` is treated as a constant.
    """
    _check_temperature(temperature)
    if p_logits.shape != q_logits.shape:
        raise ValueError(f"kl_div shape mismatch {p_logits.shape} vs {q_logits.shape}")
    V = p_logits.shape[-1]
    lp = _log_softmax_np(p_logits.data.astype(np.float64) / temperature).reshape(-1, V)
    lq = _log_softmax_np(q_logits.data.astype(np.float64) / temperature).reshape(-1, V)
    p = np.exp(lp)
    rows = lp.shape[0]
    loss = max((p * (lp - lq)).sum() / rows, 0.0)

    def bw(g):
        q = np.exp(lq)
        _accum(q_logits, (float(np.asarray(g).reshape(())) * (q - p) / (temperature * rows)).reshape(q_logits.shape))

    return _result(np.asarray(loss, dtype=q_logits.data.dtype), (q_logits,), bw)


# --------------------------------------------------------------------------
# randomness


@dataclass
class RngStream:
    """Counter-based random stream (Philox keyed by stream id and seed).

    Equal ``(stream_id, seed, counter)`` always yields equal draws. Draws
    consume whole Philox blocks of four 64-bit words.
    """

    stream_id: str
    seed: int
    counter: int = 0

    def _key(self) -> int:
        h = hashlib.blake2b(f"{self.stream_id}|{self.seed}".encode(), digest_size=16).digest()
        return int.from_bytes(h, "little")

    def raw(self, n: int) -> np.ndarray:
        blocks = -(-n // 4)
        bg = np.random.Philox(key=self._key(), counter=self.counter)
        out = bg.random_raw(blocks * 4)[:n]
        self.counter += blocks
        return out

    def uniform(self, shape) -> np.ndarray:
        shape = tuple(np.atleast_1d(shape)) if not isinstance(shape, tuple) else shape
        n = int(np.prod(shape)) if shape else 1
        u = (self.raw(n) >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)
        return u.reshape(shape)

    def normal(self, shape) -> np.ndarray:
        shape = tuple(np.atleast_1d(shape)) if not isinstance(shape, tuple) else shape
        n = int(np.prod(shape)) if shape else 1
        u = self.uniform((2 * (-(-n // 2)),))
        u1 = 1.0 - u[0::2]
        u2 = u[1::2]
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([r * np.cos(2 * np.pi * u2), r * np.sin(2 * np.pi * u2)])[:n]
        return z.reshape(shape)

    def integers(self, low: int, high: int, size: int | None = None):
        u = self.uniform((1 if size is None else size,))
        v = low + np.floor(u * (high - low)).astype(np.int64)
        v = np.minimum(v, high - 1)
        return int(v[0]) if size is None else v

    def child(self, *names) -> "RngStream":
        return RngStream("/".join([self.stream_id, *map(str, names)]), self.seed)


def dropout(x: Tensor, p: float, stream: RngStream | None) -> Tensor:
    """Inverted dropout; the mask is a pure function of the stream state."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if p == 0.0:
        return x
    keep = stream.uniform(x.shape) >= p
    m = keep.astype(x.data.dtype) * x.data.dtype.type(1.0 / (1.0 - p))

    def bw(g):
        _accum(x, g * m, True)

    return _result(x.data * m, (x,), bw)


# --------------------------------------------------------------------------
# optimisation


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray | None],
    state: AdamState,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> None:
    """One bias-corrected Adam update, in place. Missing grads count as zero."""
    b1, b2 = betas
    state.step += 1
    t = state.step
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name in sorted(params):
        p = params[name]
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        upd = (lr / c1) * m / (np.sqrt(v / c2) + eps)
        p.data -= upd.astype(p.data.dtype)


def clip_grad_norm(grads: dict[str, np.ndarray | None], max_norm: float) -> float:
    total = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values() if g is not None))
    if max_norm > 0 and total > max_norm:
        c = max_norm / (total + 1e-12)
        for g in grads.values():
            if g is not None:
                g *= c
    return total


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# --------------------------------------------------------------------------
# finite differences


def finite_difference_grad(fn: Callable[[], float], x: np.ndarray, eps: float = 1e-3) -> np.ndarray:
    """Central-difference gradient of the scalar ``fn()`` w.r.t. ``x`` (mutated in place)."""
    g = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        fp = fn()
        x[i] = old - eps
        fm = fn()
        x[i] = old
        g[i] = (fp - fm) / (2 * eps)
    return g


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    num = float(np.linalg.norm(np.asarray(a, np.float64) - np.asarray(b, np.float64)))
    den = max(float(np.linalg.norm(a)), float(np.linalg.norm(b)), 1e-12)
    return num / den


def gradcheck(build: Callable[..., Tensor], arrays, seed: int = 0, eps: float = 1e-3) -> float:
    """Worst relative error between tape gradients and central differences.

    Runs in float64. ``build(*tensors)`` returns a tensor, which is contracted
    with a fixed random projection so every output element contributes.
    """
    rng = np.random.default_rng(seed)
    xs = [np.array(a, dtype=np.float64) for a in arrays]
    with no_grad():
        out_shape = build(*[Tensor(x, dtype=np.float64) for x in xs]).shape
    proj = rng.standard_normal(out_shape)

    def scalar(*vals):
        with no_grad():
            out = build(*[Tensor(v, dtype=np.float64) for v in vals])
        return float((out.data * proj).sum())

    ts = [Tensor(x.copy(), requires_grad=True, dtype=np.float64) for x in xs]
    with Tape():
        out = build(*ts)
        backward(sum_all(mul(out, Tensor(proj, dtype=np.float64))))
    errs = []
    for i, x in enumerate(xs):
        fd = finite_difference_grad(lambda: scalar(*xs), x, eps=eps)
        an = ts[i].grad if ts[i].grad is not None else np.zeros_like(x)
        errs.append(relative_error(an, fd))
    return max(errs)
