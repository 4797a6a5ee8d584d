"""Tape-based reverse-mode differentiation over small float64 arrays.

Tensors created with :meth:`Tape.param` are leaves. Every primitive applied
to a tensor that lives on a tape appends an entry to that tape; operations on
tape-less tensors just compute values, which is how trained networks are
evaluated at inference time. Rows of a 2-D tensor are treated as a batch.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp


class Tensor:
    __slots__ = ("data", "tape", "index", "__weakref__")

    def __init__(self, data, tape: "Tape | None" = None, index: int = -1):
        self.data = np.asarray(data, dtype=np.float64)
        self.tape = tape
        self.index = index

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self) -> str:
        where = f", tape#{self.index}" if self.tape is not None else ""
        return f"Tensor(shape={self.shape}{where})"

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
        return scale(self, -1.0)


class Tape:
    """Append-only record of primitive applications."""

    def __init__(self):
        self.entries: list[tuple[Tensor, tuple[Tensor, ...], object]] = []

    def __len__(self) -> int:
        return len(self.entries)

    def param(self, data) -> Tensor:
        t = Tensor(np.array(data, dtype=np.float64), self, len(self.entries))
        self.entries.append((t, (), None))
        return t


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(data, inputs: tuple[Tensor, ...], vjp) -> Tensor:
    tape = None
    for t in inputs:
        if t.tape is not None:
            if tape is not None and t.tape is not tape:
                raise ValueError("inputs belong to different tapes")
            tape = t.tape
    out = Tensor(data)
    if tape is not None:
        out.tape = tape
        out.index = len(tape.entries)
        tape.entries.append((out, inputs, vjp))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def backward(tape: Tape, loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Gradient of a scalar ``loss`` with respect to every leaf of ``tape``.

    Leaves the loss does not depend on get zero gradients.
    """
    if loss.data.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.shape}")
    if loss.tape is not tape:
        raise ValueError("loss was not recorded on this tape")
    entries = tape.entries
    grads: list[np.ndarray | None] = [None] * len(entries)
    grads[loss.index] = np.ones_like(loss.data)
    for i in range(loss.index, -1, -1):
        g = grads[i]
        if g is None:
            continue
        _, inputs, vjp = entries[i]
        if vjp is None:
            continue
        for t, pg in zip(inputs, vjp(g)):
            if pg is None or t.tape is not tape:
                continue
            j = t.index
            grads[j] = pg if grads[j] is None else grads[j] + pg
    return {
        t: (grads[k] if grads[k] is not None else np.zeros_like(t.data))
        for k, (t, inputs, vjp) in enumerate(entries)
        if vjp is None
    }


# ---------------------------------------------------------------------------
# primitives


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _record(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _record(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _record(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _record(a.data * c, (a,), lambda g: (g * c,))


def square(a) -> Tensor:
    a = as_tensor(a)
    return _record(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,))


def affine(W, x, b=None) -> Tensor:
    """``x @ W.T + b`` for a vector ``x`` or a batch of row vectors."""
    W, x = as_tensor(W), as_tensor(x)
    if W.ndim != 2 or x.shape[-1] != W.shape[1]:
        raise ValueError(f"affine shape mismatch: W{W.shape} x{x.shape}")
    out = x.data @ W.data.T
    if b is None:
        inputs = (W, x)
    else:
        b = as_tensor(b)
        if b.shape != (W.shape[0],):
            raise ValueError(f"bias shape {b.shape} does not match W{W.shape}")
        out = out + b.data
        inputs = (W, x, b)

    def vjp(g):
        if x.ndim == 1:
            gW = np.outer(g, x.data)
            gb = g
        else:
            gW = g.T @ x.data
            gb = g.sum(axis=0)
        gx = g @ W.data
        return (gW, gx, gb) if b is not None else (gW, gx)

    return _record(out, inputs, vjp)


def mix(S, h) -> Tensor:
    """Fixed linear combination of rows: ``S @ h`` with constant (possibly sparse) ``S``."""
    h = as_tensor(h)
    if S.shape[1] != h.shape[0]:
        raise ValueError(f"mix shape mismatch: S{S.shape} h{h.shape}")
    out = S @ h.data
    if sp.issparse(out):
        out = out.toarray()
    return _record(np.asarray(out), (h,), lambda g: (np.asarray(S.T @ g),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)
    return _record(y, (a,), lambda g: (g * (1.0 - y * y),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _record(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    y = np.exp(a.data)
    return _record(y, (a,), lambda g: (g * y,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _record(np.log(a.data), (a,), lambda g: (g / a.data,))


def clamp(a, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _record(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


def _softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_logits(a) -> Tensor:
    """Softmax over the last axis."""
    a = as_tensor(a)
    y = _softmax(a.data)
    return _record(y, (a,), lambda g: (y * (g - (g * y).sum(axis=-1, keepdims=True)),))


def logsumexp(a) -> Tensor:
    """Log-sum-exp over the last axis."""
    a = as_tensor(a)
    m = a.data.max(axis=-1, keepdims=True)
    out = np.log(np.exp(a.data - m).sum(axis=-1, keepdims=True)) + m
    p = np.exp(a.data - out)
    return _record(out[..., 0], (a,), lambda g: (g[..., None] * p,))


def log_softmax(a) -> Tensor:
    a = as_tensor(a)
    m = a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(a.data - m).sum(axis=-1, keepdims=True)) + m
    out = a.data - lse
    p = np.exp(out)
    return _record(out, (a,), lambda g: (g - p * g.sum(axis=-1, keepdims=True),))


def sum(a) -> Tensor:  # noqa: A001 - mirrors numpy naming
    a = as_tensor(a)
    return _record(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def concat(xs, axis: int = -1) -> Tensor:
    xs = tuple(as_tensor(x) for x in xs)
    out = np.concatenate([x.data for x in xs], axis=axis)
    ax = axis % out.ndim
    bounds = np.cumsum([0] + [x.shape[ax] for x in xs])

    def vjp(g):
        return tuple(np.take(g, np.arange(lo, hi), axis=ax) for lo, hi in zip(bounds[:-1], bounds[1:]))

    return _record(out, xs, vjp)


def columns(a, start: int, stop: int) -> Tensor:
    """Slice ``a[..., start:stop]``."""
    a = as_tensor(a)

    def vjp(g):
        full = np.zeros_like(a.data)
        full[..., start:stop] = g
        return (full,)

    return _record(a.data[..., start:stop].copy(), (a,), vjp)


def pick(a, idx) -> Tensor:
    """``a[i, idx[i]]`` for each row ``i`` of a 2-D tensor."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    rows = np.arange(a.shape[0])

    def vjp(g):
        full = np.zeros_like(a.data)
        full[rows, idx] = g
        return (full,)

    return _record(a.data[rows, idx], (a,), vjp)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float = 1e-3,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update; returns ``(new_params, new_state)``."""
    t = state.step + 1
    new_params, m_new, v_new = {}, {}, {}
    for k, p in params.items():
        g = np.asarray(grads[k], dtype=np.float64)
        if g.shape != np.shape(p):
            raise ValueError(f"gradient shape {g.shape} does not match parameter {k} {np.shape(p)}")
        m = beta1 * state.m.get(k, 0.0) + (1.0 - beta1) * g
        v = beta2 * state.v.get(k, 0.0) + (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        new_params[k] = p - lr * m_hat / (np.sqrt(v_hat) + eps)
        m_new[k], v_new[k] = m, v
    return new_params, AdamState(t, m_new, v_new)
