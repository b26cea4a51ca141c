"""Tape-based reverse-mode automatic differentiation over float64 numpy arrays.

Operations executed while a :class:`Tape` is active (``with Tape() as tape:``)
and touching at least one tensor with ``requires_grad`` are recorded in
execution order. ``tape.backward(loss)`` walks that record once, in reverse.
Outside any tape the same operations run as plain numpy and record nothing,
which is how evaluation passes are executed.
"""

import math

import numpy as np
from scipy import special

from .errors import ContractError, DimensionError, NumericError

_TAPES = []

_SQRT2 = math.sqrt(2.0)
_TWO_OVER_SQRT_PI = 2.0 / math.sqrt(math.pi)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class Tape:
    """Ordered record of primitive operations for one forward pass."""

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        top = _TAPES.pop()
        assert top is self, "tapes must be exited in LIFO order"
        return False

    def __len__(self):
        return len(self.nodes)

    def record(self, out, parents, backward):
        out.node_id = len(self.nodes)
        out.tape = self
        self.nodes.append((out, parents, backward))

    def backward(self, loss):
        if not isinstance(loss, Tensor) or loss.data.size != 1:
            shape = getattr(loss, "shape", None)
            raise ContractError(f"backward needs a scalar loss, got shape {shape}")
        if loss.tape is not self:
            raise ContractError("loss was not produced on this tape")

        pending = {loss.node_id: np.ones_like(loss.data)}
        for out, parents, fn in reversed(self.nodes[: loss.node_id + 1]):
            g = pending.pop(out.node_id, None)
            if g is None:
                continue
            out.grad = g
            for parent, pg in zip(parents, fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent.tape is self and parent.node_id is not None:
                    prev = pending.get(parent.node_id)
                    pending[parent.node_id] = pg if prev is None else prev + pg
                else:
                    if parent.grad is None:
                        parent.grad = np.zeros_like(parent.data)
                    parent.grad += pg


class _NoGrad:
    def __enter__(self):
        _TAPES.append(None)

    def __exit__(self, *exc):
        _TAPES.pop()
        return False


def no_grad():
    """Context in which nothing is recorded, even if an outer tape is active."""
    return _NoGrad()


def active_tape():
    return _TAPES[-1] if _TAPES else None


class Tensor:
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        # Leaves get their accumulator up front; recorded intermediates get it in backward.
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self.node_id = None
        self.tape = None
        self.name = name

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return float(self.data.reshape(-1)[0])

    def numpy(self):
        return self.data

    def zero_grad(self):
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, backward):
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        tape.record(out, parents, backward)
    return out


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------- elementwise


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), backward)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), backward)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), backward)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        )

    return _result(a.data / b.data, (a, b), backward)


def neg(a):
    return _result(-a.data, (a,), lambda g: (-g,))


def exp(a):
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def log(a):
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,))


def tanh(a):
    out = np.tanh(a.data)
    return _result(out, (a,), lambda g: (g * (1.0 - out * out),))


def clamp01(x):
    """Clip to [0, 1]. The gradient is 1 strictly inside, 0 elsewhere (kinks included)."""
    x = as_tensor(x)
    inside = (x.data > 0.0) & (x.data < 1.0)
    return _result(np.clip(x.data, 0.0, 1.0), (x,), lambda g: (g * inside,))


def maximum(x, floor):
    """max(x, floor) for a constant floor; gradient flows where x > floor."""
    x = as_tensor(x)
    above = x.data > floor
    return _result(np.maximum(x.data, floor), (x,), lambda g: (g * above,))


def erf_op(x):
    x = as_tensor(x)

    def backward(g):
        return (g * _TWO_OVER_SQRT_PI * np.exp(-x.data * x.data),)

    return _result(special.erf(x.data), (x,), backward)


def gelu(x):
    """Exact gelu, x * Phi(x)."""
    x = as_tensor(x)
    cdf = 0.5 * (1.0 + special.erf(x.data / _SQRT2))

    def backward(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
        return (g * (cdf + x.data * pdf),)

    return _result(x.data * cdf, (x,), backward)


# ---------------------------------------------------------------- shape


def getitem(a, idx):
    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _result(a.data[idx], (a,), backward)


def reshape(a, shape):
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None):
    if axes is None:
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    inverse = tuple(np.argsort(axes))
    return _result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def take(a, idx, axis):
    """Select entries ``idx`` along ``axis`` (a copying gather)."""
    idx = np.asarray(idx, dtype=np.intp)
    axis = axis % a.ndim

    def backward(g):
        full = np.zeros_like(a.data)
        sl = (slice(None),) * axis + (idx,)
        np.add.at(full, sl, g)
        return (full,)

    return _result(np.take(a.data, idx, axis=axis), (a,), backward)


def scatter(a, idx, axis, size):
    """Place ``a`` at positions ``idx`` of a zero tensor whose ``axis`` has length ``size``."""
    idx = np.asarray(idx, dtype=np.intp)
    axis = axis % a.ndim
    shape = list(a.shape)
    shape[axis] = size
    out = np.zeros(shape)
    out[(slice(None),) * axis + (idx,)] = a.data
    return _result(out, (a,), lambda g: (np.take(g, idx, axis=axis),))


# ---------------------------------------------------------------- reductions


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    if axis is None:
        n = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[i] for i in axes]))
    return tsum(a, axis, keepdims) * (1.0 / n)


# ---------------------------------------------------------------- linear algebra


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(a.data, -1, -2) @ g if b.requires_grad else None
        return (
            None if ga is None else _unbroadcast(ga, a.shape),
            None if gb is None else _unbroadcast(gb, b.shape),
        )

    return _result(a.data @ b.data, (a, b), backward)


def scale_rows_cols(w, gr, gc):
    """diag(gr) @ w @ diag(gc) without forming the diagonals."""
    w, gr, gc = as_tensor(w), as_tensor(gr), as_tensor(gc)
    if w.ndim != 2 or gr.shape != (w.shape[0],) or gc.shape != (w.shape[1],):
        raise DimensionError(
            f"scale_rows_cols: weight {w.shape} needs row gates ({w.shape[0]},) and "
            f"column gates ({w.shape[1]},), got {gr.shape} and {gc.shape}"
        )
    r = gr.data[:, None]
    c = gc.data[None, :]

    def backward(g):
        gw = g * r * c if w.requires_grad else None
        ggr = (g * w.data * c).sum(axis=1) if gr.requires_grad else None
        ggc = (g * r * w.data).sum(axis=0) if gc.requires_grad else None
        return gw, ggr, ggc

    return _result(r * w.data * c, (w, gr, gc), backward)


# ---------------------------------------------------------------- normalisation / losses


def _check_finite(x, what):
    if x.size == 0:
        raise NumericError(f"{what}: empty input")
    if np.isnan(x).any():
        raise NumericError(f"{what}: NaN in input")


def softmax(x, axis=-1):
    x = as_tensor(x)
    _check_finite(x.data, "softmax")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (x,), backward)


def log_softmax(x, axis=-1):
    x = as_tensor(x)
    _check_finite(x.data, "log_softmax")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _result(out, (x,), backward)


def cross_entropy(logits, labels):
    """Mean negative log-likelihood of integer ``labels`` under row-wise softmax."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim == 1:
        logits = reshape(logits, (1, -1))
        labels = labels.reshape(1)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    _check_finite(logits.data, "cross_entropy")
    n = logits.shape[0]
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()

    def backward(g):
        d = np.exp(logp)
        d[rows, labels] -= 1.0
        return (d * (g / n),)

    return _result(np.asarray(loss), (logits,), backward)


def layer_norm(x, gamma, beta, eps=1e-5):
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    n = x.shape[-1]

    def backward(g):
        gx = None
        if x.requires_grad:
            gh = g * gamma.data
            gx = inv / n * (
                n * gh - gh.sum(axis=-1, keepdims=True) - xhat * (gh * xhat).sum(axis=-1, keepdims=True)
            )
        return gx, _unbroadcast(g * xhat, gamma.shape), _unbroadcast(g, beta.shape)

    return _result(xhat * gamma.data + beta.data, (x, gamma, beta), backward)


def backward(loss):
    """Backpropagate ``loss`` through the tape that produced it."""
    if not isinstance(loss, Tensor) or loss.tape is None:
        raise ContractError("loss is not attached to any tape")
    loss.tape.backward(loss)
