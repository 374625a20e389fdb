"""Dense float64 tensors with tape-based reverse-mode differentiation.

Covers exactly the operations the rest of the package needs: elementwise
arithmetic with numpy-style (singleton-only) broadcasting, matmul against 2D
weight matrices, a few fused neural ops (softmax, layer norm, 1x1 and
depthwise 3x3 convolutions), and index gather/scatter for the 2D scan
permutations. Every op allocates a fresh output buffer; no views escape.

Gradients: each recorded op stores a closure that maps the output gradient to
input-gradient accumulations. ``backward()`` on a scalar loss replays the
reachable ops in reverse creation order, which is a valid reverse-topological
order because inputs are always created before outputs.
"""

from __future__ import annotations

import itertools

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class NumericError(ArithmeticError):
    """A computation produced or received non-finite values."""


_op_counter = itertools.count()
_grad_enabled = True


class no_grad:
    """Context manager disabling tape recording (inference mode)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """N-d float64 array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op_id")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents: tuple = ()
        self._backward = None
        self._op_id = next(_op_counter)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._item_err()

    def _item_err(self):
        raise ShapeError(f"item() requires a single-element tensor, got shape {self.shape}")

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def backward(self):
        """Accumulate gradients of this scalar into every reachable tensor."""
        if self.data.size != 1:
            raise ShapeError(f"backward() requires a scalar loss, got shape {self.shape}")
        tape = trace_tape(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(tape.ops):
            if node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar --------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(_coerce(other), -1.0))

    def __rsub__(self, other):
        return add(_coerce(other), mul(self, -1.0))

    def __truediv__(self, other):
        return div(self, other)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class Tape:
    """Ops reachable from a loss, in recording (topological) order."""

    def __init__(self, ops):
        self.ops = ops


def trace_tape(root: Tensor) -> Tape:
    """Collect recorded ops feeding ``root``, sorted by creation order."""
    seen = {id(root)}
    stack = [root]
    ops = []
    while stack:
        node = stack.pop()
        if node._backward is not None:
            ops.append(node)
        for p in node._parents:
            if id(p) not in seen:
                seen.add(id(p))
                stack.append(p)
    ops.sort(key=lambda n: n._op_id)
    return Tape(ops)


def _coerce(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accum(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _record(out_data: np.ndarray, parents, backward) -> Tensor:
    out = Tensor(out_data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _broadcast_shape(s1, s2):
    try:
        return np.broadcast_shapes(s1, s2)
    except ValueError:
        raise ShapeError(f"cannot broadcast shapes {s1} and {s2}") from None


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum an output gradient back down to an input's (broadcast) shape."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise arithmetic ----------------------------------------------

def add(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _broadcast_shape(a.shape, b.shape)
    out_data = a.data + b.data

    def backward(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _record(out_data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _broadcast_shape(a.shape, b.shape)
    out_data = a.data * b.data

    def backward(g):
        _accum(a, _unbroadcast(g * b.data, a.shape))
        _accum(b, _unbroadcast(g * a.data, b.shape))

    return _record(out_data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _broadcast_shape(a.shape, b.shape)
    out_data = a.data / b.data

    def backward(g):
        _accum(a, _unbroadcast(g / b.data, a.shape))
        _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _record(out_data, (a, b), backward)


def power(a, p) -> Tensor:
    a = _coerce(a)
    p = float(p)
    out_data = a.data ** p

    def backward(g):
        _accum(a, g * p * a.data ** (p - 1.0))

    return _record(out_data, (a,), backward)


def exp(a) -> Tensor:
    a = _coerce(a)
    out_data = np.exp(a.data)

    def backward(g):
        _accum(a, g * out_data)

    return _record(out_data, (a,), backward)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = _coerce(a)
    out_data = _sigmoid(a.data)

    def backward(g):
        _accum(a, g * out_data * (1.0 - out_data))

    return _record(out_data, (a,), backward)


def silu(a) -> Tensor:
    """x * sigmoid(x)."""
    a = _coerce(a)
    s = _sigmoid(a.data)
    out_data = a.data * s

    def backward(g):
        _accum(a, g * s * (1.0 + a.data * (1.0 - s)))

    return _record(out_data, (a,), backward)


def softplus(a) -> Tensor:
    """log(1 + exp(x)), computed without overflow; gradient is sigmoid(x)."""
    a = _coerce(a)
    out_data = np.logaddexp(0.0, a.data)

    def backward(g):
        _accum(a, g * _sigmoid(a.data))

    return _record(out_data, (a,), backward)


# -- reductions ------------------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _coerce(a)
    axes = _norm_axes(axis, a.ndim)
    out_data = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        gg = g
        if not keepdims:
            gg = np.expand_dims(gg, axes)
        _accum(a, np.broadcast_to(gg, a.shape).copy())

    return _record(out_data, (a,), backward)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _coerce(a)
    axes = _norm_axes(axis, a.ndim)
    count = 1
    for ax in axes:
        count *= a.shape[ax]
    out_data = a.data.mean(axis=axes, keepdims=keepdims)

    def backward(g):
        gg = g
        if not keepdims:
            gg = np.expand_dims(gg, axes)
        _accum(a, np.broadcast_to(gg, a.shape) / count)

    return _record(out_data, (a,), backward)


def global_avg_pool(f) -> Tensor:
    """Per-channel spatial mean: (..., H, W, C) -> (..., 1, 1, C)."""
    f = _coerce(f)
    if f.ndim < 3:
        raise ShapeError(f"global_avg_pool expects at least (H, W, C), got {f.shape}")
    return tmean(f, axis=(-3, -2), keepdims=True)


# -- shape manipulation ----------------------------------------------------

def reshape(a, shape) -> Tensor:
    a = _coerce(a)
    out_data = a.data.reshape(shape).copy()

    def backward(g):
        _accum(a, g.reshape(a.shape))

    return _record(out_data, (a,), backward)


def transpose(a, axes) -> Tensor:
    a = _coerce(a)
    axes = tuple(axes)
    out_data = a.data.transpose(axes).copy()
    inv = tuple(np.argsort(axes))

    def backward(g):
        _accum(a, g.transpose(inv))

    return _record(out_data, (a,), backward)


def concat(tensors, axis: int) -> Tensor:
    tensors = [_coerce(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    ax = axis % out_data.ndim
    sizes = [t.shape[ax] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[ax] = slice(lo, hi)
            _accum(t, g[tuple(sl)])

    return _record(out_data, tuple(tensors), backward)


def narrow(a, axis: int, start: int, length: int) -> Tensor:
    a = _coerce(a)
    ax = axis % a.ndim
    sl = [slice(None)] * a.ndim
    sl[ax] = slice(start, start + length)
    sl = tuple(sl)
    out_data = a.data[sl].copy()

    def backward(g):
        gi = np.zeros_like(a.data)
        gi[sl] = g
        _accum(a, gi)

    return _record(out_data, (a,), backward)


def take(a, indices, axis: int) -> Tensor:
    """Gather along ``axis``; gradient scatter-adds through the same indices."""
    a = _coerce(a)
    idx = np.asarray(indices, dtype=np.int64)
    ax = axis % a.ndim
    out_data = np.take(a.data, idx, axis=ax)

    def backward(g):
        gi = np.zeros_like(a.data)
        gm = np.moveaxis(gi, ax, 0)
        np.add.at(gm, idx, np.moveaxis(g, ax, 0))
        _accum(a, gi)

    return _record(out_data, (a,), backward)


def pad_edge2d(f, pad_h: int, pad_w: int) -> Tensor:
    """Replicate-pad the bottom/right of a (..., H, W, C) map."""
    f = _coerce(f)
    if pad_h == 0 and pad_w == 0:
        return f
    pad = [(0, 0)] * (f.ndim - 3) + [(0, pad_h), (0, pad_w), (0, 0)]
    out_data = np.pad(f.data, pad, mode="edge")
    h, w = f.shape[-3], f.shape[-2]

    def backward(g):
        g = g.copy()
        if pad_h:
            g[..., h - 1, :, :] += g[..., h:, :, :].sum(axis=-3)
            g = g[..., :h, :, :]
        if pad_w:
            g[..., :, w - 1, :] += g[..., :, w:, :].sum(axis=-2)
            g = g[..., :, :w, :]
        _accum(f, g)

    return _record(out_data, (f,), backward)


# -- linear algebra ---------------------------------------------------------

def matmul(a, b) -> Tensor:
    """(..., M, K) @ (K, P). The right operand must be a 2D matrix."""
    a, b = _coerce(a), _coerce(b)
    if b.ndim != 2:
        raise ShapeError(f"matmul expects a 2D right operand, got {a.shape} @ {b.shape}")
    if a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    out_data = a.data @ b.data
    k, p = b.shape

    def backward(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.reshape(-1, k).T @ g.reshape(-1, p))

    return _record(out_data, (a, b), backward)


def softmax(a, axis: int = -1) -> Tensor:
    """Max-subtracted softmax along ``axis``."""
    a = _coerce(a)
    ax = axis % a.ndim
    shifted = a.data - a.data.max(axis=ax, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=ax, keepdims=True)

    def backward(g):
        dot = (g * out_data).sum(axis=ax, keepdims=True)
        _accum(a, (g - dot) * out_data)

    return _record(out_data, (a,), backward)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x, gamma, beta = _coerce(x), _coerce(gamma), _coerce(beta)
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"layer_norm affine shapes {gamma.shape}/{beta.shape} do not match channels {c}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out_data = gamma.data * xhat + beta.data

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        _accum(gamma, (g * xhat).sum(axis=lead))
        _accum(beta, g.sum(axis=lead))
        dxhat = g * gamma.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        _accum(x, inv * (dxhat - m1 - xhat * m2))

    return _record(out_data, (x, gamma, beta), backward)


def conv1x1(f, w, b=None) -> Tensor:
    """Per-position linear map over channels: (..., C_in) x (C_in, C_out)."""
    f, w = _coerce(f), _coerce(w)
    if f.shape[-1] != w.shape[0]:
        raise ShapeError(f"conv1x1 channels disagree: input {f.shape} vs weight {w.shape}")
    out_data = np.einsum("...c,cd->...d", f.data, w.data)
    parents = [f, w]
    if b is not None:
        b = _coerce(b)
        out_data = out_data + b.data
        parents.append(b)

    cin, cout = w.shape

    def backward(g):
        _accum(f, np.einsum("...d,cd->...c", g, w.data))
        _accum(w, f.data.reshape(-1, cin).T @ g.reshape(-1, cout))
        if b is not None:
            _accum(b, _unbroadcast(g, b.shape))

    return _record(out_data, tuple(parents), backward)


def depthwise_conv3x3(f, w, b=None) -> Tensor:
    """Per-channel 3x3 convolution with zero padding on (..., H, W, C)."""
    f, w = _coerce(f), _coerce(w)
    if w.shape != (3, 3, f.shape[-1]):
        raise ShapeError(f"depthwise_conv3x3 weight {w.shape} does not match input {f.shape}")
    h, wd = f.shape[-3], f.shape[-2]
    pad = [(0, 0)] * (f.ndim - 3) + [(1, 1), (1, 1), (0, 0)]
    fp = np.pad(f.data, pad)
    out_data = np.zeros_like(f.data)
    for u in range(3):
        for v in range(3):
            out_data += w.data[u, v] * fp[..., u:u + h, v:v + wd, :]
    parents = [f, w]
    if b is not None:
        b = _coerce(b)
        out_data = out_data + b.data
        parents.append(b)

    def backward(g):
        gpad = np.zeros_like(fp)
        dw = np.zeros_like(w.data)
        lead = tuple(range(g.ndim - 1))
        for u in range(3):
            for v in range(3):
                gpad[..., u:u + h, v:v + wd, :] += w.data[u, v] * g
                dw[u, v] = (fp[..., u:u + h, v:v + wd, :] * g).sum(axis=lead)
        _accum(f, gpad[..., 1:1 + h, 1:1 + wd, :])
        _accum(w, dw)
        if b is not None:
            _accum(b, _unbroadcast(g, b.shape))

    return _record(out_data, tuple(parents), backward)
