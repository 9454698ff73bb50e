"""Dense float tensors with reverse-mode automatic differentiation.

Define-by-run: each operation stores a backward closure on its output and
``Tensor.backward()`` replays the closures in reverse topological order.
Data lives in numpy arrays, float32 by default; wrap code in
``precision(np.float64)`` for the 64-bit verification mode used by the
gradient-check suite.
"""

from __future__ import annotations

import contextlib
import math

import numpy as np
from scipy.special import erf as _erf

__all__ = [
    "Tensor",
    "ShapeError",
    "GraphError",
    "DegenerateStatisticsError",
    "BatchNormState",
    "precision",
    "no_grad",
    "finite_checks",
    "default_dtype",
    "matmul",
    "softmax",
    "log_softmax",
    "relu",
    "gelu",
    "sigmoid",
    "exp",
    "log",
    "absolute",
    "clip",
    "concat",
    "narrow",
    "stack",
    "expand0",
    "layer_norm",
    "batch_norm",
    "conv2d",
    "bilinear_upsample",
]

_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True
_CHECK_FINITE = False

_SQRT1_2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


class ShapeError(ValueError):
    """Operand shapes do not satisfy an operation's contract."""


class GraphError(RuntimeError):
    """Misuse of the compute graph (e.g. backward from a non-scalar)."""


class DegenerateStatisticsError(ValueError):
    """Batch statistics requested over fewer than two elements."""


def default_dtype():
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the dtype used for newly created tensors."""
    global _DEFAULT_DTYPE
    prev = _DEFAULT_DTYPE
    _DEFAULT_DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        _DEFAULT_DTYPE = prev


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (inference mode)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextlib.contextmanager
def finite_checks(enabled=True):
    """Raise FloatingPointError whenever an op produces NaN/Inf."""
    global _CHECK_FINITE
    prev = _CHECK_FINITE
    _CHECK_FINITE = enabled
    try:
        yield
    finally:
        _CHECK_FINITE = prev


class Tensor:
    """A dense float array plus an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_grad_fn")

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = np.asarray(data, dtype=dtype or _DEFAULT_DTYPE)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._grad_fn = None

    # -- construction helpers ------------------------------------------------

    @staticmethod
    def zeros(shape, requires_grad=False):
        return Tensor(np.zeros(shape, dtype=_DEFAULT_DTYPE), requires_grad)

    @staticmethod
    def ones(shape, requires_grad=False):
        return Tensor(np.ones(shape, dtype=_DEFAULT_DTYPE), requires_grad)

    @staticmethod
    def full(shape, value, requires_grad=False):
        return Tensor(np.full(shape, value, dtype=_DEFAULT_DTYPE), requires_grad)

    # -- basic protocol ------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data.reshape(()))

    def detach(self):
        return _leaf(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- autodiff ------------------------------------------------------------

    def backward(self):
        """Populate .grad on every reachable tensor with requires_grad.

        The loss must be a scalar; the seed gradient d(loss)/d(loss) is 1.
        """
        if self.data.size != 1:
            raise GraphError(f"backward requires a scalar loss, got shape {self.shape}")
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._grad_fn is not None and node.grad is not None:
                node._grad_fn(node.grad)

    # -- operators -------------------------------------------------------

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
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    # -- method sugar ------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


# -- internals ---------------------------------------------------------------


def _leaf(data):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = False
    out._parents = ()
    out._grad_fn = None
    return out


def _result(data, parents, grad_fn):
    if _CHECK_FINITE and not np.all(np.isfinite(data)):
        raise FloatingPointError("non-finite values produced by a tensor op")
    if not _GRAD_ENABLED or not any(p.requires_grad for p in parents):
        return _leaf(data)
    out = _leaf(data)
    out.requires_grad = True
    out._parents = parents
    out._grad_fn = grad_fn
    return out


def _wrap(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype.type if like is not None else _DEFAULT_DTYPE
    return _leaf(np.asarray(x, dtype=dtype))


def _accum(t, g):
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


def _unbroadcast(g, shape):
    """Sum gradient over axes that were broadcast in the forward pass."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise arithmetic ----------------------------------------------------


def add(a, b):
    a = _wrap(a, b if isinstance(b, Tensor) else None)
    b = _wrap(b, a)
    data = a.data + b.data

    def grad_fn(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g, b.data.shape))

    return _result(data, (a, b), grad_fn)


def sub(a, b):
    a = _wrap(a, b if isinstance(b, Tensor) else None)
    b = _wrap(b, a)
    data = a.data - b.data

    def grad_fn(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-g, b.data.shape))

    return _result(data, (a, b), grad_fn)


def mul(a, b):
    a = _wrap(a, b if isinstance(b, Tensor) else None)
    b = _wrap(b, a)
    data = a.data * b.data

    def grad_fn(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _result(data, (a, b), grad_fn)


def div(a, b):
    a = _wrap(a, b if isinstance(b, Tensor) else None)
    b = _wrap(b, a)
    data = a.data / b.data

    def grad_fn(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _result(data, (a, b), grad_fn)


def neg(a):
    a = _wrap(a)
    data = -a.data

    def grad_fn(g):
        if a.requires_grad:
            _accum(a, -g)

    return _result(data, (a,), grad_fn)


def power(a, p):
    """Elementwise a**p for a constant scalar exponent."""
    if isinstance(p, Tensor):
        raise TypeError("power expects a constant exponent")
    a = _wrap(a)
    p = float(p)
    data = a.data**p

    def grad_fn(g):
        if a.requires_grad:
            _accum(a, g * (p * a.data ** (p - 1.0)))

    return _result(data, (a,), grad_fn)


def exp(a):
    a = _wrap(a)
    data = np.exp(a.data)

    def grad_fn(g):
        if a.requires_grad:
            _accum(a, g * data)

    return _result(data, (a,), grad_fn)


def log(a):
    a = _wrap(a)
    data = np.log(a.data)

    def grad_fn(g):
        if a.requires_grad:
            _accum(a, g / a.data)

    return _result(data, (a,), grad_fn)


def absolute(a):
    a = _wrap(a)
    data = np.abs(a.data)

    def grad_fn(g):
        if a.requires_grad:
            _accum(a, g * np.sign(a.data))

    return _result(data, (a,), grad_fn)


def clip(a, lo, hi):
    """Clamp values to [lo, hi]; gradient is zero outside the interval."""
    a = _wrap(a)
    data = np.clip(a.data, lo, hi)

    def grad_fn(g):
        if a.requires_grad:
            inside = (a.data > lo) & (a.data < hi)
            _accum(a, g * inside.astype(a.data.dtype))

    return _result(data, (a,), grad_fn)


def relu(a):
    a = _wrap(a)
    data = np.maximum(a.data, 0)

    def grad_fn(g):
        if a.requires_grad:
            _accum(a, g * (a.data > 0).astype(a.data.dtype))

    return _result(data, (a,), grad_fn)


def gelu(a):
    """Exact (erf-based) GELU."""
    a = _wrap(a)
    x = a.data
    cdf = 0.5 * (1.0 + _erf(x * _SQRT1_2))
    data = (x * cdf).astype(x.dtype)

    def grad_fn(g):
        if a.requires_grad:
            pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
            _accum(a, g * (cdf + x * pdf).astype(x.dtype))

    return _result(data, (a,), grad_fn)


def sigmoid(a):
    a = _wrap(a)
    x = a.data
    data = np.empty_like(x)
    pos = x >= 0
    data[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    data[~pos] = ex / (1.0 + ex)

    def grad_fn(g):
        if a.requires_grad:
            _accum(a, g * data * (1.0 - data))

    return _result(data, (a,), grad_fn)


# -- linear algebra and layout -------------------------------------------------


def _swap_last(x):
    return np.swapaxes(x, -1, -2)


def matmul(a, b):
    """Matrix product with numpy-style broadcasting over leading axes."""
    a = _wrap(a, b if isinstance(b, Tensor) else None)
    b = _wrap(b, a)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul requires rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    data = a.data @ b.data

    def grad_fn(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g @ _swap_last(b.data), a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(_swap_last(a.data) @ g, b.data.shape))

    return _result(data, (a, b), grad_fn)


def reshape(a, shape):
    a = _wrap(a)
    old_shape = a.data.shape
    data = a.data.reshape(shape)

    def grad_fn(g):
        if a.requires_grad:
            _accum(a, g.reshape(old_shape))

    return _result(data, (a,), grad_fn)


def transpose(a, axes=None):
    a = _wrap(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    data = a.data.transpose(axes)
    inverse = tuple(np.argsort(axes))

    def grad_fn(g):
        if a.requires_grad:
            _accum(a, g.transpose(inverse))

    return _result(data, (a,), grad_fn)


def concat(tensors, axis=0):
    tensors = [_wrap(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def grad_fn(g):
        for t, start, stop in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(start, stop)
                _accum(t, g[tuple(idx)])

    return _result(data, tuple(tensors), grad_fn)


def narrow(a, axis, start, length):
    """Slice `length` entries starting at `start` along `axis`."""
    a = _wrap(a)
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    data = a.data[idx]

    def grad_fn(g):
        if a.requires_grad:
            buf = np.zeros_like(a.data)
            buf[idx] = g
            _accum(a, buf)

    return _result(data, (a,), grad_fn)


def stack(tensors, axis=0):
    return concat([reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors], axis)


def expand0(a, n):
    """Broadcast a copy of `a` along a new leading axis of size n.

    The backward rule sums the copies' gradients into the source.
    """
    a = _wrap(a)
    data = np.broadcast_to(a.data[None], (n,) + a.data.shape)

    def grad_fn(g):
        if a.requires_grad:
            _accum(a, g.sum(axis=0))

    return _result(data, (a,), grad_fn)


# -- reductions ----------------------------------------------------------------


def _restore_axes(g, axis, keepdims, shape):
    if keepdims or axis is None:
        if axis is None and not keepdims:
            return g.reshape((1,) * len(shape))
        return g
    return np.expand_dims(g, axis)


def reduce_sum(a, axis=None, keepdims=False):
    a = _wrap(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def grad_fn(g):
        if a.requires_grad:
            gg = _restore_axes(g, axis, keepdims, a.data.shape)
            _accum(a, np.broadcast_to(gg, a.data.shape))

    return _result(data, (a,), grad_fn)


def reduce_mean(a, axis=None, keepdims=False):
    a = _wrap(a)
    data = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size / max(data.size, 1)

    def grad_fn(g):
        if a.requires_grad:
            gg = _restore_axes(g, axis, keepdims, a.data.shape)
            _accum(a, np.broadcast_to(gg, a.data.shape) / count)

    return _result(data, (a,), grad_fn)


# -- normalizations --------------------------------------------------------------


def softmax(a, axis=-1):
    """Max-shifted softmax; each slice along `axis` sums to 1."""
    a = _wrap(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        if a.requires_grad:
            dot = (g * data).sum(axis=axis, keepdims=True)
            _accum(a, data * (g - dot))

    return _result(data, (a,), grad_fn)


def log_softmax(a, axis=-1):
    a = _wrap(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    data = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def grad_fn(g):
        if a.requires_grad:
            _accum(a, g - np.exp(data) * g.sum(axis=axis, keepdims=True))

    return _result(data, (a,), grad_fn)


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize over the last axis, then scale and shift."""
    mu = reduce_mean(x, axis=-1, keepdims=True)
    xc = sub(x, mu)
    var = reduce_mean(mul(xc, xc), axis=-1, keepdims=True)
    inv = power(add(var, eps), -0.5)
    return add(mul(mul(xc, inv), gamma), beta)


class BatchNormState:
    """Running statistics for one batch-norm layer."""

    __slots__ = ("running_mean", "running_var")

    def __init__(self, num_channels, dtype=None):
        dtype = dtype or _DEFAULT_DTYPE
        self.running_mean = np.zeros(num_channels, dtype=dtype)
        self.running_var = np.ones(num_channels, dtype=dtype)


def batch_norm(x, gamma, beta, state, training, momentum=0.1, eps=1e-5):
    """Batch normalization over (B, C, H, W) with per-channel affine.

    Train mode normalizes with batch statistics and updates `state`
    (running variance uses the unbiased estimate); eval mode normalizes
    with the running statistics.
    """
    if x.ndim != 4:
        raise ShapeError(f"batch_norm expects (B, C, H, W), got {x.shape}")
    c = x.shape[1]
    gamma_r = reshape(gamma, (1, c, 1, 1))
    beta_r = reshape(beta, (1, c, 1, 1))
    if training:
        n = x.shape[0] * x.shape[2] * x.shape[3]
        if n < 2:
            raise DegenerateStatisticsError(
                "batch_norm train mode needs at least 2 elements per channel"
            )
        mu = reduce_mean(x, axis=(0, 2, 3), keepdims=True)
        xc = sub(x, mu)
        var = reduce_mean(mul(xc, xc), axis=(0, 2, 3), keepdims=True)
        out = add(mul(mul(xc, power(add(var, eps), -0.5)), gamma_r), beta_r)
        m = state.running_mean
        dt = m.dtype
        state.running_mean = ((1 - momentum) * m + momentum * mu.data.reshape(c)).astype(dt)
        unbiased = var.data.reshape(c) * (n / (n - 1))
        state.running_var = ((1 - momentum) * state.running_var + momentum * unbiased).astype(dt)
        return out
    rm = _leaf(state.running_mean.reshape(1, c, 1, 1))
    inv = _leaf((state.running_var.reshape(1, c, 1, 1) + eps) ** -0.5)
    return add(mul(mul(sub(x, rm), inv), gamma_r), beta_r)


# -- structured ops ---------------------------------------------------------------


def conv2d(x, w, bias=None, stride=1, padding=0):
    """2D cross-correlation: x (B,C,H,W) with kernel w (O,C,k,k).

    Output spatial size (H + 2*padding - k) / stride + 1 must be integral.
    """
    x = _wrap(x)
    w = _wrap(w, x)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4D operands, got {x.shape} and {w.shape}")
    batch, cin, h, wd = x.shape
    cout, cin_w, kh, kw = w.shape
    if cin != cin_w or kh != kw:
        raise ShapeError(f"conv2d kernel {w.shape} incompatible with input {x.shape}")
    k, s, p = kh, int(stride), int(padding)
    if k % 2 == 0:
        raise ShapeError(f"conv2d requires an odd kernel size, got {k}")
    if (h + 2 * p - k) % s or (wd + 2 * p - k) % s:
        raise ShapeError(
            f"conv2d output size is not integral for input {h}x{wd}, "
            f"kernel {k}, stride {s}, padding {p}"
        )
    ho = (h + 2 * p - k) // s + 1
    wo = (wd + 2 * p - k) // s + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    wins = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    wins = wins[:, :, ::s, ::s]  # (B, C, ho, wo, k, k)
    cols = np.ascontiguousarray(wins.transpose(0, 2, 3, 1, 4, 5)).reshape(batch, ho * wo, cin * k * k)
    wmat = w.data.reshape(cout, cin * k * k)
    out = cols @ wmat.T  # (B, ho*wo, O)
    data = out.transpose(0, 2, 1).reshape(batch, cout, ho, wo)
    if bias is not None:
        bias = _wrap(bias, x)
        data = data + bias.data.reshape(1, cout, 1, 1)
    parents = (x, w) if bias is None else (x, w, bias)

    def grad_fn(g):
        gmat = g.reshape(batch, cout, ho * wo).transpose(0, 2, 1)  # (B, HW, O)
        if bias is not None and bias.requires_grad:
            _accum(bias, g.sum(axis=(0, 2, 3)))
        if w.requires_grad:
            gw = gmat.reshape(-1, cout).T @ cols.reshape(-1, cin * k * k)
            _accum(w, gw.reshape(w.data.shape))
        if x.requires_grad:
            gcols = (gmat @ wmat).reshape(batch, ho, wo, cin, k, k).transpose(0, 3, 1, 2, 4, 5)
            gxp = np.zeros((batch, cin, h + 2 * p, wd + 2 * p), dtype=x.data.dtype)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i : i + s * ho : s, j : j + s * wo : s] += gcols[:, :, :, :, i, j]
            _accum(x, gxp[:, :, p : p + h, p : p + wd] if p else gxp)

    return _result(data, parents, grad_fn)


def _interp_matrix(dst, src, dtype):
    """Row-stochastic 1D bilinear interpolation matrix (align_corners=False)."""
    m = np.zeros((dst, src), dtype=dtype)
    if dst == src:
        np.fill_diagonal(m, 1.0)
        return m
    coords = (np.arange(dst, dtype=np.float64) + 0.5) * (src / dst) - 0.5
    lo = np.floor(coords)
    frac = coords - lo
    i0 = np.clip(lo, 0, src - 1).astype(int)
    i1 = np.clip(lo + 1, 0, src - 1).astype(int)
    rows = np.arange(dst)
    np.add.at(m, (rows, i0), (1.0 - frac).astype(dtype))
    np.add.at(m, (rows, i1), frac.astype(dtype))
    return m


def bilinear_upsample(x, out_hw):
    """Bilinear resize of (..., H, W) to (..., out_h, out_w), align_corners=False."""
    x = _wrap(x)
    if x.ndim < 2:
        raise ShapeError(f"bilinear_upsample expects at least 2 dims, got {x.shape}")
    out_h, out_w = out_hw
    h, w = x.shape[-2], x.shape[-1]
    lead = x.shape[:-2]
    dt = x.data.dtype
    ry = _leaf(_interp_matrix(out_h, h, dt))
    rx_t = _leaf(_interp_matrix(out_w, w, dt).T)
    flat = reshape(x, (-1, h, w)) if lead else reshape(x, (1, h, w))
    res = matmul(matmul(ry, flat), rx_t)
    return reshape(res, lead + (out_h, out_w))
