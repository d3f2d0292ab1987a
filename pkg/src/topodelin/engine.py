"""Dense-tensor arithmetic with reverse-mode automatic differentiation.

Tensors wrap numpy arrays (float64 by default, float32 selectable) and are
immutable once created.  Every operation records its inputs and a backward
closure on the output tensor; ``backward(root)`` walks the recorded graph in
reverse creation order and returns a gradient map for the non-frozen leaf
parameters.  Any op producing NaN/Inf raises immediately.
"""

from __future__ import annotations

import itertools
import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DEFAULT_DTYPE = np.float64


class EngineError(Exception):
    """Base class for tensor-engine failures."""


class ShapeError(EngineError):
    """Operand shapes incompatible with the requested operation."""


class NonFiniteError(EngineError):
    """An operation produced NaN or Inf."""


_creation_counter = itertools.count()


def _check_finite(arr, op):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{op} produced non-finite values")


class Tensor:
    """Immutable dense array plus its position in the computation record.

    ``requires_grad=True`` marks a trainable leaf; ``frozen=True`` marks a
    parameter that participates in the forward pass and passes gradients
    through, but never accumulates its own entry in the gradient map.
    """

    __slots__ = ("data", "requires_grad", "frozen", "name", "_order",
                 "_parents", "_backward")

    def __init__(self, data, requires_grad=False, frozen=False, name=None,
                 dtype=None, _parents=(), _backward=None, _check=True):
        if isinstance(data, Tensor):
            raise EngineError("Tensor(data) expects raw values, not a Tensor")
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        if _check:
            _check_finite(arr, "Tensor()")
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad) and not frozen
        self.frozen = bool(frozen)
        self.name = name
        self._order = next(_creation_counter)
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self):
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{tag})"

    # arithmetic sugar; the real work lives in the module-level ops
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise EngineError("tensor/tensor division not supported")
        return mul(self, 1.0 / float(other))


def _wrap(value, like):
    """Coerce python scalars to constant tensors of a matching dtype."""
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.dtype), _check=False)


def _needs_record(*parents):
    return any(p.requires_grad or p._backward is not None for p in parents)


def _result(data, op, parents, backward_fn):
    _check_finite(data, op)
    if _needs_record(*parents):
        return Tensor(data, requires_grad=False, _parents=tuple(parents),
                      _backward=backward_fn, _check=False)
    return Tensor(data, _check=False)


def _same_dtype(op, *tensors):
    dt = tensors[0].dtype
    for t in tensors[1:]:
        if t.dtype != dt:
            raise ShapeError(f"{op}: mixed dtypes {dt} and {t.dtype}")
    return dt


def _needs(t):
    return t.requires_grad or t._backward is not None


# ---------------------------------------------------------------------------
# elementwise ops

def add(a, b):
    a = a if isinstance(a, Tensor) else _wrap(a, b)
    b = _wrap(b, a)
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    _same_dtype("add", a, b)
    out = a.data + b.data

    def bwd(g):
        ga = g if a.shape == out.shape else np.sum(g, dtype=g.dtype).reshape(a.shape)
        gb = g if b.shape == out.shape else np.sum(g, dtype=g.dtype).reshape(b.shape)
        return (ga if _needs(a) else None, gb if _needs(b) else None)

    return _result(out, "add", (a, b), bwd)


def sub(a, b):
    if not isinstance(a, Tensor):
        a = _wrap(a, b)
    return add(a, neg(_wrap(b, a)))


def neg(a):
    def bwd(g):
        return (-g,)
    return _result(-a.data, "neg", (a,), bwd)


def mul(a, b):
    a = a if isinstance(a, Tensor) else _wrap(a, b)
    b = _wrap(b, a)
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")
    _same_dtype("mul", a, b)
    out = a.data * b.data

    def bwd(g):
        ga = gb = None
        if _needs(a):
            ga = g * b.data
            if a.shape != out.shape:
                ga = np.sum(ga, dtype=g.dtype).reshape(a.shape)
        if _needs(b):
            gb = g * a.data
            if b.shape != out.shape:
                gb = np.sum(gb, dtype=g.dtype).reshape(b.shape)
        return (ga, gb)

    return _result(out, "mul", (a, b), bwd)


def relu(a):
    out = np.maximum(a.data, 0)

    def bwd(g):
        return (g * (a.data > 0),)

    return _result(out, "relu", (a,), bwd)


def sigmoid(a):
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def bwd(g):
        return (g * out * (1.0 - out),)

    return _result(out, "sigmoid", (a,), bwd)


def log(a):
    if np.any(a.data <= 0):
        raise EngineError("log: non-positive input")
    out = np.log(a.data)

    def bwd(g):
        return (g / a.data,)

    return _result(out, "log", (a,), bwd)


def clamp(a, lo, hi):
    if not lo < hi:
        raise EngineError(f"clamp: empty interval [{lo}, {hi}]")
    out = np.clip(a.data, lo, hi)
    inside = (a.data > lo) & (a.data < hi)

    def bwd(g):
        return (g * inside,)

    return _result(out, "clamp", (a,), bwd)


# ---------------------------------------------------------------------------
# reductions

def sum_all(a, exact=False):
    """Sum to a scalar.  ``exact=True`` uses compensated (order-independent)
    summation so permuted inputs give bit-identical results."""
    if exact:
        out = np.asarray(math.fsum(a.data.ravel().tolist()), dtype=a.dtype)
    else:
        out = np.asarray(np.sum(a.data), dtype=a.dtype)

    def bwd(g):
        return (np.broadcast_to(g, a.shape).astype(a.dtype, copy=False),)

    return _result(out, "sum", (a,), bwd)


def mean_all(a, exact=False):
    n = a.data.size
    return mul(sum_all(a, exact=exact), 1.0 / n)


def squared_l2(a):
    """Sum of squared entries, as a scalar tensor."""
    out = np.asarray(np.sum(a.data * a.data), dtype=a.dtype)

    def bwd(g):
        return (2.0 * g * a.data,)

    return _result(out, "squared_l2", (a,), bwd)


# ---------------------------------------------------------------------------
# structured / spatial ops (NCHW layout)

def _require_4d(op, *tensors):
    for t in tensors:
        if t.data.ndim != 4:
            raise ShapeError(f"{op}: expected NCHW tensor, got shape {t.shape}")


def conv2d(x, kernel, stride=1, padding=0):
    """Cross-correlation of NCHW input with (Cout, Cin, kh, kw) kernel."""
    _require_4d("conv2d", x)
    if kernel.data.ndim != 4:
        raise ShapeError(f"conv2d: kernel must be 4-d, got shape {kernel.shape}")
    if stride < 1 or padding < 0:
        raise EngineError(f"conv2d: bad stride/padding ({stride}, {padding})")
    n, ci, h, w = x.shape
    co, ck, kh, kw = kernel.shape
    if ck != ci:
        raise ShapeError(
            f"conv2d: input shape {x.shape} has {ci} channels but kernel "
            f"shape {kernel.shape} expects {ck}")
    _same_dtype("conv2d", x, kernel)
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho <= 0 or wo <= 0 or h + 2 * padding < kh or w + 2 * padding < kw:
        raise ShapeError(
            f"conv2d: kernel {kernel.shape} too large for input {x.shape} "
            f"with padding {padding}")

    if kh == kw == 1 and stride == 1 and padding == 0:
        return _conv1x1(x, kernel)

    # columns in (n, ci*kh*kw, ho*wo) layout: the one gather here lets the
    # forward and both backward products run as batched GEMMs with no
    # further transposition
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)) \
             .reshape(n, ci * kh * kw, ho * wo)
    wmat = kernel.data.reshape(co, ci * kh * kw)
    out = np.matmul(wmat, cols).reshape(n, co, ho, wo)

    def bwd(g):
        g3 = g.reshape(n, co, ho * wo)
        gx = gk = None
        if _needs(kernel):
            gk = np.matmul(g3, cols.transpose(0, 2, 1)).sum(axis=0) \
                   .reshape(kernel.shape)
        if _needs(x):
            dcols = np.matmul(wmat.T, g3).reshape(n, ci, kh, kw, ho, wo)
            hp, wp = h + 2 * padding, w + 2 * padding
            gxp = np.zeros((n, ci, hp, wp), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * ho:stride,
                        j:j + stride * wo:stride] += dcols[:, :, i, j]
            gx = gxp[:, :, padding:padding + h, padding:padding + w]
        return (gx, gk)

    return _result(out, "conv2d", (x, kernel), bwd)


def _conv1x1(x, kernel):
    n, ci, h, w = x.shape
    co = kernel.shape[0]
    wmat = kernel.data.reshape(co, ci)
    out = np.matmul(wmat, x.data.reshape(n, ci, h * w)).reshape(n, co, h, w)

    def bwd(g):
        gm = g.reshape(n, co, h * w)
        gx = gk = None
        if _needs(kernel):
            gk = np.tensordot(gm, x.data.reshape(n, ci, h * w),
                              axes=([0, 2], [0, 2])).reshape(kernel.shape)
        if _needs(x):
            gx = np.matmul(wmat.T, gm).reshape(n, ci, h, w)
        return (gx, gk)

    return _result(out, "conv2d", (x, kernel), bwd)


def replicate_pad(x, pad):
    """Edge-replicating spatial padding of an NCHW tensor."""
    _require_4d("replicate_pad", x)
    if pad < 0:
        raise EngineError(f"replicate_pad: negative pad {pad}")
    if pad == 0:
        return x
    n, c, h, w = x.shape
    out = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)), mode="edge")

    def bwd(g):
        g = g.copy()
        g[:, :, pad, :] += g[:, :, :pad, :].sum(axis=2)
        g[:, :, pad + h - 1, :] += g[:, :, pad + h:, :].sum(axis=2)
        core = g[:, :, pad:pad + h, :]
        core[:, :, :, pad] += core[:, :, :, :pad].sum(axis=3)
        core[:, :, :, pad + w - 1] += core[:, :, :, pad + w:].sum(axis=3)
        return (np.ascontiguousarray(core[:, :, :, pad:pad + w]),)

    return _result(out, "replicate_pad", (x,), bwd)


def transpose_conv2d(x, kernel, stride):
    """Transposed convolution (fractionally strided); kernel is
    (Cin, Cout, kh, kw), output spatial extent (in-1)*stride + k."""
    _require_4d("transpose_conv2d", x)
    if kernel.data.ndim != 4:
        raise ShapeError(f"transpose_conv2d: kernel must be 4-d, got {kernel.shape}")
    n, ci, h, w = x.shape
    ck, co, kh, kw = kernel.shape
    if ck != ci:
        raise ShapeError(
            f"transpose_conv2d: input shape {x.shape} has {ci} channels but "
            f"kernel shape {kernel.shape} expects {ck}")
    _same_dtype("transpose_conv2d", x, kernel)
    ho = (h - 1) * stride + kh
    wo = (w - 1) * stride + kw

    x3 = x.data.reshape(n, ci, h * w)
    kmat = kernel.data.reshape(ci, co * kh * kw)
    tmp = np.matmul(kmat.T, x3).reshape(n, co, kh, kw, h, w)
    out = np.zeros((n, co, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * h:stride, j:j + stride * w:stride] += tmp[:, :, i, j]

    def bwd(g):
        win = sliding_window_view(g, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
        gwin = np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)) \
                 .reshape(n, co * kh * kw, h * w)
        gx = gk = None
        if _needs(x):
            gx = np.matmul(kmat, gwin).reshape(n, ci, h, w)
        if _needs(kernel):
            gk = np.matmul(x3, gwin.transpose(0, 2, 1)).sum(axis=0) \
                   .reshape(kernel.shape)
        return (gx, gk)

    return _result(out, "transpose_conv2d", (x, kernel), bwd)


def maxpool2x2(x):
    _require_4d("maxpool2x2", x)
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2x2: odd spatial extents in {x.shape}")
    blocks = x.data.reshape(n, c, h // 2, 2, w // 2, 2) \
                   .transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = blocks.argmax(axis=-1)  # first max wins: deterministic under ties
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def bwd(g):
        gb = np.zeros_like(blocks)
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        gx = gb.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5) \
               .reshape(n, c, h, w)
        return (gx,)

    return _result(out, "maxpool2x2", (x,), bwd)


def concat_channels(a, b):
    """Channel concatenation (the refinement pipeline's stacking operator)."""
    _require_4d("concat_channels", a, b)
    na, ca, ha, wa = a.shape
    nb, cb, hb, wb = b.shape
    if (na, ha, wa) != (nb, hb, wb):
        raise ShapeError(
            f"concat_channels: batch/spatial extents differ: {a.shape} vs {b.shape}")
    _same_dtype("concat_channels", a, b)
    out = np.concatenate([a.data, b.data], axis=1)

    def bwd(g):
        return (g[:, :ca] if _needs(a) else None,
                g[:, ca:] if _needs(b) else None)

    return _result(out, "concat_channels", (a, b), bwd)


def add_bias(x, bias):
    """Add a per-channel bias vector to an NCHW tensor."""
    _require_4d("add_bias", x)
    if bias.data.ndim != 1 or bias.shape[0] != x.shape[1]:
        raise ShapeError(
            f"add_bias: bias shape {bias.shape} does not match channels of {x.shape}")
    _same_dtype("add_bias", x, bias)
    out = x.data + bias.data[None, :, None, None]

    def bwd(g):
        gb = g.sum(axis=(0, 2, 3)) if _needs(bias) else None
        return (g if _needs(x) else None, gb)

    return _result(out, "add_bias", (x, bias), bwd)


def channel_affine(x, scale, shift):
    """Per-channel y = x * scale[c] + shift[c] (the only broadcast allowed)."""
    _require_4d("channel_affine", x)
    c = x.shape[1]
    if scale.data.shape != (c,) or shift.data.shape != (c,):
        raise ShapeError(
            f"channel_affine: scale {scale.shape} / shift {shift.shape} "
            f"do not match channels of {x.shape}")
    _same_dtype("channel_affine", x, scale, shift)
    out = x.data * scale.data[None, :, None, None] + shift.data[None, :, None, None]

    def bwd(g):
        gx = g * scale.data[None, :, None, None] if _needs(x) else None
        gs = (g * x.data).sum(axis=(0, 2, 3)) if _needs(scale) else None
        gb = g.sum(axis=(0, 2, 3)) if _needs(shift) else None
        return (gx, gs, gb)

    return _result(out, "channel_affine", (x, scale, shift), bwd)


def batchnorm(x, scale, shift, eps=1e-5):
    """Normalize per channel with the statistics of the current batch (used in
    both training and inference), then apply scale/shift."""
    _require_4d("batchnorm", x)
    c = x.shape[1]
    if scale.data.shape != (c,) or shift.data.shape != (c,):
        raise ShapeError(
            f"batchnorm: scale {scale.shape} / shift {shift.shape} "
            f"do not match channels of {x.shape}")
    _same_dtype("batchnorm", x, scale, shift)
    axes = (0, 2, 3)
    m = x.data.size // c
    mu = x.data.mean(axis=axes, keepdims=True)
    var = x.data.var(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * scale.data[None, :, None, None] + shift.data[None, :, None, None]

    def bwd(g):
        gx = gs = gb = None
        if _needs(scale):
            gs = (g * xhat).sum(axis=axes)
        if _needs(shift):
            gb = g.sum(axis=axes)
        if _needs(x):
            gh = g * scale.data[None, :, None, None]
            gx = (inv / m) * (m * gh
                              - gh.sum(axis=axes, keepdims=True)
                              - xhat * (gh * xhat).sum(axis=axes, keepdims=True))
        return (gx, gs, gb)

    return _result(out, "batchnorm", (x, scale, shift), bwd)


# ---------------------------------------------------------------------------
# reverse pass

def backward(root):
    """Reverse-mode sweep from a scalar root.

    Returns the gradient map {leaf parameter tensor: ndarray}.  Frozen
    parameters pass gradients through to their inputs but get no entry.
    """
    if not isinstance(root, Tensor):
        raise EngineError("backward: root must be a Tensor")
    if root.data.shape != ():
        raise ShapeError(f"backward: root must be scalar, got shape {root.shape}")

    # collect reachable nodes; creation order is a topological order
    seen = {}
    stack = [root]
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen[id(t)] = t
        stack.extend(t._parents)
    order = sorted(seen.values(), key=lambda t: t._order, reverse=True)

    grads = {id(root): np.ones((), dtype=root.dtype)}
    result = {}
    for t in order:
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t.requires_grad:
            result[t] = g
        if t._backward is None:
            continue
        parent_grads = t._backward(g)
        for p, pg in zip(t._parents, parent_grads):
            if pg is None:
                continue
            if pg.shape != p.data.shape:
                raise EngineError(
                    f"internal: gradient shape {pg.shape} != tensor shape {p.shape}")
            acc = grads.get(id(p))
            grads[id(p)] = pg if acc is None else acc + pg
    return result
