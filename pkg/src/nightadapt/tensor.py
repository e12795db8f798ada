"""Dense tensors with reverse-mode automatic differentiation on a tape.

Training arithmetic runs in float32; verification suites build float64
tensors to get finite-difference-grade accuracy. Labels and masks ride
along as uint8 tensors that never take part in differentiation.

Differentiable ops record onto the innermost active ``Tape``. Running an
op with no active tape (or with no input requiring grad) is a plain
numpy computation with zero bookkeeping, which is how teacher inference
stays cheap.
"""
from __future__ import annotations

import threading

import numpy as np

FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))
SUPPORTED_DTYPES = FLOAT_DTYPES + (np.dtype(np.uint8),)


class Tensor:
    """A dense n-d array plus an optional gradient of the same shape."""

    __slots__ = ("data", "requires_grad", "grad", "_tape")

    def __init__(self, data, dtype=None, requires_grad=False):
        if dtype is None:
            arr = np.asarray(data)
            if arr.dtype not in SUPPORTED_DTYPES:
                arr = arr.astype(np.float32)
        else:
            arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in SUPPORTED_DTYPES:
            raise TypeError(f"unsupported dtype {arr.dtype}")
        if arr.dtype == np.uint8 and requires_grad:
            raise ValueError("uint8 tensors never carry requires_grad")
        # 0-d arrays are already contiguous; ascontiguousarray would promote them to 1-d
        self.data = arr if arr.flags.c_contiguous else np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self):
        return self.data.item()

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def accumulate_grad(self, g):
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad = self.grad + g

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    # operator sugar; scalars are allowed on either side
    def __add__(self, other):
        return add(self, _wrap(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _wrap(other, self))

    def __rsub__(self, other):
        return sub(_wrap(other, self), self)

    def __mul__(self, other):
        return mul(self, _wrap(other, self))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, _wrap(other, self))

    def __neg__(self):
        return neg(self)


def _wrap(x, like):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


# ---------------------------------------------------------------------------
# tape


class _Node:
    __slots__ = ("inputs", "out", "bwd")

    def __init__(self, inputs, out, bwd):
        self.inputs = inputs
        self.out = out
        self.bwd = bwd


_LOCAL = threading.local()


def _tape_stack():
    if not hasattr(_LOCAL, "stack"):
        _LOCAL.stack = []
    return _LOCAL.stack


def active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of differentiable ops, walked in reverse by backward.

    Ops append at execution time, so the record is topologically ordered
    by construction. A tape may be consumed by backward exactly once;
    reset() clears it for reuse.
    """

    def __init__(self):
        self.nodes = []
        self.consumed = False

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _tape_stack().pop()
        assert popped is self
        return False

    def reset(self):
        self.nodes = []
        self.consumed = False

    def backward(self, loss):
        if loss.data.ndim != 0:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not self.nodes:
            raise RuntimeError("backward on an empty tape")
        if self.consumed:
            raise RuntimeError("tape already consumed by backward; call reset() first")
        self.consumed = True
        loss.grad = np.ones((), dtype=loss.data.dtype)
        for node in reversed(self.nodes):
            g = node.out.grad
            if g is None:
                continue
            grads = node.bwd(g)
            for inp, gi in zip(node.inputs, grads):
                if gi is not None and inp.requires_grad:
                    inp.accumulate_grad(gi)


def backward(loss):
    """Backpropagate from a scalar loss through the tape that recorded it."""
    if loss._tape is None:
        raise RuntimeError("loss was not recorded on any tape")
    loss._tape.backward(loss)


def _record(out, inputs, bwd):
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._tape = tape
        tape.nodes.append(_Node(tuple(inputs), out, bwd))
    return out


# ---------------------------------------------------------------------------
# elementwise ops


def _check_binary(a, b, op):
    if a.dtype != b.dtype:
        raise TypeError(f"{op}: dtype mismatch {a.dtype} vs {b.dtype}")
    if a.shape == b.shape or a.ndim == 0 or b.ndim == 0:
        return
    raise ValueError(f"{op}: shapes {a.shape} and {b.shape} are not equal or scalar")


def _unbroadcast(g, shape):
    # only scalar-vs-tensor broadcasting is supported
    if g.shape == shape:
        return g
    return np.asarray(g.sum()) if shape == () else g


def add(a, b):
    _check_binary(a, b, "add")
    out = Tensor(a.data + b.data)

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record(out, (a, b), bwd)


def sub(a, b):
    _check_binary(a, b, "sub")
    out = Tensor(a.data - b.data)

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record(out, (a, b), bwd)


def mul(a, b):
    _check_binary(a, b, "mul")
    out = Tensor(a.data * b.data)

    def bwd(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record(out, (a, b), bwd)


def div(a, b):
    _check_binary(a, b, "div")
    if b.dtype == np.float64 and np.any(b.data == 0.0):
        raise ZeroDivisionError("div: zero denominator in float64 verification mode")
    out = Tensor(a.data / b.data)

    def bwd(g):
        ga = g / b.data
        gb = -g * a.data / (b.data * b.data)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _record(out, (a, b), bwd)


def neg(a):
    out = Tensor(-a.data)
    return _record(out, (a,), lambda g: (-g,))


def scale(a, s):
    s = float(s)
    out = Tensor(a.data * s)
    return _record(out, (a,), lambda g: (g * s,))


def relu(a):
    out = Tensor(np.maximum(a.data, 0))

    def bwd(g):
        return (g * (a.data > 0),)

    return _record(out, (a,), bwd)


def log(a):
    out = Tensor(np.log(a.data))

    def bwd(g):
        return (g / a.data,)

    return _record(out, (a,), bwd)


def exp(a):
    out = Tensor(np.exp(a.data))

    def bwd(g):
        return (g * out.data,)

    return _record(out, (a,), bwd)


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "relu": relu,
    "log": log,
    "exp": exp,
    "neg": neg,
    "scale": scale,
}

_UNARY = {"relu", "log", "exp", "neg"}


def elementwise(op, a, b=None):
    """Dispatch an elementwise op by name (scale takes a python scalar as b)."""
    if op not in _ELEMENTWISE:
        raise KeyError(f"unknown elementwise op {op!r}")
    if op in _UNARY:
        if b is not None:
            raise ValueError(f"{op} is unary")
        return _ELEMENTWISE[op](a)
    if b is None:
        raise ValueError(f"{op} needs two operands")
    return _ELEMENTWISE[op](a, b)


# ---------------------------------------------------------------------------
# reductions and shape ops


def sum(a):  # noqa: A001 - numpy-style module namespace
    out = Tensor(a.data.sum())

    def bwd(g):
        return (np.broadcast_to(g, a.shape).astype(a.dtype),)

    return _record(out, (a,), bwd)


def mean(a):
    n = a.data.size
    out = Tensor(a.data.sum() / n)

    def bwd(g):
        return ((np.broadcast_to(g, a.shape) / n).astype(a.dtype),)

    return _record(out, (a,), bwd)


def reshape(a, shape):
    out = Tensor(a.data.reshape(shape))

    def bwd(g):
        return (g.reshape(a.shape),)

    return _record(out, (a,), bwd)


def stack(tensors):
    """Stack same-shape tensors along a new leading axis."""
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise ValueError(f"stack: mismatched shapes {sorted(shapes)}")
    out = Tensor(np.stack([t.data for t in tensors]))

    def bwd(g):
        return tuple(g[i] for i in range(len(tensors)))

    return _record(out, tuple(tensors), bwd)


def detach(a):
    out = Tensor(a.data)
    out.requires_grad = False
    return out


# ---------------------------------------------------------------------------
# structured ops


def conv2d(x, w, b, stride=1):
    """3x3 convolution with zero padding 1, stride 1 or 2.

    x: [N,C,H,W], w: [K,C,3,3], b: [K] -> [N,K,H',W'] where stride 1
    preserves H,W and stride 2 takes the ceiling half.
    """
    if stride not in (1, 2):
        raise ValueError(f"conv2d: stride must be 1 or 2, got {stride}")
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError(f"conv2d: need 4-d input/kernel, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    k, c2, kh, kw = w.shape
    if (kh, kw) != (3, 3):
        raise ValueError(f"conv2d: kernel spatial size must be 3x3, got {kh}x{kw}")
    if c != c2:
        raise ValueError(f"conv2d: input channels {c} != kernel channels {c2}")
    oh = (h + 2 - 3) // stride + 1
    ow = (wd + 2 - 3) // stride + 1

    xp = np.zeros((n, c, h + 2, wd + 2), dtype=x.dtype)
    xp[:, :, 1 : h + 1, 1 : wd + 1] = x.data
    s0, s1, s2, s3 = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, c, 3, 3, oh, ow),
        strides=(s0, s1, s2, s3, s2 * stride, s3 * stride),
        writeable=False,
    )
    cols = np.ascontiguousarray(view).reshape(n, c * 9, oh * ow)
    w2d = w.data.reshape(k, c * 9)
    out_data = np.matmul(w2d, cols).reshape(n, k, oh, ow) + b.data.reshape(1, k, 1, 1)
    out = Tensor(out_data)

    def bwd(g):
        g2d = g.reshape(n, k, oh * ow)
        gb = g.sum(axis=(0, 2, 3))
        gw = np.matmul(g2d, cols.transpose(0, 2, 1)).sum(axis=0).reshape(k, c, 3, 3)
        gcols = np.matmul(w2d.T, g2d).reshape(n, c, 3, 3, oh, ow)
        gxp = np.zeros_like(xp)
        for dy in range(3):
            for dx in range(3):
                gxp[:, :, dy : dy + stride * oh : stride, dx : dx + stride * ow : stride] += gcols[:, :, dy, dx]
        return gxp[:, :, 1 : h + 1, 1 : wd + 1], gw, gb

    return _record(out, (x, w, b), bwd)


def conv1x1(x, w, b):
    """Pointwise convolution: x [N,C,H,W], w [K,C], b [K] -> [N,K,H,W]."""
    n, c, h, wd = x.shape
    k, c2 = w.shape
    if c != c2:
        raise ValueError(f"conv1x1: input channels {c} != kernel channels {c2}")
    out = Tensor(np.einsum("kc,nchw->nkhw", w.data, x.data) + b.data.reshape(1, k, 1, 1))

    def bwd(g):
        gx = np.einsum("kc,nkhw->nchw", w.data, g)
        gw = np.einsum("nkhw,nchw->kc", g, x.data)
        gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    return _record(out, (x, w, b), bwd)


def upsample_nearest2x(x):
    """Replicate every pixel of [N,C,H,W] into a 2x2 block."""
    out = Tensor(x.data.repeat(2, axis=2).repeat(2, axis=3))

    def bwd(g):
        n, c, h2, w2 = g.shape
        return (g.reshape(n, c, h2 // 2, 2, w2 // 2, 2).sum(axis=(3, 5)),)

    return _record(out, (x,), bwd)


def log_softmax(x, axis=0):
    """Numerically stable log softmax along one axis."""
    if np.any(np.isnan(x.data)):
        raise ValueError("log_softmax: NaN input")
    m = x.data.max(axis=axis, keepdims=True)
    shifted = x.data - m
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = Tensor(shifted - lse)

    def bwd(g):
        return (g - np.exp(out.data) * g.sum(axis=axis, keepdims=True),)

    return _record(out, (x,), bwd)


def masked_mean(x, mask):
    """Per-channel mean of x [D,H,W] over mask==1 pixels; None if mask is empty.

    The mask is data, not a differentiable input; its values must be 0/1.
    """
    m = mask.data if isinstance(mask, Tensor) else np.asarray(mask)
    if not np.all((m == 0) | (m == 1)):
        raise ValueError("masked_mean: mask values must be 0 or 1")
    if x.ndim != 3 or m.shape != x.shape[1:]:
        raise ValueError(f"masked_mean: shapes {x.shape} and {m.shape} do not line up")
    count = float(m.sum())
    if count == 0:
        return None
    mf = m.astype(x.dtype)
    out = Tensor((x.data * mf).sum(axis=(1, 2)) / count)

    def bwd(g):
        return (g[:, None, None] * mf / count,)

    return _record(out, (x,), bwd)


def l2_normalize(x, eps=1e-8, axis=0):
    """Scale vectors along ``axis`` to unit norm; sub-eps norms map to zero."""
    nrm = np.sqrt((x.data.astype(np.float64) ** 2).sum(axis=axis, keepdims=True))
    keep = nrm > eps
    safe = np.where(keep, nrm, 1.0).astype(x.dtype)
    y = np.where(keep, x.data / safe, 0).astype(x.dtype)
    out = Tensor(y)

    def bwd(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        gx = np.where(keep, (g - y * dot) / safe, 0)
        return (gx.astype(x.dtype),)

    return _record(out, (x,), bwd)


def channel_dot(f, v):
    """Contract the channel axis: f [D,H,W] . v [D] -> [H,W]."""
    if f.ndim != 3 or v.ndim != 1 or f.shape[0] != v.shape[0]:
        raise ValueError(f"channel_dot: shapes {f.shape} and {v.shape} do not line up")
    out = Tensor(np.einsum("dhw,d->hw", f.data, v.data))

    def bwd(g):
        gf = g[None, :, :] * v.data[:, None, None]
        gv = (g[None, :, :] * f.data).sum(axis=(1, 2))
        return gf, gv

    return _record(out, (f, v), bwd)


# ---------------------------------------------------------------------------
# non-differentiable helpers


def softmax_np(logits, axis=0):
    """Plain numpy softmax over raw data, for teacher inference and tests."""
    a = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    m = a.max(axis=axis, keepdims=True)
    e = np.exp(a - m)
    return e / e.sum(axis=axis, keepdims=True)


def argmax_np(logits, axis=0):
    a = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return a.argmax(axis=axis)
