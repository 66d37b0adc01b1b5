"""Minimal dense tensor with reverse-mode automatic differentiation.

Covers exactly the operations the detector needs: conv2d, batch norm,
activations, max pooling, nearest upsampling, concat, softmax, elementwise
arithmetic, reductions, reshapes and integer gathers.  All math runs on
numpy arrays; execution is deterministic (fixed summation order, first-index
tie-breaks), so identical inputs give bit-identical outputs.

Gradient accumulation is additive: calling ``backward`` twice on the same
graph without resetting grads doubles every gradient.
"""

from __future__ import annotations

import struct
from contextlib import contextmanager

import numpy as np

from .errors import TensorError

__all__ = [
    "Tensor",
    "tensor",
    "no_grad",
    "grad_enabled",
    "conv2d",
    "batch_norm",
    "max_pool2d",
    "upsample_nearest2x",
    "concat",
    "softmax",
    "relu",
    "silu",
    "sigmoid",
    "exp",
    "log",
    "sqrt",
    "clip",
    "maximum",
    "minimum",
    "take",
    "save_tensor",
    "load_tensor",
]

_GRAD_STACK = [True]


def grad_enabled() -> bool:
    return _GRAD_STACK[-1]


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference / targets)."""
    _GRAD_STACK.append(False)
    try:
        yield
    finally:
        _GRAD_STACK.pop()


class Tensor:
    """Dense N-d array with an optional gradient slot.

    ``data`` is always a numpy float array (float32 or float64; the dtype of
    the inputs is preserved through every op).  ``grad``, once populated by
    ``backward``, has the same shape and dtype as ``data``.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_grad_fn")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._grad_fn = None

    # -- introspection -------------------------------------------------
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

    def item(self) -> float:
        return float(self.data.item())

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}{flag})"

    # -- autodiff ------------------------------------------------------
    def backward(self):
        """Accumulate d(self)/d(t) into ``t.grad`` for every tensor ``t``
        with ``requires_grad`` reachable from this scalar root."""
        if self.data.size != 1:
            raise TensorError(
                f"backward root must be a scalar, got shape {self.data.shape}"
            )
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited and p.requires_grad:
                    stack.append((p, False))

        # Per-pass gradient table; folded into .grad at each node so a second
        # backward call adds a fresh full contribution.
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            if node._grad_fn is None:
                continue
            parent_grads = node._grad_fn(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                if id(p) in grads:
                    grads[id(p)] = grads[id(p)] + pg
                else:
                    grads[id(p)] = pg

    # -- operator sugar ------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, -_wrap(other, self))

    def __rsub__(self, other):
        return add(_wrap(other, self), -self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_wrap(other, self), self)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, *shape)

    def transpose(self, *axes):
        return transpose(self, *axes)


def tensor(data, requires_grad=False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _wrap(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _make(data, parents, grad_fn) -> Tensor:
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._grad_fn = grad_fn
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------

def add(a: Tensor, b) -> Tensor:
    a, b = (a, _wrap(b, a)) if isinstance(a, Tensor) else (_wrap(a, b), b)
    out = a.data + b.data

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), grad_fn)


def mul(a: Tensor, b) -> Tensor:
    a, b = (a, _wrap(b, a)) if isinstance(a, Tensor) else (_wrap(a, b), b)
    out = a.data * b.data

    def grad_fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(out, (a, b), grad_fn)


def div(a: Tensor, b) -> Tensor:
    a, b = (a, _wrap(b, a)) if isinstance(a, Tensor) else (_wrap(a, b), b)
    out = a.data / b.data

    def grad_fn(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _make(out, (a, b), grad_fn)


def power(a: Tensor, p: float) -> Tensor:
    p = float(p)
    out = a.data ** p

    def grad_fn(g):
        return (g * p * a.data ** (p - 1.0),)

    return _make(out, (a,), grad_fn)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def grad_fn(g):
        return (g * out,)

    return _make(out, (a,), grad_fn)


def log(a: Tensor) -> Tensor:
    out = np.log(a.data)

    def grad_fn(g):
        return (g / a.data,)

    return _make(out, (a,), grad_fn)


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)

    def grad_fn(g):
        return (g * (0.5 / out),)

    return _make(out, (a,), grad_fn)


def clip(a: Tensor, lo: float | None, hi: float | None) -> Tensor:
    out = np.clip(a.data, lo, hi)
    mask = np.ones_like(a.data)
    if lo is not None:
        mask = mask * (a.data >= lo)
    if hi is not None:
        mask = mask * (a.data <= hi)

    def grad_fn(g):
        return (g * mask,)

    return _make(out, (a,), grad_fn)


def maximum(a: Tensor, b) -> Tensor:
    """Elementwise max; ties route the gradient to the first argument."""
    b = _wrap(b, a)
    out = np.maximum(a.data, b.data)
    take_a = a.data >= b.data

    def grad_fn(g):
        ga = _unbroadcast(g * take_a, a.shape)
        gb = _unbroadcast(g * ~take_a, b.shape)
        return ga, gb

    return _make(out, (a, b), grad_fn)


def minimum(a: Tensor, b) -> Tensor:
    b = _wrap(b, a)
    out = np.minimum(a.data, b.data)
    take_a = a.data <= b.data

    def grad_fn(g):
        ga = _unbroadcast(g * take_a, a.shape)
        gb = _unbroadcast(g * ~take_a, b.shape)
        return ga, gb

    return _make(out, (a, b), grad_fn)


# ---------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------

def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0.0)

    def grad_fn(g):
        return (g * (a.data > 0.0),)

    return _make(out, (a,), grad_fn)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # exp argument kept non-positive so large |x| cannot overflow
    z = np.exp(-np.abs(x))
    return np.where(x >= 0.0, 1.0 / (1.0 + z), z / (1.0 + z))


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)

    def grad_fn(g):
        return (g * out * (1.0 - out),)

    return _make(out, (a,), grad_fn)


def silu(a: Tensor) -> Tensor:
    sig = _sigmoid(a.data)
    out = a.data * sig

    def grad_fn(g):
        return (g * (sig + a.data * sig * (1.0 - sig)),)

    return _make(out, (a,), grad_fn)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return ((g - dot) * out,)

    return _make(out, (a,), grad_fn)


# ---------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------

def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def grad_fn(g):
        g = np.asarray(g)
        if axis is None:
            return (np.broadcast_to(g, a.shape).astype(a.dtype, copy=True),)
        axes = axis if isinstance(axis, tuple) else (axis,)
        if not keepdims:
            for ax in sorted(ax % a.ndim for ax in axes):
                g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, a.shape).astype(a.dtype, copy=True),)

    return _make(out, (a,), grad_fn)


def tmean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = 1
        for ax in axes:
            count *= a.shape[ax]
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def reshape(a: Tensor, *shape) -> Tensor:
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    out = a.data.reshape(shape)

    def grad_fn(g):
        return (g.reshape(a.shape),)

    return _make(out, (a,), grad_fn)


def transpose(a: Tensor, *axes) -> Tensor:
    if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
        axes = tuple(axes[0])
    inv = np.argsort(axes)
    out = a.data.transpose(axes)

    def grad_fn(g):
        return (g.transpose(inv),)

    return _make(out, (a,), grad_fn)


def getitem(a: Tensor, idx) -> Tensor:
    out = a.data[idx]

    def grad_fn(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _make(out, (a,), grad_fn)


def take(a: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather rows along ``axis`` by integer index; backward scatter-adds."""
    indices = np.asarray(indices, dtype=np.int64)
    out = np.take(a.data, indices, axis=axis)

    def grad_fn(g):
        full = np.zeros_like(a.data)
        sl = [slice(None)] * a.ndim
        sl[axis] = indices
        np.add.at(full, tuple(sl), g)
        return (full,)

    return _make(out, (a,), grad_fn)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise TensorError("concat needs at least one tensor")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def grad_fn(g):
        outs = []
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            outs.append(g[tuple(sl)])
        return tuple(outs)

    return _make(out, tensors, grad_fn)


# ---------------------------------------------------------------------
# spatial ops
# ---------------------------------------------------------------------

def _windows(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """View of all kh x kw windows: (N, C, Ho, Wo, kh, kw)."""
    n, c, h, w = xp.shape
    ho = (h - kh) // stride + 1
    wo = (w - kw) // stride + 1
    sn, sc, sh, sw = xp.strides
    return np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, c, ho, wo, kh, kw),
        strides=(sn, sc, sh * stride, sw * stride, sh, sw),
        writeable=False,
    )


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-d cross-correlation, NCHW layout, floor output size.

    weight is (Cout, Cin, kh, kw); bias, when given, is (Cout,).
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise TensorError(
            f"conv2d expects 4-d input and weight, got {x.shape} and {weight.shape}"
        )
    n, cin, h, w = x.shape
    cout, cin_w, kh, kw = weight.shape
    if cin != cin_w:
        raise TensorError(
            f"conv2d channel mismatch: input has {cin} channels, weight expects {cin_w}"
        )
    if bias is not None and bias.shape != (cout,):
        raise TensorError(
            f"conv2d bias shape {bias.shape} does not match out_channels {cout}"
        )
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise TensorError(
            f"conv2d output would be empty: input {h}x{w}, kernel {kh}x{kw}, "
            f"stride {stride}, padding {padding}"
        )

    if padding > 0:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    win = _windows(xp, kh, kw, stride)
    # (N, Ho, Wo, Cout) <- contract (Cin, kh, kw)
    out = np.tensordot(win, weight.data, axes=([1, 4, 5], [1, 2, 3]))
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    if bias is not None:
        out += bias.data.reshape(1, cout, 1, 1)

    def grad_fn(g):
        gw = None
        gx = None
        gb = None
        if weight.requires_grad:
            # dW[o,c,i,j] = sum_{n,y,x} g[n,o,y,x] * win[n,c,y,x,i,j]
            gw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
        if x.requires_grad:
            # (N, Ho, Wo, Cin, kh, kw)
            contrib = np.tensordot(g, weight.data, axes=([1], [0]))
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + ho * stride:stride, j:j + wo * stride:stride] += \
                        contrib[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gw) if bias is None else (gx, gw, gb)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, grad_fn)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor,
               running_mean: np.ndarray, running_var: np.ndarray,
               training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalization over an NCHW tensor.

    Training mode normalizes with batch statistics (biased variance) and
    updates the running buffers in place; eval mode uses the running buffers
    and is fully deterministic.
    """
    c = x.shape[1]
    for name, p in (("gamma", gamma), ("beta", beta)):
        if p.shape != (c,):
            raise TensorError(f"batch_norm {name} has shape {p.shape}, expected ({c},)")
    if training:
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        if eps == 0.0 and np.any(var == 0.0):
            raise TensorError("zero-variance channel with eps=0 in batch_norm")
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var
    else:
        mean = running_mean.astype(x.dtype)
        var = running_var.astype(x.dtype)
        if eps == 0.0 and np.any(var == 0.0):
            raise TensorError("zero-variance channel with eps=0 in batch_norm")

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean.reshape(1, c, 1, 1)) * inv_std.reshape(1, c, 1, 1)
    out = gamma.data.reshape(1, c, 1, 1) * xhat + beta.data.reshape(1, c, 1, 1)

    m = x.shape[0] * x.shape[2] * x.shape[3]

    def grad_fn(g):
        gg = (g * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            scale = (gamma.data * inv_std).reshape(1, c, 1, 1)
            if training:
                gm = g.mean(axis=(0, 2, 3)).reshape(1, c, 1, 1)
                gxm = (g * xhat).mean(axis=(0, 2, 3)).reshape(1, c, 1, 1)
                gx = scale * (g - gm - xhat * gxm)
            else:
                gx = scale * g
        return gx, gg, gb

    return _make(out, (x, gamma, beta), grad_fn)


def max_pool2d(x: Tensor, k: int, stride: int = 1, padding: int = 0) -> Tensor:
    """Max pooling; the subgradient routes to the first (row-major) argmax."""
    n, c, h, w = x.shape
    if padding > 0:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)),
                    constant_values=-np.inf)
    else:
        xp = x.data
    hp, wp = xp.shape[2], xp.shape[3]
    ho = (hp - k) // stride + 1
    wo = (wp - k) // stride + 1
    if ho < 1 or wo < 1:
        raise TensorError(f"max_pool2d output would be empty for input {h}x{w}")
    win = _windows(xp, k, k, stride).reshape(n, c, ho, wo, k * k)
    arg = win.argmax(axis=-1)  # first occurrence on ties
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def grad_fn(g):
        gi, gj = np.divmod(arg, k)
        oi, oj = np.meshgrid(np.arange(ho), np.arange(wo), indexing="ij")
        rows = oi[None, None] * stride + gi
        cols = oj[None, None] * stride + gj
        ni = np.arange(n)[:, None, None, None]
        ci = np.arange(c)[None, :, None, None]
        gxp = np.zeros((n, c, hp, wp), dtype=x.dtype)
        np.add.at(gxp,
                  (np.broadcast_to(ni, arg.shape), np.broadcast_to(ci, arg.shape),
                   rows, cols),
                  g)
        if padding > 0:
            gxp = gxp[:, :, padding:padding + h, padding:padding + w]
        return (gxp,)

    return _make(out, (x,), grad_fn)


def upsample_nearest2x(x: Tensor) -> Tensor:
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)
    n, c, h, w = x.shape

    def grad_fn(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _make(out, (x,), grad_fn)


# ---------------------------------------------------------------------
# raw tensor file format: "RBT1", dims count, dims (LE u64), f32 LE values
# ---------------------------------------------------------------------

_RBT_MAGIC = b"RBT1"


def save_tensor(path, t: Tensor | np.ndarray) -> None:
    data = t.data if isinstance(t, Tensor) else np.asarray(t)
    # asarray keeps 0-dim shapes (ascontiguousarray would promote to 1-d)
    data = np.asarray(data, dtype="<f4", order="C")
    with open(path, "wb") as f:
        f.write(_RBT_MAGIC)
        f.write(struct.pack("<Q", data.ndim))
        f.write(struct.pack(f"<{data.ndim}Q", *data.shape))
        f.write(data.tobytes())


def load_tensor(path) -> Tensor:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != _RBT_MAGIC:
            raise TensorError(f"{path}: bad tensor file magic {magic!r}")
        (ndim,) = struct.unpack("<Q", f.read(8))
        dims = struct.unpack(f"<{ndim}Q", f.read(8 * ndim))
        count = int(np.prod(dims)) if dims else 1
        raw = f.read(4 * count)
        if len(raw) != 4 * count:
            raise TensorError(f"{path}: truncated tensor file")
        data = np.frombuffer(raw, dtype="<f4").reshape(dims).copy()
    return Tensor(data)
