"""Architectural building blocks: re-parameterizable convolutions, CSP/Rep
stacks, spatial pyramid pooling variants and the three-level concat fusion
used on the top-down neck pathway.

Every block is a parameter container plus a pure forward function; training
mode mutates only batch-norm running buffers (single writer).
"""

from __future__ import annotations

import warnings

import numpy as np

from . import tensor as T
from .errors import FusionError, TensorError
from .tensor import Tensor

ACTIVATIONS = {
    "silu": T.silu,
    "relu": T.relu,
    None: lambda t: t,
}


def he_uniform(rng: np.random.Generator, cout: int, cin: int, k: int,
               dtype=np.float32) -> Tensor:
    fan_in = cin * k * k
    bound = np.sqrt(6.0 / fan_in)
    w = rng.uniform(-bound, bound, size=(cout, cin, k, k)).astype(dtype)
    return Tensor(w, requires_grad=True)


class Module:
    """Parameter container base.

    Child modules, parameters (grad-requiring tensors) and buffers (numpy
    arrays) are discovered from instance attributes in declaration order,
    which fixes the checkpoint layout.  Lists of modules are traversed with
    their index as the name component.
    """

    def _entries(self):
        for name, value in vars(self).items():
            if isinstance(value, (Module, Tensor, np.ndarray)):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = ""):
        for name, value in self._entries():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{full}.")

    def named_buffers(self, prefix: str = ""):
        for name, value in self._entries():
            full = f"{prefix}{name}"
            if isinstance(value, np.ndarray):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_buffers(f"{full}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters())


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5,
                 dtype=np.float32):
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.batches_seen = np.zeros(1, dtype=dtype)
        self.momentum = momentum
        self.eps = eps

    def forward(self, x: Tensor, training: bool) -> Tensor:
        if training:
            self.batches_seen[0] += 1.0
        return T.batch_norm(x, self.gamma, self.beta, self.running_mean,
                            self.running_var, training, self.momentum, self.eps)

    @property
    def calibrated(self) -> bool:
        return float(self.batches_seen[0]) > 0.0

    def fold(self, weight: np.ndarray, bias: np.ndarray | None):
        """Fold this norm into the preceding conv's weight/bias (eval form).

        Algebra runs in float64 and casts back so the folded form tracks the
        two-op original to well under 1e-5.
        """
        std = np.sqrt(self.running_var.astype(np.float64) + self.eps)
        scale = self.gamma.data.astype(np.float64) / std
        w = weight.astype(np.float64) * scale.reshape(-1, 1, 1, 1)
        b = np.zeros_like(scale) if bias is None else bias.astype(np.float64)
        b = (b - self.running_mean.astype(np.float64)) * scale + self.beta.data.astype(np.float64)
        return w.astype(weight.dtype), b.astype(weight.dtype)


class ConvBN(Module):
    """Conv + optional BatchNorm + activation; the workhorse layer.

    A fused instance (``bn is None``) carries the folded bias instead and is
    what deployment produces.
    """

    def __init__(self, cin: int, cout: int, k: int, stride: int = 1,
                 act: str | None = "silu", rng: np.random.Generator | None = None,
                 with_bn: bool = True, bias_init: float = 0.0, dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight = he_uniform(rng, cout, cin, k, dtype)
        if with_bn:
            self.bias = None
            self.bn = BatchNorm2d(cout, dtype=dtype)
        else:
            self.bias = Tensor(np.full(cout, bias_init, dtype=dtype),
                               requires_grad=True)
            self.bn = None
        self.stride = stride
        self.padding = k // 2
        self.act = act

    def forward(self, x: Tensor, training: bool = False) -> Tensor:
        y = T.conv2d(x, self.weight, self.bias, self.stride, self.padding)
        if self.bn is not None:
            y = self.bn.forward(y, training)
        return ACTIVATIONS[self.act](y)

    def fused_weights(self):
        if self.bn is None:
            return self.weight.data, self.bias.data
        if not self.bn.calibrated:
            raise FusionError(
                "batch norm running statistics are unpopulated; run a "
                "calibration forward pass in training mode before fusing"
            )
        return self.bn.fold(self.weight.data, None)

    def fuse(self) -> "ConvBN":
        """Return an equivalent conv-with-bias layer (no norm)."""
        w, b = self.fused_weights()
        out = ConvBN.__new__(ConvBN)
        out.weight = Tensor(w.copy(), requires_grad=True)
        out.bias = Tensor(b.copy(), requires_grad=True)
        out.bn = None
        out.stride = self.stride
        out.padding = self.padding
        out.act = self.act
        return out


def _pad_1x1_to_3x3(w: np.ndarray) -> np.ndarray:
    out = np.zeros((w.shape[0], w.shape[1], 3, 3), dtype=w.dtype)
    out[:, :, 1, 1] = w[:, :, 0, 0]
    return out


def _identity_kernel(channels: int, dtype) -> np.ndarray:
    w = np.zeros((channels, channels, 3, 3), dtype=dtype)
    w[np.arange(channels), np.arange(channels), 1, 1] = 1.0
    return w


class RepConv(Module):
    """Re-parameterizable conv unit.

    Training form runs three parallel branches, each normed:
    BN(conv3x3(x)) + BN(conv1x1(x)) + BN(x), the identity branch existing
    only when shapes permit (cin == cout, stride 1).  ``fuse`` collapses the
    branches into a single 3x3 conv with bias; eval outputs of the two forms
    agree to float precision.
    """

    def __init__(self, cin: int, cout: int, stride: int = 1,
                 act: str | None = "relu", rng: np.random.Generator | None = None,
                 dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.dense = ConvBN(cin, cout, 3, stride, act=None, rng=rng, dtype=dtype)
        self.one = ConvBN(cin, cout, 1, stride, act=None, rng=rng, dtype=dtype)
        self.idbn = BatchNorm2d(cout, dtype=dtype) if cin == cout and stride == 1 else None
        self.cin = cin
        self.cout = cout
        self.stride = stride
        self.act = act
        self.deploy = False

    def forward(self, x: Tensor, training: bool = False) -> Tensor:
        if x.shape[1] != self.cin:
            raise TensorError(
                f"rep conv expects {self.cin} input channels, got {x.shape[1]}"
            )
        if self.deploy:
            y = T.conv2d(x, self.weight, self.bias, self.stride, 1)
            return ACTIVATIONS[self.act](y)
        y = self.dense.forward(x, training) + self.one.forward(x, training)
        if self.idbn is not None:
            y = y + self.idbn.forward(x, training)
        return ACTIVATIONS[self.act](y)

    def fuse(self) -> "RepConv":
        if self.deploy:
            raise FusionError("rep conv is already in deploy form")
        w3, b3 = self.dense.fused_weights()
        w1, b1 = self.one.fused_weights()
        w = w3 + _pad_1x1_to_3x3(w1)
        b = b3 + b1
        if self.idbn is not None:
            if not self.idbn.calibrated:
                raise FusionError(
                    "identity-branch norm statistics are unpopulated; run a "
                    "calibration forward pass in training mode before fusing"
                )
            wi, bi = self.idbn.fold(_identity_kernel(self.cout, w.dtype), None)
            w = w + wi
            b = b + bi
        out = RepConv.__new__(RepConv)
        out.weight = Tensor(w, requires_grad=True)
        out.bias = Tensor(b, requires_grad=True)
        out.cin = self.cin
        out.cout = self.cout
        out.stride = self.stride
        out.act = self.act
        out.deploy = True
        return out

    @classmethod
    def deploy_form(cls, cin: int, cout: int, stride: int = 1,
                    act: str | None = "relu", dtype=np.float32) -> "RepConv":
        out = cls.__new__(cls)
        out.weight = Tensor(np.zeros((cout, cin, 3, 3), dtype=dtype),
                            requires_grad=True)
        out.bias = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)
        out.cin = cin
        out.cout = cout
        out.stride = stride
        out.act = act
        out.deploy = True
        return out


class RepBlock(Module):
    """Sequence of rep conv units; the first may change channels/stride."""

    def __init__(self, cin: int, cout: int, n: int = 1, stride: int = 1,
                 rng=None, dtype=np.float32):
        units = [RepConv(cin, cout, stride, rng=rng, dtype=dtype)]
        units += [RepConv(cout, cout, 1, rng=rng, dtype=dtype) for _ in range(n - 1)]
        self.units = units

    def forward(self, x: Tensor, training: bool = False) -> Tensor:
        for u in self.units:
            x = u.forward(x, training)
        return x

    def fuse(self) -> "RepBlock":
        out = RepBlock.__new__(RepBlock)
        out.units = [u.fuse() for u in self.units]
        return out


class RepPair(Module):
    """Two stacked rep units with a residual add around the pair."""

    def __init__(self, channels: int, rng=None, dtype=np.float32):
        self.a = RepConv(channels, channels, rng=rng, dtype=dtype)
        self.b = RepConv(channels, channels, rng=rng, dtype=dtype)

    def forward(self, x: Tensor, training: bool = False) -> Tensor:
        return self.b.forward(self.a.forward(x, training), training) + x

    def fuse(self) -> "RepPair":
        out = RepPair.__new__(RepPair)
        out.a = self.a.fuse()
        out.b = self.b.fuse()
        return out


class CSPStackRep(Module):
    """CSP split (ratio 1/2) around a stack of residual rep-unit pairs.

    Stand-in for the large-model stage block: two 1x1 entry convs, one path
    through the rep stack, concat, 1x1 merge.
    """

    def __init__(self, cin: int, cout: int, n: int = 1, stride: int = 1,
                 rng=None, dtype=np.float32):
        hidden = cout // 2
        self.down = RepConv(cin, cout, stride, rng=rng, dtype=dtype) if stride > 1 else None
        mid = cout if stride > 1 else cin
        self.cv1 = ConvBN(mid, hidden, 1, rng=rng, dtype=dtype)
        self.cv2 = ConvBN(mid, hidden, 1, rng=rng, dtype=dtype)
        self.pairs = [RepPair(hidden, rng=rng, dtype=dtype) for _ in range(n)]
        self.cv3 = ConvBN(2 * hidden, cout, 1, rng=rng, dtype=dtype)

    def forward(self, x: Tensor, training: bool = False) -> Tensor:
        if self.down is not None:
            x = self.down.forward(x, training)
        main = self.cv1.forward(x, training)
        for pair in self.pairs:
            main = pair.forward(main, training)
        short = self.cv2.forward(x, training)
        return self.cv3.forward(T.concat([main, short], axis=1), training)

    def fuse(self) -> "CSPStackRep":
        out = CSPStackRep.__new__(CSPStackRep)
        out.down = self.down.fuse() if self.down is not None else None
        out.cv1 = self.cv1.fuse()
        out.cv2 = self.cv2.fuse()
        out.pairs = [p.fuse() for p in self.pairs]
        out.cv3 = self.cv3.fuse()
        return out


def _pool_cascade(x: Tensor) -> list[Tensor]:
    y1 = T.max_pool2d(x, 5, 1, 2)
    y2 = T.max_pool2d(y1, 5, 1, 2)
    y3 = T.max_pool2d(y2, 5, 1, 2)
    return [x, y1, y2, y3]


class SimSPPF(Module):
    """Spatial pyramid pooling (fast form): cascaded 5x5 max pools whose
    stages match direct 5/9/13 pooling, ReLU convs."""

    def __init__(self, cin: int, cout: int, rng=None, dtype=np.float32):
        hidden = cin // 2
        self.cv1 = ConvBN(cin, hidden, 1, act="relu", rng=rng, dtype=dtype)
        self.cv2 = ConvBN(4 * hidden, cout, 1, act="relu", rng=rng, dtype=dtype)

    def forward(self, x: Tensor, training: bool = False) -> Tensor:
        y = self.cv1.forward(x, training)
        return self.cv2.forward(T.concat(_pool_cascade(y), axis=1), training)

    def fuse(self) -> "SimSPPF":
        out = SimSPPF.__new__(SimSPPF)
        out.cv1 = self.cv1.fuse()
        out.cv2 = self.cv2.fuse()
        return out


class SimCSPSPPF(Module):
    """CSP-wrapped pyramid pooling with hidden width ``out_channels / 2``.

    A shortcut 1x1 path runs beside the main path (conv stack, pooling
    cascade, conv stack); the halved hidden width keeps the parameter count
    below an equal-width non-shrunk CSP pooling block.
    """

    def __init__(self, cin: int, cout: int, rng=None, dtype=np.float32):
        if cout % 2:
            warnings.warn(
                f"SimCSPSPPF out_channels {cout} is odd; hidden width rounds "
                f"down to {cout // 2}",
                stacklevel=2,
            )
        hidden = cout // 2
        self.cv1 = ConvBN(cin, hidden, 1, act="relu", rng=rng, dtype=dtype)
        self.cv2 = ConvBN(cin, hidden, 1, act="relu", rng=rng, dtype=dtype)
        self.cv3 = ConvBN(hidden, hidden, 3, act="relu", rng=rng, dtype=dtype)
        self.cv4 = ConvBN(hidden, hidden, 1, act="relu", rng=rng, dtype=dtype)
        self.cv5 = ConvBN(4 * hidden, hidden, 1, act="relu", rng=rng, dtype=dtype)
        self.cv6 = ConvBN(hidden, hidden, 3, act="relu", rng=rng, dtype=dtype)
        self.cv7 = ConvBN(2 * hidden, cout, 1, act="relu", rng=rng, dtype=dtype)

    def forward(self, x: Tensor, training: bool = False) -> Tensor:
        main = self.cv4.forward(self.cv3.forward(self.cv1.forward(x, training),
                                                 training), training)
        main = self.cv5.forward(T.concat(_pool_cascade(main), axis=1), training)
        main = self.cv6.forward(main, training)
        short = self.cv2.forward(x, training)
        return self.cv7.forward(T.concat([main, short], axis=1), training)

    def fuse(self) -> "SimCSPSPPF":
        out = SimCSPSPPF.__new__(SimCSPSPPF)
        for name in ("cv1", "cv2", "cv3", "cv4", "cv5", "cv6", "cv7"):
            setattr(out, name, getattr(self, name).fuse())
        return out


class BiC(Module):
    """Three-level concat fusion on the top-down pathway.

    Inputs are the lower backbone level (2x spatial), the current backbone
    level and the already-reduced higher level (half spatial).  The lower
    level is projected 1x1 then brought down with a stride-2 3x3 conv, the
    higher level is nearest-upsampled, and the three maps are concatenated
    in [top-down, current, lower] order before a 1x1 fusion conv.
    """

    def __init__(self, c_prev: int, c_cur: int, cout: int, rng=None,
                 dtype=np.float32):
        self.proj_cur = ConvBN(c_cur, cout, 1, rng=rng, dtype=dtype)
        self.proj_prev = ConvBN(c_prev, cout, 1, rng=rng, dtype=dtype)
        self.down_prev = ConvBN(cout, cout, 3, stride=2, rng=rng, dtype=dtype)
        self.fuse_conv = ConvBN(3 * cout, cout, 1, rng=rng, dtype=dtype)
        self.cout = cout

    def forward(self, c_prev: Tensor, c_cur: Tensor, p_higher: Tensor,
                training: bool = False) -> Tensor:
        th, tw = c_cur.shape[2], c_cur.shape[3]
        if c_prev.shape[2] != 2 * th or c_prev.shape[3] != 2 * tw:
            raise TensorError(
                f"lower level is {c_prev.shape[2]}x{c_prev.shape[3]}, expected "
                f"{2 * th}x{2 * tw} to downsample onto {th}x{tw}"
            )
        if p_higher.shape[2] * 2 != th or p_higher.shape[3] * 2 != tw:
            raise TensorError(
                f"higher level is {p_higher.shape[2]}x{p_higher.shape[3]}, "
                f"expected {th // 2}x{tw // 2} to upsample onto {th}x{tw}"
            )
        td = T.upsample_nearest2x(p_higher)
        cur = self.proj_cur.forward(c_cur, training)
        low = self.down_prev.forward(self.proj_prev.forward(c_prev, training),
                                     training)
        return self.fuse_conv.forward(T.concat([td, cur, low], axis=1), training)

    def fuse(self) -> "BiC":
        out = BiC.__new__(BiC)
        for name in ("proj_cur", "proj_prev", "down_prev", "fuse_conv"):
            setattr(out, name, getattr(self, name).fuse())
        out.cout = self.cout
        return out


class PanFuse(Module):
    """Two-input top-down fusion (the neck's shape when BiC is disabled)."""

    def __init__(self, c_cur: int, cout: int, rng=None, dtype=np.float32):
        self.proj_cur = ConvBN(c_cur, cout, 1, rng=rng, dtype=dtype)
        self.fuse_conv = ConvBN(2 * cout, cout, 1, rng=rng, dtype=dtype)
        self.cout = cout

    def forward(self, c_cur: Tensor, p_higher: Tensor,
                training: bool = False) -> Tensor:
        td = T.upsample_nearest2x(p_higher)
        cur = self.proj_cur.forward(c_cur, training)
        return self.fuse_conv.forward(T.concat([td, cur], axis=1), training)

    def fuse(self) -> "PanFuse":
        out = PanFuse.__new__(PanFuse)
        out.proj_cur = self.proj_cur.fuse()
        out.fuse_conv = self.fuse_conv.fuse()
        out.cout = self.cout
        return out
