"""Dense N-D tensors with tape-based reverse-mode autodiff.

Image data is laid out N x C x H x W, row-major.  Every differentiable op
records a :class:`Node` on the active :class:`Tape` when any input requires
a gradient; :func:`backward` replays the tape in reverse.
"""
from __future__ import annotations

import contextlib
from collections import Counter
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit

from . import _kernels

DTYPES = (np.float32, np.float64)

#: Names of every differentiable op, filled as ops are defined.
DIFFERENTIABLE_OPS: list[str] = []

#: Global instrumentation: number of op invocations by name and backward passes.
op_counter: Counter = Counter()
backward_passes = 0


def _differentiable(name: str) -> str:
    DIFFERENTIABLE_OPS.append(name)
    return name


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in DTYPES:
            arr = arr.astype(np.float32)
        if arr.dtype not in DTYPES:
            raise TypeError(f"unsupported dtype {arr.dtype}; use float32 or float64")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{rg})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


# --------------------------------------------------------------------------
# tape
# --------------------------------------------------------------------------

@dataclass
class Node:
    op: str
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of differentiable ops; execution order is topological."""

    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self.reached: set[int] = set()  # ids of leaves that received a gradient in the last backward

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, node: Node) -> None:
        self.nodes.append(node)

    def clear(self) -> None:
        for node in self.nodes:
            node.out._node = None
        self.nodes = []

    def backward(self, loss: Tensor, leaves: Iterable[Tensor] | None = None, retain: bool = False) -> list[str]:
        """Populate ``.grad`` of every leaf that ``loss`` depends on.

        Leaves listed in ``leaves`` that do not participate receive a zero
        gradient.  Returns the op names visited, in visiting order.
        """
        global backward_passes
        if loss.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not np.isfinite(loss.data).all():
            raise FloatingPointError("loss is not finite")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        visited = []
        for node in reversed(self.nodes):
            visited.append(node.op)
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            in_grads = node.backward(g)
            for inp, gi in zip(node.inputs, in_grads):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        # what remains in grads belongs to leaves
        leaf_by_id = {}
        for node in self.nodes:
            for inp in node.inputs:
                if inp.requires_grad and inp._node is None:
                    leaf_by_id[id(inp)] = inp
        if loss._node is None and loss.requires_grad:
            leaf_by_id[id(loss)] = loss
        self.reached = set()
        for key, g in grads.items():
            leaf = leaf_by_id.get(key)
            if leaf is None:
                continue
            self.reached.add(key)
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
        if leaves is not None:
            for leaf in leaves:
                if leaf.requires_grad and leaf.grad is None:
                    leaf.grad = np.zeros_like(leaf.data)
        backward_passes += 1
        if not retain:
            self.clear()
        return visited


class _State:
    tape = Tape()
    grad_enabled = True


def current_tape() -> Tape:
    return _State.tape


@contextlib.contextmanager
def recording(tape: Tape):
    """Record ops onto ``tape`` instead of the default tape."""
    prev = _State.tape
    _State.tape = tape
    try:
        yield tape
    finally:
        _State.tape = prev


@contextlib.contextmanager
def no_grad():
    prev = _State.grad_enabled
    _State.grad_enabled = False
    try:
        yield
    finally:
        _State.grad_enabled = prev


def backward(loss: Tensor, tape: Tape | None = None, leaves: Iterable[Tensor] | None = None, retain: bool = False):
    return (tape or _State.tape).backward(loss, leaves=leaves, retain=retain)


def _result(op: str, data: np.ndarray, inputs: tuple[Tensor, ...], bwd) -> Tensor:
    op_counter[op] += 1
    out = Tensor(data, dtype=data.dtype)
    if _State.grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        node = Node(op, out, inputs, bwd)
        out._node = node
        _State.tape.record(node)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: shapes {a.shape} and {b.shape} are not broadcast-compatible") from None


# --------------------------------------------------------------------------
# elementwise
# --------------------------------------------------------------------------

def add(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a.dtype)
    _broadcast_shape(a, b, "add")
    sa, sb = a.shape, b.shape
    return _result(ADD, a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a.dtype)
    _broadcast_shape(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _result(SUB, a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a.dtype)
    _broadcast_shape(a, b, "mul")
    ad, bd = a.data, b.data

    def bwd(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _result(MUL, ad * bd, (a, b), bwd)


def div(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a.dtype)
    _broadcast_shape(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def bwd(g):
        ga = g / bd
        return _unbroadcast(ga, ad.shape), _unbroadcast(-ga * out, bd.shape)

    return _result(DIV, out, (a, b), bwd)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return _result(SCALE, a.data * a.dtype.type(s), (a,), lambda g: (g * g.dtype.type(s),))


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    d = a.data
    mask = (d >= lo) & (d <= hi)
    return _result(CLAMP, np.clip(d, lo, hi), (a,), lambda g: (g * mask,))


def ewise(op: str, a: Tensor, b) -> Tensor:
    """Dispatch ``op`` in {add, sub, mul, scale, clamp}; ``b`` is (lo, hi) for clamp."""
    if op == "add":
        return add(a, b)
    if op == "sub":
        return sub(a, b)
    if op == "mul":
        return mul(a, b)
    if op == "scale":
        return scale(a, b)
    if op == "clamp":
        lo, hi = b
        return clamp(a, lo, hi)
    raise ValueError(f"unknown elementwise op {op!r}")


def log(a: Tensor) -> Tensor:
    d = a.data
    if (d <= 0).any():
        raise FloatingPointError("log of non-positive value")
    return _result(LOG, np.log(d), (a,), lambda g: (g / d,))


def relu(a: Tensor) -> Tensor:
    d = a.data
    mask = d > 0
    return _result(RELU, np.where(mask, d, d.dtype.type(0)), (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    out = expit(a.data)
    return _result(SIGMOID, out, (a,), lambda g: (g * out * (1 - out),))


def softmax_channels(a: Tensor) -> Tensor:
    """Softmax over axis 1 (channels), independently per pixel."""
    d = a.data
    e = np.exp(d - d.max(axis=1, keepdims=True))
    out = e / e.sum(axis=1, keepdims=True)

    def bwd(g):
        return (out * (g - (g * out).sum(axis=1, keepdims=True)),)

    return _result(SOFTMAX, out, (a,), bwd)


def activation(op: str, x: Tensor) -> Tensor:
    if op == "relu":
        return relu(x)
    if op == "sigmoid":
        return sigmoid(x)
    if op == "softmax_channels":
        return softmax_channels(x)
    raise ValueError(f"unknown activation {op!r}")


# --------------------------------------------------------------------------
# shape / reduction
# --------------------------------------------------------------------------

def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    src = a.shape
    return _result(RESHAPE, a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - mirrors numpy
    src = a.shape
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims), dtype=a.dtype)

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _result(SUM, out, (a,), bwd)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    if len(xs) == 0:
        raise ValueError("concat_channels needs at least one tensor")
    if len(xs) == 1:
        return xs[0]
    ref = xs[0].shape
    for x in xs[1:]:
        if x.ndim != 4 or x.shape[0] != ref[0] or x.shape[2:] != ref[2:]:
            raise ValueError(f"concat_channels: shape {x.shape} does not match {ref} outside the channel axis")
    splits = np.cumsum([x.shape[1] for x in xs])[:-1]
    out = np.concatenate([x.data for x in xs], axis=1)

    def bwd(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=1))

    return _result(CONCAT, out, tuple(xs), bwd)


def expand_channels(a: Tensor, c: int) -> Tensor:
    """Stack a 1-channel map ``c`` times along the channel axis."""
    if a.shape[1] != 1:
        raise ValueError(f"expand_channels expects 1 channel, got {a.shape}")
    out = np.repeat(a.data, c, axis=1)
    return _result(EXPAND, out, (a,), lambda g: (g.sum(axis=1, keepdims=True),))


# --------------------------------------------------------------------------
# convolution
# --------------------------------------------------------------------------

def conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    n, cin, h, wd = x.shape
    cout, wcin, kh, kw = w.shape
    if wcin != cin:
        raise ValueError(f"conv2d: input has {cin} channels but weight {w.shape} expects {wcin}")
    hp, wp = h + 2 * pad, wd + 2 * pad
    if kh > hp or kw > wp:
        raise ValueError(f"conv2d: kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    ho, wo = (hp - kh) // stride + 1, (wp - kw) // stride + 1
    xd = x.data
    if kh == 1 and kw == 1 and stride == 1 and pad == 0:
        cols = xd.reshape(n, cin, h * wd)
    else:
        xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd
        cols = _kernels.im2col(xp, kh, kw, stride, ho, wo)
    w2 = w.data.reshape(cout, -1)
    out = np.matmul(w2, cols)
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(n, cout, ho, wo)

    def bwd(g):
        g3 = g.reshape(n, cout, ho * wo)
        gw = gx = gb = None
        if w.requires_grad:
            gw = np.matmul(g3, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        if x.requires_grad:
            gcols = np.matmul(w2.T, g3)
            if kh == 1 and kw == 1 and stride == 1 and pad == 0:
                gx = gcols.reshape(x.shape)
            else:
                gxp = _kernels.col2im(gcols, cin, hp, wp, kh, kw, stride, ho, wo)
                gx = gxp[:, :, pad : pad + h, pad : pad + wd] if pad else gxp
                gx = np.ascontiguousarray(gx)
        if bias is not None and bias.requires_grad:
            gb = g3.sum(axis=(0, 2))
        return gx, gw, gb

    inputs = (x, w) if bias is None else (x, w, bias)
    return _result(CONV2D, out, inputs, bwd)


def transpose_conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 2) -> Tensor:
    """Transposed convolution; ``w`` is laid out (Cin, Cout, kh, kw)."""
    if stride not in (1, 2):
        raise ValueError(f"transpose_conv2d supports stride 1 or 2, got {stride}")
    n, cin, h, wd = x.shape
    wcin, cout, kh, kw = w.shape
    if wcin != cin:
        raise ValueError(f"transpose_conv2d: input has {cin} channels but weight {w.shape} expects {wcin}")
    ho, wo = (h - 1) * stride + kh, (wd - 1) * stride + kw
    w2 = w.data.reshape(cin, cout * kh * kw)
    x3 = x.data.reshape(n, cin, h * wd)
    cols = np.matmul(w2.T, x3)
    out = _kernels.col2im(cols, cout, ho, wo, kh, kw, stride, h, wd)
    if bias is not None:
        out += bias.data[None, :, None, None]

    def bwd(g):
        gcols = _kernels.im2col(g, kh, kw, stride, h, wd)
        gx = gw = gb = None
        if x.requires_grad:
            gx = np.matmul(w2, gcols).reshape(x.shape)
        if w.requires_grad:
            gw = np.matmul(x3, gcols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    inputs = (x, w) if bias is None else (x, w, bias)
    return _result(TCONV2D, out, inputs, bwd)


# --------------------------------------------------------------------------
# pooling / resampling
# --------------------------------------------------------------------------

def _pad_to_multiple(d: np.ndarray, k: int, value: float) -> np.ndarray:
    ph, pw = (-d.shape[2]) % k, (-d.shape[3]) % k
    if ph == 0 and pw == 0:
        return d
    return np.pad(d, ((0, 0), (0, 0), (0, ph), (0, pw)), constant_values=value)


def maxpool2d(x: Tensor, k: int = 2, stride: int = 2) -> Tensor:
    if k != stride:
        raise ValueError("maxpool2d supports non-overlapping windows only (k == stride)")
    h, w = x.shape[2:]
    xp = _pad_to_multiple(x.data, k, -np.inf)
    out, arg = _kernels.maxpool_fwd(xp, k)

    def bwd(g):
        return (_kernels.maxpool_bwd(g, arg, k)[:, :, :h, :w],)

    return _result(MAXPOOL, out, (x,), bwd)


def avgpool2d(x: Tensor, k: int = 2, stride: int = 2) -> Tensor:
    if k != stride:
        raise ValueError("avgpool2d supports non-overlapping windows only (k == stride)")
    n, c, h, w = x.shape
    xp = _pad_to_multiple(x.data, k, 0.0)
    hp, wp = xp.shape[2:]
    ho, wo = hp // k, wp // k
    s = xp.reshape(n, c, ho, k, wo, k).sum(axis=(3, 5))
    # true window sizes at the ragged right/bottom edge
    rows = np.minimum(k, h - np.arange(ho) * k)
    cols = np.minimum(k, w - np.arange(wo) * k)
    count = (rows[:, None] * cols[None, :]).astype(x.dtype)
    out = s / count

    def bwd(g):
        gw = np.repeat(np.repeat(g / count, k, axis=2), k, axis=3)
        return (np.ascontiguousarray(gw[:, :, :h, :w]),)

    return _result(AVGPOOL, out, (x,), bwd)


def global_avg_pool(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))
    inv = x.dtype.type(1.0 / (h * w))

    def bwd(g):
        return (np.broadcast_to((g * inv)[:, :, None, None], x.shape).copy(),)

    return _result(GAP, out, (x,), bwd)


def interp_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """Align-corners linear interpolation weights, shape (n_out, n_in)."""
    m = np.zeros((n_out, n_in), dtype=dtype)
    if n_in == 1 or n_out == 1:
        m[:, 0] = 1
        return m
    for o in range(n_out):
        src = o * (n_in - 1) / (n_out - 1)
        i0 = min(int(np.floor(src)), n_in - 2)
        t = src - i0
        m[o, i0] += 1 - t
        m[o, i0 + 1] += t
    return m


def _lerp_index(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Align-corners source indices (i0, i1) and fractional offsets for each output position."""
    if n_in == 1 or n_out == 1:
        z = np.zeros(n_out, dtype=np.intp)
        return z, z, np.zeros(n_out)
    src = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    i0 = np.minimum(np.floor(src).astype(np.intp), n_in - 2)
    return i0, i0 + 1, src - i0


def bilinear_upsample(x: Tensor, out_h: int, out_w: int) -> Tensor:
    n, c, h, w = x.shape
    if out_h < h or out_w < w:
        raise ValueError(f"bilinear_upsample only enlarges: {h}x{w} -> {out_h}x{out_w}")
    if (out_h, out_w) == (h, w):
        return x
    y0, y1, ty = _lerp_index(h, out_h)
    x0, x1, tx = _lerp_index(w, out_w)
    ty = ty.astype(x.dtype)[:, None]
    tx = tx.astype(x.dtype)
    # lerp along x within the two source rows, then along y; same arithmetic as the per-pixel formula
    r0, r1 = x.data[:, :, y0], x.data[:, :, y1]
    top = (1 - tx) * r0[..., x0] + tx * r0[..., x1]
    bot = (1 - tx) * r1[..., x0] + tx * r1[..., x1]
    out = (1 - ty) * top + ty * bot
    ry = interp_matrix(h, out_h, x.dtype)
    rx = interp_matrix(w, out_w, x.dtype)

    def bwd(g):
        return (np.matmul(np.matmul(ry.T, g), rx),)

    return _result(UPSAMPLE, out, (x,), bwd)


# --------------------------------------------------------------------------
# normalization / dense
# --------------------------------------------------------------------------

@dataclass
class RunningStats:
    mean: Tensor
    var: Tensor
    count: Tensor  # number of running-stat updates, stored as a 1-element tensor

    @property
    def updated(self) -> bool:
        return float(self.count.data[0]) > 0


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running: RunningStats,
    training: bool = True,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    n, c, h, w = x.shape
    d = x.data
    dt = d.dtype.type
    if training:
        m = n * h * w
        if m < 2:
            raise ValueError("batchnorm2d in train mode needs batch*H*W >= 2")
        mu = d.mean(axis=(0, 2, 3))
        var = d.var(axis=(0, 2, 3))
        rm = running.mean.data
        rv = running.var.data
        running.mean.data = ((1 - momentum) * rm + momentum * mu).astype(rm.dtype)
        running.var.data = ((1 - momentum) * rv + momentum * var * (m / (m - 1))).astype(rv.dtype)
        running.count.data = running.count.data + 1
    else:
        if not running.updated:
            raise RuntimeError("batchnorm2d eval mode used before any running-stat update")
        mu = running.mean.data.astype(d.dtype)
        var = running.var.data.astype(d.dtype)
    invstd = (1.0 / np.sqrt(var + dt(eps))).astype(d.dtype)
    xhat = (d - mu[:, None, None]) * invstd[:, None, None]
    gd, bd = gamma.data, beta.data
    out = xhat * gd[:, None, None] + bd[:, None, None]

    def bwd(g):
        gg = (g * xhat).sum(axis=(0, 2, 3))
        gb = g.sum(axis=(0, 2, 3))
        dxhat = g * gd[:, None, None]
        if training:
            m = n * h * w
            gx = (invstd / m)[:, None, None] * (
                m * dxhat
                - dxhat.sum(axis=(0, 2, 3))[:, None, None]
                - xhat * (dxhat * xhat).sum(axis=(0, 2, 3))[:, None, None]
            )
        else:
            gx = dxhat * invstd[:, None, None]
        return gx, gg, gb

    return _result(BATCHNORM, out, (x, gamma, beta), bwd)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ValueError(f"linear: input {x.shape} incompatible with weight {w.shape}")
    xd, wd = x.data, w.data
    out = xd @ wd.T
    if b is not None:
        if b.shape != (w.shape[0],):
            raise ValueError(f"linear: bias {b.shape} does not match weight {w.shape}")
        out = out + b.data

    def bwd(g):
        return g @ wd, g.T @ xd, (g.sum(axis=0) if b is not None else None)

    inputs = (x, w) if b is None else (x, w, b)
    return _result(LINEAR, out, inputs, bwd)


ADD = _differentiable("add")
SUB = _differentiable("sub")
MUL = _differentiable("mul")
DIV = _differentiable("div")
SCALE = _differentiable("scale")
CLAMP = _differentiable("clamp")
LOG = _differentiable("log")
RELU = _differentiable("relu")
SIGMOID = _differentiable("sigmoid")
SOFTMAX = _differentiable("softmax_channels")
RESHAPE = _differentiable("reshape")
SUM = _differentiable("sum")
CONCAT = _differentiable("concat_channels")
EXPAND = _differentiable("expand_channels")
CONV2D = _differentiable("conv2d")
TCONV2D = _differentiable("transpose_conv2d")
MAXPOOL = _differentiable("maxpool2d")
AVGPOOL = _differentiable("avgpool2d")
GAP = _differentiable("global_avg_pool")
UPSAMPLE = _differentiable("bilinear_upsample")
BATCHNORM = _differentiable("batchnorm2d")
LINEAR = _differentiable("linear")
