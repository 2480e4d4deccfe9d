"""Parameterized building blocks and the parameter registry.

Blocks declare their parameters on a shared :class:`ParamRegistry` under
hierarchical dotted names and read them back at call time, so a whole
model's state lives in one ordered mapping.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .tensor import RunningStats, Tensor

CHECKPOINT_MAGIC = b"SAUC"
CHECKPOINT_VERSION = 1

BN_MOMENTUM = 0.1
BN_EPS = 1e-5


class CheckpointError(ValueError):
    pass


@dataclass
class ParamSpec:
    shape: tuple[int, ...]
    kind: str  # weight | bias | gamma | beta | running_mean | running_var | count
    fan_in: int = 0

    @property
    def trainable(self) -> bool:
        return self.kind in ("weight", "bias", "gamma", "beta")


class ParamRegistry:
    """Ordered name -> Tensor map holding weights, BN affine and running stats."""

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self.specs: dict[str, ParamSpec] = {}
        self.tensors: dict[str, Tensor] = {}
        self.training = True

    def declare(self, name: str, shape, kind: str, fan_in: int = 0) -> str:
        if name in self.specs:
            raise KeyError(f"parameter {name!r} declared twice")
        spec = ParamSpec(tuple(int(s) for s in shape), kind, fan_in)
        self.specs[name] = spec
        self.tensors[name] = Tensor(np.zeros(spec.shape, self.dtype), requires_grad=spec.trainable, name=name)
        return name

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __len__(self) -> int:
        return len(self.tensors)

    def names(self) -> list[str]:
        return list(self.tensors)

    def trainable(self) -> dict[str, Tensor]:
        return {k: t for k, t in self.tensors.items() if self.specs[k].trainable}

    def train(self) -> None:
        self.training = True

    def eval(self) -> None:
        self.training = False

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.tensors.items()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        if strict:
            missing = set(self.tensors) - set(state)
            if missing:
                raise CheckpointError(f"checkpoint lacks parameters: {sorted(missing)[:5]}")
        for k, arr in state.items():
            if k not in self.tensors:
                if strict:
                    raise CheckpointError(f"unexpected parameter {k!r} in checkpoint")
                continue
            if tuple(arr.shape) != self.specs[k].shape:
                raise CheckpointError(f"parameter {k!r}: shape {arr.shape} != {self.specs[k].shape}")
            self.tensors[k].data = np.array(arr, dtype=self.dtype)

    def save(self, path) -> None:
        write_checkpoint(path, self.state_dict())

    def load(self, path) -> None:
        self.load_state_dict(read_checkpoint(path))


def init_params(registry: ParamRegistry, scheme: str = "he_normal", seed: int = 0) -> None:
    """Fill every parameter deterministically from ``seed``.

    Weights are drawn from N(0, 2/fan_in); biases and BN beta are 0, BN gamma
    is 1, running mean 0 and running variance 1.
    """
    if scheme != "he_normal":
        raise ValueError(f"unknown init scheme {scheme!r}")
    rng = np.random.default_rng(seed)
    for name, spec in registry.specs.items():
        if spec.kind == "weight":
            std = np.sqrt(2.0 / spec.fan_in)
            arr = rng.standard_normal(spec.shape) * std
        elif spec.kind in ("gamma", "running_var"):
            arr = np.ones(spec.shape)
        else:
            arr = np.zeros(spec.shape)
        registry.tensors[name].data = arr.astype(registry.dtype)


# --------------------------------------------------------------------------
# checkpoint container
# --------------------------------------------------------------------------

def encode_checkpoint(arrays: dict[str, np.ndarray]) -> bytes:
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(arrays))]
    for name, arr in arrays.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_checkpoint(buf: bytes) -> dict[str, np.ndarray]:
    if buf[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad checkpoint magic {buf[:4]!r} at byte 0")
    pos = 4

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"checkpoint truncated at byte {pos} (wanted {n} more bytes)")
        chunk = buf[pos : pos + n]
        pos += n
        return chunk

    version, count = struct.unpack("<II", take(8))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        (ndim,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim))
        size = int(np.prod(dims)) if ndim else 1
        out[name] = np.frombuffer(take(4 * size), dtype="<f4").reshape(dims).astype(np.float32)
    if pos != len(buf):
        raise CheckpointError(f"trailing bytes after checkpoint payload at byte {pos}")
    return out


def write_checkpoint(path, arrays: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode_checkpoint(arrays))


def read_checkpoint(path) -> dict[str, np.ndarray]:
    return decode_checkpoint(Path(path).read_bytes())


# --------------------------------------------------------------------------
# primitive layers
# --------------------------------------------------------------------------

class Conv2d:
    def __init__(self, reg: ParamRegistry, name: str, cin: int, cout: int, k: int, stride: int = 1, pad=None, bias=True):
        self.reg, self.stride = reg, stride
        self.pad = k // 2 if pad is None else pad
        self.cin, self.cout = cin, cout
        self.w = reg.declare(f"{name}.weight", (cout, cin, k, k), "weight", fan_in=cin * k * k)
        self.b = reg.declare(f"{name}.bias", (cout,), "bias") if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        b = self.reg[self.b] if self.b else None
        return T.conv2d(x, self.reg[self.w], b, stride=self.stride, pad=self.pad)


class TransposeConv2d:
    def __init__(self, reg: ParamRegistry, name: str, cin: int, cout: int, k: int = 2, stride: int = 2):
        self.reg, self.stride = reg, stride
        self.w = reg.declare(f"{name}.weight", (cin, cout, k, k), "weight", fan_in=max(1, cin * k * k // (stride * stride)))
        self.b = reg.declare(f"{name}.bias", (cout,), "bias")

    def __call__(self, x: Tensor) -> Tensor:
        return T.transpose_conv2d(x, self.reg[self.w], self.reg[self.b], stride=self.stride)


class BatchNorm2d:
    def __init__(self, reg: ParamRegistry, name: str, c: int):
        self.reg = reg
        self.gamma = reg.declare(f"{name}.gamma", (c,), "gamma")
        self.beta = reg.declare(f"{name}.beta", (c,), "beta")
        self.mean = reg.declare(f"{name}.running_mean", (c,), "running_mean")
        self.var = reg.declare(f"{name}.running_var", (c,), "running_var")
        self.count = reg.declare(f"{name}.num_batches", (1,), "count")

    def __call__(self, x: Tensor) -> Tensor:
        r = self.reg
        stats = RunningStats(r[self.mean], r[self.var], r[self.count])
        return T.batchnorm2d(x, r[self.gamma], r[self.beta], stats, training=r.training, momentum=BN_MOMENTUM, eps=BN_EPS)


class Linear:
    def __init__(self, reg: ParamRegistry, name: str, cin: int, cout: int):
        self.reg = reg
        self.w = reg.declare(f"{name}.weight", (cout, cin), "weight", fan_in=cin)
        self.b = reg.declare(f"{name}.bias", (cout,), "bias")

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.reg[self.w], self.reg[self.b])


class ConvNorm:
    """Normalized convolution: conv -> batchnorm -> ReLU."""

    def __init__(self, reg: ParamRegistry, name: str, cin: int, cout: int, k: int = 3, relu: bool = True):
        self.conv = Conv2d(reg, f"{name}.conv", cin, cout, k, bias=False)
        self.bn = BatchNorm2d(reg, f"{name}.bn", cout)
        self.relu = relu
        self.cout = cout

    def __call__(self, x: Tensor) -> Tensor:
        y = self.bn(self.conv(x))
        return T.relu(y) if self.relu else y


# --------------------------------------------------------------------------
# architecture blocks
# --------------------------------------------------------------------------

class DenseBlock:
    """``n`` normalized 3x3 convs, each fed the concatenation of all earlier maps.

    Output channels are ``cin + n * k``.
    """

    def __init__(self, reg: ParamRegistry, name: str, cin: int, n: int, k: int):
        if n < 1:
            raise ValueError("dense block needs at least one layer")
        self.layers = [ConvNorm(reg, f"{name}.layer{i}", cin + i * k, k) for i in range(n)]
        self.cout = cin + n * k

    def __call__(self, x: Tensor) -> Tensor:
        feats = [x]
        for layer in self.layers:
            feats.append(layer(T.concat_channels(feats)))
        return T.concat_channels(feats)


class TransitionBlock:
    """Normalized 1x1 conv halving the channels, then 2x2 average pool."""

    def __init__(self, reg: ParamRegistry, name: str, cin: int):
        if cin % 2:
            raise ValueError(f"transition block needs an even channel count, got {cin}")
        self.conv = ConvNorm(reg, f"{name}.conv", cin, cin // 2, k=1)
        self.cout = cin // 2

    def __call__(self, x: Tensor) -> Tensor:
        return T.avgpool2d(self.conv(x))


class ResidualBlock:
    def __init__(self, reg: ParamRegistry, name: str, c: int):
        self.c1 = ConvNorm(reg, f"{name}.conv1", c, c)
        self.c2 = ConvNorm(reg, f"{name}.conv2", c, c)

    def __call__(self, x: Tensor) -> Tensor:
        return T.add(x, self.c2(self.c1(x)))


class SqueezeExcitation:
    """Channel reweighting; returns the scaled map and the (N, C) scales."""

    def __init__(self, reg: ParamRegistry, name: str, c: int, r: int = 4):
        if c % r:
            raise ValueError(f"SE block: {c} channels not divisible by reduction {r}")
        self.fc1 = Linear(reg, f"{name}.fc1", c, c // r)
        self.fc2 = Linear(reg, f"{name}.fc2", c // r, c)

    def __call__(self, x: Tensor) -> tuple[Tensor, Tensor]:
        n, c = x.shape[:2]
        s = T.sigmoid(self.fc2(T.relu(self.fc1(T.global_avg_pool(x)))))
        return T.mul(x, T.reshape(s, (n, c, 1, 1))), s


class GatedConvLayer:
    """Gate shape features with a boundary attention map from texture features.

    alpha = sigmoid(C(S || C(T))) where C is a normalized 1x1 conv (conv then
    batchnorm, no ReLU) down to one channel; the texture map is bilinearly
    enlarged to the shape stream's resolution.
    """

    def __init__(self, reg: ParamRegistry, name: str, cs: int, ct: int):
        self.reduce = ConvNorm(reg, f"{name}.texture_reduce", ct, 1, k=1, relu=False)
        self.gate = ConvNorm(reg, f"{name}.gate", cs + 1, 1, k=1, relu=False)
        self.cs = cs

    def __call__(self, s: Tensor, t: Tensor) -> tuple[Tensor, Tensor]:
        if s.shape[0] != t.shape[0]:
            raise ValueError(f"gated layer: batch mismatch {s.shape} vs {t.shape}")
        h, w = s.shape[2:]
        tr = self.reduce(t)
        if tr.shape[2:] != (h, w):
            tr = T.bilinear_upsample(tr, h, w)
        alpha = T.sigmoid(self.gate(T.concat_channels([s, tr])))
        return T.mul(s, T.expand_channels(alpha, self.cs)), alpha


class SpatialAttentionPath:
    def __init__(self, reg: ParamRegistry, name: str, c: int):
        if c % 2:
            raise ValueError(f"spatial attention path needs an even channel count, got {c}")
        self.reduce = ConvNorm(reg, f"{name}.reduce", c, c // 2, k=1)
        self.project = Conv2d(reg, f"{name}.project", c // 2, 1, 1)
        self.c = c

    def __call__(self, x: Tensor) -> tuple[Tensor, Tensor]:
        raw = T.sigmoid(self.project(self.reduce(x)))
        return T.expand_channels(raw, self.c), raw


class DualAttentionDecoder:
    """Upsample, merge with the skip, then fuse channel and spatial attention.

    F = (F_s + 1) * F_c, so the spatial map can only amplify features.
    """

    def __init__(self, reg: ParamRegistry, name: str, skip_c: int, below_c: int, cout: int, r: int = 4):
        self.up = TransposeConv2d(reg, f"{name}.up", below_c, cout)
        self.conv = ConvNorm(reg, f"{name}.conv", skip_c + cout, cout)
        self.se = SqueezeExcitation(reg, f"{name}.se", cout, r)
        self.spatial = SpatialAttentionPath(reg, f"{name}.spatial", cout)
        self.cout = cout

    def __call__(self, skip: Tensor, below: Tensor) -> tuple[Tensor, Tensor]:
        up = self.up(below)
        if up.shape[2:] != skip.shape[2:]:
            raise ValueError(f"decoder: upsampled {up.shape} does not match skip {skip.shape}")
        x = self.conv(T.concat_channels([skip, up]))
        fc, _ = self.se(x)
        fs, raw = self.spatial(x)
        return T.mul(T.add(fs, 1.0), fc), raw
