"""Shape Attentive U-Net assembly.

Texture stream: stem -> 4 dense blocks joined by transition blocks -> 1x1
bridge -> 3 dual-attention decoders.  Shape stream: 1x1 projection of the
stem map, then three rounds of residual block + gated layer at full
resolution, tapping dense blocks 2, 3 and 4.  The edge probability map and
the Canny channel are concatenated with the last decoder output before the
final normalized 3x3 conv and the 1x1 classifier.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .layers import (
    ConvNorm,
    Conv2d,
    DenseBlock,
    DualAttentionDecoder,
    GatedConvLayer,
    ParamRegistry,
    ResidualBlock,
    TransitionBlock,
    encode_checkpoint,
    init_params,
    read_checkpoint,
    write_checkpoint,
)
from .tensor import Tensor


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    num_classes: int = 4
    input_channels: int = 1
    encoder_blocks: list[int] = field(default_factory=lambda: [2, 2, 2, 2])
    growth: int = 8
    stem_channels: int = 16
    shape_width: int = 16
    # bridge width followed by one width per decoder, coarse to fine
    decoder_channels: list[int] = field(default_factory=lambda: [32, 32, 16, 16])
    se_reduction: int = 4
    shape_stream: bool = True
    preset: str = "tiny"

    def validate(self) -> None:
        if len(self.encoder_blocks) != 4:
            raise ConfigError(f"encoder_blocks must list 4 dense blocks, got {self.encoder_blocks}")
        if len(self.decoder_channels) != len(self.encoder_blocks):
            raise ConfigError("decoder_channels needs one width per encoder level")
        widths = [self.num_classes, self.input_channels, self.growth, self.stem_channels, self.shape_width,
                  self.se_reduction, *self.encoder_blocks, *self.decoder_channels]
        if any(int(v) <= 0 for v in widths):
            raise ConfigError("all widths and counts must be positive")
        if self.num_classes < 2:
            raise ConfigError("num_classes counts background and must be >= 2")
        for c in self.decoder_channels[1:]:
            if c % self.se_reduction or c % 2:
                raise ConfigError(f"decoder width {c} must be even and divisible by se_reduction {self.se_reduction}")

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        base = preset(d["preset"]) if "preset" in d else cls()
        cfg = cls(**{**asdict(base), **d})
        cfg.validate()
        return cfg


def preset(name: str, **overrides) -> ModelConfig:
    if name == "tiny":
        cfg = ModelConfig()
    elif name == "dense121":
        cfg = ModelConfig(
            encoder_blocks=[6, 12, 24, 16],
            growth=32,
            stem_channels=64,
            shape_width=32,
            decoder_channels=[512, 256, 128, 64],
            se_reduction=16,
            preset="dense121",
        )
    else:
        raise ConfigError(f"unknown preset {name!r}")
    for k, v in overrides.items():
        if not hasattr(cfg, k):
            raise ConfigError(f"unknown model config key {k!r}")
        setattr(cfg, k, v)
    cfg.validate()
    return cfg


@dataclass
class AttentionBundle:
    alphas: list[Tensor]
    spatial_maps: list[Tensor]  # coarse -> fine
    shape_map: Tensor | None


@dataclass
class ForwardOutput:
    seg_logits: Tensor
    edge_logits: Tensor | None
    attn: AttentionBundle


class SAUNet:
    def __init__(self, config: ModelConfig, dtype=np.float32):
        config.validate()
        self.config = config
        self.registry = reg = ParamRegistry(dtype)
        self.forward_passes = 0
        self.blocks: list[tuple[str, object, int, int]] = []  # name, block, out channels, downscale

        def add(name, block, cout, scale):
            self.blocks.append((name, block, cout, scale))
            return block

        cfg = config
        self.stem = add("stem", ConvNorm(reg, "stem", cfg.input_channels, cfg.stem_channels), cfg.stem_channels, 1)
        c = cfg.stem_channels
        self.dense, self.trans, enc_out = [], [], []
        for i, n in enumerate(cfg.encoder_blocks):
            db = DenseBlock(reg, f"enc{i + 1}", c, n, cfg.growth)
            self.dense.append(add(f"enc{i + 1}", db, db.cout, 2**i))
            c = db.cout
            enc_out.append(c)
            if i < len(cfg.encoder_blocks) - 1:
                tb = TransitionBlock(reg, f"trans{i + 1}", c)
                self.trans.append(add(f"trans{i + 1}", tb, tb.cout, 2 ** (i + 1)))
                c = tb.cout
        self.enc_channels = enc_out
        depth = len(cfg.encoder_blocks) - 1
        bridge_c = cfg.decoder_channels[0]
        self.bridge = add("bridge", ConvNorm(reg, "bridge", c, bridge_c, k=1), bridge_c, 2**depth)
        self.decoders = []
        below = bridge_c
        for j, cout in enumerate(cfg.decoder_channels[1:]):
            level = depth - 1 - j  # skip from dense block level+1
            dec = DualAttentionDecoder(reg, f"dec{j + 1}", enc_out[level], below, cout, cfg.se_reduction)
            self.decoders.append(add(f"dec{j + 1}", dec, cout, 2**level))
            below = cout
        head_in = below
        if cfg.shape_stream:
            cs = cfg.shape_width
            self.shape_proj = add("shape.proj", ConvNorm(reg, "shape.proj", cfg.stem_channels, cs, k=1), cs, 1)
            self.shape_res, self.gates = [], []
            for l in range(depth):
                self.shape_res.append(add(f"shape.res{l + 1}", ResidualBlock(reg, f"shape.res{l + 1}", cs), cs, 1))
                gate = GatedConvLayer(reg, f"shape.gate{l + 1}", cs, enc_out[l + 1])
                self.gates.append(add(f"shape.gate{l + 1}", gate, cs, 1))
            self.shape_head = add("shape.head", Conv2d(reg, "shape.head", cs, 1, 1), 1, 1)
            head_in += 2  # edge probability + Canny
        fuse_c = cfg.decoder_channels[-1]
        self.fuse = add("fuse", ConvNorm(reg, "fuse", head_in, fuse_c), fuse_c, 1)
        self.classifier = add("classifier", Conv2d(reg, "classifier", fuse_c, cfg.num_classes, 1), cfg.num_classes, 1)
        self.downsampling = 2**depth

    # -- state ---------------------------------------------------------------

    def train(self) -> "SAUNet":
        self.registry.train()
        return self

    def eval(self) -> "SAUNet":
        self.registry.eval()
        return self

    @property
    def training(self) -> bool:
        return self.registry.training

    def parameters(self) -> dict[str, Tensor]:
        return self.registry.trainable()

    # -- forward -------------------------------------------------------------

    def __call__(self, x: Tensor, canny: Tensor | None = None) -> ForwardOutput:
        return self.forward(x, canny)

    def forward(self, x: Tensor, canny: Tensor | None = None) -> ForwardOutput:
        cfg = self.config
        if x.ndim != 4 or x.shape[1] != cfg.input_channels:
            raise ValueError(f"expected input N x {cfg.input_channels} x H x W, got {x.shape}")
        n, _, h, w = x.shape
        if h % self.downsampling or w % self.downsampling:
            raise ValueError(f"input {h}x{w} is not divisible by {self.downsampling}; pad the image first")
        self.forward_passes += 1

        s0 = self.stem(x)
        feats = []
        y = s0
        for i, db in enumerate(self.dense):
            y = db(y)
            feats.append(y)
            if i < len(self.trans):
                y = self.trans[i](y)
        d = self.bridge(y)
        spatial = []
        for j, dec in enumerate(self.decoders):
            d, raw = dec(feats[len(feats) - 2 - j], d)
            spatial.append(raw)

        alphas: list[Tensor] = []
        edge_logits = shape_map = None
        if cfg.shape_stream:
            if canny is None:
                raise ValueError("the shape stream needs the Canny edge channel")
            if canny.shape != (n, 1, h, w):
                raise ValueError(f"canny channel must be {(n, 1, h, w)}, got {canny.shape}")
            s = self.shape_proj(s0)
            for res, gate, tap in zip(self.shape_res, self.gates, feats[1:]):
                s, alpha = gate(res(s), tap)
                alphas.append(alpha)
            edge_logits = self.shape_head(s)
            shape_map = T.sigmoid(edge_logits)
            d = T.concat_channels([d, shape_map, canny])
        seg = self.classifier(self.fuse(d))
        return ForwardOutput(seg, edge_logits, AttentionBundle(alphas, spatial, shape_map))

    # -- introspection -------------------------------------------------------

    def count_params(self) -> int:
        return int(sum(t.size for t in self.parameters().values()))

    def block_params(self, prefix: str) -> int:
        return int(sum(t.size for k, t in self.parameters().items() if k.startswith(prefix + ".")))

    def summarize(self, h: int = 64, w: int = 64) -> str:
        rows = [f"{'block':<14}{'params':>10}  output"]
        for name, _, cout, scale in self.blocks:
            rows.append(f"{name:<14}{self.block_params(name):>10}  {cout}x{h // scale}x{w // scale}")
        rows.append(f"{'total':<14}{self.count_params():>10}")
        return "\n".join(rows)

    # -- persistence ---------------------------------------------------------

    def checkpoint_bytes(self) -> bytes:
        return encode_checkpoint(self.registry.state_dict())

    def checkpoint_hash(self) -> str:
        return hashlib.sha256(self.checkpoint_bytes()).hexdigest()

    def save(self, path, extra: dict[str, np.ndarray] | None = None, meta: dict | None = None) -> None:
        arrays = dict(self.registry.state_dict())
        if extra:
            arrays.update(extra)
        write_checkpoint(path, arrays)
        sidecar = {"model": asdict(self.config)}
        if meta:
            sidecar.update(meta)
        Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2))


def build(config: ModelConfig, seed: int = 0, dtype=np.float32) -> SAUNet:
    model = SAUNet(config, dtype=dtype)
    init_params(model.registry, "he_normal", seed)
    return model


def load_model(path) -> tuple[SAUNet, dict[str, np.ndarray], dict]:
    """Rebuild a model from a checkpoint and its JSON sidecar.

    Returns the model, any non-parameter arrays stored alongside (optimizer
    state), and the sidecar metadata.
    """
    sidecar_path = Path(str(path) + ".json")
    if not sidecar_path.exists():
        raise ConfigError(f"missing config sidecar {sidecar_path}")
    meta = json.loads(sidecar_path.read_text())
    model = SAUNet(ModelConfig.from_dict(meta["model"]))
    arrays = read_checkpoint(path)
    params = {k: v for k, v in arrays.items() if k in model.registry}
    model.registry.load_state_dict(params)
    extra = {k: v for k, v in arrays.items() if k not in model.registry}
    return model, extra, meta
