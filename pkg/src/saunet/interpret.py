"""Built-in attention maps, thresholding, overlays, and a SmoothGrad baseline."""
from __future__ import annotations

import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import SegSample, sgt_write
from .model import AttentionBundle, SAUNet
from .tensor import Tensor


def _inputs(model: SAUNet, sample: SegSample) -> tuple[Tensor, Tensor | None]:
    dtype = model.registry.dtype
    x = Tensor(np.asarray(sample.image, dtype=dtype).reshape(1, 1, *sample.labels.shape), dtype=dtype)
    canny = None
    if model.config.shape_stream:
        canny = Tensor(np.asarray(sample.canny, dtype=dtype).reshape(x.shape), dtype=dtype)
    return x, canny


def extract(model: SAUNet, sample: SegSample) -> AttentionBundle:
    """One eval-mode forward pass without gradient recording."""
    was_training = model.training
    model.eval()
    try:
        x, canny = _inputs(model, sample)
        with T.no_grad():
            out = model(x, canny)
    finally:
        if was_training:
            model.train()
    return out.attn


def named_maps(bundle: AttentionBundle) -> dict[str, np.ndarray]:
    """2-D maps of the first sample keyed by output name.

    Decoders are numbered from the finest, so ``spatial_d2`` is the
    second-finest decoder map and ``spatial_d3`` the coarsest.
    """
    maps = {f"alpha_{i + 1}": a.data[0, 0] for i, a in enumerate(bundle.alphas)}
    fine_first = bundle.spatial_maps[::-1]
    for i, s in enumerate(fine_first[1:], start=2):
        maps[f"spatial_d{i}"] = s.data[0, 0]
    if bundle.shape_map is not None:
        maps["shape"] = bundle.shape_map.data[0, 0]
    return maps


def threshold_map(m: np.ndarray, tau: float) -> np.ndarray:
    if not 0.0 <= tau <= 1.0:
        raise ValueError("tau must lie in [0, 1]")
    return (np.asarray(m) >= tau).astype(np.uint8)


# --------------------------------------------------------------------------
# overlays
# --------------------------------------------------------------------------

def heat_palette(v: np.ndarray) -> np.ndarray:
    """Black-red-yellow-white ramp; (...,) in [0,1] -> (..., 3) in [0,1]."""
    v = np.clip(v, 0.0, 1.0)
    return np.stack([np.clip(3 * v, 0, 1), np.clip(3 * v - 1, 0, 1), np.clip(3 * v - 2, 0, 1)], axis=-1)


PALETTES = {"heat": heat_palette}


@dataclass
class OverlayImage:
    pixels: np.ndarray  # (H, W, 3) uint8
    sample_id: str
    map_name: str
    threshold: float | None

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]


def resize_map(m: np.ndarray, h: int, w: int) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if m.shape == (h, w):
        return m
    return T.interp_matrix(m.shape[0], h) @ m @ T.interp_matrix(m.shape[1], w).T


def blend(image: np.ndarray, m: np.ndarray, tau: float | None = None, palette: str = "heat") -> np.ndarray:
    """Alpha-blend a heat-coloured map over the min-max scaled grayscale image.

    The blend weight of each pixel is the map value itself; with ``tau`` only
    pixels at or above the threshold are coloured.
    """
    img = np.asarray(image, dtype=np.float64)
    lo, hi = img.min(), img.max()
    gray = (img - lo) / (hi - lo) if hi > lo else np.zeros_like(img)
    m = np.clip(resize_map(m, *img.shape), 0.0, 1.0)
    weight = m if tau is None else m * (m >= tau)
    base = np.repeat(gray[..., None], 3, axis=-1)
    rgb = (1 - weight[..., None]) * base + weight[..., None] * PALETTES[palette](m)
    return np.rint(rgb * 255).astype(np.uint8)


def write_ppm(pixels: np.ndarray, path) -> None:
    h, w, _ = pixels.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(np.ascontiguousarray(pixels, dtype=np.uint8).tobytes())


def render_overlay(image, m, tau=None, palette="heat", path=None, sample_id="", map_name="") -> OverlayImage:
    ov = OverlayImage(blend(image, m, tau, palette), sample_id, map_name, tau)
    if path is not None:
        write_ppm(ov.pixels, path)
    return ov


# --------------------------------------------------------------------------
# SmoothGrad
# --------------------------------------------------------------------------

def smoothgrad(model: SAUNet, sample: SegSample, k: int, n: int = 25, noise_sigma: float | None = None,
               seed: int = 0) -> np.ndarray:
    """Mean |d(sum of class-k logits)/d input| over ``n`` noisy copies, scaled to [0, 1].

    ``noise_sigma`` defaults to a tenth of the input's intensity range.
    Parameters receive no gradient and the model is left unchanged.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if not 0 <= k < model.config.num_classes:
        raise ValueError(f"class {k} outside [0, {model.config.num_classes})")
    x0, canny = _inputs(model, sample)
    if noise_sigma is None:
        noise_sigma = 0.1 * float(x0.data.max() - x0.data.min())
    rng = np.random.default_rng(seed)
    was_training = model.training
    model.eval()
    acc = np.zeros(x0.shape, dtype=np.float64)
    try:
        for _ in range(n):
            noisy = x0.data + rng.normal(0.0, noise_sigma, x0.shape).astype(x0.dtype) if noise_sigma else x0.data
            x = Tensor(noisy, requires_grad=True, dtype=x0.dtype)
            tape = T.Tape()
            with T.recording(tape):
                out = model(x, canny)
                score = T.sum(_channel(out.seg_logits, k))
            tape.backward(score, leaves=[x])
            acc += np.abs(x.grad)
    finally:
        if was_training:
            model.train()
    sal = (acc / n)[0, 0]
    lo, hi = sal.min(), sal.max()
    return (sal - lo) / (hi - lo) if hi > lo else np.zeros_like(sal)


def _channel(t: Tensor, k: int) -> Tensor:
    """Channel ``k`` of an N x C x H x W tensor as a differentiable product with a one-hot mask."""
    mask = np.zeros((1, t.shape[1], 1, 1), dtype=t.dtype)
    mask[0, k] = 1
    return T.mul(t, Tensor(mask, dtype=t.dtype))


# --------------------------------------------------------------------------
# output tree
# --------------------------------------------------------------------------

THRESHOLDED = ("spatial_d2", "spatial_d3")


@dataclass
class ExplainResult:
    files: list[Path]
    extract_seconds: float
    smoothgrad_seconds: float | None
    forward_passes: int
    smoothgrad_passes: int


def explain_sample(model: SAUNet, sample: SegSample, out_root, thresholds=(0.6, 0.8), smoothgrad_n: int = 25,
                   smoothgrad_class: int | None = None) -> ExplainResult:
    """Write ``<out_root>/<id>/`` with PPM overlays and SGT raw maps."""
    out = Path(out_root) / sample.id
    out.mkdir(parents=True, exist_ok=True)
    image = np.asarray(sample.image).reshape(sample.labels.shape)
    before = model.forward_passes
    t0 = time.perf_counter()
    bundle = extract(model, sample)
    t_extract = time.perf_counter() - t0
    passes = model.forward_passes - before
    maps = named_maps(bundle)
    t_sg = None
    if smoothgrad_n:
        k = smoothgrad_class if smoothgrad_class is not None else model.config.num_classes - 1
        t0 = time.perf_counter()
        maps["smoothgrad"] = smoothgrad(model, sample, k, smoothgrad_n)
        t_sg = time.perf_counter() - t0
    files = []
    for name, m in maps.items():
        p = out / f"{name}.ppm"
        render_overlay(image, m, None, path=p, sample_id=sample.id, map_name=name)
        sgt_write(np.asarray(m, dtype=np.float32), out / f"{name}.sgt")
        files.append(p)
        if name in THRESHOLDED:
            for tau in thresholds:
                pt = out / f"{name}_t{round(tau * 100):03d}.ppm"
                render_overlay(image, m, tau, path=pt, sample_id=sample.id, map_name=name)
                files.append(pt)
    return ExplainResult(files, t_extract, t_sg, passes, smoothgrad_n)
