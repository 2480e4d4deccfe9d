"""Tensor file I/O, preprocessing, augmentation, edge maps and synthetic data."""
from __future__ import annotations

import csv
import hashlib
import json
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import _kernels

SGT_MAGIC = b"SGT1"
TARGET_SPACING = (1.25, 1.25)
MANIFEST_HEADER = ["id", "image", "label", "split"]

ELASTIC_SIGMA = 8.0
ELASTIC_ALPHA = 10.0
GAMMA_RANGE = (0.5, 2.0)


class DataError(ValueError):
    pass


# --------------------------------------------------------------------------
# SGT tensor files
# --------------------------------------------------------------------------

def sgt_encode(arr) -> bytes:
    a = np.asarray(getattr(arr, "data", arr))
    if a.ndim == 0:
        a = a.reshape(1)
    if a.ndim > 4:
        raise DataError(f"SGT holds at most 4 dimensions, got {a.ndim}")
    head = SGT_MAGIC + struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
    return head + np.ascontiguousarray(a, dtype="<f4").tobytes()


def sgt_decode(buf: bytes) -> np.ndarray:
    if len(buf) < 8:
        raise DataError(f"SGT file truncated at byte {len(buf)} (header needs 8 bytes)")
    if buf[:4] != SGT_MAGIC:
        raise DataError(f"bad SGT magic {buf[:4]!r} at byte 0")
    (ndim,) = struct.unpack("<I", buf[4:8])
    if ndim > 4:
        raise DataError(f"SGT ndim {ndim} > 4 at byte 4")
    end = 8 + 4 * ndim
    if len(buf) < end:
        raise DataError(f"SGT file truncated at byte {len(buf)} inside the dims block (ends at {end})")
    dims = struct.unpack(f"<{ndim}I", buf[8:end])
    need = 4 * int(np.prod(dims))
    if len(buf) - end != need:
        raise DataError(f"SGT payload at byte {end} has {len(buf) - end} bytes, expected {need}")
    return np.frombuffer(buf, dtype="<f4", offset=end).reshape(dims).astype(np.float32)


def sgt_write(t, path) -> None:
    Path(path).write_bytes(sgt_encode(t))


def sgt_read(path) -> np.ndarray:
    return sgt_decode(Path(path).read_bytes())


# --------------------------------------------------------------------------
# preprocessing
# --------------------------------------------------------------------------

def _center_coords(n_old: int, n_new: int) -> np.ndarray:
    # pixel-centre alignment between grids covering the same physical extent
    return np.clip((np.arange(n_new) + 0.5) * n_old / n_new - 0.5, 0, n_old - 1)


def resample_to_spacing(image, labels, spacing, target=TARGET_SPACING):
    """Resample an in-plane slice to ``target`` mm spacing.

    The image is interpolated bilinearly and labels by nearest neighbour.
    New extents are round(old * spacing / target).
    """
    sy, sx = spacing
    if sy <= 0 or sx <= 0:
        raise DataError(f"spacing must be positive, got {spacing}")
    h, w = image.shape
    nh, nw = int(round(h * sy / target[0])), int(round(w * sx / target[1]))
    if (nh, nw) == (h, w):
        return image.copy(), labels.copy(), tuple(target)
    yy, xx = np.meshgrid(_center_coords(h, nh), _center_coords(w, nw), indexing="ij")
    img = ndimage.map_coordinates(image.astype(np.float64), [yy, xx], order=1, mode="nearest")
    lab = labels[np.rint(yy).astype(int), np.rint(xx).astype(int)]
    return img.astype(image.dtype), lab, tuple(target)


def center_crop_pad(image, labels, out=(256, 256)):
    """Subtract the slice minimum, then centre-crop or zero-pad to ``out``."""
    img = image - image.min()
    oh, ow = out
    res_i = np.zeros((oh, ow), dtype=img.dtype)
    res_l = np.zeros((oh, ow), dtype=labels.dtype)
    h, w = img.shape

    def span(n, o):
        if n >= o:
            s = (n - o) // 2
            return slice(s, s + o), slice(0, o)
        s = (o - n) // 2
        return slice(0, n), slice(s, s + n)

    src_y, dst_y = span(h, oh)
    src_x, dst_x = span(w, ow)
    res_i[dst_y, dst_x] = img[src_y, src_x]
    res_l[dst_y, dst_x] = labels[src_y, src_x]
    return res_i, res_l


def zscore(image: np.ndarray) -> np.ndarray:
    img = image.astype(np.float64)
    std = img.std()
    if std <= 0:
        warnings.warn("zscore: constant slice, returning zeros", RuntimeWarning, stacklevel=2)
        return np.zeros(image.shape, dtype=np.float32)
    return ((img - img.mean()) / std).astype(np.float32)


def mask_to_boundary(labels: np.ndarray, dilate: bool = False) -> np.ndarray:
    """Binary class-boundary map.

    A pixel is a boundary pixel when it is not background and one of its
    4-neighbours carries a different label.  ``dilate`` grows the map by
    its 4-neighbourhood.
    """
    lab = np.asarray(labels)
    diff = np.zeros(lab.shape, dtype=bool)
    diff[1:, :] |= lab[1:, :] != lab[:-1, :]
    diff[:-1, :] |= lab[:-1, :] != lab[1:, :]
    diff[:, 1:] |= lab[:, 1:] != lab[:, :-1]
    diff[:, :-1] |= lab[:, :-1] != lab[:, 1:]
    out = diff & (lab != 0)
    if dilate:
        out = ndimage.binary_dilation(out, structure=ndimage.generate_binary_structure(2, 1))
    return out.astype(np.float32)


def canny(image: np.ndarray, sigma: float = 1.0, lo: float = 0.1, hi: float = 0.2) -> np.ndarray:
    """Canny edges with thresholds given as fractions of the peak gradient."""
    img = np.asarray(image, dtype=np.float64)
    smooth = ndimage.gaussian_filter(img, sigma, mode="nearest")
    gy = ndimage.sobel(smooth, axis=0, mode="nearest")
    gx = ndimage.sobel(smooth, axis=1, mode="nearest")
    mag = np.hypot(gx, gy)
    peak = mag.max()
    if peak <= 1e-9 * max(1.0, np.abs(img).max()):
        return np.zeros(img.shape, dtype=np.float32)
    thin = _kernels.nms(mag, gx, gy)
    strong = thin >= hi * peak
    weak = thin >= lo * peak
    comp, n = ndimage.label(weak, structure=np.ones((3, 3), dtype=bool))
    keep = np.zeros(n + 1, dtype=bool)
    keep[np.unique(comp[strong])] = True
    keep[0] = False
    return keep[comp].astype(np.float32)


# --------------------------------------------------------------------------
# samples and augmentation
# --------------------------------------------------------------------------

@dataclass
class SegSample:
    image: np.ndarray  # (H, W) float32; z-scored once prepared
    labels: np.ndarray  # (H, W) int64
    boundary: np.ndarray  # (H, W) {0,1}
    canny: np.ndarray  # (H, W) {0,1}
    spacing: tuple[float, float]
    id: str


@dataclass(frozen=True)
class AugmentParams:
    angle: float = 0.0
    hflip: bool = False
    vflip: bool = False
    displacement: np.ndarray | None = None  # (2, H, W) in pixels
    gamma: float = 1.0


def draw_augment_params(rng: np.random.Generator, shape) -> AugmentParams:
    angle = rng.uniform(-np.pi, np.pi)
    hflip = bool(rng.random() < 0.5)
    vflip = bool(rng.random() < 0.5)
    field = rng.uniform(-1, 1, size=(2, *shape))
    field = np.stack([ndimage.gaussian_filter(f, ELASTIC_SIGMA, mode="constant") for f in field])
    peak = np.abs(field).max()
    disp = field * (ELASTIC_ALPHA / peak) if peak > 0 else field
    gamma = rng.uniform(*GAMMA_RANGE)
    return AugmentParams(angle, hflip, vflip, disp, gamma)


def _source_coords(shape, p: AugmentParams) -> tuple[np.ndarray, np.ndarray]:
    """Input coordinates sampled by each output pixel for rotate -> flip -> elastic."""
    h, w = shape
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    if p.displacement is not None:
        yy = yy + p.displacement[0]
        xx = xx + p.displacement[1]
    if p.vflip:
        yy = (h - 1) - yy
    if p.hflip:
        xx = (w - 1) - xx
    if p.angle:
        cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
        c, s = np.cos(p.angle), np.sin(p.angle)
        dy, dx = yy - cy, xx - cx
        yy = cy + c * dy - s * dx
        xx = cx + s * dy + c * dx
        # trig round-off would push exact grid points just outside the image
        yy, xx = _snap(yy), _snap(xx)
    return yy, xx


def _snap(a: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    r = np.rint(a)
    return np.where(np.abs(a - r) < tol, r, a)


def _warp(image, labels, p: AugmentParams):
    yy, xx = _source_coords(image.shape, p)
    img = ndimage.map_coordinates(image.astype(np.float64), [yy, xx], order=1, mode="constant", cval=0.0)
    lab = ndimage.map_coordinates(labels, [yy, xx], order=0, mode="constant", cval=0)
    return img.astype(np.float32), lab.astype(labels.dtype)


def finish_sample(image, labels, spacing, sid: str) -> SegSample:
    """Derive boundary and Canny maps from the (augmented) slice and z-score it."""
    return SegSample(
        image=zscore(image),
        labels=labels.astype(np.int64),
        boundary=mask_to_boundary(labels),
        canny=canny(image),
        spacing=spacing,
        id=sid,
    )


def apply_augment(image, labels, p: AugmentParams):
    """Geometric warp, then gamma on [0, 1]-rescaled intensities."""
    img, lab = _warp(image, labels, p)
    lo, hi = img.min(), img.max()
    if hi > lo:
        img = ((img - lo) / (hi - lo)) ** p.gamma
    return img.astype(np.float32), lab


def augment(sample: SegSample, rng: np.random.Generator) -> SegSample:
    """Randomly augment a sample whose ``image`` still holds raw intensities.

    Returns a finished sample: boundary and Canny maps are re-derived from
    the transformed slice, which is then z-scored.
    """
    p = draw_augment_params(rng, sample.image.shape)
    img, lab = apply_augment(sample.image, sample.labels, p)
    return finish_sample(img, lab, sample.spacing, sample.id)


# --------------------------------------------------------------------------
# synthetic cardiac-like data
# --------------------------------------------------------------------------

CLASS_NAMES = ("background", "rv", "myo", "lv")


def _synth_labels(rng: np.random.Generator, size: int) -> np.ndarray:
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    cy = size / 2 + rng.uniform(-0.08, 0.08) * size
    cx = size / 2 + rng.uniform(-0.08, 0.08) * size
    r_lv = rng.uniform(0.11, 0.16) * size
    r_myo = r_lv + rng.uniform(0.065, 0.095) * size
    # crescent: a wobbly disc offset from the LV centre, minus the myocardium disc
    theta = rng.uniform(0, 2 * np.pi)
    off = r_myo * rng.uniform(0.55, 0.8)
    ry, rx = cy + off * np.sin(theta), cx + off * np.cos(theta)
    r_rv = r_myo * rng.uniform(1.05, 1.25)
    phi = np.arctan2(yy - ry, xx - rx)
    wobble = 1 + 0.12 * np.sin(2 * phi + rng.uniform(0, 2 * np.pi)) + 0.06 * np.sin(3 * phi + rng.uniform(0, 2 * np.pi))
    d_lv = np.hypot(yy - cy, xx - cx)
    d_rv = np.hypot(yy - ry, xx - rx)
    labels = np.zeros((size, size), dtype=np.int64)
    labels[(d_rv <= r_rv * wobble) & (d_lv > r_myo + 1.0)] = 1
    labels[(d_lv <= r_myo) & (d_lv > r_lv)] = 2
    labels[d_lv <= r_lv] = 3
    return labels


def _smooth_noise(rng, shape, sigma):
    f = ndimage.gaussian_filter(rng.standard_normal(shape), sigma, mode="wrap")
    return f / (f.std() + 1e-12)


def _synth_image(labels: np.ndarray, rng: np.random.Generator, family: str) -> np.ndarray:
    shape = labels.shape
    size = shape[0]
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    if family == "A":
        means = np.array([0.30, 0.62, 0.40, 0.88])
        img = means[labels] + 0.07 * _smooth_noise(rng, shape, 2.0) + 0.05 * rng.standard_normal(shape)
    elif family == "B":
        means = np.array([0.36, 0.56, 0.20, 0.76])
        img = means[labels].astype(np.float64)
        for k in range(4):
            f = rng.uniform(0.25, 0.6)
            ang = rng.uniform(0, np.pi)
            stripes = np.sin(f * (np.cos(ang) * xx + np.sin(ang) * yy) + rng.uniform(0, 2 * np.pi))
            img += np.where(labels == k, 0.08 * stripes, 0.0)
        img *= rng.gamma(8.0, 1 / 8.0, size=shape)  # multiplicative speckle
    else:
        raise DataError(f"unknown texture family {family!r}")
    # bright distractor blobs in the background, intensity close to the blood pools
    heart = ndimage.binary_dilation(labels > 0, iterations=3)
    for _ in range(rng.integers(1, 4)):
        by, bx = rng.uniform(0.1, 0.9, size=2) * size
        a, b = rng.uniform(0.04, 0.09, size=2) * size
        blob = ((yy - by) / a) ** 2 + ((xx - bx) / b) ** 2 <= 1
        blob &= ~heart
        img[blob] = means[1] * rng.uniform(0.85, 1.0) + 0.04 * rng.standard_normal(int(blob.sum()))
    img = ndimage.gaussian_filter(img, 0.6)
    return np.clip(img, 0, None).astype(np.float32) * 255.0


def synth_sample(seed: int, index: int, size: int = 64, family: str = "A") -> tuple[np.ndarray, np.ndarray]:
    """One synthetic (image, labels) pair; geometry is independent of ``family``."""
    geom = np.random.default_rng([seed, index, 0])
    tex = np.random.default_rng([seed, index, 1 if family == "A" else 2])
    labels = _synth_labels(geom, size)
    return _synth_image(labels, tex, family), labels


def split(ids, ratio: float = 0.8, seed: int = 0) -> dict[str, str]:
    """Deterministic shuffled train/val assignment."""
    ids = list(ids)
    if len(set(ids)) != len(ids):
        raise DataError("duplicate ids")
    order = np.random.default_rng(seed).permutation(len(ids))
    n_train = int(round(ratio * len(ids)))
    out = {}
    for rank, i in enumerate(order):
        out[ids[i]] = "train" if rank < n_train else "val"
    return {i: out[i] for i in ids}


@dataclass
class ManifestRow:
    id: str
    image: str
    label: str
    split: str


def write_manifest(root, rows: list[ManifestRow]) -> None:
    with open(Path(root) / "manifest.tsv", "w", newline="") as fh:
        wr = csv.writer(fh, delimiter="\t", lineterminator="\n")
        wr.writerow(MANIFEST_HEADER)
        for r in rows:
            wr.writerow([r.id, r.image, r.label, r.split])


def read_manifest(root) -> list[ManifestRow]:
    path = Path(root) / "manifest.tsv"
    if not path.exists():
        raise DataError(f"no manifest at {path}")
    with open(path, newline="") as fh:
        rd = csv.reader(fh, delimiter="\t")
        header = next(rd, None)
        if header != MANIFEST_HEADER:
            raise DataError(f"manifest header {header} != {MANIFEST_HEADER}")
        rows = [ManifestRow(*r) for r in rd if r]
    ids = [r.id for r in rows]
    if len(set(ids)) != len(ids):
        raise DataError("manifest ids are not unique")
    return rows


def dataset_checksum(root) -> str:
    root = Path(root)
    h = hashlib.sha256()
    for p in sorted([root / "manifest.tsv", *root.glob("images/*.sgt"), *root.glob("labels/*.sgt")]):
        h.update(p.relative_to(root).as_posix().encode())
        h.update(p.read_bytes())
    return h.hexdigest()


def synth_generate(out_dir, n: int, size: int = 64, k: int = 4, seed: int = 0, family: str = "A", ratio: float = 0.8) -> str:
    """Write ``n`` synthetic samples plus manifest; returns the dataset checksum."""
    if k != 4:
        raise DataError("the synthetic generator draws exactly 4 classes")
    root = Path(out_dir)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "labels").mkdir(parents=True, exist_ok=True)
    ids = [f"s{i:05d}" for i in range(n)]
    assignment = split(ids, ratio, seed)
    rows = []
    for i, sid in enumerate(ids):
        img, lab = synth_sample(seed, i, size, family)
        sgt_write(img[None], root / "images" / f"{sid}.sgt")
        sgt_write(lab.astype(np.float32), root / "labels" / f"{sid}.sgt")
        rows.append(ManifestRow(sid, f"images/{sid}.sgt", f"labels/{sid}.sgt", assignment[sid]))
    write_manifest(root, rows)
    meta = {"num_classes": k, "seed": seed, "size": size, "texture": family, "spacing": list(TARGET_SPACING), "n": n}
    (root / "dataset.json").write_text(json.dumps(meta, indent=2))
    return dataset_checksum(root)


# --------------------------------------------------------------------------
# dataset + batching
# --------------------------------------------------------------------------

def dataset_info(root) -> dict:
    p = Path(root) / "dataset.json"
    if not p.exists():
        raise DataError(f"no dataset.json in {root}")
    return json.loads(p.read_text())


class SegDataset:
    """Samples of one split, preprocessed once and cached before augmentation."""

    def __init__(self, root, split_name: str | None = "train", size: int | None = None, ids=None):
        self.root = Path(root)
        info = dataset_info(root)
        self.num_classes = int(info["num_classes"])
        self.spacing = tuple(info.get("spacing", TARGET_SPACING))
        size = size or int(info["size"])
        rows = read_manifest(root)
        if ids is not None:
            known = {r.id: r for r in rows}
            missing = [i for i in ids if i not in known]
            if missing:
                raise DataError(f"unknown sample ids: {missing}")
            rows = [known[i] for i in ids]
        elif split_name is not None:
            rows = [r for r in rows if r.split == split_name]
        self.ids = [r.id for r in rows]
        self.raw: list[tuple[np.ndarray, np.ndarray]] = []
        for r in rows:
            img_p, lab_p = self.root / r.image, self.root / r.label
            if not img_p.exists() or not lab_p.exists():
                raise DataError(f"missing files for sample {r.id}")
            img = sgt_read(img_p)
            img = img.reshape(img.shape[-2:])
            lab = np.rint(sgt_read(lab_p)).astype(np.int64).reshape(img.shape)
            if lab.min(initial=0) < 0 or lab.max(initial=0) >= self.num_classes:
                raise DataError(f"sample {r.id}: labels outside [0, {self.num_classes})")
            img, lab, _ = resample_to_spacing(img, lab, self.spacing)
            img, lab = center_crop_pad(img, lab, (size, size))
            self.raw.append((img.astype(np.float32), lab))
        self._plain: dict[int, SegSample] = {}

    def __len__(self) -> int:
        return len(self.ids)

    def sample(self, i: int, rng: np.random.Generator | None = None) -> SegSample:
        img, lab = self.raw[i]
        if rng is None:
            if i not in self._plain:
                self._plain[i] = finish_sample(img, lab, TARGET_SPACING, self.ids[i])
            return self._plain[i]
        p = draw_augment_params(rng, img.shape)
        aimg, alab = apply_augment(img, lab, p)
        return finish_sample(aimg, alab, TARGET_SPACING, self.ids[i])


@dataclass
class Batch:
    image: np.ndarray  # (B,1,H,W)
    canny: np.ndarray  # (B,1,H,W)
    labels: np.ndarray  # (B,H,W)
    boundary: np.ndarray  # (B,1,H,W)
    ids: list[str]


def collate(samples: list[SegSample]) -> Batch:
    return Batch(
        image=np.stack([s.image for s in samples])[:, None].astype(np.float32),
        canny=np.stack([s.canny for s in samples])[:, None].astype(np.float32),
        labels=np.stack([s.labels for s in samples]),
        boundary=np.stack([s.boundary for s in samples])[:, None].astype(np.float32),
        ids=[s.id for s in samples],
    )


def iterate_batches(ds: SegDataset, batch_size: int, epoch: int = 0, seed: int = 0, shuffle: bool = False,
                    augment: bool = False, drop_singleton: bool = True):
    """Yield :class:`Batch` objects; each sample's randomness is keyed on (seed, epoch, index)."""
    order = np.arange(len(ds))
    if shuffle:
        order = np.random.default_rng([seed, epoch, 7919]).permutation(len(ds))
    for start in range(0, len(order), batch_size):
        idx = order[start : start + batch_size]
        if drop_singleton and len(idx) == 1 and len(order) > 1:
            continue
        samples = [ds.sample(int(i), np.random.default_rng([seed, epoch, int(i)]) if augment else None) for i in idx]
        yield collate(samples)
