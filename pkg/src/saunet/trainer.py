"""RAdam optimisation loop with per-epoch exponential learning-rate decay."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import Batch, SegDataset, iterate_batches
from .layers import read_checkpoint
from .model import SAUNet, load_model
from .objectives import (
    LossWeights,
    MetricAccumulator,
    MetricReport,
    cross_entropy,
    dice_loss,
    edge_bce,
    one_hot,
    total_loss,
)
from .tensor import Tensor


class NumericError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 8
    lr0: float = 5e-4
    gamma: float = 0.99
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    loss_weights: list[float] = field(default_factory=lambda: [1.0, 1.0, 1.0])
    seed: int = 0
    augment: bool = True
    checkpoint_every: int = 0  # 0: only best.ckpt and last.ckpt

    def validate(self) -> None:
        if self.epochs <= 0 or self.lr0 < 0 or self.weight_decay < 0:
            raise ValueError("epochs must be positive and lr0/weight_decay nonnegative")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 for batch normalization")
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must lie in (0, 1]")
        LossWeights(*self.loss_weights)

    @property
    def weights(self) -> LossWeights:
        return LossWeights(*self.loss_weights)


def lr_schedule(lr0: float, gamma: float, epoch: int) -> float:
    if not 0 < gamma <= 1:
        raise ValueError("gamma must lie in (0, 1]")
    return lr0 * gamma**epoch


class RAdam:
    """Rectified Adam with decoupled weight decay.

    While the variance estimate is unreliable (rho_t <= 4) the step is plain
    bias-corrected momentum; afterwards it is the adaptive step scaled by
    the rectification term r_t.
    """

    def __init__(self, params: dict[str, Tensor], beta1=0.9, beta2=0.999, weight_decay=0.0, eps=1e-8):
        self.params = params
        self.beta1, self.beta2, self.weight_decay, self.eps = beta1, beta2, weight_decay, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.rho_inf = 2.0 / (1.0 - beta2) - 1.0

    def step_coefficients(self, t: int) -> tuple[bool, float]:
        """(adaptive?, rectification r_t) for step ``t``."""
        b2t = self.beta2**t
        rho_t = self.rho_inf - 2.0 * t * b2t / (1.0 - b2t)
        if rho_t > 4.0:
            ri = self.rho_inf
            r = math.sqrt((rho_t - 4) * (rho_t - 2) * ri / ((ri - 4) * (ri - 2) * rho_t))
            return True, r
        return False, 1.0

    def step(self, lr: float) -> None:
        for name, p in self.params.items():
            if p.grad is not None and not np.isfinite(p.grad).all():
                raise NumericError(f"non-finite gradient for parameter {name}")
        self.t += 1
        t = self.t
        b1, b2 = self.beta1, self.beta2
        adaptive, r = self.step_coefficients(t)
        bc1 = 1.0 - b1**t
        bc2 = 1.0 - b2**t
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            dt = p.data.dtype.type
            data = p.data
            if self.weight_decay:
                data = data - dt(lr * self.weight_decay) * data
            m = self.m[name] = dt(b1) * self.m[name] + dt(1 - b1) * g
            v = self.v[name] = dt(b2) * self.v[name] + dt(1 - b2) * (g * g)
            m_hat = m / dt(bc1)
            if adaptive:
                denom = np.sqrt(v / dt(bc2)) + dt(self.eps)
                data = data - dt(lr * r) * m_hat / denom
            else:
                data = data - dt(lr) * m_hat
            p.data = data.astype(p.data.dtype, copy=False)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {"optim/step": np.array([self.t], dtype=np.float32)}
        for k in self.params:
            out[f"optim/m/{k}"] = self.m[k]
            out[f"optim/v/{k}"] = self.v[k]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        if "optim/step" not in arrays:
            raise ValueError("checkpoint has no optimizer state")
        self.t = int(arrays["optim/step"][0])
        for k, p in self.params.items():
            self.m[k] = arrays[f"optim/m/{k}"].astype(p.data.dtype)
            self.v[k] = arrays[f"optim/v/{k}"].astype(p.data.dtype)


def radam_step(opt: RAdam, lr_t: float) -> None:
    opt.step(lr_t)


def batch_losses(model: SAUNet, batch: Batch, weights: LossWeights):
    """Forward one batch; returns (total, ce, dice, edge or None, output)."""
    dtype = model.registry.dtype
    x = Tensor(batch.image, dtype=dtype)
    canny = Tensor(batch.canny, dtype=dtype) if model.config.shape_stream else None
    out = model(x, canny)
    y = one_hot(batch.labels, model.config.num_classes, dtype)
    ce = cross_entropy(out.seg_logits, y)
    dl = dice_loss(T.softmax_channels(out.seg_logits), y)
    edge = None
    if out.edge_logits is not None:
        edge = edge_bce(out.edge_logits, batch.boundary.astype(dtype))
    return total_loss(ce, dl, edge, weights), ce, dl, edge, out


@dataclass
class EpochStats:
    epoch: int
    lr: float
    ce: float
    dice_loss: float
    edge: float
    total: float
    batch_totals: list[float]
    batch_parts: list[tuple[float, float, float]]


class Trainer:
    def __init__(self, model: SAUNet, train_ds: SegDataset, cfg: TrainConfig, val_ds: SegDataset | None = None):
        cfg.validate()
        self.model, self.train_ds, self.val_ds, self.cfg = model, train_ds, val_ds, cfg
        weights = cfg.weights
        if not model.config.shape_stream:
            weights = LossWeights(weights.ce, weights.dice, 0.0)
        self.weights = weights
        self.opt = RAdam(model.parameters(), cfg.beta1, cfg.beta2, cfg.weight_decay)
        self.epoch = 0
        self.best_dice = -1.0
        self.best_epoch = -1
        self.history: list[dict] = []

    def train_epoch(self) -> EpochStats:
        model, cfg = self.model, self.cfg
        model.train()
        lr = lr_schedule(cfg.lr0, cfg.gamma, self.epoch)
        params = model.parameters()
        sums = np.zeros(3)
        totals, parts = [], []
        nb = 0
        for batch in iterate_batches(self.train_ds, cfg.batch_size, self.epoch, cfg.seed, shuffle=True, augment=cfg.augment):
            model.registry.zero_grad()
            tape = T.Tape()
            with T.recording(tape):
                loss, ce, dl, edge, _ = batch_losses(model, batch, self.weights)
            if not np.isfinite(loss.data).all():
                raise NumericError(f"non-finite loss at epoch {self.epoch}, batch ids {batch.ids}")
            tape.backward(loss, leaves=params.values())
            orphans = [k for k, p in params.items() if id(p) not in tape.reached]
            if orphans:
                raise RuntimeError(f"parameters not reached by backward: {orphans[:5]}")
            self.opt.step(lr)
            e = edge.item() if edge is not None else 0.0
            sums += (ce.item(), dl.item(), e)
            totals.append(loss.item())
            parts.append((ce.item(), dl.item(), e))
            nb += 1
        means = sums / max(nb, 1)
        stats = EpochStats(self.epoch, lr, *means, float(np.mean(totals)) if totals else 0.0, totals, parts)
        self.epoch += 1
        return stats

    def fit(self, out_dir=None, log=None, on_epoch=None) -> list[dict]:
        out = Path(out_dir) if out_dir else None
        if out:
            out.mkdir(parents=True, exist_ok=True)
        while self.epoch < self.cfg.epochs:
            stats = self.train_epoch()
            rec = {"epoch": stats.epoch, "lr": stats.lr, "ce": stats.ce, "dice_loss": stats.dice_loss, "edge": stats.edge}
            report = validate(self.model, self.val_ds) if self.val_ds is not None and len(self.val_ds) else None
            rec["val_dice"] = report.dice if report else []
            self.history.append(rec)
            if log is not None:
                log.write(json.dumps(rec) + "\n")
                log.flush()
            if report is not None and report.mean_dice > self.best_dice:
                self.best_dice, self.best_epoch = report.mean_dice, stats.epoch
                if out:
                    self.save(out / "best.ckpt")
            if out and self.cfg.checkpoint_every and self.epoch % self.cfg.checkpoint_every == 0:
                self.save(out / f"epoch{self.epoch:03d}.ckpt")
            if on_epoch:
                on_epoch(stats, report)
        if out:
            self.save(out / "last.ckpt")
            if report is None or self.best_epoch < 0:
                self.save(out / "best.ckpt")
        return self.history

    def save(self, path) -> None:
        extra = self.opt.state_arrays()
        extra["trainer/epoch"] = np.array([self.epoch], dtype=np.float32)
        extra["trainer/best"] = np.array([self.best_dice, self.best_epoch], dtype=np.float32)
        self.model.save(path, extra=extra, meta={"train": asdict(self.cfg)})

    def load(self, path) -> None:
        arrays = read_checkpoint(path)
        params = {k: v for k, v in arrays.items() if k in self.model.registry}
        self.model.registry.load_state_dict(params)
        self.opt.load_state_arrays(arrays)
        self.epoch = int(arrays["trainer/epoch"][0])
        self.best_dice, best_epoch = arrays["trainer/best"]
        self.best_dice, self.best_epoch = float(self.best_dice), int(best_epoch)


def predict(model: SAUNet, batch: Batch) -> tuple[np.ndarray, object]:
    dtype = model.registry.dtype
    with T.no_grad():
        canny = Tensor(batch.canny, dtype=dtype) if model.config.shape_stream else None
        out = model(Tensor(batch.image, dtype=dtype), canny)
    return out.seg_logits.data.argmax(axis=1), out


def validate(model: SAUNet, ds: SegDataset, batch_size: int = 16, tolerance: int = 1, per_sample=None) -> MetricReport:
    """Eval-mode metrics on ``ds``; optional ``per_sample`` list collects (id, dice, iou)."""
    was_training = model.training
    model.eval()
    acc = MetricAccumulator(model.config.num_classes, tolerance)
    try:
        for batch in iterate_batches(ds, batch_size, drop_singleton=False):
            pred, _ = predict(model, batch)
            for sid, p, y in zip(batch.ids, pred, batch.labels):
                acc.add(sid, p, y)
    finally:
        if was_training:
            model.train()
    if per_sample is not None:
        per_sample.extend(acc.rows)
    return acc.report()


def resume(path, train_ds: SegDataset, val_ds: SegDataset | None = None) -> Trainer:
    model, _, meta = load_model(path)
    trainer = Trainer(model, train_ds, TrainConfig(**meta["train"]), val_ds)
    trainer.load(path)
    return trainer
