"""Finite-difference verification of every differentiable op, block, and loss."""
from __future__ import annotations

import contextlib
import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .layers import (
    BatchNorm2d,
    DenseBlock,
    DualAttentionDecoder,
    GatedConvLayer,
    ParamRegistry,
    ResidualBlock,
    SpatialAttentionPath,
    SqueezeExcitation,
    TransitionBlock,
    init_params,
)
from .model import build, preset
from .objectives import LossWeights, cross_entropy, dice_loss, edge_bce, one_hot, total_loss
from .tensor import Tensor

EPS = 1e-5
TOL = 1e-4
ZERO_GRAD_FLOOR = 1e-6  # per-tensor scale floor, relative to the largest gradient in the same check


@dataclass
class GradReport:
    name: str
    max_rel_err: float
    tol: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_rel_err) and self.max_rel_err < self.tol)

    def line(self) -> str:
        return f"{self.name} {self.max_rel_err:.3e} {'pass' if self.passed else 'fail'}"


def rel_err(a: np.ndarray, n: np.ndarray, floor: float = 1e-12) -> float:
    """||a - n||_inf / max(||a||_inf, ||n||_inf, floor)."""
    a, n = np.asarray(a, dtype=np.float64), np.asarray(n, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0), floor)
    return float(np.abs(a - n).max(initial=0.0) / scale)


def _eval(f: Callable[[], Tensor]) -> float:
    with T.no_grad():
        return f().item()


def grad_check(f: Callable[[], Tensor], xs: Tensor | Sequence[Tensor], eps: float = EPS, tol: float = TOL,
               name: str = "f") -> GradReport:
    """Compare autodiff gradients of scalar ``f()`` w.r.t. each of ``xs`` with central differences.

    ``f`` closes over ``xs`` and is re-evaluated after in-place perturbation
    of their data.  All tensors must be float64.
    """
    xs = [xs] if isinstance(xs, Tensor) else list(xs)
    for x in xs:
        if x.dtype != np.float64:
            raise TypeError("grad_check needs float64 tensors")
        x.requires_grad = True
        x.grad = None
    tape = T.Tape()
    with T.recording(tape):
        out = f()
    tape.backward(out, leaves=xs)
    nums = []
    for x in xs:
        num = np.zeros_like(x.data)
        flat, nflat = x.data.reshape(-1), num.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = _eval(f)
            flat[i] = orig - eps
            fm = _eval(f)
            flat[i] = orig
            nflat[i] = (fp - fm) / (2 * eps)
        nums.append(num)
    # a tensor whose true gradient is identically zero (e.g. a shift cancelled by a later batchnorm)
    # has no meaningful relative error, so each tensor's scale is floored relative to the whole check
    overall = max(max(np.abs(x.grad).max(initial=0.0), np.abs(n).max(initial=0.0)) for x, n in zip(xs, nums))
    floor = max(ZERO_GRAD_FLOOR * overall, 1e-12)
    worst = max(rel_err(x.grad, n, floor) for x, n in zip(xs, nums))
    return GradReport(name, worst, tol)


def directional_check(f: Callable[[], Tensor], params: Sequence[Tensor], n_dirs: int = 20, eps: float = EPS,
                      tol: float = TOL, seed: int = 0, name: str = "f") -> GradReport:
    """Compare grad . d with (f(p + eps d) - f(p - eps d)) / 2 eps over random unit directions d."""
    params = list(params)
    for p in params:
        p.grad = None
    tape = T.Tape()
    with T.recording(tape):
        out = f()
    tape.backward(out, leaves=params)
    grads = [p.grad.copy() for p in params]
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_dirs):
        dirs = [rng.standard_normal(p.shape) for p in params]
        norm = np.sqrt(sum(float((d * d).sum()) for d in dirs))
        dirs = [d / norm for d in dirs]
        orig = [p.data.copy() for p in params]
        for p, o, d in zip(params, orig, dirs):
            p.data = o + eps * d
        fp = _eval(f)
        for p, o, d in zip(params, orig, dirs):
            p.data = o - eps * d
        fm = _eval(f)
        for p, o in zip(params, orig):
            p.data = o
        analytic = sum(float((g * d).sum()) for g, d in zip(grads, dirs))
        worst = max(worst, rel_err(np.array([analytic]), np.array([(fp - fm) / (2 * eps)])))
    return GradReport(name, worst, tol)


# --------------------------------------------------------------------------
# fault injection (negative control)
# --------------------------------------------------------------------------

@contextlib.contextmanager
def inject_fault(op: str, factor: float = 1.5):
    """Scale every input gradient produced by ``op``'s backward rule by ``factor``."""
    if op not in T.DIFFERENTIABLE_OPS:
        raise ValueError(f"unknown op {op!r}")
    original = T._result

    def faulty(name, data, inputs, bwd):
        if name == op:
            inner = bwd

            def bwd(g):  # noqa: F811 - deliberately shadowed
                return tuple(None if gi is None else gi * factor for gi in inner(g))

        return original(name, data, inputs, bwd)

    T._result = faulty
    try:
        yield
    finally:
        T._result = original


# --------------------------------------------------------------------------
# suite
# --------------------------------------------------------------------------

def _rand(rng, *shape, lo=-1.0, hi=1.0, away=0.0):
    """Uniform samples that keep at least ``away`` from zero (to avoid kinks)."""
    x = rng.uniform(lo, hi, shape)
    if away:
        x = np.where(np.abs(x) < away, np.sign(x + 1e-300) * away + x, x)
    return Tensor(x, dtype=np.float64)


def _proj(out: Tensor, rng_seed: int = 99) -> Tensor:
    """Scalarize an op output with a fixed random weighting so every element matters."""
    w = np.random.default_rng(rng_seed).standard_normal(out.shape)
    return T.sum(T.mul(out, Tensor(w, dtype=out.dtype)))


def _op_cases(rng) -> list[tuple[str, Callable[[], Tensor], list[Tensor]]]:
    cases = []

    def add(name, fn, xs):
        cases.append((name, fn, xs))

    a, b = _rand(rng, 2, 3, 4, 4), _rand(rng, 2, 3, 4, 4)
    bb = _rand(rng, 1, 3, 1, 1)
    add("add", lambda: _proj(T.add(a, bb)), [a, bb])
    a2, b2 = _rand(rng, 2, 3, 4, 4), _rand(rng, 2, 1, 4, 4)
    add("sub", lambda: _proj(T.sub(a2, b2)), [a2, b2])
    add("mul", lambda: _proj(T.mul(a, b)), [a, b])
    num, den = _rand(rng, 2, 3, 3, 3), _rand(rng, 2, 3, 3, 3, lo=0.5, hi=2.0)
    add("div", lambda: _proj(T.div(num, den)), [num, den])
    s = _rand(rng, 2, 3, 3, 3)
    add("scale", lambda: _proj(T.scale(s, -1.7)), [s])
    c = _rand(rng, 2, 3, 3, 3, lo=-2, hi=2)
    c.data[np.abs(np.abs(c.data) - 1) < 0.05] += 0.1  # keep clear of the clamp edges
    add("clamp", lambda: _proj(T.clamp(c, -1.0, 1.0)), [c])
    pos = _rand(rng, 2, 3, 3, 3, lo=0.2, hi=3.0)
    add("log", lambda: _proj(T.log(pos)), [pos])
    r = _rand(rng, 2, 3, 4, 4, away=0.05)
    add("relu", lambda: _proj(T.relu(r)), [r])
    sg = _rand(rng, 2, 3, 4, 4, lo=-4, hi=4)
    add("sigmoid", lambda: _proj(T.sigmoid(sg)), [sg])
    sm = _rand(rng, 2, 4, 3, 3, lo=-3, hi=3)
    add("softmax_channels", lambda: _proj(T.softmax_channels(sm)), [sm])
    rs = _rand(rng, 2, 3, 4)
    add("reshape", lambda: _proj(T.reshape(rs, (6, 4))), [rs])
    su = _rand(rng, 2, 3, 4, 4)
    add("sum", lambda: _proj(T.sum(su, axis=(0, 2, 3))), [su])
    c1, c2 = _rand(rng, 2, 2, 4, 4), _rand(rng, 2, 3, 4, 4)
    add("concat_channels", lambda: _proj(T.concat_channels([c1, c2])), [c1, c2])
    e1 = _rand(rng, 2, 1, 4, 4)
    add("expand_channels", lambda: _proj(T.expand_channels(e1, 3)), [e1])
    cx, cw, cb = _rand(rng, 2, 2, 6, 6), _rand(rng, 3, 2, 3, 3), _rand(rng, 3)
    add("conv2d", lambda: _proj(T.conv2d(cx, cw, cb, stride=1, pad=1)), [cx, cw, cb])
    sx, sw = _rand(rng, 1, 2, 7, 7), _rand(rng, 2, 2, 3, 3)
    add("conv2d_stride2", lambda: _proj(T.conv2d(sx, sw, None, stride=2, pad=0)), [sx, sw])
    tx, tw, tb = _rand(rng, 2, 3, 3, 3), _rand(rng, 3, 2, 2, 2), _rand(rng, 2)
    add("transpose_conv2d", lambda: _proj(T.transpose_conv2d(tx, tw, tb, stride=2)), [tx, tw, tb])
    tx1, tw1 = _rand(rng, 1, 2, 3, 3), _rand(rng, 2, 2, 3, 3)
    add("transpose_conv2d_stride1", lambda: _proj(T.transpose_conv2d(tx1, tw1, None, stride=1)), [tx1, tw1])
    # distinct, well separated values so the argmax is stable under eps
    mp = Tensor(rng.permutation(2 * 2 * 5 * 5).reshape(2, 2, 5, 5) * 0.01, dtype=np.float64)
    add("maxpool2d", lambda: _proj(T.maxpool2d(mp)), [mp])
    ap = _rand(rng, 2, 2, 5, 5)
    add("avgpool2d", lambda: _proj(T.avgpool2d(ap)), [ap])
    gp = _rand(rng, 2, 3, 4, 5)
    add("global_avg_pool", lambda: _proj(T.global_avg_pool(gp)), [gp])
    up = _rand(rng, 2, 2, 3, 4)
    add("bilinear_upsample", lambda: _proj(T.bilinear_upsample(up, 7, 9)), [up])
    bx, bg, bbeta = _rand(rng, 3, 2, 3, 3), _rand(rng, 2, lo=0.5, hi=1.5), _rand(rng, 2)

    def bn_train():
        rs_ = T.RunningStats(Tensor(np.zeros(2)), Tensor(np.ones(2)), Tensor(np.zeros(1)))
        return _proj(T.batchnorm2d(bx, bg, bbeta, rs_, training=True))

    add("batchnorm2d", bn_train, [bx, bg, bbeta])
    ex = _rand(rng, 2, 2, 3, 3)
    eval_stats = T.RunningStats(Tensor(np.array([0.1, -0.2])), Tensor(np.array([0.8, 1.3])), Tensor(np.ones(1)))
    add("batchnorm2d_eval", lambda: _proj(T.batchnorm2d(ex, bg, bbeta, eval_stats, training=False)), [ex, bg, bbeta])
    lx, lw, lb = _rand(rng, 3, 4), _rand(rng, 2, 4), _rand(rng, 2)
    add("linear", lambda: _proj(T.linear(lx, lw, lb)), [lx, lw, lb])
    return cases


def _block_cases(rng) -> list[tuple[str, Callable[[], Tensor], list[Tensor]]]:
    reg = ParamRegistry(np.float64)
    dense = DenseBlock(reg, "dense", 2, 2, 2)
    trans = TransitionBlock(reg, "trans", 4)
    res = ResidualBlock(reg, "res", 2)
    se = SqueezeExcitation(reg, "se", 4, 2)
    gate = GatedConvLayer(reg, "gate", 2, 3)
    spatial = SpatialAttentionPath(reg, "spatial", 4)
    dec = DualAttentionDecoder(reg, "dec", 2, 3, 4, 2)
    bn = BatchNorm2d(reg, "bn", 2)
    init_params(reg, "he_normal", seed=3)
    reg.train()

    def params(prefix):
        return [t for k, t in reg.trainable().items() if k.startswith(prefix + ".")]

    cases = []
    x = _rand(rng, 2, 2, 4, 4)
    cases.append(("block.dense", lambda: _proj(dense(x)), [x, *params("dense")]))
    xt = _rand(rng, 2, 4, 4, 4)
    cases.append(("block.transition", lambda: _proj(trans(xt)), [xt, *params("trans")]))
    xr = _rand(rng, 2, 2, 4, 4)
    cases.append(("block.residual", lambda: _proj(res(xr)), [xr, *params("res")]))
    xs = _rand(rng, 2, 4, 3, 3)
    cases.append(("block.squeeze_excitation", lambda: _proj(se(xs)[0]), [xs, *params("se")]))
    s, t = _rand(rng, 2, 2, 4, 4), _rand(rng, 2, 3, 2, 2)
    cases.append(("block.gated_conv", lambda: _proj(gate(s, t)[0]), [s, t, *params("gate")]))
    xp = _rand(rng, 2, 4, 4, 4)
    cases.append(("block.spatial_attention", lambda: _proj(spatial(xp)[0]), [xp, *params("spatial")]))
    skip, below = _rand(rng, 2, 2, 4, 4), _rand(rng, 2, 3, 2, 2)
    cases.append(("block.dual_attention_decoder", lambda: _proj(dec(skip, below)[0]), [skip, below, *params("dec")]))
    xb = _rand(rng, 2, 2, 3, 3)
    cases.append(("block.batchnorm", lambda: _proj(bn(xb)), [xb, *params("bn")]))
    return cases


def _loss_cases(rng) -> list[tuple[str, Callable[[], Tensor], list[Tensor]]]:
    labels = rng.integers(0, 3, (2, 4, 4))
    y = one_hot(labels, 3, np.float64)
    logits = _rand(rng, 2, 3, 4, 4, lo=-2, hi=2)
    edges = _rand(rng, 2, 1, 4, 4, lo=-2, hi=2)
    bnd = (rng.random((2, 1, 4, 4)) < 0.3).astype(np.float64)
    w = LossWeights(0.7, 1.3, 0.5)

    def total():
        return total_loss(cross_entropy(logits, y), dice_loss(T.softmax_channels(logits), y), edge_bce(edges, bnd), w)

    return [
        ("loss.cross_entropy", lambda: cross_entropy(logits, y), [logits]),
        ("loss.dice", lambda: dice_loss(T.softmax_channels(logits), y), [logits]),
        ("loss.edge_bce", lambda: edge_bce(edges, bnd), [edges]),
        ("loss.total", total, [logits, edges]),
    ]


def end_to_end_case(seed: int = 0, size: int = 16, n_dirs: int = 20) -> GradReport:
    """Total loss of an f64 tiny model vs finite differences along random parameter directions."""
    rng = np.random.default_rng(seed)
    model = build(preset("tiny"), seed=seed, dtype=np.float64).train()
    x = Tensor(rng.standard_normal((2, 1, size, size)), dtype=np.float64)
    canny = Tensor((rng.random((2, 1, size, size)) < 0.2).astype(np.float64))
    labels = rng.integers(0, 4, (2, size, size))
    y = one_hot(labels, 4, np.float64)
    bnd = (rng.random((2, 1, size, size)) < 0.3).astype(np.float64)
    w = LossWeights()

    def loss():
        out = model(x, canny)
        return total_loss(cross_entropy(out.seg_logits, y), dice_loss(T.softmax_channels(out.seg_logits), y),
                          edge_bce(out.edge_logits, bnd), w)

    return directional_check(loss, list(model.parameters().values()), n_dirs=n_dirs, seed=seed + 1,
                             name="model.end_to_end")


def run_suite(fault: str | None = None, seed: int = 0, end_to_end: bool = True) -> list[GradReport]:
    """Run every check; with ``fault`` set, that op's backward rule is corrupted."""
    ctx = inject_fault(fault) if fault else contextlib.nullcontext()
    reports = []
    with ctx:
        rng = np.random.default_rng(seed)
        for name, fn, xs in _op_cases(rng) + _block_cases(rng) + _loss_cases(rng):
            reports.append(grad_check(fn, xs, name=name))
        if end_to_end:
            reports.append(end_to_end_case(seed))
    return reports


def covered_ops(reports: Sequence[GradReport]) -> set[str]:
    """Registered op names exercised by a report name (variants share the op prefix)."""
    names = {r.name for r in reports}
    return {op for op in T.DIFFERENTIABLE_OPS if any(n == op or n.startswith(op + "_") for n in names)}


def format_report(reports: Sequence[GradReport]) -> str:
    return "\n".join(r.line() for r in reports)


def main_report(fault: str | None = None) -> tuple[bool, str, float]:
    t0 = time.perf_counter()
    reports = run_suite(fault)
    missing = set(T.DIFFERENTIABLE_OPS) - covered_ops(reports)
    ok = all(r.passed for r in reports) and not missing
    text = format_report(reports)
    if missing:
        text += "\nuncovered ops: " + " ".join(sorted(missing))
    return ok, text, time.perf_counter() - t0
