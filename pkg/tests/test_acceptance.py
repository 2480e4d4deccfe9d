"""Acceptance criteria, one test per criterion.

Each test prints a ``[criterion N] ... PASS|FAIL`` line, and the lines are
repeated together in the pytest terminal summary.  The desk-scale runs
(criteria 4, 5, 6, 7, 9) train six tiny models on 64x64 synthetic data and
take roughly an hour on one CPU core.
"""
import time

import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from conftest import ACCEPTANCE_LINES
from oracles import conv2d_loop, pool_loop, transpose_conv2d_loop, upsample_loop
from saunet import gradcheck as gc
from saunet import interpret as I
from saunet import tensor as T
from saunet.data import SegDataset, mask_to_boundary, synth_generate
from saunet.layers import DualAttentionDecoder, ParamRegistry, init_params
from saunet.model import build, load_model, preset
from saunet.objectives import LossWeights, cross_entropy, dice_loss, one_hot, total_loss
from saunet.tensor import Tensor
from saunet.trainer import TrainConfig, Trainer, resume, validate

pytestmark = pytest.mark.acceptance

SEEDS = (0, 1, 2)
RV = 1
DESK = dict(epochs=30, batch_size=8, lr0=5e-4, gamma=0.99, loss_weights=[1.0, 1.0, 1.0])


def record(n: int, name: str, ok: bool, detail: str) -> None:
    line = f"[criterion {n}] {name}: {'PASS' if ok else 'FAIL'} ({detail})"
    print(line)
    ACCEPTANCE_LINES.append(line)


# --------------------------------------------------------------------------
# desk-scale runs shared by criteria 4-7 and 9
# --------------------------------------------------------------------------

class DeskRun:
    def __init__(self, model, final_a, final_b, best_a, best_b, best_epoch, seconds):
        self.model = model  # final-epoch weights
        self.final_a, self.final_b = final_a, final_b
        self.best_a, self.best_b = best_a, best_b  # convergence epoch: best validation mean Dice
        self.best_epoch = best_epoch
        self.seconds = seconds


class DeskRuns:
    """Lazily trained models keyed by (seed, shape_stream)."""

    def __init__(self, root):
        self.a = root / "A"
        self.b = root / "B"
        # identical geometry and split, different texture family
        synth_generate(self.a, 250, size=64, seed=0, family="A")
        synth_generate(self.b, 250, size=64, seed=0, family="B")
        self.train_a = SegDataset(self.a, "train")
        self.val_a = SegDataset(self.a, "val")
        self.val_b = SegDataset(self.b, "val")
        self.root = root
        self._runs = {}

    def get(self, seed: int, shape: bool):
        key = (seed, shape)
        if key not in self._runs:
            model = build(preset("tiny", shape_stream=shape), seed=seed)
            tr = Trainer(model, self.train_a, TrainConfig(seed=seed, **DESK), self.val_a)
            t0 = time.perf_counter()
            out = self.root / f"run_s{seed}_{'shape' if shape else 'plain'}"
            tr.fit(out)
            seconds = time.perf_counter() - t0
            best, _, _ = load_model(out / "best.ckpt")
            self._runs[key] = DeskRun(model, validate(model, self.val_a), validate(model, self.val_b),
                                      validate(best, self.val_a), validate(best, self.val_b), tr.best_epoch, seconds)
        return self._runs[key]


@pytest.fixture(scope="session")
def desk(tmp_path_factory):
    return DeskRuns(tmp_path_factory.mktemp("desk"))


# --------------------------------------------------------------------------
# 1-3: verification suites
# --------------------------------------------------------------------------

def test_criterion_1_gradient_integrity():
    reports = gc.run_suite()
    missing = set(T.DIFFERENTIABLE_OPS) - gc.covered_ops(reports)
    ok, text, seconds = gc.main_report()
    worst = max(reports, key=lambda r: r.max_rel_err)
    passed = ok and not missing and seconds < 120
    record(1, "gradient integrity", passed,
           f"{len(reports)} checks, worst {worst.name} rel err {worst.max_rel_err:.2e} < 1e-4, {seconds:.1f}s < 120s")
    assert passed, text


def _shapes():
    for n in (1, 2):
        for c in (1, 2, 3, 4):
            for h in range(1, 9):
                for w in range(1, 9):
                    yield n, c, h, w


def test_criterion_2_oracle_equivalence():
    # integer-valued f64 inputs keep every partial sum exact, so any summation order must agree bit for bit
    rng = np.random.default_rng(0)
    mismatches, count, ulp_dev = [], 0, 0.0
    for n, c, h, w in _shapes():
        xi = rng.integers(-8, 9, (n, c, h, w)).astype(np.float64)
        xr = rng.standard_normal((n, c, h, w))
        for k, s, p in ((3, 1, 1), (3, 2, 1), (1, 1, 0), (2, 2, 0)):
            if h + 2 * p < k or w + 2 * p < k:
                continue
            wt = rng.integers(-4, 5, (2, c, k, k)).astype(np.float64)
            b = rng.integers(-4, 5, 2).astype(np.float64)
            got = T.conv2d(Tensor(xi), Tensor(wt), Tensor(b), stride=s, pad=p).data
            count += 1
            if not np.array_equal(got, conv2d_loop(xi, wt, b, s, p)):
                mismatches.append(("conv2d", (n, c, h, w), k, s))
            wr = rng.standard_normal((2, c, k, k))
            dev = np.abs(T.conv2d(Tensor(xr), Tensor(wr), None, stride=s, pad=p).data - conv2d_loop(xr, wr, None, s, p))
            ulp_dev = max(ulp_dev, float(dev.max()))
        wt = rng.integers(-4, 5, (c, 2, 2, 2)).astype(np.float64)
        count += 1
        if not np.array_equal(T.transpose_conv2d(Tensor(xi), Tensor(wt), None, stride=2).data,
                              transpose_conv2d_loop(xi, wt, 2)):
            mismatches.append(("transpose_conv2d", (n, c, h, w)))
        for mode, fn in (("max", T.maxpool2d), ("avg", T.avgpool2d)):
            count += 1
            if not np.array_equal(fn(Tensor(xi), 2).data, pool_loop(xi, 2, mode)):
                mismatches.append((mode + "pool", (n, c, h, w)))
        count += 1
        if not np.array_equal(T.maxpool2d(Tensor(xr), 2).data, pool_loop(xr, 2, "max")):
            mismatches.append(("maxpool_real", (n, c, h, w)))
        for oh in range(h, 9):
            for ow in range(w, 9):
                count += 2
                for x in (xi, xr):
                    if not np.array_equal(T.bilinear_upsample(Tensor(x), oh, ow).data, upsample_loop(x, oh, ow)):
                        mismatches.append(("upsample", (n, c, h, w), oh, ow))
    passed = not mismatches
    record(2, "oracle equivalence", passed,
           f"{count} comparisons over all shapes <= 2x4x8x8, {len(mismatches)} mismatches; "
           f"real-valued conv reorder deviation {ulp_dev:.1e}")
    assert passed, mismatches[:10]


def test_criterion_3_loss_identities():
    rng = np.random.default_rng(0)
    y = one_hot(rng.integers(0, 4, (2, 16, 16)), 4, np.float64)
    d_perfect = dice_loss(Tensor(y), y).item()
    ce_uniform = cross_entropy(Tensor(np.zeros((2, 4, 16, 16))), y).item()
    lin_ok = True
    for _ in range(100):
        # dyadic losses and weights: every product and sum is representable, so equality must be exact
        parts = [Tensor(np.array(v)) for v in rng.integers(0, 256, 3) / 64]
        w1, w2 = (LossWeights(*map(float, rng.integers(0, 64, 3) / 16)) for _ in range(2))
        w12 = LossWeights(w1.ce + w2.ce, w1.dice + w2.dice, w1.edge + w2.edge)
        lhs = total_loss(*parts, w12).item()
        lin_ok &= lhs == total_loss(*parts, w1).item() + total_loss(*parts, w2).item()
    lo, hi = np.inf, -np.inf
    for i in range(100):
        reg = ParamRegistry(np.float64)
        dec = DualAttentionDecoder(reg, "dec", 4, 6, 8, 4)
        init_params(reg, "he_normal", i)
        skip, below = Tensor(rng.standard_normal((1, 4, 8, 8))), Tensor(rng.standard_normal((1, 6, 4, 4)))
        F, _ = dec(skip, below)
        fc, _ = dec.se(dec.conv(T.concat_channels([skip, dec.up(below)])))
        nz = np.abs(fc.data) > 1e-12
        ratio = F.data[nz] / fc.data[nz]
        lo, hi = min(lo, ratio.min()), max(hi, ratio.max())
    passed = d_perfect < 1e-5 and abs(ce_uniform - np.log(4)) <= 1e-6 and lin_ok and lo >= 1 and hi <= 2
    record(3, "loss identities", passed,
           f"dice(perfect)={d_perfect:.1e}, |CE(uniform)-log 4|={abs(ce_uniform - np.log(4)):.1e}, "
           f"linearity exact={lin_ok}, F/Fc in [{lo:.3f}, {hi:.3f}]")
    assert passed


# --------------------------------------------------------------------------
# 8: determinism (fast, runs before the desk-scale block)
# --------------------------------------------------------------------------

def test_criterion_8_determinism(tiny_dataset, tmp_path):
    train, val = SegDataset(tiny_dataset, "train"), SegDataset(tiny_dataset, "val")
    cfg = dict(epochs=3, batch_size=8, seed=11, augment=True)
    with threadpool_limits(limits=1):
        runs = []
        for _ in range(2):
            tr = Trainer(build(preset("tiny"), seed=11), train, TrainConfig(**cfg), val)
            runs.append([tr.train_epoch() for _ in range(2)])
        same_epoch2 = runs[0][1].batch_totals == runs[1][1].batch_totals

        tr = Trainer(build(preset("tiny"), seed=11), train, TrainConfig(**cfg), val)
        tr.train_epoch()
        tr.save(tmp_path / "mid.ckpt")
        straight = [tr.train_epoch().batch_totals for _ in range(2)]
        again = resume(tmp_path / "mid.ckpt", train, val)
        resumed = [again.train_epoch().batch_totals for _ in range(2)]
    passed = same_epoch2 and straight == resumed
    record(8, "determinism", passed,
           f"epoch-2 loss {runs[0][1].total!r} vs {runs[1][1].total!r}; resumed epochs 2-3 identical={straight == resumed}")
    assert passed


# --------------------------------------------------------------------------
# 4-7, 9: desk-scale training
# --------------------------------------------------------------------------

def test_criterion_4_desk_scale_training(desk):
    run = desk.get(0, True)
    model, rep_a, seconds = run.model, run.final_a, run.seconds
    params = model.count_params()
    passed = rep_a.mean_dice >= 0.85 and seconds <= 900 and params < 1_000_000
    record(4, "desk-scale training", passed,
           f"val mean fg Dice {rep_a.mean_dice:.3f} >= 0.85 (per class {np.round(rep_a.dice, 3).tolist()}), "
           f"{seconds / 60:.1f} min <= 15, {params} params")
    assert passed


def test_criterion_9_attention_sanity(desk):
    # alpha_final is the last gate of the shape stream; the supervised shape map is printed for context only
    model = desk.get(0, True).model
    on, off, shape_on, shape_off = [], [], [], []
    for i in range(len(desk.val_a)):
        s = desk.val_a.sample(i)
        bundle = I.extract(model, s)
        alpha, shape = bundle.alphas[-1].data[0, 0], bundle.shape_map.data[0, 0]
        b = mask_to_boundary(s.labels).astype(bool)
        on.append(alpha[b])
        off.append(alpha[~b])
        shape_on.append(shape[b])
        shape_off.append(shape[~b])
    m_on, m_off = float(np.concatenate(on).mean()), float(np.concatenate(off).mean())
    print(f"  supplementary: final shape map on boundary {np.concatenate(shape_on).mean():.3f} "
          f"vs elsewhere {np.concatenate(shape_off).mean():.3f}")
    passed = m_on > m_off
    record(9, "attention sanity", passed, f"mean alpha_final on boundary {m_on:.3f} vs elsewhere {m_off:.3f}")
    assert passed


def test_criterion_7_interpretability_cost(desk, tmp_path):
    model = desk.get(0, True).model
    sample = desk.val_a.sample(0)
    b0 = T.backward_passes
    f0 = model.forward_passes
    I.extract(model, sample)
    one_pass = model.forward_passes - f0 == 1 and T.backward_passes == b0
    res = I.explain_sample(model, sample, tmp_path, smoothgrad_n=25)
    ratio = res.smoothgrad_seconds / res.extract_seconds
    passed = one_pass and res.forward_passes == 1 and ratio >= 10
    record(7, "interpretability cost", passed,
           f"extraction forward passes {res.forward_passes}, backward 0; smoothgrad n=25 "
           f"{res.smoothgrad_seconds:.3f}s vs {res.extract_seconds:.4f}s = {ratio:.0f}x >= 10x")
    assert passed


def _ablation_rows(desk, attr):
    return [(seed, shape, getattr(desk.get(seed, shape), attr)) for seed in SEEDS for shape in (True, False)]


def test_criterion_5_ablation_direction(desk):
    # evaluated at the convergence epoch; final-epoch numbers are printed for reference
    means = {}
    for attr in ("best_a", "final_a"):
        rows = _ablation_rows(desk, attr)
        for seed, shape, rep in rows:
            print(f"  [{attr}] seed {seed} shape_stream={shape}: RV dice {rep.dice[RV]:.4f} "
                  f"boundary F1 {rep.boundary_f1[RV]:.4f}")
        means[attr] = {shape: (np.mean([r.dice[RV] for _, s, r in rows if s == shape]),
                               np.mean([r.boundary_f1[RV] for _, s, r in rows if s == shape])) for shape in (True, False)}
    (with_d, with_f), (without_d, without_f) = means["best_a"][True], means["best_a"][False]
    fin = means["final_a"]
    print(f"  final-epoch reference: Dice gap {fin[True][0] - fin[False][0]:+.4f}, "
          f"boundary F1 gap {fin[True][1] - fin[False][1]:+.4f}")
    passed = with_d >= without_d and with_f >= without_f
    record(5, "ablation direction", passed,
           f"RV Dice with {with_d:.4f} vs without {without_d:.4f} (gap {with_d - without_d:+.4f}); "
           f"RV boundary F1 with {with_f:.4f} vs without {without_f:.4f} (gap {with_f - without_f:+.4f})")
    assert passed


def test_criterion_6_robustness_direction(desk):
    drops = {}
    for prefix in ("best", "final"):
        for seed in SEEDS:
            for shape in (True, False):
                run = desk.get(seed, shape)
                a, b = getattr(run, prefix + "_a"), getattr(run, prefix + "_b")
                drops.setdefault((prefix, shape), []).append(a.miou - b.miou)
                print(f"  [{prefix}] seed {seed} shape_stream={shape}: mIoU A {a.miou:.4f} B {b.miou:.4f}")
    d_with, d_without = float(np.mean(drops["best", True])), float(np.mean(drops["best", False]))
    print(f"  final-epoch reference: drop with {np.mean(drops['final', True]):.4f} "
          f"vs without {np.mean(drops['final', False]):.4f}")
    passed = d_with <= d_without
    record(6, "robustness direction", passed,
           f"mean mIoU drop A->B with shape stream {d_with:.4f} vs without {d_without:.4f}")
    assert passed
