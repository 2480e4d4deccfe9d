"""``saunet`` command line: synth, train, eval, explain, gradcheck."""
from __future__ import annotations

import argparse
import contextlib
import json
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path


from . import gradcheck as gc
from .data import DataError, SegDataset, dataset_info, synth_generate
from .layers import CheckpointError
from .model import ConfigError, ModelConfig, build, load_model
from .trainer import NumericError, TrainConfig, Trainer, validate

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_VERIFY = 0, 2, 3, 4, 5


class CliError(Exception):
    def __init__(self, msg: str, code: int):
        super().__init__(msg)
        self.code = code


def default_seed() -> int:
    raw = os.environ.get("SAUNET_SEED", "0")
    try:
        return int(raw)
    except ValueError:
        raise CliError(f"SAUNET_SEED must be an integer, got {raw!r}", EXIT_CONFIG) from None


@dataclass
class RunConfig:
    data: str = ""
    out: str = "run"
    seed: int | None = None
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d: dict, base: Path) -> "RunConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown run config keys: {sorted(unknown)}")
        cfg = cls(**d)
        unknown = set(cfg.train) - {f.name for f in fields(TrainConfig)}
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        # relative paths resolve against the config file's directory
        if cfg.data:
            cfg.data = str((base / cfg.data).resolve())
        cfg.out = str((base / cfg.out).resolve())
        return cfg


def load_run_config(path) -> RunConfig:
    p = Path(path)
    try:
        d = json.loads(p.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {p} not found") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {p} is not valid JSON: {e}") from None
    if not isinstance(d, dict):
        raise ConfigError("config must be a JSON object")
    return RunConfig.from_dict(d, p.parent.resolve())


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_synth(args) -> int:
    out = Path(args.out)
    if args.n < 0 or args.size <= 0 or args.size % 8:
        raise CliError("--n must be >= 0 and --size a positive multiple of 8", EXIT_CONFIG)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise CliError(f"{out} exists and is not empty; pass --force to overwrite", EXIT_DATA)
    seed = default_seed() if args.seed is None else args.seed
    checksum = synth_generate(out, args.n, size=args.size, seed=seed, family=args.texture)
    print(checksum)
    return EXIT_OK


def _train_setup(args):
    run = load_run_config(args.config)
    if args.data:
        run.data = str(Path(args.data).resolve())
    if args.out:
        run.out = str(Path(args.out).resolve())
    if args.seed is not None:
        run.seed = args.seed
    if run.seed is None:
        run.seed = default_seed()
    model_d = dict(run.model)
    if args.no_shape_stream:
        model_d["shape_stream"] = False
    train_d = {"seed": run.seed, **run.train}
    if args.seed is not None:
        train_d["seed"] = args.seed
    if args.epochs is not None:
        train_d["epochs"] = args.epochs
    if args.no_shape_stream:
        lw = list(train_d.get("loss_weights", [1.0, 1.0, 1.0]))
        train_d["loss_weights"] = [lw[0], lw[1], 0.0]
    mcfg = ModelConfig.from_dict(model_d)
    tcfg = TrainConfig(**train_d)
    try:
        tcfg.validate()
    except ValueError as e:
        raise ConfigError(str(e)) from None
    if not run.data:
        raise ConfigError("no dataset given (config 'data' or --data)")
    info = dataset_info(run.data)
    if int(info["num_classes"]) != mcfg.num_classes:
        raise ConfigError(f"dataset has {info['num_classes']} classes, model expects {mcfg.num_classes}")
    train_ds, val_ds = SegDataset(run.data, "train"), SegDataset(run.data, "val")
    if len(train_ds) < tcfg.batch_size:
        raise DataError(f"training split has {len(train_ds)} samples, fewer than batch size {tcfg.batch_size}")
    return run, mcfg, tcfg, train_ds, val_ds


def cmd_train(args) -> int:
    run, mcfg, tcfg, train_ds, val_ds = _train_setup(args)
    out = Path(run.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "run.json").write_text(json.dumps({**asdict(run), "model": asdict(mcfg), "train": asdict(tcfg)}, indent=2))
    model = build(mcfg, seed=tcfg.seed)
    trainer = Trainer(model, train_ds, tcfg, val_ds)
    with open(out / "log.jsonl", "w") as log:
        trainer.fit(out, log=log)
    print(json.dumps({"best_epoch": trainer.best_epoch, "best_mean_dice": trainer.best_dice,
                      "checkpoint": str(out / "best.ckpt"), "params": model.count_params()}))
    return EXIT_OK


def _load(ckpt):
    if not Path(ckpt).is_file():
        raise CliError(f"checkpoint not found: {ckpt}", EXIT_DATA)
    try:
        model, _, _ = load_model(ckpt)
    except FileNotFoundError as e:
        raise CliError(f"checkpoint not found: {e.filename}", EXIT_DATA) from None
    return model


def cmd_eval(args) -> int:
    model = _load(args.ckpt)
    info = dataset_info(args.data)
    if int(info["num_classes"]) != model.config.num_classes:
        raise ConfigError(f"dataset has {info['num_classes']} classes, checkpoint has {model.config.num_classes}")
    ds = SegDataset(args.data, args.split)
    rows: list = []
    report = validate(model, ds, tolerance=args.tolerance, per_sample=rows)
    tsv = Path(args.tsv) if args.tsv else Path(args.ckpt).with_suffix(f".{args.split}.tsv")
    tsv.write_text("\n".join(["sample_id\tclass\tdice\tiou", *report.tsv_rows(rows)]) + "\n")
    print(report.to_json())
    return EXIT_OK


def _parse_thresholds(raw: str) -> list[float]:
    try:
        taus = [float(t) for t in raw.split(",") if t.strip()]
    except ValueError:
        raise ConfigError(f"bad --thresholds {raw!r}") from None
    if any(not 0 <= t <= 1 for t in taus):
        raise ConfigError("thresholds must lie in [0, 1]")
    return taus


def cmd_explain(args) -> int:
    from .interpret import explain_sample

    taus = _parse_thresholds(args.thresholds)
    if args.smoothgrad < 0:
        raise ConfigError("--smoothgrad must be >= 0")
    model = _load(args.ckpt)
    if not model.config.shape_stream:
        raise ConfigError("explain needs a checkpoint trained with the shape stream")
    ids = [i for i in args.ids.split(",") if i]
    ds = SegDataset(args.data, None, ids=ids)
    out = Path(args.out)
    for i, sid in enumerate(ds.ids):
        res = explain_sample(model, ds.sample(i), out, taus, args.smoothgrad)
        line = f"{sid}: passes: extract={res.forward_passes}, smoothgrad={res.smoothgrad_passes}; " \
               f"seconds: extract={res.extract_seconds:.4f}"
        if res.smoothgrad_seconds is not None:
            ratio = res.smoothgrad_seconds / max(res.extract_seconds, 1e-12)
            line += f", smoothgrad={res.smoothgrad_seconds:.4f} ({ratio:.1f}x)"
        print(line)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    ok, text, seconds = gc.main_report(fault=args.inject_fault)
    print(text)
    print(f"gradcheck {'passed' if ok else 'FAILED'} in {seconds:.1f}s")
    if not ok:
        failed = [ln.split()[0] for ln in text.splitlines() if ln.endswith(" fail")]
        print("failing: " + " ".join(failed), file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


# --------------------------------------------------------------------------
# entry point
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="saunet", description="Shape attentive U-Net segmentation engine")
    p.add_argument("--deterministic", action="store_true", help="single-threaded numerics")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int, default=250)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--texture", choices=["A", "B"], default="A")
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train from a JSON run config")
    t.add_argument("--config", required=True)
    t.add_argument("--no-shape-stream", action="store_true")
    t.add_argument("--data")
    t.add_argument("--out")
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint on a split")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", choices=["train", "val", "test"], default="val")
    e.add_argument("--tsv")
    e.add_argument("--tolerance", type=int, default=1)
    e.set_defaults(func=cmd_eval)

    x = sub.add_parser("explain", help="write attention maps and overlays")
    x.add_argument("--ckpt", required=True)
    x.add_argument("--data", required=True)
    x.add_argument("--ids", required=True)
    x.add_argument("--thresholds", default="0.6,0.8")
    x.add_argument("--smoothgrad", type=int, default=25, help="SmoothGrad samples; 0 disables")
    x.add_argument("--out", default="explain")
    x.set_defaults(func=cmd_explain)

    g = sub.add_parser("gradcheck", help="finite-difference verification suite")
    g.add_argument("--inject-fault", metavar="OP", help=argparse.SUPPRESS)
    g.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    ctx = contextlib.nullcontext()
    if args.deterministic:
        from threadpoolctl import threadpool_limits

        ctx = threadpool_limits(limits=1)
    try:
        with ctx:
            return args.func(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except (ConfigError, TypeError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, CheckpointError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, FloatingPointError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


def main_exit() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
