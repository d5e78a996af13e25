"""Command-line interface: ``spectstage <command> [options]``.

Commands
    phantom   write a synthetic dataset (volumes + manifest)
    train     cross-validated single-dataset training
    cotrain   cross-validated two-dataset cotraining
    evaluate  score a trained run's checkpoints on a manifest
    predict   classify one volume with a trained run
    report    aggregate run reports into mean/std and significance tables

Global flags come before the command.  Run configs are JSON files (see the
README for the schema); command-line flags override values from the file.

Exit codes: 0 success, 1 usage or validation error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .augment import AugmentParams
from .backbones import CheckpointError, load_checkpoint
from .data_io import ManifestError, PhantomSpec, VolumeFormatError, generate_phantom_dataset, load_manifest, read_volume
from .evaluation import MetricsReport, emit_report, stratified_kfold
from .models import MODEL_NAMES
from .pipeline import ModelSpec, cross_validate, cross_validate_cotrain, init_seed
from .preprocess import encode_covariates, preprocess_volume
from .training import PreparedDataset, TrainConfig, evaluate_fold, lr_at, predict_proba

log = logging.getLogger("spectstage")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on bad usage; we reserve 2 for runtime failures
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# --------------------------------------------------------------------------- config


@dataclass
class RunConfig:
    """Everything needed to reproduce a training run."""

    model: str = "attn1"
    use_covariates: bool = False
    width_multiplier: float = 1.0
    boundary: int | None = None
    batch_norm: bool = False
    scaled_attention: bool = False
    manifest: str | None = None
    manifest_b: str | None = None  # cotrain only
    folds: int = 5
    fold: int | None = None
    train: TrainConfig = field(default_factory=TrainConfig)
    augment: AugmentParams = field(default_factory=AugmentParams)

    def validate(self, cotraining: bool = False) -> None:
        if self.model not in MODEL_NAMES:
            raise UsageError(f"unknown model {self.model!r}; valid names: {', '.join(MODEL_NAMES)}")
        if self.manifest is None:
            raise UsageError("no manifest given (config key 'manifest' or --manifest)")
        if cotraining and self.manifest_b is None:
            raise UsageError("cotraining needs a second manifest (config key 'manifest_b' or --manifest-b)")
        if cotraining and self.train.batch_size % 2:
            raise UsageError("cotraining needs an even batch size")
        if self.folds < 2:
            raise UsageError("folds must be >= 2")
        if self.fold is not None and not 0 <= self.fold < self.folds:
            raise UsageError(f"fold must be in [0, {self.folds})")
        if self.width_multiplier <= 0:
            raise UsageError("width_multiplier must be positive")

    def model_spec(self) -> ModelSpec:
        return ModelSpec(
            self.model, self.width_multiplier, self.use_covariates, self.boundary,
            self.batch_norm, self.scaled_attention,
        )

    def to_json(self) -> dict:
        doc = asdict(self)
        doc["train"]["betas"] = list(doc["train"]["betas"])
        doc["augment"] = {k: list(v) if isinstance(v, tuple) else v for k, v in doc["augment"].items() if k != "enabled"}
        return doc


def _sub_config(cls, doc: dict, where: str):
    known = {f.name for f in fields(cls)}
    unknown = set(doc) - known
    if unknown:
        raise UsageError(f"unknown {where} keys: {', '.join(sorted(unknown))}")
    doc = {k: tuple(v) if isinstance(v, list) and k in ("crop_size", "resize_size") else v for k, v in doc.items()}
    try:
        return cls(**doc)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid {where} config: {exc}") from exc


def run_config_from_json(doc: dict, base: Path | None = None) -> RunConfig:
    """Parse a run config; relative manifest paths resolve against ``base``."""
    doc = copy.deepcopy(doc)
    train = _sub_config(TrainConfig, doc.pop("train", {}), "train")
    augment = _sub_config(AugmentParams, doc.pop("augment", {}), "augment")
    cfg = _sub_config(RunConfig, doc, "run")
    cfg.train, cfg.augment = train, augment
    for key in ("manifest", "manifest_b"):
        value = getattr(cfg, key)
        if value is not None and base is not None and not Path(value).is_absolute():
            setattr(cfg, key, str(base / value))
    return cfg


def load_run_config(path) -> RunConfig:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise UsageError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise UsageError(f"config {path} must hold a JSON object")
    return run_config_from_json(doc, path.parent)


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    flat = {
        "model": args.model,
        "manifest": args.manifest,
        "manifest_b": getattr(args, "manifest_b", None),
        "width_multiplier": args.width_multiplier,
        "fold": args.fold,
        "folds": args.folds,
    }
    for k, v in flat.items():
        if v is not None:
            setattr(cfg, k, v)
    if args.covariates:
        cfg.use_covariates = True
    train = {"num_steps": args.steps, "base_lr": args.lr, "batch_size": args.batch_size, "eval_every": args.eval_every}
    for k, v in train.items():
        if v is not None:
            setattr(cfg.train, k, v)
    if args.seed is not None:
        cfg.train.seed = args.seed
    try:
        cfg.train.__post_init__()
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    return cfg


# --------------------------------------------------------------------------- plots


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    # fixed ids and no timestamp, so identical runs give identical SVG bytes
    plt.rcParams["svg.hashsalt"] = "spectstage"
    return plt


def _save_svg(fig, path: Path):
    fig.savefig(path, format="svg", metadata={"Date": None})
    fig.clf()


def plot_loss_curves(run_dir: Path, out: Path) -> Path | None:
    logs = sorted(run_dir.glob("fold_*/log.csv"))
    if not logs:
        return None
    plt = _pyplot()
    fig = plt.figure(figsize=(6, 4))
    ax = fig.add_subplot()
    for path in logs:
        with path.open() as fh:
            rows = list(csv.DictReader(fh))
        ax.plot([int(r["step"]) for r in rows], [float(r["loss"]) for r in rows], lw=0.8, label=path.parent.name)
    ax.set_xlabel("step")
    ax.set_ylabel("training loss")
    ax.legend(fontsize=7)
    _save_svg(fig, out)
    plt.close(fig)
    return out


def plot_lr_schedule(cfg: TrainConfig, out: Path) -> Path:
    plt = _pyplot()
    steps = np.arange(cfg.num_steps)
    fig = plt.figure(figsize=(6, 3))
    ax = fig.add_subplot()
    ax.plot(steps, [lr_at(int(s), cfg) for s in steps])
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel("learning rate")
    _save_svg(fig, out)
    plt.close(fig)
    return out


def plot_attention(weights: np.ndarray, title: str, out: Path) -> Path:
    plt = _pyplot()
    fig = plt.figure(figsize=(6, 3))
    ax = fig.add_subplot()
    ax.bar(np.arange(len(weights)), weights)
    ax.set_xlabel("slice")
    ax.set_ylabel("attention weight")
    ax.set_title(title)
    _save_svg(fig, out)
    plt.close(fig)
    return out


# --------------------------------------------------------------------------- helpers


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _prepared(path) -> PreparedDataset:
    try:
        manifest = load_manifest(path)
    except FileNotFoundError as exc:
        raise UsageError(f"manifest not found: {path}") from exc
    return PreparedDataset(manifest)


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",")]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def _pair(text: str) -> tuple[int, int]:
    values = _int_list(text)
    if len(values) != 2:
        raise argparse.ArgumentTypeError(f"expected two comma-separated integers, got {text!r}")
    return values[0], values[1]


def _run_config(args, cotraining: bool = False) -> RunConfig:
    cfg = load_run_config(args.config) if args.config else RunConfig()
    cfg = _apply_overrides(cfg, args)
    cfg.validate(cotraining)
    return cfg


def _load_run(run_dir) -> tuple[Path, RunConfig, dict]:
    run_dir = Path(run_dir)
    snap = run_dir / "config.json"
    if not snap.exists():
        raise UsageError(f"{run_dir} has no config.json; is it a run directory?")
    doc = json.loads(snap.read_text())
    return run_dir, run_config_from_json(doc["run"]), doc


def _run_folds(cfg: RunConfig) -> list[int]:
    return [cfg.fold] if cfg.fold is not None else list(range(cfg.folds))


# --------------------------------------------------------------------------- commands


def cmd_phantom(args) -> int:
    spec = PhantomSpec(
        num_classes=args.classes,
        counts_per_class=args.counts or [args.per_class] * args.classes,
        slice_count_range=args.slices,
        image_size=args.size,
        noise_level=args.noise,
        seed=args.seed or 0,
        dataset_id=args.dataset_id,
    )
    try:
        spec.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    manifest = generate_phantom_dataset(spec, _out_dir(args))
    print(f"wrote {len(manifest.patients)} patients to {args.out}/manifest.json")
    return EXIT_OK


def _snapshot(out: Path, cfg: RunConfig, args, command: str) -> None:
    _write_json(out / "config.json", {
        "command": command,
        "run": cfg.to_json(),
        "deterministic": args.deterministic,
        "workers": args.workers,
    })


def cmd_train(args) -> int:
    cfg = _run_config(args)
    out = _out_dir(args)
    _snapshot(out, cfg, args, "train")
    ds = _prepared(cfg.manifest)
    report, outcomes = cross_validate(
        cfg.model_spec(), ds, cfg.train, cfg.folds, fold_ids=_run_folds(cfg), aug=cfg.augment, out_dir=out,
    )
    _write_json(out / "report.json", report.to_json())
    with (out / "predictions.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["fold", "patient", "label", "prediction"])
        for o in outcomes:
            for i, p in zip(o.test_indices, o.predictions):
                w.writerow([o.fold, ds.ids[i], ds.manifest.class_names[ds.labels[i]], ds.manifest.class_names[p]])
    emit_report([report], out / "metrics")
    (out / "plots").mkdir(exist_ok=True)
    plot_loss_curves(out, out / "plots" / "loss.svg")
    plot_lr_schedule(cfg.train, out / "plots" / "lr_schedule.svg")
    print(f"{report.model}: accuracy {report.mean('accuracy'):.4f} +- {report.std('accuracy'):.4f}, "
          f"macro F1 {report.mean('macro_f1'):.4f} +- {report.std('macro_f1'):.4f}")
    return EXIT_OK


def cmd_cotrain(args) -> int:
    cfg = _run_config(args, cotraining=True)
    out = _out_dir(args)
    _snapshot(out, cfg, args, "cotrain")
    ds_a, ds_b = _prepared(cfg.manifest), _prepared(cfg.manifest_b)
    rep_a, rep_b = cross_validate_cotrain(
        cfg.model_spec(), ds_a, ds_b, cfg.train, cfg.folds, fold_ids=_run_folds(cfg), aug=cfg.augment, out_dir=out,
    )
    _write_json(out / "report_a.json", rep_a.to_json())
    _write_json(out / "report_b.json", rep_b.to_json())
    emit_report([rep_a], out / "metrics_a")
    emit_report([rep_b], out / "metrics_b")
    (out / "plots").mkdir(exist_ok=True)
    plot_loss_curves(out, out / "plots" / "loss.svg")
    plot_lr_schedule(cfg.train, out / "plots" / "lr_schedule.svg")
    for rep in (rep_a, rep_b):
        print(f"{rep.model}: macro F1 {rep.mean('macro_f1'):.4f} +- {rep.std('macro_f1'):.4f}")
    return EXIT_OK


def _fold_model(run_dir: Path, cfg: RunConfig, num_classes: int, fold: int):
    ckpt = run_dir / f"fold_{fold}" / "best.ckpt"
    if not ckpt.exists():
        raise UsageError(f"no checkpoint at {ckpt}")
    model = cfg.model_spec().build(num_classes, init_seed(cfg.train, fold))
    load_checkpoint(model, ckpt)
    return model.eval()


def cmd_evaluate(args) -> int:
    """Score each fold's best checkpoint.

    Without ``--manifest`` every fold is scored on its own held-out test
    split, which reproduces the run's report.  With ``--manifest`` each fold
    model is scored on the whole given dataset.
    """
    run_dir, cfg, snap = _load_run(args.run)
    if snap["command"] != "train":
        raise UsageError("evaluate works on single-dataset train runs")
    external = args.manifest is not None
    ds = _prepared(args.manifest if external else cfg.manifest)
    folds = stratified_kfold(ds.labels, cfg.folds, cfg.train.seed) if not external else None
    report = MetricsReport(cfg.model_spec().label)
    fold_ids = [args.fold] if args.fold is not None else _run_folds(cfg)
    for fold in fold_ids:
        model = _fold_model(run_dir, cfg, ds.num_classes, fold)
        idx = np.arange(len(ds)) if external else folds.test_indices(fold)
        _, metrics = evaluate_fold(model, ds, idx, cfg.augment)
        report.per_fold.append(metrics)
    out = _out_dir(args)
    _write_json(out / "evaluation.json", report.to_json())
    print(json.dumps({m: round(report.mean(m), 6) for m in ("accuracy", "macro_f1")}))
    return EXIT_OK


def cmd_predict(args) -> int:
    run_dir, cfg, snap = _load_run(args.run)
    if snap["command"] != "train":
        raise UsageError("predict works on single-dataset train runs")
    manifest = load_manifest(cfg.manifest)
    try:
        raw = read_volume(args.volume)
    except FileNotFoundError as exc:
        raise UsageError(f"volume not found: {args.volume}") from exc
    if cfg.use_covariates and (args.age is None or args.sex is None):
        raise UsageError("this model uses covariates; pass --age and --sex")
    vol = preprocess_volume(raw, manifest.filter_min_pixels)

    class _One:  # the smallest PreparedDataset stand-in predict_proba needs
        num_classes = manifest.num_classes

        def batch(self, indices, params, seed=0, step=0):
            from .augment import augment_volume

            x = augment_volume(vol, params, np.random.default_rng(0))[None]
            cov = encode_covariates(args.age or 0.0, args.sex or "male").as_array()[None].astype(np.float32)
            return torch.from_numpy(x), torch.from_numpy(cov), None

    fold = args.fold if args.fold is not None else _run_folds(cfg)[0]
    model = _fold_model(run_dir, cfg, manifest.num_classes, fold)
    probs = predict_proba(model, _One(), [0], cfg.augment)[0]
    k = int(probs.argmax())
    result = {
        "class": manifest.class_names[k],
        "class_index": k,
        "probabilities": {name: float(p) for name, p in zip(manifest.class_names, probs)},
    }
    weights = getattr(model.aggregator, "last_weights", None)
    if weights is not None:
        w = weights[0].double()
        w = w.mean(dim=(0, 1)) if w.dim() == 3 else w.flatten()  # multihead: average heads and query rows
        result["attention"] = w.tolist()
        out = _out_dir(args)
        plot_attention(w.numpy(), f"{Path(args.volume).stem}: {result['class']}", out / f"attention_{Path(args.volume).stem}.svg")
    print(json.dumps(result, indent=2))
    return EXIT_OK


def cmd_report(args) -> int:
    reports = []
    for path in args.reports:
        path = Path(path)
        files = [path] if path.is_file() else sorted(path.glob("report*.json"))
        if not files:
            raise UsageError(f"no report json found at {path}")
        for f in files:
            reports.append(MetricsReport.from_json(json.loads(f.read_text())))
    names = [r.model for r in reports]
    if len(set(names)) != len(names):
        raise UsageError(f"duplicate model labels in reports: {names}")
    paths = emit_report(reports, _out_dir(args) / "summary")
    for name, p in sorted(paths.items()):
        print(f"{name}: {p}")
    return EXIT_OK


# --------------------------------------------------------------------------- parser


def _add_run_flags(p, cotraining: bool = False):
    p.add_argument("--config", help="JSON run config; flags below override it")
    p.add_argument("--model", help=f"one of: {', '.join(MODEL_NAMES)}")
    p.add_argument("--manifest", help="dataset manifest.json" + (" (dataset A)" if cotraining else ""))
    if cotraining:
        p.add_argument("--manifest-b", dest="manifest_b", help="manifest.json of dataset B")
    p.add_argument("--width-multiplier", type=float)
    p.add_argument("--covariates", action="store_true", help="feed age and sex to the classifier")
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float, help="peak learning rate")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--eval-every", type=int)
    p.add_argument("--folds", type=int)
    p.add_argument("--fold", type=int, help="run a single fold")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="spectstage", description="Slice-aggregation staging models for 3D scans.")
    parser.add_argument("--seed", type=int, help="run seed (default: the config's, else 0)")
    parser.add_argument("--out", default="runs/latest", help="output directory")
    parser.add_argument("--deterministic", action="store_true", help="single-threaded, deterministic kernels")
    parser.add_argument("--workers", type=int, default=1, help="intra-op threads (forced to 1 with --deterministic)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("phantom", help="write a synthetic dataset")
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--per-class", type=int, default=40)
    p.add_argument("--counts", type=_int_list, help="comma-separated patients per class (overrides --per-class)")
    p.add_argument("--slices", type=_pair, default=(20, 28), help="min,max slice count")
    p.add_argument("--size", type=_pair, default=(128, 128), help="height,width")
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--dataset-id", default="phantom")
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("train", help="cross-validated training on one dataset")
    _add_run_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("cotrain", help="cross-validated cotraining on two datasets")
    _add_run_flags(p, cotraining=True)
    p.set_defaults(func=cmd_cotrain)

    p = sub.add_parser("evaluate", help="evaluate a train run's checkpoints")
    p.add_argument("run", help="run directory written by 'train'")
    p.add_argument("--manifest", help="score on this dataset instead of the run's test splits")
    p.add_argument("--fold", type=int)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict", help="classify a single volume")
    p.add_argument("run", help="run directory written by 'train'")
    p.add_argument("volume", help="volume file (.vol)")
    p.add_argument("--fold", type=int, help="which fold's checkpoint to use (default: first)")
    p.add_argument("--age", type=float)
    p.add_argument("--sex", choices=("male", "female"))
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("report", help="aggregate reports into tables")
    p.add_argument("reports", nargs="+", help="report json files or run directories")
    p.set_defaults(func=cmd_report)
    return parser


def _configure_runtime(args) -> None:
    if args.workers < 1:
        raise UsageError("--workers must be >= 1")
    if args.seed is not None and args.seed < 0:
        raise UsageError("--seed must be unsigned")
    threads = 1 if args.deterministic else args.workers
    torch.set_num_threads(threads)
    if args.deterministic:
        torch.use_deterministic_algorithms(True)
        os.environ.setdefault("CUBLAS_WORKSPACE_CONFIG", ":4096:8")


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a command is required: " + ", ".join(("phantom", "train", "cotrain", "evaluate", "predict", "report")))
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
        _configure_runtime(args)
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except CheckpointError as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ManifestError, VolumeFormatError, ValueError) as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - last-resort mapping to the runtime exit code
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
