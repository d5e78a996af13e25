"""Training loops: single-dataset, two-dataset cotraining, schedule, state.

Training is deterministic given ``TrainConfig.seed``: batch composition is a
function of (seed, step) and every patient's augmentation draws from its own
generator keyed on (seed, patient id, step).
"""

from __future__ import annotations

import copy
import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn

from .augment import AugmentParams, augment_volume, patient_rng
from .backbones import assign_tensors, read_checkpoint, write_checkpoint
from .data_io import DatasetManifest, read_volume
from .evaluation import FoldMetrics, FoldPlan, StratificationError, classification_metrics, split_validation
from .objective import compute_class_weights, weighted_ce_torch
from .preprocess import EmptyVolume, encode_covariates, preprocess_volume

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    batch_size: int = 8
    num_steps: int = 3000
    base_lr: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    warmup_fraction: float = 0.1
    start_div: float = 25.0
    final_div: float = 1e4
    freeze_prefix: list[str] = field(default_factory=list)
    seed: int = 0
    reduction: str = "mean"
    eval_every: int | None = None  # default: once per pass over the training set
    val_fraction: float = 0.2

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.num_steps < 1:
            raise ValueError("num_steps must be >= 1")
        if self.reduction not in ("mean", "sum"):
            raise ValueError("reduction must be 'mean' or 'sum'")
        self.betas = tuple(self.betas)
        self.freeze_prefix = list(self.freeze_prefix)

    def to_json(self) -> dict:
        return asdict(self)


def lr_at(step: int, cfg: TrainConfig) -> float:
    """One-cycle schedule peaking at ``base_lr``.

    Linear warmup from ``base_lr / start_div`` over the first
    ``warmup_fraction`` of the steps, then cosine decay to
    ``base_lr / final_div`` at the last step.
    """
    n = cfg.num_steps
    if not 0 <= step < n:
        raise ValueError(f"step {step} outside [0, {n})")
    peak = cfg.base_lr
    start, floor = peak / cfg.start_div, peak / cfg.final_div
    warm = cfg.warmup_fraction * n
    if step <= warm and warm > 0:
        return start + (peak - start) * step / warm
    span = (n - 1) - warm
    if span <= 0:
        return floor
    progress = min(1.0, (step - warm) / span)
    return floor + (peak - floor) * 0.5 * (1.0 + math.cos(math.pi * progress))


# --------------------------------------------------------------------------- data


class PreparedDataset:
    """Normalized, slice-filtered volumes of one manifest, held in memory.

    Patients whose volumes lose every slice are skipped with a warning.
    """

    def __init__(self, manifest: DatasetManifest, intensity_threshold: float = 0.1):
        self.manifest = manifest
        self.num_classes = manifest.num_classes
        ids, vols, labels, covs = [], [], [], []
        self.skipped: list[str] = []
        for p in manifest.patients:
            try:
                v = preprocess_volume(read_volume(manifest.volume_file(p)), manifest.filter_min_pixels, intensity_threshold)
            except EmptyVolume:
                log.warning("patient %s: no slice survives the incomplete-slice filter; skipped", p.id)
                self.skipped.append(p.id)
                continue
            ids.append(p.id)
            vols.append(v)
            labels.append(p.stage)
            covs.append(encode_covariates(p.age_years, p.sex).as_array())
        self.ids = ids
        self.volumes = vols
        self.labels = np.asarray(labels, dtype=np.int64)
        self.covariates = np.asarray(covs, dtype=np.float32).reshape(-1, 2)
        self._eval_cache: dict[tuple, np.ndarray] = {}

    def __len__(self):
        return len(self.ids)

    def inputs(self, index: int, params: AugmentParams, seed: int, step: int) -> np.ndarray:
        if not params.enabled:
            key = (index, params.crop_size, params.resize_size, params.target_depth)
            if key not in self._eval_cache:
                self._eval_cache[key] = augment_volume(self.volumes[index], params, np.random.default_rng(0))
            return self._eval_cache[key]
        return augment_volume(self.volumes[index], params, patient_rng(seed, self.ids[index], step))

    def batch(self, indices: Sequence[int], params: AugmentParams, seed: int = 0, step: int = 0):
        x = np.stack([self.inputs(i, params, seed, step) for i in indices])
        return (
            torch.from_numpy(x),
            torch.from_numpy(self.covariates[list(indices)]),
            torch.from_numpy(self.labels[list(indices)]),
        )


class StratifiedStream:
    """Endless stream of training indices, one stratified shuffle per epoch.

    Within an epoch each class's members are shuffled and interleaved in
    proportion to class size, so rare classes show up at a steady rate.
    """

    def __init__(self, indices: Sequence[int], labels: np.ndarray, seed: int):
        self.indices = np.asarray(indices)
        self.labels = np.asarray(labels)[self.indices]
        self.seed = seed
        self._epochs: dict[int, np.ndarray] = {}

    def epoch_order(self, epoch: int) -> np.ndarray:
        if epoch not in self._epochs:
            rng = np.random.default_rng([self.seed, epoch])
            keys = np.empty(len(self.indices))
            for c in np.unique(self.labels):
                pos = np.flatnonzero(self.labels == c)
                pos = rng.permutation(pos)
                keys[pos] = (np.arange(len(pos)) + rng.uniform(0, 1, len(pos))) / len(pos)
            self._epochs = {epoch: self.indices[np.argsort(keys, kind="stable")]}
        return self._epochs[epoch]

    def take(self, step: int, size: int) -> np.ndarray:
        n = len(self.indices)
        out = []
        for pos in range(step * size, (step + 1) * size):
            out.append(self.epoch_order(pos // n)[pos % n])
        return np.asarray(out)


# --------------------------------------------------------------------------- model helpers


def frozen_names(model: nn.Module, prefixes: Sequence[str]) -> set[str]:
    return {n for n, _ in model.named_parameters() if any(n.startswith(p) for p in prefixes)}


def _apply_freeze(model: nn.Module, prefixes: Sequence[str]) -> list[nn.Parameter]:
    frozen = frozen_names(model, prefixes)
    trainable = []
    for n, p in model.named_parameters():
        p.requires_grad_(n not in frozen)
        if n not in frozen:
            trainable.append(p)
    return trainable


def _train_mode(model: nn.Module):
    """Train mode, except batch-norm layers whose parameters are all frozen."""
    model.train()
    for m in model.modules():
        if isinstance(m, nn.modules.batchnorm._BatchNorm):
            params = list(m.parameters())
            if params and not any(p.requires_grad for p in params):
                m.eval()


def _make_optimizer(params, cfg: TrainConfig) -> torch.optim.Adam | None:
    if not params:  # everything frozen
        return None
    return torch.optim.Adam(params, lr=lr_at(0, cfg), betas=cfg.betas, eps=cfg.eps)


def _set_lr(opt, lr):
    for g in opt.param_groups if opt is not None else []:
        g["lr"] = lr


def model_tensors(model: nn.Module) -> dict[str, torch.Tensor]:
    return dict(model.state_dict())


def save_checkpoint(model: nn.Module, path) -> None:
    write_checkpoint(model_tensors(model), path)


def restore(model: nn.Module, path) -> None:
    report = assign_tensors(model, read_checkpoint(path))
    if report.missing:
        log.warning("restore: %d model tensors absent from %s", len(report.missing), path)


def training_state(model, optimizer, step: int, best: dict) -> dict[str, torch.Tensor]:
    """Model, optimizer moments and loop counters as one flat named-tensor dict."""
    out = {f"model.{k}": v for k, v in model.state_dict().items()}
    names = {id(p): n for n, p in model.named_parameters()}
    for group in optimizer.param_groups if optimizer is not None else []:
        for p in group["params"]:
            st = optimizer.state.get(p)
            if not st:
                continue
            n = names[id(p)]
            out[f"optim.{n}.step"] = torch.as_tensor(st["step"], dtype=torch.float32).reshape(1)
            out[f"optim.{n}.exp_avg"] = st["exp_avg"]
            out[f"optim.{n}.exp_avg_sq"] = st["exp_avg_sq"]
    out["train.step"] = torch.tensor([float(step)])
    for key, val in best.items():
        out[f"train.best.{key}.score"] = torch.tensor([val["score"]], dtype=torch.float32)
        out[f"train.best.{key}.step"] = torch.tensor([float(val["step"])])
        if val["state"] is not None:
            out.update({f"best.{key}.{k}": v for k, v in val["state"].items()})
    return out


def load_training_state(model, optimizer, tensors: dict[str, np.ndarray]) -> tuple[int, dict]:
    model_part = {k[len("model."):]: v for k, v in tensors.items() if k.startswith("model.")}
    assign_tensors(model, model_part)
    params = dict(model.named_parameters())
    for n, p in params.items():
        if optimizer is not None and f"optim.{n}.exp_avg" in tensors:
            optimizer.state[p] = {
                "step": torch.tensor(float(tensors[f"optim.{n}.step"][0])),
                "exp_avg": torch.from_numpy(tensors[f"optim.{n}.exp_avg"].copy()).to(p.dtype),
                "exp_avg_sq": torch.from_numpy(tensors[f"optim.{n}.exp_avg_sq"].copy()).to(p.dtype),
            }
    best = {}
    for k in tensors:
        if k.startswith("train.best.") and k.endswith(".score"):
            key = k[len("train.best.") : -len(".score")]
            prefix = f"best.{key}."
            state = {n[len(prefix):]: torch.from_numpy(v.copy()) for n, v in tensors.items() if n.startswith(prefix)}
            best[key] = {
                "score": float(tensors[k][0]),
                "step": int(tensors[f"train.best.{key}.step"][0]),
                "state": state or None,
            }
    return int(tensors["train.step"][0]), best


def _improves(score, best) -> bool:
    # scores round-trip through float32 checkpoints, so compare at that precision
    # to keep resumed runs on the same best-step decisions
    return score is not None and np.float32(score) >= np.float32(best["score"])


def _state_copy(model) -> dict[str, torch.Tensor]:
    return {k: v.detach().clone() for k, v in model.state_dict().items()}


# --------------------------------------------------------------------------- evaluation


@torch.no_grad()
def predict_proba(model: nn.Module, ds: PreparedDataset, indices, params: AugmentParams, chunk: int = 8) -> np.ndarray:
    was_training = model.training
    model.eval()
    eval_params = params.for_eval()
    out = []
    indices = list(indices)
    for i in range(0, len(indices), chunk):
        x, cov, _ = ds.batch(indices[i : i + chunk], eval_params)
        out.append(torch.softmax(model(x, cov).double(), dim=1).numpy())
    model.train(was_training)
    return np.concatenate(out) if out else np.zeros((0, ds.num_classes))


def evaluate_fold(model, ds: PreparedDataset, indices, params: AugmentParams | None = None) -> tuple[np.ndarray, FoldMetrics]:
    params = params or AugmentParams()
    probs = predict_proba(model, ds, indices, params)
    preds = probs.argmax(axis=1)
    return preds, classification_metrics(ds.labels[np.asarray(indices, dtype=np.int64)], preds, ds.num_classes)


# --------------------------------------------------------------------------- loops


@dataclass
class TrainResult:
    model: nn.Module
    history: list[dict]
    best_step: int | None
    best_val_macro_f1: float | None
    val_indices: np.ndarray
    train_indices: np.ndarray


class RunLog:
    """Writes the run directory: config.json, log.csv, checkpoints, metrics."""

    def __init__(self, out_dir, columns: Sequence[str]):
        self.dir = Path(out_dir) if out_dir is not None else None
        self.columns = list(columns)
        self.rows: list[list] = []
        if self.dir is not None:
            self.dir.mkdir(parents=True, exist_ok=True)

    def write_json(self, name: str, doc: dict):
        if self.dir is not None:
            (self.dir / name).write_text(json.dumps(doc, indent=2, sort_keys=True, default=_jsonable) + "\n")

    def append(self, row):
        self.rows.append(row)

    def flush(self, append: bool = False):
        if self.dir is None:
            return
        path = self.dir / "log.csv"
        mode = "a" if append and path.exists() else "w"
        with open(path, mode, newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            if mode == "w":
                w.writerow(self.columns)
            w.writerows(self.rows)
        self.rows = []

    def path(self, name: str) -> Path | None:
        return self.dir / name if self.dir is not None else None


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.integer, np.floating)):
        return o.item()
    raise TypeError(type(o))


def _split(ds: PreparedDataset, folds: FoldPlan, fold_id: int, cfg: TrainConfig):
    train_idx, val_idx = split_validation(folds.train_indices(fold_id), ds.labels, cfg.val_fraction, seed=cfg.seed + fold_id)
    counts = np.bincount(ds.labels[train_idx], minlength=ds.num_classes)
    if np.any(counts == 0):
        missing = np.flatnonzero(counts == 0).tolist()
        raise StratificationError(f"training fold {fold_id} has no samples of classes {missing}")
    weights = torch.from_numpy(compute_class_weights(counts)).float()
    return train_idx, val_idx, weights


def _validate(model, ds, val_idx, params) -> float | None:
    if len(val_idx) == 0:
        return None
    _, m = evaluate_fold(model, ds, val_idx, params)
    return m.macro_f1


def train_single(
    model: nn.Module,
    ds: PreparedDataset,
    folds: FoldPlan,
    fold_id: int,
    cfg: TrainConfig,
    aug: AugmentParams | None = None,
    out_dir=None,
    resume_from=None,
    stop_after: int | None = None,
) -> TrainResult:
    """Train ``model`` on the training part of ``fold_id``.

    20% of the training fold (stratified) is held out for validation; the
    returned model carries the weights with the best validation macro F1.
    ``stop_after`` ends the loop early (after that many total steps) without
    changing the schedule, which is how interrupted runs are simulated.
    """
    aug = aug or AugmentParams()
    train_idx, val_idx, weights = _split(ds, folds, fold_id, cfg)
    stream = StratifiedStream(train_idx, ds.labels, cfg.seed + 7919 * fold_id)
    trainable = _apply_freeze(model, cfg.freeze_prefix)
    opt = _make_optimizer(trainable, cfg)
    eval_every = cfg.eval_every or max(1, math.ceil(len(train_idx) / cfg.batch_size))
    run = RunLog(out_dir, ["step", "lr", "loss"])
    run.write_json("config.json", {"train": cfg.to_json(), "augment": asdict(aug), "fold": fold_id})

    start, best = 0, {"main": {"score": -1.0, "step": -1, "state": None}}
    if resume_from is not None:
        start, best = load_training_state(model, opt, read_checkpoint(resume_from))
    history: list[dict] = []
    end = cfg.num_steps if stop_after is None else min(stop_after, cfg.num_steps)
    for step in range(start, end):
        _train_mode(model)
        lr = lr_at(step, cfg)
        _set_lr(opt, lr)
        x, cov, y = ds.batch(stream.take(step, cfg.batch_size), aug, cfg.seed, step)
        loss = weighted_ce_torch(model(x, cov), y, weights, cfg.reduction)
        if opt is not None:
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
        run.append([step, f"{lr:.6e}", f"{loss.item():.6f}"])
        if (step + 1) % eval_every == 0 or step + 1 == cfg.num_steps:
            score = _validate(model, ds, val_idx, aug)
            history.append({"step": step + 1, "val_macro_f1": score, "loss": loss.item()})
            if _improves(score, best["main"]):
                best["main"] = {"score": score, "step": step + 1, "state": _state_copy(model)}
    run.flush(append=resume_from is not None)
    if run.dir is not None:
        write_checkpoint(training_state(model, opt, end, best), run.path("last.ckpt"))
    if best["main"]["state"] is not None and end == cfg.num_steps:
        model.load_state_dict(best["main"]["state"])
        if run.dir is not None:
            save_checkpoint(model, run.path("best.ckpt"))
    run.write_json("validation.json", {"history": history, "best_step": best["main"]["step"]})
    return TrainResult(
        model,
        history,
        best["main"]["step"] if best["main"]["state"] is not None else None,
        best["main"]["score"] if best["main"]["state"] is not None else None,
        val_idx,
        train_idx,
    )


@dataclass
class CotrainResult:
    model: nn.Module  # CotrainModel
    state_a: dict
    state_b: dict
    history: list[dict]
    val_indices: tuple[np.ndarray, np.ndarray]


def cotrain(
    model,
    ds_a: PreparedDataset,
    ds_b: PreparedDataset,
    folds_a: FoldPlan,
    folds_b: FoldPlan,
    fold_id: int,
    cfg: TrainConfig,
    aug: AugmentParams | None = None,
    out_dir=None,
    loss_weight_b: float = 1.0,
    on_batch: Callable | None = None,
) -> CotrainResult:
    """Jointly train a :class:`~spectstage.models.CotrainModel`.

    Each step draws half the batch from each dataset; the objective is the
    sum of the two weighted cross-entropies (``loss_weight_b`` scales the
    second one, 1 by default).  Best validation weights are kept separately
    per dataset in ``state_a`` / ``state_b``.
    """
    if cfg.batch_size % 2:
        raise ValueError("cotraining needs an even batch size")
    aug = aug or AugmentParams()
    half = cfg.batch_size // 2
    tr_a, val_a, w_a = _split(ds_a, folds_a, fold_id, cfg)
    tr_b, val_b, w_b = _split(ds_b, folds_b, fold_id, cfg)
    stream_a = StratifiedStream(tr_a, ds_a.labels, cfg.seed + 7919 * fold_id)
    stream_b = StratifiedStream(tr_b, ds_b.labels, cfg.seed + 7919 * fold_id + 104729)
    trainable = _apply_freeze(model, cfg.freeze_prefix)
    opt = _make_optimizer(trainable, cfg)
    eval_every = cfg.eval_every or max(1, math.ceil(len(tr_a) / half))
    run = RunLog(out_dir, ["step", "lr", "loss", "loss_A", "loss_B"])
    run.write_json(
        "config.json",
        {"train": cfg.to_json(), "augment": asdict(aug), "fold": fold_id, "batch_composition": [half, half]},
    )
    log.info("cotraining batch composition: %d + %d", half, half)
    best = {k: {"score": -1.0, "step": -1, "state": None} for k in ("a", "b")}
    history = []
    for step in range(cfg.num_steps):
        _train_mode(model)
        lr = lr_at(step, cfg)
        _set_lr(opt, lr)
        ia, ib = stream_a.take(step, half), stream_b.take(step, half)
        if on_batch is not None:
            on_batch(step, ia, ib)
        xa, ca, ya = ds_a.batch(ia, aug, cfg.seed, step)
        xb, cb, yb = ds_b.batch(ib, aug, cfg.seed, step)
        la, lb = model(xa, xb, ca, cb)
        loss_a = weighted_ce_torch(la, ya, w_a, cfg.reduction)
        loss_b = weighted_ce_torch(lb, yb, w_b, cfg.reduction)
        loss = loss_a + loss_weight_b * loss_b
        if opt is not None:
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
        run.append([step, f"{lr:.6e}", f"{loss.item():.6f}", f"{loss_a.item():.6f}", f"{loss_b.item():.6f}"])
        if (step + 1) % eval_every == 0 or step + 1 == cfg.num_steps:
            entry = {"step": step + 1, "loss": loss.item()}
            for key, sub, ds, val in (("a", model.model_a(), ds_a, val_a), ("b", model.model_b(), ds_b, val_b)):
                score = _validate(sub, ds, val, aug)
                entry[f"val_macro_f1_{key}"] = score
                if _improves(score, best[key]):
                    best[key] = {"score": score, "step": step + 1, "state": _state_copy(model)}
            history.append(entry)
    run.flush()
    if run.dir is not None:
        write_checkpoint(training_state(model, opt, cfg.num_steps, best), run.path("last.ckpt"))
    final = _state_copy(model)
    state_a = best["a"]["state"] or final
    state_b = best["b"]["state"] or final
    if run.dir is not None:
        write_checkpoint(state_a, run.path("best_a.ckpt"))
        write_checkpoint(state_b, run.path("best_b.ckpt"))
    run.write_json("validation.json", {"history": history, "best_step_a": best["a"]["step"], "best_step_b": best["b"]["step"]})
    return CotrainResult(model, state_a, state_b, history, (val_a, val_b))
