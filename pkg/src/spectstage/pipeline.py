"""Cross-validated experiments: k folds of train-then-test for one model."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .augment import AugmentParams
from .evaluation import FoldPlan, MetricsReport, stratified_kfold
from .models import build_cotrain_model, build_model
from .training import PreparedDataset, TrainConfig, cotrain, evaluate_fold, train_single

log = logging.getLogger(__name__)


@dataclass
class ModelSpec:
    name: str
    width_multiplier: float = 1.0
    use_covariates: bool = False
    boundary: int | None = None
    batch_norm: bool = False
    scaled_attention: bool = False

    @property
    def label(self) -> str:
        return f"{self.name}{'+' if self.use_covariates else ''}"

    def build(self, num_classes: int, seed: int):
        torch.manual_seed(seed)
        return build_model(
            self.name, num_classes, self.width_multiplier, self.use_covariates, self.boundary,
            batch_norm=self.batch_norm, scaled_attention=self.scaled_attention,
        )

    def build_cotrain(self, num_classes_a: int, num_classes_b: int, seed: int):
        torch.manual_seed(seed)
        return build_cotrain_model(
            self.name, num_classes_a, num_classes_b, self.width_multiplier, self.use_covariates,
            self.boundary, batch_norm=self.batch_norm, scaled_attention=self.scaled_attention,
        )


def init_seed(cfg: TrainConfig, fold: int) -> int:
    return cfg.seed * 1009 + fold


@dataclass
class FoldOutcome:
    fold: int
    test_indices: np.ndarray
    predictions: np.ndarray
    best_step: int | None = None
    extra: dict = field(default_factory=dict)


def cross_validate(
    spec: ModelSpec,
    ds: PreparedDataset,
    cfg: TrainConfig,
    k: int = 5,
    folds: FoldPlan | None = None,
    fold_ids: Sequence[int] | None = None,
    aug: AugmentParams | None = None,
    out_dir=None,
) -> tuple[MetricsReport, list[FoldOutcome]]:
    folds = folds or stratified_kfold(ds.labels, k, cfg.seed)
    report = MetricsReport(spec.label)
    outcomes = []
    for fold in fold_ids if fold_ids is not None else range(folds.k):
        model = spec.build(ds.num_classes, init_seed(cfg, fold))
        fold_dir = Path(out_dir) / f"fold_{fold}" if out_dir is not None else None
        result = train_single(model, ds, folds, fold, cfg, aug, fold_dir)
        test_idx = folds.test_indices(fold)
        preds, metrics = evaluate_fold(result.model, ds, test_idx, aug)
        report.per_fold.append(metrics)
        outcomes.append(FoldOutcome(fold, test_idx, preds, result.best_step))
        log.info("%s fold %d: acc %.4f macro-F1 %.4f", spec.label, fold, metrics.accuracy, metrics.macro_f1)
    return report, outcomes


def cross_validate_cotrain(
    spec: ModelSpec,
    ds_a: PreparedDataset,
    ds_b: PreparedDataset,
    cfg: TrainConfig,
    k: int = 5,
    folds_a: FoldPlan | None = None,
    folds_b: FoldPlan | None = None,
    fold_ids: Sequence[int] | None = None,
    aug: AugmentParams | None = None,
    out_dir=None,
) -> tuple[MetricsReport, MetricsReport]:
    folds_a = folds_a or stratified_kfold(ds_a.labels, k, cfg.seed)
    folds_b = folds_b or stratified_kfold(ds_b.labels, k, cfg.seed)
    rep_a = MetricsReport(f"{spec.label}[{ds_a.manifest.dataset_id}]")
    rep_b = MetricsReport(f"{spec.label}[{ds_b.manifest.dataset_id}]")
    for fold in fold_ids if fold_ids is not None else range(folds_a.k):
        model = spec.build_cotrain(ds_a.num_classes, ds_b.num_classes, init_seed(cfg, fold))
        fold_dir = Path(out_dir) / f"fold_{fold}" if out_dir is not None else None
        result = cotrain(model, ds_a, ds_b, folds_a, folds_b, fold, cfg, aug, fold_dir)
        for state, sub, ds, folds, rep in (
            (result.state_a, "model_a", ds_a, folds_a, rep_a),
            (result.state_b, "model_b", ds_b, folds_b, rep_b),
        ):
            model.load_state_dict(state)
            _, metrics = evaluate_fold(getattr(model, sub)(), ds, folds.test_indices(fold), aug)
            rep.per_fold.append(metrics)
        log.info(
            "cotrain %s fold %d: A macro-F1 %.4f, B macro-F1 %.4f",
            spec.label, fold, rep_a.per_fold[-1].macro_f1, rep_b.per_fold[-1].macro_f1,
        )
    return rep_a, rep_b
