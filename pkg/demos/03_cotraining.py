"""Cotrain a small imbalanced dataset with a larger one through a shared trunk.

Both datasets pass through the layers before the third max-pool; each keeps
its own remaining layers and classifier.  Compare against training the small
dataset alone on the same fold.

    python demos/03_cotraining.py
"""

import torch

from spectstage.data_io import PhantomSpec, generate_phantom_dataset
from spectstage.pipeline import ModelSpec, cross_validate, cross_validate_cotrain
from spectstage.training import PreparedDataset, TrainConfig

torch.set_num_threads(1)
small = PreparedDataset(generate_phantom_dataset(
    PhantomSpec(6, [6, 22, 27, 53, 87, 7], (14, 20), (80, 80), seed=11, dataset_id="small"), "demo_out/small"))
large = PreparedDataset(generate_phantom_dataset(
    PhantomSpec(4, [40] * 4, (14, 20), (80, 80), seed=7, dataset_id="large"), "demo_out/large"))

spec = ModelSpec("linear", width_multiplier=1 / 8)
cfg = TrainConfig(num_steps=60, base_lr=1.5e-3, seed=0)
alone, _ = cross_validate(spec, small, cfg, fold_ids=[0])
with_large, large_rep = cross_validate_cotrain(spec, small, large, cfg, fold_ids=[0])
print(f"small dataset, fold 0 macro F1: alone {alone.mean('macro_f1'):.3f}, cotrained {with_large.mean('macro_f1'):.3f}")
print(f"large dataset while cotraining: macro F1 {large_rep.mean('macro_f1'):.3f}")
