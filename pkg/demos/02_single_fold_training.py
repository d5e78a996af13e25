"""Train two slice aggregators on one fold of a phantom dataset and compare.

The mean head (linear) treats every slice alike; attention (attn1) learns a
weighting over slices.  This runs in a few minutes on a laptop CPU.

    python demos/02_single_fold_training.py
"""

import torch

from spectstage.data_io import PhantomSpec, generate_phantom_dataset
from spectstage.evaluation import stratified_kfold
from spectstage.models import build_model
from spectstage.training import PreparedDataset, TrainConfig, evaluate_fold, train_single

torch.set_num_threads(1)
ds = PreparedDataset(generate_phantom_dataset(PhantomSpec(4, [20] * 4, (14, 20), (80, 80), seed=2), "demo_out/fold_demo"))
folds = stratified_kfold(ds.labels, k=5, seed=0)
cfg = TrainConfig(num_steps=60, base_lr=1.5e-3, seed=0)

for name in ("linear", "attn1"):
    torch.manual_seed(0)
    result = train_single(build_model(name, ds.num_classes, width_multiplier=1 / 8), ds, folds, 0, cfg)
    _, m = evaluate_fold(result.model, ds, folds.test_indices(0))
    print(f"{name:7s} best step {result.best_step}, test accuracy {m.accuracy:.3f}, macro F1 {m.macro_f1:.3f}")

    if name == "attn1":
        # which slices did the attention head favour for the first test patient?
        evaluate_fold(result.model, ds, folds.test_indices(0)[:1])
        w = result.model.aggregator.last_weights[0]
        print("attention over slices:", " ".join(f"{v:.2f}" for v in w.tolist()))
