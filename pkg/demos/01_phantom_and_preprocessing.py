"""Generate a small synthetic dataset and look at what preprocessing does to it.

    python demos/01_phantom_and_preprocessing.py [out_dir]
"""

import sys
from pathlib import Path

import numpy as np

from spectstage.augment import AugmentParams, augment_volume, patient_rng
from spectstage.data_io import PhantomSpec, generate_phantom_dataset, read_volume
from spectstage.preprocess import minmax_normalize, preprocess_volume, qualifying_pixel_counts

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out/phantom")
manifest = generate_phantom_dataset(PhantomSpec(4, [5, 5, 5, 5], (14, 20), (80, 80), seed=1), out)
print(f"{len(manifest.patients)} patients, classes {manifest.class_names}, counts {manifest.class_counts().tolist()}")

# one patient per class: raw peak, slices kept by the incomplete-slice filter, blob area after normalization
for c in range(manifest.num_classes):
    p = next(p for p in manifest.patients if p.stage == c)
    raw = read_volume(manifest.volume_file(p))
    counts = qualifying_pixel_counts(minmax_normalize(raw))
    kept = preprocess_volume(raw, manifest.filter_min_pixels)
    print(
        f"class {c}: {raw.shape[0]} slices, raw peak {raw.max():.2f}, "
        f"kept {kept.shape[0]} slices, bright pixels per slice {counts.min()}..{counts.max()}"
    )

# the model sees (32, 3, 72, 72) after online augmentation; eval mode skips the rotation
p = manifest.patients[0]
v = preprocess_volume(read_volume(manifest.volume_file(p)), manifest.filter_min_pixels)
train_view = augment_volume(v, AugmentParams(), patient_rng(0, p.id, step=0))
eval_view = augment_volume(v, AugmentParams().for_eval(), np.random.default_rng(0))
print(f"model input {train_view.shape}; train/eval views differ by {np.abs(train_view - eval_view).mean():.4f} on average")
