"""Per-patient intensity normalization, incomplete-slice filtering, covariates."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class EmptyVolume(ValueError):
    """No slice of a volume survived the incomplete-slice filter."""


@dataclass(frozen=True)
class Covariates:
    age_norm: float
    sex_dummy: float

    def as_array(self) -> np.ndarray:
        return np.array([self.age_norm, self.sex_dummy], dtype=np.float32)


def minmax_normalize(v: np.ndarray) -> np.ndarray:
    """Rescale one patient's volume to ``[0, 1]``.

    A constant volume has no dynamic range and maps to all zeros.
    """
    v = np.asarray(v)
    lo = v.min()
    span = v.max() - lo
    if span == 0:
        return np.zeros_like(v, dtype=np.float32)
    out = (v.astype(np.float64) - lo) / span
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def qualifying_pixel_counts(v: np.ndarray, intensity_threshold: float = 0.1) -> np.ndarray:
    return (np.asarray(v) > intensity_threshold).reshape(len(v), -1).sum(axis=1)


def filter_incomplete_slices(
    v: np.ndarray, intensity_threshold: float = 0.1, min_pixels: int = 800
) -> np.ndarray:
    """Drop slices with fewer than ``min_pixels`` voxels above the threshold.

    ``v`` must already be min-max normalized.  Surviving slices keep their
    original order.
    """
    keep = qualifying_pixel_counts(v, intensity_threshold) >= min_pixels
    if not keep.any():
        raise EmptyVolume(
            f"no slice has >= {min_pixels} pixels above {intensity_threshold}"
        )
    return np.asarray(v)[keep]


def encode_covariates(age_years: float, sex: str) -> Covariates:
    if not 0.0 <= age_years <= 100.0:
        raise ValueError(f"age {age_years} outside [0, 100]")
    if sex not in ("male", "female"):
        raise ValueError(f"sex must be 'male' or 'female', got {sex!r}")
    return Covariates(age_years / 100.0, 1.0 if sex == "male" else 0.0)


def preprocess_volume(v: np.ndarray, min_pixels: int, intensity_threshold: float = 0.1) -> np.ndarray:
    """Normalize then filter, the order the intensity threshold assumes."""
    return filter_incomplete_slices(minmax_normalize(v), intensity_threshold, min_pixels)
