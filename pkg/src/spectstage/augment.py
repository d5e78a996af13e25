"""Online augmentation: shared-parameter video transform and depth resampling.

Every slice of a patient receives the same random rotation, then a center
crop and resize bring slices to 72x72; linear interpolation along the slice
axis brings every patient to the same slice count.  Nothing here touches
the disk.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np
from scipy import ndimage


@dataclass
class AugmentParams:
    rotation_deg_max: float = 5.0
    crop_size: tuple[int, int] = (72, 72)
    resize_size: tuple[int, int] = (72, 72)
    target_depth: int = 32
    enabled: bool = True

    def __post_init__(self):
        if self.target_depth < 2:
            raise ValueError("target_depth must be >= 2")

    def for_eval(self) -> "AugmentParams":
        return AugmentParams(
            self.rotation_deg_max, self.crop_size, self.resize_size, self.target_depth, enabled=False
        )


def crop_offset(in_hw: tuple[int, int], crop_hw: tuple[int, int]) -> tuple[int, int]:
    return (in_hw[0] - crop_hw[0]) // 2, (in_hw[1] - crop_hw[1]) // 2


def draw_angle(p: AugmentParams, rng: np.random.Generator) -> float:
    if not p.enabled or p.rotation_deg_max == 0:
        return 0.0
    return float(rng.uniform(-p.rotation_deg_max, p.rotation_deg_max))


def rotate_and_crop(v: np.ndarray, angle_deg: float, crop_hw: tuple[int, int]) -> np.ndarray:
    """Rotate every slice by ``angle_deg`` about the image center and center-crop.

    Only the cropped window is sampled.  Sampling is bilinear and reads
    outside the image as 0.
    """
    t, h, w = v.shape
    ch, cw = crop_hw
    oy, ox = crop_offset((h, w), crop_hw)
    if angle_deg == 0.0:
        return np.array(v[:, oy : oy + ch, ox : ox + cw], dtype=np.float32)
    yc, xc = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(ch) + oy - yc, np.arange(cw) + ox - xc, indexing="ij")
    theta = np.deg2rad(angle_deg)
    cos, sin = np.cos(theta), np.sin(theta)
    # inverse mapping: output pixel -> source pixel
    src_y = cos * yy - sin * xx + yc
    src_x = sin * yy + cos * xx + xc
    zz = np.broadcast_to(np.arange(t, dtype=np.float64)[:, None, None], (t, ch, cw))
    coords = np.stack(
        [zz, np.broadcast_to(src_y, (t, ch, cw)), np.broadcast_to(src_x, (t, ch, cw))]
    )
    out = ndimage.map_coordinates(
        np.asarray(v, dtype=np.float64), coords, order=1, mode="constant", cval=0.0
    )
    return out.astype(np.float32)


def resize_slices(v: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Bilinear in-plane resize (half-pixel centers); identity at equal size."""
    t, h, w = v.shape
    if (h, w) == tuple(size):
        return v
    oh, ow = size
    sy = (np.arange(oh) + 0.5) * h / oh - 0.5
    sx = (np.arange(ow) + 0.5) * w / ow - 0.5
    yy, xx = np.meshgrid(np.clip(sy, 0, h - 1), np.clip(sx, 0, w - 1), indexing="ij")
    zz = np.broadcast_to(np.arange(t, dtype=np.float64)[:, None, None], (t, oh, ow))
    coords = np.stack([zz, np.broadcast_to(yy, (t, oh, ow)), np.broadcast_to(xx, (t, oh, ow))])
    return ndimage.map_coordinates(np.asarray(v, np.float64), coords, order=1).astype(np.float32)


def video_transform(
    v: np.ndarray, p: AugmentParams, rng: np.random.Generator, angle_deg: float | None = None
) -> np.ndarray:
    """Rotate (one angle per patient), center crop, resize, clamp to ``[0, 1]``.

    ``angle_deg`` overrides the random draw.
    """
    _, h, w = v.shape
    if h < p.crop_size[0] or w < p.crop_size[1]:
        raise ValueError(f"slice size {(h, w)} smaller than crop {p.crop_size}")
    theta = draw_angle(p, rng) if angle_deg is None else angle_deg
    out = resize_slices(rotate_and_crop(v, theta, p.crop_size), p.resize_size)
    return np.clip(out, 0.0, 1.0)


def trilinear_resample_depth(v: np.ndarray, target_t: int) -> np.ndarray:
    """Resample the slice axis to ``target_t`` slices (align-corners).

    In-plane size already matches, so trilinear interpolation reduces to a
    linear blend of the two neighbouring source slices.
    """
    v = np.asarray(v)
    t = v.shape[0]
    if t == 1 or target_t == 1:
        return np.repeat(v[:1], target_t, axis=0).astype(np.float32)
    s = np.arange(target_t, dtype=np.float64) * (t - 1) / (target_t - 1)
    lo = np.floor(s).astype(np.int64)
    hi = np.minimum(lo + 1, t - 1)
    frac = (s - lo)[:, None, None]
    v64 = v.astype(np.float64)
    return ((1.0 - frac) * v64[lo] + frac * v64[hi]).astype(np.float32)


def replicate_channels(v: np.ndarray) -> np.ndarray:
    """(T, H, W) -> (T, 3, H, W) with three identical channels."""
    return np.repeat(np.asarray(v)[:, None], 3, axis=1)


def augment_volume(v: np.ndarray, p: AugmentParams, rng: np.random.Generator) -> np.ndarray:
    """Full online pipeline for one preprocessed volume -> (target_depth, 3, H', W')."""
    return replicate_channels(trilinear_resample_depth(video_transform(v, p, rng), p.target_depth))


def patient_rng(seed: int, patient_id: str, step: int) -> np.random.Generator:
    """Independent generator per (seed, patient, step)."""
    return np.random.default_rng([seed, zlib.crc32(patient_id.encode("utf-8")), step])
