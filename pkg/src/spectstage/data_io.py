"""Dataset manifests, the ``VOL1`` volume format and synthetic phantom data.

Volumes are plain ``float32`` arrays of shape ``(T, H, W)`` (slices, height,
width).  On disk a volume is::

    bytes 0-3    b"VOL1"
    bytes 4-15   T, H, W as little-endian uint32
    payload      T*H*W little-endian float32, row-major (T outermost)

A manifest is a UTF-8 JSON document listing the classes and the patients of
one dataset; volume paths are resolved relative to the manifest file.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

VOLUME_MAGIC = b"VOL1"
_HEADER = struct.Struct("<4s3I")
SEXES = ("male", "female")


class ManifestError(ValueError):
    """Malformed or inconsistent manifest."""


class VolumeFormatError(ValueError):
    """Unreadable or invalid volume file."""


@dataclass
class PatientRecord:
    id: str
    volume_path: str
    age_years: float
    sex: str
    stage: int
    dataset_id: str = ""


@dataclass
class DatasetManifest:
    dataset_id: str
    class_names: list[str]
    patients: list[PatientRecord]
    filter_min_pixels: int
    root: Path = field(default=Path("."), compare=False)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def labels(self) -> np.ndarray:
        return np.array([p.stage for p in self.patients], dtype=np.int64)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    def volume_file(self, patient: PatientRecord) -> Path:
        path = Path(patient.volume_path)
        return path if path.is_absolute() else self.root / path

    def validate(self) -> None:
        if len(self.class_names) < 2:
            raise ManifestError(f"{self.dataset_id}: need at least 2 classes")
        if len(set(self.class_names)) != len(self.class_names):
            raise ManifestError(f"{self.dataset_id}: duplicate class name in {self.class_names}")
        if int(self.filter_min_pixels) < 1:
            raise ManifestError(f"{self.dataset_id}: filter_min_pixels must be positive")
        seen = set()
        for p in self.patients:
            if p.id in seen:
                raise ManifestError(f"patient {p.id!r}: duplicate id")
            seen.add(p.id)
            if not 0 <= p.stage < self.num_classes:
                raise ManifestError(
                    f"patient {p.id!r}: stage {p.stage} outside [0, {self.num_classes - 1}]"
                )
            if not 0.0 <= p.age_years <= 100.0:
                raise ManifestError(f"patient {p.id!r}: age {p.age_years} outside [0, 100]")
            if p.sex not in SEXES:
                raise ManifestError(f"patient {p.id!r}: sex must be one of {SEXES}, got {p.sex!r}")

    def to_json(self) -> dict:
        return {
            "dataset_id": self.dataset_id,
            "class_names": list(self.class_names),
            "filter_min_pixels": int(self.filter_min_pixels),
            "patients": [
                {
                    "id": p.id,
                    "volume": p.volume_path,
                    "age_years": p.age_years,
                    "sex": p.sex,
                    "stage": int(p.stage),
                }
                for p in self.patients
            ],
        }


def _require(obj: dict, key: str, where: str):
    if key not in obj:
        raise ManifestError(f"{where}: missing field {key!r}")
    return obj[key]


def manifest_from_json(doc: dict, root: Path | str = ".") -> DatasetManifest:
    if not isinstance(doc, dict):
        raise ManifestError("manifest must be a JSON object")
    dataset_id = str(_require(doc, "dataset_id", "manifest"))
    patients = []
    for i, rec in enumerate(_require(doc, "patients", dataset_id)):
        where = f"patient {rec.get('id', f'#{i}')!r}" if isinstance(rec, dict) else f"patient #{i}"
        if not isinstance(rec, dict):
            raise ManifestError(f"{where}: expected an object")
        try:
            patients.append(
                PatientRecord(
                    id=str(_require(rec, "id", where)),
                    volume_path=str(_require(rec, "volume", where)),
                    age_years=float(_require(rec, "age_years", where)),
                    sex=str(_require(rec, "sex", where)),
                    stage=int(_require(rec, "stage", where)),
                    dataset_id=dataset_id,
                )
            )
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ManifestError):
                raise
            raise ManifestError(f"{where}: {exc}") from exc
    manifest = DatasetManifest(
        dataset_id=dataset_id,
        class_names=[str(c) for c in _require(doc, "class_names", dataset_id)],
        patients=patients,
        filter_min_pixels=int(_require(doc, "filter_min_pixels", dataset_id)),
        root=Path(root),
    )
    manifest.validate()
    return manifest


def load_manifest(path: str | Path) -> DatasetManifest:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: malformed JSON ({exc})") from exc
    return manifest_from_json(doc, root=path.parent)


def save_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    manifest.validate()
    Path(path).write_text(json.dumps(manifest.to_json(), indent=2) + "\n", encoding="utf-8")


def check_volume(v: np.ndarray) -> np.ndarray:
    """Return ``v`` as float32 after checking rank, extent and finiteness."""
    v = np.asarray(v)
    if v.ndim != 3 or min(v.shape) < 1:
        raise VolumeFormatError(f"volume must have shape (T, H, W) with all dims >= 1, got {v.shape}")
    v = v.astype(np.float32, copy=False)
    if not np.all(np.isfinite(v)):
        raise VolumeFormatError("volume contains non-finite values")
    return v


def read_volume(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise VolumeFormatError(f"{path}: file shorter than header")
    magic, t, h, w = _HEADER.unpack_from(raw)
    if magic != VOLUME_MAGIC:
        raise VolumeFormatError(f"{path}: bad magic {magic!r}")
    n = t * h * w
    payload = len(raw) - _HEADER.size
    if payload < 4 * n:
        raise VolumeFormatError(f"{path}: truncated payload ({payload // 4} of {n} values)")
    data = np.frombuffer(raw, dtype="<f4", count=n, offset=_HEADER.size)
    if not np.all(np.isfinite(data)):
        raise VolumeFormatError(f"{path}: non-finite value in payload")
    return data.astype(np.float32).reshape(t, h, w)


def write_volume(v: np.ndarray, path: str | Path) -> None:
    v = check_volume(v)
    t, h, w = v.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(VOLUME_MAGIC, t, h, w))
        fh.write(np.ascontiguousarray(v, dtype="<f4").tobytes())


@dataclass
class PhantomSpec:
    """Parameters of a synthetic striatum-like dataset.

    Each class ``c`` gets two ellipsoidal blobs whose peak intensity is
    ``1 - 0.8 c / (C - 1)`` and whose volume shrinks linearly with ``c``
    (the in-plane cross-section shrinks, the axial extent is fixed).
    """

    num_classes: int
    counts_per_class: Sequence[int]
    slice_count_range: tuple[int, int] = (20, 28)
    image_size: tuple[int, int] = (128, 128)
    noise_level: float = 0.05
    seed: int = 0
    dataset_id: str = "phantom"
    filter_min_pixels: int = 20

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if len(self.counts_per_class) != self.num_classes:
            raise ValueError("counts_per_class must have num_classes entries")
        if any(int(c) < 1 for c in self.counts_per_class):
            raise ValueError("counts_per_class entries must be positive")
        lo, hi = self.slice_count_range
        if lo > hi:
            raise ValueError("slice_count_range min exceeds max")
        if lo < 5:
            raise ValueError("phantoms need at least 5 slices (2 blank slices at each end)")
        if min(self.image_size) < 8:
            raise ValueError("image_size too small")
        if self.noise_level < 0:
            raise ValueError("noise_level must be >= 0")
        if self.seed < 0:
            raise ValueError("seed must be unsigned")


def phantom_peak(c: int, num_classes: int) -> float:
    return 1.0 - 0.8 * c / (num_classes - 1)


def phantom_volume_fraction(c: int, num_classes: int) -> float:
    """Blob volume relative to class 0 (linear in ``c``)."""
    return 1.0 - 0.8 * c / (num_classes - 1)


def phantom_blob_field(shape: tuple[int, int, int], c: int, num_classes: int) -> np.ndarray:
    """Noise-free blob intensities for a class-``c`` phantom of ``shape``."""
    t, h, w = shape
    # the volume fraction goes entirely into the in-plane area so that every
    # class spans the same slices
    scale = math.sqrt(phantom_volume_fraction(c, num_classes))
    rz = max(0.5 * (t - 4) * 0.95, 0.5)
    ry, rx = 0.16 * h * scale, 0.09 * w * scale
    zz, yy, xx = np.meshgrid(
        np.arange(t, dtype=np.float64),
        np.arange(h, dtype=np.float64),
        np.arange(w, dtype=np.float64),
        indexing="ij",
    )
    zc, yc = (t - 1) / 2.0, (h - 1) / 2.0
    field_ = np.zeros(shape)
    for xc in ((w - 1) / 2.0 - 0.15 * w, (w - 1) / 2.0 + 0.15 * w):
        r2 = ((zz - zc) / rz) ** 2 + ((yy - yc) / ry) ** 2 + ((xx - xc) / rx) ** 2
        field_ = np.maximum(field_, np.clip(1.0 - r2, 0.0, None))
    field_[:2] = 0.0
    field_[t - 2 :] = 0.0
    return phantom_peak(c, num_classes) * field_


def generate_phantom_dataset(spec: PhantomSpec, out_dir: str | Path) -> DatasetManifest:
    """Write one ``.vol`` per patient plus ``manifest.json`` into ``out_dir``."""
    spec.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    num_classes = spec.num_classes
    h, w = spec.image_size
    lo, hi = spec.slice_count_range
    edge_noise = min(spec.noise_level, 0.049) * 0.1
    patients = []
    index = 0
    for c in range(num_classes):
        for _ in range(int(spec.counts_per_class[c])):
            t = int(rng.integers(lo, hi + 1))
            vol = rng.uniform(0.0, spec.noise_level, size=(t, h, w))
            vol[:2] = rng.uniform(0.0, edge_noise, size=(2, h, w))
            vol[t - 2 :] = rng.uniform(0.0, edge_noise, size=(2, h, w))
            vol = np.maximum(vol, phantom_blob_field((t, h, w), c, num_classes)).astype(np.float32)
            age = float(np.clip(55.0 + 5.0 * c + rng.uniform(-5.0, 5.0), 0.0, 100.0))
            sex = "male" if rng.random() < 0.5 else "female"
            pid = f"{spec.dataset_id}-{index:04d}"
            name = f"{pid}.vol"
            write_volume(vol, out_dir / name)
            patients.append(
                PatientRecord(
                    id=pid,
                    volume_path=name,
                    age_years=round(age, 2),
                    sex=sex,
                    stage=c,
                    dataset_id=spec.dataset_id,
                )
            )
            index += 1
    manifest = DatasetManifest(
        dataset_id=spec.dataset_id,
        class_names=[f"stage_{c}" for c in range(num_classes)],
        patients=patients,
        filter_min_pixels=spec.filter_min_pixels,
        root=out_dir,
    )
    save_manifest(manifest, out_dir / "manifest.json")
    return manifest
