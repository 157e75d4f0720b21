"""On-disk and in-memory 3D volumes, dataset manifests, and preprocessing.

Container format: a raw little-endian float32 voxel block (`<name>.vol`),
a JSON sidecar header (`<name>.vol.json`), and a parallel uint8 mask block
(`<name>.mask`). Deliberately trivial so any language can parse it.

All operations are pure functions over immutable volumes; no shared
mutable state, safe to call from parallel workers.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.ndimage import map_coordinates

from .errors import (
    CorruptVolumeError,
    DegenerateVolumeError,
    FormatError,
    StratificationError,
    ValidationError,
)

LABEL_NORMAL = "normal"
LABEL_ANOMALOUS = "anomalous"
LABELS = (LABEL_NORMAL, LABEL_ANOMALOUS)

SPLITS = ("train", "val", "test")

_HEADER_FORMAT = "uad-volume"
_HEADER_VERSION = 1


@dataclass(frozen=True)
class Volume:
    """One 3D scalar field with mask, voxel spacing, and subject metadata.

    `data` is float32, `mask` is bool, both shape (d0, d1, d2). Instances
    are treated as immutable; operations return new volumes.
    """

    data: np.ndarray
    mask: np.ndarray
    spacing_mm: tuple[float, float, float]
    age_years: float
    label: str
    subject_id: str

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.float32)
        mask = np.ascontiguousarray(self.mask, dtype=bool)
        if data.ndim != 3:
            raise ValidationError(f"data must be 3D, got ndim={data.ndim}")
        if data.shape != mask.shape:
            raise ValidationError(
                f"data shape {data.shape} != mask shape {mask.shape}"
            )
        if len(self.spacing_mm) != 3 or any(s <= 0 for s in self.spacing_mm):
            raise ValidationError(f"spacing_mm must be 3 positive reals, got {self.spacing_mm}")
        if not self.age_years > 0:
            raise ValidationError(f"age_years must be > 0, got {self.age_years}")
        if self.label not in LABELS:
            raise ValidationError(f"label must be one of {LABELS}, got {self.label!r}")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "spacing_mm", tuple(float(s) for s in self.spacing_mm))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    subject_id: str
    age_years: float
    label: str
    split: str = ""


@dataclass(frozen=True)
class DatasetManifest:
    """Split assignment for a dataset, written as a single JSON file.

    Paths are stored relative to the manifest location so a dataset
    directory can be moved wholesale.
    """

    entries: tuple[ManifestEntry, ...]
    seed: int
    fractions: tuple[float, float, float]
    n_bins: int
    base_dir: str = field(default="", compare=False)

    def split_entries(self, split: str) -> list[ManifestEntry]:
        if split not in SPLITS:
            raise ValidationError(f"unknown split {split!r}, expected one of {SPLITS}")
        return [e for e in self.entries if e.split == split]

    def resolve_path(self, entry: ManifestEntry) -> str:
        return os.path.join(self.base_dir, entry.path) if self.base_dir else entry.path

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "fractions": list(self.fractions),
            "n_bins": self.n_bins,
            "entries": [
                {
                    "path": e.path,
                    "subject_id": e.subject_id,
                    "age_years": e.age_years,
                    "label": e.label,
                    "split": e.split,
                }
                for e in self.entries
            ],
        }

    def save(self, path: str | Path) -> None:
        payload = json.dumps(self.to_dict(), indent=2, sort_keys=True)
        Path(path).write_text(payload + "\n")

    @staticmethod
    def load(path: str | Path) -> "DatasetManifest":
        path = Path(path)
        try:
            raw = json.loads(path.read_text())
            entries = tuple(
                ManifestEntry(
                    path=e["path"],
                    subject_id=e["subject_id"],
                    age_years=float(e["age_years"]),
                    label=e["label"],
                    split=e["split"],
                )
                for e in raw["entries"]
            )
            return DatasetManifest(
                entries=entries,
                seed=int(raw["seed"]),
                fractions=tuple(float(f) for f in raw["fractions"]),
                n_bins=int(raw["n_bins"]),
                base_dir=str(path.parent),
            )
        except (KeyError, TypeError, json.JSONDecodeError) as exc:
            raise FormatError(f"malformed manifest {path}: {exc}") from exc


def _header_path(path: str | Path) -> Path:
    return Path(str(path) + ".json")


def _mask_path(path: str | Path) -> Path:
    return Path(str(path)).with_suffix(".mask")


def write_volume(v: Volume, path: str | Path) -> None:
    """Write `v` as float32 block + JSON header + uint8 mask block.

    Rejects non-finite voxel data; round-trips finite data bit-exactly.
    """
    path = Path(path)
    if path.suffix != ".vol":
        raise ValidationError(f"volume path must end in .vol, got {path.name!r}")
    if not np.all(np.isfinite(v.data)):
        raise ValidationError("volume data contains non-finite voxels")
    header = {
        "format": _HEADER_FORMAT,
        "version": _HEADER_VERSION,
        "shape": list(v.data.shape),
        "spacing_mm": list(v.spacing_mm),
        "age_years": v.age_years,
        "label": v.label,
        "subject_id": v.subject_id,
        "dtype": "<f4",
        "mask_dtype": "u1",
    }
    path.write_bytes(v.data.astype("<f4", copy=False).tobytes(order="C"))
    _mask_path(path).write_bytes(v.mask.astype(np.uint8).tobytes(order="C"))
    _header_path(path).write_text(json.dumps(header, indent=2, sort_keys=True) + "\n")


def read_volume(path: str | Path) -> Volume:
    """Read a volume written by :func:`write_volume`."""
    path = Path(path)
    try:
        header = json.loads(_header_path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"cannot parse header for {path}: {exc}") from exc
    try:
        if header["format"] != _HEADER_FORMAT:
            raise FormatError(f"unknown container format {header['format']!r}")
        shape = tuple(int(d) for d in header["shape"])
        spacing = tuple(float(s) for s in header["spacing_mm"])
        age = float(header["age_years"])
        label = header["label"]
        subject_id = header["subject_id"]
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"malformed header for {path}: {exc}") from exc

    n_voxels = int(np.prod(shape))
    blob = path.read_bytes()
    if len(blob) != 4 * n_voxels:
        raise CorruptVolumeError(
            f"{path}: expected {4 * n_voxels} data bytes for shape {shape}, got {len(blob)}"
        )
    mask_blob = _mask_path(path).read_bytes()
    if len(mask_blob) != n_voxels:
        raise CorruptVolumeError(
            f"{path}: expected {n_voxels} mask bytes for shape {shape}, got {len(mask_blob)}"
        )
    data = np.frombuffer(blob, dtype="<f4").reshape(shape)
    mask = np.frombuffer(mask_blob, dtype=np.uint8).reshape(shape)
    if not np.all((mask == 0) | (mask == 1)):
        raise CorruptVolumeError(f"{path}: mask block contains values other than 0/1")
    return Volume(
        data=data.copy(),
        mask=mask.astype(bool),
        spacing_mm=spacing,
        age_years=age,
        label=label,
        subject_id=subject_id,
    )


def standardize(v: Volume) -> Volume:
    """Zero-mean / unit-std over the mask (population std); background -> 0."""
    inside = v.data[v.mask].astype(np.float64)
    if inside.size < 2:
        raise DegenerateVolumeError(
            f"mask has {inside.size} voxels; need >= 2 to standardize"
        )
    mean = inside.mean()
    std = inside.std()
    if std == 0.0:
        raise DegenerateVolumeError("zero intensity variance inside mask")
    out = np.where(v.mask, (v.data.astype(np.float64) - mean) / std, 0.0)
    return replace(v, data=out.astype(np.float32))


def downsample(v: Volume, factor: float) -> Volume:
    """Shrink a volume by `factor` >= 1; output dim = ceil(input dim / factor).

    Data is trilinearly interpolated at pixel centers; the mask uses
    nearest-neighbor sampling thresholded at 0.5. Spacing scales by factor.
    """
    if factor < 1:
        raise ValidationError(f"downsample factor must be >= 1, got {factor}")
    out_shape = tuple(math.ceil(d / factor) for d in v.shape)
    axes = [
        (np.arange(n, dtype=np.float64) + 0.5) * factor - 0.5 for n in out_shape
    ]
    grid = np.meshgrid(*axes, indexing="ij")
    coords = np.stack([g.ravel() for g in grid])
    data = map_coordinates(
        v.data.astype(np.float64), coords, order=1, mode="nearest"
    ).reshape(out_shape)
    mask = map_coordinates(
        v.mask.astype(np.float64), coords, order=0, mode="nearest"
    ).reshape(out_shape) >= 0.5
    return replace(
        v,
        data=data.astype(np.float32),
        mask=mask,
        spacing_mm=tuple(s * factor for s in v.spacing_mm),
    )


def crop_to_mask(v: Volume, margin_voxels: int = 0) -> Volume:
    """Crop to the mask bounding box expanded by `margin_voxels`, clipped to bounds."""
    if margin_voxels < 0:
        raise ValidationError(f"margin_voxels must be >= 0, got {margin_voxels}")
    if not v.mask.any():
        raise DegenerateVolumeError("cannot crop to an empty mask")
    idx = np.nonzero(v.mask)
    slices = tuple(
        slice(
            max(0, int(ax.min()) - margin_voxels),
            min(v.shape[i], int(ax.max()) + 1 + margin_voxels),
        )
        for i, ax in enumerate(idx)
    )
    return replace(v, data=v.data[slices].copy(), mask=v.mask[slices].copy())


def _allocate_counts(n: int, fractions: Sequence[float]) -> list[int]:
    """Largest-remainder allocation of n items across fractions."""
    exact = [n * f for f in fractions]
    counts = [int(math.floor(e)) for e in exact]
    remainders = [e - c for e, c in zip(exact, counts)]
    short = n - sum(counts)
    order = sorted(range(len(fractions)), key=lambda i: (-remainders[i], i))
    for i in order[:short]:
        counts[i] += 1
    return counts


def _quantile_bins(ages: np.ndarray, n_bins: int) -> list[np.ndarray]:
    """Index groups for quantile bins over `ages`; duplicate edges collapse."""
    edges = np.quantile(ages, np.linspace(0, 1, n_bins + 1))
    inner = np.unique(edges[1:-1])
    assignment = np.searchsorted(inner, ages, side="right")
    return [np.nonzero(assignment == b)[0] for b in range(len(inner) + 1)]


def stratified_split(
    entries: Sequence[ManifestEntry],
    fractions: tuple[float, float, float],
    n_bins: int = 10,
    seed: int = 0,
) -> DatasetManifest:
    """Assign entries to train/val/test, stratified by age via quantile bins.

    Normal entries are split across all three fractions per bin; anomalous
    entries are split only between val and test (train stays all-normal).
    Deterministic given `seed` and independent of input order.
    """
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValidationError(f"fractions must sum to 1, got {fractions}")
    if any(f < 0 for f in fractions):
        raise ValidationError(f"fractions must be nonnegative, got {fractions}")
    if n_bins < 1:
        raise ValidationError(f"n_bins must be >= 1, got {n_bins}")

    normals = sorted(
        (e for e in entries if e.label == LABEL_NORMAL),
        key=lambda e: (e.age_years, e.subject_id),
    )
    anomalous = sorted(
        (e for e in entries if e.label == LABEL_ANOMALOUS),
        key=lambda e: (e.age_years, e.subject_id),
    )
    if len(normals) + len(anomalous) != len(entries):
        bad = {e.label for e in entries} - set(LABELS)
        raise ValidationError(f"entries carry unknown labels: {sorted(bad)}")

    f_val_test = fractions[1] + fractions[2]
    if anomalous and f_val_test == 0:
        raise StratificationError(
            "anomalous entries cannot be placed: val+test fractions are zero"
        )
    anom_fractions = (
        (fractions[1] / f_val_test, fractions[2] / f_val_test) if f_val_test else (0.0, 0.0)
    )

    assigned: dict[str, str] = {}

    def _split_cohort(cohort, cohort_fractions, split_names, cohort_idx):
        if not cohort:
            return
        ages = np.array([e.age_years for e in cohort], dtype=np.float64)
        bins = _quantile_bins(ages, n_bins)
        n_splits = sum(1 for f in cohort_fractions if f > 0)
        reports = [
            (b, len(members)) for b, members in enumerate(bins) if 0 < len(members) < n_splits
        ]
        if reports:
            detail = ", ".join(f"bin {b}: {n} entries" for b, n in reports)
            raise StratificationError(
                f"{len(reports)} age bin(s) smaller than the {n_splits} requested splits ({detail})"
            )
        for b, members in enumerate(bins):
            if len(members) == 0:
                continue
            rng = np.random.default_rng([seed, cohort_idx, b])
            members = members[rng.permutation(len(members))]
            counts = _allocate_counts(len(members), cohort_fractions)
            start = 0
            for split_name, count in zip(split_names, counts):
                for i in members[start : start + count]:
                    assigned[cohort[i].subject_id] = split_name
                start += count

    _split_cohort(normals, fractions, SPLITS, 0)
    _split_cohort(anomalous, anom_fractions, ("val", "test"), 1)

    out_entries = tuple(
        replace(e, split=assigned[e.subject_id])
        for e in sorted(entries, key=lambda e: e.subject_id)
    )
    return DatasetManifest(
        entries=out_entries, seed=seed, fractions=tuple(fractions), n_bins=n_bins
    )
