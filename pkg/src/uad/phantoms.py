"""Synthetic 3D aging phantoms for exercising the detection pipeline.

A phantom is a smoothed ellipsoid "brain" with a central fluid cavity whose
radius grows with age. The cavity is the only age-dependent feature, so a
model that predicts age from a phantom must have learned to read cavity
size. Anomalies are bright quadratic bumps injected at random locations
inside the tissue.
"""

from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import PlacementError, ValidationError
from .volumes import (
    LABEL_ANOMALOUS,
    LABEL_NORMAL,
    DatasetManifest,
    ManifestEntry,
    Volume,
    standardize,
    stratified_split,
    write_volume,
)

# Cohort age priors (years) used by build_dataset.
HEALTHY_AGE_MEAN = 45.44
HEALTHY_AGE_STD = 16.85
ANOMALOUS_AGE_MEAN = 60.31
ANOMALOUS_AGE_STD = 12.85

TISSUE_LEVEL = 1.0
CAVITY_LEVEL = 0.2


@dataclass(frozen=True)
class PhantomParams:
    """Geometry and texture parameters for phantom generation."""

    size: tuple[int, int, int] = (32, 32, 32)
    base_radius_frac: float = 0.84
    ventricle_base_frac: float = 0.05
    atrophy_rate: float = 0.008
    texture_smoothness: float = 2.0
    texture_strength: float = 0.3
    noise_std: float = 0.05
    age_range_years: tuple[float, float] = (20.0, 90.0)

    def __post_init__(self):
        if len(self.size) != 3 or any(int(d) < 8 for d in self.size):
            raise ValidationError(f"size must be 3 dims of at least 8 voxels, got {self.size}")
        if not 0.0 < self.base_radius_frac <= 1.0:
            raise ValidationError(f"base_radius_frac must be in (0, 1], got {self.base_radius_frac}")
        if self.ventricle_base_frac <= 0.0:
            raise ValidationError(f"ventricle_base_frac must be positive, got {self.ventricle_base_frac}")
        if self.atrophy_rate < 0.0:
            raise ValidationError(f"atrophy_rate must be nonnegative, got {self.atrophy_rate}")
        if self.texture_smoothness <= 0.0:
            raise ValidationError(f"texture_smoothness must be positive, got {self.texture_smoothness}")
        if self.texture_strength < 0.0 or self.noise_std < 0.0:
            raise ValidationError("texture_strength and noise_std must be nonnegative")
        lo, hi = self.age_range_years
        if not 0.0 < lo < hi:
            raise ValidationError(f"age_range_years must satisfy 0 < lo < hi, got {self.age_range_years}")


@dataclass(frozen=True)
class AnomalyParams:
    """Size, brightness, and count of injected lesion blobs."""

    blob_radius_frac: float = 0.45
    intensity_shift: float = 1.8
    count: int = 2

    def __post_init__(self):
        if not 0.0 < self.blob_radius_frac < 1.0:
            raise ValidationError(f"blob_radius_frac must be in (0, 1), got {self.blob_radius_frac}")
        if self.intensity_shift < 0.0:
            raise ValidationError(f"intensity_shift must be nonnegative, got {self.intensity_shift}")
        if self.count < 1:
            raise ValidationError(f"count must be at least 1, got {self.count}")


def ventricle_radius(params: PhantomParams, age_years: float) -> float:
    """Cavity radius in voxels. Strictly increasing in age when atrophy_rate > 0."""
    return (params.ventricle_base_frac + params.atrophy_rate * age_years) * min(params.size) / 2.0


def _center_coords(size: tuple[int, int, int]) -> list[np.ndarray]:
    axes = [np.arange(d, dtype=np.float64) - (d - 1) / 2.0 for d in size]
    return list(np.meshgrid(*axes, indexing="ij"))


def generate_phantom(
    params: PhantomParams,
    age_years: float,
    seed: int | Sequence[int],
    subject_id: str = "phantom",
) -> Volume:
    """Generate one normal phantom at the given age.

    Deterministic in (params, age_years, seed). The brain mask does not
    depend on age; only the cavity radius does.
    """
    lo, hi = params.age_range_years
    if not lo <= age_years <= hi:
        raise ValidationError(f"age {age_years} outside supported range [{lo}, {hi}]")

    size = tuple(int(d) for d in params.size)
    coords = _center_coords(size)
    semi_axes = [params.base_radius_frac * d / 2.0 for d in size]
    rho2 = sum((c / s) ** 2 for c, s in zip(coords, semi_axes))
    mask = rho2 <= 1.0

    r_v = ventricle_radius(params, age_years)
    if r_v >= min(semi_axes):
        raise ValidationError(
            f"cavity radius {r_v:.2f} vox does not fit inside brain (min semi-axis {min(semi_axes):.2f})"
        )
    dist = np.sqrt(sum(c**2 for c in coords))
    cavity = dist <= r_v

    rng = np.random.default_rng(seed)
    # Fixed draw order: texture field first, then observation noise.
    texture = gaussian_filter(rng.standard_normal(size), sigma=params.texture_smoothness)
    texture /= max(texture.std(), 1e-12)
    noise = rng.standard_normal(size)

    data = np.zeros(size, dtype=np.float64)
    data[mask] = TISSUE_LEVEL + params.texture_strength * texture[mask]
    data[cavity & mask] = CAVITY_LEVEL
    data[mask] += params.noise_std * noise[mask]

    return Volume(
        data=data.astype(np.float32),
        mask=mask,
        spacing_mm=(1.0, 1.0, 1.0),
        age_years=float(age_years),
        label=LABEL_NORMAL,
        subject_id=subject_id,
    )


MAX_PLACEMENT_ATTEMPTS = 100


def inject_anomaly(v: Volume, params: AnomalyParams, seed: int | Sequence[int]) -> Volume:
    """Add bright blobs to a normal volume and flip its label.

    Each blob is a quadratic bump of support ``d < r`` placed so the whole
    support lies inside the mask; placement is rejection-sampled with at
    most MAX_PLACEMENT_ATTEMPTS tries per blob.
    """
    if v.label != LABEL_NORMAL:
        raise ValidationError(f"can only inject into a normal volume, got label {v.label!r}")

    r = params.blob_radius_frac * min(v.shape) / 2.0
    r_ceil = int(np.ceil(r))
    mask_idx = np.argwhere(v.mask)
    if len(mask_idx) == 0:
        raise PlacementError("mask is empty, nowhere to place a blob")

    data = v.data.astype(np.float64)
    rng = np.random.default_rng(seed)
    offsets = _center_coords((2 * r_ceil + 1,) * 3)
    ball_dist = np.sqrt(sum(c**2 for c in offsets))
    bump = np.where(ball_dist < r, 1.0 - (ball_dist / r) ** 2, 0.0)
    support = ball_dist < r

    for k in range(params.count):
        placed = False
        for _ in range(MAX_PLACEMENT_ATTEMPTS):
            center = mask_idx[rng.integers(len(mask_idx))]
            lo = center - r_ceil
            hi = center + r_ceil + 1
            if np.any(lo < 0) or np.any(hi > np.asarray(v.shape)):
                continue
            sl = tuple(slice(int(a), int(b)) for a, b in zip(lo, hi))
            if not v.mask[sl][support].all():
                continue
            data[sl] += params.intensity_shift * bump
            placed = True
            break
        if not placed:
            raise PlacementError(
                f"failed to place blob {k + 1}/{params.count} after {MAX_PLACEMENT_ATTEMPTS} attempts"
            )

    return replace(v, data=data.astype(np.float32), label=LABEL_ANOMALOUS)


def _truncated_normal(rng: np.random.Generator, mean: float, std: float, lo: float, hi: float) -> float:
    for _ in range(10_000):
        x = mean + std * rng.standard_normal()
        if lo <= x <= hi:
            return float(x)
    raise ValidationError(
        f"could not draw an age in [{lo}, {hi}] from N({mean}, {std}); range too narrow"
    )


def build_dataset(
    out_dir: str | Path,
    n_normal: int,
    n_anomalous: int,
    params: PhantomParams | None = None,
    anomaly_params: AnomalyParams | None = None,
    fractions: tuple[float, float, float] = (0.7, 0.15, 0.15),
    n_bins: int = 10,
    seed: int = 0,
    age_matched: bool = False,
) -> DatasetManifest:
    """Generate a full phantom dataset on disk with a split manifest.

    Normal ages follow the healthy cohort prior; anomalous ages follow an
    older prior unless ``age_matched`` is set, in which case both cohorts
    share the healthy prior. Volumes are standardized after injection, so
    lesion brightness perturbs the anomalous intensity statistics.
    """
    if n_normal < 10:
        raise ValidationError(f"n_normal must be at least 10, got {n_normal}")
    if n_anomalous < 4:
        raise ValidationError(f"n_anomalous must be at least 4, got {n_anomalous}")
    params = params if params is not None else PhantomParams()
    anomaly_params = anomaly_params if anomaly_params is not None else AnomalyParams()

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lo, hi = params.age_range_years

    rng_n = np.random.default_rng([seed, 0])
    ages_n = [_truncated_normal(rng_n, HEALTHY_AGE_MEAN, HEALTHY_AGE_STD, lo, hi) for _ in range(n_normal)]
    a_mean, a_std = (
        (HEALTHY_AGE_MEAN, HEALTHY_AGE_STD) if age_matched else (ANOMALOUS_AGE_MEAN, ANOMALOUS_AGE_STD)
    )
    rng_a = np.random.default_rng([seed, 1])
    ages_a = [_truncated_normal(rng_a, a_mean, a_std, lo, hi) for _ in range(n_anomalous)]
    if age_matched:
        # sampling error alone can separate small cohorts by years, so pin
        # the anomalous cohort mean to the healthy one
        shift = float(np.mean(ages_n)) - float(np.mean(ages_a))
        ages_a = [min(max(a + shift, lo), hi) for a in ages_a]

    entries = []
    for i, age in enumerate(ages_n):
        sid = f"n{i:04d}"
        v = generate_phantom(params, age, seed=[seed, 2, i], subject_id=sid)
        v = standardize(v)
        write_volume(v, out_dir / f"{sid}.vol")
        entries.append(ManifestEntry(path=f"{sid}.vol", subject_id=sid, age_years=age, label=v.label))
    for i, age in enumerate(ages_a):
        sid = f"a{i:04d}"
        v = generate_phantom(params, age, seed=[seed, 3, i], subject_id=sid)
        v = inject_anomaly(v, anomaly_params, seed=[seed, 4, i])
        v = standardize(v)
        write_volume(v, out_dir / f"{sid}.vol")
        entries.append(ManifestEntry(path=f"{sid}.vol", subject_id=sid, age_years=age, label=v.label))

    manifest = stratified_split(entries, fractions, n_bins=n_bins, seed=seed)
    manifest = replace(manifest, base_dir=str(out_dir))
    manifest.save(out_dir / "manifest.json")
    return manifest
