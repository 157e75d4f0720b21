"""Per-subject anomaly scores and their fusion into a single number.

Scoring runs each volume through a trained model and records the three
loss terms per subject. Fusion combines them with nonnegative weights;
the KL weight is pinned to 1 and the other two are chosen by a grid
search that maximizes validation AUC.
"""

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .errors import (
    DegenerateValidationError,
    FormatError,
    MissingScoreError,
    PipelineMismatchError,
    ValidationError,
)
from .losses import kl_loss, recon_loss
from .models import VolumeVae
from .volumes import LABELS, DatasetManifest, Volume, read_volume

STANDARDIZATION_TOL = 1e-3

CSV_COLUMNS = ("subject_id", "label", "a_c", "a_p", "l_rec", "l_kl", "l_age")


@dataclass(frozen=True)
class ScoreTriple:
    """One subject's raw anomaly scores (and age prediction, if any)."""

    subject_id: str
    label: str
    a_c: float
    l_rec: float
    l_kl: float
    a_p: Optional[float] = None
    l_age: Optional[float] = None

    def __post_init__(self):
        if self.label not in LABELS:
            raise ValidationError(f"unknown label {self.label!r}, expected one of {LABELS}")
        if self.a_c <= 0:
            raise ValidationError(f"a_c must be positive, got {self.a_c}")
        for name in ("l_rec", "l_kl", "l_age"):
            val = getattr(self, name)
            if val is not None and (not math.isfinite(val) or val < 0):
                raise ValidationError(f"{name} must be finite and nonnegative, got {val}")
        if (self.a_p is None) != (self.l_age is None):
            raise ValidationError("a_p and l_age must be present or absent together")
        if self.l_age is not None and self.l_age != abs(self.a_p - self.a_c):
            raise ValidationError(
                f"l_age must equal |a_p - a_c| exactly: {self.l_age} != |{self.a_p} - {self.a_c}|"
            )


@dataclass(frozen=True)
class FusionWeights:
    alpha_a: float
    beta_a: float = 1.0
    gamma_a: float = 0.0

    def __post_init__(self):
        for name in ("alpha_a", "beta_a", "gamma_a"):
            val = getattr(self, name)
            if not math.isfinite(val) or val < 0:
                raise ValidationError(f"{name} must be finite and nonnegative, got {val}")

    def to_dict(self) -> dict:
        return {"alpha_a": self.alpha_a, "beta_a": self.beta_a, "gamma_a": self.gamma_a}


def _check_pipeline(v: Volume, model: VolumeVae) -> None:
    expected = model.config.input_shape
    if v.shape != expected:
        raise PipelineMismatchError(
            f"volume {v.subject_id}: shape {v.shape} does not match model input {expected}"
        )
    inside = v.data[v.mask].astype(np.float64)
    if inside.size < 2:
        raise PipelineMismatchError(f"volume {v.subject_id}: mask is too small to check")
    if abs(inside.mean()) > STANDARDIZATION_TOL or abs(inside.std() - 1.0) > STANDARDIZATION_TOL:
        raise PipelineMismatchError(
            f"volume {v.subject_id} does not look standardized "
            f"(mask mean {inside.mean():.4f}, std {inside.std():.4f})"
        )


def score_sample(
    model: VolumeVae,
    v: Volume,
    n_latent_samples: int = 0,
    noise_gen: Optional[torch.Generator] = None,
) -> ScoreTriple:
    """Score one volume.

    With ``n_latent_samples == 0`` the posterior mean is decoded; with
    ``n >= 1`` the reconstruction error is averaged over n sampled latents.
    The KL term depends only on the posterior, so sampling never changes it.
    """
    if n_latent_samples < 0:
        raise ValidationError(f"n_latent_samples must be nonnegative, got {n_latent_samples}")
    _check_pipeline(v, model)

    x = torch.from_numpy(v.data).reshape(1, 1, *v.shape)
    age = torch.tensor([v.age_years], dtype=torch.float32)
    model.eval()
    with torch.no_grad():
        if n_latent_samples == 0:
            out = model(x, age_years=age, noise=None)
            l_rec = float(recon_loss(x, out.x_tilde))
        else:
            if noise_gen is None:
                noise_gen = torch.Generator().manual_seed(0)
            rec_vals = []
            out = None
            for _ in range(n_latent_samples):
                noise = torch.randn((1, model.config.latent_dim), generator=noise_gen,
                                    dtype=torch.float32)
                out = model(x, age_years=age, noise=noise)
                rec_vals.append(float(recon_loss(x, out.x_tilde)))
            l_rec = sum(rec_vals) / len(rec_vals)
        l_kl = float(kl_loss(out.latent.z_mu, out.latent.z_log_var))
        a_p = l_age = None
        if out.a_p is not None:
            # age error recomputed in float64 so the ScoreTriple invariant
            # l_age == |a_p - a_c| holds exactly after CSV round trips
            a_p = float(out.a_p[0])
            l_age = abs(a_p - float(v.age_years))

    return ScoreTriple(
        subject_id=v.subject_id, label=v.label, a_c=v.age_years,
        l_rec=l_rec, l_kl=l_kl, a_p=a_p, l_age=l_age,
    )


def score_split(
    model: VolumeVae,
    manifest: DatasetManifest,
    split: str,
    n_latent_samples: int = 0,
    seed: int = 0,
) -> list[ScoreTriple]:
    """Score every volume in one split, in subject order."""
    noise_gen = torch.Generator().manual_seed(seed) if n_latent_samples > 0 else None
    triples = []
    for entry in manifest.split_entries(split):
        v = read_volume(manifest.resolve_path(entry))
        triples.append(score_sample(model, v, n_latent_samples, noise_gen))
    return triples


def fuse(triples: Sequence[ScoreTriple], weights: FusionWeights) -> np.ndarray:
    """Weighted sum of score terms per subject.

    Zero-weight terms are skipped outright, so fusing with (0, 1, 0)
    reproduces the raw KL score bit for bit and never needs the age term.
    """
    out = np.zeros(len(triples), dtype=np.float64)
    for i, t in enumerate(triples):
        s = 0.0
        if weights.alpha_a != 0.0:
            s += weights.alpha_a * t.l_rec
        if weights.beta_a != 0.0:
            s += weights.beta_a * t.l_kl
        if weights.gamma_a != 0.0:
            if t.l_age is None:
                raise MissingScoreError(
                    f"subject {t.subject_id} has no age loss but gamma_a is {weights.gamma_a}"
                )
            s += weights.gamma_a * t.l_age
        out[i] = s
    return out


@dataclass(frozen=True)
class GridSpec:
    """Candidate weight grids for the fusion search."""

    alpha_grid: tuple[float, ...]
    gamma_grid: tuple[float, ...]
    description: str

    @staticmethod
    def geometric() -> "GridSpec":
        alphas = (0.0,) + tuple(0.001 * 10 ** (k / 4) for k in range(14))
        gammas = (0.0,) + tuple(0.01 * 10 ** (k / 4) for k in range(14))
        return GridSpec(
            alpha_grid=tuple(a for a in alphas if a <= 2.0),
            gamma_grid=tuple(g for g in gammas if g <= 20.0),
            description="geometric",
        )

    @staticmethod
    def linear(step: float) -> "GridSpec":
        if step <= 0:
            raise ValidationError(f"linear grid step must be positive, got {step}")
        alphas = tuple(float(a) for a in np.arange(0.0, 2.0 + step / 2, step))
        gstep = 10 * step
        gammas = tuple(float(g) for g in np.arange(0.0, 20.0 + gstep / 2, gstep))
        return GridSpec(alpha_grid=alphas, gamma_grid=gammas, description=f"linear:{step:g}")

    def describe(self) -> str:
        return (
            f"{self.description} ({len(self.alpha_grid)} alpha x "
            f"{len(self.gamma_grid)} gamma candidates)"
        )


def parse_grid(spec: str) -> GridSpec:
    if spec == "geometric":
        return GridSpec.geometric()
    if spec.startswith("linear:"):
        try:
            step = float(spec.split(":", 1)[1])
        except ValueError as exc:
            raise ValidationError(f"bad linear grid step in {spec!r}") from exc
        return GridSpec.linear(step)
    raise ValidationError(f"unknown grid spec {spec!r}, expected 'geometric' or 'linear:<step>'")


@dataclass(frozen=True)
class GridSearchResult:
    weights: FusionWeights
    val_auc: float
    n_evaluated: int
    grid: GridSpec


def grid_search(triples: Sequence[ScoreTriple], grid: Optional[GridSpec] = None) -> GridSearchResult:
    """Pick fusion weights by exhaustive AUC maximization on validation scores.

    Ties keep the earliest candidate in (gamma ascending, alpha ascending)
    order, so the simplest weighting wins. When any subject lacks an age
    loss the gamma grid collapses to {0}.
    """
    from .metrics import auc

    if grid is None:
        grid = GridSpec.geometric()
    labels = np.array([1 if t.label == "anomalous" else 0 for t in triples])
    if len(set(labels.tolist())) < 2:
        raise DegenerateValidationError(
            "validation scores contain a single class; cannot rank fusion candidates"
        )
    gammas = grid.gamma_grid
    if any(t.l_age is None for t in triples):
        gammas = (0.0,)

    best = None
    n_eval = 0
    for gamma in gammas:
        for alpha in grid.alpha_grid:
            w = FusionWeights(alpha_a=alpha, beta_a=1.0, gamma_a=gamma)
            score = auc(fuse(triples, w), labels)
            n_eval += 1
            if best is None or score > best[0]:
                best = (score, w)
    return GridSearchResult(weights=best[1], val_auc=best[0], n_evaluated=n_eval, grid=grid)


def _format_float(x: Optional[float]) -> str:
    return "" if x is None else format(float(x), ".17g")


def export_scores(triples: Sequence[ScoreTriple], path: str | Path) -> None:
    """Write scores as CSV with full float precision."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(CSV_COLUMNS)
        for t in triples:
            writer.writerow([
                t.subject_id, t.label, _format_float(t.a_c), _format_float(t.a_p),
                _format_float(t.l_rec), _format_float(t.l_kl), _format_float(t.l_age),
            ])


def import_scores(path: str | Path) -> list[ScoreTriple]:
    """Read a score CSV back; empty cells become None."""
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None or set(CSV_COLUMNS) - set(reader.fieldnames):
            missing = sorted(set(CSV_COLUMNS) - set(reader.fieldnames or []))
            raise FormatError(f"score CSV {path} is missing columns {missing}")
        triples = []
        for row in reader:
            try:
                triples.append(ScoreTriple(
                    subject_id=row["subject_id"],
                    label=row["label"],
                    a_c=float(row["a_c"]),
                    a_p=float(row["a_p"]) if row["a_p"] else None,
                    l_rec=float(row["l_rec"]),
                    l_kl=float(row["l_kl"]),
                    l_age=float(row["l_age"]) if row["l_age"] else None,
                ))
            except (KeyError, TypeError, ValueError) as exc:
                raise FormatError(f"bad score row {row!r} in {path}: {exc}") from exc
    return triples


def save_weights(result: GridSearchResult, path: str | Path) -> None:
    payload = {
        "alpha_a": result.weights.alpha_a,
        "beta_a": result.weights.beta_a,
        "gamma_a": result.weights.gamma_a,
        "val_auc": result.val_auc,
        "grid_spec": result.grid.description,
        "n_evaluated": result.n_evaluated,
    }
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def load_weights(path: str | Path) -> FusionWeights:
    try:
        raw = json.loads(Path(path).read_text())
        return FusionWeights(
            alpha_a=float(raw["alpha_a"]),
            beta_a=float(raw["beta_a"]),
            gamma_a=float(raw["gamma_a"]),
        )
    except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
        raise FormatError(f"malformed weights file {path}: {exc}") from exc
