"""Detection metrics, BCa bootstrap intervals, and the evaluation report.

AUC uses the rank formula, AUPRC sums precision over recall increments at
every distinct threshold, and specificity is read off at the threshold
that still catches every anomaly. Confidence intervals come from a
bias-corrected and accelerated bootstrap over (score, label) pairs.
"""

import csv
import json
from pathlib import Path
from typing import Callable, Sequence

import jsonschema
import numpy as np
from scipy.stats import norm, rankdata

from .errors import BootstrapDegeneracyError, DegenerateLabelsError, ValidationError
from .scoring import FusionWeights, ScoreTriple, fuse

REDRAW_FACTOR = 10


def _check_scores_labels(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.ndim != 1 or scores.shape != labels.shape:
        raise ValidationError(
            f"scores and labels must be matching 1-D arrays, got {scores.shape} and {labels.shape}"
        )
    if not np.isfinite(scores).all():
        raise ValidationError("scores must be finite")
    bad = set(np.unique(labels).tolist()) - {0, 1}
    if bad:
        raise ValidationError(f"labels must be 0 or 1, found {sorted(bad)}")
    if not ((labels == 1).any() and (labels == 0).any()):
        raise DegenerateLabelsError("need at least one anomalous and one normal subject")
    return scores, labels.astype(np.int64)


def auc(scores, labels) -> float:
    """Area under the ROC curve via the Mann-Whitney rank statistic.

    Ties get midranks, which credits each tied pair exactly 0.5.
    """
    scores, labels = _check_scores_labels(scores, labels)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    ranks = rankdata(scores)
    pos_rank_sum = float(ranks[labels == 1].sum())
    return (pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def auprc(scores, labels) -> float:
    """Area under the precision-recall curve, stepping thresholds downward."""
    scores, labels = _check_scores_labels(scores, labels)
    n_pos = int(labels.sum())
    order = np.argsort(scores)[::-1]
    sorted_scores = scores[order]
    sorted_labels = labels[order]
    tp = np.cumsum(sorted_labels)
    fp = np.cumsum(1 - sorted_labels)
    # keep only the last index of each tied score block
    distinct = np.nonzero(np.diff(sorted_scores, append=-np.inf))[0]
    precision = tp[distinct] / (tp[distinct] + fp[distinct])
    recall = tp[distinct] / n_pos
    prev_recall = np.concatenate([[0.0], recall[:-1]])
    return float(((recall - prev_recall) * precision).sum())


def spec_at_full_sens(scores, labels) -> float:
    """Specificity at the lowest threshold that keeps sensitivity at 1.

    The threshold is the smallest anomalous score; normals strictly below
    it are correctly rejected.
    """
    scores, labels = _check_scores_labels(scores, labels)
    threshold = scores[labels == 1].min()
    normals = scores[labels == 0]
    return float((normals < threshold).mean())


def mae_by_cohort(a_p: Sequence[float], a_c: Sequence[float], labels) -> dict:
    """Mean absolute age error per cohort, with population stds."""
    a_p = np.asarray(a_p, dtype=np.float64)
    a_c = np.asarray(a_c, dtype=np.float64)
    labels = np.asarray(labels)
    if not (a_p.shape == a_c.shape == labels.shape):
        raise ValidationError("a_p, a_c, and labels must have matching shapes")
    errors = np.abs(a_p - a_c)
    out = {}
    for name, side in (("normal", 0), ("anomalous", 1)):
        cohort = errors[labels == side]
        if cohort.size == 0:
            out[f"mae_{name}"] = None
            out[f"std_{name}"] = None
        else:
            out[f"mae_{name}"] = float(cohort.mean())
            out[f"std_{name}"] = float(cohort.std())
    if (
        out["mae_normal"] is not None
        and out["mae_anomalous"] is not None
        and out["mae_normal"] > 0
    ):
        out["mae_ratio"] = out["mae_anomalous"] / out["mae_normal"]
    else:
        out["mae_ratio"] = None
    return out


def _seed_list(seed) -> list[int]:
    if isinstance(seed, (int, np.integer)):
        return [int(seed)]
    return [int(s) for s in seed]


def _bootstrap_indexes(labels: np.ndarray, n_boot: int, seed) -> list[np.ndarray]:
    """Index draws for each replicate, redrawing single-class resamples.

    Replicate i draws from its own substream, so the set of draws does not
    depend on evaluation order. A global budget of REDRAW_FACTOR * n_boot
    draws bounds the redraw loop.
    """
    base = _seed_list(seed)
    n = len(labels)
    budget = REDRAW_FACTOR * n_boot
    draws = 0
    indexes = []
    for i in range(n_boot):
        rng = np.random.default_rng(base + [i])
        while True:
            if draws >= budget:
                raise BootstrapDegeneracyError(
                    f"exceeded {budget} bootstrap draws while avoiding single-class "
                    f"resamples; labels are too imbalanced for n_boot={n_boot}"
                )
            idx = rng.integers(0, n, n)
            draws += 1
            picked = labels[idx]
            if picked.any() and not picked.all():
                break
        indexes.append(idx)
    return indexes


def _jackknife_values(
    statistic: Callable, scores: np.ndarray, labels: np.ndarray
) -> np.ndarray:
    values = []
    for i in range(len(scores)):
        mask = np.ones(len(scores), dtype=bool)
        mask[i] = False
        try:
            values.append(statistic(scores[mask], labels[mask]))
        except DegenerateLabelsError:
            continue
    return np.asarray(values, dtype=np.float64)


def _bca_from_replicates(
    theta_hat: float,
    replicates: np.ndarray,
    jack: np.ndarray,
    n_boot: int,
    level: float,
) -> tuple[float, float]:
    if replicates.max() == replicates.min():
        v = float(replicates[0])
        return (v, v)

    zb = int((replicates < theta_hat).sum())
    if zb == 0 or zb == n_boot:
        z0 = norm.ppf((zb + 0.5) / (n_boot + 1))
    else:
        z0 = norm.ppf(zb / n_boot)

    if len(jack) >= 2:
        jbar = jack.mean()
        diffs = jbar - jack
        denom = (diffs**2).sum() ** 1.5
        accel = float((diffs**3).sum() / (6.0 * denom)) if denom > 0 else 0.0
    else:
        accel = 0.0

    def adjusted_quantile(z_alpha: float) -> float:
        zsum = z0 + z_alpha
        denom = 1.0 - accel * zsum
        if denom <= 0:
            return 1.0 if zsum > 0 else 0.0
        return float(norm.cdf(z0 + zsum / denom))

    alpha = 1.0 - level
    q_lo = adjusted_quantile(norm.ppf(alpha / 2))
    q_hi = adjusted_quantile(norm.ppf(1 - alpha / 2))
    lo = float(np.quantile(replicates, min(max(q_lo, 0.0), 1.0)))
    hi = float(np.quantile(replicates, min(max(q_hi, 0.0), 1.0)))
    return (min(lo, hi), max(lo, hi))


def bca_interval(
    statistic: Callable,
    scores,
    labels,
    n_boot: int = 10_000,
    level: float = 0.95,
    seed=0,
) -> tuple[float, float]:
    """BCa bootstrap confidence interval for statistic(scores, labels).

    Resampling is over (score, label) pairs jointly. Deterministic in
    ``seed``; each replicate uses an independent substream.
    """
    scores, labels = _check_scores_labels(scores, labels)
    if n_boot < 100:
        raise ValidationError(f"n_boot must be at least 100, got {n_boot}")
    if not 0.0 < level < 1.0:
        raise ValidationError(f"level must be inside (0, 1), got {level}")

    theta_hat = float(statistic(scores, labels))
    indexes = _bootstrap_indexes(labels, n_boot, seed)
    replicates = np.array(
        [statistic(scores[idx], labels[idx]) for idx in indexes], dtype=np.float64
    )
    jack = _jackknife_values(statistic, scores, labels)
    return _bca_from_replicates(theta_hat, replicates, jack, n_boot, level)


def format_metric_display(value: float, lo: float, hi: float) -> str:
    """Percent form with rounded CI, e.g. '92.60 (89, 96)'."""
    return f"{100 * value:.2f} ({round(100 * lo):d}, {round(100 * hi):d})"


_METRICS = (
    ("auc", auc),
    ("auprc", auprc),
    ("spec_at_full_sens", spec_at_full_sens),
)

SCHEMA_VERSION = 1

REPORT_SCHEMA = {
    "$schema": "http://json-schema.org/draft-07/schema#",
    "type": "object",
    "required": [
        "schema_version", "n_subjects", "n_normal", "n_anomalous",
        "confidence_level", "n_bootstrap", "bootstrap_seed", "weights",
        "fused", "age", "per_score",
    ],
    "additionalProperties": False,
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "n_subjects": {"type": "integer", "minimum": 2},
        "n_normal": {"type": "integer", "minimum": 1},
        "n_anomalous": {"type": "integer", "minimum": 1},
        "confidence_level": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "n_bootstrap": {"type": "integer", "minimum": 1},
        "bootstrap_seed": {"type": "integer"},
        "weights": {
            "type": "object",
            "required": ["alpha_a", "beta_a", "gamma_a"],
            "additionalProperties": False,
            "properties": {
                "alpha_a": {"type": "number", "minimum": 0},
                "beta_a": {"type": "number", "minimum": 0},
                "gamma_a": {"type": "number", "minimum": 0},
            },
        },
        "fused": {"$ref": "#/definitions/metric_block"},
        "age": {
            "oneOf": [
                {"type": "null"},
                {
                    "type": "object",
                    "required": [
                        "mae_normal", "std_normal", "mae_anomalous",
                        "std_anomalous", "mae_ratio",
                    ],
                    "additionalProperties": False,
                    "properties": {
                        "mae_normal": {"type": ["number", "null"]},
                        "std_normal": {"type": ["number", "null"]},
                        "mae_anomalous": {"type": ["number", "null"]},
                        "std_anomalous": {"type": ["number", "null"]},
                        "mae_ratio": {"type": ["number", "null"]},
                    },
                },
            ]
        },
        "per_score": {
            "type": "object",
            "additionalProperties": {"$ref": "#/definitions/metric_block"},
        },
    },
    "definitions": {
        "metric_entry": {
            "type": "object",
            "required": ["value", "ci_lo", "ci_hi", "display"],
            "additionalProperties": False,
            "properties": {
                "value": {"type": "number"},
                "ci_lo": {"type": "number"},
                "ci_hi": {"type": "number"},
                "display": {"type": "string"},
            },
        },
        "metric_block": {
            "type": "object",
            "required": ["auc", "auprc", "spec_at_full_sens"],
            "additionalProperties": False,
            "properties": {
                "auc": {"$ref": "#/definitions/metric_entry"},
                "auprc": {"$ref": "#/definitions/metric_entry"},
                "spec_at_full_sens": {"$ref": "#/definitions/metric_entry"},
            },
        },
    },
}


def _metric_block(
    scores: np.ndarray,
    labels: np.ndarray,
    n_boot: int,
    seed,
    level: float,
    index_cache: dict,
) -> dict:
    """All three metrics with CIs for one score vector.

    Bootstrap substreams are keyed by metric, not by score vector, so two
    identical score vectors always produce identical rows. Intervals are
    widened to include the point estimate in the rare case the adjusted
    percentiles exclude it, keeping the report invariant ci_lo <= value <= ci_hi.
    """
    block = {}
    for metric_idx, (name, fn) in enumerate(_METRICS):
        if metric_idx not in index_cache:
            index_cache[metric_idx] = _bootstrap_indexes(labels, n_boot, [seed, metric_idx])
        indexes = index_cache[metric_idx]
        value = float(fn(scores, labels))
        replicates = np.array([fn(scores[idx], labels[idx]) for idx in indexes])
        jack = _jackknife_values(fn, scores, labels)
        lo, hi = _bca_from_replicates(value, replicates, jack, n_boot, level)
        lo, hi = min(lo, value), max(hi, value)
        block[name] = {
            "value": value,
            "ci_lo": lo,
            "ci_hi": hi,
            "display": format_metric_display(value, lo, hi),
        }
    return block


def build_report(
    triples: Sequence[ScoreTriple],
    weights: FusionWeights,
    n_boot: int = 10_000,
    seed: int = 0,
    level: float = 0.95,
) -> dict:
    """Evaluate fused and raw scores over one split and validate the schema."""
    if n_boot < 100:
        raise ValidationError(f"n_boot must be at least 100, got {n_boot}")
    if not 0.0 < level < 1.0:
        raise ValidationError(f"level must be inside (0, 1), got {level}")
    labels = np.array([1 if t.label == "anomalous" else 0 for t in triples], dtype=np.int64)
    if len(triples) < 2 or not ((labels == 1).any() and (labels == 0).any()):
        raise DegenerateLabelsError("report needs both normal and anomalous subjects")

    index_cache: dict = {}
    vectors = {
        "fused": fuse(triples, weights),
        "l_rec": np.array([t.l_rec for t in triples], dtype=np.float64),
        "l_kl": np.array([t.l_kl for t in triples], dtype=np.float64),
    }
    if all(t.l_age is not None for t in triples):
        vectors["l_age"] = np.array([t.l_age for t in triples], dtype=np.float64)

    per_score = {
        name: _metric_block(vec, labels, n_boot, seed, level, index_cache)
        for name, vec in sorted(vectors.items())
    }

    if all(t.a_p is not None for t in triples):
        age = mae_by_cohort(
            [t.a_p for t in triples], [t.a_c for t in triples], labels
        )
    else:
        age = None

    report = {
        "schema_version": SCHEMA_VERSION,
        "n_subjects": len(triples),
        "n_normal": int((labels == 0).sum()),
        "n_anomalous": int((labels == 1).sum()),
        "confidence_level": level,
        "n_bootstrap": n_boot,
        "bootstrap_seed": seed,
        "weights": weights.to_dict(),
        "fused": per_score["fused"],
        "age": age,
        "per_score": per_score,
    }
    jsonschema.validate(report, REPORT_SCHEMA)
    return report


def write_report(report: dict, path) -> None:
    """Serialize a report byte-deterministically."""
    Path(path).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")


def write_metric_csv(report: dict, path) -> None:
    """Flat per-score AUC table for plotting: score_name,auc,ci_lo,ci_hi."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["score_name", "auc", "ci_lo", "ci_hi"])
        for name in sorted(report["per_score"]):
            entry = report["per_score"][name]["auc"]
            writer.writerow([
                name,
                format(entry["value"], ".17g"),
                format(entry["ci_lo"], ".17g"),
                format(entry["ci_hi"], ".17g"),
            ])
