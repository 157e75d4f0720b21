#!/usr/bin/env python3
"""Recompute a report's point estimates straight from the scores CSV and the
fusion-weights JSON, using only the standard library, and compare them with
the values in report.json.

This deliberately avoids importing the library so it can serve as an
independent cross-check of the evaluation pipeline. Confidence intervals are
resampling-based and are not recomputed here — only point estimates.

Usage:
    python3 scripts/recompute_report.py --scores scores/test.csv \
        --weights fusion/weights.json --report eval/report.json
"""

import argparse
import csv
import json
import sys
from pathlib import Path

TOL = 1e-9


def read_scores(path: Path) -> list[dict]:
    rows = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            parsed = {"subject_id": row["subject_id"], "label": row["label"]}
            for key in ("a_c", "a_p", "l_rec", "l_kl", "l_age"):
                parsed[key] = None if row[key] == "" else float(row[key])
            rows.append(parsed)
    return rows


def pairwise_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = 0.0
    for p in pos:
        for q in neg:
            total += 1.0 if p > q else (0.5 if p == q else 0.0)
    return total / (len(pos) * len(neg))


def threshold_auprc(scores, labels):
    n_pos = sum(labels)
    area, prev_recall = 0.0, 0.0
    for t in sorted(set(scores), reverse=True):
        tp = sum(1 for s, y in zip(scores, labels) if s >= t and y == 1)
        fp = sum(1 for s, y in zip(scores, labels) if s >= t and y == 0)
        area += (tp / n_pos - prev_recall) * (tp / (tp + fp))
        prev_recall = tp / n_pos
    return area


def spec_at_full_sens(scores, labels):
    threshold = min(s for s, y in zip(scores, labels) if y == 1)
    negatives = [s for s, y in zip(scores, labels) if y == 0]
    return sum(1 for s in negatives if s < threshold) / len(negatives)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--scores", type=Path, required=True)
    parser.add_argument("--weights", type=Path)
    parser.add_argument("--report", type=Path, required=True)
    args = parser.parse_args(argv)

    rows = read_scores(args.scores)
    report = json.loads(args.report.read_text())
    if args.weights:
        w = json.loads(args.weights.read_text())
        alpha, beta, gamma = w["alpha_a"], w["beta_a"], w["gamma_a"]
    else:
        alpha, beta, gamma = 0.0, 1.0, 0.0

    labels = [1 if r["label"] == "anomalous" else 0 for r in rows]
    vectors = {"l_rec": [r["l_rec"] for r in rows],
               "l_kl": [r["l_kl"] for r in rows]}
    if all(r["l_age"] is not None for r in rows):
        vectors["l_age"] = [r["l_age"] for r in rows]

    fused = []
    for r in rows:
        s = 0.0
        for weight, key in ((alpha, "l_rec"), (beta, "l_kl"), (gamma, "l_age")):
            if weight != 0.0:
                s += weight * r[key]
        fused.append(s)
    vectors["fused"] = fused

    metrics = {"auc": pairwise_auc, "auprc": threshold_auprc,
               "spec_at_full_sens": spec_at_full_sens}
    worst, failures = 0.0, []
    for name, values in vectors.items():
        block = report["fused"] if name == "fused" else report["per_score"][name]
        for metric, fn in metrics.items():
            mine = fn(values, labels)
            theirs = block[metric]["value"]
            dev = abs(mine - theirs)
            worst = max(worst, dev)
            status = "ok" if dev <= TOL else "MISMATCH"
            if dev > TOL:
                failures.append(f"{name}/{metric}")
            print(f"{name:>6s} {metric:<18s} recomputed {mine:.12f}  "
                  f"report {theirs:.12f}  |diff| {dev:.2e}  {status}")

    if report.get("age") is not None:
        for cohort, want in (("normal", 0), ("anomalous", 1)):
            errors = [abs(r["a_p"] - r["a_c"]) for r, y in zip(rows, labels)
                      if y == want]
            mine = sum(errors) / len(errors)
            theirs = report["age"][f"mae_{cohort}"]
            dev = abs(mine - theirs)
            worst = max(worst, dev)
            if dev > TOL:
                failures.append(f"age/mae_{cohort}")
            print(f"   age mae_{cohort:<12s} recomputed {mine:.12f}  "
                  f"report {theirs:.12f}  |diff| {dev:.2e}  "
                  f"{'ok' if dev <= TOL else 'MISMATCH'}")

    print(f"\nworst deviation: {worst:.2e} (tolerance {TOL:.0e})")
    if failures:
        print(f"MISMATCHES: {', '.join(failures)}")
        return 1
    print("all point estimates agree")
    return 0


if __name__ == "__main__":
    sys.exit(main())
