#!/usr/bin/env python3
"""Run the full desk-scale experiment: synthesize a cohort, train all three
model variants, score the held-out splits, search fusion weights on the
validation split, and evaluate each variant on the test split.

Everything goes through the `uad` CLI entry point, so this doubles as an
end-to-end smoke test of the command surface.

Usage:
    python3 scripts/run_desk_experiment.py --out runs/desk [--seed 0]
"""

import argparse
import json
import sys
import time
from pathlib import Path

from uad.cli import main as uad

VARIANTS = ("vae", "vae-ac", "vae-ap")


def run(args: list[str]) -> None:
    rc = uad(args)
    if rc != 0:
        raise SystemExit(f"step failed (rc={rc}): uad {' '.join(args)}")


def pipeline(root: Path, variant: str, manifest: Path, seed: int) -> dict:
    tag = variant.replace("-", "_")
    run_dir = root / f"train_{tag}"
    run(["train", "--manifest", str(manifest), "--out", str(run_dir),
         "--variant", variant, "--preset", "desk", "--seed", str(seed)])

    scores = {}
    for split in ("val", "test"):
        out = root / f"scores_{tag}" / f"{split}.csv"
        run(["score", "--checkpoint", str(run_dir / "final.bin"),
             "--manifest", str(manifest), "--split", split, "--out", str(out)])
        scores[split] = out

    weights = root / f"fusion_{tag}" / "weights.json"
    run(["fuse-search", "--val-scores", str(scores["val"]), "--out", str(weights)])

    report = root / f"eval_{tag}" / "report.json"
    run(["evaluate", "--scores", str(scores["test"]), "--weights", str(weights),
         "--out", str(report), "--n-boot", "2000", "--boot-seed", str(seed),
         "--csv", str(root / f"eval_{tag}" / "aucs.csv")])
    return {"weights": weights, "report": report}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", type=Path, default=Path("runs/desk"))
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)

    root = args.out
    started = time.perf_counter()

    data_dir = root / "data"
    if not (data_dir / "manifest.json").exists():
        run(["gen-data", "--out", str(data_dir), "--seed", str(args.seed)])
    manifest = data_dir / "manifest.json"

    results = {v: pipeline(root, v, manifest, args.seed) for v in VARIANTS}

    print()
    print("=== desk run summary ===")
    aucs = {}
    for variant, artifacts in results.items():
        report = json.loads(artifacts["report"].read_text())
        weights = json.loads(artifacts["weights"].read_text())
        fused = report["fused"]
        aucs[variant] = fused["auc"]["value"]
        line = (f"{variant:7s} test AUC {fused['auc']['display']:>16s}  "
                f"AUPRC {fused['auprc']['display']:>16s}  "
                f"spec@full-sens {fused['spec_at_full_sens']['display']:>16s}  "
                f"weights (a={weights['alpha_a']:g}, b=1, g={weights['gamma_a']:g})")
        print(line)
        if report["age"] is not None:
            age = report["age"]
            print(f"{'':7s} age MAE normal {age['mae_normal']:.2f}y, "
                  f"anomalous {age['mae_anomalous']:.2f}y")

    ordering = aucs["vae-ap"] >= aucs["vae"]
    print(f"expected ordering vae-ap >= vae on test AUC: "
          f"{'holds' if ordering else 'VIOLATED'} "
          f"({aucs['vae-ap']:.4f} vs {aucs['vae']:.4f})")
    print(f"total wall time: {time.perf_counter() - started:.0f}s")
    print(f"artifacts under {root}/")
    return 0


if __name__ == "__main__":
    sys.exit(main())
