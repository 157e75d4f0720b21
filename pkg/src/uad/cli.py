"""The `uad` command: gen-data, train, score, fuse-search, evaluate.

Every subcommand merges options as CLI flag > config-file key > default,
runs one pipeline stage, and drops a run_manifest.json recording the
effective options, seed, timestamps, and artifacts next to its outputs.
Exit codes: 0 success, 2 usage/validation, 3 runtime failure.
"""

import argparse
import hashlib
import json
import sys
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from .errors import (
    BootstrapDegeneracyError,
    ConfigMismatchError,
    ContaminationError,
    CorruptVolumeError,
    DegenerateLabelsError,
    DegenerateValidationError,
    DegenerateVolumeError,
    DivergenceError,
    FormatError,
    MissingScoreError,
    PipelineMismatchError,
    PlacementError,
    ShapeError,
    StratificationError,
    UnsupportedVariantError,
    ValidationError,
)

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_RUNTIME = 3

_VALIDATION_FAMILY = (
    ValidationError, FormatError, CorruptVolumeError, DegenerateVolumeError,
    StratificationError, ShapeError, UnsupportedVariantError, ContaminationError,
    ConfigMismatchError, PipelineMismatchError, MissingScoreError,
    DegenerateValidationError, DegenerateLabelsError, FileNotFoundError,
)
_RUNTIME_FAMILY = (DivergenceError, PlacementError, BootstrapDegeneracyError)

_CLI_VARIANTS = {"vae": "vae", "vae-ac": "vae_ac", "vae-ap": "vae_ap"}


@dataclass
class RunManifest:
    """Provenance record written next to each subcommand's outputs."""

    command: str
    options: dict
    seed: int
    started_at: str
    finished_at: str
    artifacts: list = field(default_factory=list)
    tool_version: str = __version__

    @property
    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.options, sort_keys=True).encode()).hexdigest()

    def write(self, out_dir: Path) -> Path:
        payload = {
            "command": self.command,
            "options": self.options,
            "config_hash": self.config_hash,
            "seed": self.seed,
            "started_at": self.started_at,
            "finished_at": self.finished_at,
            "artifacts": self.artifacts,
            "tool_version": self.tool_version,
        }
        out_dir.mkdir(parents=True, exist_ok=True)
        path = out_dir / "run_manifest.json"
        path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
        return path


def _parse_triple(text) -> list:
    if isinstance(text, (list, tuple)):
        parts = list(text)
    else:
        parts = str(text).split(",")
    if len(parts) != 3:
        raise ValidationError(f"expected three comma-separated values, got {text!r}")
    return parts


def _parse_shape(text) -> tuple[int, int, int]:
    try:
        return tuple(int(p) for p in _parse_triple(text))
    except ValueError as exc:
        raise ValidationError(f"bad shape {text!r}: {exc}") from exc


def _parse_fractions(text) -> tuple[float, float, float]:
    try:
        return tuple(float(p) for p in _parse_triple(text))
    except ValueError as exc:
        raise ValidationError(f"bad fractions {text!r}: {exc}") from exc


_DEFAULTS = {
    "gen-data": {
        "out": None, "n_normal": 100, "n_anomalous": 40,
        "fractions": [0.7, 0.15, 0.15], "n_bins": 10, "seed": 0,
        "age_matched": False, "force": False, "size": [32, 32, 32],
        "noise_std": 0.05, "blob_radius_frac": 0.45, "intensity_shift": 1.8,
        "blob_count": 2,
    },
    "train": {
        "manifest": None, "out": None, "variant": "vae", "preset": "desk",
        "epochs": None, "learning_rate": None, "batch_size": None,
        "beta": None, "gamma": None, "seed": None, "checkpoint_every": None,
        "latent_dim": None, "input_shape": None, "raw_age": False, "resume": None,
    },
    "score": {
        "checkpoint": None, "manifest": None, "split": "test", "out": None,
        "sample_latent": 0, "seed": 0,
    },
    "fuse-search": {
        "val_scores": None, "out": None, "grid": "geometric",
    },
    "evaluate": {
        "scores": None, "weights": None, "out": None, "n_boot": 10000,
        "boot_seed": 0, "level": 0.95, "csv": None, "plot": None,
    },
}


def _require(opts: dict, *keys: str) -> None:
    missing = [k for k in keys if opts.get(k) in (None, "")]
    if missing:
        flags = ", ".join("--" + k.replace("_", "-") for k in missing)
        raise ValidationError(f"missing required option(s): {flags}")


def _merge_options(command: str, args: argparse.Namespace) -> dict:
    opts = dict(_DEFAULTS[command])
    config_path = getattr(args, "config", None)
    if config_path:
        try:
            raw = json.loads(Path(config_path).read_text())
        except json.JSONDecodeError as exc:
            raise FormatError(f"config file {config_path} is not valid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise FormatError(f"config file {config_path} must hold a JSON object")
        normalized = {str(k).replace("-", "_"): v for k, v in raw.items()}
        unknown = sorted(set(normalized) - set(opts))
        if unknown:
            raise ValidationError(f"unknown config keys for {command}: {unknown}")
        opts.update(normalized)
    for key in opts:
        value = getattr(args, key, None)
        if value is not None:
            opts[key] = value
    return opts


def cmd_gen_data(opts: dict) -> tuple[Path, list]:
    from .phantoms import AnomalyParams, PhantomParams, build_dataset

    _require(opts, "out")
    out_dir = Path(opts["out"])
    if out_dir.exists() and any(out_dir.iterdir()) and not opts["force"]:
        raise ValidationError(f"output directory {out_dir} not empty (use --force to overwrite)")

    size = _parse_shape(opts["size"])
    opts["size"] = list(size)
    opts["fractions"] = [float(f) for f in _parse_fractions(opts["fractions"])]
    params = PhantomParams(size=size, noise_std=float(opts["noise_std"]))
    anomaly = AnomalyParams(
        blob_radius_frac=float(opts["blob_radius_frac"]),
        intensity_shift=float(opts["intensity_shift"]),
        count=int(opts["blob_count"]),
    )
    manifest = build_dataset(
        out_dir,
        n_normal=int(opts["n_normal"]),
        n_anomalous=int(opts["n_anomalous"]),
        params=params,
        anomaly_params=anomaly,
        fractions=tuple(opts["fractions"]),
        n_bins=int(opts["n_bins"]),
        seed=int(opts["seed"]),
        age_matched=bool(opts["age_matched"]),
    )
    print(f"wrote {len(manifest.entries)} volumes and manifest.json to {out_dir}")
    return out_dir, ["manifest.json"]


def cmd_train(opts: dict) -> tuple[Path, list]:
    from .training import make_train_config, resume, train

    _require(opts, "manifest", "out")
    variant = _CLI_VARIANTS.get(opts["variant"])
    if variant is None:
        raise UnsupportedVariantError(
            f"unknown variant {opts['variant']!r}, expected one of {sorted(_CLI_VARIANTS)}"
        )
    cfg = make_train_config(
        preset=opts["preset"], variant=variant,
        manifest_path=str(opts["manifest"]), out_dir=str(opts["out"]),
    )
    model_overrides = {}
    if opts["latent_dim"] is not None:
        model_overrides["latent_dim"] = int(opts["latent_dim"])
    if opts["input_shape"] is not None:
        model_overrides["input_shape"] = _parse_shape(opts["input_shape"])
        opts["input_shape"] = list(model_overrides["input_shape"])
    if opts["raw_age"]:
        model_overrides["age_normalizer"] = 1.0
    if model_overrides:
        cfg = replace(cfg, model=replace(cfg.model, **model_overrides))
    field_overrides = {}
    for key, attr in (
        ("epochs", "epochs"), ("learning_rate", "learning_rate"),
        ("batch_size", "batch_size"), ("beta", "beta"), ("gamma", "gamma"),
        ("seed", "seed"), ("checkpoint_every", "checkpoint_every"),
    ):
        if opts[key] is not None:
            field_overrides[attr] = opts[key]
    if field_overrides:
        cfg = replace(cfg, **field_overrides)

    result = resume(cfg, opts["resume"]) if opts["resume"] else train(cfg)

    # echo the resolved hyperparameters into the run manifest
    opts.update({
        "epochs": cfg.epochs, "learning_rate": cfg.learning_rate,
        "batch_size": cfg.batch_size, "beta": cfg.beta, "gamma": cfg.gamma,
        "seed": cfg.seed, "checkpoint_every": cfg.checkpoint_every,
        "latent_dim": cfg.model.latent_dim, "input_shape": list(cfg.model.input_shape),
        "optimizer": "adam",
    })
    last = result.history[-1] if result.history else None
    if last is not None:
        print(f"trained {cfg.epochs} epochs; final total loss {last['total']:.6f}")
    else:
        print("no epochs run; initial weights saved")
    print(f"final checkpoint: {result.final_checkpoint}")
    return Path(cfg.out_dir), ["config.json", "losses.jsonl", "final.bin"]


def cmd_score(opts: dict) -> tuple[Path, list]:
    from .models import build_model
    from .scoring import export_scores, score_split
    from .training import TrainConfig, load_checkpoint
    from .volumes import DatasetManifest

    _require(opts, "checkpoint", "manifest", "out")
    blob = load_checkpoint(opts["checkpoint"])
    cfg = TrainConfig.from_dict(blob["train_config"])
    model = build_model(cfg.model)
    model.load_state_dict(blob["model_state"])
    manifest = DatasetManifest.load(opts["manifest"])
    triples = score_split(
        model, manifest, opts["split"],
        n_latent_samples=int(opts["sample_latent"]), seed=int(opts["seed"]),
    )
    out = Path(opts["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    export_scores(triples, out)
    print(f"scored {len(triples)} {opts['split']} subjects -> {out}")
    return out.parent, [out.name]


def cmd_fuse_search(opts: dict) -> tuple[Path, list]:
    from .scoring import grid_search, import_scores, parse_grid, save_weights

    _require(opts, "val_scores", "out")
    triples = import_scores(opts["val_scores"])
    result = grid_search(triples, parse_grid(opts["grid"]))
    out = Path(opts["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    save_weights(result, out)
    w = result.weights
    print(
        f"best weights alpha_a={w.alpha_a:g} beta_a={w.beta_a:g} gamma_a={w.gamma_a:g} "
        f"val_auc={result.val_auc:.4f} ({result.n_evaluated} candidates)"
    )
    return out.parent, [out.name]


def _plot_report(report: dict, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    names = sorted(report["per_score"])
    values = [report["per_score"][n]["auc"]["value"] for n in names]
    lo_err = [values[i] - report["per_score"][n]["auc"]["ci_lo"] for i, n in enumerate(names)]
    hi_err = [report["per_score"][n]["auc"]["ci_hi"] - values[i] for i, n in enumerate(names)]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar(names, values, yerr=[lo_err, hi_err], capsize=4, color="#4878a8")
    ax.set_ylabel("AUC")
    ax.set_ylim(0, 1.05)
    ax.set_title("Anomaly score discriminative performance")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def cmd_evaluate(opts: dict) -> tuple[Path, list]:
    from .metrics import build_report, write_metric_csv, write_report
    from .scoring import FusionWeights, import_scores, load_weights

    _require(opts, "scores", "out")
    triples = import_scores(opts["scores"])
    if opts["weights"]:
        weights = load_weights(opts["weights"])
    else:
        weights = FusionWeights(alpha_a=0.0, beta_a=1.0, gamma_a=0.0)
    report = build_report(
        triples, weights,
        n_boot=int(opts["n_boot"]), seed=int(opts["boot_seed"]), level=float(opts["level"]),
    )
    out = Path(opts["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    write_report(report, out)
    artifacts = [out.name]
    if opts["csv"]:
        write_metric_csv(report, opts["csv"])
        artifacts.append(Path(opts["csv"]).name)
    if opts["plot"]:
        _plot_report(report, Path(opts["plot"]))
        artifacts.append(Path(opts["plot"]).name)

    for metric in ("auc", "auprc", "spec_at_full_sens"):
        print(f"fused {metric}: {report['fused'][metric]['display']}")
    age = report["age"]
    if age is not None:
        print(
            f"age MAE normal {age['mae_normal']:.2f} +/- {age['std_normal']:.2f}, "
            f"anomalous {age['mae_anomalous']:.2f} +/- {age['std_anomalous']:.2f}"
        )
    return out.parent, artifacts


_HANDLERS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "score": cmd_score,
    "fuse-search": cmd_fuse_search,
    "evaluate": cmd_evaluate,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="uad",
        description="Age-informed unsupervised anomaly detection for 3D volumes.",
    )
    parser.add_argument("--version", action="version", version=f"uad {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", help="JSON file with keys matching flag names")

    p = sub.add_parser("gen-data", help="generate a synthetic phantom dataset")
    add_common(p)
    p.add_argument("--out", help="output dataset directory")
    p.add_argument("--n-normal", type=int, dest="n_normal")
    p.add_argument("--n-anomalous", type=int, dest="n_anomalous")
    p.add_argument("--fractions", help="train,val,test e.g. 0.7,0.15,0.15")
    p.add_argument("--n-bins", type=int, dest="n_bins")
    p.add_argument("--seed", type=int)
    p.add_argument("--age-matched", action="store_const", const=True, dest="age_matched",
                   help="sample anomalous ages from the healthy prior")
    p.add_argument("--force", action="store_const", const=True,
                   help="allow writing into a non-empty directory")
    p.add_argument("--size", help="volume shape e.g. 32,32,32")
    p.add_argument("--noise-std", type=float, dest="noise_std")
    p.add_argument("--blob-radius-frac", type=float, dest="blob_radius_frac")
    p.add_argument("--intensity-shift", type=float, dest="intensity_shift")
    p.add_argument("--blob-count", type=int, dest="blob_count")

    p = sub.add_parser("train", help="train a model variant on the train split")
    add_common(p)
    p.add_argument("--manifest", help="dataset manifest.json")
    p.add_argument("--out", help="run output directory")
    p.add_argument("--variant", choices=sorted(_CLI_VARIANTS))
    p.add_argument("--preset", choices=("desk", "paper"))
    p.add_argument("--epochs", type=int)
    p.add_argument("--learning-rate", "--lr", type=float, dest="learning_rate")
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--beta", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--checkpoint-every", type=int, dest="checkpoint_every")
    p.add_argument("--latent-dim", type=int, dest="latent_dim")
    p.add_argument("--input-shape", dest="input_shape", help="e.g. 32,32,32")
    p.add_argument("--raw-age", action="store_const", const=True, dest="raw_age",
                   help="multiply latents by raw years (age_normalizer=1)")
    p.add_argument("--resume", help="checkpoint to continue from")

    p = sub.add_parser("score", help="score one split with a trained model")
    add_common(p)
    p.add_argument("--checkpoint", help="trained checkpoint (.bin)")
    p.add_argument("--manifest", help="dataset manifest.json")
    p.add_argument("--split", choices=("train", "val", "test"))
    p.add_argument("--out", help="output scores CSV")
    p.add_argument("--sample-latent", type=int, dest="sample_latent",
                   help="average reconstruction error over n sampled latents (default: posterior mean)")
    p.add_argument("--seed", type=int)

    p = sub.add_parser("fuse-search", help="grid-search fusion weights on validation scores")
    add_common(p)
    p.add_argument("--val-scores", dest="val_scores", help="validation scores CSV")
    p.add_argument("--out", help="output weights JSON")
    p.add_argument("--grid", help="'geometric' or 'linear:<step>'")

    p = sub.add_parser("evaluate", help="build the evaluation report from scores")
    add_common(p)
    p.add_argument("--scores", help="scores CSV to evaluate")
    p.add_argument("--weights", help="fusion weights JSON (default: KL only)")
    p.add_argument("--out", help="output report JSON")
    p.add_argument("--n-boot", type=int, dest="n_boot")
    p.add_argument("--boot-seed", type=int, dest="boot_seed")
    p.add_argument("--level", type=float, help="confidence level, default 0.95")
    p.add_argument("--csv", help="also write per-score AUC bar-chart CSV")
    p.add_argument("--plot", help="also render a bar chart PNG")

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code else EXIT_OK

    started = datetime.now(timezone.utc).isoformat()
    try:
        opts = _merge_options(args.command, args)
        manifest_dir, artifacts = _HANDLERS[args.command](opts)
        manifest = RunManifest(
            command=args.command,
            options=opts,
            seed=int(opts.get("seed", opts.get("boot_seed", 0)) or 0),
            started_at=started,
            finished_at=datetime.now(timezone.utc).isoformat(),
            artifacts=artifacts,
        )
        manifest.write(manifest_dir)
        return EXIT_OK
    except _RUNTIME_FAMILY as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except _VALIDATION_FAMILY as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
