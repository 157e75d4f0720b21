"""Deterministic CPU training loop with resumable checkpoints.

Given the same config and data, two runs produce bit-identical weights;
a run split across a checkpoint resume matches an unbroken run because
both RNG streams (torch noise, numpy shuffling) are saved and restored.
"""

import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from . import __version__
from .errors import (
    ConfigMismatchError,
    ContaminationError,
    DivergenceError,
    ShapeError,
    ValidationError,
)
from .losses import total_loss
from .models import ModelConfig, VolumeVae, build_model
from .volumes import DatasetManifest, read_volume

PRESETS = ("desk", "paper")


@dataclass(frozen=True)
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    manifest_path: str = ""
    out_dir: str = ""
    epochs: int = 30
    learning_rate: float = 1e-3
    batch_size: int = 8
    beta: float = 1.0
    gamma: float = 1.0
    seed: int = 0
    checkpoint_every: int = 10

    def __post_init__(self):
        if self.epochs < 0:
            raise ValidationError(f"epochs must be nonnegative, got {self.epochs}")
        if self.learning_rate <= 0:
            raise ValidationError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ValidationError(f"batch_size must be at least 1, got {self.batch_size}")
        if self.beta < 0:
            raise ValidationError(f"beta must be nonnegative, got {self.beta}")
        if self.gamma < 0:
            raise ValidationError(f"gamma must be nonnegative, got {self.gamma}")
        if self.checkpoint_every < 1:
            raise ValidationError(f"checkpoint_every must be at least 1, got {self.checkpoint_every}")

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "manifest_path": self.manifest_path,
            "out_dir": self.out_dir,
            "epochs": self.epochs,
            "learning_rate": self.learning_rate,
            "batch_size": self.batch_size,
            "beta": self.beta,
            "gamma": self.gamma,
            "seed": self.seed,
            "checkpoint_every": self.checkpoint_every,
        }

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        return TrainConfig(
            model=ModelConfig.from_dict(d["model"]),
            manifest_path=d["manifest_path"],
            out_dir=d["out_dir"],
            epochs=int(d["epochs"]),
            learning_rate=float(d["learning_rate"]),
            batch_size=int(d["batch_size"]),
            beta=float(d["beta"]),
            gamma=float(d["gamma"]),
            seed=int(d["seed"]),
            checkpoint_every=int(d["checkpoint_every"]),
        )


def config_hash(cfg: TrainConfig) -> str:
    """Hash of the trajectory-relevant config.

    Excludes epochs, paths, and checkpoint cadence so a run can be resumed
    with a larger epoch budget or from a relocated directory.
    """
    d = cfg.to_dict()
    for k in ("epochs", "manifest_path", "out_dir", "checkpoint_every"):
        d.pop(k)
    payload = json.dumps(d, sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()


def make_train_config(
    preset: str = "desk",
    variant: str = "vae",
    manifest_path: str = "",
    out_dir: str = "",
    **overrides,
) -> TrainConfig:
    """Build a TrainConfig from a named preset plus field overrides."""
    if preset == "desk":
        model = ModelConfig(variant=variant, input_shape=(32, 32, 32), latent_dim=128,
                            channels=(16, 32, 64, 128))
        cfg = TrainConfig(model=model, manifest_path=manifest_path, out_dir=out_dir,
                          epochs=30, learning_rate=1e-3, batch_size=8)
    elif preset == "paper":
        model = ModelConfig(variant=variant, input_shape=(64, 77, 66), latent_dim=2048,
                            channels=(16, 32, 64, 128))
        cfg = TrainConfig(model=model, manifest_path=manifest_path, out_dir=out_dir,
                          epochs=400, learning_rate=0.001, batch_size=32)
    else:
        raise ValidationError(f"unknown preset {preset!r}, expected one of {PRESETS}")
    if "model" in overrides and not isinstance(overrides["model"], ModelConfig):
        overrides["model"] = ModelConfig.from_dict(overrides["model"])
    return replace(cfg, **overrides) if overrides else cfg


@dataclass
class TrainResult:
    model: VolumeVae
    history: list
    config: TrainConfig
    final_checkpoint: str


def _load_train_tensors(cfg: TrainConfig) -> tuple[torch.Tensor, torch.Tensor]:
    manifest = DatasetManifest.load(cfg.manifest_path)
    entries = manifest.split_entries("train")
    if not entries:
        raise ValidationError(f"manifest {cfg.manifest_path} has no training entries")
    impure = [e.subject_id for e in entries if e.label != "normal"]
    if impure:
        raise ContaminationError(
            f"training split must be all-normal; found anomalous subjects {impure}"
        )
    xs, ages = [], []
    for e in entries:
        v = read_volume(manifest.resolve_path(e))
        if v.shape != cfg.model.input_shape:
            raise ShapeError(
                f"volume {e.subject_id} expected shape {cfg.model.input_shape}, received {v.shape}"
            )
        xs.append(torch.from_numpy(v.data))
        ages.append(v.age_years)
    x = torch.stack(xs).unsqueeze(1)
    return x, torch.tensor(ages, dtype=torch.float32)


def save_checkpoint(
    path: str | Path,
    model: VolumeVae,
    optimizer: torch.optim.Optimizer,
    epoch: int,
    step: int,
    noise_gen: torch.Generator,
    shuffle_rng: np.random.Generator,
    cfg: TrainConfig,
) -> None:
    blob = {
        "model_state": model.state_dict(),
        "optimizer_state": optimizer.state_dict(),
        "epoch": epoch,
        "step": step,
        "torch_rng": noise_gen.get_state(),
        "numpy_rng": shuffle_rng.bit_generator.state,
        "train_config": cfg.to_dict(),
        "config_hash": config_hash(cfg),
        "tool_version": __version__,
    }
    path = Path(path)
    torch.save(blob, path)
    sidecar = {
        "path": path.name,
        "variant": cfg.model.variant,
        "epoch": epoch,
        "step": step,
        "seed": cfg.seed,
        "config_hash": blob["config_hash"],
        "tool_version": __version__,
    }
    Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")


def load_checkpoint(path: str | Path) -> dict:
    """Load a checkpoint blob and verify its embedded config hash."""
    blob = torch.load(path, weights_only=False)
    required = {"model_state", "optimizer_state", "epoch", "step", "torch_rng",
                "numpy_rng", "train_config", "config_hash"}
    missing = required - set(blob)
    if missing:
        raise ConfigMismatchError(f"checkpoint {path} is missing fields {sorted(missing)}")
    stored_cfg = TrainConfig.from_dict(blob["train_config"])
    if config_hash(stored_cfg) != blob["config_hash"]:
        raise ConfigMismatchError(
            f"checkpoint {path} config does not match its recorded hash; file was altered"
        )
    return blob


def _write_config_json(cfg: TrainConfig, out_dir: Path) -> None:
    payload = {
        "train_config": cfg.to_dict(),
        "config_hash": config_hash(cfg),
        "optimizer": "adam",
        "tool_version": __version__,
    }
    (out_dir / "config.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _run_epochs(
    cfg: TrainConfig,
    model: VolumeVae,
    optimizer: torch.optim.Optimizer,
    noise_gen: torch.Generator,
    shuffle_rng: np.random.Generator,
    x: torch.Tensor,
    ages: torch.Tensor,
    start_epoch: int,
    step: int,
    log_mode: str,
) -> TrainResult:
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_config_json(cfg, out_dir)
    history = []
    n = x.shape[0]

    with open(out_dir / "losses.jsonl", log_mode) as log:
        for epoch in range(start_epoch, cfg.epochs):
            perm = shuffle_rng.permutation(n)
            for lo in range(0, n, cfg.batch_size):
                idx = perm[lo : lo + cfg.batch_size]
                xb = x[idx]
                ab = ages[idx]
                noise = torch.randn(
                    (len(idx), cfg.model.latent_dim), generator=noise_gen, dtype=torch.float32
                )
                out = model(xb, age_years=ab, noise=noise)
                breakdown = total_loss(xb, out, ab, cfg.model.variant, beta=cfg.beta, gamma=cfg.gamma)
                if not bool(torch.isfinite(breakdown.total)):
                    raise DivergenceError(
                        f"non-finite total loss at epoch {epoch} step {step}; "
                        f"last saved checkpoint is retained in {out_dir}"
                    )
                optimizer.zero_grad()
                breakdown.total.backward()
                optimizer.step()
                step += 1
                d = breakdown.to_dict()
                record = {
                    "step": step, "epoch": epoch + 1, "l_rec": d["l_rec"],
                    "l_kl": d["l_kl"], "l_age": d["l_age"], "total": d["total"],
                }
                history.append(record)
                log.write(json.dumps(record, sort_keys=True) + "\n")
            log.flush()
            if (epoch + 1) % cfg.checkpoint_every == 0 and (epoch + 1) < cfg.epochs:
                save_checkpoint(out_dir / f"ckpt_{epoch + 1:04d}.bin", model, optimizer,
                                epoch + 1, step, noise_gen, shuffle_rng, cfg)

    final = out_dir / "final.bin"
    save_checkpoint(final, model, optimizer, cfg.epochs, step, noise_gen, shuffle_rng, cfg)
    return TrainResult(model=model, history=history, config=cfg, final_checkpoint=str(final))


def train(cfg: TrainConfig) -> TrainResult:
    """Train from scratch. Writes config.json, losses.jsonl, checkpoints."""
    x, ages = _load_train_tensors(cfg)
    model = build_model(cfg.model, seed=cfg.seed)
    optimizer = torch.optim.Adam(
        model.parameters(), lr=cfg.learning_rate, betas=(0.9, 0.999), eps=1e-8
    )
    noise_gen = torch.Generator().manual_seed(cfg.seed)
    shuffle_rng = np.random.default_rng([cfg.seed, 1])
    return _run_epochs(cfg, model, optimizer, noise_gen, shuffle_rng, x, ages,
                       start_epoch=0, step=0, log_mode="w")


def resume(cfg: TrainConfig, checkpoint_path: str | Path) -> TrainResult:
    """Continue training from a checkpoint up to cfg.epochs total epochs.

    The checkpoint must have been produced under a config with the same
    trajectory hash; epochs, paths, and checkpoint cadence may differ.
    """
    blob = load_checkpoint(checkpoint_path)
    if blob["config_hash"] != config_hash(cfg):
        raise ConfigMismatchError(
            "checkpoint was trained under a different configuration "
            f"(hash {blob['config_hash'][:12]} != {config_hash(cfg)[:12]})"
        )
    start_epoch = int(blob["epoch"])
    if cfg.epochs < start_epoch:
        raise ValidationError(
            f"cfg.epochs is the total target ({cfg.epochs}) but the checkpoint "
            f"already completed {start_epoch} epochs"
        )
    x, ages = _load_train_tensors(cfg)
    model = build_model(cfg.model)
    model.load_state_dict(blob["model_state"])
    optimizer = torch.optim.Adam(
        model.parameters(), lr=cfg.learning_rate, betas=(0.9, 0.999), eps=1e-8
    )
    optimizer.load_state_dict(blob["optimizer_state"])
    noise_gen = torch.Generator()
    noise_gen.set_state(blob["torch_rng"])
    shuffle_rng = np.random.default_rng()
    shuffle_rng.bit_generator.state = blob["numpy_rng"]
    return _run_epochs(cfg, model, optimizer, noise_gen, shuffle_rng, x, ages,
                       start_epoch=start_epoch, step=int(blob["step"]), log_mode="a")
