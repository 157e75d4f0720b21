"""3D convolutional VAE with optional age conditioning or age prediction.

Variants share one architecture:

- ``vae``: plain VAE.
- ``vae_ac``: the sampled latent is scaled by the subject's normalized age
  before decoding, so the decoder is told how old the subject is.
- ``vae_ap``: an affine head on the flattened encoder features predicts
  age, trained jointly with the VAE objective.

Every strided stage halves each spatial dimension with ceil rounding; the
decoder inverts the exact spatial chain via per-axis output padding.
"""

import math
from dataclasses import dataclass
from typing import Optional

import torch
from torch import nn

from .errors import ShapeError, UnsupportedVariantError, ValidationError

VARIANTS = ("vae", "vae_ac", "vae_ap")


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "vae"
    input_shape: tuple[int, int, int] = (32, 32, 32)
    latent_dim: int = 128
    channels: tuple[int, ...] = (16, 32, 64, 128)
    age_normalizer: float = 100.0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise UnsupportedVariantError(
                f"unknown variant {self.variant!r}, expected one of {VARIANTS}"
            )
        if len(self.input_shape) != 3 or any(int(d) < 1 for d in self.input_shape):
            raise ValidationError(f"input_shape must be 3 positive dims, got {self.input_shape}")
        if self.latent_dim < 1:
            raise ValidationError(f"latent_dim must be positive, got {self.latent_dim}")
        if len(self.channels) < 1 or any(int(c) < 1 for c in self.channels):
            raise ValidationError(f"channels must be a nonempty tuple of positive ints, got {self.channels}")
        if self.age_normalizer <= 0:
            raise ValidationError(f"age_normalizer must be positive, got {self.age_normalizer}")
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))

    def spatial_chain(self) -> list[tuple[int, int, int]]:
        """Spatial shape after each encoder stage, starting at the input."""
        chain = [self.input_shape]
        for _ in self.channels:
            chain.append(tuple(math.ceil(d / 2) for d in chain[-1]))
        return chain

    @property
    def feature_dim(self) -> int:
        final = self.spatial_chain()[-1]
        return self.channels[-1] * final[0] * final[1] * final[2]

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "input_shape": list(self.input_shape),
            "latent_dim": self.latent_dim,
            "channels": list(self.channels),
            "age_normalizer": self.age_normalizer,
        }

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        return ModelConfig(
            variant=d["variant"],
            input_shape=tuple(d["input_shape"]),
            latent_dim=int(d["latent_dim"]),
            channels=tuple(d["channels"]),
            age_normalizer=float(d["age_normalizer"]),
        )


@dataclass
class LatentStats:
    """Encoder posterior parameters plus the latent actually decoded."""

    z_mu: torch.Tensor
    z_log_var: torch.Tensor
    z: Optional[torch.Tensor] = None
    z_tilde: Optional[torch.Tensor] = None

    @property
    def z_sigma(self) -> torch.Tensor:
        return torch.exp(self.z_log_var / 2.0)


@dataclass
class ForwardOutput:
    x_tilde: torch.Tensor
    latent: LatentStats
    a_p: Optional[torch.Tensor] = None


def reparameterize(stats: LatentStats, noise: torch.Tensor) -> torch.Tensor:
    """Draw z = mu + sigma * noise with externally supplied noise."""
    if noise.shape != stats.z_mu.shape:
        raise ShapeError(
            f"noise shape expected {tuple(stats.z_mu.shape)}, received {tuple(noise.shape)}"
        )
    return stats.z_mu + torch.exp(stats.z_log_var / 2.0) * noise


def condition_latent(z: torch.Tensor, age_years, age_normalizer: float) -> torch.Tensor:
    """Scale each latent vector by its subject's normalized age."""
    age = torch.as_tensor(age_years, dtype=z.dtype)
    if age.ndim == 0:
        age = age.expand(z.shape[0])
    if age.shape != (z.shape[0],):
        raise ShapeError(
            f"age_years expected shape ({z.shape[0]},), received {tuple(age.shape)}"
        )
    if bool((age <= 0).any()):
        raise ValidationError("age_years must be positive")
    return z * (age / age_normalizer).unsqueeze(1)


class VolumeVae(nn.Module):
    """Convolutional VAE over single-channel 3D volumes."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        chain = config.spatial_chain()
        self.final_spatial = chain[-1]

        enc = []
        in_c = 1
        for c in config.channels:
            enc.append(nn.Conv3d(in_c, c, kernel_size=3, stride=2, padding=1))
            enc.append(nn.LeakyReLU(0.01, inplace=True))
            in_c = c
        self.encoder = nn.Sequential(*enc)

        feat = config.feature_dim
        self.fc_mu = nn.Linear(feat, config.latent_dim)
        self.fc_log_var = nn.Linear(feat, config.latent_dim)
        self.fc_decode = nn.Linear(config.latent_dim, feat)

        dec = []
        rev_channels = list(config.channels)[::-1]
        # stage k upsamples chain[k+1] -> chain[k]
        for k in range(len(rev_channels)):
            stage = len(rev_channels) - 1 - k  # encoder stage index being inverted
            target = chain[stage]
            out_pad = tuple(t + 1 - 2 * math.ceil(t / 2) for t in target)
            out_c = rev_channels[k + 1] if k + 1 < len(rev_channels) else config.channels[0]
            dec.append(
                nn.ConvTranspose3d(
                    rev_channels[k], out_c, kernel_size=3, stride=2,
                    padding=1, output_padding=out_pad,
                )
            )
            dec.append(nn.LeakyReLU(0.01, inplace=True))
        dec.append(nn.Conv3d(config.channels[0], 1, kernel_size=3, padding=1))
        self.decoder = nn.Sequential(*dec)

        self.age_head = nn.Linear(feat, 1) if config.variant == "vae_ap" else None

    def _check_input(self, x: torch.Tensor) -> None:
        expected = (1, *self.config.input_shape)
        if x.ndim != 5 or tuple(x.shape[1:]) != expected:
            raise ShapeError(
                f"input expected (batch, {', '.join(str(d) for d in expected)}), "
                f"received {tuple(x.shape)}"
            )

    def features(self, x: torch.Tensor) -> torch.Tensor:
        """Flattened final encoder activations, shape (batch, feature_dim)."""
        self._check_input(x)
        return self.encoder(x).flatten(start_dim=1)

    def encode(self, x: torch.Tensor) -> LatentStats:
        h = self.features(x)
        return LatentStats(z_mu=self.fc_mu(h), z_log_var=self.fc_log_var(h))

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        if z.ndim != 2 or z.shape[1] != self.config.latent_dim:
            raise ShapeError(
                f"latent expected (batch, {self.config.latent_dim}), received {tuple(z.shape)}"
            )
        h = self.fc_decode(z).reshape(z.shape[0], self.config.channels[-1], *self.final_spatial)
        return self.decoder(h)

    def predict_age(self, x: torch.Tensor) -> torch.Tensor:
        """Predicted age in years, shape (batch,). Multi-task variant only."""
        if self.age_head is None:
            raise UnsupportedVariantError(
                f"variant {self.config.variant!r} has no age head; use vae_ap"
            )
        return self.age_head(self.features(x)).squeeze(-1) * self.config.age_normalizer

    def forward(
        self,
        x: torch.Tensor,
        age_years=None,
        noise: Optional[torch.Tensor] = None,
    ) -> ForwardOutput:
        """Encode, (optionally) sample, (optionally) condition, decode.

        With ``noise=None`` the posterior mean is decoded, which is what
        scoring uses; training supplies explicit noise.
        """
        h = self.features(x)
        stats = LatentStats(z_mu=self.fc_mu(h), z_log_var=self.fc_log_var(h))
        z = reparameterize(stats, noise) if noise is not None else stats.z_mu
        stats.z = z

        if self.config.variant == "vae_ac":
            if age_years is None:
                raise ValidationError("variant vae_ac requires age_years at forward time")
            stats.z_tilde = condition_latent(z, age_years, self.config.age_normalizer)
            decoded = stats.z_tilde
        else:
            decoded = z

        a_p = None
        if self.config.variant == "vae_ap":
            a_p = self.age_head(h).squeeze(-1) * self.config.age_normalizer

        return ForwardOutput(x_tilde=self.decode(decoded), latent=stats, a_p=a_p)


def build_model(config: ModelConfig, seed: Optional[int] = None) -> VolumeVae:
    """Construct a model, optionally seeding parameter initialization."""
    if seed is not None:
        torch.manual_seed(seed)
    return VolumeVae(config)
