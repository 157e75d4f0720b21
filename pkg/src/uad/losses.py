"""Training objectives for the three model variants.

All terms are plain tensor reductions so a test can recompute them with
loops. `total_loss` is the single composition point: reconstruction plus
beta-weighted KL, plus gamma-weighted age error for the multi-task variant.
"""

from dataclasses import dataclass
from typing import TYPE_CHECKING

import torch

from .errors import ShapeError, UnsupportedVariantError, ValidationError

if TYPE_CHECKING:
    from .models import ForwardOutput


def _to_tensor(x) -> torch.Tensor:
    t = torch.as_tensor(x)
    if not torch.is_floating_point(t):
        t = t.to(torch.float64)
    return t


def _check_same_shape(name_a: str, a: torch.Tensor, name_b: str, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(
            f"{name_a} and {name_b} must match: expected {tuple(a.shape)}, received {tuple(b.shape)}"
        )


def recon_loss(x, x_tilde) -> torch.Tensor:
    """Mean absolute reconstruction error over every voxel in the batch."""
    x, x_tilde = _to_tensor(x), _to_tensor(x_tilde)
    _check_same_shape("x", x, "x_tilde", x_tilde)
    return torch.mean(torch.abs(x - x_tilde))


def kl_loss(z_mu, z_log_var) -> torch.Tensor:
    """KL divergence to the standard normal prior.

    Summed over latent dimensions, then averaged over the batch. Inputs
    must be 2-D (batch, latent).
    """
    z_mu, z_log_var = _to_tensor(z_mu), _to_tensor(z_log_var)
    _check_same_shape("z_mu", z_mu, "z_log_var", z_log_var)
    if z_mu.ndim != 2:
        raise ShapeError(f"z_mu must be 2-D (batch, latent), received {tuple(z_mu.shape)}")
    per_sample = 0.5 * (z_mu.pow(2) + z_log_var.exp() - z_log_var - 1.0).sum(dim=1)
    return per_sample.mean()


def age_loss(a_p, a_c) -> torch.Tensor:
    """Mean absolute age error in years."""
    a_p, a_c = _to_tensor(a_p), _to_tensor(a_c)
    _check_same_shape("a_p", a_p, "a_c", a_c)
    return torch.mean(torch.abs(a_p - a_c))


@dataclass
class LossBreakdown:
    """One training step's loss terms, kept as tensors for backprop."""

    l_rec: torch.Tensor
    l_kl: torch.Tensor
    l_age: torch.Tensor
    total: torch.Tensor
    beta: float
    gamma: float

    def to_dict(self) -> dict:
        return {
            "l_rec": float(self.l_rec.detach()),
            "l_kl": float(self.l_kl.detach()),
            "l_age": float(self.l_age.detach()),
            "total": float(self.total.detach()),
            "beta": self.beta,
            "gamma": self.gamma,
        }


def total_loss(
    x,
    outputs: "ForwardOutput",
    a_c,
    variant: str,
    beta: float = 1.0,
    gamma: float = 1.0,
) -> LossBreakdown:
    """Compose the objective for one batch.

    The age term only participates for the multi-task variant; the other
    variants report it as exactly zero and exclude it from the total.
    """
    from .models import VARIANTS

    if variant not in VARIANTS:
        raise UnsupportedVariantError(f"unknown variant {variant!r}, expected one of {VARIANTS}")
    if beta < 0:
        raise ValidationError(f"beta must be nonnegative, got {beta}")
    if gamma < 0:
        raise ValidationError(f"gamma must be nonnegative, got {gamma}")

    l_rec = recon_loss(x, outputs.x_tilde)
    l_kl = kl_loss(outputs.latent.z_mu, outputs.latent.z_log_var)

    if variant == "vae_ap":
        if outputs.a_p is None:
            raise ValidationError("variant vae_ap requires an age prediction in the forward output")
        l_age = age_loss(outputs.a_p, a_c)
        total = l_rec + beta * l_kl + gamma * l_age
    else:
        l_age = torch.zeros((), dtype=l_rec.dtype)
        total = l_rec + beta * l_kl

    return LossBreakdown(l_rec=l_rec, l_kl=l_kl, l_age=l_age, total=total, beta=beta, gamma=gamma)
