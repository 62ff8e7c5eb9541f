"""Diagonal Gaussian latents: reparameterized sampling and closed-form KL terms."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor

LOG_VAR_MIN = -10.0
LOG_VAR_MAX = 10.0


class DimensionError(ValueError):
    pass


@dataclass(frozen=True)
class DiagonalGaussian:
    """Axis-aligned Gaussian over the trailing dimension.

    Leading dimensions are treated as a batch, so an encoder head can return one
    instance for a whole minibatch. ``log_var`` is clamped to [-10, 10] on
    construction.
    """

    mean: Tensor
    log_var: Tensor

    def __post_init__(self):
        if self.mean.shape != self.log_var.shape:
            raise DimensionError(
                f"mean {tuple(self.mean.shape)} and log_var {tuple(self.log_var.shape)} differ"
            )
        object.__setattr__(self, "log_var", self.log_var.clamp(LOG_VAR_MIN, LOG_VAR_MAX))

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]

    @property
    def std(self) -> Tensor:
        return torch.exp(0.5 * self.log_var)

    @classmethod
    def standard(cls, dim: int, batch: tuple = (), dtype=torch.float32) -> "DiagonalGaussian":
        z = torch.zeros(*batch, dim, dtype=dtype)
        return cls(z, z.clone())

    def detach(self) -> "DiagonalGaussian":
        return DiagonalGaussian(self.mean.detach(), self.log_var.detach())

    def log_prob(self, z: Tensor) -> Tensor:
        """Log density summed over the latent dimension."""
        return -0.5 * (
            (z - self.mean) ** 2 * torch.exp(-self.log_var) + self.log_var + torch.log(torch.tensor(2 * torch.pi, dtype=z.dtype))
        ).sum(-1)


def sample_reparam(d: DiagonalGaussian, noise: Tensor) -> Tensor:
    """Return ``mean + exp(log_var / 2) * noise``; differentiable in both parameters."""
    if noise.shape[-1] != d.dim:
        raise DimensionError(f"noise has length {noise.shape[-1]}, expected {d.dim}")
    return d.mean + d.std * noise


def kl_to_standard(q: DiagonalGaussian) -> Tensor:
    """KL(q || N(0, I)) in nats, summed over the latent dimension."""
    return 0.5 * (torch.exp(q.log_var) + q.mean**2 - 1.0 - q.log_var).sum(-1)


def kl_between(q: DiagonalGaussian, p: DiagonalGaussian) -> Tensor:
    """KL(q || p) in nats, summed over the latent dimension."""
    if q.mean.shape[-1] != p.mean.shape[-1]:
        raise DimensionError(f"latent sizes differ: {q.dim} vs {p.dim}")
    diff = q.log_var - p.log_var
    terms = 0.5 * torch.exp(diff) + 0.5 * (q.mean - p.mean) ** 2 * torch.exp(-p.log_var) - 0.5 - 0.5 * diff
    return terms.sum(-1)
