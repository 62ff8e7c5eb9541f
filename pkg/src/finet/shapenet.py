"""Compatible shape generation: layout generator plus shape and compatibility encoders."""

from __future__ import annotations

import torch
import torch.nn as nn
from torch import Tensor

from .config import Config
from .distributions import DiagonalGaussian, kl_between, kl_to_standard, sample_reparam
from .netcore import GaussEncoder, GenNetwork, crop_resize, init_params
from .synthdata import NUM_KEYPOINTS, NUM_SEG

SEG_EPS = 1e-8
NORMALIZATION_TOL = 1e-4


class ContractError(ValueError):
    pass


def loss_seg(pred: Tensor, truth: Tensor, eps: float = SEG_EPS) -> Tensor:
    """Pixel-averaged cross entropy between (N, C, H, W) maps, averaged over the batch."""
    if pred.shape != truth.shape:
        raise ContractError(f"pred {tuple(pred.shape)} vs truth {tuple(truth.shape)}")
    sums = pred.sum(dim=1)
    if (sums - 1.0).abs().max() > NORMALIZATION_TOL:
        raise ContractError("predicted label distributions do not sum to 1")
    hw = pred.shape[2] * pred.shape[3]
    per_sample = -(truth * torch.log(pred.clamp_min(eps))).sum(dim=(1, 2, 3)) / hw
    return per_sample.mean()


def kl_term(q: DiagonalGaussian, p: DiagonalGaussian | None) -> Tensor:
    """Batch-mean KL of q to the compatibility prior, or to N(0, I) when ``p`` is None."""
    kl = kl_to_standard(q) if p is None else kl_between(q, p)
    return kl.mean()


def loss_shape_total(pred, truth, q, p, lambda_kl: float = 0.1, standard_prior: bool = False):
    return loss_seg(pred, truth) + lambda_kl * kl_term(q, None if standard_prior else p)


def discretize(seg: Tensor) -> Tensor:
    """One-hot argmax over the channel dimension (dim 1 for batches, 0 for a single map)."""
    dim = 1 if seg.dim() == 4 else 0
    idx = seg.argmax(dim=dim, keepdim=True)
    return torch.zeros_like(seg).scatter_(dim, idx, 1.0)


class ShapeStage(nn.Module):
    def __init__(self, cfg: Config = Config(), seed: int = 0):
        super().__init__()
        self.cfg = cfg
        self.lambda_kl = cfg.lambda_kl
        self.standard_prior = cfg.standard_prior
        self.trained_steps = 0
        z, lv, bc = cfg.latent_dim, cfg.levels, cfg.base_channels
        self.generator = GenNetwork(NUM_SEG + NUM_KEYPOINTS + 1, NUM_SEG, z, lv, bc, head="softmax")
        self.shape_encoder = GaussEncoder(1, z, lv, bc, cfg.crop_size)
        self.compat_encoder = GaussEncoder(3 * 4, z, lv, bc, cfg.crop_size)
        init_params(self.generator, seed)
        init_params(self.shape_encoder, seed + 1)
        init_params(self.compat_encoder, seed + 2)

    def prior(self, x_c: Tensor) -> DiagonalGaussian:
        if self.standard_prior:
            return DiagonalGaussian.standard(self.cfg.latent_dim, (x_c.shape[0],), x_c.dtype)
        return self.compat_encoder(x_c)

    def posterior(self, batch) -> DiagonalGaussian:
        return self.shape_encoder(batch["x_s"])

    def generate(self, S_hat, p_s, z):
        return self.generator(torch.cat([S_hat, p_s], dim=1), z)

    def losses(self, batch, noise: Tensor) -> dict[str, Tensor]:
        q = self.shape_encoder(batch["x_s"])
        p = None if self.standard_prior else self.compat_encoder(batch["x_c"])
        z = sample_reparam(q, noise)
        pred = self.generate(batch["S_hat"], batch["p_s"], z)
        size = pred.shape[-1]
        pred_r = crop_resize(pred, batch["box"], size, "bilinear")
        truth_r = crop_resize(batch["seg"], batch["box"], size, "nearest")
        seg = loss_seg(pred_r, truth_r)
        kl = kl_term(q, p)
        return {"loss": seg + self.lambda_kl * kl, "seg_loss": seg, "kl": kl}


def check_finite(losses: dict[str, Tensor], step_name: str):
    loss = losses["loss"]
    if not torch.isfinite(loss):
        detail = ", ".join(f"{k}={float(v.detach()):.4g}" for k, v in losses.items())
        raise FloatingPointError(f"{step_name}: non-finite loss ({detail})")


def train_step_shape(stage: ShapeStage, batch, optimizer, noise: Tensor) -> dict[str, float]:
    """One joint Adam step on generator, shape encoder and compatibility encoder."""
    stage.train()
    losses = stage.losses(batch, noise)
    check_finite(losses, "train_step_shape")
    optimizer.zero_grad(set_to_none=True)
    losses["loss"].backward()
    optimizer.step()
    return {"seg_loss": losses["seg_loss"].item(), "kl": losses["kl"].item()}


def prior_codes(stage, x_c: Tensor, n: int, temperature: float, gen: torch.Generator | None) -> Tensor:
    """``n`` codes mean + temperature * std * noise from the stage's prior for one context."""
    if x_c.dim() == 3:
        x_c = x_c[None]
    prior = stage.prior(x_c)
    noise = torch.randn(n, stage.cfg.latent_dim, generator=gen, dtype=x_c.dtype)
    return prior.mean + temperature * prior.std * noise


@torch.no_grad()
def sample_shapes(stage: ShapeStage, S_hat, p_s, x_c, n: int, temperature: float = 1.0, gen=None, codes=None) -> Tensor:
    """Draw ``n`` layouts with latent codes from the compatibility prior of ``x_c``.

    ``temperature`` scales the sampling noise; 0 reproduces the mean-code output.
    Inputs are single (C, H, W) tensors; the result is (n, 8, H, W).
    """
    stage.eval()
    if codes is None:
        codes = prior_codes(stage, x_c, n, temperature, gen)
    S_hat = S_hat.expand(n, -1, -1, -1) if S_hat.dim() == 4 else S_hat[None].expand(n, -1, -1, -1)
    p_s = p_s.expand(n, -1, -1, -1) if p_s.dim() == 4 else p_s[None].expand(n, -1, -1, -1)
    return stage.generate(S_hat, p_s, codes)

