"""Compatible appearance generation: RGB generator, appearance/compatibility encoders,
and the perceptual + Gram style reconstruction loss."""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor

from .config import Config
from .distributions import DiagonalGaussian, DimensionError, sample_reparam
from .netcore import GaussEncoder, GenNetwork, crop_resize, init_params
from .shapenet import check_finite, prior_codes, kl_term
from .synthdata import NUM_SEG

EXTRACTOR_WIDTHS = (8, 16, 32, 32, 32)


class FixedFeatureExtractor(nn.Module):
    """Frozen random conv pyramid standing in for a pretrained perceptual network.

    Stage l (1..5) is conv3x3 -> ReLU; its output is feature map l and is
    average-pooled by 2 before the next stage. Feature map 0 is the input.
    Weights live in buffers, so optimizers never see them.
    """

    def __init__(self, in_channels: int = 3, widths=EXTRACTOR_WIDTHS, seed: int = 1234):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        prev = in_channels
        self.num_stages = len(widths)
        for i, c in enumerate(widths):
            bound = (6.0 / (prev * 9)) ** 0.5
            w = (torch.rand(c, prev, 3, 3, generator=gen) * 2 - 1) * bound
            self.register_buffer(f"weight{i}", w)
            self.register_buffer(f"bias{i}", torch.zeros(c))
            prev = c

    def forward(self, x: Tensor) -> list[Tensor]:
        feats = [x]
        h = x
        for i in range(self.num_stages):
            w = getattr(self, f"weight{i}").to(x.dtype)
            b = getattr(self, f"bias{i}").to(x.dtype)
            h = F.relu(F.conv2d(h, w, b, padding=1))
            feats.append(h)
            h = F.avg_pool2d(h, 2, ceil_mode=True)
        return feats


def gram(features: Tensor) -> Tensor:
    """Inner products between channel rows: (..., C, K) -> (..., C, C)."""
    return features @ features.transpose(-1, -2)


def default_weights(feats: list[Tensor]) -> tuple[list[float], list[float]]:
    """Per-sample element normalisation for the perceptual and Gram terms.

    Gram entries grow with the number of pixels they sum over, so the style
    weight also divides by H_l * W_l to keep both terms on the same scale.
    """
    lambdas = [1.0 / f[0].numel() for f in feats]
    gammas = [0.0] + [1.0 / (f.shape[1] ** 2 * f.shape[2] * f.shape[3]) for f in feats[1:]]
    return lambdas, gammas


def loss_rec(I: Tensor, I_bar: Tensor, extractor, lambdas=None, gammas=None) -> Tensor:
    """Weighted L1 over feature maps 0..L plus weighted L1 over Gram matrices 1..L.

    Inputs are (N, C, H, W); the result is averaged over the batch.
    ``gammas[0]`` is ignored, since the style term starts at feature map 1.
    """
    if I.shape != I_bar.shape:
        raise DimensionError(f"image shapes differ: {tuple(I.shape)} vs {tuple(I_bar.shape)}")
    fa = extractor(I)
    fb = extractor(I_bar)
    dl, dg = default_weights(fa)
    lambdas = dl if lambdas is None else lambdas
    gammas = dg if gammas is None else gammas
    n = I.shape[0]
    total = I.new_zeros(())
    for l, (a, b) in enumerate(zip(fa, fb)):
        total = total + lambdas[l] * (a - b).abs().sum() / n
        if l >= 1 and gammas[l] != 0.0:
            ga = gram(a.flatten(2))
            gb = gram(b.flatten(2))
            total = total + gammas[l] * (ga - gb).abs().sum() / n
    return total


def loss_appearance_total(I, I_bar, q, p, extractor, lambda_kl: float = 0.1, standard_prior: bool = False):
    return loss_rec(I, I_bar, extractor) + lambda_kl * kl_term(q, None if standard_prior else p)


class AppearanceStage(nn.Module):
    def __init__(self, cfg: Config = Config(), seed: int = 0, extractor: FixedFeatureExtractor | None = None):
        super().__init__()
        self.cfg = cfg
        self.lambda_kl = cfg.lambda_kl
        self.standard_prior = cfg.standard_prior
        self.trained_steps = 0
        z, lv, bc = cfg.latent_dim, cfg.levels, cfg.base_channels
        self.generator = GenNetwork(3 + NUM_SEG + 3, 3, z, lv, bc, head="tanh")
        self.appearance_encoder = GaussEncoder(3, z, lv, bc, cfg.crop_size)
        self.compat_encoder = GaussEncoder(3 * 4, z, lv, bc, cfg.crop_size)
        self.extractor = extractor if extractor is not None else FixedFeatureExtractor()
        init_params(self.generator, seed + 10)
        init_params(self.appearance_encoder, seed + 11)
        init_params(self.compat_encoder, seed + 12)

    def prior(self, x_c: Tensor) -> DiagonalGaussian:
        if self.standard_prior:
            return DiagonalGaussian.standard(self.cfg.latent_dim, (x_c.shape[0],), x_c.dtype)
        return self.compat_encoder(x_c)

    def posterior(self, batch) -> DiagonalGaussian:
        return self.appearance_encoder(batch["x_a"])

    def generate(self, I_hat, p_a, z):
        return self.generator(torch.cat([I_hat, p_a], dim=1), z)

    def losses(self, batch, noise: Tensor) -> dict[str, Tensor]:
        q = self.appearance_encoder(batch["x_a"])
        p = None if self.standard_prior else self.compat_encoder(batch["x_c"])
        z = sample_reparam(q, noise)
        out = self.generate(batch["I_hat"], batch["p_a"], z)
        size = out.shape[-1]
        rec = loss_rec(
            crop_resize(batch["image"], batch["box"], size),
            crop_resize(out, batch["box"], size),
            self.extractor,
        )
        kl = kl_term(q, p)
        return {"loss": rec + self.lambda_kl * kl, "rec_loss": rec, "kl": kl}


def train_step_appearance(stage: AppearanceStage, batch, optimizer, noise: Tensor) -> dict[str, float]:
    """One joint Adam step on generator and both encoders; the extractor stays frozen."""
    stage.train()
    losses = stage.losses(batch, noise)
    check_finite(losses, "train_step_appearance")
    optimizer.zero_grad(set_to_none=True)
    losses["loss"].backward()
    optimizer.step()
    return {"rec_loss": losses["rec_loss"].item(), "kl": losses["kl"].item()}


@torch.no_grad()
def sample_appearances(stage: AppearanceStage, I_hat, p_a, x_c, n: int, temperature: float = 1.0, gen=None, codes=None) -> Tensor:
    """Draw ``n`` images in [-1, 1] with codes from the compatibility prior of ``x_c``."""
    stage.eval()
    if codes is None:
        codes = prior_codes(stage, x_c, n, temperature, gen)
    I_hat = I_hat.expand(n, -1, -1, -1) if I_hat.dim() == 4 else I_hat[None].expand(n, -1, -1, -1)
    p_a = p_a.expand(n, -1, -1, -1) if p_a.dim() == 4 else p_a[None].expand(n, -1, -1, -1)
    return stage.generate(I_hat, p_a, codes)
