"""Single-network ablation: shape and appearance inputs merged into one RGB generator."""

from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn
from torch import Tensor

from . import synthdata as sd
from .appearancenet import FixedFeatureExtractor, loss_rec
from .config import Config
from .distributions import DiagonalGaussian, sample_reparam
from .netcore import GaussEncoder, GenNetwork, crop_resize, init_params, paste_back
from .pipeline import InpaintResult, build_context
from .shapenet import check_finite, kl_term, prior_codes

IN_CHANNELS = 3 + sd.NUM_SEG + sd.NUM_KEYPOINTS + 3


class OneStage(nn.Module):
    """Generates RGB directly from the masked image, masked layout, pose and face pixels."""

    def __init__(self, cfg: Config = Config(), seed: int = 0, extractor: FixedFeatureExtractor | None = None):
        super().__init__()
        self.cfg = cfg
        self.lambda_kl = cfg.lambda_kl
        self.standard_prior = cfg.standard_prior
        self.trained_steps = 0
        z, lv, bc = cfg.latent_dim, cfg.levels, cfg.base_channels
        self.generator = GenNetwork(IN_CHANNELS, 3, z, lv, bc, head="tanh")
        self.appearance_encoder = GaussEncoder(3, z, lv, bc, cfg.crop_size)
        self.compat_encoder = GaussEncoder(3 * 4, z, lv, bc, cfg.crop_size)
        self.extractor = extractor if extractor is not None else FixedFeatureExtractor()
        init_params(self.generator, seed + 20)
        init_params(self.appearance_encoder, seed + 21)
        init_params(self.compat_encoder, seed + 22)

    def prior(self, x_c: Tensor) -> DiagonalGaussian:
        if self.standard_prior:
            return DiagonalGaussian.standard(self.cfg.latent_dim, (x_c.shape[0],), x_c.dtype)
        return self.compat_encoder(x_c)

    def posterior(self, batch) -> DiagonalGaussian:
        return self.appearance_encoder(batch["x_a"])

    @staticmethod
    def merged_input(I_hat, S_hat, pose, image, seg) -> Tensor:
        face = seg[:, sd.FACE_HAIR : sd.FACE_HAIR + 1]
        return torch.cat([I_hat, S_hat, pose, image * face], dim=1)

    def generate(self, x: Tensor, z: Tensor) -> Tensor:
        return self.generator(x, z)

    def losses(self, batch, noise: Tensor) -> dict[str, Tensor]:
        q = self.appearance_encoder(batch["x_a"])
        p = None if self.standard_prior else self.compat_encoder(batch["x_c"])
        z = sample_reparam(q, noise)
        x = self.merged_input(batch["I_hat"], batch["S_hat"], batch["pose"], batch["image"], batch["seg"])
        out = self.generate(x, z)
        size = out.shape[-1]
        rec = loss_rec(
            crop_resize(batch["image"], batch["box"], size),
            crop_resize(out, batch["box"], size),
            self.extractor,
        )
        kl = kl_term(q, p)
        return {"loss": rec + self.lambda_kl * kl, "rec_loss": rec, "kl": kl}

    def train_step(self, batch, optimizer, noise: Tensor) -> dict[str, float]:
        self.train()
        losses = self.losses(batch, noise)
        check_finite(losses, "one-stage train_step")
        optimizer.zero_grad(set_to_none=True)
        losses["loss"].backward()
        optimizer.step()
        return {"rec_loss": losses["rec_loss"].item(), "kl": losses["kl"].item()}

    @torch.no_grad()
    def inpaint(self, image: np.ndarray, seg: np.ndarray, pose: np.ndarray, category: str, n: int = 1,
                temperature: float = 1.0, seed: int = 0) -> InpaintResult:
        self.eval()
        ctx = build_context(image, seg, pose, category, self.cfg.crop_size)
        gen = torch.Generator().manual_seed(seed)
        codes = prior_codes(self, ctx["x_c"], n, temperature, gen)
        full_pose = torch.from_numpy(np.ascontiguousarray(pose.transpose(2, 0, 1))).float()
        x = self.merged_input(ctx["I_hat"][None], ctx["S_hat"][None], full_pose[None], ctx["image"][None], ctx["seg"][None])
        out = self.generate(x.expand(n, -1, -1, -1), codes)
        boxes = torch.tensor([ctx["box"]] * n, dtype=torch.long)
        images = paste_back(out, ctx["image"][None].expand(n, -1, -1, -1), boxes)
        segmaps = ctx["seg"][None].expand(n, -1, -1, -1).clone()
        return InpaintResult(images, segmaps, ctx["box"], {"untrained": self.trained_steps == 0})
