"""Compatibility, diversity and posterior-collapse measurements."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from skimage.color import rgb2hsv
from torch import Tensor

from . import synthdata as sd
from .distributions import DiagonalGaussian, kl_between

EMBED_DIM = 32
MARGIN = 0.2
GARMENT_MIN_SATURATION = 0.45
GARMENT_MIN_VALUE = 0.3


# ---------------------------------------------------------------------------
# Learned compatibility embedding
# ---------------------------------------------------------------------------


class CompatEmbedder(nn.Module):
    """Small conv net mapping (3, 32, 32) garment crops to unit vectors."""

    def __init__(self, dim: int = EMBED_DIM, width: int = 16):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(3, width, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(width, 2 * width, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(2 * width, 2 * width, 3, stride=2, padding=1), nn.ReLU(),
            nn.AdaptiveAvgPool2d(1), nn.Flatten(),
            nn.Linear(2 * width, dim),
        )

    def forward(self, x: Tensor) -> Tensor:
        return F.normalize(self.body(x), dim=-1, eps=1e-12)


def garment_crops(samples) -> tuple[Tensor, Tensor]:
    """RGB crops of every present garment and the index of the outfit each came from."""
    crops, owner = [], []
    for i, s in enumerate(samples):
        for cat in sd.CATEGORIES:
            if s.garment_present(cat):
                _, x_a = sd.extract_garment_segment(s.image, s.seg, cat)
                crops.append(torch.from_numpy(x_a.transpose(2, 0, 1).copy()))
                owner.append(i)
    return torch.stack(crops), torch.tensor(owner)


def train_compat_embedding(samples, steps: int = 400, batch: int = 64, margin: float = MARGIN, seed: int = 0, lr: float = 1e-3):
    """Triplet margin training on cosine similarity.

    Crops from the same outfit are positives, crops from other outfits negatives.
    """
    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed)
    crops, owner = garment_crops(samples)
    groups = {}
    for idx, o in enumerate(owner.tolist()):
        groups.setdefault(o, []).append(idx)
    anchors = [i for i, o in enumerate(owner.tolist()) if len(groups[o]) > 1]
    model = CompatEmbedder()
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    for _ in range(steps):
        pick = torch.randint(len(anchors), (batch,), generator=gen)
        a_idx, p_idx, n_idx = [], [], []
        for k in pick.tolist():
            a = anchors[k]
            mates = [j for j in groups[owner[a].item()] if j != a]
            p = mates[int(torch.randint(len(mates), (1,), generator=gen))]
            while True:
                n = int(torch.randint(len(crops), (1,), generator=gen))
                if owner[n] != owner[a]:
                    break
            a_idx.append(a)
            p_idx.append(p)
            n_idx.append(n)
        ea, ep, en = model(crops[a_idx]), model(crops[p_idx]), model(crops[n_idx])
        loss = F.relu(margin - (ea * ep).sum(-1) + (ea * en).sum(-1)).mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model


@torch.no_grad()
def compat_score(embedder, generated_crop: Tensor, reference_crop: Tensor) -> float:
    """Cosine similarity of two (3, h, w) crops in the embedding space."""
    e = embedder(torch.stack([generated_crop, reference_crop]).float())
    e = F.normalize(e.flatten(1), dim=-1, eps=1e-12)
    return float((e[0] * e[1]).sum().clamp(-1.0, 1.0))


# ---------------------------------------------------------------------------
# Oracle compatibility from pixels
# ---------------------------------------------------------------------------


@dataclass
class GarmentFit:
    params: sd.GarmentParams | None
    template_iou: float
    mask: np.ndarray


def garment_pixels(image: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Boolean mask of saturated, non-dark pixels (garments) and the HSV image."""
    hsv = rgb2hsv(np.clip((image + 1.0) / 2.0, 0.0, 1.0))
    mask = (hsv[..., 1] >= GARMENT_MIN_SATURATION) & (hsv[..., 2] >= GARMENT_MIN_VALUE)
    return mask, hsv


def comparison_region(sample: sd.OutfitSample, category: str, box=None) -> np.ndarray:
    """Box pixels not occupied by another garment in the source outfit."""
    box = sd.plausible_box(sample.seg, category) if box is None else box
    region = sd.box_mask(box, sample.seg.shape)
    for other in sd.CATEGORIES:
        if other != category:
            region &= sample.seg[..., sd.CATEGORY_CHANNEL[other]] < 0.5
    return region


def shape_templates(sample: sd.OutfitSample, category: str) -> dict[str, np.ndarray]:
    """Visible mask of each shape code of ``category`` rendered on this person."""
    out = {}
    for code in sd.SHAPE_CODES[category]:
        g = sd.GarmentParams(category, code, 0.0, 1.0, 1.0) if code != "absent" else sd.GarmentParams(category, code)
        _, labels = sd.render_outfit(sample.keypoints, {**sample.garments, category: g}, sample.image.shape[0])
        out[code] = labels == sd.CATEGORY_CHANNEL[category]
    return out


def _iou(a: np.ndarray, b: np.ndarray) -> float:
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


def circular_mean_hue(hues: np.ndarray) -> float:
    ang = 2 * np.pi * hues
    mean = math.atan2(np.sin(ang).mean(), np.cos(ang).mean())
    return float((mean / (2 * np.pi)) % 1.0)


def fit_garment(image: np.ndarray, sample: sd.OutfitSample, category: str, box=None, templates=None) -> GarmentFit:
    """Recover the garment drawn in ``category``'s region from pixels.

    The mask is the saturated pixels of the comparison region; the shape code is
    the template with the highest IoU there and the hue is the circular mean.
    """
    region = comparison_region(sample, category, box)
    colored, hsv = garment_pixels(image)
    mask = colored & region
    templates = shape_templates(sample, category) if templates is None else templates
    ious = {code: _iou(mask, t & region) for code, t in templates.items()}
    code = max(ious, key=ious.get)
    if code == "absent":
        return GarmentFit(sd.GarmentParams(category, "absent"), ious[code], mask)
    if not mask.any():
        return GarmentFit(None, ious[code], mask)
    hue = circular_mean_hue(hsv[..., 0][mask])
    sat = float(np.clip(hsv[..., 1][mask].mean(), 0, 1))
    val = float(np.clip(hsv[..., 2][mask].mean(), 0, 1))
    return GarmentFit(sd.GarmentParams(category, code, hue % 1.0, sat, val), ious[code], mask)


def _hwc(img) -> np.ndarray:
    if isinstance(img, Tensor):
        return img.detach().permute(1, 2, 0).numpy()
    return np.asarray(img)


def oracle_scores(images, sample: sd.OutfitSample, category: str) -> list[float]:
    scores = []
    templates = shape_templates(sample, category)
    for img in images:
        fit = fit_garment(_hwc(img), sample, category, templates=templates)
        scores.append(0.0 if fit.params is None else sd.compat_oracle(fit.params, sample))
    return scores


def oracle_compat_rate(images, sample: sd.OutfitSample, category: str) -> float:
    """Mean rule-based compatibility of the garments inpainted in ``images``."""
    return float(np.mean(oracle_scores(images, sample, category)))


def template_ious(images, sample: sd.OutfitSample, category: str) -> list[float]:
    """How well each inpainted garment matches its closest clean shape template."""
    templates = shape_templates(sample, category)
    return [fit_garment(_hwc(img), sample, category, templates=templates).template_iou for img in images]


# ---------------------------------------------------------------------------
# Diversity
# ---------------------------------------------------------------------------


def _pair_distance(fa: list[Tensor], fb: list[Tensor]) -> float:
    total = 0.0
    for l, (a, b) in enumerate(zip(fa, fb)):
        if l > 0:
            a = F.normalize(a, dim=0, eps=1e-10)
            b = F.normalize(b, dim=0, eps=1e-10)
        total += float(((a - b) ** 2).sum(0).mean())
    return total / len(fa)


@torch.no_grad()
def diversity_score(crops: Tensor, extractor) -> float:
    """Mean over all pairs of the per-stage feature distance between crops.

    Stage 0 compares raw pixels; later stages compare channel-normalised
    features, each averaged over space.
    """
    n = crops.shape[0]
    if n < 2:
        return 0.0
    feats = extractor(crops.float())
    dists = [
        _pair_distance([f[i] for f in feats], [f[j] for f in feats])
        for i, j in itertools.combinations(range(n), 2)
    ]
    return float(np.mean(dists))


def region_crops(images: Tensor, box, size: int = sd.CROP_SIZE) -> Tensor:
    from .netcore import crop_resize

    boxes = torch.tensor([box] * images.shape[0], dtype=torch.long)
    return crop_resize(images, boxes, size)


# ---------------------------------------------------------------------------
# Posterior collapse diagnostics
# ---------------------------------------------------------------------------


def moment_matched(q: DiagonalGaussian) -> DiagonalGaussian:
    """Single Gaussian with the mean and variance of the mixture of the rows of ``q``."""
    mean = q.mean.mean(0)
    second = (torch.exp(q.log_var) + q.mean**2).mean(0)
    var = (second - mean**2).clamp_min(1e-12)
    return DiagonalGaussian(mean, torch.log(var))


@torch.no_grad()
def posterior_diagnostics(stage, data, posterior_fn=None, batch_size: int = 64, seed: int = 0) -> dict[str, float]:
    """Mean KL to the prior and an MI estimate against the aggregated posterior.

    ``posterior_fn(stage, batch)`` overrides the encoder, e.g. to build a
    collapsed control.
    """
    stage.eval()
    posterior_fn = posterior_fn or (lambda st, b: st.posterior(b))
    means, logvars, kls = [], [], []
    for batch in data.fixed_batches(batch_size, seed):
        q = posterior_fn(stage, batch)
        p = stage.prior(batch["x_c"])
        kls.append(kl_between(q, p))
        means.append(q.mean)
        logvars.append(q.log_var)
    q_all = DiagonalGaussian(torch.cat(means).double(), torch.cat(logvars).double())
    agg = moment_matched(q_all)
    mi = kl_between(q_all, DiagonalGaussian(agg.mean[None].expand_as(q_all.mean), agg.log_var[None].expand_as(q_all.mean)))
    return {"mean_kl": float(torch.cat(kls).mean()), "mi_estimate": float(mi.mean())}


def collapsed_posterior(stage, batch) -> DiagonalGaussian:
    """Control encoder that ignores its input and always returns N(0, I).

    This is the posterior of a fully collapsed VAE: its mutual information
    with the data is exactly zero.
    """
    return DiagonalGaussian.standard(stage.cfg.latent_dim, (batch["x_c"].shape[0],), batch["x_c"].dtype)


def format_report(metrics: dict[str, float], n: int, seed: int) -> str:
    return "".join(f"{name} {value:.6g} n={n} seed={seed}\n" for name, value in metrics.items())
