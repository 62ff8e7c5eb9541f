"""Batched, channel-first torch views of a synthetic dataset for both stages."""

from __future__ import annotations

import numpy as np
import torch
from torch import Tensor

from . import synthdata as sd
from .netcore import box_masks


def _chw(arr: np.ndarray) -> Tensor:
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1))).float()


def sample_inputs(sample: sd.OutfitSample, category: str, crop_size: int = sd.CROP_SIZE) -> dict[str, Tensor]:
    """Everything either stage needs for one (sample, category), built by the numpy reference ops."""
    box = sd.plausible_box(sample.seg, category)
    x_s, x_a = sd.extract_garment_segment(sample.image, sample.seg, category, crop_size, box=box)
    return {
        "image": _chw(sample.image),
        "seg": _chw(sample.seg),
        "pose": _chw(sample.pose),
        "box": torch.tensor(box, dtype=torch.long),
        "x_s": _chw(x_s),
        "x_a": _chw(x_a),
        "x_c": _chw(sd.build_context_garments(sample.image, sample.seg, category, crop_size)),
    }


def derive_inputs(b: dict[str, Tensor]) -> dict[str, Tensor]:
    """Add masked contexts and person representations to a batch of raw tensors.

    Matches :func:`synthdata.mask_shape_context` and friends, vectorised.
    """
    seg, image, pose = b["seg"], b["image"], b["pose"]
    inside = box_masks(b["box"], seg.shape[2], seg.shape[3])
    face = seg[:, sd.FACE_HAIR : sd.FACE_HAIR + 1]
    out = dict(b)
    out["S_hat"] = seg.masked_fill(inside, 0.0)
    out["I_hat"] = image.masked_fill(inside, 0.0)
    out["p_s"] = torch.cat([pose, face], dim=1)
    out["p_a"] = torch.cat([seg, image * face], dim=1)
    return out


class OutfitTensors:
    """Precomputed per-(sample, category) crops plus full-resolution maps."""

    def __init__(self, samples, categories=sd.CATEGORIES, crop_size: int = sd.CROP_SIZE):
        self.samples = list(samples)
        self.categories = tuple(categories)
        self.crop_size = crop_size
        per_cat = {k: [] for k in ("box", "x_s", "x_a", "x_c")}
        image, seg, pose = [], [], []
        for s in self.samples:
            image.append(_chw(s.image))
            seg.append(_chw(s.seg))
            pose.append(_chw(s.pose))
            rows = {k: [] for k in per_cat}
            for cat in self.categories:
                d = sample_inputs(s, cat, crop_size)
                for k in rows:
                    rows[k].append(d[k])
            for k in per_cat:
                per_cat[k].append(torch.stack(rows[k]))
        self.image = torch.stack(image)
        self.seg = torch.stack(seg)
        self.pose = torch.stack(pose)
        for k, v in per_cat.items():
            setattr(self, k, torch.stack(v))

    def __len__(self):
        return len(self.samples)

    def batch(self, idx: Tensor, cat_idx: Tensor) -> dict[str, Tensor]:
        raw = {
            "image": self.image[idx],
            "seg": self.seg[idx],
            "pose": self.pose[idx],
            "box": self.box[idx, cat_idx],
            "x_s": self.x_s[idx, cat_idx],
            "x_a": self.x_a[idx, cat_idx],
            "x_c": self.x_c[idx, cat_idx],
        }
        return derive_inputs(raw)

    def random_batch(self, size: int, gen: torch.Generator) -> dict[str, Tensor]:
        idx = torch.randint(len(self), (size,), generator=gen)
        cat_idx = torch.randint(len(self.categories), (size,), generator=gen)
        return self.batch(idx, cat_idx)

    def fixed_batches(self, size: int, seed: int = 0):
        """Deterministic pass over every sample with one seeded category each."""
        gen = torch.Generator().manual_seed(seed)
        cat_idx = torch.randint(len(self.categories), (len(self),), generator=gen)
        for start in range(0, len(self), size):
            idx = torch.arange(start, min(start + size, len(self)))
            yield self.batch(idx, cat_idx[idx])
