"""Two-stage inference: diverse inpainting, clothing reconstruction and transfer."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import Tensor

from . import synthdata as sd
from .appearancenet import AppearanceStage
from .config import Config, parse_config
from .distributions import DimensionError
from .netcore import load_checkpoint, paste_back, save_checkpoint
from .shapenet import ShapeStage, discretize, prior_codes

STAGE_KINDS = {"shape": ShapeStage, "appearance": AppearanceStage}


@dataclass
class InpaintResult:
    images: Tensor  # (n, 3, H, W) in [-1, 1]
    segmaps: Tensor  # (n, 8, H, W) one-hot
    box: tuple[int, int, int, int]
    meta: dict = field(default_factory=dict)


def _t(arr) -> Tensor:
    if isinstance(arr, Tensor):
        return arr.float()
    return torch.from_numpy(np.ascontiguousarray(np.asarray(arr, np.float32).transpose(2, 0, 1)))


def build_context(image: np.ndarray, seg: np.ndarray, pose: np.ndarray, category: str, crop_size: int = sd.CROP_SIZE):
    """Masked contexts, person representation and context garments for one image (channel-first)."""
    h, w = image.shape[:2]
    if seg.shape[:2] != (h, w) or pose.shape[:2] != (h, w):
        raise DimensionError("image, seg and pose sizes differ")
    if seg.shape[2] != sd.NUM_SEG or pose.shape[2] != sd.NUM_KEYPOINTS or image.shape[2] != 3:
        raise DimensionError("unexpected channel counts for image/seg/pose")
    box = sd.plausible_box(seg, category)
    return {
        "image": _t(image),
        "seg": _t(seg),
        "box": box,
        "S_hat": _t(sd.mask_shape_context(seg, category, box)),
        "I_hat": _t(sd.mask_appearance_context(image, seg, category, box)),
        "p_s": _t(sd.build_person_rep_shape(pose, seg)),
        "x_c": _t(sd.build_context_garments(image, seg, category, crop_size)),
    }


def _expand(x: Tensor, n: int) -> Tensor:
    return x[None].expand(n, *x.shape)


@torch.no_grad()
def render(shape_stage: ShapeStage, app_stage: AppearanceStage, ctx: dict, shape_codes: Tensor, app_codes: Tensor):
    """Run both stages for matching rows of latent codes and paste the results back."""
    shape_stage.eval()
    app_stage.eval()
    n = shape_codes.shape[0]
    boxes = torch.tensor([ctx["box"]] * n, dtype=torch.long)
    seg = _expand(ctx["seg"], n)
    image = _expand(ctx["image"], n)
    s_bar = shape_stage.generate(_expand(ctx["S_hat"], n), _expand(ctx["p_s"], n), shape_codes)
    layout = discretize(paste_back(s_bar, seg, boxes))
    # Face pixels come from the source parsing, as in training; a generated
    # layout may claim box pixels as face and would expose the target garment.
    face = seg[:, sd.FACE_HAIR : sd.FACE_HAIR + 1]
    p_a = torch.cat([layout, image * face], dim=1)
    i_bar = app_stage.generate(_expand(ctx["I_hat"], n), p_a, app_codes)
    return paste_back(i_bar, image, boxes), layout


def _meta(shape_stage, app_stage) -> dict:
    untrained = getattr(shape_stage, "trained_steps", 0) == 0 or getattr(app_stage, "trained_steps", 0) == 0
    return {"untrained": untrained}


def inpaint(shape_stage, app_stage, image, seg, pose, category: str, n: int = 1, temperature: float = 1.0, seed: int = 0):
    """Fill the category's plausible region with ``n`` compatible garments.

    Sample i pairs shape draw i with appearance draw i. Pixels outside the box
    are copied from ``image`` unchanged.
    """
    ctx = build_context(image, seg, pose, category, shape_stage.cfg.crop_size)
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        shape_codes = prior_codes(shape_stage, ctx["x_c"], n, temperature, gen)
        app_codes = prior_codes(app_stage, ctx["x_c"], n, temperature, gen)
    images, layouts = render(shape_stage, app_stage, ctx, shape_codes, app_codes)
    return InpaintResult(images, layouts, ctx["box"], _meta(shape_stage, app_stage))


def transfer(shape_stage, app_stage, image, seg, pose, category: str, target_shape, target_appearance):
    """Inpaint using encoder means of a target garment's mask and RGB crops."""
    size = shape_stage.cfg.crop_size
    t_s = _t(target_shape)
    t_a = _t(target_appearance)
    if t_s.shape != (1, size, size) or t_a.shape != (3, size, size):
        raise DimensionError(f"target crops must be {size}x{size}x1 and {size}x{size}x3")
    ctx = build_context(image, seg, pose, category, size)
    with torch.no_grad():
        shape_stage.eval()
        app_stage.eval()
        z_s = shape_stage.shape_encoder(t_s[None]).mean
        z_a = app_stage.appearance_encoder(t_a[None]).mean
    images, layouts = render(shape_stage, app_stage, ctx, z_s, z_a)
    return InpaintResult(images, layouts, ctx["box"], _meta(shape_stage, app_stage))


def reconstruct(shape_stage, app_stage, image, seg, pose, category: str):
    """Transfer of the image's own garment back onto itself."""
    x_s, x_a = sd.extract_garment_segment(image, seg, category, shape_stage.cfg.crop_size)
    return transfer(shape_stage, app_stage, image, seg, pose, category, x_s, x_a)


# ---------------------------------------------------------------------------
# Stage checkpoints
# ---------------------------------------------------------------------------


def save_stage(stage, path) -> None:
    kind = next(k for k, cls in STAGE_KINDS.items() if isinstance(stage, cls))
    meta = {"kind": kind, "trained_steps": getattr(stage, "trained_steps", 0)}
    for line in stage.cfg.to_text().splitlines():
        key, value = (s.strip() for s in line.split("=", 1))
        meta[f"cfg.{key}"] = value
    save_checkpoint(path, {"stage": stage}, meta)


def load_stage(path, kind: str | None = None):
    groups, meta = load_checkpoint(path)
    found = meta.get("kind")
    if found not in STAGE_KINDS or (kind is not None and found != kind):
        raise ValueError(f"{path}: checkpoint holds {found!r}, expected {kind or 'a stage'}")
    cfg_text = "\n".join(f"{k[4:]} = {v}" for k, v in meta.items() if k.startswith("cfg."))
    cfg = parse_config(cfg_text, Config())
    stage = STAGE_KINDS[found](cfg)
    stage.load_state_dict(groups["stage"])
    stage.trained_steps = int(meta.get("trained_steps", 0))
    return stage


def save_result(result: InpaintResult, path) -> None:
    """Write images and layouts as a finet-synth/1 container (channel-last tensors)."""
    from .tensorio import write_container

    tensors = {
        "images": result.images.permute(0, 2, 3, 1).numpy(),
        "segmaps": result.segmaps.permute(0, 2, 3, 1).numpy(),
    }
    meta = {"box": ",".join(str(v) for v in result.box), **{k: str(v) for k, v in result.meta.items()}}
    write_container(Path(path), sd.DATASET_VERSION, tensors, meta)


def to_uint8(images: Tensor) -> np.ndarray:
    """(n, 3, H, W) in [-1, 1] -> (n, H, W, 3) uint8 for lossless PNG export."""
    arr = ((images.clamp(-1, 1) + 1) * 127.5).round().to(torch.uint8)
    return arr.permute(0, 2, 3, 1).numpy()
