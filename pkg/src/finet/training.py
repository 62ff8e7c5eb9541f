"""Training loop shared by the shape and appearance stages."""

from __future__ import annotations

import logging
import time
from pathlib import Path

import torch

from .appearancenet import AppearanceStage, train_step_appearance
from .config import Config
from .shapenet import ShapeStage, train_step_shape
from .stagedata import OutfitTensors

log = logging.getLogger(__name__)


def make_optimizer(stage: torch.nn.Module, cfg: Config) -> torch.optim.Adam:
    return torch.optim.Adam([p for p in stage.parameters() if p.requires_grad], lr=cfg.lr, betas=cfg.betas)


def step_fn(stage):
    if isinstance(stage, ShapeStage):
        return train_step_shape
    if isinstance(stage, AppearanceStage):
        return train_step_appearance
    return type(stage).train_step


def fit(stage, data: OutfitTensors, cfg: Config, steps: int | None = None, log_path=None, seed: int | None = None):
    """Train ``stage`` for ``steps`` Adam steps; returns the per-step metrics.

    When ``log_path`` is given, each step is appended as ``step key=value ...``.
    """
    steps = cfg.steps if steps is None else steps
    seed = cfg.seed if seed is None else seed
    gen = torch.Generator().manual_seed(seed + 7919)
    optimizer = make_optimizer(stage, cfg)
    train_step = step_fn(stage)
    history = []
    handle = open(log_path, "a") if log_path is not None else None
    t0 = time.time()
    try:
        for step in range(steps):
            batch = data.random_batch(cfg.batch, gen)
            noise = torch.randn(cfg.batch, cfg.latent_dim, generator=gen)
            metrics = train_step(stage, batch, optimizer, noise)
            history.append(metrics)
            stage.trained_steps = getattr(stage, "trained_steps", 0) + 1
            if handle is not None:
                handle.write(f"{step} " + " ".join(f"{k}={v:.6g}" for k, v in metrics.items()) + "\n")
            if step % 250 == 0 or step == steps - 1:
                log.info("step %d %s (%.1fs)", step, metrics, time.time() - t0)
    finally:
        if handle is not None:
            handle.close()
    return history


@torch.no_grad()
def evaluate_loss(stage, data: OutfitTensors, batch_size: int = 32, seed: int = 0) -> dict[str, float]:
    """Dataset-mean training losses with fixed categories and fixed posterior noise."""
    gen = torch.Generator().manual_seed(seed)
    totals: dict[str, float] = {}
    count = 0
    for batch in data.fixed_batches(batch_size, seed):
        n = batch["image"].shape[0]
        noise = torch.randn(n, stage.cfg.latent_dim, generator=gen)
        losses = stage.losses(batch, noise)
        for k, v in losses.items():
            totals[k] = totals.get(k, 0.0) + float(v) * n
        count += n
    return {k: v / count for k, v in totals.items()}


def train_stages(samples, cfg: Config, out_dir=None, steps: int | None = None):
    """Train fresh shape and appearance stages on ``samples``; optionally checkpoint them."""
    from .pipeline import save_stage

    data = OutfitTensors(samples, cfg.categories, cfg.crop_size)
    shape = ShapeStage(cfg, seed=cfg.seed)
    app = AppearanceStage(cfg, seed=cfg.seed)
    logs = {}
    for name, stage in (("shape", shape), ("appearance", app)):
        log_path = None
        if out_dir is not None:
            Path(out_dir).mkdir(parents=True, exist_ok=True)
            log_path = Path(out_dir) / f"{name}_metrics.log"
        logs[name] = fit(stage, data, cfg, steps=steps, log_path=log_path)
        if out_dir is not None:
            save_stage(stage, Path(out_dir) / f"{name}.ckpt")
    return shape, app, logs
