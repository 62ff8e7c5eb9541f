"""Residual U-Net generator with latent injection, and the convolutional Gaussian encoder."""

from __future__ import annotations

import hashlib

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor

from .distributions import DiagonalGaussian, DimensionError
from .tensorio import read_container, write_container

CHECKPOINT_VERSION = "finet-ckpt/1"


def channel_schedule(levels: int, base_channels: int) -> list[int]:
    # Widths double once and then stay flat; deeper doubling does not fit a CPU budget.
    return [base_channels * min(2**i, 2) for i in range(levels)]


def broadcast_latent(h: Tensor, z: Tensor) -> Tensor:
    """Concatenate ``z`` to ``h`` after tiling it over the spatial grid."""
    zmap = z[:, :, None, None].expand(-1, -1, h.shape[2], h.shape[3])
    return torch.cat([h, zmap], dim=1)


class ResidualBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x):
        return F.relu(x + self.conv2(F.relu(self.conv1(x))))


class R2Block(nn.Module):
    """1x1 projection to ``out_channels`` followed by two residual blocks."""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.project = nn.Conv2d(in_channels, out_channels, 1)
        self.res1 = ResidualBlock(out_channels)
        self.res2 = ResidualBlock(out_channels)

    def forward(self, x):
        return self.res2(self.res1(F.relu(self.project(x))))


class GenNetwork(nn.Module):
    """U-Net generator conditioned on a latent code.

    Encoder level i: stride-2 3x3 conv, then an R2 block fed with the latent
    tiled over space. Decoder level i: R2 block on [features, skip_i, latent],
    nearest-neighbour upsampling and a 3x3 conv. The raw input is concatenated
    once more before the output conv, and ``head`` picks softmax (label maps) or
    tanh (images).
    """

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        latent_dim: int = 8,
        levels: int = 4,
        base_channels: int = 32,
        head: str = "tanh",
    ):
        super().__init__()
        if head not in ("softmax", "tanh", "none"):
            raise ValueError(f"unknown head {head!r}")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.latent_dim = latent_dim
        self.levels = levels
        self.head = head
        chs = channel_schedule(levels, base_channels)
        self.down = nn.ModuleList()
        self.enc = nn.ModuleList()
        prev = in_channels
        for c in chs:
            self.down.append(nn.Conv2d(prev, c, 3, stride=2, padding=1))
            self.enc.append(R2Block(c + latent_dim, c))
            prev = c
        self.dec = nn.ModuleList()
        self.up = nn.ModuleList()
        for i in reversed(range(levels)):
            skip = 0 if i == levels - 1 else chs[i]
            self.dec.append(R2Block(chs[i] + skip + latent_dim, chs[i]))
            self.up.append(nn.Conv2d(chs[i], chs[max(i - 1, 0)], 3, padding=1))
        self.out = nn.Conv2d(chs[0] + in_channels, out_channels, 3, padding=1)

    def features(self, x: Tensor, z: Tensor) -> Tensor:
        """Output logits before the head activation."""
        if x.shape[1] != self.in_channels:
            raise DimensionError(f"context has {x.shape[1]} channels, expected {self.in_channels}")
        if z.shape[-1] != self.latent_dim or z.shape[0] != x.shape[0]:
            raise DimensionError(f"latent shape {tuple(z.shape)} does not match batch/latent_dim")
        step = 2**self.levels
        if x.shape[2] % step or x.shape[3] % step:
            raise DimensionError(f"spatial size {tuple(x.shape[2:])} not divisible by {step}")
        h = x
        skips = []
        for down, enc in zip(self.down, self.enc):
            h = enc(broadcast_latent(F.relu(down(h)), z))
            skips.append(h)
        for j, (dec, up) in enumerate(zip(self.dec, self.up)):
            if j > 0:
                h = torch.cat([h, skips[self.levels - 1 - j]], dim=1)
            h = dec(broadcast_latent(h, z))
            h = F.relu(up(F.interpolate(h, scale_factor=2, mode="nearest")))
        return self.out(torch.cat([h, x], dim=1))

    def forward(self, x: Tensor, z: Tensor) -> Tensor:
        logits = self.features(x, z)
        if self.head == "softmax":
            return torch.softmax(logits, dim=1)
        if self.head == "tanh":
            return torch.tanh(logits)
        return logits


class GaussEncoder(nn.Module):
    """Strided conv encoder with a fully-connected (mean, log_var) head."""

    def __init__(
        self,
        in_channels: int,
        latent_dim: int = 8,
        levels: int = 4,
        base_channels: int = 32,
        input_size: int = 32,
    ):
        super().__init__()
        self.in_channels = in_channels
        self.latent_dim = latent_dim
        self.input_size = input_size
        chs = channel_schedule(levels, base_channels)
        layers = []
        prev = in_channels
        for c in chs:
            layers += [nn.Conv2d(prev, c, 3, stride=2, padding=1), nn.ReLU(), R2Block(c, c)]
            prev = c
        self.body = nn.Sequential(*layers)
        spatial = input_size // 2**levels
        self.fc = nn.Linear(chs[-1] * spatial * spatial, 2 * latent_dim)

    def forward(self, x: Tensor) -> DiagonalGaussian:
        if x.shape[1:] != (self.in_channels, self.input_size, self.input_size):
            raise DimensionError(
                f"encoder input {tuple(x.shape[1:])}, expected {(self.in_channels, self.input_size, self.input_size)}"
            )
        out = self.fc(self.body(x).flatten(1))
        return DiagonalGaussian(out[:, : self.latent_dim], out[:, self.latent_dim :])


def init_params(module: nn.Module, seed: int, head_scale: float = 0.1) -> nn.Module:
    """Kaiming-uniform (fan-in, ReLU gain) weights and zero biases, deterministic per seed.

    Each weight is drawn from U(-b, b) with b = sqrt(6 / fan_in). The closing conv
    of every residual branch is then zeroed so blocks start as identities, and
    output layers (generator ``out``, encoder ``fc``) are scaled by ``head_scale``.
    Without this the stacked residual sums blow activations up by orders of
    magnitude at initialisation.
    """
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, (nn.Conv2d, nn.Linear)):
                nn.init.kaiming_uniform_(m.weight, a=0.0, mode="fan_in", nonlinearity="relu", generator=gen)
                if m.bias is not None:
                    m.bias.zero_()
        for m in module.modules():
            if isinstance(m, ResidualBlock):
                m.conv2.weight.zero_()
            if isinstance(m, GenNetwork):
                m.out.weight.mul_(head_scale)
            if isinstance(m, GaussEncoder):
                m.fc.weight.mul_(head_scale)
    return module


def kaiming_bound(weight: Tensor) -> float:
    fan_in = weight[0].numel()
    return float(np.sqrt(6.0 / fan_in))


def param_digest(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in module.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# Region helpers shared by both stages
# ---------------------------------------------------------------------------


def crop_resize(x: Tensor, boxes: Tensor, size: int, mode: str = "bilinear") -> Tensor:
    """Crop each image to its (r0, c0, r1, c1) box and resample to ``size`` x ``size``.

    Differentiable in ``x``; boxes are end-exclusive pixel coordinates.
    """
    n, _, h, w = x.shape
    b = boxes.to(x.dtype)
    theta = torch.zeros(n, 2, 3, dtype=x.dtype)
    theta[:, 0, 0] = (b[:, 3] - b[:, 1]) / w
    theta[:, 0, 2] = (b[:, 1] + b[:, 3]) / w - 1.0
    theta[:, 1, 1] = (b[:, 2] - b[:, 0]) / h
    theta[:, 1, 2] = (b[:, 0] + b[:, 2]) / h - 1.0
    grid = F.affine_grid(theta, (n, x.shape[1], size, size), align_corners=False)
    return F.grid_sample(x, grid, mode=mode, padding_mode="border", align_corners=False)


def box_masks(boxes: Tensor, h: int, w: int) -> Tensor:
    """Boolean (N, 1, h, w) masks that are True inside each box."""
    rows = torch.arange(h)[None, :, None]
    cols = torch.arange(w)[None, None, :]
    b = boxes.long()
    inside = (
        (rows >= b[:, 0, None, None]) & (rows < b[:, 2, None, None])
        & (cols >= b[:, 1, None, None]) & (cols < b[:, 3, None, None])
    )
    return inside[:, None]


def paste_back(generated: Tensor, original: Tensor, boxes: Tensor) -> Tensor:
    """Generated pixels inside each box, original pixels (bit-exact) elsewhere."""
    m = box_masks(boxes, original.shape[2], original.shape[3])
    return torch.where(m, generated, original)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path, modules: dict[str, nn.Module], meta: dict | None = None) -> None:
    tensors = {}
    for prefix, module in modules.items():
        for name, t in module.state_dict().items():
            tensors[f"{prefix}.{name}"] = t.detach().cpu().numpy()
    write_container(path, CHECKPOINT_VERSION, tensors, meta)


def load_checkpoint(path) -> tuple[dict[str, dict[str, Tensor]], dict[str, str]]:
    """Return ``{prefix: state_dict}`` and the checkpoint metadata."""
    arrays, meta = read_container(path, CHECKPOINT_VERSION)
    groups: dict[str, dict[str, Tensor]] = {}
    for full, arr in arrays.items():
        prefix, name = full.split(".", 1)
        groups.setdefault(prefix, {})[name] = torch.from_numpy(arr.copy())
    return groups, meta
