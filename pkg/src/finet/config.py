"""Plain-text ``key = value`` configuration with fail-closed key checking."""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from pathlib import Path

from .synthdata import CATEGORIES


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Config:
    image_size: int = 64
    crop_size: int = 32
    latent_dim: int = 8
    lambda_kl: float = 0.1
    levels: int = 4
    base_channels: int = 32
    lr: float = 1e-4
    betas: tuple[float, float] = (0.5, 0.999)
    batch: int = 16
    steps: int = 2000
    seed: int = 0
    standard_prior: bool = False
    categories: tuple[str, ...] = CATEGORIES

    def with_(self, **changes) -> "Config":
        return replace(self, **changes)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"


def _parse_bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _convert(name: str, raw: str):
    if name == "betas":
        parts = [float(p) for p in raw.replace("(", "").replace(")", "").split(",")]
        if len(parts) != 2:
            raise ValueError("betas needs two values")
        return tuple(parts)
    if name == "categories":
        cats = tuple(p.strip() for p in raw.split(",") if p.strip())
        bad = [c for c in cats if c not in CATEGORIES]
        if bad or not cats:
            raise ValueError(f"unknown categories {bad}")
        return cats
    if name == "standard_prior":
        return _parse_bool(raw)
    if name in ("lambda_kl", "lr"):
        return float(raw)
    return int(raw)


def parse_config(text: str, base: Config | None = None) -> Config:
    known = {f.name for f in fields(Config)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        try:
            values[key] = _convert(key, raw)
        except ValueError as err:
            raise ConfigError(f"line {lineno}: bad value for {key}: {err}") from err
    return replace(base or Config(), **values)


def load_config(path=None) -> Config:
    if path is None:
        return Config()
    return parse_config(Path(path).read_text())
