"""Versioned named-tensor containers on disk.

A container is a directory with a ``manifest.txt`` and one raw little-endian
float32 file per tensor::

    format finet-synth/1
    tensor image float32 64,64,3
    meta hue_family 0.4172...

Directories are written to a temporary sibling and renamed on success, so a
failed write never leaves a partial container behind.
"""

from __future__ import annotations

import os
import shutil
import tempfile
from pathlib import Path

import numpy as np

MANIFEST = "manifest.txt"
DTYPE = np.dtype("<f4")


class FormatError(Exception):
    """Raised when a container on disk is inconsistent with its manifest."""


def _write_container_into(path: Path, version: str, tensors: dict, meta: dict) -> None:
    lines = [f"format {version}"]
    for name, arr in tensors.items():
        if not name or any(ch.isspace() for ch in name) or "/" in name:
            raise ValueError(f"bad tensor name {name!r}")
        arr = np.ascontiguousarray(np.asarray(arr, dtype=DTYPE))
        (path / f"{name}.bin").write_bytes(arr.tobytes())
        shape = ",".join(str(d) for d in arr.shape)
        lines.append(f"tensor {name} float32 {shape}")
    for key, value in meta.items():
        value = str(value)
        if "\n" in value or any(ch.isspace() for ch in key):
            raise ValueError(f"bad meta entry {key!r}")
        lines.append(f"meta {key} {value}")
    (path / MANIFEST).write_text("\n".join(lines) + "\n")


def atomic_directory(target: Path):
    """Context manager yielding a temp dir that replaces ``target`` on clean exit."""
    return _AtomicDir(Path(target))


class _AtomicDir:
    def __init__(self, target: Path):
        self.target = target

    def __enter__(self) -> Path:
        self.target.parent.mkdir(parents=True, exist_ok=True)
        self.tmp = Path(tempfile.mkdtemp(prefix=f".{self.target.name}.", dir=self.target.parent))
        return self.tmp

    def __exit__(self, exc_type, exc, tb):
        if exc_type is not None:
            shutil.rmtree(self.tmp, ignore_errors=True)
            return False
        if self.target.exists():
            shutil.rmtree(self.target)
        os.replace(self.tmp, self.target)
        return False


def write_container(path, version: str, tensors: dict, meta: dict | None = None) -> None:
    path = Path(path)
    with atomic_directory(path) as tmp:
        _write_container_into(tmp, version, tensors, meta or {})


def write_container_into(path, version: str, tensors: dict, meta: dict | None = None) -> None:
    """Write into an existing (already temporary) directory."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    _write_container_into(path, version, tensors, meta or {})


def read_manifest(path) -> tuple[str, list[tuple[str, tuple[int, ...]]], dict[str, str]]:
    path = Path(path)
    manifest = path / MANIFEST
    if not manifest.is_file():
        raise FormatError(f"missing manifest in {path}")
    version = None
    tensors = []
    meta = {}
    for lineno, line in enumerate(manifest.read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split(" ", 2)
        kind = parts[0]
        try:
            if kind == "format":
                version = parts[1]
            elif kind == "tensor":
                name, dtype, shape = line.split(" ")[1:4]
                if dtype != "float32":
                    raise FormatError(f"{manifest}:{lineno}: unsupported dtype {dtype}")
                dims = tuple(int(d) for d in shape.split(",")) if shape else ()
                tensors.append((name, dims))
            elif kind == "meta":
                meta[parts[1]] = parts[2] if len(parts) > 2 else ""
            else:
                raise FormatError(f"{manifest}:{lineno}: unknown entry {kind!r}")
        except (IndexError, ValueError) as err:
            raise FormatError(f"{manifest}:{lineno}: malformed line {line!r}") from err
    if version is None:
        raise FormatError(f"{manifest}: no format line")
    return version, tensors, meta


def read_container(path, version: str) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    path = Path(path)
    found, entries, meta = read_manifest(path)
    if found != version:
        raise FormatError(f"{path}: format {found!r}, expected {version!r}")
    tensors = {}
    for name, shape in entries:
        blob = path / f"{name}.bin"
        if not blob.is_file():
            raise FormatError(f"{path}: missing tensor file {blob.name}")
        raw = blob.read_bytes()
        expected = int(np.prod(shape, dtype=np.int64)) * DTYPE.itemsize
        if len(raw) != expected:
            raise FormatError(f"{blob}: {len(raw)} bytes, manifest shape {shape} needs {expected}")
        tensors[name] = np.frombuffer(raw, dtype=DTYPE).reshape(shape).astype(np.float32)
    return tensors, meta
