"""Command line entry point: ``finet <subcommand> ...``."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import synthdata as sd
from .config import ConfigError, load_config
from .distributions import DimensionError
from .tensorio import FormatError, atomic_directory, write_container_into

log = logging.getLogger("finet")

SWEEP_VERSION = "finet-sweep/1"

# Fixed colours for label-map previews, one per segmentation channel.
LABEL_COLOURS = np.array(
    [
        [40, 30, 20], [230, 190, 160], [200, 160, 130], [220, 60, 60],
        [60, 120, 220], [60, 170, 90], [140, 80, 200], [235, 235, 235],
    ],
    dtype=np.uint8,
)


class CliError(Exception):
    """Expected failure that maps to exit status 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(2, f"{self.prog}: error: {message}\n")


def _seed(args) -> int:
    env = os.environ.get("FINET_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError as err:
            raise CliError(f"FINET_SEED is not an integer: {env!r}") from err
    return args.seed


def _existing(path: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise CliError(f"no such file or directory: {p}")
    return p


def _load_samples(path: str):
    return sd.read_dataset(_existing(path))


def _pick(samples, index: int):
    if not 0 <= index < len(samples):
        raise CliError(f"sample index {index} out of range (dataset has {len(samples)})")
    return samples[index]


def _load_stage(path: str, kind: str):
    from .pipeline import load_stage

    return load_stage(_existing(path), kind)


def _save_png(arr: np.ndarray, path: Path) -> None:
    from PIL import Image

    Image.fromarray(arr).save(path, format="PNG")


def _labels_rgb(seg: torch.Tensor) -> np.ndarray:
    """(n, 8, H, W) one-hot -> (n, H, W, 3) uint8 preview."""
    return LABEL_COLOURS[seg.argmax(dim=1).numpy()]


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> None:
    seed = _seed(args)
    samples = sd.generate_dataset(args.n, seed)
    sd.write_dataset(samples, args.out)
    print(f"wrote {len(samples)} samples to {args.out}")


def _train(args, kind: str) -> None:
    from .pipeline import save_stage
    from .stagedata import OutfitTensors
    from .training import fit

    cfg = load_config(_existing(args.config) if args.config else None)
    seed = _seed(args)
    if seed is not None:
        cfg = cfg.with_(seed=seed)
    steps = cfg.steps if args.steps is None else args.steps
    samples = _load_samples(args.data)
    data = OutfitTensors(samples, cfg.categories, cfg.crop_size)
    if kind == "shape":
        from .shapenet import ShapeStage

        stage = ShapeStage(cfg, seed=cfg.seed)
    else:
        from .appearancenet import AppearanceStage

        stage = AppearanceStage(cfg, seed=cfg.seed)
    torch.manual_seed(cfg.seed)
    out = Path(args.out)
    log_path = Path(args.log) if args.log else out.with_name(out.name + ".metrics.log")
    if log_path.exists():
        log_path.unlink()
    fit(stage, data, cfg, steps=steps, log_path=log_path)
    save_stage(stage, out)
    print(f"trained {kind} stage for {steps} steps -> {out} (log {log_path})")


def cmd_train_shape(args) -> None:
    _train(args, "shape")


def cmd_train_appearance(args) -> None:
    _train(args, "appearance")


def _write_result(result, out: Path, png: bool) -> None:
    from .pipeline import to_uint8

    tensors = {
        "images": result.images.permute(0, 2, 3, 1).numpy(),
        "segmaps": result.segmaps.permute(0, 2, 3, 1).numpy(),
    }
    meta = {"box": ",".join(str(v) for v in result.box), **{k: str(v) for k, v in result.meta.items()}}
    with atomic_directory(out) as tmp:
        write_container_into(tmp, sd.DATASET_VERSION, tensors, meta)
        if png:
            for i, (img, lab) in enumerate(zip(to_uint8(result.images), _labels_rgb(result.segmaps))):
                _save_png(img, tmp / f"image_{i:03d}.png")
                _save_png(lab, tmp / f"layout_{i:03d}.png")


def cmd_inpaint(args) -> None:
    from .pipeline import inpaint

    shape = _load_stage(args.shape_ckpt, "shape")
    app = _load_stage(args.app_ckpt, "appearance")
    sample = _pick(_load_samples(args.data), args.sample)
    result = inpaint(shape, app, sample.image, sample.seg, sample.pose, args.category,
                     n=args.n, temperature=args.temperature, seed=_seed(args))
    if result.meta.get("untrained"):
        log.warning("inpainting with an untrained stage")
    _write_result(result, Path(args.out), args.png)
    print(f"wrote {args.n} inpainted samples to {args.out}")


def cmd_transfer(args) -> None:
    from .pipeline import transfer

    shape = _load_stage(args.shape_ckpt, "shape")
    app = _load_stage(args.app_ckpt, "appearance")
    samples = _load_samples(args.data)
    sample = _pick(samples, args.sample)
    target = _pick(samples, args.target_sample)
    target_category = args.target_category or args.category
    x_s, x_a = sd.extract_garment_segment(target.image, target.seg, target_category, shape.cfg.crop_size)
    result = transfer(shape, app, sample.image, sample.seg, sample.pose, args.category, x_s, x_a)
    _write_result(result, Path(args.out), args.png)
    print(f"wrote transfer result to {args.out}")


def cmd_eval(args) -> None:
    from . import evaluate as ev
    from .pipeline import inpaint
    from .stagedata import OutfitTensors

    seed = _seed(args)
    metrics = [m.strip() for m in args.metrics.split(",") if m.strip()]
    unknown = set(metrics) - {"compat", "oracle", "diversity", "posterior"}
    if unknown:
        raise CliError(f"unknown metrics: {', '.join(sorted(unknown))}")
    shape = _load_stage(args.shape_ckpt, "shape")
    app = _load_stage(args.app_ckpt, "appearance")
    samples = _load_samples(args.data)
    outfits = samples[: args.outfits]
    results = {}
    embedder = ev.train_compat_embedding(samples, seed=seed) if "compat" in metrics else None
    compat, oracle, diversity = [], [], []
    for i, s in enumerate(outfits):
        category = args.category or sd.CATEGORIES[i % len(sd.CATEGORIES)]
        res = inpaint(shape, app, s.image, s.seg, s.pose, category, n=args.samples, seed=seed + i)
        crops = ev.region_crops(res.images, res.box)
        if "oracle" in metrics:
            oracle.append(ev.oracle_compat_rate(res.images, s, category))
        if "diversity" in metrics:
            diversity.append(ev.diversity_score(crops, app.extractor))
        if embedder is not None:
            _, ref = sd.extract_garment_segment(s.image, s.seg, category, box=res.box)
            ref = torch.from_numpy(ref.transpose(2, 0, 1).copy())
            compat.extend(ev.compat_score(embedder, c, ref) for c in crops)
    if compat:
        results["compat"] = float(np.mean(compat))
    if oracle:
        results["oracle_compat_rate"] = float(np.mean(oracle))
    if diversity:
        results["diversity"] = float(np.mean(diversity))
    if "posterior" in metrics:
        data = OutfitTensors(samples, shape.cfg.categories, shape.cfg.crop_size)
        for name, stage in (("shape", shape), ("appearance", app)):
            for key, value in ev.posterior_diagnostics(stage, data, seed=seed).items():
                results[f"{name}.{key}"] = value
    report = ev.format_report(results, len(outfits), seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = out.with_name(f".{out.name}.tmp")
    tmp.write_text(report)
    os.replace(tmp, out)
    sys.stdout.write(report)


def _parse_range(text: str) -> np.ndarray:
    try:
        a, b, steps = text.split(":")
        a, b, steps = float(a), float(b), int(steps)
    except ValueError as err:
        raise CliError(f"--range must look like a:b:steps, got {text!r}") from err
    if steps < 1:
        raise CliError("--range needs at least one step")
    return np.linspace(a, b, steps)


def cmd_latent_sweep(args) -> None:
    """Grid over two latent dims around the encoder-mean code of the sample's own garment."""
    from .pipeline import build_context, load_stage
    from .netcore import paste_back
    from .shapenet import ShapeStage

    stage = load_stage(_existing(args.ckpt))
    sample = _pick(_load_samples(args.data), args.sample)
    try:
        i, j = (int(v) for v in args.dims.split(","))
    except ValueError as err:
        raise CliError(f"--dims must look like i,j, got {args.dims!r}") from err
    zdim = stage.cfg.latent_dim
    if not (0 <= i < zdim and 0 <= j < zdim):
        raise CliError(f"--dims {i},{j} outside latent dimension {zdim}")
    values = _parse_range(args.range)
    ctx = build_context(sample.image, sample.seg, sample.pose, args.category, stage.cfg.crop_size)
    x_s, x_a = sd.extract_garment_segment(sample.image, sample.seg, args.category, stage.cfg.crop_size, ctx["box"])
    is_shape = isinstance(stage, ShapeStage)
    stage.eval()
    with torch.no_grad():
        crop = x_s if is_shape else x_a
        enc = stage.shape_encoder if is_shape else stage.appearance_encoder
        base = enc(torch.from_numpy(crop.transpose(2, 0, 1).copy())[None]).mean[0]
        codes = base.repeat(len(values) ** 2, 1)
        grid_i, grid_j = np.meshgrid(values, values, indexing="ij")
        codes[:, i] = torch.from_numpy(grid_i.ravel()).float()
        codes[:, j] = torch.from_numpy(grid_j.ravel()).float()
        n = codes.shape[0]
        boxes = torch.tensor([ctx["box"]] * n, dtype=torch.long)
        if is_shape:
            out = stage.generate(ctx["S_hat"][None].expand(n, -1, -1, -1), ctx["p_s"][None].expand(n, -1, -1, -1), codes)
            layouts = paste_back(out, ctx["seg"][None].expand(n, -1, -1, -1), boxes)
            tiles = _labels_rgb(layouts)
        else:
            face = ctx["seg"][sd.FACE_HAIR : sd.FACE_HAIR + 1]
            p_a = torch.cat([ctx["seg"], ctx["image"] * face])[None].expand(n, -1, -1, -1)
            out = stage.generate(ctx["I_hat"][None].expand(n, -1, -1, -1), p_a, codes)
            from .pipeline import to_uint8

            tiles = to_uint8(paste_back(out, ctx["image"][None].expand(n, -1, -1, -1), boxes))
    k = len(values)
    h, w = tiles.shape[1:3]
    grid = tiles.reshape(k, k, h, w, 3).transpose(0, 2, 1, 3, 4).reshape(k * h, k * w, 3)
    meta = {
        "kind": "shape" if is_shape else "appearance",
        "dims": f"{i},{j}",
        "values": ",".join(f"{v:.6g}" for v in values),
        "rows": k,
        "cols": k,
        "tiles": n,
    }
    with atomic_directory(Path(args.out)) as tmp:
        write_container_into(tmp, SWEEP_VERSION, {"tiles": tiles.astype(np.float32) / 255.0}, meta)
        _save_png(np.ascontiguousarray(grid), tmp / "grid.png")
    print(f"wrote {k}x{k} sweep grid to {args.out}")


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="finet", description="Compatible and diverse garment inpainting on synthetic outfits.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate a synthetic outfit dataset")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    for name, func in (("train-shape", cmd_train_shape), ("train-appearance", cmd_train_appearance)):
        t = sub.add_parser(name, help=f"train the {name.split('-')[1]} stage")
        t.add_argument("--data", required=True)
        t.add_argument("--steps", type=int)
        t.add_argument("--out", required=True)
        t.add_argument("--config")
        t.add_argument("--seed", type=int)
        t.add_argument("--log", help="metrics log path (default: <out>.metrics.log)")
        t.set_defaults(func=func)

    def stages(q):
        q.add_argument("--shape-ckpt", required=True)
        q.add_argument("--app-ckpt", required=True)
        q.add_argument("--data", required=True)

    i = sub.add_parser("inpaint", help="inpaint one garment slot of a dataset sample")
    stages(i)
    i.add_argument("--sample", type=int, required=True)
    i.add_argument("--category", choices=sd.CATEGORIES, required=True)
    i.add_argument("--n", type=int, default=1)
    i.add_argument("--temperature", type=float, default=1.0)
    i.add_argument("--seed", type=int, default=0)
    i.add_argument("--png", action="store_true", help="also export PNG previews")
    i.add_argument("--out", required=True)
    i.set_defaults(func=cmd_inpaint)

    t = sub.add_parser("transfer", help="transfer a garment from one sample onto another")
    stages(t)
    t.add_argument("--sample", type=int, required=True)
    t.add_argument("--category", choices=sd.CATEGORIES, required=True)
    t.add_argument("--target-sample", type=int, required=True)
    t.add_argument("--target-category", choices=sd.CATEGORIES)
    t.add_argument("--png", action="store_true")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_transfer)

    e = sub.add_parser("eval", help="compute evaluation metrics")
    stages(e)
    e.add_argument("--metrics", default="oracle,diversity")
    e.add_argument("--outfits", type=int, default=20)
    e.add_argument("--samples", type=int, default=20)
    e.add_argument("--category", choices=sd.CATEGORIES, help="default: cycle through categories")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("latent-sweep", help="grid of outputs over two latent dimensions")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--sample", type=int, required=True)
    s.add_argument("--category", choices=sd.CATEGORIES, default="top")
    s.add_argument("--dims", required=True)
    s.add_argument("--range", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_latent_sweep)
    return p


def _join_range(argv: list[str]) -> list[str]:
    # argparse treats "-3:3:7" as an option; bind it to --range explicitly.
    out, it = [], iter(argv)
    for tok in it:
        if tok == "--range":
            nxt = next(it, None)
            out.append(tok if nxt is None else f"--range={nxt}")
        else:
            out.append(tok)
    return out


def run(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(_join_range(list(sys.argv[1:] if argv is None else argv)))
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except CliError as err:
        print(f"finet: {err}", file=sys.stderr)
        return 1
    except (FormatError, ConfigError, DimensionError, ValueError, OSError) as err:
        print(f"finet: {type(err).__name__}: {err}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
