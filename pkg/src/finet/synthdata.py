"""Procedural stick-figure outfits with exact segmentation, pose and compatibility labels.

Every outfit is rendered from a :class:`StyleSeed`. The outfit's base hue and
formality decide which garment shapes and colours may appear, and
:func:`compat_oracle` scores any garment against those same rules, so
compatibility is known exactly for generated data.

Arrays handed around here are numpy and channel-last (H, W, C); the network
modules convert to torch's channel-first layout.
"""

from __future__ import annotations

import colorsys
import itertools
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from skimage.draw import polygon as fill_polygon

IMAGE_SIZE = 64
CROP_SIZE = 32
NUM_KEYPOINTS = 18
HEATMAP_SIGMA = 1.5
BOX_MARGIN = 2

# Segmentation channels.
FACE_HAIR, UPPER_SKIN, LOWER_SKIN, HAT, TOP, BOTTOM, SHOES, BACKGROUND = range(8)
NUM_SEG = 8
SEG_NAMES = ("face_hair", "upper_skin", "lower_skin", "hat", "top", "bottom", "shoes", "background")

CATEGORIES = ("hat", "top", "bottom", "shoes")
CATEGORY_CHANNEL = {"hat": HAT, "top": TOP, "bottom": BOTTOM, "shoes": SHOES}

TOP_SLEEVES = ("long", "short", "none")
TOP_LENGTHS = ("crop", "regular", "long")
SHAPE_CODES = {
    "hat": ("present-A", "present-B", "absent"),
    "top": tuple(f"{s}-{l}" for s, l in itertools.product(TOP_SLEEVES, TOP_LENGTHS)),
    "bottom": ("pants", "shorts", "skirt"),
    "shoes": ("present-A", "present-B", "absent"),
}

# Formality rule table. It is the compatibility contract of the dataset.
FORMAL_THRESHOLD = 0.5
ALLOWED_SHAPES = {
    "formal": {
        "hat": ("present-A", "absent"),
        "top": ("long-regular", "long-long", "short-regular", "short-long"),
        "bottom": ("pants", "skirt"),
        "shoes": ("present-A",),
    },
    "casual": {
        "hat": ("present-B", "absent"),
        "top": ("short-crop", "short-regular", "none-crop", "none-regular"),
        "bottom": ("pants", "shorts"),
        "shoes": ("present-B", "absent"),
    },
}
HUE_SPREAD = 0.05
HUE_RADIUS = 0.10
HUE_FALLOFF = 5.0

SATURATION_RANGE = (0.55, 1.0)
VALUE_RANGE = (0.45, 0.9)
BACKGROUND_RGB = (0.92, 0.92, 0.92)
SKIN_HSV = (0.07, 0.30, 0.95)
HAIR_RGB = (0.12, 0.12, 0.12)

# COCO-18 order: nose, neck, r-shoulder, r-elbow, r-wrist, l-shoulder, l-elbow,
# l-wrist, r-hip, r-knee, r-ankle, l-hip, l-knee, l-ankle, r-eye, l-eye, r-ear, l-ear.
BASE_KEYPOINTS = np.array(
    [
        (13, 32), (19, 32), (20, 25), (30, 22), (39, 21), (20, 39), (30, 42), (39, 43),
        (38, 28), (48, 28), (57, 28), (38, 36), (48, 36), (57, 36), (11, 30), (11, 34),
        (12, 27), (12, 37),
    ],
    dtype=np.int64,
)
NOSE, NECK, R_SHO, R_ELB, R_WRI, L_SHO, L_ELB, L_WRI, R_HIP, R_KNE, R_ANK, L_HIP, L_KNE, L_ANK = range(14)

# Boxes (r0, c0, r1, c1), end-exclusive, used when a category has no pixels.
CANONICAL_BOXES = {
    "hat": (0, 22, 11, 42),
    "top": (14, 14, 46, 50),
    "bottom": (33, 20, 63, 44),
    "shoes": (50, 21, 64, 43),
}


@dataclass(frozen=True)
class StyleSeed:
    hue_family: float
    formality: float
    rng_seed: int

    @property
    def regime(self) -> str:
        return "formal" if self.formality >= FORMAL_THRESHOLD else "casual"


@dataclass(frozen=True)
class GarmentParams:
    category: str
    shape_code: str
    hue: float = 0.0
    saturation: float = 0.0
    value: float = 0.0

    def __post_init__(self):
        if self.category not in CATEGORIES:
            raise ValueError(f"unknown category {self.category!r}")
        if self.shape_code not in SHAPE_CODES[self.category]:
            raise ValueError(f"shape {self.shape_code!r} not valid for {self.category}")
        if not (0.0 <= self.hue < 1.0 and 0.0 <= self.saturation <= 1.0 and 0.0 <= self.value <= 1.0):
            raise ValueError("hue/saturation/value out of range")

    @property
    def present(self) -> bool:
        return self.shape_code != "absent"

    @property
    def rgb(self) -> np.ndarray:
        return np.array(colorsys.hsv_to_rgb(self.hue, self.saturation, self.value))


@dataclass
class OutfitSample:
    image: np.ndarray  # (H, W, 3) in [-1, 1]
    seg: np.ndarray  # (H, W, 8) one-hot
    pose: np.ndarray  # (H, W, 18) heatmaps in [0, 1]
    keypoints: np.ndarray  # (18, 2) integer (row, col)
    garments: dict[str, GarmentParams]
    style: StyleSeed
    meta: dict[str, str] = field(default_factory=dict)

    def garment_present(self, category: str) -> bool:
        return self.garments[category].present


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------


def _grid(size: int):
    return np.mgrid[0:size, 0:size].astype(np.float64)


def _capsule(size, p, q, half_width):
    rr, cc = _grid(size)
    p = np.asarray(p, float)
    q = np.asarray(q, float)
    d = q - p
    denom = max(float(d @ d), 1e-9)
    t = np.clip(((rr - p[0]) * d[0] + (cc - p[1]) * d[1]) / denom, 0.0, 1.0)
    dr = rr - (p[0] + t * d[0])
    dc = cc - (p[1] + t * d[1])
    return dr * dr + dc * dc <= half_width * half_width


def _disk(size, center, radius):
    rr, cc = _grid(size)
    return (rr - center[0]) ** 2 + (cc - center[1]) ** 2 <= radius * radius


def _quad(size, corners):
    mask = np.zeros((size, size), bool)
    corners = np.asarray(corners, float)
    r, c = fill_polygon(corners[:, 0], corners[:, 1], shape=(size, size))
    mask[r, c] = True
    return mask


def _rect(size, r0, c0, r1, c1):
    mask = np.zeros((size, size), bool)
    mask[max(r0, 0):max(r1, 0), max(c0, 0):max(c1, 0)] = True
    return mask


def _lerp(a, b, t):
    return np.asarray(a, float) + t * (np.asarray(b, float) - np.asarray(a, float))


def garment_mask(category: str, shape_code: str, kp: np.ndarray, size: int = IMAGE_SIZE) -> np.ndarray:
    """Silhouette of a garment on the skeleton, before occlusion by later layers."""
    if shape_code == "absent":
        return np.zeros((size, size), bool)
    head_r, head_c = kp[NOSE][0] - 1, kp[NOSE][1]
    head_top = head_r - 6
    if category == "hat":
        if shape_code == "present-A":
            return _rect(size, head_top - 2, head_c - 7, head_top + 3, head_c + 8)
        return _rect(size, head_top - 6, head_c - 4, head_top + 3, head_c + 5)
    if category == "shoes":
        rise = 1 if shape_code == "present-A" else 5
        m = np.zeros((size, size), bool)
        for ank in (kp[R_ANK], kp[L_ANK]):
            m |= _rect(size, ank[0] - rise, ank[1] - 3, ank[0] + 4, ank[1] + 4)
        return m
    if category == "bottom":
        r_hip, l_hip = kp[R_HIP], kp[L_HIP]
        m = _quad(size, [r_hip + (-1, -3), l_hip + (-1, 3), l_hip + (4, 3), r_hip + (4, -3)])
        if shape_code == "pants":
            for hip, knee, ank in ((r_hip, kp[R_KNE], kp[R_ANK]), (l_hip, kp[L_KNE], kp[L_ANK])):
                m |= _capsule(size, hip, knee, 3.5) | _capsule(size, knee, ank, 3.0)
        elif shape_code == "shorts":
            for hip, knee in ((r_hip, kp[R_KNE]), (l_hip, kp[L_KNE])):
                m |= _capsule(size, hip, _lerp(hip, knee, 0.5), 3.8)
        else:  # skirt
            r_kn, l_kn = kp[R_KNE], kp[L_KNE]
            m |= _quad(size, [r_hip + (-1, -3), l_hip + (-1, 3), l_kn + (2, 6), r_kn + (2, -6)])
        return m
    if category == "top":
        sleeve, length = shape_code.split("-")
        r_sho, l_sho, r_hip, l_hip = kp[R_SHO], kp[L_SHO], kp[R_HIP], kp[L_HIP]
        extend = {"crop": None, "regular": 0.0, "long": 5.0}[length]
        if extend is None:
            r_end, l_end = _lerp(r_sho, r_hip, 0.65), _lerp(l_sho, l_hip, 0.65)
        else:
            r_end, l_end = r_hip + (extend, 0), l_hip + (extend, 0)
        m = _quad(size, [r_sho + (-1, -1), l_sho + (-1, 1), l_end + (0, 3), r_end + (0, -3)])
        for sho, elb, wri in ((r_sho, kp[R_ELB], kp[R_WRI]), (l_sho, kp[L_ELB], kp[L_WRI])):
            if sleeve == "long":
                m |= _capsule(size, sho, elb, 3.0) | _capsule(size, elb, wri, 2.6)
            elif sleeve == "short":
                m |= _capsule(size, sho, _lerp(sho, elb, 0.5), 3.0)
        return m
    raise ValueError(f"unknown category {category!r}")


def _hsv_rgb(h, s, v):
    return np.array(colorsys.hsv_to_rgb(h, s, v))


def render_outfit(kp: np.ndarray, garments: dict[str, GarmentParams], size: int = IMAGE_SIZE):
    """Paint the figure back-to-front; returns (rgb in [0,1], integer label map)."""
    rgb = np.empty((size, size, 3))
    rgb[:] = BACKGROUND_RGB
    labels = np.full((size, size), BACKGROUND, np.int64)

    def paint(mask, colour, label):
        rgb[mask] = colour
        labels[mask] = label

    skin = _hsv_rgb(*SKIN_HSV)
    head_r, head_c = kp[NOSE][0] - 1, kp[NOSE][1]
    # Lower body skin.
    r_hip, l_hip = kp[R_HIP], kp[L_HIP]
    legs = _quad(size, [r_hip + (-1, -2), l_hip + (-1, 2), l_hip + (4, 2), r_hip + (4, -2)])
    for hip, knee, ank in ((r_hip, kp[R_KNE], kp[R_ANK]), (l_hip, kp[L_KNE], kp[L_ANK])):
        legs |= _capsule(size, hip, knee, 3.0) | _capsule(size, knee, ank, 2.5)
    paint(legs, skin, LOWER_SKIN)
    # Upper body skin: neck, torso, arms.
    upper = _rect(size, head_r + 4, head_c - 2, kp[NECK][0] + 2, head_c + 3)
    upper |= _quad(size, [kp[R_SHO] + (0, -1), kp[L_SHO] + (0, 1), l_hip + (0, 2), r_hip + (0, -2)])
    for sho, elb, wri in ((kp[R_SHO], kp[R_ELB], kp[R_WRI]), (kp[L_SHO], kp[L_ELB], kp[L_WRI])):
        upper |= _capsule(size, sho, elb, 2.5) | _capsule(size, elb, wri, 2.0)
    paint(upper, skin, UPPER_SKIN)
    # Head: skin face with a hair cap.
    head = _disk(size, (head_r, head_c), 6.0)
    paint(head, skin, FACE_HAIR)
    rr, _ = _grid(size)
    paint(head & (rr < head_r - 2), HAIR_RGB, FACE_HAIR)
    for cat in ("bottom", "top", "shoes", "hat"):
        g = garments.get(cat)
        if g is None or not g.present:
            continue
        paint(garment_mask(cat, g.shape_code, kp, size), g.rgb, CATEGORY_CHANNEL[cat])
    return rgb, labels


def pose_heatmaps(kp: np.ndarray, size: int = IMAGE_SIZE, sigma: float = HEATMAP_SIGMA) -> np.ndarray:
    rr, cc = _grid(size)
    d2 = (rr[None] - kp[:, 0, None, None]) ** 2 + (cc[None] - kp[:, 1, None, None]) ** 2
    return np.exp(-d2 / (2 * sigma * sigma)).transpose(1, 2, 0).astype(np.float32)


def one_hot(labels: np.ndarray, n: int = NUM_SEG) -> np.ndarray:
    return np.eye(n, dtype=np.float32)[labels]


def jitter_keypoints(rng: np.random.Generator) -> np.ndarray:
    """Global shift of up to 2 px plus per-joint noise of 1 px: every joint moves at most 3 px."""
    shift = rng.integers(-2, 3, size=2)
    noise = rng.integers(-1, 2, size=BASE_KEYPOINTS.shape)
    return BASE_KEYPOINTS + shift + noise


def _wrap_hue(h: float) -> float:
    return float(h % 1.0)


def sample_garments(style: StyleSeed, rng: np.random.Generator) -> dict[str, GarmentParams]:
    allowed = ALLOWED_SHAPES[style.regime]
    out = {}
    for cat in CATEGORIES:
        code = allowed[cat][rng.integers(len(allowed[cat]))]
        hue = _wrap_hue(style.hue_family + rng.uniform(-HUE_SPREAD, HUE_SPREAD))
        sat = float(rng.uniform(*SATURATION_RANGE))
        val = float(rng.uniform(*VALUE_RANGE))
        if code == "absent":
            hue = sat = val = 0.0
        out[cat] = GarmentParams(cat, code, hue, sat, val)
    return out


def assemble_sample(kp, garments, style, size: int = IMAGE_SIZE) -> OutfitSample:
    rgb, labels = render_outfit(kp, garments, size)
    return OutfitSample(
        image=(rgb * 2.0 - 1.0).astype(np.float32),
        seg=one_hot(labels),
        pose=pose_heatmaps(kp, size),
        keypoints=np.asarray(kp, np.int64),
        garments=dict(garments),
        style=style,
    )


def generate_outfit(style: StyleSeed, size: int = IMAGE_SIZE) -> OutfitSample:
    rng = np.random.default_rng(style.rng_seed)
    kp = jitter_keypoints(rng)
    garments = sample_garments(style, rng)
    return assemble_sample(kp, garments, style, size)


def random_styles(n: int, seed: int) -> list[StyleSeed]:
    rng = np.random.default_rng(seed)
    styles = []
    for _ in range(n):
        styles.append(
            StyleSeed(
                hue_family=float(rng.uniform(0.0, 1.0)),
                formality=float(rng.uniform(0.0, 1.0)),
                rng_seed=int(rng.integers(0, 2**31 - 1)),
            )
        )
    return styles


def generate_dataset(n: int, seed: int, size: int = IMAGE_SIZE) -> list[OutfitSample]:
    return [generate_outfit(s, size) for s in random_styles(n, seed)]


# ---------------------------------------------------------------------------
# Compatibility oracle
# ---------------------------------------------------------------------------


def hue_distance(a: float, b: float) -> float:
    d = abs(a - b) % 1.0
    return min(d, 1.0 - d)


def shape_allowed(garment: GarmentParams, outfit: OutfitSample) -> bool:
    if garment.shape_code not in ALLOWED_SHAPES[outfit.style.regime][garment.category]:
        return False
    # Shorts only go with short or no sleeves, and vice versa.
    if garment.category == "bottom" and garment.shape_code == "shorts":
        return not outfit.garments["top"].shape_code.startswith("long")
    if garment.category == "top" and garment.shape_code.startswith("long"):
        return outfit.garments["bottom"].shape_code != "shorts"
    return True


def compat_oracle(garment: GarmentParams, outfit: OutfitSample) -> float:
    """Rule-based compatibility of ``garment`` with the rest of ``outfit`` in [0, 1]."""
    if garment.category not in outfit.garments:
        raise ValueError(f"{garment.category} is not a slot of the outfit")
    if garment.present:
        dist = hue_distance(garment.hue, outfit.style.hue_family)
        hue_term = 1.0 if dist <= HUE_RADIUS else max(0.0, 1.0 - HUE_FALLOFF * (dist - HUE_RADIUS))
    else:
        hue_term = 1.0
    shape_term = 1.0 if shape_allowed(garment, outfit) else 0.0
    return hue_term * shape_term


# ---------------------------------------------------------------------------
# Input construction
# ---------------------------------------------------------------------------


def plausible_box(seg: np.ndarray, category: str, margin: int = BOX_MARGIN) -> tuple[int, int, int, int]:
    """Bounding box (r0, c0, r1, c1), end-exclusive, of the region a garment may occupy."""
    if category not in CATEGORIES:
        raise ValueError(f"unknown category {category!r}")
    ch = CATEGORY_CHANNEL[category]
    region = seg[..., ch] > 0.5
    if category == "top":
        region = region | (seg[..., UPPER_SKIN] > 0.5)
    elif category == "bottom":
        region = region | (seg[..., LOWER_SKIN] > 0.5)
    if not region.any():
        return CANONICAL_BOXES[category]
    rows = np.flatnonzero(region.any(axis=1))
    cols = np.flatnonzero(region.any(axis=0))
    h, w = seg.shape[:2]
    return (
        max(int(rows[0]) - margin, 0),
        max(int(cols[0]) - margin, 0),
        min(int(rows[-1]) + 1 + margin, h),
        min(int(cols[-1]) + 1 + margin, w),
    )


def box_mask(box, shape) -> np.ndarray:
    m = np.zeros(shape[:2], bool)
    r0, c0, r1, c1 = box
    m[r0:r1, c0:c1] = True
    return m


def mask_shape_context(seg: np.ndarray, category: str, box=None) -> np.ndarray:
    box = plausible_box(seg, category) if box is None else box
    out = seg.copy()
    r0, c0, r1, c1 = box
    out[r0:r1, c0:c1] = 0.0
    return out


def mask_appearance_context(image: np.ndarray, seg: np.ndarray, category: str, box=None) -> np.ndarray:
    box = plausible_box(seg, category) if box is None else box
    out = image.copy()
    r0, c0, r1, c1 = box
    out[r0:r1, c0:c1] = 0.0
    return out


def build_person_rep_shape(pose: np.ndarray, seg: np.ndarray) -> np.ndarray:
    return np.concatenate([pose, seg[..., FACE_HAIR:FACE_HAIR + 1]], axis=-1).astype(np.float32)


def build_person_rep_appearance(seg: np.ndarray, image: np.ndarray) -> np.ndarray:
    face = seg[..., FACE_HAIR:FACE_HAIR + 1]
    return np.concatenate([seg, image * face], axis=-1).astype(np.float32)


def resize(arr: np.ndarray, size: int) -> np.ndarray:
    """Bilinear resize of an (h, w, C) array to (size, size, C)."""
    t = torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1)))[None].float()
    out = F.interpolate(t, size=(size, size), mode="bilinear", align_corners=False)
    return out[0].numpy().transpose(1, 2, 0)


def extract_garment_segment(image, seg, category, size: int = CROP_SIZE, box=None):
    """Return (x_s, x_a): the garment's mask (h, w, 1) and masked RGB (h, w, 3), cropped and resized."""
    box = plausible_box(seg, category) if box is None else box
    r0, c0, r1, c1 = box
    ch = CATEGORY_CHANNEL[category]
    mask = seg[r0:r1, c0:c1, ch:ch + 1]
    if not mask.any():
        return np.zeros((size, size, 1), np.float32), np.zeros((size, size, 3), np.float32)
    x_s = resize(mask, size)
    x_a = resize(image[r0:r1, c0:c1] * mask, size)
    return x_s.astype(np.float32), x_a.astype(np.float32)


def build_context_garments(image, seg, target_category: str, size: int = CROP_SIZE) -> np.ndarray:
    """Garment crops stacked as hat, top, bottom, shoes; the target slot is all ones."""
    if target_category not in CATEGORIES:
        raise ValueError(f"unknown category {target_category!r}")
    slots = []
    for cat in CATEGORIES:
        if cat == target_category:
            slots.append(np.ones((size, size, 3), np.float32))
        else:
            slots.append(extract_garment_segment(image, seg, cat, size)[1])
    return np.concatenate(slots, axis=-1)


def with_garment(sample: OutfitSample, garment: GarmentParams) -> OutfitSample:
    """Re-render ``sample`` with one garment swapped (same pose and style)."""
    garments = dict(sample.garments)
    garments[garment.category] = garment
    out = assemble_sample(sample.keypoints, garments, sample.style, sample.image.shape[0])
    out.meta = dict(sample.meta)
    return out


def restyle(sample: OutfitSample, **style_fields) -> OutfitSample:
    return replace(sample, style=replace(sample.style, **style_fields))


# ---------------------------------------------------------------------------
# Dataset files
# ---------------------------------------------------------------------------

DATASET_VERSION = "finet-synth/1"


def _sample_meta(sample: OutfitSample) -> dict[str, str]:
    meta = {
        "hue_family": repr(sample.style.hue_family),
        "formality": repr(sample.style.formality),
        "rng_seed": str(sample.style.rng_seed),
    }
    for cat in CATEGORIES:
        g = sample.garments[cat]
        meta[f"garment.{cat}"] = f"{g.shape_code} {g.hue!r} {g.saturation!r} {g.value!r}"
    for key, value in sample.meta.items():
        meta[f"extra.{key}"] = value
    return meta


def _sample_from(tensors: dict, meta: dict, where) -> OutfitSample:
    from .tensorio import FormatError

    try:
        style = StyleSeed(float(meta["hue_family"]), float(meta["formality"]), int(meta["rng_seed"]))
        garments = {}
        for cat in CATEGORIES:
            code, hue, sat, val = meta[f"garment.{cat}"].split(" ")
            garments[cat] = GarmentParams(cat, code, float(hue), float(sat), float(val))
        sample = OutfitSample(
            image=tensors["image"],
            seg=tensors["seg"],
            pose=tensors["pose"],
            keypoints=tensors["keypoints"].astype(np.int64),
            garments=garments,
            style=style,
            meta={k[len("extra."):]: v for k, v in meta.items() if k.startswith("extra.")},
        )
    except (KeyError, ValueError) as err:
        raise FormatError(f"{where}: bad sample record ({err})") from err
    h = sample.image.shape[0]
    if sample.image.shape != (h, h, 3) or sample.seg.shape != (h, h, NUM_SEG) or sample.pose.shape != (h, h, NUM_KEYPOINTS):
        raise FormatError(f"{where}: tensor shapes inconsistent")
    return sample


def write_dataset(samples, path) -> None:
    from .tensorio import atomic_directory, write_container_into

    samples = list(samples)
    resolution = samples[0].image.shape[0] if samples else IMAGE_SIZE
    with atomic_directory(Path(path)) as tmp:
        for i, s in enumerate(samples):
            tensors = {"image": s.image, "seg": s.seg, "pose": s.pose, "keypoints": s.keypoints}
            write_container_into(tmp / f"{i:06d}", DATASET_VERSION, tensors, _sample_meta(s))
        write_container_into(tmp, DATASET_VERSION, {}, {"count": len(samples), "resolution": resolution})


def read_dataset(path) -> list[OutfitSample]:
    from .tensorio import FormatError, read_container

    path = Path(path)
    _, meta = read_container(path, DATASET_VERSION)
    try:
        count = int(meta["count"])
        resolution = int(meta["resolution"])
    except (KeyError, ValueError) as err:
        raise FormatError(f"{path}: dataset manifest lacks count/resolution") from err
    samples = []
    for i in range(count):
        where = path / f"{i:06d}"
        tensors, smeta = read_container(where, DATASET_VERSION)
        sample = _sample_from(tensors, smeta, where)
        if sample.image.shape[0] != resolution:
            raise FormatError(f"{where}: resolution {sample.image.shape[0]} != {resolution}")
        samples.append(sample)
    return samples
