"""Synthetic ultrasound phantoms (femur bars and cranial shells), PNG I/O and splits.

Each sample is reproducible from its ``meta`` record: :func:`rasterize` turns
the stored geometry back into the exact mask, and :func:`render` rebuilds the
image from the same record.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

BG, FL, FB = 0, 1, 2
CLASS_NAMES = ("BG", "FL", "FB")
PALETTE = {BG: (0, 0, 0), FL: (255, 0, 0), FB: (0, 255, 0)}


class DataError(ValueError):
    pass


@dataclass
class PhantomSpec:
    image_size: int = 64
    femur_length: tuple = (8.0, 24.0)
    femur_thickness: tuple = (2.0, 4.0)
    cranium_axes: tuple = (10.0, 24.0)  # semi-axes
    cranium_thickness: tuple = (2.0, 3.0)
    noise: tuple = (0.05, 0.2)
    foreground_intensity: tuple = (0.7, 0.95)
    background_intensity: tuple = (0.1, 0.2)
    class_mix: tuple = (1 / 3, 1 / 3, 1 / 3)  # FL only, FB only, both
    fg_fraction: tuple = (0.005, 0.25)
    num_classes: int = 3

    def __post_init__(self):
        for name in ("femur_length", "femur_thickness", "cranium_axes", "cranium_thickness", "noise",
                     "foreground_intensity", "background_intensity", "class_mix", "fg_fraction"):
            setattr(self, name, tuple(float(v) for v in getattr(self, name)))
        if self.image_size % 32:
            raise DataError("image_size must be divisible by 32")
        if self.foreground_intensity[0] - (self.background_intensity[1] + 0.15) < 0.3:
            raise DataError("foreground must exceed the brightest background by at least 0.3")
        half = self.image_size / 2 - 1
        if self.femur_length[1] / 2 + self.femur_thickness[1] / 2 > half:
            raise DataError("femur length range cannot fit inside the frame")
        if self.cranium_axes[1] > half:
            raise DataError("cranium axes cannot fit inside the frame")
        if self.cranium_thickness[1] >= self.cranium_axes[0]:
            raise DataError("cranium shell thicker than its smallest axis")
        if abs(sum(self.class_mix) - 1) > 1e-9:
            raise DataError("class_mix must sum to 1")


@dataclass
class SegmentationSample:
    image: np.ndarray  # (3, H, W) float in [0, 1]
    mask: np.ndarray  # (H, W) uint8
    meta: dict


# geometry --------------------------------------------------------------------


def _grid(size):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    return yy, xx


def femur_mask(g: dict, size: int) -> np.ndarray:
    yy, xx = _grid(size)
    c, s = math.cos(g["angle"]), math.sin(g["angle"])
    along = (xx - g["cx"]) * c + (yy - g["cy"]) * s
    perp = -(xx - g["cx"]) * s + (yy - g["cy"]) * c
    return (np.abs(along) <= g["length"] / 2) & (np.abs(perp) < g["thickness"] / 2)


def cranium_mask(g: dict, size: int) -> np.ndarray:
    yy, xx = _grid(size)
    c, s = math.cos(g["angle"]), math.sin(g["angle"])
    u = (xx - g["cx"]) * c + (yy - g["cy"]) * s
    v = -(xx - g["cx"]) * s + (yy - g["cy"]) * c
    a, b, t = g["a"], g["b"], g["thickness"]
    outer = (u / a) ** 2 + (v / b) ** 2 <= 1.0
    inner = (u / (a - t)) ** 2 + (v / (b - t)) ** 2 < 1.0
    return outer & ~inner


def rasterize(meta: dict) -> np.ndarray:
    """Mask from geometry; the cranium is drawn first and the femur overwrites it."""
    size = meta["image_size"]
    mask = np.zeros((size, size), dtype=np.uint8)
    if meta.get("cranium"):
        mask[cranium_mask(meta["cranium"], size)] = FB
    if meta.get("femur"):
        mask[femur_mask(meta["femur"], size)] = FL
    return mask


def _femur_geometry(rng, spec):
    size = spec.image_size
    length = rng.uniform(*spec.femur_length)
    thick = rng.uniform(*spec.femur_thickness)
    angle = rng.uniform(0, math.pi)
    hx = abs(math.cos(angle)) * length / 2 + abs(math.sin(angle)) * thick / 2
    hy = abs(math.sin(angle)) * length / 2 + abs(math.cos(angle)) * thick / 2
    cx = rng.uniform(hx + 1, size - 2 - hx)
    cy = rng.uniform(hy + 1, size - 2 - hy)
    return {"cx": cx, "cy": cy, "length": length, "thickness": thick, "angle": angle}


def _cranium_geometry(rng, spec):
    size = spec.image_size
    a = rng.uniform(*spec.cranium_axes)
    b = rng.uniform(*spec.cranium_axes)
    thick = rng.uniform(*spec.cranium_thickness)
    angle = rng.uniform(0, math.pi)
    hx = math.sqrt((a * math.cos(angle)) ** 2 + (b * math.sin(angle)) ** 2)
    hy = math.sqrt((a * math.sin(angle)) ** 2 + (b * math.cos(angle)) ** 2)
    cx = rng.uniform(hx + 1, size - 2 - hx)
    cy = rng.uniform(hy + 1, size - 2 - hy)
    return {"cx": cx, "cy": cy, "a": a, "b": b, "thickness": thick, "angle": angle}


def render(meta: dict) -> np.ndarray:
    """Image (3, H, W) for a geometry record, noise drawn from ``meta['noise_seed']``."""
    size = meta["image_size"]
    rng = np.random.default_rng(meta["noise_seed"])
    mask = rasterize(meta)
    fg = mask > 0
    texture = gaussian_filter(rng.normal(size=(size, size)), 4.0)
    texture *= 0.05 / max(np.abs(texture).max(), 1e-12)
    img = meta["background"] + texture
    halo = gaussian_filter(fg.astype(np.float64), 1.5)
    img = img + 0.1 * halo
    img[mask == FL] = meta["intensity_fl"]
    img[mask == FB] = meta["intensity_fb"]
    sigma = meta["noise_sigma"]
    if sigma > 0:
        # Rayleigh speckle normalized to mean 1, unit std, then scaled by sigma
        r = rng.rayleigh(1.0, size=(size, size))
        r = (r - math.sqrt(math.pi / 2)) / math.sqrt((4 - math.pi) / 2)
        img = img * (1.0 + sigma * gaussian_filter(r, 0.7) * 1.5) + rng.normal(0, sigma / 2, size=(size, size))
    img = np.clip(img, 0.0, 1.0)
    return np.repeat(img[None], 3, axis=0)


def sample_meta(rng: np.random.Generator, spec: PhantomSpec) -> dict:
    size = spec.image_size
    lo, hi = spec.fg_fraction[0] * size * size, spec.fg_fraction[1] * size * size
    for _ in range(1000):
        mix = rng.choice(3, p=spec.class_mix)
        meta = {
            "image_size": size,
            "femur": _femur_geometry(rng, spec) if mix in (0, 2) else None,
            "cranium": _cranium_geometry(rng, spec) if mix in (1, 2) else None,
            "background": rng.uniform(*spec.background_intensity),
            "intensity_fl": rng.uniform(*spec.foreground_intensity),
            "intensity_fb": rng.uniform(*spec.foreground_intensity),
            "noise_sigma": rng.uniform(*spec.noise) if spec.noise[1] > 0 else 0.0,
            "noise_seed": int(rng.integers(2**63 - 1)),
        }
        count = int((rasterize(meta) > 0).sum())
        if lo <= count <= hi:
            return meta
    raise DataError("could not place structures within the foreground-fraction bounds")


def generate(spec: PhantomSpec, n: int, seed: int) -> list[SegmentationSample]:
    """``n`` samples; sample ``i`` draws from ``SeedSequence([seed, i])`` so samples are independent of ``n``."""
    if n < 1:
        raise DataError("n must be >= 1")
    out = []
    for i in range(n):
        rng = np.random.default_rng(np.random.SeedSequence([seed, i]))
        meta = sample_meta(rng, spec)
        meta["index"], meta["seed"] = i, seed
        out.append(SegmentationSample(render(meta), rasterize(meta), meta))
    return out


def split(dataset, ratios=(0.8, 0.1, 0.1), seed: int = 0):
    """Seeded disjoint partition into train/val/test."""
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise DataError("split ratios must sum to 1")
    n = len(dataset)
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(round(ratios[0] * n))
    n_val = int(round(ratios[1] * n))
    parts = (perm[:n_train], perm[n_train : n_train + n_val], perm[n_train + n_val :])
    if any(len(p) == 0 for p, r in zip(parts, ratios) if r > 0):
        raise DataError("a split with a positive ratio came out empty")
    return tuple([dataset[i] for i in sorted(p)] for p in parts)


def stack(samples) -> tuple[np.ndarray, np.ndarray]:
    return np.stack([s.image for s in samples]), np.stack([s.mask for s in samples])


# PNG I/O ------------------------------------------------------------------------


def check_mask(mask: np.ndarray, num_classes: int = 3) -> None:
    if mask.ndim != 2:
        raise DataError(f"mask must be 2-d, got shape {mask.shape}")
    if mask.size and (mask.min() < 0 or mask.max() >= num_classes):
        raise DataError(f"mask value {int(mask.max())} out of range for {num_classes} classes")


def save_mask(mask: np.ndarray, path, num_classes: int = 3) -> None:
    mask = np.asarray(mask)
    check_mask(mask, num_classes)
    Image.fromarray(mask.astype(np.uint8), mode="L").save(path)


def palette_image(mask: np.ndarray) -> np.ndarray:
    rgb = np.zeros(mask.shape + (3,), dtype=np.uint8)
    for cls, color in PALETTE.items():
        rgb[mask == cls] = color
    return rgb


def save_palette(mask: np.ndarray, path, num_classes: int = 3) -> None:
    check_mask(np.asarray(mask), num_classes)
    Image.fromarray(palette_image(np.asarray(mask))).save(path)


def save_image(image: np.ndarray, path) -> None:
    arr = np.clip(np.round(np.moveaxis(image, 0, -1) * 255), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def load_image(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return np.moveaxis(arr, -1, 0)


def load_mask(path, num_classes: int = 3) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode not in ("L", "P", "I"):
            raise DataError(f"{path}: mask must be single-channel, got mode {im.mode}")
        mask = np.asarray(im).astype(np.int64)
    check_mask(mask, num_classes)
    return mask.astype(np.uint8)


def load_png_pair(image_path, mask_path, num_classes: int = 3) -> SegmentationSample:
    image = load_image(image_path)
    mask = load_mask(mask_path, num_classes)
    if image.shape[1:] != mask.shape:
        raise DataError(f"image {image.shape[1:]} and mask {mask.shape} differ in size")
    return SegmentationSample(image, mask, {"image_path": str(image_path), "mask_path": str(mask_path)})


MANIFEST = "manifest.tsv"


def write_dataset(samples, out_dir, ratios=(0.8, 0.1, 0.1), seed: int = 0) -> Path:
    """Write ``images/``, ``masks/`` and a tab-separated manifest (image, mask, split)."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    train, val, test = split(samples, ratios, seed)
    tags = {}
    for tag, part in (("train", train), ("val", val), ("test", test)):
        for s in part:
            tags[s.meta["index"]] = tag
    lines = []
    for s in samples:
        i = s.meta["index"]
        img_rel, mask_rel = f"images/{i:05d}.png", f"masks/{i:05d}.png"
        save_image(s.image, out / img_rel)
        save_mask(s.mask, out / mask_rel)
        lines.append(f"{img_rel}\t{mask_rel}\t{tags[i]}")
    path = out / MANIFEST
    path.write_text("\n".join(lines) + "\n")
    return path


def read_manifest(data_dir, split_tag: str | None = None, num_classes: int = 3) -> list[SegmentationSample]:
    root = Path(data_dir)
    path = root / MANIFEST
    if not path.exists():
        raise FileNotFoundError(f"no {MANIFEST} in {root}")
    out = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise DataError(f"{path}:{lineno}: expected 3 tab-separated fields")
        if split_tag is None or parts[2] == split_tag:
            s = load_png_pair(root / parts[0], root / parts[1], num_classes)
            s.meta["split"] = parts[2]
            out.append(s)
    return out


def class_pixel_stats(samples, num_classes: int = 3) -> dict:
    counts = np.zeros(num_classes, dtype=np.int64)
    for s in samples:
        counts += np.bincount(s.mask.reshape(-1), minlength=num_classes)[:num_classes]
    total = counts.sum()
    return {CLASS_NAMES[c] if c < len(CLASS_NAMES) else str(c): int(counts[c]) for c in range(num_classes)} | {
        "total": int(total)}


def spec_to_dict(spec: PhantomSpec) -> dict:
    return asdict(spec)
