"""Image/mask corpora: loading, splitting, synthetic generation, augmentation.

Corpus layout::

    root/images/<id>.png      RGB (any PIL-readable format is accepted)
    root/masks/<id>.png       single channel, 0 = authentic, 255 = manipulated
    root/manifest.tsv         optional; ``id<TAB>split`` per line, split in {train, test}
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw, ImageFilter

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".tif", ".tiff", ".bmp")
MASK_THRESHOLD = 128
# train:test ratio used when no manifest assigns splits
DEFAULT_SPLIT_RATIO = (6, 1)


class DataError(Exception):
    """Corpus is missing, empty or inconsistent."""


@dataclass
class Sample:
    image: np.ndarray  # (H, W, 3) float32 in [0, 1]
    mask: np.ndarray  # (H, W, 1) float32 in {0, 1}
    id: str

    def __post_init__(self):
        if self.image.shape[:2] != self.mask.shape[:2]:
            raise DataError(f"{self.id}: image {self.image.shape} vs mask {self.mask.shape}")


@dataclass(frozen=True)
class ManifestEntry:
    id: str
    image_path: Path
    mask_path: Path
    split: str


@dataclass
class Manifest:
    root: Path
    entries: list[ManifestEntry]

    def split(self, name: str) -> list[ManifestEntry]:
        if name == "all":
            return list(self.entries)
        return [e for e in self.entries if e.split == name]

    def __len__(self):
        return len(self.entries)


def _index_dir(d: Path, what: str, problems: list[str]) -> dict[str, Path]:
    out: dict[str, Path] = {}
    for p in sorted(d.iterdir()):
        if p.suffix.lower() not in IMAGE_SUFFIXES or not p.is_file():
            continue
        if p.stem in out:
            problems.append(f"duplicate {what} stem {p.stem!r}: {out[p.stem].name}, {p.name}")
            continue
        out[p.stem] = p
    return out


def assign_splits(ids: list[str], ratio=DEFAULT_SPLIT_RATIO) -> dict[str, str]:
    """Last ``floor(n * test / (train + test))`` ids (lexicographic) go to test."""
    n = len(ids)
    n_test = n * ratio[1] // (ratio[0] + ratio[1])
    ordered = sorted(ids)
    return {i: ("test" if k >= n - n_test else "train") for k, i in enumerate(ordered)}


def load_manifest(root, layout: str = "auto", ratio=DEFAULT_SPLIT_RATIO) -> Manifest:
    """Index a corpus. ``layout`` is ``paired-dirs``, ``manifest-file`` or ``auto``."""
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"data root {root} does not exist")
    img_dir, mask_dir, mf = root / "images", root / "masks", root / "manifest.tsv"
    if layout == "auto":
        layout = "manifest-file" if mf.is_file() else "paired-dirs"
    if layout not in ("paired-dirs", "manifest-file"):
        raise DataError(f"unknown layout {layout!r}")
    if not img_dir.is_dir() or not mask_dir.is_dir():
        raise DataError(f"{root} needs images/ and masks/ subdirectories")
    problems: list[str] = []
    images = _index_dir(img_dir, "image", problems)
    masks = _index_dir(mask_dir, "mask", problems)

    if layout == "manifest-file":
        if not mf.is_file():
            raise DataError(f"layout manifest-file but {mf} is missing")
        splits: dict[str, str] = {}
        for lineno, line in enumerate(mf.read_text().splitlines(), 1):
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 2 or parts[1].strip() not in ("train", "test"):
                problems.append(f"manifest.tsv line {lineno}: expected 'id<TAB>train|test'")
                continue
            sid = parts[0].strip()
            if sid in splits:
                problems.append(f"manifest.tsv: duplicate id {sid!r}")
            splits[sid] = parts[1].strip()
        ids = sorted(splits)
        for i in ids:
            if i not in images:
                problems.append(f"{i}: image missing")
    else:
        ids = sorted(images)
        splits = assign_splits(ids, ratio)
    for i in ids:
        if i in images and i not in masks:
            problems.append(f"{i}: mask missing")
    if problems:
        raise DataError("corpus problems:\n  " + "\n  ".join(problems))
    if not ids:
        raise DataError(f"no samples found under {root}")
    entries = [ManifestEntry(i, images[i], masks[i], splits[i]) for i in ids]
    return Manifest(root, entries)


def read_mask(path) -> np.ndarray:
    m = np.asarray(Image.open(path).convert("L"))
    return (m >= MASK_THRESHOLD).astype(np.float32)[..., None]


def read_image(path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0


def load_sample(entry: ManifestEntry) -> Sample:
    return Sample(read_image(entry.image_path), read_mask(entry.mask_path), entry.id)


def write_mask(path, mask) -> None:
    m = np.asarray(mask).reshape(mask.shape[0], mask.shape[1])
    Image.fromarray((m > 0.5).astype(np.uint8) * 255, mode="L").save(path)


def pad_to_multiple(image, mask=None, multiple: int = 64):
    """Zero-pad bottom/right to a multiple of ``multiple``. Returns
    ``(image, mask, valid)`` where ``valid`` is 1 on original pixels."""
    H, W = image.shape[:2]
    ph, pw = -H % multiple, -W % multiple
    img = np.pad(image, ((0, ph), (0, pw), (0, 0)))
    valid = np.zeros((H + ph, W + pw, 1), np.float32)
    valid[:H, :W] = 1
    msk = None if mask is None else np.pad(mask, ((0, ph), (0, pw), (0, 0)))
    return img, msk, valid


def resize_sample(s: Sample, size: int) -> Sample:
    """Resize to ``size x size``; the mask uses nearest-neighbor."""
    if s.image.shape[:2] == (size, size):
        return s
    img = Image.fromarray((s.image * 255).round().astype(np.uint8)).resize((size, size), Image.BILINEAR)
    m = Image.fromarray((s.mask[..., 0] * 255).astype(np.uint8)).resize((size, size), Image.NEAREST)
    return Sample(np.asarray(img, np.float32) / 255.0,
                  (np.asarray(m) >= MASK_THRESHOLD).astype(np.float32)[..., None], s.id)


# --- synthetic forgeries ---------------------------------------------------


def _smooth_background(rng: np.random.Generator, size: int) -> np.ndarray:
    g = max(2, size // 32)
    coarse = rng.uniform(0.15, 0.85, size=(g, g, 3))
    img = Image.fromarray((coarse * 255).astype(np.uint8)).resize((size, size), Image.BICUBIC)
    base = np.asarray(img, np.float32) / 255.0
    grain = rng.normal(0.0, 0.04, size=(size, size, 1)).astype(np.float32)
    return np.clip(base + grain, 0.0, 1.0)


def _draw_region(rng: np.random.Generator, size: int) -> np.ndarray:
    canvas = Image.new("L", (size, size), 0)
    draw = ImageDraw.Draw(canvas)
    cx, cy = rng.uniform(0.25, 0.75, size=2) * size
    if rng.random() < 0.5:
        rx, ry = rng.uniform(size / 10, size / 5, size=2)
        draw.ellipse([cx - rx, cy - ry, cx + rx, cy + ry], fill=255)
    else:
        nv = int(rng.integers(5, 9))
        ang = np.sort(rng.uniform(0, 2 * math.pi, nv))
        rad = rng.uniform(size / 10, size / 5, nv)
        pts = [(float(cx + r * math.cos(a)), float(cy + r * math.sin(a))) for a, r in zip(ang, rad)]
        draw.polygon(pts, fill=255)
    return np.asarray(canvas) > 0


def synthesize_sample(rng: np.random.Generator, size: int) -> tuple[np.ndarray, np.ndarray]:
    """One forged image (uint8 RGB) and its exact binary mask (uint8 0/255)."""
    bg = _smooth_background(rng, size)
    for _ in range(100):
        n_regions = int(rng.integers(1, 4))
        mask = np.zeros((size, size), bool)
        for _ in range(n_regions):
            mask |= _draw_region(rng, size)
        if 0 < mask.mean() < 0.5:
            break
    else:  # pragma: no cover - the shape ranges make this unreachable in practice
        raise RuntimeError("could not draw a region covering < 50% of the image")
    # pasted content: shifted colors without the background grain
    shift = rng.uniform(-0.35, 0.35, size=3).astype(np.float32)
    flat = np.asarray(Image.fromarray((bg * 255).astype(np.uint8)).filter(ImageFilter.GaussianBlur(2)),
                      np.float32) / 255.0
    pasted = np.clip(flat + shift, 0.0, 1.0)
    alpha = Image.fromarray(mask.astype(np.uint8) * 255).filter(ImageFilter.GaussianBlur(1.0))
    a = (np.asarray(alpha, np.float32) / 255.0)[..., None]
    img = bg * (1 - a) + pasted * a
    return (np.clip(img, 0, 1) * 255).round().astype(np.uint8), mask.astype(np.uint8) * 255


def gen_synthetic(root, n: int, size: int, seed: int, ratio=DEFAULT_SPLIT_RATIO) -> Manifest:
    """Write ``n`` synthetic forgeries under ``root`` and return their manifest."""
    if n < 1:
        raise DataError(f"n must be >= 1, got {n}")
    if size % 64 or size < 64:
        raise DataError(f"size must be a positive multiple of 64, got {size}")
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    ids = [f"synth_{i:05d}" for i in range(n)]
    for sid in ids:
        img, mask = synthesize_sample(rng, size)
        Image.fromarray(img, mode="RGB").save(root / "images" / f"{sid}.png")
        Image.fromarray(mask, mode="L").save(root / "masks" / f"{sid}.png")
    splits = assign_splits(ids, ratio)
    (root / "manifest.tsv").write_text("".join(f"{i}\t{splits[i]}\n" for i in ids))
    return load_manifest(root)


# --- augmentation ------------------------------------------------------------

MAX_JITTER = 0.1


def hflip(s: Sample) -> Sample:
    return Sample(s.image[:, ::-1].copy(), s.mask[:, ::-1].copy(), s.id)


def augment(s: Sample, seed) -> Sample:
    """Random horizontal flip plus a brightness offset in [-0.1, 0.1]."""
    rng = np.random.default_rng(seed)
    if rng.random() < 0.5:
        s = hflip(s)
    delta = np.float32(rng.uniform(-MAX_JITTER, MAX_JITTER))
    return Sample(np.clip(s.image + delta, 0.0, 1.0), s.mask.copy(), s.id)


def load_split(manifest: Manifest, split: str, size: int | None = None) -> list[Sample]:
    entries = manifest.split(split)
    if not entries:
        raise DataError(f"split {split!r} is empty")
    out = [load_sample(e) for e in entries]
    return [resize_sample(s, size) for s in out] if size else out
