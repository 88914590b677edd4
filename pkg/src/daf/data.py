"""Dataset indexing for MVTec-style folders and the procedural DeskTex benchmark.

Layout (per category)::

    <cat>/train/good/*.png
    <cat>/test/<defect>/*.png          # "good" = normal
    <cat>/ground_truth/<defect>/<stem>_mask.png
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image as PILImage
from PIL import ImageDraw

from . import imgkit
from .errors import IndexingError, ParameterError
from .synth import perlin_noise

IMAGE_EXTS = (".png", ".jpg", ".jpeg", ".bmp", ".ppm", ".pgm", ".tif", ".tiff")
DESKTEX_VERSION = "desktex-v1"
DESKTEX_SIZE = 256
DEFECT_AREA = (0.001, 0.20)


@dataclass(frozen=True)
class TestItem:
    path: str
    label: int
    mask_path: str | None = None
    defect: str = "good"


@dataclass
class DatasetIndex:
    category: str
    root: str
    train_normals: list[str] = field(default_factory=list)
    test_items: list[TestItem] = field(default_factory=list)

    def load_train(self, size: int | None = DESKTEX_SIZE) -> list[np.ndarray]:
        return [imgkit.load_image(p, size) for p in self.train_normals]

    def load_test(self, size: int | None = DESKTEX_SIZE):
        """``(images, masks, labels)``; normal items get all-zero masks."""
        images, masks, labels = [], [], []
        for it in self.test_items:
            img = imgkit.load_image(it.path, size)
            if it.mask_path is None:
                mask = np.zeros(img.shape[:2], dtype=np.uint8)
            else:
                mask = imgkit.load_mask(it.mask_path, size)
                if mask.shape != img.shape[:2]:
                    raise IndexingError(f"mask {it.mask_path} is {mask.shape}, image {it.path} is {img.shape[:2]}")
            images.append(img)
            masks.append(mask)
            labels.append(it.label)
        return images, masks, labels


def _images_in(folder: Path) -> list[Path]:
    if not folder.is_dir():
        return []
    return sorted(p for p in folder.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_EXTS)


def _index_category(cat_dir: Path) -> DatasetIndex:
    train = _images_in(cat_dir / "train" / "good")
    if not train:
        raise IndexingError(f"{cat_dir / 'train' / 'good'}: no training images")
    items: list[TestItem] = []
    missing: list[str] = []
    test_dir = cat_dir / "test"
    defects = sorted(d.name for d in test_dir.iterdir() if d.is_dir()) if test_dir.is_dir() else []
    for defect in defects:
        for img in _images_in(test_dir / defect):
            if defect == "good":
                items.append(TestItem(str(img), 0, None, "good"))
                continue
            mask = cat_dir / "ground_truth" / defect / f"{img.stem}_mask.png"
            if not mask.is_file():
                missing.append(str(img))
                continue
            items.append(TestItem(str(img), 1, str(mask), defect))
    if missing:
        raise IndexingError(f"anomalous test images without masks: {missing}")
    return DatasetIndex(cat_dir.name, str(cat_dir), [str(p) for p in train], items)


def ingest_mvtec_dir(root: str | Path) -> dict[str, DatasetIndex]:
    """Index every category under ``root`` (or ``root`` itself if it is a category folder)."""
    root = Path(root)
    if not root.is_dir():
        raise IndexingError(f"{root}: not a directory")
    if (root / "train").is_dir():
        return {root.name: _index_category(root)}
    cats = sorted(d for d in root.iterdir() if d.is_dir() and (d / "train").is_dir())
    if not cats:
        raise IndexingError(f"{root}: no category folders with a train/ subfolder")
    return {d.name: _index_category(d) for d in cats}


# ---------------------------------------------------------------- DeskTex

PALETTES = {
    "desk": ((0.55, 0.42, 0.30), (0.80, 0.68, 0.52)),
    "slate": ((0.25, 0.30, 0.36), (0.52, 0.58, 0.64)),
    "moss": ((0.26, 0.38, 0.22), (0.56, 0.66, 0.42)),
}


def desktex_normal(seed: int, category: str = "desk", size: int = DESKTEX_SIZE) -> np.ndarray:
    """One normal DeskTex image: Perlin texture, 2-color palette, shading and a grid.

    Horizontal grid lines every 32 px, vertical lines every 64 px and a
    top-to-bottom brightness ramp give the texture a definite orientation.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xD35C]))
    t = np.zeros((size, size))
    amp = 1.0
    for cell in (64, 32, 16, 8):
        t += amp * perlin_noise(size, size, cell, int(rng.integers(2**31)))
        amp *= 0.5
    t = np.clip(0.5 + 0.9 * t, 0.0, 1.0)[..., None]
    c0, c1 = (np.asarray(c) for c in PALETTES[category])
    img = c0 * (1 - t) + c1 * t
    ramp = 0.82 + 0.18 * (np.arange(size) / (size - 1))
    img = img * ramp[:, None, None]
    grid = np.ones((size, size))
    grid[(np.arange(size) % 32) < 2, :] = 0.72
    grid[:, (np.arange(size) % 64) < 1] = 0.80
    img = img * grid[..., None]
    img = img + rng.normal(0.0, 0.01, img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def _is_rectangle(component: np.ndarray) -> bool:
    ys, xs = np.nonzero(component)
    return component[ys.min():ys.max() + 1, xs.min():xs.max() + 1].all()


def _scratch_mask(rng, size: int) -> np.ndarray:
    n_pts = int(rng.integers(3, 6))
    p = rng.uniform(0.15 * size, 0.85 * size, 2)
    ang = rng.uniform(0, 2 * np.pi)
    pts = [tuple(p)]
    for _ in range(n_pts - 1):
        ang += rng.uniform(-0.9, 0.9)
        step = rng.uniform(18, 40)
        p = np.clip(p + step * np.array([np.cos(ang), np.sin(ang)]), 4, size - 5)
        pts.append(tuple(p))
    canvas = PILImage.new("L", (size, size), 0)
    ImageDraw.Draw(canvas).line([(float(x), float(y)) for x, y in pts], fill=255,
                                width=int(rng.integers(2, 5)), joint="curve")
    return (np.asarray(canvas) > 0).astype(np.uint8)


def _blob_mask(rng, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    centre = rng.uniform(0.2 * size, 0.8 * size, 2)
    mask = np.zeros((size, size), dtype=bool)
    for _ in range(int(rng.integers(2, 5))):
        c = centre + rng.normal(0, 8, 2)
        a, b = rng.uniform(6, 22, 2)
        th = rng.uniform(0, np.pi)
        dx, dy = xx - c[0], yy - c[1]
        u = dx * np.cos(th) + dy * np.sin(th)
        v = -dx * np.sin(th) + dy * np.cos(th)
        mask |= (u / a) ** 2 + (v / b) ** 2 <= 1.0
    return mask.astype(np.uint8)


def _apply_scratch(img, mask, rng):
    sign = 1.0 if rng.random() < 0.5 else -1.0
    size = img.shape[0]
    streak = 0.30 + 0.15 * perlin_noise(size, size, 8, int(rng.integers(2**31)))[..., None]
    out = img + sign * streak + rng.normal(0, 0.04, img.shape)
    return np.where(mask[..., None] > 0, np.clip(out, 0, 1), img)


def _apply_blob(img, mask, rng):
    blurred = imgkit.gaussian_blur(img, 6.0)
    gray = rng.uniform(0.35, 0.65)
    out = 0.5 * blurred + 0.5 * gray + rng.normal(0, 0.03, img.shape)
    return np.where(mask[..., None] > 0, np.clip(out, 0, 1), img)


DEFECT_FAMILIES = ("scratch", "blob")


def desktex_defect(img: np.ndarray, family: str, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Corrupt ``img`` with a held-out defect; returns ``(corrupted, mask)``.

    Masks are resampled until their area lies in the allowed range and no
    connected component is an axis-aligned rectangle.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xDEF]))
    size = img.shape[0]
    draw = {"scratch": _scratch_mask, "blob": _blob_mask}[family]
    for _ in range(100):
        mask = draw(rng, size)
        frac = mask.mean()
        if not DEFECT_AREA[0] <= frac <= DEFECT_AREA[1]:
            continue
        lab, k = imgkit.connected_components(mask)
        if any(_is_rectangle(lab == i) for i in range(1, k + 1)):
            continue
        break
    else:  # pragma: no cover - the generator parameters make this unreachable in practice
        raise RuntimeError(f"could not draw a valid {family} defect")
    apply = _apply_scratch if family == "scratch" else _apply_blob
    return apply(img, mask, rng).astype(np.float32), mask


def _write_png_mask(mask: np.ndarray, path: Path) -> None:
    PILImage.fromarray((mask > 0).astype(np.uint8) * 255, mode="L").save(path, format="PNG")


def generate_desktex(
    out_dir: str | Path,
    n_train: int = 80,
    n_test_normal: int = 20,
    n_test_anom: int = 20,
    seed: int = 0,
    category: str = "desk",
) -> DatasetIndex:
    """Write a DeskTex category in MVTec layout plus ``dataset.json``; byte-deterministic in ``seed``."""
    for name, v in (("n_train", n_train), ("n_test_normal", n_test_normal), ("n_test_anom", n_test_anom)):
        if int(v) < 1:
            raise ParameterError(f"{name} must be >= 1, got {v}")
    if category not in PALETTES:
        raise ParameterError(f"unknown DeskTex category {category!r}; known: {sorted(PALETTES)}")
    root = Path(out_dir) / category
    ss = np.random.SeedSequence([seed, 0xDE5C])
    seeds = ss.generate_state(n_train + n_test_normal + 2 * n_test_anom, dtype=np.uint64)
    k = iter(int(s) for s in seeds)

    (root / "train" / "good").mkdir(parents=True, exist_ok=True)
    (root / "test" / "good").mkdir(parents=True, exist_ok=True)
    for i in range(n_train):
        imgkit.save_image(desktex_normal(next(k), category), root / "train" / "good" / f"{i:03d}.png")
    for i in range(n_test_normal):
        imgkit.save_image(desktex_normal(next(k), category), root / "test" / "good" / f"{i:03d}.png")
    counts = {f: 0 for f in DEFECT_FAMILIES}
    for i in range(n_test_anom):
        family = DEFECT_FAMILIES[i % len(DEFECT_FAMILIES)]
        base = desktex_normal(next(k), category)
        corrupted, mask = desktex_defect(base, family, next(k))
        j = counts[family]
        counts[family] += 1
        (root / "test" / family).mkdir(parents=True, exist_ok=True)
        (root / "ground_truth" / family).mkdir(parents=True, exist_ok=True)
        imgkit.save_image(corrupted, root / "test" / family / f"{j:03d}.png")
        _write_png_mask(mask, root / "ground_truth" / family / f"{j:03d}_mask.png")

    manifest = {
        "generator": DESKTEX_VERSION,
        "seed": int(seed),
        "category": category,
        "image_size": DESKTEX_SIZE,
        "n_train": int(n_train),
        "n_test_normal": int(n_test_normal),
        "n_test_anomalous": int(n_test_anom),
        "defect_families": counts,
    }
    (Path(out_dir) / "dataset.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return ingest_mvtec_dir(root)[category]


def tree_digest(root: str | Path) -> str:
    """sha256 over relative paths and bytes of every file below ``root``."""
    root = Path(root)
    h = hashlib.sha256()
    for p in sorted(q for q in root.rglob("*") if q.is_file()):
        h.update(str(p.relative_to(root)).encode())
        h.update(p.read_bytes())
    return h.hexdigest()


# ---------------------------------------------------------------- texture bank

TEXTURE_KINDS = ("perlin", "stripes", "checker", "dots")


def make_texture(kind: str, seed: int, size: int = DESKTEX_SIZE) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x7E7]))
    c0, c1 = rng.random(3), rng.random(3)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    if kind == "perlin":
        t = 0.5 + perlin_noise(size, size, int(rng.choice([16, 32])), int(rng.integers(2**31)))
    elif kind == "stripes":
        th = rng.uniform(0, np.pi)
        period = rng.uniform(6, 24)
        t = 0.5 + 0.5 * np.sin(2 * np.pi * (xx * np.cos(th) + yy * np.sin(th)) / period)
    elif kind == "checker":
        p = int(rng.integers(6, 24))
        t = ((xx // p + yy // p) % 2).astype(np.float64)
    elif kind == "dots":
        p = rng.uniform(8, 20)
        r = rng.uniform(0.2, 0.45) * p
        d = np.hypot((xx % p) - p / 2, (yy % p) - p / 2)
        t = (d < r).astype(np.float64)
    else:
        raise ParameterError(f"unknown texture kind {kind!r}")
    t = np.clip(t, 0, 1)[..., None]
    img = c0 * (1 - t) + c1 * t + rng.normal(0, 0.02, (size, size, 3))
    return np.clip(img, 0, 1).astype(np.float32)


def generate_textures(out_dir: str | Path, n: int = 40, seed: int = 0) -> list[str]:
    """Write a procedural texture folder used as the donor source of texture-based strategies."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for i in range(n):
        kind = TEXTURE_KINDS[i % len(TEXTURE_KINDS)]
        p = out / f"{kind}_{i:03d}.png"
        imgkit.save_image(make_texture(kind, seed * 100003 + i), p)
        paths.append(str(p))
    return paths


def load_texture_dir(path: str | Path, size: int = DESKTEX_SIZE) -> list[np.ndarray]:
    files = _images_in(Path(path))
    if not files:
        raise IndexingError(f"{path}: texture folder has no images")
    return [imgkit.load_image(p, size) for p in files]
