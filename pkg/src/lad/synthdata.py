"""Synthetic shape-segmentation dataset.

Each image holds 1-4 shapes on a dark background. Every shape class has its
own geometry (rectangle, disc, triangle, annulus) and base color; instance
colors are jittered and every pixel gets Gaussian color noise, optionally
mixed with spatially smooth noise (``noise_correlation``) and preceded by an
optical blur of the clean rendering (``edge_blur``). The disc and annulus
classes share part of their color range, so RGB alone cannot always tell them
apart, and blurred edges plus blotchy noise make object extents uncertain.
The label channel given to the teacher resolves both.

On-disk layout::

    <dir>/images/00000.png   8-bit RGB
    <dir>/labels/00000.png   8-bit class ids, 255 = IGNORE
    <dir>/manifest.json
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from lad.lnm import IGNORE

FORMAT_VERSION = 1
SHAPE_KINDS = ("rectangle", "disc", "triangle", "annulus")
IMAGE_MEAN = 0.5
IMAGE_SCALE = 0.25

# color geometry, in [0, 1] RGB units
_BACKGROUND = np.array([0.12, 0.12, 0.12])
_SHAPE_GRAY = np.array([0.6, 0.6, 0.6])
_ANCHOR_RADIUS = 0.45
_JITTER = 0.12
_HOLE = 0.5  # annulus inner radius as a fraction of the outer one


class DatasetError(RuntimeError):
    pass


@dataclass(frozen=True)
class DatasetSpec:
    num_classes: int = 5
    num_train: int = 400
    num_val: int = 100
    image_size: int = 64
    color_noise_sigma: float = 0.25
    class_color_overlap: float = 0.5
    ignore_border: int = 1
    noise_correlation: float = 0.8
    noise_blur: float = 2.0
    edge_blur: float = 1.5
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.num_classes > IGNORE:
            raise ValueError(f"num_classes must be < {IGNORE}")
        if self.image_size < 16:
            raise ValueError("image_size must be >= 16")
        if self.color_noise_sigma < 0:
            raise ValueError("color_noise_sigma must be >= 0")
        if not 0.0 <= self.class_color_overlap <= 1.0:
            raise ValueError("class_color_overlap must lie in [0, 1]")
        if not 0.0 <= self.noise_correlation <= 1.0 or self.noise_blur <= 0:
            raise ValueError("noise_correlation must lie in [0, 1] and noise_blur be positive")
        if self.edge_blur < 0:
            raise ValueError("edge_blur must be >= 0")
        if self.ignore_border < 0 or self.num_train < 0 or self.num_val < 0:
            raise ValueError("ignore_border and split sizes must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSpec":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


def shape_kind(cls: int) -> str:
    return SHAPE_KINDS[(cls - 1) % len(SHAPE_KINDS)]


def confusable_pair(num_classes: int) -> tuple[int, int] | None:
    """The disc and annulus classes when both exist, else the last two shape classes."""
    if num_classes < 3:
        return None
    kinds = {shape_kind(k): k for k in range(num_classes - 1, 0, -1)}
    if "disc" in kinds and "annulus" in kinds:
        return kinds["disc"], kinds["annulus"]
    return num_classes - 2, num_classes - 1


def class_palette(num_classes: int, overlap: float) -> tuple[np.ndarray, np.ndarray]:
    """Base color per class and the unit direction along which instances jitter.

    The background is dark gray; shape classes sit on a circle around a
    lighter gray in the chromatic plane. The two
    confusable classes share one anchor and are pushed apart along the circle
    tangent so that ``overlap`` of each one's jitter interval is shared.
    """
    u = np.array([1.0, -1.0, 0.0]) / np.sqrt(2.0)
    v = np.array([1.0, 1.0, -2.0]) / np.sqrt(6.0)
    pair = confusable_pair(num_classes)
    shape_classes = [k for k in range(1, num_classes) if not pair or k != pair[1]]
    n_anchors = len(shape_classes)
    anchor_of = {k: i for i, k in enumerate(shape_classes)}
    if pair:
        anchor_of[pair[1]] = anchor_of[pair[0]]
    bases = np.zeros((num_classes, 3))
    dirs = np.zeros((num_classes, 3))
    bases[0] = _BACKGROUND
    dirs[0] = np.ones(3) / np.sqrt(3.0)
    for k in range(1, num_classes):
        a = anchor_of[k]
        theta = 2 * np.pi * a / n_anchors
        radial = np.cos(theta) * u + np.sin(theta) * v
        tangent = -np.sin(theta) * u + np.cos(theta) * v
        bases[k] = _SHAPE_GRAY + _ANCHOR_RADIUS * radial
        dirs[k] = tangent
    if pair:
        sep = _JITTER * (1.0 - overlap)
        bases[pair[0]] -= sep * dirs[pair[0]]
        bases[pair[1]] += sep * dirs[pair[1]]
    return bases, dirs


def _dilate(mask: np.ndarray, radius: int) -> np.ndarray:
    if radius == 0:
        return mask.copy()
    h, w = mask.shape
    padded = np.pad(mask, radius)
    out = np.zeros_like(mask)
    for dy in range(2 * radius + 1):
        for dx in range(2 * radius + 1):
            out |= padded[dy : dy + h, dx : dx + w]
    return out


def _gaussian_taps(sigma: float) -> np.ndarray:
    radius = int(np.ceil(3 * sigma))
    return np.exp(-0.5 * (np.arange(-radius, radius + 1) / sigma) ** 2)


def _separable(padded: np.ndarray, taps: np.ndarray, h: int, w: int) -> np.ndarray:
    rows = sum(t * padded[i : i + h] for i, t in enumerate(taps))
    return sum(t * rows[:, i : i + w] for i, t in enumerate(taps))


def _smooth_noise(shape: tuple[int, int, int], blur: float, rng: np.random.Generator) -> np.ndarray:
    """Unit-variance Gaussian noise with Gaussian spatial correlation of width ``blur`` pixels."""
    taps = _gaussian_taps(blur)
    taps /= np.sqrt((taps**2).sum())
    r = len(taps) // 2
    h, w, c = shape
    return _separable(rng.normal(size=(h + 2 * r, w + 2 * r, c)), taps, h, w)


def _blur_image(color: np.ndarray, sigma: float) -> np.ndarray:
    taps = _gaussian_taps(sigma)
    taps /= taps.sum()
    r = len(taps) // 2
    padded = np.pad(color, ((r, r), (r, r), (0, 0)), mode="edge")
    return _separable(padded, taps, *color.shape[:2])


def _pixel_noise(spec: DatasetSpec, rng: np.random.Generator) -> np.ndarray:
    shape = (spec.image_size, spec.image_size, 3)
    noise = rng.normal(size=shape)
    if spec.noise_correlation > 0:
        rho = spec.noise_correlation
        noise = np.sqrt(1 - rho) * noise + np.sqrt(rho) * _smooth_noise(shape, spec.noise_blur, rng)
    return spec.color_noise_sigma * noise


def _shape_mask(kind: str, size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    r = rng.uniform(8.0, 16.0)
    cy, cx = rng.uniform(r, size - r, 2)
    if kind == "rectangle":
        hh, hw = rng.uniform(0.55, 1.0, 2) * r
        return (np.abs(yy - cy) <= hh) & (np.abs(xx - cx) <= hw)
    if kind == "disc":
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r**2
    if kind == "annulus":
        d2 = (yy - cy) ** 2 + (xx - cx) ** 2
        return (d2 <= r**2) & (d2 >= (_HOLE * r) ** 2)
    if kind == "triangle":
        phase = rng.uniform(0, 2 * np.pi)
        angles = phase + 2 * np.pi * np.arange(3) / 3
        px, py = cx + r * np.cos(angles), cy + r * np.sin(angles)
        inside = np.ones_like(xx, dtype=bool)
        for i in range(3):
            j = (i + 1) % 3
            cross = (px[j] - px[i]) * (yy - py[i]) - (py[j] - py[i]) * (xx - px[i])
            inside &= cross >= 0
        return inside
    raise ValueError(kind)


def render_sample(spec: DatasetSpec, index: int) -> tuple[np.ndarray, np.ndarray]:
    """Deterministically render sample ``index``: (uint8 H*W*3 image, uint8 H*W label)."""
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, index]))
    s = spec.image_size
    bases, dirs = class_palette(spec.num_classes, spec.class_color_overlap)
    label = np.zeros((s, s), dtype=np.uint8)
    color = np.empty((s, s, 3))
    color[:] = bases[0] + rng.uniform(-_JITTER, _JITTER) * dirs[0]
    for _ in range(rng.integers(1, 5)):
        cls = int(rng.integers(1, spec.num_classes))
        kind = shape_kind(cls)
        mask = _shape_mask(kind, s, rng)
        ring = _dilate(mask, spec.ignore_border) & ~mask
        label[ring] = IGNORE
        label[mask] = cls
        color[mask] = bases[cls] + rng.uniform(-_JITTER, _JITTER) * dirs[cls]
    if spec.edge_blur > 0:
        color = _blur_image(color, spec.edge_blur)
    if spec.color_noise_sigma > 0:
        color = color + _pixel_noise(spec, rng)
    image = np.clip(np.rint(color * 255.0), 0, 255).astype(np.uint8)
    return image, label


def _write_png(array: np.ndarray, path: Path) -> None:
    Image.fromarray(array).save(path, format="PNG", optimize=False)


def generate_dataset(spec: DatasetSpec, out_dir: str | os.PathLike) -> dict:
    """Render every sample to ``out_dir`` and write the manifest; returns the manifest."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "labels").mkdir(parents=True, exist_ok=True)
    total = spec.num_train + spec.num_val
    for i in range(total):
        image, label = render_sample(spec, i)
        _write_png(image, out / "images" / f"{i:05d}.png")
        _write_png(label, out / "labels" / f"{i:05d}.png")
    manifest = {
        "format_version": FORMAT_VERSION,
        "spec": spec.to_dict(),
        "num_classes": spec.num_classes,
        "splits": {"train": [0, spec.num_train], "val": [spec.num_train, total]},
        "normalization": {"mean": IMAGE_MEAN, "scale": IMAGE_SCALE},
        "ignore_index": IGNORE,
    }
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


@dataclass
class SegDataset:
    """A loaded split: normalized images ``(N, 3, S, S)`` and labels ``(N, S, S)``."""

    images: torch.Tensor
    labels: torch.Tensor
    indices: list[int]
    num_classes: int
    manifest: dict

    def __len__(self) -> int:
        return len(self.indices)

    def __getitem__(self, i: int) -> tuple[torch.Tensor, torch.Tensor]:
        return self.images[i], self.labels[i]

    def raw_images(self) -> np.ndarray:
        """Images back in 8-bit form (exact inverse of the load normalization)."""
        x = self.images.numpy() * IMAGE_SCALE + IMAGE_MEAN
        return np.rint(x * 255.0).astype(np.uint8).transpose(0, 2, 3, 1)


def read_manifest(data_dir: str | os.PathLike) -> dict:
    path = Path(data_dir) / "manifest.json"
    if not path.is_file():
        raise DatasetError(f"missing dataset manifest: {path}")
    try:
        with open(path) as fh:
            manifest = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise DatasetError(f"corrupt dataset manifest {path}: {exc}") from exc
    if manifest.get("format_version") != FORMAT_VERSION:
        raise DatasetError(f"{path}: unsupported format_version {manifest.get('format_version')!r}")
    return manifest


def _read_png(path: Path, mode: str) -> np.ndarray:
    if not path.is_file():
        raise DatasetError(f"missing file: {path}")
    try:
        with Image.open(path) as im:
            if im.mode != mode:
                raise DatasetError(f"{path}: expected PNG mode {mode}, got {im.mode}")
            return np.asarray(im).copy()
    except DatasetError:
        raise
    except Exception as exc:  # PIL raises a zoo of exception types on bad files
        raise DatasetError(f"corrupt image file {path}: {exc}") from exc


def load_dataset(
    data_dir: str | os.PathLike,
    split: str | None = None,
    shuffle_seed: int | None = None,
) -> SegDataset:
    """Load ``split`` ("train", "val" or None for everything), ordered by filename.

    With ``shuffle_seed`` the samples come back in a seeded permutation.
    """
    root = Path(data_dir)
    manifest = read_manifest(root)
    files = sorted(p.name for p in (root / "images").glob("*.png")) if (root / "images").is_dir() else []
    if not files:
        raise DatasetError(f"no images found under {root / 'images'}")
    all_idx = [int(Path(f).stem) for f in files]
    if split is None:
        chosen = all_idx
    else:
        if split not in manifest["splits"]:
            raise DatasetError(f"unknown split {split!r}; have {sorted(manifest['splits'])}")
        lo, hi = manifest["splits"][split]
        chosen = [i for i in all_idx if lo <= i < hi]
        if len(chosen) != hi - lo:
            raise DatasetError(f"split {split!r} expects {hi - lo} images, found {len(chosen)} in {root}")
    if shuffle_seed is not None:
        perm = np.random.default_rng(shuffle_seed).permutation(len(chosen))
        chosen = [chosen[i] for i in perm]
    num_classes = int(manifest["num_classes"])
    images, labels = [], []
    for i in chosen:
        img = _read_png(root / "images" / f"{i:05d}.png", "RGB")
        lab = _read_png(root / "labels" / f"{i:05d}.png", "L")
        if img.shape[:2] != lab.shape:
            raise DatasetError(f"image/label size mismatch for sample {i:05d}")
        bad = (lab != IGNORE) & (lab >= num_classes)
        if bad.any():
            raise DatasetError(f"{root / 'labels' / f'{i:05d}.png'}: class id {int(lab[bad][0])} >= {num_classes}")
        images.append(img)
        labels.append(lab)
    x = torch.from_numpy(np.stack(images)).permute(0, 3, 1, 2).float() / 255.0
    x = (x - IMAGE_MEAN) / IMAGE_SCALE
    y = torch.from_numpy(np.stack(labels).astype(np.int64))
    return SegDataset(x, y, chosen, num_classes, manifest)


def nearest_color_predict(raw_image: np.ndarray, num_classes: int, overlap: float) -> np.ndarray:
    """Per-pixel nearest-base-color classifier on an 8-bit image (the RGB-only reference)."""
    bases, _ = class_palette(num_classes, overlap)
    x = raw_image.astype(np.float64) / 255.0
    d = ((x[..., None, :] - bases) ** 2).sum(-1)
    return d.argmin(-1)
