"""Labeled image data: synthetic optic-disc renderer, directory ingestion,
stratified splitting, batching and flip augmentation."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from .imaging import check_image, horizontal_flip, read_png, resize, write_png

NORMAL, GLAUCOMA = 0, 1
IMAGE_SIZE = 128
LABELS_CSV = "labels.csv"
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")

# Class-conditional cup-to-disc ranges; both respect the 0.6 threshold.
CUP_RANGES = {
    False: {NORMAL: (0.10, 0.50), GLAUCOMA: (0.60, 0.95)},
    True: {NORMAL: (0.45, 0.5999), GLAUCOMA: (0.60, 0.75)},
}

# Fig. 1 class counts of the clinical training pool.
PAPER_COUNTS = {"n_normal": 3158, "n_glaucoma": 3744}
DESK_COUNTS = {"n_normal": 250, "n_glaucoma": 250}


class IngestionError(RuntimeError):
    pass


@dataclass(frozen=True)
class LabeledImage:
    image: np.ndarray
    label: int
    id: str

    def __post_init__(self):
        if self.label not in (NORMAL, GLAUCOMA):
            raise ValueError(f"label must be 0 or 1, got {self.label!r}")
        check_image(self.image, self.id)


@dataclass
class DatasetSplit:
    train: list[LabeledImage]
    validation: list[LabeledImage]
    split_ratio: float

    def __post_init__(self):
        overlap = {it.id for it in self.train} & {it.id for it in self.validation}
        if overlap:
            raise ValueError(f"train and validation share ids: {sorted(overlap)[:5]}")


@dataclass(frozen=True)
class SyntheticParams:
    """Geometry of one rendered optic disc. Radii are fractions of image width."""

    cup_to_disc: float
    disc_radius: float = 0.22
    vessel_count: int = 8
    noise_level: float = 0.03
    label_threshold: float = 0.6

    def __post_init__(self):
        if not 0.0 <= self.cup_to_disc <= 1.0:
            raise ValueError(f"cup_to_disc must be in [0, 1], got {self.cup_to_disc}")
        if not 0.0 < self.disc_radius <= 0.5:
            raise ValueError(f"disc_radius must be in (0, 0.5], got {self.disc_radius}")
        if self.vessel_count < 0:
            raise ValueError(f"vessel_count must be >= 0, got {self.vessel_count}")
        if not 0.0 <= self.noise_level <= 1.0:
            raise ValueError(f"noise_level must be in [0, 1], got {self.noise_level}")
        if not 0.0 < self.label_threshold <= 1.0:
            raise ValueError(f"label_threshold must be in (0, 1], got {self.label_threshold}")

    @property
    def label(self) -> int:
        return GLAUCOMA if self.cup_to_disc >= self.label_threshold else NORMAL


def _soft_disc(dist, radius, edge):
    return 1.0 / (1.0 + np.exp(np.clip((dist - radius) / edge, -50, 50)))


def _vessel_alpha(xx, yy, cx, cy, radius, rng, count):
    alpha = np.zeros_like(xx)
    for _ in range(count):
        theta0 = rng.uniform(0, 2 * np.pi)
        bend = rng.uniform(-1.2, 1.2)
        wobble = rng.uniform(0.0, 0.15)
        phase = rng.uniform(0, 2 * np.pi)
        width = rng.uniform(0.006, 0.014)
        r = np.linspace(0.25 * radius, 0.9, 90)
        theta = theta0 + bend * (r - r[0]) + wobble * np.sin(12 * r + phase)
        px = cx + r * np.cos(theta)
        py = cy + r * np.sin(theta)
        # squared distance from every pixel to the nearest sample on the curve
        d2 = np.full(xx.shape, np.inf)
        for x0, y0 in zip(px, py):
            np.minimum(d2, (xx - x0) ** 2 + (yy - y0) ** 2, out=d2)
        alpha = np.maximum(alpha, np.exp(-d2 / (2 * width**2)))
    return alpha


def render_fundus(params: SyntheticParams, seed: int, size: int = IMAGE_SIZE) -> np.ndarray:
    """Render an optic-disc-centred fundus crop as an ``(size, size, 3)`` image."""
    rng = np.random.default_rng(seed)
    coords = (np.arange(size) + 0.5) / size
    xx, yy = np.meshgrid(coords, coords)
    cx, cy = 0.5 + rng.uniform(-0.05, 0.05, size=2)
    dist = np.hypot(xx - cx, yy - cy)

    tint = rng.uniform(-0.05, 0.05, size=3)
    background = np.array([0.72, 0.30, 0.16]) + tint
    img = background * (1.0 - 0.45 * dist[..., None] ** 2)

    disc_a = _soft_disc(dist, params.disc_radius, 0.012)[..., None]
    img = img * (1 - disc_a) + np.array([0.93, 0.66, 0.40]) * disc_a

    cup_r = params.cup_to_disc * params.disc_radius
    if cup_r > 0:
        cup_a = _soft_disc(dist, cup_r, 0.008)[..., None]
        img = img * (1 - cup_a) + np.array([1.0, 0.93, 0.78]) * cup_a

    vessels = _vessel_alpha(xx, yy, cx, cy, params.disc_radius, rng, params.vessel_count)[..., None]
    img = img * (1 - 0.85 * vessels) + np.array([0.40, 0.06, 0.04]) * (0.85 * vessels)

    if params.noise_level > 0:
        texture = gaussian_filter(rng.standard_normal((size, size)), sigma=2.0)
        texture /= texture.std() + 1e-12
        grain = rng.standard_normal((size, size, 3)) * 0.25
        img = img + params.noise_level * (texture[..., None] + grain)
    return np.clip(img, 0.0, 1.0)


def generate_fundus(params: SyntheticParams, seed: int, size: int = IMAGE_SIZE, id: str | None = None) -> LabeledImage:
    image = render_fundus(params, seed, size)
    return LabeledImage(image=image, label=params.label, id=id or f"syn_seed{seed}")


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def split_counts(n_normal: int, n_glaucoma: int, split_ratio: float) -> dict[str, int]:
    """Per-class train/validation counts of a stratified split."""
    if n_normal < 1 or n_glaucoma < 1:
        raise ValueError("class counts must be >= 1")
    if not 0.0 < split_ratio < 1.0:
        raise ValueError(f"split_ratio must be in (0, 1), got {split_ratio}")
    val_n = _round_half_up(n_normal * split_ratio)
    val_g = _round_half_up(n_glaucoma * split_ratio)
    return {
        "train_normal": n_normal - val_n,
        "train_glaucoma": n_glaucoma - val_g,
        "val_normal": val_n,
        "val_glaucoma": val_g,
        "total": n_normal + n_glaucoma,
    }


def build_synthetic_dataset(
    n_normal: int,
    n_glaucoma: int,
    split_ratio: float,
    seed: int,
    *,
    overlap: bool = False,
    size: int = IMAGE_SIZE,
    label_threshold: float = 0.6,
) -> DatasetSplit:
    """Render ``n_normal + n_glaucoma`` images and split them per class.

    With ``overlap=True`` the two classes are drawn close to the threshold,
    which makes the classification probe harder.
    """
    counts = split_counts(n_normal, n_glaucoma, split_ratio)
    param_ss, image_ss, split_ss = np.random.SeedSequence(seed).spawn(3)
    param_rng = np.random.default_rng(param_ss)
    image_seeds = np.random.default_rng(image_ss).integers(0, 2**31 - 1, size=n_normal + n_glaucoma)

    items: dict[int, list[LabeledImage]] = {NORMAL: [], GLAUCOMA: []}
    idx = 0
    for label, n in ((NORMAL, n_normal), (GLAUCOMA, n_glaucoma)):
        lo, hi = CUP_RANGES[overlap][label]
        for _ in range(n):
            params = SyntheticParams(
                cup_to_disc=float(param_rng.uniform(lo, hi)),
                disc_radius=float(param_rng.uniform(0.18, 0.26)),
                vessel_count=int(param_rng.integers(6, 11)),
                noise_level=0.03,
                label_threshold=label_threshold,
            )
            item = generate_fundus(params, int(image_seeds[idx]), size, id=f"syn_{idx:05d}")
            if item.label != label:
                raise AssertionError("cup range inconsistent with label threshold")
            items[label].append(item)
            idx += 1

    split_rng = np.random.default_rng(split_ss)
    train, validation = [], []
    for label, key in ((NORMAL, "val_normal"), (GLAUCOMA, "val_glaucoma")):
        order = split_rng.permutation(len(items[label]))
        n_val = counts[key]
        validation.extend(items[label][i] for i in sorted(order[:n_val]))
        train.extend(items[label][i] for i in sorted(order[n_val:]))
    return DatasetSplit(train=train, validation=validation, split_ratio=split_ratio)


def stratified_split(items: Sequence[LabeledImage], split_ratio: float, seed: int) -> DatasetSplit:
    """Split real images per class (same arithmetic as the synthetic path)."""
    by_label = {NORMAL: [it for it in items if it.label == NORMAL], GLAUCOMA: [it for it in items if it.label == GLAUCOMA]}
    counts = split_counts(len(by_label[NORMAL]), len(by_label[GLAUCOMA]), split_ratio)
    rng = np.random.default_rng(seed)
    train, validation = [], []
    for label, key in ((NORMAL, "val_normal"), (GLAUCOMA, "val_glaucoma")):
        group = by_label[label]
        order = rng.permutation(len(group))
        validation.extend(group[i] for i in sorted(order[: counts[key]]))
        train.extend(group[i] for i in sorted(order[counts[key]:]))
    return DatasetSplit(train=train, validation=validation, split_ratio=split_ratio)


# --- ingestion / persistence ---------------------------------------------------


def read_labels_csv(path: str | Path) -> dict[str, int]:
    path = Path(path)
    if not path.is_file():
        raise IngestionError(f"labels file not found: {path}")
    labels: dict[str, int] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or [f.strip() for f in reader.fieldnames[:2]] != ["filename", "label"]:
            raise IngestionError(f"{path}: header must be 'filename,label'")
        for row in reader:
            name = row["filename"].strip()
            try:
                label = int(row["label"])
            except (TypeError, ValueError):
                raise IngestionError(f"{path}: bad label {row['label']!r} for {name}") from None
            if label not in (NORMAL, GLAUCOMA):
                raise IngestionError(f"{path}: label for {name} must be 0 or 1, got {label}")
            labels[name] = label
    return labels


def load_image_directory(
    path: str | Path, labels_file: str | Path | None = None, size: int = IMAGE_SIZE
) -> list[LabeledImage]:
    """Load every image listed in the labels CSV, resized to ``size`` x ``size``.

    Raises :class:`IngestionError` naming the offending file when a listed image
    is missing or an image in the directory has no label.
    """
    path = Path(path)
    if not path.is_dir():
        raise IngestionError(f"image directory not found: {path}")
    labels = read_labels_csv(labels_file if labels_file is not None else path / LABELS_CSV)
    on_disk = {p.name for p in path.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES}
    unlabeled = sorted(on_disk - set(labels))
    if unlabeled:
        raise IngestionError(f"unlabeled image: {path / unlabeled[0]}")
    items = []
    for name, label in labels.items():
        f = path / name
        if not f.is_file():
            raise IngestionError(f"listed image not found: {f}")
        img = resize(read_png(f), size, size)
        items.append(LabeledImage(image=img, label=label, id=Path(name).stem))
    return items


def save_images(items: Sequence[LabeledImage], directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / LABELS_CSV, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["filename", "label"])
        for it in items:
            fname = f"{it.id}.png"
            write_png(it.image, directory / fname)
            writer.writerow([fname, it.label])


def save_split(split: DatasetSplit, directory: str | Path) -> None:
    directory = Path(directory)
    save_images(split.train, directory / "train")
    save_images(split.validation, directory / "validation")


def load_split(directory: str | Path, size: int = IMAGE_SIZE, split_ratio: float | None = None) -> DatasetSplit:
    directory = Path(directory)
    train = load_image_directory(directory / "train", size=size)
    validation = load_image_directory(directory / "validation", size=size)
    ratio = split_ratio if split_ratio is not None else len(validation) / (len(train) + len(validation))
    return DatasetSplit(train=train, validation=validation, split_ratio=ratio)


# --- batching / augmentation ---------------------------------------------------


def flip_draws(n: int, flip_prob: float, rng: np.random.Generator) -> np.ndarray:
    """Independent Bernoulli(flip_prob) decisions for ``n`` images."""
    if not 0.0 <= flip_prob <= 1.0:
        raise ValueError(f"flip_prob must be in [0, 1], got {flip_prob}")
    return rng.random(n) < flip_prob


def augment(batch: Sequence[np.ndarray], flip_prob: float, rng: np.random.Generator) -> list[np.ndarray]:
    flips = flip_draws(len(batch), flip_prob, rng)
    return [horizontal_flip(img) if f else np.array(img, dtype=np.float64) for img, f in zip(batch, flips)]


def batch_indices(n: int, batch_size: int, shuffle_seed: int | None = None, epoch: int = 0) -> list[np.ndarray]:
    """Index batches covering ``range(n)`` once; shuffled per ``(seed, epoch)`` when a seed is given."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    if shuffle_seed is None:
        order = np.arange(n)
    else:
        order = np.random.default_rng([shuffle_seed, epoch]).permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def batches(
    items: DatasetSplit | Sequence[LabeledImage],
    batch_size: int,
    shuffle_seed: int | None = None,
    epoch: int = 0,
) -> Iterator[list[LabeledImage]]:
    """Yield batches of items; a :class:`DatasetSplit` yields its training portion."""
    seq = items.train if isinstance(items, DatasetSplit) else list(items)
    for idx in batch_indices(len(seq), batch_size, shuffle_seed, epoch):
        yield [seq[i] for i in idx]


def stack_images(items: Sequence[LabeledImage]) -> np.ndarray:
    """Stack into a float32 ``(N, 3, H, W)`` array for the network."""
    return np.stack([it.image.transpose(2, 0, 1) for it in items]).astype(np.float32)
