"""Latent-space probes: posterior-mean encoding, label-correlation ranking,
top-k selection, 2-D UMAP embeddings and silhouette-based cluster separation."""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from sklearn.metrics import silhouette_score

from .data import LabeledImage
from .model import DfcVae
from .train import _as_tensor, load_checkpoint

UMAP_DEFAULTS = {"n_neighbors": 15, "min_dist": 0.1, "metric": "euclidean"}
# top-10 / top-50 of nl=128 (equivalently 160 / 800 of nl=2048)
PAPER_TOPK_RATIOS = (10 / 128, 50 / 128)


@dataclass
class LatentMatrix:
    values: np.ndarray  # (N, k) posterior means
    labels: np.ndarray  # (N,) in {0, 1}
    ids: list[str]
    feature_index: np.ndarray = None  # original latent index of each column

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.ids = [str(i) for i in self.ids]
        if self.values.ndim != 2:
            raise ValueError(f"latent values must be 2-D, got shape {self.values.shape}")
        if not (len(self.values) == len(self.labels) == len(self.ids)):
            raise ValueError("row, label and id counts differ")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("latent values must be finite")
        if self.feature_index is None:
            self.feature_index = np.arange(self.values.shape[1])
        self.feature_index = np.asarray(self.feature_index, dtype=np.int64)

    @property
    def n_features(self) -> int:
        return self.values.shape[1]

    def with_labels(self, labels) -> "LatentMatrix":
        return LatentMatrix(self.values, labels, self.ids, self.feature_index)


@dataclass
class FeatureRanking:
    indices: np.ndarray  # column indices, best first
    correlations: np.ndarray  # signed point-biserial r, aligned with ``indices``

    @property
    def magnitudes(self) -> np.ndarray:
        return np.abs(self.correlations)


@dataclass
class Embedding2D:
    coords: np.ndarray
    labels: np.ndarray
    ids: list[str]
    params: dict = field(default_factory=dict)


def _require_both_classes(labels) -> None:
    present = set(np.unique(labels).tolist())
    if present != {0, 1}:
        raise ValueError(f"both classes must be present, got labels {sorted(present)}")


@torch.no_grad()
def encode_dataset(
    checkpoint: str | Path | DfcVae, items: Sequence[LabeledImage], batch_size: int = 64
) -> LatentMatrix:
    model = checkpoint if isinstance(checkpoint, DfcVae) else load_checkpoint(checkpoint)[0]
    model.eval()
    x = _as_tensor(items)
    mus = [model.encode(x[i : i + batch_size])[0].double().numpy() for i in range(0, len(x), batch_size)]
    values = np.concatenate(mus) if mus else np.zeros((0, model.latent_size))
    return LatentMatrix(values, [it.label for it in items], [it.id for it in items])


def point_biserial(values: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Pearson correlation of each column with the 0/1 label vector; constant columns give 0."""
    x = np.asarray(values, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    yc = y - y.mean()
    xc = x - x.mean(axis=0)
    num = yc @ xc
    den = np.sqrt((xc**2).sum(axis=0) * (yc**2).sum())
    constant = np.ptp(x, axis=0) == 0
    r = np.divide(num, den, out=np.zeros_like(num), where=(den > 0) & ~constant)
    return np.clip(r, -1.0, 1.0)


def rank_features(latents: LatentMatrix) -> FeatureRanking:
    """Rank columns by |r| with the labels, descending; ties go to the lower column index."""
    _require_both_classes(latents.labels)
    r = point_biserial(latents.values, latents.labels)
    order = np.lexsort((np.arange(len(r)), -np.abs(r)))
    return FeatureRanking(indices=order, correlations=r[order])


def topk_for_ratio(latent_size: int, ratio: float) -> int:
    return min(latent_size, max(1, int(math.floor(latent_size * ratio + 0.5))))


def select_top_k(latents: LatentMatrix, ranking: FeatureRanking, k: int) -> LatentMatrix:
    if not 1 <= k <= latents.n_features:
        raise ValueError(f"k must be in [1, {latents.n_features}], got {k}")
    cols = ranking.indices[:k]
    return LatentMatrix(latents.values[:, cols], latents.labels, latents.ids, latents.feature_index[cols])


def umap_embed(
    latents: LatentMatrix,
    n_neighbors: int = UMAP_DEFAULTS["n_neighbors"],
    min_dist: float = UMAP_DEFAULTS["min_dist"],
    seed: int = 0,
) -> Embedding2D:
    n = len(latents.values)
    if n < n_neighbors + 1:
        raise ValueError(f"UMAP needs at least n_neighbors + 1 = {n_neighbors + 1} samples, got {n}")
    import umap  # slow import (numba)

    reducer = umap.UMAP(
        n_neighbors=n_neighbors,
        min_dist=min_dist,
        n_components=2,
        metric=UMAP_DEFAULTS["metric"],
        random_state=seed,
        transform_seed=seed,
        n_jobs=1,
    )
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        coords = reducer.fit_transform(latents.values)
    params = {"n_neighbors": n_neighbors, "min_dist": min_dist, "metric": UMAP_DEFAULTS["metric"], "seed": seed}
    return Embedding2D(np.asarray(coords, dtype=np.float64), latents.labels.copy(), list(latents.ids), params)


def cluster_separation(embedding: Embedding2D | np.ndarray, labels=None) -> float:
    """Silhouette coefficient of the label partition in embedding space."""
    coords = embedding.coords if isinstance(embedding, Embedding2D) else np.asarray(embedding, dtype=np.float64)
    labels = embedding.labels if labels is None else np.asarray(labels)
    _require_both_classes(labels)
    if np.all(coords == coords[0]):
        raise ValueError("all points coincide; silhouette is undefined")
    return float(silhouette_score(coords, labels, metric="euclidean"))


# --- persistence ---------------------------------------------------------------------


def write_latent_csv(latents: LatentMatrix, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "label"] + [f"f{j}" for j in latents.feature_index])
        for i, row in enumerate(latents.values):
            w.writerow([latents.ids[i], int(latents.labels[i])] + [repr(float(v)) for v in row])


def read_latent_csv(path: str | Path) -> LatentMatrix:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[:2] != ["id", "label"]:
            raise ValueError(f"{path}: header must start with id,label")
        feat = [int(h[1:]) for h in header[2:]]
        ids, labels, rows = [], [], []
        for row in reader:
            ids.append(row[0])
            labels.append(int(row[1]))
            rows.append([float(v) for v in row[2:]])
    values = np.array(rows, dtype=np.float64).reshape(len(rows), len(feat))
    return LatentMatrix(values, labels, ids, np.array(feat))


def write_ranking_csv(latents: LatentMatrix, ranking: FeatureRanking, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["rank", "feature", "correlation", "abs_correlation"])
        for rank, (col, r) in enumerate(zip(ranking.indices, ranking.correlations)):
            w.writerow([rank, int(latents.feature_index[col]), repr(float(r)), repr(abs(float(r)))])


def write_embedding_csv(emb: Embedding2D, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "label", "u0", "u1"])
        for i, (u0, u1) in enumerate(emb.coords):
            w.writerow([emb.ids[i], int(emb.labels[i]), repr(float(u0)), repr(float(u1))])


def read_embedding_csv(path: str | Path) -> Embedding2D:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    coords = np.array([[float(r["u0"]), float(r["u1"])] for r in rows])
    return Embedding2D(coords, np.array([int(r["label"]) for r in rows]), [r["id"] for r in rows])


def plot_embedding(emb: Embedding2D, path: str | Path, title: str = "") -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 4.5))
    for label, color, name in ((0, "tab:blue", "normal"), (1, "tab:red", "glaucoma")):
        m = emb.labels == label
        ax.scatter(emb.coords[m, 0], emb.coords[m, 1], s=10, c=color, label=name, alpha=0.8)
    ax.set(xlabel="UMAP 1", ylabel="UMAP 2", title=title)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
