"""SVC probe of latent quality: stratified k-fold hyperparameter selection,
a held-out split evaluation, five metrics and ROC curves per latent size."""
from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from sklearn.metrics import accuracy_score, f1_score, precision_score, recall_score, roc_curve
from sklearn.model_selection import StratifiedKFold, train_test_split
from sklearn.pipeline import make_pipeline
from sklearn.preprocessing import StandardScaler
from sklearn.svm import SVC

from .latent import LatentMatrix

METRIC_NAMES = ("accuracy", "auc", "f1", "precision", "recall")
N_FOLDS = 5
TEST_SPLIT = 0.3


@dataclass(frozen=True)
class SvcParams:
    C: float = 1.0
    kernel: str = "rbf"
    class_weight: str | None = "balanced"
    gamma: float | None = None  # None: 1 / (n_features * var(X)) on standardized features

    def __post_init__(self):
        if not self.C > 0:
            raise ValueError(f"C must be > 0, got {self.C}")
        if self.kernel not in ("linear", "rbf"):
            raise ValueError(f"kernel must be 'linear' or 'rbf', got {self.kernel!r}")
        if self.class_weight not in (None, "balanced"):
            raise ValueError(f"class_weight must be None or 'balanced', got {self.class_weight!r}")
        if self.gamma is not None and not self.gamma > 0:
            raise ValueError("gamma must be > 0")

    @property
    def name(self) -> str:
        s = f"C={self.C:g};kernel={self.kernel};class_weight={self.class_weight or 'none'}"
        return s + (f";gamma={self.gamma:g}" if self.gamma is not None else "")


PAPER_OPTIMUM = SvcParams(C=1.0, kernel="rbf", class_weight="balanced")


def default_grid() -> list[SvcParams]:
    return [
        SvcParams(C=c, kernel=k, class_weight=w)
        for c, k, w in itertools.product((0.1, 1.0, 10.0), ("linear", "rbf"), (None, "balanced"))
    ]


def make_classifier(params: SvcParams):
    """Standardize (fit on the training portion only) then a soft-margin SVC."""
    svc = SVC(
        C=params.C,
        kernel=params.kernel,
        gamma="scale" if params.gamma is None else params.gamma,
        class_weight=params.class_weight,
    )
    return make_pipeline(StandardScaler(), svc)


@dataclass
class MetricsReport:
    accuracy: float
    auc: float
    f1: float
    precision: float
    recall: float
    roc_points: np.ndarray  # (M, 3): fpr, tpr, threshold

    def as_dict(self) -> dict[str, float]:
        return {m: getattr(self, m) for m in METRIC_NAMES}


def compute_metrics(y_true, y_score, y_pred) -> MetricsReport:
    """AUC is the trapezoidal area under the full ROC sweep of score thresholds."""
    y_true = np.asarray(y_true)
    y_score = np.asarray(y_score, dtype=np.float64)
    y_pred = np.asarray(y_pred)
    if len(y_true) == 0:
        raise ValueError("empty input")
    if not (len(y_true) == len(y_score) == len(y_pred)):
        raise ValueError("y_true, y_score and y_pred must have equal lengths")
    if not set(np.unique(y_true).tolist()) <= {0, 1}:
        raise ValueError("y_true must be binary 0/1")
    if len(np.unique(y_true)) < 2:
        raise ValueError("AUC needs both classes in y_true")
    fpr, tpr, thr = roc_curve(y_true, y_score, drop_intermediate=False)
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))
    return MetricsReport(
        accuracy=float(accuracy_score(y_true, y_pred)),
        auc=auc,
        f1=float(f1_score(y_true, y_pred, zero_division=0)),
        precision=float(precision_score(y_true, y_pred, zero_division=0)),
        recall=float(recall_score(y_true, y_pred, zero_division=0)),
        roc_points=np.column_stack([fpr, tpr, thr]),
    )


def _fit_score(params: SvcParams, X_tr, y_tr, X_te, y_te) -> MetricsReport:
    clf = make_classifier(params).fit(X_tr, y_tr)
    score = clf.decision_function(X_te)
    pred = (score > 0).astype(int)
    return compute_metrics(y_te, score, pred)


def stratified_folds(labels, n_folds: int = N_FOLDS, seed: int = 0) -> list[np.ndarray]:
    """Validation index sets of a shuffled stratified k-fold partition."""
    labels = np.asarray(labels)
    counts = np.bincount(labels, minlength=2)
    if counts.min() < n_folds:
        raise ValueError(f"each class needs at least {n_folds} samples for {n_folds}-fold CV, got {counts.tolist()}")
    skf = StratifiedKFold(n_splits=n_folds, shuffle=True, random_state=seed)
    return [te for _, te in skf.split(np.zeros(len(labels)), labels)]


@dataclass
class CandidateResult:
    params: SvcParams
    mean: dict[str, float]
    std: dict[str, float]


@dataclass
class CvReport:
    candidates: list[CandidateResult]
    best_index: int
    folds: list[np.ndarray] = field(default_factory=list)

    @property
    def best_params(self) -> SvcParams:
        return self.candidates[self.best_index].params

    @property
    def best(self) -> CandidateResult:
        return self.candidates[self.best_index]


def cross_validate(latents: LatentMatrix, grid: Sequence[SvcParams], seed: int = 0, n_folds: int = N_FOLDS) -> CvReport:
    """Evaluate every candidate on the same stratified folds; best = highest mean AUC (first wins ties)."""
    X, y = latents.values, latents.labels
    if len(y) < 10:
        raise ValueError(f"cross-validation needs at least 10 samples, got {len(y)}")
    if not grid:
        raise ValueError("empty hyperparameter grid")
    folds = stratified_folds(y, n_folds, seed)
    results = []
    for params in grid:
        per_fold = []
        for te in folds:
            tr = np.setdiff1d(np.arange(len(y)), te)
            per_fold.append(_fit_score(params, X[tr], y[tr], X[te], y[te]).as_dict())
        mean = {m: float(np.mean([f[m] for f in per_fold])) for m in METRIC_NAMES}
        std = {m: float(np.std([f[m] for f in per_fold])) for m in METRIC_NAMES}
        results.append(CandidateResult(params, mean, std))
    aucs = [r.mean["auc"] for r in results]
    return CvReport(results, int(np.argmax(aucs)), folds)


def train_test_evaluate(
    latents: LatentMatrix, params: SvcParams = PAPER_OPTIMUM, split_ratio: float = TEST_SPLIT, seed: int = 0
) -> MetricsReport:
    if not 0 < split_ratio < 1:
        raise ValueError(f"split_ratio must be in (0, 1), got {split_ratio}")
    X, y = latents.values, latents.labels
    try:
        X_tr, X_te, y_tr, y_te = train_test_split(X, y, test_size=split_ratio, stratify=y, random_state=seed)
    except ValueError as exc:
        raise ValueError(f"stratified split infeasible: {exc}") from exc
    if len(np.unique(y_te)) < 2 or len(np.unique(y_tr)) < 2:
        raise ValueError("train and test portions must both contain two classes")
    return _fit_score(params, X_tr, y_tr, X_te, y_te)


# --- trends, tables, figures ----------------------------------------------------------


def metric_trends(reports: Mapping[int, MetricsReport], out_dir: str | Path | None = None) -> list[dict]:
    """One row of the five metrics per latent size; optionally writes the CSV and figures."""
    if len(reports) < 2:
        raise ValueError("metric trends need at least two latent sizes")
    rows = [{"nl": nl, **reports[nl].as_dict()} for nl in sorted(reports)]
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_metrics_csv(rows, out_dir / "metrics.csv")
        plot_roc_overlay(reports, out_dir / "roc_overlay.png")
        plot_metric_trends(rows, out_dir / "metric_trends.png")
    return rows


def write_metrics_csv(rows: Sequence[dict], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("nl",) + METRIC_NAMES)
        for r in rows:
            w.writerow([r["nl"]] + [repr(float(r[m])) for m in METRIC_NAMES])


def read_metrics_csv(path: str | Path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [{"nl": int(r["nl"]), **{m: float(r[m]) for m in METRIC_NAMES}} for r in csv.DictReader(fh)]


def write_cv_csv(reports: Mapping[int, CvReport], path: str | Path) -> None:
    cols = ["nl", "candidate", "best"] + [f"{m}_{s}" for m in METRIC_NAMES for s in ("mean", "std")]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for nl in sorted(reports):
            rep = reports[nl]
            for i, c in enumerate(rep.candidates):
                vals = [repr(d[m]) for m in METRIC_NAMES for d in (c.mean, c.std)]
                w.writerow([nl, c.params.name, int(i == rep.best_index)] + vals)


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def plot_roc_overlay(reports: Mapping[int, MetricsReport], path: str | Path):
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 5))
    for nl in sorted(reports):
        r = reports[nl]
        ax.plot(r.roc_points[:, 0], r.roc_points[:, 1], label=f"nl={nl} (AUC {r.auc:.3f})")
    ax.plot([0, 1], [0, 1], ls="--", color="grey", lw=0.8, label="_chance")
    ax.set(xlabel="false positive rate", ylabel="true positive rate", xlim=(0, 1), ylim=(0, 1.01))
    ax.legend(fontsize=8, loc="lower right")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return fig


def plot_metric_trends(rows: Sequence[dict], path: str | Path, title: str = "") -> None:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 4))
    nls = [r["nl"] for r in rows]
    for m in METRIC_NAMES:
        ax.plot(nls, [r[m] for r in rows], "o-", label=m)
    ax.set_xscale("log", base=2)
    ax.set(xlabel="latent size", ylabel="score", ylim=(0, 1.02), title=title)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
