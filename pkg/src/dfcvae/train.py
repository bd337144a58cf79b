"""Training recipe for one latent size, best-by-validation checkpointing,
the latent-size sweep and validation reconstruction review."""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from . import imaging
from .data import DatasetSplit, batch_indices, flip_draws, stack_images
from .model import (
    SWEEP_SIZES,
    DfcVae,
    ExtractorConfig,
    PerceptualLoss,
    VaeConfig,
    as_criterion,
    combine_losses,
    kl_divergence,
)

log = logging.getLogger(__name__)

HISTORY_COLUMNS = ("epoch", "train_total", "train_feat", "train_kl", "val_total", "val_feat", "val_kl", "lr")
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
CHECKPOINT_NAME = "checkpoint.bin"
TIMING_NAME = "timing.json"
MASK_THRESHOLD = 0.5


class TrainingDivergedError(RuntimeError):
    pass


class CheckpointError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 300
    batch_size: int = 64
    lr: float = 1e-3
    scheduler_step: int = 140
    scheduler_gamma: float = 0.1
    flip_prob: float = 0.5
    seed: int = 0
    extractor: ExtractorConfig = field(default_factory=ExtractorConfig)

    def __post_init__(self):
        if isinstance(self.extractor, dict):
            self.extractor = ExtractorConfig(**self.extractor)
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if self.scheduler_step < 1:
            raise ValueError("scheduler_step must be >= 1")
        if not 0 < self.scheduler_gamma <= 1:
            raise ValueError("scheduler_gamma must be in (0, 1]")
        if not 0 <= self.flip_prob <= 1:
            raise ValueError("flip_prob must be in [0, 1]")

    def lr_at(self, epoch: int) -> float:
        return self.lr * self.scheduler_gamma ** (epoch // self.scheduler_step)


PAPER_TRAIN = dict(epochs=300, batch_size=64, lr=1e-3, scheduler_step=140, scheduler_gamma=0.1, flip_prob=0.5)
DESK_TRAIN = dict(epochs=30, batch_size=64, lr=1e-3, scheduler_step=14, scheduler_gamma=0.1, flip_prob=0.5)


@dataclass
class EpochRecord:
    epoch: int
    train_total: float
    train_feat: float
    train_kl: float
    val_total: float
    val_feat: float
    val_kl: float
    lr: float


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)

    @property
    def best_epoch(self) -> int:
        vals = [r.val_total for r in self.records]
        return int(np.argmin(vals))

    @property
    def best(self) -> EpochRecord:
        return self.records[self.best_epoch]

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(HISTORY_COLUMNS)
            for r in self.records:
                w.writerow([getattr(r, c) if c == "epoch" else repr(float(getattr(r, c))) for c in HISTORY_COLUMNS])

    @classmethod
    def read_csv(cls, path: str | Path) -> "TrainHistory":
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        recs = [
            EpochRecord(epoch=int(r["epoch"]), **{c: float(r[c]) for c in HISTORY_COLUMNS[1:]})
            for r in rows
        ]
        return cls(recs)


@dataclass
class SweepRecord:
    latent_size: int
    best_epoch: int | None = None
    val_total: float = math.nan
    val_feat: float = math.nan
    val_kl: float = math.nan
    mean_ssim: float = math.nan
    checkpoint: str = ""
    error: str = ""


@dataclass
class SweepReport:
    records: list[SweepRecord]

    def write_csv(self, path: str | Path) -> None:
        cols = [f.name for f in dataclasses.fields(SweepRecord)]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            for r in self.records:
                w.writerow([repr(v) if isinstance(v, float) else ("" if v is None else v)
                            for v in (getattr(r, c) for c in cols)])

    @classmethod
    def read_csv(cls, path: str | Path) -> "SweepReport":
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        recs = []
        for r in rows:
            recs.append(SweepRecord(
                latent_size=int(r["latent_size"]),
                best_epoch=int(r["best_epoch"]) if r["best_epoch"] else None,
                val_total=float(r["val_total"]),
                val_feat=float(r["val_feat"]),
                val_kl=float(r["val_kl"]),
                mean_ssim=float(r["mean_ssim"]),
                checkpoint=r["checkpoint"],
                error=r["error"],
            ))
        return cls(recs)


def derived_seeds(seed: int, latent_size: int) -> dict[str, int]:
    """Independent integer seeds for one (run seed, latent size) pair."""
    children = np.random.SeedSequence([seed, latent_size]).spawn(4)
    names = ("init", "shuffle", "flip", "eps")
    return {n: int(c.generate_state(1)[0]) for n, c in zip(names, children)}


def _as_tensor(images) -> torch.Tensor:
    if isinstance(images, torch.Tensor):
        return images
    if isinstance(images, np.ndarray):
        return torch.from_numpy(np.ascontiguousarray(images, dtype=np.float32))
    return torch.from_numpy(stack_images(images))


@torch.no_grad()
def evaluate_model(
    model: DfcVae, criterion: PerceptualLoss | nn.Module, x: torch.Tensor, beta: float, batch_size: int = 64
) -> dict[str, float]:
    """Mean validation losses using posterior-mean reconstructions (eps = 0)."""
    criterion = as_criterion(criterion)
    model.eval()
    sums = np.zeros(3)
    for i in range(0, len(x), batch_size):
        xb = x[i : i + batch_size].to(next(model.parameters()).dtype)
        mu, logvar = model.encode(xb)
        x_rec = model.decode(mu)
        feat = criterion(x_rec, criterion.target(xb))
        lb = combine_losses(feat, kl_divergence(mu, logvar), beta)
        sums += len(xb) * np.array([lb.total.item(), lb.feature.item(), lb.kl.item()])
    total, feat, kl = (float(v) for v in sums / len(x))
    return {"total": total, "feature": feat, "kl": kl}


def save_checkpoint(path, model: DfcVae, epoch: int, val: dict, train_config: TrainConfig | None = None) -> None:
    torch.save(
        {
            "state_dict": model.state_dict(),
            "vae_config": model.config.to_dict(),
            "epoch": int(epoch),
            "val_loss": {k: float(v) for k, v in val.items()},
            "train_config": dataclasses.asdict(train_config) if train_config else None,
        },
        path,
    )


def load_checkpoint(path: str | Path) -> tuple[DfcVae, dict]:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        blob = torch.load(path, map_location="cpu", weights_only=True)
        model = DfcVae(VaeConfig(**blob["vae_config"]))
        model.load_state_dict(blob["state_dict"])
    except CheckpointError:
        raise
    except Exception as exc:
        raise CheckpointError(f"cannot load checkpoint {path}: {exc}") from exc
    model.eval()
    return model, blob


def train_one(
    config: TrainConfig,
    vae_config: VaeConfig,
    data: DatasetSplit,
    out_dir: str | Path,
    criterion: PerceptualLoss | nn.Module | None = None,
) -> tuple[Path, TrainHistory]:
    """Train one model; persist the best-by-validation checkpoint and ``history.csv`` in ``out_dir``.

    Wall-clock time goes to ``timing.json`` so the history stays reproducible.
    """
    start = time.perf_counter()
    if not data.train or not data.validation:
        raise ValueError("training and validation splits must be non-empty")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    seeds = derived_seeds(config.seed, vae_config.latent_size)
    vae_config = dataclasses.replace(vae_config, seed=seeds["init"])
    criterion = config.extractor.build_loss() if criterion is None else as_criterion(criterion)

    model = DfcVae(vae_config)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr, betas=ADAM_BETAS, eps=ADAM_EPS)
    sched = torch.optim.lr_scheduler.StepLR(opt, step_size=config.scheduler_step, gamma=config.scheduler_gamma)
    eps_gen = torch.Generator().manual_seed(seeds["eps"])
    train_x = _as_tensor(data.train)
    val_x = _as_tensor(data.validation)
    beta = vae_config.kl_weight
    ckpt_path = out_dir / CHECKPOINT_NAME

    history = TrainHistory()
    best_val = math.inf
    for epoch in range(config.epochs):
        lr = opt.param_groups[0]["lr"]
        model.train()
        flip_rng = np.random.default_rng([seeds["flip"], epoch])
        sums = np.zeros(3)
        for b, idx in enumerate(batch_indices(len(train_x), config.batch_size, seeds["shuffle"], epoch)):
            xb = train_x[torch.from_numpy(idx)]
            flips = torch.from_numpy(flip_draws(len(idx), config.flip_prob, flip_rng))
            xb = torch.where(flips[:, None, None, None], xb.flip(-1), xb)
            x_rec, mu, logvar = model(xb, generator=eps_gen)
            feat = criterion(x_rec, criterion.target(xb))
            lb = combine_losses(feat, kl_divergence(mu, logvar), beta)
            if not torch.isfinite(lb.total):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch} batch {b} (latent size {vae_config.latent_size}): "
                    f"feature={lb.feature.item()} kl={lb.kl.item()}"
                )
            opt.zero_grad(set_to_none=True)
            lb.total.backward()
            opt.step()
            sums += len(idx) * np.array([lb.total.item(), lb.feature.item(), lb.kl.item()])
        sched.step()
        train = sums / len(train_x)
        val = evaluate_model(model, criterion, val_x, beta, config.batch_size)
        if not math.isfinite(val["total"]):
            raise TrainingDivergedError(f"non-finite validation loss at epoch {epoch}")
        history.records.append(EpochRecord(epoch, *train, val["total"], val["feature"], val["kl"], lr))
        if val["total"] < best_val:
            best_val = val["total"]
            save_checkpoint(ckpt_path, model, epoch, val, config)
        log.info(
            "nl=%d epoch %d/%d lr=%.1e train=%.4f val=%.4f (feat %.4f kl %.4f)",
            vae_config.latent_size, epoch + 1, config.epochs, lr, train[0], val["total"], val["feature"], val["kl"],
        )
    history.write_csv(out_dir / "history.csv")
    (out_dir / TIMING_NAME).write_text(json.dumps({"seconds": time.perf_counter() - start}) + "\n", encoding="utf-8")
    return ckpt_path, history


def evaluate_checkpoint(
    path, data: DatasetSplit, criterion: PerceptualLoss | nn.Module, batch_size: int = 64
) -> dict[str, float]:
    model, _ = load_checkpoint(path)
    return evaluate_model(model, criterion, _as_tensor(data.validation), model.config.kl_weight, batch_size)


@dataclass
class ReconstructionRecord:
    id: str
    label: int
    original: np.ndarray
    reconstruction: np.ndarray
    ssim: float
    mask: np.ndarray


@torch.no_grad()
def reconstruct(model: DfcVae, images, batch_size: int = 64) -> np.ndarray:
    """Posterior-mean reconstructions as ``(N, H, W, 3)`` float64 arrays."""
    model.eval()
    x = _as_tensor(images)
    out = []
    for i in range(0, len(x), batch_size):
        mu, _ = model.encode(x[i : i + batch_size])
        out.append(model.decode(mu).permute(0, 2, 3, 1).double().numpy())
    return np.clip(np.concatenate(out), 0.0, 1.0)


def reconstruct_validation(
    checkpoint: str | Path | DfcVae, data: DatasetSplit, mask_threshold: float = MASK_THRESHOLD
) -> list[ReconstructionRecord]:
    model = checkpoint if isinstance(checkpoint, DfcVae) else load_checkpoint(checkpoint)[0]
    items = data.validation
    try:
        recs = reconstruct(model, items)
    except Exception as exc:
        raise CheckpointError(f"checkpoint does not fit the data: {exc}") from exc
    records = []
    for it, rec in zip(items, recs):
        records.append(ReconstructionRecord(
            id=it.id,
            label=it.label,
            original=it.image,
            reconstruction=rec,
            ssim=imaging.ssim(it.image, rec),
            mask=imaging.diff_mask(it.image, rec, mask_threshold),
        ))
    return records


def sweep(
    config: TrainConfig,
    sweep_set: Sequence[int],
    data: DatasetSplit,
    run_dir: str | Path,
    vae_base: VaeConfig | None = None,
) -> SweepReport:
    """Train one model per latent size; failures are recorded and the sweep continues."""
    if not sweep_set:
        raise ValueError("sweep set must be non-empty")
    bad = [k for k in sweep_set if k not in SWEEP_SIZES]
    if bad:
        raise ValueError(f"invalid latent sizes {bad}; allowed: {SWEEP_SIZES}")
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    vae_base = vae_base or VaeConfig()
    criterion = config.extractor.build_loss()
    records = []
    histories = {}
    for nl in sweep_set:
        rec = SweepRecord(latent_size=nl)
        try:
            vcfg = dataclasses.replace(vae_base, latent_size=nl)
            ckpt, hist = train_one(config, vcfg, data, run_dir / f"nl{nl}", criterion)
            histories[nl] = hist
            best = hist.best
            recon = reconstruct_validation(ckpt, data)
            rec.best_epoch = hist.best_epoch
            rec.val_total, rec.val_feat, rec.val_kl = best.val_total, best.val_feat, best.val_kl
            rec.mean_ssim = float(np.mean([r.ssim for r in recon]))
            rec.checkpoint = str(Path(f"nl{nl}") / CHECKPOINT_NAME)
            save_reconstruction_review(recon, run_dir / f"nl{nl}" / "reconstructions.png")
        except Exception as exc:  # one size failing must not stop the sweep
            log.exception("latent size %d failed", nl)
            rec.error = f"{type(exc).__name__}: {exc}"
        records.append(rec)
    report = SweepReport(records)
    report.write_csv(run_dir / "sweep_report.csv")
    plot_sweep(report, histories, run_dir / "figures")
    return report


# --- figures ------------------------------------------------------------------------


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def plot_sweep(report: SweepReport, histories: dict[int, TrainHistory], fig_dir: str | Path) -> None:
    plt = _pyplot()
    fig_dir = Path(fig_dir)
    fig_dir.mkdir(parents=True, exist_ok=True)
    ok = [r for r in report.records if not r.error]

    fig, axes = plt.subplots(1, 2, figsize=(11, 4))
    for nl, h in histories.items():
        ep = [r.epoch for r in h.records]
        axes[0].plot(ep, [r.val_total for r in h.records], label=f"nl={nl}")
        axes[0].plot(ep, [r.train_total for r in h.records], ls=":", color=axes[0].lines[-1].get_color())
    axes[0].set(xlabel="epoch", ylabel="total loss", title="validation (solid) / train (dotted)")
    axes[0].legend(fontsize=8)
    if ok:
        nls = [r.latent_size for r in ok]
        axes[1].plot(nls, [r.val_total for r in ok], "o-", label="total")
        axes[1].plot(nls, [r.val_feat for r in ok], "s-", label="feature")
        axes[1].plot(nls, [r.val_kl for r in ok], "^-", label="KL")
        axes[1].set_xscale("log", base=2)
        axes[1].legend()
    axes[1].set(xlabel="latent size", ylabel="best validation loss")
    fig.tight_layout()
    fig.savefig(fig_dir / "loss_curves.png", dpi=100)
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(5, 4))
    if ok:
        ax.plot([r.latent_size for r in ok], [r.mean_ssim for r in ok], "o-")
        ax.set_xscale("log", base=2)
    ax.set(xlabel="latent size", ylabel="mean validation SSIM")
    fig.tight_layout()
    fig.savefig(fig_dir / "ssim_vs_nl.png", dpi=100)
    plt.close(fig)


def save_reconstruction_review(records: Sequence[ReconstructionRecord], path: str | Path, n: int = 6) -> None:
    """Original / reconstruction / difference-mask panel for the first few images of each class."""
    plt = _pyplot()
    picks = [r for r in records if r.label == 1][: n // 2] + [r for r in records if r.label == 0][: n - n // 2]
    if not picks:
        return
    fig, axes = plt.subplots(3, len(picks), figsize=(2 * len(picks), 6), squeeze=False)
    for j, r in enumerate(picks):
        axes[0, j].imshow(r.original)
        axes[0, j].set_title(f"{'glaucoma' if r.label else 'normal'}", fontsize=8)
        axes[1, j].imshow(r.reconstruction)
        axes[1, j].set_title(f"SSIM {r.ssim:.3f}", fontsize=8)
        axes[2, j].imshow(r.mask, cmap="gray", vmin=0, vmax=1)
        for i in range(3):
            axes[i, j].axis("off")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
