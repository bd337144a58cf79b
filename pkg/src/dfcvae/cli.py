"""Command-line entry point: ``dfcvae <command> --config <path> [--run-dir] [--preset] [--seed]``.

Exit codes: 0 success, 1 stage failure, 2 configuration error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np
from filelock import FileLock, Timeout

from . import classify as cls
from . import latent as lat
from .config import ConfigError, RunConfig, load_config
from .data import DatasetSplit, build_synthetic_dataset, load_image_directory, load_split, save_split, stratified_split
from .model import WEIGHTS_ENV
from .train import (
    CHECKPOINT_NAME,
    SweepReport,
    reconstruct_validation,
    save_reconstruction_review,
    sweep,
    train_one,
)

log = logging.getLogger("dfcvae")

COMMANDS = ("generate", "train", "sweep", "analyze", "classify", "report")
LOCK_NAME = ".dfcvae.lock"
MANIFEST_NAME = "manifest.json"


class StageError(RuntimeError):
    pass


# --- dataset resolution ------------------------------------------------------------


def data_dir(cfg: RunConfig, run_dir: Path) -> Path:
    ds = cfg.require_dataset()
    return Path(ds.path) if ds.path else run_dir / "data"


def _write_manifest(cfg: RunConfig, split: DatasetSplit, directory: Path) -> None:
    ds = cfg.dataset
    manifest = {
        "seed": cfg.seed,
        "n_normal": ds.n_normal,
        "n_glaucoma": ds.n_glaucoma,
        "split_ratio": ds.split_ratio,
        "overlap": ds.overlap,
        "image_size": ds.image_size,
        "n_train": len(split.train),
        "n_validation": len(split.validation),
    }
    (directory / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def generate_dataset(cfg: RunConfig, run_dir: Path) -> Path:
    ds = cfg.require_synthetic()
    out = data_dir(cfg, run_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise StageError(f"cannot create output directory {out}: {exc}") from exc
    split = build_synthetic_dataset(
        ds.n_normal, ds.n_glaucoma, ds.split_ratio, cfg.seed, overlap=ds.overlap, size=ds.image_size
    )
    try:
        save_split(split, out)
        _write_manifest(cfg, split, out)
    except OSError as exc:
        raise StageError(f"cannot write dataset to {out}: {exc}") from exc
    log.info("wrote %d train + %d validation images to %s", len(split.train), len(split.validation), out)
    return out


def resolve_dataset(cfg: RunConfig, run_dir: Path) -> DatasetSplit:
    """Load the configured dataset; a synthetic one is generated on first use."""
    ds = cfg.require_dataset()
    if ds.kind == "directory":
        root = Path(ds.path)
        if (root / "train").is_dir() and (root / "validation").is_dir():
            return load_split(root, size=ds.image_size)
        return stratified_split(load_image_directory(root, size=ds.image_size), ds.split_ratio, cfg.seed)
    out = data_dir(cfg, run_dir)
    if not (out / MANIFEST_NAME).is_file():
        generate_dataset(cfg, run_dir)
    return load_split(out, size=ds.image_size, split_ratio=ds.split_ratio)


# --- stages --------------------------------------------------------------------------


def cmd_generate(cfg: RunConfig, run_dir: Path) -> None:
    generate_dataset(cfg, run_dir)


def cmd_train(cfg: RunConfig, run_dir: Path) -> None:
    data = resolve_dataset(cfg, run_dir)
    nl = cfg.latent_size
    ckpt, hist = train_one(cfg.train, cfg.vae_config(nl), data, run_dir / f"nl{nl}")
    save_reconstruction_review(reconstruct_validation(ckpt, data), run_dir / f"nl{nl}" / "reconstructions.png")
    log.info("nl=%d best epoch %d val %.6f", nl, hist.best_epoch, hist.best.val_total)


def cmd_sweep(cfg: RunConfig, run_dir: Path) -> None:
    data = resolve_dataset(cfg, run_dir)
    report = sweep(cfg.train, cfg.sweep, data, run_dir, vae_base=cfg.vae_config())
    failed = [r for r in report.records if r.error]
    if failed:
        raise StageError("; ".join(f"nl={r.latent_size}: {r.error}" for r in failed))


def _checkpoint(run_dir: Path, nl: int) -> Path:
    path = run_dir / f"nl{nl}" / CHECKPOINT_NAME
    if not path.is_file():
        raise StageError(f"missing checkpoint for nl={nl}: {path}")
    return path


def cmd_analyze(cfg: RunConfig, run_dir: Path) -> None:
    """Latents + rankings for every swept size; UMAP embeddings for the analysis sizes."""
    sizes = sorted(set(cfg.sweep) | set(cfg.analysis_sizes))
    ckpts = {nl: _checkpoint(run_dir, nl) for nl in sizes}
    data = resolve_dataset(cfg, run_dir)
    out = run_dir / "analysis"
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for nl in sizes:
        latents = lat.encode_dataset(ckpts[nl], data.validation)
        lat.write_latent_csv(latents, out / f"latents_nl{nl}.csv")
        ranking = lat.rank_features(latents)
        lat.write_ranking_csv(latents, ranking, out / f"ranking_nl{nl}.csv")
        if nl not in cfg.analysis_sizes:
            continue
        ks = sorted({lat.topk_for_ratio(nl, r) for r in cfg.analysis.topk_ratios} | {nl})
        for k in ks:
            sub = lat.select_top_k(latents, ranking, k)
            emb = lat.umap_embed(sub, cfg.analysis.n_neighbors, cfg.analysis.min_dist, seed=cfg.seed)
            lat.write_embedding_csv(emb, out / f"embedding_nl{nl}_k{k}.csv")
            lat.plot_embedding(emb, out / f"umap_nl{nl}_k{k}.png", title=f"nl={nl}, top-{k}")
            rows.append((nl, k, k / nl, lat.cluster_separation(emb)))
    with open(out / "cluster_separation.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["nl", "k", "ratio", "silhouette"])
        for nl, k, ratio, s in rows:
            w.writerow([nl, k, repr(ratio), repr(s)])


def cmd_classify(cfg: RunConfig, run_dir: Path) -> None:
    """Cross-validate the grid per size, pick one optimum by mean AUC across sizes,
    then score every size on a held-out split with that optimum."""
    sizes = sorted(cfg.sweep)
    latents = {}
    for nl in sizes:
        path = run_dir / "analysis" / f"latents_nl{nl}.csv"
        if not path.is_file():
            raise StageError(f"missing latents for nl={nl}: {path} (run analyze first)")
        latents[nl] = lat.read_latent_csv(path)
    out = run_dir / "classify"
    out.mkdir(parents=True, exist_ok=True)

    cv = {nl: cls.cross_validate(latents[nl], cfg.classify.grid, cfg.seed, cfg.classify.folds) for nl in sizes}
    cls.write_cv_csv(cv, out / "cv_report.csv")
    mean_auc = np.mean([[c.mean["auc"] for c in cv[nl].candidates] for nl in sizes], axis=0)
    optimum = cfg.classify.grid[int(np.argmax(mean_auc))]
    log.info("global SVC optimum %s (mean CV AUC %.4f)", optimum.name, mean_auc.max())
    cv_rows = [{"nl": nl, **cv[nl].candidates[int(np.argmax(mean_auc))].mean} for nl in sizes]
    cls.write_metrics_csv(cv_rows, out / "cv_trends.csv")
    (out / "optimum.json").write_text(
        json.dumps({"C": optimum.C, "kernel": optimum.kernel, "class_weight": optimum.class_weight,
                    "gamma": optimum.gamma, "mean_cv_auc": float(mean_auc.max())}, indent=2) + "\n",
        encoding="utf-8",
    )

    reports = {
        nl: cls.train_test_evaluate(latents[nl], optimum, cfg.classify.split_ratio, cfg.seed) for nl in sizes
    }
    if len(reports) >= 2:
        cls.metric_trends(reports, out)
        cls.plot_metric_trends(cv_rows, out / "cv_trends.png", title="cross-validation, global optimum")
    else:
        cls.write_metrics_csv([{"nl": nl, **r.as_dict()} for nl, r in reports.items()], out / "metrics.csv")
        cls.plot_roc_overlay(reports, out / "roc_overlay.png")


# --- report --------------------------------------------------------------------------


def _csv_table(path: Path, float_fmt: str = "{:.4f}") -> str:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        return "_(empty)_\n"

    def cell(v: str) -> str:
        try:
            f = float(v)
        except ValueError:
            return v
        return v if f.is_integer() and "." not in v and "e" not in v else float_fmt.format(f)

    lines = ["| " + " | ".join(rows[0]) + " |", "|" + "---|" * len(rows[0])]
    lines += ["| " + " | ".join(cell(v) for v in r) + " |" for r in rows[1:]]
    return "\n".join(lines) + "\n"


def build_report(run_dir: Path) -> tuple[str, list[str]]:
    """Markdown summary of whatever stages exist, plus the list of missing ones."""
    missing: list[str] = []
    parts = [f"# Run report: {run_dir.name}\n"]

    def section(title: str, files: list[Path], body) -> None:
        parts.append(f"## {title}\n")
        absent = [f for f in files if not f.is_file()]
        if absent:
            missing.append(title)
            parts.append(f"**Section absent**: missing {', '.join(str(f.relative_to(run_dir)) for f in absent)}\n")
        else:
            parts.append(body())

    manifest = run_dir / "data" / MANIFEST_NAME
    section("Dataset", [manifest], lambda: "```json\n" + manifest.read_text(encoding="utf-8") + "```\n")

    sweep_csv = run_dir / "sweep_report.csv"

    def loss_body():
        return (
            _csv_table(sweep_csv)
            + "\n![loss curves](figures/loss_curves.png)\n"
        )

    section("Training loss", [sweep_csv], loss_body)

    def ssim_body():
        rep = SweepReport.read_csv(sweep_csv)
        lines = ["| nl | mean validation SSIM |", "|---|---|"]
        lines += [f"| {r.latent_size} | {r.mean_ssim:.4f} |" for r in rep.records if not r.error]
        figs = "".join(
            f"\n![reconstructions nl={r.latent_size}](nl{r.latent_size}/reconstructions.png)"
            for r in rep.records if not r.error
        )
        return "\n".join(lines) + "\n\n![SSIM vs latent size](figures/ssim_vs_nl.png)\n" + figs + "\n"

    section("Reconstruction similarity", [sweep_csv], ssim_body)

    clusters = run_dir / "analysis" / "cluster_separation.csv"

    def cluster_body():
        with open(clusters, newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        figs = "".join(f"\n![umap nl={r['nl']} k={r['k']}](analysis/umap_nl{r['nl']}_k{r['k']}.png)" for r in rows)
        return _csv_table(clusters) + figs + "\n"

    section("Latent clustering", [clusters], cluster_body)

    metrics = run_dir / "classify" / "metrics.csv"
    optimum = run_dir / "classify" / "optimum.json"
    cv_trends = run_dir / "classify" / "cv_trends.csv"

    def metric_body():
        opt = json.loads(optimum.read_text(encoding="utf-8"))
        head = f"SVC optimum: C={opt['C']:g}, kernel={opt['kernel']}, class_weight={opt['class_weight']}\n\n"
        return (
            head
            + "Cross-validation at the optimum:\n\n"
            + (_csv_table(cv_trends) if cv_trends.is_file() else "_(not available)_\n")
            + "\nHeld-out split:\n\n"
            + _csv_table(metrics)
            + "\n![ROC overlay](classify/roc_overlay.png)\n"
        )

    section("Classification metrics", [metrics, optimum], metric_body)

    if missing:
        parts.insert(1, "> Incomplete run. Absent sections: " + ", ".join(missing) + "\n")
    return "\n".join(parts), missing


def cmd_report(cfg: RunConfig, run_dir: Path) -> None:
    if not run_dir.is_dir():
        raise StageError(f"run directory not found: {run_dir}")
    text, missing = build_report(run_dir)
    (run_dir / "report.md").write_text(text, encoding="utf-8")
    if missing:
        raise StageError("report is partial; absent sections: " + ", ".join(missing))


STAGES = {
    "generate": cmd_generate,
    "train": cmd_train,
    "sweep": cmd_sweep,
    "analyze": cmd_analyze,
    "classify": cmd_classify,
    "report": cmd_report,
}


# --- entry point ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dfcvae", description="DFC-VAE latent-size study pipeline.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", type=Path, default=None, help="TOML run configuration")
    p.add_argument("--run-dir", type=Path, default=None, help="override <output_root>/<name>")
    p.add_argument("--preset", choices=("paper", "desk"), default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("-v", "--verbose", action="store_true")
    p.epilog = f"Environment: DFCVAE_OUTPUT_ROOT (output root), {WEIGHTS_ENV} (extractor weights file)."
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = load_config(args.config, preset=args.preset, seed=args.seed)
        if args.command == "generate":
            cfg.require_synthetic()
        elif args.command in ("train", "sweep"):
            cfg.require_dataset()
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2

    run_dir = cfg.run_dir(args.run_dir)
    try:
        run_dir.mkdir(parents=True, exist_ok=True)
        lock = FileLock(str(run_dir / LOCK_NAME), timeout=0)
        with lock:
            STAGES[args.command](cfg, run_dir)
    except Timeout:
        print(f"error: run directory {run_dir} is in use by another invocation", file=sys.stderr)
        return 1
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        log.debug("stage failed", exc_info=True)
        print(f"error: {args.command} failed: {exc}", file=sys.stderr)
        return 1
    return 0


PIPELINE = ("generate", "sweep", "analyze", "classify", "report")


def run_pipeline(config: str | Path, run_dir: str | Path, seed: int | None = None, stages=PIPELINE) -> dict[str, int]:
    """Run ``stages`` in order, stopping at the first non-zero exit code."""
    codes = {}
    for stage in stages:
        argv = [stage, "--config", str(config), "--run-dir", str(run_dir)]
        if seed is not None:
            argv += ["--seed", str(seed)]
        codes[stage] = main(argv)
        if codes[stage]:
            break
    return codes


if __name__ == "__main__":
    sys.exit(main())
