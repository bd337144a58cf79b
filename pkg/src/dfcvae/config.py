"""Run configuration: TOML document + named presets, validated before any side effects.

Precedence (lowest first): built-in defaults, preset, config file, CLI flags.
"""
from __future__ import annotations

import copy
import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .classify import N_FOLDS, TEST_SPLIT, SvcParams, default_grid
from .data import DESK_COUNTS, PAPER_COUNTS
from .latent import PAPER_TOPK_RATIOS, UMAP_DEFAULTS
from .model import SWEEP_SIZES, ExtractorConfig, VaeConfig
from .train import DESK_TRAIN, PAPER_TRAIN, TrainConfig

OUTPUT_ROOT_ENV = "DFCVAE_OUTPUT_ROOT"


class ConfigError(ValueError):
    pass


PRESETS: dict[str, dict[str, Any]] = {
    "paper": {
        "train": {**PAPER_TRAIN, "latent_size": 128, "extractor": {"weights": "env", "precision": "float32"}},
        "sweep": {"sizes": list(SWEEP_SIZES)},
        "analysis": {"latent_sizes": [128, 2048]},
    },
    "desk": {
        "train": {
            **DESK_TRAIN,
            "latent_size": 32,
            "extractor": {"weights": "random", "precision": "bfloat16", "compile": True},
        },
        "sweep": {"sizes": [4, 32, 256]},
        # random extractor features are ~100x smaller than pretrained VGG ones; at beta=1 the KL term wins
        # and the posterior collapses, so the KL weight is scaled down with them
        "vae": {"kl_weight": 1e-3},
    },
}

DATASET_PRESETS = {"paper": PAPER_COUNTS, "desk": DESK_COUNTS}


@dataclass
class DatasetConfig:
    kind: str = "synthetic"  # or "directory"
    n_normal: int = DESK_COUNTS["n_normal"]
    n_glaucoma: int = DESK_COUNTS["n_glaucoma"]
    split_ratio: float = 0.2
    overlap: bool = False
    image_size: int = 128
    path: str = ""  # synthetic: output directory (default <run_dir>/data); directory: input root

    def __post_init__(self):
        if self.kind not in ("synthetic", "directory"):
            raise ConfigError(f"dataset.kind must be 'synthetic' or 'directory', got {self.kind!r}")
        if self.kind == "synthetic" and (self.n_normal < 1 or self.n_glaucoma < 1):
            raise ConfigError("dataset.n_normal and dataset.n_glaucoma must be >= 1")
        if not 0 < self.split_ratio < 1:
            raise ConfigError("dataset.split_ratio must be in (0, 1)")
        if self.kind == "directory":
            if not self.path:
                raise ConfigError("dataset.path is required for kind='directory'")
            if not Path(self.path).is_dir():
                raise ConfigError(f"dataset.path does not exist: {self.path}")


@dataclass
class AnalysisConfig:
    topk_ratios: list[float] = field(default_factory=lambda: list(PAPER_TOPK_RATIOS))
    n_neighbors: int = UMAP_DEFAULTS["n_neighbors"]
    min_dist: float = UMAP_DEFAULTS["min_dist"]
    latent_sizes: list[int] = field(default_factory=list)  # empty: every swept size

    def __post_init__(self):
        for r in self.topk_ratios:
            if not 0 < r <= 1:
                raise ConfigError(f"analysis.topk_ratios entries must be in (0, 1], got {r}")
        if self.n_neighbors < 2:
            raise ConfigError("analysis.n_neighbors must be >= 2")
        _check_sizes(self.latent_sizes, "analysis.latent_sizes")


@dataclass
class ClassifyConfig:
    split_ratio: float = TEST_SPLIT
    folds: int = N_FOLDS
    grid: list[SvcParams] = field(default_factory=default_grid)

    def __post_init__(self):
        if not 0 < self.split_ratio < 1:
            raise ConfigError("classify.split_ratio must be in (0, 1)")
        if self.folds < 2:
            raise ConfigError("classify.folds must be >= 2")
        try:
            self.grid = [g if isinstance(g, SvcParams) else SvcParams(**g) for g in self.grid]
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"classify.grid: {exc}") from None
        if not self.grid:
            raise ConfigError("classify.grid must be non-empty")


@dataclass
class RunConfig:
    name: str = "desk"
    preset: str = "desk"
    seed: int = 0
    output_root: str = "runs"
    dataset: DatasetConfig | None = None
    train: TrainConfig = field(default_factory=TrainConfig)
    latent_size: int = 32
    vae: dict = field(default_factory=dict)
    sweep: list[int] = field(default_factory=lambda: [4, 32, 256])
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)
    classify: ClassifyConfig = field(default_factory=ClassifyConfig)

    def vae_config(self, latent_size: int | None = None) -> VaeConfig:
        return VaeConfig(latent_size=latent_size or self.latent_size, **self.vae)

    @property
    def analysis_sizes(self) -> list[int]:
        return list(self.analysis.latent_sizes) or list(self.sweep)

    def require_dataset(self) -> DatasetConfig:
        if self.dataset is None:
            raise ConfigError("config has no [dataset] section")
        return self.dataset

    def require_synthetic(self) -> DatasetConfig:
        ds = self.require_dataset()
        if ds.kind != "synthetic":
            raise ConfigError("config has no synthetic [dataset] section (kind must be 'synthetic')")
        return ds

    def run_dir(self, override: str | Path | None = None) -> Path:
        if override:
            return Path(override)
        root = os.environ.get(OUTPUT_ROOT_ENV) or self.output_root
        return Path(root) / self.name


def _check_sizes(sizes, key):
    bad = [s for s in sizes if s not in SWEEP_SIZES]
    if bad:
        raise ConfigError(f"{key}: invalid latent sizes {bad}; allowed {list(SWEEP_SIZES)}")


def _deep_merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _only_keys(d: dict, allowed, section: str) -> None:
    unknown = sorted(set(d) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown key(s) in {section}: {', '.join(unknown)}")


def _field_names(cls) -> list[str]:
    return [f.name for f in dataclasses.fields(cls)]


def build_config(doc: dict, preset: str | None = None, seed: int | None = None) -> RunConfig:
    """Turn a parsed document into a validated :class:`RunConfig`."""
    doc = copy.deepcopy(doc)
    preset = preset or doc.get("preset") or "desk"
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    merged = _deep_merge(PRESETS[preset], doc)
    merged["preset"] = preset
    if seed is not None:
        merged["seed"] = seed
    _only_keys(merged, ["name", "preset", "seed", "output_root", "dataset", "train", "vae", "sweep", "analysis", "classify"], "top level")

    try:
        run_seed = int(merged.get("seed", 0))
        dataset = None
        if "dataset" in merged:
            ds = merged["dataset"]
            if "preset_counts" in ds:
                counts = DATASET_PRESETS.get(ds.pop("preset_counts"))
                if counts is None:
                    raise ConfigError(f"dataset.preset_counts must be one of {sorted(DATASET_PRESETS)}")
                ds = {**counts, **ds}
            _only_keys(ds, _field_names(DatasetConfig), "[dataset]")
            dataset = DatasetConfig(**ds)

        tr = dict(merged.get("train", {}))
        latent_size = int(tr.pop("latent_size", 32))
        ext = tr.pop("extractor", {})
        _only_keys(tr, [f for f in _field_names(TrainConfig) if f != "extractor"], "[train]")
        _only_keys(ext, _field_names(ExtractorConfig), "[train.extractor]")
        tr.setdefault("seed", run_seed)
        train = TrainConfig(**tr, extractor=ExtractorConfig(**ext))

        vae = dict(merged.get("vae", {}))
        _only_keys(vae, ["encoder_widths", "decoder_widths", "kl_weight", "image_size", "leaky_slope"], "[vae]")
        sweep_sec = merged.get("sweep", {})
        _only_keys(sweep_sec, ["sizes"], "[sweep]")
        sizes = [int(s) for s in sweep_sec.get("sizes", [])]
        if not sizes:
            raise ConfigError("[sweep] sizes must be non-empty")
        _check_sizes(sizes, "[sweep] sizes")
        _check_sizes([latent_size], "train.latent_size")

        an = merged.get("analysis", {})
        _only_keys(an, _field_names(AnalysisConfig), "[analysis]")
        analysis = AnalysisConfig(**an)
        cl = merged.get("classify", {})
        _only_keys(cl, _field_names(ClassifyConfig), "[classify]")
        classify = ClassifyConfig(**cl)

        cfg = RunConfig(
            name=str(merged.get("name", preset)),
            preset=preset,
            seed=run_seed,
            output_root=str(merged.get("output_root", "runs")),
            dataset=dataset,
            train=train,
            latent_size=latent_size,
            vae=vae,
            sweep=sizes,
            analysis=analysis,
            classify=classify,
        )
        cfg.vae_config()  # validates widths / image size against the latent size
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def load_config(path: str | Path | None, preset: str | None = None, seed: int | None = None) -> RunConfig:
    doc: dict = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            with open(path, "rb") as fh:
                doc = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    return build_config(doc, preset=preset, seed=seed)
