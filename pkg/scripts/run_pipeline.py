"""Run every stage (generate, sweep, analyze, classify, report) for one config.

    python3 scripts/run_pipeline.py --config configs/desk.toml --run-dir runs/desk
"""
import argparse
import sys
import time
from pathlib import Path

from dfcvae.cli import PIPELINE, run_pipeline
from dfcvae.config import load_config


def main() -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--config", type=Path, default=Path(__file__).resolve().parents[1] / "configs" / "desk.toml")
    p.add_argument("--run-dir", type=Path, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--stages", nargs="+", choices=PIPELINE, default=list(PIPELINE))
    args = p.parse_args()
    run_dir = args.run_dir or load_config(args.config, seed=args.seed).run_dir()
    start = time.perf_counter()
    codes = run_pipeline(args.config, run_dir, seed=args.seed, stages=args.stages)
    print(f"run directory: {run_dir}")
    for stage, code in codes.items():
        print(f"{stage:>9}: exit {code}")
    print(f"elapsed {(time.perf_counter() - start) / 60:.1f} min")
    return max(codes.values(), default=0)


if __name__ == "__main__":
    sys.exit(main())
