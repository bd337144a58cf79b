"""Pilot: desk training at nl=32 for a few KL weights, with the random extractor.

Prints per-beta validation loss ratio, mean SSIM, final KL and the held-out
AUC of the SVC optimum on the validation latents.  This is the run used to
choose the desk preset's KL weight.

    python3 scripts/kl_weight_pilot.py --betas 1.0 0.001 --out /tmp/kl_pilot
"""
import argparse
import dataclasses
from pathlib import Path

import numpy as np

from dfcvae import classify as cls
from dfcvae import latent as lat
from dfcvae.config import build_config
from dfcvae.data import DESK_COUNTS, build_synthetic_dataset
from dfcvae.train import reconstruct_validation, train_one


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--betas", type=float, nargs="+", default=[1.0, 1e-3])
    p.add_argument("--latent-size", type=int, default=32)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, default=Path("runs/kl_pilot"))
    args = p.parse_args()

    cfg = build_config({}, preset="desk", seed=args.seed)
    train = cfg.train if args.epochs is None else dataclasses.replace(cfg.train, epochs=args.epochs)
    data = build_synthetic_dataset(DESK_COUNTS["n_normal"], DESK_COUNTS["n_glaucoma"], 0.2, args.seed)
    criterion = train.extractor.build_loss()
    for beta in args.betas:
        vae = dataclasses.replace(cfg.vae_config(args.latent_size), kl_weight=beta)
        ckpt, hist = train_one(train, vae, data, args.out / f"beta{beta:g}", criterion)
        ssim = np.mean([r.ssim for r in reconstruct_validation(ckpt, data)])
        auc = cls.train_test_evaluate(lat.encode_dataset(ckpt, data.validation), cls.PAPER_OPTIMUM, 0.3, args.seed).auc
        last = hist.records[-1]
        print(
            f"beta={beta:g}: val ratio {last.val_total / hist.records[0].val_total:.3f}, "
            f"feature {last.val_feat:.4f}, KL {last.val_kl:.3f}, SSIM {ssim:.4f}, AUC {auc:.3f}"
        )


if __name__ == "__main__":
    main()
