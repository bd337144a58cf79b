import dataclasses

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from dfcvae import train as tr
from dfcvae.data import build_synthetic_dataset
from dfcvae.model import DfcVae, ExtractorConfig, VaeConfig
from dfcvae.train import TrainConfig, TrainHistory

TINY_VAE = VaeConfig(latent_size=4, encoder_widths=(4, 8), image_size=16)
IDENTITY = ExtractorConfig(weights="identity")


def tiny_train(**kw):
    base = dict(epochs=3, batch_size=16, lr=1e-3, scheduler_step=2, scheduler_gamma=0.5, seed=0, extractor=IDENTITY)
    return TrainConfig(**{**base, **kw})


@pytest.fixture(scope="module")
def tiny_data():
    return build_synthetic_dataset(20, 20, 0.2, 0, size=16)


class TestConfig:
    def test_full_scale_schedule(self):
        cfg = TrainConfig(**tr.PAPER_TRAIN)
        lrs = [cfg.lr_at(e) for e in range(300)]
        assert all(lr == pytest.approx(1e-3) for lr in lrs[:140])
        assert all(lr == pytest.approx(1e-4) for lr in lrs[140:280])
        assert all(lr == pytest.approx(1e-5) for lr in lrs[280:])

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 50), st.floats(0.01, 1.0), st.floats(1e-5, 1.0), st.integers(0, 200))
    def test_lr_at_matches_torch_step_lr(self, step, gamma, lr0, epoch):
        cfg = TrainConfig(lr=lr0, scheduler_step=step, scheduler_gamma=gamma)
        opt = torch.optim.SGD([torch.zeros(1, requires_grad=True)], lr=lr0)
        sched = torch.optim.lr_scheduler.StepLR(opt, step_size=step, gamma=gamma)
        for _ in range(epoch):
            opt.step()
            sched.step()
        assert cfg.lr_at(epoch) == pytest.approx(opt.param_groups[0]["lr"], rel=1e-9)

    @pytest.mark.parametrize(
        "kw", [dict(epochs=0), dict(lr=0.0), dict(scheduler_gamma=0.0), dict(scheduler_gamma=1.5), dict(flip_prob=1.1), dict(batch_size=0)]
    )
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw)

    def test_presets(self):
        assert TrainConfig(**tr.DESK_TRAIN).epochs == 30 and TrainConfig(**tr.DESK_TRAIN).scheduler_step == 14
        assert tr.ADAM_BETAS == (0.9, 0.999) and tr.ADAM_EPS == 1e-8


class TestTrainOne:
    def test_single_epoch(self, tiny_data, tmp_path):
        ckpt, hist = tr.train_one(tiny_train(epochs=1), TINY_VAE, tiny_data, tmp_path)
        assert len(hist.records) == 1 and hist.best_epoch == 0
        assert ckpt.is_file() and (tmp_path / "history.csv").is_file()

    def test_history_and_checkpoint(self, tiny_data, tmp_path):
        cfg = tiny_train(epochs=5)
        ckpt, hist = tr.train_one(cfg, TINY_VAE, tiny_data, tmp_path)
        assert [r.epoch for r in hist.records] == list(range(5))
        assert [r.lr for r in hist.records] == pytest.approx([cfg.lr_at(e) for e in range(5)])
        assert hist.best.val_total == min(r.val_total for r in hist.records)
        # reloaded best checkpoint reproduces the recorded minimum
        again = tr.evaluate_checkpoint(ckpt, tiny_data, IDENTITY.build_loss(), cfg.batch_size)
        assert again["total"] == pytest.approx(hist.best.val_total, rel=1e-5)
        _, blob = tr.load_checkpoint(ckpt)
        assert blob["epoch"] == hist.best_epoch
        read = TrainHistory.read_csv(tmp_path / "history.csv")
        assert read.records == hist.records

    def test_bitwise_deterministic(self, tiny_data, tmp_path):
        tr.train_one(tiny_train(), TINY_VAE, tiny_data, tmp_path / "a")
        tr.train_one(tiny_train(), TINY_VAE, tiny_data, tmp_path / "b")
        assert (tmp_path / "a/history.csv").read_bytes() == (tmp_path / "b/history.csv").read_bytes()
        tr.train_one(tiny_train(seed=1), TINY_VAE, tiny_data, tmp_path / "c")
        assert (tmp_path / "a/history.csv").read_bytes() != (tmp_path / "c/history.csv").read_bytes()

    def test_non_finite_loss_names_epoch_and_batch(self, tiny_data, tmp_path):
        class Poison(torch.nn.Module):
            def forward(self, x):
                return x * float("nan"), x, x

        with pytest.raises(tr.TrainingDivergedError, match="epoch 0 batch 0"):
            tr.train_one(tiny_train(), TINY_VAE, tiny_data, tmp_path, criterion=Poison())

    def test_empty_split_rejected(self, tiny_data, tmp_path):
        empty = dataclasses.replace(tiny_data, validation=[])
        with pytest.raises(ValueError):
            tr.train_one(tiny_train(), TINY_VAE, empty, tmp_path)

    def test_derived_seeds_distinct(self):
        s = tr.derived_seeds(0, 32)
        assert len(set(s.values())) == 4
        assert s == tr.derived_seeds(0, 32) and s != tr.derived_seeds(0, 64)


class TestCheckpoint:
    def test_missing(self, tmp_path):
        with pytest.raises(tr.CheckpointError):
            tr.load_checkpoint(tmp_path / "none.bin")

    def test_corrupt(self, tmp_path):
        (tmp_path / "bad.bin").write_bytes(b"not a checkpoint")
        with pytest.raises(tr.CheckpointError):
            tr.load_checkpoint(tmp_path / "bad.bin")

    def test_shape_mismatch_on_reconstruct(self, tiny_data, tmp_path):
        net = DfcVae(VaeConfig(latent_size=4, encoder_widths=(4, 8), image_size=32))
        tr.save_checkpoint(tmp_path / "c.bin", net, 0, {"total": 1.0})
        with pytest.raises(tr.CheckpointError):
            tr.reconstruct_validation(tmp_path / "c.bin", tiny_data)


class TestReconstruction:
    def test_records_and_determinism(self, tiny_data):
        net = DfcVae(TINY_VAE)
        a = tr.reconstruct_validation(net, tiny_data)
        b = tr.reconstruct_validation(net, tiny_data)
        assert len(a) == len(tiny_data.validation)
        assert all(np.array_equal(x.reconstruction, y.reconstruction) and x.ssim == y.ssim for x, y in zip(a, b))
        assert a[0].mask.shape == (16, 16) and a[0].reconstruction.shape == (16, 16, 3)

    def test_training_improves_ssim_over_untrained(self, tiny_data, tmp_path):
        untrained = np.mean([r.ssim for r in tr.reconstruct_validation(DfcVae(TINY_VAE), tiny_data)])
        ckpt, _ = tr.train_one(tiny_train(epochs=15, lr=3e-3, scheduler_step=100), TINY_VAE, tiny_data, tmp_path)
        trained = np.mean([r.ssim for r in tr.reconstruct_validation(ckpt, tiny_data)])
        assert trained > untrained


class TestSweep:
    def test_two_sizes(self, tiny_data, tmp_path):
        rep = tr.sweep(tiny_train(epochs=1), [2, 2048], tiny_data, tmp_path, vae_base=TINY_VAE)
        assert [r.latent_size for r in rep.records] == [2, 2048]
        assert all(not r.error and np.isfinite(r.mean_ssim) for r in rep.records)
        for name in ("sweep_report.csv", "figures/loss_curves.png", "figures/ssim_vs_nl.png",
                     "nl2/checkpoint.bin", "nl2048/history.csv"):
            assert (tmp_path / name).is_file()
        assert tr.SweepReport.read_csv(tmp_path / "sweep_report.csv").records == rep.records

    def test_failure_recorded_and_sweep_continues(self, tiny_data, tmp_path, monkeypatch):
        real = tr.train_one

        def flaky(config, vae_config, *a, **k):
            if vae_config.latent_size == 4:
                raise RuntimeError("boom")
            return real(config, vae_config, *a, **k)

        monkeypatch.setattr(tr, "train_one", flaky)
        rep = tr.sweep(tiny_train(epochs=1), [4, 8], tiny_data, tmp_path, vae_base=TINY_VAE)
        assert "boom" in rep.records[0].error and not rep.records[1].error

    @pytest.mark.parametrize("sizes", [[], [100], [1], [4096]])
    def test_invalid_sweep_sets(self, tiny_data, tmp_path, sizes):
        with pytest.raises(ValueError):
            tr.sweep(tiny_train(), sizes, tiny_data, tmp_path)
