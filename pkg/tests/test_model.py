import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from dfcvae import model as m
from dfcvae.model import DfcVae, ExtractorConfig, ShapeError, VaeConfig


def kl_closed_form(mu, logvar):
    """Scalar loop over -1/2 * sum(1 + logvar - mu^2 - exp(logvar))."""
    return -0.5 * sum(1.0 + lv - u * u - math.exp(lv) for u, lv in zip(mu, logvar))


def eq1_loss(fa, fb):
    """Per-layer sum of squared differences / (2 C W H), per item, then batch mean."""
    total = 0.0
    for a, b in zip(fa, fb):
        a, b = a.numpy(), b.numpy()
        n, c, h, w = a.shape
        per_item = [((a[i] - b[i]) ** 2).sum() / (2 * c * w * h) for i in range(n)]
        total += sum(per_item) / n
    return total


TINY = VaeConfig(latent_size=4, encoder_widths=(4, 8), image_size=16, seed=0)


class TestKl:
    def test_prior_is_zero(self):
        assert m.kl_divergence(torch.zeros(5), torch.zeros(5)).item() == 0.0

    def test_hand_values(self):
        assert m.kl_divergence(torch.tensor([1.0], dtype=torch.float64), torch.tensor([0.0], dtype=torch.float64)).item() == 0.5
        val = m.kl_divergence(torch.tensor([0.0], dtype=torch.float64), torch.tensor([math.log(4.0)], dtype=torch.float64))
        assert val.item() == pytest.approx(1.5 - math.log(2.0), abs=1e-12)

    def test_matches_closed_form_on_random_vectors(self):
        rng = np.random.default_rng(0)
        for _ in range(25):
            d = int(rng.integers(1, 40))
            mu, lv = rng.normal(0, 2, d), rng.normal(0, 1.5, d)
            got = m.kl_divergence(torch.tensor(mu), torch.tensor(lv)).item()
            assert got == pytest.approx(kl_closed_form(mu, lv), abs=1e-9)

    def test_batch_is_mean_of_items(self):
        rng = np.random.default_rng(1)
        mu, lv = rng.normal(size=(6, 3)), rng.normal(size=(6, 3))
        expected = np.mean([kl_closed_form(a, b) for a, b in zip(mu, lv)])
        assert m.kl_divergence(torch.tensor(mu), torch.tensor(lv)).item() == pytest.approx(expected, abs=1e-12)

    @settings(max_examples=100)
    @given(st.lists(st.tuples(st.floats(-10, 10), st.floats(-8, 8)), min_size=1, max_size=16))
    def test_non_negative_zero_only_at_prior(self, pairs):
        mu = torch.tensor([p[0] for p in pairs], dtype=torch.float64)
        lv = torch.tensor([p[1] for p in pairs], dtype=torch.float64)
        kl = m.kl_divergence(mu, lv).item()
        assert kl >= 0.0
        if kl == 0.0:  # tiny mu underflows when squared, so equality is up to tolerance
            assert torch.all(mu.abs() < 1e-7) and torch.all(lv.abs() < 1e-7)
        if mu.abs().max() > 1e-3 or lv.abs().max() > 1e-3:
            assert kl > 0.0

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            m.kl_divergence(torch.zeros(3), torch.zeros(4))


class TestFeatureLoss:
    def test_constant_offset_one_layer(self):
        for d in (0.5, 1.0, 3.0):
            a = torch.zeros(2, 4, 5, 6, dtype=torch.float64)
            assert m.feature_stack_loss([a], [a + d]).item() == pytest.approx(d * d / 2, abs=1e-12)

    def test_three_layers_unit_offset(self):
        fa = [torch.zeros(3, c, s, s, dtype=torch.float64) for c, s in ((2, 8), (4, 4), (8, 2))]
        fb = [f + 1 for f in fa]
        assert m.feature_stack_loss(fa, fb).item() == pytest.approx(1.5, abs=1e-12)

    def test_matches_direct_evaluation(self):
        g = torch.Generator().manual_seed(0)
        for _ in range(10):
            shapes = [(3, 4, 6, 5), (3, 8, 3, 3), (3, 2, 7, 7)]
            fa = [torch.randn(s, generator=g, dtype=torch.float64) for s in shapes]
            fb = [torch.randn(s, generator=g, dtype=torch.float64) for s in shapes]
            assert m.feature_stack_loss(fa, fb).item() == pytest.approx(eq1_loss(fa, fb), abs=1e-9)

    def test_identity_and_symmetry(self):
        ext = m.IdentityFeatures()
        x = torch.rand(2, 3, 16, 16, dtype=torch.float64)
        y = torch.rand(2, 3, 16, 16, dtype=torch.float64)
        assert m.feature_perceptual_loss(x, x, ext).item() == 0.0
        assert m.feature_perceptual_loss(x, y, ext).item() == pytest.approx(m.feature_perceptual_loss(y, x, ext).item(), abs=1e-15)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            m.feature_perceptual_loss(torch.rand(1, 3, 8, 8), torch.rand(1, 3, 8, 9), m.IdentityFeatures())
        with pytest.raises(ValueError):
            m.feature_stack_loss([torch.zeros(1, 2, 3, 3)], [torch.zeros(1, 2, 3, 4)])

    def test_criterion_matches_functional_form(self):
        ext = m.random_vgg16_prefix(seed=1)
        crit = m.PerceptualLoss(ext)
        x, y = torch.rand(2, 3, 32, 32), torch.rand(2, 3, 32, 32)
        assert crit(y, crit.target(x)).item() == pytest.approx(m.feature_perceptual_loss(x, y, ext).item(), rel=1e-6)


class TestTotalLoss:
    def test_all_zero(self):
        x = torch.rand(2, 3, 8, 8)
        lb = m.total_loss(x, x, torch.zeros(2, 4), torch.zeros(2, 4), m.IdentityFeatures(), 1.0)
        assert lb.total.item() == 0.0

    def test_beta_zero_is_feature_loss(self):
        x, y = torch.rand(2, 3, 8, 8), torch.rand(2, 3, 8, 8)
        lb = m.total_loss(x, y, torch.ones(2, 4), torch.ones(2, 4), m.IdentityFeatures(), 0.0)
        assert lb.total.item() == lb.feature.item()

    def test_injected_values(self):
        lb = m.combine_losses(torch.tensor(1.5), torch.tensor(0.5), 1.0)
        assert lb.total.item() == 2.0
        assert lb.item() == {"feature": 1.5, "kl": 0.5, "total": 2.0}


class TestReparameterize:
    def test_zero_noise_is_mean(self):
        mu, lv = torch.randn(3, 4), torch.randn(3, 4)
        assert torch.equal(m.reparameterize(mu, lv, eps=torch.zeros(3, 4)), mu)

    def test_unit_shift(self):
        mu = torch.randn(3, 4)
        assert torch.allclose(m.reparameterize(mu, torch.zeros(3, 4), eps=torch.ones(3, 4)), mu + 1)

    def test_monte_carlo_moments(self):
        g = torch.Generator().manual_seed(0)
        z = m.reparameterize(torch.zeros(100_000, 4, dtype=torch.float64), torch.zeros(100_000, 4, dtype=torch.float64), g)
        assert (z.mean(0).abs() < 0.02).all()
        var = z.var(0)
        assert ((var > 0.98) & (var < 1.02)).all()

    def test_seeded(self):
        mu, lv = torch.zeros(2, 3), torch.zeros(2, 3)
        a = m.reparameterize(mu, lv, torch.Generator().manual_seed(5))
        b = m.reparameterize(mu, lv, torch.Generator().manual_seed(5))
        assert torch.equal(a, b)


class TestVae:
    def test_config_validation(self):
        with pytest.raises(ValueError):
            VaeConfig(latent_size=100)
        with pytest.raises(ValueError):
            VaeConfig(encoder_widths=())
        assert VaeConfig().decoder_widths == (512, 256, 128, 64, 32)
        assert VaeConfig().bottleneck_hw == 4

    def test_encode_shapes(self):
        net = DfcVae(VaeConfig(latent_size=128)).eval()
        x = torch.rand(4, 3, 128, 128)
        mu, lv = net.encode(x)
        assert mu.shape == (4, 128) and lv.shape == (4, 128)
        mu2, _ = DfcVae(VaeConfig(latent_size=2)).eval().encode(x)
        assert mu2.shape == (4, 2)

    def test_identical_inputs_identical_rows(self):
        net = DfcVae(VaeConfig(latent_size=8)).eval()
        x = torch.rand(1, 3, 128, 128).repeat(3, 1, 1, 1)
        mu, lv = net.encode(x)
        assert torch.equal(mu[0], mu[2]) and torch.equal(lv[1], lv[2])

    def test_decode_range_and_shape(self):
        net = DfcVae(VaeConfig(latent_size=128)).eval()
        z = torch.empty(3, 128).uniform_(-1e6, 1e6)
        with torch.no_grad():
            out = net.decode(z)
            one = net.decode(torch.randn(1, 128))
        assert one.shape == (1, 3, 128, 128)
        assert out.min() >= 0 and out.max() <= 1

    @pytest.mark.parametrize("nl", m.SWEEP_SIZES)
    def test_round_trip_shape_every_sweep_size(self, nl):
        net = DfcVae(VaeConfig(latent_size=nl, encoder_widths=(4, 4, 4, 4, 4))).eval()
        with torch.no_grad():
            x_rec, mu, _ = net(torch.rand(2, 3, 128, 128), torch.Generator().manual_seed(0))
        assert x_rec.shape == (2, 3, 128, 128) and mu.shape == (2, nl)

    def test_shape_errors(self):
        net = DfcVae(VaeConfig(latent_size=4)).eval()
        with pytest.raises(ShapeError):
            net.encode(torch.rand(1, 3, 64, 64))
        with pytest.raises(ShapeError):
            net.decode(torch.rand(1, 5))

    def test_seeded_init(self):
        a, b = DfcVae(TINY), DfcVae(TINY)
        assert all(torch.equal(p, q) for p, q in zip(a.parameters(), b.parameters()))


def test_gradient_check_central_differences():
    torch.manual_seed(0)
    net = DfcVae(TINY).double().train()
    x = torch.rand(3, 3, 16, 16, dtype=torch.float64, generator=torch.Generator().manual_seed(1))
    eps = torch.randn(3, 4, dtype=torch.float64, generator=torch.Generator().manual_seed(2))
    ext = m.IdentityFeatures()

    def loss():
        mu, lv = net.encode(x)
        x_rec = net.decode(m.reparameterize(mu, lv, eps=eps))
        return m.total_loss(x, x_rec, mu, lv, ext, 1.0).total

    net.zero_grad()
    loss().backward()
    params = [p for p in net.parameters()]
    rng = np.random.default_rng(3)
    h = 1e-4
    checked = 0
    for _ in range(60):
        p = params[rng.integers(len(params))]
        idx = tuple(int(rng.integers(s)) for s in p.shape)
        analytic = p.grad[idx].item()
        with torch.no_grad():
            orig = p[idx].item()
            p[idx] = orig + h
            up = loss().item()
            p[idx] = orig - h
            down = loss().item()
            p[idx] = orig
        numeric = (up - down) / (2 * h)
        denom = max(abs(analytic), abs(numeric), 1e-6)
        assert abs(analytic - numeric) / denom < 1e-3, (idx, analytic, numeric)
        checked += 1
    assert checked >= 50


class TestExtractor:
    def test_golden_dims_128(self):
        ext = m.random_vgg16_prefix(seed=0)
        feats = m.extract_features(ext, torch.rand(2, 3, 128, 128))
        assert [tuple(f.shape[1:]) for f in feats] == [(64, 128, 128), (64, 128, 128), (128, 64, 64)]
        assert all(f.shape[0] == 2 for f in feats)

    def test_deterministic_and_frozen(self):
        ext = m.random_vgg16_prefix(seed=0)
        ext.train()
        assert not ext.training
        assert not any(p.requires_grad for p in ext.parameters())
        x = torch.rand(1, 3, 32, 32)
        assert all(torch.equal(a, b) for a, b in zip(ext(x), ext(x.clone())))

    def test_bf16_close_to_fp32(self):
        x = torch.rand(2, 3, 32, 32)
        y = torch.rand(2, 3, 32, 32)
        ref = m.feature_perceptual_loss(x, y, m.random_vgg16_prefix(0))
        fast = m.PerceptualLoss(m.random_vgg16_prefix(0, torch.bfloat16))
        assert fast(y, fast.target(x)).item() == pytest.approx(ref.item(), rel=0.05)

    def test_missing_weights(self, tmp_path, monkeypatch):
        with pytest.raises(m.ExtractorInitError):
            ExtractorConfig(weights=str(tmp_path / "nope.pth")).build()
        monkeypatch.delenv(m.WEIGHTS_ENV, raising=False)
        with pytest.raises(m.ExtractorInitError):
            ExtractorConfig(weights="env").build()

    def test_loads_torchvision_layout(self, tmp_path, monkeypatch):
        src = m.random_vgg16_prefix(seed=3)
        state = {}
        for name, key in zip(("conv1_1", "conv1_2", "conv2_1"), m.VGG16_CONV_KEYS):
            conv = getattr(src, name)
            state[f"{key}.weight"], state[f"{key}.bias"] = conv.weight.clone(), conv.bias.clone()
        torch.save(state, tmp_path / "vgg.pth")
        monkeypatch.setenv(m.WEIGHTS_ENV, str(tmp_path / "vgg.pth"))
        loaded = ExtractorConfig(weights="env").build()
        x = torch.rand(1, 3, 16, 16)
        assert all(torch.equal(a, b) for a, b in zip(src(x), loaded(x)))

    def test_wrong_weight_shape(self, tmp_path):
        torch.save({"features.0.weight": torch.zeros(8, 3, 3, 3), "features.0.bias": torch.zeros(8)}, tmp_path / "bad.pth")
        with pytest.raises(m.ExtractorInitError):
            m.load_vgg16_prefix(tmp_path / "bad.pth")

    def test_stack_depth_enforced(self):
        with pytest.raises(ShapeError):
            m.extract_features(lambda x: (x, x), torch.rand(1, 3, 8, 8))
