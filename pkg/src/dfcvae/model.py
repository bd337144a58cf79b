"""Deep-feature-consistent VAE: conv encoder to a Gaussian posterior,
reparameterized sampling, transposed-conv decoder, KL term and the
feature perceptual loss computed on a frozen VGG16 prefix."""
from __future__ import annotations

import logging
import math
import os
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import NamedTuple, Sequence

import torch
import torch.nn.functional as F
from torch import nn

log = logging.getLogger(__name__)

SWEEP_SIZES = tuple(2**i for i in range(1, 12))
WEIGHTS_ENV = "DFCVAE_EXTRACTOR_WEIGHTS"

# torchvision vgg16 `features` indices of conv1_1, conv1_2, conv2_1
VGG16_CONV_KEYS = ("features.0", "features.2", "features.5")
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


class ShapeError(ValueError):
    pass


class ExtractorInitError(RuntimeError):
    pass


@dataclass
class VaeConfig:
    latent_size: int = 128
    encoder_widths: Sequence[int] = (32, 64, 128, 256, 512)
    decoder_widths: Sequence[int] | None = None  # None mirrors the encoder
    kl_weight: float = 1.0
    image_size: int = 128
    leaky_slope: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.latent_size not in SWEEP_SIZES:
            raise ValueError(f"latent size must be a power of two in 2..2048, got {self.latent_size}")
        self.encoder_widths = tuple(int(w) for w in self.encoder_widths)
        if self.decoder_widths is None:
            self.decoder_widths = tuple(reversed(self.encoder_widths))
        self.decoder_widths = tuple(int(w) for w in self.decoder_widths)
        if not self.encoder_widths or not self.decoder_widths:
            raise ValueError("channel widths must be non-empty")
        if len(self.decoder_widths) != len(self.encoder_widths):
            raise ValueError("decoder needs one upsampling stage per encoder stage")
        if self.image_size % (2 ** len(self.encoder_widths)):
            raise ValueError(
                f"image size {self.image_size} not divisible by 2^{len(self.encoder_widths)}"
            )
        if self.kl_weight < 0:
            raise ValueError("kl_weight must be >= 0")

    @property
    def bottleneck_hw(self) -> int:
        return self.image_size // 2 ** len(self.encoder_widths)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder_widths"] = list(self.encoder_widths)
        d["decoder_widths"] = list(self.decoder_widths)
        return d


class LossBreakdown(NamedTuple):
    feature: torch.Tensor
    kl: torch.Tensor
    total: torch.Tensor

    def item(self) -> dict[str, float]:
        return {"total": float(self.total), "feature": float(self.feature), "kl": float(self.kl)}


def _init_uniform_(module: nn.Module, generator: torch.Generator) -> None:
    """Fan-in scaled uniform init U(-1/sqrt(fan_in), 1/sqrt(fan_in)) for conv/linear layers."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            fan_in = nn.init._calculate_fan_in_and_fan_out(m.weight)[0]
            if isinstance(m, nn.ConvTranspose2d):
                # weight layout is (in, out, kh, kw); fan-in is in * kh * kw
                fan_in = m.weight.shape[0] * m.weight.shape[2] * m.weight.shape[3]
            bound = 1.0 / math.sqrt(fan_in)
            with torch.no_grad():
                m.weight.uniform_(-bound, bound, generator=generator)
                if m.bias is not None:
                    m.bias.uniform_(-bound, bound, generator=generator)


class DfcVae(nn.Module):
    def __init__(self, config: VaeConfig):
        super().__init__()
        self.config = config
        enc: list[nn.Module] = []
        c_in = 3
        for w in config.encoder_widths:
            enc += [nn.Conv2d(c_in, w, 4, 2, 1), nn.BatchNorm2d(w), nn.LeakyReLU(config.leaky_slope)]
            c_in = w
        self.encoder = nn.Sequential(*enc)
        hw = config.bottleneck_hw
        flat = config.encoder_widths[-1] * hw * hw
        self.fc_mu = nn.Linear(flat, config.latent_size)
        self.fc_logvar = nn.Linear(flat, config.latent_size)

        dw = config.decoder_widths
        self.fc_dec = nn.Linear(config.latent_size, dw[0] * hw * hw)
        dec: list[nn.Module] = []
        for a, b in zip(dw[:-1], dw[1:]):
            dec += [nn.ConvTranspose2d(a, b, 4, 2, 1), nn.BatchNorm2d(b), nn.LeakyReLU(config.leaky_slope)]
        dec += [nn.ConvTranspose2d(dw[-1], 3, 4, 2, 1), nn.Sigmoid()]
        self.decoder = nn.Sequential(*dec)
        _init_uniform_(self, torch.Generator().manual_seed(config.seed))

    @property
    def latent_size(self) -> int:
        return self.config.latent_size

    def encode(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        s = self.config.image_size
        if x.dim() != 4 or tuple(x.shape[1:]) != (3, s, s):
            raise ShapeError(f"expected input of shape (N, 3, {s}, {s}), got {tuple(x.shape)}")
        h = self.encoder(x).flatten(1)
        return self.fc_mu(h), self.fc_logvar(h)

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        if z.dim() != 2 or z.shape[1] != self.latent_size:
            raise ShapeError(f"expected latent of shape (N, {self.latent_size}), got {tuple(z.shape)}")
        hw = self.config.bottleneck_hw
        h = self.fc_dec(z).view(z.shape[0], self.config.decoder_widths[0], hw, hw)
        return self.decoder(h)

    def forward(self, x: torch.Tensor, generator: torch.Generator | None = None, sample: bool = True):
        mu, logvar = self.encode(x)
        z = reparameterize(mu, logvar, generator) if sample else mu
        return self.decode(z), mu, logvar


def reparameterize(
    mu: torch.Tensor,
    logvar: torch.Tensor,
    generator: torch.Generator | None = None,
    eps: torch.Tensor | None = None,
) -> torch.Tensor:
    """z = mu + exp(logvar / 2) * eps with eps ~ N(0, I) (or the supplied ``eps``)."""
    if mu.shape != logvar.shape:
        raise ShapeError(f"mu {tuple(mu.shape)} and logvar {tuple(logvar.shape)} differ")
    if eps is None:
        eps = torch.randn(mu.shape, generator=generator, dtype=mu.dtype, device=mu.device)
    return mu + torch.exp(0.5 * logvar) * eps


def kl_divergence(mu: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    """KL(N(mu, exp(logvar)) || N(0, I)), summed over latent dims and averaged over the batch.

    A 1-D input is treated as a single item.
    """
    if mu.shape != logvar.shape:
        raise ShapeError(f"mu {tuple(mu.shape)} and logvar {tuple(logvar.shape)} differ")
    if mu.dim() == 1:
        mu, logvar = mu[None], logvar[None]
    per_item = -0.5 * torch.sum(1 + logvar - mu.pow(2) - logvar.exp(), dim=1)
    return per_item.mean()


# --- feature extraction ----------------------------------------------------------


class Vgg16Prefix(nn.Module):
    """First three rectified conv layers of VGG16 (conv1_1, conv1_2, conv2_1), frozen.

    With ``compute_dtype=torch.bfloat16`` the convolutions run in bf16 with
    channels-last layout (several times faster on CPU) and the maps are
    returned as float32.
    """

    def __init__(self, compute_dtype: torch.dtype | None = None):
        super().__init__()
        self.conv1_1 = nn.Conv2d(3, 64, 3, padding=1)
        self.conv1_2 = nn.Conv2d(64, 64, 3, padding=1)
        self.conv2_1 = nn.Conv2d(64, 128, 3, padding=1)
        self.register_buffer("mean", torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(IMAGENET_STD).view(1, 3, 1, 1))
        self.compute_dtype = compute_dtype
        self.requires_grad_(False)
        self.eval()

    def train(self, mode: bool = True):
        return super().train(False)

    def finalize(self) -> "Vgg16Prefix":
        """Cast conv weights to the compute dtype once weights are in place."""
        if self.compute_dtype is not None:
            for conv in (self.conv1_1, self.conv1_2, self.conv2_1):
                conv.to(self.compute_dtype).to(memory_format=torch.channels_last)
        return self

    def native_features(self, x: torch.Tensor) -> tuple[torch.Tensor, ...]:
        """Feature maps in the compute dtype."""
        if x.dim() != 4 or x.shape[1] != 3:
            raise ShapeError(f"expected (N, 3, H, W) input, got {tuple(x.shape)}")
        h = (x - self.mean) / self.std
        if self.compute_dtype is not None:
            h = h.to(self.compute_dtype).contiguous(memory_format=torch.channels_last)
        f1 = torch.relu(self.conv1_1(h))
        f2 = torch.relu(self.conv1_2(f1))
        f3 = torch.relu(self.conv2_1(F.max_pool2d(f2, 2)))
        return f1, f2, f3

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, ...]:
        return tuple(_upcast(f) for f in self.native_features(x))


class IdentityFeatures(nn.Module):
    """Three copies of the input; used for gradient checks and pixel-space ablations."""

    def forward(self, x):
        return x, x, x


def load_vgg16_prefix(path: str | Path, compute_dtype: torch.dtype | None = None) -> Vgg16Prefix:
    """Load conv1_1/conv1_2/conv2_1 weights from a torchvision VGG16 state dict file."""
    path = Path(path)
    if not path.is_file():
        raise ExtractorInitError(f"extractor weights file not found: {path}")
    state = torch.load(path, map_location="cpu", weights_only=True)
    if "state_dict" in state:
        state = state["state_dict"]
    ext = Vgg16Prefix(compute_dtype)
    for name, key in zip(("conv1_1", "conv1_2", "conv2_1"), VGG16_CONV_KEYS):
        try:
            w, b = state[f"{key}.weight"], state[f"{key}.bias"]
        except KeyError:
            try:
                w, b = state[f"{name}.weight"], state[f"{name}.bias"]
            except KeyError:
                raise ExtractorInitError(f"{path}: no weights for {name} ({key})") from None
        conv = getattr(ext, name)
        if w.shape != conv.weight.shape:
            raise ExtractorInitError(f"{path}: {name} weight has shape {tuple(w.shape)}")
        with torch.no_grad():
            conv.weight.copy_(w)
            conv.bias.copy_(b)
    return ext.finalize()


def random_vgg16_prefix(seed: int = 0, compute_dtype: torch.dtype | None = None) -> Vgg16Prefix:
    """VGG16 prefix with frozen He-normal weights; stands in when no pretrained file is available."""
    ext = Vgg16Prefix(compute_dtype)
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for conv in (ext.conv1_1, ext.conv1_2, ext.conv2_1):
            fan_in = conv.weight[0].numel()
            conv.weight.normal_(0.0, math.sqrt(2.0 / fan_in), generator=g)
            conv.bias.zero_()
    return ext.finalize()


@dataclass
class ExtractorConfig:
    """``weights`` is a file path, ``"env"`` (read ``DFCVAE_EXTRACTOR_WEIGHTS``),
    ``"random"`` (seeded frozen He init) or ``"identity"``."""

    weights: str = "env"
    precision: str = "float32"  # or "bfloat16"
    compile: bool = False
    seed: int = 0

    def build(self) -> nn.Module:
        dtype = {"float32": None, "bfloat16": torch.bfloat16}.get(self.precision, "bad")
        if dtype == "bad":
            raise ValueError(f"unknown extractor precision {self.precision!r}")
        if self.weights == "identity":
            return IdentityFeatures()
        if self.weights == "random":
            return random_vgg16_prefix(self.seed, dtype)
        path = self.weights
        if path == "env":
            path = os.environ.get(WEIGHTS_ENV, "")
            if not path:
                raise ExtractorInitError(
                    f"no extractor weights: set {WEIGHTS_ENV} or use weights='random'"
                )
        return load_vgg16_prefix(path, dtype)

    def build_loss(self) -> "PerceptualLoss":
        return PerceptualLoss(self.build(), compile=self.compile)


def extract_features(extractor: nn.Module, x: torch.Tensor) -> tuple[torch.Tensor, ...]:
    feats = tuple(extractor(x))
    if len(feats) != 3:
        raise ShapeError(f"extractor must return three feature maps, got {len(feats)}")
    return feats


def _upcast(t: torch.Tensor) -> torch.Tensor:
    return t.to(torch.promote_types(t.dtype, torch.float32))


def feature_stack_loss(fa: Sequence[torch.Tensor], fb: Sequence[torch.Tensor]) -> torch.Tensor:
    """Sum over layers of ``1/(2 C W H) * sum (fa - fb)^2``, averaged over the batch."""
    if len(fa) != len(fb):
        raise ValueError(f"feature stacks differ in depth: {len(fa)} vs {len(fb)}")
    total = _upcast(fa[0]).new_zeros(())
    for a, b in zip(fa, fb):
        if a.shape != b.shape:
            raise ValueError(f"feature map shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
        # every item has C*W*H entries, so the global mean equals the batch mean of per-item means
        total = total + 0.5 * (_upcast(a) - _upcast(b)).pow(2).mean()
    return total


def feature_perceptual_loss(
    x: torch.Tensor,
    x_rec: torch.Tensor,
    extractor: nn.Module,
    x_features: Sequence[torch.Tensor] | None = None,
) -> torch.Tensor:
    if x.shape != x_rec.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(x_rec.shape)}")
    if x_features is None:
        with torch.no_grad():
            x_features = extract_features(extractor, x)
    return feature_stack_loss(x_features, extract_features(extractor, x_rec))


def _with_eager_fallback(compiled, eager, what: str):
    state = {"fn": compiled}

    def call(*args):
        try:
            return state["fn"](*args)
        except Exception:
            if state["fn"] is eager:
                raise
            log.warning("torch.compile failed for %s; continuing in eager mode", what, exc_info=True)
            state["fn"] = eager
            return eager(*args)

    return call


class PerceptualLoss:
    """Feature loss of reconstructions against precomputed target features.

    With ``compile=True`` the extractor forward and the loss are compiled
    (shape-specialized), which fuses the elementwise work on the large
    full-resolution maps; compilation failures fall back to eager mode.
    """

    def __init__(self, extractor: nn.Module, compile: bool = False):
        self.extractor = extractor
        native = getattr(extractor, "native_features", extractor)

        def features(x):
            return tuple(native(x))

        def loss(x_rec, target):
            return feature_stack_loss(target, features(x_rec))

        self._features = features
        self._loss = loss
        if compile:
            self._features = _with_eager_fallback(torch.compile(features, dynamic=False), features, "features")
            self._loss = _with_eager_fallback(torch.compile(loss, dynamic=False), loss, "feature loss")

    def target(self, x: torch.Tensor) -> tuple[torch.Tensor, ...]:
        with torch.no_grad():
            feats = tuple(self._features(x))
        if len(feats) != 3:
            raise ShapeError(f"extractor must return three feature maps, got {len(feats)}")
        return feats

    def __call__(self, x_rec: torch.Tensor, target: Sequence[torch.Tensor]) -> torch.Tensor:
        return self._loss(x_rec, tuple(target))


def as_criterion(obj) -> PerceptualLoss:
    return obj if isinstance(obj, PerceptualLoss) else PerceptualLoss(obj)


def total_loss(
    x: torch.Tensor,
    x_rec: torch.Tensor,
    mu: torch.Tensor,
    logvar: torch.Tensor,
    extractor: nn.Module,
    beta: float = 1.0,
) -> LossBreakdown:
    feat = feature_perceptual_loss(x, x_rec, extractor)
    kl = kl_divergence(mu, logvar)
    return combine_losses(feat, kl, beta)


def combine_losses(feature: torch.Tensor, kl: torch.Tensor, beta: float) -> LossBreakdown:
    return LossBreakdown(feature=feature, kl=kl, total=feature + beta * kl)
