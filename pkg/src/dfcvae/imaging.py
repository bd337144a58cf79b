"""Image primitives: validation, resizing, flipping, SSIM and difference masks.

Images are ``float64`` arrays of shape ``(H, W, 3)`` with values in ``[0, 1]``.
Masks are boolean arrays of shape ``(H, W)``.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image as PILImage
from skimage.metrics import structural_similarity
from skimage.transform import resize as _sk_resize

SSIM_WINDOW = 7
DATA_RANGE = 1.0
K1, K2 = 0.01, 0.03


def check_image(img: np.ndarray, name: str = "image") -> np.ndarray:
    """Return ``img`` as a float64 array after checking the image invariants."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"{name} must have shape (H, W, 3), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    if arr.min(initial=0.0) < 0.0 or arr.max(initial=0.0) > 1.0:
        raise ValueError(f"{name} values must lie in [0, 1]")
    return arr


def _check_pair(a, b):
    a = check_image(a, "a")
    b = check_image(b, "b")
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if min(a.shape[:2]) < SSIM_WINDOW:
        raise ValueError(f"images must be at least {SSIM_WINDOW}x{SSIM_WINDOW} for SSIM")
    return a, b


def resize(img: np.ndarray, target_h: int, target_w: int) -> np.ndarray:
    """Bilinear resize to ``(target_h, target_w)``; same-size input is returned as a copy."""
    if target_h < 1 or target_w < 1:
        raise ValueError(f"target size must be positive, got {target_h}x{target_w}")
    arr = check_image(img)
    if arr.shape[:2] == (target_h, target_w):
        return arr.copy()
    out = _sk_resize(
        arr,
        (target_h, target_w, 3),
        order=1,
        mode="edge",
        anti_aliasing=False,
        preserve_range=True,
    )
    return np.clip(out, 0.0, 1.0)


def horizontal_flip(img: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(check_image(img)[:, ::-1, :])


def ssim_map(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Per-pixel SSIM, shape ``(H, W, 3)``, from a uniform 7x7 window."""
    a, b = _check_pair(a, b)
    _, full = structural_similarity(
        a,
        b,
        win_size=SSIM_WINDOW,
        data_range=DATA_RANGE,
        channel_axis=2,
        gaussian_weights=False,
        use_sample_covariance=False,
        K1=K1,
        K2=K2,
        full=True,
    )
    return full


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean SSIM over valid (non-border) windows, averaged over the three channels.

    Uses a 7x7 uniform window, population statistics and the stabilizers
    ``C1 = (0.01 L)^2``, ``C2 = (0.03 L)^2`` with ``L = 1``.
    """
    a, b = _check_pair(a, b)
    score = structural_similarity(
        a,
        b,
        win_size=SSIM_WINDOW,
        data_range=DATA_RANGE,
        channel_axis=2,
        gaussian_weights=False,
        use_sample_covariance=False,
        K1=K1,
        K2=K2,
    )
    return float(score)


def diff_mask(a: np.ndarray, b: np.ndarray, threshold: float) -> np.ndarray:
    """Boolean mask where the channel-averaged local dissimilarity ``1 - SSIM`` exceeds ``threshold``."""
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must be in (0, 1), got {threshold}")
    dissim = 1.0 - ssim_map(a, b).mean(axis=2)
    return dissim > threshold


def to_uint8(img: np.ndarray) -> np.ndarray:
    """Scale to 8 bits with round-half-up."""
    arr = check_image(img)
    return np.floor(arr * 255.0 + 0.5).astype(np.uint8)


def read_png(path: str | Path) -> np.ndarray:
    with PILImage.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def write_png(img: np.ndarray, path: str | Path) -> None:
    PILImage.fromarray(to_uint8(img)).save(path, format="PNG", optimize=False)


def write_mask_png(mask: np.ndarray, path: str | Path) -> None:
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 2:
        raise ValueError(f"mask must be 2-D, got shape {mask.shape}")
    PILImage.fromarray(mask).save(path, format="PNG")


def read_mask_png(path: str | Path) -> np.ndarray:
    with PILImage.open(path) as im:
        return np.asarray(im.convert("1"), dtype=bool)
