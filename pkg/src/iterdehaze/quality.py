"""Training losses and full-reference image quality metrics.

Losses (L1, MSE, SSIM-based, perceptual, and their weighted combination) run
on autodiff tensors so they can drive training.  Evaluation metrics (PSNR,
SSIM on plain arrays, CIEDE2000) take numpy image planes.

The perceptual loss measures mean absolute feature difference under a fixed
feature extractor.  Shipping pretrained classifier weights is out of scope,
so the default extractor is a small convnet whose weights are drawn once from
a seeded distribution and frozen; it is pluggable, so an externally supplied
extractor with pretrained weights can be dropped in.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ParameterError, ShapeError

PSNR_CAP_DB = 99.0

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


# ---------------------------------------------------------------------------
# elementwise losses
# ---------------------------------------------------------------------------


def l1_loss(a: Tensor, b: Tensor) -> Tensor:
    """Mean absolute difference over all elements."""
    if a.shape != b.shape:
        raise ShapeError(f"l1_loss: shape mismatch {a.shape} vs {b.shape}")
    return ad.mean(ad.absolute(a - b))


def mse_loss(a: Tensor, b: Tensor) -> Tensor:
    """Mean squared difference over all elements."""
    if a.shape != b.shape:
        raise ShapeError(f"mse_loss: shape mismatch {a.shape} vs {b.shape}")
    return ad.mean((a - b) ** 2.0)


# ---------------------------------------------------------------------------
# SSIM
# ---------------------------------------------------------------------------


def _gaussian_kernel(window: int, sigma: float, dtype) -> np.ndarray:
    half = window // 2
    x = np.arange(-half, half + 1, dtype=np.float64)
    g1 = np.exp(-(x**2) / (2.0 * sigma**2))
    g2 = np.outer(g1, g1)
    return (g2 / g2.sum()).astype(dtype)


def _gaussian_filter(x: Tensor, kernel: Tensor) -> Tensor:
    # depthwise: run the single-channel kernel over every channel separately
    n, c, h, w = x.shape
    flat = ad.reshape(x, (n * c, 1, h, w))
    filt = ad.conv2d(flat, kernel, bias=None, stride=1, padding=0)
    ho, wo = filt.shape[2:]
    return ad.reshape(filt, (n, c, ho, wo))


def ssim(a: Tensor, b: Tensor, window: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA, peak: float = 1.0) -> Tensor:
    """Mean local structural similarity with a Gaussian window, differentiable.

    Inputs are NCHW tensors with matching shapes; statistics are computed on
    the valid (un-padded) interior and averaged over space and channels.
    Returns a scalar tensor in [-1, 1].
    """
    if a.shape != b.shape:
        raise ShapeError(f"ssim: shape mismatch {a.shape} vs {b.shape}")
    if a.data.ndim != 4:
        raise ShapeError(f"ssim expects NCHW tensors, got shape {a.shape}")
    if window % 2 == 0:
        raise ParameterError(f"ssim window={window} must be odd")
    if window > a.shape[2] or window > a.shape[3]:
        raise ParameterError(f"ssim window {window} larger than image {a.shape[2]}x{a.shape[3]}")

    kern = Tensor(_gaussian_kernel(window, sigma, a.dtype).reshape(1, 1, window, window))
    c1 = (SSIM_K1 * peak) ** 2
    c2 = (SSIM_K2 * peak) ** 2

    mu_a = _gaussian_filter(a, kern)
    mu_b = _gaussian_filter(b, kern)
    mu_aa = mu_a * mu_a
    mu_bb = mu_b * mu_b
    mu_ab = mu_a * mu_b
    var_a = _gaussian_filter(a * a, kern) - mu_aa
    var_b = _gaussian_filter(b * b, kern) - mu_bb
    cov = _gaussian_filter(a * b, kern) - mu_ab

    num = (mu_ab * 2.0 + c1) * (cov * 2.0 + c2)
    den = (mu_aa + mu_bb + c1) * (var_a + var_b + c2)
    return ad.mean(num / den)


def _to_nchw(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img[None, None]
    if img.ndim == 3:
        return img.transpose(2, 0, 1)[None]
    raise ShapeError(f"expected (H, W) or (H, W, C) image, got {img.shape}")


def ssim_value(a: np.ndarray, b: np.ndarray, window: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> float:
    """SSIM between two image planes, channel-averaged, as a plain float."""
    with ad.no_grad():
        return float(ssim(Tensor(_to_nchw(a)), Tensor(_to_nchw(b)), window, sigma).data)


# ---------------------------------------------------------------------------
# PSNR
# ---------------------------------------------------------------------------


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0, cap: float = PSNR_CAP_DB) -> float:
    """10 log10(peak^2 / MSE) in dB; identical inputs report the cap sentinel."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"psnr: shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return cap
    return min(cap, 10.0 * np.log10(peak * peak / mse))


# ---------------------------------------------------------------------------
# CIEDE2000
# ---------------------------------------------------------------------------

_SRGB_TO_XYZ = np.array(
    [
        [0.4124564, 0.3575761, 0.1804375],
        [0.2126729, 0.7151522, 0.0721750],
        [0.0193339, 0.1191920, 0.9503041],
    ]
)
_D65_WHITE = np.array([0.95047, 1.0, 1.08883])


def srgb_to_lab(rgb: np.ndarray) -> np.ndarray:
    """sRGB in [0, 1] -> CIE Lab under the D65 white point, vectorized over pixels."""
    rgb = np.asarray(rgb, dtype=np.float64)
    linear = np.where(rgb <= 0.04045, rgb / 12.92, ((rgb + 0.055) / 1.055) ** 2.4)
    xyz = linear @ _SRGB_TO_XYZ.T
    ratio = xyz / _D65_WHITE
    delta = 6.0 / 29.0
    f = np.where(ratio > delta**3, np.cbrt(ratio), ratio / (3.0 * delta**2) + 4.0 / 29.0)
    lab = np.empty_like(xyz)
    lab[..., 0] = 116.0 * f[..., 1] - 16.0
    lab[..., 1] = 500.0 * (f[..., 0] - f[..., 1])
    lab[..., 2] = 200.0 * (f[..., 1] - f[..., 2])
    return lab


def delta_e_2000(lab1: np.ndarray, lab2: np.ndarray) -> np.ndarray:
    """CIEDE2000 color difference between Lab arrays of shape (..., 3).

    Full formula with lightness/chroma/hue weighting and the rotation term;
    hue arithmetic is done in degrees to mirror the defining publication.
    """
    lab1 = np.asarray(lab1, dtype=np.float64)
    lab2 = np.asarray(lab2, dtype=np.float64)
    if lab1.shape != lab2.shape or lab1.shape[-1] != 3:
        raise ShapeError(f"delta_e_2000: incompatible shapes {lab1.shape} vs {lab2.shape}")

    l1, a1, b1 = lab1[..., 0], lab1[..., 1], lab1[..., 2]
    l2, a2, b2 = lab2[..., 0], lab2[..., 1], lab2[..., 2]

    c1 = np.hypot(a1, b1)
    c2 = np.hypot(a2, b2)
    cbar = 0.5 * (c1 + c2)
    g = 0.5 * (1.0 - np.sqrt(cbar**7 / (cbar**7 + 25.0**7)))
    a1p = (1.0 + g) * a1
    a2p = (1.0 + g) * a2
    c1p = np.hypot(a1p, b1)
    c2p = np.hypot(a2p, b2)

    h1p = np.degrees(np.arctan2(b1, a1p)) % 360.0
    h2p = np.degrees(np.arctan2(b2, a2p)) % 360.0
    h1p = np.where((b1 == 0) & (a1p == 0), 0.0, h1p)
    h2p = np.where((b2 == 0) & (a2p == 0), 0.0, h2p)

    dlp = l2 - l1
    dcp = c2p - c1p

    zero_chroma = (c1p * c2p) == 0.0
    hdiff = h2p - h1p
    dhp = np.where(hdiff > 180.0, hdiff - 360.0, np.where(hdiff < -180.0, hdiff + 360.0, hdiff))
    dhp = np.where(zero_chroma, 0.0, dhp)
    dH = 2.0 * np.sqrt(c1p * c2p) * np.sin(np.radians(dhp) / 2.0)

    lbar = 0.5 * (l1 + l2)
    cbp = 0.5 * (c1p + c2p)

    hsum = h1p + h2p
    habs = np.abs(h1p - h2p)
    hbar = np.where(habs <= 180.0, 0.5 * hsum, np.where(hsum < 360.0, 0.5 * (hsum + 360.0), 0.5 * (hsum - 360.0)))
    hbar = np.where(zero_chroma, hsum, hbar)

    t = (
        1.0
        - 0.17 * np.cos(np.radians(hbar - 30.0))
        + 0.24 * np.cos(np.radians(2.0 * hbar))
        + 0.32 * np.cos(np.radians(3.0 * hbar + 6.0))
        - 0.20 * np.cos(np.radians(4.0 * hbar - 63.0))
    )
    dtheta = 30.0 * np.exp(-(((hbar - 275.0) / 25.0) ** 2))
    rc = 2.0 * np.sqrt(cbp**7 / (cbp**7 + 25.0**7))
    sl = 1.0 + 0.015 * (lbar - 50.0) ** 2 / np.sqrt(20.0 + (lbar - 50.0) ** 2)
    sc = 1.0 + 0.045 * cbp
    sh = 1.0 + 0.015 * cbp * t
    rt = -np.sin(np.radians(2.0 * dtheta)) * rc

    term_l = dlp / sl
    term_c = dcp / sc
    term_h = dH / sh
    return np.sqrt(term_l**2 + term_c**2 + term_h**2 + rt * term_c * term_h)


def ciede2000(rgb_a: np.ndarray, rgb_b: np.ndarray) -> float:
    """Mean CIEDE2000 difference between two sRGB images in [0, 1]."""
    rgb_a = np.asarray(rgb_a, dtype=np.float64)
    rgb_b = np.asarray(rgb_b, dtype=np.float64)
    if rgb_a.shape != rgb_b.shape or rgb_a.ndim != 3 or rgb_a.shape[2] != 3:
        raise ShapeError(f"ciede2000: expected matching (H, W, 3) images, got {rgb_a.shape} vs {rgb_b.shape}")
    return float(np.mean(delta_e_2000(srgb_to_lab(rgb_a), srgb_to_lab(rgb_b))))


# ---------------------------------------------------------------------------
# perceptual loss
# ---------------------------------------------------------------------------

_FE_WIDTHS = (8, 16, 16, 32)
_FE_DOWNSAMPLE_AFTER = 2  # 2x avg-pool after this many conv layers


@dataclass
class FeatureExtractorParams:
    """Frozen random convnet standing in for a pretrained feature stack."""

    seed: int
    kernels: list[Tensor] = field(default_factory=list)
    biases: list[Tensor] = field(default_factory=list)

    @staticmethod
    def create(seed: int = 1234, dtype=np.float64) -> "FeatureExtractorParams":
        rng = np.random.default_rng(seed)
        fe = FeatureExtractorParams(seed=seed)
        cin = 3
        for width in _FE_WIDTHS:
            scale = np.sqrt(2.0 / (cin * 9))
            fe.kernels.append(Tensor((rng.standard_normal((width, cin, 3, 3)) * scale).astype(dtype)))
            fe.biases.append(Tensor(np.zeros(width, dtype=dtype)))
            cin = width
        return fe

    def features(self, x: Tensor) -> Tensor:
        out = x
        for i, (k, b) in enumerate(zip(self.kernels, self.biases)):
            out = ad.relu(ad.conv2d(out, k, b, stride=1, padding=1))
            if i + 1 == _FE_DOWNSAMPLE_AFTER:
                out = ad.pool2d(out, "avg", 2, 2, 2)
        return out


def perceptual_loss(pred: Tensor, gt: Tensor, fe: FeatureExtractorParams) -> Tensor:
    """Mean absolute difference of extracted feature maps (1/(CHW) per image)."""
    if pred.shape != gt.shape:
        raise ShapeError(f"perceptual_loss: shape mismatch {pred.shape} vs {gt.shape}")
    return l1_loss(fe.features(pred), fe.features(gt))


# ---------------------------------------------------------------------------
# composite training loss
# ---------------------------------------------------------------------------

LOSS_KINDS = ("l1", "mse", "recursive_l1")


@dataclass
class LossConfig:
    """Reconstruction loss shape: base kind plus perceptual weighting."""

    lambda_p: float = 0.8
    loss_kind: str = "l1"
    perceptual_enabled: bool = True

    def __post_init__(self):
        if self.lambda_p < 0.0:
            raise ParameterError(f"lambda_p={self.lambda_p} must be >= 0")
        if self.loss_kind not in LOSS_KINDS:
            raise ParameterError(f"loss_kind must be one of {LOSS_KINDS}, got {self.loss_kind!r}")


def total_loss(pred, gt: Tensor, cfg: LossConfig, fe: FeatureExtractorParams | None = None) -> Tensor:
    """Reconstruction loss over a final output or a per-step output sequence.

    ``l1`` and ``mse`` supervise only the final output (the last element when
    a sequence is given); ``recursive_l1`` averages L1 over every step output.
    The perceptual term always applies to the final output alone.
    """
    steps = list(pred) if isinstance(pred, (list, tuple)) else [pred]
    final = steps[-1]

    if cfg.loss_kind == "l1":
        base = l1_loss(final, gt)
    elif cfg.loss_kind == "mse":
        base = mse_loss(final, gt)
    else:
        base = l1_loss(steps[0], gt)
        for s in steps[1:]:
            base = base + l1_loss(s, gt)
        base = base * (1.0 / len(steps))

    if cfg.perceptual_enabled and cfg.lambda_p > 0.0:
        if fe is None:
            raise ParameterError("perceptual term enabled but no feature extractor given")
        base = base + perceptual_loss(final, gt, fe) * cfg.lambda_p
    return base
