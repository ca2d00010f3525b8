"""Prior estimation networks: transmission map and channel-wise atmospheric light.

The transmission estimator is a desk-scale encoder-decoder with dense skip
concatenations: every decoder block sees all earlier same-resolution feature
maps (including the raw input at full resolution) and upsampling is bilinear.
A sigmoid head keeps the output in (0, 1) at the input's spatial size.

The atmospheric estimator stacks conv -> group-norm -> ReLU blocks in pairs
separated by 7x7 stride-2 max-pools, ends in a 3-channel head, and collapses
space with a single global pooling (max by default; the average-pool twin
exists for the pooling ablation).  The global pool makes the estimate a true
per-channel scalar, insensitive to where in the frame the brightest haze
region sits.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import quality
from .autodiff import Tensor
from .errors import ParameterError, ShapeError

ENC_LEVELS = 3
ENC_WIDTHS = (16, 32, 64)
ATMO_WIDTHS = (16, 32, 64)
ATMO_GROUPS = 8
ATMO_POOL_KERNEL = 7
ATMO_POOL_STRIDE = 2


def conv_init(rng: np.random.Generator, cout: int, cin: int, k: int, dtype, scale: float = 1.0):
    """He-normal kernel plus zero bias, both trainable."""
    w = rng.standard_normal((cout, cin, k, k)) * np.sqrt(2.0 / (cin * k * k)) * scale
    return (
        Tensor(w.astype(dtype), requires_grad=True),
        Tensor(np.zeros(cout, dtype=dtype), requires_grad=True),
    )


class ParamBag:
    """Named tensor collection; iteration order is fixed by insertion order."""

    def __init__(self):
        self.tensors: dict[str, Tensor] = {}

    def add(self, name: str, t: Tensor) -> Tensor:
        self.tensors[name] = t
        return t

    def add_conv(self, rng, name: str, cout: int, cin: int, k: int, dtype, scale: float = 1.0):
        w, b = conv_init(rng, cout, cin, k, dtype, scale)
        return self.add(f"{name}/w", w), self.add(f"{name}/b", b)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def named(self, prefix: str = "") -> dict[str, Tensor]:
        return {prefix + k: v for k, v in self.tensors.items()}

    def set_trainable(self, flag: bool):
        for t in self.tensors.values():
            t.requires_grad = flag


@dataclass
class TransmissionEstimatorParams:
    bag: ParamBag
    levels: int = ENC_LEVELS

    @staticmethod
    def create(rng: np.random.Generator, dtype=np.float64) -> "TransmissionEstimatorParams":
        bag = ParamBag()
        w1, w2, w3 = ENC_WIDTHS
        bag.add_conv(rng, "enc1", w1, 3, 3, dtype)
        bag.add_conv(rng, "enc2", w2, w1, 3, dtype)
        bag.add_conv(rng, "enc3", w3, w2, 3, dtype)
        bag.add_conv(rng, "bott", w3, w3, 3, dtype)
        bag.add_conv(rng, "dec3", w2, w3 + w3 + w2, 3, dtype)
        bag.add_conv(rng, "dec2", w1, w2 + w2 + w1, 3, dtype)
        bag.add_conv(rng, "dec1", w1, w1 + w1 + 3, 3, dtype)
        bag.add_conv(rng, "head", 1, w1, 3, dtype)
        return TransmissionEstimatorParams(bag=bag)

    def named(self, prefix: str = "trans_est/") -> dict[str, Tensor]:
        return self.bag.named(prefix)


def _conv_relu(x: Tensor, bag: ParamBag, name: str) -> Tensor:
    return ad.relu(ad.conv2d(x, bag[f"{name}/w"], bag[f"{name}/b"], stride=1, padding=1))


def estimate_transmission(img: Tensor, params: TransmissionEstimatorParams) -> Tensor:
    """Full-resolution transmission estimate in (0, 1), shape (N, 1, H, W).

    Spatial dims that are not multiples of 2^levels are reflect-padded on the
    bottom/right and the output is cropped back, so any reasonable size works.
    """
    if img.data.ndim != 4 or img.shape[1] != 3:
        raise ShapeError(f"expected (N, 3, H, W) input, got {img.shape}")
    n, _, h, w = img.shape
    mult = 2**params.levels
    ph = (-h) % mult
    pw = (-w) % mult
    x = ad.reflect_pad2d(img, ph, pw) if (ph or pw) else img

    bag = params.bag
    e1 = _conv_relu(x, bag, "enc1")
    d1 = ad.pool2d(e1, "avg", 2, 2, 2)
    e2 = _conv_relu(d1, bag, "enc2")
    d2 = ad.pool2d(e2, "avg", 2, 2, 2)
    e3 = _conv_relu(d2, bag, "enc3")
    d3 = ad.pool2d(e3, "avg", 2, 2, 2)
    b = _conv_relu(d3, bag, "bott")

    u3 = ad.upsample2x_bilinear(b)
    dec3 = _conv_relu(ad.concat_channels([u3, e3, d2]), bag, "dec3")
    u2 = ad.upsample2x_bilinear(dec3)
    dec2 = _conv_relu(ad.concat_channels([u2, e2, d1]), bag, "dec2")
    u1 = ad.upsample2x_bilinear(dec2)
    dec1 = _conv_relu(ad.concat_channels([u1, e1, x]), bag, "dec1")
    t = ad.sigmoid(ad.conv2d(dec1, bag["head/w"], bag["head/b"], stride=1, padding=1))
    if ph or pw:
        t = ad.crop2d(t, h, w)
    return t


@dataclass
class AtmosphericEstimatorParams:
    bag: ParamBag
    pool_kind: str = "max"  # the final global pool; the ablation's average twin flips this

    @staticmethod
    def create(rng: np.random.Generator, dtype=np.float64, pool_kind: str = "max") -> "AtmosphericEstimatorParams":
        if pool_kind not in ("max", "avg"):
            raise ParameterError(f"pool_kind must be 'max' or 'avg', got {pool_kind!r}")
        bag = ParamBag()
        cin = 3
        for k, width in enumerate(ATMO_WIDTHS, start=1):
            bag.add_conv(rng, f"blk{k}a", width, cin, 3, dtype)
            bag.add(f"blk{k}a/gamma", Tensor(np.ones(width, dtype=dtype), requires_grad=True))
            bag.add(f"blk{k}a/beta", Tensor(np.zeros(width, dtype=dtype), requires_grad=True))
            bag.add_conv(rng, f"blk{k}b", width, width, 3, dtype)
            bag.add(f"blk{k}b/gamma", Tensor(np.ones(width, dtype=dtype), requires_grad=True))
            bag.add(f"blk{k}b/beta", Tensor(np.zeros(width, dtype=dtype), requires_grad=True))
            cin = width
        bag.add_conv(rng, "head", 3, cin, 3, dtype)
        return AtmosphericEstimatorParams(bag=bag, pool_kind=pool_kind)

    def named(self, prefix: str = "atmo_est/") -> dict[str, Tensor]:
        return self.bag.named(prefix)


def atmospheric_min_input() -> int:
    """Smallest spatial dim the three stride-2 7x7 pools can digest."""
    need = 1
    for _ in range(len(ATMO_WIDTHS)):
        need = (need - 1) * ATMO_POOL_STRIDE + ATMO_POOL_KERNEL
    return need


def _gn_block(x: Tensor, bag: ParamBag, name: str) -> Tensor:
    y = ad.conv2d(x, bag[f"{name}/w"], bag[f"{name}/b"], stride=1, padding=1)
    y = ad.group_norm(y, ATMO_GROUPS, bag[f"{name}/gamma"], bag[f"{name}/beta"])
    return ad.relu(y)


def estimate_atmospheric(img: Tensor, params: AtmosphericEstimatorParams) -> Tensor:
    """Channel-wise atmospheric light in (0, 1), shape (N, 3, 1, 1)."""
    if img.data.ndim != 4 or img.shape[1] != 3:
        raise ShapeError(f"expected (N, 3, H, W) input, got {img.shape}")
    need = atmospheric_min_input()
    if img.shape[2] < need or img.shape[3] < need:
        raise ShapeError(f"atmospheric estimator needs at least {need}x{need} input, got {img.shape[2]}x{img.shape[3]}")
    bag = params.bag
    x = img
    for k in range(1, len(ATMO_WIDTHS) + 1):
        x = _gn_block(x, bag, f"blk{k}a")
        x = _gn_block(x, bag, f"blk{k}b")
        x = ad.pool2d(x, "max", ATMO_POOL_KERNEL, ATMO_POOL_KERNEL, ATMO_POOL_STRIDE)
    x = ad.conv2d(x, bag["head/w"], bag["head/b"], stride=1, padding=1)
    x = ad.global_pool(x, params.pool_kind)
    return ad.sigmoid(x)


def ssim_loss(pred: Tensor, target: Tensor) -> Tensor:
    """1 - SSIM, in [0, 2]; sharper-edge alternative to MSE for map regression."""
    return 1.0 - quality.ssim(pred, target)
