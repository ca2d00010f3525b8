"""Atmospheric scattering physics and the dark-channel-prior baseline.

Images are float arrays in [0, 1]: color planes are (H, W, 3), transmission
and depth planes are (H, W).  Everything here is a pure function of numpy
arrays; nothing touches the autodiff tape.  Haze follows the linear
single-scattering formation law

    hazy = clean * t + (1 - t) * A,      t = exp(-beta * depth)

and its closed-form inverse, with a transmission floor guarding the division.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ParameterError, ShapeError

T_FLOOR_DEFAULT = 0.05
DCP_OMEGA_DEFAULT = 0.95
DCP_PATCH_DEFAULT = 15


@dataclass(frozen=True)
class AtmosphericLight:
    """Per-channel global haze illumination; unequal channels mean a color cast."""

    r: float
    g: float
    b: float

    def __post_init__(self):
        for name, v in (("r", self.r), ("g", self.g), ("b", self.b)):
            if not 0.0 <= v <= 1.0:
                raise ParameterError(f"atmospheric light {name}={v} outside [0, 1]")

    def as_array(self) -> np.ndarray:
        return np.array([self.r, self.g, self.b], dtype=np.float64)

    @staticmethod
    def from_array(a) -> "AtmosphericLight":
        a = np.asarray(a, dtype=np.float64).reshape(3)
        return AtmosphericLight(float(a[0]), float(a[1]), float(a[2]))

    @property
    def spread(self) -> float:
        vals = (self.r, self.g, self.b)
        return max(vals) - min(vals)


@dataclass(frozen=True)
class HazeParams:
    """Attenuation coefficient (per unit normalized depth) plus airlight color."""

    beta: float
    a: AtmosphericLight

    def __post_init__(self):
        if self.beta < 0.0:
            raise ParameterError(f"beta={self.beta} must be >= 0")


def _check_pair(img: np.ndarray, t: np.ndarray):
    if img.ndim != 3 or img.shape[2] != 3:
        raise ShapeError(f"expected (H, W, 3) image, got {img.shape}")
    if t.shape != img.shape[:2]:
        raise ShapeError(f"transmission shape {t.shape} != image spatial dims {img.shape[:2]}")


def transmission_from_depth(depth: np.ndarray, beta: float) -> np.ndarray:
    """t = exp(-beta * depth), elementwise; beta >= 0 and depth >= 0."""
    if beta < 0.0:
        raise ParameterError(f"beta={beta} must be >= 0")
    depth = np.asarray(depth, dtype=np.float64)
    if np.any(depth < 0.0):
        raise ParameterError("depth values must be >= 0")
    return np.exp(-beta * depth)


def synthesize_haze(clean: np.ndarray, t: np.ndarray, a: AtmosphericLight) -> np.ndarray:
    """Blend scene radiance with airlight by transmission, clamped to [0, 1]."""
    clean = np.asarray(clean, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    _check_pair(clean, t)
    hazy = clean * t[:, :, None] + (1.0 - t[:, :, None]) * a.as_array()
    return np.clip(hazy, 0.0, 1.0)


def invert_scattering(
    hazy: np.ndarray, t: np.ndarray, a: AtmosphericLight, t_floor: float = T_FLOOR_DEFAULT
) -> np.ndarray:
    """Closed-form dehazing (hazy - A) / max(t, floor) + A, clamped to [0, 1]."""
    if t_floor <= 0.0:
        raise ParameterError(f"t_floor={t_floor} must be > 0")
    hazy = np.asarray(hazy, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    _check_pair(hazy, t)
    av = a.as_array()
    denom = np.maximum(t, t_floor)[:, :, None]
    return np.clip((hazy - av) / denom + av, 0.0, 1.0)


# ---------------------------------------------------------------------------
# dark channel prior baseline
# ---------------------------------------------------------------------------


def dark_channel(img: np.ndarray, patch: int = DCP_PATCH_DEFAULT) -> np.ndarray:
    """Min over channels then over a patch x patch window (edges truncated)."""
    if patch < 1 or patch % 2 == 0:
        raise ParameterError(f"patch={patch} must be odd and >= 1")
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ShapeError(f"expected (H, W, 3) image, got {img.shape}")
    chan_min = img.min(axis=2)
    r = patch // 2
    if r == 0:
        return chan_min
    h, w = chan_min.shape
    padded = np.full((h + 2 * r, w + 2 * r), np.inf)
    padded[r : r + h, r : r + w] = chan_min
    out = np.full((h, w), np.inf)
    for i in range(patch):
        for j in range(patch):
            np.minimum(out, padded[i : i + h, j : j + w], out=out)
    return out


def estimate_atmospheric_dcp(img: np.ndarray, dark: np.ndarray) -> AtmosphericLight:
    """Average the image over the 0.1% of pixels with the brightest dark channel.

    Ties are broken in row-major order so the estimate is deterministic.
    """
    img = np.asarray(img, dtype=np.float64)
    dark = np.asarray(dark, dtype=np.float64)
    _check_pair(img, dark)
    h, w = dark.shape
    k = int(np.ceil(0.001 * h * w))
    order = np.argsort(-dark.reshape(-1), kind="stable")[:k]
    picked = img.reshape(-1, 3)[order]
    return AtmosphericLight.from_array(np.clip(picked.mean(axis=0), 0.0, 1.0))


def estimate_transmission_dcp(
    img: np.ndarray,
    a: AtmosphericLight,
    omega: float = DCP_OMEGA_DEFAULT,
    patch: int = DCP_PATCH_DEFAULT,
    t_floor: float = T_FLOOR_DEFAULT,
) -> np.ndarray:
    """t = 1 - omega * dark_channel(img / A), clamped into [t_floor, 1]."""
    if not 0.0 < omega <= 1.0:
        raise ParameterError(f"omega={omega} must lie in (0, 1]")
    av = a.as_array()
    if np.any(av <= 0.0):
        raise ParameterError("atmospheric light channels must be > 0 for the DCP ratio")
    img = np.asarray(img, dtype=np.float64)
    t = 1.0 - omega * dark_channel(img / av, patch)
    return np.clip(t, t_floor, 1.0)


def dcp_dehaze(
    img: np.ndarray,
    omega: float = DCP_OMEGA_DEFAULT,
    patch: int = DCP_PATCH_DEFAULT,
    t_floor: float = T_FLOOR_DEFAULT,
) -> tuple[np.ndarray, np.ndarray, AtmosphericLight]:
    """Classical prior-based pipeline: dark channel -> A -> t -> inversion.

    Returns (dehazed, transmission, atmospheric_light).
    """
    dark = dark_channel(img, patch)
    a = estimate_atmospheric_dcp(img, dark)
    t = estimate_transmission_dcp(img, a, omega, patch, t_floor)
    return invert_scattering(img, t, a, t_floor), t, a
