"""Synthetic data, the three-stage training protocol, checkpoints, ablations.

Training is fully deterministic under a fixed seed: every random draw comes
from generators spawned off the config seed, the training stream's state is
stored in checkpoints, and resuming from a checkpoint continues bitwise
identically to an uninterrupted run (at 64-bit; float32 values round-trip
exactly through the 64-bit checkpoint format too).

Stages follow the protocol: (1) the two prior estimators train separately
(SSIM loss for the transmission map, MSE for atmospheric light); (2) the
iterative dehazer and its updaters train on the reconstruction loss with the
estimators frozen, priors computed once per pooled sample; (3) everything is
fine-tuned jointly with the estimator learning rate scaled down.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from . import dehazer as dh
from . import estimators as est
from . import quality, scattering
from .autodiff import Adam, Tensor
from .errors import CheckpointError, ConfigError, ParameterError
from .scattering import AtmosphericLight, HazeParams

HAZE_BANDS = {
    "low": (0.4, 1.0),
    "mid": (1.0, 1.75),
    "high": (1.75, 2.5),
    "random": (0.4, 2.5),
    "cast": (0.4, 2.5),
}
CAST_MIN_SPREAD = 0.05

CHECKPOINT_MAGIC = b"IDHZ"
CHECKPOINT_VERSION = 1
FINGERPRINT = f"{dh.CHANNEL_LAYOUT}|t1={dh.TIME_STEPS_DEFAULT}|feat={dh.FEATURES}"


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    """Knobs for one training stage; defaults are the desk-scale reference."""

    stage: int = 1
    patch_size: int = 64
    batch_size: int = 4
    iterations: int = 12
    batch_updates_per_iteration: int = 80
    lr_initial: float = 1e-4
    lr_decay_halving_period: int = 3  # iterations per halving
    estimator_lr_ratio: float = 0.1
    t1: int = dh.TIME_STEPS_DEFAULT
    seed: int = 0
    beta_range: tuple[float, float] = (0.4, 2.5)
    a_range: tuple[float, float] = (0.6, 1.0)
    cast_probability: float = 0.3
    loss: quality.LossConfig = field(default_factory=quality.LossConfig)
    precision: str = "float64"
    scene_size: int = 64
    train_scenes: int = 60
    val_scenes: int = 16
    sample_pool: int = 320
    divergence_factor: float = 10.0

    def __post_init__(self):
        if self.stage not in (1, 2, 3):
            raise ConfigError(f"stage must be 1, 2 or 3, got {self.stage}")
        if self.precision not in ("float32", "float64"):
            raise ConfigError(f"precision must be float32 or float64, got {self.precision!r}")
        for name in ("patch_size", "batch_size", "iterations", "batch_updates_per_iteration", "t1"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.patch_size > self.scene_size:
            raise ConfigError(f"patch_size {self.patch_size} exceeds scene_size {self.scene_size}")
        if not 0.0 <= self.cast_probability <= 1.0:
            raise ConfigError(f"cast_probability must be in [0, 1], got {self.cast_probability}")

    @property
    def dtype(self):
        return np.float32 if self.precision == "float32" else np.float64

    def to_file(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for key, value in self.to_dict().items():
                fh.write(f"{key} = {value}\n")

    def to_dict(self) -> dict:
        d = asdict(self)
        loss = d.pop("loss")
        d["beta_range"] = f"{self.beta_range[0]},{self.beta_range[1]}"
        d["a_range"] = f"{self.a_range[0]},{self.a_range[1]}"
        d["loss.lambda_p"] = loss["lambda_p"]
        d["loss.kind"] = loss["loss_kind"]
        d["loss.perceptual"] = loss["perceptual_enabled"]
        return d

    def to_kwargs(self) -> dict:
        """Constructor-ready field dict (for deriving stage variants)."""
        d = asdict(self)
        d["loss"] = quality.LossConfig(**d["loss"])
        d["beta_range"] = tuple(d["beta_range"])
        d["a_range"] = tuple(d["a_range"])
        return d

    @staticmethod
    def from_file(path) -> "TrainConfig":
        pairs = {}
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
                key, _, value = line.partition("=")
                pairs[key.strip()] = value.strip()
        return TrainConfig.from_dict(pairs)

    @staticmethod
    def from_dict(pairs: dict) -> "TrainConfig":
        cfg = TrainConfig()
        ints = {
            "stage", "patch_size", "batch_size", "iterations", "batch_updates_per_iteration",
            "t1", "seed", "lr_decay_halving_period", "scene_size", "train_scenes", "val_scenes",
            "sample_pool",
        }
        floats = {"lr_initial", "estimator_lr_ratio", "cast_probability", "divergence_factor"}
        loss_kw: dict = {}
        for key, raw in pairs.items():
            value = str(raw)
            if key in ints:
                setattr(cfg, key, int(value))
            elif key in floats:
                setattr(cfg, key, float(value))
            elif key in ("beta_range", "a_range"):
                lo, _, hi = value.partition(",")
                setattr(cfg, key, (float(lo), float(hi)))
            elif key == "precision":
                cfg.precision = value
            elif key == "loss.lambda_p":
                loss_kw["lambda_p"] = float(value)
            elif key == "loss.kind":
                loss_kw["loss_kind"] = value
            elif key == "loss.perceptual":
                loss_kw["perceptual_enabled"] = value in ("True", "true", "1")
            else:
                raise ConfigError(f"unknown config key {key!r}")
        if loss_kw:
            cfg.loss = quality.LossConfig(**loss_kw)
        cfg.__post_init__()
        return cfg


def reference_config(stage: int, seed: int = 0) -> TrainConfig:
    """Desk-scale schedule tuned to fit single-core CPU budgets.

    Stage 2/3 update counts are far below the full-scale protocol (which
    assumes days of accelerator time); learning rates are raised accordingly,
    with halving periods preserving the published decay proportions.
    """
    if stage == 1:
        return TrainConfig(stage=1, batch_size=4, iterations=12, batch_updates_per_iteration=80,
                           lr_initial=4e-4, lr_decay_halving_period=3, precision="float32", seed=seed)
    if stage == 2:
        return TrainConfig(stage=2, batch_size=2, iterations=10, batch_updates_per_iteration=64,
                           lr_initial=8e-4, lr_decay_halving_period=3, precision="float32", seed=seed)
    return TrainConfig(stage=3, batch_size=2, iterations=5, batch_updates_per_iteration=32,
                       lr_initial=2e-4, lr_decay_halving_period=2, precision="float32", seed=seed)


# ---------------------------------------------------------------------------
# procedural scenes
# ---------------------------------------------------------------------------


def _scene_color(rng: np.random.Generator) -> np.ndarray:
    # mostly deep colors (one channel near zero) so scenes keep the low
    # dark-channel statistics the prior-based baseline relies on
    if rng.random() < 0.7:
        hi = rng.uniform(0.35, 0.95)
        mid = rng.uniform(0.05, hi)
        lo = rng.uniform(0.0, 0.07)
        color = np.array([hi, mid, lo])
        return color[rng.permutation(3)]
    return rng.uniform(0.25, 0.85, size=3)


def gen_scene(seed, size: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """Procedural clean image plus consistent depth, both in [0, 1].

    Layered colored shapes (rectangles, disks, bars) over a background
    gradient; nearer objects occlude farther ones and take smaller depths.
    The same seed always produces bitwise-identical planes.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size] / max(size - 1, 1)

    c0 = _scene_color(rng)
    c1 = _scene_color(rng)
    angle = rng.uniform(0, 2 * np.pi)
    ramp = (np.cos(angle) * xx + np.sin(angle) * yy + 1.0) / 2.0
    img = c0[None, None, :] + ramp[:, :, None] * (c1 - c0)[None, None, :]
    depth = np.ones((size, size))

    n_objects = int(rng.integers(5, 9))
    obj_depths = np.sort(rng.uniform(0.08, 0.92, size=n_objects))[::-1]
    for obj_depth in obj_depths:
        kind = rng.integers(0, 3)
        color = _scene_color(rng)
        cx, cy = rng.uniform(0.1, 0.9, size=2) * size
        if kind == 0:  # rectangle
            hw = rng.uniform(0.08, 0.3, size=2) * size
            mask = (np.abs(xx * size - cx) < hw[0]) & (np.abs(yy * size - cy) < hw[1])
        elif kind == 1:  # disk
            r = rng.uniform(0.07, 0.22) * size
            mask = (xx * size - cx) ** 2 + (yy * size - cy) ** 2 < r * r
        else:  # bar
            theta = rng.uniform(0, np.pi)
            width = rng.uniform(0.04, 0.12) * size
            d = np.cos(theta) * (xx * size - cx) + np.sin(theta) * (yy * size - cy)
            mask = np.abs(d) < width
        shade = rng.uniform(0.85, 1.1)
        img[mask] = np.clip(color * shade, 0.0, 1.0)
        depth[mask] = obj_depth

    img = img + rng.normal(0.0, 0.015, size=img.shape)
    return np.clip(img, 0.0, 1.0), np.clip(depth, 0.0, 1.0)


def sample_haze_params(rng: np.random.Generator, cfg: TrainConfig, band: str | None = None) -> HazeParams:
    """Draw beta and atmospheric light; ``band`` overrides the beta range.

    With ``band='cast'`` (or by the configured cast probability) channels are
    drawn independently and redrawn until they actually spread apart, so a
    cast sample always carries a visible color cast.
    """
    lo, hi = HAZE_BANDS[band] if band else cfg.beta_range
    beta = float(rng.uniform(lo, hi))
    cast = band == "cast" or (band is None and rng.random() < cfg.cast_probability)
    if cast:
        channels = rng.uniform(cfg.a_range[0], cfg.a_range[1], size=3)
        while channels.max() - channels.min() <= CAST_MIN_SPREAD:
            channels = rng.uniform(cfg.a_range[0], cfg.a_range[1], size=3)
        a = AtmosphericLight.from_array(channels)
    else:
        v = float(rng.uniform(cfg.a_range[0], cfg.a_range[1]))
        a = AtmosphericLight(v, v, v)
    return HazeParams(beta=beta, a=a)


# ---------------------------------------------------------------------------
# augmentation and patches
# ---------------------------------------------------------------------------


def apply_dihedral(plane: np.ndarray, k: int) -> np.ndarray:
    """Element k of the dihedral-4 group: k = rotation(0..3) + 4 * flip."""
    if not 0 <= k < 8:
        raise ParameterError(f"dihedral index {k} outside [0, 8)")
    if plane.shape[0] != plane.shape[1]:
        raise ParameterError("dihedral transforms need square planes")
    out = np.rot90(plane, k % 4)
    if k >= 4:
        out = np.flip(out, axis=1)
    return np.ascontiguousarray(out)


def inverse_dihedral(k: int) -> int:
    if k < 4:
        return (4 - k) % 4
    return k  # reflections are involutions


def augment(planes: tuple, rng: np.random.Generator) -> tuple:
    """One of the 8 dihedral transforms, the same for every plane of a sample."""
    k = int(rng.integers(0, 8))
    return tuple(apply_dihedral(p, k) for p in planes)


def extract_patches(planes: tuple, patch_size: int, count: int, rng: np.random.Generator) -> list[tuple]:
    """Random aligned square crops, the identical window across all planes."""
    h, w = planes[0].shape[:2]
    if patch_size > h or patch_size > w:
        raise ParameterError(f"patch_size {patch_size} exceeds image dims {h}x{w}")
    out = []
    for _ in range(count):
        top = int(rng.integers(0, h - patch_size + 1))
        left = int(rng.integers(0, w - patch_size + 1))
        out.append(tuple(p[top : top + patch_size, left : left + patch_size] for p in planes))
    return out


# ---------------------------------------------------------------------------
# samples
# ---------------------------------------------------------------------------


@dataclass
class HazySample:
    """One synthesized training/eval record with its ground truth."""

    clean: np.ndarray  # (H, W, 3)
    depth: np.ndarray  # (H, W)
    hazy: np.ndarray  # (H, W, 3)
    trans: np.ndarray  # (H, W) true transmission
    haze: HazeParams
    est_trans: np.ndarray | None = None  # (H, W) frozen-estimator prior
    est_atmo: np.ndarray | None = None  # (3,)


def make_hazy_sample(clean: np.ndarray, depth: np.ndarray, haze: HazeParams) -> HazySample:
    trans = scattering.transmission_from_depth(depth, haze.beta)
    hazy = scattering.synthesize_haze(clean, trans, haze.a)
    return HazySample(clean=clean, depth=depth, hazy=hazy, trans=trans, haze=haze)


def build_scene_pool(cfg: TrainConfig, rng: np.random.Generator, count: int, size: int | None = None):
    return [gen_scene(rng, size or cfg.scene_size) for _ in range(count)]


def build_validation_set(cfg: TrainConfig, size: int | None = None) -> list[HazySample]:
    """Held-out scenes at three haze severities, fixed by the config seed."""
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x0A11]))
    samples = []
    for _ in range(cfg.val_scenes):
        clean, depth = gen_scene(rng, size or cfg.scene_size)
        for band in ("low", "mid", "high"):
            samples.append(make_hazy_sample(clean, depth, sample_haze_params(rng, cfg, band)))
    return samples


def _to_tensor_img(img: np.ndarray, dtype) -> Tensor:
    return Tensor(np.ascontiguousarray(img.transpose(2, 0, 1)[None]).astype(dtype))


def _to_tensor_map(plane: np.ndarray, dtype) -> Tensor:
    return Tensor(plane[None, None].astype(dtype))


def _batch_images(imgs: list[np.ndarray], dtype) -> Tensor:
    return Tensor(np.stack([i.transpose(2, 0, 1) for i in imgs]).astype(dtype))


def _batch_maps(maps: list[np.ndarray], dtype) -> Tensor:
    return Tensor(np.stack(maps)[:, None].astype(dtype))


def attach_estimator_priors(samples: list[HazySample], trans_p, atmo_p, dtype, batch: int = 8):
    """Run the frozen estimators once per sample and cache the priors."""
    with ad.no_grad():
        for start in range(0, len(samples), batch):
            chunk = samples[start : start + batch]
            imgs = _batch_images([s.hazy for s in chunk], dtype)
            t_est = est.estimate_transmission(imgs, trans_p).data
            a_est = est.estimate_atmospheric(imgs, atmo_p).data
            for i, s in enumerate(chunk):
                s.est_trans = t_est[i, 0].astype(np.float64)
                s.est_atmo = a_est[i, :, 0, 0].astype(np.float64)


# ---------------------------------------------------------------------------
# checkpoint format
# ---------------------------------------------------------------------------


@dataclass
class Checkpoint:
    """Everything needed to reproduce or resume a run bitwise."""

    fingerprint: str
    config: dict
    trainer: dict
    rng_state: dict | None
    blobs: dict[str, np.ndarray]
    version: int = CHECKPOINT_VERSION


def save_checkpoint(path, ckpt: Checkpoint):
    meta = {
        "config": ckpt.config,
        "trainer": ckpt.trainer,
        "rng_state": ckpt.rng_state,
    }
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", ckpt.version))
    fp = ckpt.fingerprint.encode("utf-8")
    buf.write(struct.pack("<H", len(fp)))
    buf.write(fp)
    buf.write(struct.pack("<I", len(meta_bytes)))
    buf.write(meta_bytes)
    buf.write(struct.pack("<I", len(ckpt.blobs)))
    for name, arr in ckpt.blobs.items():
        nb = name.encode("utf-8")
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        arr64 = np.ascontiguousarray(arr, dtype="<f8")
        buf.write(struct.pack("<B", arr64.ndim))
        for dim in arr64.shape:
            buf.write(struct.pack("<I", dim))
        buf.write(arr64.tobytes())
    data = buf.getvalue()
    with open(path, "wb") as fh:
        fh.write(data)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        data = fh.read()
    view = io.BytesIO(data)

    def need(n: int, what: str) -> bytes:
        chunk = view.read(n)
        if len(chunk) != n:
            raise CheckpointError(f"truncated checkpoint while reading {what}")
        return chunk

    if need(4, "magic") != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version = struct.unpack("<I", need(4, "version"))[0]
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    (fplen,) = struct.unpack("<H", need(2, "fingerprint length"))
    fingerprint = need(fplen, "fingerprint").decode("utf-8")
    if fingerprint != FINGERPRINT:
        raise CheckpointError(
            f"{path}: channel-layout fingerprint mismatch\n  file:    {fingerprint}\n  expected {FINGERPRINT}"
        )
    (mlen,) = struct.unpack("<I", need(4, "meta length"))
    meta = json.loads(need(mlen, "meta").decode("utf-8"))
    (nblobs,) = struct.unpack("<I", need(4, "blob count"))
    blobs: dict[str, np.ndarray] = {}
    for _ in range(nblobs):
        (nlen,) = struct.unpack("<H", need(2, "blob name length"))
        name = need(nlen, "blob name").decode("utf-8")
        (ndim,) = struct.unpack("<B", need(1, "blob ndim"))
        shape = tuple(struct.unpack("<I", need(4, "blob dim"))[0] for _ in range(ndim))
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(need(8 * count, f"blob {name}"), dtype="<f8").reshape(shape)
        blobs[name] = arr.copy()
    return Checkpoint(
        fingerprint=fingerprint,
        config=meta["config"],
        trainer=meta["trainer"],
        rng_state=meta["rng_state"],
        blobs=blobs,
        version=version,
    )


def _params_to_blobs(named: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {name: t.data.astype(np.float64) for name, t in named.items()}


def _blobs_into_params(blobs: dict[str, np.ndarray], named: dict[str, Tensor], prefix: str = "", dtype=None):
    for name, t in named.items():
        key = prefix + name
        if key not in blobs:
            raise CheckpointError(f"checkpoint missing parameter blob {key!r}")
        arr = blobs[key]
        if arr.shape != t.data.shape:
            raise CheckpointError(f"blob {key!r} has shape {arr.shape}, expected {t.data.shape}")
        t.data = arr.astype(dtype or t.data.dtype)


def _adam_to_blobs(opt: Adam, tag: str) -> dict[str, np.ndarray]:
    out = {}
    for name in opt.params:
        out[f"adam:{tag}:m:{name}"] = opt.state.m[name].astype(np.float64)
        out[f"adam:{tag}:v:{name}"] = opt.state.v[name].astype(np.float64)
    return out


def _adam_from_blobs(opt: Adam, tag: str, blobs, meta: dict):
    for name in opt.params:
        opt.state.m[name] = blobs[f"adam:{tag}:m:{name}"].astype(opt.params[name].dtype)
        opt.state.v[name] = blobs[f"adam:{tag}:v:{name}"].astype(opt.params[name].dtype)
    opt.state.step_count = int(meta[f"adam_steps_{tag}"])
    opt.state.lr = float(meta[f"adam_lr_{tag}"])


# ---------------------------------------------------------------------------
# model bundle
# ---------------------------------------------------------------------------


@dataclass
class ModelBundle:
    """All four parameter sets plus the shared perceptual extractor."""

    trans_est: est.TransmissionEstimatorParams
    atmo_est: est.AtmosphericEstimatorParams
    dehazer: dh.DehazerParams
    updaters: dh.UpdaterParams
    feature_extractor: quality.FeatureExtractorParams
    t1: int = dh.TIME_STEPS_DEFAULT

    @staticmethod
    def create(seed: int, dtype=np.float64, pool_kind: str = "max", t1: int = dh.TIME_STEPS_DEFAULT) -> "ModelBundle":
        ss = np.random.SeedSequence([seed, 0xB0D1])
        r_te, r_ae, r_dh, r_up = [np.random.default_rng(s) for s in ss.spawn(4)]
        return ModelBundle(
            trans_est=est.TransmissionEstimatorParams.create(r_te, dtype=dtype),
            atmo_est=est.AtmosphericEstimatorParams.create(r_ae, dtype=dtype, pool_kind=pool_kind),
            dehazer=dh.DehazerParams.create(r_dh, dtype=dtype),
            updaters=dh.UpdaterParams.create(r_up, dtype=dtype),
            feature_extractor=quality.FeatureExtractorParams.create(seed=seed + 77, dtype=dtype),
            t1=t1,
        )

    def named(self) -> dict[str, Tensor]:
        out = {}
        out.update(self.trans_est.named())
        out.update(self.atmo_est.named())
        out.update(self.dehazer.named())
        out.update(self.updaters.named())
        return out

    def to_blobs(self) -> dict[str, np.ndarray]:
        return _params_to_blobs(self.named())

    def load_blobs(self, blobs: dict[str, np.ndarray], dtype=None):
        _blobs_into_params(blobs, self.named(), dtype=dtype)

    def dehaze(self, hazy: np.ndarray, t1: int | None = None):
        """Full inference on one (H, W, 3) image; returns (dehazed, trajectory, priors)."""
        dtype = self.dehazer.bag["f_in/w"].dtype
        img = _to_tensor_img(hazy, dtype)
        with ad.no_grad():
            t0 = est.estimate_transmission(img, self.trans_est)
            a0 = est.estimate_atmospheric(img, self.atmo_est)
            out, traj = dh.run_ipudn(img, t0, a0, self.dehazer, self.updaters, t1 or self.t1)
        dehazed = out.data[0].transpose(1, 2, 0).astype(np.float64)
        return np.clip(dehazed, 0.0, 1.0), traj, (t0.data[0, 0].astype(np.float64), a0.data[0, :, 0, 0].astype(np.float64))


# ---------------------------------------------------------------------------
# training loops
# ---------------------------------------------------------------------------


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class StageHistory:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)
    best_val: float = float("inf")
    best_iteration: int = -1


def _guard(loss_value: float, history: list[float], factor: float):
    if not np.isfinite(loss_value):
        raise TrainingDiverged(f"loss became non-finite: {loss_value}")
    if len(history) >= 20:
        med = float(np.median(history[-50:]))
        if med > 0 and loss_value > factor * med:
            raise TrainingDiverged(f"loss {loss_value:.3g} exceeds {factor}x running median {med:.3g}")


def _lr_at(cfg: TrainConfig, iteration: int) -> float:
    return cfg.lr_initial * 0.5 ** (iteration // cfg.lr_decay_halving_period)


def _rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def _rng_from_state(state: dict) -> np.random.Generator:
    rng = np.random.default_rng(0)
    rng.bit_generator.state = state
    return rng


def _train_rng(cfg: TrainConfig, tag: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([cfg.seed, tag]))


class StageRunner:
    """Shared iteration scaffolding: schedule, validation, best-tracking, resume.

    Subclass hooks supply one batch update and one validation sweep; this
    class owns everything that must round-trip through checkpoints so an
    interrupted run continues bitwise identically.
    """

    stage_tag = 0

    def __init__(self, cfg: TrainConfig, bundle: ModelBundle, log=None):
        self.cfg = cfg
        self.bundle = bundle
        self.log = log or (lambda msg: None)
        self.history = StageHistory()
        self.iteration = 0
        self.rng = _train_rng(cfg, self.stage_tag)
        self.opts: dict[str, Adam] = {}
        self.best_blobs: dict[str, np.ndarray] | None = None

    # hooks ---------------------------------------------------------------
    def one_update(self) -> float:
        raise NotImplementedError

    def validate(self) -> float:
        raise NotImplementedError

    def tracked_params(self) -> dict[str, Tensor]:
        raise NotImplementedError

    # scaffolding ---------------------------------------------------------
    def set_lr(self):
        lr = _lr_at(self.cfg, self.iteration)
        for name, opt in self.opts.items():
            opt.state.lr = lr * (self.cfg.estimator_lr_ratio if name == "est" else 1.0)

    def run(self, checkpoint_path=None) -> StageHistory:
        cfg = self.cfg
        while self.iteration < cfg.iterations:
            self.set_lr()
            for _ in range(cfg.batch_updates_per_iteration):
                loss_value = self.one_update()
                _guard(loss_value, self.history.train_loss, cfg.divergence_factor)
                self.history.train_loss.append(loss_value)
            self.iteration += 1
            val = self.validate()
            self.history.val_loss.append(val)
            self.history.lr.append(_lr_at(cfg, self.iteration - 1))
            if val < self.history.best_val:
                self.history.best_val = val
                self.history.best_iteration = self.iteration
                self.best_blobs = _params_to_blobs(self.tracked_params())
            self.log(
                f"stage{cfg.stage} iter {self.iteration}/{cfg.iterations}: "
                f"train {np.mean(self.history.train_loss[-cfg.batch_updates_per_iteration:]):.4f} "
                f"val {val:.4f}"
            )
            if checkpoint_path is not None:
                save_checkpoint(checkpoint_path, self.to_checkpoint())
        if self.best_blobs is not None:
            _blobs_into_params(self.best_blobs, self.tracked_params())
        return self.history

    def to_checkpoint(self) -> Checkpoint:
        blobs = self.bundle.to_blobs()
        trainer = {
            "stage": self.cfg.stage,
            "which": getattr(self, "which", None),
            "iteration": self.iteration,
            "train_loss": self.history.train_loss,
            "val_loss": self.history.val_loss,
            "lr_history": self.history.lr,
            "best_val": self.history.best_val,
            "best_iteration": self.history.best_iteration,
            "has_best": self.best_blobs is not None,
        }
        for tag, opt in self.opts.items():
            blobs.update(_adam_to_blobs(opt, tag))
            trainer[f"adam_steps_{tag}"] = opt.state.step_count
            trainer[f"adam_lr_{tag}"] = opt.state.lr
        if self.best_blobs is not None:
            blobs.update({f"best:{k}": v for k, v in self.best_blobs.items()})
        return Checkpoint(
            fingerprint=FINGERPRINT,
            config=self.cfg.to_dict(),
            trainer=trainer,
            rng_state=_rng_state(self.rng),
            blobs=blobs,
        )

    def restore(self, ckpt: Checkpoint):
        if int(ckpt.trainer["stage"]) != self.cfg.stage:
            raise CheckpointError(f"checkpoint is for stage {ckpt.trainer['stage']}, runner is stage {self.cfg.stage}")
        self.bundle.load_blobs(ckpt.blobs)
        self.iteration = int(ckpt.trainer["iteration"])
        self.history.train_loss = [float(v) for v in ckpt.trainer["train_loss"]]
        self.history.val_loss = [float(v) for v in ckpt.trainer["val_loss"]]
        self.history.lr = [float(v) for v in ckpt.trainer["lr_history"]]
        self.history.best_val = float(ckpt.trainer["best_val"])
        self.history.best_iteration = int(ckpt.trainer["best_iteration"])
        for tag, opt in self.opts.items():
            _adam_from_blobs(opt, tag, ckpt.blobs, ckpt.trainer)
        if ckpt.trainer.get("has_best"):
            prefix = "best:"
            self.best_blobs = {k[len(prefix):]: v for k, v in ckpt.blobs.items() if k.startswith(prefix)}
        self.rng = _rng_from_state(ckpt.rng_state)
        self.after_restore()

    def after_restore(self):
        """Hook for caches that depend on restored parameters."""


class _EstimatorStage(StageRunner):
    """Stage 1: the two prior estimators, trained separately on fresh haze."""

    stage_tag = 1

    def __init__(self, cfg: TrainConfig, bundle: ModelBundle, which: str, log=None):
        super().__init__(cfg, bundle, log)
        if which not in ("trans", "atmo"):
            raise ConfigError(f"which must be 'trans' or 'atmo', got {which!r}")
        self.which = which
        self.stage_tag = 1 if which == "trans" else 2
        self.rng = _train_rng(cfg, self.stage_tag)
        dtype = cfg.dtype
        for bag in (bundle.trans_est.bag, bundle.atmo_est.bag):
            for t in bag.tensors.values():
                t.data = t.data.astype(dtype)
        params = bundle.trans_est.named() if which == "trans" else bundle.atmo_est.named()
        self.opts = {"main": Adam(params, lr=cfg.lr_initial)}
        scene_rng = _train_rng(cfg, 100)
        self.scenes = build_scene_pool(cfg, scene_rng, cfg.train_scenes)
        self.val_set = build_validation_set(cfg)

    def tracked_params(self):
        return self.bundle.trans_est.named() if self.which == "trans" else self.bundle.atmo_est.named()

    def _draw_batch(self):
        cfg = self.cfg
        imgs, tmaps, amaps = [], [], []
        for _ in range(cfg.batch_size):
            clean, depth = self.scenes[int(self.rng.integers(0, len(self.scenes)))]
            sample = make_hazy_sample(clean, depth, sample_haze_params(self.rng, cfg))
            planes = (sample.hazy, sample.trans)
            if cfg.patch_size < cfg.scene_size:
                planes = extract_patches(planes, cfg.patch_size, 1, self.rng)[0]
            hazy, trans = augment(planes, self.rng)
            imgs.append(hazy)
            tmaps.append(trans)
            amaps.append(sample.haze.a.as_array())
        dtype = cfg.dtype
        return (
            _batch_images(imgs, dtype),
            _batch_maps(tmaps, dtype),
            Tensor(np.asarray(amaps, dtype=dtype)[:, :, None, None]),
        )

    def one_update(self) -> float:
        imgs, tmaps, amaps = self._draw_batch()
        if self.which == "trans":
            loss = est.ssim_loss(est.estimate_transmission(imgs, self.bundle.trans_est), tmaps)
        else:
            loss = quality.mse_loss(est.estimate_atmospheric(imgs, self.bundle.atmo_est), amaps)
        loss.backward()
        self.opts["main"].step()
        return float(loss.data)

    def validate(self) -> float:
        cfg = self.cfg
        dtype = cfg.dtype
        total = 0.0
        with ad.no_grad():
            for start in range(0, len(self.val_set), 8):
                chunk = self.val_set[start : start + 8]
                imgs = _batch_images([s.hazy for s in chunk], dtype)
                if self.which == "trans":
                    tmaps = _batch_maps([s.trans for s in chunk], dtype)
                    loss = est.ssim_loss(est.estimate_transmission(imgs, self.bundle.trans_est), tmaps)
                else:
                    amaps = Tensor(np.asarray([s.haze.a.as_array() for s in chunk], dtype=dtype)[:, :, None, None])
                    loss = quality.mse_loss(est.estimate_atmospheric(imgs, self.bundle.atmo_est), amaps)
                total += float(loss.data) * len(chunk)
        return total / len(self.val_set)


class _DehazerStage(StageRunner):
    """Stage 2: dehazer + updaters on the reconstruction loss, estimators frozen."""

    stage_tag = 3

    def __init__(self, cfg: TrainConfig, bundle: ModelBundle, log=None, atmo_update: str = "global"):
        super().__init__(cfg, bundle, log)
        dtype = cfg.dtype
        for bag in (bundle.dehazer.bag, bundle.updaters.trans, bundle.updaters.atmo):
            for t in bag.tensors.values():
                t.data = t.data.astype(dtype)
        self.atmo_update = atmo_update
        bundle.trans_est.bag.set_trainable(False)
        bundle.atmo_est.bag.set_trainable(False)
        params = {}
        params.update(bundle.dehazer.named())
        params.update(bundle.updaters.named())
        self.opts = {"main": Adam(params, lr=cfg.lr_initial)}

        scene_rng = _train_rng(cfg, 100)  # same scenes as stage 1 by construction
        self.scenes = build_scene_pool(cfg, scene_rng, cfg.train_scenes)
        pool_rng = _train_rng(cfg, 200)
        self.pool: list[HazySample] = []
        for _ in range(cfg.sample_pool):
            clean, depth = self.scenes[int(pool_rng.integers(0, len(self.scenes)))]
            self.pool.append(make_hazy_sample(clean, depth, sample_haze_params(pool_rng, cfg)))
        attach_estimator_priors(self.pool, bundle.trans_est, bundle.atmo_est, dtype)
        self.val_set = build_validation_set(cfg)
        attach_estimator_priors(self.val_set, bundle.trans_est, bundle.atmo_est, dtype)

    def tracked_params(self):
        params = {}
        params.update(self.bundle.dehazer.named())
        params.update(self.bundle.updaters.named())
        return params

    def after_restore(self):
        # priors depend on the (frozen) estimator weights that just changed
        attach_estimator_priors(self.pool, self.bundle.trans_est, self.bundle.atmo_est, self.cfg.dtype)
        attach_estimator_priors(self.val_set, self.bundle.trans_est, self.bundle.atmo_est, self.cfg.dtype)

    def _draw_batch(self):
        cfg = self.cfg
        imgs, priors_t, priors_a, cleans = [], [], [], []
        for _ in range(cfg.batch_size):
            s = self.pool[int(self.rng.integers(0, len(self.pool)))]
            planes = (s.hazy, s.est_trans, s.clean)
            if cfg.patch_size < cfg.scene_size:
                planes = extract_patches(planes, cfg.patch_size, 1, self.rng)[0]
            hazy, t_est, clean = augment(planes, self.rng)
            imgs.append(hazy)
            priors_t.append(t_est)
            priors_a.append(s.est_atmo)
            cleans.append(clean)
        dtype = cfg.dtype
        return (
            _batch_images(imgs, dtype),
            _batch_maps(priors_t, dtype),
            Tensor(np.asarray(priors_a, dtype=dtype)[:, :, None, None]),
            _batch_images(cleans, dtype),
        )

    def _forward_loss(self, imgs, t0, a0, cleans):
        out, traj = dh.run_ipudn(
            imgs, t0, a0, self.bundle.dehazer, self.bundle.updaters, self.cfg.t1, atmo_update=self.atmo_update
        )
        pred = [s.i_prime for s in traj] if self.cfg.loss.loss_kind == "recursive_l1" else out
        return quality.total_loss(pred, cleans, self.cfg.loss, self.bundle.feature_extractor)

    def one_update(self) -> float:
        imgs, t0, a0, cleans = self._draw_batch()
        loss = self._forward_loss(imgs, t0, a0, cleans)
        loss.backward()
        self.opts["main"].step()
        return float(loss.data)

    def validate(self) -> float:
        cfg = self.cfg
        dtype = cfg.dtype
        total = 0.0
        with ad.no_grad():
            for start in range(0, len(self.val_set), 8):
                chunk = self.val_set[start : start + 8]
                imgs = _batch_images([s.hazy for s in chunk], dtype)
                t0 = _batch_maps([s.est_trans for s in chunk], dtype)
                a0 = Tensor(np.asarray([s.est_atmo for s in chunk], dtype=dtype)[:, :, None, None])
                cleans = _batch_images([s.clean for s in chunk], dtype)
                loss = self._forward_loss(imgs, t0, a0, cleans)
                total += float(loss.data) * len(chunk)
        return total / len(self.val_set)


class _JointStage(StageRunner):
    """Stage 3: joint fine-tuning; estimators run in-graph at a reduced rate."""

    stage_tag = 4

    def __init__(self, cfg: TrainConfig, bundle: ModelBundle, log=None):
        super().__init__(cfg, bundle, log)
        dtype = cfg.dtype
        for t in bundle.named().values():
            t.data = t.data.astype(dtype)
        bundle.trans_est.bag.set_trainable(True)
        bundle.atmo_est.bag.set_trainable(True)
        main = {}
        main.update(bundle.dehazer.named())
        main.update(bundle.updaters.named())
        estp = {}
        estp.update(bundle.trans_est.named())
        estp.update(bundle.atmo_est.named())
        self.opts = {
            "main": Adam(main, lr=cfg.lr_initial),
            "est": Adam(estp, lr=cfg.lr_initial * cfg.estimator_lr_ratio),
        }
        scene_rng = _train_rng(cfg, 100)
        self.scenes = build_scene_pool(cfg, scene_rng, cfg.train_scenes)
        self.val_set = build_validation_set(cfg)

    def tracked_params(self):
        return self.bundle.named()

    def _draw_batch(self):
        cfg = self.cfg
        imgs, tmaps, amaps, cleans = [], [], [], []
        for _ in range(cfg.batch_size):
            clean, depth = self.scenes[int(self.rng.integers(0, len(self.scenes)))]
            s = make_hazy_sample(clean, depth, sample_haze_params(self.rng, cfg))
            planes = (s.hazy, s.trans, s.clean)
            if cfg.patch_size < cfg.scene_size:
                planes = extract_patches(planes, cfg.patch_size, 1, self.rng)[0]
            hazy, t_true, clean_p = augment(planes, self.rng)
            imgs.append(hazy)
            tmaps.append(t_true)
            amaps.append(s.haze.a.as_array())
            cleans.append(clean_p)
        dtype = cfg.dtype
        return (
            _batch_images(imgs, dtype),
            _batch_maps(tmaps, dtype),
            Tensor(np.asarray(amaps, dtype=dtype)[:, :, None, None]),
            _batch_images(cleans, dtype),
        )

    def _losses(self, imgs, t_true, a_true, cleans):
        t0 = est.estimate_transmission(imgs, self.bundle.trans_est)
        a0 = est.estimate_atmospheric(imgs, self.bundle.atmo_est)
        out, traj = dh.run_ipudn(imgs, t0, a0, self.bundle.dehazer, self.bundle.updaters, self.cfg.t1)
        pred = [s.i_prime for s in traj] if self.cfg.loss.loss_kind == "recursive_l1" else out
        recon = quality.total_loss(pred, cleans, self.cfg.loss, self.bundle.feature_extractor)
        # every network keeps its own stage objective during the joint pass
        return recon + est.ssim_loss(t0, t_true) + quality.mse_loss(a0, a_true)

    def one_update(self) -> float:
        loss = self._losses(*self._draw_batch())
        loss.backward()
        self.opts["main"].step()
        self.opts["est"].step()
        return float(loss.data)

    def validate(self) -> float:
        cfg = self.cfg
        dtype = cfg.dtype
        total = 0.0
        with ad.no_grad():
            for start in range(0, len(self.val_set), 8):
                chunk = self.val_set[start : start + 8]
                imgs = _batch_images([s.hazy for s in chunk], dtype)
                t_true = _batch_maps([s.trans for s in chunk], dtype)
                a_true = Tensor(np.asarray([s.haze.a.as_array() for s in chunk], dtype=dtype)[:, :, None, None])
                cleans = _batch_images([s.clean for s in chunk], dtype)
                loss = self._losses(imgs, t_true, a_true, cleans)
                total += float(loss.data) * len(chunk)
        return total / len(self.val_set)


def train_stage1(cfg: TrainConfig, bundle: ModelBundle, which: str = "both", log=None,
                 checkpoint_path=None, resume: Checkpoint | None = None) -> dict[str, StageHistory]:
    """Train the prior estimators; returns per-network histories."""
    histories = {}
    targets = ("trans", "atmo") if which == "both" else (which,)
    for name in targets:
        runner = _EstimatorStage(cfg, bundle, name, log)
        if resume is not None and resume.trainer.get("which") == name:
            runner.restore(resume)
        path = None
        if checkpoint_path is not None:
            path = str(checkpoint_path) + f".{name}"
        histories[name] = runner.run(path)
    return histories


def train_stage2(cfg: TrainConfig, bundle: ModelBundle, log=None, checkpoint_path=None,
                 resume: Checkpoint | None = None, atmo_update: str = "global") -> StageHistory:
    """Train the iterative dehazer with frozen estimators."""
    runner = _DehazerStage(cfg, bundle, log, atmo_update=atmo_update)
    if resume is not None:
        runner.restore(resume)
    return runner.run(checkpoint_path)


def train_stage3(cfg: TrainConfig, bundle: ModelBundle, log=None, checkpoint_path=None,
                 resume: Checkpoint | None = None) -> StageHistory:
    """Fine-tune all three networks jointly."""
    runner = _JointStage(cfg, bundle, log)
    if resume is not None:
        runner.restore(resume)
    return runner.run(checkpoint_path)


def make_runner(cfg: TrainConfig, bundle: ModelBundle, log=None, which: str = "trans"):
    """The stage runner for cfg.stage, mainly for resume-style workflows."""
    if cfg.stage == 1:
        return _EstimatorStage(cfg, bundle, which, log)
    if cfg.stage == 2:
        return _DehazerStage(cfg, bundle, log)
    return _JointStage(cfg, bundle, log)


# ---------------------------------------------------------------------------
# evaluation helpers
# ---------------------------------------------------------------------------


def evaluate_bundle(bundle: ModelBundle, samples: list[HazySample], t1: int | None = None, batch: int = 8) -> dict:
    """Mean PSNR/SSIM/CIEDE2000 of the full pipeline over hazy samples."""
    dtype = bundle.dehazer.bag["f_in/w"].dtype
    outs = []
    with ad.no_grad():
        for start in range(0, len(samples), batch):
            chunk = samples[start : start + batch]
            imgs = _batch_images([s.hazy for s in chunk], dtype)
            t0 = est.estimate_transmission(imgs, bundle.trans_est)
            a0 = est.estimate_atmospheric(imgs, bundle.atmo_est)
            out, _ = dh.run_ipudn(imgs, t0, a0, bundle.dehazer, bundle.updaters, t1 or bundle.t1)
            for i in range(len(chunk)):
                outs.append(np.clip(out.data[i].transpose(1, 2, 0).astype(np.float64), 0.0, 1.0))
    return metrics_against_clean(outs, [s.clean for s in samples])


def metrics_against_clean(preds: list[np.ndarray], cleans: list[np.ndarray]) -> dict:
    psnrs = [quality.psnr(p, c) for p, c in zip(preds, cleans)]
    ssims = [quality.ssim_value(p, c) for p, c in zip(preds, cleans)]
    des = [quality.ciede2000(p, c) for p, c in zip(preds, cleans)]
    return {
        "psnr": float(np.mean(psnrs)),
        "ssim": float(np.mean(ssims)),
        "ciede2000": float(np.mean(des)),
        "per_image": list(zip(psnrs, ssims, des)),
    }


# ---------------------------------------------------------------------------
# ablation harness
# ---------------------------------------------------------------------------

ABLATION_AXES = ("pool_kind", "update_locality", "time_steps", "loss_kind")


@dataclass
class AblationReport:
    axis: str
    columns: list[str]
    rows: list[dict]

    def to_delimited(self) -> str:
        lines = ["\t".join(self.columns)]
        for row in self.rows:
            lines.append("\t".join(str(row[c]) for c in self.columns))
        return "\n".join(lines) + "\n"


def _band_samples(cfg: TrainConfig, bands: tuple[str, ...], per_band: int, tag: int) -> dict[str, list[HazySample]]:
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, tag]))
    out: dict[str, list[HazySample]] = {}
    scenes = [gen_scene(rng, cfg.scene_size) for _ in range(per_band)]
    for band in bands:
        out[band] = [
            make_hazy_sample(clean, depth, sample_haze_params(rng, cfg, band)) for clean, depth in scenes
        ]
    return out


def ablate_pool_kind(cfg: TrainConfig, log=None) -> AblationReport:
    """Max vs average global pooling in the atmospheric estimator (MSE of A)."""
    held_out = _band_samples(cfg, ("low", "mid", "high", "cast"), max(8, cfg.val_scenes), 0xAB1)
    stage1 = TrainConfig(**{**cfg.to_kwargs(), "stage": 1})
    rows = []
    for kind in ("max", "avg"):
        bundle = ModelBundle.create(cfg.seed, dtype=cfg.dtype, pool_kind=kind)
        train_stage1(stage1, bundle, which="atmo", log=log)
        row = {"pool_kind": kind}
        for band, samples in held_out.items():
            with ad.no_grad():
                imgs = _batch_images([s.hazy for s in samples], cfg.dtype)
                a_hat = est.estimate_atmospheric(imgs, bundle.atmo_est).data[:, :, 0, 0]
            a_true = np.asarray([s.haze.a.as_array() for s in samples])
            row[f"mse_{band}"] = float(np.mean((a_hat.astype(np.float64) - a_true) ** 2))
        rows.append(row)
        if log:
            log(f"pool_kind={kind}: " + " ".join(f"{k}={v:.3g}" for k, v in row.items() if k != "pool_kind"))
    return AblationReport(axis="pool_kind", columns=["pool_kind", "mse_low", "mse_mid", "mse_high", "mse_cast"], rows=rows)


def _eval_rows(bundle: ModelBundle, held_out: dict[str, list[HazySample]], label_key: str, label, t1=None) -> dict:
    row = {label_key: label}
    for band, samples in held_out.items():
        m = evaluate_bundle(bundle, samples, t1=t1)
        row[f"psnr_{band}"] = round(m["psnr"], 3)
        row[f"ssim_{band}"] = round(m["ssim"], 4)
        row[f"ciede_{band}"] = round(m["ciede2000"], 3)
    return row


def _stage12(cfg: TrainConfig, log, **stage2_kwargs) -> ModelBundle:
    bundle = ModelBundle.create(cfg.seed, dtype=cfg.dtype, t1=cfg.t1)
    stage1 = TrainConfig(**{**cfg.to_kwargs(), "stage": 1})
    train_stage1(stage1, bundle, log=log)
    stage2 = TrainConfig(**{**cfg.to_kwargs(), "stage": 2})
    train_stage2(stage2, bundle, log=log, **stage2_kwargs)
    return bundle


def run_ablation(axis: str, cfg: TrainConfig, log=None) -> AblationReport:
    """Train/evaluate paired configurations differing only on ``axis``."""
    if axis not in ABLATION_AXES:
        raise ParameterError(f"axis must be one of {ABLATION_AXES}, got {axis!r}")
    if axis == "pool_kind":
        return ablate_pool_kind(cfg, log)

    held_out = _band_samples(cfg, ("low", "mid", "high", "cast"), max(8, cfg.val_scenes), 0xAB2)
    bands = list(held_out.keys())
    rows = []
    if axis == "update_locality":
        for mode in ("global", "local"):
            bundle = _stage12(cfg, log, atmo_update=mode)
            # evaluation must run the same update mode the twin was trained with
            m = {}
            for band, samples in held_out.items():
                m[band] = _evaluate_mode(bundle, samples, cfg, mode)
            row = {"update_locality": mode}
            for band in bands:
                row[f"psnr_{band}"] = round(m[band]["psnr"], 3)
                row[f"ssim_{band}"] = round(m[band]["ssim"], 4)
                row[f"ciede_{band}"] = round(m[band]["ciede2000"], 3)
            rows.append(row)
        label_key = "update_locality"
    elif axis == "time_steps":
        for steps in (3, 6, 9):
            sub = TrainConfig(**{**cfg.to_kwargs(), "t1": steps})
            bundle = _stage12(sub, log)
            rows.append(_eval_rows(bundle, held_out, "time_steps", steps, t1=steps))
        label_key = "time_steps"
    else:  # loss_kind
        for kind in ("mse", "recursive_l1", "l1"):
            sub = TrainConfig(**{**cfg.to_kwargs(), "loss": quality.LossConfig(
                lambda_p=cfg.loss.lambda_p, loss_kind=kind, perceptual_enabled=cfg.loss.perceptual_enabled)})
            bundle = _stage12(sub, log)
            rows.append(_eval_rows(bundle, held_out, "loss_kind", kind))
        label_key = "loss_kind"

    columns = [label_key]
    for band in bands:
        columns += [f"psnr_{band}", f"ssim_{band}", f"ciede_{band}"]
    return AblationReport(axis=axis, columns=columns, rows=rows)


def _evaluate_mode(bundle: ModelBundle, samples: list[HazySample], cfg: TrainConfig, mode: str) -> dict:
    dtype = cfg.dtype
    outs = []
    with ad.no_grad():
        for start in range(0, len(samples), 8):
            chunk = samples[start : start + 8]
            imgs = _batch_images([s.hazy for s in chunk], dtype)
            t0 = est.estimate_transmission(imgs, bundle.trans_est)
            a0 = est.estimate_atmospheric(imgs, bundle.atmo_est)
            out, _ = dh.run_ipudn(imgs, t0, a0, bundle.dehazer, bundle.updaters, cfg.t1, atmo_update=mode)
            for i in range(len(chunk)):
                outs.append(np.clip(out.data[i].transpose(1, 2, 0).astype(np.float64), 0.0, 1.0))
    return metrics_against_clean(outs, [s.clean for s in samples])
