"""Calibration probe: how fast does the desk-scale schedule converge?

Runs stage 1 at reference scale, then stage 2 with per-iteration held-out
PSNR probes, then a short stage 3.  Prints wall times and the metric
trajectory so the reference schedule can be sized against the acceptance
thresholds.  Not part of the shipped package.
"""

import sys
import time

import numpy as np

sys.path.insert(0, "src")

from iterdehaze import pipeline as pl
from iterdehaze import quality, scattering

SEED = 0
t_start = time.time()


def log(msg):
    print(f"[{time.time()-t_start:7.1f}s] {msg}", flush=True)


cfg1 = pl.reference_config(1, SEED)
bundle = pl.ModelBundle.create(SEED, dtype=cfg1.dtype)

# held-out suite (distinct seed stream from training/validation)
held_cfg = pl.TrainConfig(seed=SEED + 1000, scene_size=64, patch_size=64)
held_rng = np.random.default_rng(np.random.SeedSequence([SEED, 0x7E57]))
held = {band: [] for band in ("low", "mid", "high", "cast")}
scenes = [pl.gen_scene(held_rng, 64) for _ in range(12)]
for band in held:
    for clean, depth in scenes:
        held[band].append(pl.make_hazy_sample(clean, depth, pl.sample_haze_params(held_rng, held_cfg, band)))

for band, samples in held.items():
    hazy_psnr = np.mean([quality.psnr(s.hazy, s.clean) for s in samples])
    dcp_psnr = np.mean([quality.psnr(scattering.dcp_dehaze(s.hazy)[0], s.clean) for s in samples])
    hazy_de = np.mean([quality.ciede2000(s.hazy, s.clean) for s in samples])
    log(f"baseline {band}: hazy_psnr={hazy_psnr:.2f} dcp_psnr={dcp_psnr:.2f} hazy_ciede={hazy_de:.2f}")

log("stage 1 ...")
h1 = pl.train_stage1(cfg1, bundle, log=log)

# estimator quality on held-out mid band
from iterdehaze import estimators as est
from iterdehaze import autodiff as ad

mid = held["mid"]
with ad.no_grad():
    imgs = pl._batch_images([s.hazy for s in mid], cfg1.dtype)
    t_hat = est.estimate_transmission(imgs, bundle.trans_est).data
    a_hat = est.estimate_atmospheric(imgs, bundle.atmo_est).data[:, :, 0, 0]
ssims = [quality.ssim_value(t_hat[i, 0].astype(np.float64), mid[i].trans) for i in range(len(mid))]
maes = [np.abs(a_hat[i].astype(np.float64) - mid[i].haze.a.as_array()).mean() for i in range(len(mid))]
log(f"stage1 quality: mean SSIM(T)={np.mean(ssims):.4f}  mean MAE(A)={np.mean(maes):.4f}")

log("stage 2 with probes ...")
cfg2 = pl.reference_config(2, SEED)
runner = pl._DehazerStage(cfg2, bundle, log=log)
probe_history = []
while runner.iteration < cfg2.iterations:
    runner.set_lr()
    it_t0 = time.time()
    for _ in range(cfg2.batch_updates_per_iteration):
        loss_value = runner.one_update()
        runner.history.train_loss.append(loss_value)
    runner.iteration += 1
    val = runner.validate()
    runner.history.val_loss.append(val)
    if val < runner.history.best_val:
        runner.history.best_val = val
        runner.history.best_iteration = runner.iteration
        runner.best_blobs = pl._params_to_blobs(runner.tracked_params())
    m_mid = pl.evaluate_bundle(bundle, held["mid"])
    probe_history.append(m_mid["psnr"])
    log(f"iter {runner.iteration}: train={np.mean(runner.history.train_loss[-cfg2.batch_updates_per_iteration:]):.4f} "
        f"val={val:.4f} held_mid_psnr={m_mid['psnr']:.2f} ({time.time()-it_t0:.0f}s/iter)")
if runner.best_blobs is not None:
    pl._blobs_into_params(runner.best_blobs, runner.tracked_params())

log("stage2 final held-out metrics:")
stage2_metrics = {}
for band, samples in held.items():
    m = pl.evaluate_bundle(bundle, samples)
    stage2_metrics[band] = m
    log(f"  {band}: psnr={m['psnr']:.2f} ssim={m['ssim']:.4f} ciede={m['ciede2000']:.2f}")

log("stage 3 ...")
cfg3 = pl.reference_config(3, SEED)
h3 = pl.train_stage3(cfg3, bundle, log=log)
log("stage3 final held-out metrics:")
for band, samples in held.items():
    m = pl.evaluate_bundle(bundle, samples)
    log(f"  {band}: psnr={m['psnr']:.2f} ssim={m['ssim']:.4f} ciede={m['ciede2000']:.2f} "
        f"(stage2 was {stage2_metrics[band]['psnr']:.2f})")

log("done")
