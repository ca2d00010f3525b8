"""Command-line front end.

Exit codes: 0 success, 1 usage or invalid parameters, 2 I/O or file-format
problems, 3 checkpoint incompatibility.  Machine-readable results go to
stdout, diagnostics to stderr.  Every command is deterministic given --seed.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import autodiff as ad
from . import dehazer as dh
from . import estimators as est
from . import imgio, pipeline, quality, report, scattering
from .errors import (
    CheckpointError,
    ConfigError,
    ContractError,
    ImageFormatError,
    IterdehazeError,
    ParameterError,
    ShapeError,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_IO = 2
EXIT_CHECKPOINT = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _log(msg: str):
    print(msg, file=sys.stderr)


def _parse_rgb(text: str) -> scattering.AtmosphericLight:
    parts = text.split(",")
    if len(parts) != 3:
        raise ParameterError(f"expected r,g,b triple, got {text!r}")
    return scattering.AtmosphericLight(*(float(p) for p in parts))


# ---------------------------------------------------------------------------
# checkpoint <-> bundle
# ---------------------------------------------------------------------------


def _bundle_from_checkpoint(path) -> tuple[pipeline.ModelBundle, pipeline.TrainConfig]:
    ckpt = pipeline.load_checkpoint(path)
    cfg = pipeline.TrainConfig.from_dict(ckpt.config)
    bundle = pipeline.ModelBundle.create(cfg.seed, dtype=cfg.dtype, t1=cfg.t1)
    bundle.load_blobs(ckpt.blobs)
    return bundle, cfg


def _save_bundle(path, bundle: pipeline.ModelBundle, cfg: pipeline.TrainConfig, trainer: dict):
    ckpt = pipeline.Checkpoint(
        fingerprint=pipeline.FINGERPRINT,
        config=cfg.to_dict(),
        trainer=trainer,
        rng_state=None,
        blobs=bundle.to_blobs(),
    )
    pipeline.save_checkpoint(path, ckpt)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    out = Path(args.out)
    for sub in ("clean", "depth", "hazy"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    cfg = pipeline.TrainConfig(seed=args.seed, scene_size=args.size, patch_size=min(args.size, 64))
    rng = np.random.default_rng(np.random.SeedSequence([args.seed, 0xDA7A]))
    band = None if args.haze == "random" else args.haze
    rows = []
    for i in range(args.count):
        clean, depth = pipeline.gen_scene(rng, args.size)
        haze = pipeline.sample_haze_params(rng, cfg, band)
        sample = pipeline.make_hazy_sample(clean, depth, haze)
        name = f"{i:04d}"
        imgio.write_ppm(out / "clean" / f"{name}.ppm", sample.clean)
        imgio.write_pgm(out / "depth" / f"{name}.pgm", sample.depth, maxval=65535)
        imgio.write_ppm(out / "hazy" / f"{name}.ppm", sample.hazy)
        a = haze.a
        rows.append(
            {"name": name, "band": args.haze, "beta": f"{haze.beta:.6f}",
             "a_r": f"{a.r:.6f}", "a_g": f"{a.g:.6f}", "a_b": f"{a.b:.6f}"}
        )
    csv_path, _ = report.write_table(out / "manifest", ["name", "band", "beta", "a_r", "a_g", "a_b"], rows)
    print(f"dir={out} count={args.count} manifest={csv_path}")
    return EXIT_OK


def cmd_synth(args) -> int:
    clean = imgio.read_ppm(args.clean)
    depth = imgio.read_pgm(args.depth)
    t = scattering.transmission_from_depth(depth, args.beta)
    hazy = scattering.synthesize_haze(clean, t, _parse_rgb(args.atmo))
    imgio.write_ppm(args.out, hazy)
    if args.t_out:
        imgio.write_pgm(args.t_out, t, maxval=65535)
    print(f"out={args.out} beta={args.beta} min_t={t.min():.4f}")
    return EXIT_OK


def _write_trace(trace_dir: Path, hazy: np.ndarray, prior_t: np.ndarray, prior_a: np.ndarray, traj):
    trace_dir.mkdir(parents=True, exist_ok=True)
    imgio.write_ppm(trace_dir / "step0_image.ppm", hazy)
    imgio.write_pgm(trace_dir / "step0_trans.pgm", prior_t)
    rows = [{"step": 0, "a_r": f"{prior_a[0]:.6f}", "a_g": f"{prior_a[1]:.6f}", "a_b": f"{prior_a[2]:.6f}"}]
    steps = []
    for state in traj:
        idx = state.step
        img = np.clip(state.i_prime.data[0].transpose(1, 2, 0).astype(np.float64), 0, 1)
        tmap = np.clip(state.t_prime.data[0, 0].astype(np.float64), 0, 1)
        avec = state.a_prime.data[0, :, 0, 0].astype(np.float64)
        imgio.write_ppm(trace_dir / f"step{idx}_image.ppm", img)
        imgio.write_pgm(trace_dir / f"step{idx}_trans.pgm", tmap)
        rows.append({"step": idx, "a_r": f"{avec[0]:.6f}", "a_g": f"{avec[1]:.6f}", "a_b": f"{avec[2]:.6f}"})
        steps.append({"step": idx, "image": img, "trans": tmap, "atmo": avec})
    report.write_table(trace_dir / "atmospheric", ["step", "a_r", "a_g", "a_b"], rows)
    report.render_trace_montage(trace_dir / "trace.png", hazy, steps)


def cmd_dehaze(args) -> int:
    bundle, cfg = _bundle_from_checkpoint(args.checkpoint)
    hazy = imgio.read_ppm(getattr(args, "in"))
    steps = args.steps or cfg.t1
    out, traj, (prior_t, prior_a) = bundle.dehaze(hazy, t1=steps)
    if args.out:
        imgio.write_ppm(args.out, out)
    if args.trace:
        _write_trace(Path(args.trace), hazy, prior_t, prior_a, traj)
    print(f"out={args.out or '-'} steps={steps} "
          f"a_est={prior_a[0]:.4f},{prior_a[1]:.4f},{prior_a[2]:.4f}")
    return EXIT_OK


def cmd_trace(args) -> int:
    args.out, args.trace = None, args.out
    return cmd_dehaze(args)


def cmd_dehaze_dcp(args) -> int:
    hazy = imgio.read_ppm(getattr(args, "in"))
    dehazed, t, a = scattering.dcp_dehaze(hazy, omega=args.omega, patch=args.patch, t_floor=args.t_floor)
    imgio.write_ppm(args.out, dehazed)
    if args.t_out:
        imgio.write_pgm(args.t_out, t, maxval=65535)
    print(f"out={args.out} a_est={a.r:.4f},{a.g:.4f},{a.b:.4f}")
    return EXIT_OK


def _micro_config(stage: int, seed: int) -> pipeline.TrainConfig:
    return pipeline.TrainConfig(
        stage=stage, iterations=2, batch_updates_per_iteration=4, batch_size=2,
        train_scenes=6, val_scenes=2, scene_size=48, patch_size=48, sample_pool=12,
        precision="float32", seed=seed, lr_initial=4e-4, lr_decay_halving_period=2,
    )


def _stage_config(stage: int, args) -> pipeline.TrainConfig:
    if args.config:
        cfg = pipeline.TrainConfig.from_file(args.config)
        if cfg.stage != stage:
            cfg = pipeline.TrainConfig(**{**cfg.to_kwargs(), "stage": stage})
        return cfg
    if args.scale == "micro":
        return _micro_config(stage, args.seed)
    return pipeline.reference_config(stage, args.seed)


def cmd_train(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stages = [1, 2, 3] if args.stage == "all" else [int(args.stage)]
    cfg0 = _stage_config(stages[0], args)
    bundle = pipeline.ModelBundle.create(cfg0.seed, dtype=cfg0.dtype)
    resume = pipeline.load_checkpoint(args.resume) if args.resume else None
    if args.init_from:
        start_ckpt = pipeline.load_checkpoint(args.init_from)
        bundle.load_blobs(start_ckpt.blobs)
    curves = {}
    for stage in stages:
        cfg = _stage_config(stage, args)
        _log(f"== stage {stage}: {cfg.iterations} iterations x {cfg.batch_updates_per_iteration} updates")
        if stage == 1:
            hist = pipeline.train_stage1(cfg, bundle, log=_log, checkpoint_path=out / "stage1.ckpt",
                                         resume=resume if args.stage == "1" else None)
            for name, h in hist.items():
                curves[f"stage1/{name}"] = (h.train_loss, h.val_loss)
            _save_bundle(out / "stage1.ckpt", bundle, cfg, {"stage": 1, "final": True})
        elif stage == 2:
            h = pipeline.train_stage2(cfg, bundle, log=_log, checkpoint_path=out / "stage2.ckpt",
                                      resume=resume if args.stage == "2" else None)
            curves["stage2"] = (h.train_loss, h.val_loss)
            _save_bundle(out / "stage2.ckpt", bundle, cfg, {"stage": 2, "final": True})
        else:
            h = pipeline.train_stage3(cfg, bundle, log=_log, checkpoint_path=out / "final.ckpt",
                                      resume=resume if args.stage == "3" else None)
            curves["stage3"] = (h.train_loss, h.val_loss)
            _save_bundle(out / "final.ckpt", bundle, cfg, {"stage": 3, "final": True})
    rows = []
    for label, (train, val) in curves.items():
        for i, v in enumerate(val):
            rows.append({"stage": label, "iteration": i + 1, "val_loss": f"{v:.6f}"})
    report.write_table(out / "history", ["stage", "iteration", "val_loss"], rows)
    report.render_loss_curves(out / "loss_curves.png", curves)
    final = "final.ckpt" if 3 in stages else f"stage{stages[-1]}.ckpt"
    print(f"out={out} checkpoint={out / final}")
    return EXIT_OK


def cmd_eval(args) -> int:
    pred_dir, gt_dir = Path(args.pred), Path(args.gt)
    preds = {p.stem: p for p in sorted(pred_dir.glob("*.ppm"))}
    gts = {p.stem: p for p in sorted(gt_dir.glob("*.ppm"))}
    missing = sorted(set(preds) ^ set(gts))
    if missing:
        print("unmatched files: " + " ".join(missing), file=sys.stderr)
        return EXIT_IO
    if not preds:
        print("no .ppm files to evaluate", file=sys.stderr)
        return EXIT_IO
    rows = []
    psnrs, ssims, des = [], [], []
    for stem in sorted(preds):
        a = imgio.read_ppm(preds[stem])
        b = imgio.read_ppm(gts[stem])
        p = quality.psnr(a, b)
        s = quality.ssim_value(a, b)
        d = quality.ciede2000(a, b)
        psnrs.append(p)
        ssims.append(s)
        des.append(d)
        rows.append({"image": stem, "psnr": f"{p:.4f}", "ssim": f"{s:.6f}", "ciede2000": f"{d:.4f}"})
    rows.append(
        {"image": "mean", "psnr": f"{np.mean(psnrs):.4f}", "ssim": f"{np.mean(ssims):.6f}",
         "ciede2000": f"{np.mean(des):.4f}"}
    )
    base = str(args.report)
    csv_path, txt_path = report.write_table(base, ["image", "psnr", "ssim", "ciede2000"], rows)
    labels = [r["image"] for r in rows[:-1]]
    report.render_metric_bars(
        (base[:-4] if base.endswith((".csv", ".txt")) else base) + ".png",
        labels, {"PSNR (dB)": psnrs}, "per-image PSNR vs ground truth",
    )
    print(f"images={len(psnrs)} mean_psnr={np.mean(psnrs):.4f} "
          f"mean_ssim={np.mean(ssims):.6f} mean_ciede2000={np.mean(des):.4f} report={csv_path}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.config:
        cfg = pipeline.TrainConfig.from_file(args.config)
    elif args.scale == "micro":
        cfg = _micro_config(1, args.seed)
    else:
        cfg = pipeline.reference_config(1, args.seed)
        if args.axis != "pool_kind":
            cfg = pipeline.TrainConfig(**{**pipeline.reference_config(2, args.seed).to_kwargs(), "stage": 2})
    rep = pipeline.run_ablation(args.axis, cfg, log=_log)
    csv_path, _ = report.write_table(out / f"ablation_{args.axis}", rep.columns, rep.rows)
    numeric = [c for c in rep.columns[1:] if rep.rows and isinstance(rep.rows[0].get(c), (int, float))] or rep.columns[1:]
    labels = [str(r[rep.columns[0]]) for r in rep.rows]
    series = {c: [float(r[c]) for r in rep.rows] for c in numeric}
    report.render_metric_bars(out / f"ablation_{args.axis}.png", labels, series, f"ablation: {args.axis}")
    sys.stdout.write(rep.to_delimited())
    _log(f"report={csv_path}")
    return EXIT_OK


def _gradcheck_primitives(seed: int) -> list[tuple[str, ad.GradCheckReport]]:
    rng = np.random.default_rng(seed)
    x = ad.tensor(rng.standard_normal((2, 4, 6, 6)) + 0.1, requires_grad=True)
    w = ad.tensor(rng.standard_normal((3, 4, 3, 3)) * 0.3, requires_grad=True)
    b = ad.tensor(rng.standard_normal(3) * 0.1, requires_grad=True)
    alpha = ad.tensor(np.abs(rng.standard_normal(4)) * 0.3 + 0.1, requires_grad=True)
    gamma = ad.tensor(rng.standard_normal(4) * 0.2 + 1.0, requires_grad=True)
    beta = ad.tensor(rng.standard_normal(4) * 0.2, requires_grad=True)
    sq = lambda t: ad.mean(t**2.0)
    cases = {
        "conv2d": (lambda: sq(ad.conv2d(x, w, b, 1, 1)), {"x": [x], "w": [w], "b": [b]}),
        "conv2d_s2": (lambda: sq(ad.conv2d(x, w, b, 2, 1)), {"x": [x], "w": [w], "b": [b]}),
        "pool_max": (lambda: sq(ad.pool2d(x, "max", 2, 2, 2)), {"x": [x]}),
        "pool_avg": (lambda: sq(ad.pool2d(x, "avg", 3, 3, 1)), {"x": [x]}),
        "global_max": (lambda: sq(ad.global_pool(x, "max")), {"x": [x]}),
        "global_avg": (lambda: sq(ad.global_pool(x, "avg")), {"x": [x]}),
        "relu": (lambda: sq(ad.relu(x)), {"x": [x]}),
        "prelu": (lambda: sq(ad.prelu(x, alpha)), {"x": [x], "alpha": [alpha]}),
        "sigmoid": (lambda: sq(ad.sigmoid(x)), {"x": [x]}),
        "tanh": (lambda: sq(ad.tanh(x)), {"x": [x]}),
        "group_norm": (lambda: sq(ad.group_norm(x, 2, gamma, beta)), {"x": [x], "gamma": [gamma], "beta": [beta]}),
        "upsample": (lambda: sq(ad.upsample2x_bilinear(x)), {"x": [x]}),
        "clamp": (lambda: sq(ad.clamp(x, -0.5, 0.5)), {"x": [x]}),
        "concat_slice": (lambda: sq(ad.slice_channels(ad.concat_channels([x, x * 2.0]), 2, 6)), {"x": [x]}),
    }
    out = []
    for name, (f, groups) in cases.items():
        out.append((name, ad.gradcheck_groups(f, groups, samples_per_group=None, eps=1e-5, tol=1e-5, rng=rng)))
    return out


def _gradcheck_dehazer(seed: int, samples: int) -> list[tuple[str, ad.GradCheckReport]]:
    rng = np.random.default_rng(seed)
    params = dh.DehazerParams.create(rng)
    upd = dh.UpdaterParams.create(rng)
    bag = params.bag
    img = ad.tensor(rng.random((1, 3, 16, 16)) * 0.6 + 0.2)
    trans = ad.tensor(rng.random((1, 1, 16, 16)) * 0.5 + 0.3)
    atmo = ad.tensor(rng.random((1, 3, 1, 1)) * 0.4 + 0.4)
    gt = ad.tensor(rng.random((1, 3, 16, 16)))

    def loss():
        out, _ = dh.run_ipudn(img, trans, atmo, params, upd, t1=6)
        return quality.l1_loss(out, gt)

    groups = {
        "f_in": [bag["f_in/w"], bag["f_in/b"]],
        "f_lstm": [bag[k] for k in bag.tensors if k.startswith("lstm/")],
        "f_res": [bag[k] for k in bag.tensors if k.startswith("res")],
        "f_out": [bag["f_out/w"], bag["f_out/b"]],
        "updater_trans": list(upd.trans.tensors.values()),
        "updater_atmo": list(upd.atmo.tensors.values()),
    }
    rep = ad.gradcheck_groups(loss, groups, samples_per_group=samples, eps=2e-6, tol=1e-4, rng=rng)
    return [("ipudn_6step_16px", rep)]


def _gradcheck_estimators(seed: int, samples: int) -> list[tuple[str, ad.GradCheckReport]]:
    rng = np.random.default_rng(seed)
    out = []
    te = est.TransmissionEstimatorParams.create(rng)
    img = ad.tensor(rng.random((1, 3, 16, 16)) * 0.8 + 0.1)
    target = ad.tensor(rng.random((1, 1, 16, 16)) * 0.6 + 0.2)
    rep = ad.gradcheck_groups(
        lambda: quality.mse_loss(est.estimate_transmission(img, te), target),
        {"trans_est": list(te.bag.tensors.values())},
        samples_per_group=samples, eps=2e-6, tol=1e-4, rng=rng,
    )
    out.append(("transmission_estimator_16px", rep))
    ae = est.AtmosphericEstimatorParams.create(rng)
    img64 = ad.tensor(rng.random((1, 3, 64, 64)) * 0.8 + 0.1)
    a_t = ad.tensor(rng.random((1, 3, 1, 1)) * 0.6 + 0.2)
    rep = ad.gradcheck_groups(
        lambda: quality.mse_loss(est.estimate_atmospheric(img64, ae), a_t),
        {"atmo_est": list(ae.bag.tensors.values())},
        samples_per_group=samples, eps=2e-6, tol=1e-4, rng=rng,
    )
    out.append(("atmospheric_estimator_64px", rep))
    return out


def cmd_gradcheck(args) -> int:
    reports = []
    if args.target in ("primitives", "all"):
        reports += _gradcheck_primitives(args.seed)
    if args.target in ("estimators", "all"):
        reports += _gradcheck_estimators(args.seed, args.samples)
    if args.target in ("dehazer", "all"):
        reports += _gradcheck_dehazer(args.seed, args.samples)
    worst = 0.0
    all_ok = True
    for name, rep in reports:
        print(f"target={name} ok={int(rep.ok)} max_rel={rep.max_rel_error:.3e} "
              f"checked={rep.checked} kink_excluded={rep.excluded}")
        for group, flat, rel in rep.failures[:8]:
            _log(f"  FAIL {name}/{group}[{flat}] rel={rel:.3e}")
        worst = max(worst, rep.max_rel_error)
        all_ok &= rep.ok
    print(f"overall ok={int(all_ok)} worst={worst:.3e}")
    return EXIT_OK if all_ok else EXIT_USAGE


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="iterdehaze", description=__doc__)
    p.add_argument("--version", action="version", version=f"iterdehaze {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic hazy dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, default=16)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--haze", choices=("low", "mid", "high", "random", "cast"), default="random")
    g.add_argument("--size", type=int, default=64)
    g.set_defaults(fn=cmd_gen_data)

    s = sub.add_parser("synth", help="add haze to a clean image + depth map")
    s.add_argument("--clean", required=True)
    s.add_argument("--depth", required=True)
    s.add_argument("--beta", type=float, required=True)
    s.add_argument("--atmo", required=True, metavar="R,G,B")
    s.add_argument("--out", required=True)
    s.add_argument("--t-out", default=None)
    s.set_defaults(fn=cmd_synth)

    d = sub.add_parser("dehaze", help="dehaze one image with a trained checkpoint")
    d.add_argument("--in", required=True)
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--out", required=True)
    d.add_argument("--trace", default=None)
    d.add_argument("--steps", type=int, default=None)
    d.set_defaults(fn=cmd_dehaze)

    t = sub.add_parser("trace", help="dehaze and dump every iteration step")
    t.add_argument("--in", required=True)
    t.add_argument("--checkpoint", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--steps", type=int, default=None)
    t.set_defaults(fn=cmd_trace)

    dd = sub.add_parser("dehaze-dcp", help="classical dark-channel-prior dehazing")
    dd.add_argument("--in", required=True)
    dd.add_argument("--out", required=True)
    dd.add_argument("--omega", type=float, default=scattering.DCP_OMEGA_DEFAULT)
    dd.add_argument("--patch", type=int, default=scattering.DCP_PATCH_DEFAULT)
    dd.add_argument("--t-floor", type=float, default=scattering.T_FLOOR_DEFAULT)
    dd.add_argument("--t-out", default=None)
    dd.set_defaults(fn=cmd_dehaze_dcp)

    tr = sub.add_parser("train", help="run the staged training protocol")
    tr.add_argument("--stage", choices=("1", "2", "3", "all"), default="all")
    tr.add_argument("--out", required=True)
    tr.add_argument("--seed", type=int, default=0)
    tr.add_argument("--config", default=None)
    tr.add_argument("--scale", choices=("desk", "micro"), default="desk")
    tr.add_argument("--resume", default=None)
    tr.add_argument("--init-from", default=None, help="start from this checkpoint's parameters")
    tr.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="PSNR/SSIM/CIEDE2000 of prediction vs ground-truth dirs")
    e.add_argument("--pred", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--report", required=True)
    e.set_defaults(fn=cmd_eval)

    a = sub.add_parser("ablate", help="train/evaluate paired configs on one design axis")
    a.add_argument("--axis", choices=pipeline.ABLATION_AXES, required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--scale", choices=("desk", "micro"), default="desk")
    a.add_argument("--config", default=None)
    a.set_defaults(fn=cmd_ablate)

    gc = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    gc.add_argument("--target", choices=("primitives", "estimators", "dehazer", "all"), default="all")
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--samples", type=int, default=100)
    gc.set_defaults(fn=cmd_gradcheck)

    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except SystemExit as exc:
        return int(exc.code or 0)
    except ImageFormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except CheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except (FileNotFoundError, IsADirectoryError, PermissionError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ParameterError, ConfigError, ShapeError, ContractError, pipeline.TrainingDiverged) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except IterdehazeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    raise SystemExit(main())
