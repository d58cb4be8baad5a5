"""Command-line entry point: ``mnmmol <command> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import io as mio
from . import lemmas
from .metrics import magnitude, psnr, ssim
from .mri import synthetic_dataset
from .robustness import adversarial_perturb, gaussian_perturb
from .trainer import TrainingAborted, choose_delta, sense_deviation, train

log = logging.getLogger("mnmmol")


def _pair(text):
    parts = [int(p) for p in text.split(",")]
    if len(parts) != 2 or min(parts) < 1:
        raise argparse.ArgumentTypeError("expected H,W")
    return parts


def _floats(text):
    try:
        return [float(p) for p in text.split(",") if p.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc


def _load_cfg(path):
    return mio.load_config(path) if path else mio.ExperimentConfig()


def cmd_gen_data(args):
    # explicit flags win over the config's data section
    d = _load_cfg(args.config).data
    for name in ("size", "coils", "accel", "count", "sigma", "seed"):
        if getattr(args, name) is None:
            setattr(args, name, getattr(d, name))
    H, W = args.size
    if args.accel not in (4, 6):
        raise ValueError("accel must be 4 or 6")
    samples = synthetic_dataset(args.count, (H, W), args.coils, args.accel, args.sigma, args.seed, args.kind)
    params = {"size": [H, W], "coils": args.coils, "accel": args.accel, "sigma": args.sigma,
              "seed": args.seed, "kind": args.kind}
    mio.write_dataset(args.out, samples, params)
    print(f"wrote {len(samples)} samples to {args.out}")


def cmd_train(args):
    cfg = _load_cfg(args.config)
    overrides = {"variant": args.variant} if args.variant else {}
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    tcfg = cfg.train_config(**overrides)
    samples, _ = mio.read_dataset(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        model, history = train(samples, tcfg)
    except TrainingAborted as exc:
        _write_history(out / "history.csv", exc.history)
        raise
    _write_history(out / "history.csv", history)
    mio.save_checkpoint(out / "checkpoint.mnmc", model, {"train": tcfg.to_dict()})
    last = history[-1]
    print(f"trained {tcfg.variant}: final mean loss {last.mean_loss:.6f}, mean L {last.mean_L:.4f}, "
          f"lambda {model.lam:.4f}")


def _write_history(path, history):
    mio.write_csv(path, ["epoch", "mean_loss", "mean_L", "violation_rate", "failures", "lam"],
                  [(h.epoch, h.mean_loss, h.mean_L, h.violation_rate, h.failures, h.lam) for h in history])


def cmd_reconstruct(args):
    model, _ = mio.load_checkpoint(args.ckpt)
    samples, manifest = mio.read_dataset(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for stem, s in zip(manifest["samples"], samples):
        res = model.reconstruct(s.b, s.mm)
        x = res.x_star
        mio.write_array(out / f"recon_{stem}.mnm", x)
        ref_mag = magnitude(s.x_ref)
        mio.write_png(out / f"recon_{stem}.png", magnitude(x))
        mio.write_png(out / f"error_{stem}.png", magnitude(x - s.x_ref), scale=10.0, peak=ref_mag.max())
        x0 = model.init_image(s.b, s.mm)
        rows.append((stem, psnr(x, s.x_ref), ssim(x, s.x_ref), psnr(x0, s.x_ref), ssim(x0, s.x_ref),
                     res.iterations, res.converged))
    mio.write_csv(out / "metrics.csv", ["sample", "psnr", "ssim", "psnr_sense", "ssim_sense",
                                        "iterations", "converged"], rows)
    print(f"mean PSNR {np.mean([r[1] for r in rows]):.3f} dB over {len(rows)} images "
          f"(SENSE {np.mean([r[3] for r in rows]):.3f} dB)")


def cmd_eval_robust(args):
    model, _ = mio.load_checkpoint(args.ckpt)
    samples, manifest = mio.read_dataset(args.data)
    cfg = _load_cfg(args.config).robust
    n_img = args.max_images if args.max_images is not None else cfg.max_images
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows, curve = [], []
    # nested budgets: each adversarial search starts from the previous, smaller-budget optimum
    warm = {}
    for eps in sorted(args.eps_list):
        drops, ps = [], []
        for stem, s in list(zip(manifest["samples"], samples))[:n_img]:
            T = model.fixed_point_map(s.b, s.mm)
            x0 = model.init_image(s.b, s.mm)
            if args.mode == "adversarial":
                rep = adversarial_perturb(T, s.b, eps, cfg.steps, cfg.seed, s.x_ref, x0, model.solver, model.m,
                                          n_init=warm.get(stem))
                if not rep.diverged:
                    warm[stem] = rep.n_star
                reps = [rep]
            else:
                reps = gaussian_perturb(T, s.b, eps, cfg.trials, cfg.seed, s.x_ref, x0, model.solver, model.m)
            for k, r in enumerate(reps):
                rows.append((stem, k, eps, r.psnr_clean, r.psnr_perturbed, r.delta_norm, r.ahn_norm, r.bound,
                             r.bound_satisfied, r.diverged))
                ps.append(r.psnr_perturbed)
                drops.append(r.psnr_clean - r.psnr_perturbed)
        curve.append((eps, float(np.mean(ps)), float(np.mean(drops))))
        print(f"eps {eps:g}: mean PSNR {curve[-1][1]:.3f} dB, mean drop {curve[-1][2]:.3f} dB")
    mio.write_csv(out / f"robust_{args.mode}.csv",
                  ["sample", "trial", "epsilon", "psnr_clean", "psnr_perturbed", "delta_norm", "ahn_norm",
                   "bound", "bound_satisfied", "diverged"], rows)
    mio.write_csv(out / f"curve_{args.mode}.csv", ["epsilon", "mean_psnr", "mean_drop"], curve)


def cmd_verify_lemmas(args):
    cfg = _load_cfg(args.config)
    results = lemmas.run_all(cfg.lemmas)
    print(lemmas.format_report(results))
    return 0 if all(r.passed for r in results) else 1


def cmd_choose_delta(args):
    samples, manifest = mio.read_dataset(args.data)
    ratios = [sense_deviation(s, args.mu) for s in samples]
    delta = choose_delta(samples, args.mu)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    counts, edges = np.histogram(ratios, bins=args.bins)
    mio.write_csv(out, ["bin_low", "bin_high", "count"], zip(edges[:-1], edges[1:], counts))
    mio.write_csv(out.with_name(out.stem + "_ratios.csv"), ["sample", "ratio"], zip(manifest["samples"], ratios))
    print(json.dumps({"delta": delta, "mu": args.mu, "samples": len(samples)}))


def build_parser():
    p = argparse.ArgumentParser(prog="mnmmol", description="Locally monotone DEQ reconstruction for MRI.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a seeded synthetic multicoil dataset")
    g.add_argument("--config", help="take defaults from the config's data section")
    g.add_argument("--size", type=_pair, help="H,W (default 32,32)")
    g.add_argument("--coils", type=int, help="default 4")
    g.add_argument("--accel", type=int, choices=(4, 6), help="default 4")
    g.add_argument("--count", type=int, help="default 50")
    g.add_argument("--sigma", type=float, help="noise std per real channel (default 0.01)")
    g.add_argument("--seed", type=int, help="default 0")
    g.add_argument("--kind", choices=("2d", "1d"), default="2d")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a reconstruction network")
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--variant", choices=("mnm-mol", "mol-l", "mol-sn"))
    t.add_argument("--epochs", type=int)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("reconstruct", help="reconstruct a dataset with a checkpoint")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--data", required=True)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_reconstruct)

    e = sub.add_parser("eval-robust", help="PSNR under k-space perturbations")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--mode", choices=("adversarial", "gaussian"), required=True)
    e.add_argument("--eps-list", type=_floats, required=True)
    e.add_argument("--config")
    e.add_argument("--max-images", type=int)
    e.add_argument("--out", default=".")
    e.set_defaults(func=cmd_eval_robust)

    v = sub.add_parser("verify-lemmas", help="run the property suites")
    v.add_argument("--config")
    v.set_defaults(func=cmd_verify_lemmas)

    c = sub.add_parser("choose-delta", help="select the ball radius from SENSE deviations")
    c.add_argument("--data", required=True)
    c.add_argument("--mu", type=float, default=1e-2)
    c.add_argument("--bins", type=int, default=20)
    c.add_argument("--out", default="delta_hist.csv")
    c.set_defaults(func=cmd_choose_delta)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        code = args.func(args)
    except (FileNotFoundError, mio.ContainerError, mio.ConfigError, ValueError, KeyError,
            TrainingAborted) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return code or 0


if __name__ == "__main__":
    sys.exit(main())
