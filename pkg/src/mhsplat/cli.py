"""Command-line entry point: ``mhsplat <command> [options]``.

Commands: synth, train, render, eval, ablate, probe.  Exit status is 0 on
success, 1 for contract/config/format errors and 2 for numerical failures.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from pathlib import Path

log = logging.getLogger("mhsplat")

EXIT_OK, EXIT_CONTRACT, EXIT_NUMERICAL = 0, 1, 2


def _common_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    S = argparse.SUPPRESS
    p.add_argument("--config", default=S, help="key=value training config file")
    p.add_argument("--seed", type=int, default=S, help="rng seed (default 0)")
    p.add_argument("--out-dir", default=S, help="output directory (default ./out)")
    p.add_argument("--threads", type=int, default=S, help="renderer worker threads")
    p.add_argument("--dump-importance", action="store_true", default=S,
                   help="write importance maps at every densification step")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common_parser()
    ap = argparse.ArgumentParser(prog="mhsplat", description=__doc__.splitlines()[0], parents=[common])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset directory")
    s.add_argument("--n-gaussians", type=int, default=2000)
    s.add_argument("--cameras", type=int, default=16)
    s.add_argument("--resolution", type=int, nargs=2, default=(64, 64), metavar=("W", "H"))
    s.add_argument("--layout", default="clustered")
    s.add_argument("--test-every", type=int, default=8)

    t = sub.add_parser("train", parents=[common], help="train a cloud on a dataset")
    t.add_argument("--data", required=True, help="dataset directory written by synth")
    t.add_argument("--init-splats", type=int, default=200)
    t.add_argument("--init-ply", help="start from this PLY instead of a random cloud")
    t.add_argument("--strategy", choices=("mh", "threshold", "none"))
    t.add_argument("--iterations", type=int)
    t.add_argument("--resume", help="continue from a checkpoint")

    r = sub.add_parser("render", parents=[common], help="write target|render|error triptychs")
    r.add_argument("--data", required=True)
    r.add_argument("--cloud", required=True)
    r.add_argument("--split", choices=("train", "test", "all"), default="test")

    e = sub.add_parser("eval", parents=[common], help="held-out PSNR/SSIM report")
    e.add_argument("--data", required=True)
    e.add_argument("--cloud", required=True)
    e.add_argument("--metrics", help="training metrics CSV for the convergence point")

    a = sub.add_parser("ablate", parents=[common], help="relocation and importance-term ablations")
    a.add_argument("--data", required=True)
    a.add_argument("--seeds", type=int, default=3)
    a.add_argument("--iterations", type=int)
    a.add_argument("--init-splats", type=int, default=200)
    a.add_argument("--variants", default="full,no_relocation,no_opacity,no_ssim,no_l1")

    p = sub.add_parser("probe", parents=[common], help="importance vs measured loss drop")
    p.add_argument("--data", required=True)
    p.add_argument("--cloud", required=True)
    p.add_argument("--n-probes", type=int, default=200)
    p.add_argument("--iteration", type=int, default=None,
                   help="iteration whose camera subset and proposal std are used (default: window midpoint)")
    return ap


def _setup_threads(n: int | None) -> None:
    # must run before numba is imported for the pool size to take effect
    if n is None:
        return
    if n < 1:
        raise ValueError("--threads must be >= 1")
    if "numba" not in sys.modules:
        os.environ["NUMBA_NUM_THREADS"] = str(n)
    else:
        import numba

        numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))


def _config(args):
    from .trainer import TrainConfig, load_config

    cfg = load_config(args.config) if getattr(args, "config", None) else TrainConfig()
    kw = {} if args.seed is None else {"seed": args.seed}
    if getattr(args, "iterations", None):
        kw["iterations"] = args.iterations
    if getattr(args, "strategy", None):
        kw["strategy"] = args.strategy
    return cfg.replace(**kw)


def _write_rows(path, rows, columns) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(columns), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


# ------------------------------------------------------------------- commands

def cmd_synth(args) -> int:
    from .synth import SceneSpec, bake_dataset, camera_rig, generate_scene

    spec = SceneSpec(n_gaussians=args.n_gaussians, layout=args.layout, seed=args.seed or 0)
    cloud = generate_scene(spec)
    rig = camera_rig(args.cameras, 3.5 * spec.extent, resolution=tuple(args.resolution))
    ds = bake_dataset(cloud, rig, test_every=args.test_every, extent=spec.extent)
    ds.save(args.out_dir)
    print(f"dataset: {len(ds.cameras)} cameras ({len(ds.test_indices)} test), "
          f"{len(cloud)} ground-truth splats -> {args.out_dir}")
    return EXIT_OK


def _train_run(cfg, ds, init, out: Path, dump_importance: bool, resume=None):
    from . import io, plotting, trainer

    hook = None
    if dump_importance:
        (out / "importance").mkdir(parents=True, exist_ok=True)

        def hook(report, state):
            imp = getattr(report, "importance", None)
            if imp is None:
                return
            io.write_ppm(out / "importance" / f"iter_{report.iteration:06d}.ppm", imp.s_map)
            plotting.plot_importance(imp.s_map, out / "importance" / f"iter_{report.iteration:06d}.png")

    res = trainer.train(cfg, ds, init, resume=resume, checkpoint_dir=out, densify_hook=hook)
    io.write_ply(out / "cloud.ply", res.cloud)
    trainer.write_metrics_csv(out / "metrics.csv", res.metrics)
    trainer.write_densify_csv(out / "densify.csv", res.densify)
    trainer.save_checkpoint(out / "final.ckpt", res.state)
    return res


def cmd_train(args) -> int:
    from . import io, metrics, plotting, trainer
    from .synth import Dataset, random_init

    cfg = _config(args)
    ds = Dataset.load(args.data)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    resume = trainer.load_checkpoint(args.resume) if args.resume else None
    if args.init_ply:
        init = io.read_ply(args.init_ply)
    else:
        init = random_init(args.init_splats, ds.extent, cfg.seed)
    (out / "config.txt").write_text(trainer.dump_config(cfg))
    res = _train_run(cfg, ds, init, out, args.dump_importance, resume)
    plotting.plot_training_curves({cfg.strategy: res.metrics}, out / "training.png")
    report = metrics.evaluate(res.cloud, ds, res.metrics) if ds.test_indices else None
    last = res.metrics[-1] if res.metrics else None
    if last is not None:
        print(f"iterations: {last['iter'] + 1}  splats: {last['n_gaussians']}  "
              f"train PSNR (last view): {last['psnr_train']:.2f} dB")
    if report is not None:
        _write_rows(out / "eval.csv", report.rows(), ("view", "psnr", "ssim"))
        print(report.summary())
    return EXIT_OK


def _triptych(target, image):
    import numpy as np

    t, r = target.pixels, image.pixels
    return np.concatenate([t, r, np.abs(t - r)], axis=1)


def cmd_render(args) -> int:
    from . import io
    from .render import render
    from .synth import Dataset

    ds = Dataset.load(args.data)
    cloud = io.read_ply(args.cloud)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    idx = {"train": ds.train_indices, "test": ds.test_indices, "all": range(len(ds.cameras))}[args.split]
    for i in idx:
        img = render(cloud, ds.cameras[i], ds.background).image
        io.write_ppm(out / f"view_{i:03d}.ppm", _triptych(ds.images[i], img))
    print(f"wrote {len(idx)} triptychs (target | render | abs-error) to {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from . import io, metrics
    from .synth import Dataset

    ds = Dataset.load(args.data)
    cloud = io.read_ply(args.cloud)
    report = metrics.evaluate(cloud, ds, args.metrics)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_rows(out / "eval.csv", report.rows(), ("view", "psnr", "ssim"))
    print(report.summary())
    return EXIT_OK


ABLATIONS = {
    "full": {},
    "no_relocation": {"relocate": False},
    "no_opacity": {"weight_opacity": 0.0},
    "no_ssim": {"weight_ssim": 0.0},
    "no_l1": {"weight_l1": 0.0},
}


def cmd_ablate(args) -> int:
    from . import metrics, plotting
    from .synth import Dataset, random_init
    from .trainer import ConfigError

    base = _config(args)
    ds = Dataset.load(args.data)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    for v in variants:
        if v not in ABLATIONS:
            raise ConfigError(f"unknown ablation variant {v!r}; choose from {sorted(ABLATIONS)}")
    rows, curves = [], {}
    for v in variants:
        for k in range(args.seeds):
            seed = base.seed + k
            cfg = base.replace(seed=seed, **ABLATIONS[v])
            run_dir = out / f"{v}_seed{seed}"
            run_dir.mkdir(exist_ok=True)
            res = _train_run(cfg, ds, random_init(args.init_splats, ds.extent, seed), run_dir,
                             args.dump_importance)
            rep = metrics.evaluate(res.cloud, ds, res.metrics)
            rows.append({"variant": v, "seed": seed, "psnr": rep.mean_psnr, "ssim": rep.mean_ssim,
                         "n_gaussians": rep.n_gaussians, "iteration_at_98pct": rep.iteration_at_98pct})
            curves[f"{v}/{seed}"] = res.metrics
            print(f"{v:14s} seed {seed}: PSNR {rep.mean_psnr:.3f} dB  splats {rep.n_gaussians}")
    _write_rows(out / "ablation.csv", rows, ("variant", "seed", "psnr", "ssim", "n_gaussians",
                                             "iteration_at_98pct"))
    plotting.plot_ablation(rows, out / "ablation.png")
    plotting.plot_training_curves(curves, out / "training.png")
    for v in variants:
        vals = [r["psnr"] for r in rows if r["variant"] == v]
        print(f"mean {v:14s} {sum(vals) / len(vals):.3f} dB")
    return EXIT_OK


def cmd_probe(args) -> int:
    import numpy as np

    from . import io, plotting
    from .importance import CameraSchedule, camera_subset
    from .probe import surrogate_correlation
    from .synth import Dataset
    from .trainer import densify_params

    cfg = _config(args)
    ds = Dataset.load(args.data)
    cloud = io.read_ply(args.cloud)
    t = args.iteration if args.iteration is not None else (cfg.t_min + cfg.t_max) // 2
    sched = CameraSchedule(len(ds.train_indices), cfg.t_min, cfg.t_max)
    subset = [ds.train_indices[j] for j in camera_subset(sched, t)]
    sigma = densify_params(cfg, t, ds.extent).sigma_coarse
    rep = surrogate_correlation(cloud, ds, args.n_probes, np.random.default_rng(cfg.seed), sigma,
                                cameras=subset)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rep.write_csv(out / "probe.csv")
    plotting.plot_probe_scatter(rep, out / "probe.png")
    print(rep.summary())
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "render": cmd_render, "eval": cmd_eval,
            "ablate": cmd_ablate, "probe": cmd_probe}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    for name, default in (("seed", None), ("out_dir", "out"), ("config", None), ("threads", None),
                          ("dump_importance", False)):
        if not hasattr(args, name):
            setattr(args, name, default)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _setup_threads(args.threads)
        from .trainer import NumericalError
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONTRACT
    try:
        return COMMANDS[args.command](args)
    except (NumericalError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ValueError, KeyError, OSError) as exc:
        # contract, config, format and checkpoint errors all derive from ValueError
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONTRACT


if __name__ == "__main__":
    sys.exit(main())
