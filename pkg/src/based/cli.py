"""``based`` command-line entry point: synth, train, render, eval, ablate."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .config import load_config
from .data import load_dataset, write_bdep, write_ppm
from .eval import evaluate_run, load_run, parse_report, render_image
from .geometry import SE3Pose, check_rows
from .optim import CheckpointError
from .synthetic import SyntheticSceneSpec, generate_synthetic
from .training import NumericalAbort, run_training

log = logging.getLogger("based")

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL = 0, 1, 2
SENTINEL = "INCOMPLETE"

ABLATIONS = [
    # tag, label, keep L_corr, keep L_d
    ("no_corr_no_depth", "BASED w/o L_d L_corr", False, False),
    ("no_depth", "BASED w/o L_d", True, False),
    ("no_corr", "BASED w/o L_corr", False, True),
    ("final", "BASED (final)", True, True),
]


class _Outdir:
    """Creates ``out`` with an INCOMPLETE marker that is removed only on success."""

    def __init__(self, path):
        self.path = Path(path)

    def __enter__(self):
        self.path.mkdir(parents=True, exist_ok=True)
        (self.path / SENTINEL).write_text("run did not finish\n")
        return self.path

    def __exit__(self, exc_type, exc, tb):
        if exc_type is None:
            (self.path / SENTINEL).unlink(missing_ok=True)
        return False


def _dataset(args):
    ds = load_dataset(args.dataset, require_test=getattr(args, "require_test", False))
    if args.subsample_every and args.subsample_every > 1:
        ds = ds.subsample(args.subsample_every)
    return ds


def _config(args):
    return load_config(args.config, preset=args.preset, overrides=args.override or ())


def cmd_synth(args) -> int:
    spec = SyntheticSceneSpec.load(args.spec) if args.spec else SyntheticSceneSpec()
    spec.validate()
    with _Outdir(args.out) as out:
        ds, oracle = generate_synthetic(spec, np.random.default_rng(args.seed), out_dir=out)
    print(f"frames={len(ds)} train={len(ds.train)} test={len(ds.test)} "
          f"correspondences={len(ds.correspondences)} size={spec.width}x{spec.height}")
    print(f"oracle: amplitude={spec.amplitude * spec.depth:g} surface={spec.surface} "
          f"max_rotation_deg={spec.max_rotation_deg:g} max_translation={spec.max_translation * spec.depth:g}")
    return EXIT_OK


def _progress(every):
    def cb(row):
        if row[0] % every == 0:
            log.info("it %d stage %d L_pho %.5f L_corr %.5f L_d %.5f", *row[:5])
    return cb


def cmd_train(args) -> int:
    cfg = _config(args)
    ds = _dataset(args)
    if args.resume and not Path(args.resume).exists():
        raise CheckpointError(f"{args.resume}: no such checkpoint")
    with _Outdir(args.out) as out:
        cfg.save(out / "config.json")
        res = run_training(ds, cfg, args.seed, out_dir=out, resume=args.resume, progress=_progress(100))
    last = res.log[-1] if res.log else None
    print(f"checkpoint={Path(args.out) / 'checkpoint.bin'} iterations={last[0] if last else 0}")
    return EXIT_OK


def _parse_pose(values) -> np.ndarray:
    vals = np.array([float(v) for v in values])
    if vals.size != 12:
        raise ValueError("--pose needs 12 values: R row-major then t")
    row = SE3Pose(vals[:9].reshape(3, 3), vals[9:]).to_row()
    check_rows(row[None])
    return row


def cmd_render(args) -> int:
    run = load_run(args.checkpoint)
    meta = run.meta
    from .geometry import Intrinsics

    fx, fy, cx, cy, w, h = meta["intrinsics"]
    intr = Intrinsics(fx, fy, cx, cy, int(w), int(h))
    times = meta["times"]
    if args.pose:
        row = _parse_pose(args.pose)
        if args.time is None:
            raise ValueError("--time is required with an explicit --pose")
        t = args.time
    else:
        if args.frame is None or not 0 <= args.frame < len(run.poses):
            raise ValueError(f"--frame must be in [0, {len(run.poses)})")
        row = run.poses[args.frame]
        t = times[args.frame] if args.time is None else args.time
    rc = run.cfg.render
    with _Outdir(args.out) as out:
        color, z, _ = render_image(run.bundle, intr, row, t, meta["near"], meta["far"],
                                   rc.eval_samples, rc.chunk, rc.depth_mode)
        stem = f"frame_{args.frame:05d}" if args.frame is not None and not args.pose else "novel"
        write_ppm(out / f"{stem}.ppm", np.clip(color, 0, 1))
        write_bdep(out / f"{stem}.bdep", z)
    print(f"wrote {Path(args.out) / (stem + '.ppm')}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ds = _dataset(args)
    if not Path(args.checkpoint).exists():
        raise CheckpointError(f"{args.checkpoint}: no such checkpoint")
    with _Outdir(args.out) as out:
        rep = evaluate_run(args.checkpoint, ds, split=args.split, out_dir=out,
                           median_scaling=True if args.median_scaling else None)
    print(rep.text(), end="")
    return EXIT_OK


def _ablation_job(job):
    tag, dataset, cfg_dict, seed, out = job
    from .config import Config

    cfg = Config.from_dict(cfg_dict)
    ds = load_dataset(dataset)
    run_dir = Path(out) / tag
    with _Outdir(run_dir) as rd:
        cfg.save(rd / "config.json")
        run_training(ds, cfg, seed, out_dir=rd)
        rep = evaluate_run(rd / "checkpoint.bin", ds, out_dir=rd / "eval")
        rep.header["loss_config"] = tag
        (rd / "eval" / "report.txt").write_text(rep.text())
    return tag


def ablation_table(out, rows=ABLATIONS) -> str:
    lines = ["method\tL_corr\tL_d\tPSNR\tSSIM\tabs_rel"]
    for tag, label, corr, depth in rows:
        rep = parse_report((Path(out) / tag / "eval" / "report.txt").read_text())["mean"]
        mark = lambda on: "yes" if on else "no"
        absrel = rep.get("abs_rel", float("nan"))
        lines.append(f"{label}\t{mark(corr)}\t{mark(depth)}\t{rep['psnr']:.3f}\t{rep['ssim']:.4f}\t{absrel:.4f}")
    return "\n".join(lines) + "\n"


def cmd_ablate(args) -> int:
    cfg = _config(args)
    _dataset(args)  # validate before any side effect
    jobs = []
    for tag, _, corr, depth in ABLATIONS:
        c = cfg.apply_overrides([f"loss.w_corr={cfg.loss.w_corr if corr else 0.0}",
                                 f"loss.w_depth={cfg.loss.w_depth if depth else 0.0}"])
        jobs.append((tag, str(args.dataset), c.to_dict(), args.seed, str(args.out)))
    with _Outdir(args.out) as out:
        workers = max(1, min(args.workers or 1, len(jobs)))
        if workers == 1:
            for j in jobs:
                _ablation_job(j)
        else:
            with ProcessPoolExecutor(workers) as pool:
                list(pool.map(_ablation_job, jobs))
        table = ablation_table(out)
        (out / "ablation.tsv").write_text(table)
    print(table, end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="based", description="Bundle-adjusting deformable NeRF")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, dataset=True, config=True):
        if dataset:
            sp.add_argument("--dataset", required=True, type=Path)
            sp.add_argument("--subsample-every", type=int, default=1)
        if config:
            sp.add_argument("--config", type=Path)
            sp.add_argument("--preset", default="desk", choices=["desk", "full"])
            sp.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--out", required=True, type=Path)
        sp.add_argument("--workers", type=int, default=os.cpu_count() or 1)

    sp = sub.add_parser("synth", help="generate a synthetic deformable scene")
    sp.add_argument("--spec", type=Path, help="JSON scene spec (defaults to the bundled desk scene)")
    common(sp, dataset=False, config=False)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("train", help="run the two-stage schedule")
    sp.add_argument("--resume", type=Path)
    common(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("render", help="render a frame or an explicit pose")
    sp.add_argument("--checkpoint", required=True, type=Path)
    sp.add_argument("--frame", type=int)
    sp.add_argument("--pose", nargs=12, metavar="V", help="R row-major then t (camera to world)")
    sp.add_argument("--time", type=float)
    common(sp, dataset=False, config=False)
    sp.set_defaults(func=cmd_render)

    sp = sub.add_parser("eval", help="score held-out views")
    sp.add_argument("--checkpoint", required=True, type=Path)
    sp.add_argument("--split", default="test", choices=["test", "train"])
    sp.add_argument("--median-scaling", action="store_true")
    common(sp, config=False)
    sp.set_defaults(func=cmd_eval, require_test=True)

    sp = sub.add_parser("ablate", help="the four loss-configuration runs and a combined table")
    common(sp)
    sp.set_defaults(func=cmd_ablate, require_test=True)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NumericalAbort as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ValueError, OSError, KeyError, json.JSONDecodeError) as exc:
        # ConfigError, DatasetError, SceneSpecError and CheckpointError are ValueErrors
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
