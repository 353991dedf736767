"""End-to-end acceptance checks, one test per criterion.

Each test records a pass/fail line (printed in the terminal summary) before
asserting. The desk-scale training runs are shared through ``runs.py``.
"""

import json
import time
from itertools import combinations

import numpy as np
import pytest

from based import autodiff as ad
from based.autodiff import Tensor
from based.cli import main
from based.config import LossWeights, desk_preset
from based.data import lookup_depth
from based.eval import depth_metrics, evaluate_run, psnr, ssim
from based.fields import EncodingConfig, FieldConfig, MlpConfig, deform, init_fields
from based.geometry import Intrinsics, generate_rays, geodesic_deg, pose_error, pose_to_se3, rows_to_rt
from based.rendering import stratified_t, volume_render, with_deltas
from based.training import correspondence_loss, photometric_loss, render_rays, run_training
from criteria import record
from fd import check
from runs import desk_run, desk_scene
from test_autodiff import OP_CASES
from tiny import TINY_OVERRIDES, TINY_SPEC, tiny_config, tiny_dataset

BOX = np.array([[-3.0, -2.0, 2.0], [3.0, 2.0, 8.0]])
SMALL_FIELDS = FieldConfig(enc=EncodingConfig(3, 2), mlp_deform=MlpConfig(3, 16, None),
                           mlp_canon=MlpConfig(3, 16, 1))
SCENE_DEPTH = 5.0


def _perturbed_bundle(seed):
    b = init_fields(SMALL_FIELDS, BOX, np.random.default_rng(seed))
    g = np.random.default_rng(seed + 100)
    for t in b.deform_params.tensors:
        t.data = t.data + g.normal(size=t.shape) * 0.1
    return b


def _with_params(params, fn):
    """Build a scalar whose first argument is the pose rows and the rest replace ``params``."""
    def build(rows, *ps):
        saved = [p.data for p in params]
        for p, new in zip(params, ps):
            p.data, p.node, p.tape = new.data, new.node, new.tape
        try:
            return fn(rows)
        finally:
            for p, old in zip(params, saved):
                p.data, p.node, p.tape = old, None, None
    return build


# ------------------------------------------------------------------ 1


def test_criterion_1_gradient_correctness():
    t0 = time.perf_counter()
    errors = []
    for _, build, make in OP_CASES:
        for _ in range(3):
            errors.append(check(build, make()))

    intr = Intrinsics(20.0, 20.0, 12.0, 9.0, 24, 18)
    for seed in range(10):
        g = np.random.default_rng(seed)
        b = _perturbed_bundle(seed)
        params = b.deform_params.tensors[-2:] + b.canon_params.tensors[-2:]
        rows = np.tile([1.0, 0, 0, 0, 1, 0, 0, 0, 0], (2, 1)) + g.normal(size=(2, 9)) * 0.05
        frames = np.array([0, 0, 1, 1])
        pix = g.uniform(2, 16, size=(4, 2))
        tv = stratified_t(4, 2.0, 8.0, 8, rng=g)
        truth = g.random((4, 3))
        times = np.array([0.3, 0.7])

        def pho(rows_t):
            R, t = rows_to_rt(rows_t)
            o, d = generate_rays(intr, ad.gather(R, frames), ad.gather(t, frames), pix)
            out = render_rays(b, o, d, times[frames], tv, 2.0, 8.0)
            return photometric_loss(out.color, truth)

        errors.append(check(_with_params(params, pho), [rows] + [p.data.copy() for p in params]))

    ds, _ = tiny_dataset(amplitude=0.0)
    depths = lambda f, px: lookup_depth(ds.frames[int(f)].ref_depth, px)
    gt = np.array([f.gt_pose.to_row() for f in ds.frames])
    for seed in range(10):
        g = np.random.default_rng(50 + seed)
        b = _perturbed_bundle(50 + seed)
        params = b.deform_params.tensors[-2:]
        recs = ds.correspondences[g.choice(len(ds.correspondences), 8, replace=False)]
        rows = gt + g.normal(size=gt.shape) * 0.02

        def corr(rows_t):
            return correspondence_loss(recs, rows_t, b, depths, ds.intrinsics, ds.times,
                                       LossWeights(w_corr=1.0), weighted=False)

        errors.append(check(_with_params(params, corr), [rows] + [p.data.copy() for p in params]))

    worst = max(errors)
    secs = time.perf_counter() - t0
    ok = record(1, worst < 1e-4 and len(errors) >= 100 and secs < 120,
                f"{len(errors)} configurations, max relative error {worst:.2e} (tol 1e-4), {secs:.0f}s (limit 120s)")
    assert ok


# ------------------------------------------------------------------ 2


def test_criterion_2_deform_zero_at_time_zero():
    g = np.random.default_rng(2)
    x = g.uniform(BOX[0], BOX[1], size=(10_000, 3))
    worst = 0.0
    for seed in range(3):
        b = _perturbed_bundle(seed)
        for t in b.deform_params.tensors:  # any parameter state, not only the zero init
            t.data = g.normal(size=t.shape)
        d = deform(b, x, np.zeros(len(x))).data
        worst = max(worst, float(np.abs(d).max()))
    ok = record(2, worst == 0.0, f"max |deform(x, 0)| over 3 parameter states x 10^4 points = {worst!r}")
    assert ok


# ------------------------------------------------------------------ 3


def test_criterion_3_correspondence_zero_point():
    ds, _ = desk_scene("rigid")
    b = init_fields(desk_preset().field, ds.scene_box, np.random.default_rng(0))
    rows = np.array([f.gt_pose.to_row() for f in ds.frames])
    depths = lambda f, px: lookup_depth(ds.frames[int(f)].ref_depth, px)
    loss = correspondence_loss(ds.correspondences, Tensor(rows), b, depths, ds.intrinsics, ds.times,
                               LossWeights(w_corr=1.0), weighted=False).item()
    ok = record(3, loss < 1e-9, f"L_corr = {loss:.3e} over {len(ds.correspondences)} records (tol 1e-9)")
    assert ok


# ------------------------------------------------------------------ 4


def _relative_errors(est, ref, frames):
    """Gauge-free errors: relative rotation (deg) and relative centre offset between frame pairs."""
    rot, cen = [], []
    for a, b in combinations(frames, 2):
        rot.append(geodesic_deg(est[a].R.T @ est[b].R, ref[a].R.T @ ref[b].R))
        de = est[a].R.T @ (est[b].center - est[a].center)
        dr = ref[a].R.T @ (ref[b].center - ref[a].center)
        cen.append(np.linalg.norm(de - dr))
    return float(np.mean(rot)), float(np.mean(cen))


def test_criterion_4_pose_recovery():
    run = desk_run("rigid")
    ds = run.dataset
    train = list(ds.train)
    ref = [f.gt_pose for f in ds.frames]
    est = [pose_to_se3(r, k) for k, r in enumerate(run.result.poses)]
    rot, cen = pose_error([est[k] for k in train], [ref[k] for k in train])
    ident = [pose_to_se3(np.array([1.0, 0, 0, 0, 1, 0, 0, 0, 0]), k) for k in range(len(ds))]
    rel0 = _relative_errors(ident, ref, train)
    rel = _relative_errors(est, ref, train)
    shrink = min(rel0[0] / max(rel[0], 1e-12), rel0[1] / max(rel[1], 1e-12))
    ok = record(4, rot < 2.0 and cen < 0.02 * SCENE_DEPTH and shrink >= 5 and run.seconds < 900,
                f"aligned rotation {rot:.3f} deg (tol 2), centre {cen:.4f} (tol {0.02 * SCENE_DEPTH:g}); "
                f"relative pose error {rel0[0]:.2f}->{rel[0]:.3f} deg, {rel0[1]:.4f}->{rel[1]:.4f}, "
                f"shrink {shrink:.0f}x (need 5x); {run.seconds:.0f}s (limit 900s)")
    assert ok


# ------------------------------------------------------------------ 5


def _test_report(run):
    rep = evaluate_run(run.out / "checkpoint.bin", run.dataset, out_dir=run.out / "eval")
    return rep.mean


def test_criterion_5_deformable_reconstruction():
    run = desk_run("deformable")
    m = _test_report(run)
    ok = record(5, m["psnr"] >= 25 and m["ssim"] >= 0.85 and m["abs_rel"] <= 0.05 and run.seconds < 1200,
                f"test PSNR {m['psnr']:.2f} dB (>=25), SSIM {m['ssim']:.4f} (>=0.85), "
                f"abs_rel {m['abs_rel']:.4f} (<=0.05); {run.seconds:.0f}s (limit 1200s)")
    assert ok


# ------------------------------------------------------------------ 6


ABLATION = {
    "w/o L_d L_corr": ("loss.w_corr=0", "loss.w_depth=0"),
    "w/o L_d": ("loss.w_depth=0",),
    "w/o L_corr": ("loss.w_corr=0",),
    "final": (),
}


def test_criterion_6_ablation_ordering():
    scores = {k: _test_report(desk_run("deformable", ov))["psnr"] for k, ov in ABLATION.items()}
    tie = 0.2
    final, both = scores["final"], scores["w/o L_d L_corr"]
    singles = [scores["w/o L_d"], scores["w/o L_corr"]]
    ok = all(final >= s - tie for s in singles) and all(s >= both - tie for s in singles)
    record(6, ok, ", ".join(f"{k} {v:.2f} dB" for k, v in scores.items()) + f" (tie band {tie} dB)")
    assert ok


# ------------------------------------------------------------------ 7


def test_criterion_7_rendering_oracle():
    g = np.random.default_rng(7)
    n, M, near, far = 1000, 64, 1.0, 10.0
    z0 = g.uniform(3.0, 7.0, n)
    origins = np.column_stack([g.normal(size=(n, 2)) * 0.2, np.zeros(n)])
    dirs = np.column_stack([g.normal(size=(n, 2)) * 0.3, np.ones(n)])
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    t_hit = (z0 - origins[:, 2]) / dirs[:, 2]
    worst_ratio, worst_gap, max_opacity = 0.0, 0.0, 0.0
    # midpoint grid (uniform spacing) and jittered stratified samples (local spacing)
    for t in (stratified_t(n, near, far, M), stratified_t(n, near, far, M, rng=g)):
        z = origins[:, 2:3] + dirs[:, 2:3] * t
        sigma = np.where(z >= z0[:, None], 1e4, 0.0)  # opaque half-space behind the plane z = z0
        out = volume_render(with_deltas(t, near, far), np.full((n, M, 3), 0.5), sigma)
        k = np.argmax(t >= t_hit[:, None], axis=1)  # first sample at or past the surface
        spacing = t[np.arange(n), k] - t[np.arange(n), np.maximum(k - 1, 0)]
        err = np.abs(out.depth.data - t_hit)
        worst_ratio = max(worst_ratio, float(np.max(err / spacing)))
        worst_gap = max(worst_gap, float(np.abs(out.weights.data.sum(axis=1) - out.opacity.data).max()))
        max_opacity = max(max_opacity, float(out.opacity.data.max()))
    ok = record(7, worst_ratio <= 1.0 and worst_gap <= 1e-12 and max_opacity <= 1.0,
                f"max depth error {worst_ratio:.3f} sample spacings (tol 1), "
                f"max |sum w - opacity| {worst_gap:.1e}, max opacity {max_opacity:.6f}")
    assert ok


# ------------------------------------------------------------------ 8


def test_criterion_8_metric_fidelity():
    a = np.full((16, 16, 3), 0.4)
    rng = np.random.default_rng(8)
    r = rng.uniform(1, 5, (6, 6))
    img = rng.random((16, 16, 3))
    checks = {
        "psnr 0.1 offset = 20 dB": psnr(a, a + 0.1) == pytest.approx(20.0, abs=1e-9),
        "ratio 2: deltas (0, 0, 0)": (lambda m: (m.delta1, m.delta2, m.delta3) == (0.0, 0.0, 0.0))(
            depth_metrics(2 * r, r)),
        "ratio 1.2: delta1 = 1": depth_metrics(1.2 * r, r).delta1 == 1.0,
        "ssim identical = 1": ssim(img, img) == pytest.approx(1.0, abs=1e-12),
    }
    ok = record(8, all(checks.values()), "; ".join(f"{k}: {'ok' if v else 'FAIL'}" for k, v in checks.items()))
    assert ok


# ------------------------------------------------------------------ 9


def _tree(path):
    return {p.relative_to(path): p.read_bytes() for p in sorted(path.rglob("*")) if p.is_file()}


def test_criterion_9_determinism_and_resume(tmp_path):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps(TINY_SPEC))
    ovr = []
    for o in [*TINY_OVERRIDES, "log_wall_time=false"]:
        ovr += ["--override", o]
    trees = []
    for rep in ("a", "b"):
        root = tmp_path / rep
        assert main(["synth", "--spec", str(spec), "--seed", "11", "--out", str(root / "ds")]) == 0
        assert main(["train", "--dataset", str(root / "ds"), "--seed", "11", "--out", str(root / "train"),
                     *ovr]) == 0
        assert main(["eval", "--dataset", str(root / "ds"), "--checkpoint", str(root / "train" / "checkpoint.bin"),
                     "--out", str(root / "eval")]) == 0
        trees.append(_tree(root))
    identical = trees[0] == trees[1] and len(trees[0]) > 0

    ds, _ = tiny_dataset()
    straight = run_training(ds, tiny_config("log_wall_time=false"), 4)
    run_training(ds, tiny_config("log_wall_time=false", "schedule.total_iters=4"), 4, out_dir=tmp_path / "half")
    resumed = run_training(ds, tiny_config("log_wall_time=false"), 4,
                           resume=tmp_path / "half" / "checkpoint.bin")
    at_resume = max(abs(x - y) for x, y in zip(straight.log[4][2:6], resumed.log[4][2:6]))
    final = max(abs(x - y) for x, y in zip(straight.log[-1][2:6], resumed.log[-1][2:6]))
    ok = record(9, identical and at_resume <= 1e-9 and final <= 1e-9,
                f"{len(trees[0])} files byte-identical across two synth/train/eval runs: {identical}; "
                f"loss difference at the resume iteration {at_resume:.1e}, at the end {final:.1e} (tol 1e-9)")
    assert ok
