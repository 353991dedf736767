"""Image and depth metrics, test-view rendering and the evaluation report."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .autodiff import Tensor
from .config import Config
from .data import Dataset, write_bdep, write_ppm
from .fields import FieldBundle, init_fields
from .geometry import Intrinsics, generate_rays, pose_error, pose_to_se3, rows_to_rt
from .optim import load_checkpoint
from .rendering import stratified_t

log = logging.getLogger(__name__)

LUMA = np.array([0.299, 0.587, 0.114])


@dataclass
class ImageMetrics:
    psnr: float
    ssim: float


@dataclass
class DepthMetrics:
    abs_rel: float
    sq_rel: float
    rmse: float
    rmse_log: float
    delta1: float
    delta2: float
    delta3: float


def psnr(a, b, valid=None) -> float:
    """10 log10(1 / MSE) over valid pixels and all channels; ``inf`` when identical."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"psnr: shape mismatch {a.shape} vs {b.shape}")
    diff = (a - b) ** 2
    if valid is not None:
        valid = np.asarray(valid, bool)
        if valid.shape != a.shape[: valid.ndim]:
            raise ValueError("psnr: mask does not match the image")
        diff = diff[valid]
    if diff.size == 0:
        raise ValueError("psnr: no valid pixels")
    mse = float(diff.mean())
    return math.inf if mse == 0 else 10.0 * math.log10(1.0 / mse)


def to_gray(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    return img @ LUMA if img.ndim == 3 else img


def _gaussian_window(size=11, sigma=1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def ssim_map(a, b, size: int = 11, sigma: float = 1.5) -> np.ndarray:
    """Per-window SSIM over all fully-contained 11x11 windows (grayscale inputs)."""
    a, b = to_gray(a), to_gray(b)
    if a.shape != b.shape:
        raise ValueError(f"ssim: shape mismatch {a.shape} vs {b.shape}")
    if min(a.shape) < size:
        raise ValueError(f"ssim: image {a.shape} smaller than the {size}x{size} window")
    w = _gaussian_window(size, sigma)

    def filt(x):
        return np.einsum("ijkl,kl->ij", sliding_window_view(x, (size, size)), w)

    c1, c2 = 0.01 ** 2, 0.03 ** 2
    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a ** 2
    var_b = filt(b * b) - mu_b ** 2
    cov = filt(a * b) - mu_a * mu_b
    return ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2))


def ssim(a, b, valid=None) -> float:
    """Mean windowed SSIM; with ``valid``, windows centred on invalid pixels are skipped."""
    m = ssim_map(a, b)
    if valid is not None:
        r = (np.asarray(valid).shape[0] - m.shape[0]) // 2
        keep = np.asarray(valid, bool)[r:r + m.shape[0], r:r + m.shape[1]]
        if not keep.any():
            raise ValueError("ssim: no valid windows")
        m = m[keep]
    return float(np.clip(m.mean(), -1.0, 1.0))


def depth_metrics(pred, ref, valid=None, median_scaling: bool = False) -> DepthMetrics:
    pred, ref = np.asarray(pred, dtype=np.float64), np.asarray(ref, dtype=np.float64)
    if pred.shape != ref.shape:
        raise ValueError(f"depth_metrics: shape mismatch {pred.shape} vs {ref.shape}")
    valid = np.ones(pred.shape, bool) if valid is None else np.asarray(valid, bool)
    for name, arr in (("prediction", pred), ("reference", ref)):
        bad = np.argwhere(valid & ~(arr > 0))
        if len(bad):
            raise ValueError(f"depth_metrics: non-positive {name} depth at pixel {tuple(int(i) for i in bad[0])}")
    p, r = pred[valid], ref[valid]
    if p.size == 0:
        raise ValueError("depth_metrics: no valid pixels")
    if median_scaling:
        p = p * (np.median(r) / np.median(p))
    ratio = np.maximum(p / r, r / p)
    return DepthMetrics(
        abs_rel=float(np.mean(np.abs(p - r) / r)),
        sq_rel=float(np.mean((p - r) ** 2 / r)),
        rmse=float(np.sqrt(np.mean((p - r) ** 2))),
        rmse_log=float(np.sqrt(np.mean((np.log(p) - np.log(r)) ** 2))),
        delta1=float(np.mean(ratio < 1.25)),
        delta2=float(np.mean(ratio < 1.25 ** 2)),
        delta3=float(np.mean(ratio < 1.25 ** 3)),
    )


# ---------------------------------------------------------------- rendering


@dataclass
class LoadedRun:
    cfg: Config
    step: int
    poses: np.ndarray
    bundle: FieldBundle
    meta: dict


def load_run(checkpoint) -> LoadedRun:
    """Rebuild the pose rows and fields stored in a training checkpoint."""
    groups, step, meta = load_checkpoint(checkpoint)
    cfg = Config.from_dict(meta["config"])
    by_name = {g.name: g for g in groups}
    bundle = init_fields(cfg.field, np.asarray(meta["scene_box"]), np.random.default_rng(0))
    for name, params in (("deform", bundle.deform_params.tensors), ("canon", bundle.canon_params.tensors)):
        stored = by_name[name].tensors
        if [t.shape for t in stored] != [t.shape for t in params]:
            raise ValueError(f"{checkpoint}: group {name!r} does not match its stored config")
        for dst, src in zip(params, stored):
            dst.data = src.data
    return LoadedRun(cfg, step, by_name["pose"].tensors[0].data.copy(), bundle, meta)


def render_image(bundle: FieldBundle, intr: Intrinsics, row, time: float, near: float, far: float,
                 n_samples: int = 64, chunk: int = 2048, depth_mode: str = "expected"):
    """Full-raster render at one pose row and timestamp.

    Samples sit at bin midpoints so renders are deterministic. Returns colour
    (H, W, 3), z-depth (H, W) and opacity (H, W).
    """
    from .training import render_rays

    pix = intr.pixel_centers().reshape(-1, 2)
    R, t = rows_to_rt(Tensor(np.asarray(row, dtype=np.float64)[None]))
    color = np.empty((len(pix), 3))
    ray_depth = np.empty(len(pix))
    opacity = np.empty(len(pix))
    for s in range(0, len(pix), chunk):
        p = pix[s:s + chunk]
        n = len(p)
        idx = np.zeros(n, dtype=int)
        from . import autodiff as ad
        o, d = generate_rays(intr, ad.gather(R, idx), ad.gather(t, idx), p)
        tv = stratified_t(n, near, far, n_samples)
        out = render_rays(bundle, o, d, np.full(n, float(time)), tv, near, far, depth_mode)
        color[s:s + n] = out.color.data
        ray_depth[s:s + n] = out.depth.data
        opacity[s:s + n] = out.opacity.data
    z = ray_depth / np.linalg.norm(intr.camera_dirs(pix), axis=-1)
    shape = (intr.height, intr.width)
    return color.reshape(shape + (3,)), z.reshape(shape), opacity.reshape(shape)


# ------------------------------------------------------------------- report


def _fmt(v) -> str:
    if isinstance(v, float):
        return "inf" if math.isinf(v) else f"{v:.10g}"
    return str(v)


@dataclass
class Report:
    header: dict
    frames: dict  # frame -> dict of metrics, or {"error": message}
    mean: dict
    pose: dict | None

    def text(self) -> str:
        lines = [f"{k}={_fmt(v)}" for k, v in self.header.items()]
        for f, vals in self.frames.items():
            lines.append(f"[frame {f}]")
            lines += [f"{k}={_fmt(v)}" for k, v in vals.items()]
        lines.append("[mean]")
        lines += [f"{k}={_fmt(v)}" for k, v in self.mean.items()]
        if self.pose is not None:
            lines.append("[pose]")
            lines += [f"{k}={_fmt(v)}" for k, v in self.pose.items()]
        return "\n".join(lines) + "\n"


def parse_report(text: str) -> dict:
    """Section name -> {key: value}; the header lands under ``""``."""
    out: dict = {"": {}}
    cur = out[""]
    for line in text.splitlines():
        if line.startswith("["):
            cur = out.setdefault(line.strip("[]"), {})
        elif "=" in line:
            k, v = line.split("=", 1)
            try:
                cur[k] = float(v)
            except ValueError:
                cur[k] = v
    return out


def evaluate_frames(run: LoadedRun, dataset: Dataset, frames, median_scaling=None, out_dir=None) -> Report:
    cfg = run.cfg
    median_scaling = cfg.median_scaling if median_scaling is None else median_scaling
    intr = dataset.intrinsics
    per: dict = {}
    for f in frames:
        fr = dataset.frames[f]
        try:
            color, z, _ = render_image(run.bundle, intr, run.poses[f], fr.time, dataset.near, dataset.far,
                                       cfg.render.eval_samples, cfg.render.chunk, cfg.render.depth_mode)
            valid = np.ones(color.shape[:2], bool) if fr.tool_mask is None else ~fr.tool_mask.astype(bool)
            vals = {"psnr": psnr(color, fr.image, valid), "ssim": ssim(color, fr.image, valid)}
            if fr.ref_depth is not None:
                dm = depth_metrics(z, fr.ref_depth, valid & (fr.ref_depth > 0), median_scaling)
                vals.update({k.name: getattr(dm, k.name) for k in fields(DepthMetrics)})
            if out_dir is not None:
                write_ppm(Path(out_dir) / f"render_{f:05d}.ppm", np.clip(color, 0, 1))
                write_bdep(Path(out_dir) / f"render_{f:05d}.bdep", z)
            per[f] = vals
        except Exception as exc:  # recorded, the remaining frames still run
            log.warning("frame %d failed: %s", f, exc)
            per[f] = {"error": str(exc).replace("\n", " ")}
    ok = [v for v in per.values() if "error" not in v]
    mean: dict = {"frames_ok": len(ok), "frames_failed": len(per) - len(ok)}
    if ok:
        for key in ok[0]:
            mean[key] = float(np.mean([v[key] for v in ok]))
    pose = None
    if dataset.has_gt_poses and len(dataset.train) >= 3:
        est = [pose_to_se3(run.poses[k], k) for k in dataset.train]
        ref = [dataset.frames[k].gt_pose for k in dataset.train]
        try:
            rot, cen = pose_error(est, ref)
            pose = {"rotation_error_deg": rot, "center_error": cen}
        except ValueError as exc:
            pose = {"error": str(exc)}
    header = {"step": run.step, "median_scaling": str(bool(median_scaling)).lower(),
              "lpips": "not_computed"}
    return Report(header, per, mean, pose)


def evaluate_run(checkpoint, dataset: Dataset, split: str = "test", out_dir=None,
                 median_scaling=None) -> Report:
    """Render the split's views at their learned poses and score them.

    With ``out_dir`` the renders and ``report.txt`` are written there.
    """
    if split not in ("test", "train"):
        raise ValueError(f"unknown split {split!r}")
    frames = dataset.test if split == "test" else dataset.train
    if not frames:
        raise ValueError(f"the {split} split is empty")
    run = load_run(checkpoint)
    if len(run.poses) != len(dataset):
        raise ValueError(f"checkpoint has {len(run.poses)} poses but the dataset has {len(dataset)} frames")
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
    report = evaluate_frames(run, dataset, frames, median_scaling, out_dir)
    report.header["split"] = split
    if out_dir is not None:
        (Path(out_dir) / "report.txt").write_text(report.text())
    return report
