"""Losses, the two-stage schedule and the training loop."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .config import Config, LossWeights
from .data import Dataset, lookup_depth
from .fields import FieldBundle, canonical_from_encoded, deform, encode_dirs, init_fields
from .geometry import Intrinsics, backproject_batch, generate_rays, identity_rows, interpolate_rows, rows_to_rt
from .optim import NonFiniteGradientError, ParamGroup, adam_step, load_checkpoint, save_checkpoint
from .rendering import (RenderOutput, build_importance_map, depth_guided_t, merge_t, sample_pixels,
                        stratified_t, volume_render, with_deltas)

log = logging.getLogger(__name__)

LOG_HEADER = "iteration\tstage\tL_pho\tL_corr\tL_d\ttotal\twall_ms"


class NumericalAbort(FloatingPointError):
    pass


@dataclass
class LossStats:
    empty_photometric: int = 0
    empty_depth: int = 0
    skipped_correspondences: int = 0


# ------------------------------------------------------------------- losses


def _masked_mean_sq(pred: Tensor, truth, valid, stats: LossStats | None, counter: str) -> Tensor:
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ad.ShapeError("loss", pred.shape, truth.shape)
    valid = np.ones(pred.shape[0], bool) if valid is None else np.asarray(valid, bool)
    idx = np.flatnonzero(valid)
    if len(idx) == 0:
        if stats is not None:
            setattr(stats, counter, getattr(stats, counter) + 1)
        return Tensor(0.0)
    diff = ad.gather(pred, idx) - truth[idx]
    sq = ad.square(diff)
    if sq.ndim > 1:
        sq = ad.sum_(sq, axis=tuple(range(1, sq.ndim)))
    return ad.mean(sq)


def photometric_loss(rendered, truth, valid=None, stats: LossStats | None = None) -> Tensor:
    """Mean over valid pixels of the squared colour error norm."""
    return _masked_mean_sq(ad.as_tensor(rendered), truth, valid, stats, "empty_photometric")


def depth_loss(rendered_depth, reference, valid=None, stats: LossStats | None = None) -> Tensor:
    return _masked_mean_sq(ad.as_tensor(rendered_depth), reference, valid, stats, "empty_depth")


def huber_points(a, b, delta: float) -> Tensor:
    """Per-record Huber distance between point sets (K, 3): summed over xyz, mean over K."""
    return ad.mean(ad.sum_(ad.huber(a, b, delta), axis=1))


def correspondence_loss(records: np.ndarray, poses, bundle: FieldBundle, depths, intr: Intrinsics,
                        times, weights: LossWeights, stats: LossStats | None = None,
                        weighted: bool = True) -> Tensor:
    """Pull matched pixels to the same canonical point.

    ``depths(frame, pixels)`` returns reference z-depth (NaN where missing);
    ``poses`` is the (N, 9) pose layer (a tensor, so gradients reach it).
    """
    if len(records) == 0:
        return Tensor(0.0)
    fa, fb = records["frame_a"], records["frame_b"]
    za = np.empty(len(records))
    zb = np.empty(len(records))
    for f in np.unique(np.concatenate([fa, fb])):
        sel = fa == f
        if sel.any():
            za[sel] = depths(f, records["pixel_a"][sel])
        sel = fb == f
        if sel.any():
            zb[sel] = depths(f, records["pixel_b"][sel])
    ok = np.isfinite(za) & np.isfinite(zb) & (za > 0) & (zb > 0)
    if stats is not None:
        stats.skipped_correspondences += int((~ok).sum())
    if not ok.any():
        return Tensor(0.0)
    rec = records[ok]
    fa, fb, za, zb = fa[ok], fb[ok], za[ok], zb[ok]
    R, t = rows_to_rt(poses)
    xp = backproject_batch(intr, ad.gather(R, fa), ad.gather(t, fa), rec["pixel_a"], za)
    xq = backproject_batch(intr, ad.gather(R, fb), ad.gather(t, fb), rec["pixel_b"], zb)
    times = np.asarray(times)
    ta = times[fa]
    tb = times[fb] if weights.corr_time == "target" else ta
    k = len(rec)
    both = ad.concat([xp, xq], axis=0)
    canon = both + deform(bundle, both, np.concatenate([ta, tb]))
    loss = huber_points(canon[:k], canon[k:], weights.huber_delta)
    return loss * weights.w_corr if weighted else loss


# ---------------------------------------------------------------- rendering


def render_rays(bundle: FieldBundle, origins, dirs, times, t_vals, near, far,
                depth_mode: str = "expected") -> RenderOutput:
    """Volume-render rays (B,) with per-ray sample distances ``t_vals`` (B, M)."""
    origins, dirs = ad.as_tensor(origins), ad.as_tensor(dirs)
    B, M = t_vals.shape
    samples = with_deltas(t_vals, near, far)
    pts = ad.reshape(origins, (B, 1, 3)) + ad.reshape(dirs, (B, 1, 3)) * t_vals[..., None]
    pts = ad.reshape(pts, (B * M, 3))
    tt = np.repeat(np.asarray(times, dtype=np.float64), M)
    d_enc = encode_dirs(bundle, dirs)
    d_enc = ad.reshape(ad.broadcast_to(ad.reshape(d_enc, (B, 1, -1)), (B, M, d_enc.shape[1])),
                       (B * M, -1))
    x0 = pts + deform(bundle, pts, tt)
    color, sigma = canonical_from_encoded(bundle, x0, d_enc)
    return volume_render(samples, ad.reshape(color, (B, M, 3)), ad.reshape(sigma, (B, M)),
                         depth_mode=depth_mode)


def ray_samples(cfg: Config, n_rays: int, near: float, far: float, z_ray, rng, n_samples=None):
    """Per-ray sample distances for the configured sampling mode.

    ``z_ref`` entries that are NaN fall back to stratified sampling.
    """
    rc = cfg.render
    M = n_samples or rc.n_samples
    if rc.sampling == "stratified" or z_ray is None:
        return stratified_t(n_rays, near, far, M, rng=rng)
    z_ray = np.asarray(z_ray, dtype=np.float64)
    good = np.isfinite(z_ray) & (z_ray > near) & (z_ray < far)
    scale = rc.gaussian_scale * (far - near)
    md = M if rc.sampling == "depth-guided" else M // 2
    guided = depth_guided_t(np.where(good, z_ray, (near + far) / 2), scale, near, far, md, rng=rng)
    fallback = stratified_t(n_rays, near, far, md, rng=rng)
    guided = np.where(good[:, None], guided, fallback)
    if md == M:
        return guided
    return merge_t(stratified_t(n_rays, near, far, M - md, rng=rng), guided, near=near, far=far)


# ----------------------------------------------------------------- trainer


def _row_frame_depth(dataset: Dataset):
    def depths(frame, pixels):
        d = dataset.frames[int(frame)].ref_depth
        if d is None:
            return np.full(len(pixels), np.nan)
        return lookup_depth(d, pixels)
    return depths


@dataclass
class TrainResult:
    poses: np.ndarray
    bundle: FieldBundle
    log: list
    stats: LossStats


class Trainer:
    """Owns all mutable training state; one ``step`` per iteration."""

    def __init__(self, dataset: Dataset, cfg: Config, seed: int = 0):
        if len(dataset) < 3:
            raise ValueError("training needs at least 3 frames")
        if not dataset.train:
            raise ValueError("training split is empty")
        cfg.validate()
        self.ds, self.cfg, self.seed = dataset, cfg, seed
        init_rng = np.random.default_rng([seed, 0x5EED])
        self.bundle = init_fields(cfg.field, dataset.scene_box, init_rng)
        self.pose_group = ParamGroup("pose", [Tensor(identity_rows(len(dataset)))])
        self.step_count = 0
        self.log: list[tuple] = []
        self.stats = LossStats()
        self.maps = [build_importance_map(f.tool_mask, cfg.render.tool_weight,
                                          shape=(dataset.intrinsics.height, dataset.intrinsics.width))
                     for f in dataset.frames]
        train = set(dataset.train)
        corr = dataset.correspondences
        keep = np.array([a in train and b in train for a, b in zip(corr["frame_a"], corr["frame_b"])],
                        dtype=bool)
        self.corr = corr[keep] if len(corr) else corr
        self.depths = _row_frame_depth(dataset)
        if cfg.schedule.pose_joint_iters == 0:
            self._freeze_poses()

    @property
    def groups(self) -> list[ParamGroup]:
        return [self.pose_group, *self.bundle.groups]

    @property
    def poses(self) -> Tensor:
        return self.pose_group.tensors[0]

    @property
    def done(self) -> bool:
        return self.step_count >= self.cfg.schedule.total_iters

    def _freeze_poses(self) -> None:
        ds = self.ds
        if ds.test:
            rows = self.poses.data.copy()
            times = ds.times
            train = sorted(ds.train)
            rows[ds.test] = interpolate_rows(times[train], rows[train], times[ds.test])
            self.poses.data = rows
        self.pose_group.freeze()

    # -- batches -----------------------------------------------------------

    def _ray_batch(self, frames, counts, rng):
        ds = self.ds
        intr = ds.intrinsics
        frame_idx, pixels = [], []
        for f, n in zip(frames, counts):
            pix = sample_pixels(self.maps[f], n, rng)
            frame_idx.append(np.full(n, f))
            pixels.append(pix)
        frame_idx = np.concatenate(frame_idx)
        pix = np.concatenate(pixels)
        cols, rows = pix[:, 0], pix[:, 1]
        truth = np.empty((len(pix), 3))
        valid = np.ones(len(pix), bool)
        z = np.full(len(pix), np.nan)
        for f in np.unique(frame_idx):
            sel = frame_idx == f
            fr = ds.frames[f]
            truth[sel] = fr.image[rows[sel], cols[sel]]
            if fr.tool_mask is not None:
                valid[sel] &= ~fr.tool_mask[rows[sel], cols[sel]]
            if fr.ref_depth is not None:
                zz = fr.ref_depth[rows[sel], cols[sel]]
                z[sel] = np.where(zz > 0, zz, np.nan)
        centers = pix + 0.5
        z_ray = z * np.linalg.norm(intr.camera_dirs(centers), axis=-1)
        return frame_idx, centers, truth, valid, z_ray

    # -- iteration -----------------------------------------------------------

    def step(self) -> tuple:
        cfg, ds = self.cfg, self.ds
        sch, lw = cfg.schedule, cfg.loss
        it = self.step_count + 1
        stage = 1 if it <= sch.pose_joint_iters else 2
        rng = np.random.default_rng([self.seed, it])
        t0 = time.perf_counter()

        if stage == 1:
            frames = list(ds.train)
            counts = [sch.rays_per_image] * len(frames)
        else:
            frames = [int(rng.choice(ds.train))]
            counts = [sch.stage2_rays]
        frame_idx, centers, truth, valid, z_ray = self._ray_batch(frames, counts, rng)
        t_vals = ray_samples(cfg, len(centers), ds.near, ds.far, z_ray, rng)
        corr = self.corr
        if len(corr) > sch.corr_batch:
            corr = corr[np.sort(rng.choice(len(corr), sch.corr_batch, replace=False))]

        tape = Tape()
        for g in self.groups:
            g.watch(tape)
        try:
            R, t = rows_to_rt(self.poses)
            origins, dirs = generate_rays(ds.intrinsics, ad.gather(R, frame_idx), ad.gather(t, frame_idx),
                                          centers)
            out = render_rays(self.bundle, origins, dirs, ds.times[frame_idx], t_vals, ds.near, ds.far,
                              cfg.render.depth_mode)
            l_pho = photometric_loss(out.color, truth, valid, self.stats)
            if lw.w_corr > 0:
                l_corr = correspondence_loss(corr, self.poses, self.bundle, self.depths, ds.intrinsics,
                                             ds.times, lw, self.stats, weighted=False)
            else:
                l_corr = Tensor(0.0)
            total = l_pho * lw.w_pho + l_corr * lw.w_corr
            l_d = Tensor(0.0)
            if stage == 2 and lw.w_depth > 0:
                dvalid = valid & np.isfinite(z_ray)
                l_d = depth_loss(out.depth, np.nan_to_num(z_ray), dvalid, self.stats)
                total = total + l_d * lw.w_depth
            if not np.isfinite(total.item()):
                raise NumericalAbort(f"non-finite loss at iteration {it}")
            grads = ad.backward(total)
            deform_lr = 0.0 if it <= sch.deform_hold_iters else sch.lr
            lr = {"pose": sch.pose_lr or sch.lr, "deform": deform_lr, "canon": sch.lr}
            try:
                adam_step(self.groups, {g.name: g.grads(grads) for g in self.groups}, lr, it)
            except NonFiniteGradientError as exc:
                raise NumericalAbort(f"iteration {it}: {exc}") from exc
        finally:
            for g in self.groups:
                g.release()

        self.step_count = it
        if stage == 1 and it == sch.pose_joint_iters:
            self._freeze_poses()
        wall = (time.perf_counter() - t0) * 1000.0 if cfg.log_wall_time else 0.0
        row = (it, stage, l_pho.item(), l_corr.item(), l_d.item(), total.item(), wall)
        self.log.append(row)
        return row

    # -- persistence ------------------------------------------------------------

    def meta(self) -> dict:
        ds = self.ds
        intr = ds.intrinsics
        return {"config": self.cfg.to_dict(), "seed": self.seed, "near": ds.near, "far": ds.far,
                "scene_box": np.asarray(ds.scene_box).tolist(), "times": ds.times.tolist(),
                "train": list(ds.train), "test": list(ds.test),
                "intrinsics": [intr.fx, intr.fy, intr.cx, intr.cy, intr.width, intr.height]}

    def save(self, path) -> None:
        save_checkpoint(path, self.groups, self.step_count, self.meta())

    def restore(self, path) -> None:
        groups, step, meta = load_checkpoint(path)
        by_name = {g.name: g for g in groups}
        for name in ("pose", "deform", "canon"):
            if name not in by_name:
                raise ValueError(f"{path}: checkpoint lacks group {name!r}")
        mine = {g.name: g for g in self.groups}
        for name, g in by_name.items():
            tgt = mine[name]
            if [t.shape for t in tgt.tensors] != [t.shape for t in g.tensors]:
                raise ValueError(f"{path}: group {name!r} does not match the configured architecture")
            for a, b in zip(tgt.tensors, g.tensors):
                a.data = b.data
            tgt.m, tgt.v, tgt.frozen = g.m, g.v, g.frozen
        self.step_count = step


def format_log_row(row) -> str:
    it, stage, lp, lc, ld, tot, wall = row
    return f"{it}\t{stage}\t{lp!r}\t{lc!r}\t{ld!r}\t{tot!r}\t{wall:.3f}"


def parse_log(path) -> list[tuple]:
    rows = []
    for line in Path(path).read_text().splitlines()[1:]:
        p = line.split("\t")
        rows.append((int(p[0]), int(p[1]), float(p[2]), float(p[3]), float(p[4]), float(p[5]),
                     float(p[6])))
    return rows


def write_log(path, rows) -> None:
    Path(path).write_text("\n".join([LOG_HEADER, *map(format_log_row, rows)]) + "\n")


def run_training(dataset: Dataset, cfg: Config, seed: int = 0, out_dir=None, resume=None,
                 progress=None) -> TrainResult:
    """Run (or resume) the full schedule.

    With ``out_dir`` the latest checkpoint (``checkpoint.bin``) and the log
    (``train_log.tsv``) are written every ``checkpoint_every`` iterations and
    at the end. On a numerical abort the last good checkpoint is left intact
    and :class:`NumericalAbort` propagates.
    """
    trainer = Trainer(dataset, cfg, seed)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    if resume is not None:
        trainer.restore(resume)
        log_path = Path(resume).with_name("train_log.tsv")
        if log_path.exists():
            trainer.log = [r for r in parse_log(log_path) if r[0] <= trainer.step_count]
    every = cfg.schedule.checkpoint_every
    try:
        while not trainer.done:
            row = trainer.step()
            if progress is not None:
                progress(row)
            if out is not None and (trainer.step_count % every == 0 or trainer.done):
                trainer.save(out / "checkpoint.bin")
                write_log(out / "train_log.tsv", trainer.log)
    except NumericalAbort:
        if out is not None:
            write_log(out / "train_log.tsv", trainer.log)
        raise
    return TrainResult(trainer.poses.data.copy(), trainer.bundle, trainer.log, trainer.stats)


def training_psnr(rows) -> np.ndarray:
    """Per-iteration PSNR implied by the logged photometric loss (per-channel MSE)."""
    lp = np.array([r[2] for r in rows])
    return -10.0 * np.log10(np.maximum(lp / 3.0, 1e-30))
