"""Analytic deformable scenes with exact images, depths, poses and correspondences.

A material point with canonical position ``S`` sits at
``S + A * (sin(w t + phi(S)) - sin(phi(S))) * n`` at time ``t``; the
subtracted term makes ``t = 0`` the canonical state for every point.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from .data import CORR_DTYPE, Dataset, Frame, default_split, save_dataset
from .geometry import Intrinsics, SE3Pose, project

log = logging.getLogger(__name__)


class SceneSpecError(ValueError):
    pass


@dataclass
class SyntheticSceneSpec:
    surface: str = "plane"  # plane | sphere
    depth: float = 5.0  # plane distance / nearest sphere point along +z
    sphere_radius: float = 4.0
    amplitude: float = 0.03  # displacement amplitude as a fraction of depth
    omega: float = 4.0  # temporal angular frequency over normalised time
    phase_freq: float = 1.5  # spatial frequency of the phase field (rad / unit)
    direction: list = field(default_factory=lambda: [0.6, 0.0, -0.8])
    frame_count: int = 16
    width: int = 48
    height: int = 36
    focal: float = 40.0
    max_rotation_deg: float = 8.0
    max_translation: float = 0.05  # fraction of depth
    texture: str = "smooth"  # smooth | checker
    texture_period: float = 3.0
    texture_seed: int = 3
    near: float | None = None
    far: float | None = None
    tool: bool = False
    pairs_per_frame_pair: int = 24
    test_fraction: float = 0.1

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSceneSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise SceneSpecError(f"unknown scene keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "SyntheticSceneSpec":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (json.JSONDecodeError, TypeError) as exc:
            raise SceneSpecError(f"{path}: {exc}") from exc

    @property
    def bounds(self) -> tuple[float, float]:
        near = self.near if self.near is not None else 0.7 * self.depth
        far = self.far if self.far is not None else 1.5 * self.depth
        return near, far

    def validate(self) -> None:
        if self.surface not in ("plane", "sphere"):
            raise SceneSpecError(f"unknown surface {self.surface!r}")
        if self.texture not in ("smooth", "checker"):
            raise SceneSpecError(f"unknown texture {self.texture!r}")
        if self.frame_count < 3 or self.width < 11 or self.height < 11:
            raise SceneSpecError("need >= 3 frames and images of at least 11x11")
        if self.depth <= 0 or self.focal <= 0 or self.amplitude < 0:
            raise SceneSpecError("depth and focal must be positive, amplitude non-negative")
        near, far = self.bounds
        if not 0 < near < far:
            raise SceneSpecError("invalid near/far bounds")
        reach = self.amplitude * self.depth * 2
        if not near < self.depth - reach or np.linalg.norm(self.direction) == 0:
            raise SceneSpecError("deformation would push the surface outside [near, far]")
        if self.surface == "sphere" and self.sphere_radius <= 0:
            raise SceneSpecError("sphere radius must be positive")


class SyntheticScene:
    def __init__(self, spec: SyntheticSceneSpec):
        spec.validate()
        self.spec = spec
        self.A = spec.amplitude * spec.depth
        self.n = np.asarray(spec.direction, dtype=np.float64)
        self.n = self.n / np.linalg.norm(self.n)
        self.k = spec.phase_freq * np.array([np.cos(0.7), np.sin(0.7), 0.0])
        tex_rng = np.random.default_rng(spec.texture_seed)
        ang = tex_rng.uniform(0, np.pi, (3, 3))
        self.tex_dirs = np.stack([np.cos(ang), np.sin(ang)], axis=-1)  # (channel, wave, 2)
        self.tex_phase = tex_rng.uniform(0, 2 * np.pi, (3, 3))
        self.intr = Intrinsics(spec.focal, spec.focal, spec.width / 2.0, spec.height / 2.0,
                               spec.width, spec.height)
        if spec.surface == "sphere":
            self.center = np.array([0.0, 0.0, spec.depth + spec.sphere_radius])

    # -- deformation -------------------------------------------------------

    def phase(self, S):
        return S @ self.k

    def displacement(self, S, t):
        """delta(S, t) for canonical points S (..., 3)."""
        ph = self.phase(S)
        t = np.asarray(t, dtype=np.float64)
        amp = self.A * (np.sin(self.spec.omega * t + ph) - np.sin(ph))
        return amp[..., None] * self.n

    def deformed(self, S, t):
        return S + self.displacement(S, t)

    def undeform(self, X, t, iters: int = 100):
        """Canonical point whose deformed position at ``t`` is ``X`` (fixed-point solve)."""
        S = np.array(X, dtype=np.float64)
        for _ in range(iters):
            S_new = X - self.displacement(S, t)
            if np.max(np.abs(S_new - S)) < 1e-15:
                return S_new
            S = S_new
        return S

    # -- surface -------------------------------------------------------------

    def surface_point(self, ab):
        a, b = ab[..., 0], ab[..., 1]
        if self.spec.surface == "plane":
            return np.stack([a, b, np.full_like(a, self.spec.depth)], axis=-1)
        v = np.stack([a, b, -np.ones_like(a)], axis=-1)
        return self.center + self.spec.sphere_radius * v / np.linalg.norm(v, axis=-1, keepdims=True)

    def surface_jac(self, ab):
        """dS/da, dS/db, each (..., 3)."""
        a = ab[..., 0]
        if self.spec.surface == "plane":
            ea = np.zeros(ab.shape[:-1] + (3,))
            eb = ea.copy()
            ea[..., 0] = 1
            eb[..., 1] = 1
            return ea, eb
        v = np.stack([ab[..., 0], ab[..., 1], -np.ones_like(a)], axis=-1)
        nv = np.linalg.norm(v, axis=-1, keepdims=True)
        u = v / nv
        R = self.spec.sphere_radius
        ja = R * (np.eye(3)[0] - u * u[..., :1]) / nv
        jb = R * (np.eye(3)[1] - u * u[..., 1:2]) / nv
        return ja, jb

    def _initial_guess(self, o, d):
        if self.spec.surface == "plane":
            s = (self.spec.depth - o[:, 2]) / d[:, 2]
            hit = o + s[:, None] * d
            return hit[:, :2], s, s > 0
        oc = o - self.center
        bq = (oc * d).sum(-1)
        disc = bq ** 2 - ((oc ** 2).sum(-1) - self.spec.sphere_radius ** 2)
        ok = disc > 0
        s = -bq - np.sqrt(np.where(ok, disc, 0.0))
        p = o + s[:, None] * d - self.center
        ok &= p[:, 2] < -1e-6
        ab = -p[:, :2] / np.where(ok, p[:, 2], -1.0)[:, None]
        return ab, s, ok & (s > 0)

    def intersect(self, o, d, t):
        """Ray / deformed-surface intersection by Newton's method.

        Returns material parameters (R, 2), ray distances (R,) and a hit mask.
        """
        o = np.broadcast_to(o, d.shape).astype(np.float64)
        ab, s, ok = self._initial_guess(o, d)
        w = self.spec.omega * t
        for _ in range(50):
            S = self.surface_point(ab)
            ph = self.phase(S)
            F = self.deformed(S, t) - (o + s[:, None] * d)
            ja, jb = self.surface_jac(ab)
            dphase = self.A * (np.cos(w + ph) - np.cos(ph))
            Ja = ja + (dphase * (ja @ self.k))[:, None] * self.n
            Jb = jb + (dphase * (jb @ self.k))[:, None] * self.n
            J = np.stack([Ja, Jb, -d], axis=-1)
            ok &= np.isfinite(J).all(axis=(1, 2)) & (np.abs(np.linalg.det(J)) > 1e-12)
            step = np.zeros((len(d), 3))
            if ok.any():
                step[ok] = np.linalg.solve(J[ok], -F[ok][..., None])[..., 0]
            ab = ab + step[:, :2]
            s = s + step[:, 2]
            if np.max(np.abs(step), initial=0.0) < 1e-14:
                break
        S = self.surface_point(ab)
        resid = np.linalg.norm(self.deformed(S, t) - (o + s[:, None] * d), axis=-1)
        ok &= resid < 1e-9
        return ab, s, ok

    # -- appearance ----------------------------------------------------------

    def albedo(self, S):
        xy = S[..., :2] / self.spec.texture_period
        if self.spec.texture == "checker":
            c = np.tanh(3.0 * np.sin(np.pi * xy[..., 0]) * np.sin(np.pi * xy[..., 1]))
            base = np.stack([0.5 + 0.3 * c, 0.45 + 0.2 * c, 0.4 - 0.25 * c], axis=-1)
            return np.clip(base, 0, 1)
        out = []
        for ch in range(3):
            val = 0.5
            for wv, amp in zip(range(3), (0.22, 0.12, 0.06)):
                arg = 2 * np.pi * (xy @ self.tex_dirs[ch, wv]) * (1 + wv) + self.tex_phase[ch, wv]
                val = val + amp * np.sin(arg)
            out.append(val)
        return np.clip(np.stack(out, axis=-1), 0, 1)

    # -- cameras -------------------------------------------------------------

    def pose(self, i: int) -> SE3Pose:
        spec = self.spec
        s = i / (spec.frame_count - 1)
        r = np.radians(spec.max_rotation_deg)
        rotvec = r * np.array([0.8 * (1 - np.cos(2 * np.pi * s)) / 2, 0.6 * np.sin(2 * np.pi * s), 0.0])
        T = spec.max_translation * spec.depth
        trans = T * np.array([0.8 * np.sin(2 * np.pi * s), 0.5 * (1 - np.cos(2 * np.pi * s)) / 2,
                              0.4 * np.sin(np.pi * s)])
        return SE3Pose(Rotation.from_rotvec(rotvec).as_matrix(), trans)

    def time(self, i: int) -> float:
        return i / (self.spec.frame_count - 1)

    def render_frame(self, i: int):
        """Exact colour, z-depth (0 where missed), tool mask and hit parameters for frame i."""
        intr, pose, t = self.intr, self.pose(i), self.time(i)
        pix = intr.pixel_centers()
        d = intr.camera_dirs(pix) @ pose.R.T
        d /= np.linalg.norm(d, axis=-1, keepdims=True)
        ab, s, ok = self.intersect(pose.t, d, t)
        near, far = self.spec.bounds
        ok &= (s > near) & (s < far)
        S = self.surface_point(ab)
        X = pose.t + s[:, None] * d
        z = (X - pose.t) @ pose.R[:, 2]
        h, w = intr.height, intr.width
        color = np.where(ok[:, None], self.albedo(S), 0.0).reshape(h, w, 3)
        depth = np.where(ok, z, 0.0).reshape(h, w)
        mask = None
        if self.spec.tool:
            cols = np.arange(w)[None, :] + 0.5
            rows = np.arange(h)[:, None] + 0.5
            centre = w * (0.25 + 0.5 * t)
            mask = (np.abs(cols - centre - 0.3 * (rows - h / 2)) < w * 0.06) & (rows > h * 0.3)
            color[mask] = 0.35
            depth[mask] = 0.0
        return color, depth, mask, ok.reshape(h, w), S.reshape(h, w, 3)

    def scene_box(self) -> np.ndarray:
        near, far = self.spec.bounds
        intr = self.intr
        corners = np.array([[0, 0], [intr.width, 0], [0, intr.height], [intr.width, intr.height]],
                           dtype=np.float64)
        dirs = intr.camera_dirs(corners)
        dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
        pts = []
        for i in range(self.spec.frame_count):
            p = self.pose(i)
            for dist in (near, far):
                pts.append(p.t + dist * dirs @ p.R.T)
        pts = np.concatenate(pts)
        lo, hi = pts.min(axis=0), pts.max(axis=0)
        pad = 0.05 * (hi - lo)
        return np.stack([lo - pad, hi + pad])


def generate_synthetic(spec: SyntheticSceneSpec, rng: np.random.Generator, out_dir=None):
    """Build the dataset (and, with ``out_dir``, write it plus the oracle sidecar).

    Returns ``(dataset, oracle)`` where ``oracle`` holds per-record canonical
    points and exact z-depths at both pixels.
    """
    scene = SyntheticScene(spec)
    if spec.amplitude == 0:
        warnings.warn("static scene: deformation amplitude is zero", stacklevel=2)
    n = spec.frame_count
    renders = [scene.render_frame(i) for i in range(n)]
    for i, (_, _, _, hit, _) in enumerate(renders):
        if hit.mean() < 0.5:
            raise SceneSpecError(f"degenerate framing: frame {i} hits the surface on "
                                 f"{100 * hit.mean():.0f}% of pixels")
    train, test = default_split(n, spec.test_fraction)
    frames = [Frame(np.round(c * 255) / 255, scene.time(i), m,
                     d.astype(np.float32).astype(np.float64), scene.pose(i))
              for i, (c, d, m, _, _) in enumerate(renders)]
    near, far = spec.bounds
    ds = Dataset(frames, scene.intr, near, far, scene.scene_box(), train, test)

    records, oracle_rows = [], []
    intr = scene.intr
    for a in range(n):
        col_a, dep_a, mask_a, hit_a, S_a = renders[a]
        valid = np.flatnonzero((dep_a > 0).ravel())
        for b in range(a + 1, n):
            pick = rng.choice(valid, size=min(spec.pairs_per_frame_pair, len(valid)), replace=False)
            pick.sort()
            S = S_a.reshape(-1, 3)[pick]
            pa = intr.pixel_centers()[pick]
            pose_b, tb = scene.pose(b), scene.time(b)
            Xb = scene.deformed(S, tb)
            qb, zb = project(intr, pose_b, Xb)
            inside = ((qb[:, 0] >= 0) & (qb[:, 0] <= intr.width) & (qb[:, 1] >= 0)
                      & (qb[:, 1] <= intr.height) & (zb > 0))
            if not inside.any():
                continue
            # visibility: the ray through q in frame b must land on the same material point
            d = intr.camera_dirs(qb[inside]) @ pose_b.R.T
            d /= np.linalg.norm(d, axis=-1, keepdims=True)
            ab, s, ok = scene.intersect(pose_b.t, d, tb)
            same = ok & (np.linalg.norm(scene.surface_point(ab) - S[inside], axis=-1) < 1e-7)
            if spec.tool and renders[b][2] is not None:
                jj = np.clip(qb[inside, 1].astype(int), 0, intr.height - 1)
                ii = np.clip(qb[inside, 0].astype(int), 0, intr.width - 1)
                same &= ~renders[b][2][jj, ii]
            for k_in, keep in zip(np.flatnonzero(inside), same):
                if not keep:
                    continue
                records.append((a, b, tuple(pa[k_in]), tuple(qb[k_in]), 1.0))
                za = dep_a.ravel()[pick[k_in]]
                oracle_rows.append(np.concatenate([S[k_in], [za, zb[k_in]]]))
    ds.correspondences = np.array(records, dtype=CORR_DTYPE)
    oracle = {"canonical": np.array([r[:3] for r in oracle_rows]).reshape(-1, 3),
              "depth_a": np.array([r[3] for r in oracle_rows]),
              "depth_b": np.array([r[4] for r in oracle_rows])}
    ds.validate()
    if out_dir is not None:
        write_synthetic(ds, oracle, spec, out_dir)
    return ds, oracle


def write_synthetic(ds: Dataset, oracle: dict, spec: SyntheticSceneSpec, out_dir) -> None:
    out = Path(out_dir)
    save_dataset(ds, out)
    (out / "oracle").mkdir(exist_ok=True)
    rows = [f"{i} " + " ".join(repr(float(x)) for x in (*c, za, zb))
            for i, (c, za, zb) in enumerate(zip(oracle["canonical"], oracle["depth_a"], oracle["depth_b"]))]
    (out / "oracle" / "canonical_points.txt").write_text("\n".join(rows) + ("\n" if rows else ""))
    (out / "oracle" / "scene.json").write_text(json.dumps(asdict(spec), indent=2, sort_keys=True) + "\n")


def read_oracle(root) -> dict:
    rows = np.loadtxt(Path(root) / "oracle" / "canonical_points.txt", ndmin=2)
    return {"canonical": rows[:, 1:4], "depth_a": rows[:, 4], "depth_b": rows[:, 5]}
