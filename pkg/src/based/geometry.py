"""Pinhole intrinsics, the 9-parameter pose layer, rays and backprojection.

Poses are camera-to-world with the camera looking down +z; pixel ``(u, v)``
is (column, row) in continuous coordinates, so the centre of integer pixel
``(i, j)`` is ``(i + 0.5, j + 0.5)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation, RotationSpline
from scipy.interpolate import CubicSpline

from . import autodiff as ad
from .autodiff import Tensor

IDENTITY_ROW = np.array([1.0, 0, 0, 0, 1.0, 0, 0, 0, 0])


class DegeneratePoseError(ValueError):
    def __init__(self, frame: int, reason: str):
        super().__init__(f"degenerate pose at frame {frame}: {reason}")
        self.frame = frame


class InvalidDepthError(ValueError):
    def __init__(self, pixel, frame, depth):
        super().__init__(f"non-positive depth {depth} at pixel {tuple(pixel)} of frame {frame}")
        self.pixel = pixel
        self.frame = frame


class AlignmentError(ValueError):
    pass


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside the image")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])

    def camera_dirs(self, pixels: np.ndarray) -> np.ndarray:
        """Unnormalised camera-frame directions ``((u-cx)/fx, (v-cy)/fy, 1)``."""
        pixels = np.asarray(pixels, dtype=np.float64)
        x = (pixels[..., 0] - self.cx) / self.fx
        y = (pixels[..., 1] - self.cy) / self.fy
        return np.stack([x, y, np.ones_like(x)], axis=-1)

    def pixel_centers(self) -> np.ndarray:
        """(H*W, 2) array of pixel centres in row-major order."""
        jj, ii = np.meshgrid(np.arange(self.height), np.arange(self.width), indexing="ij")
        return np.stack([ii.ravel() + 0.5, jj.ravel() + 0.5], axis=-1).astype(np.float64)

    def save(self, path) -> None:
        lines = [f"fx {self.fx!r}", f"fy {self.fy!r}", f"cx {self.cx!r}", f"cy {self.cy!r}",
                 f"width {self.width}", f"height {self.height}"]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> "Intrinsics":
        vals = {}
        for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.replace("=", " ").replace(":", " ").split()
            if len(parts) != 2:
                raise ValueError(f"{path}:{lineno}: expected 'key value'")
            vals[parts[0]] = parts[1]
        missing = {"fx", "fy", "cx", "cy", "width", "height"} - vals.keys()
        if missing:
            raise ValueError(f"{path}: missing keys {sorted(missing)}")
        return cls(float(vals["fx"]), float(vals["fy"]), float(vals["cx"]), float(vals["cy"]),
                   int(vals["width"]), int(vals["height"]))


@dataclass
class SE3Pose:
    R: np.ndarray
    t: np.ndarray

    @property
    def center(self) -> np.ndarray:
        return self.t

    def to_row(self) -> np.ndarray:
        return np.concatenate([self.R[0], self.R[1], self.t])

    def matrix(self) -> np.ndarray:
        out = np.eye(4)
        out[:3, :3] = self.R
        out[:3, 3] = self.t
        return out

    @classmethod
    def identity(cls) -> "SE3Pose":
        return cls(np.eye(3), np.zeros(3))


@dataclass
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    frame_index: int
    pixel: tuple
    time: float


def identity_rows(n: int) -> np.ndarray:
    return np.tile(IDENTITY_ROW, (n, 1))


def check_rows(rows: np.ndarray, frames=None) -> None:
    rows = np.atleast_2d(np.asarray(rows, dtype=np.float64))
    frames = np.arange(len(rows)) if frames is None else np.atleast_1d(frames)
    a, b = rows[:, 0:3], rows[:, 3:6]
    na = np.linalg.norm(a, axis=1)
    for i in np.flatnonzero(na < 1e-9):
        raise DegeneratePoseError(int(frames[i]), "first rotation row has zero norm")
    r1 = a / na[:, None]
    bp = b - (b * r1).sum(axis=1, keepdims=True) * r1
    nb = np.linalg.norm(bp, axis=1)
    for i in np.flatnonzero(nb < 1e-9):
        raise DegeneratePoseError(int(frames[i]), "rotation rows are parallel")


def rows_to_rt(rows: Tensor, frames=None) -> tuple[Tensor, Tensor]:
    """Differentiable (N, 9) pose rows -> rotations (N, 3, 3) and translations (N, 3).

    Gram-Schmidt on the first two rows, third row by cross product.
    """
    rows = ad.as_tensor(rows)
    check_rows(rows.data, frames)
    a, b, t = rows[:, 0:3], rows[:, 3:6], rows[:, 6:9]
    r1 = a / ad.sqrt(ad.sum_(ad.square(a), axis=1, keepdims=True))
    bp = b - ad.sum_(b * r1, axis=1, keepdims=True) * r1
    r2 = bp / ad.sqrt(ad.sum_(ad.square(bp), axis=1, keepdims=True))
    r3 = ad.cross(r1, r2)
    return ad.stack([r1, r2, r3], axis=1), t


def pose_to_se3(row, frame: int = 0) -> SE3Pose:
    """Numeric single-row version of :func:`rows_to_rt`."""
    row = np.asarray(row, dtype=np.float64).reshape(1, 9)
    R, t = rows_to_rt(Tensor(row), [frame])
    return SE3Pose(R.data[0], t.data[0])


def rotate(R: Tensor, v) -> Tensor:
    """Batched ``R @ v`` for R (B, 3, 3) and v (B, 3)."""
    v = ad.as_tensor(v)
    return ad.sum_(R * ad.reshape(v, (v.shape[0], 1, 3)), axis=2)


def generate_rays(intr: Intrinsics, R: Tensor, t: Tensor, pixels) -> tuple[Tensor, Tensor]:
    """World ray origins and unit directions for per-ray rotations/translations."""
    d = rotate(R, intr.camera_dirs(pixels))
    d = d / ad.sqrt(ad.sum_(ad.square(d), axis=1, keepdims=True))
    return t, d


def generate_ray(intr: Intrinsics, pose: SE3Pose, pixel, frame: int = 0, time: float = 0.0) -> Ray:
    u, v = pixel
    if not (0 <= u <= intr.width and 0 <= v <= intr.height):
        raise ValueError(f"pixel {pixel} outside a {intr.width}x{intr.height} image")
    d = pose.R @ intr.camera_dirs(np.array([u, v], dtype=np.float64))
    return Ray(pose.t.copy(), d / np.linalg.norm(d), frame, (u, v), time)


def backproject_batch(intr: Intrinsics, R: Tensor, t: Tensor, pixels, depth) -> Tensor:
    """World points ``R (z * K^-1 [u v 1]) + t`` for per-point R (B, 3, 3), t (B, 3)."""
    depth = np.asarray(depth, dtype=np.float64)
    cam = intr.camera_dirs(pixels) * depth[..., None]
    return rotate(R, cam) + t


def backproject(intr: Intrinsics, pose: SE3Pose, pixel, depth: float, frame: int = 0) -> np.ndarray:
    if not depth > 0:
        raise InvalidDepthError(pixel, frame, depth)
    cam = intr.camera_dirs(np.asarray(pixel, dtype=np.float64)) * depth
    return pose.R @ cam + pose.t


def project(intr: Intrinsics, pose: SE3Pose, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """World points -> (pixels (..., 2), camera-frame z (...))."""
    cam = (np.asarray(points) - pose.t) @ pose.R
    z = cam[..., 2]
    u = intr.fx * cam[..., 0] / z + intr.cx
    v = intr.fy * cam[..., 1] / z + intr.cy
    return np.stack([u, v], axis=-1), z


def geodesic_deg(Ra: np.ndarray, Rb: np.ndarray) -> float:
    """Angle of ``Ra^T Rb``; atan2 form, accurate near zero unlike arccos of the trace."""
    M = Ra.T @ Rb
    s = np.linalg.norm([M[2, 1] - M[1, 2], M[0, 2] - M[2, 0], M[1, 0] - M[0, 1]]) / 2.0
    c = (np.trace(M) - 1.0) / 2.0
    return float(np.degrees(np.arctan2(s, c)))


def umeyama(src: np.ndarray, dst: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
    """Similarity (s, R, t) minimising ``sum |s R src + t - dst|^2``."""
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    xs, xd = src - mu_s, dst - mu_d
    var_s = (xs ** 2).sum() / len(src)
    cov = xd.T @ xs / len(src)
    U, S, Vt = np.linalg.svd(cov)
    if var_s < 1e-18 or S[1] < 1e-9 * max(S[0], 1e-300):
        raise AlignmentError("camera centres are degenerate (coincident or collinear)")
    D = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        D[2, 2] = -1
    R = U @ D @ Vt
    s = float(np.trace(np.diag(S) @ D) / var_s)
    t = mu_d - s * R @ mu_s
    return s, R, t


def pose_error(estimated: list[SE3Pose], reference: list[SE3Pose]) -> tuple[float, float]:
    """Mean rotation error (deg) and mean centre distance after similarity alignment."""
    if len(estimated) != len(reference):
        raise ValueError("pose lists differ in length")
    if len(estimated) < 3:
        raise AlignmentError("need at least 3 poses to align")
    src = np.array([p.center for p in estimated])
    dst = np.array([p.center for p in reference])
    s, Ra, ta = umeyama(src, dst)
    rot = [geodesic_deg(Ra @ e.R, r.R) for e, r in zip(estimated, reference)]
    aligned = s * src @ Ra.T + ta
    return float(np.mean(rot)), float(np.mean(np.linalg.norm(aligned - dst, axis=1)))


def interpolate_rows(times_known, rows_known, times_query) -> np.ndarray:
    """Pose rows at ``times_query`` from smooth splines through known poses."""
    poses = [pose_to_se3(r, i) for i, r in enumerate(rows_known)]
    rots = Rotation.from_matrix(np.array([p.R for p in poses]))
    times_known = np.asarray(times_known, dtype=np.float64)
    tq = np.clip(np.asarray(times_query, dtype=np.float64), times_known[0], times_known[-1])
    if len(poses) >= 3:
        Rq = RotationSpline(times_known, rots)(tq).as_matrix()
        tr = CubicSpline(times_known, np.array([p.t for p in poses]))(tq)
    else:
        tr = np.stack([np.interp(tq, times_known, [p.t[k] for p in poses]) for k in range(3)], -1)
        Rq = np.array([poses[int(np.argmin(np.abs(times_known - x)))].R for x in tq])
    return np.array([SE3Pose(R, tt).to_row() for R, tt in zip(Rq, tr)])
