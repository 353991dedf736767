"""Pixel importance sampling, samples along rays, and volume-rendering quadrature."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr, ndtri

from . import autodiff as ad
from .autodiff import Tensor


@dataclass
class ImportanceMap:
    weights: np.ndarray  # (H, W), normalised to sum 1
    cdf: np.ndarray  # flattened row-major

    @property
    def height(self) -> int:
        return self.weights.shape[0]

    @property
    def width(self) -> int:
        return self.weights.shape[1]


def build_importance_map(mask: np.ndarray | None, rho: float = 4.0, shape=None) -> ImportanceMap:
    """Tool pixels get weight ``rho``, everything else 1."""
    if mask is None:
        if shape is None:
            raise ValueError("need a mask or an image shape")
        mask = np.zeros(shape, dtype=bool)
    mask = np.asarray(mask)
    if mask.ndim != 2 or mask.size == 0:
        raise ValueError(f"importance map needs a non-empty 2-D mask, got shape {mask.shape}")
    if not np.isin(mask, (0, 1)).all():
        raise ValueError("mask must be 0/1 valued")
    if not rho > 1:
        raise ValueError("tool weight factor must exceed 1")
    w = np.where(mask.astype(bool), float(rho), 1.0)
    w /= w.sum()
    cdf = np.cumsum(w.ravel())
    cdf /= cdf[-1]
    return ImportanceMap(w, cdf)


def sample_pixels(imap: ImportanceMap, count: int, rng: np.random.Generator) -> np.ndarray:
    """Integer (column, row) pixels drawn i.i.d. by inverting the map's cdf."""
    if count < 1:
        raise ValueError("count must be >= 1")
    flat = np.searchsorted(imap.cdf, rng.random(count), side="right")
    flat = np.minimum(flat, imap.cdf.size - 1)
    return np.stack([flat % imap.width, flat // imap.width], axis=-1)


@dataclass
class RaySamples:
    t_vals: np.ndarray  # (..., M)
    deltas: np.ndarray  # (..., M)


def _check_bounds(near, far, M):
    if not (0 < near < far):
        raise ValueError(f"invalid ray bounds near={near}, far={far}")
    if M < 2:
        raise ValueError("need at least 2 samples per ray")


def with_deltas(t_vals: np.ndarray, near: float, far: float) -> RaySamples:
    """Spacings between consecutive samples; the last one is capped at one nominal bin."""
    M = t_vals.shape[-1]
    cap = np.full(t_vals.shape[:-1] + (1,), (far - near) / M)
    return RaySamples(t_vals, np.concatenate([np.diff(t_vals, axis=-1), cap], axis=-1))


def stratified_t(n_rays: int, near: float, far: float, M: int, u: np.ndarray | None = None,
                 rng: np.random.Generator | None = None) -> np.ndarray:
    """One draw per bin of [near, far]; ``u`` (n_rays, M) in [0, 1) defaults to rng draws."""
    _check_bounds(near, far, M)
    if u is None:
        u = rng.random((n_rays, M)) if rng is not None else np.full((n_rays, M), 0.5)
    edges = near + (far - near) * np.arange(M) / M
    return edges + u * (far - near) / M


def depth_guided_t(z_ref: np.ndarray, scale: float, near: float, far: float, M: int,
                   u: np.ndarray | None = None, rng: np.random.Generator | None = None) -> np.ndarray:
    """Inverse-cdf samples of N(z_ref, scale^2) truncated to [near, far].

    Uniforms are stratified per bin so the output is sorted by construction.
    """
    _check_bounds(near, far, M)
    if not scale > 0:
        raise ValueError("gaussian scale must be positive")
    z_ref = np.asarray(z_ref, dtype=np.float64).reshape(-1, 1)
    if u is None:
        u = rng.random((len(z_ref), M)) if rng is not None else np.full((len(z_ref), M), 0.5)
    q = (np.arange(M) + u) / M
    lo = ndtr((near - z_ref) / scale)
    hi = ndtr((far - z_ref) / scale)
    p = np.clip(lo + q * (hi - lo), 1e-300, 1 - 1e-16)
    t = np.clip(z_ref + scale * ndtri(p), near, far)
    return _strictly_increasing(t, near, far)


def _strictly_increasing(t: np.ndarray, near: float, far: float) -> np.ndarray:
    t = np.sort(t, axis=-1)
    tiny = 1e-9 * (far - near)
    for i in range(1, t.shape[-1]):
        t[..., i] = np.maximum(t[..., i], t[..., i - 1] + tiny)
    return t


def merge_t(*parts: np.ndarray, near: float, far: float) -> np.ndarray:
    return _strictly_increasing(np.concatenate(parts, axis=-1), near, far)


def sample_along_ray(ray, near: float, far: float, M: int, mode: str = "stratified",
                     rng: np.random.Generator | None = None, z_ref: float | None = None,
                     scale: float | None = None) -> RaySamples:
    """Single-ray front end over :func:`stratified_t` / :func:`depth_guided_t`."""
    if mode == "stratified":
        t = stratified_t(1, near, far, M, rng=rng)
    elif mode == "depth-guided":
        if z_ref is None or not near < z_ref < far:
            raise ValueError("depth-guided sampling needs near < z_ref < far")
        scale = 0.01 * (far - near) if scale is None else scale
        t = depth_guided_t(np.array([z_ref]), scale, near, far, M, rng=rng)
    else:
        raise ValueError(f"unknown sampling mode {mode!r}")
    return with_deltas(t[0], near, far)


@dataclass
class RenderOutput:
    color: Tensor  # (B, 3)
    depth: Tensor  # (B,)
    opacity: Tensor  # (B,)
    weights: Tensor  # (B, M)


def volume_render(samples: RaySamples, colors, densities, eps: float = 1e-10,
                  depth_mode: str = "expected") -> RenderOutput:
    """Alpha compositing over a black background.

    ``colors`` (B, M, 3), ``densities`` (B, M). ``depth_mode="reciprocal_density"``
    returns one over the compositing-weighted density instead of the expected
    termination distance.
    """
    colors, densities = ad.as_tensor(colors), ad.as_tensor(densities)
    if np.any(densities.data < 0):
        raise ValueError("densities must be non-negative")
    t_vals = np.asarray(samples.t_vals)
    deltas = np.asarray(samples.deltas)
    if densities.shape != t_vals.shape or colors.shape != t_vals.shape + (3,):
        raise ad.ShapeError("volume_render", t_vals.shape, colors.shape, densities.shape)
    keep = ad.exp(ad.neg(densities * deltas))  # 1 - alpha
    alpha = 1.0 - keep
    trans = ad.cumprod_exclusive(keep)
    weights = trans * alpha
    w3 = ad.reshape(weights, weights.shape + (1,))
    color = ad.sum_(w3 * colors, axis=-2)
    opacity = ad.sum_(weights, axis=-1)
    if depth_mode == "expected":
        depth = ad.sum_(weights * t_vals, axis=-1) / ad.clamp_min(opacity, eps)
    elif depth_mode == "reciprocal_density":
        depth = ad.reciprocal(ad.clamp_min(ad.sum_(weights * densities, axis=-1), eps))
    else:
        raise ValueError(f"unknown depth mode {depth_mode!r}")
    return RenderOutput(color, depth, opacity, weights)
