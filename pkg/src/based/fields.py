"""Positional encoding, the deformation network and the canonical radiance network."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .optim import ParamGroup


@dataclass
class EncodingConfig:
    L_xyz: int = 10
    L_dir: int = 4
    include_input: bool = True

    def dim(self, d: int, n_freqs: int) -> int:
        return d * (2 * n_freqs + (1 if self.include_input else 0))


@dataclass
class MlpConfig:
    depth: int = 8
    width: int = 256
    skip_at: int | None = 4

    def __post_init__(self):
        if self.depth < 2:
            raise ValueError("MLP depth must be >= 2")
        if self.skip_at is not None and not 0 < self.skip_at < self.depth:
            raise ValueError("skip_at must lie strictly inside the layer stack")


@dataclass
class FieldConfig:
    enc: EncodingConfig = field(default_factory=EncodingConfig)
    mlp_deform: MlpConfig = field(default_factory=lambda: MlpConfig(8, 256, 4))
    mlp_canon: MlpConfig = field(default_factory=lambda: MlpConfig(8, 256, 4))
    activation: str = "relu"


def positional_encode(p, L: int, include_input: bool = True) -> Tensor:
    """Encode a d-vector or a (P, d) batch; see :func:`autodiff.posenc` for layout."""
    p = ad.as_tensor(p)
    if p.ndim == 1:
        return ad.reshape(ad.posenc(ad.reshape(p, (1, -1)), L, include_input), (-1,))
    return ad.posenc(p, L, include_input)


def _init_layer(rng, fan_in, fan_out, zero=False):
    if zero:
        return Tensor(np.zeros((fan_in, fan_out))), Tensor(np.zeros(fan_out))
    bound = 1.0 / np.sqrt(fan_in)
    return (Tensor(rng.uniform(-bound, bound, (fan_in, fan_out))),
            Tensor(rng.uniform(-bound, bound, fan_out)))


def _act(kind: str):
    if kind == "relu":
        return ad.relu
    if kind == "softplus":
        return ad.softplus
    raise ValueError(f"unknown activation {kind!r}")


@dataclass
class FieldBundle:
    deform_params: ParamGroup
    canon_params: ParamGroup
    cfg: FieldConfig
    scene_box: np.ndarray

    @property
    def enc(self) -> EncodingConfig:
        return self.cfg.enc

    @property
    def groups(self) -> list[ParamGroup]:
        return [self.deform_params, self.canon_params]

    def normalize(self, x) -> Tensor:
        lo, hi = self.scene_box
        center, half = (lo + hi) / 2.0, (hi - lo) / 2.0
        return (ad.as_tensor(x) - center) * (1.0 / half)

    @property
    def half_extent(self) -> np.ndarray:
        lo, hi = self.scene_box
        return (hi - lo) / 2.0


def init_fields(cfg: FieldConfig, scene_box, rng: np.random.Generator) -> FieldBundle:
    enc = cfg.enc
    dx, dt, dd = enc.dim(3, enc.L_xyz), enc.dim(1, enc.L_xyz), enc.dim(3, enc.L_dir)

    def trunk(m: MlpConfig, in_dim):
        out, width = [], in_dim
        for i in range(m.depth):
            fan_in = width + (in_dim if i == m.skip_at else 0)
            out.extend(_init_layer(rng, fan_in, m.width))
            width = m.width
        return out

    deform = trunk(cfg.mlp_deform, dx + dt)
    deform.extend(_init_layer(rng, cfg.mlp_deform.width, 3, zero=True))

    w = cfg.mlp_canon.width
    canon = trunk(cfg.mlp_canon, dx)
    canon.extend(_init_layer(rng, w, 1))  # density head
    canon.extend(_init_layer(rng, w, w))  # feature
    canon.extend(_init_layer(rng, w + dd, w // 2))  # view-dependent layer
    canon.extend(_init_layer(rng, w // 2, 3))  # rgb head
    return FieldBundle(ParamGroup("deform", deform), ParamGroup("canon", canon), cfg,
                       np.asarray(scene_box, dtype=np.float64))


def _trunk(params, m: MlpConfig, x_in: Tensor, act) -> Tensor:
    h = x_in
    for i in range(m.depth):
        if i == m.skip_at:
            h = ad.concat([h, x_in], axis=1)
        h = act(ad.linear(h, params[2 * i], params[2 * i + 1]))
    return h


def deform(bundle: FieldBundle, x, t) -> Tensor:
    """Displacement from the deformed point ``x`` at time ``t`` to its canonical point.

    ``x`` is (P, 3) in world units and ``t`` a scalar or (P,) array of
    normalised times. Rows with ``t == 0`` are exactly zero and never reach
    the network.
    """
    x = ad.as_tensor(x)
    if x.ndim == 1:
        return ad.reshape(deform(bundle, ad.reshape(x, (1, 3)), np.atleast_1d(t)), (3,))
    if not np.all(np.isfinite(x.data)):
        raise ValueError("deform: non-finite input point")
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (x.shape[0],))
    moving = np.flatnonzero(t != 0)
    if len(moving) == 0:
        return Tensor(np.zeros(x.shape))
    enc = bundle.enc
    if len(moving) < x.shape[0]:
        xs = ad.gather(x, moving)
    else:
        xs = x
    ex = ad.posenc(bundle.normalize(xs), enc.L_xyz, enc.include_input)
    et = ad.posenc(t[moving, None], enc.L_xyz, enc.include_input)
    params = bundle.deform_params.tensors
    m = bundle.cfg.mlp_deform
    h = _trunk(params, m, ad.concat([ex, et], axis=1), _act(bundle.cfg.activation))
    out = ad.linear(h, params[-2], params[-1]) * bundle.half_extent
    if len(moving) < x.shape[0]:
        out = ad.scatter_rows(out, moving, x.shape[0])
    return out


def encode_dirs(bundle: FieldBundle, d) -> Tensor:
    return ad.posenc(ad.as_tensor(d), bundle.enc.L_dir, bundle.enc.include_input)


def canonical_from_encoded(bundle: FieldBundle, x0, d_enc) -> tuple[Tensor, Tensor]:
    """Canonical field given already-encoded view directions (P, dd)."""
    enc = bundle.enc
    params = bundle.canon_params.tensors
    m = bundle.cfg.mlp_canon
    act = _act(bundle.cfg.activation)
    k = 2 * m.depth
    h = _trunk(params, m, ad.posenc(bundle.normalize(x0), enc.L_xyz, enc.include_input), act)
    raw_sigma = ad.linear(h, params[k], params[k + 1])
    density = ad.reshape(ad.softplus(raw_sigma), (-1,))
    feat = ad.linear(h, params[k + 2], params[k + 3])
    hv = act(ad.linear(ad.concat([feat, d_enc], axis=1), params[k + 4], params[k + 5]))
    color = ad.sigmoid(ad.linear(hv, params[k + 6], params[k + 7]))
    return color, density


def canonical_query(bundle: FieldBundle, x0, d) -> tuple[Tensor, Tensor]:
    """Colour in (0, 1)^3 and density >= 0 at canonical points ``x0`` seen along ``d``."""
    x0 = ad.as_tensor(x0)
    if x0.ndim == 1:
        c, s = canonical_query(bundle, ad.reshape(x0, (1, 3)), ad.reshape(ad.as_tensor(d), (1, 3)))
        return ad.reshape(c, (3,)), ad.reshape(s, ())
    return canonical_from_encoded(bundle, x0, encode_dirs(bundle, d))


def query_deformed(bundle: FieldBundle, x_t, t, d) -> tuple[Tensor, Tensor, Tensor]:
    """Colour, density and canonical point for points ``x_t`` observed at time ``t``."""
    x_t = ad.as_tensor(x_t)
    if x_t.ndim == 1:
        c, s, x0 = query_deformed(bundle, ad.reshape(x_t, (1, 3)), np.atleast_1d(t),
                                  ad.reshape(ad.as_tensor(d), (1, 3)))
        return ad.reshape(c, (3,)), ad.reshape(s, ()), ad.reshape(x0, (3,))
    x0 = x_t + deform(bundle, x_t, t)
    color, density = canonical_query(bundle, x0, d)
    return color, density, x0
