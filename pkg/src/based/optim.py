"""Named parameter groups, Adam, and the binary checkpoint format."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Gradients, Tape, Tensor

MAGIC = b"BASEDCKPT1"


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, group: str):
        super().__init__(f"non-finite gradient in parameter group '{group}'")
        self.group = group


class CheckpointError(ValueError):
    pass


@dataclass
class ParamGroup:
    name: str
    tensors: list[Tensor]
    frozen: bool = False
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if not self.m:
            self.m = [np.zeros(t.shape) for t in self.tensors]
        if not self.v:
            self.v = [np.zeros(t.shape) for t in self.tensors]

    def watch(self, tape: Tape) -> None:
        """Put the group's tensors on ``tape``; frozen groups stay constant."""
        for t in self.tensors:
            if self.frozen:
                t.node, t.tape = None, None
            else:
                tape.watch(t)

    def release(self) -> None:
        for t in self.tensors:
            t.node, t.tape = None, None

    def grads(self, gradients: Gradients) -> list[np.ndarray]:
        return [gradients[t] for t in self.tensors]

    def freeze(self) -> None:
        self.frozen = True
        self.release()

    def state_bytes(self) -> bytes:
        return b"".join(t.data.tobytes() for t in self.tensors)


def adam_step(groups, grads: dict[str, list[np.ndarray]], lr, step: int,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update of every non-frozen group, in place.

    ``lr`` is a float or a mapping from group name to learning rate. All
    gradients are checked before anything is written, so a non-finite
    gradient leaves every group untouched.
    """
    if step < 1:
        raise ValueError("adam_step: step must be >= 1")
    active = [g for g in groups if not g.frozen]
    for g in active:
        for arr in grads.get(g.name, ()):
            if not np.all(np.isfinite(arr)):
                raise NonFiniteGradientError(g.name)
    c1 = 1.0 - beta1 ** step
    c2 = 1.0 - beta2 ** step
    for g in active:
        rate = lr[g.name] if isinstance(lr, dict) else lr
        for i, (t, gr) in enumerate(zip(g.tensors, grads[g.name])):
            g.m[i] = beta1 * g.m[i] + (1.0 - beta1) * gr
            g.v[i] = beta2 * g.v[i] + (1.0 - beta2) * gr * gr
            t.data = t.data - rate * (g.m[i] / c1) / (np.sqrt(g.v[i] / c2) + eps)


# ---------------------------------------------------------------- checkpoint
#
# Layout (little-endian):
#   magic "BASEDCKPT1" | u64 global step | u32 group count
#   per group: u32 name length | name utf-8 | u8 frozen | u32 tensor count
#              per tensor: u32 ndim | u64 dims... | f64 data | f64 m | f64 v
#   u32 metadata length | metadata JSON (utf-8)


def save_checkpoint(path, groups, step: int, meta: dict | None = None) -> None:
    out = bytearray(MAGIC)
    out += struct.pack("<QI", step, len(groups))
    for g in groups:
        name = g.name.encode()
        out += struct.pack("<I", len(name)) + name
        out += struct.pack("<BI", int(g.frozen), len(g.tensors))
        for t, m, v in zip(g.tensors, g.m, g.v):
            out += struct.pack("<I", t.data.ndim)
            out += struct.pack(f"<{t.data.ndim}Q", *t.data.shape)
            for arr in (t.data, m, v):
                out += np.ascontiguousarray(arr, dtype="<f8").tobytes()
    blob = json.dumps(meta or {}, sort_keys=True).encode()
    out += struct.pack("<I", len(blob)) + blob
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(bytes(out))
    tmp.replace(path)


def load_checkpoint(path) -> tuple[list[ParamGroup], int, dict]:
    buf = Path(path).read_bytes()
    if not buf.startswith(MAGIC):
        raise CheckpointError(f"{path}: bad magic")
    pos = len(MAGIC)

    def take(fmt):
        nonlocal pos
        vals = struct.unpack_from(fmt, buf, pos)
        pos += struct.calcsize(fmt)
        return vals

    def take_array(shape):
        nonlocal pos
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(buf, dtype="<f8", count=n, offset=pos).astype(np.float64)
        pos += 8 * n
        return arr.reshape(shape)

    try:
        step, n_groups = take("<QI")
        groups = []
        for _ in range(n_groups):
            (n,) = take("<I")
            name = buf[pos:pos + n].decode()
            pos += n
            frozen, n_t = take("<BI")
            tensors, ms, vs = [], [], []
            for _ in range(n_t):
                (ndim,) = take("<I")
                shape = take(f"<{ndim}Q") if ndim else ()
                tensors.append(Tensor(take_array(shape)))
                ms.append(take_array(shape))
                vs.append(take_array(shape))
            groups.append(ParamGroup(name, tensors, bool(frozen), ms, vs))
        (n,) = take("<I")
        meta = json.loads(buf[pos:pos + n].decode())
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"{path}: truncated or corrupt ({exc})") from exc
    return groups, step, meta
