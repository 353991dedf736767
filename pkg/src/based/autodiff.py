"""Define-by-run reverse-mode autodiff over float64 numpy arrays.

A :class:`Tape` records every operation whose inputs include a watched
tensor. Tensors without a node are constants. There is no global tape:
an op records onto the tape of its (watched) inputs, so independent
workers can each build a private tape concurrently.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from scipy.special import expit


class ShapeError(ValueError):
    def __init__(self, kind: str, *shapes):
        shown = ", ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{kind}: incompatible shapes {shown}")
        self.kind = kind
        self.shapes = shapes


class Tensor:
    __slots__ = ("data", "node", "tape")
    __array_priority__ = 100

    def __init__(self, data, node: int | None = None, tape: "Tape | None" = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.node = node
        self.tape = tape

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_constant(self) -> bool:
        return self.node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        tag = "const" if self.node is None else f"node={self.node}"
        return f"Tensor(shape={self.shape}, {tag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Ordered record of operations; node ids are indices into ``kinds``."""

    def __init__(self):
        self.kinds: list[str] = []
        self.inputs: list[tuple] = []
        self.vjps: list[Callable | None] = []
        self.shapes: list[tuple] = []

    def __len__(self):
        return len(self.kinds)

    def watch(self, tensor: Tensor) -> Tensor:
        """Register ``tensor`` as a leaf of this tape (in place) and return it."""
        tensor.node = self._push("leaf", (), None, tensor.data.shape)
        tensor.tape = self
        return tensor

    def _push(self, kind, inputs, vjp, shape) -> int:
        self.kinds.append(kind)
        self.inputs.append(inputs)
        self.vjps.append(vjp)
        self.shapes.append(shape)
        return len(self.kinds) - 1

    def record(self, kind: str, inputs: Sequence[Tensor], out: np.ndarray, vjp) -> Tensor:
        ids = tuple(x.node if x.tape is self else None for x in inputs)
        node = self._push(kind, ids, vjp, out.shape)
        return Tensor(out, node, self)

    def backward(self, root: Tensor) -> "Gradients":
        if root.tape is not self or root.node is None:
            raise ValueError("backward: root is not recorded on this tape")
        if root.size != 1:
            raise ValueError(f"backward: root must be scalar, got shape {root.shape}")
        grads: dict[int, np.ndarray] = {root.node: np.ones(root.shape)}
        for node in range(root.node, -1, -1):
            g = grads.get(node)
            if g is None or self.vjps[node] is None:
                continue
            ids = self.inputs[node]
            parts = self.vjps[node](g)
            for nid, part in zip(ids, parts):
                if nid is None or part is None:
                    continue
                if nid in grads:
                    grads[nid] = grads[nid] + part
                else:
                    grads[nid] = part
            if node != root.node and self.kinds[node] != "leaf":
                del grads[node]
        return Gradients(self, grads)


class Gradients:
    """Gradient map returned by :func:`backward`; unreachable tensors read as zeros."""

    def __init__(self, tape: Tape, by_node: dict[int, np.ndarray]):
        self.tape = tape
        self.by_node = by_node

    def __getitem__(self, tensor: Tensor) -> np.ndarray:
        if tensor.tape is self.tape and tensor.node in self.by_node:
            return self.by_node[tensor.node]
        return np.zeros(tensor.shape)

    def __contains__(self, tensor: Tensor) -> bool:
        return tensor.tape is self.tape and tensor.node in self.by_node


def backward(root: Tensor) -> Gradients:
    if root.size != 1:
        raise ValueError(f"backward: root must be scalar, got shape {root.shape}")
    if root.tape is None:
        # constant root: nothing depends on any parameter
        return Gradients(None, {})
    return root.tape.backward(root)


def _tape_of(inputs: Sequence[Tensor]) -> Tape | None:
    tape = None
    for x in inputs:
        if x.tape is not None and x.node is not None:
            if tape is None:
                tape = x.tape
            elif x.tape is not tape:
                raise ValueError("inputs are recorded on different tapes")
    return tape


def _make(kind: str, inputs: Sequence[Tensor], out: np.ndarray, vjp) -> Tensor:
    tape = _tape_of(inputs)
    if tape is None:
        return Tensor(out)
    return tape.record(kind, inputs, out, vjp)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(kind, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(kind, a.shape, b.shape) from None


# ---------------------------------------------------------------- binary ops


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return _make("add", (a, b), a.data + b.data,
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return _make("sub", (a, b), a.data - b.data,
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _make("mul", (a, b), ad * bd,
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    return mul(a, reciprocal(b))


def matmul(a, b) -> Tensor:
    """2-D @ 2-D, or 2-D @ 1-D."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim not in (1, 2) or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    ad, bd = a.data, b.data

    def vjp(g):
        if bd.ndim == 1:
            return np.outer(g, bd), ad.T @ g
        return g @ bd.T, ad.T @ g

    return _make("matmul", (a, b), ad @ bd, vjp)


def linear(x, w, b) -> Tensor:
    """Fused ``x @ w + b`` for a (P, i) batch, (i, o) weight and (o,) bias."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeError("linear", x.shape, w.shape, b.shape)
    xd, wd = x.data, w.data
    out = xd @ wd
    out += b.data
    return _make("linear", (x, w, b), out, lambda g: (g @ wd.T, xd.T @ g, g.sum(axis=0)))


def huber(a, b, delta: float) -> Tensor:
    """Elementwise Huber penalty of ``a - b`` with threshold ``delta``."""
    if delta <= 0:
        raise ValueError("huber: delta must be positive")
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError("huber", a.shape, b.shape)
    r = a.data - b.data
    small = np.abs(r) <= delta
    out = np.where(small, 0.5 * r * r, delta * (np.abs(r) - 0.5 * delta))
    dr = np.where(small, r, delta * np.sign(r))
    return _make("huber", (a, b), out, lambda g: (g * dr, -g * dr))


def cross(a, b) -> Tensor:
    """Cross product along the last axis (size 3)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape or a.shape[-1] != 3:
        raise ShapeError("cross", a.shape, b.shape)
    ad, bd = a.data, b.data
    return _make("cross", (a, b), np.cross(ad, bd),
                 lambda g: (np.cross(bd, g), np.cross(g, ad)))


# ----------------------------------------------------------------- unary ops


def _unary(kind, x, out, dfdx):
    x = as_tensor(x)
    return _make(kind, (x,), out, lambda g: (g * dfdx(),))


def neg(x) -> Tensor:
    x = as_tensor(x)
    return _make("neg", (x,), -x.data, lambda g: (-g,))


def sin(x) -> Tensor:
    x = as_tensor(x)
    return _unary("sin", x, np.sin(x.data), lambda: np.cos(x.data))


def cos(x) -> Tensor:
    x = as_tensor(x)
    return _unary("cos", x, np.cos(x.data), lambda: -np.sin(x.data))


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _unary("exp", x, out, lambda: out)


def log(x) -> Tensor:
    x = as_tensor(x)
    return _unary("log", x, np.log(x.data), lambda: 1.0 / x.data)


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    out = np.sqrt(x.data)
    return _unary("sqrt", x, out, lambda: 0.5 / out)


def square(x) -> Tensor:
    x = as_tensor(x)
    return _unary("square", x, x.data * x.data, lambda: 2.0 * x.data)


def reciprocal(x) -> Tensor:
    x = as_tensor(x)
    out = 1.0 / x.data
    return _unary("reciprocal", x, out, lambda: -out * out)


def relu(x) -> Tensor:
    x = as_tensor(x)
    pos = x.data > 0
    return _make("relu", (x,), np.where(pos, x.data, 0.0), lambda g: (g * pos,))


def softplus(x) -> Tensor:
    x = as_tensor(x)
    return _unary("softplus", x, np.logaddexp(0.0, x.data), lambda: expit(x.data))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = expit(x.data)
    return _unary("sigmoid", x, out, lambda: out * (1.0 - out))


def clamp_min(x, lo: float) -> Tensor:
    x = as_tensor(x)
    keep = x.data >= lo
    return _make("clamp_min", (x,), np.where(keep, x.data, lo), lambda g: (g * keep,))


# ------------------------------------------------------------ reductions etc.


def sum_(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make("sum", (x,), np.asarray(out), vjp)


def mean(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    n = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum_(x, axis=axis, keepdims=keepdims), 1.0 / n)


def broadcast_to(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = np.broadcast_to(x.data, shape).copy()
    except ValueError:
        raise ShapeError("broadcast", x.shape, shape) from None
    sx = x.shape
    return _make("broadcast", (x,), out, lambda g: (_unbroadcast(g, sx),))


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    sx = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", sx, shape) from None
    return _make("reshape", (x,), out, lambda g: (g.reshape(sx),))


def getitem(x, index) -> Tensor:
    x = as_tensor(x)
    sx = x.shape

    def vjp(g):
        full = np.zeros(sx)
        np.add.at(full, index, g)
        return (full,)

    return _make("getitem", (x,), x.data[index], vjp)


def gather(x, idx) -> Tensor:
    """Rows ``x[idx]`` along axis 0; repeated indices accumulate in backward."""
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.intp)
    if idx.size and (idx.min() < -x.shape[0] or idx.max() >= x.shape[0]):
        raise ShapeError("gather", x.shape, idx.shape)
    sx = x.shape

    def vjp(g):
        full = np.zeros(sx)
        np.add.at(full, idx, g)
        return (full,)

    return _make("gather", (x,), x.data[idx], vjp)


def scatter_rows(src, idx, n_rows: int) -> Tensor:
    """Zeros of ``n_rows`` rows with ``out[idx] = src``; ``idx`` must be unique."""
    src = as_tensor(src)
    idx = np.asarray(idx, dtype=np.intp)
    if src.shape[0] != idx.shape[0]:
        raise ShapeError("scatter", src.shape, idx.shape)
    out = np.zeros((n_rows,) + src.shape[1:])
    out[idx] = src.data
    return _make("scatter", (src,), out, lambda g: (g[idx],))


def concat(xs: Sequence, axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    try:
        out = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError:
        raise ShapeError("concat", *[x.shape for x in xs]) from None
    sizes = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return _make("concat", xs, out, lambda g: tuple(np.split(g, sizes, axis=axis)))


def stack(xs: Sequence, axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    try:
        out = np.stack([x.data for x in xs], axis=axis)
    except ValueError:
        raise ShapeError("stack", *[x.shape for x in xs]) from None
    n = len(xs)
    return _make("stack", xs, out,
                 lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))


def cumprod_exclusive(x) -> Tensor:
    """``out[..., i] = prod_{j<i} x[..., j]`` along the last axis.

    The backward pass is division-free so zeros in ``x`` are handled exactly.
    """
    x = as_tensor(x)
    xd = x.data
    m = xd.shape[-1]
    ones = np.ones(xd.shape[:-1] + (1,))
    out = np.cumprod(np.concatenate([ones, xd[..., :-1]], axis=-1), axis=-1)

    def vjp(g):
        # d out_i / d x_k = prod_{j<k} x_j * prod_{k<j<i} x_j  for i > k
        k = np.arange(m)
        tiled = np.broadcast_to(xd[..., None, :], xd.shape[:-1] + (m, m)).copy()
        tiled[..., k[:, None] >= k[None, :]] = 1.0
        # between[..., k, i] = prod_{k<j<i} x_j
        between = np.cumprod(
            np.concatenate([np.ones(xd.shape[:-1] + (m, 1)), tiled[..., :-1]], axis=-1), axis=-1
        )
        upper = k[None, :] > k[:, None]
        contrib = (between * upper) @ g[..., None]
        return (out * contrib[..., 0],)

    return _make("cumprod", (x,), out, vjp)


def posenc(x, n_freqs: int, include_input: bool = True) -> Tensor:
    """Fused sinusoidal encoding of the last axis of a (P, d) tensor.

    Layout per component c: ``[x_c?, sin(2^0 pi x_c), cos(2^0 pi x_c), ...,
    sin(2^{L-1} pi x_c), cos(2^{L-1} pi x_c)]``; components are concatenated
    in order.
    """
    x = as_tensor(x)
    if x.ndim != 2:
        raise ShapeError("posenc", x.shape)
    p, d = x.shape
    freqs = np.pi * 2.0 ** np.arange(n_freqs)
    arg = x.data[:, :, None] * freqs
    s, c = np.sin(arg), np.cos(arg)
    parts = np.stack([s, c], axis=-1).reshape(p, d, 2 * n_freqs)
    if include_input:
        parts = np.concatenate([x.data[:, :, None], parts], axis=-1)
    width = parts.shape[-1]
    out = parts.reshape(p, d * width)

    def vjp(g):
        g = g.reshape(p, d, width)
        off = 1 if include_input else 0
        gs = g[:, :, off::2][:, :, :n_freqs]
        gc = g[:, :, off + 1::2][:, :, :n_freqs]
        dx = ((gs * c - gc * s) * freqs).sum(axis=-1)
        if include_input:
            dx = dx + g[:, :, 0]
        return (dx,)

    return _make("posenc", (x,), out, vjp)
