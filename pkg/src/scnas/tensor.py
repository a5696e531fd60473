"""Dense tensors with reverse-mode automatic differentiation.

Layout is always ``batch x channels x spatial...``. Every primitive records a
closure that maps the output gradient to one gradient per parent; ``backward``
walks the recorded graph in reverse topological order.
"""

from __future__ import annotations

import contextlib
import itertools
import math
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype or DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return self.shape[0]

    # arithmetic
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self) -> dict:
        return backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def zeros(shape: Sequence[int]) -> Tensor:
    return Tensor(np.zeros(tuple(shape), dtype=DEFAULT_DTYPE))


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn: Callable, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = parents
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise and reductions


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), bw, "div")


def power(a: Tensor, exponent: float) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        return (g * exponent * a.data ** (exponent - 1),)

    return _make(a.data**exponent, (a,), bw, "pow")


def exp(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(out), (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = math.prod(a.shape[ax] for ax in axes)
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def getitem(a: Tensor, index) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _make(np.array(a.data[index]), (a,), bw, "getitem")


def concat_channels(inputs: Sequence[Tensor], axis: int = 1) -> Tensor:
    """Concatenate along the channel axis; batch and spatial shapes must agree."""
    inputs = [as_tensor(t) for t in inputs]
    ref = inputs[0].shape
    for t in inputs[1:]:
        if t.ndim != len(ref) or t.shape[:axis] + t.shape[axis + 1 :] != ref[:axis] + ref[axis + 1 :]:
            raise ValueError(f"concat shape mismatch: {ref} vs {t.shape}")
    sizes = [t.shape[axis] for t in inputs]
    splits = list(itertools.accumulate(sizes))[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in inputs], axis=axis), tuple(inputs), bw, "concat")


def stack(inputs: Sequence[Tensor], axis: int = 0) -> Tensor:
    inputs = [as_tensor(t) for t in inputs]

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(inputs)))

    return _make(np.stack([t.data for t in inputs], axis=axis), tuple(inputs), bw, "stack")


def add_n(inputs: Sequence[Tensor]) -> Tensor:
    """Sum of identically shaped tensors."""
    inputs = [as_tensor(t) for t in inputs]
    ref = inputs[0].shape
    for t in inputs[1:]:
        if t.shape != ref:
            raise ValueError(f"sum shape mismatch: {ref} vs {t.shape}")
    out = inputs[0].data.copy()
    for t in inputs[1:]:
        out += t.data
    return _make(out, tuple(inputs), lambda g: tuple(g for _ in inputs), "add_n")


def softmax(logits: Tensor, axis: int = -1) -> Tensor:
    logits = as_tensor(logits)
    shifted = logits.data - logits.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _make(s, (logits,), bw, "softmax")


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    if not 0.0 < slope < 1.0:
        raise ValueError(f"slope must lie in (0, 1), got {slope}")
    x = as_tensor(x)
    pos = x.data >= 0
    out = np.where(pos, x.data, slope * x.data)
    return _make(out, (x,), lambda g: (np.where(pos, g, slope * g),), "leaky_relu")


# ---------------------------------------------------------------------------
# spatial primitives


def _same_pad(kernel: int, dilation: int) -> int:
    return dilation * (kernel - 1) // 2


def _out_extent(size: int, kernel: int, stride: int, dilation: int, pad: int) -> int:
    return (size + 2 * pad - dilation * (kernel - 1) - 1) // stride + 1


def _tap_slices(tap, dilation, stride, out_sp):
    return tuple(slice(t * dilation, t * dilation + stride * (o - 1) + 1, stride) for t, o in zip(tap, out_sp))


def conv(x: Tensor, w: Tensor, stride: int = 1, dilation: int = 1, groups: int = 1) -> Tensor:
    """Bias-free convolution with symmetric zero padding ``dilation*(k-1)/2``.

    ``w`` has shape ``(C_out, C_in/groups, k, ..., k)``. At stride 1 the spatial
    shape is preserved; at stride ``s`` each extent becomes ``ceil(n / s)``.
    """
    x, w = as_tensor(x), as_tensor(w)
    nd = x.ndim - 2
    if w.ndim != nd + 2:
        raise ValueError(f"weight rank {w.ndim} does not match input rank {x.ndim}")
    if stride < 1 or dilation < 1:
        raise ValueError("stride and dilation must be positive")
    n, cin = x.shape[:2]
    cout, cpg = w.shape[:2]
    ksize = w.shape[2:]
    if groups < 1 or cin % groups or cout % groups:
        raise ValueError(f"groups={groups} does not divide channels in={cin} out={cout}")
    if cpg * groups != cin:
        raise ValueError(
            f"conv shape mismatch: input has {cin} channels, weight {tuple(w.shape)} expects {cpg * groups}"
        )
    if any(k % 2 == 0 for k in ksize):
        raise ValueError(f"kernel extents must be odd, got {ksize}")
    pads = [_same_pad(k, dilation) for k in ksize]
    spatial = x.shape[2:]
    out_sp = [_out_extent(s, k, stride, dilation, p) for s, k, p in zip(spatial, ksize, pads)]
    xp = np.pad(x.data, [(0, 0), (0, 0)] + [(p, p) for p in pads])
    padded_sp = xp.shape[2:]
    taps = list(np.ndindex(*ksize))
    ntap = len(taps)
    opg = cout // groups
    npos = math.prod(out_sp)

    xg = xp.reshape(n, groups, cpg, *padded_sp)
    cols = np.empty((n, groups, cpg, ntap) + tuple(out_sp), dtype=xp.dtype)
    for t, tap in enumerate(taps):
        cols[:, :, :, t] = xg[(slice(None),) * 3 + _tap_slices(tap, dilation, stride, out_sp)]
    cols = cols.reshape(n, groups, cpg * ntap, npos)
    wmat = w.data.reshape(groups, opg, cpg * ntap)
    out = np.matmul(wmat[None], cols).reshape(n, cout, *out_sp)

    def bw(g):
        gg = g.reshape(n, groups, opg, npos)
        gx = gw = None
        if w.requires_grad:
            gw = np.matmul(gg, cols.transpose(0, 1, 3, 2)).sum(axis=0).reshape(w.shape)
        if x.requires_grad:
            gcols = np.matmul(wmat.transpose(0, 2, 1)[None], gg)
            gcols = gcols.reshape((n, groups, cpg, ntap) + tuple(out_sp))
            gxp = np.zeros((n, groups, cpg) + tuple(padded_sp), dtype=g.dtype)
            for t, tap in enumerate(taps):
                gxp[(slice(None),) * 3 + _tap_slices(tap, dilation, stride, out_sp)] += gcols[:, :, :, t]
            gxp = gxp.reshape(xp.shape)
            crop = (slice(None), slice(None)) + tuple(slice(p, p + s) for p, s in zip(pads, spatial))
            gx = gxp[crop]
        return gx, gw

    return _make(out, (x, w), bw, "conv")


def pool(x: Tensor, kind: str, window: int = 3, stride: int = 1) -> Tensor:
    """Max or average pooling with padding ``(window-1)//2``.

    Padded positions never win a max and are excluded from the average count,
    so constant fields stay constant.
    """
    x = as_tensor(x)
    if kind not in ("max", "avg"):
        raise ValueError(f"unknown pooling kind {kind!r}")
    if stride < 1:
        raise ValueError(f"stride must be positive, got {stride}")
    if window < 1:
        raise ValueError(f"window must be positive, got {window}")
    nd = x.ndim - 2
    pad = (window - 1) // 2
    spatial = x.shape[2:]
    out_sp = [_out_extent(s, window, stride, 1, pad) for s in spatial]
    widths = [(0, 0), (0, 0)] + [(pad, pad)] * nd
    taps = list(np.ndindex(*([window] * nd)))
    lead = (slice(None), slice(None))
    fill = -np.inf if kind == "max" else 0.0
    xp = np.pad(x.data, widths, constant_values=fill)
    stacked = np.stack([xp[lead + _tap_slices(tap, 1, stride, out_sp)] for tap in taps], axis=0)
    if kind == "max":
        arg = stacked.argmax(axis=0)
        out = np.take_along_axis(stacked, arg[None], axis=0)[0]
    else:
        valid = np.pad(np.ones(spatial), [(pad, pad)] * nd)
        count = np.stack([valid[_tap_slices(tap, 1, stride, out_sp)] for tap in taps], axis=0).sum(axis=0)
        out = stacked.sum(axis=0) / count

    def bw(g):
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        for t, tap in enumerate(taps):
            sl = lead + _tap_slices(tap, 1, stride, out_sp)
            if kind == "max":
                gxp[sl] += np.where(arg == t, g, 0.0)
            else:
                gxp[sl] += g / count
        crop = lead + tuple(slice(pad, pad + s) for s in spatial)
        return (gxp[crop],)

    return _make(out, (x,), bw, f"{kind}pool")


def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    x = as_tensor(x)
    if factor != 2:
        raise ValueError("only factor 2 is supported")
    nd = x.ndim - 2
    out = x.data
    for ax in range(2, 2 + nd):
        out = np.repeat(out, 2, axis=ax)

    def bw(g):
        shape = list(g.shape[:2])
        for s in x.shape[2:]:
            shape += [s, 2]
        return (g.reshape(shape).sum(axis=tuple(3 + 2 * i for i in range(nd))),)

    return _make(out, (x,), bw, "upsample")


def subsample(x: Tensor, stride: int = 2) -> Tensor:
    """Take every ``stride``-th voxel along each spatial axis."""
    nd = x.ndim - 2
    return getitem(x, (slice(None), slice(None)) + (slice(None, None, stride),) * nd)


def instance_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Per (sample, channel) normalization over spatial axes, no affine."""
    x = as_tensor(x)
    axes = tuple(range(2, x.ndim))
    m = math.prod(x.shape[2:])
    if m < 2:
        raise ValueError("instance norm needs at least 2 voxels per channel")
    mu = x.data.mean(axis=axes, keepdims=True)
    centered = x.data - mu
    var = (centered**2).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv

    def bw(g):
        gm = g.mean(axis=axes, keepdims=True)
        gxm = (g * xhat).mean(axis=axes, keepdims=True)
        return (inv * (g - gm - xhat * gxm),)

    return _make(xhat, (x,), bw, "instance_norm")


def affine_channels(x: Tensor, scale: Tensor, shift: Tensor) -> Tensor:
    """``x * scale + shift`` with per-channel vectors broadcast over batch and space."""
    view = (1, -1) + (1,) * (x.ndim - 2)
    return x * reshape(scale, view) + reshape(shift, view)


# ---------------------------------------------------------------------------
# graph traversal


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    Returns a map from each reached leaf to the gradient contributed by this
    call.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not np.all(np.isfinite(loss.data)):
        raise FloatingPointError("loss is not finite")
    if not loss.requires_grad:
        return {}
    order = _topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    result: dict[Tensor, np.ndarray] = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            result[node] = g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return result


def grad(loss: Tensor, params: Iterable[Tensor]) -> list[np.ndarray]:
    """Gradients of ``loss`` w.r.t. ``params``; unreachable ones are zero.

    Does not touch ``.grad`` of the parameters.
    """
    params = list(params)
    saved = [p.grad for p in params]
    for p in params:
        p.grad = None
    try:
        found = backward(loss)
        return [found[p].copy() if p in found else np.zeros_like(p.data) for p in params]
    finally:
        for p, s in zip(params, saved):
            p.grad = s


@contextlib.contextmanager
def frozen(params: Iterable[Tensor]):
    """Temporarily exclude ``params`` from graph recording."""
    params = list(params)
    flags = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = False
    try:
        yield
    finally:
        for p, f in zip(params, flags):
            p.requires_grad = f


def dump_text(t: Tensor | np.ndarray, path) -> None:
    """Write a debug dump: ``shape: d0 d1 ...`` then one value per line."""
    arr = t.data if isinstance(t, Tensor) else np.asarray(t)
    with open(path, "w") as fh:
        fh.write("shape: " + " ".join(str(d) for d in arr.shape) + "\n")
        for v in arr.reshape(-1):
            fh.write(repr(float(v)) + "\n")


def load_text(path) -> np.ndarray:
    with open(path) as fh:
        header = fh.readline()
        if not header.startswith("shape:"):
            raise ValueError(f"{path}: missing shape header")
        shape = tuple(int(v) for v in header.split()[1:])
        values = np.array([float(line) for line in fh if line.strip()])
    return values.reshape(shape)
