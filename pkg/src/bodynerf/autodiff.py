"""Reverse-mode automatic differentiation over dense float64 arrays.

A :class:`Tensor` wraps a numpy array.  Every op applied to tensors that
require gradients records a node on a dynamic tape (the parent links plus a
backward closure); :meth:`Tensor.backward` walks the tape in reverse
topological order and accumulates ``grad`` buffers.
"""
from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable taping in the current thread (inference)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class ShapeError(ValueError):
    pass


def _shape_error(op: str, a, b) -> ShapeError:
    return ShapeError(f"{op}: incompatible shapes {tuple(a)} and {tuple(b)}")


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_prev", "_backward", "op", "__weakref__")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, _prev: tuple = (), _backward=None, op: str = ""):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._prev = _prev
        self._backward = _backward
        self.op = op

    # -- basic info -------------------------------------------------------
    @property
    def shape(self) -> tuple:
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

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}, op={self.op!r})"

    def __len__(self) -> int:
        return len(self.data)

    # -- tape --------------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``.

        ``self`` must be a scalar unless an explicit seed gradient is given.
        The tape is released afterwards.
        """
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward: loss must be scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = _toposort(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=DTYPE)}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._prev, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
            # consume the tape
            node._prev = ()
            node._backward = None

    def zero_grad(self) -> None:
        self.grad = None

    # -- operator sugar ------------------------------------------------------
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
        return neg(self)

    def __pow__(self, p: float):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


class Parameter(Tensor):
    """A named leaf tensor carrying Adam moment buffers."""

    __slots__ = ("name", "m", "v", "step")

    def __init__(self, data, name: str = ""):
        super().__init__(np.array(data, dtype=DTYPE), requires_grad=True)
        self.name = name
        self.m = np.zeros_like(self.data)
        self.v = np.zeros_like(self.data)
        self.step = 0

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._prev:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    order.reverse()
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    if grad_enabled() and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _prev=tuple(parents), _backward=backward, op=op)
    return Tensor(data, op=op)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    nd = g.ndim - len(shape)
    if nd > 0:
        g = g.sum(axis=tuple(range(nd)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise _shape_error(op, a.shape, b.shape) from None


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    out = a.data - b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(out, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    out = a.data * b.data

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), backward, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    out = a.data ** p
    return _make(out, (a,), lambda g: (g * p * a.data ** (p - 1),), "pow")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sin(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.sin(a.data), (a,), lambda g: (g * np.cos(a.data),), "sin")


def cos(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.cos(a.data), (a,), lambda g: (-g * np.sin(a.data),), "cos")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softplus(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out = np.logaddexp(0.0, x)
    return _make(out, (a,), lambda g: (g * 0.5 * (1.0 + np.tanh(0.5 * x)),), "softplus")


def softmax(a, axis: int = -1) -> Tensor:
    """Softmax along ``axis`` with max subtraction."""
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), backward, "softmax")


# ---------------------------------------------------------------------------
# linear algebra and reductions
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim < 1 or a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise _shape_error("matmul", a.shape, b.shape)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    out = a.data @ b.data

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _make(out, (a, b), backward, "matmul")


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), backward, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / n)


def cumsum(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    out = np.cumsum(a.data, axis=axis)

    def backward(g):
        return (np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis),)

    return _make(out, (a,), backward, "cumsum")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise _shape_error("reshape", a.shape, shape) from None
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    out = np.transpose(a.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return _make(out, (a,), lambda g: (np.transpose(g, inv),), "transpose")


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise _shape_error("concat", ts[0].shape, [t.shape for t in ts[1:]]) from None
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _make(out, ts, backward, "concat")


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    return concat([reshape(t, t.shape[:axis % (t.ndim + 1)] + (1,) + t.shape[axis % (t.ndim + 1):]) for t in ts], axis)


def _is_basic(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def accumulate_rows(idx: np.ndarray, values: np.ndarray, n: int) -> np.ndarray:
    """``out[idx[i]] += values[i]`` for (M, ...) values into n rows (bincount based)."""
    idx = np.asarray(idx, dtype=np.int64).reshape(-1)
    tail = values.shape[1:]
    C = int(np.prod(tail)) if tail else 1
    vals = values.reshape(len(idx), C)
    flat = (idx[:, None] * C + np.arange(C)[None, :]).reshape(-1)
    out = np.bincount(flat, weights=vals.reshape(-1), minlength=n * C)
    return out.reshape((n,) + tail)


def index(a, idx) -> Tensor:
    """Numpy-style indexing; gradients of repeated indices accumulate."""
    a = as_tensor(a)
    out = a.data[idx]
    basic = _is_basic(idx)

    def backward(g):
        full = np.zeros_like(a.data)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _make(np.array(out), (a,), backward, "index")


def gather(a, idx: np.ndarray) -> Tensor:
    """Rows of ``a`` selected by integer array ``idx`` (any shape)."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise ShapeError(f"gather: index out of range for leading extent {a.shape[0]}")
    out = a.data[idx]

    def backward(g):
        return (accumulate_rows(idx, g.reshape((-1,) + a.shape[1:]), a.shape[0]),)

    return _make(out, (a,), backward, "gather")


def scatter_add(src, idx: np.ndarray, n: int) -> Tensor:
    """``out[idx[i]] += src[i]`` into ``n`` rows."""
    src = as_tensor(src)
    idx = np.asarray(idx, dtype=np.int64)
    if idx.shape != src.shape[: idx.ndim]:
        raise _shape_error("scatter_add", src.shape, idx.shape)
    out = accumulate_rows(idx, src.data.reshape((-1,) + src.shape[idx.ndim:]), n)
    return _make(out, (src,), lambda g: (g[idx],), "scatter_add")


def where(mask: np.ndarray, a, b) -> Tensor:
    """Select ``a`` where the constant boolean ``mask`` holds, else ``b``."""
    a, b = as_tensor(a), as_tensor(b)
    mask = np.asarray(mask, dtype=bool)
    out = np.where(mask, a.data, b.data)

    def backward(g):
        return _unbroadcast(np.where(mask, g, 0.0), a.shape), _unbroadcast(np.where(mask, 0.0, g), b.shape)

    return _make(out, (a, b), backward, "where")


# ---------------------------------------------------------------------------
# image ops
# ---------------------------------------------------------------------------

def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    # xp: (B, C, Hp, Wp) -> (B, Ho, Wo, C, kh, kw)
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    return win.transpose(0, 2, 3, 1, 4, 5)


def conv2d(x, w, b=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation. x: (B, C, H, W); w: (O, C, kh, kw); b: (O,)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise _shape_error("conv2d", x.shape, w.shape)
    B, C, H, W = x.shape
    O, _, kh, kw = w.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    if xp.shape[2] < kh or xp.shape[3] < kw:
        raise _shape_error("conv2d", x.shape, w.shape)
    cols = _im2col(xp, kh, kw, stride)
    Ho, Wo = cols.shape[1], cols.shape[2]
    cols2 = cols.reshape(B * Ho * Wo, C * kh * kw)
    wmat = w.data.reshape(O, -1)
    out = (cols2 @ wmat.T).reshape(B, Ho, Wo, O)
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        out = out + b.data
        parents.append(b)
    out = out.transpose(0, 3, 1, 2)

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, O)
        gx = gw = None
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape(B, Ho, Wo, C, kh, kw)
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = dxp[:, :, padding:padding + H, padding:padding + W]
        if w.requires_grad:
            gw = (g2.T @ cols2).reshape(w.shape)
        if b is not None:
            return gx, gw, g2.sum(axis=0)
        return gx, gw

    return _make(np.ascontiguousarray(out), parents, backward, "conv2d")


def max_pool2d(x, k: int = 2) -> Tensor:
    """Non-overlapping k×k max pooling; trailing rows/cols that don't fill a window are dropped."""
    x = as_tensor(x)
    B, C, H, W = x.shape
    Ho, Wo = H // k, W // k
    if Ho == 0 or Wo == 0:
        raise _shape_error("max_pool2d", x.shape, (k, k))
    xc = x.data[:, :, : Ho * k, : Wo * k].reshape(B, C, Ho, k, Wo, k).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, Ho, Wo, k * k)
    arg = xc.argmax(axis=-1)
    out = np.take_along_axis(xc, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gc = np.zeros_like(xc)
        np.put_along_axis(gc, arg[..., None], g[..., None], axis=-1)
        gc = gc.reshape(B, C, Ho, Wo, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, Ho * k, Wo * k)
        full = np.zeros_like(x.data)
        full[:, :, : Ho * k, : Wo * k] = gc
        return (full,)

    return _make(out, (x,), backward, "max_pool2d")


def bilinear_sample2d(fmap, coords) -> Tensor:
    """Sample ``fmap`` (B, C, H, W) at continuous grid coords (B, P, 2) as (x=col, y=row).

    Coordinates are clamped to the grid extent (border replication); the
    gradient w.r.t. a clamped coordinate is zero.  Returns (B, P, C).
    """
    fmap, coords = as_tensor(fmap), as_tensor(coords)
    if fmap.ndim != 4 or coords.ndim != 3 or coords.shape[-1] != 2 or coords.shape[0] != fmap.shape[0]:
        raise _shape_error("bilinear_sample2d", fmap.shape, coords.shape)
    B, C, H, W = fmap.shape
    x = coords.data[..., 0]
    y = coords.data[..., 1]
    xc = np.clip(x, 0.0, W - 1)
    yc = np.clip(y, 0.0, H - 1)
    x0 = np.minimum(np.floor(xc).astype(np.int64), max(W - 2, 0))
    y0 = np.minimum(np.floor(yc).astype(np.int64), max(H - 2, 0))
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    fx = xc - x0
    fy = yc - y0
    bidx = np.arange(B)[:, None]
    fm = fmap.data.transpose(0, 2, 3, 1)  # B, H, W, C
    v00 = fm[bidx, y0, x0]
    v01 = fm[bidx, y0, x1]
    v10 = fm[bidx, y1, x0]
    v11 = fm[bidx, y1, x1]
    w00 = ((1 - fx) * (1 - fy))[..., None]
    w01 = (fx * (1 - fy))[..., None]
    w10 = ((1 - fx) * fy)[..., None]
    w11 = (fx * fy)[..., None]
    out = w00 * v00 + w01 * v01 + w10 * v10 + w11 * v11

    def backward(g):
        gf = gc = None
        if fmap.requires_grad:
            bb = np.broadcast_to(bidx, x0.shape)
            lin = np.concatenate([((bb * H + yy) * W + xx).reshape(-1)
                                  for yy, xx in ((y0, x0), (y0, x1), (y1, x0), (y1, x1))])
            vals = np.concatenate([(g * ww).reshape(-1, C) for ww in (w00, w01, w10, w11)])
            gf = accumulate_rows(lin, vals, B * H * W).reshape(B, H, W, C).transpose(0, 3, 1, 2)
        if coords.requires_grad:
            dx = ((1 - fy)[..., None] * (v01 - v00) + fy[..., None] * (v11 - v10))
            dy = ((1 - fx)[..., None] * (v10 - v00) + fx[..., None] * (v11 - v01))
            gx = (g * dx).sum(-1) * ((x >= 0) & (x <= W - 1))
            gy = (g * dy).sum(-1) * ((y >= 0) & (y <= H - 1))
            gc = np.stack([gx, gy], axis=-1)
        return gf, gc

    return _make(out, (fmap, coords), backward, "bilinear_sample2d")


def trilinear_sample3d(grid, coords) -> Tensor:
    """Sample a dense grid (D0, D1, D2, C) at continuous node coords (P, 3).

    Nodes outside the grid contribute zero.  Returns (P, C).
    """
    grid, coords = as_tensor(grid), as_tensor(coords)
    if grid.ndim != 4 or coords.ndim != 2 or coords.shape[-1] != 3:
        raise _shape_error("trilinear_sample3d", grid.shape, coords.shape)
    dims = np.array(grid.shape[:3])
    C = grid.shape[3]
    c = coords.data
    base = np.floor(c).astype(np.int64)
    frac = c - base
    corners = []
    for dz in (0, 1):
        for dy in (0, 1):
            for dx in (0, 1):
                off = np.array([dz, dy, dx])
                idx = base + off
                valid = np.all((idx >= 0) & (idx < dims), axis=1)
                idxc = np.where(valid[:, None], idx, 0)
                wz = frac[:, 0] if dz else 1 - frac[:, 0]
                wy = frac[:, 1] if dy else 1 - frac[:, 1]
                wx = frac[:, 2] if dx else 1 - frac[:, 2]
                vals = grid.data[idxc[:, 0], idxc[:, 1], idxc[:, 2]] * valid[:, None]
                corners.append((off, idxc, valid, wz, wy, wx, vals))
    out = np.zeros((c.shape[0], C))
    for off, idxc, valid, wz, wy, wx, vals in corners:
        out += (wz * wy * wx)[:, None] * vals

    def backward(g):
        gg = gc = None
        if grid.requires_grad:
            D0, D1, D2 = grid.shape[:3]
            lin = np.concatenate([(idxc[:, 0] * D1 + idxc[:, 1]) * D2 + idxc[:, 2]
                                  for _, idxc, *_ in corners])
            vals = np.concatenate([g * (wz * wy * wx * valid)[:, None]
                                   for _, _, valid, wz, wy, wx, _ in corners])
            gg = accumulate_rows(lin, vals, D0 * D1 * D2).reshape(grid.shape)
        if coords.requires_grad:
            gc = np.zeros_like(c)
            for off, idxc, valid, wz, wy, wx, vals in corners:
                s = (g * vals).sum(-1)
                sz = 1.0 if off[0] else -1.0
                sy = 1.0 if off[1] else -1.0
                sx = 1.0 if off[2] else -1.0
                gc[:, 0] += s * sz * wy * wx
                gc[:, 1] += s * wz * sy * wx
                gc[:, 2] += s * wz * wy * sx
        return gg, gc

    return _make(out, (grid, coords), backward, "trilinear_sample3d")


def sparse_conv(x, w, b, rulebook: Sequence[tuple[np.ndarray, np.ndarray]], n_out: int) -> Tensor:
    """Sparse convolution as gather-matmul-scatter.

    x: (M_in, C); w: (K, C, O); rulebook[k] = (in_idx, out_idx) pairs for
    kernel offset k, each index unique within its offset.
    """
    x, w = as_tensor(x), as_tensor(w)
    if w.ndim != 3 or w.shape[1] != x.shape[1] or len(rulebook) != w.shape[0]:
        raise _shape_error("sparse_conv", x.shape, w.shape)
    out = np.zeros((n_out, w.shape[2]))
    for k, (i_in, i_out) in enumerate(rulebook):
        if len(i_in):
            out[i_out] += x.data[i_in] @ w.data[k]
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        out += b.data
        parents.append(b)

    def backward(g):
        gx = np.zeros_like(x.data) if x.requires_grad else None
        gw = np.zeros_like(w.data) if w.requires_grad else None
        for k, (i_in, i_out) in enumerate(rulebook):
            if not len(i_in):
                continue
            gk = g[i_out]
            if gx is not None:
                gx[i_in] += gk @ w.data[k].T
            if gw is not None:
                gw[k] = x.data[i_in].T @ gk
        if b is not None:
            return gx, gw, g.sum(0)
        return gx, gw

    return _make(out, parents, backward, "sparse_conv")


# ---------------------------------------------------------------------------
# optimisation and verification
# ---------------------------------------------------------------------------

def adam_step(params: Iterable[Parameter], lr: float = 1e-4, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Bias-corrected Adam update; clears gradients afterwards.

    Parameters without a gradient (or with an all-zero one) are left untouched.
    """
    for p in params:
        g = p.grad
        p.grad = None
        if g is None or not np.any(g):
            continue
        p.step += 1
        p.m = beta1 * p.m + (1 - beta1) * g
        p.v = beta2 * p.v + (1 - beta2) * g * g
        mhat = p.m / (1 - beta1 ** p.step)
        vhat = p.v / (1 - beta2 ** p.step)
        p.data = p.data - lr * mhat / (np.sqrt(vhat) + eps)


def grad_check(f: Callable[[], Tensor], params: Sequence[Parameter], step: float = 1e-5,
               max_coords: int | None = None, rng: np.random.Generator | None = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` rebuilds the tape on every call.  With ``max_coords`` only that
    many randomly chosen coordinates per parameter are perturbed.
    """
    for p in params:
        p.grad = None
    loss = f()
    if not np.isfinite(loss.data).all():
        raise FloatingPointError("grad_check: non-finite objective")
    loss.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    for p in params:
        p.grad = None
    rng = rng or np.random.default_rng(0)
    worst = 0.0
    with no_grad():
        for p, a in zip(params, analytic):
            p.data = np.ascontiguousarray(p.data)
            flat = p.data.reshape(-1)
            coords = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                coords = rng.choice(flat.size, size=max_coords, replace=False)
            for i in coords:
                orig = flat[i]
                flat[i] = orig + step
                fp = f().item()
                flat[i] = orig - step
                fm = f().item()
                flat[i] = orig
                if not (np.isfinite(fp) and np.isfinite(fm)):
                    raise FloatingPointError("grad_check: non-finite objective")
                num = (fp - fm) / (2 * step)
                ai = a.reshape(-1)[i]
                worst = max(worst, abs(ai - num) / max(1.0, abs(ai)))
    return worst
