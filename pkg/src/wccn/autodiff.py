"""Reverse-mode automatic differentiation over dense float64 arrays.

Every operation appends a node to the current thread's :class:`Graph`.
Node ids increase monotonically, so the inputs of node ``k`` always have
ids ``< k`` and ``backward`` can walk the list in reverse without a
topological sort.
"""
from __future__ import annotations

import contextlib
import struct
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Mapping, Sequence

import numpy as np

__all__ = [
    "ShapeError", "Tensor", "Graph", "Node", "current_graph", "new_graph", "no_grad",
    "tensor", "backward", "add", "sub", "mul", "neg", "matmul", "conv2d", "relu",
    "max_pool2d", "avg_pool2d", "global_avg_pool", "global_max_pool", "roi_pool",
    "upsample_nearest", "exp", "log", "softplus", "softmax_axis", "log_softmax_axis",
    "sum_axis", "mean", "max_axis", "scale", "reshape", "transpose", "take", "select", "concat",
    "conv2d_direct", "save_tensors", "load_tensors",
]


class ShapeError(ValueError):
    def __init__(self, op: str, expected: str, actual) -> None:
        self.op = op
        self.expected = expected
        self.actual = actual
        super().__init__(f"{op}: expected {expected}, got {actual}")


@dataclass(eq=False)
class Node:
    id: int
    op: str
    inputs: tuple
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    graph: "Graph"


class Graph:
    """Append-only list of recorded operations."""

    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self.enabled = True

    def record(self, op: str, inputs: tuple, backward_fn) -> Node:
        node = Node(len(self.nodes), op, inputs, backward_fn, self)
        self.nodes.append(node)
        return node

    def __len__(self) -> int:
        return len(self.nodes)

    def release(self) -> None:
        """Drop saved inputs and closures so intermediates are freed without waiting for the GC."""
        for node in self.nodes:
            node.inputs = ()
            node.backward = _released
        self.nodes.clear()


def _released(g):
    raise RuntimeError("backward through a released graph")


_local = threading.local()


def current_graph() -> Graph:
    g = getattr(_local, "graph", None)
    if g is None:
        g = _local.graph = Graph()
    return g


@contextlib.contextmanager
def new_graph() -> Iterator[Graph]:
    """Run a block against a fresh graph; the previous one is restored after."""
    prev = getattr(_local, "graph", None)
    g = _local.graph = Graph()
    try:
        yield g
    finally:
        _local.graph = prev


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    g = current_graph()
    prev = g.enabled
    g.enabled = False
    try:
        yield
    finally:
        g.enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None) -> None:
        d = np.asarray(data, dtype=np.float64)
        self.data = d if d.flags.c_contiguous else np.ascontiguousarray(d)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node: Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(op: str, data: np.ndarray, inputs: tuple, backward_fn) -> Tensor:
    out = Tensor(data)
    g = current_graph()
    if g.enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = g.record(op, inputs, backward_fn)
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.data.size != 1:
        raise ShapeError("backward", "scalar loss", loss.shape)
    seed = np.ones_like(loss.data)
    if loss.node is None:
        if loss.requires_grad:
            loss.grad = seed if loss.grad is None else loss.grad + seed
        return
    graph = loss.node.graph
    pending: dict[int, np.ndarray] = {loss.node.id: seed}
    for k in range(loss.node.id, -1, -1):
        gout = pending.pop(k, None)
        if gout is None:
            continue
        node = graph.nodes[k]
        for t, gin in zip(node.inputs, node.backward(gout)):
            if gin is None or not t.requires_grad:
                continue
            if t.node is None:
                t.grad = gin.copy() if t.grad is None else t.grad + gin
            else:
                if t.node.graph is not graph:
                    raise RuntimeError("tensor from another graph reached during backward")
                j = t.node.id
                pending[j] = gin if j not in pending else pending[j] + gin


# ----------------------------------------------------------------- elementwise

def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, f"shape broadcastable with {a.shape}", b.shape) from None


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("add", a, b)
    return _make("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("sub", a, b)
    return _make("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("mul", a, b)
    return _make("mul", a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def neg(a: Tensor) -> Tensor:
    return scale(a, -1.0)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make("scale", a.data * c, (a,), lambda g: (g * c,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make("relu", np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _make("exp", y, (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    return _make("log", np.log(x.data), (x,), lambda g: (g / x.data,))


def softplus(x: Tensor) -> Tensor:
    """log(1 + e^x), evaluated without overflow."""
    y = np.logaddexp(0.0, x.data)
    sig = np.exp(x.data - y)
    return _make("softplus", y, (x,), lambda g: (g * sig,))


# ----------------------------------------------------------------- reductions

def sum_axis(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    y = np.sum(x.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make("sum_axis", np.asarray(y, dtype=np.float64), (x,), bw)


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    n = x.data.size if axis is None else x.shape[axis]
    return scale(sum_axis(x, axis), 1.0 / n)


def max_axis(x: Tensor, axis: int) -> Tensor:
    """Maximum along ``axis``; the gradient goes to the first maximal entry."""
    idx = np.argmax(x.data, axis=axis)
    y = np.take_along_axis(x.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis)

    def bw(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        return (gx,)

    out = _make("max_axis", y, (x,), bw)
    return out


def argmax_axis(x: Tensor, axis: int) -> np.ndarray:
    return np.argmax(x.data, axis=axis)


def softmax_axis(x: Tensor, axis: int) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make("softmax_axis", y, (x,), bw)


def log_softmax_axis(x: Tensor, axis: int) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    p = np.exp(y)

    def bw(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _make("log_softmax_axis", y, (x,), bw)


# ----------------------------------------------------------------- shape ops

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        y = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", f"{x.data.size} elements", tuple(shape)) from None
    return _make("reshape", y, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make("transpose", np.ascontiguousarray(x.data.transpose(axes)), (x,),
                 lambda g: (g.transpose(inv),))


def take(x: Tensor, flat_indices) -> Tensor:
    """Gather entries of ``x`` by flat (row-major) index; repeated indices accumulate."""
    idx = np.asarray(flat_indices, dtype=np.intp).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= x.data.size):
        raise ShapeError("take", f"indices in [0, {x.data.size})", (int(idx.min()), int(idx.max())))

    def bw(g):
        gx = np.zeros(x.data.size)
        np.add.at(gx, idx, g)
        return (gx.reshape(x.shape),)

    return _make("take", x.data.reshape(-1)[idx], (x,), bw)


def select(x: Tensor, i: int) -> Tensor:
    """``x[i]`` along the leading axis."""
    if not -x.shape[0] <= i < x.shape[0]:
        raise ShapeError("select", f"index within leading dim {x.shape[0]}", i)

    def bw(g):
        gx = np.zeros(x.shape)
        gx[i] = g
        return (gx,)

    return _make("select", x.data[i].copy(), (x,), bw)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = tuple(xs)
    sizes = np.cumsum([t.shape[axis] for t in xs])[:-1]
    try:
        y = np.concatenate([t.data for t in xs], axis=axis)
    except ValueError:
        raise ShapeError("concat", f"equal shapes off axis {axis}", [t.shape for t in xs]) from None
    return _make("concat", y, xs, lambda g: tuple(np.split(g, sizes, axis=axis)))


# ----------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", f"[m, k] @ [k, n] with left {a.shape}", b.shape)
    return _make("matmul", a.data @ b.data, (a, b),
                 lambda g: (g @ b.data.T, a.data.T @ g))


def _out_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """View of shape [N, C, Ho, Wo, kh, kw] over a (padded) NCHW array."""
    v = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return v[:, :, ::stride, ::stride]


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation, NCHW input, weight [out, in, kh, kw]."""
    if x.ndim != 4:
        raise ShapeError("conv2d", "NCHW input", x.shape)
    if w.ndim != 4 or w.shape[1] != x.shape[1]:
        raise ShapeError("conv2d", f"weight [out, {x.shape[1]}, kh, kw]", w.shape)
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError("conv2d", f"bias [{w.shape[0]}]", b.shape)
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    ho, wo = _out_size(h, kh, stride, pad), _out_size(wd, kw, stride, pad)
    if ho < 1 or wo < 1:
        raise ShapeError("conv2d", f"spatial size >= kernel {kh}x{kw} after padding", x.shape)
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    # cols: [C*kh*kw, N*Ho*Wo]
    cols = _windows(xp, kh, kw, stride)[:, :, :ho, :wo]
    cols = cols.transpose(1, 4, 5, 0, 2, 3).reshape(c * kh * kw, n * ho * wo)
    wmat = w.data.reshape(o, -1)
    y = (wmat @ cols).reshape(o, n, ho, wo).transpose(1, 0, 2, 3)
    if b is not None:
        y = y + b.data[None, :, None, None]
    y = np.ascontiguousarray(y)

    def bw(g):
        gmat = g.transpose(1, 0, 2, 3).reshape(o, -1)
        gw = (gmat @ cols.T).reshape(w.shape) if w.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if b is not None and b.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (wmat.T @ gmat).reshape(c, kh, kw, n, ho, wo)
            gxp = np.zeros(xp.shape)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                        gcols[:, i, j].transpose(1, 0, 2, 3)
            gx = gxp[:, :, pad:pad + h, pad:pad + wd] if pad else gxp
        return (gx, gw, gb) if b is not None else (gx, gw)

    inputs = (x, w, b) if b is not None else (x, w)
    return _make("conv2d", y, inputs, bw)


def conv2d_direct(x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None,
                  stride: int = 1, pad: int = 0) -> np.ndarray:
    """Direct-loop reference for :func:`conv2d` (forward only)."""
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    ho, wo = _out_size(h, kh, stride, pad), _out_size(wd, kw, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    y = np.zeros((n, o, ho, wo))
    for bi in range(n):
        for oc in range(o):
            for r in range(ho):
                for s in range(wo):
                    acc = 0.0
                    for ic in range(c):
                        for i in range(kh):
                            for j in range(kw):
                                acc += xp[bi, ic, r * stride + i, s * stride + j] * w[oc, ic, i, j]
                    y[bi, oc, r, s] = acc + (b[oc] if b is not None else 0.0)
    return y


# ----------------------------------------------------------------- pooling

def max_pool2d(x: Tensor, k: int = 2, stride: int | None = None) -> Tensor:
    """Max pooling without padding; ties route the gradient to the lowest index."""
    stride = k if stride is None else stride
    if x.ndim != 4:
        raise ShapeError("max_pool2d", "NCHW input", x.shape)
    n, c, h, w = x.shape
    ho, wo = _out_size(h, k, stride, 0), _out_size(w, k, stride, 0)
    if ho < 1 or wo < 1:
        raise ShapeError("max_pool2d", f"spatial size >= {k}", x.shape)
    win = _windows(x.data, k, k, stride)[:, :, :ho, :wo].reshape(n, c, ho, wo, k * k)
    arg = np.argmax(win, axis=-1)
    y = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        gx = np.zeros(x.shape)
        di, dj = np.divmod(arg, k)
        rows = np.arange(ho)[None, None, :, None] * stride + di
        cols = np.arange(wo)[None, None, None, :] * stride + dj
        nn = np.arange(n)[:, None, None, None]
        cc = np.arange(c)[None, :, None, None]
        np.add.at(gx, (nn, cc, rows, cols), g)
        return (gx,)

    return _make("max_pool2d", np.ascontiguousarray(y), (x,), bw)


def avg_pool2d(x: Tensor, k: int = 2, stride: int | None = None) -> Tensor:
    stride = k if stride is None else stride
    if x.ndim != 4:
        raise ShapeError("avg_pool2d", "NCHW input", x.shape)
    n, c, h, w = x.shape
    ho, wo = _out_size(h, k, stride, 0), _out_size(w, k, stride, 0)
    if ho < 1 or wo < 1:
        raise ShapeError("avg_pool2d", f"spatial size >= {k}", x.shape)
    y = _windows(x.data, k, k, stride)[:, :, :ho, :wo].mean(axis=(-2, -1))

    def bw(g):
        gx = np.zeros(x.shape)
        share = g / (k * k)
        for i in range(k):
            for j in range(k):
                gx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += share
        return (gx,)

    return _make("avg_pool2d", np.ascontiguousarray(y), (x,), bw)


def global_avg_pool(x: Tensor) -> Tensor:
    """NCHW -> NC mean over the spatial grid."""
    if x.ndim != 4:
        raise ShapeError("global_avg_pool", "NCHW input", x.shape)
    n, c, h, w = x.shape
    return _make("global_avg_pool", x.data.mean(axis=(2, 3)), (x,),
                 lambda g: (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).copy(),))


def global_max_pool(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ShapeError("global_max_pool", "NCHW input", x.shape)
    n, c, h, w = x.shape
    return reshape(max_axis(reshape(x, (n, c, h * w)), axis=2), (n, c))


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    if x.ndim != 4:
        raise ShapeError("upsample_nearest", "NCHW input", x.shape)
    f = int(factor)
    y = x.data.repeat(f, axis=2).repeat(f, axis=3)
    n, c, h, w = x.shape
    return _make("upsample_nearest", y, (x,),
                 lambda g: (g.reshape(n, c, h, f, w, f).sum(axis=(3, 5)),))


def _roi_coords(r) -> tuple[int, int, int, int]:
    if hasattr(r, "x0"):
        return int(r.x0), int(r.y0), int(r.x1), int(r.y1)
    x0, y0, x1, y1 = r
    return int(x0), int(y0), int(x1), int(y1)


def _bin_edges(start: int, length: int, bins: int) -> list[tuple[int, int]]:
    edges = []
    for k in range(bins):
        lo = start + (k * length) // bins
        hi = start + ((k + 1) * length) // bins
        edges.append((lo, max(hi, lo + 1)))
    return edges


def roi_pool(features: Tensor, rois, output_size: tuple[int, int],
             batch_indices: Sequence[int] | None = None) -> Tensor:
    """Max-pool each roi (feature-grid box, half-open) into ``output_size`` bins.

    Bin ``k`` of a side of length ``L`` starting at ``s`` spans
    ``[s + floor(k*L/h), s + floor((k+1)*L/h))``, widened to one cell when empty.
    Gradients go to the first maximal cell of each bin in raster order.
    """
    if features.ndim != 4:
        raise ShapeError("roi_pool", "NCHW features", features.shape)
    oh, ow = output_size
    if oh < 1 or ow < 1:
        raise ShapeError("roi_pool", "output_size >= 1x1", output_size)
    n, c, h, w = features.shape
    rois = list(rois)
    if batch_indices is None:
        batch_indices = [0] * len(rois)
    if len(batch_indices) != len(rois):
        raise ShapeError("roi_pool", f"{len(rois)} batch indices", len(batch_indices))
    data = features.data
    out = np.empty((len(rois), c, oh, ow))
    spans = []
    for r, (roi, bi) in enumerate(zip(rois, batch_indices)):
        x0, y0, x1, y1 = _roi_coords(roi)
        x0, x1 = max(0, min(x0, w)), max(0, min(x1, w))
        y0, y1 = max(0, min(y0, h)), max(0, min(y1, h))
        if x1 <= x0 or y1 <= y0:
            raise ValueError(f"roi_pool: roi {r} is empty after clamping: {(x0, y0, x1, y1)}")
        rs = (np.arange(oh) * (y1 - y0)) // oh
        cs = (np.arange(ow) * (x1 - x0)) // ow
        region = data[bi, :, y0:y1, x0:x1]
        # reduceat over sorted starts yields exactly the widened floor bins
        out[r] = np.maximum.reduceat(np.maximum.reduceat(region, rs, axis=1), cs, axis=2)
        spans.append((int(bi), x0, y0, x1, y1))

    def bw(g):
        gx = np.zeros(data.size)
        route = np.empty((len(spans), c, oh, ow), dtype=np.intp)
        chan = np.arange(c)
        for r, (bi, x0, y0, x1, y1) in enumerate(spans):
            for i, (ya, yb) in enumerate(_bin_edges(y0, y1 - y0, oh)):
                for j, (xa, xb) in enumerate(_bin_edges(x0, x1 - x0, ow)):
                    a = np.argmax(data[bi, :, ya:yb, xa:xb].reshape(c, -1), axis=1)
                    bw_ = xb - xa
                    route[r, :, i, j] = ((bi * c + chan) * h + ya + a // bw_) * w + xa + a % bw_
        np.add.at(gx, route.reshape(-1), g.reshape(-1))
        return (gx.reshape(data.shape),)

    return _make("roi_pool", out, (features,), bw)


# ----------------------------------------------------------------- serialization

_MAGIC = b"WCCN"
_VERSION = 1


def save_tensors(path: str | Path, tensors: Mapping[str, "Tensor | np.ndarray"]) -> None:
    """Write a named-tensor container: header, then name/rank/dims/f64 payload per entry."""
    parts = [_MAGIC, struct.pack("<II", _VERSION, len(tensors))]
    for name, t in tensors.items():
        arr = np.array(t.data if isinstance(t, Tensor) else t, dtype="<f8", order="C")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_tensors(path: str | Path) -> dict[str, np.ndarray]:
    path = Path(path)
    buf = path.read_bytes()
    if buf[:4] != _MAGIC:
        raise ValueError(f"{path}: not a WCCN tensor container")
    try:
        version, count = struct.unpack_from("<II", buf, 4)
        if version != _VERSION:
            raise ValueError(f"{path}: unsupported container version {version}")
        off = 12
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (ln,) = struct.unpack_from("<I", buf, off)
            off += 4
            name = buf[off:off + ln].decode("utf-8")
            off += ln
            (rank,) = struct.unpack_from("<I", buf, off)
            off += 4
            dims = struct.unpack_from(f"<{rank}Q", buf, off)
            off += 8 * rank
            size = int(np.prod(dims, dtype=np.int64))
            arr = np.frombuffer(buf, dtype="<f8", count=size, offset=off).reshape(dims)
            off += 8 * size
            out[name] = arr.astype(np.float64)
    except struct.error as exc:
        raise ValueError(f"{path}: truncated tensor container") from exc
    if off != len(buf):
        raise ValueError(f"{path}: trailing bytes after {count} tensors")
    return out
