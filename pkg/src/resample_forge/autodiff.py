"""Minimal reverse-mode automatic differentiation on float64 numpy arrays.

Tensors record the operation that produced them (eager taping), so each
forward pass rebuilds a dynamic graph; `backward` walks the recorded
nodes once, in reverse creation order, which is a valid reverse
topological order because inputs are always created before the ops that
consume them. Everything is float64: the problem sizes here are small
and gradient-check fidelity matters more than speed.
"""

from __future__ import annotations

import itertools
import struct
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

_ids = itertools.count()
_tape_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_tape_state, "enabled", True)


class no_grad:
    """Context manager that disables taping (inference-only regions).
    The flag is thread-local: graphs on separate threads are independent."""

    def __enter__(self):
        self._prev = _grad_enabled()
        _tape_state.enabled = False
        return self

    def __exit__(self, *exc):
        _tape_state.enabled = self._prev
        return False


class Tensor:
    """A float64 array participating in a reverse-mode computation graph."""

    __slots__ = ("data", "requires_grad", "grad", "op", "parents", "_backward", "id")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.op = "leaf"
        self.parents: tuple = ()
        self._backward = None
        self.id = next(_ids)

    # ---- introspection ----

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.shape}, requires_grad={self.requires_grad})"

    # ---- graph ----

    def detach(self) -> "Tensor":
        """A new leaf sharing this tensor's data; gradients stop here."""
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    # ---- operator sugar ----

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return subtract(self, other)

    def __rsub__(self, other):
        return subtract(other, self)

    def __mul__(self, other):
        return multiply(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return divide(self, other)

    def __rtruediv__(self, other):
        return divide(other, self)

    def __neg__(self):
        return multiply(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(op: str, data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    """Record one op node. Parent links are dropped when no gradient can
    flow, which keeps inference passes off the tape."""
    t = Tensor.__new__(Tensor)
    t.data = data
    t.grad = None
    t.op = op
    t.id = next(_ids)
    if _grad_enabled() and any(p.requires_grad for p in parents):
        t.requires_grad = True
        t.parents = tuple(parents)
        t._backward = backward_fn
    else:
        t.requires_grad = False
        t.parents = ()
        t._backward = None
    return t


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum out axes that numpy broadcasting expanded, restoring `shape`."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Graph:
    """Creation-ordered view of the op nodes reachable from a root.

    Node ids increase monotonically as ops execute, so sorting by id
    yields a topological order in which every input precedes its
    consumers.
    """

    def __init__(self, root: Tensor):
        seen = set()
        nodes = []
        stack = [root]
        while stack:
            t = stack.pop()
            if id(t) in seen:
                continue
            seen.add(id(t))
            nodes.append(t)
            stack.extend(t.parents)
        nodes.sort(key=lambda t: t.id)
        self.nodes = nodes


def backward(root: Tensor) -> None:
    """Populate .grad with d(root)/d(tensor) for every requires_grad
    tensor reachable from `root`. Gradients accumulate additively, both
    across fan-out within the graph and across repeated backward calls;
    call zero_grad between optimizer steps."""
    if root.size != 1:
        raise ValueError(f"backward: root must be scalar, got shape {root.shape}")
    graph = Graph(root)
    seed = np.ones_like(root.data)
    root.grad = seed if root.grad is None else root.grad + seed
    for node in reversed(graph.nodes):
        if node._backward is None or node.grad is None:
            continue
        grads = node._backward(node.grad)
        for parent, g in zip(node.parents, grads):
            if g is None or not parent.requires_grad:
                continue
            parent.grad = g if parent.grad is None else parent.grad + g


# ---------------------------------------------------------------------------
# elementwise / arithmetic ops
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make("add", out, (a, b), bw)


def subtract(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make("subtract", out, (a, b), bw)


def multiply(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make("multiply", out, (a, b), bw)


def divide(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if np.any(b.data == 0.0):
        raise ValueError(f"divide: zero divisor, shapes {a.shape} / {b.shape}")
    out = a.data / b.data

    def bw(g):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        )

    return _make("divide", out, (a, b), bw)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)

    def bw(g):
        return (g * out,)

    return _make("exp", out, (a,), bw)


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0.0):
        raise ValueError(f"log: non-positive input, shape {a.shape}")
    out = np.log(a.data)

    def bw(g):
        return (g / a.data,)

    return _make("log", out, (a,), bw)


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    p = float(p)
    if p != int(p) and np.any(a.data < 0.0):
        raise ValueError(f"power: negative base with fractional exponent {p}")
    out = a.data**p

    def bw(g):
        return (g * p * a.data ** (p - 1.0),)

    return _make("power", out, (a,), bw)


def cos(a) -> Tensor:
    a = as_tensor(a)
    out = np.cos(a.data)

    def bw(g):
        return (-g * np.sin(a.data),)

    return _make("cos", out, (a,), bw)


def sin(a) -> Tensor:
    a = as_tensor(a)
    out = np.sin(a.data)

    def bw(g):
        return (g * np.cos(a.data),)

    return _make("sin", out, (a,), bw)


def relu(a) -> Tensor:
    a = as_tensor(a)
    out = np.maximum(a.data, 0.0)

    def bw(g):
        return (g * (a.data > 0.0),)

    return _make("relu", out, (a,), bw)


def clamp(a, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    out = np.clip(a.data, lo, hi)

    def bw(g):
        return (g * ((a.data >= lo) & (a.data <= hi)),)

    return _make("clamp", out, (a,), bw)


# ---------------------------------------------------------------------------
# linear algebra / shape ops
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul: rank >= 2 required, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: inner extents differ, {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make("matmul", out, (a, b), bw)


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = list(range(a.ndim - 2)) + [a.ndim - 1, a.ndim - 2]
    axes = tuple(axes)
    out = np.transpose(a.data, axes)
    inverse = np.argsort(axes)

    def bw(g):
        return (np.transpose(g, inverse),)

    return _make("transpose", out, (a,), bw)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = a.data.reshape(shape)

    def bw(g):
        return (g.reshape(a.shape),)

    return _make("reshape", out, (a,), bw)


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    out = np.broadcast_to(a.data, shape).copy()

    def bw(g):
        return (_unbroadcast(g, a.shape),)

    return _make("broadcast", out, (a,), bw)


def concatenate(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.shape[axis] for t in ts]
    bounds = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make("concatenate", out, ts, bw)


def split(a, sections: int, axis: int = 0) -> list[Tensor]:
    """Split into `sections` equal parts along `axis` (inverse of
    concatenate for equal chunks)."""
    a = as_tensor(a)
    pieces = np.split(a.data, sections, axis=axis)
    outs = []
    for i, piece in enumerate(pieces):
        def bw(g, _i=i):
            full = np.zeros_like(a.data)
            idx = [slice(None)] * a.ndim
            width = a.shape[axis] // sections
            idx[axis] = slice(_i * width, (_i + 1) * width)
            full[tuple(idx)] = g
            return (full,)

        outs.append(_make("split", piece, (a,), bw))
    return outs


def gather_rows(a, indices: np.ndarray) -> Tensor:
    """Select rows by integer index.

    Unbatched: a has shape (n, ...), indices shape (m,).
    Batched: a has shape (B, n, ...), indices shape (B, m); row selection
    is independent per batch element. Backward scatter-adds, so repeated
    ancestors accumulate gradient from each copy.
    """
    a = as_tensor(a)
    indices = np.asarray(indices, dtype=np.intp)
    if indices.ndim == 1:
        out = a.data[indices]

        def bw(g):
            full = np.zeros_like(a.data)
            np.add.at(full, indices, g)
            return (full,)

    elif indices.ndim == 2 and a.ndim >= 2:
        expand = indices.reshape(indices.shape + (1,) * (a.ndim - 2))
        out = np.take_along_axis(a.data, expand, axis=1)

        def bw(g):
            full = np.zeros_like(a.data)
            b_idx = np.arange(a.shape[0])[:, None]
            np.add.at(full, (b_idx, indices), g)
            return (full,)

    else:
        raise ValueError(f"gather_rows: unsupported shapes {a.shape}, {indices.shape}")
    return _make("gather", out, (a,), bw)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------


def _restore_axes(g: np.ndarray, shape: tuple, axis, keepdims: bool) -> np.ndarray:
    if not keepdims:
        if axis is None:
            g = g.reshape((1,) * len(shape))
        else:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            for ax in sorted(a % len(shape) for a in axes):
                g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        return (_restore_axes(g, a.shape, axis, keepdims).copy(),)

    return _make("sum", np.asarray(out), (a,), bw)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.size if axis is None else np.prod(
        [a.shape[ax] for ax in ((axis,) if isinstance(axis, int) else axis)]
    )

    def bw(g):
        return (_restore_axes(g, a.shape, axis, keepdims) / count,)

    return _make("mean", np.asarray(out), (a,), bw)


def _extreme(a, axis: int, keepdims: bool, op: str) -> Tensor:
    a = as_tensor(a)
    fn, argfn = (np.max, np.argmax) if op == "max" else (np.min, np.argmin)
    out = fn(a.data, axis=axis, keepdims=keepdims)
    arg = argfn(a.data, axis=axis)

    def bw(g):
        # Ties route to the first extremal element, keeping backward
        # deterministic.
        full = np.zeros_like(a.data)
        g_exp = g if keepdims else np.expand_dims(g, axis)
        np.put_along_axis(full, np.expand_dims(arg, axis), g_exp, axis=axis)
        return (full,)

    return _make(op, np.asarray(out), (a,), bw)


def max_(a, axis: int, keepdims=False) -> Tensor:
    return _extreme(a, axis, keepdims, "max")


def min_(a, axis: int, keepdims=False) -> Tensor:
    return _extreme(a, axis, keepdims, "min")


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _make("softmax", out, (a,), bw)


def layer_norm(a, axis: int = -1, eps: float = 1e-5) -> Tensor:
    """Normalize to zero mean / unit variance along `axis`.

    eps is added to the variance before the square root, so constant
    inputs normalize to exactly zero instead of dividing by zero.
    Affine gain/bias, when wanted, are separate tensors applied by the
    caller.
    """
    a = as_tensor(a)
    mu = a.data.mean(axis=axis, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    out = xc * inv

    def bw(g):
        g_mean = g.mean(axis=axis, keepdims=True)
        gy_mean = (g * out).mean(axis=axis, keepdims=True)
        return (inv * (g - g_mean - out * gy_mean),)

    return _make("layer_norm", out, (a,), bw)


def logsumexp(a, axis: int, keepdims=False) -> Tensor:
    """log(sum(exp(a))) along `axis`, stabilized by a detached max shift
    (the shift has zero mathematical gradient, so detaching is exact)."""
    a = as_tensor(a)
    shift = Tensor(a.data.max(axis=axis, keepdims=True))
    s = log(sum_(exp(a - shift), axis=axis, keepdims=True)) + shift
    if not keepdims:
        s = reshape(s, np.asarray(s.data).squeeze(axis=axis).shape)
    return s


def weighted_logsumexp(a, w, axis: int, keepdims=False) -> Tensor:
    """log(sum(w * exp(a))) along `axis` for non-negative weights with at
    least one strictly positive entry; the max shift is taken over the
    support of w so a zero-weighted outlier cannot destabilize it."""
    a, w = as_tensor(a), as_tensor(w)
    wd = np.broadcast_to(w.data, a.shape)
    masked = np.where(wd > 0.0, a.data, -np.inf)
    shift_data = masked.max(axis=axis, keepdims=True)
    if not np.all(np.isfinite(shift_data)):
        raise ValueError("weighted_logsumexp: all weights zero along axis")
    shift = Tensor(shift_data)
    s = log(sum_(w * exp(a - shift), axis=axis, keepdims=True)) + shift
    if not keepdims:
        s = reshape(s, np.asarray(s.data).squeeze(axis=axis).shape)
    return s


# ---------------------------------------------------------------------------
# optimization utilities
# ---------------------------------------------------------------------------


def global_grad_norm(params: Iterable[Tensor]) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(p.grad * p.grad))
    return float(np.sqrt(total))


def clip_global_norm(params: Sequence[Tensor], max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most max_norm.

    Returns the pre-clip norm. The scale is re-applied if float rounding
    leaves the result a hair above the bound, so the post-clip norm is
    <= max_norm exactly and a second call is a no-op.
    """
    if max_norm <= 0:
        raise ValueError("clip_global_norm: max_norm must be positive")
    pre = global_grad_norm(params)
    norm = pre
    while norm > max_norm:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
        norm = global_grad_norm(params)
    return pre


class Adam:
    """Adaptive-moment optimizer with bias correction."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            if g.shape != p.data.shape:
                raise ValueError(
                    f"adam: grad shape {g.shape} != param shape {p.data.shape}"
                )
            self.m[i] = b1 * self.m[i] + (1 - b1) * g
            self.v[i] = b2 * self.v[i] + (1 - b2) * g * g
            m_hat = self.m[i] / (1 - b1**self.t)
            v_hat = self.v[i] / (1 - b2**self.t)
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


# ---------------------------------------------------------------------------
# parameter checkpoints
# ---------------------------------------------------------------------------

_CHECKPOINT_MAGIC = b"PTCHK1"


def save_checkpoint(path, tensors: dict[str, Tensor | np.ndarray]) -> None:
    """Binary checkpoint: magic, u64 tensor count, then per tensor the
    u64 name length, UTF-8 name, u64 rank, u64 extents, f64 data (all
    little-endian)."""
    with open(path, "wb") as f:
        f.write(_CHECKPOINT_MAGIC)
        f.write(struct.pack("<Q", len(tensors)))
        for name, value in tensors.items():
            arr = np.asarray(value.data if isinstance(value, Tensor) else value,
                             dtype=np.float64)
            encoded = name.encode("utf-8")
            f.write(struct.pack("<Q", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<Q", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            f.write(arr.astype("<f8").tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        magic = f.read(len(_CHECKPOINT_MAGIC))
        if magic != _CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a parameter checkpoint (bad magic {magic!r})")
        (count,) = struct.unpack("<Q", f.read(8))
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<Q", f.read(8))
            name = f.read(name_len).decode("utf-8")
            (rank,) = struct.unpack("<Q", f.read(8))
            shape = struct.unpack(f"<{rank}Q", f.read(8 * rank)) if rank else ()
            n_items = int(np.prod(shape)) if rank else 1
            data = np.frombuffer(f.read(8 * n_items), dtype="<f8").astype(np.float64)
            out[name] = data.reshape(shape)
        return out
