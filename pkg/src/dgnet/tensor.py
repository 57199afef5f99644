"""Dense numpy-backed tensors with a reverse-mode differentiation tape.

Only the handful of operations needed by a small graph-wired CNN are
provided: convolution, pooling, affine maps, elementwise activations,
broadcast arithmetic, indexing/scatter for the adjacency buffer, and a
label-smoothed cross-entropy loss.
"""
from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DEFAULT_DTYPE = np.float32

_op_counter = itertools.count()
_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (inference)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class ShapeError(ValueError):
    pass


class _Op:
    __slots__ = ("seq", "name", "parents", "backward")

    def __init__(self, name: str, parents: tuple, backward: Callable):
        self.seq = next(_op_counter)
        self.name = name
        self.parents = parents
        self.backward = backward


class Tensor:
    """N-d array node. Leaves with ``requires_grad`` accumulate into ``grad``."""

    __slots__ = ("data", "requires_grad", "grad", "_op", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype.kind == "f" else DEFAULT_DTYPE
        self.data = np.asarray(arr, dtype=dtype, order="C")
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._op: _Op | None = None
        self.name = name

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._op is None

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> Tensor:
        return Tensor(self.data.copy())

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(_lift(other, self.dtype), -1.0))

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self):
        return tensor_sum(self)

    def mean(self):
        return tensor_mean(self)


def _lift(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or DEFAULT_DTYPE))


def _make(data: np.ndarray, name: str, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._op = _Op(name, tuple(parents), backward_fn)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# tape
# ---------------------------------------------------------------------------

class Tape:
    """The recorded operations reachable from a root, in execution order."""

    def __init__(self, ops: list[tuple[Tensor, _Op]]):
        self.ops = ops

    @classmethod
    def from_root(cls, root: Tensor) -> Tape:
        seen: set[int] = set()
        found: list[tuple[Tensor, _Op]] = []
        stack = [root]
        while stack:
            t = stack.pop()
            if t._op is None or id(t) in seen:
                continue
            seen.add(id(t))
            found.append((t, t._op))
            stack.extend(t._op.parents)
        found.sort(key=lambda pair: pair[1].seq)
        return cls(found)

    def __len__(self):
        return len(self.ops)

    def names(self) -> list[str]:
        return [op.name for _, op in self.ops]

    def replay_backward(self, root: Tensor, seed: np.ndarray) -> list[str]:
        grads: dict[int, np.ndarray] = {id(root): seed}
        visited = []
        for out, op in reversed(self.ops):
            g = grads.pop(id(out), None)
            visited.append(op.name)
            if g is None:
                continue
            parent_grads = op.backward(g)
            for parent, pg in zip(op.parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if parent._op is None:
                    pg = np.asarray(pg, dtype=parent.dtype).reshape(parent.shape)
                    parent.grad = pg.copy() if parent.grad is None else parent.grad + pg
                else:
                    key = id(parent)
                    grads[key] = pg if key not in grads else grads[key] + pg
        return visited


def backward(root: Tensor) -> Tape:
    """Populate ``grad`` on every requires_grad leaf reachable from ``root``."""
    if root.data.size != 1 or root.ndim > 1:
        raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
    seed = np.ones_like(root.data)
    if root._op is None:
        if root.requires_grad:
            root.grad = seed.copy() if root.grad is None else root.grad + seed
        return Tape([])
    tape = Tape.from_root(root)
    tape.replay_backward(root, seed)
    return tape


# ---------------------------------------------------------------------------
# elementary ops
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a = _lift(a)
    b = _lift(b, a.dtype)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _make(a.data + b.data, "add", (a, b), bw)


def mul(a, b) -> Tensor:
    """Elementwise product with numpy broadcasting (scalars included)."""
    a = _lift(a)
    b = _lift(b, a.dtype)
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return _make(ad * bd, "mul", (a, b), bw)


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    return _make(x.data.reshape(shape), "reshape", (x,), lambda g: (g.reshape(src),))


def tensor_sum(x: Tensor) -> Tensor:
    src = x.shape
    return _make(np.asarray(x.data.sum()), "sum", (x,), lambda g: (np.broadcast_to(g, src),))


def tensor_mean(x: Tensor) -> Tensor:
    src, n = x.shape, x.data.size
    return _make(np.asarray(x.data.mean()), "mean", (x,), lambda g: (np.broadcast_to(g / n, src),))


def getitem(x: Tensor, idx) -> Tensor:
    src = x.shape

    def bw(g):
        full = np.zeros(src, dtype=g.dtype)
        np.add.at(full, idx, g)
        return (full,)

    return _make(x.data[idx], "getitem", (x,), bw)


def index_put(x: Tensor, idx, values: Tensor) -> Tensor:
    """Copy of ``x`` with ``x[idx] = values``; gradients route to both inputs."""
    values = _lift(values, x.dtype)
    out = x.data.copy()
    out[idx] = values.data
    vshape = values.shape

    def bw(g):
        gx = g.copy()
        gx[idx] = 0
        return gx, g[idx].reshape(vshape)

    return _make(out, "index_put", (x, values), bw)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_lift(t) for t in tensors]

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _make(np.stack([t.data for t in tensors], axis=axis), "stack", tensors, bw)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0).astype(x.dtype), "relu", (x,), lambda g: (g * mask,))


def _sigmoid_np(v: np.ndarray) -> np.ndarray:
    # split by sign so neither branch overflows
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid_np(x.data)
    return _make(s, "sigmoid", (x,), lambda g: (g * s * (1 - s),))


def elementwise(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown elementwise kind {kind!r}")


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation via im2col. ``x`` is [B,C,H,W], ``kernel`` [Co,Ci,k,k]."""
    if x.ndim != 4:
        raise ShapeError(f"conv2d input must be 4-d [B,C,H,W], got shape {x.shape}")
    if kernel.ndim != 4 or kernel.shape[2] != kernel.shape[3]:
        raise ShapeError(f"conv2d kernel must be [C_out,C_in,k,k], got shape {kernel.shape}")
    B, C, H, W = x.shape
    Co, Ci, k, _ = kernel.shape
    if Ci != C:
        raise ShapeError(f"conv2d channel mismatch: input C_in={C}, kernel C_in={Ci}")
    if k < 1 or stride < 1 or padding < 0:
        raise ValueError("conv2d needs k >= 1, stride >= 1, padding >= 0")
    Ho = conv_output_size(H, k, stride, padding)
    Wo = conv_output_size(W, k, stride, padding)
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"conv2d kernel {k} larger than padded input {H}x{W}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :Ho, :Wo]
    # rows: (b, ho, wo); cols: (c, kh, kw)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, C * k * k)
    kflat = kernel.data.reshape(Co, C * k * k)
    out = (cols @ kflat.T).reshape(B, Ho, Wo, Co).transpose(0, 3, 1, 2)

    def bw(g):
        gflat = g.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, Co)
        gk = (gflat.T @ cols).reshape(kernel.shape) if kernel.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (gflat @ kflat).reshape(B, Ho, Wo, C, k, k)
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += (
                        gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                    )
            gx = gxp[:, :, padding:padding + H, padding:padding + W] if padding else gxp
        return gx, gk

    return _make(np.ascontiguousarray(out), "conv2d", (x, kernel), bw)


def add_channel_bias(x: Tensor, bias: Tensor) -> Tensor:
    return add(x, reshape(bias, (1, -1, 1, 1)))


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray, running_var: np.ndarray,
               training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel normalisation of [B,C,H,W]; updates the running statistics in place when training."""
    shape = (1, -1, 1, 1)
    if not training:
        inv = 1.0 / np.sqrt(running_var + eps)
        scale = (gamma.data * inv).reshape(shape)
        shift = (beta.data - running_mean * gamma.data * inv).reshape(shape)
        xd = x.data

        def bw_eval(g):
            return (g * scale, (g * (xd - running_mean.reshape(shape)) * inv.reshape(shape)).sum(axis=(0, 2, 3)),
                    g.sum(axis=(0, 2, 3)))

        return _make((xd * scale + shift).astype(x.dtype), "batch_norm", (x, gamma, beta), bw_eval)
    axes = (0, 2, 3)
    n = x.data.size // x.shape[1]
    mean = x.data.mean(axis=axes)
    var = x.data.var(axis=axes)
    running_mean *= 1 - momentum
    running_mean += momentum * mean
    running_var *= 1 - momentum
    running_var += momentum * var * n / max(n - 1, 1)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean.reshape(shape)) * inv.reshape(shape)
    gd = gamma.data.reshape(shape)

    def bw(g):
        gbeta = g.sum(axis=axes)
        ggamma = (g * xhat).sum(axis=axes)
        gxhat = g * gd
        gx = inv.reshape(shape) / n * (n * gxhat - gxhat.sum(axis=axes, keepdims=True)
                                       - xhat * (gxhat * xhat).sum(axis=axes, keepdims=True))
        return gx, ggamma, gbeta

    return _make((xhat * gd + beta.data.reshape(shape)).astype(x.dtype), "batch_norm", (x, gamma, beta), bw)


def global_avg_pool(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool expects [B,C,H,W], got shape {x.shape}")
    B, C, H, W = x.shape
    if H < 1 or W < 1:
        raise ShapeError("global_avg_pool needs H, W >= 1")
    scale = 1.0 / (H * W)

    def bw(g):
        return (np.broadcast_to((g * scale)[:, :, None, None], (B, C, H, W)),)

    return _make(x.data.mean(axis=(2, 3)), "global_avg_pool", (x,), bw)


def fully_connected(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """``x @ weight + bias`` with ``x`` [B,Ci], ``weight`` [Ci,Co], ``bias`` [Co]."""
    if x.ndim != 2 or weight.ndim != 2:
        raise ShapeError(f"fully_connected expects 2-d input and weight, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[0]:
        raise ShapeError(f"fully_connected inner dimension mismatch: input {x.shape[1]} vs weight {weight.shape[0]}")
    if bias.shape != (weight.shape[1],):
        raise ShapeError(f"fully_connected bias shape {bias.shape} does not match output width {weight.shape[1]}")
    xd, wd = x.data, weight.data

    def bw(g):
        gx = g @ wd.T if x.requires_grad else None
        gw = xd.T @ g if weight.requires_grad else None
        return gx, gw, g.sum(axis=0)

    return _make(xd @ wd + bias.data, "fully_connected", (x, weight, bias), bw)


def log_softmax_np(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def cross_entropy_smoothed(logits: Tensor, labels, smoothing: float = 0.0) -> Tensor:
    """Mean over the batch of the cross-entropy against label-smoothed targets."""
    if logits.ndim != 2:
        raise ShapeError(f"logits must be [B,K], got {logits.shape}")
    if not 0.0 <= smoothing < 1.0:
        raise ValueError(f"smoothing must lie in [0,1), got {smoothing}")
    B, K = logits.shape
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape[0] != B:
        raise ShapeError(f"{labels.shape[0]} labels for a batch of {B}")
    if labels.size and (labels.min() < 0 or labels.max() >= K):
        bad = labels[(labels < 0) | (labels >= K)][0]
        raise ValueError(f"label {bad} outside [0,{K})")
    target = np.full((B, K), smoothing / K, dtype=logits.dtype)
    target[np.arange(B), labels] += 1.0 - smoothing
    logp = log_softmax_np(logits.data)
    loss = -(target * logp).sum() / B

    def bw(g):
        return (g * (np.exp(logp) - target) / B,)

    return _make(np.asarray(loss, dtype=logits.dtype), "cross_entropy", (logits,), bw)


def parameters_zero_grad(params: Iterable[Tensor]):
    for p in params:
        p.grad = None
