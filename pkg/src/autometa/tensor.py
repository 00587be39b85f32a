"""Dense float64 tensors with a dynamic tape for reverse-mode gradients.

Every differentiable op returns a new :class:`Tensor` that remembers its
parents and a closure mapping the output gradient to parent gradients.
The graph is rebuilt on each forward pass, which keeps variable cell
topologies trivial to differentiate.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided


class NumericError(FloatingPointError):
    """Raised when a forward or backward pass produces NaN or Inf."""


_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextmanager
def record_kinks(sink: list):
    """Collect activation-pattern digests of ReLU/max ops (used by grad checks)."""
    prev = getattr(_state, "kinks", None)
    _state.kinks = sink
    try:
        yield sink
    finally:
        _state.kinks = prev


def _note_kink(pattern: np.ndarray) -> None:
    sink = getattr(_state, "kinks", None)
    if sink is not None:
        sink.append(np.packbits(pattern.ravel()).tobytes())


class Tensor:
    __slots__ = ("data", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
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
        return float(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericError(f"non-finite values produced by {what}")


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, what: str) -> Tensor:
    _check_finite(data, what)
    out = Tensor(data)
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------- backward

def backward(loss: Tensor, params: Iterable[Tensor] | None = None):
    """Reverse-mode sweep from a scalar ``loss``.

    Returns a dict ``{param: grad}`` over ``params`` (or over every leaf that
    requires grad when ``params`` is None). Parameters the loss does not
    depend on get zero gradients.
    """
    if loss.data.size != 1 or loss.data.ndim > 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss is not on a recorded tape")

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: list[Tensor] = []
    for node in reversed(order):
        g = grads.get(id(node))
        if node._backward is None:
            leaves.append(node)
            continue
        if g is None:
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg

    targets = leaves if params is None else list(params)
    out = {}
    for p in targets:
        g = grads.get(id(p))
        if g is None:
            g = np.zeros_like(p.data)
        else:
            _check_finite(g, "backward")
        out[p] = g
    return out


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def add_n(xs: Sequence[Tensor]) -> Tensor:
    if len(xs) == 1:
        return xs[0]
    data = xs[0].data.copy()
    for x in xs[1:]:
        if x.shape != data.shape:
            raise ValueError(f"add shape mismatch {x.shape} vs {data.shape}")
        data += x.data
    return _result(data, xs, lambda g: tuple(g for _ in xs), "add_n")


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _result(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, sa), _unbroadcast(g * a.data, sb)), "mul")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    _note_kink(mask)
    return _result(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    y = np.empty_like(x.data)
    pos = x.data >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    ex = np.exp(x.data[~pos])
    y[~pos] = ex / (1.0 + ex)
    return _result(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _result(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


# ---------------------------------------------------------------- shape / reduction

def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _result(np.asarray(x.data.sum()), (x,),
                   lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def mean_all(x: Tensor) -> Tensor:
    shape, n = x.shape, x.data.size
    return _result(np.asarray(x.data.mean()), (x,),
                   lambda g: (np.full(shape, float(g) / n),), "mean")


def concat(xs: Sequence[Tensor], axis: int = 1) -> Tensor:
    if len(xs) == 1:
        return xs[0]
    sizes = [x.shape[axis] for x in xs]
    bounds = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(np.concatenate([x.data for x in xs], axis=axis), xs, bw, "concat")


def split(x: Tensor, n: int, axis: int = -1) -> list[Tensor]:
    """Split into ``n`` equal chunks along ``axis``; each chunk is its own node."""
    size = x.shape[axis] // n
    out = []
    for i in range(n):
        sl = [slice(None)] * x.ndim
        sl[axis] = slice(i * size, (i + 1) * size)
        sl = tuple(sl)

        def bw(g, sl=sl):
            full = np.zeros_like(x.data)
            full[sl] = g
            return (full,)

        out.append(_result(x.data[sl], (x,), bw, "split"))
    return out


def take_rows(table: Tensor, idx: np.ndarray) -> Tensor:
    """Embedding lookup: ``table[idx]``."""
    idx = np.asarray(idx, dtype=np.int64)

    def bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, idx, g)
        return (full,)

    return _result(table.data[idx], (table,), bw, "take_rows")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return _result(a.data @ b.data, (a, b),
                   lambda g: (g @ b.data.T, a.data.T @ g), "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """``x @ w.T + b`` with ``w`` shaped (out, in)."""
    def bw(g):
        return g @ w.data, g.T @ x.data, g.sum(axis=0)

    return _result(x.data @ w.data.T + b.data, (x, w, b), bw, "linear")


# ---------------------------------------------------------------- losses

def softmax_xent(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {labels.shape}")
    if n < 1:
        raise ValueError("empty batch")
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"label out of range [0, {c})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = np.mean(logsum - z[rows, labels])

    def bw(g):
        p = np.exp(z - logsum[:, None])
        p[rows, labels] -= 1.0
        return (p * (float(g) / n),)

    return _result(np.asarray(loss), (logits,), bw, "softmax_xent")


def mse(pred: Tensor, target) -> Tensor:
    target = np.asarray(target, dtype=np.float64).reshape(pred.shape)
    diff = pred.data - target
    n = diff.size
    return _result(np.asarray(np.mean(diff * diff)), (pred,),
                   lambda g: (diff * (2.0 * float(g) / n),), "mse")


# ---------------------------------------------------------------- spatial ops (NCHW, stride 1)

def _im2col(x: np.ndarray, kh: int, kw: int, ph: int, pw: int) -> np.ndarray:
    """Columns shaped (kh*kw*C, N*H*W) for a stride-1 'same' convolution."""
    n, c, h, w = x.shape
    xp = np.zeros((c, n, h + 2 * ph, w + 2 * pw))
    xp[:, :, ph:ph + h, pw:pw + w] = x.transpose(1, 0, 2, 3)
    s = xp.strides
    win = as_strided(xp, (kh, kw, c, n, h, w), (s[2], s[3], s[0], s[1], s[2], s[3]))
    return win.reshape(kh * kw * c, n * h * w)


def conv2d(x: Tensor, w: Tensor, b: Tensor, pad: tuple[int, int]) -> Tensor:
    """Stride-1 convolution. ``pad`` must give 'same' output (2*pad = kernel - 1)."""
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError("conv2d expects NCHW input and OIHW weight")
    if x.shape[1] != w.shape[1]:
        raise ValueError(f"conv2d channel mismatch: input {x.shape[1]}, weight {w.shape[1]}")
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    ph, pw = pad
    if 2 * ph != kh - 1 or 2 * pw != kw - 1:
        raise ValueError("conv2d supports only 'same' padding")
    if kh == 1 and kw == 1:
        cols = x.data.transpose(1, 0, 2, 3).reshape(c, n * h * wd)
    else:
        cols = _im2col(x.data, kh, kw, ph, pw)
    wmat = w.data.transpose(0, 2, 3, 1).reshape(o, -1)
    out = (wmat @ cols).reshape(o, n, h, wd).transpose(1, 0, 2, 3) + b.data[None, :, None, None]

    def bw(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(o, n * h * wd)
        gw = (g2 @ cols.T).reshape(o, kh, kw, c).transpose(0, 3, 1, 2)
        if not x.requires_grad:
            return None, gw, g2.sum(axis=1)
        if kh == 1 and kw == 1:
            gx = (wmat.T @ g2).reshape(c, n, h, wd)
        else:
            # input gradient is a 'same' correlation of g with the flipped, transposed kernel
            wflip = w.data[:, :, ::-1, ::-1].transpose(1, 2, 3, 0).reshape(c, -1)
            gx = (wflip @ _im2col(g, kh, kw, ph, pw)).reshape(c, n, h, wd)
        return gx.transpose(1, 0, 2, 3), gw, g2.sum(axis=1)

    return _result(out, (x, w, b), bw, "conv2d")


def _window_sum3(x: np.ndarray) -> np.ndarray:
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    h, w = x.shape[2:]
    out = np.zeros_like(x)
    for i in range(3):
        for j in range(3):
            out += xp[:, :, i:i + h, j:j + w]
    return out


def avg_pool3(x: Tensor) -> Tensor:
    """3x3 average pool, stride 1, pad 1; padding excluded from the divisor."""
    h, w = x.shape[2:]
    counts = _window_sum3(np.ones((1, 1, h, w)))
    out = _window_sum3(x.data) / counts
    return _result(out, (x,), lambda g: (_window_sum3(g / counts),), "avg_pool3")


def max_pool3(x: Tensor) -> Tensor:
    """3x3 max pool, stride 1, pad 1 (padding never wins)."""
    n, c, h, w = x.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)), constant_values=-np.inf)
    shifts = np.stack([xp[:, :, i:i + h, j:j + w] for i in range(3) for j in range(3)])
    arg = shifts.argmax(axis=0)
    _note_kink(np.eye(9, dtype=bool)[arg])
    out = np.take_along_axis(shifts, arg[None], axis=0)[0]

    def bw(g):
        gp = np.zeros((n, c, h + 2, w + 2))
        for k in range(9):
            i, j = divmod(k, 3)
            gp[:, :, i:i + h, j:j + w] += g * (arg == k)
        return (gp[:, :, 1:-1, 1:-1],)

    return _result(out, (x,), bw, "max_pool3")


def avg_pool2_stride2(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"downsampling needs even spatial dims, got {h}x{w}")
    out = x.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def bw(g):
        return (np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25,)

    return _result(out, (x,), bw, "avg_pool2")


def global_avg_pool(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    return _result(x.data.mean(axis=(2, 3)), (x,),
                   lambda g: (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).copy(),),
                   "global_avg_pool")


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, *, use_batch_stats: bool,
               running_mean: np.ndarray | None = None, running_var: np.ndarray | None = None,
               momentum: float = 0.1, eps: float = 1e-5, update_running: bool = False) -> Tensor:
    """Per-channel batch normalisation over (N, H, W).

    With ``use_batch_stats`` the batch's own mean/variance are used (training
    and transductive evaluation). ``update_running`` folds the batch stats
    into ``running_mean``/``running_var`` in place by EMA.
    """
    if x.ndim != 4 or x.shape[1] != gamma.shape[0]:
        raise ValueError(f"batch_norm shape mismatch: {x.shape} vs {gamma.shape}")
    g_ = gamma.data[None, :, None, None]
    b_ = beta.data[None, :, None, None]
    if use_batch_stats:
        axes = (0, 2, 3)
        m = x.data.shape[0] * x.data.shape[2] * x.data.shape[3]
        mu = x.data.mean(axis=axes)
        xc = x.data - mu[None, :, None, None]
        var = (xc * xc).mean(axis=axes)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv[None, :, None, None]
        if update_running:
            unbiased = var * (m / (m - 1)) if m > 1 else var
            running_mean *= 1.0 - momentum
            running_mean += momentum * mu
            running_var *= 1.0 - momentum
            running_var += momentum * unbiased

        def bw(g):
            dxhat = g * g_
            s1 = dxhat.sum(axis=axes)[None, :, None, None]
            s2 = (dxhat * xhat).sum(axis=axes)[None, :, None, None]
            gx = (inv[None, :, None, None] / m) * (m * dxhat - s1 - xhat * s2)
            return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)
    else:
        inv = 1.0 / np.sqrt(running_var + eps)
        xhat = (x.data - running_mean[None, :, None, None]) * inv[None, :, None, None]

        def bw(g):
            axes = (0, 2, 3)
            return g * g_ * inv[None, :, None, None], (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return _result(g_ * xhat + b_, (x, gamma, beta), bw, "batch_norm")
