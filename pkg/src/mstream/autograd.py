"""Dense float64 tensors with reverse-mode differentiation.

Everything in this package that needs a gradient runs through here. The
design favours verifiability over speed: all math is 64-bit, graphs are
rebuilt per utterance, and every differentiable op is checked against
central finite differences in the test suite.

A :class:`Tensor` wraps a row-major numpy float64 array. Ops record their
parents and a local backward rule on the output tensor, so the graph is the
set of tensors reachable from a loss node; :func:`backward` linearises it
topologically and applies the chain rule in reverse. Tensors created while
gradients are disabled (see :func:`no_grad`) carry no graph and are plain
immutable values.
"""

from __future__ import annotations

import itertools
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeMismatch",
    "no_grad",
    "backward",
    "gradient_check",
    "matmul",
    "add",
    "sub",
    "mul",
    "neg",
    "scale",
    "tensor_sum",
    "tanh",
    "sigmoid",
    "relu",
    "softmax",
    "log_softmax",
    "logsumexp",
    "logaddexp",
    "concat",
    "stack",
    "take",
    "reshape",
    "transpose",
    "lstm_core",
    "lstm_step",
    "conv2d",
    "maxpool2x2",
]


class ShapeMismatch(ValueError):
    """Raised when operand shapes are incompatible."""


_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


class no_grad:
    """Context manager that disables graph recording on the current thread."""

    def __enter__(self):
        self._prev = _grad_enabled()
        _state.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _state.grad_enabled = self._prev
        return False


class Tensor:
    """A row-major float64 array, optionally attached to a backward graph.

    Leaf tensors created with ``requires_grad=True`` are parameters: after
    :func:`backward` their ``grad`` holds d(loss)/d(tensor) with the same
    shape as ``data``. Non-leaf tensors carry the op record (parents plus a
    local backward rule) that produced them.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_bwd", "_uid")

    _counter = itertools.count()

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags.c_contiguous:  # ascontiguousarray would promote 0-d
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._bwd: Callable[[np.ndarray], None] | None = None
        self._uid = next(Tensor._counter)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    # operator sugar; the free functions below do the work
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], bwd: Callable) -> Tensor:
    """Build an op output; records the node only when a parent needs grad."""
    out = Tensor(data)
    if _grad_enabled():
        for p in parents:
            if p.requires_grad:
                out.requires_grad = True
                out._parents = parents
                out._bwd = bwd
                break
    return out


def _accum(t: Tensor, g) -> None:
    if t.requires_grad:
        if t.grad is None:
            t.grad = np.array(g, dtype=np.float64)
        else:
            t.grad += g


def _topo_order(root: Tensor) -> list[Tensor]:
    """Operation records ordered so that every node's inputs precede it.

    Tensors are created parents-first, so creation ids give a topological
    order of the reachable subgraph.
    """
    seen: dict[int, Tensor] = {id(root): root}
    stack = [root]
    while stack:
        node = stack.pop()
        for p in node._parents:
            if p._bwd is not None and id(p) not in seen:
                seen[id(p)] = p
                stack.append(p)
    order = list(seen.values())
    order.sort(key=lambda t: t._uid)
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``grad`` of every reachable leaf.

    ``loss`` must be scalar. Interior nodes use ``grad`` as a transient
    buffer that is cleared as the tape unwinds; leaf gradients add onto any
    existing ``grad`` so batches can accumulate across calls.
    """
    if loss.data.shape != ():
        raise ValueError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    if loss._bwd is None:
        return
    order = _topo_order(loss)
    for node in order:
        node.grad = None
    loss.grad = np.ones(())
    for node in reversed(order):
        if node.grad is None:
            continue
        node._bwd(node.grad)
        node.grad = None


def add(a, b) -> Tensor:
    """Elementwise sum; also accepts a vector bias against matrix rows."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape == b.shape:
        out = a.data + b.data

        def bwd(g):
            _accum(a, g)
            _accum(b, g)

    elif a.data.ndim == 2 and b.data.ndim == 1 and a.shape[1] == b.shape[0]:
        out = a.data + b.data

        def bwd(g):
            _accum(a, g)
            _accum(b, g.sum(axis=0))

    else:
        raise ShapeMismatch(f"add: incompatible shapes {a.shape} and {b.shape}")
    return _make(out, (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeMismatch(f"sub: incompatible shapes {a.shape} and {b.shape}")

    def bwd(g):
        _accum(a, g)
        _accum(b, -g)

    return _make(a.data - b.data, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeMismatch(f"mul: incompatible shapes {a.shape} and {b.shape}")

    def bwd(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)

    return _make(a.data * b.data, (a, b), bwd)


def neg(a) -> Tensor:
    a = as_tensor(a)

    def bwd(g):
        _accum(a, -g)

    return _make(-a.data, (a,), bwd)


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)

    def bwd(g):
        _accum(a, g * c)

    return _make(a.data * c, (a,), bwd)


def matmul(a, b) -> Tensor:
    """Matrix/vector product following numpy ``@`` conventions (1-D or 2-D)."""
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim not in (1, 2) or bd.ndim not in (1, 2):
        raise ShapeMismatch(f"matmul: only 1-D/2-D operands, got {a.shape} and {b.shape}")
    if ad.shape[-1] != (bd.shape[0] if bd.ndim > 0 else None):
        raise ShapeMismatch(f"matmul: inner dimensions differ, {a.shape} x {b.shape}")
    out = ad @ bd

    def bwd(g):
        if ad.ndim == 2 and bd.ndim == 2:
            _accum(a, g @ bd.T)
            _accum(b, ad.T @ g)
        elif ad.ndim == 1 and bd.ndim == 2:
            _accum(a, bd @ g)
            _accum(b, np.outer(ad, g))
        elif ad.ndim == 2 and bd.ndim == 1:
            _accum(a, np.outer(g, bd))
            _accum(b, ad.T @ g)
        else:  # dot product
            _accum(a, g * bd)
            _accum(b, g * ad)

    return _make(out, (a, b), bwd)


def tensor_sum(a) -> Tensor:
    a = as_tensor(a)

    def bwd(g):
        _accum(a, np.full(a.shape, float(g)))

    return _make(a.data.sum(), (a,), bwd)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)

    def bwd(g):
        _accum(a, g * (1.0 - out * out))

    return _make(out, (a,), bwd)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = 1.0 / (1.0 + np.exp(-a.data))

    def bwd(g):
        _accum(a, g * out * (1.0 - out))

    return _make(out, (a,), bwd)


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0

    def bwd(g):
        _accum(a, g * mask)

    return _make(np.where(mask, a.data, 0.0), (a,), bwd)


def softmax(v) -> Tensor:
    """Stable softmax of a 1-D vector; entries in (0, 1], sum 1."""
    v = as_tensor(v)
    if v.data.ndim != 1 or v.data.size == 0:
        raise ValueError(f"softmax expects a non-empty 1-D vector, got shape {v.shape}")
    shifted = v.data - v.data.max()
    e = np.exp(shifted)
    out = e / e.sum()

    def bwd(g):
        _accum(v, out * (g - np.dot(g, out)))

    return _make(out, (v,), bwd)


def log_softmax(m, axis: int = -1) -> Tensor:
    """Row-stable log softmax over ``axis`` of a 1-D or 2-D tensor."""
    m = as_tensor(m)
    x = m.data
    mx = x.max(axis=axis, keepdims=True)
    sh = x - mx
    lse = np.log(np.exp(sh).sum(axis=axis, keepdims=True))
    out = sh - lse

    def bwd(g):
        _accum(m, g - np.exp(out) * g.sum(axis=axis, keepdims=True))

    return _make(out, (m,), bwd)


def logsumexp(v) -> Tensor:
    """log sum exp of a 1-D vector; -inf entries allowed, all-(-inf) -> -inf."""
    v = as_tensor(v)
    if v.data.ndim != 1 or v.data.size == 0:
        raise ValueError(f"logsumexp expects a non-empty 1-D vector, got shape {v.shape}")
    m = v.data.max()
    if np.isneginf(m):
        out = np.float64(-np.inf)

        def bwd(g):
            _accum(v, np.zeros(v.shape))

    else:
        out = m + np.log(np.exp(v.data - m).sum())

        def bwd(g):
            _accum(v, float(g) * np.exp(v.data - out))

    return _make(out, (v,), bwd)


def logaddexp(a, b) -> Tensor:
    """Elementwise log(e^a + e^b), stable, with -inf treated as log 0."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeMismatch(f"logaddexp: incompatible shapes {a.shape} and {b.shape}")
    out = np.logaddexp(a.data, b.data)

    def bwd(g):
        with np.errstate(invalid="ignore"):
            wa = np.where(np.isneginf(out), 0.0, np.exp(a.data - out))
            wb = np.where(np.isneginf(out), 0.0, np.exp(b.data - out))
        _accum(a, g * np.where(np.isnan(wa), 0.0, wa))
        _accum(b, g * np.where(np.isnan(wb), 0.0, wb))

    return _make(out, (a, b), bwd)


def getitem(a, idx) -> Tensor:
    """Basic indexing (ints and slices); gradients scatter back into place."""
    a = as_tensor(a)
    out = a.data[idx]

    def bwd(g):
        buf = np.zeros(a.shape)
        buf[idx] = g
        _accum(a, buf)

    return _make(np.array(out), (a,), bwd)


def take(v, indices) -> Tensor:
    """Gather ``v[indices]`` from a 1-D vector; repeated indices allowed."""
    v = as_tensor(v)
    if v.data.ndim != 1:
        raise ShapeMismatch(f"take expects a 1-D vector, got shape {v.shape}")
    idx = np.asarray(indices, dtype=np.intp)

    def bwd(g):
        buf = np.zeros(v.shape)
        np.add.at(buf, idx, g)
        _accum(v, buf)

    return _make(v.data[idx], (v,), bwd)


def concat(parts: Sequence, axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ValueError("concat of zero tensors")
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _accum(p, g[tuple(sl)])

    return _make(out, tuple(parts), bwd)


def stack(parts: Sequence) -> Tensor:
    """Stack same-shape tensors along a new leading axis."""
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ValueError("stack of zero tensors")
    out = np.stack([p.data for p in parts])

    def bwd(g):
        for i, p in enumerate(parts):
            _accum(p, g[i])

    return _make(out, tuple(parts), bwd)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape

    def bwd(g):
        _accum(a, g.reshape(old))

    return _make(a.data.reshape(shape), (a,), bwd)


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    inv = np.argsort(axes)

    def bwd(g):
        _accum(a, g.transpose(inv))

    return _make(a.data.transpose(axes), (a,), bwd)


def lstm_core(z, c_prev) -> tuple[Tensor, Tensor]:
    """One LSTM cell from pre-activations.

    ``z`` is the length-4H pre-activation vector laid out as input gate,
    forget gate, output gate, candidate; ``c_prev`` the length-H cell state.
    Returns (h, c). Fusing the gate math into one node keeps per-step graphs
    short, which dominates training speed at this scale.
    """
    z, c_prev = as_tensor(z), as_tensor(c_prev)
    hdim = c_prev.data.shape[0]
    if z.data.shape != (4 * hdim,):
        raise ShapeMismatch(f"lstm_core: z {z.shape} does not match 4x cell {c_prev.shape}")
    zi, zf, zo, zg = (z.data[k * hdim:(k + 1) * hdim] for k in range(4))
    gi = 1.0 / (1.0 + np.exp(-zi))
    gf = 1.0 / (1.0 + np.exp(-zf))
    go = 1.0 / (1.0 + np.exp(-zo))
    gg = np.tanh(zg)
    c = gf * c_prev.data + gi * gg
    tc = np.tanh(c)
    h = go * tc

    def chain(dc, do):
        dz = np.empty(4 * hdim)
        dz[:hdim] = dc * gg * gi * (1.0 - gi)
        dz[hdim:2 * hdim] = dc * c_prev.data * gf * (1.0 - gf)
        dz[2 * hdim:3 * hdim] = do * tc * go * (1.0 - go)
        dz[3 * hdim:] = dc * gi * (1.0 - gg * gg)
        _accum(z, dz)
        _accum(c_prev, dc * gf)

    def bwd_h(g):
        chain(g * go * (1.0 - tc * tc), g)

    def bwd_c(g):
        chain(g, np.zeros(hdim))

    return _make(h, (z, c_prev), bwd_h), _make(c, (z, c_prev), bwd_c)


def lstm_step(z_row, h_prev, c_prev, w_h) -> tuple[Tensor, Tensor]:
    """Fused recurrent step: ``lstm_core(z_row + h_prev @ w_h, c_prev)``.

    One node instead of three per time step; sequence loops are the hot path
    of training, everything else uses the composable ops.
    """
    z_row, h_prev, c_prev, w_h = map(as_tensor, (z_row, h_prev, c_prev, w_h))
    hdim = c_prev.data.shape[0]
    z = z_row.data + h_prev.data @ w_h.data
    zi, zf, zo, zg = (z[k * hdim:(k + 1) * hdim] for k in range(4))
    gi = 1.0 / (1.0 + np.exp(-zi))
    gf = 1.0 / (1.0 + np.exp(-zf))
    go = 1.0 / (1.0 + np.exp(-zo))
    gg = np.tanh(zg)
    c = gf * c_prev.data + gi * gg
    tc = np.tanh(c)
    h = go * tc

    def chain(dc, do):
        dz = np.empty(4 * hdim)
        dz[:hdim] = dc * gg * gi * (1.0 - gi)
        dz[hdim:2 * hdim] = dc * c_prev.data * gf * (1.0 - gf)
        dz[2 * hdim:3 * hdim] = do * tc * go * (1.0 - go)
        dz[3 * hdim:] = dc * gi * (1.0 - gg * gg)
        _accum(z_row, dz)
        _accum(h_prev, w_h.data @ dz)
        _accum(w_h, np.outer(h_prev.data, dz))
        _accum(c_prev, dc * gf)

    def bwd_h(g):
        chain(g * go * (1.0 - tc * tc), g)

    def bwd_c(g):
        chain(g, np.zeros(hdim))

    parents = (z_row, h_prev, c_prev, w_h)
    return _make(h, parents, bwd_h), _make(c, parents, bwd_c)


def conv2d(x, kernel, bias) -> Tensor:
    """3x3 'same' convolution: x [Cin,H,W], kernel [Cout,Cin,3,3], bias [Cout]."""
    x, kernel, bias = as_tensor(x), as_tensor(kernel), as_tensor(bias)
    cin, h, w = x.data.shape
    cout, kcin, kh, kw = kernel.data.shape
    if kcin != cin or (kh, kw) != (3, 3):
        raise ShapeMismatch(f"conv2d: kernel {kernel.shape} does not match input {x.shape}")
    xp = np.pad(x.data, ((0, 0), (1, 1), (1, 1)))
    # patches[ci,dh,dw] is the shifted input plane for kernel tap (dh,dw)
    patches = np.empty((cin, 3, 3, h, w))
    for dh in range(3):
        for dw in range(3):
            patches[:, dh, dw] = xp[:, dh:dh + h, dw:dw + w]
    out = np.tensordot(kernel.data, patches, axes=([1, 2, 3], [0, 1, 2]))
    out += bias.data[:, None, None]

    def bwd(g):
        _accum(kernel, np.tensordot(g, patches, axes=([1, 2], [3, 4])))
        _accum(bias, g.sum(axis=(1, 2)))
        gxp = np.zeros_like(xp)
        for dh in range(3):
            for dw in range(3):
                gxp[:, dh:dh + h, dw:dw + w] += np.tensordot(
                    kernel.data[:, :, dh, dw], g, axes=(0, 0))
        _accum(x, gxp[:, 1:-1, 1:-1])

    return _make(out, (x, kernel, bias), bwd)


def maxpool2x2(x) -> Tensor:
    """2x2 max pooling with stride 2 and ceil semantics (partial windows kept)."""
    x = as_tensor(x)
    c, h, w = x.data.shape
    h2, w2 = (h + 1) // 2, (w + 1) // 2
    xp = np.full((c, 2 * h2, 2 * w2), -np.inf)
    xp[:, :h, :w] = x.data
    win = xp.reshape(c, h2, 2, w2, 2).transpose(0, 1, 3, 2, 4).reshape(c, h2, w2, 4)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def bwd(g):
        gwin = np.zeros_like(win)
        np.put_along_axis(gwin, arg[..., None], g[..., None], axis=-1)
        gxp = gwin.reshape(c, h2, w2, 2, 2).transpose(0, 1, 3, 2, 4).reshape(c, 2 * h2, 2 * w2)
        _accum(x, gxp[:, :h, :w])

    return _make(out, (x,), bwd)


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def collect_grads(params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    """Gradient map after backward(); parameters not reached get zeros."""
    return {
        name: (p.grad.copy() if p.grad is not None else np.zeros(p.shape))
        for name, p in params.items()
    }


def gradient_check(
    f: Callable[[], Tensor],
    params: dict[str, Tensor],
    eps: float = 1e-5,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` rebuilds and returns the scalar loss from the current parameter
    values. For every coordinate the analytic gradient ``a`` is compared to
    ``(f(p+eps) - f(p-eps)) / (2 eps)`` as ``|a-n| / max(1e-8, |a|+|n|)``;
    a non-finite loss at a perturbed point counts as a failed coordinate.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    zero_grads(params.values())
    loss = f()
    backward(loss)
    analytic = collect_grads(params)
    worst = 0.0
    for name, p in params.items():
        flat = p.data.reshape(-1)
        aflat = analytic[name].reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + eps
            with no_grad():
                up = float(f().data)
            flat[i] = keep - eps
            with no_grad():
                down = float(f().data)
            flat[i] = keep
            if not (np.isfinite(up) and np.isfinite(down)):
                return np.inf
            n = (up - down) / (2.0 * eps)
            a = aflat[i]
            worst = max(worst, abs(a - n) / max(1e-8, abs(a) + abs(n)))
    return worst
