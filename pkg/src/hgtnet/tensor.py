"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation below builds the value eagerly with numpy and, when any
input participates in gradient tracking, attaches an ``OpRecord`` holding
the parent tensors and a closure that maps the output gradient to parent
gradients.  ``backward`` walks the records in reverse topological order and
accumulates into ``Tensor.grad`` (a flat view is never used: grads share
the value's shape).

The op set is intentionally small: exactly what the model needs, with
numpy-style broadcasting supported for add/mul and matmul batch dims.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, ContractError, ShapeError
from .rng import RngStream


class OpRecord:
    """Provenance of a derived tensor: parents and the gradient closure."""

    __slots__ = ("name", "parents", "backward")

    def __init__(self, name: str, parents: tuple["Tensor", ...],
                 backward: Callable[[np.ndarray], tuple]):
        self.name = name
        self.parents = parents
        self.backward = backward


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "op_record")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.op_record: OpRecord | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # Operator sugar used throughout the model code.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _tracked(parents: Sequence[Tensor]) -> bool:
    return any(p.requires_grad or p.op_record is not None for p in parents)


def _make(data: np.ndarray, name: str, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data)
    if _tracked(parents):
        out.requires_grad = True
        out.op_record = OpRecord(name, parents, backward)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the parent's shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise / structural ops
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(data, "add", (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data * b.data

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(data, "mul", (a, b), backward)


def matmul(a, b) -> Tensor:
    """Matrix product with numpy batch semantics on the leading dims."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(data, "matmul", (a, b), backward)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    x = _as_tensor(x)
    data = x.data.reshape(shape)

    def backward(g):
        return (g.reshape(x.shape),)

    return _make(data, "reshape", (x,), backward)


def transpose(x: Tensor, axes: tuple[int, ...]) -> Tensor:
    x = _as_tensor(x)
    data = np.ascontiguousarray(x.data.transpose(axes))
    inverse = np.argsort(axes)

    def backward(g):
        return (g.transpose(inverse),)

    return _make(data, "transpose", (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return _make(data, "concat", tuple(ts), backward)


def take_rows(x: Tensor, start: int, stop: int) -> Tensor:
    """Contiguous slice along axis 0; gradient scatters back with zero fill."""
    x = _as_tensor(x)
    data = x.data[start:stop].copy()

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[start:stop] = g
        return (gx,)

    return _make(data, "take_rows", (x,), backward)


def tsum(x: Tensor, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    data = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(data, "sum", (x,), backward)


def tmean(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    count = x.size if axis is None else x.shape[axis]
    data = x.data.mean(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g / count, x.shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, x.shape).copy(),)

    return _make(data, "mean", (x,), backward)


# ---------------------------------------------------------------------------
# neural-net ops
# ---------------------------------------------------------------------------

def softmax(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Stable softmax over the last axis.

    ``mask`` (broadcastable bool array) restricts normalization to True
    entries; masked positions get weight exactly 0.  Each unmasked row must
    contain at least one True entry.
    """
    x = _as_tensor(x)
    if mask is None:
        m = x.data.max(axis=-1, keepdims=True)
        e = np.exp(x.data - m)
    else:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        m = np.where(mask, x.data, -np.inf).max(axis=-1, keepdims=True)
        # clamp masked entries before exp so no overflow leaks through
        e = np.where(mask, np.exp(np.where(mask, x.data, m) - m), 0.0)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        inner = (g * y).sum(axis=-1, keepdims=True)
        return (y * (g - inner),)

    return _make(y, "softmax", (x,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each slice along the last axis to zero mean / unit variance
    (population variance), then apply the learned affine."""
    if eps <= 0:
        raise ConfigError(f"layer_norm eps must be positive, got {eps}")
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    d = x.shape[-1]
    mean = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean) * inv
    data = gamma.data * xhat + beta.data

    def backward(g):
        reduce_axes = tuple(range(g.ndim - 1))
        gbeta = g.sum(axis=reduce_axes) if reduce_axes else g.copy()
        ggamma = (g * xhat).sum(axis=reduce_axes) if reduce_axes else g * xhat
        gxhat = g * gamma.data
        gx = inv * (gxhat
                    - gxhat.mean(axis=-1, keepdims=True)
                    - xhat * (gxhat * xhat).sum(axis=-1, keepdims=True) / d)
        return gx, ggamma.reshape(gamma.shape), gbeta.reshape(beta.shape)

    return _make(data, "layer_norm", (x, gamma, beta), backward)


_GELU_C = np.sqrt(2.0 / np.pi)
_GELU_A = 0.044715


def activation(x: Tensor, kind: str, slope: float = 0.01) -> Tensor:
    """Elementwise nonlinearity: relu, gelu (tanh form), or leaky_relu(slope)."""
    x = _as_tensor(x)
    v = x.data
    if kind == "relu":
        data = np.maximum(v, 0.0)

        def backward(g):
            return (g * (v > 0.0),)
    elif kind == "gelu":
        u = _GELU_C * (v + _GELU_A * v**3)
        t = np.tanh(u)
        data = 0.5 * v * (1.0 + t)

        def backward(g):
            du = _GELU_C * (1.0 + 3.0 * _GELU_A * v**2)
            return (g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t**2) * du),)
    elif kind == "leaky_relu":
        data = np.where(v > 0.0, v, slope * v)

        def backward(g):
            return (g * np.where(v > 0.0, 1.0, slope),)
    else:
        raise ConfigError(f"unknown activation kind {kind!r}")
    return _make(data, kind, (x,), backward)


def relu(x: Tensor) -> Tensor:
    return activation(x, "relu")


def gelu(x: Tensor) -> Tensor:
    return activation(x, "gelu")


def leaky_relu(x: Tensor, slope: float) -> Tensor:
    return activation(x, "leaky_relu", slope=slope)


def dropout(x: Tensor, p: float, training: bool, rng: RngStream) -> Tensor:
    """Inverted dropout: zero with probability p, scale survivors by 1/(1-p).

    Eval mode (or p == 0) is exactly the identity.
    """
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {p}")
    x = _as_tensor(x)
    if not training or p == 0.0:
        return x
    mask = (rng.uniform(x.size).reshape(x.shape) >= p) / (1.0 - p)
    data = x.data * mask

    def backward(g):
        return (g * mask,)

    return _make(data, "dropout", (x,), backward)


def conv2d(x: Tensor, w: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2D cross-correlation (no kernel flip) with bias.

    x: (B, C, H, W), w: (F, C, kH, kW), bias: (F,).  Output extents must be
    exact integers: H' = (H + 2*padding - kH)/stride + 1.
    """
    x, w, bias = _as_tensor(x), _as_tensor(w), _as_tensor(bias)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input/weight, got {x.shape} and {w.shape}")
    B, C, H, W = x.shape
    F, Cw, kh, kw = w.shape
    if C != Cw:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape} vs weight {w.shape}")
    if bias.shape != (F,):
        raise ShapeError(f"conv2d bias must have shape ({F},), got {bias.shape}")
    if stride < 1:
        raise ShapeError(f"conv2d stride must be >= 1, got {stride}")
    num_h = H + 2 * padding - kh
    num_w = W + 2 * padding - kw
    if num_h < 0 or num_w < 0 or num_h % stride or num_w % stride:
        raise ShapeError(
            f"conv2d geometry invalid: input {H}x{W}, kernel {kh}x{kw}, "
            f"stride {stride}, padding {padding} gives non-integer output extent")
    Hh, Ww = num_h // stride + 1, num_w // stride + 1

    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride]  # (B, C, H', W', kh, kw)
    cols = np.ascontiguousarray(windows.transpose(0, 2, 3, 1, 4, 5)).reshape(B * Hh * Ww, C * kh * kw)
    wmat = w.data.reshape(F, C * kh * kw)
    out = (cols @ wmat.T).reshape(B, Hh, Ww, F).transpose(0, 3, 1, 2) + bias.data[None, :, None, None]

    def backward(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(B * Hh * Ww, F)
        gb = g.sum(axis=(0, 2, 3))
        gw = (g2.T @ cols).reshape(F, C, kh, kw)
        gcols = (g2 @ wmat).reshape(B, Hh, Ww, C, kh, kw).transpose(0, 3, 1, 2, 4, 5)
        gxp = np.zeros_like(xp)
        for u in range(kh):
            for v in range(kw):
                gxp[:, :, u:u + stride * Hh:stride, v:v + stride * Ww:stride] += gcols[:, :, :, :, u, v]
        gx = gxp[:, :, padding:padding + H, padding:padding + W] if padding else gxp
        return gx, gw, gb

    return _make(out, "conv2d", (x, w, bias), backward)


def max_pool2d(x: Tensor, k: int, stride: int) -> Tensor:
    """Window maxima; the gradient routes to the first maximum in row-major
    window order when values tie."""
    x = _as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"max_pool2d expects 4-d input, got {x.shape}")
    B, C, H, W = x.shape
    if k < 1 or stride < 1:
        raise ShapeError(f"max_pool2d window/stride must be >= 1, got k={k}, stride={stride}")
    if k > H or k > W:
        raise ShapeError(f"max_pool2d window {k} larger than input {H}x{W}")
    Hh = (H - k) // stride + 1
    Ww = (W - k) // stride + 1
    windows = np.lib.stride_tricks.sliding_window_view(x.data, (k, k), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride].reshape(B, C, Hh, Ww, k * k)
    idx = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        rows = (np.arange(Hh) * stride)[None, None, :, None] + idx // k
        cols = (np.arange(Ww) * stride)[None, None, None, :] + idx % k
        flat = rows * W + cols
        gx = np.zeros((B, C, H * W))
        np.add.at(gx, (np.arange(B)[:, None, None, None],
                       np.arange(C)[None, :, None, None], flat), g)
        return (gx.reshape(B, C, H, W),)

    return _make(out, "max_pool2d", (x,), backward)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every requires_grad ancestor of a scalar loss.

    Gradients from multiple uses of the same tensor accumulate by summation.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")

    # Iterative post-order topo sort (graphs are deep enough to overflow
    # Python's recursion limit on big images).
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
        if node.op_record is not None:
            for parent in node.op_record.parents:
                if id(parent) not in seen and (parent.requires_grad or parent.op_record is not None):
                    stack.append((parent, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad and node.op_record is None:
            # leaf parameter/input: accumulate into the public slot
            node.grad = g if node.grad is None else node.grad + g
            continue
        if node.op_record is None:
            continue
        parent_grads = node.op_record.backward(g)
        for parent, pg in zip(node.op_record.parents, parent_grads):
            if not (parent.requires_grad or parent.op_record is not None):
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
        if node.requires_grad and node is not loss:
            # interior tensor explicitly marked: expose its gradient too
            node.grad = g if node.grad is None else node.grad + g
