"""Minimal reverse-mode automatic differentiation on numpy arrays.

Every differentiable op returns a :class:`Tensor` that remembers its parents
and a closure mapping the upstream gradient to per-parent gradients.  Nodes
get a monotonically increasing id at creation, so the graph order is the
insertion order and :func:`backward` walks it in exact reverse.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_node_ids = itertools.count()

DEFAULT_DTYPE = np.float64


class DimensionError(ValueError):
    pass


class ContractError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class Tensor:
    """Dense array taking part in a reverse-mode graph."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_id", "op")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        if dtype is None:
            floating = isinstance(data, np.ndarray) and data.dtype.kind == "f"
            dtype = data.dtype if floating else DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._id = next(_node_ids)
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # arithmetic sugar used by losses and tests
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other, self.data.dtype), -1.0))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)


def _as_tensor(x, dtype) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype))


def _node(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    out = Tensor(data)
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward_fn
    out.op = op
    return out


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values produced by {what}")


# ---------------------------------------------------------------------------
# elementwise and structural ops


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise add with numpy broadcasting (gradients are un-broadcast)."""
    b = _as_tensor(b, a.data.dtype)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(a.data + b.data, (a, b), bw, "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(a.data * b.data, (a, b), bw, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    return _node(a.data * c, (a,), lambda g: (g * c,), "scale")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def flatten(a: Tensor) -> Tensor:
    return reshape(a, (a.shape[0], -1))


def tensor_sum(a: Tensor) -> Tensor:
    return _node(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),), "sum")


def tensor_mean(a: Tensor) -> Tensor:
    n = a.size

    def bw(g):
        return (np.full(a.shape, g / n, dtype=a.data.dtype),)

    return _node(np.asarray(a.data.mean()), (a,), bw, "mean")


def select_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    idx = np.asarray(idx, dtype=np.intp)

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _node(a.data[idx], (a,), bw, "select_rows")


def global_avg_pool(a: Tensor) -> Tensor:
    """Mean over the spatial axes of an NCHW tensor, giving N×C."""
    n, c, h, w = a.shape

    def bw(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), a.shape).copy(),)

    return _node(a.data.mean(axis=(2, 3)), (a,), bw, "global_avg_pool")


def add_channel_bias(a: Tensor, bias: Tensor) -> Tensor:
    """Add a per-channel bias (shape C) to an NCHW tensor."""
    if bias.shape != (a.shape[1],):
        raise DimensionError(f"bias shape {bias.shape} does not match channels of {a.shape}")

    def bw(g):
        return g, g.sum(axis=(0, 2, 3))

    return _node(a.data + bias.data[None, :, None, None], (a, bias), bw, "add_channel_bias")


# ---------------------------------------------------------------------------
# convolution


def _out_size(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def _check_conv(x_shape, w_shape, stride, padding, channel_axis: int) -> None:
    if len(x_shape) != 4 or len(w_shape) != 4:
        raise DimensionError(f"conv expects 4-d input and kernel, got {x_shape} and {w_shape}")
    if stride < 1 or padding < 0:
        raise DimensionError(f"bad stride/padding {stride}/{padding}")
    if x_shape[1] != w_shape[channel_axis]:
        raise DimensionError(f"channel mismatch between input {x_shape} and kernel {w_shape}")


def _conv_fwd(x: np.ndarray, w: np.ndarray, stride: int, padding: int) -> np.ndarray:
    k, c, r, s = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    if xp.shape[2] < r or xp.shape[3] < s:
        raise DimensionError(f"kernel {w.shape} larger than padded input {xp.shape}")
    win = sliding_window_view(xp, (r, s), axis=(2, 3))[:, :, ::stride, ::stride]
    # win: N, C, H', W', R, S
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))  # N, H', W', K
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def _conv_grad_input(g: np.ndarray, w: np.ndarray, stride: int, padding: int, x_shape) -> np.ndarray:
    n, c, h, wd = x_shape
    k, _, r, s = w.shape
    ho, wo = g.shape[2], g.shape[3]
    dxp = np.zeros((n, c, h + 2 * padding, wd + 2 * padding), dtype=g.dtype)
    # contribution of each kernel tap is a strided scatter
    cols = np.tensordot(g, w, axes=([1], [0]))  # N, H', W', C, R, S
    cols = cols.transpose(0, 3, 4, 5, 1, 2)  # N, C, R, S, H', W'
    for i in range(r):
        for j in range(s):
            dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[:, :, i, j]
    if padding:
        return dxp[:, :, padding:padding + h, padding:padding + wd]
    return dxp


def _conv_grad_kernel(g: np.ndarray, x: np.ndarray, stride: int, padding: int, w_shape) -> np.ndarray:
    k, c, r, s = w_shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    win = sliding_window_view(xp, (r, s), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = g.shape[2], g.shape[3]
    win = win[:, :, :ho, :wo]
    return np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))  # K, C, R, S


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of an NCHW input with a KCRS kernel."""
    _check_conv(x.shape, kernel.shape, stride, padding, channel_axis=1)
    out = _conv_fwd(x.data, kernel.data, stride, padding)

    def bw(g):
        gx = _conv_grad_input(g, kernel.data, stride, padding, x.shape) if x.requires_grad else None
        gw = _conv_grad_kernel(g, x.data, stride, padding, kernel.shape) if kernel.requires_grad else None
        return gx, gw

    return _node(out, (x, kernel), bw, "conv2d")


def conv_transpose2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Adjoint of :func:`conv2d`; the kernel is laid out (C_in, C_out, R, S).

    Output spatial size is ``(H - 1) * stride - 2 * padding + R``.
    """
    _check_conv(x.shape, kernel.shape, stride, padding, channel_axis=0)
    cin, cout, r, s = kernel.shape
    n, _, h, w = x.shape
    ho = (h - 1) * stride - 2 * padding + r
    wo = (w - 1) * stride - 2 * padding + s
    if ho < 1 or wo < 1:
        raise DimensionError(f"conv_transpose2d output would be empty for input {x.shape}, kernel {kernel.shape}")
    out_shape = (n, cout, ho, wo)
    out = _conv_grad_input(x.data, kernel.data, stride, padding, out_shape)

    def bw(g):
        gx = _conv_fwd(g, kernel.data, stride, padding) if x.requires_grad else None
        gw = _conv_grad_kernel(x.data, g, stride, padding, kernel.shape) if kernel.requires_grad else None
        return gx, gw

    return _node(out, (x, kernel), bw, "conv_transpose2d")


def dense(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` for x of shape N×D and weight M×D."""
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise DimensionError(f"dense: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise DimensionError(f"dense: bias {bias.shape} incompatible with weight {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def bw(g):
        grads = [g @ weight.data, g.T @ x.data]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _node(out, parents, bw, "dense")


# ---------------------------------------------------------------------------
# nonlinearities


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _node(np.where(mask, x.data, 0.0).astype(x.data.dtype), (x,), lambda g: (g * mask,), "relu")


def leaky_relu(x: Tensor, alpha: float = 0.2) -> Tensor:
    slope = np.where(x.data > 0, 1.0, alpha).astype(x.data.dtype)
    return _node(x.data * slope, (x,), lambda g: (g * slope,), "leaky_relu")


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _node(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


def sigmoid(x: Tensor) -> Tensor:
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _node(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def activation(x: Tensor, kind: str, alpha: float = 0.2) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "leaky_relu":
        return leaky_relu(x, alpha)
    if kind == "tanh":
        return tanh(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


# ---------------------------------------------------------------------------
# normalization


@dataclass
class BatchNormState:
    running_mean: np.ndarray
    running_var: np.ndarray

    @classmethod
    def fresh(cls, channels: int, dtype=DEFAULT_DTYPE) -> "BatchNormState":
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))


class BatchSizeError(ValueError):
    pass


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    state: BatchNormState,
    mode: str = "train",
    momentum: float = 0.1,
    epsilon: float = 1e-5,
) -> Tensor:
    """Batch normalization over every axis except the channel axis 1.

    Train mode normalizes with the biased batch variance and folds the
    unbiased variance into the running estimate.
    """
    axes = (0,) + tuple(range(2, x.data.ndim))
    bshape = [1] * x.data.ndim
    bshape[1] = x.shape[1]
    g_ = gamma.data.reshape(bshape)
    b_ = beta.data.reshape(bshape)

    if mode == "eval":
        inv = 1.0 / np.sqrt(state.running_var.reshape(bshape) + epsilon)
        xhat = (x.data - state.running_mean.reshape(bshape)) * inv

        def bw_eval(g):
            return g * g_ * inv, (g * xhat).sum(axis=axes), g.sum(axis=axes)

        return _node(g_ * xhat + b_, (x, gamma, beta), bw_eval, "batch_norm")
    if mode != "train":
        raise ValueError(f"unknown batch_norm mode {mode!r}")
    if x.shape[0] < 2:
        raise BatchSizeError(f"batch_norm in train mode needs N >= 2, got {x.shape[0]}")

    m = x.data.size // x.shape[1]
    mean = x.data.mean(axis=axes, keepdims=True)
    xc = x.data - mean
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + epsilon)
    xhat = xc * inv
    state.running_mean[:] = (1 - momentum) * state.running_mean + momentum * mean.reshape(-1)
    state.running_var[:] = (1 - momentum) * state.running_var + momentum * var.reshape(-1) * m / max(m - 1, 1)

    def bw(g):
        dxhat = g * g_
        dx = inv * (dxhat - dxhat.mean(axis=axes, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=axes, keepdims=True))
        return dx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return _node(g_ * xhat + b_, (x, gamma, beta), bw, "batch_norm")


# ---------------------------------------------------------------------------
# classification and adversarial losses


def softmax(x: Tensor) -> Tensor:
    if x.data.ndim != 2 or x.shape[1] < 2:
        raise DimensionError(f"softmax expects N×K with K >= 2, got {x.shape}")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return _node(p, (x,), bw, "softmax")


LOG_FLOOR = 1e-12


def cross_entropy(probs: Tensor, labels) -> Tensor:
    """Batch mean of ``-log p[correct]``; ``labels`` is one-hot N×K.

    Probabilities are clamped at 1e-12 before the log.
    """
    y = labels.data if isinstance(labels, Tensor) else np.asarray(labels, dtype=probs.data.dtype)
    if y.shape != probs.shape:
        raise DimensionError(f"labels {y.shape} do not match probs {probs.shape}")
    # non-finite rows are a divergence for the caller to report, not a contract breach
    if np.isfinite(probs.data).all() and not np.allclose(probs.data.sum(axis=1), 1.0, rtol=0, atol=1e-6):
        raise ContractError("cross_entropy expects rows of probs to sum to 1")
    if not np.all(y.sum(axis=1) == 1) or not np.all((y == 0) | (y == 1)):
        raise ContractError("cross_entropy expects exactly one label per row")
    n = probs.shape[0]
    clamped = np.maximum(probs.data, LOG_FLOOR)
    loss = -(y * np.log(clamped)).sum() / n

    def bw(g):
        live = probs.data >= LOG_FLOOR
        return (np.where(live, -g * y / (n * clamped), 0.0).astype(probs.data.dtype),)

    return _node(np.asarray(loss, dtype=probs.data.dtype), (probs,), bw, "cross_entropy")


def one_hot(labels, k: int = 2, dtype=DEFAULT_DTYPE) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.intp)
    out = np.zeros((labels.size, k), dtype=dtype)
    out[np.arange(labels.size), labels] = 1.0
    return out


def wgan_losses(critic_real: Tensor, critic_fake: Tensor) -> tuple[Tensor, Tensor]:
    """Wasserstein critic and generator losses.

    critic: ``mean(fake) - mean(real)``; generator: ``-mean(fake)``.
    """
    fake_mean = tensor_mean(critic_fake)
    critic_loss = add(fake_mean, scale(tensor_mean(critic_real), -1.0))
    generator_loss = scale(fake_mean, -1.0)
    return critic_loss, generator_loss


def mse(a: Tensor, b: Tensor) -> Tensor:
    d = add(a, scale(b, -1.0))
    return tensor_mean(mul(d, d))


# ---------------------------------------------------------------------------
# gradient reversal


@dataclass(frozen=True)
class GrlNode:
    lam: float

    def __post_init__(self):
        if not self.lam >= 0:
            raise ValueError(f"gradient reversal weight must be >= 0, got {self.lam}")

    def __call__(self, x: Tensor) -> Tensor:
        lam = self.lam
        # forward shares the input buffer, so the output is bit-identical
        return _node(x.data, (x,), lambda g: (g * (-lam),), "grad_reverse")


def grad_reverse(x: Tensor, lam: float) -> Tensor:
    """Identity forward; the backward pass multiplies gradients by ``-lam``."""
    return GrlNode(lam)(x)


# ---------------------------------------------------------------------------
# backward


@dataclass
class Graph:
    """Nodes reachable from a root, in insertion (creation) order."""

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def from_root(cls, root: Tensor) -> "Graph":
        seen: dict[int, Tensor] = {}
        stack = [root]
        while stack:
            t = stack.pop()
            if t._id in seen:
                continue
            seen[t._id] = t
            stack.extend(t._parents)
        return cls(sorted(seen.values(), key=lambda t: t._id))


def backward(loss: Tensor, check_finite: bool = True) -> dict[Tensor, np.ndarray]:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires_grad leaf.

    Returns a mapping from each such leaf to its gradient array.  Saved
    activations are kept, so the same graph can be differentiated again.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    graph = Graph.from_root(loss)
    grads: dict[int, np.ndarray] = {loss._id: np.ones_like(loss.data)}
    leaves: dict[Tensor, np.ndarray] = {}
    for node in reversed(graph.nodes):
        g = grads.pop(node._id, None)
        if g is None or not node.requires_grad:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            leaves[node] = node.grad
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if check_finite:
                _check_finite(pg, node.op)
            if parent._id in grads:
                grads[parent._id] = grads[parent._id] + pg
            else:
                grads[parent._id] = pg
    return leaves


def zero_grad(params) -> None:
    for p in params:
        p.grad = None


def numerical_grad(f: Callable[[], float], t: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f()`` w.r.t. every entry of ``t``."""
    out = np.zeros_like(t.data)
    flat = t.data.reshape(-1)
    gflat = out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return out


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """``||a - b|| / max(||a||, ||b||)``, 0 when both are zero."""
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    return float(np.linalg.norm(a - b) / denom) if denom > 0 else 0.0
