"""Dense tensors with tape-free reverse-mode autodiff on top of numpy.

Each :class:`Tensor` holds a numpy array, an optional gradient and a record of
the operation that produced it.  Calling :func:`backward` on a scalar walks the
recorded graph in reverse topological order.  Only the operations needed for
fully connected and residual convolutional networks are provided.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DegenerateBatchError, DimensionError, InputError

DEFAULT_DTYPE = np.float32


class Tensor:
    """An n-dimensional array node in the autodiff graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        parents: Sequence["Tensor"] = (),
        backward_fn: Optional[Callable[[np.ndarray], None]] = None,
        op: str = "leaf",
        dtype=None,
    ):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents = tuple(parents)
        self._backward = backward_fn
        self.op = op

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def _accumulate(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise DimensionError(f"gradient shape {g.shape} does not match value shape {self.data.shape}")
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad += g

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op})"

    def __add__(self, other):
        return add(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _result(data, parents, backward_fn, op) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=needs, parents=parents if needs else (),
                  backward_fn=backward_fn if needs else None, op=op)


def _topological(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, inputs: Optional[Sequence[Tensor]] = None):
    """Propagate d(loss)/d(node) to every node that requires a gradient.

    If ``inputs`` is given, their gradients are returned as a list; leaves that
    the loss does not depend on get an all-zero gradient.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    order = _topological(loss)
    for node in order:
        if node._parents:
            node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    if inputs is None:
        return None
    return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in inputs]


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"add requires identical shapes, got {a.shape} and {b.shape}")
    out = a.data + b.data

    def bw(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(g)

    return _result(out, (a, b), bw, "add")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"mul requires identical shapes, got {a.shape} and {b.shape}")
    out = a.data * b.data

    def bw(g):
        if a.requires_grad:
            a._accumulate(g * b.data)
        if b.requires_grad:
            b._accumulate(g * a.data)

    return _result(out, (a, b), bw, "mul")


def relu(x) -> Tensor:
    x = as_tensor(x)
    pos = x.data > 0
    out = np.where(pos, x.data, 0).astype(x.dtype, copy=False)

    def bw(g):
        x._accumulate(g * pos)

    return _result(out, (x,), bw, "relu")


def tsum(x) -> Tensor:
    x = as_tensor(x)
    out = np.asarray(x.data.sum(), dtype=x.dtype)

    def bw(g):
        x._accumulate(np.broadcast_to(g, x.shape).astype(x.dtype))

    return _result(out, (x,), bw, "sum")


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    out = x.data.reshape(shape)

    def bw(g):
        x._accumulate(g.reshape(x.shape))

    return _result(out, (x,), bw, "reshape")


def flatten(x) -> Tensor:
    x = as_tensor(x)
    return reshape(x, (x.shape[0], -1))


# ------------------------------------------------------------------- products

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    out = a.data @ b.data

    def bw(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return _result(out, (a, b), bw, "matmul")


def linear(x, w, bias=None) -> Tensor:
    """``x @ w (+ bias)`` with ``w`` stored as (in_features, out_features)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise DimensionError(f"linear shape mismatch: input {x.shape}, weight {w.shape}")
    out = x.data @ w.data
    parents = [x, w]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (w.shape[1],):
            raise DimensionError(f"bias shape {bias.shape} does not match weight {w.shape}")
        out = out + bias.data
        parents.append(bias)

    def bw(g):
        if x.requires_grad:
            x._accumulate(g @ w.data.T)
        if w.requires_grad:
            w._accumulate(x.data.T @ g)
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=0))

    return _result(out, tuple(parents), bw, "linear")


def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _im2col(x: np.ndarray, k: int, stride: int, pad: int) -> np.ndarray:
    """(N, C, H, W) -> (N, C*k*k, H'*W'), channel-major within a patch."""
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c, ho, wo = win.shape[:4]
    return np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(n, c * k * k, ho * wo)


def conv2d(x, filters, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of (N, C_in, H, W) input with (C_out, C_in, k, k) filters.

    A 3-D (C_in, H, W) input is treated as a batch of one and the result is
    returned without the batch axis.
    """
    x, filters = as_tensor(x), as_tensor(filters)
    if x.ndim == 3:
        batched = conv2d(reshape(x, (1,) + x.shape), filters, stride, pad)
        return reshape(batched, batched.shape[1:])
    if x.ndim != 4 or filters.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and filters, got {x.shape} and {filters.shape}")
    n, c_in, h, w = x.shape
    c_out, f_in, k, k2 = filters.shape
    if f_in != c_in:
        raise DimensionError(f"conv2d channel mismatch: input {x.shape}, filters {filters.shape}")
    if k != k2:
        raise DimensionError(f"conv2d needs square filters, got {filters.shape}")
    if stride < 1 or pad < 0 or k > h + 2 * pad or k > w + 2 * pad:
        raise DimensionError(f"conv2d kernel {k} does not fit input {x.shape} with pad {pad}")
    cols = _im2col(x.data, k, stride, pad)
    ho, wo = conv_output_size(h, k, stride, pad), conv_output_size(w, k, stride, pad)
    wmat = filters.data.reshape(c_out, -1)
    out = np.matmul(wmat, cols).reshape(n, c_out, ho, wo)

    def bw(g):
        gm = np.ascontiguousarray(g).reshape(n, c_out, ho * wo)
        if filters.requires_grad:
            gw = np.matmul(gm, cols.transpose(0, 2, 1)).sum(axis=0)
            filters._accumulate(gw.reshape(filters.shape))
        if x.requires_grad:
            # scatter each kernel tap back with one batched (c_in x c_out) product
            dx = np.zeros((n, c_in, h + 2 * pad, w + 2 * pad), dtype=x.dtype)
            wt = np.ascontiguousarray(filters.data.transpose(2, 3, 1, 0))  # (k, k, c_in, c_out)
            for i in range(k):
                for j in range(k):
                    tap = np.matmul(wt[i, j], gm).reshape(n, c_in, ho, wo)
                    dx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += tap
            if pad:
                dx = dx[:, :, pad:-pad, pad:-pad]
            x._accumulate(np.ascontiguousarray(dx))

    return _result(out, (x, filters), bw, "conv2d")


# ---------------------------------------------------------------- normalizers

def batchnorm2d(x, weight, bias, running_mean: np.ndarray, running_var: np.ndarray,
                train: bool, eps: float = 1e-5, momentum: float = 0.1) -> Tensor:
    """Per-channel batch normalization over (N, H, W).

    In train mode the batch statistics are used and ``running_mean`` /
    ``running_var`` are updated in place (unbiased variance for the running
    estimate).  In eval mode the running statistics are used.
    """
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if x.ndim != 4:
        raise DimensionError(f"batchnorm2d expects (N, C, H, W), got {x.shape}")
    c = x.shape[1]
    for name, p in (("weight", weight.data), ("bias", bias.data),
                    ("running_mean", running_mean), ("running_var", running_var)):
        if p.shape != (c,):
            raise DimensionError(f"batchnorm2d {name} has shape {p.shape}, expected ({c},)")
    m = x.shape[0] * x.shape[2] * x.shape[3]
    shape = (1, c, 1, 1)
    if train:
        if m < 2:
            raise DegenerateBatchError(f"batchnorm2d needs N*H*W >= 2 in train mode, got {m}")
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        running_mean *= 1 - momentum
        running_mean += momentum * mean
        running_var *= 1 - momentum
        running_var += momentum * var * m / (m - 1)
    else:
        mean, var = running_mean, running_var
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - mean.reshape(shape).astype(x.dtype)) * inv_std.reshape(shape)
    out = xhat * weight.data.reshape(shape) + bias.data.reshape(shape)

    def bw(g):
        if weight.requires_grad:
            weight._accumulate((g * xhat).sum(axis=(0, 2, 3)))
        if bias.requires_grad:
            bias._accumulate(g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            gx = g * weight.data.reshape(shape)
            if train:
                gmean = gx.mean(axis=(0, 2, 3), keepdims=True)
                gdot = (gx * xhat).mean(axis=(0, 2, 3), keepdims=True)
                dx = (gx - gmean - xhat * gdot) * inv_std.reshape(shape)
            else:
                dx = gx * inv_std.reshape(shape)
            x._accumulate(dx)

    return _result(out.astype(x.dtype, copy=False), (x, weight, bias), bw, "batchnorm2d")


# --------------------------------------------------------------- pooling/loss

def global_avg_pool(x) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 4:
        raise DimensionError(f"global_avg_pool expects (N, C, H, W), got {x.shape}")
    hw = x.shape[2] * x.shape[3]
    out = x.data.mean(axis=(2, 3))

    def bw(g):
        x._accumulate(np.broadcast_to(g[:, :, None, None] / hw, x.shape).astype(x.dtype))

    return _result(out, (x,), bw, "global_avg_pool")


_PROB_FLOOR = 1e-20  # far below float32 resolution next to the true-class term


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Mean softmax cross-entropy of (N, K) logits against integer labels."""
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"logits {logits.shape} and labels {labels.shape} do not agree")
    n, k = logits.shape
    if n == 0:
        raise InputError("empty batch")
    if labels.min() < 0 or labels.max() >= k:
        raise InputError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    rows = np.arange(n)
    out = np.asarray(-logp[rows, labels].mean(), dtype=logits.dtype)

    def bw(g):
        p = np.exp(logp)
        # once a batch is fit, wrong-class probabilities reach the float32 subnormal
        # range and every matmul downstream of them slows by two orders of magnitude
        p[p < _PROB_FLOOR] = 0
        p[rows, labels] -= 1
        logits._accumulate((p * (g / n)).astype(logits.dtype))

    return _result(out, (logits,), bw, "softmax_cross_entropy")


# ------------------------------------------------------------ residual plumbing

def shortcut(x, stride: int, out_channels: int) -> Tensor:
    """Parameter-free skip path: spatial subsampling plus zero channel padding."""
    x = as_tensor(x)
    n, c, h, w = x.shape
    if out_channels < c:
        raise DimensionError(f"shortcut cannot shrink {c} channels to {out_channels}")
    if stride == 1 and out_channels == c:
        return x
    sub = x.data[:, :, ::stride, ::stride]
    out = np.zeros((n, out_channels) + sub.shape[2:], dtype=x.dtype)
    out[:, :c] = sub

    def bw(g):
        dx = np.zeros_like(x.data)
        dx[:, :, ::stride, ::stride] = g[:, :c]
        x._accumulate(dx)

    return _result(out, (x,), bw, "shortcut")


def scatter_add(base, branch, index: Optional[Sequence[int]] = None) -> Tensor:
    """``base`` with ``branch`` channels added at positions ``index`` (axis 1).

    ``index=None`` means a full-width join and is the same as :func:`add`.
    """
    base, branch = as_tensor(base), as_tensor(branch)
    if index is None:
        return add(base, branch)
    idx = np.asarray(index, dtype=np.intp)
    if branch.shape[1] != len(idx) or branch.shape[:1] + branch.shape[2:] != base.shape[:1] + base.shape[2:]:
        raise DimensionError(f"cannot join branch {branch.shape} into {base.shape} at {len(idx)} channels")
    out = base.data.copy()
    out[:, idx] += branch.data

    def bw(g):
        if base.requires_grad:
            base._accumulate(g)
        if branch.requires_grad:
            branch._accumulate(np.ascontiguousarray(g[:, idx]))

    return _result(out, (base, branch), bw, "scatter_add")
