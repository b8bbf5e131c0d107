"""Rotated ReLU activations.

The canonical form used in training graphs is ``h = b * max(0, x)`` with one
trainable slope per output channel.  The general form ``b * max(0, a * x)``
with ``a`` in {+1, -1} is kept for checks; :func:`canonicalize` folds the sign
``a`` into the weights that produce ``x``.
"""

from __future__ import annotations

from typing import Optional, Tuple

import numpy as np

from .errors import ContractError, DimensionError, UnsupportedStructureError
from .tensor import Tensor, _result, as_tensor


def _channel_axis(x: np.ndarray) -> int:
    return 1 if x.ndim >= 2 else 0


def _broadcast_slopes(b: np.ndarray, x: np.ndarray) -> np.ndarray:
    b = np.asarray(b)
    if x.ndim == 0:
        if b.size != 1:
            raise DimensionError(f"scalar input needs a single slope, got {b.shape}")
        return b.reshape(())
    axis = _channel_axis(x)
    if b.ndim != 1 or b.shape[0] != x.shape[axis]:
        raise DimensionError(
            f"slope vector of length {b.shape} does not match {x.shape[axis]} channels of input {x.shape}")
    shape = [1] * x.ndim
    shape[axis] = b.shape[0]
    return b.reshape(shape)


def _reduce_to_channels(v: np.ndarray) -> np.ndarray:
    if v.ndim == 0:
        return v.reshape(1)
    if v.ndim == 1:
        return v
    return v.sum(axis=tuple(i for i in range(v.ndim) if i != 1))


def rrelu_forward(x, b) -> np.ndarray:
    """``b[i] * max(0, x[:, i, ...])`` with the channel axis at 1 (0 for 1-D input)."""
    x = np.asarray(x)
    return _broadcast_slopes(b, x) * np.maximum(x, 0)


def rrelu_general_forward(x, a, b) -> np.ndarray:
    """``b[i] * max(0, a[i] * x[:, i, ...])`` with ``a`` restricted to +1/-1."""
    x = np.asarray(x)
    a = np.asarray(a)
    if not np.all((a == 1) | (a == -1)):
        raise ContractError(f"sign vector entries must be +1 or -1, got {np.unique(a)}")
    return _broadcast_slopes(b, x) * np.maximum(_broadcast_slopes(a, x).astype(x.dtype) * x, 0)


def rrelu_backward(upstream, x, b) -> Tuple[np.ndarray, np.ndarray]:
    """Gradients of :func:`rrelu_forward` with respect to ``x`` and ``b``.

    The subgradient at ``x == 0`` is taken as zero.
    """
    x = np.asarray(x)
    upstream = np.asarray(upstream)
    if upstream.shape != x.shape:
        raise DimensionError(f"upstream {upstream.shape} does not match input {x.shape}")
    bb = _broadcast_slopes(b, x)
    pos = x > 0
    grad_x = bb * pos * upstream
    grad_b = _reduce_to_channels(np.where(pos, x, 0) * upstream)
    return grad_x.astype(x.dtype, copy=False), grad_b.astype(np.asarray(b).dtype, copy=False)


def rrelu(x, b) -> Tensor:
    """Differentiable canonical RReLU on the autodiff graph."""
    x, b = as_tensor(x), as_tensor(b)
    out = rrelu_forward(x.data, b.data).astype(x.dtype, copy=False)

    def bw(g):
        gx, gb = rrelu_backward(g, x.data, b.data)
        if x.requires_grad:
            x._accumulate(gx)
        if b.requires_grad:
            b._accumulate(gb.reshape(b.shape))

    return _result(out, (x, b), bw, "rrelu")


def canonicalize(a, b, weights, channel_axis: Optional[int] = None,
                 bn: Optional[Tuple[np.ndarray, np.ndarray]] = None):
    """Rewrite a general-form layer ``b * max(0, a * x)`` in canonical form.

    ``weights`` is the linear map producing ``x``: an (in, out) matrix for a
    fully connected layer or (c_out, c_in, k, k) filters for a convolution.
    Where ``a[i] == -1`` the i-th output channel of that map is negated, which
    gives ``max(0, -x) == max(0, x')``.  If a batch-norm sits between the map and
    the activation, pass its affine ``(weight, bias)`` as ``bn``; the sign is
    then folded into the affine parameters instead, since negating the filters
    would be undone by the normalization.

    Returns ``(b, weights')`` or ``(b, weights', (bn_weight', bn_bias'))``.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if not np.all((a == 1) | (a == -1)):
        raise ContractError(f"sign vector entries must be +1 or -1, got {np.unique(a)}")
    w = np.asarray(weights)
    if channel_axis is None:
        if w.ndim == 2:
            channel_axis = 1
        elif w.ndim == 4:
            channel_axis = 0
        else:
            raise UnsupportedStructureError(
                f"cannot absorb sign into weights of shape {w.shape}; expected a matrix or conv filters")
    if w.shape[channel_axis] != a.shape[0] or b.shape != a.shape:
        raise DimensionError(f"sign/slope length {a.shape} does not match weights {w.shape}")
    if bn is not None:
        gamma, beta = (np.asarray(p).copy() for p in bn)
        gamma *= a
        beta *= a
        return b.copy(), w.copy(), (gamma, beta)
    shape = [1] * w.ndim
    shape[channel_axis] = a.shape[0]
    return b.copy(), w * a.reshape(shape).astype(w.dtype)
