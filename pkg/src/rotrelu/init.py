"""Parameter initialization: Kaiming weights, truncated-GMM slopes, warm start from ReLU."""

from __future__ import annotations

import math
from typing import Union

import numpy as np

from .errors import CheckpointIncompatibleError, ContractError
from .models import Model, load_checkpoint

SLOPE_LOW = math.tan(math.radians(35.0))
SLOPE_HIGH = math.tan(math.radians(55.0))
GMM_MEANS = (1.0, -1.0)
GMM_VARIANCE = 3.0


def kaiming_init(shape, fan_in: int, seed=None, dtype=np.float32) -> np.ndarray:
    """Zero-mean normal samples with std ``sqrt(2 / fan_in)``."""
    if fan_in < 1:
        raise ContractError(f"fan_in must be >= 1, got {fan_in}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return (rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)).astype(dtype)


def sample_truncated_gmm(n: int, seed=None, dtype=np.float32) -> np.ndarray:
    """Draw slopes from the two-component truncated mixture.

    Each sample picks a component with probability 1/2, then rejection-samples
    ``Normal(+-1, variance 3)`` until the draw falls in that component's
    interval ``[tan 35deg, tan 55deg]`` (mirrored for the negative component).
    """
    if n < 0:
        raise ContractError(f"n must be >= 0, got {n}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    sign = np.where(rng.random(n) < 0.5, 1.0, -1.0)
    std = math.sqrt(GMM_VARIANCE)
    out = np.empty(n)
    todo = np.arange(n)
    while todo.size:
        # sample the positive component's magnitude, then mirror
        draw = rng.normal(GMM_MEANS[0], std, size=todo.size)
        ok = (draw >= SLOPE_LOW) & (draw <= SLOPE_HIGH)
        out[todo[ok]] = draw[ok]
        todo = todo[~ok]
    return (sign * out).astype(dtype)


def _fan_in(shape) -> int:
    if len(shape) == 2:  # linear (in, out)
        return shape[0]
    return int(np.prod(shape[1:]))  # conv (c_out, c_in, k, k)


def init_type1(model: Model, seed=0) -> Model:
    """Train-from-scratch initialization, in place.

    Conv/linear weights get Kaiming normal draws, biases zero, batch-norm
    scale 1 / shift 0 with fresh running statistics, and every RReLU slope a
    truncated-GMM draw.  Layers that use a plain ReLU have no slopes to set.
    """
    rng = np.random.default_rng(seed)
    for ld in model.spec.layers:
        if ld.kind in ("linear", "conv"):
            w = model.params[f"{ld.name}.weight"]
            model.params[f"{ld.name}.weight"] = kaiming_init(w.shape, _fan_in(w.shape), rng, model.dtype)
            if ld.bias:
                model.params[f"{ld.name}.bias"][:] = 0
        elif ld.kind == "bn":
            model.params[f"{ld.name}.weight"][:] = 1
            model.params[f"{ld.name}.bias"][:] = 0
            model.buffers[f"{ld.name}.running_mean"][:] = 0
            model.buffers[f"{ld.name}.running_var"][:] = 1
        elif ld.kind == "act" and ld.mode == "rrelu":
            model.params[f"{ld.name}.slope"] = sample_truncated_gmm(ld.c_out, rng, model.dtype)
    return model


def init_type2(model: Model, pretrained: Union[Model, str]) -> Model:
    """Warm start, in place: copy weights and BN state from a ReLU network, set slopes to 1.

    ``pretrained`` is a :class:`Model` or a checkpoint directory.  Every
    non-slope tensor of ``model`` must exist in the source with the same shape.
    """
    src = load_checkpoint(pretrained) if isinstance(pretrained, str) else pretrained
    src_state = src.state()
    for store in (model.params, model.buffers):
        for name, arr in store.items():
            if name.endswith(".slope"):
                continue
            other = src_state.get(name)
            if other is None or other.shape != arr.shape:
                layer = name.rsplit(".", 1)[0]
                got = None if other is None else other.shape
                raise CheckpointIncompatibleError(
                    f"layer {layer}: pretrained {name} has shape {got}, model needs {arr.shape}")
    for store in (model.params, model.buffers):
        for name in store:
            if name.endswith(".slope"):
                store[name] = np.ones_like(store[name])
            else:
                store[name] = src_state[name].astype(model.dtype, copy=True)
    return model
