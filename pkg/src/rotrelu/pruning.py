"""Slope-threshold pruning.

A channel is pruned when ``|slope| < gamma``.  :func:`apply_mask_zero` only
zeroes the slopes; :func:`compact` removes the channel physically: the
producing filter (or weight column), its batch-norm entries and slope, and the
matching input slice of the consumer.  A channel that feeds a residual join
keeps its slot in the joined feature map because the skip still carries it;
only its production is removed.  If every channel feeding a join is pruned the
whole residual branch is dropped and the unit reduces to its skip path.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .data import Dataset
from .errors import InputError, StructuralError, UnsupportedStructureError
from .models import Model, ModelSpec
from .training import evaluate


@dataclass
class PruneMask:
    gamma: float
    layers: Dict[str, np.ndarray]  # True = pruned

    def count(self) -> int:
        return int(sum(m.sum() for m in self.layers.values()))

    def total(self) -> int:
        return int(sum(m.size for m in self.layers.values()))

    def to_json(self) -> str:
        return json.dumps({"gamma": _json_float(self.gamma),
                           "layers": {k: [bool(b) for b in v] for k, v in self.layers.items()}}, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "PruneMask":
        d = json.loads(text)
        return cls(float(d["gamma"]), {k: np.asarray(v, dtype=bool) for k, v in d["layers"].items()})


@dataclass
class GammaSearchResult:
    gamma: float
    base_accuracy: float
    accuracy: float
    candidates: List[Tuple[float, float, float]] = field(default_factory=list)  # (gamma, acc, fraction)
    final_accuracy: Optional[float] = None  # filled by the caller on the other half

    def to_json(self) -> str:
        return json.dumps({
            "gamma": _json_float(self.gamma),
            "base_accuracy": self.base_accuracy,
            "accuracy": self.accuracy,
            "final_accuracy": self.final_accuracy,
            "candidates": [{"gamma": _json_float(g), "accuracy": a, "fraction_pruned": f}
                           for g, a, f in self.candidates],
        }, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "GammaSearchResult":
        d = json.loads(text)
        return cls(float(d["gamma"]), d["base_accuracy"], d["accuracy"],
                   [(float(c["gamma"]), c["accuracy"], c["fraction_pruned"]) for c in d["candidates"]],
                   d.get("final_accuracy"))


def _json_float(x: float):
    return "inf" if x == float("inf") else x


# ---------------------------------------------------------------- structure

@dataclass
class ChannelLink:
    """Where the channels of one RReLU layer come from and go to."""
    act: int
    producer: int
    bn: Optional[int]
    consumer: int
    fork: Optional[int] = None  # set when the consumer is a join


def channel_links(spec: ModelSpec) -> Dict[str, ChannelLink]:
    layers = spec.layers
    links = {}
    for i, ld in enumerate(layers):
        if ld.kind != "act" or ld.mode != "rrelu":
            continue
        j, bn = i - 1, None
        while j >= 0 and layers[j].kind == "bn":
            bn = j
            j -= 1
        if j < 0 or layers[j].kind not in ("conv", "linear"):
            raise UnsupportedStructureError(f"{ld.name}: no conv/linear layer produces its input")
        c = i + 1
        while c < len(layers) and layers[c].kind == "pool":
            c += 1
        if c == len(layers) or layers[c].kind not in ("conv", "linear", "join"):
            raise UnsupportedStructureError(f"{ld.name}: output is not consumed by conv, linear or join")
        fork = None
        if layers[c].kind == "join":
            depth, f = 0, c - 1
            while f >= 0:
                if layers[f].kind == "join":
                    depth += 1
                elif layers[f].kind == "fork":
                    if depth == 0:
                        break
                    depth -= 1
                f -= 1
            fork = f
        links[ld.name] = ChannelLink(i, j, bn, c, fork)
    return links


def _check_mask(model: Model, mask: PruneMask) -> None:
    slopes = model.slopes()
    if set(mask.layers) != set(slopes):
        raise InputError(f"mask layers {sorted(mask.layers)} do not match RReLU layers {sorted(slopes)}")
    for name, m in mask.layers.items():
        if m.shape != slopes[name].shape:
            raise InputError(f"mask for {name} has length {m.shape}, layer has {slopes[name].shape}")


def removed_branches(spec: ModelSpec, mask: PruneMask) -> List[Tuple[int, int]]:
    """``(fork, join)`` index pairs of residual branches whose join input is fully pruned."""
    spans = []
    for name, link in channel_links(spec).items():
        if link.fork is not None and mask.layers[name].all():
            spans.append((link.fork, link.consumer))
    return spans


def check_survival(spec: ModelSpec, mask: PruneMask) -> List[Tuple[int, int]]:
    """Raise :class:`StructuralError` if ``mask`` empties a layer that cannot go away."""
    spans = removed_branches(spec, mask)
    links = channel_links(spec)
    inside = lambda i: any(f < i < j for f, j in spans)  # noqa: E731
    for name, link in links.items():
        if mask.layers[name].all() and link.fork is None and not inside(link.act):
            raise StructuralError(f"mask removes every channel of {name}, which has no skip path around it")
    if links and all(mask.layers[n].all() for n in links):
        raise StructuralError("mask removes every channel of every RReLU layer")
    return spans


# --------------------------------------------------------------- operations

def derive_mask(model: Model, gamma: float) -> PruneMask:
    return PruneMask(float(gamma), {k: np.abs(v) < gamma for k, v in model.slopes().items()})


def apply_mask_zero(model: Model, mask: PruneMask) -> Model:
    """Copy of ``model`` with the masked slopes set to exactly zero."""
    _check_mask(model, mask)
    out = model.copy()
    for name, m in mask.layers.items():
        out.params[f"{name}.slope"][m] = 0
    return out


def compact(model: Model, mask: PruneMask) -> Model:
    """Physically remove masked channels; the result computes the same function as the zeroed model."""
    _check_mask(model, mask)
    spec = model.spec
    spans = check_survival(spec, mask)
    links = channel_links(spec)
    layers = copy.deepcopy(spec.layers)
    params = {k: v.copy() for k, v in model.params.items()}
    buffers = {k: v.copy() for k, v in model.buffers.items()}
    drop = set()
    for f, j in spans:
        drop.update(range(f + 1, j))  # branch only; fork/join stay as a skip-only unit
        layers[j].index = []
    for name, link in links.items():
        if link.act in drop:
            continue
        keep = ~mask.layers[name]
        if keep.all():
            continue
        kept = int(keep.sum())
        prod = layers[link.producer]
        w = f"{prod.name}.weight"
        params[w] = params[w][keep] if prod.kind == "conv" else params[w][:, keep]
        if prod.bias:
            params[f"{prod.name}.bias"] = params[f"{prod.name}.bias"][keep]
        prod.c_out = kept
        if link.bn is not None:
            bn = layers[link.bn]
            for key in ("weight", "bias"):
                params[f"{bn.name}.{key}"] = params[f"{bn.name}.{key}"][keep]
            for key in ("running_mean", "running_var"):
                buffers[f"{bn.name}.{key}"] = buffers[f"{bn.name}.{key}"][keep]
            bn.c_out = kept
        params[f"{name}.slope"] = params[f"{name}.slope"][keep]
        layers[link.act].c_out = kept
        cons = layers[link.consumer]
        if cons.kind == "join":
            old = list(range(cons.c_out)) if cons.index is None else list(cons.index)
            cons.index = [p for p, k in zip(old, keep) if k]
        else:
            cw = f"{cons.name}.weight"
            params[cw] = params[cw][:, keep] if cons.kind == "conv" else params[cw][keep]
            cons.c_in = kept
    new_spec = ModelSpec([ld for i, ld in enumerate(layers) if i not in drop], spec.activation,
                         spec.num_classes, spec.input_shape, spec.name)
    out = Model(new_spec, model.dtype, model.bn_eps, model.bn_momentum)
    for store, src in ((out.params, params), (out.buffers, buffers)):
        for k in list(store):
            store[k] = np.ascontiguousarray(src[k])
    return out


def select_gamma(model: Model, heldout: Dataset, tolerance_pp: float) -> GammaSearchResult:
    """Largest threshold whose zeroed-slope accuracy stays within ``tolerance_pp`` of the unpruned one.

    Candidates are 0 and every distinct ``|slope|``; a candidate prunes the
    slopes strictly below it.  Candidates that would empty a layer with no
    skip path around it are skipped.  ``heldout`` is the selection half only;
    the final accuracy must be measured on data not used here.
    """
    if heldout is None or len(heldout) == 0:
        raise InputError("held-out set is empty")
    if tolerance_pp < 0:
        raise InputError("tolerance must be >= 0 percentage points")
    base = evaluate(model, heldout)
    mags = np.concatenate([np.abs(v).ravel() for v in model.slopes().values()]) \
        if model.slopes() else np.zeros(0)
    total = max(mags.size, 1)
    best = GammaSearchResult(0.0, base, base)
    table = [(0.0, base, 0.0)]
    for g in np.unique(mags):
        g = float(g)
        mask = derive_mask(model, g)
        try:
            check_survival(model.spec, mask)
        except StructuralError:
            continue
        acc = evaluate(apply_mask_zero(model, mask), heldout)
        table.append((g, acc, mask.count() / total))
        if acc >= base - tolerance_pp and g >= best.gamma:
            best = GammaSearchResult(g, base, acc)
    best.candidates = table
    return best


@dataclass
class EquivalenceReport:
    max_abs_diff: float
    tol: float
    n_samples: int

    @property
    def passed(self) -> bool:
        return self.max_abs_diff <= self.tol


def verify_equivalence(a: Model, b: Model, n_samples: int = 100, tol: float = 1e-5, seed=0,
                       inputs: Optional[np.ndarray] = None) -> EquivalenceReport:
    """Max absolute logit difference between two models on random inputs (eval-mode BN)."""
    if inputs is None:
        rng = np.random.default_rng(seed)
        inputs = rng.standard_normal((n_samples,) + a.spec.input_shape).astype(a.dtype)
    diff = float(np.max(np.abs(a.forward(inputs).astype(np.float64) - b.forward(inputs).astype(np.float64))))
    return EquivalenceReport(diff, tol, len(inputs))
