"""Declarative network descriptions, the evaluator that runs them, and checkpoints.

A :class:`ModelSpec` is a flat list of :class:`LayerDef`.  Residual units are
written as ``fork ... join``: ``fork`` remembers the current feature map,
``join`` adds the branch output back onto the (possibly subsampled and
zero-padded) remembered map.  Joins carry an optional channel ``index`` so a
branch whose producer lost channels to pruning can still be added into the
full-width feature map.
"""

from __future__ import annotations

import copy
import json
import os
from dataclasses import asdict, dataclass
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .errors import (
    CheckpointIncompatibleError,
    ContractError,
    CorruptManifestError,
    DimensionError,
    TruncatedBlobError,
)
from .layers import rrelu

FORMAT_VERSION = 1
LAYER_KINDS = ("flatten", "linear", "conv", "bn", "act", "fork", "join", "pool")


@dataclass
class LayerDef:
    kind: str
    name: str
    c_in: int = 0
    c_out: int = 0
    k: int = 0
    stride: int = 1
    pad: int = 0
    bias: bool = False
    mode: str = ""  # act: relu | rrelu | none
    index: Optional[List[int]] = None  # join: branch channel positions

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ContractError(f"unknown layer kind {self.kind!r}")
        if self.kind == "conv" and (self.k < 1 or self.stride < 1 or self.pad < 0):
            raise ContractError(f"conv {self.name}: kernel/stride must be positive, pad non-negative")
        if self.kind == "act" and self.mode not in ("relu", "rrelu", "none"):
            raise ContractError(f"act {self.name}: unknown mode {self.mode!r}")

    @property
    def branch_channels(self) -> int:
        """Number of channels a join receives from its branch."""
        return self.c_out if self.index is None else len(self.index)


@dataclass
class ModelSpec:
    layers: List[LayerDef]
    activation: str
    num_classes: int
    input_shape: Tuple[int, ...]
    name: str = ""

    def __post_init__(self):
        self.input_shape = tuple(self.input_shape)
        self.infer_shapes()

    def layer(self, name: str) -> LayerDef:
        for ld in self.layers:
            if ld.name == name:
                return ld
        raise KeyError(name)

    def index_of(self, name: str) -> int:
        for i, ld in enumerate(self.layers):
            if ld.name == name:
                return i
        raise KeyError(name)

    def rrelu_layers(self) -> List[LayerDef]:
        return [ld for ld in self.layers if ld.kind == "act" and ld.mode == "rrelu"]

    def infer_shapes(self) -> List[Tuple[int, ...]]:
        """Per-sample output shape of every layer; raises if the layers do not chain."""
        shape = self.input_shape
        stack = []
        shapes = []
        for ld in self.layers:
            if ld.kind == "flatten":
                shape = (int(np.prod(shape)),)
            elif ld.kind == "linear":
                if shape != (ld.c_in,):
                    raise DimensionError(f"{ld.name}: expects ({ld.c_in},) input, got {shape}")
                shape = (ld.c_out,)
            elif ld.kind == "conv":
                if len(shape) != 3 or shape[0] != ld.c_in:
                    raise DimensionError(f"{ld.name}: expects {ld.c_in} input channels, got {shape}")
                h = T.conv_output_size(shape[1], ld.k, ld.stride, ld.pad)
                w = T.conv_output_size(shape[2], ld.k, ld.stride, ld.pad)
                if h < 1 or w < 1:
                    raise DimensionError(f"{ld.name}: kernel does not fit input {shape}")
                shape = (ld.c_out, h, w)
            elif ld.kind in ("bn", "act"):
                if shape[0] != ld.c_out:
                    raise DimensionError(f"{ld.name}: expects {ld.c_out} channels, got {shape}")
            elif ld.kind == "fork":
                stack.append(shape)
            elif ld.kind == "join":
                if not stack:
                    raise DimensionError(f"{ld.name}: join without matching fork")
                skip = stack.pop()
                if skip[0] != ld.c_in:
                    raise DimensionError(f"{ld.name}: skip carries {skip[0]} channels, expected {ld.c_in}")
                out = (ld.c_out, -(-skip[1] // ld.stride), -(-skip[2] // ld.stride))
                # a join with an empty branch has nothing between fork and join
                if ld.branch_channels:
                    if shape[0] != ld.branch_channels or shape[1:] != out[1:]:
                        raise DimensionError(f"{ld.name}: branch {shape} cannot join skip {out}")
                    if ld.index is not None and (min(ld.index) < 0 or max(ld.index) >= ld.c_out
                                                 or len(set(ld.index)) != len(ld.index)):
                        raise DimensionError(f"{ld.name}: bad join index")
                shape = out
            elif ld.kind == "pool":
                shape = (shape[0],)
            shapes.append(shape)
        if stack:
            raise DimensionError("unterminated fork")
        if shape != (self.num_classes,):
            raise DimensionError(f"network output {shape} does not match {self.num_classes} classes")
        return shapes

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "activation": self.activation,
            "num_classes": self.num_classes,
            "input_shape": list(self.input_shape),
            "layers": [asdict(ld) for ld in self.layers],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(
            layers=[LayerDef(**ld) for ld in d["layers"]],
            activation=d["activation"],
            num_classes=d["num_classes"],
            input_shape=tuple(d["input_shape"]),
            name=d.get("name", ""),
        )


# ------------------------------------------------------------------ builders

def build_fcnn(input_dim: int, hidden_dims: Sequence[int], num_classes: int,
               activation: str = "rrelu") -> ModelSpec:
    """Bias-free hidden linear layers, each followed by the activation, then a biased classifier."""
    layers = [LayerDef("flatten", "flatten")]
    prev = input_dim
    for i, h in enumerate(hidden_dims, start=1):
        layers.append(LayerDef("linear", f"fc{i}", c_in=prev, c_out=h))
        layers.append(LayerDef("act", f"act{i}", c_out=h, mode=activation))
        prev = h
    layers.append(LayerDef("linear", f"fc{len(hidden_dims) + 1}", c_in=prev, c_out=num_classes, bias=True))
    dims = "-".join(str(d) for d in [input_dim, *hidden_dims, num_classes])
    return ModelSpec(layers, activation, num_classes, (input_dim,), name=f"fcnn-{dims}")


def _residual_net(widths: Sequence[int], units: int, stem: int, num_classes: int,
                  activation: str, in_channels: int, input_size: int, name: str) -> ModelSpec:
    layers = [
        LayerDef("conv", "conv0", c_in=in_channels, c_out=stem, k=3, stride=1, pad=1),
        LayerDef("bn", "bn0", c_out=stem),
        # the stem keeps a plain ReLU in every variant
        LayerDef("act", "act0", c_out=stem, mode="relu"),
    ]
    prev = stem
    for s, width in enumerate(widths, start=1):
        for u in range(1, units + 1):
            stride = 2 if (s > 1 and u == 1) else 1
            p = f"s{s}u{u}"
            layers += [
                LayerDef("fork", f"{p}.fork"),
                LayerDef("conv", f"{p}.conv1", c_in=prev, c_out=width, k=3, stride=stride, pad=1),
                LayerDef("bn", f"{p}.bn1", c_out=width),
                LayerDef("act", f"{p}.act1", c_out=width, mode=activation),
                LayerDef("conv", f"{p}.conv2", c_in=width, c_out=width, k=3, stride=1, pad=1),
                LayerDef("bn", f"{p}.bn2", c_out=width),
                LayerDef("act", f"{p}.act2", c_out=width, mode=activation),
                LayerDef("join", f"{p}.join", c_in=prev, c_out=width, stride=stride),
            ]
            prev = width
    layers += [
        LayerDef("pool", "pool"),
        LayerDef("linear", "fc", c_in=prev, c_out=num_classes, bias=True),
    ]
    return ModelSpec(layers, activation, num_classes, (in_channels, input_size, input_size), name=name)


def build_resnet(units_per_block: int, widths: Sequence[int] = (16, 32, 64), num_classes: int = 10,
                 activation: str = "rrelu", in_channels: int = 3, input_size: int = 32) -> ModelSpec:
    """CIFAR-style ResNet with ``units_per_block`` two-conv units per stage (3 -> ResNet-20)."""
    if units_per_block < 1:
        raise ContractError("units_per_block must be >= 1")
    depth = 2 * units_per_block * len(widths) + 2
    return _residual_net(widths, units_per_block, widths[0], num_classes, activation,
                         in_channels, input_size, f"resnet-{depth}")


def build_wrn(depth: int, widen_factor: int, num_classes: int = 10, activation: str = "rrelu",
              in_channels: int = 3, input_size: int = 32) -> ModelSpec:
    """WideResNet-depth-widen: 16-channel stem, stages of 16w/32w/64w channels."""
    if depth < 10 or (depth - 4) % 6:
        raise ContractError(f"WRN depth must satisfy (depth - 4) % 6 == 0, got {depth}")
    units = (depth - 4) // 6
    widths = [16 * widen_factor, 32 * widen_factor, 64 * widen_factor]
    return _residual_net(widths, units, 16, num_classes, activation, in_channels, input_size,
                         f"wrn-{depth}-{widen_factor}")


def parse_model_name(name: str, num_classes: int = 10, in_channels: int = 3, input_size: int = 32,
                     activation: str = "rrelu") -> ModelSpec:
    """``fcnn-784-500-10``, ``resnet-20``, ``wrn-16-4`` or ``resnet-<u>x<w1>,<w2>,..`` (toy)."""
    parts = name.split("-")
    if parts[0] == "fcnn" and len(parts) >= 3:
        dims = [int(p) for p in parts[1:]]
        return build_fcnn(dims[0], dims[1:-1], dims[-1], activation)
    if parts[0] == "resnet" and len(parts) == 2:
        if "x" in parts[1]:
            u, ws = parts[1].split("x")
            widths = [int(w) for w in ws.split(",")]
            spec = build_resnet(int(u), widths, num_classes, activation, in_channels, input_size)
            spec.name = name
            return spec
        depth = int(parts[1])
        if (depth - 2) % 6:
            raise ContractError(f"ResNet depth must be 6n+2, got {depth}")
        return build_resnet((depth - 2) // 6, (16, 32, 64), num_classes, activation, in_channels, input_size)
    if parts[0] == "wrn" and len(parts) == 3:
        return build_wrn(int(parts[1]), int(parts[2]), num_classes, activation, in_channels, input_size)
    raise ContractError(f"unrecognised model name {name!r}")


# ------------------------------------------------------------------- model

def _param_shapes(ld: LayerDef) -> Dict[str, Tuple[int, ...]]:
    if ld.kind == "linear":
        d = {f"{ld.name}.weight": (ld.c_in, ld.c_out)}
        if ld.bias:
            d[f"{ld.name}.bias"] = (ld.c_out,)
        return d
    if ld.kind == "conv":
        return {f"{ld.name}.weight": (ld.c_out, ld.c_in, ld.k, ld.k)}
    if ld.kind == "bn":
        return {f"{ld.name}.weight": (ld.c_out,), f"{ld.name}.bias": (ld.c_out,)}
    if ld.kind == "act" and ld.mode == "rrelu":
        return {f"{ld.name}.slope": (ld.c_out,)}
    return {}


def _buffer_shapes(ld: LayerDef) -> Dict[str, Tuple[int, ...]]:
    if ld.kind == "bn":
        return {f"{ld.name}.running_mean": (ld.c_out,), f"{ld.name}.running_var": (ld.c_out,)}
    return {}


def param_group(spec: ModelSpec, name: str) -> str:
    """``weight`` (conv/linear filters), ``bias``, ``bn`` (affine) or ``slope``."""
    layer, field_ = name.rsplit(".", 1)
    kind = spec.layer(layer).kind
    if kind == "act":
        return "slope"
    if kind == "bn":
        return "bn"
    return "weight" if field_ == "weight" else "bias"


class Model:
    """A :class:`ModelSpec` plus its parameters and batch-norm statistics.

    Parameters live in ``params`` and running statistics in ``buffers``, both
    dicts of numpy arrays keyed ``"<layer>.<field>"``.  A fresh model has
    zero weights, unit BN scale and unit slopes; see :mod:`rotrelu.init`.
    """

    def __init__(self, spec: ModelSpec, dtype=np.float32, bn_eps: float = 1e-5, bn_momentum: float = 0.1):
        self.spec = spec
        self.dtype = np.dtype(dtype)
        self.bn_eps = bn_eps
        self.bn_momentum = bn_momentum
        self.params: Dict[str, np.ndarray] = {}
        self.buffers: Dict[str, np.ndarray] = {}
        for ld in spec.layers:
            for name, shape in _param_shapes(ld).items():
                fill = 1.0 if (name.endswith(".slope") or (ld.kind == "bn" and name.endswith(".weight"))) else 0.0
                self.params[name] = np.full(shape, fill, dtype=self.dtype)
            for name, shape in _buffer_shapes(ld).items():
                fill = 1.0 if name.endswith("running_var") else 0.0
                self.buffers[name] = np.full(shape, fill, dtype=self.dtype)

    # state helpers ---------------------------------------------------------
    def state(self) -> Dict[str, np.ndarray]:
        return {**self.params, **self.buffers}

    def copy(self) -> "Model":
        m = Model.__new__(Model)
        m.spec = copy.deepcopy(self.spec)
        m.dtype = self.dtype
        m.bn_eps, m.bn_momentum = self.bn_eps, self.bn_momentum
        m.params = {k: v.copy() for k, v in self.params.items()}
        m.buffers = {k: v.copy() for k, v in self.buffers.items()}
        return m

    def astype(self, dtype) -> "Model":
        m = self.copy()
        m.dtype = np.dtype(dtype)
        m.params = {k: v.astype(dtype) for k, v in m.params.items()}
        m.buffers = {k: v.astype(dtype) for k, v in m.buffers.items()}
        return m

    def slopes(self) -> Dict[str, np.ndarray]:
        return {ld.name: self.params[f"{ld.name}.slope"] for ld in self.spec.rrelu_layers()}

    def num_parameters(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    # evaluation ------------------------------------------------------------
    def forward_graph(self, x, train: bool = False, trainable: Optional[Iterable[str]] = None,
                      counter=None):
        """Run the network on the autodiff graph.

        Returns ``(logits, leaves)`` where ``leaves`` maps each name in
        ``trainable`` to the leaf :class:`~rotrelu.tensor.Tensor` whose
        ``grad`` receives d(loss)/d(param) after :func:`~rotrelu.tensor.backward`.
        ``counter`` (optional) receives ``counter(layer, kind, **shapes)``
        calls describing the arithmetic each layer executed.
        """
        trainable = set(trainable or ())
        leaves = {}

        def p(name):
            if name in trainable:
                t = T.Tensor(self.params[name], requires_grad=True)
                leaves[name] = t
                return t
            return T.Tensor(self.params[name])

        h = T.as_tensor(np.asarray(x, dtype=self.dtype))
        stack = []
        for ld in self.spec.layers:
            if ld.kind == "flatten":
                h = T.flatten(h)
            elif ld.kind == "linear":
                bias = p(f"{ld.name}.bias") if ld.bias else None
                h = T.linear(h, p(f"{ld.name}.weight"), bias)
                if counter:
                    counter(ld, "linear", x=h.shape, w=self.params[f"{ld.name}.weight"].shape, bias=ld.bias)
            elif ld.kind == "conv":
                xin = h
                h = T.conv2d(h, p(f"{ld.name}.weight"), ld.stride, ld.pad)
                if counter:
                    counter(ld, "conv", x=xin.shape, w=self.params[f"{ld.name}.weight"].shape, out=h.shape)
            elif ld.kind == "bn":
                h = T.batchnorm2d(h, p(f"{ld.name}.weight"), p(f"{ld.name}.bias"),
                                  self.buffers[f"{ld.name}.running_mean"],
                                  self.buffers[f"{ld.name}.running_var"],
                                  train, self.bn_eps, self.bn_momentum)
            elif ld.kind == "act":
                if ld.mode == "rrelu":
                    h = rrelu(h, p(f"{ld.name}.slope"))
                elif ld.mode == "relu":
                    h = T.relu(h)
            elif ld.kind == "fork":
                stack.append(h)
            elif ld.kind == "join":
                skip = T.shortcut(stack.pop(), ld.stride, ld.c_out)
                if ld.branch_channels:
                    h = T.scatter_add(skip, h, ld.index)
                    if counter:
                        counter(ld, "join", branch=h.shape[:1] + (ld.branch_channels,) + h.shape[2:])
                else:
                    h = skip
            elif ld.kind == "pool":
                h = T.global_avg_pool(h)
        return h, leaves

    def forward(self, x, train: bool = False) -> np.ndarray:
        return self.forward_graph(x, train)[0].data

    __call__ = forward

    def predict(self, x, batch_size: int = 1000) -> np.ndarray:
        out = [self.forward(x[i:i + batch_size]).argmax(axis=1) for i in range(0, len(x), batch_size)]
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


# --------------------------------------------------------------- checkpoints

def save_checkpoint(model: Model, path, metadata: Optional[dict] = None) -> None:
    """Write ``manifest.json`` + ``weights.bin`` (little-endian, row-major) into ``path``."""
    os.makedirs(path, exist_ok=True)
    registry = []
    offset = 0
    blobs = []
    for kind, store in (("param", model.params), ("buffer", model.buffers)):
        for name, arr in store.items():
            le = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))
            raw = le.tobytes(order="C")
            registry.append({"name": name, "kind": kind, "shape": list(arr.shape),
                             "dtype": arr.dtype.name, "offset": offset, "nbytes": len(raw)})
            blobs.append(raw)
            offset += len(raw)
    manifest = {
        "format_version": FORMAT_VERSION,
        "spec": model.spec.to_dict(),
        "bn": {"eps": model.bn_eps, "momentum": model.bn_momentum},
        "tensors": registry,
        "blob_size": offset,
        "metadata": metadata or {},
    }
    with open(os.path.join(path, "weights.bin"), "wb") as f:
        for raw in blobs:
            f.write(raw)
    with open(os.path.join(path, "manifest.json"), "w", encoding="utf-8", newline="\n") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
        f.write("\n")


def read_manifest(path) -> dict:
    try:
        with open(os.path.join(path, "manifest.json"), encoding="utf-8") as f:
            manifest = json.load(f)
    except (OSError, json.JSONDecodeError, UnicodeDecodeError) as e:
        raise CorruptManifestError(f"cannot read manifest in {path}: {e}") from e
    needed = ("format_version", "spec", "tensors")
    if not isinstance(manifest, dict) or any(k not in manifest for k in needed):
        raise CorruptManifestError(f"manifest in {path} lacks one of {needed}")
    if manifest["format_version"] != FORMAT_VERSION:
        raise CorruptManifestError(f"unsupported checkpoint format_version {manifest['format_version']}")
    return manifest


def load_checkpoint(path, spec: Optional[ModelSpec] = None) -> Model:
    """Load a checkpoint; if ``spec`` is given the stored tensors must match it."""
    manifest = read_manifest(path)
    try:
        stored_spec = ModelSpec.from_dict(manifest["spec"])
        entries = [(t["name"], t["kind"], tuple(t["shape"]), np.dtype(t["dtype"]), int(t["offset"]),
                    int(t["nbytes"])) for t in manifest["tensors"]]
    except (KeyError, TypeError, ValueError) as e:
        raise CorruptManifestError(f"malformed manifest in {path}: {e}") from e
    with open(os.path.join(path, "weights.bin"), "rb") as f:
        blob = f.read()
    dtypes = {e[3] for e in entries if e[1] == "param"}
    bn = manifest.get("bn", {})
    model = Model(spec or stored_spec, dtype=dtypes.pop() if len(dtypes) == 1 else np.float32,
                  bn_eps=bn.get("eps", 1e-5), bn_momentum=bn.get("momentum", 0.1))
    expected = {**{k: ("param", v.shape) for k, v in model.params.items()},
                **{k: ("buffer", v.shape) for k, v in model.buffers.items()}}
    seen = set()
    for name, kind, shape, dtype, offset, nbytes in entries:
        if offset < 0 or offset + nbytes > len(blob):
            raise TruncatedBlobError(f"tensor {name} spans bytes {offset}..{offset + nbytes} "
                                     f"but weights.bin has {len(blob)}")
        if nbytes != int(np.prod(shape)) * dtype.itemsize:
            raise CorruptManifestError(f"tensor {name}: nbytes {nbytes} inconsistent with shape {shape}")
        if name not in expected or expected[name] != (kind, shape):
            layer = name.rsplit(".", 1)[0]
            raise CheckpointIncompatibleError(
                f"layer {layer}: checkpoint tensor {name} {shape} does not match model "
                f"{expected.get(name, ('missing', None))[1]}")
        arr = np.frombuffer(blob, dtype=dtype.newbyteorder("<"), count=int(np.prod(shape)),
                            offset=offset).reshape(shape).astype(dtype)
        (model.params if kind == "param" else model.buffers)[name] = arr.copy()
        seen.add(name)
    missing = set(expected) - seen
    if missing:
        name = sorted(missing)[0]
        raise CheckpointIncompatibleError(f"layer {name.rsplit('.', 1)[0]}: {name} missing from checkpoint")
    return model


def checkpoint_metadata(path) -> dict:
    return read_manifest(path).get("metadata", {})
