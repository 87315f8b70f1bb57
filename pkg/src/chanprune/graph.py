"""Model-graph data model: layer specs, VGG presets, shape inference, counting.

Weights are plain numpy arrays. Activations are NHWC and convolution kernels
are stored ``[kh, kw, in, out]`` so that a Flatten after the last pool orders
features as ``(h * W + w) * C + c``.
"""
from __future__ import annotations

import copy
import hashlib
import json
import math
from dataclasses import dataclass, field, fields
from typing import ClassVar, Union

import numpy as np

from .errors import InvalidArgument, ShapeError, StructureError

BN_EPS = 1e-5

VGG16_CHANNELS = [64, 64, "M", 128, 128, "M", 256, 256, 256, "M",
                  512, 512, 512, "M", 512, 512, 512, "M"]
TINY_CHANNELS = [16, "M", 32, "M", 64, "M"]

PRESETS = ("imagenet", "cifar", "tiny")


@dataclass(eq=False)
class Conv2D:
    id: str
    in_channels: int
    out_channels: int
    kernel_h: int = 3
    kernel_w: int = 3
    stride: int = 1
    padding: str = "SAME"
    weights: np.ndarray | None = None
    bias: np.ndarray | None = None

    kind: ClassVar[str] = "conv2d"
    tensor_names: ClassVar[tuple[str, ...]] = ("weights", "bias")
    trainable: ClassVar[tuple[str, ...]] = ("weights", "bias")

    def tensor_shapes(self) -> dict[str, tuple[int, ...]]:
        return {
            "weights": (self.kernel_h, self.kernel_w, self.in_channels, self.out_channels),
            "bias": (self.out_channels,),
        }


@dataclass(eq=False)
class BatchNorm:
    id: str
    channels: int
    eps: float = BN_EPS
    gamma: np.ndarray | None = None
    beta: np.ndarray | None = None
    moving_mean: np.ndarray | None = None
    moving_var: np.ndarray | None = None

    kind: ClassVar[str] = "batchnorm"
    tensor_names: ClassVar[tuple[str, ...]] = ("gamma", "beta", "moving_mean", "moving_var")
    trainable: ClassVar[tuple[str, ...]] = ("gamma", "beta")

    def tensor_shapes(self) -> dict[str, tuple[int, ...]]:
        return {name: (self.channels,) for name in self.tensor_names}


@dataclass(eq=False)
class ReLU:
    id: str

    kind: ClassVar[str] = "relu"
    tensor_names: ClassVar[tuple[str, ...]] = ()
    trainable: ClassVar[tuple[str, ...]] = ()

    def tensor_shapes(self) -> dict[str, tuple[int, ...]]:
        return {}


@dataclass(eq=False)
class MaxPool:
    id: str
    pool: int = 2
    stride: int = 2

    kind: ClassVar[str] = "maxpool"
    tensor_names: ClassVar[tuple[str, ...]] = ()
    trainable: ClassVar[tuple[str, ...]] = ()

    def tensor_shapes(self) -> dict[str, tuple[int, ...]]:
        return {}


@dataclass(eq=False)
class Flatten:
    id: str

    kind: ClassVar[str] = "flatten"
    tensor_names: ClassVar[tuple[str, ...]] = ()
    trainable: ClassVar[tuple[str, ...]] = ()

    def tensor_shapes(self) -> dict[str, tuple[int, ...]]:
        return {}


@dataclass(eq=False)
class Dense:
    id: str
    in_features: int
    out_features: int
    weights: np.ndarray | None = None
    bias: np.ndarray | None = None

    kind: ClassVar[str] = "dense"
    tensor_names: ClassVar[tuple[str, ...]] = ("weights", "bias")
    trainable: ClassVar[tuple[str, ...]] = ("weights", "bias")

    def tensor_shapes(self) -> dict[str, tuple[int, ...]]:
        return {"weights": (self.in_features, self.out_features), "bias": (self.out_features,)}


Layer = Union[Conv2D, BatchNorm, ReLU, MaxPool, Flatten, Dense]
LAYER_TYPES: dict[str, type] = {cls.kind: cls for cls in (Conv2D, BatchNorm, ReLU, MaxPool, Flatten, Dense)}


def hyperparams(layer: Layer) -> dict:
    """Non-tensor fields of a layer (everything needed to rebuild its structure)."""
    return {f.name: getattr(layer, f.name) for f in fields(layer)
            if f.name != "id" and f.name not in layer.tensor_names}


@dataclass(eq=False)
class ModelGraph:
    layers: list[Layer]
    input_shape: tuple[int, int, int]
    num_classes: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.input_shape = tuple(int(d) for d in self.input_shape)

    def __iter__(self):
        return iter(self.layers)

    def __len__(self) -> int:
        return len(self.layers)

    def index(self, layer_id: str) -> int:
        for i, layer in enumerate(self.layers):
            if layer.id == layer_id:
                return i
        raise KeyError(layer_id)

    def layer(self, layer_id: str) -> Layer:
        return self.layers[self.index(layer_id)]

    def convs(self) -> list[Conv2D]:
        return [layer for layer in self.layers if isinstance(layer, Conv2D)]

    @property
    def materialized(self) -> bool:
        return all(getattr(layer, name) is not None
                   for layer in self.layers for name in layer.tensor_names)

    @property
    def dtype(self) -> np.dtype:
        for layer in self.layers:
            for name in layer.tensor_names:
                arr = getattr(layer, name)
                if arr is not None:
                    return arr.dtype
        return np.dtype(np.float32)

    def tensors(self):
        """Yield ``(layer, name, array)`` for every materialized tensor, in layer order."""
        for layer in self.layers:
            for name in layer.tensor_names:
                arr = getattr(layer, name)
                if arr is not None:
                    yield layer, name, arr

    def copy(self) -> ModelGraph:
        return copy.deepcopy(self)

    def astype(self, dtype) -> ModelGraph:
        out = self.copy()
        for layer, name, arr in out.tensors():
            setattr(layer, name, arr.astype(dtype))
        return out

    def structure(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            "layers": [{"kind": l.kind, "id": l.id, **hyperparams(l)} for l in self.layers],
        }

    def validate(self, require_bn: bool = True) -> None:
        seen = set()
        for layer in self.layers:
            if layer.id in seen:
                raise StructureError(f"duplicate layer id {layer.id!r}")
            seen.add(layer.id)
        if not self.layers or not isinstance(self.layers[-1], Dense):
            raise StructureError("final layer must be Dense")
        if self.layers[-1].out_features != self.num_classes:
            raise StructureError(
                f"final Dense {self.layers[-1].id!r} has {self.layers[-1].out_features} outputs, "
                f"expected num_classes={self.num_classes}")
        if require_bn:
            for i, layer in enumerate(self.layers):
                if isinstance(layer, Conv2D):
                    nxt = self.layers[i + 1] if i + 1 < len(self.layers) else None
                    if not isinstance(nxt, BatchNorm):
                        raise StructureError(f"conv {layer.id!r} is not followed by a BatchNorm")
        for layer in self.layers:
            if isinstance(layer, BatchNorm) and not layer.eps > 0:
                raise StructureError(f"BatchNorm {layer.id!r} eps must be > 0")
            for name, shape in layer.tensor_shapes().items():
                arr = getattr(layer, name)
                if arr is None:
                    continue
                if tuple(arr.shape) != shape:
                    raise ShapeError(f"{layer.id}.{name} has shape {tuple(arr.shape)}, expected {shape}")
                if not np.all(np.isfinite(arr)):
                    raise StructureError(f"{layer.id}.{name} contains non-finite values")
            if isinstance(layer, BatchNorm) and layer.moving_var is not None:
                if np.any(layer.moving_var < 0):
                    raise StructureError(f"BatchNorm {layer.id!r} has negative moving_var")
        infer_shapes(self, 1)


def fingerprint(graph: ModelGraph) -> str:
    """Stable hash of the graph structure (weights excluded)."""
    blob = json.dumps(graph.structure(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def conv_output_hw(h: int, w: int, layer: Conv2D) -> tuple[int, int]:
    if layer.padding == "SAME":
        return -(-h // layer.stride), -(-w // layer.stride)
    if layer.padding == "VALID":
        return (h - layer.kernel_h) // layer.stride + 1, (w - layer.kernel_w) // layer.stride + 1
    raise StructureError(f"unknown padding {layer.padding!r} in {layer.id!r}")


def infer_shapes(graph: ModelGraph, batch: int) -> list[tuple[int, ...]]:
    """Output shape after every layer for a batch of ``batch`` inputs."""
    if batch < 1:
        raise InvalidArgument("batch must be positive")
    shape: tuple[int, ...] = (batch, *graph.input_shape)
    prev_id = "<input>"
    out = []
    for layer in graph.layers:
        if isinstance(layer, (Conv2D, BatchNorm, MaxPool)) and len(shape) != 4:
            raise ShapeError(f"{layer.id!r} expects a 4-D input but {prev_id!r} produces {shape}")
        if isinstance(layer, Conv2D):
            if shape[3] != layer.in_channels:
                raise ShapeError(f"channel mismatch: {prev_id!r} outputs {shape[3]} channels, "
                                 f"{layer.id!r} expects {layer.in_channels}")
            h, w = conv_output_hw(shape[1], shape[2], layer)
            if h < 1 or w < 1:
                raise ShapeError(f"{layer.id!r} produces empty spatial output")
            shape = (batch, h, w, layer.out_channels)
        elif isinstance(layer, BatchNorm):
            if shape[3] != layer.channels:
                raise ShapeError(f"channel mismatch: {prev_id!r} outputs {shape[3]} channels, "
                                 f"{layer.id!r} expects {layer.channels}")
        elif isinstance(layer, MaxPool):
            h = (shape[1] - layer.pool) // layer.stride + 1
            w = (shape[2] - layer.pool) // layer.stride + 1
            if h < 1 or w < 1:
                raise ShapeError(f"{layer.id!r} produces empty spatial output from {shape}")
            shape = (batch, h, w, shape[3])
        elif isinstance(layer, Flatten):
            shape = (batch, math.prod(shape[1:]))
        elif isinstance(layer, Dense):
            if len(shape) != 2 or shape[1] != layer.in_features:
                raise ShapeError(f"feature mismatch: {prev_id!r} outputs {shape}, "
                                 f"{layer.id!r} expects {layer.in_features} features")
            shape = (batch, layer.out_features)
        out.append(shape)
        prev_id = layer.id
    return out


def param_count(graph: ModelGraph) -> int:
    total = 0
    for layer in graph.layers:
        if isinstance(layer, Conv2D):
            total += layer.kernel_h * layer.kernel_w * layer.in_channels * layer.out_channels
            total += layer.out_channels
        elif isinstance(layer, Dense):
            total += layer.in_features * layer.out_features + layer.out_features
        elif isinstance(layer, BatchNorm):
            total += 4 * layer.channels
    return total


def init_layer(layer: Layer, rng: np.random.Generator, dtype=np.float32) -> None:
    """He-uniform conv kernels, Glorot-uniform dense, zero biases, identity BN."""
    if isinstance(layer, Conv2D):
        fan_in = layer.kernel_h * layer.kernel_w * layer.in_channels
        limit = math.sqrt(6.0 / fan_in)
        layer.weights = _uniform(rng, limit, layer.tensor_shapes()["weights"], dtype)
        layer.bias = np.zeros(layer.out_channels, dtype=dtype)
    elif isinstance(layer, Dense):
        limit = math.sqrt(6.0 / (layer.in_features + layer.out_features))
        layer.weights = _uniform(rng, limit, (layer.in_features, layer.out_features), dtype)
        layer.bias = np.zeros(layer.out_features, dtype=dtype)
    elif isinstance(layer, BatchNorm):
        layer.gamma = np.ones(layer.channels, dtype=dtype)
        layer.beta = np.zeros(layer.channels, dtype=dtype)
        layer.moving_mean = np.zeros(layer.channels, dtype=dtype)
        layer.moving_var = np.ones(layer.channels, dtype=dtype)


def _uniform(rng, limit, shape, dtype):
    # draw directly in the target dtype; the imagenet head alone is ~120M values
    u = rng.random(shape, dtype=np.float32 if np.dtype(dtype) == np.float32 else np.float64)
    u *= 2 * limit
    u -= limit
    return u.astype(dtype, copy=False)


def init_weights(graph: ModelGraph, seed: int, dtype=np.float32) -> ModelGraph:
    rng = np.random.default_rng(seed)
    for layer in graph.layers:
        init_layer(layer, rng, dtype)
    return graph


def _conv_stack(plan, in_ch: int, layers: list) -> int:
    conv_i = pool_i = 0
    for item in plan:
        if item == "M":
            pool_i += 1
            layers.append(MaxPool(f"pool{pool_i}"))
        else:
            conv_i += 1
            layers.append(Conv2D(f"conv{conv_i}", in_ch, item))
            layers.append(BatchNorm(f"bn{conv_i}", item))
            layers.append(ReLU(f"relu{conv_i}"))
            in_ch = item
    return in_ch


def build_preset(preset: str, num_classes: int, seed: int = 0, materialize: bool = True) -> ModelGraph:
    """Build a VGG-style graph.

    ``materialize=False`` returns the structure only (all tensors ``None``),
    which is enough for shape inference and parameter counting.
    """
    if num_classes < 2:
        raise InvalidArgument(f"num_classes must be >= 2, got {num_classes}")
    layers: list[Layer] = []
    if preset == "imagenet":
        last = _conv_stack(VGG16_CHANNELS, 3, layers)
        layers += [Flatten("flatten"),
                   Dense("fc1", 7 * 7 * last, 4096), ReLU("relu_fc1"),
                   Dense("fc2", 4096, 4096), ReLU("relu_fc2"),
                   Dense("fc3", 4096, num_classes)]
        input_shape = (224, 224, 3)
    elif preset == "cifar":
        last = _conv_stack(VGG16_CHANNELS, 3, layers)
        layers += [Flatten("flatten"), Dense("dense", last, num_classes)]
        input_shape = (32, 32, 3)
    elif preset == "tiny":
        last = _conv_stack(TINY_CHANNELS, 3, layers)
        layers += [Flatten("flatten"), Dense("dense", 4 * 4 * last, num_classes)]
        input_shape = (32, 32, 3)
    else:
        raise InvalidArgument(f"unknown preset {preset!r}; choose from {PRESETS}")
    graph = ModelGraph(layers, input_shape, num_classes, meta={"preset": preset})
    if materialize:
        init_weights(graph, seed)
    graph.validate()
    return graph
