"""Tiled-layout memory and step-time estimates for a TPU-like accelerator.

Every tensor has its two minor-most dimensions rounded up to the tile
(``second_minor_multiple`` x ``minor_multiple``, default 8 x 128), so memory
falls in steps as channels are removed rather than linearly. This is a fixed
tile approximation, not a simulation of the real compiler's layout search.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

from .errors import InvalidArgument
from .graph import BatchNorm, Conv2D, Dense, MaxPool, ModelGraph, ReLU, infer_shapes


@dataclass(frozen=True)
class LayoutConfig:
    minor_multiple: int = 128
    second_minor_multiple: int = 8
    bytes_per_element: int = 4

    def __post_init__(self):
        if min(self.minor_multiple, self.second_minor_multiple, self.bytes_per_element) < 1:
            raise InvalidArgument("layout multiples and element size must be >= 1")

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class DeviceProfile:
    # roughly one TPU v2 chip
    flops_per_second: float = 45e12
    bytes_per_second: float = 600e9
    fixed_overhead_seconds: float = 5e-5

    def __post_init__(self):
        if not (self.flops_per_second > 0 and self.bytes_per_second > 0):
            raise InvalidArgument("device throughputs must be positive")
        if self.fixed_overhead_seconds < 0:
            raise InvalidArgument("fixed overhead must be non-negative")

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class PaddedBytes:
    weight_bytes: int
    activation_bytes: int

    @property
    def total(self) -> int:
        return self.weight_bytes + self.activation_bytes

    def to_dict(self):
        return {"weight_bytes": self.weight_bytes, "activation_bytes": self.activation_bytes,
                "total": self.total}


def padded_dim(n: int, multiple: int) -> int:
    """Smallest multiple of ``multiple`` that is >= ``n``."""
    if n < 1 or multiple < 1:
        raise InvalidArgument(f"padded_dim needs n >= 1 and multiple >= 1, got ({n}, {multiple})")
    return -(-n // multiple) * multiple


def padded_elements(shape, layout: LayoutConfig) -> int:
    """Element count after tiling; 1-D tensors pad only their single (minor) dim."""
    dims = list(shape)
    if not dims:
        return 1
    dims[-1] = padded_dim(dims[-1], layout.minor_multiple)
    if len(dims) >= 2:
        dims[-2] = padded_dim(dims[-2], layout.second_minor_multiple)
    return math.prod(dims)


def padded_bytes(graph: ModelGraph, layout: LayoutConfig | None = None, batch: int = 1) -> PaddedBytes:
    """Weights plus every layer's output activation, each padded to the tile.

    Activations are summed over all layers (no liveness analysis).
    """
    layout = layout or LayoutConfig()
    weights = 0
    for layer in graph.layers:
        for shape in layer.tensor_shapes().values():
            weights += padded_elements(shape, layout)
    acts = sum(padded_elements(s, layout) for s in infer_shapes(graph, batch)) if graph.layers else 0
    b = layout.bytes_per_element
    return PaddedBytes(weights * b, acts * b)


def flop_count(graph: ModelGraph, batch: int = 1) -> int:
    """Multiply-adds count 2; BN charges 2 per element, ReLU 1, max pool 1 per input element."""
    if not graph.layers:
        return 0
    total = 0
    prev = (batch, *graph.input_shape)
    for layer, shape in zip(graph.layers, infer_shapes(graph, batch)):
        if isinstance(layer, Conv2D):
            _, ho, wo, _ = shape
            total += 2 * layer.kernel_h * layer.kernel_w * layer.in_channels * layer.out_channels * ho * wo * batch
        elif isinstance(layer, Dense):
            total += 2 * layer.in_features * layer.out_features * batch
        elif isinstance(layer, BatchNorm):
            total += 2 * math.prod(shape)
        elif isinstance(layer, ReLU):
            total += math.prod(shape)
        elif isinstance(layer, MaxPool):
            total += math.prod(prev)
        prev = shape
    return total


def estimate_step_time(graph: ModelGraph, layout: LayoutConfig | None = None,
                       profile: DeviceProfile | None = None, batch: int = 128) -> float:
    """Seconds per training step: overhead + 3 x forward FLOPs + padded bytes moved.

    The factor 3 stands for forward + backward (about twice the forward) with
    the optimizer update folded in.
    """
    layout = layout or LayoutConfig()
    profile = profile or DeviceProfile()
    if not graph.layers:
        return profile.fixed_overhead_seconds
    compute = 3 * flop_count(graph, batch) / profile.flops_per_second
    memory = padded_bytes(graph, layout, batch).total / profile.bytes_per_second
    return profile.fixed_overhead_seconds + compute + memory
