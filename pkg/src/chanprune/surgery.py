"""Build a physically smaller graph from a removal plan (no mask layers)."""
from __future__ import annotations

import copy
import logging
from dataclasses import dataclass

import numpy as np

from .engine import forward
from .errors import InvalidArgument, InvalidPlan, PlanMismatch, StructureError
from .graph import (BatchNorm, Conv2D, Dense, Flatten, MaxPool, ModelGraph, ReLU, fingerprint,
                    infer_shapes, init_weights)
from .importance import PrunePlan

log = logging.getLogger(__name__)

BN_SLICE = "bn-slice"
PASS = "pass"
INPUT_SLICE = "input-slice"
FLATTEN_REMAP = "flatten-remap"


@dataclass(frozen=True)
class WeightPolicy:
    """``reload`` copies surviving weights; ``reinit`` re-draws them from ``seed``."""
    mode: str = "reload"
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("reload", "reinit"):
            raise InvalidArgument(f"unknown weight policy {self.mode!r}")

    @classmethod
    def coerce(cls, policy) -> WeightPolicy:
        if isinstance(policy, WeightPolicy):
            return policy
        if policy in (True, "reload"):
            return cls("reload")
        if policy in (False, "reinit"):
            return cls("reinit")
        raise InvalidArgument(f"cannot interpret weight policy {policy!r}")


def consumer_map(graph: ModelGraph) -> dict[str, list[tuple[str, str]]]:
    """For every conv, the layers its output channels flow through and the terminal consumer."""
    if sum(isinstance(l, Flatten) for l in graph.layers) > 1:
        raise StructureError("graph is not a chain: more than one Flatten")
    out = {}
    layers = graph.layers
    for i, layer in enumerate(layers):
        if not isinstance(layer, Conv2D):
            continue
        deps = []
        j = i + 1
        terminal = False
        while j < len(layers):
            nxt = layers[j]
            if isinstance(nxt, Conv2D):
                deps.append((nxt.id, INPUT_SLICE))
                terminal = True
                break
            if isinstance(nxt, BatchNorm):
                deps.append((nxt.id, BN_SLICE))
            elif isinstance(nxt, (ReLU, MaxPool)):
                deps.append((nxt.id, PASS))
            elif isinstance(nxt, Flatten):
                if j + 1 >= len(layers) or not isinstance(layers[j + 1], Dense):
                    raise StructureError(f"Flatten {nxt.id!r} is not followed by a Dense")
                deps.append((nxt.id, PASS))
                deps.append((layers[j + 1].id, FLATTEN_REMAP))
                terminal = True
                break
            else:
                raise StructureError(f"conv {layer.id!r} reaches {nxt.kind} {nxt.id!r} before a consumer")
            j += 1
        if not terminal:
            raise StructureError(f"conv {layer.id!r} has no consumer")
        out[layer.id] = deps
    return out


def check_plan(graph: ModelGraph, plan: PrunePlan) -> None:
    if plan.fingerprint != fingerprint(graph):
        raise PlanMismatch(f"plan was made for graph {plan.fingerprint!r}, "
                           f"not {fingerprint(graph)!r}")
    convs = {c.id: c for c in graph.convs()}
    for layer_id, idx in plan.removals.items():
        conv = convs.get(layer_id)
        if conv is None:
            raise InvalidPlan(f"{layer_id!r} is not a prunable conv layer")
        if len(set(idx)) != len(idx) or list(idx) != sorted(idx):
            raise InvalidPlan(f"removals for {layer_id!r} must be strictly increasing")
        if idx and (idx[0] < 0 or idx[-1] >= conv.out_channels):
            raise InvalidPlan(f"removal index out of range for {layer_id!r} ({conv.out_channels} channels)")
        if len(idx) > conv.out_channels - 1:
            raise InvalidPlan(f"plan would remove every channel of {layer_id!r}")


def apply_plan(original: ModelGraph, plan: PrunePlan, policy="reload") -> ModelGraph:
    """New graph with the planned output channels removed.

    Each removed channel ``c`` of a conv disappears from that conv's kernel and
    bias, from the following BatchNorm, from the next conv's input slice, and,
    at a Flatten -> Dense boundary, from every Dense input row
    ``(h * W + w) * C + c``. ``original`` is left untouched.
    """
    policy = WeightPolicy.coerce(policy)
    check_plan(original, plan)
    consumer_map(original)
    shapes = infer_shapes(original, 1)
    reload = policy.mode == "reload"
    new_layers = []
    keep = None            # surviving channel indices of the running activation (None = all)
    flat_rows = None       # surviving Dense input rows after a Flatten
    for i, layer in enumerate(original.layers):
        new = copy.copy(layer)
        for name in layer.tensor_names:
            setattr(new, name, None)
        if isinstance(layer, Conv2D):
            in_keep = keep
            removed = plan.removals.get(layer.id, [])
            keep = np.setdiff1d(np.arange(layer.out_channels), removed) if removed else None
            new.in_channels = layer.in_channels if in_keep is None else len(in_keep)
            new.out_channels = layer.out_channels if keep is None else len(keep)
            if reload:
                w = layer.weights
                if in_keep is not None:
                    w = w[:, :, in_keep, :]
                if keep is not None:
                    w = w[:, :, :, keep]
                new.weights = np.array(w)
                new.bias = np.array(layer.bias if keep is None else layer.bias[keep])
        elif isinstance(layer, BatchNorm):
            new.channels = layer.channels if keep is None else len(keep)
            if reload:
                for name in layer.tensor_names:
                    arr = getattr(layer, name)
                    setattr(new, name, np.array(arr if keep is None else arr[keep]))
        elif isinstance(layer, Flatten):
            if keep is not None:
                _, h, w, c = shapes[i - 1] if i else (1, *original.input_shape)
                flat_rows = (np.arange(h * w)[:, None] * c + keep[None, :]).reshape(-1)
            keep = None
        elif isinstance(layer, Dense):
            rows = flat_rows
            flat_rows = None
            if rows is not None:
                new.in_features = len(rows)
            if reload:
                new.weights = np.array(layer.weights if rows is None else layer.weights[rows])
                new.bias = np.array(layer.bias)
        new_layers.append(new)
    pruned = ModelGraph(new_layers, original.input_shape, original.num_classes, meta=dict(original.meta))
    if not reload:
        init_weights(pruned, policy.seed, original.dtype)
    pruned.validate(require_bn=False)
    return pruned


def compose_plans(graph: ModelGraph, first: PrunePlan, second: PrunePlan) -> PrunePlan:
    """Single plan on ``graph`` equivalent to applying ``first`` then ``second``.

    ``second`` indexes channels of the graph produced by ``first``.
    """
    check_plan(graph, first)
    merged = {}
    for conv in graph.convs():
        gone = first.removals.get(conv.id, [])
        survivors = np.setdiff1d(np.arange(conv.out_channels), gone)
        later = second.removals.get(conv.id, [])
        merged[conv.id] = sorted(set(gone) | set(survivors[later].tolist()))
    return PrunePlan(merged, fingerprint(graph))


def check_equivalence(a: ModelGraph, b: ModelGraph, n_inputs: int = 10, seed: int = 0,
                      tol: float = 1e-6, batch_size: int = 4) -> float:
    """Max absolute inference-logit difference over ``n_inputs`` seeded random batches."""
    if a.input_shape != b.input_shape:
        raise InvalidArgument(f"input shapes differ: {a.input_shape} vs {b.input_shape}")
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_inputs):
        x = rng.normal(size=(batch_size, *a.input_shape))
        la = forward(a, x.astype(a.dtype), "infer")
        lb = forward(b, x.astype(b.dtype), "infer")
        worst = max(worst, float(np.max(np.abs(la.astype(np.float64) - lb.astype(np.float64)))))
    if worst > tol:
        log.info("graphs differ: max |logit difference| %.3g exceeds tol %.3g", worst, tol)
    return worst
