"""Channel importance scores and ratio -> removal plan conversion."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgument, StructureError
from .graph import BatchNorm, Conv2D, ModelGraph, fingerprint

METHODS = ("l1", "bn_gamma")
SCOPES = ("per_layer", "global")


@dataclass
class ImportanceReport:
    method: str
    scores: dict[str, np.ndarray]
    fingerprint: str = ""

    def to_json(self) -> dict:
        return {"method": self.method, "fingerprint": self.fingerprint,
                "scores": {k: [float(s) for s in v] for k, v in self.scores.items()}}


@dataclass
class PrunePlan:
    removals: dict[str, list[int]]
    fingerprint: str = ""
    # global scope only: removals that could not be placed without emptying a layer
    shortfall: int = 0

    def __post_init__(self):
        self.removals = {k: sorted(int(i) for i in v) for k, v in self.removals.items() if len(v)}

    @property
    def size(self) -> int:
        return sum(len(v) for v in self.removals.values())

    def to_json(self) -> dict:
        return {"fingerprint": self.fingerprint, "shortfall": self.shortfall,
                "removals": self.removals}

    @classmethod
    def from_json(cls, doc: dict) -> PrunePlan:
        return cls(doc["removals"], doc.get("fingerprint", ""), doc.get("shortfall", 0))


def _require_materialized(graph: ModelGraph):
    if not graph.materialized:
        raise InvalidArgument("importance scoring needs a graph with weights")


def score_l1(graph: ModelGraph) -> ImportanceReport:
    """Sum of |w| over each output filter ``weights[:, :, :, c]``; bias is ignored."""
    _require_materialized(graph)
    scores = {}
    for conv in graph.convs():
        w = conv.weights.astype(np.float64)
        scores[conv.id] = np.abs(w).sum(axis=(0, 1, 2))
    return ImportanceReport("l1", scores, fingerprint(graph))


def score_bn_gamma(graph: ModelGraph) -> ImportanceReport:
    """|gamma| of the BatchNorm that directly follows each conv."""
    _require_materialized(graph)
    scores = {}
    for i, layer in enumerate(graph.layers):
        if not isinstance(layer, Conv2D):
            continue
        nxt = graph.layers[i + 1] if i + 1 < len(graph.layers) else None
        if not isinstance(nxt, BatchNorm):
            raise StructureError(f"conv {layer.id!r} is not followed by a BatchNorm")
        scores[layer.id] = np.abs(nxt.gamma.astype(np.float64))
    return ImportanceReport("bn_gamma", scores, fingerprint(graph))


def score(graph: ModelGraph, method: str) -> ImportanceReport:
    if method == "l1":
        return score_l1(graph)
    if method == "bn_gamma":
        return score_bn_gamma(graph)
    raise InvalidArgument(f"unknown importance method {method!r}")


def _count(ratio: float, n: int) -> int:
    # guard so that 1/3 * 3 and 0.57 * 100 floor to 1 and 57, not one less
    return math.floor(ratio * n + 1e-9)


def make_plan(report: ImportanceReport, ratio: float, scope: str = "per_layer") -> PrunePlan:
    """Remove the lowest-scoring channels.

    ``per_layer`` removes ``floor(ratio * C)`` channels from every layer.
    ``global`` ranks every channel of every layer together and removes
    ``floor(ratio * sum(C))`` of them, passing over any candidate that would
    leave its layer empty. Ties go to the earlier layer, then the lower index.
    """
    if not (0.0 <= ratio < 1.0) or math.isnan(ratio):
        raise InvalidArgument(f"ratio must be in [0, 1), got {ratio}")
    if scope not in SCOPES:
        raise InvalidArgument(f"unknown scope {scope!r}")
    for layer_id, s in report.scores.items():
        s = np.asarray(s)
        if s.size and (np.any(s < 0) or not np.all(np.isfinite(s))):
            raise InvalidArgument(f"scores for {layer_id!r} must be finite and non-negative")

    removals: dict[str, list[int]] = {}
    shortfall = 0
    if scope == "per_layer":
        for layer_id, s in report.scores.items():
            s = np.asarray(s, dtype=np.float64)
            k = _count(ratio, s.size)
            order = np.argsort(s, kind="stable")
            removals[layer_id] = sorted(order[:k].tolist())
    else:
        layer_ids = list(report.scores)
        sizes = {lid: len(report.scores[lid]) for lid in layer_ids}
        target = _count(ratio, sum(sizes.values()))
        flat_scores = np.concatenate([np.asarray(report.scores[l], dtype=np.float64) for l in layer_ids]) \
            if layer_ids else np.zeros(0)
        owner = np.concatenate([np.full(sizes[l], i) for i, l in enumerate(layer_ids)]) \
            if layer_ids else np.zeros(0, dtype=int)
        chan = np.concatenate([np.arange(sizes[l]) for l in layer_ids]) if layer_ids else np.zeros(0, dtype=int)
        # lexsort: last key is primary
        order = np.lexsort((chan, owner, flat_scores))
        remaining = dict(sizes)
        picked: dict[str, list[int]] = {lid: [] for lid in layer_ids}
        taken = 0
        for idx in order:
            if taken == target:
                break
            lid = layer_ids[owner[idx]]
            if remaining[lid] <= 1:
                continue
            remaining[lid] -= 1
            picked[lid].append(int(chan[idx]))
            taken += 1
        shortfall = target - taken
        if shortfall:
            warnings.warn(f"global plan removes {taken} of {target} requested channels; "
                          f"{shortfall} would have emptied a layer", RuntimeWarning, stacklevel=2)
        removals = picked
    return PrunePlan(removals, report.fingerprint, shortfall)


def plan_for(graph: ModelGraph, method: str, ratio: float, scope: str = "per_layer") -> PrunePlan:
    return make_plan(score(graph, method), ratio, scope)
