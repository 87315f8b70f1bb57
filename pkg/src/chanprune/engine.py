"""Deterministic numpy training engine: forward, backprop, SGD with momentum."""
from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import kernels
from .errors import InvalidArgument, NumericalError, ShapeError
from .graph import BatchNorm, Conv2D, Dense, Flatten, MaxPool, ModelGraph, ReLU

PRECISIONS = {"f32": np.float32, "f64": np.float64}


@dataclass
class Hyperparams:
    batch_size: int = 128
    max_epochs: int = 100
    learning_rate: float = 0.01
    momentum: float = 0.9
    bn_stat_momentum: float = 0.9
    seed: int = 0
    precision: str = "f32"

    def __post_init__(self):
        if self.batch_size < 1:
            raise InvalidArgument("batch_size must be positive")
        if self.max_epochs < 0:
            raise InvalidArgument("max_epochs must be non-negative")
        if not self.learning_rate > 0:
            raise InvalidArgument("learning_rate must be positive")
        if not 0 <= self.momentum < 1:
            raise InvalidArgument("momentum must be in [0, 1)")
        if not 0 <= self.bn_stat_momentum < 1:
            raise InvalidArgument("bn_stat_momentum must be in [0, 1)")
        if self.precision not in PRECISIONS:
            raise InvalidArgument(f"precision must be one of {list(PRECISIONS)}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_accuracy: float
    val_accuracy: float | None
    val_loss: float | None
    epoch_wall_seconds: float
    per_step_wall_seconds: list[float] = field(default_factory=list)


@dataclass
class TrainLog:
    records: list[EpochRecord] = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    @property
    def last(self) -> EpochRecord | None:
        return self.records[-1] if self.records else None


# --------------------------------------------------------------------------
# forward / backward


def _same_pads(size, k, s):
    out = -(-size // s)
    total = max((out - 1) * s + k - size, 0)
    return out, total // 2, total - total // 2


def _conv_forward(layer: Conv2D, x):
    n, h, w, c = x.shape
    if layer.padding == "SAME":
        ho, pt, pb = _same_pads(h, layer.kernel_h, layer.stride)
        wo, pl, pr = _same_pads(w, layer.kernel_w, layer.stride)
        xp = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0))) if (pt or pb or pl or pr) else x
    else:
        ho = (h - layer.kernel_h) // layer.stride + 1
        wo = (w - layer.kernel_w) // layer.stride + 1
        pt = pl = 0
        xp = x
    cols = kernels.im2col(np.ascontiguousarray(xp), layer.kernel_h, layer.kernel_w, layer.stride, ho, wo)
    cols = cols.reshape(n * ho * wo, -1)
    wmat = layer.weights.reshape(-1, layer.out_channels)
    out = cols @ wmat
    out += layer.bias
    cache = (cols, xp.shape, (pt, pl), (h, w), (ho, wo))
    return out.reshape(n, ho, wo, layer.out_channels), cache


def _conv_backward(layer: Conv2D, cache, dout, need_dx):
    cols, xp_shape, (pt, pl), (h, w), (ho, wo) = cache
    n = dout.shape[0]
    d2 = dout.reshape(-1, layer.out_channels)
    dw = (cols.T @ d2).reshape(layer.weights.shape)
    db = d2.sum(axis=0)
    if not need_dx:
        return None, dw, db
    dcols = (d2 @ layer.weights.reshape(-1, layer.out_channels).T)
    dcols = dcols.reshape(n, ho, wo, layer.kernel_h, layer.kernel_w, layer.in_channels)
    dxp = kernels.col2im(dcols, xp_shape[1], xp_shape[2], layer.stride)
    return dxp[:, pt:pt + h, pl:pl + w, :], dw, db


def _bn_forward(layer: BatchNorm, x, train):
    c = layer.channels
    if train:
        out, xhat, inv_std, mean, var = kernels.bn_train_forward(
            np.ascontiguousarray(x).reshape(-1, c), layer.gamma, layer.beta, layer.eps)
        return out.reshape(x.shape), (xhat, inv_std, mean, var)
    inv_std = 1.0 / np.sqrt(layer.moving_var + x.dtype.type(layer.eps))
    out = (x - layer.moving_mean) * (inv_std * layer.gamma) + layer.beta
    return out, None


def _bn_backward(layer: BatchNorm, cache, dout):
    xhat, inv_std, _, _ = cache
    dx, dgamma, dbeta = kernels.bn_backward(np.ascontiguousarray(dout).reshape(-1, layer.channels),
                                            xhat, layer.gamma, inv_std)
    return dx.reshape(dout.shape), dgamma, dbeta


def _check_input(graph: ModelGraph, x):
    if x.ndim != 4 or tuple(x.shape[1:]) != graph.input_shape:
        raise ShapeError(f"input shape {tuple(x.shape)} does not match graph input "
                         f"(N, {', '.join(map(str, graph.input_shape))})")


def _forward(graph: ModelGraph, x, train: bool, keep_cache: bool):
    """Returns ``(logits, caches)``; ``caches[i]`` holds what layer i needs for backprop."""
    _check_input(graph, x)
    x = np.asarray(x, dtype=graph.dtype)
    caches = []
    for layer in graph.layers:
        cache = None
        if isinstance(layer, Conv2D):
            x, cache = _conv_forward(layer, x)
        elif isinstance(layer, BatchNorm):
            x, cache = _bn_forward(layer, x, train)
        elif isinstance(layer, ReLU):
            mask = x > 0
            x = x * mask
            cache = mask
        elif isinstance(layer, MaxPool):
            shape = x.shape
            x, arg = kernels.maxpool_forward(np.ascontiguousarray(x), layer.pool, layer.stride)
            cache = (arg, shape)
        elif isinstance(layer, Flatten):
            cache = x.shape
            x = x.reshape(x.shape[0], -1)
        elif isinstance(layer, Dense):
            cache = x
            x = x @ layer.weights + layer.bias
        caches.append(cache if keep_cache else _stats_only(layer, cache))
    return x, caches


def _stats_only(layer, cache):
    return cache[2:] if isinstance(layer, BatchNorm) and cache is not None else None


def _backward(graph: ModelGraph, caches, dlogits) -> dict:
    grads = {}
    d = dlogits
    for i in range(len(graph.layers) - 1, -1, -1):
        layer, cache = graph.layers[i], caches[i]
        need_dx = i > 0
        if isinstance(layer, Conv2D):
            d, dw, db = _conv_backward(layer, cache, d, need_dx)
            grads[(layer.id, "weights")] = dw
            grads[(layer.id, "bias")] = db
        elif isinstance(layer, BatchNorm):
            d, dg, dbt = _bn_backward(layer, cache, d)
            grads[(layer.id, "gamma")] = dg
            grads[(layer.id, "beta")] = dbt
        elif isinstance(layer, ReLU):
            d = d * cache
        elif isinstance(layer, MaxPool):
            arg, shape = cache
            d = kernels.maxpool_backward(d, arg, shape, layer.pool, layer.stride)
        elif isinstance(layer, Flatten):
            d = d.reshape(cache)
        elif isinstance(layer, Dense):
            grads[(layer.id, "weights")] = cache.T @ d
            grads[(layer.id, "bias")] = d.sum(axis=0)
            if need_dx:
                d = d @ layer.weights.T
        if d is None:
            break
    return grads


def _update_moving_stats(graph: ModelGraph, caches, momentum: float):
    for layer, cache in zip(graph.layers, caches):
        if isinstance(layer, BatchNorm):
            mean, var = cache[-2], cache[-1]
            layer.moving_mean = (momentum * layer.moving_mean + (1 - momentum) * mean).astype(layer.moving_mean.dtype)
            layer.moving_var = (momentum * layer.moving_var + (1 - momentum) * var).astype(layer.moving_var.dtype)


def forward(graph: ModelGraph, inputs, mode: str = "infer", bn_stat_momentum: float = 0.9):
    """Logits ``[N, num_classes]``.

    ``train`` normalizes with batch statistics and folds them into the moving
    averages of ``graph`` (mutated in place); ``infer`` uses the moving averages.
    """
    if mode not in ("train", "infer"):
        raise InvalidArgument(f"mode must be 'train' or 'infer', got {mode!r}")
    train = mode == "train"
    logits, caches = _forward(graph, inputs, train, keep_cache=False)
    if train:
        _update_moving_stats(graph, caches, bn_stat_momentum)
    return logits


def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(logits, labels) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy and its gradient w.r.t. the logits."""
    n = logits.shape[0]
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    loss = float(np.mean(logsum - z[np.arange(n), labels]))
    d = np.exp(z - logsum[:, None])
    d[np.arange(n), labels] -= 1
    return loss, d / n


def _check_labels(graph, labels):
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= graph.num_classes):
        raise InvalidArgument(f"labels must lie in [0, {graph.num_classes})")
    return labels.astype(np.intp)


def _loss_grads_caches(graph, inputs, labels):
    labels = _check_labels(graph, labels)
    logits, caches = _forward(graph, inputs, train=True, keep_cache=True)
    loss, dlogits = cross_entropy(logits, labels)
    grads = _backward(graph, caches, dlogits)
    return loss, grads, caches, logits


def loss_and_grads(graph: ModelGraph, inputs, labels):
    """Train-mode loss and gradients for every trainable tensor.

    Moving BN statistics are left untouched. Gradients are keyed by
    ``(layer_id, tensor_name)``.
    """
    loss, grads, _, _ = _loss_grads_caches(graph, inputs, labels)
    return loss, grads


def sgd_momentum_step(weights, grads, velocity, lr: float, momentum: float):
    """``v <- momentum * v - lr * g``; ``w <- w + v``. Returns new ``(w, v)``."""
    weights, grads, velocity = np.asarray(weights), np.asarray(grads), np.asarray(velocity)
    if not (weights.shape == grads.shape == velocity.shape):
        raise InvalidArgument(f"shape mismatch: w{weights.shape} g{grads.shape} v{velocity.shape}")
    v = momentum * velocity - lr * grads
    return weights + v, v


def trainable_items(graph: ModelGraph):
    for layer in graph.layers:
        for name in layer.trainable:
            yield layer, name


def train_step(graph: ModelGraph, velocity: dict, x, y, hp: Hyperparams):
    """One SGD step in place on ``graph``. Returns ``(loss, n_correct)``."""
    loss, grads, caches, logits = _loss_grads_caches(graph, x, y)
    if not math.isfinite(loss):
        raise NumericalError(f"non-finite training loss {loss}")
    for layer, name in trainable_items(graph):
        key = (layer.id, name)
        w, v = sgd_momentum_step(getattr(layer, name), grads[key], velocity[key],
                                 hp.learning_rate, hp.momentum)
        setattr(layer, name, w)
        velocity[key] = v
    _update_moving_stats(graph, caches, hp.bn_stat_momentum)
    return loss, int((logits.argmax(axis=1) == y).sum())


def init_velocity(graph: ModelGraph) -> dict:
    return {(layer.id, name): np.zeros_like(getattr(layer, name)) for layer, name in trainable_items(graph)}


def _require_nonempty(dataset, what="dataset"):
    if dataset is None or len(dataset.y) == 0:
        raise InvalidArgument(f"{what} must be non-empty")


def train(graph: ModelGraph, train_set, val_set, hp: Hyperparams) -> tuple[ModelGraph, TrainLog]:
    """Seeded-shuffle mini-batch SGD for ``hp.max_epochs`` epochs on a copy of ``graph``."""
    _require_nonempty(train_set, "train_set")
    if val_set is not None:
        _require_nonempty(val_set, "val_set")
    dtype = PRECISIONS[hp.precision]
    model = graph.astype(dtype)
    _check_input(model, train_set.x[:1])
    log = TrainLog()
    if hp.max_epochs == 0:
        return model, log
    rng = np.random.default_rng(hp.seed)
    velocity = init_velocity(model)
    n = len(train_set.y)
    x_all = np.asarray(train_set.x, dtype=dtype)
    y_all = np.asarray(train_set.y, dtype=np.intp)
    _check_labels(model, y_all)
    for epoch in range(1, hp.max_epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(n)
        total_loss = 0.0
        correct = 0
        steps = []
        for start in range(0, n, hp.batch_size):
            idx = order[start:start + hp.batch_size]
            ts = time.perf_counter()
            loss, hit = train_step(model, velocity, x_all[idx], y_all[idx], hp)
            steps.append(time.perf_counter() - ts)
            total_loss += loss * len(idx)
            correct += hit
        val_acc = val_loss = None
        if val_set is not None:
            val_acc, val_loss = evaluate_with_loss(model, val_set)
        log.records.append(EpochRecord(epoch, total_loss / n, correct / n, val_acc, val_loss,
                                       time.perf_counter() - t0, steps))
    return model, log


def evaluate_with_loss(graph: ModelGraph, dataset, batch_size: int = 500) -> tuple[float, float]:
    _require_nonempty(dataset)
    labels = _check_labels(graph, dataset.y)
    correct = 0
    loss_sum = 0.0
    for start in range(0, len(labels), batch_size):
        logits = forward(graph, dataset.x[start:start + batch_size], "infer")
        y = labels[start:start + batch_size]
        loss, _ = cross_entropy(logits.astype(np.float64), y)
        loss_sum += loss * len(y)
        correct += int((logits.argmax(axis=1) == y).sum())
    return correct / len(labels), loss_sum / len(labels)


def evaluate(graph: ModelGraph, dataset) -> float:
    """Inference-mode top-1 accuracy."""
    return evaluate_with_loss(graph, dataset)[0]


# --------------------------------------------------------------------------
# gradient verification


def _kink_signature(graph, caches):
    parts = []
    for layer, cache in zip(graph.layers, caches):
        if isinstance(layer, ReLU):
            parts.append(np.packbits(cache).tobytes())
        elif isinstance(layer, MaxPool):
            parts.append(cache[0].tobytes())
    return hash(tuple(parts))


def _loss_and_signature(graph, x, y):
    logits, caches = _forward(graph, x, train=True, keep_cache=True)
    loss, _ = cross_entropy(logits, y)
    return loss, _kink_signature(graph, caches)


@dataclass
class GradCheckResult:
    max_rel_error: float
    checked: int
    skipped: int
    worst: tuple | None = None


def grad_check_detail(graph: ModelGraph, batch, step: float = 1e-4, floor: float = 1e-6) -> GradCheckResult:
    """Compare every analytic gradient entry with a central difference.

    Relative error is ``|a - n| / max(|a|, |n|, floor)``. Entries whose
    +/- step evaluations flip a ReLU mask or a max-pool winner are skipped:
    the loss is not differentiable across that step.
    """
    if graph.dtype != np.float64:
        raise InvalidArgument("grad_check requires an f64 graph; finite differences are too noisy in f32")
    x, y = batch
    x = np.asarray(x, dtype=np.float64)
    y = _check_labels(graph, y)
    _, grads = loss_and_grads(graph, x, y)
    _, base_sig = _loss_and_signature(graph, x, y)
    worst, where, checked, skipped = 0.0, None, 0, 0
    for layer, name in trainable_items(graph):
        arr = getattr(layer, name)
        g = grads[(layer.id, name)]
        flat = arr.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + step
            lp, sp = _loss_and_signature(graph, x, y)
            flat[k] = orig - step
            lm, sm = _loss_and_signature(graph, x, y)
            flat[k] = orig
            if sp != base_sig or sm != base_sig:
                skipped += 1
                continue
            num = (lp - lm) / (2 * step)
            ana = float(g.reshape(-1)[k])
            rel = abs(ana - num) / max(abs(ana), abs(num), floor)
            checked += 1
            if rel > worst:
                worst, where = rel, (layer.id, name, k, ana, num)
    return GradCheckResult(worst, checked, skipped, where)


def grad_check(graph: ModelGraph, batch, step: float = 1e-4) -> float:
    """Worst relative error between analytic and central-difference gradients."""
    return grad_check_detail(graph, batch, step).max_rel_error
