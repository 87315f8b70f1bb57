import numpy as np
import pytest

from chanprune.graph import (BatchNorm, Conv2D, Dense, Flatten, MaxPool, ModelGraph, ReLU,
                             build_preset, init_weights)


def small_graph(seed=0, dtype=np.float64, hw=8, classes=3):
    """Every layer kind on an ``hw x hw x 3`` input, with non-trivial BN and biases."""
    layers = [Conv2D("conv1", 3, 4), BatchNorm("bn1", 4), ReLU("relu1"), MaxPool("pool1"),
              Conv2D("conv2", 4, 6), BatchNorm("bn2", 6), ReLU("relu2"), MaxPool("pool2"),
              Flatten("flatten"), Dense("fc1", (hw // 4) ** 2 * 6, 8), ReLU("relu_fc1"),
              Dense("dense", 8, classes)]
    g = ModelGraph(layers, (hw, hw, 3), classes)
    init_weights(g, seed, dtype)
    rng = np.random.default_rng(seed + 1000)
    for layer in g.layers:
        if isinstance(layer, (Conv2D, Dense)):
            layer.bias = rng.normal(0, 0.1, layer.bias.shape).astype(dtype)
        if isinstance(layer, BatchNorm):
            layer.gamma = rng.uniform(0.5, 1.5, layer.channels).astype(dtype)
            layer.beta = rng.normal(0, 0.1, layer.channels).astype(dtype)
            layer.moving_mean = rng.normal(0, 0.1, layer.channels).astype(dtype)
            layer.moving_var = rng.uniform(0.5, 1.5, layer.channels).astype(dtype)
    g.validate()
    return g


def randomize_bn(graph, seed):
    """Trained-looking BN parameters so bn_gamma scores are not all tied."""
    rng = np.random.default_rng(seed)
    for layer in graph.layers:
        if isinstance(layer, BatchNorm):
            layer.gamma = rng.uniform(0.1, 2.0, layer.channels).astype(layer.gamma.dtype)
            layer.beta = rng.normal(0, 0.2, layer.channels).astype(layer.beta.dtype)
            layer.moving_mean = rng.normal(0, 0.2, layer.channels).astype(layer.beta.dtype)
            layer.moving_var = rng.uniform(0.5, 2.0, layer.channels).astype(layer.beta.dtype)
    return graph


@pytest.fixture
def tiny():
    return randomize_bn(build_preset("tiny", 10, 7), 7)


@pytest.fixture(scope="session")
def cifar_graph():
    return build_preset("cifar", 10, 3)
