import math

import pytest
from hypothesis import given, settings, strategies as st

from chanprune.costmodel import (DeviceProfile, LayoutConfig, estimate_step_time, flop_count, padded_bytes,
                                 padded_dim, padded_elements)
from chanprune.errors import InvalidArgument
from chanprune.graph import (BatchNorm, Conv2D, Dense, Flatten, ModelGraph, build_preset, fingerprint,
                             init_weights, param_count)
from chanprune.importance import PrunePlan, make_plan, score_l1
from chanprune.surgery import apply_plan

NO_PAD = LayoutConfig(1, 1, 4)


def ceil_to(n, m):
    return m * math.ceil(n / m)


@pytest.mark.parametrize("n,m,expected", [(63, 8, 64), (64, 8, 64), (1, 128, 128), (129, 128, 256)])
def test_padded_dim_examples(n, m, expected):
    assert padded_dim(n, m) == expected


def test_padded_dim_rejects_zero():
    with pytest.raises(InvalidArgument):
        padded_dim(0, 8)
    with pytest.raises(InvalidArgument):
        LayoutConfig(0, 8)


@given(n=st.integers(1, 10**6), m=st.integers(1, 512))
def test_padded_dim_properties(n, m):
    p = padded_dim(n, m)
    assert p % m == 0 and 0 <= p - n < m
    assert p == ceil_to(n, m)
    assert padded_dim(n + 1, m) >= p


def test_padded_elements_pads_two_minor_dims():
    assert padded_elements((3, 3, 5, 60), LayoutConfig()) == 3 * 3 * 8 * 128
    assert padded_elements((60,), LayoutConfig()) == 128
    assert padded_elements((1000, 10), LayoutConfig()) == 1000 * 128


@pytest.mark.parametrize("preset", ["tiny", "cifar", "imagenet"])
def test_no_padding_is_exact_count(preset):
    g = build_preset(preset, 10, 0, materialize=False)
    assert padded_bytes(g, NO_PAD).weight_bytes == 4 * param_count(g)


def test_sixty_and_fifty_seven_channels_pad_alike():
    layout = LayoutConfig(8, 8)
    a = padded_elements(Conv2D("c", 3, 60).tensor_shapes()["weights"], layout)
    b = padded_elements(Conv2D("c", 3, 57).tensor_shapes()["weights"], layout)
    assert a == b == 3 * 3 * 8 * 64


def test_sixty_four_to_fifty_six_strictly_smaller():
    layout = LayoutConfig(8, 8)
    a = padded_elements(Conv2D("c", 3, 64).tensor_shapes()["weights"], layout)
    b = padded_elements(Conv2D("c", 3, 56).tensor_shapes()["weights"], layout)
    assert (a, b) == (3 * 3 * 8 * 64, 3 * 3 * 8 * 56)


def two_convs(c, hw=8):
    return ModelGraph([Conv2D("a", 3, c), BatchNorm("bn_a", c), Conv2D("b", c, 16), BatchNorm("bn_b", 16),
                       Flatten("f"), Dense("d", hw * hw * 16, 2)], (hw, hw, 3), 2)


def test_single_layer_staircase():
    # c is the minor dim of conv a (pads to 128) and the second-minor dim of conv b (pads to 8)
    values = {c: padded_bytes(two_convs(c)).total for c in range(1, 33)}
    for c in range(2, 33):
        assert values[c] >= values[c - 1]
        assert (values[c] == values[c - 1]) == ((c - 1) // 8 == (c - 2) // 8)
    assert len(set(values.values())) == 4


def test_memory_not_linear_in_ratio(cifar_graph):
    rep = score_l1(cifar_graph)
    seen = {}
    for ratio in (0.300, 0.302, 0.304, 0.306):
        pruned = apply_plan(cifar_graph, make_plan(rep, ratio))
        seen.setdefault(padded_bytes(pruned).total, set()).add(param_count(pruned))
    assert any(len(counts) > 1 for counts in seen.values())


def test_flop_base_cases():
    g = ModelGraph([Conv2D("c", 1, 1, kernel_h=1, kernel_w=1)], (1, 1, 1), 2)
    assert flop_count(g, 1) == 2
    assert flop_count(ModelGraph([], (4, 4, 3), 2)) == 0


def test_first_tiny_conv_flops():
    g = build_preset("tiny", 10, 0, materialize=False)
    first = ModelGraph(g.layers[:1], g.input_shape, 10)
    assert flop_count(first, 1) == 2 * 3 * 3 * 3 * 16 * 32 * 32 == 884_736


def test_flops_scale_with_batch(tiny):
    assert flop_count(tiny, 4) == 4 * flop_count(tiny, 1)


def test_empty_graph_step_time_is_overhead():
    prof = DeviceProfile(1e9, 1e9, 0.125)
    assert estimate_step_time(ModelGraph([], (4, 4, 3), 2), profile=prof) == 0.125


def test_doubling_flops_halves_compute_term(tiny):
    slow = DeviceProfile(1e12, 1e30, 0.0)
    fast = DeviceProfile(2e12, 1e30, 0.0)
    a, b = estimate_step_time(tiny, profile=slow), estimate_step_time(tiny, profile=fast)
    assert b == pytest.approx(a / 2, rel=1e-12)


def test_step_time_recomputation(tiny):
    prof = DeviceProfile()
    pruned = apply_plan(tiny, make_plan(score_l1(tiny), 0.5))
    for g in (tiny, pruned):
        expected = (prof.fixed_overhead_seconds + 3 * flop_count(g, 128) / prof.flops_per_second
                    + padded_bytes(g, LayoutConfig(), 128).total / prof.bytes_per_second)
        assert estimate_step_time(g, LayoutConfig(), prof, 128) == pytest.approx(expected, rel=1e-12)
    assert estimate_step_time(pruned) < estimate_step_time(tiny)


TINY = build_preset("tiny", 10, 3, materialize=False)


@settings(max_examples=40, deadline=None)
@given(cuts=st.tuples(st.integers(0, 15), st.integers(0, 31), st.integers(0, 63)))
def test_estimate_monotone_under_pruning(cuts):
    g = init_weights(TINY.copy(), 0)
    removals = {c.id: list(range(k)) for c, k in zip(g.convs(), cuts) if k}
    pruned = apply_plan(g, PrunePlan(removals, fingerprint(g)))
    assert estimate_step_time(pruned) <= estimate_step_time(g)
    assert padded_bytes(pruned).total <= padded_bytes(g).total
    assert flop_count(pruned) <= flop_count(g)
