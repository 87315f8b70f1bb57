import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from chanprune import modelfile
from chanprune.data import synth_dataset
from chanprune.engine import Hyperparams, forward, train
from chanprune.errors import InvalidArgument, InvalidPlan, PlanMismatch, StructureError
from chanprune.graph import (BatchNorm, Conv2D, Dense, Flatten, ModelGraph, ReLU, build_preset, fingerprint,
                             infer_shapes, init_weights, param_count)
from chanprune.importance import PrunePlan, make_plan, score_l1
from chanprune.surgery import (WeightPolicy, apply_plan, check_equivalence, compose_plans,
                               consumer_map)

from conftest import randomize_bn


def plan(graph, removals):
    return PrunePlan(removals, fingerprint(graph))


def recount_removed(graph, removals):
    """Parameters that disappear, tallied per removed channel from the original shapes."""
    shapes = infer_shapes(graph, 1)
    layers = graph.layers
    gone = 0
    for i, layer in enumerate(layers):
        if not isinstance(layer, Conv2D):
            continue
        r = len(removals.get(layer.id, []))
        # own filters over all original inputs + bias, 4 BN vectors
        gone += r * (layer.kernel_h * layer.kernel_w * layer.in_channels + 1 + 4)
        j = i + 1
        while not isinstance(layers[j], (Conv2D, Flatten)):
            j += 1
        if isinstance(layers[j], Conv2D):
            nxt = layers[j]
            # input slices of the next conv, counted against its surviving outputs
            nxt_out = nxt.out_channels - len(removals.get(nxt.id, []))
            gone += r * nxt.kernel_h * nxt.kernel_w * nxt_out
        else:
            _, h, w, _ = shapes[j - 1]
            gone += r * h * w * layers[j + 1].out_features
    return gone


# ---------------------------------------------------------------- examples


def test_two_of_four_channels_removed():
    g = ModelGraph([Conv2D("a", 3, 4), BatchNorm("bn_a", 4), ReLU("r"), Conv2D("b", 4, 5),
                    BatchNorm("bn_b", 5), Flatten("f"), Dense("d", 4 * 4 * 5, 2)], (4, 4, 3), 2)
    init_weights(g, 0)
    p = apply_plan(g, plan(g, {"a": [1, 3]}))
    assert p.layer("a").out_channels == 2 and p.layer("a").weights.shape == (3, 3, 3, 2)
    assert all(getattr(p.layer("bn_a"), n).shape == (2,) for n in BatchNorm.tensor_names)
    assert p.layer("b").in_channels == 2 and p.layer("b").weights.shape == (3, 3, 2, 5)
    np.testing.assert_array_equal(p.layer("a").weights, g.layer("a").weights[..., [0, 2]])
    np.testing.assert_array_equal(p.layer("b").weights, g.layer("b").weights[:, :, [0, 2], :])


def test_empty_plan_is_identity(tiny):
    p = apply_plan(tiny, plan(tiny, {}))
    assert modelfile.dumps(p) == modelfile.dumps(tiny)
    x = np.random.default_rng(0).normal(size=(4, 32, 32, 3)).astype(np.float32)
    assert np.array_equal(forward(p, x), forward(tiny, x))
    assert check_equivalence(tiny, p) == 0.0


def test_original_unmodified(tiny):
    before = modelfile.dumps(tiny)
    apply_plan(tiny, make_plan(score_l1(tiny), 0.5))
    apply_plan(tiny, make_plan(score_l1(tiny), 0.5), "reinit")
    assert modelfile.dumps(tiny) == before


@pytest.mark.parametrize("conv_id,channel", [("conv1", 5), ("conv2", 0), ("conv3", 63)])
def test_zero_channel_is_function_preserving(tiny, conv_id, channel):
    conv = tiny.layer(conv_id)
    bn = tiny.layers[tiny.index(conv_id) + 1]
    conv.weights[..., channel] = 0
    conv.bias[channel] = 0
    bn.gamma[channel] = 0
    bn.beta[channel] = 0
    pruned = apply_plan(tiny, plan(tiny, {conv_id: [channel]}))
    assert check_equivalence(tiny, pruned, n_inputs=10, seed=3) <= 1e-6


def test_unrelated_graphs_report_not_raise():
    a, b = build_preset("tiny", 10, 1), build_preset("tiny", 10, 2)
    assert check_equivalence(a, b, n_inputs=2, tol=1e-6) > 1e-6


def test_equivalence_shape_mismatch():
    with pytest.raises(InvalidArgument):
        check_equivalence(build_preset("tiny", 10, 1), build_preset("imagenet", 10, 1, materialize=False))


def test_flatten_dense_row_remap(tiny):
    removed = [1, 2, 40]
    p = apply_plan(tiny, plan(tiny, {"conv3": removed}))
    keep = [c for c in range(64) if c not in removed]
    w_old = tiny.layer("dense").weights
    w_new = p.layer("dense").weights
    assert w_new.shape == (4 * 4 * 61, 10)
    row = 0
    for h in range(4):
        for w in range(4):
            for c in keep:
                assert np.array_equal(w_new[row], w_old[(h * 4 + w) * 64 + c])
                row += 1


# ---------------------------------------------------------------- consumer map


def test_consumer_map_tiny(tiny):
    cm = consumer_map(tiny)
    assert cm["conv1"] == [("bn1", "bn-slice"), ("relu1", "pass"), ("pool1", "pass"), ("conv2", "input-slice")]
    assert cm["conv3"][-1] == ("dense", "flatten-remap")
    assert set(cm) == {"conv1", "conv2", "conv3"}


def test_two_flattens_is_structure_error():
    g = ModelGraph([Conv2D("c", 3, 4), BatchNorm("bn", 4), Flatten("f1"), Flatten("f2"), Dense("d", 64, 2)],
                   (4, 4, 3), 2)
    with pytest.raises(StructureError):
        consumer_map(g)


# ---------------------------------------------------------------- errors


def test_fingerprint_mismatch(tiny):
    with pytest.raises(PlanMismatch):
        apply_plan(tiny, PrunePlan({"conv1": [0]}, "0" * 16))


@pytest.mark.parametrize("removals", [{"conv1": list(range(16))}, {"conv1": [16]}, {"dense": [0]},
                                      {"bn1": [0]}, {"nope": [1]}])
def test_invalid_plans(tiny, removals):
    with pytest.raises(InvalidPlan):
        apply_plan(tiny, plan(tiny, removals))


def test_unsorted_raw_plan_is_rejected(tiny):
    p = plan(tiny, {"conv1": [0]})
    p.removals["conv1"] = [3, 1]
    with pytest.raises(InvalidPlan):
        apply_plan(tiny, p)


def test_policy_coercion():
    assert WeightPolicy.coerce(True).mode == "reload"
    assert WeightPolicy.coerce("reinit").mode == "reinit"
    with pytest.raises(InvalidArgument):
        WeightPolicy("keep")


# ---------------------------------------------------------------- properties


@st.composite
def random_plans(draw, graph):
    removals = {}
    for conv in graph.convs():
        k = draw(st.integers(0, conv.out_channels - 1))
        idx = draw(st.permutations(range(conv.out_channels)))[:k]
        if idx:
            removals[conv.id] = sorted(idx)
    return plan(graph, removals)


TINY = randomize_bn(build_preset("tiny", 10, 7), 7)


@settings(max_examples=25, deadline=None)
@given(data=st.data())
def test_counting_matches_independent_recount(data):
    p = data.draw(random_plans(TINY))
    pruned = apply_plan(TINY, p)
    assert param_count(pruned) == param_count(TINY) - recount_removed(TINY, p.removals)
    assert param_count(pruned) == sum(a.size for _, _, a in pruned.tensors())
    infer_shapes(pruned, 2)
    pruned.validate()


@settings(max_examples=25, deadline=None)
@given(data=st.data())
def test_reload_fidelity(data):
    p = data.draw(random_plans(TINY))
    pruned = apply_plan(TINY, p, "reload")
    keep = {c.id: np.setdiff1d(np.arange(c.out_channels), p.removals.get(c.id, [])) for c in TINY.convs()}
    prev = None
    for layer in TINY.layers:
        new = pruned.layer(layer.id)
        if isinstance(layer, Conv2D):
            w = layer.weights if prev is None else layer.weights[:, :, prev, :]
            assert new.weights.tobytes() == w[..., keep[layer.id]].tobytes()
            assert new.bias.tobytes() == layer.bias[keep[layer.id]].tobytes()
            prev = keep[layer.id]
        elif isinstance(layer, BatchNorm):
            for n in layer.tensor_names:
                assert getattr(new, n).tobytes() == getattr(layer, n)[prev].tobytes()


@settings(max_examples=25, deadline=None)
@given(data=st.data())
def test_composition(data):
    p1 = data.draw(random_plans(TINY))
    mid = apply_plan(TINY, p1)
    p2 = data.draw(random_plans(mid))
    twice = apply_plan(mid, p2)
    once = apply_plan(TINY, compose_plans(TINY, p1, p2))
    assert twice.structure() == once.structure()
    assert modelfile.dumps(twice) == modelfile.dumps(once)


def test_reinit_is_seeded(tiny):
    p = make_plan(score_l1(tiny), 0.5)
    a = apply_plan(tiny, p, WeightPolicy("reinit", 3))
    b = apply_plan(tiny, p, WeightPolicy("reinit", 3))
    c = apply_plan(tiny, p, WeightPolicy("reinit", 4))
    assert modelfile.dumps(a) == modelfile.dumps(b) != modelfile.dumps(c)
    assert np.all(a.layer("bn1").gamma == 1)


@settings(max_examples=6, deadline=None)
@given(preset=st.sampled_from(["tiny", "cifar"]), data=st.data())
def test_pruned_graphs_train(preset, data):
    g = randomize_bn(build_preset(preset, 3, 5), 5)
    p = data.draw(random_plans(g))
    reload = data.draw(st.booleans())
    pruned = apply_plan(g, p, "reload" if reload else "reinit")
    ds = synth_dataset(0, 6, 3, g.input_shape)
    model, log = train(pruned, ds, ds, Hyperparams(batch_size=4, max_epochs=1))
    assert len(log) == 1 and np.isfinite(log.last.train_loss)
