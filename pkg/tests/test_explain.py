import numpy as np
import pytest

from milexplain.bags import Bag
from milexplain.explain import (ExplanationTarget, Heatmap, compute_heatmap,
                                default_target, explain_attention,
                                explain_gxi, explain_grad2, explain_ig,
                                explain_random, explain_single,
                                load_heatmap_csv, save_heatmap_csv,
                                target_value)
from milexplain.graph import CompGraph
from milexplain.models import (ForwardTrace, ModelSpec, TaskHeadSpec,
                               forward_bag, init_checkpoint, survival_curve)

from test_models import make_ckpt


def make_bag(n=6, d=8, seed=0, bag_id="b0"):
    rng = np.random.default_rng(seed)
    return Bag(id=bag_id, features=rng.standard_normal((n, d)))


def linear_trace(x, w):
    """A model that is exactly linear in its inputs: f = sum(x @ w)."""
    g = CompGraph()
    xn = g.input("x")
    out = g.sum(g.matmul(xn, g.input("w")))
    g.set_output(out)
    g.forward({"x": x, "w": w})
    spec = ModelSpec("attnmil", d_in=x.shape[1],
                     head=TaskHeadSpec("regression"))
    trace = ForwardTrace(graph=g, spec=spec, n_instances=x.shape[0],
                         feature_node=xn, output_node=out, logits_node=out)
    trace.value = float(g.value(out))
    trace.logits = np.array([trace.value])
    return trace


# ----- attention ------------------------------------------------------------

def test_attention_attnmil_singleton():
    ckpt = make_ckpt("attnmil")
    bag = make_bag(n=1)
    hm = explain_attention(forward_bag(ckpt, bag.features), bag.id)
    np.testing.assert_allclose(hm.scores, [1.0])


def test_attention_attnmil_sums_to_one_nonnegative():
    ckpt = make_ckpt("mambamil")
    bag = make_bag(n=9, seed=1)
    hm = explain_attention(forward_bag(ckpt, bag.features), bag.id)
    assert np.all(hm.scores >= 0)
    assert abs(hm.scores.sum() - 1.0) < 1e-9


def test_attention_rollout_identity_gives_zeros():
    ckpt = make_ckpt("transmil")
    trace = forward_bag(ckpt, make_bag(n=3, seed=2).features)
    trace.attn_layers = [np.eye(4), np.eye(4)]
    trace.pooling_weights = None
    hm = explain_attention(trace, "b0")
    np.testing.assert_array_equal(hm.scores, np.zeros(3))


def test_attention_rollout_matches_hand_product():
    ckpt = make_ckpt("transmil")
    trace = forward_bag(ckpt, make_bag(n=2, seed=3).features)
    uniform = np.full((3, 3), 1.0 / 3.0)
    trace.attn_layers = [uniform, uniform]
    trace.pooling_weights = None
    hm = explain_attention(trace, "b0")
    factor = 0.5 * uniform + 0.5 * np.eye(3)
    hand = (factor @ factor)[0, 1:]
    np.testing.assert_allclose(hm.scores, hand, atol=1e-12)
    assert np.allclose(hm.scores, hm.scores[0])  # uniform over instances


# ----- gradient x input -----------------------------------------------------

def test_gxi_linear_model_completeness():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((5, 3))
    w = rng.standard_normal((3, 2))
    trace = linear_trace(x, w)
    hm = explain_gxi(trace, ExplanationTarget("regression_diff"), "b0")
    assert abs(hm.scores.sum() - trace.value) < 1e-10  # f(0) = 0


def test_gxi_zero_instance_scores_zero():
    ckpt = make_ckpt("attnmil")
    x = np.random.default_rng(5).standard_normal((4, 8))
    x[2] = 0.0
    trace = forward_bag(ckpt, x)
    hm = explain_gxi(trace, default_target(ckpt, trace), "b0")
    assert hm.scores[2] == 0.0


def test_gxi_matches_finite_difference_directional_derivative():
    ckpt = make_ckpt("attnmil", seed=6)
    bag = make_bag(n=5, seed=6)
    trace = forward_bag(ckpt, bag.features)
    target = ExplanationTarget("class_logit", 1)
    hm = explain_gxi(trace, target, bag.id)
    # directional derivative along x itself: sum_n gxi_n = d/dt f((1+t) x)
    h = 1e-6
    up = target_value(target, forward_bag(ckpt, (1 + h) * bag.features))
    dn = target_value(target, forward_bag(ckpt, (1 - h) * bag.features))
    assert abs(hm.scores.sum() - (up - dn) / (2 * h)) < 1e-5


# ----- squared gradients ----------------------------------------------------

def test_grad2_constant_model_zero():
    ckpt = make_ckpt("attnmil", seed=7)
    ckpt.params["embed.w"] = np.zeros_like(ckpt.params["embed.w"])
    bag = make_bag(n=4, seed=7)
    trace = forward_bag(ckpt, bag.features)
    hm = explain_grad2(trace, ExplanationTarget("class_logit", 0), bag.id)
    np.testing.assert_allclose(hm.scores, np.zeros(4), atol=1e-20)


def test_grad2_nonnegative_and_matches_gradients():
    ckpt = make_ckpt("attnmil", seed=8)
    bag = make_bag(n=5, seed=8)
    trace = forward_bag(ckpt, bag.features)
    target = ExplanationTarget("class_logit", 1)
    hm = explain_grad2(trace, target, bag.id)
    assert np.all(hm.scores >= 0)
    seed = np.zeros(2)
    seed[1] = 1.0
    g = trace.graph.backward(seed)["x"]
    np.testing.assert_allclose(hm.scores, (g ** 2).sum(axis=1), atol=1e-15)


# ----- integrated gradients -------------------------------------------------

def test_ig_equals_gxi_for_linear_model():
    rng = np.random.default_rng(9)
    x = rng.standard_normal((4, 3))
    w = rng.standard_normal((3, 2))
    trace = linear_trace(x, w)
    gxi = explain_gxi(trace, ExplanationTarget("regression_diff"), "b0")
    # integrate the same linear graph by hand with 1 step (constant gradient)
    grads = trace.graph.backward(np.asarray(1.0))["x"]
    ig_scores = (x * grads).sum(axis=1)
    np.testing.assert_allclose(gxi.scores, ig_scores, atol=1e-12)


@pytest.mark.parametrize("arch", ["attnmil", "transmil", "mambamil"])
def test_ig_completeness(arch):
    ckpt = make_ckpt(arch, seed=10)
    bag = make_bag(n=6, seed=10)
    trace = forward_bag(ckpt, bag.features)
    target = default_target(ckpt, trace)
    hm = explain_ig(ckpt, bag, target, steps=256)
    full = target_value(target, trace)
    zero = target_value(target, forward_bag(ckpt, np.zeros_like(bag.features)))
    gap = full - zero
    assert abs(hm.scores.sum() - gap) <= 0.01 * abs(gap)


def test_ig_zero_bag_gives_zeros():
    ckpt = make_ckpt("attnmil")
    bag = Bag(id="z", features=np.zeros((3, 8)))
    hm = explain_ig(ckpt, bag, ExplanationTarget("class_logit", 0), steps=8)
    np.testing.assert_array_equal(hm.scores, np.zeros(3))


def test_ig_completeness_gap_shrinks_with_steps():
    ckpt = make_ckpt("transmil", seed=11)
    bag = make_bag(n=5, seed=11)
    trace = forward_bag(ckpt, bag.features)
    target = default_target(ckpt, trace)
    full = target_value(target, trace)
    zero = target_value(target, forward_bag(ckpt, np.zeros_like(bag.features)))
    gaps = []
    for steps in (8, 32, 128, 512):
        hm = explain_ig(ckpt, bag, target, steps=steps)
        gaps.append(abs(hm.scores.sum() - (full - zero)))
    assert gaps[-1] <= gaps[0] + 1e-9
    assert gaps[2] <= gaps[0] * 1.05 + 1e-9


# ----- single ---------------------------------------------------------------

def test_single_singleton_bag_equals_full_output():
    ckpt = make_ckpt("attnmil", seed=12)
    bag = make_bag(n=1, seed=12)
    trace = forward_bag(ckpt, bag.features)
    target = default_target(ckpt, trace)
    hm = explain_single(ckpt, bag, target)
    assert abs(hm.scores[0] - trace.probs[target.class_index]) < 1e-12


def test_single_classification_scores_in_unit_interval():
    ckpt = make_ckpt("transmil", seed=13)
    bag = make_bag(n=7, seed=13)
    hm = explain_single(ckpt, bag, ExplanationTarget("class_logit", 1))
    assert np.all(hm.scores >= 0) and np.all(hm.scores <= 1)


def test_single_survival_scores_in_risk_range():
    ckpt = make_ckpt("attnmil", task="survival", seed=14)
    bag = make_bag(n=6, seed=14)
    hm = explain_single(ckpt, bag, ExplanationTarget("survival_risk"))
    assert np.all(hm.scores > -4) and np.all(hm.scores < 0)


def test_single_attnmil_equals_direct_head_evaluation():
    # a singleton bag forces attention weight 1, so Single must equal the
    # head applied to that instance's embedding
    ckpt = make_ckpt("attnmil", seed=15)
    p = ckpt.params
    bag = make_bag(n=5, seed=15)
    hm = explain_single(ckpt, bag, ExplanationTarget("class_logit", 1))
    for n in range(5):
        h = np.maximum(bag.features[n] @ p["embed.w"] + p["embed.b"], 0.0)
        logits = h @ p["head.w"] + p["head.b"]
        prob = np.exp(logits - logits.max())
        prob /= prob.sum()
        assert abs(hm.scores[n] - prob[1]) < 1e-12


# ----- random ---------------------------------------------------------------

def test_random_reproducible_and_in_range():
    bag = make_bag(n=20, seed=16)
    t = ExplanationTarget("regression_diff")
    a = explain_random(bag, t, seed=5)
    b = explain_random(bag, t, seed=5)
    c = explain_random(bag, t, seed=6)
    np.testing.assert_array_equal(a.scores, b.scores)
    assert not np.array_equal(a.scores, c.scores)
    assert np.all(a.scores >= 0) and np.all(a.scores <= 1)


# ----- shared properties ----------------------------------------------------

@pytest.mark.parametrize("arch", ["attnmil", "transmil"])
def test_gradient_methods_permutation_equivariant(arch):
    ckpt = make_ckpt(arch, seed=17)
    rng = np.random.default_rng(17)
    x = rng.standard_normal((6, 8))
    perm = rng.permutation(6)
    bag_a = Bag(id="a", features=x)
    bag_b = Bag(id="b", features=x[perm])
    target = ExplanationTarget("class_logit", 0)
    for maker in (lambda b: explain_gxi(forward_bag(ckpt, b.features),
                                        target, b.id),
                  lambda b: explain_grad2(forward_bag(ckpt, b.features),
                                          target, b.id),
                  lambda b: explain_ig(ckpt, b, target, steps=16)):
        ha = maker(bag_a)
        hb = maker(bag_b)
        np.testing.assert_allclose(ha.scores[perm], hb.scores, atol=1e-9)


def test_compute_heatmap_dispatch_and_csv_roundtrip(tmp_path):
    ckpt = make_ckpt("attnmil", seed=18)
    bag = make_bag(n=5, seed=18)
    for method in ("attention", "gxi", "grad2", "ig", "single", "lrp",
                   "random"):
        hm = compute_heatmap(method, ckpt, bag, seed=1, ig_steps=8)
        assert hm.scores.shape == (5,)
        path = tmp_path / f"{method}.csv"
        save_heatmap_csv(hm, path)
        back = load_heatmap_csv(path)
        np.testing.assert_array_equal(back.scores, hm.scores)
        assert back.method == hm.method
        assert back.target == hm.target
