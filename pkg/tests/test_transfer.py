import numpy as np
import pytest

from relgraph import autodiff as ad
from relgraph.autodiff import ShapeError, Tensor
from relgraph.config import ModelConfig
from relgraph.graphs import AffinityStack, causal_mask, init_graph_params, predict_graphs
from relgraph.transfer import (
    cumulative_products,
    extract_components,
    frozen_params,
    fuse,
    init_fusion_params,
    init_mixture_logits,
    mix_graphs,
    uniform_graph,
)


def cfg_of(**kw):
    base = dict(vocab_size=7, d_g=8, d_a=4, d_f=8, n_layers=2, n_heads=2)
    base.update(kw)
    return ModelConfig(**base)


def stoch(rng, B, T, direction="forward"):
    raw = (np.abs(rng.normal(size=(B, T, T))) + 0.1) * causal_mask(T, direction)
    return Tensor(raw / raw.sum(axis=1, keepdims=True))


def stack_of(rng, L, H, B, T, direction="forward"):
    return AffinityStack(direction,
                         [[stoch(rng, B, T, direction) for _ in range(H)]
                          for _ in range(L)], T)


def test_cumulative_product_two_by_two_by_hand():
    g1 = np.array([[[1.0, 0.5], [0.0, 0.5]]])
    g2 = np.array([[[1.0, 0.25], [0.0, 0.75]]])
    stack = AffinityStack("forward", [[Tensor(g1)], [Tensor(g2)]], 2)
    lam = cumulative_products(stack)
    np.testing.assert_array_equal(lam.mats[0][0].data, g1)
    np.testing.assert_allclose(lam.mats[1][0].data, (g1[0] @ g2[0])[None])


def test_cumulative_products_stay_column_stochastic():
    rng = np.random.default_rng(0)
    stack = stack_of(rng, 3, 2, 2, 5)
    lam = cumulative_products(stack)
    for row in lam.mats:
        for m in row:
            np.testing.assert_allclose(m.data.sum(axis=1), 1.0, atol=1e-9)
            assert np.all(m.data >= 0.0)


def test_mixture_logit_count_and_shape():
    cfg = cfg_of(n_layers=2, n_heads=3)
    logits = init_mixture_logits(cfg, "mix")
    assert logits.shape == (12,)


def test_mix_zero_logits_is_plain_average():
    rng = np.random.default_rng(1)
    stack = stack_of(rng, 2, 2, 1, 4)
    lam = cumulative_products(stack)
    mixed = mix_graphs(stack, lam, Tensor(np.zeros(8)))
    comps = [m.data for row in stack.mats for m in row]
    comps += [m.data for row in lam.mats for m in row]
    np.testing.assert_allclose(mixed.data, np.mean(comps, axis=0), atol=1e-12)


def test_mix_saturated_logit_selects_component():
    rng = np.random.default_rng(2)
    stack = stack_of(rng, 2, 1, 1, 4)
    lam = cumulative_products(stack)
    logits = np.full(4, -30.0)
    logits[2] = 30.0                       # first Lambda component
    mixed = mix_graphs(stack, lam, Tensor(logits))
    np.testing.assert_allclose(mixed.data, lam.mats[0][0].data, atol=1e-9)


def test_mix_is_shift_invariant():
    rng = np.random.default_rng(3)
    stack = stack_of(rng, 2, 2, 1, 4)
    lam = cumulative_products(stack)
    logits = rng.normal(size=8)
    a = mix_graphs(stack, lam, Tensor(logits))
    b = mix_graphs(stack, lam, Tensor(logits + 100.0))
    np.testing.assert_allclose(a.data, b.data, atol=1e-9)


def test_mix_rejects_wrong_logit_count():
    rng = np.random.default_rng(4)
    stack = stack_of(rng, 2, 2, 1, 4)
    with pytest.raises(ShapeError, match="logits"):
        mix_graphs(stack, cumulative_products(stack), Tensor(np.zeros(5)))


def test_mix_gradient_flows_to_logits():
    rng = np.random.default_rng(5)
    stack = stack_of(rng, 1, 2, 1, 3)
    logits = Tensor(np.zeros(4), requires_grad=True, name="mix")
    out = ad.sum_axis(ad.mul(mix_graphs(stack, cumulative_products(stack), logits),
                             Tensor(rng.normal(size=(1, 3, 3)))))
    grads = ad.reverse_accumulate(out)
    assert np.any(grads["mix"].data != 0.0)


def test_uniform_graph_forward_columns():
    g = uniform_graph(3, "forward")
    np.testing.assert_allclose(g[:, 0], [1.0, 0.0, 0.0])
    np.testing.assert_allclose(g[:, 1], [0.5, 0.5, 0.0])
    np.testing.assert_allclose(g[:, 2], [1 / 3, 1 / 3, 1 / 3])


def test_uniform_graph_backward_columns():
    g = uniform_graph(3, "backward")
    np.testing.assert_allclose(g[:, 0], [1 / 3, 1 / 3, 1 / 3])
    np.testing.assert_allclose(g[:, 2], [0.0, 0.0, 1.0])


def test_uniform_graph_rejects_empty():
    with pytest.raises(ValueError):
        uniform_graph(0, "forward")


def test_fuse_shapes_and_identity_graphs():
    rng = np.random.default_rng(6)
    d = 5
    params = init_fusion_params(d, rng)
    feats = Tensor(rng.normal(size=(2, 4, d)))
    eye = Tensor(np.tile(np.eye(4), (2, 1, 1)))
    out = fuse(feats, eye, eye, params["fuse.w1"], params["fuse.w2"])
    assert out.shape == (2, 4, 2 * d)
    np.testing.assert_array_equal(out.data[..., :d], feats.data)
    # with identity graphs the gated half is computed from [H; H]
    cat = np.concatenate([feats.data, feats.data], axis=-1).reshape(8, 2 * d)
    expect = (cat @ params["fuse.w1"].data) / (1 + np.exp(-(cat @ params["fuse.w2"].data)))
    np.testing.assert_allclose(out.data[..., d:].reshape(8, d), expect, atol=1e-12)


def test_fuse_rejects_mismatched_graph():
    rng = np.random.default_rng(7)
    params = init_fusion_params(3, rng)
    feats = Tensor(rng.normal(size=(1, 4, 3)))
    bad = Tensor(np.zeros((1, 3, 3)))
    with pytest.raises(ShapeError, match="fuse"):
        fuse(feats, bad, bad, params["fuse.w1"], params["fuse.w2"])


def test_frozen_params_share_data_but_not_gradients():
    p = {"w": Tensor(np.ones(3), requires_grad=True, name="w")}
    f = frozen_params(p)
    assert f["w"].data is p["w"].data or np.shares_memory(f["w"].data, p["w"].data)
    assert not f["w"].requires_grad


def test_extract_components_shapes_and_order():
    cfg = cfg_of()
    rng = np.random.default_rng(8)
    params = init_graph_params(cfg, rng)
    tokens = rng.integers(0, cfg.vocab_size, size=(2, 6))
    comps = extract_components(tokens, params, cfg)
    K = 2 * cfg.n_layers * cfg.n_heads
    for d in ("forward", "backward"):
        assert comps[d].shape == (2, K, 6, 6)
        assert comps[d].dtype == np.float32
    # first K/2 components are the raw graphs in (layer, head) order
    fstack, _ = predict_graphs(tokens, params, cfg)
    np.testing.assert_allclose(comps["forward"][:, 1],
                               fstack.mats[0][1].data.astype(np.float32))
    # the layer-0 cumulative product equals the layer-0 graph
    np.testing.assert_allclose(comps["forward"][:, K // 2],
                               comps["forward"][:, 0])


def test_extract_components_coupled_mode():
    cfg = cfg_of(decouple_off=True)
    rng = np.random.default_rng(9)
    from relgraph.features import init_feature_params
    params = init_feature_params(cfg, rng)
    tokens = rng.integers(0, cfg.vocab_size, size=(1, 5))
    comps = extract_components(tokens, params, cfg)
    assert comps["forward"].shape == (1, 2 * cfg.n_layers * cfg.n_heads, 5, 5)
