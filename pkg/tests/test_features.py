import numpy as np
import pytest

from relgraph.autodiff import ShapeError, Tensor
from relgraph.config import ModelConfig
from relgraph.features import (
    compose_layer,
    embed,
    forward_features,
    forward_features_coupled,
    gru_cell,
    init_feature_params,
)
from relgraph.graphs import causal_mask, init_graph_params, predict_graphs


def cfg_of(**kw):
    base = dict(vocab_size=9, d_g=8, d_a=4, d_f=8, n_layers=2, n_heads=2)
    base.update(kw)
    return ModelConfig(**base)


def column_stochastic(rng, B, T, direction="forward"):
    raw = np.abs(rng.normal(size=(B, T, T))) + 0.1
    raw *= causal_mask(T, direction)
    return Tensor(raw / raw.sum(axis=1, keepdims=True))


def test_embed_shape_and_rows():
    cfg = cfg_of()
    params = init_feature_params(cfg, np.random.default_rng(0))
    tokens = np.array([[2, 5, 2]])
    out = embed(tokens, params, cfg)
    assert out.shape == (1, 3, cfg.d_f)
    np.testing.assert_array_equal(out.data[0, 0], out.data[0, 2])
    np.testing.assert_array_equal(out.data[0, 1], params["f.embed"].data[5])


def test_gru_cell_zero_params_halves_state():
    cfg = cfg_of()
    params = init_feature_params(cfg, np.random.default_rng(0))
    for k, p in params.items():
        if k.startswith("f.l0."):
            p.data[...] = 0.0
    state = np.random.default_rng(1).normal(size=(4, cfg.d_f))
    out = gru_cell(Tensor(np.ones((4, cfg.d_f))), Tensor(state), params, 0)
    # z = r = sigmoid(0) = 0.5, candidate = tanh(0) = 0
    np.testing.assert_allclose(out.data, 0.5 * state)


def test_identical_features_give_identical_messages():
    # columns sum to one, so a constant feature field is a fixed point of
    # the message computation regardless of the graph
    cfg = cfg_of()
    rng = np.random.default_rng(2)
    params = init_feature_params(cfg, rng)
    row = rng.normal(size=cfg.d_f)
    feats = Tensor(np.tile(row, (1, 6, 1)))
    g1 = compose_layer(feats, [column_stochastic(rng, 1, 6)], params, 0, cfg)
    g2 = compose_layer(feats, [Tensor(np.tile(np.eye(6), (1, 1, 1)))], params, 0, cfg)
    np.testing.assert_allclose(g1.data, g2.data, atol=1e-12)


def test_identity_graph_is_self_message():
    cfg = cfg_of()
    rng = np.random.default_rng(3)
    params = init_feature_params(cfg, rng)
    feats = Tensor(rng.normal(size=(2, 5, cfg.d_f)))
    eye = Tensor(np.tile(np.eye(5), (2, 1, 1)))
    out = compose_layer(feats, [eye], params, 0, cfg)
    flat = feats.data.reshape(-1, cfg.d_f)
    expect = gru_cell(Tensor(flat), Tensor(flat), params, 0).data
    np.testing.assert_allclose(out.data, expect.reshape(2, 5, cfg.d_f))


def test_head_average_of_duplicates_matches_single_head():
    cfg = cfg_of()
    rng = np.random.default_rng(4)
    params = init_feature_params(cfg, rng)
    feats = Tensor(rng.normal(size=(1, 5, cfg.d_f)))
    g = column_stochastic(rng, 1, 5)
    one = compose_layer(feats, [g], params, 0, cfg)
    two = compose_layer(feats, [g, g], params, 0, cfg)
    np.testing.assert_allclose(one.data, two.data, atol=1e-12)


def test_compose_rejects_mismatched_graph():
    cfg = cfg_of()
    rng = np.random.default_rng(5)
    params = init_feature_params(cfg, rng)
    feats = Tensor(rng.normal(size=(1, 5, cfg.d_f)))
    with pytest.raises(ShapeError, match="compose_layer"):
        compose_layer(feats, [column_stochastic(rng, 1, 4)], params, 0, cfg)


def test_forward_features_shape_and_determinism():
    cfg = cfg_of()
    rng = np.random.default_rng(6)
    gp = init_graph_params(cfg, rng)
    fp = init_feature_params(cfg, rng)
    tokens = rng.integers(0, cfg.vocab_size, size=(3, 7))
    stack, _ = predict_graphs(tokens, gp, cfg)
    a = forward_features(tokens, stack, fp, cfg)
    b = forward_features(tokens, stack, fp, cfg)
    assert a.shape == (3, 7, cfg.d_f)
    np.testing.assert_array_equal(a.data, b.data)


def test_linear_composition_runs():
    cfg = cfg_of(composition="linear")
    rng = np.random.default_rng(7)
    params = init_feature_params(cfg, rng)
    assert "f.l0.lin.w" in params and "f.l0.update.w" not in params
    feats = Tensor(rng.normal(size=(1, 4, cfg.d_f)))
    out = compose_layer(feats, [column_stochastic(rng, 1, 4)], params, 0, cfg)
    assert out.shape == (1, 4, cfg.d_f)


@pytest.mark.parametrize("direction", ["forward", "backward"])
def test_coupled_path_masks_and_stochasticity(direction):
    cfg = cfg_of(decouple_off=True)
    rng = np.random.default_rng(8)
    params = init_feature_params(cfg, rng)
    tokens = rng.integers(0, cfg.vocab_size, size=(2, 6))
    feats, stack = forward_features_coupled(tokens, params, cfg, direction)
    assert feats.shape == (2, 6, cfg.d_f)
    assert stack.n_layers == cfg.n_layers and stack.n_heads == cfg.n_heads
    mask = causal_mask(6, direction)
    for row in stack.mats:
        for m in row:
            np.testing.assert_allclose(m.data.sum(axis=1), 1.0, atol=1e-9)
            assert np.all(m.data[:, mask == 0] == 0.0)
