"""Feature predictor: layerwise graph-weighted message passing.

Each layer averages the per-head weighted sums of previous-layer features
(weights given by the affinity matrices) and feeds the message through a
gated recurrent cell with the previous feature as state.  Used only
during pretraining; the transfer phase discards it.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .config import ModelConfig
from .graphs import AffinityStack, _check_tokens, causal_mask, normalize_affinity


def init_feature_params(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    params: dict[str, Tensor] = {}

    def uniform(name, shape, fan_in):
        s = fan_in ** -0.5
        params[name] = Tensor(rng.uniform(-s, s, size=shape),
                              requires_grad=True, name=name)

    params["f.embed"] = Tensor(rng.normal(0.0, 0.1, size=(cfg.vocab_size, cfg.d_f)),
                               requires_grad=True, name="f.embed")
    d = cfg.d_f
    for l in range(cfg.n_layers):
        if cfg.composition == "gru":
            for gate in ("update", "reset", "cand"):
                uniform(f"f.l{l}.{gate}.w", (2 * d, d), 2 * d)
                params[f"f.l{l}.{gate}.b"] = Tensor(
                    np.zeros(d), requires_grad=True, name=f"f.l{l}.{gate}.b")
        else:
            uniform(f"f.l{l}.lin.w", (2 * d, d), 2 * d)
            params[f"f.l{l}.lin.b"] = Tensor(
                np.zeros(d), requires_grad=True, name=f"f.l{l}.lin.b")
    if cfg.decouple_off:
        # coupled ablation: keys/queries are linear maps of the features
        for dname in ("forward", "backward"):
            for l in range(cfg.n_layers):
                for h in range(cfg.n_heads):
                    uniform(f"f.{dname}.l{l}.h{h}.wk", (d, cfg.d_a), d)
                    uniform(f"f.{dname}.l{l}.h{h}.wq", (d, cfg.d_a), d)
            params[f"f.{dname}.bias"] = Tensor(np.array(-1.0), requires_grad=True,
                                               name=f"f.{dname}.bias")
    return params


def embed(tokens, params: dict[str, Tensor], cfg: ModelConfig) -> Tensor:
    """(B, T, d_f) zero-th layer features: one embedding row per token."""
    tokens = _check_tokens(tokens, cfg.vocab_size)
    return ad.embedding_lookup(params["f.embed"], tokens)


def gru_cell(message: Tensor, state: Tensor, params: dict[str, Tensor],
             layer: int) -> Tensor:
    """Gated recurrent cell over rows: input `message`, state `state`,
    both (N, d_f)."""
    p = params
    zin = ad.concat([message, state], axis=-1)
    z = ad.sigmoid(ad.matmul(zin, p[f"f.l{layer}.update.w"]) + p[f"f.l{layer}.update.b"])
    r = ad.sigmoid(ad.matmul(zin, p[f"f.l{layer}.reset.w"]) + p[f"f.l{layer}.reset.b"])
    cin = ad.concat([message, ad.mul(r, state)], axis=-1)
    cand = ad.tanh(ad.matmul(cin, p[f"f.l{layer}.cand.w"]) + p[f"f.l{layer}.cand.b"])
    one = Tensor(1.0)
    return ad.mul(one - z, state) + ad.mul(z, cand)


def _compose_cell(message: Tensor, state: Tensor, params: dict[str, Tensor],
                  layer: int, cfg: ModelConfig) -> Tensor:
    if cfg.composition == "gru":
        return gru_cell(message, state, params, layer)
    lin = ad.matmul(ad.concat([message, state], axis=-1),
                    params[f"f.l{layer}.lin.w"]) + params[f"f.l{layer}.lin.b"]
    return ad.relu(lin) + state


def compose_layer(feats: Tensor, graphs: list[Tensor], params: dict[str, Tensor],
                  layer: int, cfg: ModelConfig) -> Tensor:
    """One message-passing layer.

    feats: (B, T, d_f); graphs: per-head (B, T, T) column-stochastic
    matrices.  Message at t is the head-average of sum_j G[j, t] * f_j.
    """
    B, T, d = feats.shape
    for g in graphs:
        if g.shape != (B, T, T):
            raise ShapeError(
                f"compose_layer: graph shape {g.shape} does not match features {feats.shape}")
    acc = None
    for g in graphs:
        m = ad.bmm(ad.transpose(g, (0, 2, 1)), feats)
        acc = m if acc is None else acc + m
    message = ad.mul(acc, Tensor(1.0 / len(graphs)))
    out = _compose_cell(ad.reshape(message, (B * T, d)),
                        ad.reshape(feats, (B * T, d)), params, layer, cfg)
    return ad.reshape(out, (B, T, d))


def forward_features(tokens, stack: AffinityStack, params: dict[str, Tensor],
                     cfg: ModelConfig) -> Tensor:
    """Embed then apply every composition layer; returns (B, T, d_f)."""
    feats = embed(tokens, params, cfg)
    for l in range(stack.n_layers):
        feats = compose_layer(feats, stack.mats[l], params, l, cfg)
    return feats


def forward_features_coupled(tokens, params: dict[str, Tensor], cfg: ModelConfig,
                             direction: str) -> tuple[Tensor, AffinityStack]:
    """decouple_off ablation: per-layer affinities computed from the
    features themselves via linear key/query maps, no separate encoders."""
    tokens = _check_tokens(tokens, cfg.vocab_size)
    T = tokens.shape[1]
    mask = causal_mask(T, direction)
    feats = embed(tokens, params, cfg)
    mats: list[list[Tensor]] = []
    for l in range(cfg.n_layers):
        B, _, d = feats.shape
        flat = ad.reshape(feats, (B * T, d))
        row = []
        for h in range(cfg.n_heads):
            k2 = ad.reshape(ad.matmul(flat, params[f"f.{direction}.l{l}.h{h}.wk"]),
                            (B, T, cfg.d_a))
            q2 = ad.reshape(ad.matmul(flat, params[f"f.{direction}.l{l}.h{h}.wq"]),
                            (B, T, cfg.d_a))
            scores = ad.bmm(k2, ad.transpose(q2, (0, 2, 1))) + params[f"f.{direction}.bias"]
            row.append(normalize_affinity(scores, mask, cfg.affinity_mode))
        mats.append(row)
        feats = compose_layer(feats, row, params, l, cfg)
    return feats, AffinityStack(direction, mats, T)
