"""Graph predictor: masked key/query convolutional encoders producing,
per direction, layer and head, a column-stochastic sparse affinity matrix.

Column t of an affinity matrix weights how much each source position j
contributes to target position t.  Forward matrices allow sources j <= t
(upper-triangular with rows indexed by source), backward matrices allow
j >= t; normalization uses
squared-ReLU numerators, so pruned entries are exact zeros.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .config import ModelConfig

DIRECTIONS = ("forward", "backward")


@dataclass
class AffinityStack:
    """All affinity matrices for one direction: mats[layer][head] is a
    Tensor shaped (B, T, T)."""

    direction: str
    mats: list  # list[list[Tensor]]
    seq_len: int

    @property
    def n_layers(self) -> int:
        return len(self.mats)

    @property
    def n_heads(self) -> int:
        return len(self.mats[0])

    def numpy(self) -> np.ndarray:
        """(L, n_h, B, T, T) array of detached values."""
        return np.stack([np.stack([m.data for m in row]) for row in self.mats])


def causal_mask(seq_len: int, direction: str) -> np.ndarray:
    """(T, T) 0/1 mask; entry [j, t] = 1 iff source j is allowed for
    target t.  Self (j == t) is always allowed."""
    if direction == "forward":
        return np.triu(np.ones((seq_len, seq_len)))
    if direction == "backward":
        return np.tril(np.ones((seq_len, seq_len)))
    raise ValueError(f"unknown direction {direction!r}")


def init_graph_params(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    params: dict[str, Tensor] = {}

    def uniform(name, shape, fan_in):
        s = fan_in ** -0.5
        params[name] = Tensor(rng.uniform(-s, s, size=shape),
                              requires_grad=True, name=name)

    params["g.embed"] = Tensor(rng.normal(0.0, 0.1, size=(cfg.vocab_size, cfg.d_g)),
                               requires_grad=True, name="g.embed")
    kw = cfg.kernel_width
    for d in DIRECTIONS:
        for net in ("key", "query"):
            for i in range(cfg.n_conv):
                uniform(f"g.{d}.{net}.conv{i}.w", (kw, cfg.d_g, cfg.d_g), kw * cfg.d_g)
                params[f"g.{d}.{net}.conv{i}.b"] = Tensor(
                    np.zeros(cfg.d_g), requires_grad=True, name=f"g.{d}.{net}.conv{i}.b")
        # shared scalar bias per direction, negative to encourage sparsity
        params[f"g.{d}.bias"] = Tensor(np.array(-1.0), requires_grad=True,
                                       name=f"g.{d}.bias")
        for l in range(cfg.n_layers):
            for h in range(cfg.n_heads):
                uniform(f"g.{d}.l{l}.h{h}.wk", (cfg.d_g, cfg.d_a), cfg.d_g)
                uniform(f"g.{d}.l{l}.h{h}.wq", (cfg.d_g, cfg.d_a), cfg.d_g)
    return params


def _check_tokens(tokens: np.ndarray, vocab_size: int) -> np.ndarray:
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim == 1:
        tokens = tokens[None]
    bad = np.argwhere((tokens < 0) | (tokens >= vocab_size))
    if bad.size:
        b, t = bad[0]
        raise ShapeError(f"token id out of vocabulary at batch {b} position {t}")
    return tokens


def encode_keys_queries(tokens, params: dict[str, Tensor], cfg: ModelConfig,
                        direction: str) -> tuple[Tensor, Tensor]:
    """Run the key and query CNNs; returns two (B, T, d_g) tensors whose
    position t depends only on tokens <= t (forward) / >= t (backward)."""
    tokens = _check_tokens(tokens, cfg.vocab_size)
    emb = ad.embedding_lookup(params["g.embed"], tokens)
    outs = []
    for net in ("key", "query"):
        h = emb
        for i in range(cfg.n_conv):
            conv = ad.causal_conv1d(h, params[f"g.{direction}.{net}.conv{i}.w"],
                                    params[f"g.{direction}.{net}.conv{i}.b"],
                                    direction)
            h = ad.relu(conv) + h
        outs.append(h)
    return outs[0], outs[1]


def affinity_layer(keys: Tensor, queries: Tensor, layer: int, head: int,
                   params: dict[str, Tensor], cfg: ModelConfig,
                   direction: str, mode: str | None = None) -> Tensor:
    """One (B, T, T) column-stochastic affinity matrix.

    mode "squared_relu" (default): numerators ReLU(k.q + b)^2, hard zeros,
    degenerate all-zero columns fall back to a one-hot at self.
    mode "softmax": exponential numerators (the sparse_off ablation).
    """
    mode = mode or cfg.affinity_mode
    B, T, _ = keys.shape
    wk = params[f"g.{direction}.l{layer}.h{head}.wk"]
    wq = params[f"g.{direction}.l{layer}.h{head}.wq"]
    k2 = ad.reshape(ad.matmul(ad.reshape(keys, (B * T, cfg.d_g)), wk), (B, T, cfg.d_a))
    q2 = ad.reshape(ad.matmul(ad.reshape(queries, (B * T, cfg.d_g)), wq), (B, T, cfg.d_a))
    # scores[b, j, t] = k_j . q_t + b
    scores = ad.bmm(k2, ad.transpose(q2, (0, 2, 1))) + params[f"g.{direction}.bias"]
    mask = causal_mask(T, direction)
    return normalize_affinity(scores, mask, mode)


def normalize_affinity(scores: Tensor, mask: np.ndarray, mode: str) -> Tensor:
    """Column-normalize masked scores into a column-stochastic matrix."""
    T = mask.shape[0]
    if mode == "squared_relu":
        # the dead-column fallback branches on scores crossing zero
        ad._trace_kink(scores.data)
        numer = ad.mul(ad.squared_relu(scores), Tensor(mask))
    elif mode == "softmax":
        # additive mask, then a detached per-column shift for stability
        shifted = ad.mul(scores, Tensor(mask)) + Tensor((mask - 1.0) * 1e30)
        cmax = shifted.data.max(axis=-2, keepdims=True)
        numer = ad.exp(shifted - Tensor(cmax))
    else:
        raise ValueError(f"unknown affinity mode {mode!r}")
    colsum = ad.sum_axis(numer, axis=-2, keepdims=True)
    dead = (colsum.data == 0.0).astype(np.float64)       # (B, 1, T)
    denom = colsum + Tensor(dead)                        # avoid 0/0; numer is 0 there
    graph = ad.div(numer, denom)
    if dead.any():
        eye = np.eye(T)
        graph = graph + Tensor(dead * eye)               # one-hot at self
    return graph


def predict_graphs(tokens, params: dict[str, Tensor], cfg: ModelConfig,
                   mode: str | None = None) -> tuple[AffinityStack, AffinityStack]:
    """Full stacks for both directions: L x n_h matrices each."""
    tokens = _check_tokens(tokens, cfg.vocab_size)
    T = tokens.shape[1]
    stacks = []
    for d in DIRECTIONS:
        keys, queries = encode_keys_queries(tokens, params, cfg, d)
        mats = [[affinity_layer(keys, queries, l, h, params, cfg, d, mode)
                 for h in range(cfg.n_heads)]
                for l in range(cfg.n_layers)]
        stacks.append(AffinityStack(d, mats, T))
    return stacks[0], stacks[1]
