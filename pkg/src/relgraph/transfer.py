"""Transfer-phase math: cumulative graph products, softmax mixtures over
layers and heads, mask-respecting uniform baselines, and gated fusion of
task features with their graph-weighted sums."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .config import ModelConfig
from .features import forward_features_coupled
from .graphs import AffinityStack, causal_mask, predict_graphs


def cumulative_products(stack: AffinityStack) -> AffinityStack:
    """Per head, the running matrix product over layers:
    out[l][h] = mats[0][h] @ mats[1][h] @ ... @ mats[l][h]."""
    out: list[list[Tensor]] = []
    for l in range(stack.n_layers):
        row = []
        for h in range(stack.n_heads):
            if l == 0:
                row.append(stack.mats[0][h])
            else:
                row.append(ad.bmm(out[l - 1][h], stack.mats[l][h]))
        out.append(row)
    return AffinityStack(stack.direction, out, stack.seq_len)


def init_mixture_logits(cfg: ModelConfig, name: str) -> Tensor:
    """Trainable logits over {G^{l,h}} followed by {Lambda^{l,h}},
    flattened in (layer, head) order; 2 * L * n_h entries."""
    n = 2 * cfg.n_layers * cfg.n_heads
    return Tensor(np.zeros(n), requires_grad=True, name=name)


def _stack_components(gstack: AffinityStack, lstack: AffinityStack) -> list[Tensor]:
    comps = [m for row in gstack.mats for m in row]
    comps += [m for row in lstack.mats for m in row]
    return comps


def mix_graphs(gstack: AffinityStack, lstack: AffinityStack,
               logits: Tensor) -> Tensor:
    """Softmax-weighted convex combination of all G and Lambda matrices
    for one direction; returns (B, T, T), differentiable in the logits."""
    comps = _stack_components(gstack, lstack)
    if logits.size != len(comps):
        raise ShapeError(
            f"mix_graphs: {logits.size} logits for {len(comps)} component matrices")
    w = ad.softmax_axis(ad.reshape(logits, (1, logits.size)), axis=-1)
    flat = ad.concat([ad.reshape(c, (1, c.size)) for c in comps], axis=0)
    mixed = ad.matmul(w, flat)
    return ad.reshape(mixed, comps[0].shape)


def uniform_graph(seq_len: int, direction: str) -> np.ndarray:
    """Column t uniform over the direction's allowed source positions."""
    if seq_len < 1:
        raise ValueError("uniform_graph: seq_len must be >= 1")
    mask = causal_mask(seq_len, direction)
    return mask / mask.sum(axis=0, keepdims=True)


def init_fusion_params(d_h: int, rng: np.random.Generator,
                       prefix: str = "fuse") -> dict[str, Tensor]:
    s = (2 * d_h) ** -0.5
    return {
        f"{prefix}.w1": Tensor(rng.uniform(-s, s, size=(2 * d_h, d_h)),
                               requires_grad=True, name=f"{prefix}.w1"),
        f"{prefix}.w2": Tensor(rng.uniform(-s, s, size=(2 * d_h, d_h)),
                               requires_grad=True, name=f"{prefix}.w2"),
    }


def fuse(feats: Tensor, mixed_fwd: Tensor, mixed_bwd: Tensor,
         w1: Tensor, w2: Tensor) -> Tensor:
    """Concatenate features with a gated projection of [H; HM].

    HM averages the two directions' graph-weighted sums; output is
    (B, T, 2 * d_h).
    """
    B, T, d = feats.shape
    for m in (mixed_fwd, mixed_bwd):
        if m.shape != (B, T, T):
            raise ShapeError(f"fuse: graph shape {m.shape} vs features {feats.shape}")
    hm_f = ad.bmm(ad.transpose(mixed_fwd, (0, 2, 1)), feats)
    hm_b = ad.bmm(ad.transpose(mixed_bwd, (0, 2, 1)), feats)
    hm = ad.mul(hm_f + hm_b, Tensor(0.5))
    cat = ad.reshape(ad.concat([feats, hm], axis=-1), (B * T, 2 * d))
    gated = ad.mul(ad.matmul(cat, w1), ad.sigmoid(ad.matmul(cat, w2)))
    return ad.concat([feats, ad.reshape(gated, (B, T, d))], axis=-1)


def frozen_params(params: dict[str, Tensor]) -> dict[str, Tensor]:
    """Non-recording copies sharing the underlying arrays."""
    return {k: Tensor(v.data) for k, v in params.items()}


def extract_components(tokens, params: dict[str, Tensor], cfg: ModelConfig,
                       dtype=np.float32) -> dict[str, np.ndarray]:
    """Frozen-predictor graph extraction for a (B, T) batch.

    Returns per direction an array (B, 2*L*n_h, T, T): all G matrices in
    (layer, head) order followed by all Lambda matrices.
    """
    gfrozen = frozen_params(params)
    if cfg.decouple_off:
        stacks = {d: forward_features_coupled(tokens, gfrozen, cfg, d)[1]
                  for d in ("forward", "backward")}
    else:
        fstack, bstack = predict_graphs(tokens, gfrozen, cfg)
        stacks = {"forward": fstack, "backward": bstack}
    out = {}
    for d, stack in stacks.items():
        lam = cumulative_products(stack)
        comps = _stack_components(stack, lam)
        arr = np.stack([c.data for c in comps], axis=1)   # (B, K, T, T)
        out[d] = arr.astype(dtype)
    return out
