"""Context-prediction objective: per-position recurrent decoders that
predict up to `context_len` following tokens (and, via a second decoder,
the preceding tokens), teacher-forced, initialized from the top-layer
features."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .config import ModelConfig
from .features import forward_features, forward_features_coupled
from .graphs import DIRECTIONS, predict_graphs


def init_decoder_params(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    params: dict[str, Tensor] = {}

    def uniform(name, shape, fan_in):
        s = fan_in ** -0.5
        params[name] = Tensor(rng.uniform(-s, s, size=shape),
                              requires_grad=True, name=name)

    for d in DIRECTIONS:
        uniform(f"dec.{d}.init.w", (cfg.d_f, cfg.d_dec), cfg.d_f)
        params[f"dec.{d}.init.b"] = Tensor(np.zeros(cfg.d_dec), requires_grad=True,
                                           name=f"dec.{d}.init.b")
        nin = cfg.d_f + cfg.d_dec
        for gate in ("update", "reset", "cand"):
            uniform(f"dec.{d}.{gate}.w", (nin, cfg.d_dec), nin)
            params[f"dec.{d}.{gate}.b"] = Tensor(
                np.zeros(cfg.d_dec), requires_grad=True, name=f"dec.{d}.{gate}.b")
        uniform(f"dec.{d}.out.w", (cfg.d_dec, cfg.vocab_size), cfg.d_dec)
        params[f"dec.{d}.out.b"] = Tensor(np.zeros(cfg.vocab_size), requires_grad=True,
                                          name=f"dec.{d}.out.b")
    return params


def _dec_gru(inp: Tensor, state: Tensor, params: dict[str, Tensor], d: str) -> Tensor:
    zin = ad.concat([inp, state], axis=-1)
    z = ad.sigmoid(ad.matmul(zin, params[f"dec.{d}.update.w"]) + params[f"dec.{d}.update.b"])
    r = ad.sigmoid(ad.matmul(zin, params[f"dec.{d}.reset.w"]) + params[f"dec.{d}.reset.b"])
    cin = ad.concat([inp, ad.mul(r, state)], axis=-1)
    cand = ad.tanh(ad.matmul(cin, params[f"dec.{d}.cand.w"]) + params[f"dec.{d}.cand.b"])
    return ad.mul(Tensor(1.0) - z, state) + ad.mul(z, cand)


def log_softmax(logits: Tensor) -> Tensor:
    shift = Tensor(logits.data.max(axis=-1, keepdims=True))
    shifted = logits - shift
    lse = ad.log(ad.sum_axis(ad.exp(shifted), axis=-1, keepdims=True))
    return shifted - lse


def _init_state(feats: Tensor, params: dict[str, Tensor], d: str) -> Tensor:
    return ad.tanh(ad.matmul(feats, params[f"dec.{d}.init.w"]) + params[f"dec.{d}.init.b"])


def position_nll(f_t: Tensor, x_t: int, window: np.ndarray,
                 params: dict[str, Tensor], cfg: ModelConfig,
                 direction: str = "forward") -> Tensor:
    """Negative log-likelihood of one position's context window.

    f_t: (d_f,) top-layer feature; window: the true continuation in
    prediction order (<= context_len tokens).  Empty windows contribute 0.
    """
    window = np.asarray(window, dtype=np.int64)
    if window.size > cfg.context_len:
        raise ShapeError(f"window of {window.size} exceeds context length {cfg.context_len}")
    if window.size == 0:
        return Tensor(0.0)
    state = _init_state(ad.reshape(f_t, (1, cfg.d_f)), params, direction)
    total = Tensor(0.0)
    prev = int(x_t)
    for target in window:
        inp = ad.embedding_lookup(params["f.embed"], np.array([prev]))
        state = _dec_gru(inp, state, params, direction)
        logits = ad.matmul(state, params[f"dec.{direction}.out.w"]) + params[f"dec.{direction}.out.b"]
        logp = log_softmax(logits)
        total = total - ad.tslice(logp, (0, int(target)))
        prev = int(target)
    return total


def _direction_nll(tokens: np.ndarray, feats: Tensor, params: dict[str, Tensor],
                   cfg: ModelConfig, d: str) -> tuple[Tensor, int]:
    """Vectorized sum of position NLLs over a (B, T) batch for one
    direction; returns (sum, number of predicted tokens)."""
    B, T = tokens.shape
    D = cfg.context_len
    V = cfg.vocab_size
    flat = ad.reshape(feats, (B * T, cfg.d_f))
    state = _init_state(flat, params, d)
    pos = np.tile(np.arange(T), (B, 1))                      # (B, T)
    total = Tensor(0.0)
    count = 0
    sign = 1 if d == "forward" else -1
    for s in range(D):
        inp_pos = pos + sign * s
        tgt_pos = pos + sign * (s + 1)
        valid = (tgt_pos >= 0) & (tgt_pos < T)
        if not valid.any():
            break
        inp_ids = np.take_along_axis(tokens, np.clip(inp_pos, 0, T - 1), axis=1)
        tgt_ids = np.take_along_axis(tokens, np.clip(tgt_pos, 0, T - 1), axis=1)
        inp = ad.embedding_lookup(params["f.embed"], inp_ids.reshape(-1))
        state = _dec_gru(inp, state, params, d)
        logits = ad.matmul(state, params[f"dec.{d}.out.w"]) + params[f"dec.{d}.out.b"]
        logp = log_softmax(logits)
        onehot = np.zeros((B * T, V))
        onehot[np.arange(B * T), tgt_ids.reshape(-1)] = 1.0
        onehot *= valid.reshape(-1, 1)
        total = total - ad.sum_axis(ad.mul(logp, Tensor(onehot)))
        count += int(valid.sum())
    return total, count


def _sequence_nll(tokens: np.ndarray, feats: Tensor, context: np.ndarray,
                  params: dict[str, Tensor], cfg: ModelConfig, d: str) -> tuple[Tensor, int]:
    """unit_level_off ablation: one decoder per sequence, initialized from
    the mean feature, predicting the context tokens beyond the window."""
    B, T = tokens.shape
    mean_feat = ad.mean_axis(feats, axis=1)                  # (B, d_f)
    state = _init_state(mean_feat, params, d)
    V = cfg.vocab_size
    total = Tensor(0.0)
    count = 0
    prev = tokens[:, -1] if d == "forward" else tokens[:, 0]
    steps = context if d == "forward" else context[:, ::-1].copy()
    for s in range(steps.shape[1]):
        tgt = steps[:, s]
        inp = ad.embedding_lookup(params["f.embed"], prev)
        state = _dec_gru(inp, state, params, d)
        logits = ad.matmul(state, params[f"dec.{d}.out.w"]) + params[f"dec.{d}.out.b"]
        logp = log_softmax(logits)
        onehot = np.zeros((B, V))
        onehot[np.arange(B), tgt] = 1.0
        total = total - ad.sum_axis(ad.mul(logp, Tensor(onehot)))
        count += B
        prev = tgt
    return total, count


def total_loss(tokens, graph_params: dict[str, Tensor],
               feature_params: dict[str, Tensor], decoder_params: dict[str, Tensor],
               cfg: ModelConfig, context_next: np.ndarray | None = None,
               context_prev: np.ndarray | None = None) -> Tensor:
    """Mean per-predicted-token NLL over both directions for a (B, T)
    batch of token ids."""
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim == 1:
        tokens = tokens[None]
    if tokens.shape[1] < 2:
        raise ShapeError("total_loss: sequence length must be >= 2")
    params = {**feature_params, **decoder_params}
    if cfg.decouple_off:
        feats = {d: forward_features_coupled(tokens, feature_params, cfg, d)[0]
                 for d in DIRECTIONS}
    else:
        fstack, bstack = predict_graphs(tokens, graph_params, cfg)
        feats = {"forward": forward_features(tokens, fstack, feature_params, cfg),
                 "backward": forward_features(tokens, bstack, feature_params, cfg)}
    total = Tensor(0.0)
    count = 0
    for d in DIRECTIONS:
        if cfg.unit_level_off:
            ctx = context_next if d == "forward" else context_prev
            if ctx is None:
                raise ValueError(
                    "unit_level_off requires context_next and context_prev token blocks")
            part, n = _sequence_nll(tokens, feats[d], np.asarray(ctx, dtype=np.int64),
                                    params, cfg, d)
        else:
            part, n = _direction_nll(tokens, feats[d], params, cfg, d)
        total = total + part
        count += n
    return ad.div(total, Tensor(float(count)))
