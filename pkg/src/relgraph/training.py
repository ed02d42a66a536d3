"""Unsupervised pretraining: corpus batching, Adam, the train loop and
its metrics/checkpoint side effects."""

from __future__ import annotations

import json
import time
from typing import Iterator, Optional

import numpy as np

from . import objective
from .autodiff import Tensor, reverse_accumulate
from .checkpoint import save_checkpoint
from .config import TrainConfig
from .features import init_feature_params
from .graphs import init_graph_params
from .vocab import PAD_ID, Vocab, build_vocab


class NonFiniteLossError(RuntimeError):
    def __init__(self, step: int, diagnostics: str):
        super().__init__(f"non-finite loss at step {step}: {diagnostics}")
        self.step = step


def make_windows(ids: np.ndarray, seq_len: int) -> np.ndarray:
    """Contiguous non-overlapping windows; the final partial one is dropped."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size < seq_len:
        raise ValueError(
            f"corpus of {ids.size} tokens is shorter than sequence length {seq_len}")
    n = ids.size // seq_len
    return ids[:n * seq_len].reshape(n, seq_len)


def make_batches(ids: np.ndarray, seq_len: int, batch_size: int,
                 seed: int) -> Iterator[np.ndarray]:
    """Seed-shuffled batches of non-overlapping windows; the last batch
    may be smaller."""
    for batch, _ in make_batches_with_starts(ids, seq_len, batch_size, seed):
        yield batch


def make_batches_with_starts(ids, seq_len, batch_size, seed):
    windows = make_windows(ids, seq_len)
    perm = np.random.default_rng(seed).permutation(len(windows))
    starts = perm * seq_len
    for i in range(0, len(windows), batch_size):
        sel = perm[i:i + batch_size]
        yield windows[sel], starts[i:i + batch_size]


def _context_blocks(ids: np.ndarray, starts: np.ndarray, seq_len: int,
                    depth: int) -> tuple[np.ndarray, np.ndarray]:
    """Tokens beyond each window on both sides, zero-padded at corpus ends."""
    nxt = np.full((len(starts), depth), PAD_ID, dtype=np.int64)
    prv = np.full((len(starts), depth), PAD_ID, dtype=np.int64)
    for i, s in enumerate(starts):
        after = ids[s + seq_len:s + seq_len + depth]
        nxt[i, :after.size] = after
        before = ids[max(0, s - depth):s]
        if before.size:
            prv[i, -before.size:] = before
    return nxt, prv


class Adam:
    """Adam with global gradient-norm clipping."""

    def __init__(self, params: dict[str, Tensor], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                 clip: float = 5.0):
        self.params = params
        self.lr, self.b1, self.b2, self.eps, self.clip = lr, beta1, beta2, eps, clip
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self) -> None:
        grads = {k: p.grad for k, p in self.params.items() if p.grad is not None}
        if self.clip > 0:
            norm = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
            if norm > self.clip:
                scale = self.clip / norm
                for g in grads.values():
                    g *= scale
        self.t += 1
        bc1 = 1.0 - self.b1 ** self.t
        bc2 = 1.0 - self.b2 ** self.t
        for k, g in grads.items():
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            self.params[k].data -= self.lr * (self.m[k] / bc1) / (
                np.sqrt(self.v[k] / bc2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


def init_all_params(config: TrainConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    cfg = config.model
    params = {}
    params.update(init_graph_params(cfg, rng))
    params.update(init_feature_params(cfg, rng))
    params.update(objective.init_decoder_params(cfg, rng))
    return params


def train(config: TrainConfig, corpus: str, checkpoint_path: Optional[str] = None,
          metrics_path: Optional[str] = None,
          vocab: Optional[Vocab] = None) -> tuple[dict[str, Tensor], Vocab, list[float]]:
    """Run the full pretraining loop; returns (params, vocab, losses).

    Writes periodic and final checkpoints when checkpoint_path is given
    and newline-delimited JSON metrics when metrics_path is given.
    """
    if vocab is None:
        vocab = build_vocab(corpus, config.tokenization, config.max_vocab)
    ids = np.asarray(vocab.encode(corpus), dtype=np.int64)
    if config.model.vocab_size < len(vocab):
        raise ValueError(
            f"model vocab_size {config.model.vocab_size} smaller than vocabulary {len(vocab)}")
    rng = np.random.default_rng(config.seed)
    params = init_all_params(config, rng)
    gp = {k: v for k, v in params.items() if k.startswith("g.")}
    fp = {k: v for k, v in params.items() if k.startswith("f.")}
    dp = {k: v for k, v in params.items() if k.startswith("dec.")}
    opt = Adam(params, config.learning_rate, config.adam_beta1,
               config.adam_beta2, config.adam_eps, config.grad_clip)
    cfg = config.model

    metrics = open(metrics_path, "w") if metrics_path else None
    losses: list[float] = []
    step = 0
    epoch = 0
    try:
        while step < config.total_steps:
            batches = make_batches_with_starts(ids, config.seq_len,
                                               config.batch_size,
                                               config.seed + epoch)
            for batch, starts in batches:
                if step >= config.total_steps:
                    break
                t0 = time.monotonic()
                if cfg.unit_level_off:
                    nxt, prv = _context_blocks(ids, starts, config.seq_len,
                                               cfg.context_len)
                    loss = objective.total_loss(batch, gp, fp, dp, cfg,
                                                context_next=nxt, context_prev=prv)
                else:
                    loss = objective.total_loss(batch, gp, fp, dp, cfg)
                value = float(loss.data)
                if not np.isfinite(value):
                    bad = [k for k, p in params.items()
                           if not np.all(np.isfinite(p.data))]
                    raise NonFiniteLossError(step, f"non-finite parameters: {bad}")
                opt.zero_grad()
                reverse_accumulate(loss)
                opt.step()
                losses.append(value)
                if metrics:
                    metrics.write(json.dumps(
                        {"step": step, "loss": value,
                         "wall_ms": (time.monotonic() - t0) * 1e3}) + "\n")
                step += 1
                if (checkpoint_path and config.checkpoint_interval
                        and step % config.checkpoint_interval == 0
                        and step < config.total_steps):
                    save_checkpoint(params, config,
                                    f"{checkpoint_path}.step{step}", vocab)
            epoch += 1
    finally:
        if metrics:
            metrics.close()
    if checkpoint_path:
        save_checkpoint(params, config, checkpoint_path, vocab)
    return params, vocab, losses
