"""Downstream classification harness.

Trains a small classifier (one recurrent layer, self-attention, mean
pooling, linear head) on a desk-scale task, optionally augmented with a
mixture of frozen pretrained affinity graphs through gated fusion.  The
graph predictor receives no gradient updates.
"""

from __future__ import annotations

import csv
import dataclasses
import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, reverse_accumulate
from .checkpoint import load_checkpoint
from .config import ModelConfig, _from_dict
from .objective import log_softmax
from .training import Adam
from .transfer import (
    extract_components,
    fuse,
    init_fusion_params,
    init_mixture_logits,
    mix_graphs,
    uniform_graph,
)
from .vocab import UNK_ID, Vocab, build_vocab

GRAPH_MODES = ("glomo", "uniform", "none")

POINTER_CONTENT = "abcdefghijklmnop"
POINTER_OFFSETS = "1234"            # pointer char names a relative offset
POINTER_ECHO_GAP = 5                # unlabeled corpus: pointed char repeats here


class VocabMismatchError(ValueError):
    pass


@dataclass
class DownstreamConfig:
    task: str = "synthetic-pointer"     # or "csv-text-classification"
    train_csv: str = ""
    test_csv: str = ""
    seq_len: int = 24
    n_train: int = 5000
    n_test: int = 1000
    data_seed: int = 1234
    d_h: int = 32                       # embedding width
    d_r: int = 32                       # recurrent state width
    transfer_site: str = "embeddings"   # or "rnn-states"
    graph_mode: str = "glomo"           # glomo | uniform | none
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    epochs: int = 4
    batch_size: int = 32
    learning_rate: float = 3e-3
    allow_unknown: bool = False

    def __post_init__(self):
        if self.task not in ("synthetic-pointer", "csv-text-classification"):
            raise ValueError(f"unknown task {self.task!r}")
        if self.transfer_site not in ("embeddings", "rnn-states"):
            raise ValueError(f"unknown transfer site {self.transfer_site!r}")
        if self.graph_mode not in GRAPH_MODES:
            raise ValueError(f"unknown graph mode {self.graph_mode!r}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DownstreamConfig":
        return _from_dict(cls, d)


# ---------------------------------------------------------------------------
# Synthetic pointer task

def pointer_example(seq_len: int, rng: np.random.Generator,
                    echo: bool) -> tuple[str, str]:
    """One sequence; a pointer char at position p names the content char
    `offset` positions later, which is the label.  With `echo`, that char
    is repeated POINTER_ECHO_GAP after the pointer (used only for the
    unlabeled pretraining corpus)."""
    chars = [POINTER_CONTENT[i]
             for i in rng.integers(0, len(POINTER_CONTENT), size=seq_len)]
    p = int(rng.integers(0, seq_len - POINTER_ECHO_GAP - 1))
    offset = int(rng.integers(1, len(POINTER_OFFSETS) + 1))
    chars[p] = POINTER_OFFSETS[offset - 1]
    label = chars[p + offset]
    if echo:
        chars[p + POINTER_ECHO_GAP] = label
    return "".join(chars), label


def pointer_dataset(n: int, seq_len: int, seed: int) -> tuple[list[str], list[str]]:
    rng = np.random.default_rng(seed)
    texts, labels = [], []
    for _ in range(n):
        t, y = pointer_example(seq_len, rng, echo=False)
        texts.append(t)
        labels.append(y)
    return texts, labels


def pointer_corpus(n_segments: int, seq_len: int, seed: int) -> str:
    """Unlabeled corpus over the same alphabet, with the echo regularity
    that makes the pointer structure learnable by context prediction."""
    rng = np.random.default_rng(seed)
    return "".join(pointer_example(seq_len, rng, echo=True)[0]
                   for _ in range(n_segments))


def load_csv_dataset(path: str) -> tuple[list[str], list[str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"text", "label"} <= set(reader.fieldnames):
            raise ValueError(f"{path}: CSV must have a header with text,label columns")
        rows = [(r["text"], r["label"]) for r in reader]
    if not rows:
        raise ValueError(f"{path}: no rows")
    texts, labels = zip(*rows)
    return list(texts), list(labels)


# ---------------------------------------------------------------------------
# Classifier

def _encode_texts(texts: list[str], vocab: Vocab, seq_len: int,
                  allow_unknown: bool) -> np.ndarray:
    out = np.zeros((len(texts), seq_len), dtype=np.int64)
    for i, text in enumerate(texts):
        ids = vocab.encode(text)[:seq_len]
        if not allow_unknown and UNK_ID in ids:
            raise VocabMismatchError(
                "task text contains tokens outside the checkpoint vocabulary; "
                "retokenize with the checkpoint vocab mapping unknowns to id 1 "
                "(set allow_unknown=true)")
        out[i, :len(ids)] = ids
    return out


def init_classifier_params(vocab_size: int, n_classes: int, cfg: DownstreamConfig,
                           model_cfg: Optional[ModelConfig],
                           rng: np.random.Generator) -> dict[str, Tensor]:
    params: dict[str, Tensor] = {}

    def uniform(name, shape, fan_in):
        s = fan_in ** -0.5
        params[name] = Tensor(rng.uniform(-s, s, size=shape),
                              requires_grad=True, name=name)

    params["clf.embed"] = Tensor(rng.normal(0.0, 0.1, size=(vocab_size, cfg.d_h)),
                                 requires_grad=True, name="clf.embed")
    fused = cfg.graph_mode != "none"
    d_in = 2 * cfg.d_h if (fused and cfg.transfer_site == "embeddings") else cfg.d_h
    nin = d_in + cfg.d_r
    for gate in ("update", "reset", "cand"):
        uniform(f"clf.gru.{gate}.w", (nin, cfg.d_r), nin)
        params[f"clf.gru.{gate}.b"] = Tensor(np.zeros(cfg.d_r), requires_grad=True,
                                             name=f"clf.gru.{gate}.b")
    d_x = 2 * cfg.d_r if (fused and cfg.transfer_site == "rnn-states") else cfg.d_r
    for proj in ("q", "k", "v"):
        uniform(f"clf.attn.{proj}", (d_x, d_x), d_x)
    uniform("clf.out.w", (d_x, n_classes), d_x)
    params["clf.out.b"] = Tensor(np.zeros(n_classes), requires_grad=True,
                                 name="clf.out.b")
    if fused:
        d_site = cfg.d_h if cfg.transfer_site == "embeddings" else cfg.d_r
        params.update(init_fusion_params(d_site, rng, prefix="clf.fuse"))
        if cfg.graph_mode == "glomo":
            assert model_cfg is not None
            params["clf.mix.forward"] = init_mixture_logits(model_cfg, "clf.mix.forward")
            params["clf.mix.backward"] = init_mixture_logits(model_cfg, "clf.mix.backward")
    return params


def _mixed_from_components(comps: np.ndarray, logits: Tensor) -> Tensor:
    """comps: (B, K, T, T) frozen graphs; returns (B, T, T) mixture."""
    B, K, T, _ = comps.shape
    w = ad.softmax_axis(ad.reshape(logits, (1, K)), axis=-1)
    flat = Tensor(np.ascontiguousarray(comps.transpose(1, 0, 2, 3), dtype=np.float64)
                  .reshape(K, B * T * T))
    return ad.reshape(ad.matmul(w, flat), (B, T, T))


def classifier_forward(tokens: np.ndarray, params: dict[str, Tensor],
                       cfg: DownstreamConfig,
                       comps_fwd: Optional[np.ndarray],
                       comps_bwd: Optional[np.ndarray]) -> Tensor:
    """Logits (B, n_classes) for a batch of token ids (B, T)."""
    B, T = tokens.shape
    x = ad.embedding_lookup(params["clf.embed"], tokens)

    def mixed(comps, direction):
        if cfg.graph_mode == "uniform":
            u = uniform_graph(T, direction)
            return Tensor(np.broadcast_to(u, (B, T, T)).copy())
        return _mixed_from_components(comps, params[f"clf.mix.{direction}"])

    if cfg.graph_mode != "none" and cfg.transfer_site == "embeddings":
        x = fuse(x, mixed(comps_fwd, "forward"), mixed(comps_bwd, "backward"),
                 params["clf.fuse.w1"], params["clf.fuse.w2"])
    d_in = x.shape[2]
    state = Tensor(np.zeros((B, cfg.d_r)))
    rows = []
    for t in range(T):
        inp = ad.tslice(x, (slice(None), t))
        zin = ad.concat([inp, state], axis=-1)
        z = ad.sigmoid(ad.matmul(zin, params["clf.gru.update.w"]) + params["clf.gru.update.b"])
        r = ad.sigmoid(ad.matmul(zin, params["clf.gru.reset.w"]) + params["clf.gru.reset.b"])
        cin = ad.concat([inp, ad.mul(r, state)], axis=-1)
        cand = ad.tanh(ad.matmul(cin, params["clf.gru.cand.w"]) + params["clf.gru.cand.b"])
        state = ad.mul(Tensor(1.0) - z, state) + ad.mul(z, cand)
        rows.append(ad.reshape(state, (B, 1, cfg.d_r)))
    states = ad.concat(rows, axis=1)
    if cfg.graph_mode != "none" and cfg.transfer_site == "rnn-states":
        states = fuse(states, mixed(comps_fwd, "forward"), mixed(comps_bwd, "backward"),
                      params["clf.fuse.w1"], params["clf.fuse.w2"])
    d_x = states.shape[2]
    flat = ad.reshape(states, (B * T, d_x))
    q = ad.reshape(ad.matmul(flat, params["clf.attn.q"]), (B, T, d_x))
    k = ad.reshape(ad.matmul(flat, params["clf.attn.k"]), (B, T, d_x))
    v = ad.reshape(ad.matmul(flat, params["clf.attn.v"]), (B, T, d_x))
    att = ad.softmax_axis(ad.mul(ad.bmm(q, ad.transpose(k, (0, 2, 1))),
                                 Tensor(d_x ** -0.5)), axis=-1)
    states = states + ad.bmm(att, v)
    pooled = ad.mean_axis(states, axis=1)
    return ad.matmul(pooled, params["clf.out.w"]) + params["clf.out.b"]


def _ce_loss(logits: Tensor, labels: np.ndarray) -> Tensor:
    B, C = logits.shape
    onehot = np.zeros((B, C))
    onehot[np.arange(B), labels] = 1.0
    return ad.mul(ad.sum_axis(ad.mul(log_softmax(logits), Tensor(-onehot))),
                  Tensor(1.0 / B))


# ---------------------------------------------------------------------------
# Harness

@dataclass
class _TaskData:
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    vocab: Vocab
    n_classes: int


def _prepare_data(cfg: DownstreamConfig, ckpt_vocab: Optional[Vocab]) -> _TaskData:
    if cfg.task == "synthetic-pointer":
        train_t, train_l = pointer_dataset(cfg.n_train, cfg.seq_len, cfg.data_seed)
        test_t, test_l = pointer_dataset(cfg.n_test, cfg.seq_len, cfg.data_seed + 1)
    else:
        train_t, train_l = load_csv_dataset(cfg.train_csv)
        test_t, test_l = load_csv_dataset(cfg.test_csv)
    vocab = ckpt_vocab if ckpt_vocab is not None else build_vocab(
        "".join(train_t), "char", 256)
    classes = sorted(set(train_l) | set(test_l))
    cls_id = {c: i for i, c in enumerate(classes)}
    return _TaskData(
        _encode_texts(train_t, vocab, cfg.seq_len, cfg.allow_unknown),
        np.array([cls_id[c] for c in train_l]),
        _encode_texts(test_t, vocab, cfg.seq_len, cfg.allow_unknown),
        np.array([cls_id[c] for c in test_l]),
        vocab, len(classes))


def _extract_all(tokens: np.ndarray, gparams, model_cfg,
                 batch: int = 64) -> dict[str, np.ndarray]:
    parts: dict[str, list] = {"forward": [], "backward": []}
    for i in range(0, len(tokens), batch):
        comps = extract_components(tokens[i:i + batch], gparams, model_cfg)
        for d in parts:
            parts[d].append(comps[d])
    return {d: np.concatenate(v) for d, v in parts.items()}


def train_classifier(cfg: DownstreamConfig, data: _TaskData, seed: int,
                     model_cfg: Optional[ModelConfig],
                     comps_train: Optional[dict], comps_test: Optional[dict]) -> float:
    """One downstream run; returns test accuracy."""
    rng = np.random.default_rng(seed)
    params = init_classifier_params(len(data.vocab), data.n_classes, cfg,
                                    model_cfg, rng)
    opt = Adam(params, cfg.learning_rate)
    n = len(data.train_x)
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for i in range(0, n, cfg.batch_size):
            sel = order[i:i + cfg.batch_size]
            cf = comps_train["forward"][sel] if comps_train else None
            cb = comps_train["backward"][sel] if comps_train else None
            logits = classifier_forward(data.train_x[sel], params, cfg, cf, cb)
            loss = _ce_loss(logits, data.train_y[sel])
            opt.zero_grad()
            reverse_accumulate(loss)
            opt.step()
    correct = 0
    for i in range(0, len(data.test_x), cfg.batch_size):
        sel = slice(i, i + cfg.batch_size)
        cf = comps_test["forward"][sel] if comps_test else None
        cb = comps_test["backward"][sel] if comps_test else None
        logits = classifier_forward(data.test_x[sel], params, cfg, cf, cb)
        correct += int((logits.data.argmax(axis=1) == data.test_y[sel]).sum())
    return correct / len(data.test_x)


def run_downstream(cfg: DownstreamConfig, checkpoint_path: Optional[str],
                   report_path: Optional[str] = None) -> dict:
    """Train/evaluate over all configured seeds for one graph mode;
    returns (and optionally writes) the JSON report."""
    model_cfg = None
    ckpt_vocab = None
    gparams = None
    if cfg.graph_mode == "glomo":
        if checkpoint_path is None:
            raise ValueError("graph mode 'glomo' requires a checkpoint")
        params, train_cfg, ckpt_vocab = load_checkpoint(checkpoint_path)
        model_cfg = train_cfg.model
        prefix = "f." if model_cfg.decouple_off else "g."
        gparams = {k: v for k, v in params.items() if k.startswith(prefix)}
    data = _prepare_data(cfg, ckpt_vocab)
    comps_train = comps_test = None
    frozen_before = None
    if cfg.graph_mode == "glomo":
        frozen_before = {k: v.data.tobytes() for k, v in gparams.items()}
        comps_train = _extract_all(data.train_x, gparams, model_cfg)
        comps_test = _extract_all(data.test_x, gparams, model_cfg)
    accuracies = [train_classifier(cfg, data, seed, model_cfg,
                                   comps_train, comps_test)
                  for seed in cfg.seeds]
    if frozen_before is not None:
        assert all(gparams[k].data.tobytes() == frozen_before[k]
                   for k in gparams), "frozen graph predictor was mutated"
    report = {
        "mode": cfg.graph_mode,
        "seeds": list(cfg.seeds),
        "accuracies": accuracies,
        "mean": float(np.mean(accuracies)),
        "stddev": float(np.std(accuracies)),
        "config": cfg.to_dict(),
    }
    if report_path:
        with open(report_path, "w") as fh:
            json.dump(report, fh, indent=2)
    return report
