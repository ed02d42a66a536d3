import numpy as np
import pytest

from relgraph.autodiff import Tensor
from relgraph.config import ModelConfig, TrainConfig
from relgraph.downstream import (
    POINTER_CONTENT,
    POINTER_ECHO_GAP,
    POINTER_OFFSETS,
    DownstreamConfig,
    VocabMismatchError,
    _encode_texts,
    _mixed_from_components,
    classifier_forward,
    init_classifier_params,
    load_csv_dataset,
    pointer_corpus,
    pointer_dataset,
    run_downstream,
)
from relgraph.training import train
from relgraph.vocab import build_vocab


def tiny_cfg(**kw):
    base = dict(seq_len=12, n_train=12, n_test=8, d_h=8, d_r=8,
                seeds=[0], epochs=1, batch_size=4)
    base.update(kw)
    return DownstreamConfig(**base)


# ------------------------------------------------------------ pointer task

def test_pointer_label_is_pointed_char():
    texts, labels = pointer_dataset(50, 16, seed=0)
    for text, label in zip(texts, labels):
        ps = [i for i, c in enumerate(text) if c in POINTER_OFFSETS]
        assert len(ps) == 1
        p = ps[0]
        offset = POINTER_OFFSETS.index(text[p]) + 1
        assert text[p + offset] == label
        assert label in POINTER_CONTENT


def test_pointer_corpus_has_echo_regularity():
    T = 16
    corpus = pointer_corpus(30, T, seed=1)
    for i in range(0, len(corpus), T):
        seg = corpus[i:i + T]
        p = next(j for j, c in enumerate(seg) if c in POINTER_OFFSETS)
        offset = POINTER_OFFSETS.index(seg[p]) + 1
        assert seg[p + POINTER_ECHO_GAP] == seg[p + offset]


def test_pointer_dataset_deterministic():
    a = pointer_dataset(10, 12, seed=5)
    b = pointer_dataset(10, 12, seed=5)
    assert a == b


# ------------------------------------------------------------------- data

def test_load_csv_dataset(tmp_path):
    path = tmp_path / "d.csv"
    path.write_text("text,label\nabc,x\ndef,y\n")
    texts, labels = load_csv_dataset(str(path))
    assert texts == ["abc", "def"] and labels == ["x", "y"]


def test_load_csv_requires_header(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("sentence,cls\nabc,x\n")
    with pytest.raises(ValueError, match="text,label"):
        load_csv_dataset(str(path))


def test_load_csv_rejects_empty(tmp_path):
    path = tmp_path / "empty.csv"
    path.write_text("text,label\n")
    with pytest.raises(ValueError, match="no rows"):
        load_csv_dataset(str(path))


def test_encode_rejects_unknown_tokens_with_hint():
    vocab = build_vocab("abc")
    with pytest.raises(VocabMismatchError, match="allow_unknown"):
        _encode_texts(["abz"], vocab, 4, allow_unknown=False)
    out = _encode_texts(["abz"], vocab, 4, allow_unknown=True)
    assert out.shape == (1, 4)


# ------------------------------------------------------------- classifier

def test_mixed_from_components_zero_logits_average():
    rng = np.random.default_rng(0)
    comps = rng.uniform(size=(2, 3, 4, 4))
    mixed = _mixed_from_components(comps, Tensor(np.zeros(3)))
    np.testing.assert_allclose(mixed.data, comps.mean(axis=1), atol=1e-12)


@pytest.mark.parametrize("site", ["embeddings", "rnn-states"])
@pytest.mark.parametrize("mode", ["none", "uniform", "glomo"])
def test_classifier_forward_shapes(site, mode):
    cfg = tiny_cfg(graph_mode=mode, transfer_site=site)
    model_cfg = ModelConfig(vocab_size=20, d_g=8, d_a=4, d_f=8,
                            n_layers=1, n_heads=1) if mode == "glomo" else None
    rng = np.random.default_rng(1)
    params = init_classifier_params(20, 5, cfg, model_cfg, rng)
    tokens = rng.integers(0, 20, size=(3, cfg.seq_len))
    comps = None
    if mode == "glomo":
        K = 2 * model_cfg.n_layers * model_cfg.n_heads
        raw = np.abs(rng.normal(size=(3, K, cfg.seq_len, cfg.seq_len))) + 0.1
        comps = (raw / raw.sum(axis=2, keepdims=True)).astype(np.float32)
    logits = classifier_forward(tokens, params, cfg, comps, comps)
    assert logits.shape == (3, 5)
    assert np.all(np.isfinite(logits.data))


# ---------------------------------------------------------------- harness

def _tiny_checkpoint(tmp_path):
    model = ModelConfig(vocab_size=32, d_g=8, d_a=4, d_f=8,
                        n_layers=1, n_heads=1, context_len=2)
    tc = TrainConfig(seq_len=12, batch_size=2, total_steps=2, max_vocab=32,
                     model=model)
    path = tmp_path / "pre.ckpt"
    train(tc, pointer_corpus(8, 12, seed=2), checkpoint_path=str(path))
    return path


def test_run_downstream_none_and_uniform(tmp_path):
    for mode in ("none", "uniform"):
        report = run_downstream(tiny_cfg(graph_mode=mode), None,
                                report_path=str(tmp_path / f"{mode}.json"))
        assert report["mode"] == mode
        assert len(report["accuracies"]) == 1
        assert 0.0 <= report["mean"] <= 1.0
        assert (tmp_path / f"{mode}.json").exists()


def test_run_downstream_glomo_requires_checkpoint():
    with pytest.raises(ValueError, match="checkpoint"):
        run_downstream(tiny_cfg(graph_mode="glomo"), None)


def test_run_downstream_glomo_end_to_end(tmp_path):
    ckpt = _tiny_checkpoint(tmp_path)
    report = run_downstream(tiny_cfg(graph_mode="glomo"), str(ckpt))
    assert report["mode"] == "glomo" and 0.0 <= report["mean"] <= 1.0


def test_downstream_config_validation():
    with pytest.raises(ValueError):
        DownstreamConfig(task="summarization")
    with pytest.raises(ValueError):
        DownstreamConfig(graph_mode="full")
    with pytest.raises(ValueError):
        DownstreamConfig(transfer_site="logits")
