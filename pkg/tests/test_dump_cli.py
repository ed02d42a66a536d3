import json
import struct

import numpy as np
import pytest

from relgraph import cli
from relgraph.graphdump import (
    GraphDumpError,
    heatmap_from_dump,
    read_graph_dump,
    render_heatmap,
    write_graph_dump,
)

# ------------------------------------------------------------------ dumps


def _mats(L=2, H=2, T=4, seed=0):
    rng = np.random.default_rng(seed)
    raw = np.abs(rng.normal(size=(L, H, T, T)))
    return raw / raw.sum(axis=2, keepdims=True)


def test_dump_roundtrip(tmp_path):
    path = tmp_path / "g.dump"
    mats = _mats()
    write_graph_dump(mats, "backward", str(path))
    direction, back = read_graph_dump(str(path))
    assert direction == "backward"
    np.testing.assert_array_equal(back, mats.astype(np.float32).astype(np.float64))


def test_dump_columns_are_contiguous_on_disk(tmp_path):
    path = tmp_path / "g.dump"
    mats = _mats(L=1, H=1, T=3)
    write_graph_dump(mats, "forward", str(path))
    raw = path.read_bytes()
    hsize = 4 + struct.calcsize("<IBIII")
    payload = np.frombuffer(raw, dtype="<f4", offset=hsize)
    # first T floats are column t=0 (rows j=0..T-1)
    np.testing.assert_allclose(payload[:3], mats[0, 0, :, 0], rtol=1e-6)


def test_dump_rejects_non_square():
    with pytest.raises(GraphDumpError, match="square"):
        write_graph_dump(np.zeros((1, 1, 3, 4)), "forward", "/dev/null")


def test_dump_bad_magic(tmp_path):
    path = tmp_path / "bad"
    path.write_bytes(b"XXXX" + b"\x00" * 30)
    with pytest.raises(GraphDumpError, match="magic"):
        read_graph_dump(str(path))


def test_dump_bad_version(tmp_path):
    path = tmp_path / "ver"
    path.write_bytes(b"GLG1" + struct.pack("<IBIII", 9, 0, 1, 1, 1) + b"\x00" * 4)
    with pytest.raises(GraphDumpError, match="version"):
        read_graph_dump(str(path))


def test_dump_bad_direction_code(tmp_path):
    path = tmp_path / "dir"
    path.write_bytes(b"GLG1" + struct.pack("<IBIII", 1, 7, 1, 1, 1) + b"\x00" * 4)
    with pytest.raises(GraphDumpError, match="direction"):
        read_graph_dump(str(path))


def test_dump_payload_length_check(tmp_path):
    path = tmp_path / "short"
    write_graph_dump(_mats(), "forward", str(path))
    path.write_bytes(path.read_bytes()[:-4])
    with pytest.raises(GraphDumpError, match="payload"):
        read_graph_dump(str(path))


# --------------------------------------------------------------- heatmaps


def test_heatmap_header_and_size():
    img = render_heatmap(np.zeros((3, 5)), scale=4)
    header, rest = img.split(b"\n", 1)
    assert header == b"P6"
    dims, rest = rest.split(b"\n", 1)
    assert dims == b"20 12"
    maxval, pixels = rest.split(b"\n", 1)
    assert maxval == b"255" and len(pixels) == 20 * 12 * 3


def test_heatmap_inverse_colormap_within_one_step():
    rng = np.random.default_rng(1)
    v = rng.uniform(0.0, 1.0, size=(6, 6))
    img = render_heatmap(v, scale=1)
    pixels = np.frombuffer(img.split(b"\n255\n", 1)[1], dtype=np.uint8)
    gray = pixels.reshape(6, 6, 3)[:, :, 0].astype(np.float64)
    recovered = 1.0 - gray / 255.0
    assert np.max(np.abs(recovered - v)) <= 0.5 / 255.0 + 1e-12


def test_heatmap_gray_channels_equal_and_clip():
    img = render_heatmap(np.array([[2.0, -1.0]]), scale=1)
    pixels = np.frombuffer(img.split(b"\n255\n", 1)[1], dtype=np.uint8).reshape(1, 2, 3)
    assert np.all(pixels[0, 0] == 0) and np.all(pixels[0, 1] == 255)


def test_heatmap_rejects_bad_scale():
    with pytest.raises(GraphDumpError, match="scale"):
        render_heatmap(np.zeros((2, 2)), scale=0)


def test_heatmap_from_dump_range_check(tmp_path):
    path = tmp_path / "g.dump"
    write_graph_dump(_mats(), "forward", str(path))
    img = heatmap_from_dump(str(path), 1, 1, scale=2)
    assert img.startswith(b"P6\n")
    with pytest.raises(GraphDumpError, match="out of range"):
        heatmap_from_dump(str(path), 2, 0)


# -------------------------------------------------------------------- CLI


TINY_SETS = [
    "--set", "seq_len=8", "--set", "batch_size=2", "--set", "total_steps=2",
    "--set", "max_vocab=32", "--set", "model.vocab_size=32",
    "--set", "model.d_g=8", "--set", "model.d_a=4", "--set", "model.d_f=8",
    "--set", "model.n_layers=1", "--set", "model.n_heads=1",
    "--set", "model.context_len=2",
]


@pytest.fixture(scope="module")
def trained_checkpoint(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "model.ckpt"
    rc = cli.main(["train", "--corpus", "abcdefgh" * 10,
                   "--out", str(out)] + TINY_SETS)
    assert rc == 0
    return out


def test_cli_train_writes_metrics(tmp_path, trained_checkpoint):
    metrics = tmp_path / "m.ndjson"
    rc = cli.main(["train", "--corpus", "abcdefgh" * 10,
                   "--out", str(tmp_path / "m.ckpt"),
                   "--metrics", str(metrics)] + TINY_SETS)
    assert rc == 0
    lines = [json.loads(l) for l in metrics.read_text().splitlines()]
    assert len(lines) == 2 and {"step", "loss", "wall_ms"} == set(lines[0])


def test_cli_extract_and_render(tmp_path, trained_checkpoint):
    prefix = tmp_path / "graphs"
    rc = cli.main(["extract-graphs", "--input", "abcbddga",
                   "--checkpoint", str(trained_checkpoint),
                   "--out", str(prefix)])
    assert rc == 0
    for d in ("forward", "backward"):
        direction, mats = read_graph_dump(f"{prefix}.{d}")
        assert direction == d and mats.shape == (1, 1, 8, 8)
        np.testing.assert_allclose(mats.sum(axis=2), 1.0, atol=1e-6)
    sidecar = json.loads((tmp_path / "graphs.tokens.json").read_text())
    assert sidecar["tokens"] == list("abcbddga")
    ppm = tmp_path / "g.ppm"
    rc = cli.main(["render-heatmap", "--dump", f"{prefix}.forward",
                   "--layer", "0", "--head", "0", "--out", str(ppm)])
    assert rc == 0
    assert ppm.read_bytes().startswith(b"P6\n")


def test_cli_usage_error_is_exit_1(capsys):
    assert cli.main(["train", "--corpus", "abc"]) == 1   # missing --out
    assert cli.main(["no-such-command"]) == 1
    err = capsys.readouterr().err
    assert 'relgraph: code=1 msg="' in err


def test_cli_validation_error_is_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"garbage")
    rc = cli.main(["extract-graphs", "--input", "abc",
                   "--checkpoint", str(bad), "--out", str(tmp_path / "x")])
    assert rc == 2
    assert 'code=2' in capsys.readouterr().err


def test_cli_bad_config_key_is_exit_2(tmp_path, capsys):
    rc = cli.main(["train", "--corpus", "abcdefgh" * 10,
                   "--out", str(tmp_path / "x.ckpt"),
                   "--set", "not_a_key=1"] + TINY_SETS)
    assert rc == 2
    assert "not_a_key" in capsys.readouterr().err


def test_cli_missing_config_file_is_exit_2(tmp_path):
    rc = cli.main(["train", "--config", str(tmp_path / "nope.json"),
                   "--corpus", "abc", "--out", str(tmp_path / "x")])
    assert rc == 2


def test_cli_render_out_of_range_is_exit_2(tmp_path, trained_checkpoint, capsys):
    prefix = tmp_path / "graphs"
    assert cli.main(["extract-graphs", "--input", "abcd",
                     "--checkpoint", str(trained_checkpoint),
                     "--out", str(prefix)]) == 0
    rc = cli.main(["render-heatmap", "--dump", f"{prefix}.forward",
                   "--layer", "5", "--head", "0", "--out", str(tmp_path / "x.ppm")])
    assert rc == 2
