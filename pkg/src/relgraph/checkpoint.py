"""Checkpoint serialization: JSON manifest + raw little-endian float64 blob
in a single file.  Round-trips are bit-exact."""

from __future__ import annotations

import json
import struct
from typing import Optional

import numpy as np

from .autodiff import Tensor
from .config import TrainConfig
from .vocab import Vocab

MAGIC = b"RGC1"
FORMAT_VERSION = 1


class CheckpointError(Exception):
    """Base class for checkpoint load failures."""


class CorruptManifestError(CheckpointError):
    pass


class ShapeMismatchError(CheckpointError):
    pass


class TruncatedBlobError(CheckpointError):
    pass


def save_checkpoint(params: dict[str, Tensor], config: TrainConfig, path: str,
                    vocab: Optional[Vocab] = None) -> None:
    entries = []
    blobs = []
    offset = 0
    for name in sorted(params):
        raw = np.ascontiguousarray(params[name].data, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(params[name].shape),
                        "offset": offset, "length": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    manifest = {
        "format_version": FORMAT_VERSION,
        "config": config.to_dict(),
        "vocab": vocab.to_dict() if vocab is not None else None,
        "entries": entries,
    }
    mbytes = json.dumps(manifest).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(mbytes)))
        fh.write(mbytes)
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(path: str) -> tuple[dict[str, Tensor], TrainConfig, Optional[Vocab]]:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 12 or data[:4] != MAGIC:
        raise CorruptManifestError(f"{path}: not a checkpoint file (bad magic)")
    (mlen,) = struct.unpack("<Q", data[4:12])
    if len(data) < 12 + mlen:
        raise CorruptManifestError(f"{path}: manifest truncated")
    try:
        manifest = json.loads(data[12:12 + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptManifestError(f"{path}: manifest is not valid JSON: {exc}")
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CorruptManifestError(
            f"{path}: unsupported format version {manifest.get('format_version')}")
    blob = data[12 + mlen:]
    params: dict[str, Tensor] = {}
    end = 0
    for e in manifest["entries"]:
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        if n * 8 != e["length"]:
            raise ShapeMismatchError(
                f"{path}: entry {e['name']!r} shape {e['shape']} "
                f"inconsistent with byte length {e['length']}")
        if e["offset"] + e["length"] > len(blob):
            raise TruncatedBlobError(
                f"{path}: blob truncated at entry {e['name']!r}")
        arr = np.frombuffer(blob, dtype="<f8", count=n,
                            offset=e["offset"]).reshape(e["shape"]).copy()
        params[e["name"]] = Tensor(arr, requires_grad=True, name=e["name"])
        end = max(end, e["offset"] + e["length"])
    if end != len(blob):
        raise TruncatedBlobError(
            f"{path}: blob length {len(blob)} inconsistent with manifest total {end}")
    config = TrainConfig.from_dict(manifest["config"])
    vocab = Vocab.from_dict(manifest["vocab"]) if manifest.get("vocab") else None
    return params, config, vocab
