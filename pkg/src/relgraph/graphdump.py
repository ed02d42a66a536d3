"""Binary affinity-matrix dumps and PPM heatmap rendering.

Dump layout: magic "GLG1", u32 format version, u8 direction (0 forward,
1 backward), u32 layer count, u32 head count, u32 sequence length, then
little-endian float32 payload ordered [layer][head][column t][row j], so
every column is one contiguous read.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"GLG1"
FORMAT_VERSION = 1
_DIR_CODE = {"forward": 0, "backward": 1}
_DIR_NAME = {v: k for k, v in _DIR_CODE.items()}


class GraphDumpError(ValueError):
    pass


def write_graph_dump(matrices: np.ndarray, direction: str, path: str) -> None:
    """matrices: (L, n_h, T, T) with [row j, column t] orientation."""
    L, n_h, T, T2 = matrices.shape
    if T != T2:
        raise GraphDumpError(f"matrices must be square, got {matrices.shape}")
    header = MAGIC + struct.pack("<IBIII", FORMAT_VERSION,
                                 _DIR_CODE[direction], L, n_h, T)
    # store column-major per matrix: [l][h][t][j]
    payload = np.ascontiguousarray(
        matrices.transpose(0, 1, 3, 2), dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)


def read_graph_dump(path: str) -> tuple[str, np.ndarray]:
    """Returns (direction, (L, n_h, T, T) float64 array in [row j,
    column t] orientation)."""
    with open(path, "rb") as fh:
        data = fh.read()
    hsize = 4 + struct.calcsize("<IBIII")
    if len(data) < hsize or data[:4] != MAGIC:
        raise GraphDumpError(f"{path}: not a graph dump (bad magic)")
    version, dcode, L, n_h, T = struct.unpack("<IBIII", data[4:hsize])
    if version != FORMAT_VERSION:
        raise GraphDumpError(f"{path}: unsupported format version {version}")
    if dcode not in _DIR_NAME:
        raise GraphDumpError(f"{path}: bad direction code {dcode}")
    n = L * n_h * T * T
    if len(data) - hsize != 4 * n:
        raise GraphDumpError(
            f"{path}: payload of {len(data) - hsize} bytes, expected {4 * n}")
    arr = np.frombuffer(data, dtype="<f4", offset=hsize).astype(np.float64)
    return _DIR_NAME[dcode], arr.reshape(L, n_h, T, T).transpose(0, 1, 3, 2)


def render_heatmap(matrix: np.ndarray, scale: int = 8) -> bytes:
    """Binary PPM (P6): value v in [0, 1] maps linearly to a white-to-dark
    gray; rows are source positions j, columns target positions t; each
    cell is scale x scale pixels."""
    if scale < 1:
        raise GraphDumpError("scale must be >= 1")
    v = np.clip(np.asarray(matrix, dtype=np.float64), 0.0, 1.0)
    gray = np.rint((1.0 - v) * 255.0).astype(np.uint8)
    img = np.repeat(np.repeat(gray, scale, axis=0), scale, axis=1)
    rgb = np.repeat(img[:, :, None], 3, axis=2)
    header = f"P6\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii")
    return header + rgb.tobytes()


def heatmap_from_dump(path: str, layer: int, head: int, scale: int = 8) -> bytes:
    direction, mats = read_graph_dump(path)
    L, n_h = mats.shape[:2]
    if not (0 <= layer < L) or not (0 <= head < n_h):
        raise GraphDumpError(
            f"layer {layer} / head {head} out of range for dump with L={L}, n_h={n_h}")
    return render_heatmap(mats[layer, head], scale)
