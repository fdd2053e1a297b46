"""Binary PGM heatmaps and the attention-dump file."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from attnatlas.errors import DataError

ATTN_MAGIC = b"ATNATLAS-ATTN v1\n"


def heatmap_pixels(m, normalize: str = "global-max") -> np.ndarray:
    """Grey levels ``round(255 * (1 - v / vmax))``; darker is larger.

    ``vmax`` is the matrix maximum (``global-max``) or each row's maximum
    (``per-row``); a zero maximum is treated as 1. Halves round up.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or not np.all(np.isfinite(m)):
        raise DataError("heatmap needs a finite 2-D matrix")
    if (m < 0).any():
        raise DataError("heatmap needs non-negative values")
    if normalize == "global-max":
        vmax = np.full((m.shape[0], 1), m.max() if m.size else 0.0)
    elif normalize == "per-row":
        vmax = m.max(axis=1, keepdims=True)
    else:
        raise ValueError(f"unknown normalisation {normalize!r}")
    vmax = np.where(vmax > 0, vmax, 1.0)
    return np.floor(255.0 * (1.0 - m / vmax) + 0.5).astype(np.uint8)


def render_heatmap(m, path, normalize: str = "global-max") -> None:
    """Write ``m`` as a binary greyscale PGM (P5, maxval 255), one pixel per cell."""
    px = heatmap_pixels(m, normalize)
    rows, cols = px.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{cols} {rows}\n255\n".encode("ascii"))
        fh.write(px.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    if len(parts) < 5 or parts[0] != b"P5" or parts[3] != b"255":
        raise DataError(f"{path}: not an 8-bit binary PGM")
    cols, rows = int(parts[1]), int(parts[2])
    pixels = np.frombuffer(parts[4], dtype=np.uint8)
    if pixels.size != rows * cols:
        raise DataError(f"{path}: expected {rows * cols} pixels, found {pixels.size}")
    return pixels.reshape(rows, cols)


def write_attention_dump(path, tensors, example_indices=None) -> None:
    """Tensors of shape ``(n_layers, n_heads, L, L)``, one per example.

    Payload: little-endian float64, per example layer-major then head-major,
    rows row-major. Offsets in the header are relative to the payload start.
    """
    if not tensors:
        raise DataError("nothing to dump")
    n_layers, n_heads = tensors[0].shape[:2]
    lengths, offsets = [], []
    offset = 0
    for t in tensors:
        if t.shape[:2] != (n_layers, n_heads) or t.shape[2] != t.shape[3]:
            raise DataError(f"inconsistent attention tensor shape {t.shape}")
        lengths.append(int(t.shape[2]))
        offsets.append(offset)
        offset += t.size * 8
    header = {
        "n_layers": n_layers,
        "n_heads": n_heads,
        "lengths": lengths,
        "offsets": offsets,
        "examples": list(example_indices) if example_indices is not None else list(range(len(tensors))),
        "payload_bytes": offset,
    }
    with open(path, "wb") as fh:
        fh.write(ATTN_MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        for t in tensors:
            fh.write(np.ascontiguousarray(t, dtype="<f8").tobytes())


def read_attention_dump(path):
    """Returns ``(header, tensors)``; rejects any header/payload disagreement."""
    data = Path(path).read_bytes()
    if not data.startswith(ATTN_MAGIC):
        raise DataError(f"{path}: not an attention dump or unsupported version")
    rest = data[len(ATTN_MAGIC):]
    nl = rest.find(b"\n")
    if nl < 0:
        raise DataError(f"{path}: truncated header")
    try:
        header = json.loads(rest[:nl].decode("utf-8"))
        n_layers, n_heads = int(header["n_layers"]), int(header["n_heads"])
        lengths, offsets = list(header["lengths"]), list(header["offsets"])
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{path}: corrupt header ({exc})") from None
    payload = rest[nl + 1:]
    if len(lengths) != len(offsets):
        raise DataError(f"{path}: {len(lengths)} lengths but {len(offsets)} offsets")
    expected = 0
    for L, off in zip(lengths, offsets):
        if off != expected:
            raise DataError(f"{path}: offset {off} does not follow the declared lengths (expected {expected})")
        expected += n_layers * n_heads * L * L * 8
    if expected != len(payload):
        raise DataError(f"{path}: payload is {len(payload)} bytes, header implies {expected}")
    tensors = []
    for L, off in zip(lengths, offsets):
        n = n_layers * n_heads * L * L
        arr = np.frombuffer(payload, dtype="<f8", count=n, offset=off).astype(np.float64)
        tensors.append(arr.reshape(n_layers, n_heads, L, L))
    return header, tensors

