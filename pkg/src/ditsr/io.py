"""Checkpoint container and PFM image files.

Checkpoint layout, repeated per tensor, all integers little-endian u64::

    name_len | name (UTF-8) | rank | dims[rank] | payload (f64 LE, row-major)

A sibling ``<file>.json`` manifest maps names to shapes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np


def save_tensors(path: str | Path, tensors: dict[str, np.ndarray]) -> None:
    path = Path(path)
    with open(path, "wb") as fh:
        for name, arr in tensors.items():
            # asarray, not ascontiguousarray: the latter promotes 0-d arrays to 1-d
            arr = np.asarray(arr, dtype="<f8")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<Q", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<Q", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes(order="C"))
    manifest = {name: list(np.shape(arr)) for name, arr in tensors.items()}
    manifest_path(path).write_text(json.dumps(manifest, indent=1))


def manifest_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def load_tensors(path: str | Path) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    data = Path(path).read_bytes()
    pos = 0

    def u64() -> int:
        nonlocal pos
        (v,) = struct.unpack_from("<Q", data, pos)
        pos += 8
        return v

    while pos < len(data):
        n = u64()
        name = data[pos:pos + n].decode("utf-8")
        pos += n
        rank = u64()
        shape = tuple(u64() for _ in range(rank))
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=pos).reshape(shape)
        pos += 8 * count
        out[name] = arr.astype(np.float64)
    return out


def write_pfm(path: str | Path, img: np.ndarray) -> None:
    """Write ``(H, W)`` or ``(3, H, W)`` float data as little-endian PFM."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3 and img.shape[0] == 1:
        img = img[0]
    if img.ndim == 2:
        header, pix = "Pf", img
    elif img.ndim == 3 and img.shape[0] == 3:
        header, pix = "PF", np.moveaxis(img, 0, -1)
    else:
        raise ValueError(f"PFM stores 1 or 3 channels, got shape {img.shape}")
    H, W = pix.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"{header}\n{W} {H}\n-1.0\n".encode("ascii"))
        # PFM rows run bottom-to-top
        fh.write(np.ascontiguousarray(pix[::-1], dtype="<f4").tobytes())


def read_pfm(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fh:
        header = fh.readline().strip()
        W, H = map(int, fh.readline().split())
        scale = float(fh.readline())
        dtype = "<f4" if scale < 0 else ">f4"
        pix = np.frombuffer(fh.read(), dtype=dtype)
    if header == b"PF":
        return np.moveaxis(pix.reshape(H, W, 3)[::-1], -1, 0).astype(np.float64)
    return pix.reshape(H, W)[::-1].astype(np.float64)
