"""File helpers shared by the dataset, checkpoint and run-directory writers.

Checksums are SHA-256 over the raw file bytes, hex encoded. Raw tensors are
written in the ``.npy`` format, which carries dtype and shape in its header.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Any

import numpy as np
from PIL import Image

SCHEMA_VERSION = 1


class ChecksumError(ValueError):
    pass


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def write_json(path: str | Path, obj: Any) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n",
                          encoding="utf-8")


def read_json(path: str | Path) -> Any:
    return json.loads(Path(path).read_text(encoding="utf-8"))


def _json_default(obj: Any) -> Any:
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, Path):
        return str(obj)
    if isinstance(obj, (set, frozenset)):
        return sorted(obj)
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def to_uint8(image: np.ndarray) -> np.ndarray:
    """Quantize a [0, 1] float image to 8 bits (round half to even)."""
    return np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def from_uint8(image: np.ndarray) -> np.ndarray:
    return (np.asarray(image, dtype=np.float32) / np.float32(255.0)).astype(np.float32)


def save_rgb(path: str | Path, image: np.ndarray) -> None:
    """Write an H x W x 3 float image in [0, 1] as an 8-bit PNG."""
    Image.fromarray(to_uint8(image)).save(path, format="PNG")


def load_rgb(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return from_uint8(np.asarray(im.convert("RGB")))


def save_gray8(path: str | Path, grid: np.ndarray) -> None:
    arr = np.asarray(grid)
    if arr.dtype != np.uint8:
        if arr.min(initial=0) < 0 or arr.max(initial=0) > 255:
            raise ValueError("8-bit grayscale values must lie in [0, 255]")
        arr = arr.astype(np.uint8)
    Image.fromarray(arr).save(path, format="PNG")


def load_gray8(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode != "L":
            raise ValueError(f"{path}: expected 8-bit single-channel image, got mode {im.mode}")
        return np.asarray(im).copy()


def save_mask(path: str | Path, mask: np.ndarray) -> None:
    """Masks are stored as 0/255 so they are visible in an image viewer."""
    save_gray8(path, (np.asarray(mask) != 0).astype(np.uint8) * 255)


def load_mask(path: str | Path) -> np.ndarray:
    return (load_gray8(path) > 127).astype(np.uint8)


def save_gray16(path: str | Path, values: np.ndarray, lo: float | None = None,
                hi: float | None = None) -> tuple[float, float]:
    """Min-max scale a float map into a 16-bit PNG; returns the (lo, hi) used."""
    v = np.asarray(values, dtype=np.float64)
    lo = float(v.min()) if lo is None else lo
    hi = float(v.max()) if hi is None else hi
    span = hi - lo if hi > lo else 1.0
    scaled = np.clip(np.rint((v - lo) / span * 65535.0), 0, 65535).astype(np.uint16)
    Image.fromarray(scaled).save(path, format="PNG")
    return lo, hi


def save_tensor(path: str | Path, array: np.ndarray) -> None:
    np.save(path, np.asarray(array), allow_pickle=False)


def load_tensor(path: str | Path) -> np.ndarray:
    return np.load(path, allow_pickle=False)
