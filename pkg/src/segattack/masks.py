"""Perturbation masks, fooling masks, patch partitions and target maps.

Masks are ``uint8`` H x W arrays holding 0/1. Distances are exact Euclidean
distances in pixel units: the distance transform gives the integer squared
distance D, and a threshold compares the correctly rounded sqrt(D), so
``d = sqrt(5)`` keeps a pixel at offset (1, 2) where ``D >= d * d`` would not.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np
from scipy import ndimage

UNDEFINED_TARGET = 255


@dataclass
class PatchGrid:
    masks: np.ndarray  # T x H x W uint8, pairwise disjoint
    patch_height: int
    patch_width: int
    parent: np.ndarray
    tiles: list[tuple[int, int]] = field(default_factory=list)  # top-left corner of each patch

    @property
    def patches(self) -> list[np.ndarray]:
        return list(self.masks)

    def __len__(self) -> int:
        return self.masks.shape[0]

    def union(self, indices: Iterable[int]) -> np.ndarray:
        idx = list(indices)
        if not idx:
            return np.zeros_like(self.parent)
        return self.masks[idx].max(axis=0).astype(np.uint8)


@dataclass
class TargetMap:
    grid: np.ndarray  # H x W class indices, UNDEFINED_TARGET where not valid
    valid: np.ndarray  # H x W uint8


def as_mask(x: np.ndarray) -> np.ndarray:
    return (np.asarray(x) != 0).astype(np.uint8)


def class_mask(labels: np.ndarray, class_set: Iterable[int]) -> np.ndarray:
    classes = sorted(set(int(c) for c in class_set))
    if not classes:
        raise ValueError("empty class set")
    if classes[0] < 0:
        raise ValueError("class indices must be non-negative")
    return np.isin(labels, classes).astype(np.uint8)


def _sq_distance_to(features: np.ndarray) -> np.ndarray:
    """Squared Euclidean distance (exact integer) from every pixel to the nearest True pixel."""
    edt = ndimage.distance_transform_edt(~features)
    return np.rint(np.square(edt)).astype(np.int64)


def distance_mask(labels: np.ndarray, dynamic_set: Iterable[int], d: float,
                  static_set: Iterable[int] | None = None) -> np.ndarray:
    """Static pixels whose Euclidean distance to every dynamic pixel is at least ``d``.

    Without ``static_set`` every non-dynamic pixel counts as static.
    """
    if d < 0:
        raise ValueError("d must be >= 0")
    dyn = np.isin(labels, list(dynamic_set))
    static = np.isin(labels, list(static_set)) if static_set is not None else ~dyn
    if d == 0 or not dyn.any():
        return static.astype(np.uint8)
    far = np.sqrt(_sq_distance_to(dyn)) >= d
    return (static & far).astype(np.uint8)


def nearest_static_target(labels: np.ndarray, static_set: Iterable[int],
                          dynamic_set: Iterable[int]) -> TargetMap:
    """Label each dynamic pixel with its Euclidean-nearest static pixel's class.

    Equidistant static pixels are resolved by row-major scan order: the first
    one met when scanning rows top to bottom, each left to right, wins.
    """
    labels = np.asarray(labels)
    H, W = labels.shape
    static = np.isin(labels, list(static_set))
    if not static.any():
        raise ValueError("image has no static pixels to take targets from")
    dyn = np.isin(labels, list(dynamic_set)) & ~static
    grid = np.full((H, W), UNDEFINED_TARGET, dtype=np.uint8)
    rr, cc = np.nonzero(dyn)
    if rr.size:
        d2 = _sq_distance_to(static)[rr, cc]
        out = np.full(rr.size, -1, dtype=np.int64)
        for D in np.unique(d2):
            sel = np.nonzero(d2 == D)[0]
            r0, c0 = rr[sel], cc[sel]
            got = np.full(sel.size, -1, dtype=np.int64)
            # candidate offsets in row-major order of the static pixel they reach
            for dr, dc in _offsets_on_circle(int(D)):
                open_ = got < 0
                if not open_.any():
                    break
                r, c = r0 + dr, c0 + dc
                ok = open_ & (r >= 0) & (r < H) & (c >= 0) & (c < W)
                hit = np.zeros_like(ok)
                hit[ok] = static[r[ok], c[ok]]
                got[hit] = labels[r[hit], c[hit]]
            if (got < 0).any():  # pragma: no cover - the transform guarantees a hit
                raise RuntimeError("distance transform and circle search disagree")
            out[sel] = got
        grid[rr, cc] = out.astype(np.uint8)
    return TargetMap(grid=grid, valid=dyn.astype(np.uint8))


def _offsets_on_circle(D: int) -> list[tuple[int, int]]:
    rad = math.isqrt(D)
    offs = []
    for dr in range(-rad, rad + 1):
        rem = D - dr * dr
        dc = math.isqrt(rem)
        if dc * dc == rem:
            offs.extend([(dr, -dc), (dr, dc)] if dc else [(dr, 0)])
    return offs


def patch_partition(mask: np.ndarray, h: int, w: int) -> PatchGrid:
    """Tile from the top-left in row-major order; edge tiles are truncated, empty ones dropped."""
    if h < 1 or w < 1:
        raise ValueError("patch size must be >= 1")
    parent = as_mask(mask)
    H, W = parent.shape
    masks, tiles = [], []
    for top in range(0, H, h):
        for left in range(0, W, w):
            tile = parent[top:top + h, left:left + w]
            if tile.any():
                m = np.zeros_like(parent)
                m[top:top + h, left:left + w] = tile
                masks.append(m)
                tiles.append((top, left))
    arr = np.stack(masks) if masks else np.zeros((0, H, W), dtype=np.uint8)
    return PatchGrid(masks=arr, patch_height=h, patch_width=w, parent=parent, tiles=tiles)


def center_patch_mask(H: int, W: int, h: int, w: int) -> np.ndarray:
    if h < 1 or w < 1:
        raise ValueError("patch size must be >= 1")
    if h > H or w > W:
        raise ValueError(f"patch {h}x{w} larger than image {H}x{W}")
    m = np.zeros((H, W), dtype=np.uint8)
    top, left = (H - h) // 2, (W - w) // 2
    m[top:top + h, left:left + w] = 1
    return m


def patch_size_for_area(H: int, W: int, fraction: float) -> tuple[int, int]:
    """Patch with the image's aspect ratio covering about ``fraction`` of its area."""
    if not 0 < fraction <= 1:
        raise ValueError("fraction must lie in (0, 1]")
    s = math.sqrt(fraction)
    return max(1, min(H, round(H * s))), max(1, min(W, round(W * s)))


def validate_indirect(M: np.ndarray, F: np.ndarray) -> bool:
    M, F = np.asarray(M), np.asarray(F)
    if M.shape != F.shape:
        raise ValueError(f"mask shapes differ: {M.shape} vs {F.shape}")
    return not np.any((M != 0) & (F != 0))
